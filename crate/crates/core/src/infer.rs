//! Fast f32 inference for ME-Net using Winograd F(4×4, 3×3) convolutions.
//!
//! Each 3×3 layer becomes 36 small GEMMs per row of 4×4 output tiles. All
//! activations live in one zero-bordered buffer laid out as
//! `[image | c1 | c2 | c3 | c4 | c5]`, so every concatenation the network
//! needs is a contiguous channel range and costs nothing. Layers advance
//! together one tile row at a time, so each channel keeps only a short ring
//! of rows and the working set stays cache-sized. The two heads are fused
//! into one `2I`-output layer.
//!
//! Padded activation rows are split into four column phases (column mod 4),
//! so each of the six columns of every tile window is a contiguous run.

use std::ops::{Add, Mul, Sub};

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::menet::{MapStack, MeNetParams, FEATURES};
use crate::tensor::{ImageTensor, Tensor};

const LANES: usize = 16;
const OC_BLOCK: usize = 8;
/// Output tile edge.
const TILE: usize = 4;
/// Input window edge, `TILE + 2`.
const WIN: usize = 6;
const POSITIONS: usize = WIN * WIN;
/// Extra floats between transform positions so their rows do not share L1 sets.
const SKEW: usize = 48;
/// Padded rows kept per activation channel. Layers run one tile row behind their inputs and
/// read at most two layers back, so at most 14 rows (with the bottom padding) are live at once.
const RING: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Avx512,
    Portable,
}

impl Backend {
    pub fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                return Backend::Avx512;
            }
        }
        Backend::Portable
    }

    pub fn is_available(self) -> bool {
        match self {
            Backend::Portable => true,
            Backend::Avx512 => Backend::detect() == Backend::Avx512,
        }
    }
}

/// Sixteen tiles' worth of one transform value. Plain array arithmetic, which
/// LLVM maps onto whatever vector width the enclosing function allows.
#[derive(Clone, Copy)]
struct Lane([f32; LANES]);

impl Lane {
    #[inline(always)]
    fn load(s: &[f32]) -> Self {
        Lane(s[..LANES].try_into().expect("a full lane"))
    }

    #[inline(always)]
    fn store(self, d: &mut [f32]) {
        d[..LANES].copy_from_slice(&self.0);
    }

    #[inline(always)]
    fn splat(v: f32) -> Self {
        Lane([v; LANES])
    }
}

macro_rules! lane_op {
    ($tr:ident, $f:ident, $op:tt) => {
        impl $tr for Lane {
            type Output = Lane;
            #[inline(always)]
            fn $f(self, o: Lane) -> Lane {
                Lane(std::array::from_fn(|i| self.0[i] $op o.0[i]))
            }
        }
    };
}
lane_op!(Add, add, +);
lane_op!(Sub, sub, -);

impl Mul<f32> for Lane {
    type Output = Lane;
    #[inline(always)]
    fn mul(self, k: f32) -> Lane {
        Lane(self.0.map(|v| v * k))
    }
}

/// `Bᵀ d` for one column of six values.
#[inline(always)]
fn input_1d(d: [Lane; WIN]) -> [Lane; WIN] {
    let [d0, d1, d2, d3, d4, d5] = d;
    let (p, q) = (d4 - d2 * 4.0, d3 - d1 * 4.0);
    let (r, s) = (d4 - d2, (d3 - d1) * 2.0);
    [
        d0 * 4.0 - d2 * 5.0 + d4,
        p + q,
        p - q,
        r + s,
        r - s,
        d1 * 4.0 - d3 * 5.0 + d5,
    ]
}

/// `Aᵀ m` for one column of six values.
#[inline(always)]
fn output_1d(m: [Lane; WIN]) -> [Lane; TILE] {
    let [m0, m1, m2, m3, m4, m5] = m;
    let (a, b) = (m1 + m2, m1 - m2);
    let (c, d) = (m3 + m4, m3 - m4);
    [m0 + a + c, b + d * 2.0, a + c * 4.0, b + d * 8.0 + m5]
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Output {
    /// ReLU into the activation buffer starting at this channel.
    Relu(usize),
    /// Raw pre-activations into the head buffer.
    Heads,
}

struct WinogradLayer {
    in_start: usize,
    in_channels: usize,
    out_channels: usize,
    /// Padded up to a multiple of `OC_BLOCK`.
    oc_padded: usize,
    /// `[p][oc block][ic][OC_BLOCK]` transformed filters.
    u: Vec<f32>,
    bias: Vec<f32>,
    output: Output,
}

const G: [[f64; 3]; WIN] = [
    [1.0 / 4.0, 0.0, 0.0],
    [-1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, 1.0 / 6.0, -1.0 / 6.0],
    [1.0 / 24.0, 1.0 / 12.0, 1.0 / 6.0],
    [1.0 / 24.0, -1.0 / 12.0, 1.0 / 6.0],
    [0.0, 0.0, 1.0],
];

/// `U = G g Gᵀ` for one 3×3 kernel, computed in f64.
fn transform_filter(g: &[f32]) -> [f64; POSITIONS] {
    let mut tmp = [[0.0f64; 3]; WIN];
    for (r, row) in tmp.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| G[r][k] * g[k * 3 + c] as f64).sum();
        }
    }
    let mut u = [0.0f64; POSITIONS];
    for r in 0..WIN {
        for c in 0..WIN {
            u[r * WIN + c] = (0..3).map(|k| tmp[r][k] * G[c][k]).sum();
        }
    }
    u
}

impl WinogradLayer {
    fn new(layers: &[&ConvLayer<f32>], in_start: usize, output: Output) -> Self {
        let in_channels = layers[0].in_channels;
        let out_channels: usize = layers.iter().map(|l| l.out_channels).sum();
        let oc_padded = out_channels.div_ceil(OC_BLOCK) * OC_BLOCK;
        let blocks = oc_padded / OC_BLOCK;
        let mut u = vec![0.0f32; POSITIONS * oc_padded * in_channels];
        let mut bias = vec![0.0f32; oc_padded];
        let mut oc = 0;
        for layer in layers {
            for o in 0..layer.out_channels {
                bias[oc] = layer.bias[o];
                for ic in 0..in_channels {
                    let start = layer.weight_index(o, ic, 0, 0);
                    let t = transform_filter(&layer.weight[start..start + 9]);
                    let (ob, lane) = (oc / OC_BLOCK, oc % OC_BLOCK);
                    for (p, v) in t.iter().enumerate() {
                        u[((p * blocks + ob) * in_channels + ic) * OC_BLOCK + lane] = *v as f32;
                    }
                }
                oc += 1;
            }
        }
        WinogradLayer {
            in_start,
            in_channels,
            out_channels,
            oc_padded,
            u,
            bias,
            output,
        }
    }
}

/// Zeroed f32 storage aligned to a cache line, so full-lane accesses never split lines.
struct AlignedBuf {
    blocks: Vec<Block>,
    len: usize,
}

#[derive(Clone, Copy)]
#[repr(C, align(64))]
struct Block([f32; LANES]);

impl AlignedBuf {
    fn zeros(len: usize) -> Self {
        AlignedBuf {
            blocks: vec![Block([0.0; LANES]); len.div_ceil(LANES)],
            len,
        }
    }
}

impl std::ops::Deref for AlignedBuf {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        // SAFETY: `Block` is a plain `[f32; LANES]` with extra alignment, and
        // `len` never exceeds the floats held by `blocks`.
        unsafe { std::slice::from_raw_parts(self.blocks.as_ptr().cast::<f32>(), self.len) }
    }
}

impl std::ops::DerefMut for AlignedBuf {
    fn deref_mut(&mut self) -> &mut [f32] {
        // SAFETY: as for `deref`, with unique access through `&mut self`.
        unsafe { std::slice::from_raw_parts_mut(self.blocks.as_mut_ptr().cast::<f32>(), self.len) }
    }
}

/// Buffers sized for one input resolution.
struct Workspace {
    height: usize,
    width: usize,
    tiles_y: usize,
    /// Tile-row stride, a multiple of `LANES`.
    tile_stride: usize,
    /// Length of one column phase within a padded row; leaves room for whole-lane reads.
    phase: usize,
    pad_h: usize,
    act: AlignedBuf,
    heads: Vec<f32>,
    v: AlignedBuf,
    m: AlignedBuf,
    /// Inverse-transformed outputs, `[row][column]` within the tile.
    y: [Vec<f32>; TILE * TILE],
}

impl Workspace {
    fn new(
        height: usize,
        width: usize,
        act_channels: usize,
        head_channels: usize,
        max_ic: usize,
        max_oc: usize,
    ) -> Self {
        let (tiles_y, tiles_x) = (height.div_ceil(TILE), width.div_ceil(TILE));
        let tile_stride = tiles_x.div_ceil(LANES) * LANES;
        let phase = tile_stride + LANES;
        let pad_h = TILE * tiles_y + 2;
        Workspace {
            height,
            width,
            tiles_y,
            tile_stride,
            phase,
            pad_h,
            act: AlignedBuf::zeros(act_channels * RING * TILE * phase),
            heads: vec![0.0; head_channels * height * width],
            v: AlignedBuf::zeros(POSITIONS * (max_ic * tile_stride + SKEW)),
            m: AlignedBuf::zeros(POSITIONS * (max_oc * tile_stride + SKEW)),
            y: std::array::from_fn(|_| vec![0.0; tile_stride]),
        }
    }

    fn row_len(&self) -> usize {
        TILE * self.phase
    }

    /// Offset of padded row `r` of `channel` within the ring.
    fn row(&self, channel: usize, r: usize) -> usize {
        (channel * RING + r % RING) * self.row_len()
    }

    /// Zeroes padded rows `from..pad_h` of `channels`, the bottom padding once a producer is done.
    fn clear_rows(&mut self, channels: std::ops::Range<usize>, from: usize) {
        for ch in channels {
            for r in from..self.pad_h {
                let at = self.row(ch, r);
                let len = self.row_len();
                self.act[at..at + len].fill(0.0);
            }
        }
    }

    /// Offset of padded column `c` within a row.
    fn column(&self, c: usize) -> usize {
        (c % TILE) * self.phase + c / TILE
    }
}

/// Pre-transformed ME-Net ready for repeated f32 inference.
pub struct InferenceNet {
    iterations: usize,
    layers: Vec<WinogradLayer>,
    backend: Backend,
    workspace: Option<Workspace>,
}

const ACT_CHANNELS: usize = 3 + 5 * FEATURES;

impl InferenceNet {
    pub fn new(params: &MeNetParams<f32>) -> Self {
        Self::with_backend(params, Backend::detect())
    }

    /// Falls back to the portable kernels if `backend` is not supported here.
    pub fn with_backend(params: &MeNetParams<f32>, backend: Backend) -> Self {
        let backend = if backend.is_available() {
            backend
        } else {
            Backend::Portable
        };
        let f = FEATURES;
        let c = |k: usize| 3 + (k - 1) * f;
        let layers = vec![
            WinogradLayer::new(&[&params.conv1], 0, Output::Relu(c(1))),
            WinogradLayer::new(&[&params.conv2], c(1), Output::Relu(c(2))),
            WinogradLayer::new(&[&params.conv3], c(1), Output::Relu(c(3))),
            WinogradLayer::new(&[&params.conv4], c(2), Output::Relu(c(4))),
            WinogradLayer::new(&[&params.conv5], c(3), Output::Relu(c(5))),
            WinogradLayer::new(&[&params.head_e, &params.head_n], c(4), Output::Heads),
        ];
        InferenceNet {
            iterations: params.iterations(),
            layers,
            backend,
            workspace: None,
        }
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// `(E, N)` stacks for `image`.
    pub fn maps(&mut self, image: &ImageTensor) -> Result<(MapStack<f32>, MapStack<f32>)> {
        if image.channels() != 3 {
            return Err(Error::shape(format!(
                "network input must have 3 channels, got {}",
                image.shape()
            )));
        }
        let (h, w) = (image.height(), image.width());
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("empty image {}", image.shape())));
        }
        let reuse = matches!(&self.workspace, Some(ws) if ws.height == h && ws.width == w);
        if !reuse {
            let max_ic = self.layers.iter().map(|l| l.in_channels).max().unwrap_or(0);
            let max_oc = self.layers.iter().map(|l| l.oc_padded).max().unwrap_or(0);
            self.workspace = Some(Workspace::new(h, w, ACT_CHANNELS, 2 * self.iterations, max_ic, max_oc));
        }
        let ws = self.workspace.as_mut().expect("workspace allocated above");
        // Row 0 is the top padding; its ring slot still holds rows of the previous image.
        for ch in 0..ACT_CHANNELS {
            let at = ws.row(ch, 0);
            let len = ws.row_len();
            ws.act[at..at + len].fill(0.0);
        }
        run_network(&self.layers, ws, image, self.backend);

        let it = self.iterations;
        let mut e = Tensor::zeros(it, h, w);
        let mut n = Tensor::zeros(it, h, w);
        activate_heads(self.backend, &ws.heads, e.data_mut(), n.data_mut());
        Ok((MapStack::new(e), MapStack::new(n)))
    }
}

/// `E = 1 + tanh`, `N = tanh` over the raw head outputs.
fn activate_heads(backend: Backend, heads: &[f32], e: &mut [f32], n: &mut [f32]) {
    #[inline(always)]
    fn body(heads: &[f32], e: &mut [f32], n: &mut [f32]) {
        let (he, hn) = heads.split_at(e.len());
        for (d, s) in e.iter_mut().zip(he) {
            *d = 1.0 + fast_tanh(*s);
        }
        for (d, s) in n.iter_mut().zip(hn) {
            *d = fast_tanh(*s);
        }
    }
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn body_avx512(heads: &[f32], e: &mut [f32], n: &mut [f32]) {
        body(heads, e, n)
    }
    match backend {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the backend is only selected when avx512f is detected.
        Backend::Avx512 => unsafe { body_avx512(heads, e, n) },
        _ => body(heads, e, n),
    }
}

fn run_network(layers: &[WinogradLayer], ws: &mut Workspace, image: &ImageTensor, backend: Backend) {
    match backend {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the backend is only selected when avx512f is detected.
        Backend::Avx512 => unsafe { run_network_avx512(layers, ws, image) },
        _ => run_network_body(layers, ws, image, backend),
    }
}

/// Same code as the portable path, compiled so the transforms vectorize with AVX-512 too.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn run_network_avx512(layers: &[WinogradLayer], ws: &mut Workspace, image: &ImageTensor) {
    run_network_body(layers, ws, image, Backend::Avx512)
}

/// Wavefront over tile rows: at step `s` the image fills tile row `s` and layer `l`
/// computes tile row `s - 1 - l`, whose window ends inside its inputs' newest tile row.
/// Activations then stay in a small ring of rows instead of whole planes.
#[inline(always)]
fn run_network_body(layers: &[WinogradLayer], ws: &mut Workspace, image: &ImageTensor, backend: Backend) {
    for step in 0..ws.tiles_y + layers.len() {
        if step < ws.tiles_y {
            load_input_rows(ws, image, step);
        }
        for (l, layer) in layers.iter().enumerate() {
            match step.checked_sub(l + 1) {
                Some(ty) if ty < ws.tiles_y => {
                    input_transform(layer, ws, ty, backend);
                    transformed_gemm(layer, ws, backend);
                    output_transform(layer, ws, ty, backend);
                }
                _ => {}
            }
        }
    }
}

/// Copies the image rows of tile row `ty` into the first three ring channels.
fn load_input_rows(ws: &mut Workspace, image: &ImageTensor, ty: usize) {
    let (h, w) = (ws.height, ws.width);
    let rows = TILE * ty..(TILE * ty + TILE).min(h);
    for c in 0..3 {
        let src = image.plane(c);
        for y in rows.clone() {
            let row = ws.row(c, y + 1);
            // Unpadded column x sits at padded column x + 1.
            for (x, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                let at = row + ws.column(x + 1);
                ws.act[at] = v;
            }
        }
    }
    if ty + 1 == ws.tiles_y {
        ws.clear_rows(0..3, h + 1);
    }
}

/// `V = Bᵀ d B` for every tile in row `ty` and every input channel.
#[inline(always)]
fn input_transform(layer: &WinogradLayer, ws: &mut Workspace, ty: usize, backend: Backend) {
    let (stride, row_len) = (ws.tile_stride, ws.row_len());
    let gap = layer.in_channels * stride + SKEW;
    // Window column c of tile k is padded column 4k + c.
    let cols: [usize; WIN] = std::array::from_fn(|c| ws.column(c));
    assert!(cols[WIN - 1] + stride <= row_len);
    for ic in 0..layer.in_channels {
        let rows: [usize; WIN] = std::array::from_fn(|r| ws.row(layer.in_start + ic, TILE * ty + r));
        let src = &ws.act[..];
        let dst = &mut ws.v[ic * stride..];
        #[cfg(target_arch = "x86_64")]
        if backend == Backend::Avx512 {
            assert!(rows.iter().all(|&r| r + row_len <= src.len()) && dst.len() >= (POSITIONS - 1) * gap + stride);
            // SAFETY: avx512f was detected; the asserts bound every read and write.
            unsafe { avx512::input_tiles(src.as_ptr(), rows, cols, dst.as_mut_ptr(), gap, stride) };
            continue;
        }
        for k in (0..stride).step_by(LANES) {
            let d: [[Lane; WIN]; WIN] =
                std::array::from_fn(|r| std::array::from_fn(|c| Lane::load(&src[rows[r] + cols[c] + k..])));
            let mut t = [[Lane::splat(0.0); WIN]; WIN];
            for c in 0..WIN {
                let col = input_1d(std::array::from_fn(|r| d[r][c]));
                for (r, v) in col.into_iter().enumerate() {
                    t[r][c] = v;
                }
            }
            for (r, row) in t.into_iter().enumerate() {
                for (c, v) in input_1d(row).into_iter().enumerate() {
                    v.store(&mut dst[(r * WIN + c) * gap + k..]);
                }
            }
        }
    }
}

/// `M_p = U_p · V_p` for all 36 transform positions.
#[inline(always)]
fn transformed_gemm(layer: &WinogradLayer, ws: &mut Workspace, backend: Backend) {
    let (ic_n, ocp, stride) = (layer.in_channels, layer.oc_padded, ws.tile_stride);
    let blocks = ocp / OC_BLOCK;
    let (v_gap, m_gap) = (ic_n * stride + SKEW, ocp * stride + SKEW);
    assert!(ws.v.len() >= POSITIONS * v_gap && ws.m.len() >= POSITIONS * m_gap);
    assert_eq!(layer.u.len(), POSITIONS * ocp * ic_n);
    for p in 0..POSITIONS {
        for ob in 0..blocks {
            let u = &layer.u[(p * blocks + ob) * ic_n * OC_BLOCK..][..ic_n * OC_BLOCK];
            let v_off = p * v_gap;
            let m_off = p * m_gap + ob * OC_BLOCK * stride;
            let mut t = 0;
            while t < stride {
                let width = (stride - t).min(3 * LANES);
                let v = &ws.v[v_off + t..];
                let m = &mut ws.m[m_off + t..];
                match width / LANES {
                    3 => micro_kernel::<3>(backend, u, v, stride, ic_n, m, stride),
                    2 => micro_kernel::<2>(backend, u, v, stride, ic_n, m, stride),
                    _ => micro_kernel::<1>(backend, u, v, stride, ic_n, m, stride),
                }
                t += width;
            }
        }
    }
}

/// `Y = Aᵀ M A` plus bias for one output channel.
#[inline(always)]
fn inverse_tiles(backend: Backend, m: [&[f32]; POSITIONS], bias: f32, y: &mut [Vec<f32>; TILE * TILE]) {
    let n = y[0].len();
    assert!(n.is_multiple_of(LANES) && m.iter().all(|r| r.len() >= n) && y.iter().all(|r| r.len() == n));
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Avx512 {
        // SAFETY: avx512f was detected and every pointer covers `n` floats.
        unsafe { avx512::inverse_tiles(m.map(<[f32]>::as_ptr), bias, y.each_mut().map(|r| r.as_mut_ptr()), n) };
        return;
    }
    for k in (0..n).step_by(LANES) {
        let mut t = [[Lane::splat(0.0); WIN]; TILE];
        for c in 0..WIN {
            let col = output_1d(std::array::from_fn(|r| Lane::load(&m[r * WIN + c][k..])));
            for (r, v) in col.into_iter().enumerate() {
                t[r][c] = v;
            }
        }
        for (r, row) in t.into_iter().enumerate() {
            for (c, v) in output_1d(row).into_iter().enumerate() {
                (v + Lane::splat(bias)).store(&mut y[r * TILE + c][k..]);
            }
        }
    }
}

#[inline(always)]
fn relu_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.max(0.0);
    }
}

/// Inverse transform, bias and activation for every output channel of tile row `ty`.
#[inline(always)]
fn output_transform(layer: &WinogradLayer, ws: &mut Workspace, ty: usize, backend: Backend) {
    let (stride, ocp) = (ws.tile_stride, layer.oc_padded);
    let (h, w) = (ws.height, ws.width);
    let rows_here = (h - TILE * ty).min(TILE);
    // Tiles whose output column j lies inside the image, and where that column starts in a row.
    let count: [usize; TILE] = std::array::from_fn(|j| if w > j { (w - j).div_ceil(TILE) } else { 0 });
    let dst_col: [usize; TILE] = std::array::from_fn(|j| ws.column(j + 1));
    for oc in 0..layer.out_channels {
        let m = std::array::from_fn(|p| &ws.m[p * (ocp * stride + SKEW) + oc * stride..][..stride]);
        inverse_tiles(backend, m, layer.bias[oc], &mut ws.y);
        match layer.output {
            Output::Relu(start) => {
                for i in 0..rows_here {
                    let row = ws.row(start + oc, TILE * ty + 1 + i);
                    for j in 0..TILE {
                        let at = row + dst_col[j];
                        relu_into(&mut ws.act[at..at + count[j]], &ws.y[i * TILE + j]);
                    }
                }
            }
            Output::Heads => {
                for i in 0..rows_here {
                    let o = oc * h * w + (TILE * ty + i) * w;
                    for (x, d) in ws.heads[o..o + w].iter_mut().enumerate() {
                        *d = ws.y[i * TILE + x % TILE][x / TILE];
                    }
                }
            }
        }
    }
    if let Output::Relu(start) = layer.output {
        if ty + 1 == ws.tiles_y {
            ws.clear_rows(start..start + layer.out_channels, h + 1);
        }
    }
}

/// `m[o][t] = Σ_k u[k][o] · v[k][t]` over an `OC_BLOCK × 16·NV` block.
#[inline(always)]
fn micro_kernel<const NV: usize>(
    backend: Backend,
    u: &[f32],
    v: &[f32],
    v_stride: usize,
    k: usize,
    m: &mut [f32],
    m_stride: usize,
) {
    let width = NV * LANES;
    assert!(u.len() >= k * OC_BLOCK);
    assert!(k == 0 || v.len() >= (k - 1) * v_stride + width);
    assert!(m.len() >= (OC_BLOCK - 1) * m_stride + width);
    match backend {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the backend is only selected when avx512f is detected, and
        // the asserts above cover every offset the kernel touches.
        Backend::Avx512 => unsafe {
            avx512::micro_kernel::<NV>(u.as_ptr(), v.as_ptr(), v_stride, k, m.as_mut_ptr(), m_stride)
        },
        _ => portable_micro_kernel::<NV>(u, v, v_stride, k, m, m_stride),
    }
}

#[inline(always)]
fn portable_micro_kernel<const NV: usize>(
    u: &[f32],
    v: &[f32],
    v_stride: usize,
    k: usize,
    m: &mut [f32],
    m_stride: usize,
) {
    let mut acc = [[[0.0f32; LANES]; NV]; OC_BLOCK];
    for kk in 0..k {
        let row = &v[kk * v_stride..];
        let weights = &u[kk * OC_BLOCK..(kk + 1) * OC_BLOCK];
        for (o, &wt) in weights.iter().enumerate() {
            for j in 0..NV {
                for l in 0..LANES {
                    acc[o][j][l] += wt * row[j * LANES + l];
                }
            }
        }
    }
    for (o, a) in acc.iter().enumerate() {
        for j in 0..NV {
            m[o * m_stride + j * LANES..][..LANES].copy_from_slice(&a[j]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{LANES, OC_BLOCK, POSITIONS, TILE, WIN};
    use std::arch::x86_64::*;

    /// Vector form of `input_1d`.
    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn input_1d(d: [__m512; WIN]) -> [__m512; WIN] {
        let [d0, d1, d2, d3, d4, d5] = d;
        let (four, five, two) = (_mm512_set1_ps(4.0), _mm512_set1_ps(5.0), _mm512_set1_ps(2.0));
        let p = _mm512_fnmadd_ps(d2, four, d4);
        let q = _mm512_fnmadd_ps(d1, four, d3);
        let r = _mm512_sub_ps(d4, d2);
        let s = _mm512_mul_ps(_mm512_sub_ps(d3, d1), two);
        [
            _mm512_fnmadd_ps(d2, five, _mm512_fmadd_ps(d0, four, d4)),
            _mm512_add_ps(p, q),
            _mm512_sub_ps(p, q),
            _mm512_add_ps(r, s),
            _mm512_sub_ps(r, s),
            _mm512_fnmadd_ps(d3, five, _mm512_fmadd_ps(d1, four, d5)),
        ]
    }

    /// Vector form of `output_1d`.
    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn output_1d(m: [__m512; WIN]) -> [__m512; TILE] {
        let [m0, m1, m2, m3, m4, m5] = m;
        let (a, b) = (_mm512_add_ps(m1, m2), _mm512_sub_ps(m1, m2));
        let (c, d) = (_mm512_add_ps(m3, m4), _mm512_sub_ps(m3, m4));
        [
            _mm512_add_ps(_mm512_add_ps(m0, a), c),
            _mm512_fmadd_ps(d, _mm512_set1_ps(2.0), b),
            _mm512_fmadd_ps(c, _mm512_set1_ps(4.0), a),
            _mm512_add_ps(_mm512_fmadd_ps(d, _mm512_set1_ps(8.0), b), m5),
        ]
    }

    /// `V = Bᵀ d B` for one input channel of a tile row.
    ///
    /// # Safety
    /// Requires avx512f; `src` must cover `rows[r] + cols[5] + stride` floats for every `r`
    /// and `dst` must cover `35 * gap + stride`.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn input_tiles(
        src: *const f32,
        rows: [usize; WIN],
        cols: [usize; WIN],
        dst: *mut f32,
        gap: usize,
        stride: usize,
    ) {
        let mut k = 0;
        while k < stride {
            let mut t = [[_mm512_setzero_ps(); WIN]; WIN];
            for c in 0..WIN {
                let col = input_1d(std::array::from_fn(|r| _mm512_loadu_ps(src.add(rows[r] + cols[c] + k))));
                for r in 0..WIN {
                    t[r][c] = col[r];
                }
            }
            for (r, row) in t.iter().enumerate() {
                for (c, v) in input_1d(*row).iter().enumerate() {
                    _mm512_storeu_ps(dst.add((r * WIN + c) * gap + k), *v);
                }
            }
            k += LANES;
        }
    }

    /// `Y = Aᵀ M A + bias` for one output channel.
    ///
    /// # Safety
    /// Requires avx512f; every pointer must be valid for `n` floats, `n` a multiple of `LANES`.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn inverse_tiles(m: [*const f32; POSITIONS], bias: f32, y: [*mut f32; TILE * TILE], n: usize) {
        let b = _mm512_set1_ps(bias);
        let mut k = 0;
        while k < n {
            let mut t = [[_mm512_setzero_ps(); WIN]; TILE];
            for c in 0..WIN {
                let col = output_1d(std::array::from_fn(|r| _mm512_loadu_ps(m[r * WIN + c].add(k))));
                for r in 0..TILE {
                    t[r][c] = col[r];
                }
            }
            for (r, row) in t.iter().enumerate() {
                for (c, v) in output_1d(*row).iter().enumerate() {
                    _mm512_storeu_ps(y[r * TILE + c].add(k), _mm512_add_ps(*v, b));
                }
            }
            k += LANES;
        }
    }

    /// # Safety
    /// Requires avx512f; `u`, `v` and `m` must be valid for the offsets
    /// checked by the caller.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn micro_kernel<const NV: usize>(
        u: *const f32,
        v: *const f32,
        v_stride: usize,
        k: usize,
        m: *mut f32,
        m_stride: usize,
    ) {
        let mut acc = [[_mm512_setzero_ps(); NV]; OC_BLOCK];
        for kk in 0..k {
            let row = v.add(kk * v_stride);
            let mut x = [_mm512_setzero_ps(); NV];
            for (j, xj) in x.iter_mut().enumerate() {
                *xj = _mm512_loadu_ps(row.add(j * LANES));
            }
            let wts = u.add(kk * OC_BLOCK);
            for (o, acc_o) in acc.iter_mut().enumerate() {
                let wt = _mm512_set1_ps(*wts.add(o));
                for j in 0..NV {
                    acc_o[j] = _mm512_fmadd_ps(wt, x[j], acc_o[j]);
                }
            }
        }
        for (o, acc_o) in acc.iter().enumerate() {
            for (j, a) in acc_o.iter().enumerate() {
                _mm512_storeu_ps(m.add(o * m_stride + j * LANES), *a);
            }
        }
    }
}

/// `tanh` via a branch-free `exp`; absolute error below 2e-7 and `fast_tanh(0) == 0`.
#[inline]
pub fn fast_tanh(x: f32) -> f32 {
    let a = x.abs().min(10.0);
    let e = fast_exp(2.0 * a);
    let t = 1.0 - 2.0 / (e + 1.0);
    t.copysign(x)
}

/// `exp(x)` for `x ∈ [0, 20]` by range reduction to `[-ln2/2, ln2/2]`.
#[inline]
fn fast_exp(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Adding 1.5·2²³ rounds to the nearest integer without a libm call.
    const ROUND: f32 = 12_582_912.0;
    let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhancer::enhance;
    use crate::menet::forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn backends() -> Vec<Backend> {
        let mut b = vec![Backend::Portable];
        if Backend::Avx512.is_available() {
            b.push(Backend::Avx512);
        }
        b
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn filter_transform_of_delta() {
        let mut g = [0.0f32; 9];
        g[4] = 1.0;
        let u = transform_filter(&g);
        // G e₁ is G's middle column, so U is its outer product with itself.
        let col = G.map(|r| r[1]);
        for r in 0..WIN {
            for c in 0..WIN {
                assert!((u[r * WIN + c] - col[r] * col[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_reference_forward() {
        let params = MeNetParams::<f32>::init(11, 8, 0.1);
        let reference = params.cast::<f64>();
        // Widths 150 and 270 span several lane chunks and both GEMM block widths.
        for (h, w) in [(32, 48), (17, 23), (67, 19), (1, 1), (2, 5), (6, 150), (5, 270)] {
            let img = random_image(h, w, (h * 100 + w) as u64);
            let (e_ref, n_ref, _) = forward(&img.cast::<f64>(), &reference).unwrap();
            for backend in backends() {
                let mut net = InferenceNet::with_backend(&params, backend);
                let (e, n) = net.maps(&img).unwrap();
                let de = e.as_tensor().cast::<f64>().max_abs_diff(e_ref.as_tensor());
                let dn = n.as_tensor().cast::<f64>().max_abs_diff(n_ref.as_tensor());
                assert!(de < 3e-5 && dn < 3e-5, "{backend:?} {h}x{w}: {de} {dn}");
            }
        }
    }

    #[test]
    fn workspace_reuse_and_resize() {
        let params = MeNetParams::<f32>::init(3, 8, 0.1);
        let mut net = InferenceNet::new(&params);
        let a = random_image(20, 20, 1);
        let b = random_image(9, 14, 2);
        let first = net.maps(&a).unwrap();
        let _ = net.maps(&b).unwrap();
        // Same size as `a`, so its rows are still in the reused buffers.
        let _ = net.maps(&ImageTensor::filled(3, 20, 20, 1.0)).unwrap();
        let again = net.maps(&a).unwrap();
        assert_eq!(first.0, again.0);
        assert_eq!(first.1, again.1);
    }

    #[test]
    fn zero_network_is_exact_identity() {
        let params = MeNetParams::<f32>::zeros(8);
        let img = random_image(33, 40, 5);
        for backend in backends() {
            let mut net = InferenceNet::with_backend(&params, backend);
            let (e, n) = net.maps(&img).unwrap();
            assert!(e.as_tensor().data().iter().all(|&v| v == 1.0));
            assert!(n.as_tensor().data().iter().all(|&v| v == 0.0));
            assert_eq!(enhance(&img, &e, &n).unwrap().final_image, img);
        }
    }

    #[test]
    fn other_iteration_counts() {
        let params = MeNetParams::<f32>::init(4, 3, 0.1);
        let img = random_image(12, 12, 6);
        let (e_ref, _, _) = forward(&img, &params).unwrap();
        let (e, n) = InferenceNet::new(&params).maps(&img).unwrap();
        assert_eq!((e.iterations(), n.iterations()), (3, 3));
        assert!(e.as_tensor().max_abs_diff(e_ref.as_tensor()) < 1e-5);
    }

    #[test]
    fn rejects_non_rgb() {
        let mut net = InferenceNet::new(&MeNetParams::zeros(8));
        assert!(matches!(net.maps(&Tensor::zeros(1, 4, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn tanh_accuracy() {
        assert_eq!(fast_tanh(0.0), 0.0);
        let mut worst = 0.0f64;
        for i in -200_000..=200_000 {
            let x = i as f32 * 1e-4;
            worst = worst.max((fast_tanh(x) as f64 - (x as f64).tanh()).abs());
        }
        assert!(worst < 2e-7, "{worst}");
        assert_eq!(fast_tanh(50.0), 1.0);
        assert_eq!(fast_tanh(-50.0), -1.0);
    }
}
