//! Center-focused lightness: 16×16 patch means pulled toward a well-lit level,
//! each patch weighted by `w = ln(e + √(j² + k²))` of its offset from the grid center.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PATCH_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWeightMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SpatialWeightMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn scaled(&self, k: f64) -> Self {
        SpatialWeightMap {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }
}

pub fn build_weight_map(rows: usize, cols: usize) -> SpatialWeightMap {
    let (cr, cc) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (j, k) = (r as f64 - cr, c as f64 - cc);
            values.push((std::f64::consts::E + (j * j + k * k).sqrt()).ln());
        }
    }
    SpatialWeightMap { rows, cols, values }
}

/// Per-patch mean intensity over all three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMeanGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub values: Vec<f64>,
}

pub fn patch_means<T: Real>(image: &Tensor<T>) -> Result<PatchMeanGrid> {
    let (rows, cols) = (image.height() / PATCH_SIZE, image.width() / PATCH_SIZE);
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "image {} is smaller than one {PATCH_SIZE}x{PATCH_SIZE} patch",
            image.shape()
        )));
    }
    let w = image.width();
    let mut sums = vec![0.0f64; rows * cols];
    for c in 0..image.channels() {
        let plane = image.plane(c);
        for y in 0..rows * PATCH_SIZE {
            let row = &plane[y * w..y * w + cols * PATCH_SIZE];
            for (pc, chunk) in row.chunks_exact(PATCH_SIZE).enumerate() {
                sums[(y / PATCH_SIZE) * cols + pc] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
    }
    let n = (image.channels() * PATCH_SIZE * PATCH_SIZE) as f64;
    Ok(PatchMeanGrid {
        rows,
        cols,
        patch_size: PATCH_SIZE,
        values: sums.into_iter().map(|s| s / n).collect(),
    })
}

/// `(1/P) Σ_p [w_p (y_p − l)]²` and its gradient with respect to `enhanced`.
///
/// Pixels in the remainder beyond the last full patch get zero gradient.
pub fn loss_cen<T: Real>(enhanced: &Tensor<T>, weights: &SpatialWeightMap, level: f64) -> Result<(f64, Tensor<T>)> {
    let grid = patch_means(enhanced)?;
    if grid.rows != weights.rows || grid.cols != weights.cols {
        return Err(Error::shape(format!(
            "weight map is {}x{}, patch grid is {}x{}",
            weights.rows, weights.cols, grid.rows, grid.cols
        )));
    }
    let p = (grid.rows * grid.cols) as f64;
    let per_patch = (enhanced.channels() * PATCH_SIZE * PATCH_SIZE) as f64;
    let mut loss = 0.0;
    let mut patch_grad = vec![0.0f64; grid.values.len()];
    for ((y, w), g) in grid.values.iter().zip(&weights.values).zip(&mut patch_grad) {
        let r = w * (y - level);
        loss += r * r;
        *g = 2.0 * w * w * (y - level) / (p * per_patch);
    }

    let mut grad = enhanced.zeros_like();
    let width = enhanced.width();
    for c in 0..enhanced.channels() {
        let plane = grad.plane_mut(c);
        for y in 0..grid.rows * PATCH_SIZE {
            for x in 0..grid.cols * PATCH_SIZE {
                plane[y * width + x] = T::lit(patch_grad[(y / PATCH_SIZE) * grid.cols + x / PATCH_SIZE]);
            }
        }
    }
    Ok((loss / p, grad))
}
