//! Acceptance checks, one PASS/FAIL line each. Exits non-zero if any check fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use darklighter::cli::run_with;
use darklighter::enhancer::{enhance, invert};
use darklighter::gradcheck::run_gradcheck;
use darklighter::imageio::{load_training_image, save_png};
use darklighter::infer::InferenceNet;
use darklighter::losses::patch_means;
use darklighter::menet::{count_macs, count_params, forward, init_params, MapStack, MeNetParams};
use darklighter::tensor::{ImageTensor, Tensor};
use darklighter::train::{list_images, train, FeatureSource, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WELL_LIT: f64 = 0.6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn param_count() -> Outcome {
    let n = count_params(&init_params(0));
    outcome(n == 74_768, format!("{n} parameters (want 74768)"))
}

fn mac_count() -> Outcome {
    let macs = count_macs(256, 256);
    let two_sig = (macs as f64 / 1e8).round() / 10.0;
    outcome(
        macs == 4_888_461_312 && two_sig == 4.9,
        format!("{macs} MACs at 256x256, {two_sig:.1}G to two significant figures"),
    )
}

fn gradient_suite() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool");
    let start = Instant::now();
    let report = pool.install(|| run_gradcheck(0, None));
    let secs = start.elapsed().as_secs_f64();
    match report {
        Ok(r) => {
            let worst = r.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            outcome(
                r.passed() && secs < 60.0,
                format!(
                    "{} components, worst relative error {worst:.2e}, {secs:.1}s single-threaded",
                    r.components.len()
                ),
            )
        }
        Err(e) => outcome(false, format!("suite error: {e}")),
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0))
}

fn identity() -> Outcome {
    let zero = MeNetParams::<f32>::zeros(8);
    let mut worst = 0.0f64;
    for (seed, (h, w)) in [(37, 53), (16, 16), (1, 9)].into_iter().enumerate() {
        let img = random_image(seed as u64, h, w);
        let (e, n, _) = forward(&img, &zero).expect("reference forward");
        let reference = enhance(&img, &e, &n).expect("enhance");
        let (e, n) = InferenceNet::new(&zero).maps(&img).expect("fast forward");
        let fast = enhance(&img, &e, &n).expect("enhance");
        worst = worst
            .max(reference.final_image.max_abs_diff(&img))
            .max(fast.final_image.max_abs_diff(&img));
    }
    outcome(
        worst == 0.0,
        format!("max abs error {worst:e} over three images, both forward paths"),
    )
}

fn iteration_oracle() -> Outcome {
    let (s0, noise, gain, iters) = (0.3f64, 0.01f64, 1.2f64, 8usize);
    let mut scalar = s0;
    for _ in 0..iters {
        scalar = (scalar - noise) * gain;
    }
    let img = Tensor::filled(3, 4, 5, s0);
    let e = MapStack::filled(iters, 4, 5, gain);
    let n = MapStack::filled(iters, 4, 5, noise);
    let out = enhance(&img, &e, &n).expect("enhance").final_image;
    let err = out.data().iter().map(|v| (v - scalar).abs()).fold(0.0, f64::max);
    let literal = (scalar - 1.09195607).abs();
    outcome(
        err < 1e-6 && literal < 1e-6,
        format!(
            "enhancer {:.8}, scalar recurrence {scalar:.8}, max deviation {err:.1e}",
            out.get(0, 0, 0)
        ),
    )
}

fn roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let (h, w, iters) = (rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(1..=8));
        let s0 = Tensor::<f64>::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0));
        let e = MapStack::new(Tensor::from_fn(iters, h, w, |_, _, _| rng.gen_range(0.5..=2.0)));
        let n = MapStack::new(Tensor::from_fn(iters, h, w, |_, _, _| rng.gen_range(-1.0..1.0)));
        let forward = enhance(&s0, &e, &n).expect("enhance");
        match invert(&forward.final_image, &e, &n) {
            Ok(back) => worst = worst.max(back.max_abs_diff(&s0)),
            Err(err) => return outcome(false, format!("trial {trial}: {err}")),
        }
    }
    outcome(worst < 1e-5, format!("20 random stacks, max abs error {worst:.2e}"))
}

/// A smooth colour field with a few flat shapes, then darkened by `x^gamma`.
fn synthetic_scene(rng: &mut ChaCha8Rng, size: usize, gamma: f32) -> ImageTensor {
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.9));
    let slope: [(f32, f32); 3] = std::array::from_fn(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)));
    let shapes: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            let centre = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            (
                centre.0,
                centre.1,
                rng.gen_range(0.05..0.25),
                std::array::from_fn(|_| rng.gen_range(0.1..1.0)),
            )
        })
        .collect();
    let s = size as f32;
    let mut img = Tensor::from_fn(3, size, size, |c, y, x| {
        let (u, v) = (x as f32 / s, y as f32 / s);
        let mut val = base[c] + slope[c].0 * (u - 0.5) + slope[c].1 * (v - 0.5);
        for &(cx, cy, r, colour) in &shapes {
            if (u - cx).powi(2) + (v - cy).powi(2) < r * r {
                val = colour[c];
            }
        }
        val
    });
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0).powf(gamma);
    }
    img
}

fn write_scenes(dir: &Path, count: usize, size: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        save_png(
            &synthetic_scene(&mut rng, size, 2.5),
            &dir.join(format!("scene{i:02}.png")),
        )
        .expect("write scene");
    }
}

/// Mean over images and 16x16 patches of |patch mean − 0.6|.
fn patch_gap(images: &[ImageTensor]) -> f64 {
    let gaps: Vec<f64> = images
        .iter()
        .flat_map(|img| patch_means(img).expect("patch means").values)
        .map(|y| (y - WELL_LIT).abs())
        .collect();
    gaps.iter().sum::<f64>() / gaps.len() as f64
}

fn training_progress() -> Outcome {
    let data = tempfile::tempdir().expect("tempdir");
    let out = tempfile::tempdir().expect("tempdir");
    let size = 64;
    write_scenes(data.path(), 16, size, 7);
    let mut cfg = TrainConfig::new(data.path(), out.path());
    cfg.image_size = size;
    cfg.batch_size = 8;
    cfg.epochs = 50;
    cfg.learning_rate = 1e-4;
    cfg.feature_extractor = FeatureSource::Random(0);

    let start = Instant::now();
    let result = train(&cfg);
    let secs = start.elapsed().as_secs_f64();
    let run = match result {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let totals: Vec<f64> = run.history.iter().map(|r| r.total).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (lead, trail) = (mean(&totals[..10]), mean(&totals[totals.len() - 10..]));

    let inputs: Vec<ImageTensor> = list_images(data.path())
        .expect("list")
        .iter()
        .map(|p| load_training_image(p, size).expect("load"))
        .collect();
    let mut net = InferenceNet::new(&run.params);
    let outputs: Vec<ImageTensor> = inputs
        .iter()
        .map(|img| {
            let (e, n) = net.maps(img).expect("maps");
            enhance(img, &e, &n).expect("enhance").export
        })
        .collect();
    let (before, after) = (patch_gap(&inputs), patch_gap(&outputs));
    let shrink = 1.0 - after / before;
    outcome(
        totals.len() == 100 && trail < lead && shrink >= 0.25 && secs < 600.0,
        format!(
            "{} steps in {secs:.0}s; loss {lead:.4} -> {trail:.4}; patch gap {before:.4} -> {after:.4} ({:.0}% shrink)",
            totals.len(),
            shrink * 100.0
        ),
    )
}

fn run_files(data: &Path) -> Vec<(String, Vec<u8>)> {
    let out = tempfile::tempdir().expect("tempdir");
    let mut cfg = TrainConfig::new(data, out.path());
    cfg.image_size = 32;
    cfg.batch_size = 3;
    cfg.epochs = 2;
    cfg.checkpoint_every = 1;
    cfg.seed = 11;
    cfg.feature_extractor = FeatureSource::Random(3);
    train(&cfg).expect("train");
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(out.path())
        .expect("read output")
        .map(|e| {
            let p = e.expect("entry").path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).expect("read"),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let data = tempfile::tempdir().expect("tempdir");
    write_scenes(data.path(), 7, 32, 21);
    let (a, b) = (run_files(data.path()), run_files(data.path()));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let has_csv = names.contains(&"loss_history.csv");
    let checkpoints = names.iter().filter(|n| n.ends_with(".dlwt")).count();
    outcome(
        a == b && has_csv && checkpoints >= 2,
        format!("{} files compared byte for byte: {}", a.len(), names.join(", ")),
    )
}

fn throughput() -> Outcome {
    let args = [
        "darklighter",
        "bench",
        "--size",
        "256",
        "--repeat",
        "30",
        "--warmup",
        "5",
    ];
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(args, &mut out, &mut err);
    let text = String::from_utf8_lossy(&out);
    if code != 0 {
        return outcome(
            false,
            format!("bench exited {code}: {}", String::from_utf8_lossy(&err).trim()),
        );
    }
    let mut lines = text.lines().skip_while(|l| !l.contains("MSPF"));
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let row: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let columns = ["MSPF", "FPS", "Params", "FLOPs"];
    let has_columns = columns.iter().all(|c| header.contains(c));
    let fps = header
        .iter()
        .position(|c| *c == "FPS")
        .and_then(|i| row.get(i))
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(0.0);
    outcome(
        has_columns && fps >= 10.0,
        format!("{fps:.2} FPS at 256x256, columns [{}]", header.join(" ")),
    )
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    let checks: [Check; 9] = [
        ("parameter count", param_count),
        ("multiply-accumulate count", mac_count),
        ("gradient suite", gradient_suite),
        ("zero-network identity", identity),
        ("iteration oracle", iteration_oracle),
        ("enhance/invert roundtrip", roundtrip),
        ("training progress", training_progress),
        ("determinism", determinism),
        ("throughput", throughput),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        println!(
            "AC{} {} {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
