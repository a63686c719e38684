//! Implementations behind the command-line entry points. Each command takes a
//! resolved [`RunConfig`] and an output directory, writes its artifacts there,
//! and returns a machine-readable summary.

use crate::autodiff::{
    backprop_invertible, backprop_stored, finite_difference_grad, memory_report, BackpropMode,
    MemoryRow, DEFAULT_DRIFT_BOUND,
};
use crate::config::RunConfig;
use crate::dft::ComplexField;
use crate::error::{IrimError, Result};
use crate::forward_model::{make_mask, simulate_measurement, FourierOperator};
use crate::layers::{AdditiveCoupling, AffineCoupling};
use crate::model::{checkpoint_hash, irim_rollout, load_checkpoint, save_checkpoint, IrimModel};
use crate::phantom::{build_dataset, load_dataset, PhantomConfig};
use crate::rng::{derive_seed, SeededRng};
use crate::train::{train, TrainLogRow};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut body = String::with_capacity(rows.len() * 48 + header.len() + 1);
    body.push_str(header);
    body.push('\n');
    for r in rows {
        body.push_str(r);
        body.push('\n');
    }
    crate::io::write_atomic(path, body.as_bytes())
}

fn echo_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("config.json"))
}

pub fn train_data_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("train_data")
}

pub fn eval_data_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("eval_data")
}

fn eval_phantom_config(cfg: &RunConfig) -> PhantomConfig {
    PhantomConfig {
        seed: derive_seed(cfg.phantom.seed, 0xe7a1),
        ..cfg.phantom.clone()
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Builds the training and evaluation datasets under the output directory.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    echo_config(cfg, out_dir)?;
    build_dataset(&cfg.phantom, cfg.dataset_size, &train_data_dir(out_dir))?;
    build_dataset(&eval_phantom_config(cfg), cfg.eval_size, &eval_data_dir(out_dir))?;
    Ok(())
}

fn ensure_datasets(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    if !train_data_dir(out_dir).join("manifest.json").exists()
        || !eval_data_dir(out_dir).join("manifest.json").exists()
    {
        cmd_synth(cfg, out_dir)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainSummary {
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub log: Vec<TrainLogRow>,
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    echo_config(cfg, out_dir)?;
    ensure_datasets(cfg, out_dir)?;
    let dataset = load_dataset(&train_data_dir(out_dir))?;
    let mut model = IrimModel::init(&cfg.model)?;
    let log = train(&mut model, &dataset, &cfg.train, None)?;
    let rows: Vec<String> = log.iter().map(|r| r.to_csv()).collect();
    write_csv(&out_dir.join("train_log.csv"), TrainLogRow::csv_header(), &rows)?;
    let ckpt = out_dir.join("checkpoint.bin");
    save_checkpoint(&model, &ckpt)?;
    let hash = checkpoint_hash(&ckpt)?;
    crate::io::write_atomic(&out_dir.join("checkpoint.sha256"), hash.as_bytes())?;
    Ok(TrainSummary {
        final_loss: log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        checkpoint: ckpt,
        checkpoint_sha256: hash,
        log,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub item_id: usize,
    pub method: String,
    pub acceleration: f64,
    pub nmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl EvalRow {
    pub fn csv_header() -> &'static str {
        "item_id,method,acceleration,nmse,psnr,ssim"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.8e},{:.6},{:.6}",
            self.item_id, self.method, self.acceleration, self.nmse, self.psnr, self.ssim
        )
    }
}

/// Central crop to half the extent in each dimension.
fn central_half_crop(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (ch, cw) = (h / 2, w / 2);
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    x.slice(ndarray::s![y0..y0 + ch, x0..x0 + cw]).to_owned()
}

fn as_dyn(x: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = x.dim();
    ArrayD::from_shape_vec(IxDyn(&[h, w]), x.iter().copied().collect()).expect("shape")
}

/// Magnitude metrics on the central half crop.
pub fn magnitude_metrics(recon: &ComplexField, truth: &ComplexField) -> Result<(f64, f64, f64)> {
    let rm = central_half_crop(&recon.magnitude());
    let tm = central_half_crop(&truth.magnitude());
    let nmse = crate::metrics::nmse(&as_dyn(&rm).view(), &as_dyn(&tm).view())?;
    let psnr = crate::metrics::psnr(&as_dyn(&rm).view(), &as_dyn(&tm).view())?;
    let ssim = crate::metrics::ssim(&rm.view(), &tm.view())?;
    Ok((nmse, psnr, ssim))
}

pub fn reconstruct(model: &IrimModel, d: &ComplexField, op: &FourierOperator) -> Result<ComplexField> {
    let (state, _) = irim_rollout(model, d, op, model.time_steps(), false)?;
    Ok(state.eta())
}

/// Evaluates a trained model against the zero-filled baseline on the held-out
/// set, at each configured acceleration.
pub fn evaluate_model(
    model: &IrimModel,
    cfg: &RunConfig,
    eval_set: &[ComplexField],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (ai, &accel) in cfg.eval_accelerations.iter().enumerate() {
        for (i, truth) in eval_set.iter().enumerate() {
            let (h, w) = truth.dim();
            let seed = derive_seed(cfg.train.seed, 0xeba1 + (ai * 100_000 + i) as u64);
            let mask = make_mask(h, w, accel, cfg.train.center_fraction, seed)?;
            let op = FourierOperator::new(mask.clone());
            let d = simulate_measurement(truth, &mask, cfg.train.noise_std, derive_seed(seed, 1))?;
            let recon = reconstruct(model, &d, &op)?;
            let zero_filled = op.adjoint(&d)?;
            for (method, est) in [("irim", &recon), ("zero_filled", &zero_filled)] {
                let (nmse, psnr, ssim) = magnitude_metrics(est, truth)?;
                rows.push(EvalRow {
                    item_id: i,
                    method: method.into(),
                    acceleration: accel,
                    nmse,
                    psnr,
                    ssim,
                });
            }
        }
    }
    Ok(rows)
}

pub fn mean_nmse(rows: &[EvalRow], method: &str, acceleration: f64) -> f64 {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.acceleration == acceleration)
        .map(|r| r.nmse)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn cmd_eval(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<EvalRow>> {
    echo_config(cfg, out_dir)?;
    ensure_datasets(cfg, out_dir)?;
    let model = load_checkpoint(&out_dir.join("checkpoint.bin"))?;
    let eval_set = load_dataset(&eval_data_dir(out_dir))?;
    let rows = evaluate_model(&model, cfg, &eval_set)?;
    let csv: Vec<String> = rows.iter().map(|r| r.to_csv()).collect();
    write_csv(&out_dir.join("metrics.csv"), EvalRow::csv_header(), &csv)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub struct GradcheckSummary {
    pub max_rel_modes: f64,
    pub max_rel_fd: f64,
}

const GRADCHECK_MODE_TOL: f64 = 1e-7;
const GRADCHECK_FD_TOL: f64 = 1e-5;

/// Cross-checks the two backpropagation modes against each other and against
/// central finite differences at sampled coordinates.
pub fn cmd_gradcheck(cfg: &RunConfig, out_dir: &Path) -> Result<GradcheckSummary> {
    echo_config(cfg, out_dir)?;
    let model = IrimModel::init(&cfg.model)?;
    let (h, w) = (cfg.phantom.height, cfg.phantom.width);
    let truth = crate::phantom::generate_phantom(&cfg.phantom, 0)?;
    let mask = make_mask(h, w, cfg.train.acceleration, cfg.train.center_fraction, cfg.train.seed)?;
    let op = FourierOperator::new(mask.clone());
    let d = simulate_measurement(&truth, &mask, cfg.train.noise_std, cfg.train.seed)?;
    let loss_cfg = cfg.train.loss.clone();

    let stored = backprop_stored(&model, &d, &op, &truth, &loss_cfg)?;
    let inv = backprop_invertible(&model, &d, &op, &truth, &loss_cfg, DEFAULT_DRIFT_BOUND)?;
    let gs = stored.grads.flatten();
    let gi = inv.grads.flatten();
    let scale = gs.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-30;
    let max_rel_modes = gs
        .iter()
        .zip(&gi)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale;

    let mut pick = SeededRng::new(derive_seed(cfg.train.seed, 0x9cc));
    let coords: Vec<usize> = (0..20).map(|_| pick.below(gs.len())).collect();
    let fd = finite_difference_grad(&model, &d, &op, &truth, &loss_cfg, &coords, 1e-6)?;
    let mut max_rel_fd = 0.0f64;
    let mut rows = Vec::new();
    for (k, &i) in coords.iter().enumerate() {
        let rel = (gs[i] - fd[k]).abs() / (1.0 + fd[k].abs());
        max_rel_fd = max_rel_fd.max(rel);
        rows.push(format!("{},{:.12e},{:.12e},{:.12e},{:.3e}", i, gs[i], gi[i], fd[k], rel));
    }
    write_csv(
        &out_dir.join("gradcheck.csv"),
        "coordinate,stored,invertible,finite_difference,rel_error_fd",
        &rows,
    )?;
    if max_rel_modes > GRADCHECK_MODE_TOL {
        return Err(IrimError::Tolerance {
            context: "gradcheck: stored vs invertible gradients".into(),
            value: max_rel_modes,
            bound: GRADCHECK_MODE_TOL,
        });
    }
    if max_rel_fd > GRADCHECK_FD_TOL {
        return Err(IrimError::Tolerance {
            context: "gradcheck: analytic vs finite-difference gradients".into(),
            value: max_rel_fd,
            bound: GRADCHECK_FD_TOL,
        });
    }
    Ok(GradcheckSummary {
        max_rel_modes,
        max_rel_fd,
    })
}

// ---------------------------------------------------------------------------
// invcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InvRow {
    pub family: String,
    pub precision: String,
    pub layers: usize,
    pub seed: u64,
    pub roundtrip_error: f64,
    pub seconds: f64,
}

impl InvRow {
    pub fn csv_header() -> &'static str {
        "family,precision,layers,seed,roundtrip_error,seconds"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6e},{:.3}",
            self.family, self.precision, self.layers, self.seed, self.roundtrip_error, self.seconds
        )
    }
}

const INVCHECK_CHANNELS: usize = 16;
const INVCHECK_EXTENT: usize = 16;
const INVCHECK_HIDDEN: usize = 4;

fn invcheck_input(seed: u64) -> Array3<f64> {
    let mut rng = SeededRng::new(derive_seed(seed, 0x1b9));
    Array3::from_shape_simple_fn(
        (INVCHECK_CHANNELS, INVCHECK_EXTENT, INVCHECK_EXTENT),
        || rng.normal(),
    )
}

fn roundtrip_additive<F: crate::layers::Scalar>(
    stack: &[AdditiveCoupling<F>],
    x: &Array3<F>,
) -> Result<f64> {
    let mut y = x.clone();
    for layer in stack {
        y = layer.forward(&y.view())?;
    }
    for layer in stack.iter().rev() {
        y = layer.inverse(&y.view())?;
    }
    let err = y
        .iter()
        .zip(x.iter())
        .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()));
    Ok(err.to_f64().unwrap_or(f64::NAN))
}

fn roundtrip_affine<F: crate::layers::Scalar>(
    stack: &[AffineCoupling<F>],
    x: &Array3<F>,
) -> Result<f64> {
    let mut y = x.clone();
    for layer in stack {
        y = layer.forward(&y.view())?;
    }
    for layer in stack.iter().rev() {
        y = layer.inverse(&y.view())?;
    }
    let err = y
        .iter()
        .zip(x.iter())
        .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()));
    Ok(err.to_f64().unwrap_or(f64::NAN))
}

fn build_stacks(
    depth: usize,
    seed: u64,
) -> Result<(Vec<AdditiveCoupling<f64>>, Vec<AffineCoupling<f64>>)> {
    let mut rng = SeededRng::new(derive_seed(seed, 0xadd));
    let mut additive = Vec::with_capacity(depth);
    let mut affine = Vec::with_capacity(depth);
    // damp the residual output scales so 400-layer stacks keep activations
    // bounded; without this any random deep stack explodes and the round-trip
    // comparison measures overflow, not inversion quality
    const DAMP: f64 = 0.05;
    for l in 0..depth {
        let down = if l % 2 == 0 { 1 } else { 2 };
        let mut add = AdditiveCoupling::init(
            INVCHECK_CHANNELS,
            INVCHECK_CHANNELS / 2,
            3,
            down,
            INVCHECK_HIDDEN,
            &mut rng,
        )?;
        add.g.conv3_scale.mapv_inplace(|v| v * DAMP);
        additive.push(add);
        let mut aff = AffineCoupling::init(
            INVCHECK_CHANNELS,
            INVCHECK_CHANNELS / 2,
            down,
            INVCHECK_HIDDEN,
            &mut rng,
        )?;
        // the multiplicative gate stays at full (clamped) strength: it is the
        // defining feature of the affine family and the source of its inverse
        // error amplification
        aff.shift_net.conv3_scale.mapv_inplace(|v| v * DAMP);
        affine.push(aff);
    }
    Ok((additive, affine))
}

/// Round-trip inversion error of deep additive and affine coupling stacks at
/// both precisions, across depths and seeds.
pub fn cmd_invcheck(
    depths: &[usize],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<InvRow>> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &depth in depths {
        for &seed in seeds {
            let (additive, affine) = build_stacks(depth, seed)?;
            let x64 = invcheck_input(seed);
            let x32 = x64.mapv(|v| v as f32);
            let add32: Vec<AdditiveCoupling<f32>> = additive.iter().map(|l| l.cast()).collect();
            let aff32: Vec<AffineCoupling<f32>> = affine.iter().map(|l| l.cast()).collect();
            let t0 = Instant::now();
            let e = roundtrip_additive(&additive, &x64)?;
            rows.push(InvRow {
                family: "additive".into(),
                precision: "f64".into(),
                layers: depth,
                seed,
                roundtrip_error: e,
                seconds: t0.elapsed().as_secs_f64(),
            });
            let t0 = Instant::now();
            let e = roundtrip_affine(&affine, &x64)?;
            rows.push(InvRow {
                family: "affine".into(),
                precision: "f64".into(),
                layers: depth,
                seed,
                roundtrip_error: e,
                seconds: t0.elapsed().as_secs_f64(),
            });
            let t0 = Instant::now();
            let e = roundtrip_additive(&add32, &x32)?;
            rows.push(InvRow {
                family: "additive".into(),
                precision: "f32".into(),
                layers: depth,
                seed,
                roundtrip_error: e,
                seconds: t0.elapsed().as_secs_f64(),
            });
            let t0 = Instant::now();
            let e = roundtrip_affine(&aff32, &x32)?;
            rows.push(InvRow {
                family: "affine".into(),
                precision: "f32".into(),
                layers: depth,
                seed,
                roundtrip_error: e,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
    }
    let csv: Vec<String> = rows.iter().map(|r| r.to_csv()).collect();
    write_csv(&out_dir.join("invcheck.csv"), InvRow::csv_header(), &csv)?;
    Ok(rows)
}

pub const INVCHECK_DEPTHS: [usize; 4] = [10, 50, 100, 400];

// ---------------------------------------------------------------------------
// bench-memory
// ---------------------------------------------------------------------------

pub const BENCH_TIME_STEPS: [usize; 3] = [1, 4, 8];
pub const BENCH_DEPTHS: [usize; 4] = [5, 20, 40, 400];

pub fn cmd_bench_memory(out_dir: &Path, seed: u64) -> Result<Vec<MemoryRow>> {
    fs::create_dir_all(out_dir)?;
    let mut grid = Vec::new();
    for &t in &BENCH_TIME_STEPS {
        for &l in &BENCH_DEPTHS {
            grid.push((t, l));
        }
    }
    let rows = memory_report(
        16,
        8,
        8,
        &grid,
        &[BackpropMode::Stored, BackpropMode::Invertible],
        seed,
    )?;
    let csv: Vec<String> = rows.iter().map(|r| r.to_csv()).collect();
    write_csv(&out_dir.join("memory.csv"), MemoryRow::csv_header(), &csv)?;
    Ok(rows)
}
