//! Dual-mode reverse differentiation for the inference model.
//!
//! `Stored` mode is conventional backpropagation-through-time: the rollout
//! retains every layer input and the backward sweep replays them, so retained
//! memory grows linearly with depth. `Invertible` mode retains only the final
//! state and reconstructs each layer input through the layer inverses during
//! the backward sweep, so retained memory is constant in depth at the cost of
//! at most one extra layer evaluation per layer.
//!
//! Memory is accounted in retained tensor elements through [`MemoryMeter`],
//! not process RSS: the count is deterministic and portable, and directly
//! measures the complexity claim. The carried machine state and one layer's
//! transient recomputation are counted in all modes; model parameters are not.

use crate::dft::ComplexField;
use crate::error::{IrimError, Result};
use crate::forward_model::FourierOperator;
use crate::model::{
    gradient_injection, GradientFlowMode, IrimModel, MachineState, ModelConfig,
};
use crate::train::LossConfig;
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackpropMode {
    Stored,
    Invertible,
}

impl std::fmt::Display for BackpropMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackpropMode::Stored => write!(f, "stored"),
            BackpropMode::Invertible => write!(f, "invertible"),
        }
    }
}

/// Default bound on the drift of the reconstructed initial state.
pub const DEFAULT_DRIFT_BOUND: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub peak_elements: usize,
    pub peak_rollout: usize,
    pub peak_backward: usize,
    pub layer_evals: usize,
}

/// Counts tensor elements retained for later use. `retain`/`release` must be
/// balanced; the peak is tracked per phase and overall.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    current: usize,
    peak: usize,
    peak_rollout: usize,
    peak_backward: usize,
    in_backward: bool,
    layer_evals: usize,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn retain(&mut self, elements: usize) {
        self.current += elements;
        self.peak = self.peak.max(self.current);
        if self.in_backward {
            self.peak_backward = self.peak_backward.max(self.current);
        } else {
            self.peak_rollout = self.peak_rollout.max(self.current);
        }
    }

    pub fn release(&mut self, elements: usize) {
        debug_assert!(self.current >= elements, "meter release underflow");
        self.current -= elements;
    }

    pub fn enter_backward(&mut self) {
        self.in_backward = true;
    }

    pub fn count_layer_eval(&mut self) {
        self.layer_evals += 1;
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            peak_elements: self.peak,
            peak_rollout: self.peak_rollout,
            peak_backward: self.peak_backward,
            layer_evals: self.layer_evals,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Parameter cotangents, shaped exactly like the model.
    pub grads: IrimModel,
    pub loss: f64,
    pub memory: MemorySnapshot,
}

impl GradReport {
    pub fn max_abs_grad(&self) -> f64 {
        self.grads.max_abs_param()
    }

    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.grads.visit_params(&mut |_, s| {
            acc += s.iter().map(|v| v * v).sum::<f64>();
        });
        acc.sqrt()
    }
}

fn eta_of(data: &Array3<f64>) -> ComplexField {
    ComplexField {
        re: data.index_axis(ndarray::Axis(0), 0).to_owned(),
        im: data.index_axis(ndarray::Axis(0), 1).to_owned(),
    }
}

/// Adds the loss cotangent for an estimate into the state cotangent.
fn add_loss_cotangent(cot: &mut Array3<f64>, grad: &ComplexField, weight: f64) {
    cot.index_axis_mut(ndarray::Axis(0), 0)
        .zip_mut_with(&grad.re, |a, &b| *a += weight * b);
    cot.index_axis_mut(ndarray::Axis(0), 1)
        .zip_mut_with(&grad.im, |a, &b| *a += weight * b);
}

/// Backward rule of the gradient injection: s cotangents pass through; in
/// exact mode the estimate cotangent additionally gains A^H A applied to the
/// complex pair in the first two s channels.
fn injection_backward(
    cot: &mut Array3<f64>,
    op: &FourierOperator,
    mode: GradientFlowMode,
) -> Result<()> {
    if mode == GradientFlowMode::StopGradient {
        return Ok(());
    }
    let v = ComplexField {
        re: cot.index_axis(ndarray::Axis(0), 2).to_owned(),
        im: cot.index_axis(ndarray::Axis(0), 3).to_owned(),
    };
    let w = op.dc_grad_vjp(&v)?;
    cot.index_axis_mut(ndarray::Axis(0), 0)
        .zip_mut_with(&w.re, |a, &b| *a += b);
    cot.index_axis_mut(ndarray::Axis(0), 1)
        .zip_mut_with(&w.im, |a, &b| *a += b);
    Ok(())
}

/// Loss of a full rollout without gradient computation. Shares the loss path
/// with both backprop modes.
pub fn rollout_loss(
    model: &IrimModel,
    d: &ComplexField,
    op: &FourierOperator,
    target: &ComplexField,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let t_total = model.time_steps();
    let mask = loss_cfg.pixel_mask(target)?;
    let (h, w) = d.dim();
    let mut state = MachineState::zeros(model.channels(), h, w);
    let mut loss = 0.0;
    for t in 0..t_total {
        state = crate::model::irim_forward_step(&state, d, op, &model.steps[t])?;
        let weight = loss_cfg.weight(t + 1, t_total);
        if weight != 0.0 {
            let (value, _) = crate::train::masked_nmse_value_grad(&state.eta(), target, &mask)?;
            loss += weight * value;
        }
    }
    if !loss.is_finite() {
        return Err(IrimError::NonFinite("rollout_loss".into()));
    }
    Ok(loss)
}

pub fn backprop(
    model: &IrimModel,
    d: &ComplexField,
    op: &FourierOperator,
    target: &ComplexField,
    loss_cfg: &LossConfig,
    mode: BackpropMode,
) -> Result<GradReport> {
    match mode {
        BackpropMode::Stored => backprop_stored(model, d, op, target, loss_cfg),
        BackpropMode::Invertible => {
            backprop_invertible(model, d, op, target, loss_cfg, DEFAULT_DRIFT_BOUND)
        }
    }
}

pub fn backprop_stored(
    model: &IrimModel,
    d: &ComplexField,
    op: &FourierOperator,
    target: &ComplexField,
    loss_cfg: &LossConfig,
) -> Result<GradReport> {
    let t_total = model.time_steps();
    let mask = loss_cfg.pixel_mask(target)?;
    let (h, w) = d.dim();
    let state_elems = model.channels() * h * w;
    let mut meter = MemoryMeter::new();
    meter.retain(state_elems); // carried state

    // forward rollout retaining every layer input
    let mut state = MachineState::zeros(model.channels(), h, w);
    let mut stored: Vec<Vec<Array3<f64>>> = Vec::with_capacity(t_total);
    let mut loss = 0.0;
    for t in 0..t_total {
        let grad = op.data_consistency_grad(d, &state.eta())?;
        let inject = gradient_injection(&grad, model.channels())?;
        let mut u = state.data.clone();
        u.slice_mut(s![2.., .., ..]).zip_mut_with(&inject, |a, &b| *a += b);
        let mut inputs = Vec::with_capacity(model.steps[t].layers.len());
        let mut y = u;
        for layer in &model.steps[t].layers {
            let tf = layer.transient_elements(h, w);
            meter.retain(tf);
            let out = layer.forward(&y.view())?;
            meter.release(tf);
            meter.count_layer_eval();
            meter.retain(state_elems); // this input is kept for backward
            inputs.push(y);
            y = out;
        }
        stored.push(inputs);
        state = MachineState { data: y, t: t + 1 };
        let weight = loss_cfg.weight(t + 1, t_total);
        if weight != 0.0 {
            let (value, _) = crate::train::masked_nmse_value_grad(&state.eta(), target, &mask)?;
            loss += weight * value;
        }
    }
    if !loss.is_finite() {
        return Err(IrimError::NonFinite("backprop_stored loss".into()));
    }

    // backward sweep over stored inputs
    meter.enter_backward();
    let mut grads = model.zeros_like();
    let mut cot = Array3::zeros(state.data.dim());
    {
        let wt = loss_cfg.weight(t_total, t_total);
        if wt != 0.0 {
            let (_, g) = crate::train::masked_nmse_value_grad(&state.eta(), target, &mask)?;
            add_loss_cotangent(&mut cot, &g, wt);
        }
    }
    for t in (0..t_total).rev() {
        for l in (0..model.steps[t].layers.len()).rev() {
            let layer = &model.steps[t].layers[l];
            let input = &stored[t][l];
            let tv = state_elems + layer.transient_elements(h, w);
            meter.retain(tv);
            let (next_cot, layer_grads) = layer.vjp(&input.view(), &cot)?;
            meter.release(tv);
            meter.count_layer_eval();
            grads.steps[t].layers[l].add_scaled(&layer_grads, 1.0);
            cot = next_cot;
            meter.release(state_elems); // stored input no longer needed
        }
        injection_backward(&mut cot, op, model.grad_mode)?;
        if t >= 1 {
            let wt = loss_cfg.weight(t, t_total);
            if wt != 0.0 {
                let eta_t = eta_of(&stored[t][0]); // z'_t carries eta_t
                let (_, g) = crate::train::masked_nmse_value_grad(&eta_t, target, &mask)?;
                add_loss_cotangent(&mut cot, &g, wt);
            }
        }
    }
    meter.release(state_elems);
    let report = GradReport {
        grads,
        loss,
        memory: meter.snapshot(),
    };
    if !report.max_abs_grad().is_finite() {
        return Err(IrimError::NonFinite("backprop_stored gradients".into()));
    }
    Ok(report)
}

pub fn backprop_invertible(
    model: &IrimModel,
    d: &ComplexField,
    op: &FourierOperator,
    target: &ComplexField,
    loss_cfg: &LossConfig,
    drift_bound: f64,
) -> Result<GradReport> {
    let t_total = model.time_steps();
    let mask = loss_cfg.pixel_mask(target)?;
    let (h, w) = d.dim();
    let state_elems = model.channels() * h * w;
    let mut meter = MemoryMeter::new();
    meter.retain(state_elems); // the carried state, kept through backward

    // forward rollout retaining only the running state
    let mut state = MachineState::zeros(model.channels(), h, w);
    let mut loss = 0.0;
    for t in 0..t_total {
        let grad = op.data_consistency_grad(d, &state.eta())?;
        let inject = gradient_injection(&grad, model.channels())?;
        let mut y = state.data.clone();
        y.slice_mut(s![2.., .., ..]).zip_mut_with(&inject, |a, &b| *a += b);
        for layer in &model.steps[t].layers {
            let tf = layer.transient_elements(h, w);
            meter.retain(tf);
            y = layer.forward(&y.view())?;
            meter.release(tf);
            meter.count_layer_eval();
        }
        state = MachineState { data: y, t: t + 1 };
        let weight = loss_cfg.weight(t + 1, t_total);
        if weight != 0.0 {
            let (value, _) = crate::train::masked_nmse_value_grad(&state.eta(), target, &mask)?;
            loss += weight * value;
        }
    }
    if !loss.is_finite() {
        return Err(IrimError::NonFinite("backprop_invertible loss".into()));
    }

    // backward sweep: reconstruct layer inputs through the inverses
    meter.enter_backward();
    let mut grads = model.zeros_like();
    let mut cot = Array3::zeros(state.data.dim());
    {
        let wt = loss_cfg.weight(t_total, t_total);
        if wt != 0.0 {
            let (_, g) = crate::train::masked_nmse_value_grad(&state.eta(), target, &mask)?;
            add_loss_cotangent(&mut cot, &g, wt);
        }
    }
    let mut y = state.data;
    for t in (0..t_total).rev() {
        for l in (0..model.steps[t].layers.len()).rev() {
            let layer = &model.steps[t].layers[l];
            let tf = layer.transient_elements(h, w);
            // reconstruct this layer's input
            meter.retain(tf);
            let x = layer.inverse(&y.view())?;
            meter.release(tf);
            meter.count_layer_eval();
            // local vjp at the reconstructed input
            let tv = state_elems + tf;
            meter.retain(tv);
            let (next_cot, layer_grads) = layer.vjp(&x.view(), &cot)?;
            meter.release(tv);
            meter.count_layer_eval();
            if !next_cot.iter().all(|v| v.is_finite()) {
                return Err(IrimError::NonFinite(format!(
                    "backprop_invertible cotangent at step {t} layer {l}"
                )));
            }
            grads.steps[t].layers[l].add_scaled(&layer_grads, 1.0);
            cot = next_cot;
            y = x;
        }
        // y now holds (z'_t, s'_t): undo the injection to recover state_t
        let z_eta = eta_of(&y);
        let grad = op.data_consistency_grad(d, &z_eta)?;
        let inject = gradient_injection(&grad, model.channels())?;
        y.slice_mut(s![2.., .., ..]).zip_mut_with(&inject, |a, &b| *a -= b);
        injection_backward(&mut cot, op, model.grad_mode)?;
        if t >= 1 {
            let wt = loss_cfg.weight(t, t_total);
            if wt != 0.0 {
                let (_, g) = crate::train::masked_nmse_value_grad(&z_eta, target, &mask)?;
                add_loss_cotangent(&mut cot, &g, wt);
            }
        }
    }
    // the reconstructed initial state must be the zero state
    let drift = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if drift > drift_bound {
        return Err(IrimError::ReconstructionDrift {
            step: 0,
            drift,
            bound: drift_bound,
        });
    }
    meter.release(state_elems);
    let report = GradReport {
        grads,
        loss,
        memory: meter.snapshot(),
    };
    if !report.max_abs_grad().is_finite() {
        return Err(IrimError::NonFinite("backprop_invertible gradients".into()));
    }
    Ok(report)
}

/// Central-difference gradient at selected flat parameter coordinates.
/// Independent of both backprop implementations: only the forward rollout and
/// the loss are evaluated.
pub fn finite_difference_grad(
    model: &IrimModel,
    d: &ComplexField,
    op: &FourierOperator,
    target: &ComplexField,
    loss_cfg: &LossConfig,
    coordinates: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let flat = model.flatten();
    let mut out = Vec::with_capacity(coordinates.len());
    let mut scratch = model.clone();
    for &i in coordinates {
        if i >= flat.len() {
            return Err(IrimError::Config(format!(
                "finite-difference coordinate {i} out of range ({})",
                flat.len()
            )));
        }
        let mut plus = flat.clone();
        plus[i] += step;
        scratch.assign_from_flat(&plus);
        let fp = rollout_loss(&scratch, d, op, target, loss_cfg)?;
        let mut minus = flat.clone();
        minus[i] -= step;
        scratch.assign_from_flat(&minus);
        let fm = rollout_loss(&scratch, d, op, target, loss_cfg)?;
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Memory trend report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MemoryRow {
    pub time_steps: usize,
    pub layers: usize,
    pub mode: String,
    pub phase: String,
    pub peak_elements: usize,
    pub layer_evals: usize,
}

impl MemoryRow {
    pub fn csv_header() -> &'static str {
        "T,L,mode,phase,peak_elements,layer_evals"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.time_steps, self.layers, self.mode, self.phase, self.peak_elements, self.layer_evals
        )
    }
}

fn grid_model(channels: usize, time_steps: usize, layers: usize, seed: u64) -> Result<IrimModel> {
    let schedule: Vec<usize> = (0..layers).map(|l| if l % 2 == 0 { 1 } else { 2 }).collect();
    let mut model = IrimModel::init(&ModelConfig {
        channels,
        time_steps,
        layers_per_step: layers,
        downsample_schedule: schedule,
        split: channels / 2,
        reflections: 3,
        hidden: 4,
        grad_mode: GradientFlowMode::Exact,
        seed,
    })?;
    // damp the coupling residuals so very deep stacks stay numerically tame;
    // the memory accounting is independent of the activation values
    model.visit_params_mut(&mut |name, p| {
        if name.ends_with("conv3_scale") {
            for v in p {
                *v *= 0.05;
            }
        }
    });
    Ok(model)
}

/// Metered rollout without any retention beyond the carried state: the
/// testing analog.
fn metered_rollout(
    model: &IrimModel,
    d: &ComplexField,
    op: &FourierOperator,
) -> Result<MemorySnapshot> {
    let (h, w) = d.dim();
    let mut meter = MemoryMeter::new();
    let state_elems = model.channels() * h * w;
    meter.retain(state_elems);
    let mut state = MachineState::zeros(model.channels(), h, w);
    for t in 0..model.time_steps() {
        let grad = op.data_consistency_grad(d, &state.eta())?;
        let inject = gradient_injection(&grad, model.channels())?;
        let mut y = state.data.clone();
        y.slice_mut(s![2.., .., ..]).zip_mut_with(&inject, |a, &b| *a += b);
        for layer in &model.steps[t].layers {
            let tf = layer.transient_elements(h, w);
            meter.retain(tf);
            y = layer.forward(&y.view())?;
            meter.release(tf);
            meter.count_layer_eval();
        }
        state = MachineState { data: y, t: t + 1 };
    }
    meter.release(state_elems);
    Ok(meter.snapshot())
}

/// Peak retained elements and layer evaluations per (T, L, mode), for both the
/// rollout-only (testing) and training phases, on a small fixed task.
pub fn memory_report(
    channels: usize,
    h: usize,
    w: usize,
    grid: &[(usize, usize)],
    modes: &[BackpropMode],
    seed: u64,
) -> Result<Vec<MemoryRow>> {
    use crate::forward_model::make_mask;
    use crate::rng::SeededRng;
    use crate::train::{LossConfig, StepWeights};
    use ndarray::Array2;

    let mask = make_mask(h, w, 2.0, 0.25, seed)?;
    let op = FourierOperator::new(mask.clone());
    let mut rng = SeededRng::new(seed);
    let target = ComplexField {
        re: Array2::from_shape_simple_fn((h, w), || rng.normal()),
        im: Array2::from_shape_simple_fn((h, w), || rng.normal()),
    };
    let d = op.forward(&target)?;
    let loss_cfg = LossConfig {
        keep_fraction: 1.0,
        weights: StepWeights::LastOnly,
        seed,
    };
    let mut rows = Vec::new();
    for &(t_steps, layers) in grid {
        let model = grid_model(channels, t_steps, layers, seed)?;
        let testing = metered_rollout(&model, &d, &op)?;
        for &mode in modes {
            rows.push(MemoryRow {
                time_steps: t_steps,
                layers,
                mode: mode.to_string(),
                phase: "testing".into(),
                peak_elements: testing.peak_elements,
                layer_evals: testing.layer_evals,
            });
            let report = backprop(&model, &d, &op, &target, &loss_cfg, mode)?;
            rows.push(MemoryRow {
                time_steps: t_steps,
                layers,
                mode: mode.to_string(),
                phase: "training".into(),
                peak_elements: report.memory.peak_elements,
                layer_evals: report.memory.layer_evals,
            });
        }
    }
    Ok(rows)
}

/// Least-squares affine fit y = a + b x; returns (a, b, r_squared).
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (a + b * x)).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (a, b, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::make_mask;
    use crate::rng::SeededRng;
    use crate::train::StepWeights;
    use ndarray::Array2;

    fn random_field(seed: u64, h: usize, w: usize) -> ComplexField {
        let mut rng = SeededRng::new(seed);
        ComplexField {
            re: Array2::from_shape_simple_fn((h, w), || rng.normal()),
            im: Array2::from_shape_simple_fn((h, w), || rng.normal()),
        }
    }

    fn desk_model(seed: u64, t: usize, l: usize, c: usize) -> IrimModel {
        let schedule: Vec<usize> = (0..l).map(|i| [1, 2, 2, 1][i % 4]).collect();
        IrimModel::init(&ModelConfig {
            channels: c,
            time_steps: t,
            layers_per_step: l,
            downsample_schedule: schedule,
            split: c / 2,
            reflections: 3,
            hidden: 3,
            grad_mode: GradientFlowMode::Exact,
            seed,
        })
        .unwrap()
    }

    fn loss_cfg(seed: u64) -> LossConfig {
        LossConfig {
            keep_fraction: 1.0,
            weights: StepWeights::LastOnly,
            seed,
        }
    }

    #[test]
    fn modes_agree_on_random_model() {
        let model = desk_model(1, 2, 4, 8);
        let mask = make_mask(8, 8, 2.0, 0.25, 1).unwrap();
        let op = FourierOperator::new(mask);
        let target = random_field(2, 8, 8);
        let d = op.forward(&target).unwrap();
        let cfg = loss_cfg(3);
        let stored = backprop_stored(&model, &d, &op, &target, &cfg).unwrap();
        let inv = backprop_invertible(&model, &d, &op, &target, &cfg, 1e-4).unwrap();
        assert!((stored.loss - inv.loss).abs() < 1e-12);
        let gs = stored.grads.flatten();
        let gi = inv.grads.flatten();
        let max_diff = gs
            .iter()
            .zip(&gi)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let denom = gs.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-12;
        assert!(max_diff / denom <= 1e-7, "rel diff {}", max_diff / denom);
    }

    #[test]
    fn degenerate_depth_is_bitwise_identical() {
        // T=1, L=1, G = 0: no reconstruction error is possible
        let mut model = desk_model(4, 1, 1, 8);
        model.steps[0].layers[0] =
            crate::layers::AdditiveCoupling::identity(8, 4, 1, 3);
        let mask = make_mask(8, 8, 2.0, 0.25, 2).unwrap();
        let op = FourierOperator::new(mask);
        let target = random_field(5, 8, 8);
        let d = op.forward(&target).unwrap();
        let cfg = loss_cfg(6);
        let stored = backprop_stored(&model, &d, &op, &target, &cfg).unwrap();
        let inv = backprop_invertible(&model, &d, &op, &target, &cfg, 1e-12).unwrap();
        let gs = stored.grads.flatten();
        let gi = inv.grads.flatten();
        assert!(gs.iter().zip(&gi).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn stored_matches_finite_differences() {
        let model = desk_model(7, 2, 4, 8);
        let mask = make_mask(8, 8, 2.0, 0.25, 3).unwrap();
        let op = FourierOperator::new(mask);
        let target = random_field(8, 8, 8);
        let d = op.forward(&target).unwrap();
        let cfg = loss_cfg(9);
        let report = backprop_stored(&model, &d, &op, &target, &cfg).unwrap();
        let flat_grads = report.grads.flatten();
        let mut pick = SeededRng::new(10);
        let coords: Vec<usize> = (0..20).map(|_| pick.below(flat_grads.len())).collect();
        let fd = finite_difference_grad(&model, &d, &op, &target, &cfg, &coords, 1e-6).unwrap();
        for (k, &i) in coords.iter().enumerate() {
            let rel = (flat_grads[i] - fd[k]).abs() / (1.0 + fd[k].abs());
            assert!(rel <= 1e-5, "coord {i}: analytic {} vs fd {}", flat_grads[i], fd[k]);
        }
    }

    #[test]
    fn fd_plateau_over_step_sizes() {
        let model = desk_model(11, 1, 2, 8);
        let mask = make_mask(8, 8, 2.0, 0.25, 4).unwrap();
        let op = FourierOperator::new(mask);
        let target = random_field(12, 8, 8);
        let d = op.forward(&target).unwrap();
        let cfg = loss_cfg(13);
        let report = backprop_stored(&model, &d, &op, &target, &cfg).unwrap();
        let flat = report.grads.flatten();
        let coord = flat
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        for h in [1e-7, 1e-6, 1e-5, 1e-4] {
            let fd = finite_difference_grad(&model, &d, &op, &target, &cfg, &[coord], h).unwrap()[0];
            let rel = (flat[coord] - fd).abs() / (1.0 + fd.abs());
            assert!(rel <= 1e-4, "h = {h}: rel {rel}");
        }
    }

    #[test]
    fn stored_memory_linear_in_depth() {
        let mask = make_mask(8, 8, 2.0, 0.25, 5).unwrap();
        let op = FourierOperator::new(mask);
        let target = random_field(14, 8, 8);
        let d = op.forward(&target).unwrap();
        let cfg = loss_cfg(15);
        let depths = [2usize, 4, 8, 16];
        let peaks: Vec<f64> = depths
            .iter()
            .map(|&l| {
                let model = desk_model(16, 2, l, 8);
                backprop_stored(&model, &d, &op, &target, &cfg)
                    .unwrap()
                    .memory
                    .peak_elements as f64
            })
            .collect();
        let xs: Vec<f64> = depths.iter().map(|&l| l as f64).collect();
        let (_, slope, r2) = affine_fit(&xs, &peaks);
        assert!(slope > 0.0);
        assert!(r2 >= 0.999, "r2 = {r2}");
    }

    #[test]
    fn invertible_memory_flat_in_depth() {
        let mask = make_mask(8, 8, 2.0, 0.25, 6).unwrap();
        let op = FourierOperator::new(mask);
        let target = random_field(17, 8, 8);
        let d = op.forward(&target).unwrap();
        let cfg = loss_cfg(18);
        let mut peaks = Vec::new();
        for l in [2usize, 8, 32] {
            let model = desk_model(19, 1, l, 8);
            let r = backprop_invertible(&model, &d, &op, &target, &cfg, 1e-3).unwrap();
            peaks.push(r.memory.peak_elements as f64);
        }
        let ratio = peaks.iter().cloned().fold(f64::MIN, f64::max)
            / peaks.iter().cloned().fold(f64::MAX, f64::min);
        assert!(ratio <= 1.1, "peaks {peaks:?}");
    }

    #[test]
    fn invertible_layer_evals_bounded_by_three_halves_of_stored() {
        // contract: invertible does at most 3x the evals of a plain rollout,
        // i.e. 1.5x the evals of stored-mode training
        let mask = make_mask(8, 8, 2.0, 0.25, 7).unwrap();
        let op = FourierOperator::new(mask);
        let target = random_field(20, 8, 8);
        let d = op.forward(&target).unwrap();
        let cfg = loss_cfg(21);
        let model = desk_model(22, 2, 4, 8);
        let stored = backprop_stored(&model, &d, &op, &target, &cfg).unwrap();
        let inv = backprop_invertible(&model, &d, &op, &target, &cfg, 1e-3).unwrap();
        assert!(inv.memory.layer_evals <= 3 * stored.memory.layer_evals / 2);
    }

    #[test]
    fn drift_guard_trips_on_tight_bound() {
        let model = desk_model(23, 2, 6, 8);
        let mask = make_mask(8, 8, 2.0, 0.25, 8).unwrap();
        let op = FourierOperator::new(mask);
        let target = random_field(24, 8, 8);
        let d = op.forward(&target).unwrap();
        let cfg = loss_cfg(25);
        // an impossible bound (0.0) must trip the guard and name the step
        match backprop_invertible(&model, &d, &op, &target, &cfg, 0.0) {
            Err(IrimError::ReconstructionDrift { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected drift error, got {:?}", other.map(|r| r.loss)),
        }
    }

    #[test]
    fn memory_report_trends() {
        let rows = memory_report(
            8,
            8,
            8,
            &[(1, 1), (1, 4), (1, 8)],
            &[BackpropMode::Stored, BackpropMode::Invertible],
            0,
        )
        .unwrap();
        let training_peak = |mode: &str, l: usize| {
            rows.iter()
                .find(|r| r.mode == mode && r.phase == "training" && r.layers == l)
                .unwrap()
                .peak_elements as f64
        };
        let testing_peak = |l: usize| {
            rows.iter()
                .find(|r| r.phase == "testing" && r.layers == l)
                .unwrap()
                .peak_elements as f64
        };
        // invertible training sits within one layer transient of testing
        for l in [1usize, 4, 8] {
            let t = testing_peak(l);
            let tr = training_peak("invertible", l);
            assert!(tr >= t && tr <= 3.0 * t, "testing {t} training {tr}");
        }
        // stored training strictly increases with depth
        assert!(training_peak("stored", 4) > training_peak("stored", 1));
        assert!(training_peak("stored", 8) > training_peak("stored", 4));
        // near-parity at degenerate depth
        let ratio = training_peak("stored", 1) / training_peak("invertible", 1);
        assert!(ratio <= 2.0 && ratio >= 0.5);
    }
}
