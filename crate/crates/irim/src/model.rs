//! The iterative inference state machine.
//!
//! The machine state is a C-channel tensor: channels 0-1 hold the current
//! complex estimate eta (real/imag), channels 2..C the auxiliary memory s.
//! One inference step is exactly invertible:
//!
//!   forward:  z' = eta_t
//!             s' = s_t + inject(grad D(d, A z'))
//!             (eta_{t+1}, s_{t+1}) = h_t(z', s')
//!
//!   reverse:  (z', s') = h_t^{-1}(eta_{t+1}, s_{t+1})
//!             s_t = s' - inject(grad D(d, A z'))
//!             eta_t = z'
//!
//! where h_t is a stack of additive coupling layers with no parameter sharing
//! across steps, and inject writes the gradient into the first two channels
//! of s, zero-padding the rest. The link function is the identity throughout.

use crate::dft::ComplexField;
use crate::error::{IrimError, Result};
use crate::forward_model::FourierOperator;
use crate::io;
use crate::layers::AdditiveCoupling;
use crate::rng::SeededRng;
use ndarray::{s, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// How gradients flow through the injected data-consistency term during
/// backpropagation. `Exact` differentiates the injection via the closed-form
/// Jacobian A^H A; `StopGradient` treats the injected gradient as a constant
/// input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientFlowMode {
    Exact,
    StopGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    /// (C, H, W); channels 0-1 are the estimate, the rest auxiliary memory.
    pub data: Array3<f64>,
    pub t: usize,
}

impl MachineState {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        MachineState {
            data: Array3::zeros((channels, h, w)),
            t: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn eta(&self) -> ComplexField {
        ComplexField {
            re: self.data.index_axis(ndarray::Axis(0), 0).to_owned(),
            im: self.data.index_axis(ndarray::Axis(0), 1).to_owned(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// g_t: place the complex gradient in the first two channels of an s-shaped
/// tensor (C-2 channels), zero elsewhere.
pub fn gradient_injection(grad: &ComplexField, channels: usize) -> Result<Array3<f64>> {
    if channels < 4 {
        return Err(IrimError::Config(format!(
            "gradient injection needs at least 4 state channels, got {channels}"
        )));
    }
    let (h, w) = grad.dim();
    let mut out = Array3::zeros((channels - 2, h, w));
    out.index_axis_mut(ndarray::Axis(0), 0).assign(&grad.re);
    out.index_axis_mut(ndarray::Axis(0), 1).assign(&grad.im);
    Ok(out)
}

/// One step's invertible network h_t: an ordered composition of coupling
/// layers sharing the same channel contract.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNetwork {
    pub layers: Vec<AdditiveCoupling<f64>>,
}

impl StepNetwork {
    pub fn forward(&self, x: &ArrayView3<f64>) -> Result<Array3<f64>> {
        let mut y = x.to_owned();
        for layer in &self.layers {
            y = layer.forward(&y.view())?;
        }
        Ok(y)
    }

    /// Composes layer inverses in reversed order.
    pub fn inverse(&self, y: &ArrayView3<f64>) -> Result<Array3<f64>> {
        let mut x = y.to_owned();
        for layer in self.layers.iter().rev() {
            x = layer.inverse(&x.view())?;
        }
        Ok(x)
    }
}

/// Architecture hyperparameters; serialized next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub time_steps: usize,
    pub layers_per_step: usize,
    pub downsample_schedule: Vec<usize>,
    pub split: usize,
    pub reflections: usize,
    pub hidden: usize,
    pub grad_mode: GradientFlowMode,
    pub seed: u64,
}

impl ModelConfig {
    /// Small profile meant for a single desktop core.
    pub fn desk(seed: u64) -> Self {
        ModelConfig {
            channels: 16,
            time_steps: 4,
            layers_per_step: 6,
            downsample_schedule: vec![1, 2, 4, 4, 2, 1],
            split: 8,
            reflections: 3,
            hidden: 8,
            grad_mode: GradientFlowMode::Exact,
            seed,
        }
    }

    /// The configuration used at full scale: 64 channels, 8 steps, 10 layers
    /// per step with a fanned downsampling profile.
    pub fn full_scale(seed: u64) -> Self {
        ModelConfig {
            channels: 64,
            time_steps: 8,
            layers_per_step: 10,
            downsample_schedule: vec![1, 2, 4, 8, 16, 16, 8, 4, 2, 1],
            split: 32,
            reflections: 3,
            hidden: 32,
            grad_mode: GradientFlowMode::Exact,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 {
            return Err(IrimError::Config("need at least 4 channels".into()));
        }
        if self.time_steps == 0 {
            return Err(IrimError::Config("need at least one time step".into()));
        }
        if self.downsample_schedule.len() != self.layers_per_step {
            return Err(IrimError::Config(format!(
                "downsample schedule length {} != layers per step {}",
                self.downsample_schedule.len(),
                self.layers_per_step
            )));
        }
        if self.split == 0 || self.split >= self.channels {
            return Err(IrimError::Config(format!(
                "split {} out of range for {} channels",
                self.split, self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrimModel {
    pub config: ModelConfig,
    pub steps: Vec<StepNetwork>,
    pub grad_mode: GradientFlowMode,
}

impl IrimModel {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let steps = (0..config.time_steps)
            .map(|_| {
                let layers = config
                    .downsample_schedule
                    .iter()
                    .map(|&d| {
                        AdditiveCoupling::init(
                            config.channels,
                            config.split,
                            config.reflections,
                            d,
                            config.hidden,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(StepNetwork { layers })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IrimModel {
            grad_mode: config.grad_mode,
            config: config.clone(),
            steps,
        })
    }

    pub fn time_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Maximum spatial downsampling factor across all layers; grid extents
    /// must be divisible by this.
    pub fn max_downsample(&self) -> usize {
        self.config
            .downsample_schedule
            .iter()
            .copied()
            .max()
            .unwrap_or(1)
    }

    pub fn zeros_like(&self) -> IrimModel {
        IrimModel {
            config: self.config.clone(),
            grad_mode: self.grad_mode,
            steps: self
                .steps
                .iter()
                .map(|s| StepNetwork {
                    layers: s.layers.iter().map(|l| l.zeros_like()).collect(),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &IrimModel, a: f64) {
        for (s, o) in self.steps.iter_mut().zip(&other.steps) {
            for (l, ol) in s.layers.iter_mut().zip(&o.layers) {
                l.add_scaled(ol, a);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| &s.layers)
            .map(|l| l.param_count())
            .sum()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &[f64])) {
        for (t, step) in self.steps.iter().enumerate() {
            for (l, layer) in step.layers.iter().enumerate() {
                layer.visit_params(&mut |name, slice| {
                    f(format!("step{t}/layer{l}/{name}"), slice)
                });
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        for (t, step) in self.steps.iter_mut().enumerate() {
            for (l, layer) in step.layers.iter_mut().enumerate() {
                layer.visit_params_mut(&mut |name, slice| {
                    f(format!("step{t}/layer{l}/{name}"), slice)
                });
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, s| out.extend_from_slice(s));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(&mut |_, s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn max_abs_param(&self) -> f64 {
        let mut m = 0.0f64;
        self.visit_params(&mut |_, s| {
            for &v in s {
                m = m.max(v.abs());
            }
        });
        m
    }
}

/// z' = eta_t; s' = s_t + g(grad D); (eta_{t+1}, s_{t+1}) = h_t(z', s').
pub fn irim_forward_step(
    state: &MachineState,
    d: &ComplexField,
    op: &FourierOperator,
    step: &StepNetwork,
) -> Result<MachineState> {
    let c = state.channels();
    let grad = op.data_consistency_grad(d, &state.eta())?;
    let inject = gradient_injection(&grad, c)?;
    let mut u = state.data.clone();
    u.slice_mut(s![2.., .., ..])
        .zip_mut_with(&inject, |a, &b| *a += b);
    let y = step.forward(&u.view())?;
    Ok(MachineState {
        data: y,
        t: state.t + 1,
    })
}

/// Exact algebraic inverse of [`irim_forward_step`]. Total: accepts any state,
/// not only forward outputs.
pub fn irim_reverse_step(
    state: &MachineState,
    d: &ComplexField,
    op: &FourierOperator,
    step: &StepNetwork,
) -> Result<MachineState> {
    let c = state.channels();
    let u = step.inverse(&state.data.view())?;
    let z_eta = ComplexField {
        re: u.index_axis(ndarray::Axis(0), 0).to_owned(),
        im: u.index_axis(ndarray::Axis(0), 1).to_owned(),
    };
    let grad = op.data_consistency_grad(d, &z_eta)?;
    let inject = gradient_injection(&grad, c)?;
    let mut data = u;
    data.slice_mut(s![2.., .., ..])
        .zip_mut_with(&inject, |a, &b| *a -= b);
    Ok(MachineState {
        data,
        t: state.t.saturating_sub(1),
    })
}

/// Applies `t_steps` forward steps from the zero state. The trajectory
/// (states 0..=T) is retained only on request.
pub fn irim_rollout(
    model: &IrimModel,
    d: &ComplexField,
    op: &FourierOperator,
    t_steps: usize,
    retain_trajectory: bool,
) -> Result<(MachineState, Option<Vec<MachineState>>)> {
    if t_steps > model.time_steps() {
        return Err(IrimError::Config(format!(
            "requested {t_steps} steps but model has {}",
            model.time_steps()
        )));
    }
    let (h, w) = d.dim();
    let mut state = MachineState::zeros(model.channels(), h, w);
    let mut trajectory = retain_trajectory.then(|| vec![state.clone()]);
    for t in 0..t_steps {
        state = irim_forward_step(&state, d, op, &model.steps[t])?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(state.clone());
        }
    }
    if !state.data.iter().all(|v| v.is_finite()) {
        return Err(IrimError::NonFinite("irim_rollout".into()));
    }
    Ok((state, trajectory))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Checkpoint layout: a JSON manifest line (length-prefixed) followed by named
/// parameter tensors in the binary container format.
pub fn save_checkpoint(model: &IrimModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let manifest = serde_json::to_vec(&model.config)?;
    buf.write_all(&(manifest.len() as u32).to_le_bytes())?;
    buf.write_all(&manifest)?;
    model.visit_params(&mut |name, slice| {
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[slice.len()]), slice.to_vec())
            .unwrap();
        io::write_named_tensor(&mut buf, &name, &arr.view()).unwrap();
    });
    io::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<IrimModel> {
    let bytes = std::fs::read(path)?;
    let pstr = path.display().to_string();
    if bytes.len() < 4 {
        return Err(IrimError::Format {
            path: pstr,
            reason: "truncated checkpoint".into(),
        });
    }
    let mlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(&bytes[4..4 + mlen])?;
    let mut model = IrimModel::init(&config)?;
    let mut r = &bytes[4 + mlen..];
    let mut tensors = std::collections::HashMap::new();
    while let Some((name, tensor)) = io::read_named_tensor(&mut r, &pstr)? {
        tensors.insert(name, tensor);
    }
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, slice| match tensors.get(&name) {
        Some(t) if t.len() == slice.len() => {
            for (dst, src) in slice.iter_mut().zip(t.iter()) {
                *dst = *src;
            }
        }
        _ => missing.push(name),
    });
    if !missing.is_empty() {
        return Err(IrimError::Format {
            path: pstr,
            reason: format!("missing or mismatched parameter groups: {missing:?}"),
        });
    }
    Ok(model)
}

pub fn checkpoint_hash(path: &Path) -> Result<String> {
    io::sha256_file(path)
}

/// Frobenius distance of each layer's U U^T from the identity; the structural
/// orthogonality diagnostic.
pub fn orthogonality_errors(model: &IrimModel) -> Result<Vec<f64>> {
    let mut errs = Vec::new();
    for step in &model.steps {
        for layer in &step.layers {
            let u = layer.householder.build_orthogonal()?;
            let uut = u.dot(&u.t());
            let c = u.nrows();
            let eye: Array2<f64> = Array2::eye(c);
            let err = uut
                .iter()
                .zip(eye.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::make_mask;
    use ndarray::Array2;

    fn random_field(seed: u64, h: usize, w: usize) -> ComplexField {
        let mut rng = SeededRng::new(seed);
        ComplexField {
            re: Array2::from_shape_simple_fn((h, w), || rng.normal()),
            im: Array2::from_shape_simple_fn((h, w), || rng.normal()),
        }
    }

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            channels: 8,
            time_steps: 3,
            layers_per_step: 2,
            downsample_schedule: vec![1, 2],
            split: 4,
            reflections: 3,
            hidden: 3,
            grad_mode: GradientFlowMode::Exact,
            seed,
        }
    }

    fn identity_model(config: &ModelConfig) -> IrimModel {
        let mut model = IrimModel::init(config).unwrap();
        for step in &mut model.steps {
            for layer in &mut step.layers {
                *layer = AdditiveCoupling::identity(
                    config.channels,
                    config.split,
                    layer.g.downsample,
                    layer.g.hidden,
                );
            }
        }
        model
    }

    #[test]
    fn injection_structure() {
        let grad = ComplexField {
            re: Array2::from_elem((4, 4), 1.0),
            im: Array2::from_elem((4, 4), 2.0),
        };
        let out = gradient_injection(&grad, 8).unwrap();
        assert_eq!(out.dim(), (6, 4, 4));
        assert!(out.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 1.0));
        assert!(out.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 2.0));
        assert!(out.slice(s![2.., .., ..]).iter().all(|&v| v == 0.0));
        // zero gradient -> zero tensor
        let z = gradient_injection(&ComplexField::zeros(4, 4), 8).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        // too few channels rejected
        assert!(gradient_injection(&grad, 3).is_err());
    }

    #[test]
    fn identity_step_at_consistent_estimate_is_fixed_point() {
        let config = small_config(0);
        let model = identity_model(&config);
        let mask = make_mask(8, 8, 2.0, 0.25, 0).unwrap();
        let op = FourierOperator::new(mask);
        // eta with A eta = d, s arbitrary
        let eta = random_field(1, 8, 8);
        let d = op.forward(&eta).unwrap();
        let mut state = MachineState::zeros(8, 8, 8);
        state.data.index_axis_mut(ndarray::Axis(0), 0).assign(&eta.re);
        state.data.index_axis_mut(ndarray::Axis(0), 1).assign(&eta.im);
        let next = irim_forward_step(&state, &d, &op, &model.steps[0]).unwrap();
        let diff = (&next.data - &state.data)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn one_step_from_zero_injects_negative_adjoint() {
        let config = small_config(0);
        let model = identity_model(&config);
        let mask = make_mask(8, 8, 1.0, 0.25, 0).unwrap();
        let op = FourierOperator::new(mask);
        let d = random_field(2, 8, 8);
        let state = MachineState::zeros(8, 8, 8);
        let next = irim_forward_step(&state, &d, &op, &model.steps[0]).unwrap();
        // eta_1 = 0 (identity h passes z' = 0 through channels 0-1)
        assert!((0..2).all(|c| next.data.index_axis(ndarray::Axis(0), c).iter().all(|&v| v == 0.0)));
        // s_1 channels 0-1 hold grad D at eta = 0, which is -A^H d
        let want = op.adjoint(&d).unwrap().scale(-1.0);
        let got_re = next.data.index_axis(ndarray::Axis(0), 2);
        let got_im = next.data.index_axis(ndarray::Axis(0), 3);
        let err = got_re
            .iter()
            .zip(want.re.iter())
            .chain(got_im.iter().zip(want.im.iter()))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn reverse_undoes_forward() {
        let config = small_config(3);
        let model = IrimModel::init(&config).unwrap();
        let mask = make_mask(8, 8, 2.0, 0.25, 1).unwrap();
        let op = FourierOperator::new(mask);
        let d = random_field(4, 8, 8);
        let mut rng = SeededRng::new(5);
        let state = MachineState {
            data: Array3::from_shape_simple_fn((8, 8, 8), || rng.normal()),
            t: 0,
        };
        let fwd = irim_forward_step(&state, &d, &op, &model.steps[0]).unwrap();
        let back = irim_reverse_step(&fwd, &d, &op, &model.steps[0]).unwrap();
        let err = (&back.data - &state.data)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-8, "round trip error {err}");
    }

    #[test]
    fn reverse_of_arbitrary_state_is_total() {
        let config = small_config(6);
        let model = IrimModel::init(&config).unwrap();
        let mask = make_mask(8, 8, 2.0, 0.25, 1).unwrap();
        let op = FourierOperator::new(mask);
        let d = random_field(7, 8, 8);
        let mut rng = SeededRng::new(8);
        let state = MachineState {
            data: Array3::from_shape_simple_fn((8, 8, 8), || rng.normal()),
            t: 5,
        };
        let back = irim_reverse_step(&state, &d, &op, &model.steps[0]).unwrap();
        assert!(back.data.iter().all(|v| v.is_finite()));
        assert_eq!(back.t, 4);
    }

    #[test]
    fn full_trajectory_reverses_to_zero() {
        // 8 steps, 10 layers per step: the full-depth reversibility case
        let config = ModelConfig {
            channels: 8,
            time_steps: 8,
            layers_per_step: 10,
            downsample_schedule: vec![1, 2, 4, 4, 2, 1, 2, 4, 2, 1],
            split: 4,
            reflections: 3,
            hidden: 3,
            grad_mode: GradientFlowMode::Exact,
            seed: 9,
        };
        let model = IrimModel::init(&config).unwrap();
        let mask = make_mask(16, 16, 2.0, 0.25, 2).unwrap();
        let op = FourierOperator::new(mask);
        let eta = random_field(10, 16, 16);
        let d = op.forward(&eta).unwrap();
        let (mut state, traj) = irim_rollout(&model, &d, &op, 8, true).unwrap();
        let traj = traj.unwrap();
        assert_eq!(traj.len(), 9);
        for t in (0..8).rev() {
            state = irim_reverse_step(&state, &d, &op, &model.steps[t]).unwrap();
            let err = (&state.data - &traj[t].data)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-6, "step {t}: drift {err}");
        }
        assert!(state.max_abs() <= 1e-6);
    }

    #[test]
    fn rollout_zero_steps_and_identity_model() {
        let config = small_config(11);
        let mask = make_mask(8, 8, 2.0, 0.25, 3).unwrap();
        let op = FourierOperator::new(mask);
        let d = random_field(12, 8, 8);
        let model = IrimModel::init(&config).unwrap();
        let (state, _) = irim_rollout(&model, &d, &op, 0, false).unwrap();
        assert_eq!(state.max_abs(), 0.0);
        // identity h never moves information from s into eta
        let idm = identity_model(&config);
        let (state, _) = irim_rollout(&idm, &d, &op, 3, false).unwrap();
        assert!(state.eta().max_abs_component() == 0.0);
    }

    #[test]
    fn rollout_is_deterministic() {
        let config = small_config(13);
        let model = IrimModel::init(&config).unwrap();
        let mask = make_mask(8, 8, 2.0, 0.25, 4).unwrap();
        let op = FourierOperator::new(mask);
        let d = random_field(14, 8, 8);
        let (a, _) = irim_rollout(&model, &d, &op, 3, false).unwrap();
        let (b, _) = irim_rollout(&model, &d, &op, 3, false).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn s_perturbation_passes_through_additively() {
        let config = small_config(15);
        let model = IrimModel::init(&config).unwrap();
        let mask = make_mask(8, 8, 2.0, 0.25, 5).unwrap();
        let op = FourierOperator::new(mask);
        let d = random_field(16, 8, 8);
        let mut rng = SeededRng::new(17);
        let state = MachineState {
            data: Array3::from_shape_simple_fn((8, 8, 8), || rng.normal()),
            t: 0,
        };
        let mut perturbed = state.clone();
        let delta = 0.37;
        perturbed.data[[5, 3, 2]] += delta;
        // before h is applied, s' differs by exactly delta: verify via the
        // reverse direction of the first layer composition
        let u1 = {
            let grad = op.data_consistency_grad(&d, &state.eta()).unwrap();
            let inject = gradient_injection(&grad, 8).unwrap();
            let mut u = state.data.clone();
            u.slice_mut(s![2.., .., ..]).zip_mut_with(&inject, |a, &b| *a += b);
            u
        };
        let u2 = {
            let grad = op.data_consistency_grad(&d, &perturbed.eta()).unwrap();
            let inject = gradient_injection(&grad, 8).unwrap();
            let mut u = perturbed.data.clone();
            u.slice_mut(s![2.., .., ..]).zip_mut_with(&inject, |a, &b| *a += b);
            u
        };
        let diff = &u2 - &u1;
        for (idx, &v) in diff.indexed_iter() {
            let want = if idx == (5, 3, 2) { delta } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
        let _ = model;
    }

    #[test]
    fn checkpoint_round_trip() {
        let config = small_config(18);
        let model = IrimModel::init(&config).unwrap();
        let dir = std::env::temp_dir().join(format!("irim-ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.config, loaded.config);
        assert_eq!(model.flatten(), loaded.flatten());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn orthogonality_errors_small_after_init() {
        let model = IrimModel::init(&small_config(19)).unwrap();
        let errs = orthogonality_errors(&model).unwrap();
        assert_eq!(errs.len(), 6);
        assert!(errs.iter().all(|&e| e <= 1e-12));
    }
}
