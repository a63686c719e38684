//! Training: masked reconstruction loss, Adam, and the optimization loop.

use crate::autodiff::{backprop, BackpropMode, GradReport};
use crate::dft::ComplexField;
use crate::error::{IrimError, Result};
use crate::forward_model::{make_mask, simulate_measurement, FourierOperator};
use crate::model::IrimModel;
use crate::rng::{derive_seed, SeededRng};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepWeights {
    /// Only the final estimate contributes to the loss.
    LastOnly,
    /// Every intermediate estimate contributes with equal weight 1/T.
    Uniform,
    /// Explicit per-step weights, one for each inference step.
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Fraction of pixels kept in the loss mask; 1.0 keeps every pixel and is
    /// bit-identical to the unmasked loss.
    pub keep_fraction: f64,
    pub weights: StepWeights,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.01,
            weights: StepWeights::LastOnly,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, t_total: usize) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(IrimError::Config(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if let StepWeights::Custom(w) = &self.weights {
            if w.len() != t_total {
                return Err(IrimError::Config(format!(
                    "custom step weights: {} entries for {} steps",
                    w.len(),
                    t_total
                )));
            }
        }
        Ok(())
    }

    /// Weight of the estimate after step `t` (1-based) out of `t_total`.
    pub fn weight(&self, t: usize, t_total: usize) -> f64 {
        match &self.weights {
            StepWeights::LastOnly => {
                if t == t_total {
                    1.0
                } else {
                    0.0
                }
            }
            StepWeights::Uniform => 1.0 / t_total as f64,
            StepWeights::Custom(w) => w[t - 1],
        }
    }

    /// Bernoulli pixel mask for the loss. Resamples (up to a bound) if the
    /// masked reference energy vanishes, so the loss denominator stays valid.
    pub fn pixel_mask(&self, target: &ComplexField) -> Result<Array2<bool>> {
        self.validate(1)?;
        let (h, w) = target.dim();
        if self.keep_fraction >= 1.0 {
            return Ok(Array2::from_elem((h, w), true));
        }
        for attempt in 0..64u64 {
            let mut rng = SeededRng::new(derive_seed(self.seed, attempt));
            let mask = Array2::from_shape_simple_fn((h, w), || rng.uniform() < self.keep_fraction);
            let energy: f64 = mask
                .indexed_iter()
                .filter(|(_, &m)| m)
                .map(|((y, x), _)| target.re[[y, x]].powi(2) + target.im[[y, x]].powi(2))
                .sum();
            if energy > 0.0 {
                return Ok(mask);
            }
        }
        Err(IrimError::Config(
            "loss pixel mask kept no reference energy after 64 attempts".into(),
        ))
    }
}

/// Normalized mean squared error over the masked pixels, with its gradient
/// with respect to the estimate:
/// L = ||m (x_hat - x)||^2 / ||m x||^2, dL/dx_hat = 2 m (x_hat - x) / ||m x||^2.
pub fn masked_nmse_value_grad(
    x_hat: &ComplexField,
    x: &ComplexField,
    mask: &Array2<bool>,
) -> Result<(f64, ComplexField)> {
    let (h, w) = x.dim();
    if x_hat.dim() != (h, w) || mask.dim() != (h, w) {
        return Err(IrimError::shape(
            "masked_nmse",
            format!("{h}x{w}"),
            format!("{}x{}", x_hat.dim().0, x_hat.dim().1),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut grad = ComplexField::zeros(h, w);
    for y in 0..h {
        for c in 0..w {
            if mask[[y, c]] {
                let dr = x_hat.re[[y, c]] - x.re[[y, c]];
                let di = x_hat.im[[y, c]] - x.im[[y, c]];
                num += dr * dr + di * di;
                den += x.re[[y, c]].powi(2) + x.im[[y, c]].powi(2);
                grad.re[[y, c]] = dr;
                grad.im[[y, c]] = di;
            }
        }
    }
    if den == 0.0 {
        return Err(IrimError::Config(
            "masked loss reference has zero energy".into(),
        ));
    }
    let scale = 2.0 / den;
    grad.re.mapv_inplace(|v| v * scale);
    grad.im.mapv_inplace(|v| v * scale);
    Ok((num / den, grad))
}

pub fn masked_nmse_loss(
    x_hat: &ComplexField,
    x: &ComplexField,
    keep_fraction: f64,
    seed: u64,
) -> Result<f64> {
    let cfg = LossConfig {
        keep_fraction,
        weights: StepWeights::LastOnly,
        seed,
    };
    let mask = cfg.pixel_mask(x)?;
    Ok(masked_nmse_value_grad(x_hat, x, &mask)?.0)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(IrimError::shape(
                "adam step",
                format!("{}", self.m.len()),
                format!("{}", params.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub noise_std: f64,
    pub loss: LossConfig,
    pub mode: BackpropMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            acceleration: 4.0,
            center_fraction: 0.08,
            noise_std: 0.0,
            loss: LossConfig::default(),
            mode: BackpropMode::Invertible,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub wall_ms: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub peak_retained_elements: usize,
}

impl TrainLogRow {
    pub fn csv_header() -> &'static str {
        "iteration,wall_ms,loss,grad_norm,peak_retained_elements"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.8e},{:.8e},{}",
            self.iteration, self.wall_ms, self.loss, self.grad_norm, self.peak_retained_elements
        )
    }
}

/// One optimization step on a batch of ground-truth images. The sampling mask
/// is drawn fresh per call; gradients are averaged over the batch in the order
/// the items are given.
pub fn train_step(
    model: &mut IrimModel,
    optimizer: &mut Adam,
    batch: &[&ComplexField],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<GradReport> {
    let iter_seed = derive_seed(cfg.seed, iteration as u64);
    let (h, w) = batch[0].dim();
    let mask = make_mask(h, w, cfg.acceleration, cfg.center_fraction, iter_seed)?;
    let op = FourierOperator::new(mask.clone());
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    let mut memory = crate::autodiff::MemorySnapshot::default();
    let loss_cfg = LossConfig {
        seed: derive_seed(iter_seed, u64::MAX),
        ..cfg.loss.clone()
    };
    for (b, target) in batch.iter().enumerate() {
        let d = simulate_measurement(target, &mask, cfg.noise_std, derive_seed(iter_seed, b as u64))?;
        let report = backprop(model, &d, &op, target, &loss_cfg, cfg.mode)?;
        total.add_scaled(&report.grads, 1.0 / batch.len() as f64);
        loss += report.loss / batch.len() as f64;
        memory.peak_elements = memory.peak_elements.max(report.memory.peak_elements);
        memory.layer_evals += report.memory.layer_evals;
    }
    if !loss.is_finite() {
        return Err(IrimError::NonFinite(format!(
            "training loss at iteration {iteration}"
        )));
    }
    let mut params = model.flatten();
    let grads = total.flatten();
    optimizer.step(&mut params, &grads)?;
    model.assign_from_flat(&params);
    Ok(GradReport {
        grads: total,
        loss,
        memory,
    })
}

/// Full training loop over a dataset of ground-truth images. Returns the
/// per-iteration log; `on_row` (if given) sees each row as it is produced.
pub fn train(
    model: &mut IrimModel,
    dataset: &[ComplexField],
    cfg: &TrainConfig,
    mut on_row: Option<&mut dyn FnMut(&TrainLogRow)>,
) -> Result<Vec<TrainLogRow>> {
    if dataset.is_empty() {
        return Err(IrimError::Config("training dataset is empty".into()));
    }
    cfg.loss.validate(model.time_steps())?;
    let mut optimizer = Adam::new(cfg.learning_rate, model.param_count());
    let mut sampler = SeededRng::new(derive_seed(cfg.seed, 0x5a5a_5a5a));
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<&ComplexField> = (0..cfg.batch_size)
            .map(|_| &dataset[sampler.below(dataset.len())])
            .collect();
        let report = train_step(model, &mut optimizer, &batch, cfg, it)?;
        let row = TrainLogRow {
            iteration: it,
            wall_ms: start.elapsed().as_millis() as u64,
            loss: report.loss,
            grad_norm: report.grad_norm(),
            peak_retained_elements: report.memory.peak_elements,
        };
        if let Some(f) = on_row.as_deref_mut() {
            f(&row);
        }
        log.push(row);
    }
    Ok(log)
}
