//! Subsampled-Fourier measurement model: column-line k-space masks, the
//! linear operator A = P F, its adjoint, measurement simulation, and the
//! data-consistency gradient that drives each inference step.
//!
//! The data-consistency term is fixed to D(d, A eta) = 1/2 ||d - A eta||^2,
//! so grad_eta D = A^H (A eta - d) and its Jacobian with respect to eta is
//! the self-adjoint projection A^H A.

use crate::dft::{dft2, idft2, ComplexField};
use crate::error::{IrimError, Result};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

/// Binary k-space mask, constant along the readout (row) dimension: selecting
/// a column keeps that whole k-space line. Columns are indexed in the centered
/// frequency convention of [`dft2`], so the "central band" is low-frequency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingMask {
    pub h: usize,
    pub w: usize,
    pub cols: Vec<bool>,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn is_sampled(&self, col: usize) -> bool {
        self.cols[col]
    }

    pub fn sampled_count(&self) -> usize {
        self.cols.iter().filter(|&&c| c).count() * self.h
    }

    /// Pointwise multiply a k-space field by the mask.
    pub fn apply(&self, y: &ComplexField) -> ComplexField {
        let mut out = y.clone();
        for x in 0..self.w {
            if !self.cols[x] {
                for yy in 0..self.h {
                    out.re[[yy, x]] = 0.0;
                    out.im[[yy, x]] = 0.0;
                }
            }
        }
        out
    }
}

/// Fully-sampled central band of `round(center_fraction * w)` columns plus
/// uniformly random extra columns until `round(w / acceleration)` total.
pub fn make_mask(
    h: usize,
    w: usize,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if acceleration < 1.0 {
        return Err(IrimError::Config(format!(
            "acceleration must be >= 1, got {acceleration}"
        )));
    }
    let center = (center_fraction * w as f64).round() as usize;
    if center < 1 {
        return Err(IrimError::Config(format!(
            "center_fraction {center_fraction} selects no columns at width {w}"
        )));
    }
    let budget = (w as f64 / acceleration).round() as usize;
    if center > budget {
        return Err(IrimError::Config(format!(
            "center band ({center} columns) exceeds sampling budget ({budget} columns)"
        )));
    }
    let mut cols = vec![false; w];
    let band_start = (w - center) / 2;
    for c in band_start..band_start + center {
        cols[c] = true;
    }
    let mut remaining: Vec<usize> = (0..w).filter(|&c| !cols[c]).collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut remaining);
    for &c in remaining.iter().take(budget - center) {
        cols[c] = true;
    }
    Ok(SamplingMask {
        h,
        w,
        cols,
        acceleration,
        center_fraction,
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct FourierOperator {
    pub mask: SamplingMask,
}

impl FourierOperator {
    pub fn new(mask: SamplingMask) -> Self {
        FourierOperator { mask }
    }

    fn check_shape(&self, x: &ComplexField, context: &str) -> Result<()> {
        if x.dim() != (self.mask.h, self.mask.w) {
            return Err(IrimError::shape(
                context,
                format!("{}x{}", self.mask.h, self.mask.w),
                format!("{:?}", x.dim()),
            ));
        }
        Ok(())
    }

    /// d = P F eta. Unsampled entries are exactly zero.
    pub fn forward(&self, eta: &ComplexField) -> Result<ComplexField> {
        self.check_shape(eta, "apply_forward")?;
        Ok(self.mask.apply(&dft2(eta)))
    }

    /// A^H d = F^H P^T d (zero-filled reconstruction when d is measured data).
    pub fn adjoint(&self, d: &ComplexField) -> Result<ComplexField> {
        self.check_shape(d, "apply_adjoint")?;
        Ok(idft2(&self.mask.apply(d)))
    }

    /// grad_eta of 1/2 ||d - A eta||^2, i.e. A^H (A eta - d).
    pub fn data_consistency_grad(&self, d: &ComplexField, eta: &ComplexField) -> Result<ComplexField> {
        self.check_shape(eta, "data_consistency_grad")?;
        self.check_shape(d, "data_consistency_grad")?;
        let residual = self.forward(eta)?.sub(&self.mask.apply(d));
        self.adjoint(&residual)
    }

    pub fn data_consistency_value(&self, d: &ComplexField, eta: &ComplexField) -> Result<f64> {
        let residual = self.forward(eta)?.sub(&self.mask.apply(d));
        Ok(0.5 * residual.norm_sq())
    }

    /// Jacobian of [`Self::data_consistency_grad`] with respect to eta applied
    /// to v. The quadratic D with linear A makes this exactly A^H A v.
    pub fn dc_grad_vjp(&self, v: &ComplexField) -> Result<ComplexField> {
        self.check_shape(v, "dc_grad_vjp")?;
        self.adjoint(&self.forward(v)?)
    }
}

/// A eta plus masked complex Gaussian noise (std per real component).
pub fn simulate_measurement(
    eta: &ComplexField,
    mask: &SamplingMask,
    noise_std: f64,
    seed: u64,
) -> Result<ComplexField> {
    let op = FourierOperator::new(mask.clone());
    let mut d = op.forward(eta)?;
    if noise_std > 0.0 {
        let mut rng = SeededRng::new(seed);
        let (h, w) = d.dim();
        for y in 0..h {
            for x in 0..w {
                // draw for every grid point so the stream layout is stable
                let nr = rng.normal() * noise_std;
                let ni = rng.normal() * noise_std;
                if mask.is_sampled(x) {
                    d.re[[y, x]] += nr;
                    d.im[[y, x]] += ni;
                }
            }
        }
    }
    Ok(d)
}
