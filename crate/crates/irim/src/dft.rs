//! Complex-valued H x W fields and the unitary 2D discrete Fourier transform.
//!
//! Complex values are stored as two real planes (`re`, `im`), matching the
//! two-channel layout used throughout the model. The transform is centered:
//! the DC coefficient sits at (H/2, W/2), so a "central band" of k-space
//! columns means low frequencies. Normalization is 1/sqrt(HW) in both
//! directions, making `dft2` unitary and `idft2` its exact inverse.
//!
//! A direct (matrix) transform is used; at the grid sizes this crate targets
//! (<= 64 x 64) it is not the bottleneck. The 1D transform matrices are cached
//! per size.

use crate::error::{IrimError, Result};
use ndarray::Array2;
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub re: Array2<f64>,
    pub im: Array2<f64>,
}

impl ComplexField {
    pub fn new(re: Array2<f64>, im: Array2<f64>) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(IrimError::shape(
                "ComplexField",
                format!("{:?}", re.dim()),
                format!("{:?}", im.dim()),
            ));
        }
        Ok(ComplexField { re, im })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ComplexField {
            re: Array2::zeros((h, w)),
            im: Array2::zeros((h, w)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.re.dim()
    }

    pub fn add(&self, other: &ComplexField) -> ComplexField {
        ComplexField {
            re: &self.re + &other.re,
            im: &self.im + &other.im,
        }
    }

    pub fn sub(&self, other: &ComplexField) -> ComplexField {
        ComplexField {
            re: &self.re - &other.re,
            im: &self.im - &other.im,
        }
    }

    pub fn scale(&self, a: f64) -> ComplexField {
        ComplexField {
            re: &self.re * a,
            im: &self.im * a,
        }
    }

    /// Real inner product: Re(<self, other>) = sum(re*re + im*im).
    pub fn dot_real(&self, other: &ComplexField) -> f64 {
        self.re.iter().zip(other.re.iter()).map(|(a, b)| a * b).sum::<f64>()
            + self.im.iter().zip(other.im.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot_real(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs_component(&self) -> f64 {
        self.re
            .iter()
            .chain(self.im.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn magnitude(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.dim());
        for ((y, x), v) in out.indexed_iter_mut() {
            *v = (self.re[[y, x]].powi(2) + self.im[[y, x]].powi(2)).sqrt();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(self.im.iter()).all(|v| v.is_finite())
    }
}

/// 1D centered unitary DFT matrix of size n, as (re, im).
/// `inverse = false`: K[u, m] = exp(-2 pi i (u - n/2) m / n) / sqrt(n)
/// `inverse = true` : conjugate transpose of the forward matrix.
fn dft_matrix(n: usize, inverse: bool) -> Rc<(Array2<f64>, Array2<f64>)> {
    thread_local! {
        static CACHE: RefCell<HashMap<(usize, bool), Rc<(Array2<f64>, Array2<f64>)>>> =
            RefCell::new(HashMap::new());
    }
    CACHE.with(|c| {
        c.borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let center = (n / 2) as f64;
                let scale = 1.0 / (n as f64).sqrt();
                let mut re = Array2::zeros((n, n));
                let mut im = Array2::zeros((n, n));
                for a in 0..n {
                    for b in 0..n {
                        // forward: row = frequency u, col = sample m
                        // inverse: row = sample m, col = frequency u
                        let (u, m) = if inverse { (b, a) } else { (a, b) };
                        let sign = if inverse { 1.0 } else { -1.0 };
                        let ang = sign * 2.0 * PI * (u as f64 - center) * m as f64 / n as f64;
                        re[[a, b]] = ang.cos() * scale;
                        im[[a, b]] = ang.sin() * scale;
                    }
                }
                Rc::new((re, im))
            })
            .clone()
    })
}

/// Complex matrix product (Ar + i Ai)(Br + i Bi).
fn cmatmul(
    ar: &Array2<f64>,
    ai: &Array2<f64>,
    br: &Array2<f64>,
    bi: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    (ar.dot(br) - ai.dot(bi), ar.dot(bi) + ai.dot(br))
}

fn transform(x: &ComplexField, inverse: bool) -> ComplexField {
    let (h, w) = x.dim();
    let fh = dft_matrix(h, inverse);
    let fw = dft_matrix(w, inverse);
    // rows: Y = F_h X
    let (tr, ti) = cmatmul(&fh.0, &fh.1, &x.re, &x.im);
    // cols: Z = Y F_w^T
    let fwt_re = fw.0.t().to_owned();
    let fwt_im = fw.1.t().to_owned();
    let (zr, zi) = cmatmul(&tr, &ti, &fwt_re, &fwt_im);
    ComplexField { re: zr, im: zi }
}

/// Centered unitary 2D DFT; DC at (H/2, W/2).
pub fn dft2(x: &ComplexField) -> ComplexField {
    transform(x, false)
}

/// Inverse of [`dft2`].
pub fn idft2(y: &ComplexField) -> ComplexField {
    transform(y, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_field(seed: u64, h: usize, w: usize) -> ComplexField {
        let mut rng = SeededRng::new(seed);
        ComplexField {
            re: Array2::from_shape_simple_fn((h, w), || rng.normal()),
            im: Array2::from_shape_simple_fn((h, w), || rng.normal()),
        }
    }

    #[test]
    fn constant_field_concentrates_at_dc() {
        let (h, w) = (8, 8);
        let c = 3.5;
        let x = ComplexField {
            re: Array2::from_elem((h, w), c),
            im: Array2::zeros((h, w)),
        };
        let y = dft2(&x);
        let expected = c * ((h * w) as f64).sqrt();
        for yy in 0..h {
            for xx in 0..w {
                let mag = (y.re[[yy, xx]].powi(2) + y.im[[yy, xx]].powi(2)).sqrt();
                if (yy, xx) == (h / 2, w / 2) {
                    assert!((mag - expected).abs() < 1e-10);
                } else {
                    assert!(mag < 1e-10, "leak at ({yy},{xx}): {mag}");
                }
            }
        }
    }

    #[test]
    fn round_trip_16x16() {
        let x = random_field(5, 16, 16);
        let back = idft2(&dft2(&x));
        let err = back.sub(&x).max_abs_component();
        assert!(err <= 1e-10, "round-trip error {err}");
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = ComplexField::zeros(4, 4);
        x.re[[0, 0]] = 1.0;
        let y = dft2(&x);
        for yy in 0..4 {
            for xx in 0..4 {
                let mag = (y.re[[yy, xx]].powi(2) + y.im[[yy, xx]].powi(2)).sqrt();
                assert!((mag - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parseval() {
        for seed in 0..5 {
            let x = random_field(100 + seed, 12, 20);
            let y = dft2(&x);
            assert!((x.norm() - y.norm()).abs() <= 1e-10);
        }
    }
}
