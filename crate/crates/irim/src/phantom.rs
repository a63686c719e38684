//! Synthetic complex-valued phantoms and on-disk datasets.
//!
//! A phantom is a superposition of randomly placed, rotated ellipses with a
//! smooth low-frequency phase. Generation is deterministic per
//! (dataset seed, item index), so datasets can be rebuilt bit-identically.

use crate::dft::ComplexField;
use crate::error::{IrimError, Result};
use crate::io::{read_tensor, sha256_file, write_atomic, write_tensor};
use crate::rng::{derive_seed, SeededRng};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of ellipses; 0 ellipses gives the zero field.
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    /// Inclusive range of per-ellipse intensity before normalization.
    pub min_intensity: f64,
    pub max_intensity: f64,
    /// Peak amplitude of the smooth phase field, in radians. 0 gives a real phantom.
    pub phase_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_ellipses: 3,
            max_ellipses: 8,
            min_intensity: 0.3,
            max_intensity: 1.0,
            phase_amplitude: 0.5,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(IrimError::Config("phantom extent must be positive".into()));
        }
        if self.min_ellipses > self.max_ellipses {
            return Err(IrimError::Config(format!(
                "min_ellipses {} exceeds max_ellipses {}",
                self.min_ellipses, self.max_ellipses
            )));
        }
        if self.min_intensity > self.max_intensity {
            return Err(IrimError::Config("intensity range is inverted".into()));
        }
        Ok(())
    }
}

/// Deterministic phantom for (config seed, item index).
pub fn generate_phantom(cfg: &PhantomConfig, index: u64) -> Result<ComplexField> {
    cfg.validate()?;
    let mut rng = SeededRng::new(derive_seed(cfg.seed, index));
    let (h, w) = (cfg.height, cfg.width);
    let mut magnitude = Array2::<f64>::zeros((h, w));
    let count = if cfg.max_ellipses == cfg.min_ellipses {
        cfg.min_ellipses
    } else {
        cfg.min_ellipses + rng.below(cfg.max_ellipses - cfg.min_ellipses + 1)
    };
    for _ in 0..count {
        let cy = rng.uniform() * h as f64;
        let cx = rng.uniform() * w as f64;
        let ry = (0.05 + 0.2 * rng.uniform()) * h as f64;
        let rx = (0.05 + 0.2 * rng.uniform()) * w as f64;
        let theta = rng.uniform() * std::f64::consts::PI;
        let intensity =
            cfg.min_intensity + rng.uniform() * (cfg.max_intensity - cfg.min_intensity);
        let (sin_t, cos_t) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = cos_t * dx + sin_t * dy;
                let v = -sin_t * dx + cos_t * dy;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    magnitude[[y, x]] += intensity;
                }
            }
        }
    }
    let peak = magnitude.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak > 0.0 {
        magnitude.mapv_inplace(|v| v / peak);
    }
    // smooth phase: a single low-frequency plane wave with random orientation
    let ky = rng.gen_range(0.5, 2.0);
    let kx = rng.gen_range(0.5, 2.0);
    let phi0 = rng.uniform() * std::f64::consts::TAU;
    let mut field = ComplexField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let phase = cfg.phase_amplitude
                * (std::f64::consts::TAU * (ky * y as f64 / h as f64 + kx * x as f64 / w as f64)
                    + phi0)
                    .sin();
            field.re[[y, x]] = magnitude[[y, x]] * phase.cos();
            field.im[[y, x]] = magnitude[[y, x]] * phase.sin();
        }
    }
    Ok(field)
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: PhantomConfig,
    pub count: usize,
    /// file name -> sha256 of the file contents
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub sha256: String,
}

fn item_file(index: usize) -> String {
    format!("item_{index:06}.bin")
}

fn field_to_tensor(f: &ComplexField) -> ArrayD<f64> {
    let (h, w) = f.dim();
    let mut t = ArrayD::zeros(IxDyn(&[2, h, w]));
    t.index_axis_mut(ndarray::Axis(0), 0).assign(&f.re);
    t.index_axis_mut(ndarray::Axis(0), 1).assign(&f.im);
    t
}

fn tensor_to_field(t: &ArrayD<f64>, path: &str) -> Result<ComplexField> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(IrimError::Format {
            path: path.into(),
            reason: format!("expected (2, H, W) tensor, got {shape:?}"),
        });
    }
    Ok(ComplexField {
        re: t
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("rank checked"),
        im: t
            .index_axis(ndarray::Axis(0), 1)
            .to_owned()
            .into_dimensionality()
            .expect("rank checked"),
    })
}

/// Writes `count` phantoms plus a manifest into `dir`. Rebuilding with the
/// same config produces byte-identical files; existing files with matching
/// hashes are left untouched.
pub fn build_dataset(cfg: &PhantomConfig, count: usize, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let field = generate_phantom(cfg, i as u64)?;
        let tensor = field_to_tensor(&field);
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &tensor.view())?;
        let hash = crate::io::sha256_hex(&bytes);
        let path = dir.join(item_file(i));
        let up_to_date = path.exists() && sha256_file(&path)? == hash;
        if !up_to_date {
            write_atomic(&path, &bytes)?;
        }
        items.push(ManifestItem {
            file: item_file(i),
            sha256: hash,
        });
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        count,
        items,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads one item, verifying its checksum against the manifest.
pub fn load_item(dir: &Path, manifest: &DatasetManifest, index: usize) -> Result<ComplexField> {
    let item = manifest.items.get(index).ok_or_else(|| {
        IrimError::Config(format!(
            "dataset item {index} out of range ({})",
            manifest.items.len()
        ))
    })?;
    let path = dir.join(&item.file);
    let actual = sha256_file(&path)?;
    if actual != item.sha256 {
        return Err(IrimError::Checksum {
            path: path.display().to_string(),
            expected: item.sha256.clone(),
            got: actual,
        });
    }
    let mut f = fs::File::open(&path)?;
    let tensor = read_tensor(&mut f, &path.display().to_string())?;
    tensor_to_field(&tensor, &path.display().to_string())
}

/// Loads the whole dataset in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<ComplexField>> {
    let manifest = load_manifest(dir)?;
    (0..manifest.count)
        .map(|i| load_item(dir, &manifest, i))
        .collect()
}
