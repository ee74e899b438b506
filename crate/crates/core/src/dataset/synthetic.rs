use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{DatasetMeta, LabeledDataset};
use crate::augment::ImagePatch;
use crate::autodiff::SeedStream;
use crate::error::{Error, Result};

/// Parameters of the synthetic stained-patch benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub per_class: usize,
    /// Per-class image counts; overrides `per_class` when set.
    pub class_sizes: Option<Vec<usize>>,
    pub patch_size: usize,
    pub color_separation: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            num_classes: 9,
            per_class: 400,
            class_sizes: None,
            patch_size: 16,
            color_separation: 0.25,
            texture_amplitude: 0.15,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticParams {
    pub fn sizes(&self) -> Vec<usize> {
        self.class_sizes
            .clone()
            .unwrap_or_else(|| vec![self.per_class; self.num_classes])
    }

    /// Geometric class sizes from 400 down to 8 over 8 classes.
    pub fn imbalanced() -> Self {
        Self {
            num_classes: 8,
            class_sizes: Some(imbalanced_class_sizes(8, 400, 8)),
            ..Self::default()
        }
    }
}

/// `n` sizes decaying geometrically from `largest` to `smallest`.
pub fn imbalanced_class_sizes(n: usize, largest: usize, smallest: usize) -> Vec<usize> {
    if n == 1 {
        return vec![largest];
    }
    let ratio = (smallest as f64 / largest as f64).powf(1.0 / (n - 1) as f64);
    (0..n)
        .map(|k| (largest as f64 * ratio.powi(k as i32)).round() as usize)
        .collect()
}

/// Lower and upper bound of each base-color channel, leaving headroom for
/// texture and noise.
const COLOR_LO: f64 = 0.25;
const COLOR_HI: f64 = 0.75;

fn base_colors(k: usize, separation: f64, rng: &mut SeedStream) -> Result<Vec<[f64; 3]>> {
    let diagonal = 3f64.sqrt() * (COLOR_HI - COLOR_LO);
    if k >= 2 && separation > diagonal {
        return Err(Error::InvalidArgument(format!(
            "color separation {separation} exceeds the color cube diagonal {diagonal:.3}"
        )));
    }
    for _ in 0..200 {
        let mut colors: Vec<[f64; 3]> = Vec::with_capacity(k);
        for _ in 0..2000 {
            if colors.len() == k {
                break;
            }
            let c = [0; 3].map(|_| rng.uniform(COLOR_LO, COLOR_HI));
            let far = colors.iter().all(|o| {
                let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() >= separation
            });
            if far {
                colors.push(c);
            }
        }
        if colors.len() == k {
            return Ok(colors);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place {k} colors with pairwise separation {separation}"
    )))
}

/// Deterministic synthetic dataset.
///
/// Class `k` has a base color (pairwise separated), a 2-D sinusoidal
/// texture of frequency `k + 1` with a random phase per image, and i.i.d.
/// Gaussian pixel noise. Pixel values are rounded to `f32` precision so
/// the dataset survives an S5DS round trip unchanged.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<LabeledDataset> {
    if params.num_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if params.patch_size < 8 {
        return Err(Error::InvalidArgument(
            "patch_size must be at least 8".into(),
        ));
    }
    let sizes = params.sizes();
    if sizes.len() != params.num_classes {
        return Err(Error::InvalidArgument(format!(
            "{} class sizes for {} classes",
            sizes.len(),
            params.num_classes
        )));
    }
    let root = SeedStream::new(params.seed);
    let colors = base_colors(
        params.num_classes,
        params.color_separation,
        &mut root.derive(0),
    )?;
    let n = params.patch_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (k, (&count, color)) in sizes.iter().zip(&colors).enumerate() {
        let class_stream = root.derive(1 + k as u64);
        let freq = (k + 1) as f64;
        for i in 0..count {
            let mut rng = class_stream.derive(i as u64);
            let phase_x = rng.uniform(0.0, 2.0 * PI);
            let phase_y = rng.uniform(0.0, 2.0 * PI);
            let mut pixels = Vec::with_capacity(n * n * 3);
            for r in 0..n {
                let sy = (2.0 * PI * freq * r as f64 / n as f64 + phase_y).sin();
                for c in 0..n {
                    let sx = (2.0 * PI * freq * c as f64 / n as f64 + phase_x).sin();
                    let texture = params.texture_amplitude * sx * sy;
                    for ch in color {
                        let noise = if params.noise_std > 0.0 {
                            params.noise_std * rng.normal()
                        } else {
                            0.0
                        };
                        let v = (ch + texture + noise).clamp(0.0, 1.0);
                        pixels.push(v as f32 as f64);
                    }
                }
            }
            images.push(ImagePatch::new(n, n, pixels)?);
            labels.push(k);
        }
    }
    let class_names = (0..params.num_classes)
        .map(|k| format!("class_{k}"))
        .collect();
    let meta = DatasetMeta {
        height: n,
        width: n,
        seed: Some(params.seed),
        generator: Some(params.clone()),
    };
    LabeledDataset::new(images, labels, class_names, meta)
}
