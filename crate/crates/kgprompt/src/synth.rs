//! Synthetic two-cluster image datasets for desk-scale runs: seeded class
//! patterns with per-subject offsets and pixel noise, plus a manifest.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::manifest::{render_manifest, Label, ManifestRow, Split};

/// How the generator tags the split column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPlan {
    /// Every row tagged `auto`; protocol runners decide.
    Auto,
    /// Subject-disjoint tagging: the first `train` subjects train, the next
    /// `dev` dev, the rest `test`. Counts must sum to the subject count.
    Subjects {
        train: usize,
        dev: usize,
        test: usize,
    },
}

/// Generator settings for one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    /// Images per subject per class.
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-range of the per-subject uniform channel offset.
    pub subject_spread: f64,
    /// Constant added to every channel, for simulating a domain shift.
    pub tint: f64,
    pub plan: SplitPlan,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 6,
            per_class: 8,
            image_size: 64,
            seed: 0,
            noise: 0.03,
            subject_spread: 0.05,
            tint: 0.0,
            plan: SplitPlan::Auto,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.per_class == 0 || self.image_size == 0 {
            return Err(Error::InvalidConfig(
                "subjects, per_class and image_size must be positive".into(),
            ));
        }
        let nonneg = |v: f64| !v.is_nan() && v >= 0.0;
        if !nonneg(self.noise) || !nonneg(self.subject_spread) {
            return Err(Error::InvalidConfig(
                "noise and subject_spread must be >= 0".into(),
            ));
        }
        if let SplitPlan::Subjects { train, dev, test } = self.plan {
            if train + dev + test != self.subjects {
                return Err(Error::InvalidConfig(format!(
                    "split plan covers {} subjects, dataset has {}",
                    train + dev + test,
                    self.subjects
                )));
            }
        }
        Ok(())
    }
}

fn class_base(label: Label, channel: usize, fy: f64, fx: f64) -> f64 {
    match label {
        Label::Real => {
            let base = [0.72, 0.55, 0.38][channel];
            base + 0.18 * (fy - 0.5)
        }
        Label::Mask => {
            let base = [0.38, 0.55, 0.72][channel];
            base + 0.18 * (fx - 0.5)
        }
    }
}

fn subject_name(index: usize) -> String {
    format!("s{index:02}")
}

fn split_for_subject(plan: SplitPlan, subject_index: usize) -> Split {
    match plan {
        SplitPlan::Auto => Split::Auto,
        SplitPlan::Subjects { train, dev, .. } => {
            if subject_index < train {
                Split::Train
            } else if subject_index < train + dev {
                Split::Dev
            } else {
                Split::Test
            }
        }
    }
}

/// Generates PNGs under `dir/images` and writes `dir/manifest.csv`;
/// returns the manifest path. Fully determined by the config.
pub fn generate_dataset(dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offsets: Vec<[f64; 3]> = (0..cfg.subjects)
        .map(|_| {
            let mut o = [0.0; 3];
            for v in &mut o {
                *v = rng.random_range(-cfg.subject_spread..=cfg.subject_spread);
            }
            o
        })
        .collect();

    let side = cfg.image_size;
    let mut rows = Vec::new();
    for (subject_index, offset) in offsets.iter().enumerate() {
        let subject = subject_name(subject_index);
        let split = split_for_subject(cfg.plan, subject_index);
        let attack_type = if subject_index % 2 == 0 {
            "resin"
        } else {
            "silicone"
        };
        for label in [Label::Real, Label::Mask] {
            for image_index in 0..cfg.per_class {
                let mut img = image::RgbImage::new(side as u32, side as u32);
                for y in 0..side {
                    for x in 0..side {
                        let fy = y as f64 / side as f64;
                        let fx = x as f64 / side as f64;
                        let mut pixel = [0u8; 3];
                        for c in 0..3 {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            let v =
                                class_base(label, c, fy, fx) + offset[c] + cfg.tint + cfg.noise * z;
                            pixel[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        }
                        img.put_pixel(x as u32, y as u32, image::Rgb(pixel));
                    }
                }
                let name = format!("{subject}_{label}_{image_index:03}.png");
                let path = image_dir.join(&name);
                img.save(&path)
                    .map_err(|e| Error::MalformedFile(format!("{name}: {e}")))?;
                rows.push(ManifestRow {
                    path: PathBuf::from(format!("images/{name}")),
                    label,
                    subject: subject.clone(),
                    attack_type: if label == Label::Mask {
                        attack_type.to_string()
                    } else {
                        String::new()
                    },
                    split,
                });
            }
        }
    }

    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, render_manifest(&rows))
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
