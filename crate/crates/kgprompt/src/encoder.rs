//! Frozen vision encoder interface: patch tiling, a deterministic toy
//! encoder for desk-scale runs, and an HTTP adapter for external backbones.

use std::path::Path;

use base64::Engine;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A square RGB image with channel-major float pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    /// Wraps a (3, side, side) pixel tensor.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::DimensionMismatch(format!(
                "expected 3 channels, got {c}"
            )));
        }
        if h != w {
            return Err(Error::DimensionMismatch(format!(
                "image must be square, got {h}x{w}"
            )));
        }
        if pixels
            .iter()
            .any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
        {
            return Err(Error::MalformedFile(
                "pixel values must be finite and in [0,1]".into(),
            ));
        }
        Ok(ImageTensor { pixels })
    }

    /// Decodes a PNG file and scales 8-bit channels to [0,1].
    pub fn from_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::zeros((3, h as usize, w as usize));
        for (x, y, pixel) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[[c, y as usize, x as usize]] = f64::from(pixel[c]) / 255.0;
            }
        }
        ImageTensor::new(pixels)
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }
}

/// Global and per-patch features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Image-level feature of width m_enc.
    pub global: Array1<f64>,
    /// One row per patch, row-major over the patch grid, width m_enc.
    pub patches: Array2<f64>,
}

impl EncoderOutput {
    fn validate(self) -> Result<Self> {
        if self.global.len() != self.patches.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "global width {} differs from patch width {}",
                self.global.len(),
                self.patches.ncols()
            )));
        }
        let finite = self
            .global
            .iter()
            .chain(self.patches.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::EncoderFailure(
                "encoder produced non-finite features".into(),
            ));
        }
        Ok(self)
    }
}

/// Splits the image into grid x grid non-overlapping patches, row-major.
pub fn patch_grid(img: &ImageTensor, grid: usize) -> Result<Vec<ArrayView3<'_, f64>>> {
    let side = img.side();
    if grid == 0 || !side.is_multiple_of(grid) {
        return Err(Error::IndivisibleGrid { side, grid });
    }
    let ps = side / grid;
    let mut patches = Vec::with_capacity(grid * grid);
    for py in 0..grid {
        for px in 0..grid {
            let view = img.pixels().slice(ndarray::s![
                ..,
                py * ps..(py + 1) * ps,
                px * ps..(px + 1) * ps
            ]);
            patches.push(view);
        }
    }
    Ok(patches)
}

/// Deterministic linear encoder: patch features are a fixed seeded random
/// projection of the flattened patch, the global feature is their mean.
///
/// It has no trainable state, standing in for a frozen backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub feature_width: usize,
    pub grid: usize,
    pub seed: u64,
}

impl ToyEncoder {
    pub fn new(feature_width: usize, grid: usize, seed: u64) -> Self {
        ToyEncoder {
            feature_width,
            grid,
            seed,
        }
    }

    fn projection(&self, patch_len: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut r = Array2::from_shape_fn((self.feature_width, patch_len), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        for mut row in r.axis_iter_mut(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        r
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<EncoderOutput> {
        let patches = patch_grid(img, self.grid)?;
        let patch_len = patches[0].len();
        let r = self.projection(patch_len);
        let mut features = Array2::zeros((patches.len(), self.feature_width));
        for (j, patch) in patches.iter().enumerate() {
            let flat: Array1<f64> = Array1::from_iter(patch.iter().copied());
            features.index_axis_mut(Axis(0), j).assign(&r.dot(&flat));
        }
        let global = features
            .mean_axis(Axis(0))
            .expect("grid has at least one patch");
        EncoderOutput {
            global,
            patches: features,
        }
        .validate()
    }
}

/// External frozen backbone reached over HTTP.
///
/// Sends `POST {url}` with the raw pixel tensor base64-encoded as little
/// endian f64 values in channel-major order, plus its shape and the patch
/// grid; expects `{"global": [...], "patches": [[...]]}` back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEncoder {
    pub url: String,
    pub grid: usize,
}

#[derive(Deserialize)]
struct RemoteFeatures {
    global: Vec<f64>,
    patches: Vec<Vec<f64>>,
}

impl RemoteEncoder {
    pub fn encode(&self, img: &ImageTensor) -> Result<EncoderOutput> {
        let bytes: Vec<u8> = img.pixels().iter().flat_map(|v| v.to_le_bytes()).collect();
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(bytes),
            "side": img.side(),
            "channels": 3,
            "grid": self.grid,
        })
        .to_string();
        let mut response = ureq::post(&self.url)
            .header("Content-Type", "application/json")
            .send(&body)
            .map_err(|e| Error::NetworkError(format!("encoder endpoint: {e}")))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::NetworkError(format!("encoder body: {e}")))?;
        let features: RemoteFeatures = serde_json::from_str(&text)
            .map_err(|e| Error::UnparseableResponse(format!("encoder json: {e}")))?;
        let width = features.global.len();
        let rows = features.patches.len();
        if rows != self.grid * self.grid {
            return Err(Error::UnparseableResponse(format!(
                "expected {} patch rows, got {rows}",
                self.grid * self.grid
            )));
        }
        let mut patches = Array2::zeros((rows, width));
        for (j, row) in features.patches.iter().enumerate() {
            if row.len() != width {
                return Err(Error::UnparseableResponse(format!(
                    "patch row {j} has width {}, expected {width}",
                    row.len()
                )));
            }
            patches
                .index_axis_mut(Axis(0), j)
                .assign(&Array1::from_vec(row.clone()));
        }
        EncoderOutput {
            global: Array1::from_vec(features.global),
            patches,
        }
        .validate()
    }
}

/// Selected vision backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderBackend {
    Toy(ToyEncoder),
    Remote(RemoteEncoder),
}

impl EncoderBackend {
    pub fn grid(&self) -> usize {
        match self {
            EncoderBackend::Toy(t) => t.grid,
            EncoderBackend::Remote(r) => r.grid,
        }
    }
}

/// Encodes an image with the configured backend.
pub fn encode(img: &ImageTensor, backend: &EncoderBackend) -> Result<EncoderOutput> {
    match backend {
        EncoderBackend::Toy(toy) => toy.encode(img),
        EncoderBackend::Remote(remote) => remote.encode(img),
    }
}
