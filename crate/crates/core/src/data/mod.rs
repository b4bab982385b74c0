//! Image/mask samples, NetPBM I/O, resizing, dataset splits, and a seeded
//! synthetic polyp generator.
//!
//! A dataset directory holds `images/<id>.ppm` and `masks/<id>.pgm`; samples
//! are always ordered by id.

mod netpbm;
mod split;
mod synth;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use netpbm::{decode_netpbm, encode_netpbm, load_netpbm, save_netpbm};
pub use split::{make_splits, Role, SplitKind, SplitPlan};
pub use synth::{synth_polyp_dataset, Difficulty};

/// Working resolution `(height, width)` images are resized to.
pub const WORKING_SIZE: (usize, usize) = (288, 384);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported NetPBM magic `{0}` (expected P2, P3, P5 or P6)")]
    UnsupportedMagic(String),
    #[error("malformed NetPBM header: {0}")]
    MalformedHeader(String),
    #[error("malformed NetPBM payload: {0}")]
    MalformedPayload(String),
    #[error("truncated NetPBM payload: expected {expected} samples/bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unsupported image shape {0:?}")]
    Shape(Vec<usize>),
    #[error("sample `{id}`: image is {image:?} but mask is {mask:?}")]
    ExtentMismatch {
        id: String,
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("sample `{0}` has no mask file")]
    MissingMask(String),
    #[error("no samples found under {0}")]
    EmptyDataset(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{k} folds requested but only {n} ids")]
    TooFewIds { k: usize, n: usize },
    #[error("split file line {line}: {msg}")]
    SplitFile { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, H, W)` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub id: String,
    pub source: String,
}

impl SamplePair {
    pub fn extent(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }
}

/// Stack samples into `(N, 3, H, W)` images and `(N, 1, H, W)` masks.
pub fn stack_samples(samples: &[&SamplePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Resize the two trailing axes of a rank-3 or rank-4 tensor.
///
/// Bilinear uses half-pixel centers with edge clamping; nearest picks the
/// source pixel whose cell contains the output center.
pub fn resize(input: &Tensor<f32>, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor<f32>> {
    let s = input.shape();
    if !(3..=4).contains(&s.len()) {
        return Err(DataError::Shape(s.to_vec()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(DataError::InvalidArgument(format!("resize target {out_h}×{out_w}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = input.numel() / (h * w);
    let mut shape = s.to_vec();
    let rank = shape.len();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let taps = |n: usize, on: usize| -> Vec<(usize, usize, f32)> {
        (0..on)
            .map(|o| match mode {
                ResizeMode::Nearest => {
                    let i = (((o as f64 + 0.5) * n as f64 / on as f64).floor() as usize).min(n - 1);
                    (i, i, 0.0)
                }
                ResizeMode::Bilinear => {
                    let f = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                    let i0 = f.floor() as usize;
                    ((i0), (i0 + 1).min(n - 1), (f - i0 as f64) as f32)
                }
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = input.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::new(shape, out)?)
}

/// Threshold at 0.5: values `≥ 0.5` become 1, the rest 0.
pub fn binarize_mask(mask: &Tensor<f32>) -> Tensor<f32> {
    mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// `(1, H, W)` replicated to three channels; `(3, H, W)` unchanged.
pub fn to_rgb(image: Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape().to_vec();
    match s[0] {
        3 => Ok(image),
        1 => {
            let plane = image.into_data();
            let data = plane.iter().chain(&plane).chain(&plane).copied().collect();
            Ok(Tensor::new(vec![3, s[1], s[2]], data)?)
        }
        _ => Err(DataError::Shape(s)),
    }
}

/// Channel maximum of a `(3, H, W)` mask; `(1, H, W)` unchanged.
pub fn to_gray(mask: Tensor<f32>) -> Result<Tensor<f32>> {
    let s = mask.shape().to_vec();
    match s[0] {
        1 => Ok(mask),
        3 => {
            let hw = s[1] * s[2];
            let d = mask.data();
            let data = (0..hw).map(|i| d[i].max(d[hw + i]).max(d[2 * hw + i])).collect();
            Ok(Tensor::new(vec![1, s[1], s[2]], data)?)
        }
        _ => Err(DataError::Shape(s)),
    }
}

/// Write `images/<id>.ppm` and `masks/<id>.pgm` under `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[SamplePair]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| DataError::io(&p, e))?;
    }
    for s in samples {
        save_netpbm(&s.image, dir.join("images").join(format!("{}.ppm", s.id)))?;
        save_netpbm(&s.mask, dir.join("masks").join(format!("{}.pgm", s.id)))?;
    }
    Ok(())
}

/// Load every `images/<id>.{ppm,pgm}` with its `masks/<id>.pgm`, sorted by id.
///
/// Grayscale images are replicated to three channels and color masks reduced
/// by channel maximum. With `size`, images are resized bilinearly and masks by
/// nearest neighbor; masks are binarized before resizing.
pub fn load_dataset(dir: impl AsRef<Path>, source: &str, size: Option<(usize, usize)>) -> Result<Vec<SamplePair>> {
    let dir = dir.as_ref();
    let images_dir = dir.join("images");
    let entries = fs::read_dir(&images_dir).map_err(|e| DataError::io(&images_dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DataError::io(&images_dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some("ppm" | "pgm")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push((stem.to_string(), path.clone()));
            }
        }
    }
    if ids.is_empty() {
        return Err(DataError::EmptyDataset(dir.to_path_buf()));
    }
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for (id, image_path) in ids {
        let mask_path = dir.join("masks").join(format!("{id}.pgm"));
        if !mask_path.exists() {
            return Err(DataError::MissingMask(id));
        }
        let image = to_rgb(load_netpbm(&image_path)?)?;
        let mask = binarize_mask(&to_gray(load_netpbm(&mask_path)?)?);
        let (is, ms) = (image.shape(), mask.shape());
        if is[1..] != ms[1..] {
            return Err(DataError::ExtentMismatch {
                id,
                image: (is[1], is[2]),
                mask: (ms[1], ms[2]),
            });
        }
        let (image, mask) = match size {
            Some((h, w)) => (
                resize(&image, h, w, ResizeMode::Bilinear)?,
                resize(&mask, h, w, ResizeMode::Nearest)?,
            ),
            None => (image, mask),
        };
        out.push(SamplePair {
            image,
            mask,
            id,
            source: source.to_string(),
        });
    }
    Ok(out)
}
