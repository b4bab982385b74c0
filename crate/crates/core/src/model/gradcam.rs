//! Gradient-weighted class activation maps.

use std::fmt;
use std::str::FromStr;

use crate::tensor::{BatchNormMode, Real, Tape, Tensor};

use super::{MmccNet, ModelError, Result};

/// Feature maps a heatmap can be taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamLayer {
    /// Stem output `F`.
    Stem,
    /// `DF_A`.
    StageA,
    /// `DF_B`.
    StageB,
    /// `DF_C`.
    StageC,
}

impl CamLayer {
    pub const ALL: [CamLayer; 4] = [CamLayer::Stem, CamLayer::StageA, CamLayer::StageB, CamLayer::StageC];

    pub fn name(self) -> &'static str {
        match self {
            CamLayer::Stem => "stem",
            CamLayer::StageA => "stage_a",
            CamLayer::StageB => "stage_b",
            CamLayer::StageC => "stage_c",
        }
    }
}

impl fmt::Display for CamLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CamLayer {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| ModelError::UnknownLayer(s.to_string()))
    }
}

/// Bilinear resize of one `h×w` plane with aligned corners.
fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let scale = |o: usize, n: usize, on: usize| {
        if on == 1 {
            0.0
        } else {
            o as f64 * (n - 1) as f64 / (on - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let fy = scale(oy, h, oh);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..ow {
            let fx = scale(ox, w, ow);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Heatmap `(1, 1, H, W)` in `[0, 1]` for one image `(1, 3, H, W)`.
///
/// Channel weights are the spatial means of the gradient of the summed output
/// probability with respect to `layer`; the weighted channel average is
/// ReLU-clamped, resized to the input, and min-max normalized. A constant map
/// normalizes to all zeros.
pub fn grad_cam<T: Real>(model: &mut MmccNet<T>, image: &Tensor<T>, layer: CamLayer) -> Result<Tensor<T>> {
    let (n, _, ih, iw) = image.dims4()?;
    if n != 1 {
        return Err(ModelError::InputShape(image.shape().to_vec()));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let x = tape.leaf(image.clone(), true);
    let out = model.forward(&mut tape, &params, x, BatchNormMode::Infer)?;
    let feats = out.features;
    let target = match layer {
        CamLayer::Stem => feats.f,
        CamLayer::StageA => feats.df_a,
        CamLayer::StageB => feats.df_b,
        CamLayer::StageC => feats.df_c,
    };
    tape.retain_grad(target);
    let total = tape.sum(out.prob);
    tape.backward(total)?;
    let act = tape.value(target);
    let (_, c, h, w) = act.dims4()?;
    let hw = h * w;
    let zeros = Tensor::zeros(act.shape().to_vec());
    let grad = tape.grad(target).unwrap_or(&zeros);
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let g = &grad.data()[ch * hw..(ch + 1) * hw];
        let a = &act.data()[ch * hw..(ch + 1) * hw];
        let alpha = g.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        for (m, v) in cam.iter_mut().zip(a) {
            *m += alpha * v.as_f64() / c as f64;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let cam = resize_plane(&cam, h, w, ih, iw);
    let (lo, hi) = cam
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let data = cam
        .iter()
        .map(|&v| {
            T::of(if range > 0.0 && range.is_finite() {
                (v - lo) / range
            } else {
                0.0
            })
        })
        .collect();
    Ok(Tensor::new(vec![1, 1, ih, iw], data)?)
}
