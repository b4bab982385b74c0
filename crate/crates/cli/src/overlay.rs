//! Segmentation overlays: ground truth green, correct prediction yellow,
//! wrong prediction red.

use mmcc::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlayClass {
    Background,
    /// Ground truth the prediction missed.
    Missed,
    /// Predicted and in the ground truth.
    Correct,
    /// Predicted outside the ground truth.
    Wrong,
}

impl OverlayClass {
    pub fn of(predicted: bool, truth: Option<bool>) -> Self {
        match (predicted, truth) {
            (true, Some(true)) | (true, None) => OverlayClass::Correct,
            (true, Some(false)) => OverlayClass::Wrong,
            (false, Some(true)) => OverlayClass::Missed,
            (false, _) => OverlayClass::Background,
        }
    }

    pub fn color(self) -> Option<[f32; 3]> {
        match self {
            OverlayClass::Background => None,
            OverlayClass::Missed => Some([0.0, 1.0, 0.0]),
            OverlayClass::Correct => Some([1.0, 1.0, 0.0]),
            OverlayClass::Wrong => Some([1.0, 0.0, 0.0]),
        }
    }
}

const ALPHA: f32 = 0.5;

/// Blend class colors over a `(3, H, W)` image. `pred` and `truth` are
/// `(1, H, W)` binary masks. Without ground truth every predicted pixel is
/// drawn yellow.
pub fn overlay(image: &Tensor<f32>, pred: &Tensor<f32>, truth: Option<&Tensor<f32>>) -> Tensor<f32> {
    let hw = pred.numel();
    let mut out = image.clone();
    let data = out.data_mut();
    for i in 0..hw {
        let t = truth.map(|t| t.data()[i] >= 0.5);
        if let Some(color) = OverlayClass::of(pred.data()[i] >= 0.5, t).color() {
            for (c, &v) in color.iter().enumerate() {
                let px = &mut data[c * hw + i];
                *px = (1.0 - ALPHA) * *px + ALPHA * v;
            }
        }
    }
    out
}
