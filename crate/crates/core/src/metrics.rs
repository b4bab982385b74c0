//! Segmentation metrics and run-level statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected a single-image tensor, got shape {0:?}")]
    NotSingleImage(Vec<usize>),
    #[error("AUC is undefined without both positive and negative labels")]
    SingleClass,
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("at least two values are required, got {0}")]
    TooFewValues(usize),
    #[error("run {run} has metric keys {found:?}, expected {expected:?}")]
    InconsistentKeys {
        run: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Counts after binarizing `pred` at `threshold` (`≥` is positive).
/// Mask values `≥ 0.5` are foreground.
pub fn confusion_counts<T: Real>(pred: &Tensor<T>, mask: &Tensor<T>, threshold: f64) -> Result<ConfusionCounts> {
    if pred.shape() != mask.shape() {
        return Err(MetricsError::ShapeMismatch(
            pred.shape().to_vec(),
            mask.shape().to_vec(),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &m) in pred.data().iter().zip(mask.data()) {
        match (p.as_f64() >= threshold, m.as_f64() >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn basic_metrics(c: &ConfusionCounts) -> BasicMetrics {
    let both_empty = c.tp + c.fp == 0 && c.tp + c.fn_ == 0;
    BasicMetrics {
        accuracy: ratio(c.tp + c.tn, c.total(), true),
        precision: ratio(c.tp, c.tp + c.fp, both_empty),
        recall: ratio(c.tp, c.tp + c.fn_, both_empty),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both_empty),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, both_empty),
    }
}

/// `TP / (2TP + FN + FP)`, the Dice expression without its factor of two.
pub fn dice_printed(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        0.5
    } else {
        c.tp as f64 / den as f64
    }
}

fn plane<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(MetricsError::NotSingleImage(s.to_vec()));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Foreground pixels with at least one background pixel, or the image
/// edge, among their eight neighbours.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize]
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !at(y, x) {
                continue;
            }
            let interior = (-1..=1).all(|dy| (-1..=1).all(|dx| at(y + dy, x + dx)));
            out[y as usize * w + x as usize] = !interior;
        }
    }
    out
}

/// Squared distance transform along one line (lower envelope of parabolas).
/// Infinite entries of `f` mark lines without a source point.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = f64::NEG_INFINITY;
        while let Some(kk) = k {
            let p = v[kk];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if kk > 0 && s <= z[kk] {
                k = Some(kk - 1);
            } else {
                break;
            }
        }
        let kk = k.map_or(0, |kk| kk + 1);
        v[kk] = q;
        z[kk] = if kk == 0 { f64::NEG_INFINITY } else { s };
        z[kk + 1] = f64::INFINITY;
        k = Some(kk);
    }
    if k.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(points: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = points.iter().map(|&p| if p { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

fn directed(from: &[bool], to_dist: &[f64]) -> f64 {
    from.iter()
        .zip(to_dist)
        .filter(|(&f, _)| f)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance in pixels between the boundaries of two
/// binary masks (values `≥ 0.5` are foreground). Two empty masks give 0; one
/// empty mask gives the image diagonal.
pub fn hausdorff_distance<T: Real>(mask_a: &Tensor<T>, mask_b: &Tensor<T>) -> Result<f64> {
    if mask_a.shape() != mask_b.shape() {
        return Err(MetricsError::ShapeMismatch(
            mask_a.shape().to_vec(),
            mask_b.shape().to_vec(),
        ));
    }
    let (h, w) = plane(mask_a)?;
    let bin = |t: &Tensor<T>| -> Vec<bool> { t.data().iter().map(|v| v.as_f64() >= 0.5).collect() };
    let (a, b) = (boundary(&bin(mask_a), h, w), boundary(&bin(mask_b), h, w));
    match (a.contains(&true), b.contains(&true)) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(((h * h + w * w) as f64).sqrt()),
        _ => {}
    }
    let (da, db) = (
        squared_distance_transform(&a, h, w),
        squared_distance_transform(&b, h, w),
    );
    Ok(directed(&a, &db).max(directed(&b, &da)))
}

/// Area under the ROC curve from the Mann–Whitney rank statistic; tied
/// positive/negative pairs count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        rank2_sum += rank2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Two-sided 97.5% quantiles of Student's t for 1..=30 degrees of freedom.
const T_975: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131, 2.120,
    2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
];

/// `(df, t)` beyond the dense table; interpolated linearly in `1/df`.
const T_975_TAIL: [(f64, f64); 4] = [(30.0, 2.042), (40.0, 2.021), (60.0, 2.000), (120.0, 1.980)];

pub fn t_critical_975(df: usize) -> f64 {
    assert!(df >= 1, "degrees of freedom must be positive");
    if df <= 30 {
        return T_975[df - 1];
    }
    let inv = 1.0 / df as f64;
    for pair in T_975_TAIL.windows(2) {
        let ((d0, t0), (d1, t1)) = (pair[0], pair[1]);
        if (df as f64) <= d1 {
            let (i0, i1) = (1.0 / d0, 1.0 / d1);
            return t0 + (t1 - t0) * (i0 - inv) / (i0 - i1);
        }
    }
    let (d0, t0) = T_975_TAIL[3];
    t0 + (1.960 - t0) * (1.0 / d0 - inv) * d0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatistics {
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl RunStatistics {
    /// `mean ± SD, (low, high)` with every number multiplied by `scale`.
    pub fn format_cell(&self, scale: f64, decimals: usize) -> String {
        format!(
            "{:.d$} ± {:.d$}, ({:.d$}, {:.d$})",
            self.mean * scale,
            self.sd * scale,
            self.ci_low * scale,
            self.ci_high * scale,
            d = decimals
        )
    }
}

/// Mean, sample SD, and the 95% t-interval `mean ± t·sd/√n`.
pub fn confidence_interval(values: &[f64]) -> Result<RunStatistics> {
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::TooFewValues(n));
    }
    let base = values[0];
    let mean = base + values.iter().map(|v| v - base).sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let margin = t_critical_975(n - 1) * sd / (n as f64).sqrt();
    Ok(RunStatistics {
        values: values.to_vec(),
        mean,
        sd,
        ci_low: mean - margin,
        ci_high: mean + margin,
        n,
    })
}

/// Named per-metric statistics, keys in sorted order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, RunStatistics>,
}

pub fn aggregate_runs(per_run: &[BTreeMap<String, f64>]) -> Result<MetricsReport> {
    let first = per_run.first().ok_or(MetricsError::TooFewValues(0))?;
    let keys: Vec<String> = first.keys().cloned().collect();
    for (run, m) in per_run.iter().enumerate() {
        if !m.keys().eq(keys.iter()) {
            return Err(MetricsError::InconsistentKeys {
                run,
                expected: keys.clone(),
                found: m.keys().cloned().collect(),
            });
        }
    }
    let mut report = MetricsReport::default();
    for k in keys {
        let values: Vec<f64> = per_run.iter().map(|m| m[&k]).collect();
        report.metrics.insert(k, confidence_interval(&values)?);
    }
    Ok(report)
}

/// Metrics of one predicted probability map against its mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub counts: ConfusionCounts,
    pub basic: BasicMetrics,
    pub hausdorff: f64,
    /// `None` when the mask holds a single class.
    pub auc: Option<f64>,
}

pub fn image_metrics<T: Real>(pred: &Tensor<T>, mask: &Tensor<T>, threshold: f64) -> Result<ImageMetrics> {
    let counts = confusion_counts(pred, mask, threshold)?;
    let binary = pred.map(|v| if v.as_f64() >= threshold { T::one() } else { T::zero() });
    let hausdorff = hausdorff_distance(&binary, mask)?;
    let scores: Vec<f64> = pred.data().iter().map(|v| v.as_f64()).collect();
    let labels: Vec<bool> = mask.data().iter().map(|v| v.as_f64() >= 0.5).collect();
    let auc = match roc_auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(MetricsError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(ImageMetrics {
        counts,
        basic: basic_metrics(&counts),
        hausdorff,
        auc,
    })
}

/// Per-image averages over a set of images; AUC averages the images where it is defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub iou: f64,
    pub hausdorff: f64,
    pub auc: Option<f64>,
    pub images: usize,
}

impl SetMetrics {
    pub fn from_images(items: &[ImageMetrics]) -> Self {
        let n = items.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        let aucs: Vec<f64> = items.iter().filter_map(|m| m.auc).collect();
        Self {
            accuracy: mean(&|m| m.basic.accuracy),
            precision: mean(&|m| m.basic.precision),
            recall: mean(&|m| m.basic.recall),
            dice: mean(&|m| m.basic.dice),
            iou: mean(&|m| m.basic.iou),
            hausdorff: mean(&|m| m.hausdorff),
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            images: items.len(),
        }
    }

    /// Named values in a fixed order, AUC omitted when undefined.
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("accuracy".into(), self.accuracy);
        m.insert("precision".into(), self.precision);
        m.insert("recall".into(), self.recall);
        m.insert("dice".into(), self.dice);
        m.insert("iou".into(), self.iou);
        m.insert("hausdorff".into(), self.hausdorff);
        if let Some(a) = self.auc {
            m.insert("auc".into(), a);
        }
        m
    }
}
