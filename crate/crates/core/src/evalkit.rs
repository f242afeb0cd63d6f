//! Overlap and surface-distance metrics, plus labeled/unlabeled gap
//! diagnostics (Dice gap and per-class KDE distance).

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::{write_atomic, LabeledSample};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::maskgen::unravel;
use crate::pseudolabel::face_neighbors;
use crate::scalar::Scalar;
use crate::segnet::{self, ModelParams, NetConfig};
use crate::tensor::Tensor;
use crate::trainer;

fn check_pair(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("metric", a.shape(), b.shape()));
    }
    Ok(())
}

/// `(|A|, |B|, |A ∩ B|)` for one class.
fn counts(a: &LabelMap, b: &LabelMap, class: u8) -> (usize, usize, usize) {
    let mut out = (0, 0, 0);
    for (&x, &y) in a.classes().iter().zip(b.classes()) {
        let (ia, ib) = (x == class, y == class);
        out.0 += ia as usize;
        out.1 += ib as usize;
        out.2 += (ia && ib) as usize;
    }
    out
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, class: u8) -> Result<f64> {
    check_pair(a, b)?;
    let (na, nb, i) = counts(a, b, class);
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    })
}

/// `|A∩B| / |A∪B|`; 1 when both are empty.
pub fn jaccard(a: &LabelMap, b: &LabelMap, class: u8) -> Result<f64> {
    check_pair(a, b)?;
    let (na, nb, i) = counts(a, b, class);
    let union = na + nb - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Flat indices of class voxels with at least one face neighbour outside
/// the class. Sides beyond the volume edge count as outside.
pub fn surface_voxels(a: &LabelMap, class: u8) -> Vec<usize> {
    let shape = a.shape();
    let cls = a.classes();
    let mut nb = Vec::with_capacity(2 * shape.len());
    (0..cls.len())
        .filter(|&i| {
            if cls[i] != class {
                return false;
            }
            face_neighbors(i, shape, &mut nb);
            nb.len() < 2 * shape.len() || nb.iter().any(|&j| cls[j] != class)
        })
        .collect()
}

fn coords(idx: &[usize], shape: &[usize], spacing: &[f64]) -> Vec<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            unravel(i, shape)
                .iter()
                .zip(spacing)
                .map(|(&c, &s)| c as f64 * s)
                .collect()
        })
        .collect()
}

fn directed(from: &[Vec<f64>], to: &[Vec<f64>]) -> Vec<f64> {
    from.par_iter()
        .map(|p| {
            to.iter()
                .map(|q| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Directed surface distances `(a → b, b → a)`, brute force over all pairs.
pub fn surface_distances(
    a: &LabelMap,
    b: &LabelMap,
    class: u8,
    spacing: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(a, b)?;
    let unit = vec![1.0; a.shape().len()];
    let spacing = spacing.unwrap_or(&unit);
    if spacing.len() != a.shape().len() || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "spacing {spacing:?} does not fit shape {:?}",
            a.shape()
        )));
    }
    let sa = surface_voxels(a, class);
    let sb = surface_voxels(b, class);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "class {class} has an empty surface in {}",
            if sa.is_empty() { "the first map" } else { "the second map" }
        )));
    }
    let ca = coords(&sa, a.shape(), spacing);
    let cb = coords(&sb, b.shape(), spacing);
    Ok((directed(&ca, &cb), directed(&cb, &ca)))
}

/// Percentile `p ∈ [0, 100]` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn hd95_from(d_ab: &[f64], d_ba: &[f64]) -> f64 {
    percentile(d_ab, 95.0).max(percentile(d_ba, 95.0))
}

/// Symmetric mean over both directed multisets.
pub fn asd_from(d_ab: &[f64], d_ba: &[f64]) -> f64 {
    (d_ab.iter().sum::<f64>() + d_ba.iter().sum::<f64>()) / (d_ab.len() + d_ba.len()) as f64
}

pub fn hd95(a: &LabelMap, b: &LabelMap, class: u8, spacing: Option<&[f64]>) -> Result<f64> {
    let (ab, ba) = surface_distances(a, b, class, spacing)?;
    Ok(hd95_from(&ab, &ba))
}

pub fn asd(a: &LabelMap, b: &LabelMap, class: u8, spacing: Option<&[f64]>) -> Result<f64> {
    let (ab, ba) = surface_distances(a, b, class, spacing)?;
    Ok(asd_from(&ab, &ba))
}

/// One `(volume, class)` row. Distances are `None` when a surface is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub volume_id: String,
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn metric_row(id: &str, pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<MetricRow> {
    let (hd, sd) = match surface_distances(pred, gt, class, None) {
        Ok((ab, ba)) => (Some(hd95_from(&ab, &ba)), Some(asd_from(&ab, &ba))),
        Err(Error::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricRow {
        volume_id: id.to_string(),
        class,
        dice: dice(pred, gt, class)?,
        jaccard: jaccard(pred, gt, class)?,
        hd95: hd,
        asd: sd,
    })
}

/// Rows for every volume and foreground class, in input order.
pub fn evaluate(ids: &[String], preds: &[LabelMap], gts: &[LabelMap]) -> Result<Vec<MetricRow>> {
    if ids.len() != preds.len() || preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ids, {} predictions, {} ground truths",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let per_volume: Vec<Vec<MetricRow>> = (0..ids.len())
        .into_par_iter()
        .map(|v| {
            (1..gts[v].num_classes())
                .map(|c| metric_row(&ids[v], &preds[v], &gts[v], c as u8))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_volume.into_iter().flatten().collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("volume_id,class,dice,jaccard,hd95,asd\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.volume_id,
            r.class,
            r.dice,
            r.jaccard,
            fmt_opt(r.hd95),
            fmt_opt(r.asd)
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_atomic(path, metrics_csv(rows).as_bytes())
}

/// Mean over volumes of the mean foreground-class Dice.
pub fn mean_foreground_dice(preds: &[LabelMap], gts: &[LabelMap]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty sets, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let k = g.num_classes();
        let mut s = 0.0;
        for c in 1..k {
            s += dice(p, g, c as u8)?;
        }
        total += s / (k - 1) as f64;
    }
    Ok(total / preds.len() as f64)
}

/// Predictions for a set of samples.
pub fn predict_all<T: Scalar>(
    cfg: &NetConfig,
    params: &ModelParams<T>,
    samples: &[LabeledSample],
) -> Result<Vec<LabelMap>> {
    samples
        .iter()
        .map(|s| trainer::predict(cfg, params, &s.image.cast::<T>()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceGap {
    pub dice_labeled: f64,
    pub dice_unlabeled: f64,
    /// `dice_labeled − dice_unlabeled`.
    pub gap: f64,
}

pub fn dice_gap<T: Scalar>(
    cfg: &NetConfig,
    params: &ModelParams<T>,
    labeled: &[LabeledSample],
    unlabeled: &[LabeledSample],
) -> Result<DiceGap> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::InvalidArgument("dice_gap needs two non-empty subsets".into()));
    }
    let score = |set: &[LabeledSample]| -> Result<f64> {
        let preds = predict_all(cfg, params, set)?;
        let gts: Vec<LabelMap> = set.iter().map(|s| s.label.clone()).collect();
        mean_foreground_dice(&preds, &gts)
    };
    let dl = score(labeled)?;
    let du = score(unlabeled)?;
    Ok(DiceGap {
        dice_labeled: dl,
        dice_unlabeled: du,
        gap: dl - du,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// `1.06 · σ̂ · n^(−1/5)`.
    Silverman,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Sample standard deviation (n − 1 denominator).
fn std_dev(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "Silverman bandwidth needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let s = std_dev(samples);
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(
            "Silverman bandwidth undefined for zero-variance samples".into(),
        ));
    }
    Ok(1.06 * s * (samples.len() as f64).powf(-0.2))
}

/// Gaussian kernel density of `samples` evaluated on `grid`.
pub fn kde(samples: &[f64], grid: &[f64], bandwidth: Bandwidth) -> Result<KdeCurve> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("kde of an empty sample set".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("kde samples must be finite".into()));
    }
    // a fixed summation order makes the curve independent of input order
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")))
        }
        Bandwidth::Silverman => silverman_bandwidth(&sorted)?,
    };
    let norm = 1.0 / (sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .par_iter()
        .map(|&x| {
            sorted
                .iter()
                .map(|&s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(KdeCurve {
        grid: grid.to_vec(),
        density,
        bandwidth: h,
    })
}

pub const KDE_GRID_POINTS: usize = 512;

/// Silverman where defined, else pooled range / 64 (or 1 for a single point).
fn gap_bandwidth(set: &[f64], pooled_range: f64) -> f64 {
    silverman_bandwidth(set).unwrap_or(if pooled_range > 0.0 {
        pooled_range / 64.0
    } else {
        1.0
    })
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

/// L1 distance between the two sets' KDE curves on a shared grid; in `[0, 2]`.
pub fn kde_gap(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("kde_gap needs two non-empty sets".into()));
    }
    let all = a.iter().chain(b);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let (ha, hb) = (gap_bandwidth(a, range), gap_bandwidth(b, range));
    let pad = 4.0 * ha.max(hb);
    let grid = linspace(lo - pad, hi + pad, KDE_GRID_POINTS);
    let fa = kde(a, &grid, Bandwidth::Fixed(ha))?;
    let fb = kde(b, &grid, Bandwidth::Fixed(hb))?;
    let diff: Vec<f64> = fa.density.iter().zip(&fb.density).map(|(x, y)| (x - y).abs()).collect();
    Ok(trapezoid(&grid, &diff).min(2.0))
}

/// Per-voxel scalar used as the feature behind the KDE diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Raw image intensity.
    Intensity,
    /// The network's logit for the class under study.
    Logit,
}

/// Feature values at the ground-truth voxels of `class`, over all samples.
pub fn class_features<T: Scalar>(
    cfg: &NetConfig,
    params: &ModelParams<T>,
    samples: &[LabeledSample],
    class: u8,
    source: FeatureSource,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        let n = s.label.len();
        let picked = s.label.classes().iter().enumerate().filter(|(_, &c)| c == class);
        match source {
            FeatureSource::Intensity => out.extend(picked.map(|(i, _)| s.image.data()[i] as f64)),
            FeatureSource::Logit => {
                let x: Tensor<T> = Tensor::stack(&[s.image.cast::<T>()])?;
                let logits = segnet::forward(cfg, params, &x)?;
                let base = class as usize * n;
                out.extend(picked.map(|(i, _)| logits.data()[base + i].as_f64()));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub class: u8,
    pub kde_gap: f64,
    pub dice_labeled: f64,
    pub dice_unlabeled: f64,
}

/// Per foreground class: KDE gap between labeled and unlabeled features and
/// the class Dice on each subset.
pub fn diagnose<T: Scalar>(
    cfg: &NetConfig,
    params: &ModelParams<T>,
    labeled: &[LabeledSample],
    unlabeled: &[LabeledSample],
    source: FeatureSource,
) -> Result<Vec<DiagnosticRow>> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::InvalidArgument("diagnose needs two non-empty subsets".into()));
    }
    let pl = predict_all(cfg, params, labeled)?;
    let pu = predict_all(cfg, params, unlabeled)?;
    let class_dice = |preds: &[LabelMap], set: &[LabeledSample], c: u8| -> Result<f64> {
        let mut s = 0.0;
        for (p, smp) in preds.iter().zip(set) {
            s += dice(p, &smp.label, c)?;
        }
        Ok(s / set.len() as f64)
    };
    (1..cfg.num_classes as u8)
        .map(|c| {
            let fl = class_features(cfg, params, labeled, c, source)?;
            let fu = class_features(cfg, params, unlabeled, c, source)?;
            Ok(DiagnosticRow {
                class: c,
                kde_gap: kde_gap(&fl, &fu)?,
                dice_labeled: class_dice(&pl, labeled, c)?,
                dice_unlabeled: class_dice(&pu, unlabeled, c)?,
            })
        })
        .collect()
}

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut s = String::from("class,kde_gap,dice_labeled,dice_unlabeled\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.class, r.kde_gap, r.dice_labeled, r.dice_unlabeled);
    }
    s
}

pub fn write_diagnostics_csv(path: &Path, rows: &[DiagnosticRow]) -> Result<()> {
    write_atomic(path, diagnostics_csv(rows).as_bytes())
}
