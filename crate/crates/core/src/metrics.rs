//! Image metrics, segmentation scores with label matching, and the
//! flat-kernel meanshift clustering baseline.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vq::BACKGROUND;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn same_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid("images", format!("sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("images", "empty"));
    }
    Ok(())
}

/// Scalar `s` minimizing `|s a - b|^2`; one when `a` is all zero.
pub fn luminance_scale(a: &[f32], b: &[f32]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let aa: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
    if aa > 0.0 {
        ab / aa
    } else {
        1.0
    }
}

/// `10 log10(1 / MSE)` for images in the unit range, capped at
/// [`PSNR_CAP`]. With `luminance_match`, `a` is first scaled by
/// [`luminance_scale`].
pub fn psnr(a: &[f32], b: &[f32], luminance_match: bool) -> Result<f64> {
    same_len(a, b)?;
    let s = if luminance_match { luminance_scale(a, b) } else { 1.0 };
    let mse = a.iter().zip(b).map(|(&x, &y)| (s * x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Clamps every value into `[0, 1]`.
pub fn to_unit_range(img: &[f32]) -> Vec<f32> {
    img.iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

/// Scales `a` by [`luminance_scale`] against `b`, then clamps both into the
/// unit range.
pub fn matched_unit_pair(a: &[f32], b: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let s = luminance_scale(a, b) as f32;
    let a: Vec<f32> = a.iter().map(|&x| s * x).collect();
    (to_unit_range(&a), to_unit_range(b))
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut t = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, w) in t.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *w = (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|w| w / s)
}

/// Half-sample symmetric index (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Separable Gaussian filter of one `[h, w]` plane.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| taps[(d + r) as usize] * plane[y * w + reflect(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| taps[(d + r) as usize] * tmp[reflect(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over RGB channels of two `[h, w, 3]` images in the unit range:
/// 11x11 Gaussian window (sigma 1.5), population statistics, constants
/// `K1 = 0.01`, `K2 = 0.03`, and a window-radius border excluded.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    same_len(a, b)?;
    if a.len() != width * height * 3 {
        return Err(Error::invalid("images", format!("{} values for {width}x{height} RGB", a.len())));
    }
    let win = 2 * SSIM_RADIUS + 1;
    if width < win || height < win {
        return Err(Error::invalid("images", format!("{width}x{height} smaller than the {win}x{win} window")));
    }
    if a.iter().chain(b).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("images", "values outside [0, 1]"));
    }
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = width * height;
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = (0..n).map(|i| a[3 * i + ch] as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| b[3 * i + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let ux = blur(&x, width, height, &taps);
        let uy = blur(&y, width, height, &taps);
        let uxx = blur(&prod(&x, &x), width, height, &taps);
        let uyy = blur(&prod(&y, &y), width, height, &taps);
        let uxy = blur(&prod(&x, &y), width, height, &taps);
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in SSIM_RADIUS..height - SSIM_RADIUS {
            for c in SSIM_RADIUS..width - SSIM_RADIUS {
                let i = r * width + c;
                let vx = uxx[i] - ux[i] * ux[i];
                let vy = uyy[i] - uy[i] * uy[i];
                let vxy = uxy[i] - ux[i] * uy[i];
                let num = (2.0 * ux[i] * uy[i] + c1) * (2.0 * vxy + c2);
                let den = (ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2);
                sum += num / den;
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / 3.0)
}

/// Precision, recall and F1 of one matched class.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassScore {
    pub label: u16,
    /// Matched predicted label, if any.
    pub predicted: Option<u16>,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegEvalReport {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Predicted label to true label.
    pub matching: BTreeMap<u16, u16>,
    pub classes: Vec<ClassScore>,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d > 0 {
        n as f64 / d as f64
    } else {
        0.0
    }
}

/// Scores a predicted label map against ground truth over pixels whose true
/// label is not [`BACKGROUND`]. Predicted and true labels are matched one to
/// one, greedily by descending overlap; ties go to the pair that occurs
/// first in scan order, so relabeling never changes a score. Pixels of
/// unmatched predicted labels are false positives.
pub fn seg_scores(pred: &[u16], truth: &[u16]) -> Result<SegEvalReport> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("segmentation", format!("sizes differ: {} vs {}", pred.len(), truth.len())));
    }
    // (overlap, first pixel) per pair.
    let mut overlap: BTreeMap<(u16, u16), (usize, usize)> = BTreeMap::new();
    let mut pred_count: BTreeMap<u16, usize> = BTreeMap::new();
    let mut true_count: BTreeMap<u16, usize> = BTreeMap::new();
    let mut total = 0usize;
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if t == BACKGROUND {
            continue;
        }
        total += 1;
        *true_count.entry(t).or_default() += 1;
        *pred_count.entry(p).or_default() += 1;
        if p != BACKGROUND {
            overlap.entry((p, t)).or_insert((0, i)).0 += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("segmentation", "ground truth has no foreground"));
    }
    let mut pairs: Vec<((u16, u16), (usize, usize))> = overlap.into_iter().collect();
    pairs.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    let mut matching = BTreeMap::new();
    let mut matched_true: BTreeMap<u16, (u16, usize)> = BTreeMap::new();
    for ((p, t), (n, _)) in pairs {
        if matching.contains_key(&p) || matched_true.contains_key(&t) {
            continue;
        }
        matching.insert(p, t);
        matched_true.insert(t, (p, n));
    }
    let mut classes = Vec::with_capacity(true_count.len());
    let mut tp_sum = 0;
    for (&t, &tc) in &true_count {
        let (predicted, tp, pc) = match matched_true.get(&t) {
            Some(&(p, n)) => (Some(p), n, pred_count[&p]),
            None => (None, 0, 0),
        };
        tp_sum += tp;
        let precision = ratio(tp, pc);
        let recall = ratio(tp, tc);
        classes.push(ClassScore {
            label: t,
            predicted,
            true_positive: tp,
            false_positive: pc - tp,
            false_negative: tc - tp,
            precision,
            recall,
            f1: f1(precision, recall),
        });
    }
    // Every scored pixel carries exactly one predicted and one true label, so
    // pooled false positives equal pooled false negatives.
    let micro = ratio(tp_sum, total);
    let k = classes.len() as f64;
    Ok(SegEvalReport {
        micro_precision: micro,
        micro_recall: micro,
        micro_f1: micro,
        macro_precision: classes.iter().map(|c| c.precision).sum::<f64>() / k,
        macro_recall: classes.iter().map(|c| c.recall).sum::<f64>() / k,
        macro_f1: classes.iter().map(|c| c.f1).sum::<f64>() / k,
        matching,
        classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanshiftConfig {
    pub bandwidth: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl MeanshiftConfig {
    pub fn new(bandwidth: f64) -> Self {
        MeanshiftConfig {
            bandwidth,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Converged modes merged into clusters, and one label per input point.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Clustering {
    /// Index of the nearest center.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centers.iter().enumerate() {
            let d = dist2(c, x);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Flat-kernel meanshift seeded at every point: each seed moves to the mean
/// of the points within `bandwidth` until the shift drops below `tol`.
/// Modes closer than `bandwidth / 2` to an earlier cluster center join it.
pub fn meanshift(points: &[Vec<f64>], cfg: &MeanshiftConfig) -> Result<Clustering> {
    use rayon::prelude::*;
    if points.is_empty() {
        return Err(Error::invalid("meanshift", "no points"));
    }
    if !(cfg.bandwidth > 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::invalid("meanshift", format!("bandwidth {} and tol {} must be positive", cfg.bandwidth, cfg.tol)));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("meanshift", "points differ in dimension"));
    }
    let h2 = cfg.bandwidth * cfg.bandwidth;
    let modes: Vec<Vec<f64>> = points
        .par_iter()
        .map(|seed| {
            let mut x = seed.clone();
            for _ in 0..cfg.max_iter {
                let mut mean = vec![0.0; dim];
                let mut n = 0usize;
                for p in points {
                    if dist2(p, &x) <= h2 {
                        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
                        n += 1;
                    }
                }
                // The seed itself is always within range of a point it
                // started on; an empty window means it drifted off the data.
                if n == 0 {
                    break;
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let shift = dist2(&mean, &x).sqrt();
                x = mean;
                if shift < cfg.tol {
                    break;
                }
            }
            x
        })
        .collect();
    let merge2 = (cfg.bandwidth / 2.0).powi(2);
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::with_capacity(points.len());
    for m in &modes {
        match centers.iter().position(|c| dist2(c, m) < merge2) {
            Some(i) => labels.push(i),
            None => {
                labels.push(centers.len());
                centers.push(m.clone());
            }
        }
    }
    Ok(Clustering { centers, labels })
}

#[cfg(test)]
mod tests;
