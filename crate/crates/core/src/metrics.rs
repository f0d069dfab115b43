//! Segmentation metrics over `[H, W]` maps: MAE, structure measure, adaptive
//! enhanced-alignment measure, weighted F-measure, and expected calibration error.
//!
//! Predictions are probabilities in `[0, 1]`; ground truth is binarized at 0.5.

use std::fmt::Write as _;

use refcod_tensor::Tensor;
use serde::Serialize;
use thiserror::Error;

/// Guards divisions in the structure and F-measures (machine epsilon, as in the reference toolkits).
const EPS: f64 = f64::EPSILON;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("calibration needs at least one bin")]
    NoBins,
    #[error("prediction shape {pred:?} does not match ground truth {gt:?}")]
    Shape { pred: Vec<usize>, gt: Vec<usize> },
    #[error("{preds} predictions for {gts} ground truths")]
    Count { preds: usize, gts: usize },
}

fn check(pred: &Tensor, gt: &Tensor) -> (usize, usize) {
    assert_eq!(
        pred.shape(),
        gt.shape(),
        "prediction and ground truth differ in shape"
    );
    assert_eq!(pred.ndim(), 2, "metrics expect [H, W] maps");
    (pred.shape()[0], pred.shape()[1])
}

fn binary(gt: &Tensor) -> Vec<bool> {
    gt.data().iter().map(|&g| g >= 0.5).collect()
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> f64 {
    check(pred, gt);
    let fg = binary(gt);
    let total: f64 = pred
        .data()
        .iter()
        .zip(&fg)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    total / pred.numel() as f64
}

/// Structure measure `α·S_object + (1 − α)·S_region`, floored at 0.
/// Empty ground truth scores `1 − mean(pred)`; full ground truth scores `mean(pred)`.
pub fn s_measure(pred: &Tensor, gt: &Tensor, alpha: f64) -> f64 {
    let (h, w) = check(pred, gt);
    let fg = binary(gt);
    let p = pred.data();
    let coverage = fg.iter().filter(|&&g| g).count() as f64 / fg.len() as f64;
    if coverage == 0.0 {
        return 1.0 - pred.mean();
    }
    if coverage == 1.0 {
        return pred.mean();
    }
    let score = alpha * object_score(p, &fg, coverage) + (1.0 - alpha) * region_score(p, &fg, h, w);
    score.max(0.0)
}

fn object_score(p: &[f64], fg: &[bool], coverage: f64) -> f64 {
    let fg_vals: Vec<f64> = p
        .iter()
        .zip(fg)
        .filter(|(_, &g)| g)
        .map(|(&v, _)| v)
        .collect();
    let bg_vals: Vec<f64> = p
        .iter()
        .zip(fg)
        .filter(|(_, &g)| !g)
        .map(|(&v, _)| 1.0 - v)
        .collect();
    coverage * s_object(&fg_vals) + (1.0 - coverage) * s_object(&bg_vals)
}

fn s_object(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

/// Rounds half away from zero.
fn round_half_away(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.5).floor()
}

fn region_score(p: &[f64], fg: &[bool], h: usize, w: usize) -> f64 {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in fg.iter().enumerate().filter(|(_, &g)| g) {
        sr += (i / w) as f64;
        sc += (i % w) as f64;
        n += 1.0;
    }
    // split point one past the rounded centroid
    let cy = round_half_away(sr / n) as usize + 1;
    let cx = round_half_away(sc / n) as usize + 1;
    let area = (h * w) as f64;
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    quads
        .iter()
        .map(|&(r0, r1, c0, c1)| {
            let weight = ((r1 - r0) * (c1 - c0)) as f64 / area;
            if weight == 0.0 {
                return 0.0;
            }
            let mut pv = Vec::with_capacity((r1 - r0) * (c1 - c0));
            let mut gv = Vec::with_capacity(pv.capacity());
            for r in r0..r1 {
                for c in c0..c1 {
                    pv.push(p[r * w + c]);
                    gv.push(if fg[r * w + c] { 1.0 } else { 0.0 });
                }
            }
            weight * ssim(&pv, &gv)
        })
        .sum()
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mx = p.iter().sum::<f64>() / n;
    let my = g.iter().sum::<f64>() / n;
    let denom = (n - 1.0).max(1.0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let num = 4.0 * mx * my * sxy;
    let den = (mx * mx + my * my) * (sxx + syy);
    if num != 0.0 {
        num / (den + EPS)
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Adaptive E-measure: binarize at `min(2·mean(pred), 1)` and average the
/// enhanced alignment matrix over all `H·W` pixels.
///
/// An all-zero prediction binarizes to all background rather than passing the
/// zero threshold everywhere.
pub fn adaptive_e_measure(pred: &Tensor, gt: &Tensor) -> f64 {
    check(pred, gt);
    let fg = binary(gt);
    let threshold = (2.0 * pred.mean()).min(1.0);
    let bin: Vec<bool> = pred
        .data()
        .iter()
        .map(|&v| {
            if threshold > 0.0 {
                v >= threshold
            } else {
                false
            }
        })
        .collect();
    enhanced_alignment(&bin, &fg)
}

fn enhanced_alignment(pred: &[bool], gt: &[bool]) -> f64 {
    let n = gt.len() as f64;
    let gt_fg = gt.iter().filter(|&&g| g).count() as f64;
    let pred_fg = pred.iter().filter(|&&p| p).count() as f64;
    if gt_fg == 0.0 {
        return (n - pred_fg) / n;
    }
    if gt_fg == n {
        return pred_fg / n;
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        if p && g {
            tp += 1.0;
        } else if p {
            fp += 1.0;
        }
    }
    let fn_ = gt_fg - tp;
    let tn = n - pred_fg - fn_;
    let mp = pred_fg / n;
    let mg = gt_fg / n;
    let parts = [
        (tp, 1.0 - mp, 1.0 - mg),
        (fp, 1.0 - mp, -mg),
        (fn_, -mp, 1.0 - mg),
        (tn, -mp, -mg),
    ];
    let sum: f64 = parts
        .iter()
        .map(|&(count, a, b)| {
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            count * (align + 1.0).powi(2) / 4.0
        })
        .sum();
    sum / n
}

/// For every pixel, the linear index of its nearest foreground pixel and the
/// Euclidean distance to it. Ties go to the smallest index. `None` without foreground.
pub fn nearest_foreground(fg: &[bool], h: usize, w: usize) -> Option<(Vec<usize>, Vec<f64>)> {
    let rows: Vec<Vec<usize>> = (0..h)
        .map(|r| (0..w).filter(|&c| fg[r * w + c]).collect())
        .collect();
    if rows.iter().all(Vec::is_empty) {
        return None;
    }
    let mut idx = vec![0; h * w];
    let mut dist = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best: Option<(usize, usize)> = None; // (squared distance, index)
            for (rr, cols) in rows.iter().enumerate() {
                let dr = r.abs_diff(rr);
                if let Some((bd, _)) = best {
                    if dr * dr > bd {
                        continue;
                    }
                }
                // nearest column in this row; the left one wins ties
                let pos = cols.partition_point(|&x| x < c);
                let mut cand = None;
                if pos > 0 {
                    cand = Some(cols[pos - 1]);
                }
                if pos < cols.len() {
                    let right = cols[pos];
                    cand = match cand {
                        Some(left) if c - left <= right - c => Some(left),
                        _ => Some(right),
                    };
                }
                if let Some(cc) = cand {
                    let d = dr * dr + c.abs_diff(cc).pow(2);
                    let j = rr * w + cc;
                    if best.is_none_or(|(bd, bj)| d < bd || (d == bd && j < bj)) {
                        best = Some((d, j));
                    }
                }
            }
            let (d, j) = best.expect("foreground exists");
            idx[r * w + c] = j;
            dist[r * w + c] = (d as f64).sqrt();
        }
    }
    Some((idx, dist))
}

/// 7×7 Gaussian with σ = 5, normalized to sum 1.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * 25.0)).exp();
            total += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

/// Weighted F-measure with dependency (Gaussian-smoothed errors) and
/// distance-based pixel importance; `beta2` is β².
///
/// Empty ground truth scores 1 for an all-zero prediction and 0 otherwise.
pub fn weighted_f_measure(pred: &Tensor, gt: &Tensor, beta2: f64) -> f64 {
    let (h, w) = check(pred, gt);
    let fg = binary(gt);
    let p = pred.data();
    let Some((nearest, dist)) = nearest_foreground(&fg, h, w) else {
        return if p.iter().all(|&v| v == 0.0) {
            1.0
        } else {
            0.0
        };
    };
    let err: Vec<f64> = p
        .iter()
        .zip(&fg)
        .map(|(&v, &g)| (v - if g { 1.0 } else { 0.0 }).abs())
        .collect();
    // background errors borrow the error of their nearest foreground pixel
    let et: Vec<f64> = (0..h * w)
        .map(|i| if fg[i] { err[i] } else { err[nearest[i]] })
        .collect();
    let k = gaussian_kernel();
    let mut ew_fg = 0.0;
    let mut ew_bg = 0.0;
    let mut n_fg = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let e = if fg[i] {
                let mut ea = 0.0;
                for (ki, krow) in k.iter().enumerate() {
                    let rr = r as isize + ki as isize - 3;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for (kj, kv) in krow.iter().enumerate() {
                        let cc = c as isize + kj as isize - 3;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        ea += kv * et[rr as usize * w + cc as usize];
                    }
                }
                err[i].min(ea)
            } else {
                err[i]
            };
            if fg[i] {
                ew_fg += e;
                n_fg += 1.0;
            } else {
                let importance = 2.0 - ((0.5f64).ln() / 5.0 * dist[i]).exp();
                ew_bg += e * importance;
            }
        }
    }
    let tp = n_fg - ew_fg;
    let recall = 1.0 - ew_fg / n_fg;
    let precision = tp / (tp + ew_bg + EPS);
    (1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS)
}

/// One reliability-diagram bin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub mean_conf: f64,
    pub acc: f64,
    pub count: usize,
}

fn bin_edge(b: usize, n_bins: usize) -> f64 {
    0.5 + 0.5 * b as f64 / n_bins as f64
}

/// Bin `b` holds `bin_edge(b) <= conf < bin_edge(b + 1)`; the last bin also takes 1.
fn bin_index(conf: f64, n_bins: usize) -> usize {
    let mut b = (((conf - 0.5) * 2.0 * n_bins as f64) as usize).min(n_bins - 1);
    // the scaled guess can land one bin off at an edge
    if b + 1 < n_bins && conf >= bin_edge(b + 1, n_bins) {
        b += 1;
    } else if b > 0 && conf < bin_edge(b, n_bins) {
        b -= 1;
    }
    b
}

/// Expected calibration error over every pixel of every map.
///
/// Confidence is `max(p, 1 − p)`, the predicted label is `p ≥ 0.5`, and bins
/// split `[0.5, 1]` evenly. Empty bins report zero confidence and accuracy.
pub fn ece(
    preds: &[Tensor],
    gts: &[Tensor],
    n_bins: usize,
) -> Result<(f64, Vec<ReliabilityBin>), MetricError> {
    if n_bins == 0 {
        return Err(MetricError::NoBins);
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.shape() != gt.shape() {
            return Err(MetricError::Shape {
                pred: pred.shape().to_vec(),
                gt: gt.shape().to_vec(),
            });
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let conf = p.max(1.0 - p);
            let bin = bin_index(conf, n_bins);
            conf_sum[bin] += conf;
            count[bin] += 1;
            if (p >= 0.5) == (g >= 0.5) {
                correct[bin] += 1;
            }
        }
    }
    let total: usize = count.iter().sum();
    let mut score = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_conf, acc) = if count[b] > 0 {
                (
                    conf_sum[b] / count[b] as f64,
                    correct[b] as f64 / count[b] as f64,
                )
            } else {
                (0.0, 0.0)
            };
            if count[b] > 0 {
                score += count[b] as f64 / total as f64 * (acc - mean_conf).abs();
            }
            ReliabilityBin {
                bin_low: bin_edge(b, n_bins),
                bin_high: bin_edge(b + 1, n_bins),
                mean_conf,
                acc,
                count: count[b],
            }
        })
        .collect();
    Ok((score, bins))
}

/// Aggregate metrics of a prediction set. Scalar metrics are per-image means;
/// ECE pools every pixel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub count: usize,
    pub s_measure: f64,
    pub adaptive_e: f64,
    pub weighted_f: f64,
    pub mae: f64,
    pub ece: f64,
    pub reliability_bins: Vec<ReliabilityBin>,
}

impl MetricsReport {
    /// Evaluates every pair. An empty set gives a report with `count == 0` and zeros.
    pub fn compute(preds: &[Tensor], gts: &[Tensor], n_bins: usize) -> Result<Self, MetricError> {
        let (ece, bins) = ece(preds, gts, n_bins)?;
        let n = preds.len();
        let mean = |f: &dyn Fn(&Tensor, &Tensor) -> f64| {
            if n == 0 {
                0.0
            } else {
                preds.iter().zip(gts).map(|(p, g)| f(p, g)).sum::<f64>() / n as f64
            }
        };
        Ok(Self {
            count: n,
            s_measure: mean(&|p, g| s_measure(p, g, 0.5)),
            adaptive_e: mean(&adaptive_e_measure),
            weighted_f: mean(&|p, g| weighted_f_measure(p, g, 0.3)),
            mae: mean(&mae),
            ece,
            reliability_bins: bins,
        })
    }

    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("s_measure", self.s_measure),
            ("adaptive_e", self.adaptive_e),
            ("weighted_f", self.weighted_f),
            ("mae", self.mae),
            ("ece", self.ece),
        ] {
            let _ = writeln!(out, "{k}={v:.6}");
        }
        let _ = writeln!(out, "count={}", self.count);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Reliability bins as CSV with header `bin_low,bin_high,mean_conf,acc,count`.
pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("bin_low,bin_high,mean_conf,acc,count\n");
    for b in bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            b.bin_low, b.bin_high, b.mean_conf, b.acc, b.count
        );
    }
    out
}

/// Reliability diagram: per-bin accuracy bars against the identity line.
pub fn reliability_svg(bins: &[ReliabilityBin], ece: f64) -> String {
    const SIZE: f64 = 320.0;
    const PAD: f64 = 40.0;
    let plot = SIZE - 2.0 * PAD;
    // x spans confidence [0.5, 1]; y spans accuracy [0, 1]
    let x = |c: f64| PAD + (c - 0.5) / 0.5 * plot;
    let y = |a: f64| SIZE - PAD - a * plot;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    let _ = writeln!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>"
    );
    for b in bins.iter().filter(|b| b.count > 0) {
        let _ = writeln!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\" stroke=\"black\"/>",
            x(b.bin_low),
            y(b.acc),
            x(b.bin_high) - x(b.bin_low),
            b.acc * plot
        );
    }
    let _ = writeln!(
        svg,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"red\" stroke-dasharray=\"4 3\"/>",
        x(0.5),
        y(0.5),
        x(1.0),
        y(1.0)
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"black\"/>",
        SIZE - PAD,
        SIZE - PAD
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{:.2}\" stroke=\"black\"/>",
        SIZE - PAD
    );
    let _ = writeln!(
        svg,
        "<text x=\"{PAD}\" y=\"24\" font-size=\"14\">ECE = {:.4}</text>",
        ece
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">confidence</text>",
        SIZE / 2.0 - 25.0,
        SIZE - 12.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"6\" y=\"{:.2}\" font-size=\"11\">acc</text>",
        SIZE / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}
