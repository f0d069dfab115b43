//! Direct-definition metric oracles, written independently of the library.

#![allow(clippy::needless_range_loop)]

use rand::Rng;
use refcod_tensor::Tensor;

use super::rng;

fn map(h: usize, w: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[h, w], data)
}

/// Random 16×16 instance: one or two rectangles of foreground and a soft prediction
/// that mostly agrees with them.
pub fn random_instance(seed: u64) -> (Tensor, Tensor) {
    let mut g = rng(seed);
    let n = 16;
    let mut gt = vec![0.0; n * n];
    for _ in 0..g.random_range(1..=2) {
        let (r0, c0) = (g.random_range(0..12), g.random_range(0..12));
        let (r1, c1) = (g.random_range(r0 + 1..=n), g.random_range(c0 + 1..=n));
        for r in r0..r1 {
            for c in c0..c1 {
                gt[r * n + c] = 1.0;
            }
        }
    }
    let noise: f64 = g.random_range(0.1..0.6);
    let pred = gt
        .iter()
        .map(|&t| {
            let v: f64 =
                t + g.random_range(-noise..noise) + if g.random_bool(0.05) { 0.8 } else { 0.0 };
            v.clamp(0.0, 1.0)
        })
        .collect();
    (map(n, n, pred), map(n, n, gt))
}

pub fn oracle_mae(pred: &Tensor, gt: &Tensor) -> f64 {
    let mut total = 0.0;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        total += (p - g).abs();
    }
    total / pred.numel() as f64
}

/// Weighted F-measure written out map by map from its definition: exhaustive
/// nearest-foreground search, full Gaussian-filtered error map, importance map.
pub fn oracle_weighted_f(pred: &Tensor, gt: &Tensor, beta2: f64) -> f64 {
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let g: Vec<bool> = gt.data().iter().map(|&v| v > 0.5).collect();
    let e: Vec<f64> = pred
        .data()
        .iter()
        .zip(&g)
        .map(|(&p, &t)| (p - f64::from(u8::from(t))).abs())
        .collect();

    let mut nearest = vec![0usize; h * w];
    let mut dst = vec![0.0f64; h * w];
    for i in 0..h * w {
        if g[i] {
            nearest[i] = i;
            continue;
        }
        let mut best = f64::INFINITY;
        for j in 0..h * w {
            if !g[j] {
                continue;
            }
            let dy = (i / w) as f64 - (j / w) as f64;
            let dx = (i % w) as f64 - (j % w) as f64;
            let d = (dy * dy + dx * dx).sqrt();
            if d < best {
                best = d;
                nearest[i] = j;
            }
        }
        dst[i] = best;
    }
    let et: Vec<f64> = (0..h * w).map(|i| e[nearest[i]]).collect();

    let sigma: f64 = 5.0;
    let mut kernel = vec![0.0; 49];
    for (k, v) in kernel.iter_mut().enumerate() {
        let (y, x) = ((k / 7) as f64 - 3.0, (k % 7) as f64 - 3.0);
        *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
    }
    let ksum: f64 = kernel.iter().sum();
    let mut ea = vec![0.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let mut acc = 0.0;
            for k in 0..49 {
                let (rr, cc) = (r + (k / 7) as i64 - 3, c + (k % 7) as i64 - 3);
                if (0..h as i64).contains(&rr) && (0..w as i64).contains(&cc) {
                    acc += kernel[k] / ksum * et[(rr * w as i64 + cc) as usize];
                }
            }
            ea[(r * w as i64 + c) as usize] = acc;
        }
    }
    let min_e_ea: Vec<f64> = (0..h * w)
        .map(|i| if g[i] && ea[i] < e[i] { ea[i] } else { e[i] })
        .collect();
    let b: Vec<f64> = (0..h * w)
        .map(|i| {
            if g[i] {
                1.0
            } else {
                2.0 - ((1.0f64 - 0.5).ln() / 5.0 * dst[i]).exp()
            }
        })
        .collect();
    let ew: Vec<f64> = min_e_ea.iter().zip(&b).map(|(x, y)| x * y).collect();
    let n_fg = g.iter().filter(|&&t| t).count() as f64;
    let ew_fg: f64 = (0..h * w).filter(|&i| g[i]).map(|i| ew[i]).sum();
    let fpw: f64 = (0..h * w).filter(|&i| !g[i]).map(|i| ew[i]).sum();
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let p = tpw / (f64::EPSILON + tpw + fpw);
    (1.0 + beta2) * r * p / (f64::EPSILON + r + beta2 * p)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn oracle_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let sxx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0 + f64::EPSILON);
    let syy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0 + f64::EPSILON);
    let sxy = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1.0 + f64::EPSILON);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure with one-based centroid coordinates, mirroring the
/// original toolbox layout.
pub fn oracle_s_measure(pred: &Tensor, gt: &Tensor, alpha: f64) -> f64 {
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let p = pred.data();
    let g: Vec<f64> = gt
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
        .collect();
    let y = mean(&g);
    if y == 0.0 {
        return 1.0 - mean(p);
    }
    if y == 1.0 {
        return mean(p);
    }
    let object = |vals: Vec<f64>| {
        let x = mean(&vals);
        2.0 * x / (x * x + 1.0 + sample_std(&vals) + f64::EPSILON)
    };
    let fg: Vec<f64> = (0..h * w).filter(|&i| g[i] == 1.0).map(|i| p[i]).collect();
    let bg: Vec<f64> = (0..h * w)
        .filter(|&i| g[i] == 0.0)
        .map(|i| 1.0 - p[i])
        .collect();
    let s_object = y * object(fg) + (1.0 - y) * object(bg);

    let total: f64 = g.iter().sum();
    let cx =
        ((0..h * w).map(|i| g[i] * ((i % w) + 1) as f64).sum::<f64>() / total).round() as usize;
    let cy =
        ((0..h * w).map(|i| g[i] * ((i / w) + 1) as f64).sum::<f64>() / total).round() as usize;
    let area = (h * w) as f64;
    let mut s_region = 0.0;
    // one-based inclusive blocks: rows 1..=cy / cy+1..=h, columns 1..=cx / cx+1..=w
    for (rows, cols) in [
        ((1, cy), (1, cx)),
        ((1, cy), (cx + 1, w)),
        ((cy + 1, h), (1, cx)),
        ((cy + 1, h), (cx + 1, w)),
    ] {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in rows.0..=rows.1 {
            for c in cols.0..=cols.1 {
                xs.push(p[(r - 1) * w + c - 1]);
                ys.push(g[(r - 1) * w + c - 1]);
            }
        }
        if xs.is_empty() {
            continue;
        }
        s_region += xs.len() as f64 / area * oracle_ssim(&xs, &ys);
    }
    (alpha * s_object + (1.0 - alpha) * s_region).max(0.0)
}

/// Enhanced alignment computed pixel by pixel from the bias-removed maps.
pub fn oracle_e_measure(pred: &Tensor, gt: &Tensor) -> f64 {
    let n = pred.numel() as f64;
    let threshold = (2.0 * mean(pred.data())).min(1.0);
    let fm: Vec<f64> = pred
        .data()
        .iter()
        .map(|&v| f64::from(u8::from(threshold > 0.0 && v >= threshold)))
        .collect();
    let g: Vec<f64> = gt
        .data()
        .iter()
        .map(|&v| f64::from(u8::from(v > 0.5)))
        .collect();
    let enhanced: Vec<f64> = if g.iter().all(|&v| v == 0.0) {
        fm.iter().map(|v| 1.0 - v).collect()
    } else if g.iter().all(|&v| v == 1.0) {
        fm.clone()
    } else {
        let (mf, mg) = (mean(&fm), mean(&g));
        fm.iter()
            .zip(&g)
            .map(|(f, t)| {
                let (a, b) = (f - mf, t - mg);
                let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
                (align + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n
}
