//! Straight-line reference implementations of the saliency metrics.
//!
//! Every threshold is evaluated pixel by pixel with small epsilons in the
//! denominators instead of the library's histogram and zero guards.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = f64::EPSILON;

pub fn mae(p: &[f64], g: &[u8]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i] as f64).abs();
    }
    s / p.len() as f64
}

fn binarize(p: &[f64], t: f64) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v >= t)).collect()
}

/// `(f_max, f_mean)`
pub fn f_measure(p: &[f64], g: &[u8]) -> (f64, f64) {
    if g.iter().all(|&v| v == 0) {
        return (0.0, 0.0);
    }
    let mut fs = Vec::new();
    for k in 0..256 {
        let b = binarize(p, k as f64 / 255.0);
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for i in 0..p.len() {
            match (b[i], g[i]) {
                (1, 1) => tp += 1.0,
                (1, 0) => fp += 1.0,
                (0, 1) => fneg += 1.0,
                _ => {}
            }
        }
        let prec = tp / (tp + fp + EPS);
        let rec = tp / (tp + fneg + EPS);
        fs.push(1.3 * prec * rec / (0.3 * prec + rec + EPS));
    }
    (fs.iter().cloned().fold(0.0, f64::max), fs.iter().sum::<f64>() / 256.0)
}

pub fn alignment(b: &[u8], g: &[u8]) -> f64 {
    let n = b.len() as f64;
    let gsum: f64 = g.iter().map(|&v| v as f64).sum();
    if gsum == 0.0 {
        return b.iter().map(|&v| 1.0 - v as f64).sum::<f64>() / n;
    }
    if gsum == n {
        return b.iter().map(|&v| v as f64).sum::<f64>() / n;
    }
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mg = gsum / n;
    let mut total = 0.0;
    for i in 0..b.len() {
        let x = g[i] as f64 - mg;
        let y = b[i] as f64 - mb;
        let xi = 2.0 * x * y / (x * x + y * y + EPS);
        total += (xi + 1.0).powi(2) / 4.0;
    }
    total / n
}

/// `(e_max, e_mean)`
pub fn e_measure(p: &[f64], g: &[u8]) -> (f64, f64) {
    let es: Vec<f64> = (0..256).map(|k| alignment(&binarize(p, k as f64 / 255.0), g)).collect();
    (es.iter().cloned().fold(0.0, f64::max), es.iter().sum::<f64>() / 256.0)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn object(xs: &[f64]) -> f64 {
    let (m, s) = mean_std(xs);
    2.0 * m / (m * m + 1.0 + s + EPS)
}

fn region_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for i in 0..x.len() {
        vx += (x[i] - mx).powi(2);
        vy += (y[i] - my).powi(2);
        cxy += (x[i] - mx) * (y[i] - my);
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    let a = 4.0 * mx * my * cxy;
    let b = (mx * mx + my * my) * (vx + vy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(p: &[f64], g: &[u8], h: usize, w: usize) -> f64 {
    let n = p.len() as f64;
    let fg: Vec<usize> = (0..p.len()).filter(|&i| g[i] == 1).collect();
    if fg.is_empty() {
        return (1.0 - p.iter().sum::<f64>() / n).clamp(0.0, 1.0);
    }
    if fg.len() == p.len() {
        return (p.iter().sum::<f64>() / n).clamp(0.0, 1.0);
    }
    let mu = fg.len() as f64 / n;
    let on_fg: Vec<f64> = fg.iter().map(|&i| p[i]).collect();
    let on_bg: Vec<f64> = (0..p.len()).filter(|&i| g[i] == 0).map(|i| 1.0 - p[i]).collect();
    let so = mu * object(&on_fg) + (1.0 - mu) * object(&on_bg);

    let cy = fg.iter().map(|&i| (i / w) as f64).sum::<f64>() / fg.len() as f64;
    let cx = fg.iter().map(|&i| (i % w) as f64).sum::<f64>() / fg.len() as f64;
    let ys = ((cy.round() as usize) + 1).min(h);
    let xs = ((cx.round() as usize) + 1).min(w);
    let mut sr = 0.0;
    for (y0, y1) in [(0, ys), (ys, h)] {
        for (x0, x1) in [(0, xs), (xs, w)] {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    a.push(p[y * w + x]);
                    b.push(g[y * w + x] as f64);
                }
            }
            if !a.is_empty() {
                sr += a.len() as f64 / n * region_ssim(&a, &b);
            }
        }
    }
    (0.5 * so + 0.5 * sr).clamp(0.0, 1.0)
}

/// Seeded `(pred, gt)` pair on a `side × side` grid. Every few seeds the
/// prediction is quantized to 8 bits, which puts values exactly on the
/// thresholds, and the ground truth is empty or full.
pub fn random_pair(seed: u64, side: usize) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side;
    let gt: Vec<u8> = match seed % 10 {
        7 => vec![0; n],
        9 => vec![1; n],
        3 => (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect(),
        _ => {
            let (y0, x0) = (rng.random_range(0..side - 2), rng.random_range(0..side - 2));
            let (y1, x1) = (rng.random_range(y0 + 1..side), rng.random_range(x0 + 1..side));
            (0..n)
                .map(|i| u8::from((y0..=y1).contains(&(i / side)) && (x0..=x1).contains(&(i % side))))
                .collect()
        }
    };
    let noise = rng.random_range(0.0..0.6);
    let mut pred: Vec<f64> = gt
        .iter()
        .map(|&g| {
            let v = g as f64 * (1.0 - noise) + rng.random_range(0.0..1.0) * noise;
            v.clamp(0.0, 1.0)
        })
        .collect();
    if seed % 2 == 0 {
        for v in &mut pred {
            *v = (*v * 255.0).round() / 255.0;
        }
    }
    (pred, gt)
}
