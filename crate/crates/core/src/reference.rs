//! Slow, independent reference implementations used as oracles by the test
//! suites. Nothing here shares code with the operational paths it checks:
//! gradients come from central finite differences on the forward value,
//! graph builders from full O(n^2) distance matrices, and AUC from
//! exhaustive pair counting.

use crate::autodiff::Tensor;

/// Central-difference gradients of a scalar-valued function of several
/// tensors. `f` is re-evaluated with one element nudged at a time.
pub fn central_difference_gradients(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    step: f64,
) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; input.numel()];
        for slot in 0..input.numel() {
            let mut eval = |delta: f64| -> f64 {
                let mut perturbed: Vec<Tensor> = inputs.to_vec();
                let mut data = input.data().to_vec();
                data[slot] += delta;
                perturbed[which] = Tensor::new(input.shape().to_vec(), data).unwrap();
                f(&perturbed)
            };
            grad[slot] = (eval(step) - eval(-step)) / (2.0 * step);
        }
        grads.push(Tensor::new(input.shape().to_vec(), grad).unwrap());
    }
    grads
}

/// Largest elementwise relative error between two same-shaped tensors.
/// The denominator is floored at 1e-6 so near-zero pairs compare absolutely.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative error of mismatched shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn dist_sq(p: (f64, f64), q: (f64, f64)) -> f64 {
    let dx = p.0 - q.0;
    let dy = p.1 - q.1;
    dx * dx + dy * dy
}

/// Full-distance-matrix k-nearest-neighbor edges, ties broken by lower
/// index. Returned sorted by (src, dst).
pub fn brute_force_knn_edges(points: &[(f64, f64)], k: usize) -> Vec<(usize, usize)> {
    let n = points.len();
    let mut edges = Vec::new();
    for u in 0..n {
        let mut candidates: Vec<(f64, usize)> = (0..n)
            .filter(|&v| v != u)
            .map(|v| (dist_sq(points[u], points[v]), v))
            .collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, v) in candidates.iter().take(k) {
            edges.push((u, v));
        }
    }
    edges.sort_unstable();
    edges
}

/// Full-distance-matrix radius edges: u -> v iff 0 < d(u, v) <= r.
/// Returned sorted by (src, dst).
pub fn brute_force_radius_edges(points: &[(f64, f64)], r: f64) -> Vec<(usize, usize)> {
    let n = points.len();
    let r_sq = r * r;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v {
                let d = dist_sq(points[u], points[v]);
                if d > 0.0 && d <= r_sq {
                    edges.push((u, v));
                }
            }
        }
    }
    edges
}

/// One-vs-rest AUC for a single class by exhaustive pair counting:
/// concordant pairs count 1, tied scores count 1/2.
pub fn pair_counting_ovr_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let mut concordant = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &pi) in positives.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positives.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                concordant += 1.0;
            } else if scores[i] == scores[j] {
                concordant += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        None
    } else {
        Some(concordant / pairs)
    }
}

/// Macro one-vs-rest multi-class AUC by pair counting over every class
/// present in `labels`. `None` when the labels are all identical.
pub fn pair_counting_multiclass_auc(scores: &Tensor, labels: &[usize]) -> Option<f64> {
    let (_, k) = scores.dims2()?;
    let mut per_class = Vec::new();
    for class in 0..k {
        if !labels.contains(&class) {
            continue;
        }
        let column: Vec<f64> = (0..labels.len()).map(|i| scores.at2(i, class)).collect();
        let positives: Vec<bool> = labels.iter().map(|&y| y == class).collect();
        per_class.push(pair_counting_ovr_auc(&column, &positives)?);
    }
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

/// Simple geometric summaries of a point pattern, used to verify that the
/// synthetic distribution classes are separable by construction:
/// (mean nearest-neighbor distance, convex hull area fraction,
/// line-fit RMS residual, wedge angular spread from the chest wall).
pub fn spatial_summary_features(points: &[(f64, f64)], extent: (f64, f64)) -> [f64; 4] {
    let scale = extent.0.max(extent.1);
    let norm: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.0 / extent.0, p.1 / extent.1))
        .collect();

    let n = norm.len();
    let mut nn_total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i != j {
                best = best.min(dist_sq(norm[i], norm[j]));
            }
        }
        nn_total += best.sqrt();
    }
    let mean_nn = nn_total / n as f64;

    let hull_fraction = convex_hull_area(&norm);

    // Perpendicular RMS residual of the best-fit line through the centroid.
    let cx = norm.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let cy = norm.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &norm {
        let dx = p.0 - cx;
        let dy = p.1 - cy;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let minor_eig = (tr - (tr * tr - 4.0 * det).max(0.0).sqrt()) / 2.0;
    let line_rms = (minor_eig.max(0.0) / n as f64).sqrt();

    // Angular spread seen from the chest wall (x = 0) at the centroid height.
    let apex = (0.0, cy);
    let mut angles: Vec<f64> = norm
        .iter()
        .map(|p| (p.1 - apex.1).atan2(p.0 - apex.0))
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let spread = angles.last().unwrap() - angles.first().unwrap();

    let _ = scale;
    [mean_nn, hull_fraction, line_rms, spread]
}

/// Convex hull area by the monotone chain, on unit-normalized coordinates.
fn convex_hull_area(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return 0.0;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return 0.0;
    }
    let mut area = 0.0;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        area += a.0 * b.1 - b.0 * a.1;
    }
    area.abs() / 2.0
}

/// In-sample accuracy of a multinomial logistic model fit by plain gradient
/// descent on standardized features. Deterministic; used only to certify
/// that a synthetic dataset is linearly separable enough to learn from.
pub fn multinomial_logistic_accuracy(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    iterations: usize,
) -> f64 {
    let n = features.len();
    let d = features[0].len();

    // Standardize features.
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for row in features {
        for (j, v) in row.iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for row in features {
        for (j, v) in row.iter().enumerate() {
            std[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    for s in &mut std {
        *s = (*s / n as f64).sqrt().max(1e-9);
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|row| {
            let mut out: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, v)| (v - mean[j]) / std[j])
                .collect();
            out.push(1.0); // bias column
            out
        })
        .collect();
    let dim = d + 1;

    let mut w = vec![0.0; classes * dim];
    let lr = 0.5;
    for _ in 0..iterations {
        let mut grad = vec![0.0; classes * dim];
        for (row, &y) in x.iter().zip(labels) {
            let mut logits = vec![0.0; classes];
            for (c, logit) in logits.iter_mut().enumerate() {
                *logit = row.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, b)| a * b).sum();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..classes {
                let p = (logits[c] - max).exp() / denom;
                let err = p - if c == y { 1.0 } else { 0.0 };
                for (j, v) in row.iter().enumerate() {
                    grad[c * dim + j] += err * v;
                }
            }
        }
        for (wv, gv) in w.iter_mut().zip(&grad) {
            *wv -= lr * gv / n as f64;
        }
    }

    let mut correct = 0usize;
    for (row, &y) in x.iter().zip(labels) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..classes {
            let logit: f64 = row.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, b)| a * b).sum();
            if logit > best.0 {
                best = (logit, c);
            }
        }
        if best.1 == y {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
