//! Small numerically careful helpers shared by the other modules.

/// `ln Σ exp(x_i)` with max shifting. Returns `-inf` for an empty slice or when
/// every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

/// Normalises a vector of log-weights into probabilities.
pub fn normalize_log_weights(log_weights: &[f64]) -> Vec<f64> {
    softmax(log_weights)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln sigmoid(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `KL(p || q) = Σ p_i ln(p_i / q_i)` with the conventions `0 ln(0/q) = 0` and
/// `p ln(p/0) = +inf`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi / qi).ln();
    }
    total
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&pi| pi > 0.0).map(|&pi| pi * pi.ln()).sum::<f64>()
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (i as f64 + 1.0);
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Euclidean projection onto `{z : Σ z = 1, z_i ≥ floor}`.
///
/// Requires `floor * len ≤ 1`. When the set is a single point the uniform vector
/// is returned.
pub fn project_floored_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let slack = 1.0 - floor * n;
    if slack <= 0.0 {
        return vec![1.0 / n; v.len()];
    }
    // z = floor + slack * w with w on the unit simplex; the projection commutes
    // with the affine map because it is a uniform scaling plus shift.
    let shifted: Vec<f64> = v.iter().map(|&x| (x - floor) / slack).collect();
    project_simplex(&shifted)
        .into_iter()
        .map(|w| floor + slack * w)
        .collect()
}
