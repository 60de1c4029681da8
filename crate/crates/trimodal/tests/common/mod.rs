//! Naive reference implementations of every objective, coded with plain
//! loops against the written formulas and kept independent of the library's
//! graph ops. The acceptance suite compares the library against these.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// In-batch softmax contrastive loss over aligned rows.
pub fn naive_qpm(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> f64 {
    let n = u.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += (dot(&u[i], &v[j]) / tau).exp();
        }
        let pos = (dot(&u[i], &v[i]) / tau).exp();
        total += (pos / denom).ln();
    }
    -total / n as f64
}

/// Grouped contrastive loss: ln(1 + sum over (negative, query) pairs of
/// e^(a_j + b_i)), scores shifted by the frequency corrections.
#[allow(clippy::too_many_arguments)]
pub fn naive_ke(
    queries: &[Vec<f64>],
    own: &[f64],
    own_nlp: f64,
    negs: &[Vec<f64>],
    neg_nlp: &[f64],
    gamma: f64,
    theta: f64,
    literal: bool,
) -> f64 {
    let rep = &queries[0];
    let mut sum = 0.0;
    for (j, nv) in negs.iter().enumerate() {
        let s_neg = dot(rep, nv) + neg_nlp[j];
        let a = if literal { gamma * (s_neg + theta).exp() } else { gamma * (s_neg + theta) };
        for q in queries {
            let s_pos = dot(q, own) + own_nlp;
            let b = -gamma * s_pos;
            sum += (a + b).exp();
        }
    }
    (1.0 + sum).ln()
}

/// Binary classification loss over positive and hard-negative pair
/// probabilities.
pub fn naive_qpc(p_pos: &[f64], p_neg: &[f64]) -> f64 {
    let floor = 1e-12;
    let mut s = 0.0;
    for i in 0..p_pos.len() {
        s += p_pos[i].max(floor).ln() + (1.0 - p_neg[i]).max(floor).ln();
    }
    -s / p_pos.len() as f64
}

/// Mean cross-entropy over labeled rows of a logits matrix.
pub fn naive_mlm(logits: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, lab) in logits.iter().zip(labels) {
        if let Some(y) = lab {
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            total -= (row[*y].exp() / denom).ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Mean squared reconstruction error over masked rows.
pub fn naive_mpm(pred: &[Vec<f64>], target: &[Vec<f64>], mask: &[bool]) -> f64 {
    let d = pred[0].len();
    let k = mask.iter().filter(|&&m| m).count();
    let mut s = 0.0;
    for (i, m) in mask.iter().enumerate() {
        if *m {
            for c in 0..d {
                let diff = pred[i][c] - target[i][c];
                s += diff * diff;
            }
        }
    }
    s / (k * d) as f64
}
