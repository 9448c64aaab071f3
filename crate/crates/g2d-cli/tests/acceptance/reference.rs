//! Independent straight-line scalar reference implementations of every
//! loss, written against plain slices with no shared code with the library.

pub fn huber(a: f64, b: f64, delta: f64) -> f64 {
    let d = (a - b).abs();
    if d <= delta {
        0.5 * d * d
    } else {
        delta * (d - 0.5 * delta)
    }
}

/// Sum over the batch of squared L2 reconstruction error.
pub fn reconstruction(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        for (x, y) in p.iter().zip(t.iter()) {
            total += (x - y) * (x - y);
        }
    }
    total
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Pairwise-distance relational loss over ordered pairs; `None` when either
/// side has zero mean pairwise distance.
pub fn rkd_distance(teacher: &[Vec<f64>], student: &[Vec<f64>], delta: f64) -> Option<f64> {
    let n = teacher.len();
    let mut mu_t = 0.0;
    let mut mu_s = 0.0;
    let mut count = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            mu_t += sq_dist(&teacher[i], &teacher[j]);
            mu_s += sq_dist(&student[i], &student[j]);
            count += 1.0;
        }
    }
    mu_t /= count;
    mu_s /= count;
    if mu_t == 0.0 || mu_s == 0.0 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let a = sq_dist(&teacher[i], &teacher[j]) / mu_t;
            let b = sq_dist(&student[i], &student[j]) / mu_s;
            total += huber(a, b, delta);
        }
    }
    Some(total)
}

fn cosine_at(rows: &[Vec<f64>], i: usize, j: usize, k: usize) -> Option<f64> {
    let d = rows[0].len();
    let mut dot = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for c in 0..d {
        let e1 = rows[i][c] - rows[j][c];
        let e2 = rows[k][c] - rows[j][c];
        dot += e1 * e2;
        n1 += e1 * e1;
        n2 += e2 * e2;
    }
    let n1 = n1.sqrt();
    let n2 = n2.sqrt();
    if n1 < 1e-12 || n2 < 1e-12 {
        return None;
    }
    Some(dot / (n1 * n2).max(1e-12))
}

/// Triple-angle relational loss over ordered triples; skips triples with
/// coincident points on either side, `None` when more than half skip.
pub fn rkd_angle(teacher: &[Vec<f64>], student: &[Vec<f64>], delta: f64) -> Option<f64> {
    let n = teacher.len();
    let mut total = 0.0;
    let mut skipped = 0usize;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                count += 1;
                match (cosine_at(teacher, i, j, k), cosine_at(student, i, j, k)) {
                    (Some(ct), Some(cs)) => total += huber(ct, cs, delta),
                    _ => skipped += 1,
                }
            }
        }
    }
    if 2 * skipped > count {
        return None;
    }
    Some(total)
}

/// Sum over rows of the Euclidean norm of `t_i - mapped_i`.
pub fn l1_embed(teacher: &[Vec<f64>], mapped: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (t, m) in teacher.iter().zip(mapped.iter()) {
        let mut s = 0.0;
        for i in 0..t.len() {
            s += (t[i] - m[i]) * (t[i] - m[i]);
        }
        total += s.sqrt();
    }
    total
}

/// Applies an affine map `w` (d_in x d_out, row major) plus bias.
pub fn apply_linear(rows: &[Vec<f64>], w: &[f64], b: &[f64], d_out: usize) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let mut out = b.to_vec();
            for (i, &x) in r.iter().enumerate() {
                for o in 0..d_out {
                    out[o] += x * w[i * d_out + o];
                }
            }
            out
        })
        .collect()
}

/// Combined distillation loss with the student mapped through (w, b) for
/// the first-order term only.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    w: &[f64],
    b: &[f64],
    d_out: usize,
    alpha: f64,
    beta: f64,
    delta: f64,
) -> Option<f64> {
    let mapped = apply_linear(student, w, b, d_out);
    let l1 = l1_embed(teacher, &mapped);
    if alpha == 0.0 && beta == 0.0 {
        return Some(l1);
    }
    let l2 = rkd_distance(teacher, student, delta)?;
    let l3 = rkd_angle(teacher, student, delta)?;
    Some((l1 + alpha * l2) + beta * l3)
}

/// Mean negative log-probability of the true class over normalized rows.
pub fn classification(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in probs.iter().zip(labels.iter()) {
        total -= row[label].ln();
    }
    total / probs.len() as f64
}

/// Closed-form adversarial losses for a LINEAR critic `score(x) = <w, x> + b`:
/// the per-sample input gradient is `w`, so the zero-centered penalty is
/// `||w||^2` regardless of the interpolates.
pub fn adversarial_linear_critic(
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    w: &[f64],
    bias: f64,
    gp_weight: f64,
) -> (f64, f64) {
    let score = |x: &[f64]| -> f64 {
        let mut s = bias;
        for i in 0..x.len() {
            s += w[i] * x[i];
        }
        s
    };
    let mean = |rows: &[Vec<f64>]| -> f64 {
        rows.iter().map(|r| score(r)).sum::<f64>() / rows.len() as f64
    };
    let real_mean = mean(real);
    let fake_mean = mean(fake);
    let penalty: f64 = w.iter().map(|v| v * v).sum();
    (fake_mean - real_mean + gp_weight * penalty, -fake_mean)
}
