//! Independent O(n^2) threshold-metric oracle: enumerates the candidate
//! thresholds from scratch and counts every score against every candidate.

pub struct BfPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
    pub accuracy: f64,
}

fn candidates(scores: &[(f64, bool)]) -> Vec<f64> {
    let mut values: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut out = vec![values[0] - 1.0];
    for i in 1..values.len() {
        out.push((values[i - 1] + values[i]) / 2.0);
    }
    out.push(values[values.len() - 1] + 1.0);
    out
}

pub fn sweep(scores: &[(f64, bool)]) -> Vec<BfPoint> {
    let n_gen = scores.iter().filter(|(_, g)| *g).count();
    let n_imp = scores.len() - n_gen;
    candidates(scores)
        .into_iter()
        .map(|t| {
            let mut false_match = 0usize;
            let mut false_non_match = 0usize;
            let mut correct = 0usize;
            for &(s, genuine) in scores {
                let predicted_match = s >= t;
                if predicted_match == genuine {
                    correct += 1;
                }
                if predicted_match && !genuine {
                    false_match += 1;
                }
                if !predicted_match && genuine {
                    false_non_match += 1;
                }
            }
            BfPoint {
                threshold: t,
                fmr: false_match as f64 / n_imp as f64,
                fnmr: false_non_match as f64 / n_gen as f64,
                accuracy: correct as f64 / scores.len() as f64,
            }
        })
        .collect()
}

/// Max accuracy and the lowest threshold achieving it.
pub fn accuracy_best(scores: &[(f64, bool)]) -> (f64, f64) {
    let pts = sweep(scores);
    let mut best = &pts[0];
    for p in &pts[1..] {
        if p.accuracy > best.accuracy {
            best = p;
        }
    }
    (best.accuracy, best.threshold)
}

/// Same interpolation rule as the implementation, applied to the
/// brute-force sweep: exact crossing, else the rate at the interpolated
/// crossing of the bracketing segment.
pub fn eer(scores: &[(f64, bool)]) -> f64 {
    let pts = sweep(scores);
    for (i, p) in pts.iter().enumerate() {
        let diff = p.fmr - p.fnmr;
        if diff == 0.0 {
            return p.fmr;
        }
        if diff < 0.0 {
            let q = &pts[i - 1];
            let denom = (q.fmr - q.fnmr) + (p.fnmr - p.fmr);
            let s = (q.fmr - q.fnmr) / denom;
            return q.fmr + (p.fmr - q.fmr) * s;
        }
    }
    unreachable!("above-max sentinel has FMR 0, FNMR 1")
}

/// Lowest FNMR subject to FMR <= ceiling and the lowest such threshold.
pub fn fmr_n(scores: &[(f64, bool)], ceiling: f64) -> (f64, f64) {
    let pts = sweep(scores);
    let mut best: Option<(f64, f64)> = None;
    for p in &pts {
        if p.fmr <= ceiling {
            let better = match best {
                None => true,
                Some((fnmr, th)) => p.fnmr < fnmr || (p.fnmr == fnmr && p.threshold < th),
            };
            if better {
                best = Some((p.fnmr, p.threshold));
            }
        }
    }
    best.expect("above-max sentinel is always feasible")
}

pub fn fmr_fnmr_at(scores: &[(f64, bool)], t: f64) -> (f64, f64) {
    let n_gen = scores.iter().filter(|(_, g)| *g).count();
    let n_imp = scores.len() - n_gen;
    let fm = scores.iter().filter(|&&(s, g)| !g && s >= t).count();
    let fnm = scores.iter().filter(|&&(s, g)| g && s < t).count();
    (fm as f64 / n_imp as f64, fnm as f64 / n_gen as f64)
}
