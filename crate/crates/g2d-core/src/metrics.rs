//! Verification protocol construction and the metric suite.
//!
//! All threshold metrics are exact functions of the score multiset: the
//! candidate thresholds are the midpoints of adjacent sorted distinct
//! scores plus a below-min and an above-max sentinel, and the match rule is
//! "genuine iff score >= threshold" (ties count as a match).

use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// Cosine similarity; errors on a zero-norm embedding.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    assert_eq!(a.shape(), b.shape(), "cosine: dimension mismatch");
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::ZeroEmbedding);
    }
    Ok(a.dot(b) / (na * nb))
}

/// Labeled similarity scores.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub scores: Vec<(f64, bool)>,
}

impl ScoreSet {
    pub fn new(scores: Vec<(f64, bool)>) -> Result<Self> {
        let has_genuine = scores.iter().any(|(_, g)| *g);
        let has_impostor = scores.iter().any(|(_, g)| !*g);
        if !has_genuine || !has_impostor {
            return Err(CoreError::EmptyScoreSet);
        }
        Ok(ScoreSet { scores })
    }

    pub fn genuine(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().filter(|(_, g)| *g).map(|(s, _)| *s)
    }

    pub fn impostor(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().filter(|(_, g)| !*g).map(|(s, _)| *s)
    }

    pub fn n_genuine(&self) -> usize {
        self.genuine().count()
    }

    pub fn n_impostor(&self) -> usize {
        self.impostor().count()
    }
}

/// Candidate thresholds: midpoints of adjacent sorted distinct scores with
/// a below-min and an above-max sentinel.
pub fn candidate_thresholds(scores: &ScoreSet) -> Vec<f64> {
    let mut values: Vec<f64> = scores.scores.iter().map(|(s, _)| *s).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    values.dedup();
    let mut out = Vec::with_capacity(values.len() + 1);
    out.push(values[0] - 1.0);
    for w in values.windows(2) {
        out.push((w[0] + w[1]) / 2.0);
    }
    out.push(values[values.len() - 1] + 1.0);
    out
}

/// One operating point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
    pub accuracy: f64,
}

/// FMR, FNMR and accuracy at every candidate threshold, in increasing
/// threshold order. Computed with one sort and prefix counts.
pub fn sweep(scores: &ScoreSet) -> Vec<OperatingPoint> {
    let thresholds = candidate_thresholds(scores);
    let mut genuine: Vec<f64> = scores.genuine().collect();
    let mut impostor: Vec<f64> = scores.impostor().collect();
    genuine.sort_by(|a, b| a.partial_cmp(b).unwrap());
    impostor.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_gen = genuine.len();
    let n_imp = impostor.len();
    let total = (n_gen + n_imp) as f64;
    let mut out = Vec::with_capacity(thresholds.len());
    // Walk both sorted lists once; for ascending t, count items below t.
    let mut gi = 0usize; // genuine scores < t
    let mut ii = 0usize; // impostor scores < t
    for t in thresholds {
        while gi < n_gen && genuine[gi] < t {
            gi += 1;
        }
        while ii < n_imp && impostor[ii] < t {
            ii += 1;
        }
        let fmr = (n_imp - ii) as f64 / n_imp as f64;
        let fnmr = gi as f64 / n_gen as f64;
        let correct = (n_gen - gi) + ii;
        out.push(OperatingPoint {
            threshold: t,
            fmr,
            fnmr,
            accuracy: correct as f64 / total,
        });
    }
    out
}

/// FMR and FNMR at an arbitrary threshold under the `score >= t` rule.
pub fn fmr_fnmr_at(scores: &ScoreSet, threshold: f64) -> (f64, f64) {
    let n_gen = scores.n_genuine();
    let n_imp = scores.n_impostor();
    let fm = scores.impostor().filter(|&s| s >= threshold).count();
    let fnm = scores.genuine().filter(|&s| s < threshold).count();
    (fm as f64 / n_imp as f64, fnm as f64 / n_gen as f64)
}

/// Highest verification accuracy over all candidate thresholds and the
/// lowest threshold achieving it.
pub fn accuracy_best_threshold(scores: &ScoreSet) -> (f64, f64) {
    let points = sweep(scores);
    let mut best = &points[0];
    for p in &points[1..] {
        if p.accuracy > best.accuracy {
            best = p;
        }
    }
    (best.accuracy, best.threshold)
}

/// Equal error rate. Returns the common rate at an exact FMR = FNMR
/// crossing, otherwise linearly interpolates between the two adjacent
/// operating points that bracket the sign change of FMR - FNMR and returns
/// the rate at the interpolated crossing.
pub fn eer(scores: &ScoreSet) -> f64 {
    let points = sweep(scores);
    eer_from_points(&points)
}

/// EER from a precomputed increasing-threshold sweep. Public so an
/// independent sweep can be fed through the same interpolation rule.
pub fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    // diff = FMR - FNMR starts at +1 (below-min sentinel) and ends at -1.
    for (i, p) in points.iter().enumerate() {
        let diff = p.fmr - p.fnmr;
        if diff == 0.0 {
            return p.fmr;
        }
        if diff < 0.0 {
            let prev = &points[i - 1];
            let f1 = prev.fmr;
            let n1 = prev.fnmr;
            let f2 = p.fmr;
            let n2 = p.fnmr;
            let denom = (f1 - n1) + (n2 - f2);
            let s = (f1 - n1) / denom;
            return f1 + (f2 - f1) * s;
        }
    }
    // FMR > FNMR everywhere cannot happen with the above-max sentinel.
    unreachable!("sweep always ends at (0, 1)")
}

/// Lowest FNMR subject to FMR <= ceiling, with the lowest threshold
/// achieving it.
pub fn fmr_n(scores: &ScoreSet, ceiling: f64) -> (f64, f64) {
    let points = sweep(scores);
    for p in &points {
        if p.fmr <= ceiling {
            return (p.fnmr, p.threshold);
        }
    }
    unreachable!("above-max sentinel always has FMR = 0")
}

/// Fisher discriminant ratio with population variances.
pub fn fdr(scores: &ScoreSet) -> Result<f64> {
    let genuine: Vec<f64> = scores.genuine().collect();
    let impostor: Vec<f64> = scores.impostor().collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    let mg = mean(&genuine);
    let mi = mean(&impostor);
    let vg = var(&genuine, mg);
    let vi = var(&impostor, mi);
    if vg == 0.0 && vi == 0.0 {
        return Err(CoreError::DegenerateFdr);
    }
    Ok((mg - mi) * (mg - mi) / (vg + vi))
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub acc: f64,
    pub acc_threshold: f64,
    pub eer: f64,
    pub fdr: f64,
    pub fmr100: f64,
    pub fmr100_threshold: f64,
    pub fmr1000: f64,
    pub fmr1000_threshold: f64,
    /// (fmr, fnmr, avg) at the FMR100 threshold.
    pub at_fmr100: (f64, f64, f64),
    /// (fmr, fnmr, avg) at the FMR1000 threshold.
    pub at_fmr1000: (f64, f64, f64),
    pub auc: f64,
    /// (fmr, tpr) sorted by fmr.
    pub roc: Vec<(f64, f64)>,
    /// (bin_low, bin_high, genuine_count, impostor_count) over [-1, 1].
    pub histogram: Vec<(f64, f64, usize, usize)>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

/// Assembles the full eight-metric report plus ROC and histogram data.
pub fn report(scores: &ScoreSet, bins: usize) -> Result<VerificationReport> {
    assert!(bins > 0, "report: bins must be positive");
    let (acc, acc_threshold) = accuracy_best_threshold(scores);
    let eer_value = eer(scores);
    let fdr_value = fdr(scores)?;
    let (fmr100, th100) = fmr_n(scores, 0.01);
    let (fmr1000, th1000) = fmr_n(scores, 0.001);
    let rates100 = fmr_fnmr_at(scores, th100);
    let rates1000 = fmr_fnmr_at(scores, th1000);

    // ROC: (FMR, 1 - FNMR) at every candidate threshold.
    let points = sweep(scores);
    let mut roc: Vec<(f64, f64)> = points.iter().map(|p| (p.fmr, 1.0 - p.fnmr)).collect();
    roc.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let auc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();

    // Histograms over [-1, 1] with equal-width bins; out-of-range scores
    // land in the edge bins.
    let width = 2.0 / bins as f64;
    let mut histogram: Vec<(f64, f64, usize, usize)> = (0..bins)
        .map(|i| (-1.0 + i as f64 * width, -1.0 + (i + 1) as f64 * width, 0, 0))
        .collect();
    for &(s, genuine) in &scores.scores {
        let idx = (((s + 1.0) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        if genuine {
            histogram[idx].2 += 1;
        } else {
            histogram[idx].3 += 1;
        }
    }

    Ok(VerificationReport {
        acc,
        acc_threshold,
        eer: eer_value,
        fdr: fdr_value,
        fmr100,
        fmr100_threshold: th100,
        fmr1000,
        fmr1000_threshold: th1000,
        at_fmr100: (rates100.0, rates100.1, (rates100.0 + rates100.1) / 2.0),
        at_fmr1000: (rates1000.0, rates1000.1, (rates1000.0 + rates1000.1) / 2.0),
        auc,
        roc,
        histogram,
        n_genuine: scores.n_genuine(),
        n_impostor: scores.n_impostor(),
    })
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// Writes `score,genuine` lines.
pub fn write_scores_csv(path: &std::path::Path, scores: &ScoreSet) -> Result<()> {
    let mut text = String::from("score,genuine\n");
    for (s, g) in &scores.scores {
        text.push_str(&format!("{},{}\n", s, if *g { 1 } else { 0 }));
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

/// Reads a `score,genuine` CSV (header optional).
pub fn read_scores_csv(path: &std::path::Path) -> Result<ScoreSet> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut scores = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with("score") {
            continue;
        }
        let bad = || CoreError::Config(format!("{}:{}: bad score line", path.display(), lineno + 1));
        let (s, g) = line.split_once(',').ok_or_else(bad)?;
        let score: f64 = s.trim().parse().map_err(|_| bad())?;
        let genuine = match g.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        };
        scores.push((score, genuine));
    }
    ScoreSet::new(scores)
}

/// Emits `report.csv` (`metric,value,threshold`), `roc.csv` (`fmr,tpr`) and
/// `histogram.csv` (`bin_low,bin_high,genuine_count,impostor_count`) into
/// `dir`.
pub fn write_report_files(dir: &std::path::Path, report: &VerificationReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut text = String::from("metric,value,threshold\n");
    text.push_str(&format!("acc,{},{}\n", report.acc, report.acc_threshold));
    text.push_str(&format!("eer,{},\n", report.eer));
    text.push_str(&format!("fdr,{},\n", report.fdr));
    text.push_str(&format!("fmr100,{},{}\n", report.fmr100, report.fmr100_threshold));
    text.push_str(&format!("fmr1000,{},{}\n", report.fmr1000, report.fmr1000_threshold));
    text.push_str(&format!("fmr_at_fmr100_th,{},{}\n", report.at_fmr100.0, report.fmr100_threshold));
    text.push_str(&format!("fnmr_at_fmr100_th,{},{}\n", report.at_fmr100.1, report.fmr100_threshold));
    text.push_str(&format!("avg_at_fmr100_th,{},{}\n", report.at_fmr100.2, report.fmr100_threshold));
    text.push_str(&format!("fmr_at_fmr1000_th,{},{}\n", report.at_fmr1000.0, report.fmr1000_threshold));
    text.push_str(&format!("fnmr_at_fmr1000_th,{},{}\n", report.at_fmr1000.1, report.fmr1000_threshold));
    text.push_str(&format!("avg_at_fmr1000_th,{},{}\n", report.at_fmr1000.2, report.fmr1000_threshold));
    text.push_str(&format!("auc,{},\n", report.auc));
    text.push_str(&format!("n_genuine,{},\n", report.n_genuine));
    text.push_str(&format!("n_impostor,{},\n", report.n_impostor));
    let p = dir.join("report.csv");
    std::fs::write(&p, text).map_err(|e| CoreError::io(&p, e))?;

    let mut roc = String::from("fmr,tpr\n");
    for (fmr, tpr) in &report.roc {
        roc.push_str(&format!("{fmr},{tpr}\n"));
    }
    let p = dir.join("roc.csv");
    std::fs::write(&p, roc).map_err(|e| CoreError::io(&p, e))?;

    let mut hist = String::from("bin_low,bin_high,genuine_count,impostor_count\n");
    for (lo, hi, g, i) in &report.histogram {
        hist.push_str(&format!("{lo},{hi},{g},{i}\n"));
    }
    let p = dir.join("histogram.csv");
    std::fs::write(&p, hist).map_err(|e| CoreError::io(&p, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pair construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Masked reference against masked probe.
    MrMp,
    /// Unmasked reference against masked probe.
    UmrMp,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::MrMp => "mr-mp",
            Protocol::UmrMp => "umr-mp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mr-mp" | "mrmp" | "mr_mp" => Ok(Protocol::MrMp),
            "umr-mp" | "umrmp" | "umr_mp" => Ok(Protocol::UmrMp),
            other => Err(CoreError::Config(format!("unknown protocol '{other}'"))),
        }
    }
}

/// One embedded item eligible for pairing.
#[derive(Debug, Clone)]
pub struct PairItem {
    pub identity: usize,
    pub view: usize,
    pub masked: bool,
    /// Index into the embedding matrix.
    pub row: usize,
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub reference: usize,
    pub probe: usize,
    pub genuine: bool,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub protocol: Protocol,
    pub seed: u64,
    pub pairs: Vec<Pair>,
}

/// Uniform sampling without replacement of genuine and impostor pairs
/// under the protocol's masking rules. Probes are always masked items;
/// references are masked under MR-MP and unmasked under UMR-MP. Genuine
/// pairs must differ in view so an item is never compared with itself.
pub fn build_pairs(
    items: &[PairItem],
    protocol: Protocol,
    n_genuine: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<PairSet> {
    let probes: Vec<&PairItem> = items.iter().filter(|i| i.masked).collect();
    let refs: Vec<&PairItem> = items
        .iter()
        .filter(|i| match protocol {
            Protocol::MrMp => i.masked,
            Protocol::UmrMp => !i.masked,
        })
        .collect();

    let mut genuine: Vec<Pair> = Vec::new();
    let mut impostor: Vec<Pair> = Vec::new();
    for r in &refs {
        for p in &probes {
            if r.row == p.row {
                continue;
            }
            if r.identity == p.identity {
                if r.view != p.view {
                    genuine.push(Pair {
                        reference: r.row,
                        probe: p.row,
                        genuine: true,
                    });
                }
            } else {
                impostor.push(Pair {
                    reference: r.row,
                    probe: p.row,
                    genuine: false,
                });
            }
        }
    }
    if genuine.len() < n_genuine {
        return Err(CoreError::InsufficientPairs {
            kind: "genuine",
            requested: n_genuine,
            available: genuine.len(),
        });
    }
    if impostor.len() < n_impostor {
        return Err(CoreError::InsufficientPairs {
            kind: "impostor",
            requested: n_impostor,
            available: impostor.len(),
        });
    }
    let mut rng = rng_for(seed, &[tag::EVAL, protocol as u64]);
    genuine.shuffle(&mut rng);
    impostor.shuffle(&mut rng);
    genuine.truncate(n_genuine);
    impostor.truncate(n_impostor);
    let mut pairs = genuine;
    pairs.append(&mut impostor);
    Ok(PairSet {
        protocol,
        seed,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_set() -> ScoreSet {
        ScoreSet::new(vec![
            (0.9, true),
            (0.8, true),
            (0.3, true),
            (0.7, false),
            (0.2, false),
            (0.1, false),
        ])
        .unwrap()
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let v = Tensor::new(vec![3], vec![0.3, -0.5, 0.8]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let a = Tensor::new(vec![2], vec![1.0, 0.0]);
        let b = Tensor::new(vec![2], vec![0.0, 2.0]);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_value() {
        let a = Tensor::new(vec![2], vec![1.0, 0.0]);
        let b = Tensor::new(vec![2], vec![1.0, 1.0]);
        assert!((cosine(&a, &b).unwrap() - 0.70710678).abs() <= 1e-8);
    }

    #[test]
    fn cosine_rejects_zero_embedding() {
        let a = Tensor::new(vec![2], vec![0.0, 0.0]);
        let b = Tensor::new(vec![2], vec![1.0, 1.0]);
        assert!(matches!(cosine(&a, &b), Err(CoreError::ZeroEmbedding)));
    }

    #[test]
    fn score_set_requires_both_classes() {
        assert!(ScoreSet::new(vec![(0.5, true)]).is_err());
        assert!(ScoreSet::new(vec![(0.5, false)]).is_err());
    }

    #[test]
    fn accuracy_hand_fixture() {
        // 5/6 is achieved both between 0.2 and 0.3 (threshold 0.25) and
        // between 0.7 and 0.8 (threshold 0.75); the contract returns the
        // lowest achieving threshold.
        let (acc, th) = accuracy_best_threshold(&hand_set());
        assert!((acc - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(th, 0.25);
        let (fmr, fnmr) = fmr_fnmr_at(&hand_set(), 0.75);
        assert!((1.0 - (fmr * 3.0 + fnmr * 3.0) / 6.0 - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_perfectly_separated_is_one() {
        let s = ScoreSet::new(vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)]).unwrap();
        let (acc, _) = accuracy_best_threshold(&s);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn accuracy_identical_distributions_is_half() {
        let s = ScoreSet::new(vec![(0.3, true), (0.7, true), (0.3, false), (0.7, false)]).unwrap();
        let (acc, _) = accuracy_best_threshold(&s);
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn fmr_fnmr_boundaries() {
        let s = hand_set();
        assert_eq!(fmr_fnmr_at(&s, -2.0), (1.0, 0.0));
        assert_eq!(fmr_fnmr_at(&s, 2.0), (0.0, 1.0));
        let (fmr, fnmr) = fmr_fnmr_at(&s, 0.75);
        assert_eq!(fmr, 0.0);
        assert!((fnmr - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eer_hand_fixture_is_one_third() {
        assert!((eer(&hand_set()) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eer_perfectly_separated_is_zero() {
        let s = ScoreSet::new(vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)]).unwrap();
        assert_eq!(eer(&s), 0.0);
    }

    #[test]
    fn eer_identical_distributions_is_half() {
        let s = ScoreSet::new(vec![(0.3, true), (0.7, true), (0.3, false), (0.7, false)]).unwrap();
        assert!((eer(&s) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fmr100_with_three_impostors_forces_zero_fmr() {
        let (fnmr, th) = fmr_n(&hand_set(), 0.01);
        assert!((fnmr - 1.0 / 3.0).abs() < 1e-12);
        let (fmr_at, _) = fmr_fnmr_at(&hand_set(), th);
        assert_eq!(fmr_at, 0.0);
    }

    #[test]
    fn fmr_n_perfect_and_inverted_separation() {
        let good = ScoreSet::new(vec![(0.9, true), (0.8, true), (0.2, false)]).unwrap();
        assert_eq!(fmr_n(&good, 0.01).0, 0.0);
        let bad = ScoreSet::new(vec![(0.1, true), (0.2, true), (0.8, false)]).unwrap();
        assert_eq!(fmr_n(&bad, 0.01).0, 1.0);
    }

    #[test]
    fn fdr_hand_fixture_is_eighteen() {
        let s = ScoreSet::new(vec![(0.9, true), (0.7, true), (0.3, false), (0.1, false)]).unwrap();
        assert!((fdr(&s).unwrap() - 18.0).abs() < 1e-12);
    }

    #[test]
    fn fdr_equal_distributions_is_zero() {
        let s = ScoreSet::new(vec![(0.3, true), (0.7, true), (0.3, false), (0.7, false)]).unwrap();
        assert_eq!(fdr(&s).unwrap(), 0.0);
    }

    #[test]
    fn fdr_rejects_two_constant_distributions() {
        let s = ScoreSet::new(vec![(0.9, true), (0.9, true), (0.1, false), (0.1, false)]).unwrap();
        assert!(matches!(fdr(&s), Err(CoreError::DegenerateFdr)));
    }

    #[test]
    fn fdr_invariant_under_affine_maps() {
        let s = hand_set();
        let base = fdr(&s).unwrap();
        for (a, b) in [(2.0, 0.3), (-0.5, 1.0), (10.0, -4.0)] {
            let mapped =
                ScoreSet::new(s.scores.iter().map(|&(v, g)| (a * v + b, g)).collect()).unwrap();
            assert!((fdr(&mapped).unwrap() - base).abs() <= 1e-10);
        }
    }

    #[test]
    fn report_fields_are_consistent() {
        let r = report(&hand_set(), 10).unwrap();
        assert_eq!(r.at_fmr100.2, (r.at_fmr100.0 + r.at_fmr100.1) / 2.0);
        assert_eq!(r.at_fmr1000.2, (r.at_fmr1000.0 + r.at_fmr1000.1) / 2.0);
        let total: usize = r.histogram.iter().map(|h| h.2 + h.3).sum();
        assert_eq!(total, 6);
        // ROC is monotone in both coordinates after sorting by FMR.
        for w in r.roc.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
        assert!(r.auc > 0.0 && r.auc <= 1.0);
    }

    fn items_fixture() -> Vec<PairItem> {
        // 4 identities x 6 views, masked and unmasked rows for each.
        let mut items = Vec::new();
        let mut row = 0;
        for id in 0..4 {
            for view in 0..6 {
                for masked in [true, false] {
                    items.push(PairItem {
                        identity: id,
                        view,
                        masked,
                        row,
                    });
                    row += 1;
                }
            }
        }
        items
    }

    #[test]
    fn build_pairs_counts_and_determinism() {
        let items = items_fixture();
        let ps = build_pairs(&items, Protocol::MrMp, 20, 30, 9).unwrap();
        assert_eq!(ps.pairs.iter().filter(|p| p.genuine).count(), 20);
        assert_eq!(ps.pairs.iter().filter(|p| !p.genuine).count(), 30);
        let ps2 = build_pairs(&items, Protocol::MrMp, 20, 30, 9).unwrap();
        for (a, b) in ps.pairs.iter().zip(ps2.pairs.iter()) {
            assert_eq!(
                (a.reference, a.probe, a.genuine),
                (b.reference, b.probe, b.genuine)
            );
        }
    }

    #[test]
    fn umr_references_are_unmasked_only() {
        let items = items_fixture();
        let ps = build_pairs(&items, Protocol::UmrMp, 15, 15, 3).unwrap();
        for p in &ps.pairs {
            let r = items.iter().find(|i| i.row == p.reference).unwrap();
            let q = items.iter().find(|i| i.row == p.probe).unwrap();
            assert!(!r.masked, "UMR-MP reference must be unmasked");
            assert!(q.masked, "probe must be masked");
            assert_eq!(p.genuine, r.identity == q.identity);
        }
    }

    #[test]
    fn build_pairs_rejects_excessive_requests() {
        let items = items_fixture();
        let err = build_pairs(&items, Protocol::MrMp, 10_000, 10, 1);
        assert!(matches!(
            err,
            Err(CoreError::InsufficientPairs {
                kind: "genuine",
                ..
            })
        ));
    }

    proptest! {
        #[test]
        fn fmr_monotone_fnmr_monotone(scores in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 4..200)) {
            let has_g = scores.iter().any(|(_, g)| *g);
            let has_i = scores.iter().any(|(_, g)| !*g);
            prop_assume!(has_g && has_i);
            let set = ScoreSet::new(scores).unwrap();
            let pts = sweep(&set);
            for w in pts.windows(2) {
                prop_assert!(w[1].fmr <= w[0].fmr);
                prop_assert!(w[1].fnmr >= w[0].fnmr);
            }
        }

        #[test]
        fn accuracy_never_below_constant_classifier(scores in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 4..200)) {
            let has_g = scores.iter().any(|(_, g)| *g);
            let has_i = scores.iter().any(|(_, g)| !*g);
            prop_assume!(has_g && has_i);
            let set = ScoreSet::new(scores).unwrap();
            let (acc, _) = accuracy_best_threshold(&set);
            let floor = set.n_genuine().max(set.n_impostor()) as f64
                / (set.n_genuine() + set.n_impostor()) as f64;
            prop_assert!(acc >= floor - 1e-12);
        }

        #[test]
        fn monotone_transform_leaves_rates_unchanged(
            scores in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 4..100)
        ) {
            let has_g = scores.iter().any(|(_, g)| *g);
            let has_i = scores.iter().any(|(_, g)| !*g);
            prop_assume!(has_g && has_i);
            let set = ScoreSet::new(scores.clone()).unwrap();
            // Strictly increasing map.
            let mapped = ScoreSet::new(
                scores.iter().map(|&(s, g)| (s.atan() + 0.5 * s, g)).collect(),
            ).unwrap();
            let (acc_a, _) = accuracy_best_threshold(&set);
            let (acc_b, _) = accuracy_best_threshold(&mapped);
            prop_assert!((acc_a - acc_b).abs() < 1e-12);
            prop_assert!((eer(&set) - eer(&mapped)).abs() < 1e-9);
            prop_assert!((fmr_n(&set, 0.01).0 - fmr_n(&mapped, 0.01).0).abs() < 1e-12);
            prop_assert!((fmr_n(&set, 0.001).0 - fmr_n(&mapped, 0.001).0).abs() < 1e-12);
        }

        #[test]
        fn eer_operating_point_gap_bounded_by_rate_step(
            scores in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 6..150)
        ) {
            let has_g = scores.iter().any(|(_, g)| *g);
            let has_i = scores.iter().any(|(_, g)| !*g);
            prop_assume!(has_g && has_i);
            let set = ScoreSet::new(scores).unwrap();
            let pts = sweep(&set);
            let best = pts
                .iter()
                .map(|p| (p.fmr - p.fnmr).abs())
                .fold(f64::INFINITY, f64::min);
            let step = (1.0 / set.n_genuine() as f64).max(1.0 / set.n_impostor() as f64);
            prop_assert!(best <= step + 1e-12);
        }
    }
}
