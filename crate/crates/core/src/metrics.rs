//! Event-based precision, recall and F1, and the polyphonic sound detection
//! score (PSDS) with every query-audio pair pooled into a single class.

use serde::{Deserialize, Serialize};

use crate::head::{EventSegment, SimilarityVector};
use crate::{Error, Result};

/// Slack in seconds on the collar comparisons, so that boundaries on a
/// hop grid which tie a tolerance exactly are not lost to rounding.
pub const TIME_SLACK: f64 = 1e-9;
/// Same for the intersection ratios compared against DTC and GTC.
pub const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub t_collar: f64,
    pub offset_ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            t_collar: 0.1,
            offset_ratio: 0.2,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_collar > 0.0 && self.offset_ratio > 0.0) {
            return Err(Error::Config(format!("match tolerances must be > 0: {self:?}")));
        }
        Ok(())
    }

    /// Whether `pred` matches `reference` under the onset collar and the
    /// duration-scaled offset tolerance.
    pub fn matches(&self, pred: &EventSegment, reference: &EventSegment) -> bool {
        let offset_tol = self.t_collar.max(self.offset_ratio * reference.duration());
        (pred.onset - reference.onset).abs() <= self.t_collar + TIME_SLACK
            && (pred.offset - reference.offset).abs() <= offset_tol + TIME_SLACK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdsConfig {
    pub dtc: f64,
    pub gtc: f64,
    /// Cross-trigger tolerance. Inert with a single pooled class.
    pub cttc: f64,
    pub alpha_ct: f64,
    pub alpha_st: f64,
    /// Upper false-positive rate bound, in false positives per hour.
    pub e_max: f64,
    pub num_thresholds: usize,
}

impl Default for PsdsConfig {
    fn default() -> Self {
        Self {
            dtc: 0.5,
            gtc: 0.5,
            cttc: 0.3,
            alpha_ct: 0.0,
            alpha_st: 0.0,
            e_max: 100.0,
            num_thresholds: 50,
        }
    }
}

impl PsdsConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.dtc) && unit(self.gtc) && unit(self.cttc)) || !(self.e_max > 0.0) || self.num_thresholds == 0 {
            return Err(Error::Config(format!("invalid PSDS configuration {self:?}")));
        }
        if self.alpha_ct != 0.0 || self.alpha_st != 0.0 {
            return Err(Error::Config(
                "non-zero cross-trigger or stability penalties need multiple classes".into(),
            ));
        }
        Ok(())
    }

    /// `k / (n + 1)` for `k = 1..=n`: evenly spaced, strictly inside (0, 1).
    pub fn thresholds(&self) -> Vec<f64> {
        let n = self.num_thresholds;
        (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for EventCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn sorted_disjoint(list: &[EventSegment], what: &str) -> Result<Vec<EventSegment>> {
    let mut v = list.to_vec();
    for s in &v {
        s.validate()?;
    }
    v.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    if let Some(w) = v.windows(2).find(|w| w[1].onset < w[0].offset) {
        return Err(Error::Input(format!(
            "{what} segments overlap: ({}, {}) and ({}, {})",
            w[0].onset, w[0].offset, w[1].onset, w[1].offset
        )));
    }
    Ok(v)
}

/// Greedy one-to-one matching: references in onset order each take the first
/// still-unmatched prediction (in onset order) that satisfies the tolerances.
pub fn match_events(predicted: &[EventSegment], reference: &[EventSegment], cfg: &MatchConfig) -> Result<EventCounts> {
    let preds = sorted_disjoint(predicted, "predicted")?;
    let refs = sorted_disjoint(reference, "reference")?;
    let mut used = vec![false; preds.len()];
    // Predictions starting before `onset − collar` of one reference are out of
    // reach of every later reference too.
    let mut lo = 0;
    let mut tp = 0;
    for r in &refs {
        while lo < preds.len() && preds[lo].onset < r.onset - cfg.t_collar - TIME_SLACK {
            lo += 1;
        }
        for j in lo..preds.len() {
            if preds[j].onset > r.onset + cfg.t_collar + TIME_SLACK {
                break;
            }
            if !used[j] && cfg.matches(&preds[j], r) {
                used[j] = true;
                tp += 1;
                break;
            }
        }
    }
    Ok(EventCounts {
        tp,
        fp: preds.len() - tp,
        fn_: refs.len() - tp,
    })
}

/// Precision, recall and F1 with every `0/0` taken as 0.
pub fn event_prf(c: EventCounts) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn overlap(a: &EventSegment, b: &EventSegment) -> f64 {
    (a.offset.min(b.offset) - a.onset.max(b.onset)).max(0.0)
}

/// Outcome of the intersection criteria for one pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionOutcome {
    /// Per prediction: passes the detection tolerance criterion.
    pub valid: Vec<bool>,
    /// Per reference: covered enough by valid predictions.
    pub detected: Vec<bool>,
}

impl IntersectionOutcome {
    pub fn false_positives(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    pub fn true_positives(&self) -> usize {
        self.detected.iter().filter(|v| **v).count()
    }
}

/// A prediction is valid when at least `dtc` of it lies on references; a
/// reference is detected when valid predictions cover at least `gtc` of it.
pub fn intersection_criteria(predicted: &[EventSegment], reference: &[EventSegment], dtc: f64, gtc: f64) -> IntersectionOutcome {
    let valid: Vec<bool> = predicted
        .iter()
        .map(|p| reference.iter().map(|r| overlap(p, r)).sum::<f64>() / p.duration() >= dtc - RATIO_SLACK)
        .collect();
    let detected = reference
        .iter()
        .map(|r| {
            let covered: f64 = predicted
                .iter()
                .zip(&valid)
                .filter(|(_, v)| **v)
                .map(|(p, _)| overlap(p, r))
                .sum();
            covered / r.duration() >= gtc - RATIO_SLACK
        })
        .collect();
    IntersectionOutcome { valid, detected }
}

/// One operating point of the PSD-ROC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// Detected references over all references.
    pub tpr: f64,
    /// False positives per hour.
    pub fpr: f64,
}

/// Operating points from per-threshold predictions, `predictions[k][pair]`.
pub fn psd_roc(
    thresholds: &[f64],
    predictions: &[Vec<Vec<EventSegment>>],
    references: &[Vec<EventSegment>],
    total_hours: f64,
    cfg: &PsdsConfig,
) -> Result<Vec<RocPoint>> {
    cfg.validate()?;
    let total_refs: usize = references.iter().map(Vec::len).sum();
    if total_refs == 0 {
        return Err(Error::Input("PSDS needs at least one reference event".into()));
    }
    if !(total_hours > 0.0) {
        return Err(Error::Input(format!("total audio duration must be > 0, got {total_hours} h")));
    }
    if thresholds.len() != predictions.len() {
        return Err(Error::Input(format!(
            "{} thresholds but {} prediction sets",
            thresholds.len(),
            predictions.len()
        )));
    }
    let refs: Vec<Vec<EventSegment>> = references
        .iter()
        .map(|r| sorted_disjoint(r, "reference"))
        .collect::<Result<_>>()?;
    thresholds
        .iter()
        .zip(predictions)
        .map(|(&threshold, per_pair)| {
            if per_pair.len() != refs.len() {
                return Err(Error::Input(format!(
                    "{} predicted pairs but {} reference pairs",
                    per_pair.len(),
                    refs.len()
                )));
            }
            let (mut detected, mut fp) = (0, 0);
            for (p, r) in per_pair.iter().zip(&refs) {
                let p = sorted_disjoint(p, "predicted")?;
                let o = intersection_criteria(&p, r, cfg.dtc, cfg.gtc);
                detected += o.true_positives();
                fp += o.false_positives();
            }
            Ok(RocPoint {
                threshold,
                tpr: detected as f64 / total_refs as f64,
                fpr: fp as f64 / total_hours,
            })
        })
        .collect()
}

/// Normalised area under the monotone envelope of the operating points over
/// `[0, e_max]`. The envelope at `x` is the best TPR among points with
/// `fpr ≤ x` (0 when there are none), integrated as a step function.
pub fn psds_area(points: &[RocPoint], e_max: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).filter(|p| p.0 < e_max).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut area = 0.0;
    let mut best = 0.0f64;
    let mut i = 0;
    while i < pts.len() {
        let x = pts[i].0;
        while i < pts.len() && pts[i].0 == x {
            best = best.max(pts[i].1);
            i += 1;
        }
        let next = if i < pts.len() { pts[i].0 } else { e_max };
        area += best * (next - x);
    }
    area / e_max
}

pub fn psds(
    thresholds: &[f64],
    predictions: &[Vec<Vec<EventSegment>>],
    references: &[Vec<EventSegment>],
    total_hours: f64,
    cfg: &PsdsConfig,
) -> Result<f64> {
    let roc = psd_roc(thresholds, predictions, references, total_hours, cfg)?;
    Ok(psds_area(&roc, cfg.e_max))
}

/// Scores and ground truth for one query-audio pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair_id: String,
    pub scores: SimilarityVector,
    pub references: Vec<EventSegment>,
    /// Audio duration in seconds.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "PSDS")]
    pub psds: f64,
    pub threshold: f64,
    pub counts: EventCounts,
    pub curve: Vec<RocPoint>,
}

/// Event metrics at threshold `beta` and PSDS over the configured grid.
pub fn evaluate(pairs: &[ScoredPair], beta: f64, mcfg: &MatchConfig, pcfg: &PsdsConfig) -> Result<MetricsReport> {
    mcfg.validate()?;
    let mut counts = EventCounts::default();
    for p in pairs {
        counts += match_events(&p.scores.segments(beta), &p.references, mcfg)?;
    }
    let (precision, recall, f1) = event_prf(counts);
    let thresholds = pcfg.thresholds();
    let predictions: Vec<Vec<Vec<EventSegment>>> = thresholds
        .iter()
        .map(|&t| pairs.iter().map(|p| p.scores.segments(t)).collect())
        .collect();
    let references: Vec<Vec<EventSegment>> = pairs.iter().map(|p| p.references.clone()).collect();
    let hours = pairs.iter().map(|p| p.duration).sum::<f64>() / 3600.0;
    let curve = psd_roc(&thresholds, &predictions, &references, hours, pcfg)?;
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        psds: psds_area(&curve, pcfg.e_max),
        threshold: beta,
        counts,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(a: f64, b: f64) -> EventSegment {
        EventSegment::new(a, b).unwrap()
    }

    #[test]
    fn match_examples() {
        let cfg = MatchConfig::default();
        let c = match_events(&[seg(0.05, 8.0)], &[seg(0.0, 8.59)], &cfg).unwrap();
        assert_eq!(c, EventCounts { tp: 1, fp: 0, fn_: 0 });
        let refs = [seg(0.0, 1.0), seg(2.0, 3.5), seg(4.0, 4.2)];
        assert_eq!(match_events(&refs, &refs, &cfg).unwrap(), EventCounts { tp: 3, fp: 0, fn_: 0 });
        assert_eq!(match_events(&[], &refs, &cfg).unwrap(), EventCounts { tp: 0, fp: 0, fn_: 3 });
        let overlapping = [seg(0.0, 1.0), seg(0.5, 2.0)];
        assert!(matches!(match_events(&overlapping, &refs, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn prf_examples() {
        assert_eq!(event_prf(EventCounts { tp: 1, fp: 0, fn_: 0 }), (1.0, 1.0, 1.0));
        assert_eq!(event_prf(EventCounts { tp: 0, fp: 3, fn_: 1 }), (0.0, 0.0, 0.0));
        assert_eq!(event_prf(EventCounts::default()), (0.0, 0.0, 0.0));
        assert_eq!(event_prf(EventCounts { tp: 2, fp: 2, fn_: 2 }), (0.5, 0.5, 0.5));
    }

    #[test]
    fn intersection_examples() {
        let r = [seg(1.0, 2.0)];
        let o = intersection_criteria(&r, &r, 0.5, 0.5);
        assert_eq!((o.valid, o.detected), (vec![true], vec![true]));
        let o = intersection_criteria(&[seg(3.0, 4.0)], &r, 0.5, 0.5);
        assert_eq!((o.valid, o.detected), (vec![false], vec![false]));
        let o = intersection_criteria(&[seg(1.5, 2.5)], &r, 0.5, 0.5);
        assert_eq!((o.valid, o.detected), (vec![true], vec![true]));
    }

    fn point(fpr: f64, tpr: f64) -> RocPoint {
        RocPoint { threshold: 0.5, tpr, fpr }
    }

    #[test]
    fn psds_examples() {
        let cfg = PsdsConfig::default();
        let refs = vec![vec![seg(1.0, 3.0)], vec![seg(0.5, 0.9), seg(2.0, 2.5)]];
        let th = cfg.thresholds();
        assert_eq!(th.len(), 50);
        assert!(th[0] > 0.0 && th[49] < 1.0);
        let perfect = vec![refs.clone(); th.len()];
        assert_eq!(psds(&th, &perfect, &refs, 0.01, &cfg).unwrap(), 1.0);
        let none = vec![vec![vec![], vec![]]; th.len()];
        assert_eq!(psds(&th, &none, &refs, 0.01, &cfg).unwrap(), 0.0);
        assert!(matches!(psds(&th, &none, &[vec![], vec![]], 0.01, &cfg), Err(Error::Input(_))));
        // two operating points: nothing at zero FPR, everything at e_max
        assert_eq!(psds_area(&[point(0.0, 0.0), point(100.0, 1.0)], 100.0), 0.0);
        assert!((psds_area(&[point(0.0, 0.5), point(50.0, 1.0)], 100.0) - 0.75).abs() < 1e-15);
        // dominated points do not lower the envelope
        assert!((psds_area(&[point(0.0, 0.5), point(20.0, 0.2), point(50.0, 1.0)], 100.0) - 0.75).abs() < 1e-15);
    }

    fn random_segments(rng: &mut ChaCha8Rng, n: usize) -> Vec<EventSegment> {
        let mut t = 0.0;
        let mut out = Vec::new();
        for _ in 0..n {
            // coarse grid so exact ties between tolerances occur
            t += f64::from(rng.random_range(0..4u8)) * 0.05;
            let len = f64::from(rng.random_range(1..12u8)) * 0.05;
            out.push(seg(t, t + len));
            t += len;
        }
        out
    }

    fn naive_match(pred: &[EventSegment], refs: &[EventSegment], cfg: &MatchConfig) -> EventCounts {
        let mut used = vec![false; pred.len()];
        let mut tp = 0;
        for r in refs {
            for (j, p) in pred.iter().enumerate() {
                let on = (p.onset - r.onset).abs() <= cfg.t_collar + TIME_SLACK;
                let off = (p.offset - r.offset).abs() <= f64::max(cfg.t_collar, cfg.offset_ratio * (r.offset - r.onset)) + TIME_SLACK;
                if !used[j] && on && off {
                    used[j] = true;
                    tp += 1;
                    break;
                }
            }
        }
        EventCounts {
            tp,
            fp: pred.len() - tp,
            fn_: refs.len() - tp,
        }
    }

    #[test]
    fn matching_agrees_with_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = MatchConfig::default();
        for _ in 0..300 {
            let (np, nr) = (rng.random_range(0..6), rng.random_range(0..6));
            let (p, r) = (random_segments(&mut rng, np), random_segments(&mut rng, nr));
            let c = match_events(&p, &r, &cfg).unwrap();
            assert_eq!(c, naive_match(&p, &r, &cfg));
            assert!(c.tp <= p.len().min(r.len()));
            assert_eq!(c.tp + c.fn_, r.len());
            assert_eq!(c.tp + c.fp, p.len());
        }
    }

    // Envelope evaluated on every elementary interval between breakpoints.
    fn naive_area(points: &[RocPoint], e_max: f64) -> f64 {
        let mut xs: Vec<f64> = points.iter().map(|p| p.fpr).filter(|&x| x < e_max).collect();
        xs.push(0.0);
        xs.push(e_max);
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let mut area = 0.0;
        for w in xs.windows(2) {
            let y = points
                .iter()
                .filter(|p| p.fpr <= w[0])
                .map(|p| p.tpr)
                .fold(0.0, f64::max);
            area += y * (w[1] - w[0]);
        }
        area / e_max
    }

    #[test]
    fn psds_agrees_with_naive_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = PsdsConfig {
            num_thresholds: 6,
            ..PsdsConfig::default()
        };
        for _ in 0..200 {
            let pairs = rng.random_range(1..4);
            let refs: Vec<Vec<EventSegment>> = (0..pairs)
                .map(|_| {
                    let n = rng.random_range(1..4);
                    random_segments(&mut rng, n)
                })
                .collect();
            let th = cfg.thresholds();
            let preds: Vec<Vec<Vec<EventSegment>>> = th
                .iter()
                .map(|_| {
                    (0..pairs)
                        .map(|_| {
                            let n = rng.random_range(0..4);
                            random_segments(&mut rng, n)
                        })
                        .collect()
                })
                .collect();
            let hours = rng.random_range(0.01..0.2);
            let roc = psd_roc(&th, &preds, &refs, hours, &cfg).unwrap();
            // independent tally of detected references and false positives
            let total: usize = refs.iter().map(Vec::len).sum();
            for (k, pt) in roc.iter().enumerate() {
                let (mut det, mut fp) = (0, 0);
                for (ps, rs) in preds[k].iter().zip(&refs) {
                    let mut ok = vec![false; ps.len()];
                    for (j, p) in ps.iter().enumerate() {
                        let mut inter = 0.0;
                        for r in rs {
                            let a = p.onset.max(r.onset);
                            let b = p.offset.min(r.offset);
                            if b > a {
                                inter += b - a;
                            }
                        }
                        ok[j] = inter / (p.offset - p.onset) >= cfg.dtc - RATIO_SLACK;
                        if !ok[j] {
                            fp += 1;
                        }
                    }
                    for r in rs {
                        let mut cov = 0.0;
                        for (j, p) in ps.iter().enumerate() {
                            let a = p.onset.max(r.onset);
                            let b = p.offset.min(r.offset);
                            if ok[j] && b > a {
                                cov += b - a;
                            }
                        }
                        if cov / (r.offset - r.onset) >= cfg.gtc - RATIO_SLACK {
                            det += 1;
                        }
                    }
                }
                assert!((pt.tpr - det as f64 / total as f64).abs() < 1e-12);
                assert!((pt.fpr - fp as f64 / hours).abs() < 1e-9);
            }
            let a = psds_area(&roc, cfg.e_max);
            assert!((a - naive_area(&roc, cfg.e_max)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn detecting_more_never_lowers_psds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PsdsConfig {
            num_thresholds: 4,
            ..PsdsConfig::default()
        };
        let th = cfg.thresholds();
        for _ in 0..100 {
            let refs = vec![random_segments(&mut rng, 4)];
            let mut preds: Vec<Vec<Vec<EventSegment>>> = th.iter().map(|_| vec![vec![]]).collect();
            for p in preds.iter_mut() {
                for r in &refs[0] {
                    if rng.random_bool(0.4) {
                        p[0].push(*r);
                    }
                }
            }
            let before = psds(&th, &preds, &refs, 0.05, &cfg).unwrap();
            let k = rng.random_range(0..th.len());
            let missing: Vec<EventSegment> = refs[0].iter().filter(|r| !preds[k][0].contains(r)).copied().collect();
            if let Some(r) = missing.first() {
                preds[k][0].push(*r);
                preds[k][0].sort_by(|a, b| a.onset.total_cmp(&b.onset));
            }
            assert!(psds(&th, &preds, &refs, 0.05, &cfg).unwrap() >= before);
        }
    }

    #[test]
    fn evaluate_reports_both_metrics() {
        let pair = ScoredPair {
            pair_id: "a".into(),
            scores: SimilarityVector {
                scores: vec![0.1, 0.9, 0.9, 0.1],
                hop_seconds: 0.5,
            },
            references: vec![seg(0.5, 1.5)],
            duration: 2.0,
        };
        let r = evaluate(&[pair], 0.4, &MatchConfig::default(), &PsdsConfig::default()).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.curve.len(), 50);
        assert!(r.psds > 0.99);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("PSDS").is_some() && json.get("F1").is_some());
    }
}
