//! Classification, calibration and fairness metrics over a set of
//! probabilistic predictions.
//!
//! Conventions used throughout:
//! * the predicted class is the argmax of the probability row, ties going to
//!   the lowest class index;
//! * calibration bins are equal-width on `[0, 1]`, bin `b` covering
//!   `(b / B, (b + 1) / B]` and the first bin also taking `0`;
//! * AUC uses a strict `>` between positive and negative scores unless
//!   [`AucTies::Half`] is requested.

mod io;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use io::{read_groups, read_predictions, write_predictions, write_reliability_diagram};

/// Allowed deviation of a probability row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Per-sample class probabilities with true labels and optional subgroup tags.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    classes: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
    groups: Option<Vec<Option<String>>>,
}

impl PredictionSet {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() {
            return Err(Error::input(format!(
                "{} probability rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let mut probs = Vec::with_capacity(rows.len() * classes);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::input(format!(
                    "sample {s}: {} probabilities, expected {classes}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::input(format!("sample {s}: probability outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::input(format!("sample {s}: probabilities sum to {sum}")));
            }
            if labels[s] >= classes {
                return Err(Error::input(format!(
                    "sample {s}: label {} not below {classes} classes",
                    labels[s]
                )));
            }
            probs.extend_from_slice(row);
        }
        Ok(Self {
            classes,
            probs,
            labels,
            groups: None,
        })
    }

    /// Attaches one optional subgroup tag per sample; `None` excludes the
    /// sample from subgroup breakdowns.
    pub fn with_groups(mut self, groups: Vec<Option<String>>) -> Result<Self> {
        if groups.len() != self.len() {
            return Err(Error::input(format!(
                "{} group tags for {} samples",
                groups.len(),
                self.len()
            )));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> Option<&[Option<String>]> {
        self.groups.as_deref()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.classes..(s + 1) * self.classes]
    }

    pub fn prob(&self, s: usize, c: usize) -> f64 {
        self.probs[s * self.classes + c]
    }

    /// Argmax class, lowest index on ties.
    pub fn predicted(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        best
    }

    /// Top-class probability.
    pub fn confidence(&self, s: usize) -> f64 {
        self.row(s)[self.predicted(s)]
    }

    pub fn is_correct(&self, s: usize) -> bool {
        self.predicted(s) == self.labels[s]
    }

    /// Samples at `indices`, in that order; group tags are dropped.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut probs = Vec::with_capacity(indices.len() * self.classes);
        let mut labels = Vec::with_capacity(indices.len());
        for &s in indices {
            probs.extend_from_slice(self.row(s));
            labels.push(self.labels[s]);
        }
        Self {
            classes: self.classes,
            probs,
            labels,
            groups: None,
        }
    }

    fn require_samples(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::input("prediction set is empty"));
        }
        Ok(())
    }
}

/// Equal-width calibration binning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalibrationConfig {
    pub bins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { bins: 15 }
    }
}

impl CalibrationConfig {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("calibration needs at least one bin"));
        }
        Ok(Self { bins })
    }

    /// Lower edge of bin `b`; bin `b` spans `(edge(b), edge(b + 1)]`.
    pub fn edge(&self, b: usize) -> f64 {
        b as f64 / self.bins as f64
    }

    /// Bin holding confidence `c`, consistent with [`Self::edge`].
    pub fn bin_of(&self, c: f64) -> usize {
        let last = self.bins - 1;
        let mut b = ((c * self.bins as f64).ceil() as isize - 1).clamp(0, last as isize) as usize;
        // c * B can round across an edge; settle against the edges themselves
        while b > 0 && c <= self.edge(b) {
            b -= 1;
        }
        while b < last && c > self.edge(b + 1) {
            b += 1;
        }
        b
    }
}

/// One row of a reliability diagram.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction of correct samples in the bin, 0 when empty.
    pub accuracy: f64,
    /// Mean confidence in the bin, 0 when empty.
    pub confidence: f64,
}

/// Bins `(confidence, correct)` pairs.
pub fn reliability_bins(
    samples: impl IntoIterator<Item = (f64, bool)>,
    cfg: CalibrationConfig,
) -> Vec<ReliabilityBin> {
    let mut counts = vec![0usize; cfg.bins];
    let mut hits = vec![0usize; cfg.bins];
    let mut conf = vec![0.0; cfg.bins];
    for (c, ok) in samples {
        let b = cfg.bin_of(c);
        counts[b] += 1;
        hits[b] += usize::from(ok);
        conf[b] += c;
    }
    (0..cfg.bins)
        .map(|b| {
            let n = counts[b];
            let (accuracy, confidence) = if n == 0 {
                (0.0, 0.0)
            } else {
                (hits[b] as f64 / n as f64, conf[b] / n as f64)
            };
            ReliabilityBin {
                lo: cfg.edge(b),
                hi: cfg.edge(b + 1),
                count: n,
                accuracy,
                confidence,
            }
        })
        .collect()
}

fn ece_from_bins(bins: &[ReliabilityBin]) -> f64 {
    let total: usize = bins.iter().map(|b| b.count).sum();
    if total == 0 {
        return 0.0;
    }
    bins.iter()
        .map(|b| b.count as f64 / total as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

/// Reliability diagram of top-class confidence.
pub fn reliability_diagram(ps: &PredictionSet, cfg: CalibrationConfig) -> Vec<ReliabilityBin> {
    reliability_bins(
        (0..ps.len()).map(|s| (ps.confidence(s), ps.is_correct(s))),
        cfg,
    )
}

pub fn accuracy(ps: &PredictionSet) -> Result<f64> {
    ps.require_samples()?;
    let correct = (0..ps.len()).filter(|&s| ps.is_correct(s)).count();
    Ok(correct as f64 / ps.len() as f64)
}

/// Rows: true class, columns: predicted class.
fn confusion(ps: &PredictionSet) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; ps.classes()]; ps.classes()];
    for s in 0..ps.len() {
        m[ps.labels[s]][ps.predicted(s)] += 1;
    }
    m
}

/// Mean recall over the classes present in the labels.
pub fn balanced_accuracy(ps: &PredictionSet) -> Result<f64> {
    ps.require_samples()?;
    let m = confusion(ps);
    let recalls: Vec<f64> = (0..ps.classes())
        .filter_map(|c| {
            let support: usize = m[c].iter().sum();
            (support > 0).then(|| m[c][c] as f64 / support as f64)
        })
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Unweighted mean F1 over the classes that occur as a label or a
/// prediction; a class with no true positives scores 0.
pub fn macro_f1(ps: &PredictionSet) -> Result<f64> {
    ps.require_samples()?;
    let m = confusion(ps);
    let mut scores = Vec::new();
    for c in 0..ps.classes() {
        let tp = m[c][c];
        let fn_ = m[c].iter().sum::<usize>() - tp;
        let fp = (0..ps.classes()).map(|r| m[r][c]).sum::<usize>() - tp;
        if tp + fn_ + fp == 0 {
            continue;
        }
        scores.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// How AUC scores a positive/negative pair with equal scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AucTies {
    /// Ties count 0.
    #[default]
    Strict,
    /// Ties count 1/2 (Mann-Whitney).
    Half,
}

/// One-vs-rest AUC of class `c` by exhaustive pair counting, or `None`
/// when the class has no positives or no negatives.
pub fn auc_class(ps: &PredictionSet, c: usize, ties: AucTies) -> Option<f64> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..ps.len()).partition(|&s| ps.labels[s] == c);
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let tie_credit = match ties {
        AucTies::Strict => 0.0,
        AucTies::Half => 0.5,
    };
    let mut score = 0.0;
    for &i in &pos {
        let pi = ps.prob(i, c);
        for &j in &neg {
            let pj = ps.prob(j, c);
            if pi > pj {
                score += 1.0;
            } else if pi == pj {
                score += tie_credit;
            }
        }
    }
    Some(score / (pos.len() * neg.len()) as f64)
}

/// Mean one-vs-rest AUC over the classes that have both positives and
/// negatives.
pub fn auc_ovr_with(ps: &PredictionSet, ties: AucTies) -> Result<f64> {
    let per_class: Vec<f64> = (0..ps.classes())
        .filter_map(|c| auc_class(ps, c, ties))
        .collect();
    if per_class.is_empty() {
        return Err(Error::input(
            "no class has both positive and negative samples",
        ));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

pub fn auc_ovr(ps: &PredictionSet) -> Result<f64> {
    auc_ovr_with(ps, AucTies::Strict)
}

/// Expected calibration error of the top-class confidence.
pub fn ece(ps: &PredictionSet, cfg: CalibrationConfig) -> f64 {
    ece_from_bins(&reliability_diagram(ps, cfg))
}

/// ECE of class `c`, using `p(., c)` as confidence and `label == c` as
/// the outcome.
pub fn class_ece(ps: &PredictionSet, c: usize, cfg: CalibrationConfig) -> f64 {
    ece_from_bins(&reliability_bins(
        (0..ps.len()).map(|s| (ps.prob(s, c), ps.labels[s] == c)),
        cfg,
    ))
}

/// Class-wise ECE averaged over all classes.
pub fn cece(ps: &PredictionSet, cfg: CalibrationConfig) -> f64 {
    if ps.classes() == 0 {
        return 0.0;
    }
    (0..ps.classes()).map(|c| class_ece(ps, c, cfg)).sum::<f64>() / ps.classes() as f64
}

/// Mean over samples of the squared distance to the one-hot label.
pub fn brier(ps: &PredictionSet) -> Result<f64> {
    ps.require_samples()?;
    let total: f64 = (0..ps.len())
        .map(|s| {
            ps.row(s)
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    let o = if ps.labels[s] == c { 1.0 } else { 0.0 };
                    (p - o) * (p - o)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / ps.len() as f64)
}

/// The full metric suite for one set of predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub samples: usize,
    pub acc: f64,
    pub bacc: f64,
    pub mf1: f64,
    /// `None` when no class has both positives and negatives.
    pub auc: Option<f64>,
    pub ece: f64,
    pub cece: f64,
    pub brier: f64,
}

pub fn evaluate(ps: &PredictionSet, cfg: CalibrationConfig) -> Result<MetricReport> {
    Ok(MetricReport {
        samples: ps.len(),
        acc: accuracy(ps)?,
        bacc: balanced_accuracy(ps)?,
        mf1: macro_f1(ps)?,
        auc: auc_ovr(ps).ok(),
        ece: ece(ps, cfg),
        cece: cece(ps, cfg),
        brier: brier(ps)?,
    })
}

/// How samples are split into subgroups.
#[derive(Clone, Debug, PartialEq)]
pub enum Grouping {
    /// The tags attached with [`PredictionSet::with_groups`].
    Tags,
    /// One tag per sample; `None` excludes the sample.
    Explicit(Vec<Option<String>>),
    /// Classes with fewer than `threshold` training samples form `tail`,
    /// the rest `head`. `class_counts[c]` is the training count of class `c`.
    HeadTail {
        class_counts: Vec<usize>,
        threshold: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgroupReport {
    pub name: String,
    pub samples: usize,
    /// `None` for an empty subgroup.
    pub report: Option<MetricReport>,
}

/// Evaluates the metric suite on each subgroup independently. Subgroups
/// come out sorted by name.
pub fn subgroup_report(
    ps: &PredictionSet,
    grouping: &Grouping,
    cfg: CalibrationConfig,
) -> Result<Vec<SubgroupReport>> {
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    match grouping {
        Grouping::Tags | Grouping::Explicit(_) => {
            let tags = match grouping {
                Grouping::Explicit(tags) => tags.as_slice(),
                _ => ps
                    .groups()
                    .ok_or_else(|| Error::input("prediction set carries no group tags"))?,
            };
            if tags.len() != ps.len() {
                return Err(Error::input(format!(
                    "{} group tags for {} samples",
                    tags.len(),
                    ps.len()
                )));
            }
            for (s, tag) in tags.iter().enumerate() {
                if let Some(t) = tag {
                    members.entry(t.clone()).or_default().push(s);
                }
            }
        }
        Grouping::HeadTail {
            class_counts,
            threshold,
        } => {
            if class_counts.len() != ps.classes() {
                return Err(Error::input(format!(
                    "{} class counts for {} classes",
                    class_counts.len(),
                    ps.classes()
                )));
            }
            members.insert("head".into(), Vec::new());
            members.insert("tail".into(), Vec::new());
            for s in 0..ps.len() {
                let side = if class_counts[ps.labels[s]] < *threshold {
                    "tail"
                } else {
                    "head"
                };
                members.get_mut(side).expect("inserted").push(s);
            }
        }
    }
    members
        .into_iter()
        .map(|(name, idx)| {
            let report = if idx.is_empty() {
                None
            } else {
                Some(evaluate(&ps.subset(&idx), cfg)?)
            };
            Ok(SubgroupReport {
                name,
                samples: idx.len(),
                report,
            })
        })
        .collect()
}

/// Per-class label counts.
pub fn class_counts(ps: &PredictionSet) -> Vec<usize> {
    let mut counts = vec![0; ps.classes()];
    for &l in ps.labels() {
        counts[l] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &[usize], classes: usize) -> PredictionSet {
        let rows = labels
            .iter()
            .map(|&l| (0..classes).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        PredictionSet::new(rows, labels.to_vec()).unwrap()
    }

    fn binary(p1: &[f64], labels: &[usize]) -> PredictionSet {
        PredictionSet::new(p1.iter().map(|&p| vec![1.0 - p, p]).collect(), labels.to_vec()).unwrap()
    }

    #[test]
    fn rejects_malformed_rows() {
        assert!(PredictionSet::new(vec![vec![0.5, 0.4]], vec![0]).is_err());
        assert!(PredictionSet::new(vec![vec![1.2, -0.2]], vec![0]).is_err());
        assert!(PredictionSet::new(vec![vec![0.5, 0.5]], vec![2]).is_err());
        assert!(PredictionSet::new(vec![vec![0.5, 0.5], vec![1.0]], vec![0, 0]).is_err());
    }

    #[test]
    fn perfect_predictions() {
        let ps = onehot(&[0, 1, 2, 1, 0], 3);
        let cfg = CalibrationConfig::default();
        let r = evaluate(&ps, cfg).unwrap();
        assert_eq!((r.acc, r.bacc, r.mf1), (1.0, 1.0, 1.0));
        assert_eq!(r.auc, Some(1.0));
        assert_eq!((r.ece, r.cece, r.brier), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_confusion_matrix() {
        let ps = binary(&[0.2, 0.7, 0.9, 0.6], &[0, 0, 1, 1]);
        assert_eq!(accuracy(&ps).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&ps).unwrap(), 0.75);
        assert!((macro_f1(&ps).unwrap() - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_balanced_accuracy() {
        let ps = onehot(&[1, 1, 1], 3);
        assert_eq!(balanced_accuracy(&ps).unwrap(), 1.0);
    }

    #[test]
    fn empty_set_is_input_error() {
        let ps = PredictionSet::new(vec![], vec![]).unwrap();
        assert!(matches!(accuracy(&ps), Err(Error::Input(_))));
        assert!(matches!(brier(&ps), Err(Error::Input(_))));
        assert!(auc_ovr(&ps).is_err());
    }

    #[test]
    fn auc_pair_enumeration() {
        let ps = binary(&[0.9, 0.4, 0.5, 0.1], &[1, 1, 0, 0]);
        assert_eq!(auc_class(&ps, 1, AucTies::Strict), Some(0.75));
        assert_eq!(auc_ovr(&ps).unwrap(), 0.75);
    }

    #[test]
    fn auc_ties() {
        let ps = binary(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]);
        assert_eq!(auc_ovr(&ps).unwrap(), 0.0);
        assert_eq!(auc_ovr_with(&ps, AucTies::Half).unwrap(), 0.5);
    }

    #[test]
    fn auc_needs_both_sides() {
        let ps = binary(&[0.9, 0.8], &[1, 1]);
        assert!(matches!(auc_ovr(&ps), Err(Error::Input(_))));
    }

    #[test]
    fn ece_fixture() {
        // top-class confidences 0.6, 0.7, 0.9, 0.95; second sample wrong
        let ps = binary(&[0.6, 0.3, 0.9, 0.95], &[1, 1, 1, 1]);
        let cfg = CalibrationConfig::new(4).unwrap();
        assert!((ece(&ps, cfg) - 0.1125).abs() < 1e-15);
    }

    #[test]
    fn ece_single_sample() {
        let ps = binary(&[0.8], &[1]);
        assert!((ece(&ps, CalibrationConfig::default()) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn bin_edges_are_right_closed() {
        let cfg = CalibrationConfig::new(10).unwrap();
        assert_eq!(cfg.bin_of(0.0), 0);
        assert_eq!(cfg.bin_of(0.1), 0);
        assert_eq!(cfg.bin_of(0.7), 6);
        assert_eq!(cfg.bin_of(0.70000001), 7);
        assert_eq!(cfg.bin_of(1.0), 9);
        let four = CalibrationConfig::new(4).unwrap();
        assert_eq!(four.bin_of(0.75), 2);
    }

    #[test]
    fn cece_symmetric_binary() {
        let ps = binary(&[0.3, 0.85, 0.55, 0.1], &[0, 1, 0, 1]);
        let cfg = CalibrationConfig::new(5).unwrap();
        let e0 = class_ece(&ps, 0, cfg);
        let e1 = class_ece(&ps, 1, cfg);
        // p(., 0) = 1 - p(., 1) mirrors bins only when no value sits on an edge
        assert!((e0 - e1).abs() < 1e-12);
        assert!((cece(&ps, cfg) - e0).abs() < 1e-12);
    }

    #[test]
    fn brier_fixture() {
        let ps = PredictionSet::new(vec![vec![0.8, 0.2], vec![0.3, 0.7]], vec![0, 1]).unwrap();
        assert!((brier(&ps).unwrap() - 0.13).abs() < 1e-15);
    }

    #[test]
    fn brier_uniform_binary() {
        let ps = PredictionSet::new(vec![vec![0.5, 0.5]; 3], vec![0, 1, 1]).unwrap();
        assert_eq!(brier(&ps).unwrap(), 0.5);
    }

    #[test]
    fn single_subgroup_matches_global() {
        let ps = binary(&[0.2, 0.7, 0.9, 0.6, 0.45], &[0, 0, 1, 1, 1]);
        let cfg = CalibrationConfig::default();
        let tags = vec![Some("all".to_string()); 5];
        let subs = subgroup_report(&ps, &Grouping::Explicit(tags), cfg).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].report.as_ref().unwrap(), &evaluate(&ps, cfg).unwrap());
    }

    #[test]
    fn head_tail_split() {
        let ps = onehot(&[0, 0, 1, 2, 2, 2], 3);
        let g = Grouping::HeadTail {
            class_counts: vec![50, 5, 19],
            threshold: 20,
        };
        let subs = subgroup_report(&ps, &g, CalibrationConfig::default()).unwrap();
        assert_eq!(subs[0].name, "head");
        assert_eq!(subs[0].samples, 2);
        assert_eq!(subs[1].name, "tail");
        assert_eq!(subs[1].samples, 4);
    }

    #[test]
    fn empty_subgroup_is_flagged() {
        let ps = onehot(&[0, 0], 2);
        let g = Grouping::HeadTail {
            class_counts: vec![100, 1],
            threshold: 20,
        };
        let subs = subgroup_report(&ps, &g, CalibrationConfig::default()).unwrap();
        assert_eq!(subs[1].name, "tail");
        assert!(subs[1].report.is_none());
    }

    #[test]
    fn excluded_samples_are_dropped() {
        let ps = onehot(&[0, 1, 1], 2)
            .with_groups(vec![Some("a".into()), None, Some("b".into())])
            .unwrap();
        let subs = subgroup_report(&ps, &Grouping::Tags, CalibrationConfig::default()).unwrap();
        assert_eq!(subs.iter().map(|s| s.samples).sum::<usize>(), 2);
    }
}
