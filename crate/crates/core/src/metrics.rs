//! Challenge scoring: macro-F1 for the binary task, support-weighted F1 for
//! the sub-class task, and per-label confusion counts.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, LabelSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Gold-positive count.
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Counts with the roles of the two classes swapped.
    pub fn flipped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// `2tp / (2tp + fp + fn)`, or 0 when nothing was predicted or expected.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

pub fn confusion_binary(preds: &[bool], gold: &[bool]) -> Result<ConfusionCounts> {
    if preds.len() != gold.len() {
        return Err(Error::shape("confusion", format!("preds[{}]", preds.len()), format!("labels[{}]", gold.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in preds.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn confusion(preds: &[LabelSet], gold: &[LabelSet], label: Label) -> Result<ConfusionCounts> {
    let p: Vec<bool> = preds.iter().map(|s| s.get(label)).collect();
    let g: Vec<bool> = gold.iter().map(|s| s.get(label)).collect();
    confusion_binary(&p, &g)
}

/// Mean of the F1 with "misogynous" as the positive class and the F1 with
/// "not misogynous" as the positive class.
pub fn task_a_macro_f1(preds: &[bool], gold: &[bool]) -> Result<f64> {
    let c = confusion_binary(preds, gold)?;
    Ok((f1(&c) + f1(&c.flipped())) / 2.0)
}

/// Which labels the sub-class score averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TaskBLabels {
    /// The four sub-classes only.
    #[default]
    #[serde(rename = "4")]
    Four,
    /// The four sub-classes plus the misogynous label.
    #[serde(rename = "5")]
    Five,
}

impl TaskBLabels {
    pub fn labels(self) -> &'static [Label] {
        match self {
            TaskBLabels::Four => &Label::SUBCLASSES,
            TaskBLabels::Five => &Label::ALL,
        }
    }
}

impl FromStr for TaskBLabels {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(TaskBLabels::Four),
            "5" => Ok(TaskBLabels::Five),
            other => Err(Error::Config(format!("task-B label set must be 4 or 5, got {other:?}"))),
        }
    }
}

/// `Σ_l (support_l / Σ support) · F1_l` over the chosen label set, with
/// supports counted on the gold labels.
pub fn task_b_weighted_f1(preds: &[LabelSet], gold: &[LabelSet], set: TaskBLabels) -> Result<f64> {
    let counts = set
        .labels()
        .iter()
        .map(|&l| confusion(preds, gold, l))
        .collect::<Result<Vec<_>>>()?;
    weighted_f1(&counts)
}

fn weighted_f1(counts: &[ConfusionCounts]) -> Result<f64> {
    let total: u64 = counts.iter().map(ConfusionCounts::support).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "weighted F1 needs at least one gold-positive label".into(),
        ));
    }
    Ok(counts
        .iter()
        .map(|c| c.support() as f64 / total as f64 * f1(c))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: Label,
    pub counts: ConfusionCounts,
    pub f1: f64,
}

impl LabelScore {
    pub fn support(&self) -> u64 {
        self.counts.support()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub task_a_macro_f1: f64,
    pub task_b_weighted_f1: f64,
    pub task_b_labels: TaskBLabels,
    /// One entry per label in canonical order.
    pub per_label: Vec<LabelScore>,
}

pub fn evaluate(preds: &[LabelSet], gold: &[LabelSet], set: TaskBLabels) -> Result<MetricsReport> {
    let per_label = Label::ALL
        .iter()
        .map(|&l| {
            let counts = confusion(preds, gold, l)?;
            Ok(LabelScore {
                label: l,
                counts,
                f1: f1(&counts),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mis = per_label[Label::Misogynous.index()].counts;
    let task_b: Vec<ConfusionCounts> = set.labels().iter().map(|l| per_label[l.index()].counts).collect();
    Ok(MetricsReport {
        n_samples: gold.len(),
        task_a_macro_f1: (f1(&mis) + f1(&mis.flipped())) / 2.0,
        task_b_weighted_f1: weighted_f1(&task_b)?,
        task_b_labels: set,
        per_label,
    })
}

impl MetricsReport {
    /// Tab-separated per-label table (label, support, tp, fp, fn, tn, f1)
    /// followed by the summary scores. Floats use shortest round-trip
    /// formatting so the file reproduces the in-memory values exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::from("label\tsupport\ttp\tfp\tfn\ttn\tf1\n");
        for r in &self.per_label {
            let c = r.counts;
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}\t{}", r.label, r.support(), c.tp, c.fp, c.fn_, c.tn, r.f1);
        }
        let labels = match self.task_b_labels {
            TaskBLabels::Four => 4,
            TaskBLabels::Five => 5,
        };
        let _ = writeln!(s, "#samples\t{}", self.n_samples);
        let _ = writeln!(s, "#task_a_macro_f1\t{}", self.task_a_macro_f1);
        let _ = writeln!(s, "#task_b_weighted_f1\t{}", self.task_b_weighted_f1);
        let _ = writeln!(s, "#task_b_labels\t{labels}");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cc(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn f1_values() {
        assert!((f1(&cc(3, 1, 2, 0)) - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(f1(&cc(5, 0, 0, 7)), 1.0);
        assert_eq!(f1(&cc(0, 0, 0, 9)), 0.0);
    }

    #[test]
    fn task_a_cases() {
        let gold: Vec<bool> = (0..1000).map(|i| i < 500).collect();
        assert_eq!(task_a_macro_f1(&gold, &gold).unwrap(), 1.0);
        let all_pos = vec![true; 1000];
        assert!((task_a_macro_f1(&all_pos, &gold).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let inverted: Vec<bool> = gold.iter().map(|g| !g).collect();
        assert_eq!(task_a_macro_f1(&inverted, &gold).unwrap(), 0.0);
        assert!(matches!(task_a_macro_f1(&gold[..3], &gold), Err(Error::Shape { .. })));
    }

    fn with(label: Label, n: usize) -> Vec<LabelSet> {
        (0..n)
            .map(|_| {
                let mut s = LabelSet::EMPTY;
                s.set(Label::Misogynous, true);
                s.set(label, true);
                s
            })
            .collect()
    }

    #[test]
    fn task_b_test_split_supports() {
        // gold supports (146, 350, 348, 153); only shaming predicted right
        let mut gold = Vec::new();
        for (l, n) in Label::SUBCLASSES.iter().zip([146, 350, 348, 153]) {
            gold.extend(with(*l, n));
        }
        let preds: Vec<LabelSet> = gold
            .iter()
            .map(|g| {
                let mut p = LabelSet::EMPTY;
                p.set(Label::Shaming, g.get(Label::Shaming));
                p
            })
            .collect();
        let w = task_b_weighted_f1(&preds, &gold, TaskBLabels::Four).unwrap();
        assert!((w - 146.0 / 997.0).abs() < 1e-15);
        assert!((w - 0.1464).abs() < 1e-4);
        assert_eq!(task_b_weighted_f1(&gold, &gold, TaskBLabels::Four).unwrap(), 1.0);
    }

    #[test]
    fn task_b_needs_support() {
        let gold = vec![LabelSet::EMPTY; 4];
        assert!(matches!(
            task_b_weighted_f1(&gold, &gold, TaskBLabels::Four),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn confusion_cases() {
        let gold = with(Label::Violence, 3);
        assert_eq!(confusion(&gold, &gold, Label::Violence).unwrap(), cc(3, 0, 0, 0));
        let ones = vec![LabelSet::from_byte(0b11111).unwrap(); 10];
        let zeros = vec![LabelSet::EMPTY; 10];
        assert_eq!(confusion(&ones, &zeros, Label::Shaming).unwrap(), cc(0, 10, 0, 0));
    }

    #[test]
    fn five_label_set_includes_misogynous() {
        let gold = vec![
            LabelSet::from_bools([true, true, false, false, false]),
            LabelSet::from_bools([true, false, false, false, false]),
        ];
        let preds = vec![LabelSet::from_bools([true, false, false, false, false]); 2];
        // four labels: only shaming has support and it is missed
        assert_eq!(task_b_weighted_f1(&preds, &gold, TaskBLabels::Four).unwrap(), 0.0);
        // five labels: misogynous (support 2, F1 1) and shaming (support 1, F1 0)
        let w5 = task_b_weighted_f1(&preds, &gold, TaskBLabels::Five).unwrap();
        assert!((w5 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_text_round_trips_scores() {
        let gold = vec![
            LabelSet::from_bools([true, true, false, true, false]),
            LabelSet::from_bools([false; 5]),
            LabelSet::from_bools([true, false, true, false, false]),
        ];
        let preds = vec![
            LabelSet::from_bools([true, false, false, true, false]),
            LabelSet::from_bools([true, false, false, false, false]),
            LabelSet::from_bools([true, false, true, false, true]),
        ];
        let r = evaluate(&preds, &gold, TaskBLabels::Four).unwrap();
        let text = r.to_text();
        let lookup = |key: &str| -> f64 {
            text.lines()
                .find_map(|l| l.strip_prefix(key))
                .unwrap()
                .trim()
                .parse()
                .unwrap()
        };
        assert_eq!(lookup("#task_a_macro_f1\t"), r.task_a_macro_f1);
        assert_eq!(lookup("#task_b_weighted_f1\t"), r.task_b_weighted_f1);
        assert_eq!(text.lines().count(), 1 + 5 + 4);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn label_sets(n: usize) -> impl Strategy<Value = Vec<LabelSet>> {
            proptest::collection::vec(0u8..32, n).prop_map(|v| v.into_iter().map(|b| LabelSet::from_byte(b).unwrap()).collect())
        }

        proptest! {
            #[test]
            fn scores_bounded_and_permutation_invariant(
                (preds, gold, perm) in (1usize..60).prop_flat_map(|n| (label_sets(n), label_sets(n), Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
            ) {
                let r = evaluate(&preds, &gold, TaskBLabels::Four);
                let pp: Vec<_> = perm.iter().map(|&i| preds[i]).collect();
                let gp: Vec<_> = perm.iter().map(|&i| gold[i]).collect();
                let rp = evaluate(&pp, &gp, TaskBLabels::Four);
                match (r, rp) {
                    (Ok(a), Ok(b)) => {
                        prop_assert_eq!(&a, &b);
                        prop_assert!((0.0..=1.0).contains(&a.task_a_macro_f1));
                        prop_assert!((0.0..=1.0).contains(&a.task_b_weighted_f1));
                        let f1s: Vec<f64> = Label::SUBCLASSES
                            .iter()
                            .map(|l| a.per_label[l.index()])
                            .filter(|s| s.support() > 0)
                            .map(|s| s.f1)
                            .collect();
                        let lo = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = f1s.iter().cloned().fold(0.0, f64::max);
                        prop_assert!(a.task_b_weighted_f1 >= lo - 1e-12 && a.task_b_weighted_f1 <= hi + 1e-12);
                        for s in &a.per_label {
                            prop_assert_eq!(s.counts.total(), preds.len() as u64);
                        }
                    }
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "permutation changed definedness"),
                }
            }
        }
    }
}
