//! Patch-level binary evaluation.
//!
//! Ratios with a zero denominator are reported as `None` and skipped when
//! averaging over slides.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::LabelTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion_matrix(predicted: &LabelTable, truth: &LabelTable) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidData(format!(
            "mismatched patch_id sets: {} predicted vs {} truth entries",
            predicted.len(),
            truth.len()
        )));
    }
    let truth_by_id: HashMap<&str, u8> = truth
        .entries
        .iter()
        .map(|e| (e.patch_id.as_str(), e.label))
        .collect();
    let mut cm = ConfusionMatrix::default();
    for e in &predicted.entries {
        let t = *truth_by_id.get(e.patch_id.as_str()).ok_or_else(|| {
            Error::InvalidData(format!(
                "mismatched patch_id sets: {:?} has no ground truth",
                e.patch_id
            ))
        })?;
        match (e.label, t) {
            (1, 1) => cm.tp += 1,
            (1, _) => cm.fp += 1,
            (_, 1) => cm.fn_ += 1,
            _ => cm.tn += 1,
        }
    }
    Ok(cm)
}

pub const METRIC_NAMES: [&str; 8] = ["dice", "iou", "f1", "ppv", "npv", "tpr", "tnr", "accuracy"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub accuracy: Option<f64>,
}

impl MetricValues {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "dice" => self.dice,
            "iou" => self.iou,
            "f1" => self.f1,
            "ppv" => self.ppv,
            "npv" => self.npv,
            "tpr" => self.tpr,
            "tnr" => self.tnr,
            "accuracy" => self.accuracy,
            _ => None,
        }
    }

    fn slot(&mut self, name: &str) -> &mut Option<f64> {
        match name {
            "dice" => &mut self.dice,
            "iou" => &mut self.iou,
            "f1" => &mut self.f1,
            "ppv" => &mut self.ppv,
            "npv" => &mut self.npv,
            "tpr" => &mut self.tpr,
            "tnr" => &mut self.tnr,
            "accuracy" => &mut self.accuracy,
            _ => unreachable!("unknown metric {name}"),
        }
    }

    pub fn undefined(&self) -> Vec<&'static str> {
        METRIC_NAMES
            .iter()
            .copied()
            .filter(|n| self.get(n).is_none())
            .collect()
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> MetricValues {
    let dice = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_);
    MetricValues {
        dice,
        iou: ratio(cm.tp, cm.tp + cm.fp + cm.fn_),
        // patch-level binary F1 is the Dice coefficient
        f1: dice,
        ppv: ratio(cm.tp, cm.tp + cm.fp),
        npv: ratio(cm.tn, cm.tn + cm.fn_),
        tpr: ratio(cm.tp, cm.tp + cm.fn_),
        tnr: ratio(cm.tn, cm.tn + cm.fp),
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Unweighted mean of per-slide metrics.
    Macro,
    /// Metrics of the pooled confusion matrix.
    Micro,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregation: Aggregation,
    #[serde(flatten)]
    pub values: MetricValues,
    pub per_slide: BTreeMap<String, MetricValues>,
    pub undefined_flags: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn aggregate_reports(
    per_slide: &[(String, ConfusionMatrix)],
    mode: Aggregation,
) -> Result<MetricReport> {
    if per_slide.is_empty() {
        return Err(Error::InvalidData("no slides to aggregate".into()));
    }
    let slide_values: BTreeMap<String, MetricValues> = per_slide
        .iter()
        .map(|(id, cm)| (id.clone(), compute_metrics(cm)))
        .collect();
    if slide_values.len() != per_slide.len() {
        return Err(Error::InvalidData("duplicate slide ids in report".into()));
    }
    let values = match mode {
        Aggregation::Micro => {
            let pooled = per_slide
                .iter()
                .fold(ConfusionMatrix::default(), |acc, (_, cm)| acc + *cm);
            compute_metrics(&pooled)
        }
        Aggregation::Macro => {
            let mut out = MetricValues::default();
            for name in METRIC_NAMES {
                let defined: Vec<f64> = per_slide
                    .iter()
                    .filter_map(|(id, _)| slide_values[id].get(name))
                    .collect();
                if !defined.is_empty() {
                    *out.slot(name) = Some(defined.iter().sum::<f64>() / defined.len() as f64);
                }
            }
            out
        }
    };
    let mut undefined_flags: Vec<String> = slide_values
        .iter()
        .flat_map(|(id, v)| v.undefined().into_iter().map(move |n| format!("{id}:{n}")))
        .collect();
    undefined_flags.extend(values.undefined().into_iter().map(str::to_string));
    Ok(MetricReport {
        aggregation: mode,
        values,
        per_slide: slide_values,
        undefined_flags,
    })
}

/// Per-seed aggregate metrics with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub aggregation: Aggregation,
    pub per_seed: BTreeMap<u64, MetricValues>,
    pub mean: MetricValues,
    /// Undefined for fewer than two seeds.
    pub sd: MetricValues,
}

impl SeedSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }
}

/// Mean ± sd over seeds, per metric, skipping seeds where the metric is undefined.
pub fn summarize_seeds(reports: &[(u64, MetricReport)]) -> Result<SeedSummary> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::InvalidData("no seeds to summarize".into()));
    };
    if reports
        .iter()
        .any(|(_, r)| r.aggregation != first.aggregation)
    {
        return Err(Error::InvalidData("reports mix aggregation modes".into()));
    }
    let per_seed: BTreeMap<u64, MetricValues> =
        reports.iter().map(|(s, r)| (*s, r.values)).collect();
    if per_seed.len() != reports.len() {
        return Err(Error::InvalidData("duplicate seeds".into()));
    }
    let mut mean = MetricValues::default();
    let mut sd = MetricValues::default();
    for name in METRIC_NAMES {
        let xs: Vec<f64> = reports
            .iter()
            .filter_map(|(_, r)| r.values.get(name))
            .collect();
        if xs.is_empty() {
            continue;
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        *mean.slot(name) = Some(m);
        if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            *sd.slot(name) = Some(var.sqrt());
        }
    }
    Ok(SeedSummary {
        aggregation: first.aggregation,
        per_seed,
        mean,
        sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelEntry;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cm(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    fn table(labels: &[u8]) -> LabelTable {
        LabelTable::new(
            "s",
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| LabelEntry {
                    patch_id: format!("p{i}"),
                    label: l,
                    score: f32::from(l),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn confusion_of_identical_and_complementary_tables() {
        let mut truth = vec![1u8; 10];
        truth.extend(vec![0u8; 90]);
        let t = table(&truth);
        assert_eq!(confusion_matrix(&t, &t).unwrap(), cm(10, 0, 0, 90));
        let comp: Vec<u8> = truth.iter().map(|l| 1 - l).collect();
        let c = confusion_matrix(&table(&comp), &t).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn mismatched_ids_rejected() {
        let a = table(&[1, 0]);
        let mut b = table(&[1, 0]);
        b.entries[1].patch_id = "other".into();
        assert!(confusion_matrix(&a, &b).is_err());
        assert!(confusion_matrix(&a, &table(&[1])).is_err());
    }

    #[test]
    fn confusion_ignores_row_order() {
        let pred = table(&[1, 0, 1, 1, 0]);
        let truth = table(&[1, 1, 0, 1, 0]);
        let mut shuffled = pred.clone();
        shuffled.entries.reverse();
        assert_eq!(
            confusion_matrix(&pred, &truth).unwrap(),
            confusion_matrix(&shuffled, &truth).unwrap()
        );
    }

    #[test]
    fn worked_example() {
        let m = compute_metrics(&cm(2, 1, 1, 6));
        assert_abs_diff_eq!(m.dice.unwrap(), 0.666667, epsilon = 5e-7);
        assert_abs_diff_eq!(m.iou.unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.ppv.unwrap(), 0.666667, epsilon = 5e-7);
        assert_abs_diff_eq!(m.npv.unwrap(), 0.857143, epsilon = 5e-7);
        assert_abs_diff_eq!(m.tpr.unwrap(), 0.666667, epsilon = 5e-7);
        assert_abs_diff_eq!(m.tnr.unwrap(), 0.857143, epsilon = 5e-7);
        assert_abs_diff_eq!(m.accuracy.unwrap(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = compute_metrics(&cm(3, 0, 0, 4));
        for n in METRIC_NAMES {
            assert_eq!(m.get(n), Some(1.0), "{n}");
        }
        let m = compute_metrics(&cm(0, 0, 0, 5));
        assert_eq!(m.undefined(), vec!["dice", "iou", "f1", "ppv", "tpr"]);
        assert_eq!(m.tnr, Some(1.0));
        assert_eq!(m.accuracy, Some(1.0));
    }

    #[test]
    fn macro_and_micro_examples() {
        let slides = vec![
            ("a".to_string(), cm(1, 0, 1, 8)),
            ("b".to_string(), cm(8, 1, 0, 1)),
        ];
        let micro = aggregate_reports(&slides, Aggregation::Micro).unwrap();
        assert_abs_diff_eq!(micro.values.dice.unwrap(), 0.9, epsilon = 1e-15);
        let mac = aggregate_reports(&slides, Aggregation::Macro).unwrap();
        assert_abs_diff_eq!(
            mac.values.dice.unwrap(),
            (2.0 / 3.0 + 16.0 / 17.0) / 2.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(mac.values.dice.unwrap(), 0.803922, epsilon = 5e-7);
    }

    #[test]
    fn single_and_duplicate_slides_agree_across_modes() {
        let one = vec![("a".to_string(), cm(4, 2, 1, 9))];
        let mi = aggregate_reports(&one, Aggregation::Micro).unwrap();
        let ma = aggregate_reports(&one, Aggregation::Macro).unwrap();
        assert_eq!(mi.values, ma.values);
        assert_eq!(mi.values, compute_metrics(&cm(4, 2, 1, 9)));
        let two = vec![
            ("a".to_string(), cm(4, 2, 1, 9)),
            ("b".to_string(), cm(4, 2, 1, 9)),
        ];
        let mi = aggregate_reports(&two, Aggregation::Micro).unwrap();
        let ma = aggregate_reports(&two, Aggregation::Macro).unwrap();
        for n in METRIC_NAMES {
            assert_abs_diff_eq!(
                mi.values.get(n).unwrap(),
                ma.values.get(n).unwrap(),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn macro_skips_undefined_slides() {
        let slides = vec![
            ("a".to_string(), cm(0, 0, 0, 5)),
            ("b".to_string(), cm(2, 1, 1, 6)),
        ];
        let r = aggregate_reports(&slides, Aggregation::Macro).unwrap();
        assert_eq!(r.values.dice, compute_metrics(&cm(2, 1, 1, 6)).dice);
        assert!(r.undefined_flags.contains(&"a:dice".to_string()));
        assert!(!r.undefined_flags.contains(&"dice".to_string()));
    }

    #[test]
    fn report_json_shape() {
        let r =
            aggregate_reports(&[("a".to_string(), cm(0, 0, 0, 5))], Aggregation::Macro).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["aggregation"], "macro");
        assert!(v["dice"].is_null());
        assert_eq!(v["tnr"], 1.0);
        assert_eq!(v["per_slide"]["a"]["accuracy"], 1.0);
        assert!(v["undefined_flags"]
            .as_array()
            .unwrap()
            .iter()
            .any(|f| f == "dice"));
    }

    proptest! {
        #[test]
        fn identities_hold(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            let c = cm(tp, fp, fn_, tn);
            prop_assume!(c.total() > 0);
            let m = compute_metrics(&c);
            if let (Some(d), Some(i)) = (m.dice, m.iou) {
                prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
            }
            prop_assert_eq!(m.f1.map(f64::to_bits), m.dice.map(f64::to_bits));
            if let (Some(tpr), Some(tnr)) = (m.tpr, m.tnr) {
                let prev = (tp + fn_) as f64 / c.total() as f64;
                prop_assert!((m.accuracy.unwrap() - (tpr * prev + tnr * (1.0 - prev))).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn seed_summary_mean_and_sd() {
        let reports: Vec<(u64, MetricReport)> = [(3, cm(2, 1, 1, 6)), (4, cm(4, 0, 0, 6))]
            .into_iter()
            .map(|(seed, c)| {
                (
                    seed,
                    aggregate_reports(&[("s".into(), c)], Aggregation::Macro).unwrap(),
                )
            })
            .collect();
        let s = summarize_seeds(&reports).unwrap();
        let dice = [2.0 / 3.0, 1.0];
        let m = (dice[0] + dice[1]) / 2.0;
        assert_abs_diff_eq!(s.mean.dice.unwrap(), m, epsilon = 1e-15);
        let sd = (((dice[0] - m).powi(2) + (dice[1] - m).powi(2)) / 1.0).sqrt();
        assert_abs_diff_eq!(s.sd.dice.unwrap(), sd, epsilon = 1e-15);
        let one = summarize_seeds(&reports[..1]).unwrap();
        assert_eq!(one.sd.dice, None);
        assert!(summarize_seeds(&[]).is_err());
    }
}
