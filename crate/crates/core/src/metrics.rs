//! Evaluation metrics under the COVID-versus-rest protocol, plus 4-class accuracy.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::CxrClass;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes, both in [`CxrClass::ALL`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CxrClass::COUNT]; CxrClass::COUNT],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CxrClass::COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn get(&self, truth: CxrClass, predicted: CxrClass) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(CxrClass::ALL.iter().map(|c| c.name().to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for c in CxrClass::ALL {
            let mut row = vec![c.name().to_string()];
            row.extend(self.counts[c.index()].iter().map(u64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

pub fn confusion(truth: &[CxrClass], predicted: &[CxrClass]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (t, p) in truth.iter().zip(predicted) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// COVID is the positive class; the other three are negative.
pub fn binarize_covid(cm: &ConfusionMatrix) -> BinaryCounts {
    let c = CxrClass::Covid.index();
    let tp = cm.counts[c][c];
    let fn_: u64 = cm.counts[c].iter().sum::<u64>() - tp;
    let fp: u64 = (0..CxrClass::COUNT).map(|i| cm.counts[i][c]).sum::<u64>() - tp;
    BinaryCounts { tp, fn_, fp, tn: cm.total() - tp - fn_ - fp }
}

pub fn sensitivity(bc: &BinaryCounts) -> Result<f64> {
    match bc.tp + bc.fn_ {
        0 => Err(Error::UndefinedMetric("sensitivity")),
        d => Ok(bc.tp as f64 / d as f64),
    }
}

pub fn specificity(bc: &BinaryCounts) -> Result<f64> {
    match bc.tn + bc.fp {
        0 => Err(Error::UndefinedMetric("specificity")),
        d => Ok(bc.tn as f64 / d as f64),
    }
}

/// `2 sen spe / (sen + spe)`, taken as 0 when either input is 0.
pub fn harmonic_mean(sen: f64, spe: f64) -> f64 {
    if sen <= 0.0 || spe <= 0.0 {
        0.0
    } else {
        2.0 * sen * spe / (sen + spe)
    }
}

/// Probability that a random positive outscores a random negative, ties counting one half.
///
/// Computed from mid-ranks in `O(n log n)`.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch(format!("{} scores but {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC score is NaN".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 4-class accuracy, `trace / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::UndefinedMetric("accuracy")),
        t => Ok(cm.trace() as f64 / t as f64),
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<'_, f32>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(row: ArrayView1<'_, f32>) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn nan_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_none()
    } else {
        s.serialize_some(v)
    }
}

fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Metrics for one evaluation pass. Undefined metrics are NaN and named in `undefined`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub sen: f64,
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub spe: f64,
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub hm: f64,
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub auc: f64,
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub acc: f64,
    #[serde(default)]
    pub undefined: Vec<String>,
}

/// Bitwise equality, so two NaN reports compare equal.
impl PartialEq for EvalReport {
    fn eq(&self, other: &Self) -> bool {
        self.confusion == other.confusion
            && self.undefined == other.undefined
            && self.scalars().iter().zip(other.scalars()).all(|(a, b)| a.1.to_bits() == b.1.to_bits())
    }
}

impl EvalReport {
    pub const METRIC_NAMES: [&'static str; 5] = ["sen", "spe", "hm", "auc", "acc"];

    /// `covid_scores` are the per-sample COVID probabilities used for AUC.
    pub fn new(truth: &[CxrClass], predicted: &[CxrClass], covid_scores: &[f64]) -> Result<EvalReport> {
        let confusion = confusion(truth, predicted)?;
        let bc = binarize_covid(&confusion);
        let mut undefined = Vec::new();
        let mut settle = |r: Result<f64>| match r {
            Ok(v) => Ok(v),
            Err(Error::UndefinedMetric(name)) => {
                undefined.push(name.to_string());
                Ok(f64::NAN)
            }
            Err(e) => Err(e),
        };
        let sen = settle(sensitivity(&bc))?;
        let spe = settle(specificity(&bc))?;
        let positive: Vec<bool> = truth.iter().map(|&c| c == CxrClass::Covid).collect();
        let auc = settle(auc(covid_scores, &positive))?;
        let acc = settle(accuracy(&confusion))?;
        let hm = if sen.is_nan() || spe.is_nan() {
            undefined.push("hm".into());
            f64::NAN
        } else {
            harmonic_mean(sen, spe)
        };
        Ok(EvalReport { confusion, sen, spe, hm, auc, acc, undefined })
    }

    /// Predictions by argmax and COVID scores by softmax over `B x 4` logits.
    pub fn from_logits(truth: &[CxrClass], logits: &Array2<f32>) -> Result<EvalReport> {
        if logits.ncols() != CxrClass::COUNT || logits.nrows() != truth.len() {
            return Err(Error::DimensionMismatch(format!(
                "logits {:?} for {} labels and {} classes",
                logits.dim(),
                truth.len(),
                CxrClass::COUNT
            )));
        }
        let mut predicted = Vec::with_capacity(truth.len());
        let mut scores = Vec::with_capacity(truth.len());
        for row in logits.rows() {
            predicted.push(CxrClass::from_index(argmax(row)).expect("4 columns"));
            scores.push(softmax(row)[CxrClass::Covid.index()]);
        }
        EvalReport::new(truth, &predicted, &scores)
    }

    pub fn scalars(&self) -> [(&'static str, f64); 5] {
        [("sen", self.sen), ("spe", self.spe), ("hm", self.hm), ("auc", self.auc), ("acc", self.acc)]
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("metric  value\n");
        for (name, v) in self.scalars() {
            let _ = writeln!(s, "{name:<6}  {}", format_metric(v));
        }
        s
    }
}

pub fn format_metric(v: f64) -> String {
    if v.is_nan() {
        "undefined".into()
    } else {
        format!("{v:.4}")
    }
}

/// Mean and population variance of a metric over a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub mean: f64,
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub variance: f64,
}

impl MetricStats {
    /// NaN propagates, so an undefined epoch makes the whole window undefined.
    pub fn of(values: &[f64]) -> Result<MetricStats> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot summarize an empty window".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MetricStats { mean, variance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use CxrClass::*;

    #[test]
    fn confusion_examples() {
        let all: Vec<_> = CxrClass::ALL.iter().copied().cycle().take(10).collect();
        let cm = confusion(&all, &all).unwrap();
        assert_eq!(cm.trace(), 10);
        assert_eq!(cm.total(), 10);
        assert_eq!(confusion(&[], &[]).unwrap(), ConfusionMatrix::default());
        let cm = confusion(&[Covid, Covid, Covid], &[Covid, Normal, Normal]).unwrap();
        assert_eq!(cm.counts[0], [1, 0, 2, 0]);
        assert!(confusion(&[Covid], &[]).is_err());
    }

    #[test]
    fn binarize_examples() {
        let mut cm = ConfusionMatrix::default();
        for i in 0..4 {
            cm.counts[i][i] = 5;
        }
        assert_eq!(binarize_covid(&cm), BinaryCounts { tp: 5, fn_: 0, fp: 0, tn: 15 });
        let cm = confusion(&[Covid; 8], &[Normal; 8]).unwrap();
        let bc = binarize_covid(&cm);
        assert_eq!((bc.tp, bc.fn_), (0, 8));
    }

    #[test]
    fn sen_spe_examples() {
        let bc = |tp, fn_| BinaryCounts { tp, fn_, fp: 0, tn: 1 };
        assert_eq!(sensitivity(&bc(50, 0)).unwrap(), 1.0);
        assert_eq!(sensitivity(&bc(0, 10)).unwrap(), 0.0);
        assert_eq!(sensitivity(&bc(45, 5)).unwrap(), 0.9);
        assert!(matches!(sensitivity(&bc(0, 0)), Err(Error::UndefinedMetric(_))));
        assert!(matches!(specificity(&BinaryCounts::default()), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(harmonic_mean(1.0, 1.0), 1.0);
        assert_eq!(harmonic_mean(0.0, 0.9), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(0.972, 0.997) - 0.9843).abs() < 1e-4);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4, 0.6], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.2, 0.7, 0.5], &[true, false, false]).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn accuracy_examples() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[1][1] = 3;
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        let cm = confusion(&[Covid, Normal], &[Normal, Covid]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.0);
        let mut cm = ConfusionMatrix::default();
        cm.counts[2][2] = 953;
        cm.counts[2][0] = 47;
        assert_eq!(accuracy(&cm).unwrap(), 0.953);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(array![1.0f32, 3.0, 3.0, 0.0].view()), 1);
        assert_eq!(argmax(array![2.0f32, 2.0, 2.0, 2.0].view()), 0);
    }

    #[test]
    fn report_flags_undefined_and_serializes_null() {
        let r = EvalReport::new(&[Normal, Normal], &[Normal, Covid], &[0.1, 0.9]).unwrap();
        assert!(r.sen.is_nan() && r.hm.is_nan() && r.auc.is_nan());
        assert_eq!(r.undefined, vec!["sensitivity", "auc", "hm"]);
        assert_eq!(r.spe, 0.5);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"sen\":null"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn report_from_logits() {
        let logits = array![[3.0f32, 0.0, 0.0, 0.0], [0.0, 0.0, 2.0, 0.0], [1.0, 1.0, 0.0, 0.0]];
        let r = EvalReport::from_logits(&[Covid, Normal, LungOpacity], &logits).unwrap();
        assert_eq!(r.sen, 1.0);
        assert_eq!(r.spe, 0.5);
        assert!((r.acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.auc, 1.0);
    }

    #[test]
    fn csv_layout() {
        let cm = confusion(&[Covid, Covid, Covid], &[Covid, Normal, Normal]).unwrap();
        let csv = cm.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "true\\predicted,COVID,LungOpacity,Normal,ViralPneumonia");
        assert_eq!(lines[1], "COVID,1,0,2,0");
    }

    #[test]
    fn stats_examples() {
        let s = MetricStats::of(&[0.9; 10]).unwrap();
        assert!((s.mean - 0.9).abs() < 1e-15 && s.variance.abs() < 1e-15);
        assert_eq!(MetricStats::of(&[0.0, 1.0]).unwrap(), MetricStats { mean: 0.5, variance: 0.25 });
        assert!(MetricStats::of(&[]).is_err());
    }

    fn brute_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in positive.iter().enumerate() {
            for (j, &pj) in positive.iter().enumerate() {
                if pi && !pj {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn auc_matches_pairs_and_is_monotone_invariant(
            data in prop::collection::vec((0u8..12, any::<bool>()), 2..60),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 11.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((auc(&warped, &labels).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn hm_between_min_and_max(sen in 0.001f64..=1.0, spe in 0.001f64..=1.0) {
            let hm = harmonic_mean(sen, spe);
            prop_assert!(hm <= sen.max(spe) + 1e-15 && hm >= sen.min(spe) - 1e-15);
            prop_assert!(hm <= (sen + spe) / 2.0 + 1e-15);
        }
    }
}
