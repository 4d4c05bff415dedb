//! Classification metrics: confusion matrix, per-class precision/recall/F1,
//! top-k accuracy, average precision and best/worst class ranking.
//!
//! Every ratio with a zero denominator is defined as 0.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FoodClass, PredictionRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassificationError {
    #[error("class {0} is not in the declared class list")]
    UnknownClass(String),
    #[error("record {image_id} has a ranking of length {len}, need at least {k}")]
    MissingTopK { image_id: String, len: usize, k: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("ranking is empty")]
    EmptyRanking,
    #[error("n = {n} exceeds class count {classes}")]
    BadN { n: usize, classes: usize },
}

/// Counts indexed `[true][predicted]` in the order of `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<FoodClass>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> &[FoodClass] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn index_of(&self, c: &FoodClass) -> Option<usize> {
        self.classes.iter().position(|x| x == c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Trace over total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    /// Each row divided by its sum; rows with no support stay all-zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let sum: u64 = row.iter().sum();
                row.iter().map(|&c| ratio(c, sum)).collect()
            })
            .collect()
    }

    /// CSV with class-id header row and column.
    pub fn write_csv<W: Write>(&self, out: W, normalized: bool) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\pred".to_owned()];
        header.extend(self.classes.iter().map(|c| c.id().to_owned()));
        w.write_record(&header)?;
        let normed = self.row_normalized();
        for (i, class) in self.classes.iter().enumerate() {
            let mut row = vec![class.id().to_owned()];
            if normalized {
                row.extend(normed[i].iter().map(|v| format!("{v:.6}")));
            } else {
                row.extend(self.counts[i].iter().map(u64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn build_confusion(
    classes: &[FoodClass],
    records: &[PredictionRecord],
) -> Result<ConfusionMatrix, ClassificationError> {
    let index: HashMap<&FoodClass, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let n = classes.len();
    let mut counts = vec![vec![0u64; n]; n];
    let lookup = |c: &FoodClass| {
        index
            .get(c)
            .copied()
            .ok_or_else(|| ClassificationError::UnknownClass(c.to_string()))
    };
    for r in records {
        let t = lookup(&r.true_class)?;
        let p = lookup(&r.predicted_class)?;
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
    })
}

/// Sorted union of every true and predicted class in `records`.
pub fn classes_in(records: &[PredictionRecord]) -> Vec<FoodClass> {
    let mut classes: Vec<FoodClass> = records
        .iter()
        .flat_map(|r| [r.true_class.clone(), r.predicted_class.clone()])
        .collect();
    classes.sort();
    classes.dedup();
    classes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassScore {
    pub class: FoodClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub(crate) fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn per_class_prf(cm: &ConfusionMatrix, c: &FoodClass) -> Result<PerClassScore, ClassificationError> {
    let i = cm
        .index_of(c)
        .ok_or_else(|| ClassificationError::UnknownClass(c.to_string()))?;
    let tp = cm.counts[i][i];
    let row: u64 = cm.counts[i].iter().sum();
    let col: u64 = cm.counts.iter().map(|r| r[i]).sum();
    let precision = ratio(tp, col);
    let recall = ratio(tp, row);
    Ok(PerClassScore {
        class: c.clone(),
        precision,
        recall,
        f1: f1_score(precision, recall),
        support: row,
    })
}

pub fn all_per_class(cm: &ConfusionMatrix) -> Vec<PerClassScore> {
    cm.classes
        .iter()
        .map(|c| per_class_prf(cm, c).expect("class from the matrix itself"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Unweighted mean over classes.
pub fn macro_average(scores: &[PerClassScore]) -> MacroAverage {
    if scores.is_empty() {
        return MacroAverage {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let n = scores.len() as f64;
    MacroAverage {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Fraction of records whose true class is among the first `k` ranked
/// predictions. `k = 1` only uses `predicted_class`.
pub fn top_k_accuracy(records: &[PredictionRecord], k: usize) -> Result<f64, ClassificationError> {
    if k == 0 {
        return Err(ClassificationError::ZeroK);
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0u64;
    for r in records {
        let hit = if k == 1 {
            r.is_correct()
        } else {
            let ranking = r.top_k.as_deref().unwrap_or(&[]);
            if ranking.len() < k {
                return Err(ClassificationError::MissingTopK {
                    image_id: r.image_id.clone(),
                    len: ranking.len(),
                    k,
                });
            }
            ranking[..k].iter().any(|(c, _)| c == &r.true_class)
        };
        hits += u64::from(hit);
    }
    Ok(ratio(hits, records.len() as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Sum of precision at each relevant rank divided by the relevant count.
    #[default]
    Standard,
    /// The bare sum of `P(k) * rel(k)` with no normalization.
    PaperLiteral,
}

/// Average precision of one ranked relevance list. Standard mode yields 0
/// when nothing is relevant.
pub fn average_precision(ranking: &[bool], mode: ApMode) -> Result<f64, ClassificationError> {
    if ranking.is_empty() {
        return Err(ClassificationError::EmptyRanking);
    }
    let mut relevant = 0u64;
    let mut sum = 0.0;
    for (k, &rel) in ranking.iter().enumerate() {
        if rel {
            relevant += 1;
            sum += relevant as f64 / (k + 1) as f64;
        }
    }
    Ok(match mode {
        ApMode::PaperLiteral => sum,
        ApMode::Standard if relevant == 0 => 0.0,
        ApMode::Standard => sum / relevant as f64,
    })
}

/// Mean AP over classes. Rankings with no relevant item are skipped, since
/// their class has no support.
pub fn map_over_classes(rankings: &[Vec<bool>], mode: ApMode) -> Result<f64, ClassificationError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ranking in rankings {
        if !ranking.iter().any(|r| *r) {
            continue;
        }
        total += average_precision(ranking, mode)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// One relevance ranking per class: all records ordered by the score they
/// assign to that class (descending, ties by image id), relevant when the
/// record's true class matches. Scores come from `top_k` when present,
/// otherwise from `confidence` on the predicted class.
pub fn class_rankings(classes: &[FoodClass], records: &[PredictionRecord]) -> Vec<Vec<bool>> {
    classes
        .iter()
        .map(|c| {
            let mut scored: Vec<(f64, &str, bool)> = records
                .iter()
                .map(|r| (class_score(r, c), r.image_id.as_str(), &r.true_class == c))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            scored.into_iter().map(|(_, _, rel)| rel).collect()
        })
        .collect()
}

fn class_score(r: &PredictionRecord, c: &FoodClass) -> f64 {
    match &r.top_k {
        Some(list) => list.iter().find(|(x, _)| x == c).map_or(0.0, |(_, p)| *p),
        None if &r.predicted_class == c => r.confidence,
        None => 0.0,
    }
}

/// `(best, worst)`: best sorted by F1 descending, worst by F1 ascending, ties
/// by class id ascending in both.
pub fn best_worst_classes(
    scores: &[PerClassScore],
    n: usize,
) -> Result<(Vec<PerClassScore>, Vec<PerClassScore>), ClassificationError> {
    if n > scores.len() {
        return Err(ClassificationError::BadN {
            n,
            classes: scores.len(),
        });
    }
    let mut best = scores.to_vec();
    best.sort_by(|a, b| b.f1.total_cmp(&a.f1).then_with(|| a.class.cmp(&b.class)));
    let mut worst = scores.to_vec();
    worst.sort_by(|a, b| a.f1.total_cmp(&b.f1).then_with(|| a.class.cmp(&b.class)));
    best.truncate(n);
    worst.truncate(n);
    Ok((best, worst))
}

/// Per-class scores as `class,precision,recall,f1,support`.
pub fn write_per_class_csv<W: Write>(scores: &[PerClassScore], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "precision", "recall", "f1", "support"])?;
    for s in scores {
        w.write_record([
            s.class.id().to_owned(),
            format!("{:.6}", s.precision),
            format!("{:.6}", s.recall),
            format!("{:.6}", s.f1),
            s.support.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc(s: &str) -> FoodClass {
        FoodClass::new(s).unwrap()
    }

    fn rec(id: &str, t: &str, p: &str) -> PredictionRecord {
        PredictionRecord {
            image_id: id.into(),
            true_class: fc(t),
            predicted_class: fc(p),
            confidence: 0.9,
            top_k: None,
            source: None,
        }
    }

    fn abc() -> Vec<FoodClass> {
        vec![fc("a"), fc("b"), fc("c")]
    }

    #[test]
    fn confusion_examples() {
        let recs = vec![
            rec("1", "a", "a"),
            rec("2", "a", "b"),
            rec("3", "b", "b"),
            rec("4", "c", "c"),
        ];
        let cm = build_confusion(&abc(), &recs).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert_eq!(cm.total(), 4);

        let diag = build_confusion(&abc(), &[rec("1", "a", "a"), rec("2", "c", "c")]).unwrap();
        assert_eq!(diag.counts(), &[vec![1, 0, 0], vec![0, 0, 0], vec![0, 0, 1]]);

        let empty = build_confusion(&abc(), &[]).unwrap();
        assert!(empty.counts().iter().flatten().all(|c| *c == 0));
        assert_eq!(empty.row_normalized()[0], vec![0.0; 3]);

        assert_eq!(
            build_confusion(&abc(), &[rec("1", "a", "zz")]),
            Err(ClassificationError::UnknownClass("zz".into()))
        );
    }

    #[test]
    fn row_normalized_sums_to_one() {
        let recs = vec![rec("1", "a", "a"), rec("2", "a", "b"), rec("3", "a", "c")];
        let cm = build_confusion(&abc(), &recs).unwrap();
        let row: f64 = cm.row_normalized()[0].iter().sum();
        assert!((row - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prf_examples() {
        // Class a: TP=3, FP=1 (b predicted as a), FN=1 (a predicted as c).
        let mut recs: Vec<_> = (0..3).map(|i| rec(&format!("t{i}"), "a", "a")).collect();
        recs.push(rec("fp", "b", "a"));
        recs.push(rec("fn", "a", "c"));
        let cm = build_confusion(&abc(), &recs).unwrap();
        let s = per_class_prf(&cm, &fc("a")).unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.support), (0.75, 0.75, 0.75, 4));

        let perfect = build_confusion(&abc(), &[rec("1", "a", "a"), rec("2", "b", "b")]).unwrap();
        let s = per_class_prf(&perfect, &fc("a")).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        // Class c: TP=0, FP=2, FN=3.
        let recs = vec![
            rec("1", "a", "c"),
            rec("2", "b", "c"),
            rec("3", "c", "a"),
            rec("4", "c", "a"),
            rec("5", "c", "b"),
        ];
        let cm = build_confusion(&abc(), &recs).unwrap();
        let s = per_class_prf(&cm, &fc("c")).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(per_class_prf(&cm, &fc("zz")).is_err());
    }

    #[test]
    fn top_k_accuracy_examples() {
        let all = vec![rec("1", "a", "a"), rec("2", "b", "b")];
        assert_eq!(top_k_accuracy(&all, 1).unwrap(), 1.0);

        let mut recs = Vec::new();
        for i in 0..10 {
            let mut r = rec(&i.to_string(), "a", "b");
            let mut ranking = vec![(fc("b"), 0.5), (fc("c"), 0.2), (fc("d"), 0.1), (fc("e"), 0.1)];
            ranking.push(if i < 9 { (fc("a"), 0.1) } else { (fc("f"), 0.1) });
            r.top_k = Some(ranking);
            recs.push(r);
        }
        assert_eq!(top_k_accuracy(&recs, 5).unwrap(), 0.9);
        assert_eq!(top_k_accuracy(&recs, 1).unwrap(), 0.0);
        assert!(matches!(
            top_k_accuracy(&all, 5),
            Err(ClassificationError::MissingTopK { .. })
        ));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[true, true], ApMode::Standard).unwrap(), 1.0);
        let r = [true, false, true];
        let std = average_precision(&r, ApMode::Standard).unwrap();
        assert!((std - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((std - 0.8333).abs() < 1e-4);
        let lit = average_precision(&r, ApMode::PaperLiteral).unwrap();
        assert!((lit - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            average_precision(&[], ApMode::Standard),
            Err(ClassificationError::EmptyRanking)
        );
        assert_eq!(average_precision(&[false, false], ApMode::Standard).unwrap(), 0.0);
    }

    #[test]
    fn map_skips_unsupported_classes() {
        let rankings = vec![vec![true, false], vec![false, false], vec![false, true]];
        let m = map_over_classes(&rankings, ApMode::Standard).unwrap();
        assert!((m - 0.75).abs() < 1e-12);
    }

    #[test]
    fn class_rankings_perfect_predictions_give_map_one() {
        let recs = vec![rec("1", "a", "a"), rec("2", "b", "b"), rec("3", "a", "a")];
        let rankings = class_rankings(&abc(), &recs);
        assert_eq!(rankings[0], vec![true, true, false]);
        assert_eq!(map_over_classes(&rankings, ApMode::Standard).unwrap(), 1.0);
    }

    fn score(c: &str, f1: f64) -> PerClassScore {
        PerClassScore {
            class: fc(c),
            precision: f1,
            recall: f1,
            f1,
            support: 1,
        }
    }

    #[test]
    fn best_worst_examples() {
        let scores = vec![
            score("spicy_crayfish", 0.78),
            score("spicy_sauteed_shrimp", 0.81),
            score("mapo_tofu", 0.94),
            score("egg_tarts", 0.97),
            score("yangzhou_fried_rice", 0.98),
        ];
        let (best, worst) = best_worst_classes(&scores, 2).unwrap();
        assert_eq!(worst.iter().map(|s| s.f1).collect::<Vec<_>>(), vec![0.78, 0.81]);
        assert_eq!(best.iter().map(|s| s.f1).collect::<Vec<_>>(), vec![0.98, 0.97]);

        let (best, worst) = best_worst_classes(&scores, 5).unwrap();
        assert_eq!(best.len(), 5);
        assert_eq!(worst.len(), 5);

        let tied = vec![score("c", 0.5), score("a", 0.5), score("b", 0.5)];
        let (best, worst) = best_worst_classes(&tied, 3).unwrap();
        let ids = |v: &[PerClassScore]| v.iter().map(|s| s.class.id().to_owned()).collect::<Vec<_>>();
        assert_eq!(ids(&best), vec!["a", "b", "c"]);
        assert_eq!(ids(&worst), vec!["a", "b", "c"]);

        assert_eq!(
            best_worst_classes(&tied, 4),
            Err(ClassificationError::BadN { n: 4, classes: 3 })
        );
    }

    #[test]
    fn per_class_csv_header() {
        let mut buf = Vec::new();
        write_per_class_csv(&[score("rice", 0.5)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "class,precision,recall,f1,support\nrice,0.500000,0.500000,0.500000,1\n"
        );
    }
}
