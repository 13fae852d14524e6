//! Multi-label retrieval metrics and the ranking objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RANKING_MARGIN: f64 = 1.0;

/// Scores and ground truth for a set of images over a set of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    /// `images × C`.
    pub scores: Tensor,
    /// `truth[i][c]`.
    pub truth: Vec<Vec<bool>>,
    /// Original vocabulary id of each column.
    pub class_ids: Vec<usize>,
}

impl EvalTable {
    pub fn new(scores: Tensor, truth: Vec<Vec<bool>>) -> Result<Self> {
        let (n, c) = (scores.rows(), scores.cols());
        if scores.shape().len() != 2 || truth.len() != n || truth.iter().any(|r| r.len() != c) {
            return Err(Error::dim("eval_table", scores.shape(), &[truth.len(), c]));
        }
        Ok(EvalTable {
            scores,
            truth,
            class_ids: (0..c).collect(),
        })
    }

    pub fn num_images(&self) -> usize {
        self.truth.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    fn truth_column(&self, c: usize) -> Vec<bool> {
        self.truth.iter().map(|r| r[c]).collect()
    }

    /// Keeps the columns whose mask entry is true.
    pub fn select(&self, keep: &[bool]) -> Result<EvalTable> {
        if keep.len() != self.num_classes() {
            return Err(Error::dim("select", &[keep.len()], &[self.num_classes()]));
        }
        let cols: Vec<usize> = (0..keep.len()).filter(|&c| keep[c]).collect();
        let n = self.num_images();
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            data.extend(cols.iter().map(|&c| self.scores.at(i, c)));
        }
        Ok(EvalTable {
            scores: Tensor::new(vec![n, cols.len()], data)?,
            truth: self
                .truth
                .iter()
                .map(|r| cols.iter().map(|&c| r[c]).collect())
                .collect(),
            class_ids: cols.iter().map(|&c| self.class_ids[c]).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Zsl,
    Gzsl,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Zsl => "zsl",
            EvalMode::Gzsl => "gzsl",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zsl" => Ok(EvalMode::Zsl),
            "gzsl" => Ok(EvalMode::Gzsl),
            other => Err(Error::Config(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

/// ZSL keeps unseen columns only; GZSL keeps every column.
pub fn split_eval(table: &EvalTable, mode: EvalMode, seen_mask: &[bool]) -> Result<EvalTable> {
    if seen_mask.len() != table.num_classes() {
        return Err(Error::dim("split_eval", &[seen_mask.len()], &[table.num_classes()]));
    }
    match mode {
        EvalMode::Gzsl => Ok(table.clone()),
        EvalMode::Zsl => {
            let unseen: Vec<bool> = seen_mask.iter().map(|s| !s).collect();
            if !unseen.iter().any(|&u| u) {
                return Err(Error::Config("ZSL evaluation needs at least one unseen class".into()));
            }
            table.select(&unseen)
        }
    }
}

/// Image order by descending score, ties to the lower index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Average precision of one class column; `None` without positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let n_pos = truth.iter().filter(|&&t| t).count();
    if n_pos == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if truth[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / n_pos as f64)
}

/// Mean AP over classes with at least one positive, plus the count of
/// excluded classes.
pub fn mean_ap(table: &EvalTable) -> (f64, usize) {
    let mut aps = Vec::new();
    let mut excluded = 0;
    for c in 0..table.num_classes() {
        match average_precision(&table.scores.column(c), &table.truth_column(c)) {
            Some(ap) => aps.push(ap),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} class(es) without positives excluded from mAP");
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    (map, excluded)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Top-K label assignment per image, pooled over classes.
pub fn topk_prf(table: &EvalTable, k: usize) -> Result<Prf> {
    if k == 0 {
        return Err(Error::Range("top-K needs K ≥ 1".into()));
    }
    let c = table.num_classes();
    let kk = if k > c {
        log::warn!("top-{k} over {c} classes; clamped");
        c
    } else {
        k
    };
    let (mut tp, mut pred, mut pos) = (0usize, 0usize, 0usize);
    for (i, truth) in table.truth.iter().enumerate() {
        for &j in ranking(table.scores.row(i)).iter().take(kk) {
            pred += 1;
            if truth[j] {
                tp += 1;
            }
        }
        pos += truth.iter().filter(|&&t| t).count();
    }
    let precision = if pred == 0 { 0.0 } else { tp as f64 / pred as f64 };
    let recall = if pos == 0 { 0.0 } else { tp as f64 / pos as f64 };
    Ok(Prf {
        k,
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub k: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub excluded_classes: usize,
}

/// Splits by mode, then computes mAP and P/R/F1 at every K.
pub fn evaluate_table(table: &EvalTable, mode: EvalMode, seen_mask: &[bool], ks: &[usize]) -> Result<EvalReport> {
    let t = split_eval(table, mode, seen_mask)?;
    let (map, excluded_classes) = mean_ap(&t);
    let prf: Vec<Prf> = ks.iter().map(|&k| topk_prf(&t, k)).collect::<Result<_>>()?;
    Ok(EvalReport {
        mode,
        k: ks.to_vec(),
        precision: prf.iter().map(|p| p.precision).collect(),
        recall: prf.iter().map(|p| p.recall).collect(),
        f1: prf.iter().map(|p| p.f1).collect(),
        map,
        excluded_classes,
    })
}

/// Mean over (positive, negative) pairs of `max(0, m + ŷ_n − ŷ_p)`; zero
/// without at least one of each.
pub fn ranking_loss<'t>(pred: Var<'t>, labels: &[bool]) -> Result<Var<'t>> {
    if pred.shape() != [labels.len()] {
        return Err(Error::dim("ranking_loss", &pred.shape(), &[labels.len()]));
    }
    let mut pi = Vec::new();
    let mut ni = Vec::new();
    for (p, &yp) in labels.iter().enumerate() {
        if !yp {
            continue;
        }
        for (n, &yn) in labels.iter().enumerate() {
            if !yn {
                pi.push(p);
                ni.push(n);
            }
        }
    }
    if pi.is_empty() {
        return Ok(pred.scale(0.0).sum());
    }
    let hinge = pred
        .gather_rows(&ni)?
        .sub(pred.gather_rows(&pi)?)?
        .add_scalar(RANKING_MARGIN)
        .relu();
    Ok(hinge.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(average_precision(&[3.0, 2.0, 1.0], &[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[4.0, 3.0, 2.0, 1.0], &[false, false, false, true]), Some(0.25));
        assert_eq!(average_precision(&[1.0], &[false]), None);
        // Ties go to the lower image index.
        assert_eq!(average_precision(&[1.0, 1.0], &[false, true]), Some(0.5));
    }

    #[test]
    fn map_examples() {
        let scores = Tensor::from_rows(&[[0.9, 0.2, 0.0], [0.5, 0.1, 0.0], [0.1, 0.0, 0.0]]);
        let truth = vec![
            vec![true, true, false],
            vec![false, false, false],
            vec![true, false, false],
        ];
        let t = EvalTable::new(scores, truth).unwrap();
        let (map, excluded) = mean_ap(&t);
        assert!((map - (0.833333333333 + 1.0) / 2.0).abs() < 1e-9);
        assert_eq!(excluded, 1);
    }

    #[test]
    fn prf_examples() {
        let scores = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8]]);
        let t = EvalTable::new(scores.clone(), vec![vec![true, false], vec![false, true]]).unwrap();
        let p = topk_prf(&t, 1).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = topk_prf(&t, 2).unwrap();
        assert_eq!((p.precision, p.recall), (0.5, 1.0));
        assert!((p.f1 - 0.666667).abs() < 1e-6);
        let clamped = topk_prf(&t, 5).unwrap();
        assert_eq!(clamped.precision, 0.5);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn split_examples() {
        let scores = Tensor::zeros(&[2, 10]);
        let t = EvalTable::new(scores, vec![vec![false; 10]; 2]).unwrap();
        let mut seen = vec![true; 10];
        assert_eq!(split_eval(&t, EvalMode::Gzsl, &seen).unwrap(), t);
        seen[3] = false;
        seen[7] = false;
        let z = split_eval(&t, EvalMode::Zsl, &seen).unwrap();
        assert_eq!(z.class_ids, vec![3, 7]);
        assert!(matches!(
            split_eval(&t, EvalMode::Zsl, &[true; 10]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ranking_loss_examples() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::vector(vec![0.9, 0.2]));
        let l = ranking_loss(y, &[true, false]).unwrap().item();
        assert!((l - 0.3).abs() < 1e-12);
        let y = tape.constant(Tensor::vector(vec![2.5, 0.0, 1.0]));
        assert_eq!(ranking_loss(y, &[true, false, false]).unwrap().item(), 0.0);
        assert_eq!(ranking_loss(y, &[true, true, true]).unwrap().item(), 0.0);
    }

    #[test]
    fn report_serializes_expected_fields() {
        let t = EvalTable::new(Tensor::from_rows(&[[0.9, 0.1]]), vec![vec![true, false]]).unwrap();
        let r = evaluate_table(&t, EvalMode::Gzsl, &[true, false], &[1]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["mode", "k", "precision", "recall", "f1", "mAP", "excluded_classes"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["mode"], "gzsl");
        assert_eq!(v["excluded_classes"], 1);
    }
}
