//! End-to-end evaluation and plot-data export.

use crate::error::{Error, Result};
use crate::metrics::{evaluate_table, EvalMode, EvalReport, EvalTable};
use crate::tensor::Tensor;

use super::data::PatchBag;
use super::model::{ImageEval, Model};

/// Scores every bag, fanning out over worker threads. Results are ordered
/// as the input.
pub fn evaluate_images(model: &Model, bags: &[&PatchBag], record_attention: bool) -> Result<Vec<ImageEval>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(bags.len().max(1));
    let chunk = bags.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<ImageEval>>> = std::thread::scope(|s| {
        let handles: Vec<_> = bags
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|b| model.evaluate_image(&model.prepare(b)?, record_attention))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(bags.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn eval_table(evals: &[ImageEval], bags: &[&PatchBag]) -> Result<EvalTable> {
    if evals.len() != bags.len() {
        return Err(Error::dim("eval_table", &[evals.len()], &[bags.len()]));
    }
    let rows: Vec<&[f64]> = evals.iter().map(|e| e.yhat.as_slice()).collect();
    let scores = if rows.is_empty() {
        Tensor::zeros(&[0, bags.first().map_or(0, |b| b.labels.len())])
    } else {
        Tensor::from_rows(&rows)
    };
    EvalTable::new(scores, bags.iter().map(|b| b.labels.clone()).collect())
}

/// Table whose scores are the ground-truth indicators themselves.
pub fn oracle_table(bags: &[&PatchBag]) -> Result<EvalTable> {
    let c = bags.first().map_or(0, |b| b.labels.len());
    let data = bags
        .iter()
        .flat_map(|b| b.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }))
        .collect();
    EvalTable::new(Tensor::new(vec![bags.len(), c], data)?, bags.iter().map(|b| b.labels.clone()).collect())
}

pub fn reports(table: &EvalTable, modes: &[EvalMode], seen_mask: &[bool], ks: &[usize]) -> Result<Vec<EvalReport>> {
    modes.iter().map(|&m| evaluate_table(table, m, seen_mask, ks)).collect()
}

/// One CSV row per (mode, K): `mode,k,precision,recall,f1,map`.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("mode,k,precision,recall,f1,map\n");
    for r in reports {
        for (i, k) in r.k.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.mode.as_str(),
                k,
                r.precision[i],
                r.recall[i],
                r.f1[i],
                r.map
            ));
        }
    }
    out
}

/// Fraction of planted positive (image, class) pairs whose best-scoring
/// patch is one of the planted patches. Returns `(fraction, pairs)`.
pub fn localization_accuracy(evals: &[ImageEval], bags: &[&PatchBag], classes: Option<&[bool]>) -> (f64, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (e, b) in evals.iter().zip(bags) {
        for (&c, planted) in &b.planted {
            if classes.is_some_and(|m| !m[c]) || planted.is_empty() {
                continue;
            }
            let col = e.s_tilde.column(c);
            let best = (0..col.len()).fold(0, |best, i| if col[i] > col[best] { i } else { best });
            total += 1;
            if planted.contains(&best) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return (0.0, 0);
    }
    (hits as f64 / total as f64, total)
}

/// Image-averaged mean `|Δx̃|`.
pub fn mean_delta(evals: &[ImageEval]) -> f64 {
    if evals.is_empty() {
        return 0.0;
    }
    evals.iter().map(|e| e.delta_abs_mean).sum::<f64>() / evals.len() as f64
}

/// `index,row,col,score` for each patch, no header.
pub fn patch_scores_csv(scores: &[f64], grid_w: usize) -> String {
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i},{},{},{s}\n", i / grid_w, i % grid_w))
        .collect()
}

/// Binary 8-bit grayscale PGM, min-max normalized; a constant map is black.
pub fn pgm(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::dim("pgm", &[values.len()], &[height, width]));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let b = pgm(&[0.0, 1.0, 0.5, 0.25], 2, 2).unwrap();
        assert!(b.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&b[b.len() - 4..], &[0, 255, 128, 64]);
        assert!(pgm(&[1.0; 3], 2, 2).is_err());
        let flat = pgm(&[3.0; 4], 2, 2).unwrap();
        assert_eq!(&flat[flat.len() - 4..], &[0, 0, 0, 0]);
    }

    #[test]
    fn csv_has_one_row_per_patch() {
        let csv = patch_scores_csv(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 3);
        assert_eq!(csv.lines().count(), 6);
        assert_eq!(csv.lines().nth(4).unwrap(), "4,1,1,0.5");
    }
}
