use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[gold][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Classes absent from both gold and predictions; they score F1 = 0.
    pub absent_classes: Vec<usize>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Accuracy, per-class precision/recall/F1 and their unweighted mean over
/// `num_classes` classes.
pub fn compute_metrics(preds: &[usize], gold: &[usize], num_classes: usize) -> Result<Metrics> {
    if preds.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            gold.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Config("cannot score an empty prediction set".into()));
    }
    let k = preds.iter().chain(gold).map(|&c| c + 1).max().unwrap_or(0).max(num_classes);
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &g) in preds.iter().zip(gold) {
        confusion[g][p] += 1;
    }
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut absent_classes = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        let gold_c: usize = confusion[c].iter().sum();
        let pred_c: usize = confusion.iter().map(|r| r[c]).sum();
        if gold_c == 0 && pred_c == 0 {
            absent_classes.push(c);
        }
        precision.push(ratio(tp, pred_c));
        recall.push(ratio(tp, gold_c));
        f1.push(ratio(2 * tp, gold_c + pred_c));
    }
    if !absent_classes.is_empty() {
        log::warn!("classes {absent_classes:?} never occur; counted with F1 = 0");
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        n: preds.len(),
        accuracy: ratio(correct, preds.len()),
        macro_f1: f1.iter().sum::<f64>() / k as f64,
        precision,
        recall,
        f1,
        confusion,
        absent_classes,
    })
}
