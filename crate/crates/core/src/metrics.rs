//! Scoring primitives and similarity diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Area under the ROC curve via the rank-sum statistic, with average ranks
/// for tied scores (ties count one half).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "auroc: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedScore(
            "auroc needs both positive and negative labels".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedScore("auroc: NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "pearson: lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedScore("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedScore("pearson: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub entries: Matrix,
    pub row_labels: Vec<String>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.entries.rows()
    }
}

/// Pairwise cosine similarity of the rows of `rows`. Pairs involving an
/// all-zero row are 0, including that row's diagonal entry.
pub fn cosine_matrix(rows: &Matrix) -> SimilarityMatrix {
    let k = rows.rows();
    let norms: Vec<f64> = (0..k)
        .map(|i| rows.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut entries = Matrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = if norms[a] == 0.0 || norms[b] == 0.0 {
                0.0
            } else if a == b {
                1.0
            } else {
                let dot: f64 = rows.row(a).iter().zip(rows.row(b)).map(|(x, y)| x * y).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            entries.set(a, b, v);
            entries.set(b, a, v);
        }
    }
    SimilarityMatrix {
        entries,
        row_labels: (0..k).map(|i| i.to_string()).collect(),
    }
}

/// Mean absolute off-diagonal similarity.
pub fn off_diag_mean_abs(sim: &SimilarityMatrix) -> Result<f64> {
    let k = sim.size();
    if k < 2 {
        return Err(Error::contract("off_diag_mean_abs needs at least 2 rows"));
    }
    let mut sum = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                sum += sim.entries.get(a, b).abs();
            }
        }
    }
    Ok(sum / (k * (k - 1)) as f64)
}
