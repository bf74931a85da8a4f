//! Batch Representation Orthonormalization (BRO) and Gini output-weight
//! regularization.
//!
//! BRO penalizes, per graph, how far the node embeddings `H_g` of the last
//! convolution are from having orthonormal rows:
//!
//! ```text
//! bro_g = (λ / 2) · ‖H_g H_gᵀ − I‖_F
//! ```
//!
//! and averages over the graphs of a batch.
//!
//! The Gini coefficient of an output-weight row `w` (of length `n`, taken in
//! absolute value `v = |w|`) is
//!
//! ```text
//! gini(w) = Σ_j Σ_j' |v_j − v_j'| / (2 (n² − n) · mean(v))
//! ```
//!
//! which is 0 for a constant row and 1 for a one-hot row. With `g` the mean
//! over task rows, the task loss `L` is replaced by `L / g^m`, so the
//! optimizer can lower the loss by concentrating each row on few entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{Tape, Tensor};

/// Rows whose mean magnitude is below this count as all-zero (gini 0).
const ZERO_ROW_MEAN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    None,
    Bro,
    Gini,
    Both,
}

impl RegularizerMode {
    pub const ALL: [RegularizerMode; 4] = [
        RegularizerMode::None,
        RegularizerMode::Bro,
        RegularizerMode::Gini,
        RegularizerMode::Both,
    ];

    pub fn uses_bro(self) -> bool {
        matches!(self, RegularizerMode::Bro | RegularizerMode::Both)
    }

    pub fn uses_gini(self) -> bool {
        matches!(self, RegularizerMode::Gini | RegularizerMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerMode::None => "none",
            RegularizerMode::Bro => "bro",
            RegularizerMode::Gini => "gini",
            RegularizerMode::Both => "both",
        }
    }
}

impl std::fmt::Display for RegularizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    /// BRO strength.
    pub lambda: f64,
    /// Gini exponent.
    pub m: f64,
    /// Lower clamp on `g` before computing `L / g^m`.
    pub g_floor: f64,
    pub mode: RegularizerMode,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda: 0.001,
            m: 5.0,
            g_floor: 1e-3,
            mode: RegularizerMode::None,
        }
    }
}

impl RegularizerConfig {
    pub fn with_mode(mode: RegularizerMode) -> Self {
        RegularizerConfig {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.m, self.g_floor].iter().any(|v| v.is_nan())
            || self.lambda < 0.0
            || self.m < 0.0
            || self.g_floor <= 0.0
        {
            return Err(Error::contract(
                "regularizers: lambda and m must be >= 0 and g_floor > 0",
            ));
        }
        Ok(())
    }
}

/// Mean over graphs of `(λ/2)·‖H_g H_gᵀ − I‖_F`, where graph `g` owns rows
/// `node_offsets[g]..node_offsets[g + 1]` (the last graph runs to the end).
pub fn bro_loss<'t>(
    final_embeddings: Tensor<'t>,
    node_offsets: &[usize],
    lambda: f64,
) -> Result<Tensor<'t>> {
    let tape = final_embeddings.tape();
    if node_offsets.is_empty() {
        return Err(Error::contract("bro_loss needs at least one graph"));
    }
    let total = final_embeddings.rows();
    let mut sum: Option<Tensor<'t>> = None;
    for (g, &start) in node_offsets.iter().enumerate() {
        let end = node_offsets.get(g + 1).copied().unwrap_or(total);
        let h = final_embeddings.rows_range(start, end)?;
        let gram = h.matmul(&h.t())?;
        let eye = tape.constant(Matrix::identity(end - start));
        let norm = gram.sub(&eye)?.frobenius()?;
        sum = Some(match sum {
            Some(acc) => acc.add(&norm)?,
            None => norm,
        });
    }
    let sum = sum.expect("non-empty");
    Ok(sum.scale(lambda / 2.0 / node_offsets.len() as f64))
}

/// Gini coefficient of `|row|` for a `1 × n` tensor, `n ≥ 2`.
pub fn gini_row<'t>(row: Tensor<'t>) -> Result<Tensor<'t>> {
    let tape = row.tape();
    let n = row.cols();
    if row.rows() != 1 || n < 2 {
        return Err(Error::contract(format!(
            "gini_row needs a 1 x n row with n >= 2, got {:?}",
            row.shape()
        )));
    }
    let v = row.abs();
    let values = v.value();
    let mean = values.sum() / n as f64;
    if mean < ZERO_ROW_MEAN {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    // The coefficient is scale-invariant, so dividing by the row maximum
    // changes no gradient and makes one-hot rows come out exactly 1.
    let peak = tape.constant(Matrix::scalar(values.max_abs()));
    let v = v.div_scalar(&peak)?;
    // Row i of `spread` is v, so spread − spreadᵀ holds every v_j − v_i.
    let spread = tape.constant(Matrix::ones(n, 1)).matmul(&v)?;
    let pair_sum = spread.sub(&spread.t())?.abs().sum();
    pair_sum
        .scale(1.0 / (2.0 * (n - 1) as f64))
        .div_scalar(&v.sum())
}

/// Mean Gini coefficient over the task rows of the output weights.
pub fn gini_mean<'t>(output_weights: Tensor<'t>) -> Result<Tensor<'t>> {
    let tasks = output_weights.rows();
    if tasks == 0 {
        return Err(Error::contract("gini_mean needs at least one task row"));
    }
    let mut sum: Option<Tensor<'t>> = None;
    for t in 0..tasks {
        let g = gini_row(output_weights.rows_range(t, t + 1)?)?;
        sum = Some(match sum {
            Some(acc) => acc.add(&g)?,
            None => g,
        });
    }
    Ok(sum.expect("non-empty").scale(1.0 / tasks as f64))
}

/// Plain-value Gini mean of a weight matrix.
pub fn gini_mean_of(output_weights: &Matrix) -> Result<f64> {
    let tape = Tape::new();
    Ok(gini_mean(tape.constant(output_weights.clone()))?.item())
}

/// The training objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss<'t> {
    pub total: Tensor<'t>,
    pub task: Tensor<'t>,
    pub bro: Tensor<'t>,
    /// Unclamped mean Gini coefficient of the output weights.
    pub gini: Tensor<'t>,
}

/// Combines the task loss with the configured regularizers:
///
/// * `none`: `L`
/// * `bro`: `L + bro`
/// * `gini`: `L / max(g, g_floor)^m`
/// * `both`: `L / max(g, g_floor)^m + bro`
///
/// BRO and `g` are always evaluated (for logging); they only reach the
/// gradient when the mode uses them.
pub fn total_loss<'t>(
    task_loss: Tensor<'t>,
    output_weights: Tensor<'t>,
    final_embeddings: Tensor<'t>,
    node_offsets: &[usize],
    cfg: &RegularizerConfig,
) -> Result<TotalLoss<'t>> {
    let tape = task_loss.tape();
    let bro = bro_loss(final_embeddings, node_offsets, cfg.lambda)?;
    let gini = if output_weights.cols() >= 2 {
        gini_mean(output_weights)?
    } else {
        tape.constant(Matrix::scalar(0.0))
    };
    let mut total = task_loss;
    if cfg.mode.uses_gini() {
        total = divide_by_gini(total, gini, cfg)?;
    }
    if cfg.mode.uses_bro() {
        total = total.add(&bro)?;
    }
    Ok(TotalLoss {
        total,
        task: task_loss,
        bro,
        gini,
    })
}

/// `loss / max(g, floor)^m`; below the floor `g` is a constant.
pub fn divide_by_gini<'t>(
    loss: Tensor<'t>,
    g: Tensor<'t>,
    cfg: &RegularizerConfig,
) -> Result<Tensor<'t>> {
    let clamped = if g.item() < cfg.g_floor {
        loss.tape().constant(Matrix::scalar(cfg.g_floor))
    } else {
        g
    };
    loss.div_scalar(&clamped.powf(cfg.m))
}
