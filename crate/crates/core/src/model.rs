//! The model family: stacked GCN layers, global average pooling, an
//! activation on the pooled encoding, and one linear multi-task head.
//!
//! ```text
//! H⁽⁰⁾ = X
//! H⁽ˡ⁾ = act(Â H⁽ˡ⁻¹⁾ Wₗ + bₗ)
//! pooled_g = mean of the rows of H⁽ᴸ⁾ belonging to graph g
//! logits = act_head(pooled) Wᵀ + b
//! ```
//!
//! Row `i` of `W` is the output-weight vector of task `i`; CAM, TopRep and
//! the Gini regularizer all read it.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Batch, FeatureSpec};
use crate::matrix::Matrix;
use crate::tensor::{pool_mean, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply<'t>(self, x: Tensor<'t>) -> Tensor<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_conv_layers: usize,
    pub hidden_dim: usize,
    /// 0 means "take it from the dataset".
    pub num_tasks: usize,
    /// 0 means "take it from the dataset".
    pub alphabet_size: usize,
    pub max_degree: usize,
    pub conv_activation: Activation,
    pub head_activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_conv_layers: 2,
            hidden_dim: 64,
            num_tasks: 0,
            alphabet_size: 0,
            max_degree: 5,
            conv_activation: Activation::Tanh,
            head_activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Fills the inferred fields from `ds`.
    pub fn resolved_for(&self, ds: &Dataset) -> ModelConfig {
        let mut cfg = self.clone();
        if cfg.num_tasks == 0 {
            cfg.num_tasks = ds.num_tasks();
        }
        if cfg.alphabet_size == 0 {
            cfg.alphabet_size = ds.alphabet_size();
        }
        cfg
    }

    pub fn features(&self) -> FeatureSpec {
        FeatureSpec {
            alphabet_size: self.alphabet_size,
            max_degree: self.max_degree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("model config: {what} must be >= 1")));
        if self.num_conv_layers == 0 {
            return bad("num_conv_layers");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim");
        }
        if self.num_tasks == 0 {
            return bad("num_tasks");
        }
        if self.alphabet_size == 0 {
            return bad("alphabet_size");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub conv_weights: Vec<Matrix>,
    /// `1 × hidden` each.
    pub conv_biases: Vec<Matrix>,
    /// `num_tasks × hidden`.
    pub output_weights: Matrix,
    /// `1 × num_tasks`.
    pub output_bias: Matrix,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig) -> Result<ModelParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized")
        };
        let mut conv_weights = Vec::with_capacity(cfg.num_conv_layers);
        let mut d_in = cfg.features().dim();
        for _ in 0..cfg.num_conv_layers {
            conv_weights.push(glorot(d_in, cfg.hidden_dim));
            d_in = cfg.hidden_dim;
        }
        let output_weights = glorot(cfg.num_tasks, cfg.hidden_dim);
        Ok(ModelParams {
            conv_biases: vec![Matrix::zeros(1, cfg.hidden_dim); cfg.num_conv_layers],
            conv_weights,
            output_weights,
            output_bias: Matrix::zeros(1, cfg.num_tasks),
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.conv_weights.len() {
            names.push(format!("conv.{l}.weight"));
            names.push(format!("conv.{l}.bias"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// All parameters in [`ModelParams::names`] order.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for (w, b) in self.conv_weights.iter().zip(&self.conv_biases) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.output_weights);
        out.push(&self.output_bias);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for (w, b) in self.conv_weights.iter_mut().zip(self.conv_biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.output_weights);
        out.push(&mut self.output_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }
}

/// Parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamTensors<'t> {
    pub conv_weights: Vec<Tensor<'t>>,
    pub conv_biases: Vec<Tensor<'t>>,
    pub output_weights: Tensor<'t>,
    pub output_bias: Tensor<'t>,
}

impl<'t> ParamTensors<'t> {
    pub fn trainable(tape: &'t Tape, p: &ModelParams) -> Self {
        Self::register(tape, p, true)
    }

    pub fn frozen(tape: &'t Tape, p: &ModelParams) -> Self {
        Self::register(tape, p, false)
    }

    fn register(tape: &'t Tape, p: &ModelParams, trainable: bool) -> Self {
        let leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        ParamTensors {
            conv_weights: p.conv_weights.iter().map(leaf).collect(),
            conv_biases: p.conv_biases.iter().map(leaf).collect(),
            output_weights: leaf(&p.output_weights),
            output_bias: leaf(&p.output_bias),
        }
    }

    /// Tensors in [`ModelParams::names`] order.
    pub fn tensors(&self) -> Vec<Tensor<'t>> {
        let mut out = Vec::new();
        for (w, b) in self.conv_weights.iter().zip(&self.conv_biases) {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.output_weights);
        out.push(self.output_bias);
        out
    }
}

#[derive(Clone, Debug)]
pub struct ForwardArtifacts<'t> {
    /// Post-activation output of every conv layer, first to last.
    pub per_layer_embeddings: Vec<Tensor<'t>>,
    /// Post-activation output of the last conv layer.
    pub final_embeddings: Tensor<'t>,
    /// `graphs × hidden` GAP output, before the head activation.
    pub pooled: Tensor<'t>,
    /// `graphs × tasks` logits (raw regression outputs for regression tasks).
    pub predictions: Tensor<'t>,
}

/// Adds a `1 × c` row to every row of `x`.
fn add_row<'t>(x: Tensor<'t>, row: Tensor<'t>) -> Result<Tensor<'t>> {
    let ones = x.tape().constant(Matrix::ones(x.rows(), 1));
    x.add(&ones.matmul(&row)?)
}

pub fn forward<'t>(
    tape: &'t Tape,
    params: &ParamTensors<'t>,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<ForwardArtifacts<'t>> {
    let adjacency = tape.constant(batch.adjacency.clone());
    let mut h = tape.constant(batch.features.clone());
    let mut per_layer = Vec::with_capacity(params.conv_weights.len());
    for (w, b) in params.conv_weights.iter().zip(&params.conv_biases) {
        let z = add_row(adjacency.matmul(&h.matmul(w)?)?, *b)?;
        h = cfg.conv_activation.apply(z);
        per_layer.push(h);
    }
    let pooled = h.group_mean(&batch.membership, batch.num_graphs())?;
    let encoded = cfg.head_activation.apply(pooled);
    let predictions = add_row(
        encoded.matmul(&params.output_weights.t())?,
        params.output_bias,
    )?;
    Ok(ForwardArtifacts {
        per_layer_embeddings: per_layer,
        final_embeddings: h,
        pooled,
        predictions,
    })
}

/// Row `g` is the mean of the rows of `node_embeddings` whose membership is `g`.
pub fn gap(node_embeddings: &Matrix, membership: &[usize]) -> Result<Matrix> {
    if membership.len() != node_embeddings.rows() {
        return Err(Error::contract(format!(
            "membership has {} entries for {} rows",
            membership.len(),
            node_embeddings.rows()
        )));
    }
    let groups = membership.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0; groups];
    for &g in membership {
        counts[g] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::contract("membership skips a graph index"));
    }
    Ok(pool_mean(node_embeddings, membership, &counts))
}

/// A configuration together with trained (or freshly initialized) weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Values of one forward pass, detached from any tape.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_layer_embeddings: Vec<Matrix>,
    pub pooled: Matrix,
    pub predictions: Matrix,
}

impl Evaluation {
    pub fn final_embeddings(&self) -> &Matrix {
        self.per_layer_embeddings.last().expect("at least one layer")
    }
}

const CHECKPOINT_FORMAT: &str = "grattr-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Model> {
        let params = ModelParams::init(&config)?;
        Ok(Model { config, params })
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<Evaluation> {
        let tape = Tape::new();
        let p = ParamTensors::frozen(&tape, &self.params);
        let out = forward(&tape, &p, &self.config, batch)?;
        Ok(Evaluation {
            per_layer_embeddings: out.per_layer_embeddings.iter().map(|t| t.value()).collect(),
            pooled: out.pooled.value(),
            predictions: out.predictions.value(),
        })
    }

    pub fn predict(&self, batch: &Batch) -> Result<Matrix> {
        Ok(self.evaluate(batch)?.predictions)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        let model = Model {
            config: ck.config,
            params: ck.params,
        };
        let expected = ModelParams::init(&model.config)?;
        for ((name, got), want) in model
            .params
            .names()
            .iter()
            .zip(model.params.matrices())
            .zip(expected.matrices())
        {
            if got.shape() != want.shape() {
                return Err(Error::contract(format!(
                    "checkpoint parameter {name} has shape {:?}, config implies {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_batch, Edge, Graph};

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            num_tasks: 2,
            alphabet_size: 4,
            max_degree: 5,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = ModelParams::init(&cfg()).unwrap();
        let b = ModelParams::init(&cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.conv_weights[0].shape(), (10, 8));
        assert_eq!(a.conv_weights[1].shape(), (8, 8));
        assert_eq!(a.output_weights.shape(), (2, 8));
        assert!(a.conv_biases.iter().all(|b| b.as_slice().iter().all(|&x| x == 0.0)));
        assert!(a.output_bias.as_slice().iter().all(|&x| x == 0.0));
        let limit = (6.0f64 / 18.0).sqrt();
        assert!(a.conv_weights[0].max_abs() <= limit);
    }

    #[test]
    fn default_hidden_dim_gives_ten_by_sixty_four_first_layer() {
        let c = ModelConfig {
            num_tasks: 1,
            alphabet_size: 4,
            ..ModelConfig::default()
        };
        assert_eq!(ModelParams::init(&c).unwrap().conv_weights[0].shape(), (10, 64));
    }

    #[test]
    fn zero_head_predicts_bias() {
        let mut m = Model::init(cfg()).unwrap();
        m.params.output_weights = Matrix::zeros(2, 8);
        m.params.output_bias = Matrix::row_vector(&[0.25, -1.5]);
        let g = Graph::new(vec![0, 1, 2], vec![Edge::single(0, 1), Edge::single(1, 2)]).unwrap();
        let b = make_batch(&[&g, &g], cfg().features()).unwrap();
        let p = m.predict(&b).unwrap();
        assert_eq!(p.row(0), &[0.25, -1.5]);
        assert_eq!(p.row(1), &[0.25, -1.5]);
    }

    #[test]
    fn single_node_pool_is_its_embedding() {
        let m = Model::init(cfg()).unwrap();
        let g = Graph::new(vec![3], vec![]).unwrap();
        let e = m.evaluate(&make_batch(&[&g], cfg().features()).unwrap()).unwrap();
        assert_eq!(e.pooled.row(0), e.final_embeddings().row(0));
    }

    #[test]
    fn gap_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(
            gap(&x, &[0, 0, 1]).unwrap(),
            Matrix::from_rows(&[[2.0, 3.0], [5.0, 6.0]])
        );
        assert_eq!(gap(&x, &[0, 0, 0]).unwrap(), Matrix::from_rows(&[[3.0, 4.0]]));
        let same = Matrix::from_rows(&[[1.5, -2.0], [1.5, -2.0]]);
        assert_eq!(gap(&same, &[0, 0]).unwrap().row(0), same.row(0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Model::init(cfg()).unwrap();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.params.output_weights = Matrix::zeros(3, 8);
        assert!(Model::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.num_conv_layers = 0;
        assert!(Model::init(c).is_err());
    }
}
