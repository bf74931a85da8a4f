//! Node attributions for a task `j` of a trained model.
//!
//! * CAM scores node `i` as `w_jᵀ h_i`, with `h_i` the last-layer embedding
//!   and `w_j` the task's output-weight row.
//! * TopRep is CAM with `w_j` reduced to its largest-magnitude entry.
//! * GradCAM weights each embedding channel by the node-averaged gradient of
//!   the task logit, per layer; `All` averages the layer maps.
//! * Random draws i.i.d. scores in `[-1, 1]`.
//!
//! Scores are signed: positive pushes the logit up.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{make_batch, Graph};
use crate::matrix::Matrix;
use crate::model::{forward, Model, ParamTensors};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cam,
    #[serde(rename = "toprep")]
    TopRep,
    GradcamLast,
    GradcamAll,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Cam,
        Method::TopRep,
        Method::GradcamLast,
        Method::GradcamAll,
        Method::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cam => "cam",
            Method::TopRep => "toprep",
            Method::GradcamLast => "gradcam_last",
            Method::GradcamAll => "gradcam_all",
            Method::Random => "random",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCamScope {
    Last,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub graph: usize,
    pub method: Method,
    pub task: usize,
    pub scores: Vec<f64>,
}

impl AttributionMap {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// `score_i = w · h_i`.
pub fn cam(embeddings: &Matrix, w_row: &[f64], task: usize) -> Result<AttributionMap> {
    scored(embeddings, w_row, task, Method::Cam)
}

fn scored(embeddings: &Matrix, w_row: &[f64], task: usize, method: Method) -> Result<AttributionMap> {
    if embeddings.cols() != w_row.len() {
        return Err(Error::contract(format!(
            "embedding width {} differs from weight row length {}",
            embeddings.cols(),
            w_row.len()
        )));
    }
    let scores = (0..embeddings.rows())
        .map(|i| embeddings.row(i).iter().zip(w_row).map(|(h, w)| h * w).sum())
        .collect();
    Ok(AttributionMap {
        graph: 0,
        method,
        task,
        scores,
    })
}

/// Keeps only the largest-magnitude entry (lowest index on ties), sign intact.
pub fn top_entry_mask(w_row: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, w) in w_row.iter().enumerate() {
        if w.abs() > w_row[best].abs() {
            best = i;
        }
    }
    let mut out = vec![0.0; w_row.len()];
    if let Some(&w) = w_row.get(best) {
        out[best] = w;
    }
    out
}

pub fn toprep(embeddings: &Matrix, w_row: &[f64], task: usize) -> Result<AttributionMap> {
    if w_row.is_empty() {
        return Err(Error::contract("toprep needs a non-empty weight row"));
    }
    scored(embeddings, &top_entry_mask(w_row), task, Method::TopRep)
}

/// Gradient-weighted CAM on the task logit.
pub fn gradcam(model: &Model, graph: &Graph, task: usize, scope: GradCamScope) -> Result<AttributionMap> {
    check_task(model, task)?;
    let batch = make_batch(&[graph], model.config.features())?;
    let tape = Tape::new();
    let p = ParamTensors::trainable(&tape, &model.params);
    let out = forward(&tape, &p, &model.config, &batch)?;
    let mut pick = Matrix::zeros(model.config.num_tasks, 1);
    pick.set(task, 0, 1.0);
    let logit = out.predictions.matmul(&tape.constant(pick))?;
    let grads = tape.backward(logit)?;

    let layers = match scope {
        GradCamScope::Last => &out.per_layer_embeddings[out.per_layer_embeddings.len() - 1..],
        GradCamScope::All => &out.per_layer_embeddings[..],
    };
    let n = graph.num_nodes();
    let mut scores = vec![0.0; n];
    for layer in layers {
        let h = layer.value();
        let g = grads.wrt(*layer);
        let alpha: Vec<f64> = (0..h.cols())
            .map(|k| (0..n).map(|i| g.get(i, k)).sum::<f64>() / n as f64)
            .collect();
        for (i, s) in scores.iter_mut().enumerate() {
            *s += h.row(i).iter().zip(&alpha).map(|(x, a)| x * a).sum::<f64>();
        }
    }
    let k = layers.len() as f64;
    for s in &mut scores {
        *s /= k;
    }
    let method = match scope {
        GradCamScope::Last => Method::GradcamLast,
        GradCamScope::All => Method::GradcamAll,
    };
    Ok(AttributionMap {
        graph: 0,
        method,
        task,
        scores,
    })
}

pub fn random_attr<R: Rng + ?Sized>(graph: &Graph, rng: &mut R) -> AttributionMap {
    AttributionMap {
        graph: 0,
        method: Method::Random,
        task: 0,
        scores: (0..graph.num_nodes())
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect(),
    }
}

fn check_task(model: &Model, task: usize) -> Result<()> {
    if task >= model.config.num_tasks {
        return Err(Error::contract(format!(
            "task {task} out of range for {} tasks",
            model.config.num_tasks
        )));
    }
    Ok(())
}

/// Runs `method` for `task` on one graph.
pub fn attribute<R: Rng + ?Sized>(
    model: &Model,
    graph: &Graph,
    method: Method,
    task: usize,
    rng: &mut R,
) -> Result<AttributionMap> {
    check_task(model, task)?;
    let w = model.params.output_weights.row(task);
    let embeddings = || -> Result<Matrix> {
        let batch = make_batch(&[graph], model.config.features())?;
        Ok(model.evaluate(&batch)?.final_embeddings().clone())
    };
    let mut map = match method {
        Method::Cam => cam(&embeddings()?, w, task)?,
        Method::TopRep => toprep(&embeddings()?, w, task)?,
        Method::GradcamLast => gradcam(model, graph, task, GradCamScope::Last)?,
        Method::GradcamAll => gradcam(model, graph, task, GradCamScope::All)?,
        Method::Random => random_attr(graph, rng),
    };
    map.task = task;
    if map.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{method} attribution"),
            coordinate: map.scores.iter().position(|s| !s.is_finite()).unwrap_or(0),
        });
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;
    use crate::model::{Activation, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn h() -> Matrix {
        Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.25], [3.0, 0.0]])
    }

    #[test]
    fn cam_with_basis_vector_selects_column() {
        let m = cam(&h(), &[0.0, 1.0], 0).unwrap();
        assert_eq!(m.scores, h().column(1));
    }

    #[test]
    fn cam_dot_product() {
        let m = cam(&Matrix::from_rows(&[[1.0, 2.0]]), &[0.5, -1.0], 0).unwrap();
        assert_eq!(m.scores, vec![-1.5]);
        assert_eq!(cam(&h(), &[0.0, 0.0], 0).unwrap().scores, vec![0.0; 3]);
    }

    #[test]
    fn toprep_keeps_largest_magnitude() {
        let m = toprep(&Matrix::from_rows(&[[1.0, 2.0]]), &[0.5, -1.0], 0).unwrap();
        assert_eq!(m.scores, vec![-2.0]);
        assert_eq!(top_entry_mask(&[0.5, -1.0]), vec![0.0, -1.0]);
        assert_eq!(top_entry_mask(&[0.7, -0.7]), vec![0.7, 0.0]);
        let one_hot = [0.0, 3.0];
        assert_eq!(
            toprep(&h(), &one_hot, 0).unwrap().scores,
            cam(&h(), &one_hot, 0).unwrap().scores
        );
    }

    fn toy_model(layers: usize, act: Activation) -> Model {
        Model::init(ModelConfig {
            num_conv_layers: layers,
            hidden_dim: 5,
            num_tasks: 2,
            alphabet_size: 3,
            max_degree: 3,
            conv_activation: act,
            head_activation: act,
            seed: 11,
        })
        .unwrap()
    }

    fn triangle_tail() -> Graph {
        Graph::new(
            vec![0, 1, 2, 1],
            vec![
                Edge::single(0, 1),
                Edge::single(1, 2),
                Edge::single(2, 0),
                Edge::single(2, 3),
            ],
        )
        .unwrap()
    }

    #[test]
    fn gradcam_scopes_agree_for_one_layer() {
        let m = toy_model(1, Activation::Tanh);
        let g = triangle_tail();
        let last = gradcam(&m, &g, 1, GradCamScope::Last).unwrap();
        let all = gradcam(&m, &g, 1, GradCamScope::All).unwrap();
        assert_eq!(last.scores, all.scores);
    }

    #[test]
    fn gradcam_on_linear_model_is_cam_over_n() {
        // With identity activations ∂y/∂h_ik = w_k / n for every node, so the
        // channel weights are w / n and the map is CAM scaled by 1/n.
        let m = toy_model(2, Activation::Identity);
        let g = triangle_tail();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = attribute(&m, &g, Method::Cam, 0, &mut rng).unwrap();
        let gc = gradcam(&m, &g, 0, GradCamScope::Last).unwrap();
        let n = g.num_nodes() as f64;
        for (a, b) in c.scores.iter().zip(&gc.scores) {
            assert!((a / n - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn gradcam_zero_head_is_zero_map() {
        let mut m = toy_model(2, Activation::Tanh);
        m.params.output_weights = Matrix::zeros(2, 5);
        let map = gradcam(&m, &triangle_tail(), 0, GradCamScope::All).unwrap();
        assert!(map.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn random_is_seeded_and_bounded() {
        let g = triangle_tail();
        let a = random_attr(&g, &mut ChaCha8Rng::seed_from_u64(5));
        let b = random_attr(&g, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.scores.len(), 4);
        assert!(a.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn out_of_range_task_is_rejected() {
        let m = toy_model(1, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(attribute(&m, &triangle_tail(), Method::Cam, 2, &mut rng).is_err());
    }

    #[test]
    fn json_line_shape() {
        let map = AttributionMap {
            graph: 3,
            method: Method::GradcamAll,
            task: 0,
            scores: vec![0.5, -1.0],
        };
        assert_eq!(
            map.to_json_line().unwrap(),
            r#"{"graph":3,"method":"gradcam_all","task":0,"scores":[0.5,-1.0]}"#
        );
    }
}
