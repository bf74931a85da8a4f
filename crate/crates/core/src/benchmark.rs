//! Planted-motif attribution benchmarks and the trial sweep.
//!
//! Three synthetic tasks come with exact node-level ground truth:
//!
//! * `ring_motif`: positives carry a 6-cycle of label-0 nodes; negatives a
//!   path of 3 to 5 label-0 nodes, so counting label 0 is not enough.
//! * `triple_motif`: positive iff three motifs are all present (a label-1
//!   triangle, a bonded label-2 pair, a label-3 node with two label-0
//!   neighbors); negatives plant a strict subset.
//! * `additive_score`: regression target `Σ c(label_i)` with per-node truth
//!   `c(label_i)`.
//!
//! [`run_trials`] trains one model per (task, constraint, seed), scores the
//! model on a held-out 20 % and every attribution method on the held-out
//! graphs, and summarizes each combination.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionMap, Method};
use crate::dataset::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::graph::{make_batch, Edge, Graph};
use crate::metrics::{auroc, cosine_matrix, off_diag_mean_abs, pearson};
use crate::model::{Model, ModelConfig};
use crate::optim::{train_graphs, TrainConfig};
use crate::regularizers::{gini_mean_of, RegularizerConfig, RegularizerMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    RingMotif,
    TripleMotif,
    AdditiveScore,
}

impl SyntheticTask {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticTask::RingMotif => "ring_motif",
            SyntheticTask::TripleMotif => "triple_motif",
            SyntheticTask::AdditiveScore => "additive_score",
        }
    }

    pub fn task_kind(self) -> TaskKind {
        match self {
            SyntheticTask::AdditiveScore => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    }
}

pub const DEFAULT_CONTRIBUTIONS: [f64; 4] = [1.0, -0.5, 0.2, -1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: SyntheticTask,
    pub num_graphs: usize,
    /// Inclusive node-count range of generated graphs.
    pub size_range: (usize, usize),
    pub alphabet_size: usize,
    /// Per-label contribution, `additive_score` only.
    pub contribution_table: Vec<f64>,
    /// `triple_motif` only: add one presence task per motif after the
    /// all-three task.
    pub per_motif_tasks: bool,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: SyntheticTask::RingMotif,
            num_graphs: 400,
            size_range: (10, 20),
            alphabet_size: 4,
            contribution_table: DEFAULT_CONTRIBUTIONS.to_vec(),
            per_motif_tasks: false,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn new(kind: SyntheticTask) -> Self {
        TaskSpec {
            kind,
            ..Self::default()
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }

    pub fn generate(&self) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.kind {
            SyntheticTask::RingMotif => gen_ring_motif(self, &mut rng),
            SyntheticTask::TripleMotif => gen_triple_motif(self, &mut rng),
            SyntheticTask::AdditiveScore => gen_additive(self, &mut rng),
        }
    }

    fn check_common(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi {
            return Err(Error::contract(format!("invalid size_range ({lo}, {hi})")));
        }
        if self.alphabet_size == 0 {
            return Err(Error::contract("alphabet_size must be >= 1"));
        }
        Ok(())
    }

    fn check_balanced(&self) -> Result<()> {
        if !self.num_graphs.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "{} needs an even num_graphs for exact class balance, got {}",
                self.name(),
                self.num_graphs
            )));
        }
        Ok(())
    }
}

/// Derives an independent seed for sub-stream `stream` of `base`
/// (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Default)]
struct Builder {
    labels: Vec<usize>,
    edges: Vec<Edge>,
}

impl Builder {
    /// Random recursive tree: node `i` links to a uniform earlier node.
    fn tree<R: Rng>(rng: &mut R, n: usize, alphabet: usize) -> Builder {
        let mut b = Builder::default();
        for i in 0..n {
            b.labels.push(rng.gen_range(0..alphabet));
            if i > 0 {
                b.edges.push(Edge::single(rng.gen_range(0..i), i));
            }
        }
        b
    }

    /// Appends a motif and links a random motif node to a random node that
    /// existed before. Returns the motif's node ids.
    fn splice<R: Rng>(&mut self, rng: &mut R, labels: &[usize], edges: &[(usize, usize)]) -> Vec<usize> {
        let existing = self.labels.len();
        let start = existing;
        self.labels.extend_from_slice(labels);
        for &(a, b) in edges {
            self.edges.push(Edge::single(start + a, start + b));
        }
        if existing > 0 {
            let anchor = rng.gen_range(0..existing);
            let port = start + rng.gen_range(0..labels.len());
            self.edges.push(Edge::single(anchor, port));
        }
        (start..start + labels.len()).collect()
    }

    /// Shuffles node ids and builds the graph.
    fn finish<R: Rng>(self, rng: &mut R, truth: Vec<f64>, targets: Vec<Option<f64>>) -> Result<Graph> {
        let n = self.labels.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let g = Graph::new(self.labels, self.edges)?
            .with_ground_truth(truth)?
            .with_targets(targets);
        g.permuted(&perm)
    }
}

fn balanced_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    let mut v: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    v.shuffle(rng);
    v
}

const RING: [(usize, usize); 6] = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)];

pub fn gen_ring_motif<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Result<Dataset> {
    spec.check_common()?;
    spec.check_balanced()?;
    if spec.size_range.0 < 8 {
        return Err(Error::contract("ring_motif needs size_range min >= 8"));
    }
    let mut graphs = Vec::with_capacity(spec.num_graphs);
    for positive in balanced_labels(rng, spec.num_graphs) {
        let total = rng.gen_range(spec.size_range.0..=spec.size_range.1);
        let motif_len = if positive { 6 } else { rng.gen_range(3..=5) };
        let mut b = Builder::tree(rng, total - motif_len, spec.alphabet_size);
        let motif = if positive {
            b.splice(rng, &[0; 6], &RING)
        } else {
            let path: Vec<(usize, usize)> = (1..motif_len).map(|i| (i - 1, i)).collect();
            // Attach through the path's first node.
            let start = b.labels.len();
            let anchor = rng.gen_range(0..start);
            b.labels.extend(std::iter::repeat_n(0, motif_len));
            for (a, c) in path {
                b.edges.push(Edge::single(start + a, start + c));
            }
            b.edges.push(Edge::single(anchor, start));
            Vec::new()
        };
        let mut truth = vec![0.0; total];
        for i in motif {
            truth[i] = 1.0;
        }
        let y = if positive { 1.0 } else { 0.0 };
        graphs.push(b.finish(rng, truth, vec![Some(y)])?);
    }
    Ok(Dataset {
        graphs,
        task_names: vec!["has_ring".into()],
        task_kinds: vec![TaskKind::Classification],
        provenance: format!("synthetic ring_motif, seed {}", spec.seed),
    })
}

const MOTIF_LABELS: [&[usize]; 3] = [&[1, 1, 1], &[2, 2], &[3, 0, 0]];
const MOTIF_EDGES: [&[(usize, usize)]; 3] = [&[(0, 1), (1, 2), (2, 0)], &[(0, 1)], &[(0, 1), (0, 2)]];
const MAX_ATTEMPTS: usize = 10_000;

/// Node sets of every instance of each triple-task motif in `g`.
pub fn find_motifs(g: &Graph) -> [Vec<BTreeSet<usize>>; 3] {
    let labels = g.labels();
    let nbrs = g.neighbors();
    let mut found: [Vec<BTreeSet<usize>>; 3] = Default::default();
    for a in 0..g.num_nodes() {
        for &b in nbrs[a].iter().filter(|&&b| b > a) {
            if labels[a] == 1 && labels[b] == 1 {
                for &c in nbrs[b].iter().filter(|&&c| c > b) {
                    if labels[c] == 1 && nbrs[a].contains(&c) {
                        found[0].push([a, b, c].into_iter().collect());
                    }
                }
            }
            if labels[a] == 2 && labels[b] == 2 {
                found[1].push([a, b].into_iter().collect());
            }
        }
        if labels[a] == 3 {
            let zeros: Vec<usize> = nbrs[a].iter().copied().filter(|&v| labels[v] == 0).collect();
            if zeros.len() >= 2 {
                found[2].push(std::iter::once(a).chain(zeros).collect());
            }
        }
    }
    found
}

pub fn gen_triple_motif<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Result<Dataset> {
    spec.check_common()?;
    spec.check_balanced()?;
    if spec.alphabet_size < 4 {
        return Err(Error::contract("triple_motif needs alphabet_size >= 4"));
    }
    let mut graphs = Vec::with_capacity(spec.num_graphs);
    for positive in balanced_labels(rng, spec.num_graphs) {
        let planted: [bool; 3] = if positive {
            [true; 3]
        } else {
            // Uniform over the seven strict subsets.
            let code = rng.gen_range(0..7u8);
            [code & 1 != 0, code & 2 != 0, code & 4 != 0]
        };
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let total = rng.gen_range(spec.size_range.0..=spec.size_range.1);
            let motif_nodes: usize = (0..3).filter(|&k| planted[k]).map(|k| MOTIF_LABELS[k].len()).sum();
            let tree = total.saturating_sub(motif_nodes).max(2);
            let mut b = Builder::tree(rng, tree, spec.alphabet_size);
            let mut planted_nodes = BTreeSet::new();
            for k in 0..3 {
                if planted[k] {
                    planted_nodes.extend(b.splice(rng, MOTIF_LABELS[k], MOTIF_EDGES[k]));
                }
            }
            let candidate = Graph::new(b.labels.clone(), b.edges.clone())?;
            let found = find_motifs(&candidate);
            let clean = (0..3).all(|k| {
                !found[k].is_empty() == planted[k]
                    && found[k].iter().all(|inst| inst.is_subset(&planted_nodes))
            });
            if clean {
                accepted = Some((b, planted_nodes));
                break;
            }
        }
        let (b, planted_nodes) = accepted.ok_or_else(|| {
            Error::contract("triple_motif: could not draw a graph without accidental motifs")
        })?;
        let n = b.labels.len();
        let mut truth = vec![0.0; n];
        if positive {
            for &i in &planted_nodes {
                truth[i] = 1.0;
            }
        }
        let flag = |p: bool| Some(if p { 1.0 } else { 0.0 });
        let mut targets = vec![flag(positive)];
        if spec.per_motif_tasks {
            targets.extend(planted.iter().map(|&p| flag(p)));
        }
        graphs.push(b.finish(rng, truth, targets)?);
    }
    let mut task_names = vec!["all_three".to_string()];
    if spec.per_motif_tasks {
        task_names.extend(["has_triangle", "has_pair", "has_star"].map(String::from));
    }
    Ok(Dataset {
        task_kinds: vec![TaskKind::Classification; task_names.len()],
        task_names,
        graphs,
        provenance: format!("synthetic triple_motif, seed {}", spec.seed),
    })
}

pub fn gen_additive<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Result<Dataset> {
    spec.check_common()?;
    if spec.contribution_table.len() != spec.alphabet_size {
        return Err(Error::contract(format!(
            "contribution_table has {} entries for alphabet size {}",
            spec.contribution_table.len(),
            spec.alphabet_size
        )));
    }
    let mut graphs = Vec::with_capacity(spec.num_graphs);
    for _ in 0..spec.num_graphs {
        let n = rng.gen_range(spec.size_range.0..=spec.size_range.1);
        let mut b = Builder::tree(rng, n, spec.alphabet_size);
        // Occasionally close a ring.
        if n >= 3 && rng.gen_bool(0.3) {
            let a = rng.gen_range(0..n);
            let c = rng.gen_range(0..n);
            let key = (a.min(c), a.max(c));
            if a != c && !b.edges.iter().any(|e| e.key() == key) {
                b.edges.push(Edge::single(a, c));
            }
        }
        let truth: Vec<f64> = b.labels.iter().map(|&l| spec.contribution_table[l]).collect();
        let y: f64 = truth.iter().sum();
        graphs.push(b.finish(rng, truth, vec![Some(y)])?);
    }
    Ok(Dataset {
        graphs,
        task_names: vec!["additive_score".into()],
        task_kinds: vec![TaskKind::Regression],
        provenance: format!("synthetic additive_score, seed {}", spec.seed),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttributionScore {
    pub mean: f64,
    pub scored: usize,
    pub excluded: usize,
}

/// Per-graph attribution quality averaged over graphs. Classification
/// scores node AUROC against the truth mask on positive graphs only;
/// regression scores Pearson correlation against per-node truth. Graphs
/// whose truth is constant are excluded; a constant score vector has
/// correlation 0.
pub fn score_attribution(
    maps: &[AttributionMap],
    graphs: &[&Graph],
    kind: TaskKind,
) -> Result<AttributionScore> {
    if maps.len() != graphs.len() {
        return Err(Error::contract(format!(
            "{} maps for {} graphs",
            maps.len(),
            graphs.len()
        )));
    }
    let (mut sum, mut scored, mut excluded) = (0.0, 0usize, 0usize);
    for (map, g) in maps.iter().zip(graphs) {
        let truth = g
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::contract("graph without ground truth"))?;
        if map.scores.len() != truth.len() {
            return Err(Error::contract("attribution length differs from node count"));
        }
        match kind {
            TaskKind::Classification => {
                let positive = g.targets.get(map.task).copied().flatten().is_some_and(|y| y > 0.5);
                if !positive {
                    continue;
                }
                let mask: Vec<bool> = truth.iter().map(|&t| t > 0.5).collect();
                match auroc(&map.scores, &mask) {
                    Ok(a) => {
                        sum += a;
                        scored += 1;
                    }
                    Err(Error::UndefinedScore(_)) => {
                        log::warn!("skipping graph {} with a constant truth mask", map.graph);
                        excluded += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            TaskKind::Regression => {
                let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
                if truth.len() < 2 || constant(truth) {
                    log::warn!("skipping graph {} with constant per-node truth", map.graph);
                    excluded += 1;
                    continue;
                }
                sum += if constant(&map.scores) {
                    0.0
                } else {
                    pearson(&map.scores, truth)?
                };
                scored += 1;
            }
        }
    }
    if scored == 0 {
        return Err(Error::UndefinedScore("no scorable graphs".into()));
    }
    Ok(AttributionScore {
        mean: sum / scored as f64,
        scored,
        excluded,
    })
}

/// Benchmark training defaults. With about 320 training graphs per trial
/// these give enough optimizer steps for both regularizers to act.
pub const BENCHMARK_LR: f64 = 2e-3;
pub const BENCHMARK_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialPlan {
    pub tasks: Vec<TaskSpec>,
    pub constraints: Vec<RegularizerMode>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    /// Test graphs used for the embedding-similarity diagnostic.
    pub diagnostic_graphs: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regularizers: RegularizerConfig,
}

impl Default for TrialPlan {
    fn default() -> Self {
        TrialPlan {
            tasks: vec![
                TaskSpec::new(SyntheticTask::RingMotif),
                TaskSpec::new(SyntheticTask::TripleMotif),
                TaskSpec::new(SyntheticTask::AdditiveScore),
            ],
            constraints: RegularizerMode::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            seeds: (0..10).collect(),
            test_fraction: 0.2,
            diagnostic_graphs: 20,
            model: ModelConfig::default(),
            train: TrainConfig {
                base_lr: BENCHMARK_LR,
                batch_size: BENCHMARK_BATCH,
                ..TrainConfig::default()
            },
            regularizers: RegularizerConfig::default(),
        }
    }
}

impl TrialPlan {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty()
            || self.constraints.is_empty()
            || self.methods.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::contract(
                "plan: tasks, constraints, methods and seeds must all be non-empty",
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::contract("plan: test_fraction must lie in (0, 1)"));
        }
        self.train.validate()?;
        self.regularizers.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrialStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task: String,
    pub task_kind: TaskKind,
    pub constraint: RegularizerMode,
    pub seed: u64,
    pub status: TrialStatus,
    /// Test AUROC (classification) or Pearson correlation (regression).
    pub model_metric: f64,
    pub attribution: BTreeMap<Method, f64>,
    /// Mean Gini coefficient of the trained output-weight rows.
    pub weight_gini: f64,
    /// Mean over diagnostic test graphs of the mean |cosine| between
    /// distinct node embeddings of the last conv layer.
    pub embedding_offdiag: f64,
}

impl TrialResult {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }

    fn failed(task: &TaskSpec, constraint: RegularizerMode, seed: u64, why: String) -> Self {
        TrialResult {
            task: task.name().into(),
            task_kind: task.kind.task_kind(),
            constraint,
            seed,
            status: TrialStatus::Failed(why),
            model_metric: f64::NAN,
            attribution: BTreeMap::new(),
            weight_gini: f64::NAN,
            embedding_offdiag: f64::NAN,
        }
    }
}

/// Mean, sample standard deviation and linearly interpolated quartiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile `p` of sorted data, interpolating between closest ranks.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stats {
            n,
            mean,
            std,
            min: sorted[0],
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
            max: sorted[n - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationSummary {
    pub task: String,
    pub constraint: RegularizerMode,
    /// `model`, `weight_gini`, `embedding_offdiag`, or an attribution method.
    pub metric: String,
    pub failed: usize,
    pub stats: Option<Stats>,
    /// Mean minus the `none` constraint's mean for the same task and metric.
    pub delta_vs_none: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub results: Vec<TrialResult>,
    pub summary: Vec<CombinationSummary>,
}

impl TrialReport {
    pub fn successful(&self) -> impl Iterator<Item = &TrialResult> {
        self.results.iter().filter(|r| r.is_ok())
    }

    pub fn failed_count(&self) -> usize {
        self.results.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn find(&self, task: &str, constraint: RegularizerMode, metric: &str) -> Option<&CombinationSummary> {
        self.summary
            .iter()
            .find(|s| s.task == task && s.constraint == constraint && s.metric == metric)
    }
}

fn split<R: Rng>(rng: &mut R, n: usize, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

/// Classification splits are stratified on the first target so both classes
/// reach the test set whenever each has at least two graphs.
fn split_dataset<R: Rng>(rng: &mut R, dataset: &Dataset, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if dataset.task_kinds.first() != Some(&TaskKind::Classification) {
        return split(rng, dataset.len(), test_fraction);
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, g) in dataset.graphs.iter().enumerate() {
        if g.targets.first().copied().flatten().is_some_and(|y| y > 0.5) {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for group in [pos, neg] {
        if group.len() < 2 {
            train.extend(group);
            continue;
        }
        let (tr, te) = split(rng, group.len(), test_fraction);
        train.extend(tr.into_iter().map(|k| group[k]));
        test.extend(te.into_iter().map(|k| group[k]));
    }
    if test.is_empty() {
        return split(rng, dataset.len(), test_fraction);
    }
    train.shuffle(rng);
    test.sort_unstable();
    (train, test)
}

/// Everything one (task, constraint, seed) trial produces, before scoring.
pub struct TrainedTrial {
    pub dataset: Dataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub model: Model,
}

/// Generates the trial's data, splits it and trains. Data and split depend
/// only on (task, seed), so every constraint sees the same graphs.
pub fn train_trial(
    plan: &TrialPlan,
    task: &TaskSpec,
    constraint: RegularizerMode,
    seed: u64,
) -> Result<TrainedTrial> {
    let spec = TaskSpec {
        seed: derive_seed(task.seed, seed),
        ..task.clone()
    };
    let dataset = spec.generate()?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
    let (train_idx, test_idx) = split_dataset(&mut split_rng, &dataset, plan.test_fraction);
    let model_cfg = ModelConfig {
        num_tasks: dataset.num_tasks(),
        alphabet_size: task.alphabet_size,
        seed: derive_seed(plan.model.seed, seed),
        ..plan.model.clone()
    };
    let train_cfg = TrainConfig {
        seed: derive_seed(plan.train.seed, seed),
        ..plan.train.clone()
    };
    let reg_cfg = RegularizerConfig {
        mode: constraint,
        ..plan.regularizers.clone()
    };
    let train_graphs_ref: Vec<&Graph> = train_idx.iter().map(|&i| &dataset.graphs[i]).collect();
    let (params, _) = train_graphs(
        &train_graphs_ref,
        &dataset.task_kinds,
        &model_cfg,
        &train_cfg,
        &reg_cfg,
    )?;
    Ok(TrainedTrial {
        model: Model {
            config: model_cfg,
            params,
        },
        dataset,
        train_idx,
        test_idx,
    })
}

fn run_one(plan: &TrialPlan, task: &TaskSpec, constraint: RegularizerMode, seed: u64) -> Result<TrialResult> {
    let trial = match train_trial(plan, task, constraint, seed) {
        Ok(t) => t,
        Err(e @ (Error::Divergence { .. } | Error::NonFiniteGradient { .. })) => {
            log::warn!("{} / {constraint} / seed {seed}: {e}", task.name());
            return Ok(TrialResult::failed(task, constraint, seed, e.to_string()));
        }
        Err(e) => return Err(e),
    };
    let kind = task.kind.task_kind();
    let test: Vec<&Graph> = trial.test_idx.iter().map(|&i| &trial.dataset.graphs[i]).collect();
    let model = &trial.model;

    let batch = make_batch(&test, model.config.features())?;
    let eval = model.evaluate(&batch)?;
    let predicted = eval.predictions.column(0);
    let observed: Vec<f64> = test.iter().map(|g| g.targets[0].unwrap_or(f64::NAN)).collect();
    let model_metric = match kind {
        TaskKind::Classification => {
            let labels: Vec<bool> = observed.iter().map(|&y| y > 0.5).collect();
            auroc(&predicted, &labels)?
        }
        TaskKind::Regression => pearson(&predicted, &observed).unwrap_or(0.0),
    };

    let embedding_offdiag = {
        let h = eval.final_embeddings();
        let mut vals = Vec::new();
        for g in 0..test.len() {
            if vals.len() == plan.diagnostic_graphs {
                break;
            }
            let r = batch.node_range(g);
            if r.len() >= 2 {
                vals.push(off_diag_mean_abs(&cosine_matrix(&h.slice_rows(r.start, r.end)))?);
            }
        }
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let weight_gini = if model.params.output_weights.cols() >= 2 {
        gini_mean_of(&model.params.output_weights)?
    } else {
        0.0
    };

    let mut attr_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut attribution = BTreeMap::new();
    for &method in &plan.methods {
        let mut maps = Vec::with_capacity(test.len());
        for (&gi, g) in trial.test_idx.iter().zip(&test) {
            let mut map = attribute(model, g, method, 0, &mut attr_rng)?;
            map.graph = gi;
            maps.push(map);
        }
        let score = score_attribution(&maps, &test, kind)?;
        attribution.insert(method, score.mean);
    }

    Ok(TrialResult {
        task: task.name().into(),
        task_kind: kind,
        constraint,
        seed,
        status: TrialStatus::Ok,
        model_metric,
        attribution,
        weight_gini,
        embedding_offdiag,
    })
}

/// Worker count from `GRATTR_THREADS`, else rayon's default.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("GRATTR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

pub fn run_trials(plan: &TrialPlan) -> Result<TrialReport> {
    run_trials_with_threads(plan, threads_from_env())
}

pub fn run_trials_with_threads(plan: &TrialPlan, threads: Option<usize>) -> Result<TrialReport> {
    plan.validate()?;
    let mut jobs = Vec::new();
    for task in &plan.tasks {
        for &constraint in &plan.constraints {
            for &seed in &plan.seeds {
                jobs.push((task, constraint, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrialResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(task, constraint, seed)| run_one(plan, task, constraint, seed))
            .collect()
    });
    let mut results = results.into_iter().collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| {
        (&a.task, a.constraint, a.seed).cmp(&(&b.task, b.constraint, b.seed))
    });
    let summary = summarize(&results, &plan.methods);
    Ok(TrialReport { results, summary })
}

fn summarize(results: &[TrialResult], methods: &[Method]) -> Vec<CombinationSummary> {
    let mut groups: BTreeMap<(String, RegularizerMode), Vec<&TrialResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.task.clone(), r.constraint)).or_default().push(r);
    }
    let mut metrics: Vec<String> = vec!["model".into(), "weight_gini".into(), "embedding_offdiag".into()];
    let mut sorted_methods = methods.to_vec();
    sorted_methods.sort();
    sorted_methods.dedup();
    metrics.extend(sorted_methods.iter().map(|m| m.as_str().to_string()));

    let value = |r: &TrialResult, metric: &str| -> Option<f64> {
        match metric {
            "model" => Some(r.model_metric),
            "weight_gini" => Some(r.weight_gini),
            "embedding_offdiag" => Some(r.embedding_offdiag),
            m => sorted_methods
                .iter()
                .find(|x| x.as_str() == m)
                .and_then(|x| r.attribution.get(x).copied()),
        }
    };

    let mut out = Vec::new();
    for ((task, constraint), trials) in &groups {
        let failed = trials.iter().filter(|r| !r.is_ok()).count();
        for metric in &metrics {
            let vals: Vec<f64> = trials
                .iter()
                .filter(|r| r.is_ok())
                .filter_map(|r| value(r, metric))
                .collect();
            out.push(CombinationSummary {
                task: task.clone(),
                constraint: *constraint,
                metric: metric.clone(),
                failed,
                stats: Stats::of(&vals),
                delta_vs_none: None,
            });
        }
    }
    let baseline: BTreeMap<(String, String), f64> = out
        .iter()
        .filter(|s| s.constraint == RegularizerMode::None)
        .filter_map(|s| Some(((s.task.clone(), s.metric.clone()), s.stats.as_ref()?.mean)))
        .collect();
    for s in &mut out {
        if let (Some(stats), Some(base)) = (&s.stats, baseline.get(&(s.task.clone(), s.metric.clone()))) {
            s.delta_vs_none = Some(stats.mean - base);
        }
    }
    out
}
