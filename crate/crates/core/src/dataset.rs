//! Datasets and their JSON Lines interchange format.
//!
//! The first line is a header:
//!
//! ```json
//! {"task_names":["has_ring"],"task_kinds":["classification"],"provenance":"..."}
//! ```
//!
//! and every following line holds one graph:
//!
//! ```json
//! {"labels":[1,1,3],"edges":[[0,1,"single"],[1,2,"single"]],"targets":[1.0],"ground_truth":null,"smiles":"CCO"}
//! ```
//!
//! `targets` entries may be `null` (unobserved). `smiles` is optional.
//! An empty file is an empty dataset with no tasks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{BondOrder, Edge, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub task_names: Vec<String>,
    pub task_kinds: Vec<TaskKind>,
    pub provenance: String,
}

impl Dataset {
    pub fn num_tasks(&self) -> usize {
        self.task_kinds.len()
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Largest label plus one, or 0 for an empty dataset.
    pub fn alphabet_size(&self) -> usize {
        self.graphs
            .iter()
            .flat_map(|g| g.labels().iter().copied())
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_names.len() != self.task_kinds.len() {
            return Err(Error::contract(format!(
                "{} task names for {} task kinds",
                self.task_names.len(),
                self.task_kinds.len()
            )));
        }
        for (i, g) in self.graphs.iter().enumerate() {
            if !g.targets.is_empty() && g.targets.len() != self.num_tasks() {
                return Err(Error::contract(format!(
                    "graph {i} has {} targets for {} tasks",
                    g.targets.len(),
                    self.num_tasks()
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        if self.graphs.is_empty() && self.task_names.is_empty() && self.provenance.is_empty() {
            return Ok(out);
        }
        out.push_str(&serde_json::to_string(&Header {
            task_names: &self.task_names,
            task_kinds: &self.task_kinds,
            provenance: &self.provenance,
        })?);
        out.push('\n');
        for g in &self.graphs {
            let rec = GraphRecord {
                labels: g.labels(),
                edges: g.edges().iter().map(|e| (e.a, e.b, e.order)).collect(),
                targets: &g.targets,
                ground_truth: g.ground_truth.as_deref(),
                smiles: g.smiles.as_deref(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Dataset> {
        let mut ds = Dataset::default();
        let mut header_seen = false;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line).map_err(|e| Error::Schema {
                line: line_no,
                field: "<json>".into(),
                message: e.to_string(),
            })?;
            let obj = value.as_object().ok_or_else(|| Error::Schema {
                line: line_no,
                field: "<record>".into(),
                message: "expected a JSON object".into(),
            })?;
            if !header_seen {
                header_seen = true;
                parse_header(obj, line_no, &mut ds)?;
                continue;
            }
            ds.graphs.push(parse_graph(obj, line_no, ds.num_tasks())?);
        }
        Ok(ds)
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_jsonl(&text)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset.to_jsonl()?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Header<'a> {
    task_names: &'a [String],
    task_kinds: &'a [TaskKind],
    provenance: &'a str,
}

#[derive(Serialize)]
struct GraphRecord<'a> {
    labels: &'a [usize],
    edges: Vec<(usize, usize, BondOrder)>,
    targets: &'a [Option<f64>],
    ground_truth: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    smiles: Option<&'a str>,
}

type Object = serde_json::Map<String, Value>;

fn schema(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn parse_header(obj: &Object, line: usize, ds: &mut Dataset) -> Result<()> {
    let names = obj
        .get("task_names")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(line, "task_names", "missing or not an array"))?;
    ds.task_names = names
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| schema(line, "task_names", "entries must be strings"))
        })
        .collect::<Result<_>>()?;
    let kinds = obj
        .get("task_kinds")
        .ok_or_else(|| schema(line, "task_kinds", "missing"))?;
    ds.task_kinds = serde_json::from_value(kinds.clone())
        .map_err(|e| schema(line, "task_kinds", e.to_string()))?;
    if ds.task_kinds.len() != ds.task_names.len() {
        return Err(schema(line, "task_kinds", "length differs from task_names"));
    }
    ds.provenance = match obj.get("provenance") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(schema(line, "provenance", "must be a string")),
    };
    Ok(())
}

fn parse_graph(obj: &Object, line: usize, tasks: usize) -> Result<Graph> {
    let labels: Vec<usize> = obj
        .get("labels")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(line, "labels", "missing or not an array"))?
        .iter()
        .map(|v| {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| schema(line, "labels", "entries must be non-negative integers"))
        })
        .collect::<Result<_>>()?;

    let edges: Vec<Edge> = obj
        .get("edges")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(line, "edges", "missing or not an array"))?
        .iter()
        .map(|v| {
            let (a, b, order): (usize, usize, BondOrder) = serde_json::from_value(v.clone())
                .map_err(|e| schema(line, "edges", e.to_string()))?;
            Ok(Edge::new(a, b, order))
        })
        .collect::<Result<_>>()?;

    let targets: Vec<Option<f64>> = match obj.get("targets") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| schema(line, "targets", e.to_string()))?,
    };
    if !targets.is_empty() && targets.len() != tasks {
        return Err(schema(
            line,
            "targets",
            format!("{} entries for {tasks} tasks", targets.len()),
        ));
    }

    let ground_truth: Option<Vec<f64>> = match obj.get("ground_truth") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| schema(line, "ground_truth", e.to_string()))?,
        ),
    };
    let smiles = match obj.get("smiles") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(schema(line, "smiles", "must be a string")),
    };

    let mut g = Graph::new(labels, edges).map_err(|e| schema(line, "edges", e.to_string()))?;
    if let Some(gt) = ground_truth {
        g = g
            .with_ground_truth(gt)
            .map_err(|e| schema(line, "ground_truth", e.to_string()))?;
    }
    g.targets = targets;
    g.smiles = smiles;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;

    fn sample() -> Dataset {
        let a = parse_smiles("CCO")
            .unwrap()
            .with_targets(vec![Some(1.0), None])
            .with_ground_truth(vec![0.0, 0.5, 1.0])
            .unwrap();
        let b = parse_smiles("c1ccccc1").unwrap().with_targets(vec![None, Some(-2.25)]);
        let c = Graph::new(vec![0, 1], vec![Edge::new(0, 1, BondOrder::Triple)])
            .unwrap()
            .with_targets(vec![Some(0.0), Some(0.1 + 0.2)]);
        Dataset {
            graphs: vec![a, b, c],
            task_names: vec!["active".into(), "logp".into()],
            task_kinds: vec![TaskKind::Classification, TaskKind::Regression],
            provenance: "unit test".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = sample();
        let text = ds.to_jsonl().unwrap();
        assert_eq!(Dataset::from_jsonl(&text).unwrap(), ds);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&sample(), &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), sample());
    }

    #[test]
    fn missing_edges_names_line_and_field() {
        let text = "{\"task_names\":[],\"task_kinds\":[]}\n{\"labels\":[0],\"edges\":[]}\n{\"labels\":[0]}\n";
        match Dataset::from_jsonl(text) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "edges");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = Dataset::from_jsonl("").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.num_tasks(), 0);
        assert_eq!(ds.to_jsonl().unwrap(), "");
    }

    #[test]
    fn wrong_target_count_is_rejected() {
        let text = "{\"task_names\":[\"a\"],\"task_kinds\":[\"regression\"]}\n{\"labels\":[0],\"edges\":[],\"targets\":[1.0,2.0]}\n";
        assert!(matches!(
            Dataset::from_jsonl(text),
            Err(Error::Schema { line: 2, ref field, .. }) if field == "targets"
        ));
    }

    #[test]
    fn bad_bond_tag_is_rejected() {
        let text = "{\"task_names\":[],\"task_kinds\":[]}\n{\"labels\":[0,0],\"edges\":[[0,1,\"quadruple\"]]}\n";
        assert!(matches!(
            Dataset::from_jsonl(text),
            Err(Error::Schema { line: 2, ref field, .. }) if field == "edges"
        ));
    }
}
