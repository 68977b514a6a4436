//! Synthetic path data from a known staged tree.
//!
//! A generating model fixes a tree structure, a staging of its situations,
//! and one transition probability vector per stage. Sampling walks the
//! tree from the root, drawing an edge at each situation from its stage's
//! vector, until a leaf is reached.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{
    parse_vertex_name, vertex_name, EventTree, Hyperstage, NestedTree, PathRecord, TreeError,
    TreeSpec, VertexId,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("stage probabilities for {stage:?} must be positive and sum to 1 (sum {sum})")]
    BadProbabilities { stage: Vec<String>, sum: f64 },
    #[error("stage vector for {stage:?} has {got} entries but the situations have {expected} edges")]
    WrongVectorLength {
        stage: Vec<String>,
        expected: usize,
        got: usize,
    },
    #[error("situations {stage:?} cannot share a stage: differing edge labels")]
    IncompatibleStage { stage: Vec<String> },
    #[error("{0} is staged but is not a situation of the tree")]
    NotASituation(String),
    #[error("situation {0} is missing from the staging")]
    UnstagedSituation(String),
    #[error("situation {0} appears in more than one stage")]
    DuplicateSituation(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// One stage of the generating process: its member situations and their
/// shared transition probabilities, aligned to sorted edge labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub situations: Vec<String>,
    pub probs: Vec<f64>,
}

/// On-disk form of a generating model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratingModelSpec {
    pub tree: NestedTree,
    pub stages: Vec<StageSpec>,
}

/// A known data-generating staged tree.
#[derive(Debug, Clone)]
pub struct GeneratingModel {
    tree: EventTree,
    /// Stage index per vertex; usize::MAX for leaves.
    stage_of: Vec<usize>,
    /// Normalized probability vector per stage, in edge order.
    probs: Vec<Vec<f64>>,
    /// Canonical member lists per stage.
    stages: Vec<Vec<VertexId>>,
}

impl GeneratingModel {
    pub fn from_spec(spec: &GeneratingModelSpec) -> Result<GeneratingModel, SimError> {
        let tree = EventTree::from_spec(&TreeSpec {
            tree: spec.tree.clone(),
            counts: Vec::new(),
        })?;
        let mut stage_of = vec![usize::MAX; tree.node_count()];
        let mut probs = Vec::with_capacity(spec.stages.len());
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (si, stage) in spec.stages.iter().enumerate() {
            let mut members = Vec::with_capacity(stage.situations.len());
            for name in &stage.situations {
                let v = parse_vertex_name(name)?;
                if v >= tree.node_count() || tree.is_leaf(v) {
                    return Err(SimError::NotASituation(name.clone()));
                }
                if stage_of[v] != usize::MAX {
                    return Err(SimError::DuplicateSituation(name.clone()));
                }
                stage_of[v] = si;
                members.push(v);
            }
            members.sort_unstable();
            let reference = tree.labels(members[0]);
            if members.iter().any(|&v| tree.labels(v) != reference) {
                return Err(SimError::IncompatibleStage {
                    stage: stage.situations.clone(),
                });
            }
            if stage.probs.len() != reference.len() {
                return Err(SimError::WrongVectorLength {
                    stage: stage.situations.clone(),
                    expected: reference.len(),
                    got: stage.probs.len(),
                });
            }
            let sum: f64 = stage.probs.iter().sum();
            if stage.probs.iter().any(|&p| p <= 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(SimError::BadProbabilities {
                    stage: stage.situations.clone(),
                    sum,
                });
            }
            probs.push(stage.probs.iter().map(|p| p / sum).collect());
            stages.push(members);
        }
        for v in tree.situations() {
            if stage_of[v] == usize::MAX {
                return Err(SimError::UnstagedSituation(vertex_name(v)));
            }
        }
        Ok(GeneratingModel {
            tree,
            stage_of,
            probs,
            stages,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<GeneratingModel, SimError> {
        let text = std::fs::read_to_string(path).map_err(TreeError::from)?;
        let spec: GeneratingModelSpec = serde_json::from_str(&text).map_err(TreeError::from)?;
        Self::from_spec(&spec)
    }

    pub fn tree(&self) -> &EventTree {
        &self.tree
    }

    pub fn stage_probs(&self, v: VertexId) -> &[f64] {
        &self.probs[self.stage_of[v]]
    }

    /// The generating staging restricted to one hyperset: members grouped by
    /// their generating stage.
    pub fn restricted_staging(&self, hyperstage: &Hyperstage, hyperset: usize) -> crate::search::Staging {
        let mut groups: std::collections::BTreeMap<usize, Vec<VertexId>> =
            std::collections::BTreeMap::new();
        for &v in hyperstage.block(hyperset) {
            groups.entry(self.stage_of[v]).or_default().push(v);
        }
        crate::search::Staging::new(hyperset, groups.into_values().collect())
    }

    pub fn stage_members(&self) -> &[Vec<VertexId>] {
        &self.stages
    }
}

/// Draw `n` independent root-to-leaf paths; deterministic per seed.
pub fn simulate(model: &GeneratingModel, n: usize, seed: u64) -> Vec<PathRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = &model.tree;
    (0..n)
        .map(|_| {
            let mut path = Vec::new();
            let mut v = tree.root();
            while !tree.is_leaf(v) {
                let probs = model.stage_probs(v);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let edge = &tree.edges(v)[pick];
                path.push(edge.label.clone());
                v = edge.child;
            }
            path
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::EventTree;

    fn model_json(text: &str) -> GeneratingModel {
        let spec: GeneratingModelSpec = serde_json::from_str(text).unwrap();
        GeneratingModel::from_spec(&spec).unwrap()
    }

    #[test]
    fn degenerate_probabilities_repeat_one_path() {
        let model = model_json(
            r#"{
                "tree": {"a": {"x": {}, "y": {}}, "b": {"x": {}, "y": {}}},
                "stages": [
                    {"situations": ["s0"], "probs": [1e-12, 1.0]},
                    {"situations": ["s1", "s2"], "probs": [1.0, 1e-12]}
                ]
            }"#,
        );
        let records = simulate(&model, 50, 3);
        assert_eq!(records.len(), 50);
        for r in &records {
            assert_eq!(r, &vec!["b".to_string(), "x".to_string()]);
        }
    }

    #[test]
    fn zero_draws_give_empty_list() {
        let model = model_json(
            r#"{"tree": {"a": {}, "b": {}}, "stages": [{"situations": ["s0"], "probs": [0.5, 0.5]}]}"#,
        );
        assert!(simulate(&model, 0, 1).is_empty());
    }

    #[test]
    fn frequencies_concentrate() {
        let model = model_json(
            r#"{"tree": {"a": {}, "b": {}}, "stages": [{"situations": ["s0"], "probs": [0.7, 0.3]}]}"#,
        );
        for seed in [1u64, 2, 3] {
            let records = simulate(&model, 10_000, seed);
            let a = records.iter().filter(|r| r[0] == "a").count() as f64;
            let freq = a / 10_000.0;
            assert!((freq - 0.7).abs() < 0.02, "seed {seed}: {freq}");
        }
    }

    #[test]
    fn rebuilt_tree_conserves_flow() {
        let model = model_json(
            r#"{
                "tree": {"a": {"x": {}, "y": {}}, "b": {}},
                "stages": [
                    {"situations": ["s0"], "probs": [0.6, 0.4]},
                    {"situations": ["s1"], "probs": [0.5, 0.5]}
                ]
            }"#,
        );
        let records = simulate(&model, 500, 9);
        let tree = EventTree::from_records(&records).unwrap();
        assert!(tree.flow_conserved());
        assert_eq!(tree.total_records(), 500);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let model = model_json(
            r#"{"tree": {"a": {}, "b": {}, "c": {}}, "stages": [{"situations": ["s0"], "probs": [0.2, 0.3, 0.5]}]}"#,
        );
        assert_eq!(simulate(&model, 100, 42), simulate(&model, 100, 42));
        assert_ne!(simulate(&model, 100, 42), simulate(&model, 100, 43));
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let bad_sum: GeneratingModelSpec = serde_json::from_str(
            r#"{"tree": {"a": {}, "b": {}}, "stages": [{"situations": ["s0"], "probs": [0.5, 0.4]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            GeneratingModel::from_spec(&bad_sum),
            Err(SimError::BadProbabilities { .. })
        ));

        let unstaged: GeneratingModelSpec = serde_json::from_str(
            r#"{"tree": {"a": {"x": {}, "y": {}}, "b": {}}, "stages": [{"situations": ["s0"], "probs": [0.5, 0.5]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            GeneratingModel::from_spec(&unstaged),
            Err(SimError::UnstagedSituation { .. })
        ));
    }

    #[test]
    fn restricted_staging_groups_by_stage() {
        let model = model_json(
            r#"{
                "tree": {"a": {"x": {}, "y": {}}, "b": {"x": {}, "y": {}}, "c": {"x": {}, "y": {}}},
                "stages": [
                    {"situations": ["s0"], "probs": [0.2, 0.3, 0.5]},
                    {"situations": ["s1", "s3"], "probs": [0.5, 0.5]},
                    {"situations": ["s2"], "probs": [0.9, 0.1]}
                ]
            }"#,
        );
        let h = crate::tree::default_hyperstage(model.tree());
        // Hyperset 1 holds {s1, s2, s3}.
        let staging = model.restricted_staging(&h, 1);
        assert_eq!(staging.blocks(), &[vec![1, 3], vec![2]]);
    }
}
