//! Model averaging over sampled stagings.
//!
//! Per hyperset: normalize posterior weights from log scores, keep the
//! models inside Occam's window, discard models dominated by a nested
//! simpler model, and renormalize. The per-hyperset survivors recombine
//! into full models by Cartesian product, over which predictions and
//! co-staging probabilities are weighted averages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{HypersetContext, ScoreError};
use crate::search::{SampledStaging, Staging};
use crate::tree::{EventTree, VertexId};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no models to weight")]
    EmptyModels,
    #[error("window parameter must exceed 1, got {0}")]
    BadBeta(f64),
    #[error("stagings belong to different hypersets")]
    HypersetMismatch,
    #[error("stagings cover different member sets")]
    MemberMismatch,
    #[error("empty staging list")]
    EmptyInput,
    #[error("combined model count {count} exceeds the cap {cap}")]
    TooManyModels { count: u128, cap: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Posterior weights from log marginal likelihoods under a uniform model
/// prior: `w_k = exp(s_k − logsumexp(s))`.
pub fn normalize_weights(log_scores: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    if log_scores.is_empty() {
        return Err(EnsembleError::EmptyModels);
    }
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = log_scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    Ok(shifted.into_iter().map(|w| w / total).collect())
}

/// Occam's window on log scores: keep model `k` iff the best model is less
/// than `beta` times more likely, i.e. `s_max − s_k < ln beta` (strict).
pub fn occams_window(log_scores: &[f64], beta: f64) -> Result<Vec<bool>, EnsembleError> {
    if !(beta > 1.0) {
        return Err(EnsembleError::BadBeta(beta));
    }
    if log_scores.is_empty() {
        return Err(EnsembleError::EmptyModels);
    }
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ln_beta = beta.ln();
    Ok(log_scores.iter().map(|&s| max - s < ln_beta).collect())
}

/// True iff `a` is a proper coarsening of `b`: every block of `b` lies
/// inside a block of `a`, and the stagings differ. Coarser stagings impose
/// more equality constraints, hence are the nested submodels.
pub fn is_nested(a: &Staging, b: &Staging) -> Result<bool, EnsembleError> {
    if a.hyperset() != b.hyperset() {
        return Err(EnsembleError::HypersetMismatch);
    }
    if a.members() != b.members() {
        return Err(EnsembleError::MemberMismatch);
    }
    if a == b {
        return Ok(false);
    }
    Ok(refines(b, a))
}

// Every block of `fine` is contained in some block of `coarse`.
fn refines(fine: &Staging, coarse: &Staging) -> bool {
    fine.blocks().iter().all(|block| {
        coarse
            .block_of(block[0])
            .map(|ci| {
                let cb = &coarse.blocks()[ci];
                block.iter().all(|v| cb.binary_search(v).is_ok())
            })
            .unwrap_or(false)
    })
}

/// Razor step over windowed models: drop a model iff some windowed model is
/// nested in it and strictly more likely.
pub fn razor_filter(
    stagings: &[&Staging],
    log_scores: &[f64],
    in_window: &[bool],
) -> Result<Vec<bool>, EnsembleError> {
    let n = stagings.len();
    let mut keep = in_window.to_vec();
    for k in 0..n {
        if !in_window[k] {
            continue;
        }
        for l in 0..n {
            if l == k || !in_window[l] {
                continue;
            }
            if is_nested(stagings[l], stagings[k])? && log_scores[k] < log_scores[l] {
                keep[k] = false;
                break;
            }
        }
    }
    Ok(keep)
}

/// One hyperset's sampled stagings with their weights and window status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypersetEnsemble {
    pub hyperset: usize,
    /// Unique stagings in descending score order.
    pub entries: Vec<SampledStaging>,
    /// Weights normalized over all sampled stagings.
    pub weights: Vec<f64>,
    pub in_window: Vec<bool>,
    pub well_performing: Vec<bool>,
    /// Weights renormalized over the well-performing set; zero elsewhere.
    pub window_weights: Vec<f64>,
}

impl HypersetEnsemble {
    pub fn build(
        hyperset: usize,
        entries: Vec<SampledStaging>,
        beta: f64,
    ) -> Result<HypersetEnsemble, EnsembleError> {
        if entries.is_empty() {
            return Err(EnsembleError::EmptyModels);
        }
        let log_scores: Vec<f64> = entries.iter().map(|e| e.log_score).collect();
        let weights = normalize_weights(&log_scores)?;
        let in_window = occams_window(&log_scores, beta)?;
        let stagings: Vec<&Staging> = entries.iter().map(|e| &e.staging).collect();
        let well_performing = razor_filter(&stagings, &log_scores, &in_window)?;
        let kept_scores: Vec<f64> = log_scores
            .iter()
            .zip(&well_performing)
            .filter(|(_, keep)| **keep)
            .map(|(s, _)| *s)
            .collect();
        let kept_weights = normalize_weights(&kept_scores)?;
        let mut window_weights = vec![0.0; entries.len()];
        let mut next = 0;
        for (i, keep) in well_performing.iter().enumerate() {
            if *keep {
                window_weights[i] = kept_weights[next];
                next += 1;
            }
        }
        Ok(HypersetEnsemble {
            hyperset,
            entries,
            weights,
            in_window,
            well_performing,
            window_weights,
        })
    }

    /// Indices of the well-performing stagings, in entry order.
    pub fn well_performing_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.well_performing[i])
            .collect()
    }

    pub fn well_performing_stagings(&self) -> Vec<&Staging> {
        self.well_performing_indices()
            .into_iter()
            .map(|i| &self.entries[i].staging)
            .collect()
    }
}

/// A full model: one staging per hyperset, with the summed log score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredModel {
    pub stagings: Vec<Staging>,
    pub log_score: f64,
}

/// The recombined average: every combination of well-performing stagings,
/// weighted by normalized score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelAverage {
    pub models: Vec<ScoredModel>,
    pub weights: Vec<f64>,
    pub beta: f64,
}

/// Cartesian recombination of per-hyperset well-performing sets. The
/// product size is checked against `cap` before any model is built.
pub fn combine(
    ensembles: &[HypersetEnsemble],
    beta: f64,
    cap: usize,
) -> Result<ModelAverage, EnsembleError> {
    if ensembles.is_empty() {
        return Err(EnsembleError::EmptyModels);
    }
    let choices: Vec<Vec<usize>> = ensembles
        .iter()
        .map(|e| e.well_performing_indices())
        .collect();
    if choices.iter().any(|c| c.is_empty()) {
        return Err(EnsembleError::EmptyModels);
    }
    let count: u128 = choices.iter().map(|c| c.len() as u128).product();
    if count > cap as u128 {
        return Err(EnsembleError::TooManyModels { count, cap });
    }
    let mut models = Vec::with_capacity(count as usize);
    let mut cursor = vec![0usize; choices.len()];
    loop {
        let mut stagings = Vec::with_capacity(ensembles.len());
        let mut log_score = 0.0;
        for (hi, ensemble) in ensembles.iter().enumerate() {
            let entry = &ensemble.entries[choices[hi][cursor[hi]]];
            stagings.push(entry.staging.clone());
            log_score += entry.log_score;
        }
        models.push(ScoredModel { stagings, log_score });
        // Odometer increment over the choice lists.
        let mut pos = choices.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            cursor[pos] += 1;
            if cursor[pos] < choices[pos].len() {
                break;
            }
            cursor[pos] = 0;
        }
        if cursor.iter().all(|&c| c == 0) {
            break;
        }
    }
    models.sort_by(|a, b| {
        b.log_score
            .partial_cmp(&a.log_score)
            .expect("scores are finite")
            .then_with(|| a.stagings.cmp(&b.stagings))
    });
    let weights = normalize_weights(&models.iter().map(|m| m.log_score).collect::<Vec<_>>())?;
    Ok(ModelAverage {
        models,
        weights,
        beta,
    })
}

/// Partition-lattice meet: situations share a block iff they share a block
/// in every input staging.
pub fn staging_intersection(stagings: &[&Staging]) -> Result<Staging, EnsembleError> {
    let first = check_same_ground(stagings)?;
    let members = first.members();
    let mut blocks: std::collections::BTreeMap<Vec<usize>, Vec<VertexId>> =
        std::collections::BTreeMap::new();
    for &v in &members {
        let key: Vec<usize> = stagings
            .iter()
            .map(|s| s.block_of(v).expect("checked cover"))
            .collect();
        blocks.entry(key).or_default().push(v);
    }
    Ok(Staging::new(
        first.hyperset(),
        blocks.into_values().collect(),
    ))
}

/// Partition-lattice join: transitive closure of co-staging in any input.
pub fn staging_union(stagings: &[&Staging]) -> Result<Staging, EnsembleError> {
    let first = check_same_ground(stagings)?;
    let members = first.members();
    let index_of: std::collections::BTreeMap<VertexId, usize> = members
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i))
        .collect();
    let mut parent: Vec<usize> = (0..members.len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let root = find(parent, parent[x]);
            parent[x] = root;
        }
        parent[x]
    }
    for staging in stagings {
        for block in staging.blocks() {
            for pair in block.windows(2) {
                let a = find(&mut parent, index_of[&pair[0]]);
                let b = find(&mut parent, index_of[&pair[1]]);
                parent[a] = b;
            }
        }
    }
    let mut blocks: std::collections::BTreeMap<usize, Vec<VertexId>> =
        std::collections::BTreeMap::new();
    for (i, &v) in members.iter().enumerate() {
        let root = find(&mut parent, i);
        blocks.entry(root).or_default().push(v);
    }
    Ok(Staging::new(
        first.hyperset(),
        blocks.into_values().collect(),
    ))
}

fn check_same_ground<'a>(stagings: &[&'a Staging]) -> Result<&'a Staging, EnsembleError> {
    let first = *stagings.first().ok_or(EnsembleError::EmptyInput)?;
    for s in &stagings[1..] {
        if s.hyperset() != first.hyperset() {
            return Err(EnsembleError::HypersetMismatch);
        }
        if s.members() != first.members() {
            return Err(EnsembleError::MemberMismatch);
        }
    }
    Ok(first)
}

/// Probability that two situations share a stage under the average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SameStage {
    pub probability: f64,
    /// The pair spans two hypersets, so co-staging is impossible by
    /// construction.
    pub cross_hyperset: bool,
}

/// Weighted share of models in which `s` and `t` are co-staged. Exactly 1
/// when they share a stage in every model, exactly 0 when in none.
pub fn same_stage_probability(avg: &ModelAverage, s: VertexId, t: VertexId) -> SameStage {
    let find_hyperset = |v: VertexId| {
        avg.models
            .first()
            .and_then(|m| m.stagings.iter().position(|st| st.block_of(v).is_some()))
    };
    let (hs, ht) = (find_hyperset(s), find_hyperset(t));
    if hs.is_none() || ht.is_none() || hs != ht {
        return SameStage {
            probability: 0.0,
            cross_hyperset: hs.is_some() && ht.is_some(),
        };
    }
    let hyperset = hs.expect("checked above");
    let co: Vec<bool> = avg
        .models
        .iter()
        .map(|m| m.stagings[hyperset].co_staged(s, t))
        .collect();
    let probability = if co.iter().all(|&c| c) {
        1.0
    } else if co.iter().all(|&c| !c) {
        0.0
    } else {
        co.iter()
            .zip(&avg.weights)
            .filter(|(c, _)| **c)
            .map(|(_, w)| w)
            .sum()
    };
    SameStage {
        probability,
        cross_hyperset: false,
    }
}

/// Per-situation posterior mean transition probabilities under one model:
/// `(a_j + n_j) / Σ_j (a_j + n_j)` of the situation's stage, mapped back to
/// the situation's own edge order. Indexed by vertex id; empty for leaves.
pub fn posterior_mean_probs(
    tree: &EventTree,
    contexts: &[HypersetContext],
    model: &ScoredModel,
) -> Result<Vec<Vec<f64>>, EnsembleError> {
    let mut out = vec![Vec::new(); tree.node_count()];
    for (ctx, staging) in contexts.iter().zip(&model.stagings) {
        for block in staging.blocks() {
            let stage = ctx.stage_for(block)?;
            let total: f64 = stage
                .alpha
                .iter()
                .zip(&stage.counts)
                .map(|(a, &n)| a + n as f64)
                .sum();
            let aligned_mean: Vec<f64> = stage
                .alpha
                .iter()
                .zip(&stage.counts)
                .map(|(a, &n)| (a + n as f64) / total)
                .collect();
            for &v in block {
                let align = ctx.alignment_of(v).expect("member of its context");
                let mut own = vec![0.0; aligned_mean.len()];
                for (pos, &edge_idx) in align.iter().enumerate() {
                    own[edge_idx] = aligned_mean[pos];
                }
                out[v] = own;
            }
        }
    }
    Ok(out)
}

/// Model-averaged predictions: situation-level mean vectors and per-leaf
/// path (atom) probabilities, both weight-averaged across models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveSummary {
    /// Indexed by vertex id; empty for leaves.
    pub situation_means: Vec<Vec<f64>>,
    /// Indexed by vertex id; zero for non-leaves. Each leaf's entry is the
    /// weighted average over models of that model's product of mean edge
    /// probabilities along the root-to-leaf path.
    pub leaf_atoms: Vec<f64>,
}

pub fn averaged_predictive(
    avg: &ModelAverage,
    tree: &EventTree,
    contexts: &[HypersetContext],
) -> Result<PredictiveSummary, EnsembleError> {
    let mut situation_means: Vec<Vec<f64>> = (0..tree.node_count())
        .map(|v| vec![0.0; tree.out_degree(v)])
        .collect();
    let mut leaf_atoms = vec![0.0; tree.node_count()];
    for (model, &weight) in avg.models.iter().zip(&avg.weights) {
        let means = posterior_mean_probs(tree, contexts, model)?;
        for v in tree.situations() {
            for (acc, m) in situation_means[v].iter_mut().zip(&means[v]) {
                *acc += weight * m;
            }
        }
        // Atom probabilities multiply along each path within the model,
        // then average at model level.
        let mut reach = vec![0.0; tree.node_count()];
        reach[tree.root()] = 1.0;
        for v in 0..tree.node_count() {
            if tree.is_leaf(v) {
                leaf_atoms[v] += weight * reach[v];
                continue;
            }
            for (idx, edge) in tree.edges(v).iter().enumerate() {
                reach[edge.child] = reach[v] * means[v][idx];
            }
        }
    }
    Ok(PredictiveSummary {
        situation_means,
        leaf_atoms,
    })
}
