//! Dirichlet priors and log marginal likelihoods of stagings.
//!
//! Priors come from a single effective sample size: the root floret receives
//! that much mass, every floret splits its arriving mass equally over its
//! edges, and each edge hands its parameter down as the child's arriving
//! mass. A stage's marginal likelihood is the Dirichlet-Multinomial integral
//! over its aggregated parameter and count vectors, evaluated in log space.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::search::Staging;
use crate::tree::{vertex_name, EventTree, Hyperstage, VertexId};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("effective sample size must be positive, got {0}")]
    NonPositiveAlphaBar(f64),
    #[error("stage vectors have mismatched lengths ({a} vs {b})")]
    MismatchedLengths { a: usize, b: usize },
    #[error("hyperstage is invalid: {0}")]
    InvalidHyperstage(String),
    #[error("staging of hyperset {hyperset} does not partition its members")]
    NotAPartition { hyperset: usize },
    #[error("staging block contains {vertex} which is outside hyperset {hyperset}")]
    BlockOutsideHyperset { vertex: String, hyperset: usize },
    #[error("expected one staging per hyperset ({expected}), got {got}")]
    WrongStagingCount { expected: usize, got: usize },
}

/// Per-situation Dirichlet parameters derived from an effective sample size.
#[derive(Debug, Clone)]
pub struct PriorAssignment {
    alpha_bar: f64,
    /// Mass arriving at each vertex; the root gets the full effective sample
    /// size, a non-root vertex gets the parameter of its incoming edge.
    mass: Vec<f64>,
}

impl PriorAssignment {
    /// Split mass equally at every floret and push it down the tree.
    pub fn propagate(tree: &EventTree, alpha_bar: f64) -> Result<PriorAssignment, ScoreError> {
        if !(alpha_bar > 0.0) || !alpha_bar.is_finite() {
            return Err(ScoreError::NonPositiveAlphaBar(alpha_bar));
        }
        let mut mass = vec![0.0; tree.node_count()];
        mass[tree.root()] = alpha_bar;
        for v in 0..tree.node_count() {
            if tree.is_leaf(v) {
                continue;
            }
            let param = mass[v] / tree.out_degree(v) as f64;
            for edge in tree.edges(v) {
                mass[edge.child] = param;
            }
        }
        Ok(PriorAssignment { alpha_bar, mass })
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    pub fn arriving_mass(&self, v: VertexId) -> f64 {
        self.mass[v]
    }

    /// Dirichlet parameters of situation `v`, aligned to its edge order.
    /// All entries equal its arriving mass over its out-degree.
    pub fn floret_alpha(&self, tree: &EventTree, v: VertexId) -> Vec<f64> {
        let d = tree.out_degree(v);
        vec![self.mass[v] / d as f64; d]
    }
}

/// A stage's member situations with aggregated prior and count vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageData {
    pub members: Vec<VertexId>,
    pub alpha: Vec<f64>,
    pub counts: Vec<u64>,
}

impl StageData {
    pub fn new(members: Vec<VertexId>, alpha: Vec<f64>, counts: Vec<u64>) -> StageData {
        debug_assert_eq!(alpha.len(), counts.len());
        StageData {
            members,
            alpha,
            counts,
        }
    }

    /// Componentwise sum of two stages; the merged-stage prior adds.
    pub fn merged(&self, other: &StageData) -> Result<StageData, ScoreError> {
        if self.alpha.len() != other.alpha.len() {
            return Err(ScoreError::MismatchedLengths {
                a: self.alpha.len(),
                b: other.alpha.len(),
            });
        }
        let mut members: Vec<VertexId> = self
            .members
            .iter()
            .chain(other.members.iter())
            .copied()
            .collect();
        members.sort_unstable();
        let alpha = self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(a, b)| a + b)
            .collect();
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a + b)
            .collect();
        Ok(StageData::new(members, alpha, counts))
    }
}

/// Log marginal likelihood of one stage under its Dirichlet prior:
/// `lnΓ(Σa) − lnΓ(Σ(a+n)) + Σ_j [lnΓ(a_j+n_j) − lnΓ(a_j)]`.
pub fn stage_log_score(stage: &StageData) -> f64 {
    let mut prior_total = 0.0;
    let mut posterior_total = 0.0;
    let mut edge_terms = 0.0;
    for (&a, &n) in stage.alpha.iter().zip(&stage.counts) {
        let n = n as f64;
        prior_total += a;
        posterior_total += a + n;
        edge_terms += ln_gamma(a + n) - ln_gamma(a);
    }
    ln_gamma(prior_total) - ln_gamma(posterior_total) + edge_terms
}

/// Log Bayes factor of merging stages `a` and `b` against keeping them
/// separate. Equals the full-staging score difference of the two
/// one-nested models, because all other stages' contributions cancel.
pub fn merge_log_bf(a: &StageData, b: &StageData) -> Result<f64, ScoreError> {
    let merged = a.merged(b)?;
    Ok(stage_log_score(&merged) - stage_log_score(a) - stage_log_score(b))
}

/// One hyperset's situations with their aligned prior and count vectors:
/// everything stage search needs, detached from the tree.
#[derive(Debug, Clone)]
pub struct HypersetContext {
    hyperset: usize,
    members: Vec<VertexId>,
    /// Per member, aligned to the hyperset's edge correspondence.
    alpha: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
    /// Per member: `align[p]` is the tree edge index at aligned position `p`.
    alignment: Vec<Vec<usize>>,
}

impl HypersetContext {
    /// Contexts for every hyperset of `hyperstage`, which must be valid for
    /// `tree`.
    pub fn build_all(
        tree: &EventTree,
        prior: &PriorAssignment,
        hyperstage: &Hyperstage,
    ) -> Result<Vec<HypersetContext>, ScoreError> {
        let violations = crate::tree::validate_hyperstage(tree, hyperstage);
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(ScoreError::InvalidHyperstage(text.join("; ")));
        }
        let mut contexts = Vec::with_capacity(hyperstage.len());
        for (hi, block) in hyperstage.blocks().iter().enumerate() {
            let mut alpha = Vec::with_capacity(block.len());
            let mut counts = Vec::with_capacity(block.len());
            let mut alignment = Vec::with_capacity(block.len());
            for &v in block {
                let align = hyperstage.alignment(tree, v).ok_or_else(|| {
                    ScoreError::InvalidHyperstage(format!("bad edge order for {}", vertex_name(v)))
                })?;
                let raw_alpha = prior.floret_alpha(tree, v);
                let raw_counts = tree.floret_counts(v);
                alpha.push(align.iter().map(|&i| raw_alpha[i]).collect());
                counts.push(align.iter().map(|&i| raw_counts[i]).collect());
                alignment.push(align);
            }
            contexts.push(HypersetContext {
                hyperset: hi,
                members: block.clone(),
                alpha,
                counts,
                alignment,
            });
        }
        Ok(contexts)
    }

    /// Context from raw aligned florets, for synthetic inputs.
    pub fn from_florets(
        hyperset: usize,
        members: Vec<VertexId>,
        alpha: Vec<Vec<f64>>,
        counts: Vec<Vec<u64>>,
    ) -> HypersetContext {
        debug_assert_eq!(members.len(), alpha.len());
        debug_assert_eq!(members.len(), counts.len());
        let alignment = alpha.iter().map(|a| (0..a.len()).collect()).collect();
        HypersetContext {
            hyperset,
            members,
            alpha,
            counts,
            alignment,
        }
    }

    pub fn hyperset(&self) -> usize {
        self.hyperset
    }

    pub fn members(&self) -> &[VertexId] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    fn member_index(&self, v: VertexId) -> Option<usize> {
        self.members.binary_search(&v).ok()
    }

    /// Tree edge index at aligned position `p` for member `v`.
    pub fn alignment_of(&self, v: VertexId) -> Option<&[usize]> {
        self.member_index(v).map(|i| self.alignment[i].as_slice())
    }

    /// Singleton stage for the `i`-th member.
    pub fn singleton(&self, i: usize) -> StageData {
        StageData::new(
            vec![self.members[i]],
            self.alpha[i].clone(),
            self.counts[i].clone(),
        )
    }

    /// Aggregated stage for an arbitrary subset of members (by vertex id).
    pub fn stage_for(&self, block: &[VertexId]) -> Result<StageData, ScoreError> {
        let mut iter = block.iter();
        let first = *iter.next().ok_or(ScoreError::NotAPartition {
            hyperset: self.hyperset,
        })?;
        let mut stage = self.singleton(self.member_index(first).ok_or_else(|| {
            ScoreError::BlockOutsideHyperset {
                vertex: vertex_name(first),
                hyperset: self.hyperset,
            }
        })?);
        for &v in iter {
            let idx =
                self.member_index(v)
                    .ok_or_else(|| ScoreError::BlockOutsideHyperset {
                        vertex: vertex_name(v),
                        hyperset: self.hyperset,
                    })?;
            stage = stage.merged(&self.singleton(idx))?;
        }
        Ok(stage)
    }

    /// Log marginal likelihood of a staging of this hyperset: the sum of its
    /// stage scores, evaluated in canonical block order.
    pub fn staging_score(&self, staging: &Staging) -> Result<f64, ScoreError> {
        let mut seen = 0usize;
        let mut total = 0.0;
        for block in staging.blocks() {
            let stage = self.stage_for(block)?;
            seen += block.len();
            total += stage_log_score(&stage);
        }
        if seen != self.members.len() {
            return Err(ScoreError::NotAPartition {
                hyperset: self.hyperset,
            });
        }
        Ok(total)
    }
}

/// Total log marginal likelihood of a full staging: one staging per
/// hyperset, scores summed across hypersets.
pub fn staging_log_score(
    contexts: &[HypersetContext],
    stagings: &[Staging],
) -> Result<f64, ScoreError> {
    if contexts.len() != stagings.len() {
        return Err(ScoreError::WrongStagingCount {
            expected: contexts.len(),
            got: stagings.len(),
        });
    }
    let mut total = 0.0;
    for (ctx, staging) in contexts.iter().zip(stagings) {
        total += ctx.staging_score(staging)?;
    }
    Ok(total)
}
