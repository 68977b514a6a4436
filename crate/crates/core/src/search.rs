//! Stage search within one hyperset.
//!
//! Both searches are agglomerative: they start from the all-singleton
//! staging and merge stages while some merge has a positive log Bayes
//! factor. [`hac`] always takes the best merge; [`whac_run`] samples the
//! merge with probability proportional to the Bayes factor, so repeated
//! seeded runs explore the neighbourhood of high-scoring stagings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scoring::{merge_log_bf, stage_log_score, HypersetContext, StageData};
use crate::tree::VertexId;

/// Partition of a hyperset's situations into stages, held in canonical
/// form: members sorted within blocks, blocks sorted by smallest member.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Staging {
    hyperset: usize,
    blocks: Vec<Vec<VertexId>>,
}

impl Staging {
    pub fn new(hyperset: usize, mut blocks: Vec<Vec<VertexId>>) -> Staging {
        for block in &mut blocks {
            block.sort_unstable();
        }
        blocks.retain(|b| !b.is_empty());
        blocks.sort_by_key(|b| b[0]);
        Staging { hyperset, blocks }
    }

    pub fn singletons(hyperset: usize, members: &[VertexId]) -> Staging {
        Staging::new(hyperset, members.iter().map(|&v| vec![v]).collect())
    }

    pub fn hyperset(&self) -> usize {
        self.hyperset
    }

    pub fn blocks(&self) -> &[Vec<VertexId>] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn members(&self) -> Vec<VertexId> {
        let mut all: Vec<VertexId> = self.blocks.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn is_all_singletons(&self) -> bool {
        self.blocks.iter().all(|b| b.len() == 1)
    }

    /// Index of the block containing `v`.
    pub fn block_of(&self, v: VertexId) -> Option<usize> {
        self.blocks.iter().position(|b| b.binary_search(&v).is_ok())
    }

    pub fn co_staged(&self, s: VertexId, t: VertexId) -> bool {
        match (self.block_of(s), self.block_of(t)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    pub fn to_names(&self) -> Vec<Vec<String>> {
        self.blocks
            .iter()
            .map(|b| b.iter().map(|&v| crate::tree::vertex_name(v)).collect())
            .collect()
    }
}

/// A possible merge of two stages, by their canonical indices, with its
/// cached log Bayes factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeCandidate {
    pub i: usize,
    pub j: usize,
    pub log_bf: f64,
}

/// Knobs for a sampling sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub base_seed: u64,
    /// Run multiplier: each hyperset gets `k × (its size)` runs.
    pub k: usize,
    /// Merges qualify only when their log Bayes factor exceeds this.
    pub epsilon: f64,
    /// Sample from all remaining pairs rather than only improving ones.
    /// The stopping rule is unchanged; kept for comparison experiments.
    pub sample_all_candidates: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base_seed: 0,
            k: 100,
            epsilon: 0.0,
            sample_all_candidates: false,
        }
    }
}

// Agglomeration state: stages in canonical order (sorted by smallest
// member) with cached per-stage scores and pairwise log BFs. Merging
// stages i < j keeps canonical order, so only pairs touching the merged
// stage need rescoring.
struct ClusterState<'a> {
    ctx: &'a HypersetContext,
    stages: Vec<StageData>,
    scores: Vec<f64>,
    bf: Vec<Vec<f64>>,
}

impl<'a> ClusterState<'a> {
    fn new(ctx: &'a HypersetContext) -> ClusterState<'a> {
        let n = ctx.size();
        let stages: Vec<StageData> = (0..n).map(|i| ctx.singleton(i)).collect();
        let scores: Vec<f64> = stages.iter().map(stage_log_score).collect();
        let mut state = ClusterState {
            ctx,
            stages,
            scores,
            bf: vec![vec![0.0; n]; n],
        };
        for i in 0..n {
            for j in (i + 1)..n {
                state.bf[i][j] = state.pair_bf(i, j);
            }
        }
        state
    }

    fn pair_bf(&self, i: usize, j: usize) -> f64 {
        let merged = self.stages[i]
            .merged(&self.stages[j])
            .expect("aligned within one hyperset");
        stage_log_score(&merged) - self.scores[i] - self.scores[j]
    }

    fn len(&self) -> usize {
        self.stages.len()
    }

    fn candidates(&self, epsilon: f64, all: bool) -> Vec<MergeCandidate> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                let log_bf = self.bf[i][j];
                if all || log_bf > epsilon {
                    out.push(MergeCandidate { i, j, log_bf });
                }
            }
        }
        out
    }

    fn any_improving(&self, epsilon: f64) -> bool {
        (0..self.len()).any(|i| ((i + 1)..self.len()).any(|j| self.bf[i][j] > epsilon))
    }

    fn merge(&mut self, i: usize, j: usize) {
        debug_assert!(i < j);
        let merged = self.stages[i]
            .merged(&self.stages[j])
            .expect("aligned within one hyperset");
        self.stages[i] = merged;
        self.scores[i] = stage_log_score(&self.stages[i]);
        self.stages.remove(j);
        self.scores.remove(j);
        self.bf.remove(j);
        for row in &mut self.bf {
            row.remove(j);
        }
        for k in 0..self.len() {
            if k < i {
                self.bf[k][i] = self.pair_bf(k, i);
            } else if k > i {
                self.bf[i][k] = self.pair_bf(i, k);
            }
        }
    }

    fn staging(&self) -> Staging {
        Staging::new(
            self.ctx.hyperset(),
            self.stages.iter().map(|s| s.members.clone()).collect(),
        )
    }

    fn total_score(&self) -> f64 {
        // Recomputed canonically so identical stagings give bit-identical
        // scores regardless of the merge path that reached them.
        self.ctx
            .staging_score(&self.staging())
            .expect("state blocks partition the hyperset")
    }
}

/// Greedy agglomeration: repeatedly apply the best qualifying merge.
/// Ties break on the lexicographically smallest canonical pair.
pub fn hac(ctx: &HypersetContext, epsilon: f64) -> (Staging, f64) {
    let mut state = ClusterState::new(ctx);
    while state.len() > 1 {
        let mut best: Option<MergeCandidate> = None;
        for i in 0..state.len() {
            for j in (i + 1)..state.len() {
                let log_bf = state.bf[i][j];
                if log_bf > epsilon && best.map_or(true, |b| log_bf > b.log_bf) {
                    best = Some(MergeCandidate { i, j, log_bf });
                }
            }
        }
        match best {
            Some(c) => state.merge(c.i, c.j),
            None => break,
        }
    }
    (state.staging(), state.total_score())
}

/// Merge probabilities proportional to the candidates' Bayes factors,
/// normalized with a max shift so huge log values cannot overflow.
pub fn merge_distribution(candidates: &[MergeCandidate]) -> Vec<f64> {
    assert!(!candidates.is_empty(), "no merge candidates to weight");
    let max = candidates
        .iter()
        .map(|c| c.log_bf)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|c| (c.log_bf - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

// Inverse-CDF draw over an explicit probability vector.
fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One randomized agglomeration pass, deterministic for a given seed.
pub fn whac_run(ctx: &HypersetContext, config: &RunConfig, seed: u64) -> (Staging, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ClusterState::new(ctx);
    while state.len() > 1 && state.any_improving(config.epsilon) {
        let candidates = state.candidates(config.epsilon, config.sample_all_candidates);
        let probs = merge_distribution(&candidates);
        let pick = candidates[sample_index(&probs, &mut rng)];
        state.merge(pick.i, pick.j);
    }
    (state.staging(), state.total_score())
}

/// A unique staging found by a sampling sweep, with the number of runs
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledStaging {
    pub staging: Staging,
    pub log_score: f64,
    pub hits: usize,
}

/// Run w-HAC `k × size` times with consecutive seeds and deduplicate by
/// canonical staging. Output is sorted by descending score, then canonical
/// form; runs execute in parallel but the result is order-independent.
pub fn whac_ensemble(ctx: &HypersetContext, config: &RunConfig) -> Vec<SampledStaging> {
    let runs = config.k * ctx.size();
    let outcomes: Vec<(Staging, f64)> = (0..runs as u64)
        .into_par_iter()
        .map(|offset| whac_run(ctx, config, config.base_seed.wrapping_add(offset)))
        .collect();
    let mut unique: std::collections::BTreeMap<Staging, SampledStaging> =
        std::collections::BTreeMap::new();
    for (staging, log_score) in outcomes {
        unique
            .entry(staging.clone())
            .and_modify(|e| e.hits += 1)
            .or_insert(SampledStaging {
                staging,
                log_score,
                hits: 1,
            });
    }
    let mut out: Vec<SampledStaging> = unique.into_values().collect();
    out.sort_by(|a, b| {
        b.log_score
            .partial_cmp(&a.log_score)
            .expect("scores are finite")
            .then_with(|| a.staging.cmp(&b.staging))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::HypersetContext;
    use approx::assert_abs_diff_eq;

    fn binary_ctx(counts: &[[u64; 2]]) -> HypersetContext {
        let members: Vec<VertexId> = (1..=counts.len()).collect();
        HypersetContext::from_florets(
            0,
            members,
            vec![vec![1.0, 1.0]; counts.len()],
            counts.iter().map(|c| c.to_vec()).collect(),
        )
    }

    #[test]
    fn zero_counts_stay_singleton() {
        let ctx = binary_ctx(&[[0, 0], [0, 0], [0, 0]]);
        let (staging, score) = hac(&ctx, 0.0);
        assert!(staging.is_all_singletons());
        assert_eq!(score, 0.0);
        for seed in 0..20 {
            let (s, _) = whac_run(&ctx, &RunConfig::default(), seed);
            assert!(s.is_all_singletons());
        }
    }

    #[test]
    fn matching_counts_merge() {
        // log BF of merging (10,0) with (10,0) is ln(726/506) > 0.
        let ctx = binary_ctx(&[[10, 0], [10, 0]]);
        let (staging, _) = hac(&ctx, 0.0);
        assert_eq!(staging.blocks(), &[vec![1, 2]]);
    }

    #[test]
    fn opposed_counts_stay_apart() {
        // log BF of merging (2,0) with (0,2) is ln(27/70) < 0.
        let ctx = binary_ctx(&[[2, 0], [0, 2]]);
        let (staging, _) = hac(&ctx, 0.0);
        assert!(staging.is_all_singletons());
    }

    #[test]
    fn whac_matches_hac_when_one_candidate_qualifies() {
        // Two matching florets and one opposed: the only positive BF is (1,2).
        let ctx = binary_ctx(&[[12, 0], [12, 0], [0, 12]]);
        let state = ClusterState::new(&ctx);
        assert_eq!(state.candidates(0.0, false).len(), 1);
        let (greedy, greedy_score) = hac(&ctx, 0.0);
        for seed in 0..10 {
            let (sampled, score) = whac_run(&ctx, &RunConfig::default(), seed);
            assert_eq!(sampled, greedy);
            assert_eq!(score, greedy_score);
        }
    }

    #[test]
    fn distribution_matches_bf_ratio() {
        let candidates = vec![
            MergeCandidate { i: 0, j: 1, log_bf: 2.0f64.ln() },
            MergeCandidate { i: 0, j: 2, log_bf: 6.0f64.ln() },
        ];
        let probs = merge_distribution(&candidates);
        assert_abs_diff_eq!(probs[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn distribution_is_shift_invariant() {
        let candidates = vec![
            MergeCandidate { i: 0, j: 1, log_bf: 1000.0 + 2.0f64.ln() },
            MergeCandidate { i: 0, j: 2, log_bf: 1000.0 + 6.0f64.ln() },
        ];
        let probs = merge_distribution(&candidates);
        assert_abs_diff_eq!(probs[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn single_candidate_gets_probability_one() {
        let candidates = vec![MergeCandidate { i: 0, j: 1, log_bf: 0.5 }];
        assert_eq!(merge_distribution(&candidates), vec![1.0]);
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let ctx = binary_ctx(&[[9, 1], [8, 2], [1, 9], [0, 10]]);
        let cfg = RunConfig::default();
        for seed in 0..25 {
            let a = whac_run(&ctx, &cfg, seed);
            let b = whac_run(&ctx, &cfg, seed);
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
    }

    #[test]
    fn first_step_frequencies_match_distribution() {
        // Two well-separated clusters; check the empirical first merge against
        // the exact first-step distribution over 500 seeded runs.
        let ctx = binary_ctx(&[[20, 0], [20, 0], [0, 20], [0, 20]]);
        let state = ClusterState::new(&ctx);
        let candidates = state.candidates(0.0, false);
        let probs = merge_distribution(&candidates);
        let runs = 500usize;
        let mut counts = vec![0usize; candidates.len()];
        for seed in 0..runs as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        for (idx, &p) in probs.iter().enumerate() {
            let freq = counts[idx] as f64 / runs as f64;
            let se = (p * (1.0 - p) / runs as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * se.max(1e-9),
                "candidate {idx}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn ensemble_counts_runs_and_dedupes() {
        let ctx = HypersetContext::from_florets(0, vec![7], vec![vec![1.0, 1.0]], vec![vec![3, 4]]);
        let cfg = RunConfig { k: 100, ..RunConfig::default() };
        let out = whac_ensemble(&ctx, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].hits, 100);
        assert_eq!(out[0].staging.blocks(), &[vec![7]]);
    }

    #[test]
    fn ensemble_total_hits_equals_run_budget() {
        let ctx = binary_ctx(&[[5, 5], [6, 4], [0, 9]]);
        let cfg = RunConfig { k: 40, base_seed: 11, ..RunConfig::default() };
        let out = whac_ensemble(&ctx, &cfg);
        let total: usize = out.iter().map(|s| s.hits).sum();
        assert_eq!(total, 40 * 3);
        // Descending score order.
        for pair in out.windows(2) {
            assert!(pair[0].log_score >= pair[1].log_score);
        }
    }

    #[test]
    fn termination_leaves_no_improving_merge() {
        // Weak razor: at termination every remaining pairwise BF is <= epsilon.
        let ctx = binary_ctx(&[[14, 2], [13, 3], [2, 11], [4, 12], [8, 8]]);
        let cfg = RunConfig::default();
        for seed in 0..30 {
            let (staging, _) = whac_run(&ctx, &cfg, seed);
            let blocks = staging.blocks();
            for i in 0..blocks.len() {
                for j in (i + 1)..blocks.len() {
                    let a = ctx.stage_for(&blocks[i]).unwrap();
                    let b = ctx.stage_for(&blocks[j]).unwrap();
                    assert!(merge_log_bf(&a, &b).unwrap() <= cfg.epsilon);
                }
            }
        }
    }

    #[test]
    fn greedy_score_never_below_singletons() {
        let ctx = binary_ctx(&[[7, 3], [6, 4], [2, 8]]);
        let singleton_score = ctx
            .staging_score(&Staging::singletons(0, ctx.members()))
            .unwrap();
        let (_, score) = hac(&ctx, 0.0);
        assert!(score >= singleton_score);
    }
}
