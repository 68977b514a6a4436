//! Desk-scale ground truth by exhaustive enumeration.
//!
//! Brute-force counterparts to the samplers: Bell-number model-space
//! counts, a restricted-growth-string enumerator over all stagings of one
//! hyperset, and the exact well-performing set computed from the full
//! enumeration. Usable only when the hyperset is small; the enumeration
//! cap guards against accidental blow-ups.

use thiserror::Error;

use crate::ensemble::{EnsembleError, HypersetEnsemble};
use crate::scoring::HypersetContext;
use crate::search::{SampledStaging, Staging};
use crate::tree::Hyperstage;

/// Largest block size [`enumerate_stagings`] accepts unless overridden.
pub const DEFAULT_ENUMERATION_CAP: usize = 12;

const MAX_BELL: usize = 25;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("Bell numbers supported for 0..={MAX_BELL}, got {0}")]
    BellOutOfRange(usize),
    #[error("hyperset size {size} exceeds the enumeration cap {cap}")]
    CapExceeded { size: usize, cap: usize },
    #[error("model space size overflows u128")]
    Overflow,
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// nth Bell number via the Bell-triangle recurrence. Exact for n ≤ 25.
pub fn bell(n: usize) -> Result<u64, ExactError> {
    if n > MAX_BELL {
        return Err(ExactError::BellOutOfRange(n));
    }
    // Row n ends with bell(n+1), which exceeds u64 for n = 25; widen.
    let mut row: Vec<u128> = vec![1];
    for _ in 1..=n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().expect("rows are non-empty"));
        for &v in &row {
            let last = *next.last().expect("pushed above");
            next.push(last + v);
        }
        row = next;
    }
    Ok(row[0] as u64)
}

/// Number of stagings a hyperstage admits: the product of the Bell numbers
/// of its block sizes.
pub fn model_space_size(hyperstage: &Hyperstage) -> Result<u128, ExactError> {
    let mut total: u128 = 1;
    for block in hyperstage.blocks() {
        let b = bell(block.len())? as u128;
        total = total.checked_mul(b).ok_or(ExactError::Overflow)?;
    }
    Ok(total)
}

/// Iterator over all set partitions of `{0..n}` as restricted growth
/// strings: entry `i` names the block of element `i`, blocks numbered by
/// first appearance. Emits each partition exactly once, `bell(n)` in all.
pub struct Partitions {
    assignment: Vec<usize>,
    started: bool,
    done: bool,
}

impl Partitions {
    pub fn new(n: usize) -> Partitions {
        Partitions {
            assignment: vec![0; n],
            started: false,
            done: n == 0,
        }
    }
}

impl Iterator for Partitions {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        if !self.started {
            self.started = true;
            return Some(self.assignment.clone());
        }
        let n = self.assignment.len();
        // Rightmost position that can move to a (possibly new) higher block.
        let mut prefix_max = vec![0usize; n];
        for i in 1..n {
            prefix_max[i] = prefix_max[i - 1].max(self.assignment[i - 1]);
        }
        for i in (1..n).rev() {
            if self.assignment[i] <= prefix_max[i] {
                self.assignment[i] += 1;
                for k in (i + 1)..n {
                    self.assignment[k] = 0;
                }
                return Some(self.assignment.clone());
            }
        }
        self.done = true;
        None
    }
}

/// Every staging of the hyperset with its exact log score.
pub struct StagingEnumerator<'a> {
    ctx: &'a HypersetContext,
    partitions: Partitions,
}

impl<'a> StagingEnumerator<'a> {
    pub fn new(ctx: &'a HypersetContext, cap: usize) -> Result<StagingEnumerator<'a>, ExactError> {
        if ctx.size() > cap {
            return Err(ExactError::CapExceeded {
                size: ctx.size(),
                cap,
            });
        }
        Ok(StagingEnumerator {
            ctx,
            partitions: Partitions::new(ctx.size()),
        })
    }
}

impl Iterator for StagingEnumerator<'_> {
    type Item = (Staging, f64);

    fn next(&mut self) -> Option<(Staging, f64)> {
        let assignment = self.partitions.next()?;
        let block_count = assignment.iter().max().map_or(0, |m| m + 1);
        let mut blocks: Vec<Vec<crate::tree::VertexId>> = vec![Vec::new(); block_count];
        for (i, &b) in assignment.iter().enumerate() {
            blocks[b].push(self.ctx.members()[i]);
        }
        let staging = Staging::new(self.ctx.hyperset(), blocks);
        let score = self
            .ctx
            .staging_score(&staging)
            .expect("enumerated blocks partition the hyperset");
        Some((staging, score))
    }
}

/// Convenience wrapper around [`StagingEnumerator`].
pub fn enumerate_stagings(
    ctx: &HypersetContext,
    cap: usize,
) -> Result<StagingEnumerator<'_>, ExactError> {
    StagingEnumerator::new(ctx, cap)
}

/// Exact maximum a posteriori staging by full enumeration.
pub fn exact_map(ctx: &HypersetContext, cap: usize) -> Result<(Staging, f64), ExactError> {
    let mut best: Option<(Staging, f64)> = None;
    for (staging, score) in enumerate_stagings(ctx, cap)? {
        match &best {
            Some((_, s)) if *s >= score => {}
            _ => best = Some((staging, score)),
        }
    }
    Ok(best.expect("hypersets are non-empty"))
}

/// Exact well-performing set: windows and razors the full enumeration.
///
/// Streams twice so only the windowed stagings are ever materialized.
pub fn exact_window(
    ctx: &HypersetContext,
    beta: f64,
    cap: usize,
) -> Result<HypersetEnsemble, ExactError> {
    let mut max_score = f64::NEG_INFINITY;
    for (_, score) in enumerate_stagings(ctx, cap)? {
        max_score = max_score.max(score);
    }
    let ln_beta = beta.ln();
    let mut entries: Vec<SampledStaging> = Vec::new();
    for (staging, log_score) in enumerate_stagings(ctx, cap)? {
        if max_score - log_score < ln_beta {
            entries.push(SampledStaging {
                staging,
                log_score,
                hits: 0,
            });
        }
    }
    entries.sort_by(|a, b| {
        b.log_score
            .partial_cmp(&a.log_score)
            .expect("scores are finite")
            .then_with(|| a.staging.cmp(&b.staging))
    });
    Ok(HypersetEnsemble::build(ctx.hyperset(), entries, beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::HypersetContext;
    use std::collections::BTreeSet;

    #[test]
    fn bell_values() {
        assert_eq!(bell(0).unwrap(), 1);
        assert_eq!(bell(1).unwrap(), 1);
        assert_eq!(bell(2).unwrap(), 2);
        assert_eq!(bell(3).unwrap(), 5);
        assert_eq!(bell(8).unwrap(), 4140);
        assert_eq!(bell(25).unwrap(), 4_638_590_332_229_999_353);
        assert!(bell(26).is_err());
    }

    #[test]
    fn partitions_are_distinct_and_complete() {
        for n in 1..=8 {
            let all: Vec<Vec<usize>> = Partitions::new(n).collect();
            assert_eq!(all.len() as u64, bell(n).unwrap(), "n = {n}");
            let unique: BTreeSet<Vec<usize>> = all.iter().cloned().collect();
            assert_eq!(unique.len(), all.len());
        }
    }

    #[test]
    fn model_space_sizes() {
        // All-singleton hyperstage.
        let h = Hyperstage::new(vec![vec![0], vec![1], vec![2]], Default::default());
        assert_eq!(model_space_size(&h).unwrap(), 1);
    }

    fn zero_ctx(n: usize) -> HypersetContext {
        HypersetContext::from_florets(
            0,
            (0..n).collect(),
            vec![vec![0.5, 0.5]; n],
            vec![vec![0, 0]; n],
        )
    }

    #[test]
    fn enumeration_counts_match_bell() {
        for n in 1..=6 {
            let ctx = zero_ctx(n);
            let count = enumerate_stagings(&ctx, 12).unwrap().count();
            assert_eq!(count as u64, bell(n).unwrap());
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let ctx = zero_ctx(5);
        assert!(matches!(
            enumerate_stagings(&ctx, 4),
            Err(ExactError::CapExceeded { size: 5, cap: 4 })
        ));
    }

    #[test]
    fn zero_data_scores_are_all_zero() {
        let ctx = zero_ctx(4);
        for (_, score) in enumerate_stagings(&ctx, 12).unwrap() {
            assert_eq!(score, 0.0);
        }
    }

    #[test]
    fn zero_data_window_keeps_everything() {
        // Equal weights: the window keeps all, and the strict razor removes
        // none despite everything being nested under the single-block staging.
        let ctx = zero_ctx(3);
        let window = exact_window(&ctx, 20.0, 12).unwrap();
        assert_eq!(window.entries.len(), 5);
        assert!(window.well_performing.iter().all(|&k| k));
    }

    #[test]
    fn dominant_staging_yields_singleton_window() {
        let ctx = HypersetContext::from_florets(
            0,
            vec![0, 1],
            vec![vec![1.0, 1.0]; 2],
            vec![vec![40, 0], vec![40, 0]],
        );
        let window = exact_window(&ctx, 20.0, 12).unwrap();
        let kept = window.well_performing_stagings();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].blocks(), &[vec![0, 1]]);
    }

    #[test]
    fn exact_map_beats_or_equals_every_enumerated_score() {
        let ctx = HypersetContext::from_florets(
            0,
            vec![0, 1, 2],
            vec![vec![1.0, 1.0]; 3],
            vec![vec![9, 1], vec![7, 3], vec![1, 9]],
        );
        let (_, best) = exact_map(&ctx, 12).unwrap();
        for (_, score) in enumerate_stagings(&ctx, 12).unwrap() {
            assert!(score <= best + 1e-12);
        }
    }
}
