//! Voting-based block selection.
//!
//! Every instance "votes" for each gate-controlled block with its mark; the
//! ledger sums these votes, and the blocks with the smallest totals are pruned
//! `k` at a time until `floor(γ·N)` blocks are gone.

use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};
use crate::netcore::{GateMask, NetworkSpec};

/// Per-block running sums of marks over `count` instances.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkLedger {
    /// `None` for blocks that are not gate-controlled (pruned, fixed, exempt).
    sums: Vec<Option<f64>>,
    count: usize,
}

impl MarkLedger {
    /// An empty ledger with one entry per prunable block of `mask`.
    pub fn new(mask: &GateMask) -> Self {
        Self {
            sums: (0..mask.len())
                .map(|i| mask.is_prunable(i).then_some(0.0))
                .collect(),
            count: 0,
        }
    }

    /// A ledger with given totals, e.g. for dry runs.
    pub fn from_sums(sums: Vec<Option<f64>>, count: usize) -> Self {
        Self { sums, count }
    }

    pub fn sums(&self) -> &[Option<f64>] {
        &self.sums
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self, block: usize) -> Option<f64> {
        self.sums[block].map(|s| s / self.count.max(1) as f64)
    }

    /// Adds one batch: `marks[block]` holds one mark per instance, or `None`
    /// for blocks that emitted no mark.
    pub fn accumulate(&mut self, marks: &[Option<Vec<f32>>]) -> Result<()> {
        if marks.len() != self.sums.len() {
            return Err(Error::Contract(format!(
                "marks cover {} blocks, ledger has {}",
                marks.len(),
                self.sums.len()
            )));
        }
        let mut batch = None;
        for (block, (slot, m)) in self.sums.iter().zip(marks).enumerate() {
            match (slot, m) {
                (None, Some(_)) => {
                    return Err(Error::Contract(format!(
                        "mark emitted for block {block}, which is not gate-controlled"
                    )))
                }
                (Some(_), None) => {
                    return Err(Error::Contract(format!("missing marks for block {block}")))
                }
                (Some(_), Some(v)) => match batch {
                    None => batch = Some(v.len()),
                    Some(n) if n != v.len() => {
                        return Err(Error::Contract(format!(
                            "block {block} has {} marks, expected {n}",
                            v.len()
                        )))
                    }
                    _ => {}
                },
                (None, None) => {}
            }
        }
        for (slot, m) in self.sums.iter_mut().zip(marks) {
            if let (Some(sum), Some(v)) = (slot.as_mut(), m) {
                for &x in v {
                    *sum += x as f64;
                }
            }
        }
        self.count += batch.unwrap_or(0);
        Ok(())
    }
}

/// `floor(γ·N)`, tolerant of binary rounding just below an integer.
pub fn blocks_to_prune(n: usize, gamma: f64) -> usize {
    (gamma * n as f64 + 1e-9).floor() as usize
}

/// Per-iteration prune count that spreads the work over about three iterations.
pub fn default_k(n: usize, gamma: f64) -> usize {
    blocks_to_prune(n, gamma).div_ceil(3).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    pub mask: GateMask,
    pub gamma: f64,
    pub k: usize,
    target_unpruned: usize,
}

impl PruneState {
    pub fn new(mask: GateMask, gamma: f64, k: Option<usize>) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("pruning ratio {gamma} outside [0, 1)")));
        }
        let n = mask.len();
        let k = k.unwrap_or_else(|| default_k(n, gamma));
        if k == 0 {
            return Err(Error::Config("blocks per iteration must be at least 1".into()));
        }
        Ok(Self {
            mask,
            gamma,
            k,
            target_unpruned: n - blocks_to_prune(n, gamma),
        })
    }

    pub fn target_unpruned(&self) -> usize {
        self.target_unpruned
    }

    pub fn pruning_done(&self) -> bool {
        self.mask.unpruned_count() <= self.target_unpruned
    }

    /// Prunes up to `k` of the lowest-total prunable blocks (ties: lower index
    /// first), never overshooting the target. Returns them in pruning order.
    pub fn select_and_prune(&mut self, ledger: &MarkLedger) -> Result<Vec<usize>> {
        if ledger.count() == 0 {
            return Err(Error::Contract("mark ledger is empty".into()));
        }
        if ledger.sums().len() != self.mask.len() {
            return Err(Error::Contract("ledger and mask sizes differ".into()));
        }
        let mut candidates: Vec<(f64, usize)> = self
            .mask
            .prunable()
            .into_iter()
            .filter_map(|i| ledger.sums()[i].map(|s| (s, i)))
            .collect();
        if candidates.is_empty() {
            return Err(Error::PruningExhausted {
                unpruned: self.mask.unpruned_count(),
                target: self.target_unpruned,
            });
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let remaining = self.mask.unpruned_count().saturating_sub(self.target_unpruned);
        let take = self.k.min(remaining).min(candidates.len());
        let chosen: Vec<usize> = candidates[..take].iter().map(|&(_, i)| i).collect();
        for &i in &chosen {
            self.mask.prune(i)?;
        }
        Ok(chosen)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruningSummary {
    /// Blocks pruned in each iteration, in pruning order.
    pub iterations: Vec<Vec<usize>>,
    /// Ran out of prunable blocks before reaching the target.
    pub exhausted: bool,
}

impl PruningSummary {
    pub fn total_pruned(&self) -> usize {
        self.iterations.iter().map(Vec::len).sum()
    }
}

/// The two halves of one pruning iteration that need the model.
pub trait PruneDriver {
    /// Mark totals for the current mask.
    fn ledger(&mut self, iter: usize, mask: &GateMask) -> Result<MarkLedger>;
    /// Called after `pruned` were removed in iteration `iter` (where
    /// retraining happens).
    fn after_prune(&mut self, iter: usize, state: &PruneState, pruned: &[usize]) -> Result<()>;
}

/// The iterative loop: while the target is not met, obtain a ledger for the
/// current mask, prune, then hand control back to the driver. Iterations are
/// numbered from `first_iter` so a resumed run keeps its numbering.
/// Exhaustion stops the loop with a warning.
pub fn pruning_loop(
    state: &mut PruneState,
    driver: &mut impl PruneDriver,
    first_iter: usize,
) -> Result<PruningSummary> {
    let mut summary = PruningSummary::default();
    let mut iter = first_iter;
    while !state.pruning_done() {
        let ledger = driver.ledger(iter, &state.mask)?;
        let pruned = match state.select_and_prune(&ledger) {
            Ok(p) => p,
            Err(Error::PruningExhausted { unpruned, target }) => {
                warn!(
                    "pruning exhausted after {} blocks: {unpruned} unpruned, target {target}",
                    summary.total_pruned()
                );
                summary.exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        driver.after_prune(iter, state, &pruned)?;
        summary.iterations.push(pruned);
        iter += 1;
    }
    Ok(summary)
}

/// Plain-text table of block, stage, total mark, mean mark and state.
pub fn mark_dump(spec: &NetworkSpec, mask: &GateMask, ledger: &MarkLedger) -> String {
    let mut out = String::from("# block stage mark mean state\n");
    for b in &spec.blocks {
        let (total, mean) = match ledger.sums()[b.index] {
            Some(s) => (
                format!("{s:.6}"),
                format!("{:.6}", ledger.mean(b.index).unwrap_or(0.0)),
            ),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(out, "{} {} {total} {mean} {}", b.index, b.stage, mask.state(b.index));
    }
    out
}
