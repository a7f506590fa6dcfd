//! Assignment generation: uniform complete randomization, rejection-sampled
//! rerandomization (sequential and deterministic-parallel), and exhaustive
//! enumeration of small instances for exact oracles.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::criteria::{BalanceCriterion, BalanceDiagnostics};
use crate::error::{Error, Result};
use crate::population::{Assignment, DesignMatrix};
use crate::specialfn::SeededGenerator;

/// An accepted assignment together with how hard it was to find.
#[derive(Debug, Clone)]
pub struct RerandomizationOutcome {
    pub assignment: Assignment,
    pub diagnostics: BalanceDiagnostics,
    pub draws_used: u64,
    pub empirical_acceptance: f64,
    /// Stream that produced the winner (0 for the sequential sampler).
    pub winning_stream: u64,
}

/// Exact enumeration summary over all C(n, n1) assignments.
#[derive(Debug, Clone)]
pub struct EnumerationReport {
    pub total: u64,
    pub accepted_count: u64,
    pub exact_acceptance_prob: f64,
    /// Mean of tau_X over the accepted set.
    pub cond_mean: DVector<f64>,
    /// Covariance of tau_X over the accepted set (divisor = accepted count:
    /// this is the exact conditional covariance, not an estimate).
    pub cond_cov: DMatrix<f64>,
    /// Accepted assignments, kept only up to the requested cap.
    pub accepted: Option<Vec<Assignment>>,
}

/// Default rejection budget: max(10^6, 100 / p_a), so spurious failures are
/// vanishingly rare even at p_a = 0.0001 while worst-case latency stays
/// bounded.
pub fn default_budget(p_a: f64) -> u64 {
    let needed = (100.0 / p_a.max(1e-12)).ceil() as u64;
    needed.max(1_000_000)
}

/// One uniform draw over all C(n, n1) treatment vectors, by partial
/// Fisher-Yates on the index permutation.
pub fn draw_cre(n: usize, n1: usize, g: &mut SeededGenerator) -> Result<Assignment> {
    if n1 < 2 || n1 + 2 > n {
        return Err(Error::ArmTooSmall {
            n1,
            n0: n.saturating_sub(n1),
            needed: 2,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    partial_shuffle(&mut idx, n1, g);
    let mut z = vec![0u8; n];
    for &i in &idx[..n1] {
        z[i] = 1;
    }
    Assignment::new(z)
}

fn partial_shuffle(idx: &mut [usize], n1: usize, g: &mut SeededGenerator) {
    let n = idx.len();
    for i in 0..n1 {
        let j = g.gen_range(i..n);
        idx.swap(i, j);
    }
}

// Precomputed state for evaluating a criterion from treated-index sums in
// O(n1 K + K^2) per draw, avoiding per-draw allocation and full passes over
// the design. The candidate matrix is stored transposed (K x n) so a unit's
// covariates are contiguous.
struct FastEval<'a> {
    criterion: &'a BalanceCriterion,
    xt: DMatrix<f64>,
    col_totals: DVector<f64>,
    scale: f64,
    n: usize,
    n1: usize,
    // ReM: inverse covariance; ReMT: per-block inverses.
    s2x_inv: Option<DMatrix<f64>>,
    block_invs: Vec<DMatrix<f64>>,
    a: f64,
    thresholds: Vec<f64>,
}

impl<'a> FastEval<'a> {
    fn new(criterion: &'a BalanceCriterion, design: &DesignMatrix, n1: usize) -> Result<Self> {
        let n = design.n();
        let n0 = n - n1;
        let scale = (n1 * n0) as f64 / n as f64;
        let (matrix, s2x_inv, block_invs, a, thresholds) = match criterion {
            BalanceCriterion::Mahalanobis { a } => {
                let inv = Cholesky::new(design.s2x().clone())
                    .ok_or_else(|| Error::SingularCovariance {
                        columns: design.column_names().to_vec(),
                    })?
                    .inverse();
                (design.x().clone(), Some(inv), Vec::new(), *a, Vec::new())
            }
            BalanceCriterion::Tiered { thresholds, basis } => {
                let invs = basis
                    .s2_e_blocks
                    .iter()
                    .enumerate()
                    .map(|(t, b)| {
                        Cholesky::new(b.clone())
                            .map(|c| c.inverse())
                            .ok_or(Error::SingularTier { tier: t + 1 })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (
                    basis.e.clone(),
                    None,
                    invs,
                    f64::INFINITY,
                    thresholds.clone(),
                )
            }
            BalanceCriterion::General { .. } => (
                design.x().clone(),
                None,
                Vec::new(),
                f64::INFINITY,
                Vec::new(),
            ),
        };
        let col_totals = matrix.row_sum().transpose();
        Ok(Self {
            criterion,
            xt: matrix.transpose(),
            col_totals,
            scale,
            n,
            n1,
            s2x_inv,
            block_invs,
            a,
            thresholds,
        })
    }

    // Difference in candidate-column means given the treated indices.
    fn diff(&self, treated: &[usize], buf: &mut DVector<f64>) {
        buf.fill(0.0);
        for &i in treated {
            *buf += self.xt.column(i);
        }
        let n0 = (self.n - self.n1) as f64;
        // tau = S_T / n1 - (S_total - S_T) / n0
        let n1 = self.n1 as f64;
        for j in 0..buf.len() {
            buf[j] = buf[j] / n1 - (self.col_totals[j] - buf[j]) / n0;
        }
    }

    fn accept(&self, diff: &DVector<f64>) -> Result<bool> {
        match self.criterion {
            BalanceCriterion::Mahalanobis { .. } => {
                let inv = self.s2x_inv.as_ref().unwrap();
                Ok(self.scale * diff.dot(&(inv * diff)) <= self.a)
            }
            BalanceCriterion::Tiered { basis, .. } => {
                let mut start = 0;
                for (t, inv) in self.block_invs.iter().enumerate() {
                    let kt = basis.tier_sizes[t];
                    let dt = diff.rows(start, kt);
                    let m_t = self.scale * (dt.transpose() * inv * dt)[(0, 0)];
                    if m_t > self.thresholds[t] {
                        return Ok(false);
                    }
                    start += kt;
                }
                Ok(true)
            }
            BalanceCriterion::General {
                label,
                predicate,
                vxx,
            } => {
                let mu = diff * (self.n as f64).sqrt();
                predicate(&mu, vxx)
                    .map_err(|e| Error::PredicateFailed(format!("{label}: {e}")))
            }
        }
    }
}

/// Repeats complete randomization until the criterion accepts, up to
/// `max_draws` attempts.
pub fn rerandomize(
    criterion: &BalanceCriterion,
    design: &DesignMatrix,
    n1: usize,
    g: &mut SeededGenerator,
    max_draws: u64,
) -> Result<RerandomizationOutcome> {
    if max_draws < 1 {
        return Err(Error::Domain("max_draws must be >= 1".into()));
    }
    let n = design.n();
    if n1 < 2 || n1 + 2 > n {
        return Err(Error::ArmTooSmall {
            n1,
            n0: n.saturating_sub(n1),
            needed: 2,
        });
    }
    let eval = FastEval::new(criterion, design, n1)?;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut diff = DVector::zeros(design.k());
    for draw in 1..=max_draws {
        for (i, v) in idx.iter_mut().enumerate() {
            *v = i;
        }
        partial_shuffle(&mut idx, n1, g);
        eval.diff(&idx[..n1], &mut diff);
        if eval.accept(&diff)? {
            let mut z = vec![0u8; n];
            for &i in &idx[..n1] {
                z[i] = 1;
            }
            let assignment = Assignment::new(z)?;
            let mut diagnostics = criterion.accept(design, &assignment)?;
            diagnostics.draws_used = draw;
            return Ok(RerandomizationOutcome {
                assignment,
                diagnostics,
                draws_used: draw,
                empirical_acceptance: 1.0 / draw as f64,
                winning_stream: 0,
            });
        }
    }
    Err(Error::BudgetExhausted {
        draws: max_draws,
        observed_acceptance: 0.0,
    })
}

/// Parallel rejection sampling over `n_streams` derived streams. The winner
/// is the stream whose first acceptance happens at the smallest draw index
/// (ties broken by stream index), so the result depends only on
/// (seed, n_streams), never on thread scheduling. Streams abandon work once
/// another stream has already won at an earlier round.
pub fn rerandomize_parallel(
    criterion: &BalanceCriterion,
    design: &DesignMatrix,
    n1: usize,
    base: &SeededGenerator,
    n_streams: u64,
    max_draws_per_stream: u64,
) -> Result<RerandomizationOutcome> {
    if n_streams < 1 {
        return Err(Error::Domain("n_streams must be >= 1".into()));
    }
    use rayon::prelude::*;
    let best_round = AtomicU64::new(u64::MAX);
    let results: Vec<Result<Option<(u64, u64, Assignment)>>> = (0..n_streams)
        .into_par_iter()
        .map(|s| {
            let mut g = base.substream(s);
            let eval = FastEval::new(criterion, design, n1)?;
            let n = design.n();
            let mut idx: Vec<usize> = (0..n).collect();
            let mut diff = DVector::zeros(design.k());
            for draw in 1..=max_draws_per_stream {
                if draw > best_round.load(Ordering::Relaxed) {
                    return Ok(None);
                }
                for (i, v) in idx.iter_mut().enumerate() {
                    *v = i;
                }
                partial_shuffle(&mut idx, n1, &mut g);
                eval.diff(&idx[..n1], &mut diff);
                if eval.accept(&diff)? {
                    let mut z = vec![0u8; n];
                    for &i in &idx[..n1] {
                        z[i] = 1;
                    }
                    best_round.fetch_min(draw, Ordering::Relaxed);
                    return Ok(Some((draw, s, Assignment::new(z)?)));
                }
            }
            Ok(None)
        })
        .collect();

    let mut winner: Option<(u64, u64, Assignment)> = None;
    let mut any_err = None;
    for r in results {
        match r {
            Ok(Some(cand)) => {
                let better = match &winner {
                    None => true,
                    Some(best) => (cand.0, cand.1) < (best.0, best.1),
                };
                if better {
                    winner = Some(cand);
                }
            }
            Ok(None) => {}
            Err(e) => any_err = Some(e),
        }
    }
    if let Some(e) = any_err {
        return Err(e);
    }
    match winner {
        Some((draw, stream, assignment)) => {
            let mut diagnostics = criterion.accept(design, &assignment)?;
            diagnostics.draws_used = draw;
            Ok(RerandomizationOutcome {
                assignment,
                diagnostics,
                draws_used: draw,
                empirical_acceptance: 1.0 / draw as f64,
                winning_stream: stream,
            })
        }
        None => Err(Error::BudgetExhausted {
            draws: n_streams * max_draws_per_stream,
            observed_acceptance: 0.0,
        }),
    }
}

const ENUMERATION_GUARD: f64 = 1e7;

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut c = 1.0f64;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// Visits every one of the C(n, n1) assignments exactly once (Gosper's
/// combination iteration on bitmasks), applies the criterion, and streams
/// the conditional moments of tau_X over the accepted set. `keep_accepted`
/// caps how many accepted assignments are materialized (None keeps none).
pub fn enumerate_exact(
    criterion: &BalanceCriterion,
    design: &DesignMatrix,
    n1: usize,
    keep_accepted: Option<usize>,
) -> Result<EnumerationReport> {
    let n = design.n();
    if n1 < 2 || n1 + 2 > n {
        return Err(Error::ArmTooSmall {
            n1,
            n0: n.saturating_sub(n1),
            needed: 2,
        });
    }
    let count = binomial(n, n1);
    if n >= 63 || count > ENUMERATION_GUARD {
        return Err(Error::InstanceTooLarge {
            n,
            n1,
            count,
            guard: ENUMERATION_GUARD,
        });
    }
    let eval = FastEval::new(criterion, design, n1)?;
    let k = design.k();
    let mut accepted_count: u64 = 0;
    let mut total: u64 = 0;
    let mut sum = DVector::zeros(k);
    let mut outer = DMatrix::zeros(k, k);
    let mut kept: Vec<Assignment> = Vec::new();
    let cap = keep_accepted.unwrap_or(0);

    let mut diff = DVector::zeros(k);
    let mut treated = vec![0usize; n1];
    let limit: u64 = 1u64 << n;
    let mut v: u64 = (1u64 << n1) - 1;
    while v < limit {
        let mut m = v;
        let mut c = 0;
        while m != 0 {
            treated[c] = m.trailing_zeros() as usize;
            m &= m - 1;
            c += 1;
        }
        eval.diff(&treated, &mut diff);
        total += 1;
        if eval.accept(&diff)? {
            accepted_count += 1;
            sum += &diff;
            outer.ger(1.0, &diff, &diff, 1.0);
            if kept.len() < cap {
                let mut z = vec![0u8; n];
                for &i in &treated {
                    z[i] = 1;
                }
                kept.push(Assignment::new(z)?);
            }
        }
        // Gosper's hack: next bitmask with the same popcount.
        let t = v | (v - 1);
        v = (t + 1) | (((!t & (t + 1)) - 1) >> (v.trailing_zeros() + 1));
    }

    let (cond_mean, cond_cov) = if accepted_count > 0 {
        let m = &sum / accepted_count as f64;
        let cov = &outer / accepted_count as f64 - &m * m.transpose();
        (m, cov)
    } else {
        (DVector::zeros(k), DMatrix::zeros(k, k))
    };
    Ok(EnumerationReport {
        total,
        accepted_count,
        exact_acceptance_prob: accepted_count as f64 / total as f64,
        cond_mean,
        cond_cov,
        accepted: keep_accepted.map(|_| kept),
    })
}
