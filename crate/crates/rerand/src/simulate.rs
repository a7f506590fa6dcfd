//! Replication engine: synthetic data-generating processes, paired
//! rerandomized-vs-complete-randomization studies, and the aggregate
//! coverage / length / variance-reduction / effective-sample-size reports
//! built from them.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::BalanceCriterion;
use crate::error::{Error, Result};
use crate::inference::{estimate_rho_t, estimate_vtt_r2, neyman_baseline};
use crate::population::{
    finite_moments, tier_orthogonalize, Assignment, DesignMatrix, TierBasis,
};
use crate::sampler::{default_budget, draw_cre, rerandomize};
use crate::specialfn::SeededGenerator;

/// Binary-outcome process: covariates are iid Bernoulli(1/2) and the
/// potential outcomes are threshold crossings
/// Y(z) = I{z + beta_z'(X - 1/2) + delta_z >= 0} with independent standard
/// normal shocks per arm.
pub fn dgp_binary(
    n: usize,
    k: usize,
    beta1: &[f64],
    beta0: &[f64],
    g: &mut SeededGenerator,
) -> Result<(DesignMatrix, Vec<f64>, Vec<f64>)> {
    if beta1.len() != k || beta0.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "coefficient lengths {} / {} vs K = {k}",
            beta1.len(),
            beta0.len()
        )));
    }
    let mut x = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            x[(i, j)] = if g.uniform() < 0.5 { 1.0 } else { 0.0 };
        }
    }
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for i in 0..n {
        let mut lin1 = 0.0;
        let mut lin0 = 0.0;
        for j in 0..k {
            let c = x[(i, j)] - 0.5;
            lin1 += beta1[j] * c;
            lin0 += beta0[j] * c;
        }
        let d1 = g.standard_normal();
        let d0 = g.standard_normal();
        y1.push(if 1.0 + lin1 + d1 >= 0.0 { 1.0 } else { 0.0 });
        y0.push(if lin0 + d0 >= 0.0 { 1.0 } else { 0.0 });
    }
    let names = (1..=k).map(|j| format!("x{j}")).collect();
    Ok((DesignMatrix::new(x, names)?, y1, y0))
}

/// Default coefficient vectors for `dgp_binary`: beta1 = (2,3,4),
/// beta0 = (0,1,1) with K = 3.
pub fn default_binary_coefficients() -> (Vec<f64>, Vec<f64>) {
    (vec![2.0, 3.0, 4.0], vec![0.0, 1.0, 1.0])
}

/// Coefficients for the grade-point-style tiered process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpaCoefficients {
    pub intercept1: f64,
    pub intercept0: f64,
    pub beta1: Vec<f64>,
    pub beta0: Vec<f64>,
}

/// Sensible defaults: tier-t coefficients shrink geometrically so earlier
/// tiers explain more outcome variation, matching the intended use of
/// tiers as an importance ordering.
pub fn default_gpa_coefficients(tier_sizes: &[usize]) -> GpaCoefficients {
    let mut beta1 = Vec::new();
    let mut beta0 = Vec::new();
    for (t, &kt) in tier_sizes.iter().enumerate() {
        let scale = 0.5_f64.powi(t as i32);
        for j in 0..kt {
            beta1.push(0.35 * scale / (1.0 + j as f64 * 0.5));
            beta0.push(0.30 * scale / (1.0 + j as f64 * 0.5));
        }
    }
    GpaCoefficients {
        intercept1: 2.2,
        intercept0: 2.0,
        beta1,
        beta0,
    }
}

/// Grade-point-style outcomes on a 0-4 scale with tiered covariates.
/// Covariate columns alternate Bernoulli(1/2) (even positions) and standard
/// normal (odd positions). Outcomes are linear with per-arm coefficients
/// plus Gaussian residuals of the given standard deviation, then truncated
/// to [0, 4]; truncation happens after the residuals so the realized
/// squared correlation must be measured, not assumed. With `additive` the
/// two arms share one residual draw, making the unit-level effect constant
/// whenever truncation does not bind.
pub fn dgp_gpa_tiers(
    n: usize,
    tier_sizes: &[usize],
    coef: &GpaCoefficients,
    residual_sd: f64,
    additive: bool,
    g: &mut SeededGenerator,
) -> Result<(DesignMatrix, Vec<f64>, Vec<f64>)> {
    let k: usize = tier_sizes.iter().sum();
    if coef.beta1.len() != k || coef.beta0.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "coefficient lengths {} / {} vs K = {k}",
            coef.beta1.len(),
            coef.beta0.len()
        )));
    }
    if !(residual_sd >= 0.0) {
        return Err(Error::Domain(format!("residual_sd must be >= 0, got {residual_sd}")));
    }
    let mut x = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            x[(i, j)] = if j % 2 == 0 {
                if g.uniform() < 0.5 { 1.0 } else { 0.0 }
            } else {
                g.standard_normal()
            };
        }
    }
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for i in 0..n {
        let mut lin1 = coef.intercept1;
        let mut lin0 = coef.intercept0;
        for j in 0..k {
            lin1 += coef.beta1[j] * x[(i, j)];
            lin0 += coef.beta0[j] * x[(i, j)];
        }
        let d1 = g.standard_normal();
        let d0 = if additive { d1 } else { g.standard_normal() };
        y1.push((lin1 + residual_sd * d1).clamp(0.0, 4.0));
        y0.push((lin0 + residual_sd * d0).clamp(0.0, 4.0));
    }
    let names = (1..=k).map(|j| format!("x{j}")).collect();
    let design = DesignMatrix::with_tiers(x, names, tier_sizes.to_vec())?;
    Ok((design, y1, y0))
}

/// Oracle squared multiple correlation of the drawn population at treated
/// fraction n1/n.
pub fn realized_r2(
    design: &DesignMatrix,
    y1: &[f64],
    y0: &[f64],
    n1: usize,
) -> Result<f64> {
    let n = design.n() as f64;
    let r1 = n1 as f64 / n;
    let (_, v) = finite_moments(design, y1, y0, r1, 1.0 - r1)?;
    Ok(v.r2)
}

/// Finds the residual standard deviation at which the realized squared
/// correlation hits `target_r2`, by bisection with common random numbers
/// (the same seed regenerates the same covariates and shocks at every
/// candidate, so realized R^2 is monotone in the candidate).
pub fn calibrate_residual_sd(
    n: usize,
    tier_sizes: &[usize],
    coef: &GpaCoefficients,
    additive: bool,
    n1: usize,
    target_r2: f64,
    seed: u64,
) -> Result<f64> {
    if !(0.0 < target_r2 && target_r2 < 1.0) {
        return Err(Error::Domain(format!(
            "target R^2 must be in (0,1), got {target_r2}"
        )));
    }
    let eval = |sd: f64| -> Result<f64> {
        // Same stream run_study uses for its population, so the study the
        // caller runs with this sd sees exactly the calibrated R^2.
        let mut g = SeededGenerator::new(seed, 0).substream(0);
        let (d, y1, y0) = dgp_gpa_tiers(n, tier_sizes, coef, sd, additive, &mut g)?;
        realized_r2(&d, &y1, &y0, n1)
    };
    let (mut lo, mut hi) = (1e-3, 50.0);
    if eval(lo)? < target_r2 {
        return Err(Error::Domain(format!(
            "target R^2 = {target_r2} unreachable: max realized is {}",
            eval(lo)?
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? >= target_r2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Which process generates the potential outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpSpec {
    Binary {
        k: usize,
        beta1: Vec<f64>,
        beta0: Vec<f64>,
    },
    GpaTiers {
        tier_sizes: Vec<usize>,
        coefficients: GpaCoefficients,
        residual_sd: f64,
        #[serde(default)]
        additive: bool,
    },
}

impl DgpSpec {
    /// Binary process with the default coefficients.
    pub fn binary_default() -> Self {
        let (beta1, beta0) = default_binary_coefficients();
        Self::Binary { k: 3, beta1, beta0 }
    }

    fn draw(&self, n: usize, g: &mut SeededGenerator) -> Result<(DesignMatrix, Vec<f64>, Vec<f64>)> {
        match self {
            Self::Binary { k, beta1, beta0 } => dgp_binary(n, *k, beta1, beta0, g),
            Self::GpaTiers {
                tier_sizes,
                coefficients,
                residual_sd,
                additive,
            } => dgp_gpa_tiers(n, tier_sizes, coefficients, *residual_sd, *additive, g),
        }
    }
}

/// Which design-time criterion the study arm uses; the paired arm is
/// always complete randomization with shared seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriterionSpec {
    Cre,
    Rem { p_a: f64 },
    Remt { p_a: f64 },
}

impl CriterionSpec {
    fn acceptance_probability(&self) -> f64 {
        match self {
            Self::Cre => 1.0,
            Self::Rem { p_a } | Self::Remt { p_a } => *p_a,
        }
    }

    fn build(&self, design: &DesignMatrix) -> Result<(BalanceCriterion, Option<TierBasis>)> {
        match self {
            Self::Cre => Ok((BalanceCriterion::cre(), None)),
            Self::Rem { p_a } => Ok((
                BalanceCriterion::rem_from_probability(*p_a, design.k())?,
                None,
            )),
            Self::Remt { p_a } => {
                let basis = tier_orthogonalize(design)?;
                Ok((
                    BalanceCriterion::remt_from_probability(basis.clone(), *p_a)?,
                    Some(basis),
                ))
            }
        }
    }
}

/// Full description of one simulation study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub dgp: DgpSpec,
    pub n: usize,
    pub n1: usize,
    pub criterion: CriterionSpec,
    pub replications: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Redraw the population each replication instead of holding it fixed.
    /// Fixed is the default: inference here is randomization-based, with
    /// potential outcomes and covariates treated as constants.
    #[serde(default)]
    pub redraw_population: bool,
    /// Monte Carlo pool size for the per-replication interval quantiles.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Rejection-sampling budget per replication; derived from the
    /// acceptance probability when absent.
    #[serde(default)]
    pub max_draws: Option<u64>,
    /// Keep the per-replication rows in the report (tidy CSV output).
    #[serde(default = "default_true")]
    pub keep_rows: bool,
}

fn default_n_mc() -> usize {
    200_000
}

fn default_true() -> bool {
    true
}

/// One replication of the study.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicationRow {
    pub rep: usize,
    pub tau_hat: f64,
    pub tau_hat_cre: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub neyman_lower: f64,
    pub neyman_upper: f64,
    pub covered: bool,
    pub covered_neyman: bool,
    pub r2_hat: f64,
    pub draws_used: u64,
}

/// Aggregates over all completed replications.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub replications_requested: usize,
    pub replications_completed: usize,
    pub budget_failures: usize,
    /// True when any replication exhausted its rejection budget; the
    /// aggregates then cover only the completed replications and should
    /// not be trusted as acceptance-conditional estimates.
    pub aborted: bool,
    pub tau_true: f64,
    pub r2_oracle: f64,
    pub coverage: f64,
    pub coverage_neyman: f64,
    pub mean_ci_length: f64,
    pub mean_neyman_length: f64,
    /// Empirical central (1 - alpha) quantile range of tau_hat in each arm.
    pub qr_rerand: f64,
    pub qr_cre: f64,
    pub qr_reduction_pct: f64,
    pub var_tau_rerand: f64,
    pub var_tau_cre: f64,
    /// Paired empirical percentage reduction in sampling variance vs the
    /// complete-randomization arm.
    pub priasv_empirical: f64,
    pub effective_sample_size_pct: f64,
    pub rows: Vec<ReplicationRow>,
}

/// Percentage increase in the complete-randomization sample size needed to
/// match the rerandomized design's quantile range, using the 1/sqrt(n)
/// scaling of the quantile range in n: 100 ((qr_cre / qr_rerand)^2 - 1).
pub fn effective_sample_size(qr_rerand: f64, qr_cre: f64) -> Result<f64> {
    if !(qr_rerand > 0.0 && qr_cre > 0.0) {
        return Err(Error::Domain(format!(
            "quantile ranges must be positive, got {qr_rerand} and {qr_cre}"
        )));
    }
    Ok(100.0 * ((qr_cre / qr_rerand).powi(2) - 1.0))
}

// Kahan-compensated mean; replication aggregation must not depend on the
// (parallel, but collected-in-order) summation order or on magnitude.
fn compensated_mean(vals: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    let mut count = 0usize;
    for v in vals {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn central_quantile_range(vals: &[f64], alpha: f64) -> f64 {
    let mut sorted = vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let at = |xi: f64| sorted[((xi * (m - 1) as f64).round() as usize).min(m - 1)];
    at(1.0 - alpha / 2.0) - at(alpha / 2.0)
}

fn sample_variance(vals: &[f64]) -> f64 {
    let mean = compensated_mean(vals.iter().copied());
    compensated_mean(vals.iter().map(|v| (v - mean) * (v - mean)))
        * vals.len() as f64
        / (vals.len() as f64 - 1.0)
}

// Shared standardized Monte Carlo pools for the per-replication interval
// quantile: one standard-normal pool plus one constrained-coordinate pool
// per tier. Reusing the pools across replications keeps the per-replication
// cost linear while leaving the quantile estimate unbiased.
struct QuantilePools {
    eps: Vec<f64>,
    tiers: Vec<Vec<f64>>,
}

fn sample_l_pool(k: u32, a: f64, n_mc: usize, g: &mut SeededGenerator) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        if !a.is_finite() {
            out.push(g.standard_normal());
        } else {
            out.push(crate::asymptotics::sample_l(k, a, g)?);
        }
    }
    Ok(out)
}

fn build_pools(
    criterion: &BalanceCriterion,
    k_total: usize,
    n_mc: usize,
    g: &mut SeededGenerator,
) -> Result<QuantilePools> {
    let eps = (0..n_mc).map(|_| g.standard_normal()).collect();
    let tiers = match criterion {
        BalanceCriterion::Mahalanobis { a } => {
            vec![sample_l_pool(k_total as u32, *a, n_mc, g)?]
        }
        BalanceCriterion::Tiered { thresholds, basis } => {
            let mut pools = Vec::with_capacity(basis.t());
            for (t, &a) in thresholds.iter().enumerate() {
                pools.push(sample_l_pool(basis.tier_sizes[t] as u32, a, n_mc, g)?);
            }
            pools
        }
        BalanceCriterion::General { .. } => {
            return Err(Error::Config(
                "general criteria are not supported by run_study".into(),
            ))
        }
    };
    Ok(QuantilePools { eps, tiers })
}

// Symmetrized upper quantile of sqrt(v)(sqrt(rho_resid) eps + sum_t
// sqrt(rho_t) l_t) over the shared pools.
fn pooled_quantile(
    pools: &QuantilePools,
    v_tt_hat: f64,
    rho: &[f64],
    rho_resid: f64,
    alpha: f64,
) -> f64 {
    let m = pools.eps.len();
    let sv = v_tt_hat.sqrt();
    let sr: Vec<f64> = rho.iter().map(|r| r.max(0.0).sqrt()).collect();
    let se = rho_resid.max(0.0).sqrt();
    let mut vals: Vec<f64> = (0..m)
        .map(|i| {
            let mut s = se * pools.eps[i];
            for (t, pool) in pools.tiers.iter().enumerate() {
                s += sr[t] * pool[i];
            }
            sv * s
        })
        .collect();
    let hi_idx = (((1.0 - alpha / 2.0) * (m - 1) as f64).round() as usize).min(m - 1);
    let lo_idx = ((alpha / 2.0 * (m - 1) as f64).round() as usize).min(m - 1);
    let hi = *vals.select_nth_unstable_by(hi_idx, f64::total_cmp).1;
    let lo = *vals.select_nth_unstable_by(lo_idx, f64::total_cmp).1;
    (hi - lo) / 2.0
}

struct RepOutcome {
    row: ReplicationRow,
    tau_true_rep: f64,
    budget_exhausted: bool,
}

/// Runs the full paired study: per replication, draw (or reuse) the
/// population, rerandomize, reveal outcomes, analyze with both intervals,
/// and record the paired complete-randomization estimate from the same
/// seed. Budget exhaustion in any replication marks the report aborted
/// rather than silently skipping that replication, since skipping would
/// bias the acceptance-conditional aggregates.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.replications < 1 {
        return Err(Error::Config("need at least one replication".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0,1), got {}", cfg.alpha)));
    }
    let base = SeededGenerator::new(cfg.seed, 0);
    let p_a = cfg.criterion.acceptance_probability();
    let budget = cfg.max_draws.unwrap_or_else(|| default_budget(p_a));

    // Fixed-population branch draws once up front; the redraw branch
    // rebuilds everything per replication from that replication's stream.
    let fixed = if cfg.redraw_population {
        None
    } else {
        let mut g = base.substream(0);
        let (design, y1, y0) = cfg.dgp.draw(cfg.n, &mut g)?;
        let (criterion, basis) = cfg.criterion.build(&design)?;
        let r1 = cfg.n1 as f64 / cfg.n as f64;
        let (pop, v) = finite_moments(&design, &y1, &y0, r1, 1.0 - r1)?;
        Some((design, y1, y0, criterion, basis, pop.tau_y, v.r2))
    };

    let pools = {
        let mut g = base.substream(u64::MAX - 3);
        match &fixed {
            Some((design, _, _, criterion, _, _, _)) => {
                build_pools(criterion, design.k(), cfg.n_mc, &mut g)?
            }
            None => {
                // Criterion shape (tier sizes, thresholds) is fixed even
                // when the population is redrawn, so one pool set serves
                // every replication.
                let mut pg = base.substream(0).substream(0);
                let (design, _, _) = cfg.dgp.draw(cfg.n, &mut pg)?;
                let (criterion, _) = cfg.criterion.build(&design)?;
                build_pools(&criterion, design.k(), cfg.n_mc, &mut g)?
            }
        }
    };

    let run_one = |rep: usize| -> Result<RepOutcome> {
        let rep_g = base.substream(1 + rep as u64);
        let owned;
        let (design, y1, y0, criterion, basis, tau_true, _r2): (
            &DesignMatrix,
            &[f64],
            &[f64],
            &BalanceCriterion,
            &Option<TierBasis>,
            f64,
            f64,
        ) = match &fixed {
            Some((d, y1, y0, c, b, tau, r2)) => (d, y1, y0, c, b, *tau, *r2),
            None => {
                let mut g = rep_g.substream(0);
                let (d, y1v, y0v) = cfg.dgp.draw(cfg.n, &mut g)?;
                let (c, b) = cfg.criterion.build(&d)?;
                let r1 = cfg.n1 as f64 / cfg.n as f64;
                let (pop, v) = finite_moments(&d, &y1v, &y0v, r1, 1.0 - r1)?;
                owned = (d, y1v, y0v, c, b, pop.tau_y, v.r2);
                (
                    &owned.0, &owned.1, &owned.2, &owned.3, &owned.4, owned.5, owned.6,
                )
            }
        };

        // The paired arm: the first proposal of the rerandomization stream
        // is exactly the complete-randomization draw for this replication.
        let mut cre_g = rep_g.substream(1);
        let z_cre = draw_cre(cfg.n, cfg.n1, &mut cre_g)?;
        let mut rr_g = rep_g.substream(1);
        let outcome = match rerandomize(criterion, design, cfg.n1, &mut rr_g, budget) {
            Ok(o) => o,
            Err(Error::BudgetExhausted { .. }) => {
                return Ok(RepOutcome {
                    row: ReplicationRow {
                        rep,
                        tau_hat: f64::NAN,
                        tau_hat_cre: f64::NAN,
                        ci_lower: f64::NAN,
                        ci_upper: f64::NAN,
                        neyman_lower: f64::NAN,
                        neyman_upper: f64::NAN,
                        covered: false,
                        covered_neyman: false,
                        r2_hat: f64::NAN,
                        draws_used: budget,
                    },
                    tau_true_rep: tau_true,
                    budget_exhausted: true,
                });
            }
            Err(e) => return Err(e),
        };
        let z = &outcome.assignment;

        let reveal = |assignment: &Assignment| -> Vec<f64> {
            (0..cfg.n)
                .map(|i| if assignment.is_treated(i) { y1[i] } else { y0[i] })
                .collect()
        };
        let y_obs = reveal(z);
        let y_obs_cre = reveal(&z_cre);

        let tau_hat = crate::inference::difference_in_means(&y_obs, z)?;
        let tau_hat_cre = crate::inference::difference_in_means(&y_obs_cre, &z_cre)?;
        let (v_hat, r2_hat, _) = estimate_vtt_r2(&y_obs, z, design)?;
        let (rho, rho_resid) = match (criterion, basis) {
            (BalanceCriterion::Tiered { .. }, Some(b)) => {
                let r = estimate_rho_t(&y_obs, z, design, b)?;
                let resid = *r.last().unwrap();
                (r[..r.len() - 1].to_vec(), resid)
            }
            _ => (vec![r2_hat], 1.0 - r2_hat),
        };
        let q = pooled_quantile(&pools, v_hat, &rho, rho_resid, cfg.alpha);
        let half = q / (cfg.n as f64).sqrt();
        let (ci_lower, ci_upper) = (tau_hat - half, tau_hat + half);
        let ((neyman_lower, neyman_upper), _) = neyman_baseline(&y_obs, z, cfg.alpha)?;

        Ok(RepOutcome {
            row: ReplicationRow {
                rep,
                tau_hat,
                tau_hat_cre,
                ci_lower,
                ci_upper,
                neyman_lower,
                neyman_upper,
                covered: ci_lower <= tau_true && tau_true <= ci_upper,
                covered_neyman: neyman_lower <= tau_true && tau_true <= neyman_upper,
                r2_hat,
                draws_used: outcome.draws_used,
            },
            tau_true_rep: tau_true,
            budget_exhausted: false,
        })
    };

    let results: Vec<Result<RepOutcome>> =
        (0..cfg.replications).into_par_iter().map(run_one).collect();

    let mut rows = Vec::with_capacity(cfg.replications);
    let mut tau_truths = Vec::new();
    let mut budget_failures = 0usize;
    for r in results {
        let o = r?;
        if o.budget_exhausted {
            budget_failures += 1;
        } else {
            tau_truths.push(o.tau_true_rep);
            rows.push(o.row);
        }
    }
    if rows.is_empty() {
        return Err(Error::BudgetExhausted {
            draws: budget,
            observed_acceptance: 0.0,
        });
    }

    let completed = rows.len();
    let taus: Vec<f64> = rows.iter().map(|r| r.tau_hat).collect();
    let taus_cre: Vec<f64> = rows.iter().map(|r| r.tau_hat_cre).collect();
    let coverage = rows.iter().filter(|r| r.covered).count() as f64 / completed as f64;
    let coverage_neyman =
        rows.iter().filter(|r| r.covered_neyman).count() as f64 / completed as f64;
    let mean_ci_length = compensated_mean(rows.iter().map(|r| r.ci_upper - r.ci_lower));
    let mean_neyman_length =
        compensated_mean(rows.iter().map(|r| r.neyman_upper - r.neyman_lower));
    let qr_rerand = central_quantile_range(&taus, cfg.alpha);
    let qr_cre = central_quantile_range(&taus_cre, cfg.alpha);
    let var_tau_rerand = sample_variance(&taus);
    let var_tau_cre = sample_variance(&taus_cre);
    let report = StudyReport {
        replications_requested: cfg.replications,
        replications_completed: completed,
        budget_failures,
        aborted: budget_failures > 0,
        tau_true: compensated_mean(tau_truths.iter().copied()),
        r2_oracle: match &fixed {
            Some((.., r2)) => *r2,
            None => f64::NAN,
        },
        coverage,
        coverage_neyman,
        mean_ci_length,
        mean_neyman_length,
        qr_rerand,
        qr_cre,
        // The ratio summaries are meaningless until both empirical ranges
        // are positive (more than a handful of replications).
        qr_reduction_pct: 100.0 * (1.0 - qr_rerand / qr_cre),
        var_tau_rerand,
        var_tau_cre,
        priasv_empirical: 100.0 * (1.0 - var_tau_rerand / var_tau_cre),
        effective_sample_size_pct: effective_sample_size(qr_rerand, qr_cre)
            .unwrap_or(f64::NAN),
        rows: if cfg.keep_rows { rows } else { Vec::new() },
    };
    Ok(report)
}
