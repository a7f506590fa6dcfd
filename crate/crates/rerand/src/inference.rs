//! Post-experiment estimation: difference-in-means, the conservative
//! variance estimator and estimated squared correlations, and confidence
//! intervals that account for the rerandomization actually used, alongside
//! the classical complete-randomization baseline.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::asymptotics::{
    build_distribution, v_coeff, AsymptoticModel, TierParam,
};
use crate::criteria::BalanceCriterion;
use crate::error::{Error, Result};
use crate::population::{Assignment, DesignMatrix, TierBasis};
use crate::specialfn::{gaussian_quantile, SeededGenerator};

/// Per-arm summary statistics and the pooled estimators derived from them.
///
/// The pooled variance estimator converges to
/// V_tt + S^2_tau - S^2_{tau|X} rather than V_tt itself (the treatment
/// effect variation around its projection is not identifiable from one
/// realized experiment), which is the source of the intervals' asymptotic
/// conservativeness.
#[derive(Debug, Clone, Serialize)]
pub struct ArmEstimates {
    pub ybar1: f64,
    pub ybar0: f64,
    pub s2_y1: f64,
    pub s2_y0: f64,
    pub s_y1_x: Vec<f64>,
    pub s_y0_x: Vec<f64>,
    pub s2_y1_proj: f64,
    pub s2_y0_proj: f64,
    pub v_tt_hat: f64,
    pub r2_hat: f64,
}

/// Everything the analysis produces for one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub method: String,
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
    pub k: usize,
    pub alpha: f64,
    pub tau_hat: f64,
    pub v_tt_hat: f64,
    pub r2_hat: f64,
    /// Per-tier estimated squared correlations followed by the residual
    /// share 1 - R^2; empty for non-tiered methods.
    pub rho2_hat: Vec<f64>,
    /// Estimated variance of tau_hat itself (already divided by n).
    pub variance_estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// The (1 - alpha/2) quantile of the estimated asymptotic law used for
    /// the interval, with its Monte Carlo standard error.
    pub quantile: f64,
    pub quantile_se: f64,
    pub neyman_variance: f64,
    pub neyman_ci_lower: f64,
    pub neyman_ci_upper: f64,
    pub arms: ArmEstimates,
}

/// tau_hat: mean treated outcome minus mean control outcome.
pub fn difference_in_means(y: &[f64], z: &Assignment) -> Result<f64> {
    if y.len() != z.n() {
        return Err(Error::DimensionMismatch(format!(
            "outcome length {} vs assignment length {}",
            y.len(),
            z.n()
        )));
    }
    let mut sum1 = 0.0;
    let mut sum0 = 0.0;
    for (i, &v) in y.iter().enumerate() {
        if z.is_treated(i) {
            sum1 += v;
        } else {
            sum0 += v;
        }
    }
    Ok(sum1 / z.n1() as f64 - sum0 / z.n0() as f64)
}

// Per-arm mean, sample variance (divisor n_z - 1), and sample covariance
// with each covariate column.
fn arm_stats(
    y: &[f64],
    z: &Assignment,
    design: &DesignMatrix,
    arm: u8,
) -> (f64, f64, DVector<f64>) {
    let idx: Vec<usize> = (0..z.n()).filter(|&i| z.z()[i] == arm).collect();
    let m = idx.len() as f64;
    let ybar = idx.iter().map(|&i| y[i]).sum::<f64>() / m;
    let s2 = idx.iter().map(|&i| (y[i] - ybar) * (y[i] - ybar)).sum::<f64>() / (m - 1.0);
    let k = design.k();
    let mut cov = DVector::zeros(k);
    for j in 0..k {
        let xbar = idx.iter().map(|&i| design.x()[(i, j)]).sum::<f64>() / m;
        cov[j] = idx
            .iter()
            .map(|&i| (y[i] - ybar) * (design.x()[(i, j)] - xbar))
            .sum::<f64>()
            / (m - 1.0);
    }
    (ybar, s2, cov)
}

/// The variance estimator V_tt_hat and squared-correlation estimator
/// R2_hat. Projections use the full-population covariate covariance S^2_X
/// (the covariates are fixed and known), with per-arm outcome covariances.
/// R2_hat is floored at 0 and capped at 1.
pub fn estimate_vtt_r2(
    y: &[f64],
    z: &Assignment,
    design: &DesignMatrix,
) -> Result<(f64, f64, ArmEstimates)> {
    if y.len() != z.n() || z.n() != design.n() {
        return Err(Error::DimensionMismatch(format!(
            "lengths: outcomes {}, assignment {}, design {}",
            y.len(),
            z.n(),
            design.n()
        )));
    }
    let (r1, r0) = (z.r1(), z.r0());
    let (ybar1, s2_y1, s_y1_x) = arm_stats(y, z, design, 1);
    let (ybar0, s2_y0, s_y0_x) = arm_stats(y, z, design, 0);
    let diff = &s_y1_x - &s_y0_x;
    let quad = |v: &DVector<f64>| v.dot(&design.s2x_solve(v));
    let v_tt_hat = s2_y1 / r1 + s2_y0 / r0 - quad(&diff);
    if !(v_tt_hat > 0.0) {
        return Err(Error::DegeneratePopulation);
    }
    let raw_r2 = (quad(&s_y1_x) / r1 + quad(&s_y0_x) / r0 - quad(&diff)) / v_tt_hat;
    let r2_hat = raw_r2.clamp(0.0, 1.0);
    let arms = ArmEstimates {
        ybar1,
        ybar0,
        s2_y1,
        s2_y0,
        s_y1_x: s_y1_x.as_slice().to_vec(),
        s_y0_x: s_y0_x.as_slice().to_vec(),
        s2_y1_proj: quad(&s_y1_x),
        s2_y0_proj: quad(&s_y0_x),
        v_tt_hat,
        r2_hat,
    };
    Ok((v_tt_hat, r2_hat, arms))
}

// Clips negative per-tier estimates to zero and rescales the positive ones
// so their sum equals r2_hat.
pub(crate) fn clip_and_rescale(raw: &[f64], r2_hat: f64) -> Vec<f64> {
    let pos: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let pos_sum: f64 = pos.iter().sum();
    if pos_sum <= 0.0 || r2_hat <= 0.0 {
        return vec![0.0; raw.len()];
    }
    pos.iter().map(|&v| v * r2_hat / pos_sum).collect()
}

/// Per-tier estimated squared correlations (rho2_1, ..., rho2_T, 1 - R2).
/// Negative raw estimates are clipped to zero and the rest rescaled so the
/// tier values sum exactly to R2_hat.
pub fn estimate_rho_t(
    y: &[f64],
    z: &Assignment,
    design: &DesignMatrix,
    basis: &TierBasis,
) -> Result<Vec<f64>> {
    let (v_tt_hat, r2_hat, _) = estimate_vtt_r2(y, z, design)?;
    let (r1, r0) = (z.r1(), z.r0());
    let mut raw = Vec::with_capacity(basis.t());
    for t in 0..basis.t() {
        let range = basis.tier_range(t);
        let cols = basis.e.columns(range.start, range.len()).into_owned();
        let s1 = arm_cov_with(&cols, y, z, 1);
        let s0 = arm_cov_with(&cols, y, z, 0);
        let diff = &s1 - &s0;
        let chol = Cholesky::new(basis.s2_e_blocks[t].clone())
            .ok_or(Error::SingularTier { tier: t + 1 })?;
        let quad = |v: &DVector<f64>| v.dot(&chol.solve(v));
        raw.push((quad(&s1) / r1 + quad(&s0) / r0 - quad(&diff)) / v_tt_hat);
    }
    let mut rho = clip_and_rescale(&raw, r2_hat);
    rho.push(1.0 - r2_hat);
    Ok(rho)
}

fn arm_cov_with(cols: &DMatrix<f64>, y: &[f64], z: &Assignment, arm: u8) -> DVector<f64> {
    let idx: Vec<usize> = (0..z.n()).filter(|&i| z.z()[i] == arm).collect();
    let m = idx.len() as f64;
    let ybar = idx.iter().map(|&i| y[i]).sum::<f64>() / m;
    let mut out = DVector::zeros(cols.ncols());
    for j in 0..cols.ncols() {
        let xbar = idx.iter().map(|&i| cols[(i, j)]).sum::<f64>() / m;
        out[j] = idx
            .iter()
            .map(|&i| (y[i] - ybar) * (cols[(i, j)] - xbar))
            .sum::<f64>()
            / (m - 1.0);
    }
    out
}

/// Classical complete-randomization interval: variance estimate
/// s^2_1/n1 + s^2_0/n0 with a Gaussian quantile. Returns
/// ((lower, upper), variance).
pub fn neyman_baseline(y: &[f64], z: &Assignment, alpha: f64) -> Result<((f64, f64), f64)> {
    let tau = difference_in_means(y, z)?;
    let dummy = DesignMatrix::new(
        DMatrix::from_fn(z.n(), 1, |i, _| i as f64),
        vec!["_index".into()],
    )?;
    let (_, s2_y1, _) = arm_stats(y, z, &dummy, 1);
    let (_, s2_y0, _) = arm_stats(y, z, &dummy, 0);
    let var = s2_y1 / z.n1() as f64 + s2_y0 / z.n0() as f64;
    let zq = gaussian_quantile(1.0 - alpha / 2.0)?;
    let half = zq * var.sqrt();
    Ok(((tau - half, tau + half), var))
}

/// Confidence interval accounting for the rerandomization criterion used at
/// design time: tau_hat minus the alpha quantile range of the estimated
/// asymptotic law, scaled by 1/sqrt(n). Supports the Mahalanobis and tiered
/// criteria; use `confidence_interval_reg` for general predicates.
pub fn confidence_interval(
    criterion: &BalanceCriterion,
    y: &[f64],
    z: &Assignment,
    design: &DesignMatrix,
    alpha: f64,
    n_mc: usize,
    g: &SeededGenerator,
) -> Result<AnalysisReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0,1), got {alpha}")));
    }
    let tau_hat = difference_in_means(y, z)?;
    let (v_tt_hat, r2_hat, arms) = estimate_vtt_r2(y, z, design)?;
    let n = z.n() as f64;

    let (model, method, rho2_hat, variance_estimate) = match criterion {
        BalanceCriterion::Mahalanobis { a } => {
            let model = AsymptoticModel::rem(v_tt_hat, r2_hat, design.k() as u32, *a)?;
            let var = v_tt_hat * (1.0 - (1.0 - v_coeff(design.k() as u32, *a)?) * r2_hat) / n;
            (model, "rem".to_string(), Vec::new(), var)
        }
        BalanceCriterion::Tiered { thresholds, basis } => {
            let rho = estimate_rho_t(y, z, design, basis)?;
            let tiers: Vec<TierParam> = (0..basis.t())
                .map(|t| TierParam {
                    rho2: rho[t],
                    k: basis.tier_sizes[t] as u32,
                    a: thresholds[t],
                })
                .collect();
            let mut var = v_tt_hat;
            for tp in &tiers {
                var -= v_tt_hat * (1.0 - v_coeff(tp.k, tp.a)?) * tp.rho2;
            }
            let model = AsymptoticModel::remt(v_tt_hat, tiers, 1.0 - r2_hat)?;
            (model, "remt".to_string(), rho, var / n)
        }
        BalanceCriterion::General { .. } => {
            return Err(Error::Config(
                "general criteria require confidence_interval_reg".into(),
            ))
        }
    };

    let dist = build_distribution(&model, n_mc, g)?;
    let hi = dist.quantile(1.0 - alpha / 2.0)?;
    let lo = dist.quantile(alpha / 2.0)?;
    let quantile_se = dist.quantile_se(1.0 - alpha / 2.0);
    let (neyman_ci, neyman_variance) = neyman_baseline(y, z, alpha)?;

    Ok(AnalysisReport {
        method,
        n: z.n(),
        n1: z.n1(),
        n0: z.n0(),
        k: design.k(),
        alpha,
        tau_hat,
        v_tt_hat,
        r2_hat,
        rho2_hat,
        variance_estimate,
        ci_lower: tau_hat - hi / n.sqrt(),
        ci_upper: tau_hat - lo / n.sqrt(),
        quantile: hi,
        quantile_se,
        neyman_variance,
        neyman_ci_lower: neyman_ci.0,
        neyman_ci_upper: neyman_ci.1,
        arms,
    })
}

/// Conservative interval for a general registered predicate. The residual
/// variance is unknown up to V_eps_hat = V_tt_hat (1 - R2_hat), so the
/// quantile is maximized over a lambda grid on [0, V_eps_hat], sharing one
/// projection sample across the grid. When the caller asserts the
/// projection term is unimodal (Mahalanobis-ball-shaped predicates), the
/// maximum is attained at lambda = V_eps_hat and only that endpoint is
/// evaluated.
#[allow(clippy::too_many_arguments)]
pub fn confidence_interval_reg(
    criterion: &BalanceCriterion,
    y: &[f64],
    z: &Assignment,
    design: &DesignMatrix,
    alpha: f64,
    n_mc: usize,
    lambda_grid_size: usize,
    projection_unimodal: bool,
    g: &SeededGenerator,
) -> Result<AnalysisReport> {
    let (label, predicate, vxx) = match criterion {
        BalanceCriterion::General {
            label,
            predicate,
            vxx,
        } => (label.clone(), predicate.clone(), vxx.clone()),
        _ => {
            return Err(Error::Config(
                "confidence_interval_reg requires a general criterion".into(),
            ))
        }
    };
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0,1), got {alpha}")));
    }
    if lambda_grid_size < 2 {
        return Err(Error::Domain("lambda grid needs at least 2 points".into()));
    }
    let tau_hat = difference_in_means(y, z)?;
    let (v_tt_hat, r2_hat, arms) = estimate_vtt_r2(y, z, design)?;
    let n = z.n() as f64;
    let v_eps = v_tt_hat * (1.0 - r2_hat);
    // Plug-in estimate of V_tx: r1^-1 s_{Y(1),X} + r0^-1 s_{Y(0),X}.
    let s1 = DVector::from_column_slice(&arms.s_y1_x);
    let s0 = DVector::from_column_slice(&arms.s_y0_x);
    let v_tx_hat = &s1 / z.r1() + &s0 / z.r0();

    let grid: Vec<f64> = if projection_unimodal {
        vec![v_eps]
    } else {
        (0..lambda_grid_size)
            .map(|i| v_eps * i as f64 / (lambda_grid_size - 1) as f64)
            .collect()
    };
    // The law at residual variance lambda is sqrt(lambda) e0 + V_tx V_xx^-1
    // B | B in G; with r2 = 0 the builder draws the Gaussian part with
    // variance exactly lambda. Sharing the same base generator across the
    // grid keeps q(lambda) smooth in lambda.
    let mut q_max = f64::NEG_INFINITY;
    let mut q_se = 0.0;
    for &lambda in &grid {
        let m = AsymptoticModel::reg(
            lambda.max(1e-300),
            0.0,
            v_tx_hat.clone(),
            vxx.clone(),
            label.clone(),
            predicate.clone(),
        )?;
        let dist = build_distribution(&m, n_mc, g)?;
        let q = dist.quantile(1.0 - alpha / 2.0)?;
        if q > q_max {
            q_max = q;
            q_se = dist.quantile_se(1.0 - alpha / 2.0);
        }
    }

    let (neyman_ci, neyman_variance) = neyman_baseline(y, z, alpha)?;
    Ok(AnalysisReport {
        method: format!("reg:{label}"),
        n: z.n(),
        n1: z.n1(),
        n0: z.n0(),
        k: design.k(),
        alpha,
        tau_hat,
        v_tt_hat,
        r2_hat,
        rho2_hat: Vec::new(),
        // Conservative variance proxy from the maximized quantile.
        variance_estimate: (q_max / gaussian_quantile(1.0 - alpha / 2.0)?).powi(2) / n,
        ci_lower: tau_hat - q_max / n.sqrt(),
        ci_upper: tau_hat + q_max / n.sqrt(),
        quantile: q_max,
        quantile_se: q_se,
        neyman_variance,
        neyman_ci_lower: neyman_ci.0,
        neyman_ci_upper: neyman_ci.1,
        arms,
    })
}
