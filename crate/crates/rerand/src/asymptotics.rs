//! Asymptotic distribution theory for rerandomized designs: the truncated
//! linear projection term L_{K,a}, its variance coefficient v_{K,a}, the
//! non-Gaussian mixture law of the difference-in-means estimator, Monte
//! Carlo quantiles, variances, and variance-reduction percentages.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::RngCore;
use rayon::prelude::*;

use crate::criteria::RegPredicate;
use crate::error::{Error, Result};
use crate::population::TierBasis;
use crate::specialfn::{
    chi2_cdf, gaussian_pdf, sample_beta_half, sample_trunc_chi, SeededGenerator,
};

/// Parameters of one tier in the tiered model.
#[derive(Debug, Clone, Copy)]
pub struct TierParam {
    pub rho2: f64,
    pub k: u32,
    pub a: f64,
}

/// The parameters driving the asymptotic law of sqrt(n)(tau_Y_hat - tau_Y)
/// conditional on acceptance.
#[derive(Clone)]
pub enum AsymptoticModel {
    /// Mahalanobis criterion: sqrt(V_tt) { sqrt(1-R^2) e0 + sqrt(R^2) L_{K,a} }.
    Rem { v_tt: f64, r2: f64, k: u32, a: f64 },
    /// Tiered criterion: sqrt(V_tt) { rho_{T+1} e0 + sum_t rho_t L_{k_t,a_t} }.
    Remt {
        v_tt: f64,
        tiers: Vec<TierParam>,
        rho2_resid: f64,
    },
    /// General criterion: e + V_tx V_xx^-1 B conditional on B in G,
    /// with e ~ N(0, V_tt (1 - R^2)) and B ~ N(0, V_xx).
    Reg {
        v_tt: f64,
        r2: f64,
        v_tx: DVector<f64>,
        v_xx: DMatrix<f64>,
        label: String,
        predicate: RegPredicate,
    },
}

impl std::fmt::Debug for AsymptoticModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Rem { v_tt, r2, k, a } => {
                write!(f, "Rem {{ v_tt: {v_tt}, r2: {r2}, k: {k}, a: {a} }}")
            }
            Self::Remt {
                v_tt,
                tiers,
                rho2_resid,
            } => write!(
                f,
                "Remt {{ v_tt: {v_tt}, tiers: {tiers:?}, rho2_resid: {rho2_resid} }}"
            ),
            Self::Reg { v_tt, r2, label, .. } => {
                write!(f, "Reg {{ v_tt: {v_tt}, r2: {r2}, label: {label:?} }}")
            }
        }
    }
}

impl AsymptoticModel {
    pub fn rem(v_tt: f64, r2: f64, k: u32, a: f64) -> Result<Self> {
        if !(v_tt > 0.0) {
            return Err(Error::Domain(format!("V_tt must be positive, got {v_tt}")));
        }
        if !(0.0..=1.0).contains(&r2) {
            return Err(Error::Domain(format!("R^2 must be in [0,1], got {r2}")));
        }
        if k < 1 || !(a > 0.0) {
            return Err(Error::Domain(format!("need K >= 1 and a > 0, got K={k}, a={a}")));
        }
        Ok(Self::Rem { v_tt, r2, k, a })
    }

    pub fn remt(v_tt: f64, tiers: Vec<TierParam>, rho2_resid: f64) -> Result<Self> {
        if !(v_tt > 0.0) {
            return Err(Error::Domain(format!("V_tt must be positive, got {v_tt}")));
        }
        if tiers.is_empty() {
            return Err(Error::Domain("need at least one tier".into()));
        }
        let sum: f64 = tiers.iter().map(|t| t.rho2).sum::<f64>() + rho2_resid;
        if tiers.iter().any(|t| t.rho2 < 0.0 || t.k < 1 || !(t.a > 0.0)) || rho2_resid < 0.0 {
            return Err(Error::Domain(format!(
                "tier parameters invalid: {tiers:?}, rho2_resid = {rho2_resid}"
            )));
        }
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!(
                "squared correlations must sum to 1, got {sum}"
            )));
        }
        Ok(Self::Remt {
            v_tt,
            tiers,
            rho2_resid,
        })
    }

    pub fn reg(
        v_tt: f64,
        r2: f64,
        v_tx: DVector<f64>,
        v_xx: DMatrix<f64>,
        label: impl Into<String>,
        predicate: RegPredicate,
    ) -> Result<Self> {
        if !(v_tt > 0.0) {
            return Err(Error::Domain(format!("V_tt must be positive, got {v_tt}")));
        }
        if !(0.0..=1.0).contains(&r2) {
            return Err(Error::Domain(format!("R^2 must be in [0,1], got {r2}")));
        }
        if v_tx.len() != v_xx.nrows() || !v_xx.is_square() {
            return Err(Error::DimensionMismatch(
                "V_tx / V_xx dimensions inconsistent".into(),
            ));
        }
        Ok(Self::Reg {
            v_tt,
            r2,
            v_tx,
            v_xx,
            label: label.into(),
            predicate,
        })
    }

    pub fn v_tt(&self) -> f64 {
        match self {
            Self::Rem { v_tt, .. } | Self::Remt { v_tt, .. } | Self::Reg { v_tt, .. } => *v_tt,
        }
    }

    /// Asymptotic acceptance probability, where it has a closed form
    /// (None for general predicates; estimate it by Monte Carlo instead).
    pub fn acceptance_probability(&self) -> Option<f64> {
        match self {
            Self::Rem { k, a, .. } => chi2_cdf(*a, *k).ok(),
            Self::Remt { tiers, .. } => tiers
                .iter()
                .map(|t| chi2_cdf(t.a, t.k))
                .try_fold(1.0, |acc, p| p.map(|p| acc * p))
                .ok(),
            Self::Reg { .. } => None,
        }
    }
}

/// v_{K,a} = P(chi^2_{K+2} <= a) / P(chi^2_K <= a), the variance of L_{K,a}.
/// Strictly below 1 for finite thresholds; exactly 1 at the +infinity
/// sentinel.
pub fn v_coeff(k: u32, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!("threshold must be positive, got {a}")));
    }
    if a.is_infinite() {
        return Ok(1.0);
    }
    Ok(chi2_cdf(a, k + 2)? / chi2_cdf(a, k)?)
}

/// One draw of L_{K,a}: truncated chi times a random sign times the square
/// root of a Beta(1/2,(K-1)/2) draw. Support is [-sqrt(a), sqrt(a)].
pub fn sample_l(k: u32, a: f64, g: &mut SeededGenerator) -> Result<f64> {
    let chi = sample_trunc_chi(k, a, g)?;
    let s = g.sign();
    let beta = sample_beta_half(k, g)?;
    Ok(chi * s * beta.sqrt())
}

/// Density of L_{K,a}: phi(l) P(chi^2_{K-1} <= a - l^2) / P(chi^2_K <= a)
/// inside |l| < sqrt(a), zero outside. For K = 1 the chi^2_0 factor is the
/// indicator of a - l^2 >= 0. Symmetric and unimodal around 0.
pub fn density_l(l: f64, k: u32, a: f64) -> f64 {
    debug_assert!(a > 0.0 && k >= 1);
    if a.is_infinite() {
        return gaussian_pdf(l);
    }
    let rem = a - l * l;
    if rem < 0.0 {
        return 0.0;
    }
    let tail = if k == 1 {
        1.0
    } else {
        chi2_cdf(rem, k - 1).unwrap_or(0.0)
    };
    gaussian_pdf(l) * tail / chi2_cdf(a, k).unwrap_or(1.0)
}

/// A Monte Carlo realization of the asymptotic law: a sorted cached sample
/// of sqrt(V_tt) Q with order-statistic quantile access.
#[derive(Debug, Clone)]
pub struct MixtureDistribution {
    samples: Vec<f64>,
    symmetric: bool,
}

impl MixtureDistribution {
    fn from_samples(mut samples: Vec<f64>, symmetric: bool) -> Self {
        samples.sort_by(f64::total_cmp);
        Self { samples, symmetric }
    }

    pub fn n_mc(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    // Raw type-7 empirical quantile on the sorted cache.
    fn raw_quantile(&self, xi: f64) -> f64 {
        let n = self.samples.len();
        let h = xi * (n - 1) as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let w = h - lo as f64;
        self.samples[lo] * (1.0 - w) + self.samples[hi] * w
    }

    /// The xi-th quantile nu_xi. Symmetric variants use the symmetrized
    /// estimator (q_xi - q_{1-xi}) / 2, which halves the Monte Carlo
    /// variance without bias.
    pub fn quantile(&self, xi: f64) -> Result<f64> {
        if !(xi > 0.0 && xi < 1.0) {
            return Err(Error::Domain(format!("quantile level must be in (0,1), got {xi}")));
        }
        if self.symmetric {
            Ok(0.5 * (self.raw_quantile(xi) - self.raw_quantile(1.0 - xi)))
        } else {
            Ok(self.raw_quantile(xi))
        }
    }

    /// Order-statistic standard error of the quantile estimate: the spread
    /// of the order statistics one binomial standard deviation either side
    /// of rank xi n.
    pub fn quantile_se(&self, xi: f64) -> f64 {
        let n = self.samples.len() as f64;
        let delta = (xi * (1.0 - xi) / n).sqrt();
        let lo = (xi - delta).max(1.0 / n);
        let hi = (xi + delta).min(1.0 - 1.0 / n);
        let se = 0.5 * (self.raw_quantile(hi) - self.raw_quantile(lo));
        if self.symmetric {
            se / std::f64::consts::SQRT_2
        } else {
            se
        }
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            / (self.samples.len() - 1) as f64
    }
}

const MC_CHUNK: usize = 1 << 15;

// Deterministic parallel Monte Carlo: fixed-size chunks, one derived stream
// per chunk, concatenated in chunk order. Identical output for any thread
// count.
fn parallel_draws<F>(n_mc: usize, base: &SeededGenerator, draw: F) -> Result<Vec<f64>>
where
    F: Fn(&mut SeededGenerator) -> Result<f64> + Sync,
{
    let n_chunks = n_mc.div_ceil(MC_CHUNK);
    let chunks: Vec<Result<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut g = base.substream(c as u64);
            let take = MC_CHUNK.min(n_mc - c * MC_CHUNK);
            (0..take).map(|_| draw(&mut g)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n_mc);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Builds the Monte Carlo law of sqrt(n)(tau_Y_hat - tau_Y): `n_mc`
/// independent draws of sqrt(V_tt) Q, sorted and cached.
///
/// The general variant draws the projection term by rejection from
/// N(0, V_xx); if fewer than 100 draws are accepted the criterion is too
/// strict for Monte Carlo work at this budget and an acceptance-starvation
/// error is returned. When acceptance is low the accepted pool is recycled
/// (sampled with replacement) against fresh Gaussian residuals.
pub fn build_distribution(
    model: &AsymptoticModel,
    n_mc: usize,
    base: &SeededGenerator,
) -> Result<MixtureDistribution> {
    if n_mc < 2 {
        return Err(Error::Domain("n_mc must be >= 2".into()));
    }
    match model {
        AsymptoticModel::Rem { v_tt, r2, k, a } => {
            let (sv, c_eps, c_l) = (v_tt.sqrt(), (1.0 - r2).sqrt(), r2.sqrt());
            let (k, a) = (*k, *a);
            let samples = parallel_draws(n_mc, base, move |g| {
                let e0 = g.standard_normal();
                let l = sample_l(k, a, g)?;
                Ok(sv * (c_eps * e0 + c_l * l))
            })?;
            Ok(MixtureDistribution::from_samples(samples, true))
        }
        AsymptoticModel::Remt {
            v_tt,
            tiers,
            rho2_resid,
        } => {
            let sv = v_tt.sqrt();
            let c_resid = rho2_resid.sqrt();
            let tiers = tiers.clone();
            let samples = parallel_draws(n_mc, base, move |g| {
                let mut q = c_resid * g.standard_normal();
                for t in &tiers {
                    q += t.rho2.sqrt() * sample_l(t.k, t.a, g)?;
                }
                Ok(sv * q)
            })?;
            Ok(MixtureDistribution::from_samples(samples, true))
        }
        AsymptoticModel::Reg {
            v_tt,
            r2,
            v_tx,
            v_xx,
            label,
            predicate,
        } => {
            let pool = sample_accepted_projections(predicate, label, v_xx, n_mc, base)?;
            let weights = {
                let chol = Cholesky::new(v_xx.clone()).ok_or_else(|| {
                    Error::SingularCovariance {
                        columns: (0..v_xx.nrows()).map(|j| format!("column {j}")).collect(),
                    }
                })?;
                chol.solve(v_tx)
            };
            // Projection values V_tx V_xx^-1 B for the accepted pool.
            let proj: Vec<f64> = pool.iter().map(|b| weights.dot(b)).collect();
            let eps_sd = (v_tt * (1.0 - r2)).sqrt();
            let m = proj.len();
            let resid_stream = base.substream(u64::MAX - 1);
            let samples = {
                let proj = &proj;
                parallel_draws(n_mc, &resid_stream, move |g| {
                    let idx = (g.next_u64() % m as u64) as usize;
                    Ok(eps_sd * g.standard_normal() + proj[idx])
                })?
            };
            // Symmetric because phi is symmetric and eps is Gaussian.
            Ok(MixtureDistribution::from_samples(samples, true))
        }
    }
}

// Rejection-samples B ~ N(0, V_xx) conditional on acceptance, up to n_mc
// accepted draws within an attempt budget of max(n_mc, 10^7).
fn sample_accepted_projections(
    predicate: &RegPredicate,
    label: &str,
    v_xx: &DMatrix<f64>,
    n_mc: usize,
    base: &SeededGenerator,
) -> Result<Vec<DVector<f64>>> {
    let chol = Cholesky::new(v_xx.clone()).ok_or_else(|| Error::SingularCovariance {
        columns: (0..v_xx.nrows()).map(|j| format!("column {j}")).collect(),
    })?;
    let l = chol.l();
    let k = v_xx.nrows();
    let budget = (n_mc as u64).max(10_000_000);
    let mut g = base.substream(u64::MAX);
    let mut accepted = Vec::new();
    let mut attempts = 0u64;
    while attempts < budget && accepted.len() < n_mc {
        attempts += 1;
        let u = DVector::from_fn(k, |_, _| g.standard_normal());
        let b = &l * u;
        let keep = predicate(&b, v_xx)
            .map_err(|e| Error::PredicateFailed(format!("{label}: {e}")))?;
        if keep {
            accepted.push(b);
        }
        // Early exit check: if acceptance is clearly healthy we can stop
        // attempting once the pool is big enough relative to need.
        if attempts >= 1_000_000 && accepted.len() >= 100 && accepted.len() >= n_mc / 100 {
            break;
        }
    }
    if accepted.len() < 100 {
        return Err(Error::AcceptanceStarvation {
            accepted: accepted.len() as u64,
            attempted: attempts,
            needed: 100,
        });
    }
    Ok(accepted)
}

/// The central (1-alpha) quantile range [nu_{alpha/2}, nu_{1-alpha/2}] of
/// the cached law.
pub fn quantile_range(d: &MixtureDistribution, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0,1), got {alpha}")));
    }
    Ok((d.quantile(alpha / 2.0)?, d.quantile(1.0 - alpha / 2.0)?))
}

/// Closed-form asymptotic variance of sqrt(n)(tau_Y_hat - tau_Y):
/// V_tt {1 - (1 - v_{K,a}) R^2} for the Mahalanobis criterion and the
/// per-tier analog for the tiered criterion. The general variant has no
/// closed form; use `asymptotic_variance_mc`.
pub fn asymptotic_variance(model: &AsymptoticModel) -> Result<f64> {
    match model {
        AsymptoticModel::Rem { v_tt, r2, k, a } => {
            Ok(v_tt * (1.0 - (1.0 - v_coeff(*k, *a)?) * r2))
        }
        AsymptoticModel::Remt { v_tt, tiers, .. } => {
            let mut reduction = 0.0;
            for t in tiers {
                reduction += (1.0 - v_coeff(t.k, t.a)?) * t.rho2;
            }
            Ok(v_tt * (1.0 - reduction))
        }
        AsymptoticModel::Reg { .. } => Err(Error::Domain(
            "general criteria have no closed-form variance; use asymptotic_variance_mc".into(),
        )),
    }
}

/// Asymptotic variance for any variant; the general criterion's covariate
/// term V_tx V_xx^-1 V_xx_phi V_xx^-1 V_xt is estimated by Monte Carlo.
pub fn asymptotic_variance_mc(
    model: &AsymptoticModel,
    n_mc: usize,
    g: &SeededGenerator,
) -> Result<f64> {
    match model {
        AsymptoticModel::Reg {
            v_tt,
            r2,
            v_tx,
            v_xx,
            label,
            predicate,
        } => {
            let (v_xx_phi, _) = reg_region_variance_impl(predicate, label, v_xx, n_mc, g)?;
            let chol = Cholesky::new(v_xx.clone()).ok_or_else(|| Error::SingularCovariance {
                columns: (0..v_xx.nrows()).map(|j| format!("column {j}")).collect(),
            })?;
            let w = chol.solve(v_tx);
            Ok(v_tt * (1.0 - r2) + w.dot(&(&v_xx_phi * &w)))
        }
        other => asymptotic_variance(other),
    }
}

/// Percentage reduction in asymptotic sampling variance relative to
/// complete randomization: 1 - variance / V_tt.
pub fn priasv(model: &AsymptoticModel) -> Result<f64> {
    Ok(1.0 - asymptotic_variance(model)? / model.v_tt())
}

/// Asymptotic covariance of sqrt(n) tau_X under the tiered criterion:
/// (r1 r0)^-1 Gamma^-1 diag(v_{k_t,a_t} S^2_{E[t]}) Gamma^-T.
pub fn remt_covariate_variance(
    basis: &TierBasis,
    thresholds: &[f64],
    r1: f64,
    r0: f64,
) -> Result<DMatrix<f64>> {
    if thresholds.len() != basis.t() {
        return Err(Error::DimensionMismatch(format!(
            "{} thresholds for {} tiers",
            thresholds.len(),
            basis.t()
        )));
    }
    let k = basis.k();
    let mut middle = DMatrix::zeros(k, k);
    let mut start = 0;
    for (t, block) in basis.s2_e_blocks.iter().enumerate() {
        let kt = basis.tier_sizes[t];
        let v = v_coeff(kt as u32, thresholds[t])?;
        middle.view_mut((start, start), (kt, kt)).copy_from(&(block * v));
        start += kt;
    }
    let gamma_inv = basis
        .gamma
        .clone()
        .try_inverse()
        .ok_or(Error::SingularTier { tier: 1 })?;
    Ok(&gamma_inv * middle * gamma_inv.transpose() / (r1 * r0))
}

/// Monte Carlo covariance of B ~ N(0, V_xx) conditional on acceptance by
/// phi, and a check that V_xx - V_xx_phi is positive semi-definite up to
/// Monte Carlo error (it must be, for the conservative variance results to
/// apply; anti-balance predicates fail this check).
pub fn reg_region_variance(
    predicate: &RegPredicate,
    v_xx: &DMatrix<f64>,
    n_mc: usize,
    g: &SeededGenerator,
) -> Result<(DMatrix<f64>, bool)> {
    reg_region_variance_impl(predicate, "phi", v_xx, n_mc, g)
}

fn reg_region_variance_impl(
    predicate: &RegPredicate,
    label: &str,
    v_xx: &DMatrix<f64>,
    n_mc: usize,
    g: &SeededGenerator,
) -> Result<(DMatrix<f64>, bool)> {
    let accepted = sample_accepted_projections(predicate, label, v_xx, n_mc, g)?;
    let m = accepted.len();
    let k = v_xx.nrows();
    // Raw second moment: the conditional mean is 0 by the registration
    // symmetry check, so E[BB'] is the covariance with less noise.
    let mut cov = DMatrix::zeros(k, k);
    for b in &accepted {
        cov.ger(1.0, b, b, 1.0);
    }
    cov /= m as f64;
    let gap = v_xx - &cov;
    let min_eig = SymmetricEigen::new(gap)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    // Entrywise MC standard error scale for a covariance of this size.
    let scale = v_xx.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let se = scale * (2.0 / m as f64).sqrt();
    Ok((cov, min_eig >= -3.0 * se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specialfn::{chi2_quantile, gaussian_cdf};
    use std::sync::Arc;

    fn ks_vs<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
        // samples must be sorted
        let n = samples.len() as f64;
        samples
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                let lo = i as f64 / n;
                let hi = (i + 1) as f64 / n;
                (f - lo).abs().max((hi - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn v_coeff_bounds_and_monotonicity() {
        assert_eq!(v_coeff(5, f64::INFINITY).unwrap(), 1.0);
        assert!(v_coeff(3, 1e-8).unwrap() < 0.01);
        let mut prev = 0.0;
        for i in 1..40 {
            let a = 0.25 * i as f64;
            let v = v_coeff(4, a).unwrap();
            assert!(v > 0.0 && v < 1.0, "v = {v}");
            assert!(v > prev, "not increasing at a = {a}");
            prev = v;
        }
        assert!(v_coeff(3, 0.0).is_err());
    }

    #[test]
    fn sample_l_moments_match_v_coeff() {
        for (k, p_a) in [(3u32, 0.01), (10u32, 0.001)] {
            let a = chi2_quantile(p_a, k).unwrap();
            let v = v_coeff(k, a).unwrap();
            let mut g = SeededGenerator::new(101, 0);
            let n = 400_000;
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            let mut sum4 = 0.0;
            for _ in 0..n {
                let l = sample_l(k, a, &mut g).unwrap();
                assert!(l.abs() <= a.sqrt() + 1e-12);
                sum += l;
                sum2 += l * l;
                sum4 += l * l * l * l;
            }
            let nf = n as f64;
            let mean = sum / nf;
            let var = sum2 / nf - mean * mean;
            // SE of the variance estimate from the fourth moment.
            let var_of_sq = sum4 / nf - (sum2 / nf) * (sum2 / nf);
            let se_var = (var_of_sq / nf).sqrt();
            let se_mean = (var / nf).sqrt();
            assert!(mean.abs() < 3.0 * se_mean, "k={k}: mean {mean}");
            assert!(
                (var - v).abs() < 3.0 * se_var,
                "k={k}: var {var} vs v {v} (se {se_var})"
            );
        }
    }

    #[test]
    fn density_l_normalizes_and_is_symmetric_unimodal() {
        for (k, a) in [(1u32, 2.0f64), (3u32, 1.5), (10u32, 6.0)] {
            let root = a.sqrt() - 1e-12;
            // Simpson integration on a fine fixed grid, pulled a hair inside
            // the support so rounding never lands a node past the boundary
            // (the density is discontinuous there); the missed mass is
            // O(1e-12), far below the tolerance.
            let n = 4000;
            let h = 2.0 * root / n as f64;
            let mut integral = 0.0;
            for i in 0..n {
                let x0 = -root + i as f64 * h;
                let xm = x0 + 0.5 * h;
                let x1 = x0 + h;
                integral +=
                    h / 6.0 * (density_l(x0, k, a) + 4.0 * density_l(xm, k, a) + density_l(x1, k, a));
            }
            assert!((integral - 1.0).abs() < 1e-6, "k={k} integral={integral}");
            let mut prev = f64::INFINITY;
            for i in 0..50 {
                let l = root * i as f64 / 50.0;
                let p = density_l(l, k, a);
                let p_neg = density_l(-l, k, a);
                assert!((p - p_neg).abs() < 1e-14);
                assert!(p <= prev + 1e-14, "not unimodal at l={l}");
                prev = p;
            }
            assert_eq!(density_l(root + 0.01, k, a), 0.0);
        }
    }

    #[test]
    fn r2_zero_is_gaussian() {
        let m = AsymptoticModel::rem(1.0, 0.0, 3, 1.0).unwrap();
        let g = SeededGenerator::new(7, 0);
        let d = build_distribution(&m, 100_000, &g).unwrap();
        let ks = ks_vs(d.samples(), gaussian_cdf);
        assert!(ks < 0.01, "ks = {ks}");
    }

    #[test]
    fn r2_one_has_bounded_support() {
        let a = 2.5;
        let v_tt = 1.7;
        let m = AsymptoticModel::rem(v_tt, 1.0, 2, a).unwrap();
        let g = SeededGenerator::new(8, 0);
        let d = build_distribution(&m, 50_000, &g).unwrap();
        let bound = (a * v_tt).sqrt() + 1e-9;
        assert!(d.samples().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn deterministic_across_chunking() {
        let m = AsymptoticModel::rem(1.0, 0.5, 3, 1.0).unwrap();
        let g = SeededGenerator::new(12, 3);
        let d1 = build_distribution(&m, 70_000, &g).unwrap();
        let d2 = build_distribution(&m, 70_000, &g).unwrap();
        assert_eq!(d1.samples(), d2.samples());
    }

    #[test]
    fn median_is_zero_and_quantiles_symmetric() {
        let m = AsymptoticModel::rem(1.0, 0.6, 3, 1.0).unwrap();
        let g = SeededGenerator::new(21, 0);
        let d = build_distribution(&m, 100_000, &g).unwrap();
        assert_eq!(d.quantile(0.5).unwrap(), 0.0);
        let q = d.quantile(0.9).unwrap();
        let q_mirror = d.quantile(0.1).unwrap();
        assert!((q + q_mirror).abs() < 1e-12);
    }

    #[test]
    fn gaussian_limit_quantile_value() {
        let v_tt = 2.3;
        let m = AsymptoticModel::rem(v_tt, 0.0, 3, 5.0).unwrap();
        let g = SeededGenerator::new(33, 0);
        let d = build_distribution(&m, 400_000, &g).unwrap();
        let q = d.quantile(0.975).unwrap();
        let se = d.quantile_se(0.975);
        let expected = 1.959964 * v_tt.sqrt();
        assert!((q - expected).abs() < 3.0 * se, "q={q} expected={expected} se={se}");
        let (lo, hi) = quantile_range(&d, 0.05).unwrap();
        assert!((hi - expected).abs() < 3.0 * se);
        assert!((lo + expected).abs() < 3.0 * se);
    }

    #[test]
    fn quantile_range_shrinks_in_r2_and_pa() {
        let g = SeededGenerator::new(55, 0);
        let n_mc = 200_000;
        let a = chi2_quantile(0.001, 3).unwrap();
        let mut prev = f64::INFINITY;
        for r2 in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let m = AsymptoticModel::rem(1.0, r2, 3, a).unwrap();
            let d = build_distribution(&m, n_mc, &g).unwrap();
            let (lo, hi) = quantile_range(&d, 0.05).unwrap();
            let len = hi - lo;
            let tol = 3.0 * d.quantile_se(0.975) * 2.0;
            assert!(len <= prev + tol, "len {len} at r2={r2}, prev {prev}");
            prev = len;
        }
        prev = f64::INFINITY;
        for p_a in [1.0, 0.1, 0.01, 0.001] {
            let a = if p_a == 1.0 {
                f64::INFINITY
            } else {
                chi2_quantile(p_a, 3).unwrap()
            };
            let m = AsymptoticModel::rem(1.0, 0.6, 3, a).unwrap();
            let d = build_distribution(&m, n_mc, &g).unwrap();
            let (lo, hi) = quantile_range(&d, 0.05).unwrap();
            let len = hi - lo;
            let tol = 3.0 * d.quantile_se(0.975) * 2.0;
            assert!(len <= prev + tol, "len {len} at p_a={p_a}, prev {prev}");
            prev = len;
        }
    }

    #[test]
    fn closed_form_variance_matches_monte_carlo() {
        let a = chi2_quantile(0.01, 3).unwrap();
        let m = AsymptoticModel::rem(1.4, 0.6, 3, a).unwrap();
        let g = SeededGenerator::new(77, 0);
        let d = build_distribution(&m, 1_000_000, &g).unwrap();
        let closed = asymptotic_variance(&m).unwrap();
        let rel = (d.variance() - closed).abs() / closed;
        assert!(rel < 0.01, "MC {} vs closed {closed}", d.variance());
    }

    #[test]
    fn cre_sentinel_has_no_reduction() {
        let m = AsymptoticModel::rem(3.0, 0.8, 4, f64::INFINITY).unwrap();
        assert!((asymptotic_variance(&m).unwrap() - 3.0).abs() < 1e-14);
        assert!(priasv(&m).unwrap().abs() < 1e-14);
    }

    #[test]
    fn remt_single_tier_matches_rem_closed_form() {
        let a = chi2_quantile(0.01, 3).unwrap();
        let rem = AsymptoticModel::rem(2.0, 0.45, 3, a).unwrap();
        let remt = AsymptoticModel::remt(
            2.0,
            vec![TierParam {
                rho2: 0.45,
                k: 3,
                a,
            }],
            0.55,
        )
        .unwrap();
        assert!(
            (asymptotic_variance(&rem).unwrap() - asymptotic_variance(&remt).unwrap()).abs()
                < 1e-14
        );
    }

    #[test]
    fn acceptance_probability_closed_forms() {
        let a = chi2_quantile(0.001, 3).unwrap();
        let m = AsymptoticModel::rem(1.0, 0.3, 3, a).unwrap();
        assert!((m.acceptance_probability().unwrap() - 0.001).abs() < 1e-9);
        let a1 = chi2_quantile(0.1, 1).unwrap();
        let a2 = chi2_quantile(0.1, 4).unwrap();
        let mt = AsymptoticModel::remt(
            1.0,
            vec![
                TierParam { rho2: 0.2, k: 1, a: a1 },
                TierParam { rho2: 0.3, k: 4, a: a2 },
            ],
            0.5,
        )
        .unwrap();
        assert!((mt.acceptance_probability().unwrap() - 0.01).abs() < 1e-9);
    }

    #[test]
    fn reg_ball_matches_rem_law() {
        // Mahalanobis-ball predicate: the general path must reproduce the
        // closed-form ReM law.
        let a = chi2_quantile(0.1, 2).unwrap();
        let v_xx = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let v_xx_inv = v_xx.clone().try_inverse().unwrap();
        let ball: RegPredicate = Arc::new(move |mu: &DVector<f64>, _: &DMatrix<f64>| {
            Ok(mu.dot(&(&v_xx_inv * mu)) <= a)
        });
        // Pick V_tx so R^2 = 0.5: R^2 = V_tx V_xx^-1 V_xt / V_tt.
        let v_tt = 2.0;
        // direction e1: quad form = v_tx' V_xx^-1 v_tx; choose v_tx = c * V_xx e1
        // so quad = c^2 * (V_xx)_{11}.
        let c = (0.5f64 * v_tt / 2.0).sqrt();
        let v_tx = DVector::from_column_slice(&[2.0 * c, 0.5 * c]);
        let reg = AsymptoticModel::reg(v_tt, 0.5, v_tx, v_xx, "ball", ball).unwrap();
        let rem = AsymptoticModel::rem(v_tt, 0.5, 2, a).unwrap();
        let g = SeededGenerator::new(91, 0);
        let d_reg = build_distribution(&reg, 100_000, &g).unwrap();
        let d_rem = build_distribution(&rem, 100_000, &g.substream(1)).unwrap();
        // Two-sample KS via the cached sorted samples.
        let ks = two_sample_ks(d_reg.samples(), d_rem.samples());
        assert!(ks < 0.01, "ks = {ks}");
    }

    fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
        let (mut i, mut j) = (0usize, 0usize);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let mut d = 0.0f64;
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / na - j as f64 / nb).abs());
        }
        d
    }

    #[test]
    fn reg_region_variance_ball_matches_v_coeff() {
        let a = chi2_quantile(0.1, 2).unwrap();
        let v_xx = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let v_xx_inv = v_xx.clone().try_inverse().unwrap();
        let ball: RegPredicate = Arc::new(move |mu: &DVector<f64>, _: &DMatrix<f64>| {
            Ok(mu.dot(&(&v_xx_inv * mu)) <= a)
        });
        let g = SeededGenerator::new(13, 0);
        let (cov, ok) = reg_region_variance(&ball, &v_xx, 300_000, &g).unwrap();
        assert!(ok);
        let v = v_coeff(2, a).unwrap();
        let expected = &v_xx * v;
        let m = 300_000f64;
        for i in 0..2 {
            for j in 0..2 {
                let se = 3.0 * (v_xx[(i, i)] * v_xx[(j, j)] / m).sqrt();
                assert!(
                    (cov[(i, j)] - expected[(i, j)]).abs() < 3.0 * se.max(0.01),
                    "entry ({i},{j}): {} vs {}",
                    cov[(i, j)],
                    expected[(i, j)]
                );
            }
        }
    }

    #[test]
    fn reg_region_variance_trivial_and_anti_balance() {
        let v_xx = DMatrix::identity(2, 2);
        let all: RegPredicate = Arc::new(|_: &DVector<f64>, _: &DMatrix<f64>| Ok(true));
        let g = SeededGenerator::new(14, 0);
        let (cov, ok) = reg_region_variance(&all, &v_xx, 200_000, &g).unwrap();
        assert!(ok);
        assert!((cov - &v_xx).norm() < 0.05);

        // Anti-balance: accept only large imbalance -> variance inflation.
        let anti: RegPredicate = Arc::new(|mu: &DVector<f64>, _: &DMatrix<f64>| Ok(mu.norm() > 1.5));
        let (_, ok) = reg_region_variance(&anti, &DMatrix::identity(2, 2), 200_000, &g).unwrap();
        assert!(!ok);
    }

    #[test]
    fn acceptance_starvation_detected() {
        let never: RegPredicate =
            Arc::new(|mu: &DVector<f64>, _: &DMatrix<f64>| Ok(mu.norm() > 1e9));
        let g = SeededGenerator::new(15, 0);
        let v_xx = DMatrix::identity(1, 1);
        let err = reg_region_variance(&never, &v_xx, 10_000, &g).unwrap_err();
        assert!(matches!(err, Error::AcceptanceStarvation { .. }));
    }

    #[test]
    fn remt_covariate_variance_limits() {
        use crate::population::{tier_orthogonalize, DesignMatrix};
        let x = DMatrix::from_column_slice(6, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = DesignMatrix::new(x, vec!["x".into()]).unwrap();
        let basis = tier_orthogonalize(&d).unwrap();
        // Single tier: v_{K,a} V_xx.
        let a = chi2_quantile(0.1, 1).unwrap();
        let got = remt_covariate_variance(&basis, &[a], 0.5, 0.5).unwrap();
        let expected = d.vxx(0.5, 0.5) * v_coeff(1, a).unwrap();
        assert!((&got - &expected).norm() < 1e-12);
        // All thresholds infinite: plain V_xx.
        let got = remt_covariate_variance(&basis, &[f64::INFINITY], 0.5, 0.5).unwrap();
        assert!((&got - d.vxx(0.5, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn tail_probability_monotone_in_rho() {
        // P(sqrt(1-rho^2) e0 + rho L >= c) nonincreasing in rho.
        let a = chi2_quantile(0.01, 3).unwrap();
        let g = SeededGenerator::new(61, 0);
        let n_mc = 150_000;
        for c in [0.5, 1.0, 2.0] {
            let mut prev = f64::INFINITY;
            for i in 0..=5 {
                let rho2 = (i as f64 * 0.2).min(1.0);
                let m = AsymptoticModel::rem(1.0, rho2, 3, a).unwrap();
                let d = build_distribution(&m, n_mc, &g).unwrap();
                let p = d.samples().iter().filter(|&&x| x >= c).count() as f64 / n_mc as f64;
                let se = (p * (1.0 - p) / n_mc as f64).sqrt();
                assert!(p <= prev + 3.0 * se, "c={c} rho2={rho2}: p={p} prev={prev}");
                prev = p;
            }
        }
    }
}
