//! Balance criteria as pure predicates on (assignment, covariates):
//! the Mahalanobis criterion, its tiered refinement, and pluggable general
//! symmetric predicates with registration-time validity checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::population::{Assignment, DesignMatrix, TierBasis};
use crate::specialfn::{chi2_quantile, SeededGenerator};

/// A general balance predicate phi(sqrt(n) tau_X, V_xx) -> accept.
/// Failures (rather than rejections) are reported as error strings.
pub type RegPredicate =
    Arc<dyn Fn(&DVector<f64>, &DMatrix<f64>) -> std::result::Result<bool, String> + Send + Sync>;

/// An acceptance region for treatment assignments. Construct through the
/// associated functions, which validate thresholds and, for general
/// predicates, run the registration spot-checks.
#[derive(Clone)]
pub enum BalanceCriterion {
    /// Accept when the overall Mahalanobis distance M <= a. The threshold
    /// may be the +infinity sentinel, in which case every assignment is
    /// accepted (plain complete randomization).
    Mahalanobis { a: f64 },
    /// Accept when every tier's Mahalanobis distance M_t <= a_t on the
    /// block-orthogonalized basis.
    Tiered {
        thresholds: Vec<f64>,
        basis: TierBasis,
    },
    /// Accept when a registered symmetric predicate holds.
    General {
        label: String,
        predicate: RegPredicate,
        vxx: DMatrix<f64>,
    },
}

impl fmt::Debug for BalanceCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mahalanobis { a } => write!(f, "Mahalanobis {{ a: {a} }}"),
            Self::Tiered { thresholds, .. } => {
                write!(f, "Tiered {{ thresholds: {thresholds:?} }}")
            }
            Self::General { label, .. } => write!(f, "General {{ label: {label:?} }}"),
        }
    }
}

/// Per-assignment balance measurements.
#[derive(Debug, Clone)]
pub struct BalanceDiagnostics {
    /// Overall Mahalanobis distance.
    pub m: f64,
    /// Per-tier distances (empty unless the criterion is tiered).
    pub m_t: Vec<f64>,
    pub accepted: bool,
    /// Number of candidate draws consumed; 1 for a direct evaluation,
    /// overwritten by the rejection sampler.
    pub draws_used: u64,
}

impl BalanceCriterion {
    pub fn rem(a: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::Domain(format!(
                "Mahalanobis threshold must be positive, got {a}"
            )));
        }
        Ok(Self::Mahalanobis { a })
    }

    /// The complete-randomization sentinel: threshold +infinity, every
    /// assignment accepted.
    pub fn cre() -> Self {
        Self::Mahalanobis { a: f64::INFINITY }
    }

    /// Mahalanobis criterion with threshold chosen so the asymptotic
    /// acceptance probability is `p_a`.
    pub fn rem_from_probability(p_a: f64, k: usize) -> Result<Self> {
        let t = thresholds_from_probability(p_a, &[k])?;
        Self::rem(t[0])
    }

    pub fn remt(basis: TierBasis, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.len() != basis.t() {
            return Err(Error::DimensionMismatch(format!(
                "{} thresholds for {} tiers",
                thresholds.len(),
                basis.t()
            )));
        }
        if thresholds.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Domain(format!(
                "tier thresholds must all be positive, got {thresholds:?}"
            )));
        }
        Ok(Self::Tiered { thresholds, basis })
    }

    /// Tiered criterion with the equal-split rule: each tier gets
    /// per-tier probability p_a^(1/T).
    pub fn remt_from_probability(basis: TierBasis, p_a: f64) -> Result<Self> {
        let thresholds = thresholds_from_probability(p_a, &basis.tier_sizes)?;
        Self::remt(basis, thresholds)
    }

    /// Registers a general predicate after spot-checking the symmetry
    /// requirements: phi(0) = 1 and phi(mu) = phi(-mu) on 1000 random mu
    /// drawn from N(0, V_xx). Continuity of phi cannot be checked
    /// mechanically and remains a caller obligation.
    pub fn reg(
        label: impl Into<String>,
        predicate: RegPredicate,
        vxx: DMatrix<f64>,
        g: &mut SeededGenerator,
    ) -> Result<Self> {
        let label = label.into();
        let k = vxx.nrows();
        let zero = DVector::zeros(k);
        match predicate(&zero, &vxx) {
            Ok(true) => {}
            Ok(false) => {
                return Err(Error::PredicateRejected(format!(
                    "{label}: phi(0) must be 1 (perfect balance must be accepted)"
                )))
            }
            Err(e) => return Err(Error::PredicateFailed(format!("{label}: {e}"))),
        }
        let chol = Cholesky::new(vxx.clone()).ok_or_else(|| {
            Error::SingularCovariance {
                columns: (0..k).map(|j| format!("column {j}")).collect(),
            }
        })?;
        let l = chol.l();
        for _ in 0..1000 {
            let u = DVector::from_fn(k, |_, _| g.standard_normal());
            let mu = &l * u;
            let plus = predicate(&mu, &vxx)
                .map_err(|e| Error::PredicateFailed(format!("{label}: {e}")))?;
            let minus = predicate(&(-&mu), &vxx)
                .map_err(|e| Error::PredicateFailed(format!("{label}: {e}")))?;
            if plus != minus {
                return Err(Error::PredicateRejected(format!(
                    "{label}: phi(mu) != phi(-mu) at mu = {:?}",
                    mu.as_slice()
                )));
            }
        }
        Ok(Self::General {
            label,
            predicate,
            vxx,
        })
    }

    /// Evaluates the criterion on one assignment. Diagnostics are populated
    /// for every variant (the overall Mahalanobis distance is always
    /// computed; per-tier distances only for the tiered variant).
    pub fn accept(&self, design: &DesignMatrix, z: &Assignment) -> Result<BalanceDiagnostics> {
        if z.n() != design.n() {
            return Err(Error::DimensionMismatch(format!(
                "assignment length {} vs design rows {}",
                z.n(),
                design.n()
            )));
        }
        let m = mahalanobis(design, z);
        match self {
            Self::Mahalanobis { a } => Ok(BalanceDiagnostics {
                m,
                m_t: Vec::new(),
                accepted: m <= *a,
                draws_used: 1,
            }),
            Self::Tiered { thresholds, basis } => {
                let m_t = tier_distances(basis, z)?;
                let accepted = m_t.iter().zip(thresholds).all(|(mt, a)| mt <= a);
                Ok(BalanceDiagnostics {
                    m,
                    m_t,
                    accepted,
                    draws_used: 1,
                })
            }
            Self::General {
                label,
                predicate,
                vxx,
            } => {
                let mu = z.covariate_diff(design) * (z.n() as f64).sqrt();
                let accepted = predicate(&mu, vxx)
                    .map_err(|e| Error::PredicateFailed(format!("{label}: {e}")))?;
                Ok(BalanceDiagnostics {
                    m,
                    m_t: Vec::new(),
                    accepted,
                    draws_used: 1,
                })
            }
        }
    }
}

/// Overall Mahalanobis distance
/// M = (n1 n0 / n) tau_X' (S^2_X)^-1 tau_X = (sqrt(n) tau_X)' V_xx^-1 (sqrt(n) tau_X).
pub fn mahalanobis(design: &DesignMatrix, z: &Assignment) -> f64 {
    let diff = z.covariate_diff(design);
    let scale = (z.n1() * z.n0()) as f64 / z.n() as f64;
    scale * diff.dot(&design.s2x_solve(&diff))
}

/// Per-tier Mahalanobis distances on the orthogonalized basis.
pub fn tier_distances(basis: &TierBasis, z: &Assignment) -> Result<Vec<f64>> {
    if z.n() != basis.n() {
        return Err(Error::DimensionMismatch(format!(
            "assignment length {} vs basis rows {}",
            z.n(),
            basis.n()
        )));
    }
    let n = z.n();
    let scale = (z.n1() * z.n0()) as f64 / n as f64;
    // Difference in means of the orthogonalized columns.
    let k = basis.k();
    let mut sum1 = DVector::zeros(k);
    let mut sum0 = DVector::zeros(k);
    for i in 0..n {
        let row = basis.e.row(i).transpose();
        if z.is_treated(i) {
            sum1 += row;
        } else {
            sum0 += row;
        }
    }
    let diff = sum1 / z.n1() as f64 - sum0 / z.n0() as f64;

    let mut out = Vec::with_capacity(basis.t());
    for t in 0..basis.t() {
        let range = basis.tier_range(t);
        let dt = DVector::from_iterator(range.len(), range.clone().map(|j| diff[j]));
        let chol = Cholesky::new(basis.s2_e_blocks[t].clone())
            .ok_or(Error::SingularTier { tier: t + 1 })?;
        out.push(scale * dt.dot(&chol.solve(&dt)));
    }
    Ok(out)
}

/// Equal-split tier thresholds: p_t = p_a^(1/T), a_t = chi-square quantile
/// of p_t at k_t degrees of freedom. `p_a = 1` returns the +infinity
/// sentinel (complete randomization).
pub fn thresholds_from_probability(p_a: f64, tier_sizes: &[usize]) -> Result<Vec<f64>> {
    if !(p_a > 0.0 && p_a <= 1.0) {
        return Err(Error::Domain(format!(
            "acceptance probability must be in (0, 1], got {p_a}"
        )));
    }
    if tier_sizes.is_empty() || tier_sizes.iter().any(|&k| k == 0) {
        return Err(Error::Domain(format!(
            "tier sizes must be nonempty and positive, got {tier_sizes:?}"
        )));
    }
    if p_a == 1.0 {
        return Ok(vec![f64::INFINITY; tier_sizes.len()]);
    }
    let p_t = p_a.powf(1.0 / tier_sizes.len() as f64);
    tier_sizes
        .iter()
        .map(|&k| chi2_quantile(p_t, k as u32))
        .collect()
}

/// Probability that at least one of K independent covariate tests is
/// significant at level alpha: 1 - (1 - alpha)^K.
pub fn any_imbalance_probability(k: usize, alpha: f64) -> Result<f64> {
    if k < 1 {
        return Err(Error::Domain(format!("K must be >= 1, got {k}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0,1), got {alpha}")));
    }
    Ok(1.0 - (1.0 - alpha).powi(k as i32))
}
