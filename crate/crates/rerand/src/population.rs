//! Covariate and potential-outcome data model: the fixed design matrix with
//! its known covariance, treatment assignments, finite-population moments
//! (divisor n-1 throughout), squared multiple correlations, and the
//! block Gram-Schmidt tier basis.

use std::io;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// The fixed n x K covariate matrix, optionally partitioned into ordered
/// tiers of decreasing importance. The covariance S^2_X is computed once and
/// checked positive definite at construction.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    column_names: Vec<String>,
    tier_sizes: Option<Vec<usize>>,
    means: DVector<f64>,
    s2x: DMatrix<f64>,
    s2x_chol: Cholesky<f64, nalgebra::Dyn>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        Self::build(x, column_names, None)
    }

    pub fn with_tiers(
        x: DMatrix<f64>,
        column_names: Vec<String>,
        tier_sizes: Vec<usize>,
    ) -> Result<Self> {
        Self::build(x, column_names, Some(tier_sizes))
    }

    fn build(
        x: DMatrix<f64>,
        column_names: Vec<String>,
        tier_sizes: Option<Vec<usize>>,
    ) -> Result<Self> {
        let (n, k) = x.shape();
        if k == 0 || n < 3 {
            return Err(Error::DimensionMismatch(format!(
                "design matrix must have n >= 3 rows and K >= 1 columns, got {n} x {k}"
            )));
        }
        if column_names.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} column names for {k} columns",
                column_names.len()
            )));
        }
        if let Some(sizes) = &tier_sizes {
            if sizes.iter().any(|&s| s == 0) || sizes.iter().sum::<usize>() != k {
                return Err(Error::Config(format!(
                    "tier sizes {sizes:?} must be positive and sum to K = {k}"
                )));
            }
        }
        let means = x.row_mean().transpose();
        let s2x = covariance_matrix(&x, &means);
        check_positive_definite(&s2x, &column_names)?;
        let s2x_chol = Cholesky::new(s2x.clone()).ok_or_else(|| Error::SingularCovariance {
            columns: column_names.clone(),
        })?;
        Ok(Self {
            x,
            column_names,
            tier_sizes,
            means,
            s2x,
            s2x_chol,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn tier_sizes(&self) -> Option<&[usize]> {
        self.tier_sizes.as_deref()
    }

    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    /// Finite-population covariance S^2_X with divisor n-1.
    pub fn s2x(&self) -> &DMatrix<f64> {
        &self.s2x
    }

    /// Solves S^2_X w = v.
    pub fn s2x_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.s2x_chol.solve(v)
    }

    /// V_xx = (r1 r0)^-1 S^2_X, the asymptotic covariance of sqrt(n) tau_X.
    pub fn vxx(&self, r1: f64, r0: f64) -> DMatrix<f64> {
        &self.s2x / (r1 * r0)
    }

    /// Diagnostic for the bounded-fourth-moment regularity condition:
    /// max_i ||X_i - X_bar||^2 / n. Small values support the asymptotic
    /// approximations; nothing is enforced.
    pub fn condition_diagnostic(&self) -> f64 {
        let n = self.n() as f64;
        (0..self.n())
            .map(|i| {
                (0..self.k())
                    .map(|j| {
                        let d = self.x[(i, j)] - self.means[j];
                        d * d
                    })
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
            / n
    }
}

/// A realized treatment assignment: z_i = 1 for treated, 0 for control.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    z: Vec<u8>,
    n1: usize,
    n0: usize,
}

impl Assignment {
    pub fn new(z: Vec<u8>) -> Result<Self> {
        if z.iter().any(|&v| v > 1) {
            return Err(Error::Domain(
                "assignment entries must be 0 or 1".to_string(),
            ));
        }
        let n1 = z.iter().filter(|&&v| v == 1).count();
        let n0 = z.len() - n1;
        // Per-arm sample variances need two units in each arm.
        if n1 < 2 || n0 < 2 {
            return Err(Error::ArmTooSmall { n1, n0, needed: 2 });
        }
        Ok(Self { z, n1, n0 })
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn r1(&self) -> f64 {
        self.n1 as f64 / self.z.len() as f64
    }

    pub fn r0(&self) -> f64 {
        self.n0 as f64 / self.z.len() as f64
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.z[i] == 1
    }

    /// The relabeled assignment 1 - z.
    pub fn flipped(&self) -> Self {
        Self {
            z: self.z.iter().map(|&v| 1 - v).collect(),
            n1: self.n0,
            n0: self.n1,
        }
    }

    /// Difference in covariate means, treated minus control.
    pub fn covariate_diff(&self, design: &DesignMatrix) -> DVector<f64> {
        let k = design.k();
        let mut sum1 = DVector::zeros(k);
        let mut sum0 = DVector::zeros(k);
        for i in 0..self.n() {
            let row = design.x().row(i).transpose();
            if self.is_treated(i) {
                sum1 += row;
            } else {
                sum0 += row;
            }
        }
        sum1 / self.n1 as f64 - sum0 / self.n0 as f64
    }
}

/// Full potential-outcome schedule with every finite-population moment;
/// available only in simulation/oracle settings where both Y(1) and Y(0)
/// are known for every unit.
#[derive(Debug, Clone)]
pub struct OraclePopulation {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub tau_y: f64,
    pub s2_y1: f64,
    pub s2_y0: f64,
    pub s2_tau: f64,
    /// S_{Y(1),X} and S_{Y(0),X}: covariances of each outcome with the
    /// covariate columns.
    pub s_y1_x: DVector<f64>,
    pub s_y0_x: DVector<f64>,
    /// Projection variances S^2_{Y(z)|X} and S^2_{tau|X}.
    pub s2_y1_proj: f64,
    pub s2_y0_proj: f64,
    pub s2_tau_proj: f64,
    pub r2_y1: f64,
    pub r2_y0: f64,
    pub r2_tau: f64,
}

/// Asymptotic covariance of sqrt(n) (tau_Y_hat, tau_X_hat) and the derived
/// squared multiple correlation.
#[derive(Debug, Clone)]
pub struct VMatrix {
    pub v_tt: f64,
    pub v_tx: DVector<f64>,
    pub v_xx: DMatrix<f64>,
    pub r2: f64,
    pub condition_diagnostic: f64,
}

/// Computes every finite-population moment and the V matrix for an oracle
/// population. All variances use divisor n-1.
pub fn finite_moments(
    design: &DesignMatrix,
    y1: &[f64],
    y0: &[f64],
    r1: f64,
    r0: f64,
) -> Result<(OraclePopulation, VMatrix)> {
    let n = design.n();
    if y1.len() != n || y0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "outcome lengths ({}, {}) do not match n = {n}",
            y1.len(),
            y0.len()
        )));
    }
    check_proportions(r1, r0)?;

    let tau: Vec<f64> = y1.iter().zip(y0).map(|(a, b)| a - b).collect();
    let tau_y = mean(&tau);
    let s2_y1 = variance(y1);
    let s2_y0 = variance(y0);
    let s2_tau = variance(&tau);
    let v_tt = s2_y1 / r1 + s2_y0 / r0 - s2_tau;
    if v_tt <= 1e-12 * (s2_y1 + s2_y0).max(1.0) {
        return Err(Error::DegeneratePopulation);
    }

    let s_y1_x = cross_covariance(y1, design);
    let s_y0_x = cross_covariance(y0, design);
    let s_tau_x = &s_y1_x - &s_y0_x;

    let s2_y1_proj = quad_solve(design, &s_y1_x);
    let s2_y0_proj = quad_solve(design, &s_y0_x);
    let s2_tau_proj = quad_solve(design, &s_tau_x);

    let r2_of = |proj: f64, total: f64| {
        if total > 0.0 {
            (proj / total).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };

    let r2 = ((s2_y1_proj / r1 + s2_y0_proj / r0 - s2_tau_proj) / v_tt).clamp(0.0, 1.0);
    let v_tx = &s_y1_x / r1 + &s_y0_x / r0;

    let pop = OraclePopulation {
        y1: y1.to_vec(),
        y0: y0.to_vec(),
        tau_y,
        s2_y1,
        s2_y0,
        s2_tau,
        s_y1_x,
        s_y0_x,
        s2_y1_proj,
        s2_y0_proj,
        s2_tau_proj,
        r2_y1: r2_of(s2_y1_proj, s2_y1),
        r2_y0: r2_of(s2_y0_proj, s2_y0),
        r2_tau: r2_of(s2_tau_proj, s2_tau),
    };
    let v = VMatrix {
        v_tt,
        v_tx,
        v_xx: design.vxx(r1, r0),
        r2,
        condition_diagnostic: design.condition_diagnostic(),
    };
    Ok((pop, v))
}

/// R^2: the squared multiple correlation between tau_Y_hat and tau_X_hat
/// under complete randomization.
pub fn squared_multiple_correlation(pop: &OraclePopulation, r1: f64, r0: f64) -> Result<f64> {
    check_proportions(r1, r0)?;
    let v_tt = pop.s2_y1 / r1 + pop.s2_y0 / r0 - pop.s2_tau;
    if v_tt <= 0.0 {
        return Err(Error::DegeneratePopulation);
    }
    Ok(((pop.s2_y1_proj / r1 + pop.s2_y0_proj / r0 - pop.s2_tau_proj) / v_tt).clamp(0.0, 1.0))
}

/// The orthogonalized covariate basis E = X Gamma' with Gamma block
/// lower-triangular: tier t's columns are residualized on all earlier tiers,
/// so distinct tiers have exactly zero finite-population covariance.
#[derive(Debug, Clone)]
pub struct TierBasis {
    pub e: DMatrix<f64>,
    /// Block lower-triangular with unit diagonal blocks; E_i = Gamma X_i.
    pub gamma: DMatrix<f64>,
    pub tier_sizes: Vec<usize>,
    pub column_names: Vec<String>,
    /// Per-tier covariance blocks S^2_{E[t]}.
    pub s2_e_blocks: Vec<DMatrix<f64>>,
}

impl TierBasis {
    pub fn t(&self) -> usize {
        self.tier_sizes.len()
    }

    pub fn k(&self) -> usize {
        self.tier_sizes.iter().sum()
    }

    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    /// Column range of tier t (0-based).
    pub fn tier_range(&self, t: usize) -> std::ops::Range<usize> {
        let start: usize = self.tier_sizes[..t].iter().sum();
        start..start + self.tier_sizes[t]
    }
}

/// Block Gram-Schmidt orthogonalization across tiers. A design without an
/// explicit tier partition is treated as a single tier (E = X, Gamma = I).
pub fn tier_orthogonalize(design: &DesignMatrix) -> Result<TierBasis> {
    let k = design.k();
    let sizes: Vec<usize> = design
        .tier_sizes()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![k]);
    let x = design.x();
    let mut e = x.clone();
    let mut gamma = DMatrix::identity(k, k);

    let mut offset = sizes[0];
    for (t, &kt) in sizes.iter().enumerate().skip(1) {
        // Residualize tier t on the raw covariates of all earlier tiers.
        let prefix = x.columns(0, offset).into_owned();
        let block = x.columns(offset, kt).into_owned();
        let s_pp = covariance_of(&prefix, &prefix);
        let s_bp = covariance_of(&block, &prefix);
        let chol = match Cholesky::new(s_pp) {
            Some(c) => c,
            None => return Err(Error::SingularTier { tier: t + 1 }),
        };
        // coef = S_{X[t],prefix} (S^2_prefix)^-1, shape kt x offset
        let coef = chol.solve(&s_bp.transpose()).transpose();
        let resid = &block - &prefix * coef.transpose();
        e.columns_mut(offset, kt).copy_from(&resid);
        // E[t] = X[t] - coef X[1..t-1], so the tier-t rows of Gamma are
        // (-coef, I, 0) against the raw covariates: block lower-triangular
        // with unit diagonal blocks.
        gamma.view_mut((offset, 0), (kt, offset)).copy_from(&(-coef));
        offset += kt;
    }

    let mut s2_e_blocks = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (t, &kt) in sizes.iter().enumerate() {
        let block = e.columns(start, kt).into_owned();
        let s2 = covariance_of(&block, &block);
        if Cholesky::new(s2.clone()).is_none() {
            return Err(Error::SingularTier { tier: t + 1 });
        }
        s2_e_blocks.push(s2);
        start += kt;
    }

    Ok(TierBasis {
        e,
        gamma,
        tier_sizes: sizes,
        column_names: design.column_names().to_vec(),
        s2_e_blocks,
    })
}

/// Per-tier squared correlations (rho_1^2, ..., rho_T^2, rho_{T+1}^2) with
/// rho_{T+1}^2 = 1 - R^2. The first T values sum to R^2 because the tier
/// basis is exactly orthogonal across tiers.
pub fn tier_correlations(
    basis: &TierBasis,
    pop: &OraclePopulation,
    r1: f64,
    r0: f64,
) -> Result<Vec<f64>> {
    check_proportions(r1, r0)?;
    let v_tt = pop.s2_y1 / r1 + pop.s2_y0 / r0 - pop.s2_tau;
    if v_tt <= 0.0 {
        return Err(Error::DegeneratePopulation);
    }
    let t_count = basis.t();
    let mut rho = Vec::with_capacity(t_count + 1);
    let mut total = 0.0;
    for t in 0..t_count {
        let range = basis.tier_range(t);
        let block = basis.e.columns(range.start, range.len()).into_owned();
        let s_y1_e = cross_covariance_matrix(&pop.y1, &block);
        let s_y0_e = cross_covariance_matrix(&pop.y0, &block);
        let v_te = &s_y1_e / r1 + &s_y0_e / r0;
        let chol = Cholesky::new(basis.s2_e_blocks[t].clone())
            .ok_or(Error::SingularTier { tier: t + 1 })?;
        // rho_t^2 = r1 r0 V_{tau,E[t]} (S^2_{E[t]})^-1 V_{E[t],tau} / V_tt
        let quad = v_te.dot(&chol.solve(&v_te));
        let r = (r1 * r0 * quad / v_tt).max(0.0);
        total += r;
        rho.push(r);
    }
    rho.push((1.0 - total).max(0.0));
    Ok(rho)
}

fn check_proportions(r1: f64, r0: f64) -> Result<()> {
    if !(r1 > 0.0 && r0 > 0.0 && (r1 + r0 - 1.0).abs() < 1e-9) {
        return Err(Error::Domain(format!(
            "treatment proportions must be positive and sum to 1, got r1 = {r1}, r0 = {r0}"
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Finite-population variance with divisor n-1.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn covariance_matrix(x: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let centered = x - DVector::from_element(n, 1.0) * means.transpose();
    centered.transpose() * &centered / (n - 1) as f64
}

fn covariance_of(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let am = a.row_mean();
    let bm = b.row_mean();
    let ac = a - DVector::from_element(n, 1.0) * am;
    let bc = b - DVector::from_element(n, 1.0) * bm;
    ac.transpose() * bc / (n - 1) as f64
}

/// S_{Y,X}: covariance of a scalar sequence with each covariate column.
fn cross_covariance(y: &[f64], design: &DesignMatrix) -> DVector<f64> {
    let n = design.n();
    let ym = mean(y);
    let mut out = DVector::zeros(design.k());
    for j in 0..design.k() {
        let xm = design.means()[j];
        let mut acc = 0.0;
        for i in 0..n {
            acc += (y[i] - ym) * (design.x()[(i, j)] - xm);
        }
        out[j] = acc / (n - 1) as f64;
    }
    out
}

fn cross_covariance_matrix(y: &[f64], cols: &DMatrix<f64>) -> DVector<f64> {
    let n = cols.nrows();
    let ym = mean(y);
    let mut out = DVector::zeros(cols.ncols());
    for j in 0..cols.ncols() {
        let xm = cols.column(j).mean();
        let mut acc = 0.0;
        for i in 0..n {
            acc += (y[i] - ym) * (cols[(i, j)] - xm);
        }
        out[j] = acc / (n - 1) as f64;
    }
    out
}

/// v' (S^2_X)^-1 v, the projection variance of a covariance vector.
fn quad_solve(design: &DesignMatrix, v: &DVector<f64>) -> f64 {
    v.dot(&design.s2x_solve(v))
}

/// Deterministic positive-definiteness check by pivoted Cholesky with a
/// relative pivot threshold; names the columns left unpivoted at breakdown.
fn check_positive_definite(s: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let k = s.nrows();
    let mut a = s.clone();
    let mut perm: Vec<usize> = (0..k).collect();
    let max_diag: f64 = (0..k).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let threshold = 1e-10 * max_diag;
    for j in 0..k {
        let (p, pivot) = (j..k)
            .map(|i| (i, a[(i, i)]))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot <= threshold {
            let columns = perm[j..].iter().map(|&i| names[i].clone()).collect();
            return Err(Error::SingularCovariance { columns });
        }
        if p != j {
            a.swap_rows(j, p);
            a.swap_columns(j, p);
            perm.swap(j, p);
        }
        let l = pivot.sqrt();
        a[(j, j)] = l;
        for i in j + 1..k {
            a[(i, j)] /= l;
        }
        for i in j + 1..k {
            for m in j + 1..=i {
                let update = a[(i, j)] * a[(m, j)];
                a[(i, m)] -= update;
                if i != m {
                    a[(m, i)] = a[(i, m)];
                }
            }
        }
    }
    Ok(())
}

/// A parsed covariate CSV: design matrix plus optional unit ids, treatment
/// column `z`, and a named outcome column.
#[derive(Debug, Clone)]
pub struct CsvDesign {
    pub design: DesignMatrix,
    pub ids: Vec<String>,
    pub z: Option<Vec<u8>>,
    pub outcome: Option<Vec<f64>>,
}

/// Reads a covariate CSV: header row required; a column named `id` supplies
/// unit labels (row index otherwise); a column named `z` is the treatment
/// indicator; `outcome_column` names the observed outcome if present. All
/// remaining columns are numeric covariates. When `tiers` is given, each
/// inner list names the columns of one tier in order, and together they must
/// cover every covariate column.
pub fn read_design_csv<R: io::Read>(
    reader: R,
    outcome_column: Option<&str>,
    tiers: Option<&[Vec<String>]>,
) -> Result<CsvDesign> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();

    let id_col = headers.iter().position(|h| h == "id");
    let z_col = headers.iter().position(|h| h == "z");
    let y_col = match outcome_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("outcome column {name:?} not found in CSV header"))
        })?),
        None => None,
    };
    let covariate_cols: Vec<usize> = (0..headers.len())
        .filter(|&j| Some(j) != id_col && Some(j) != z_col && Some(j) != y_col)
        .collect();
    if covariate_cols.is_empty() {
        return Err(Error::Config("CSV contains no covariate columns".into()));
    }

    let mut ids = Vec::new();
    let mut z = Vec::new();
    let mut outcome = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let parse = |j: usize| -> Result<f64> {
            record[j].trim().parse::<f64>().map_err(|_| {
                Error::Config(format!(
                    "row {}: column {:?} is not numeric: {:?}",
                    i + 1,
                    headers[j],
                    &record[j]
                ))
            })
        };
        ids.push(match id_col {
            Some(j) => record[j].to_string(),
            None => i.to_string(),
        });
        if let Some(j) = z_col {
            let v = parse(j)?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Config(format!(
                    "row {}: treatment column z must be 0 or 1, got {v}",
                    i + 1
                )));
            }
            z.push(v as u8);
        }
        if let Some(j) = y_col {
            outcome.push(parse(j)?);
        }
        rows.push(
            covariate_cols
                .iter()
                .map(|&j| parse(j))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    let n = rows.len();
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 data rows, got {n}")));
    }

    let mut names: Vec<String> = covariate_cols.iter().map(|&j| headers[j].clone()).collect();
    let mut order: Vec<usize> = (0..names.len()).collect();
    let tier_sizes = match tiers {
        Some(groups) => {
            let mut new_order = Vec::new();
            let mut sizes = Vec::new();
            for group in groups {
                for name in group {
                    let idx = names.iter().position(|c| c == name).ok_or_else(|| {
                        Error::Config(format!("tier column {name:?} not found among covariates"))
                    })?;
                    if new_order.contains(&idx) {
                        return Err(Error::Config(format!(
                            "column {name:?} appears in more than one tier"
                        )));
                    }
                    new_order.push(idx);
                }
                sizes.push(group.len());
            }
            if new_order.len() != names.len() {
                let missing: Vec<&String> = order
                    .iter()
                    .filter(|&&j| !new_order.contains(&j))
                    .map(|&j| &names[j])
                    .collect();
                return Err(Error::Config(format!(
                    "tier lists must cover every covariate column; missing {missing:?}"
                )));
            }
            order = new_order;
            Some(sizes)
        }
        None => None,
    };
    names = order.iter().map(|&j| names[j].clone()).collect();

    let x = DMatrix::from_fn(n, order.len(), |i, j| rows[i][order[j]]);
    let design = match tier_sizes {
        Some(sizes) => DesignMatrix::with_tiers(x, names, sizes)?,
        None => DesignMatrix::new(x, names)?,
    };
    Ok(CsvDesign {
        design,
        ids,
        z: if z.is_empty() { None } else { Some(z) },
        outcome: if outcome.is_empty() {
            None
        } else {
            Some(outcome)
        },
    })
}
