//! Command-line front door: design-time assignment, post-experiment
//! analysis, distribution tables, simulation studies, and exact
//! enumeration. Every subcommand is deterministic given (config, seed) and
//! accepts a JSON config file with flag overrides (flags win).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::asymptotics::{
    build_distribution, density_l, v_coeff, AsymptoticModel, TierParam,
};
use crate::criteria::{thresholds_from_probability, BalanceCriterion};
use crate::error::{Error, Result};
use crate::inference::{confidence_interval, AnalysisReport};
use crate::population::{read_design_csv, tier_orthogonalize, Assignment, CsvDesign};
use crate::sampler::{default_budget, enumerate_exact, rerandomize};
use crate::simulate::{run_study, StudyConfig};
use crate::specialfn::{chi2_cdf, SeededGenerator};

/// Everything a subcommand can be told, from file and flags combined.
/// Unknown keys in the config file are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Inputs.
    pub covariates: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub outcome: Option<String>,
    pub n1: Option<usize>,
    // Criterion.
    pub criterion: Option<String>,
    pub p_a: Option<f64>,
    pub thresholds: Option<Vec<f64>>,
    pub tiers: Option<Vec<Vec<String>>>,
    // Shared knobs.
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub mc_samples: Option<usize>,
    pub max_draws: Option<u64>,
    pub out: Option<PathBuf>,
    // Distribution tables.
    pub k: Option<usize>,
    pub r2: Option<f64>,
    pub v_tt: Option<f64>,
    pub rho2: Option<Vec<f64>>,
    pub tier_sizes: Option<Vec<usize>>,
    pub probabilities: Option<Vec<f64>>,
    pub density_grid: Option<usize>,
    // Simulation studies.
    pub study: Option<StudyConfig>,
}

#[derive(Debug, Parser)]
#[command(name = "rerand", version, about = "Rerandomization design and inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Draw one accepted treatment assignment for a covariate CSV.
    Assign(CommonArgs),
    /// Analyze an experiment CSV (covariates, z, outcome) with a CI that
    /// accounts for the rerandomization used.
    Analyze(CommonArgs),
    /// Emit quantile and density tables of the asymptotic law.
    Dist(CommonArgs),
    /// Run a replication study from a JSON study config.
    Simulate(CommonArgs),
    /// Exactly enumerate all assignments on a small instance.
    Enumerate(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Output path prefix; machine artifacts go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Covariate CSV (assign / enumerate).
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Experiment CSV with covariates, z, and the outcome (analyze).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Outcome column name (analyze); default "y".
    #[arg(long)]
    outcome: Option<String>,
    /// Treated-arm size (assign / enumerate).
    #[arg(long)]
    n1: Option<usize>,

    /// Criterion kind: cre, rem, or remt (inferred from tiers if absent).
    #[arg(long)]
    criterion: Option<String>,
    /// Target acceptance probability.
    #[arg(long = "p-a")]
    p_a: Option<f64>,
    /// Explicit threshold(s), comma-separated (one per tier).
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Tier groups: semicolon-separated groups of comma-separated column
    /// names, e.g. "age,score;region".
    #[arg(long)]
    tiers: Option<String>,
    /// Rejection-sampling budget.
    #[arg(long)]
    max_draws: Option<u64>,

    /// Covariate dimension (dist).
    #[arg(long)]
    k: Option<usize>,
    /// Squared multiple correlation (dist).
    #[arg(long)]
    r2: Option<f64>,
    /// Variance scale V_tt (dist); default 1.
    #[arg(long = "v-tt")]
    v_tt: Option<f64>,
    /// Per-tier squared correlations, comma-separated (dist, tiered).
    #[arg(long, value_delimiter = ',')]
    rho2: Option<Vec<f64>>,
    /// Tier sizes, comma-separated (dist, tiered).
    #[arg(long = "tier-sizes", value_delimiter = ',')]
    tier_sizes: Option<Vec<usize>>,
    /// Quantile probabilities for the table, comma-separated.
    #[arg(long, value_delimiter = ',')]
    probabilities: Option<Vec<f64>>,
    /// Number of density grid points (dist); 0 disables the density table.
    #[arg(long = "density-grid")]
    density_grid: Option<usize>,
}

fn merge(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("config file {path:?}: {e}")))?,
        None => RunConfig::default(),
    };
    macro_rules! take {
        ($field:ident) => {
            if args.$field.is_some() {
                cfg.$field = args.$field.clone();
            }
        };
    }
    take!(seed);
    take!(alpha);
    take!(out);
    take!(covariates);
    take!(data);
    take!(outcome);
    take!(n1);
    take!(criterion);
    take!(p_a);
    take!(thresholds);
    take!(max_draws);
    take!(k);
    take!(r2);
    take!(v_tt);
    take!(rho2);
    take!(tier_sizes);
    take!(probabilities);
    take!(density_grid);
    if args.mc_samples.is_some() {
        cfg.mc_samples = args.mc_samples;
    }
    if let Some(groups) = &args.tiers {
        cfg.tiers = Some(
            groups.split(';')
                .map(|group| group.split(',').map(|s| s.trim().to_string()).collect())
                .collect(),
        );
    }
    Ok(cfg)
}

/// Parses arguments from the process environment and dispatches.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Dispatches on an explicit argument list (testable entry point).
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (name, common) = match &cli.cmd {
        Cmd::Assign(c) => ("assign", c),
        Cmd::Analyze(c) => ("analyze", c),
        Cmd::Dist(c) => ("dist", c),
        Cmd::Simulate(c) => ("simulate", c),
        Cmd::Enumerate(c) => ("enumerate", c),
    };
    let cfg = match merge(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match name {
        "assign" => cmd_assign(&cfg),
        "analyze" => cmd_analyze(&cfg),
        "dist" => cmd_dist(&cfg),
        "simulate" => cmd_simulate(&cfg),
        "enumerate" => cmd_enumerate(&cfg),
        _ => unreachable!(),
    }
}

fn fail(e: &Error) -> i32 {
    eprintln!("error: {e}");
    match e {
        Error::BudgetExhausted { .. } => 2,
        _ => 1,
    }
}

// Builds the criterion from config against a parsed design; returns the
// criterion and its asymptotic acceptance probability (for budgets).
fn build_criterion(cfg: &RunConfig, csv: &CsvDesign) -> Result<(BalanceCriterion, f64)> {
    let design = &csv.design;
    let kind = cfg
        .criterion
        .clone()
        .unwrap_or_else(|| if cfg.tiers.is_some() { "remt".into() } else { "rem".into() });
    match kind.as_str() {
        "cre" => Ok((BalanceCriterion::cre(), 1.0)),
        "rem" => {
            let a = match (&cfg.thresholds, cfg.p_a) {
                (Some(t), _) if t.len() == 1 => t[0],
                (Some(t), _) => {
                    return Err(Error::Config(format!(
                        "rem takes one threshold, got {}",
                        t.len()
                    )))
                }
                (None, Some(p_a)) => thresholds_from_probability(p_a, &[design.k()])?[0],
                (None, None) => {
                    return Err(Error::Config("rem needs p_a or thresholds".into()))
                }
            };
            let p = chi2_cdf(a, design.k() as u32)?;
            Ok((BalanceCriterion::rem(a)?, p))
        }
        "remt" => {
            let basis = tier_orthogonalize(design)?;
            let thresholds = match (&cfg.thresholds, cfg.p_a) {
                (Some(t), _) => t.clone(),
                (None, Some(p_a)) => thresholds_from_probability(p_a, &basis.tier_sizes)?,
                (None, None) => {
                    return Err(Error::Config("remt needs p_a or thresholds".into()))
                }
            };
            let mut p = 1.0;
            for (t, &a) in thresholds.iter().enumerate() {
                p *= chi2_cdf(a, basis.tier_sizes[t] as u32)?;
            }
            Ok((BalanceCriterion::remt(basis, thresholds)?, p))
        }
        other => Err(Error::Config(format!(
            "unknown criterion {other:?} (expected cre, rem, or remt)"
        ))),
    }
}

fn read_csv_file(path: &Path, outcome: Option<&str>, cfg: &RunConfig) -> Result<CsvDesign> {
    let file = fs::File::open(path)?;
    read_design_csv(file, outcome, cfg.tiers.as_deref())
}

fn write_artifact(out: &Option<PathBuf>, suffix: &str, bytes: &[u8]) -> Result<()> {
    match out {
        Some(prefix) => {
            let mut path = prefix.as_os_str().to_owned();
            path.push(suffix);
            fs::write(PathBuf::from(path), bytes)?;
        }
        None => {
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

fn to_json_bytes(value: &serde_json::Value) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serialization");
    bytes.push(b'\n');
    bytes
}

/// Draws one accepted assignment and writes it as a CSV (id, z) plus a
/// diagnostics JSON. Exit 2 with the acceptance-rate diagnostic when the
/// rejection budget runs out.
pub fn cmd_assign(cfg: &RunConfig) -> i32 {
    match assign_inner(cfg) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn assign_inner(cfg: &RunConfig) -> Result<i32> {
    let path = cfg
        .covariates
        .as_ref()
        .ok_or_else(|| Error::Config("assign needs --covariates".into()))?;
    let csv = read_csv_file(path, None, cfg)?;
    let n1 = cfg
        .n1
        .ok_or_else(|| Error::Config("assign needs --n1".into()))?;
    let (criterion, p_a) = build_criterion(cfg, &csv)?;
    let budget = cfg.max_draws.unwrap_or_else(|| default_budget(p_a));
    let mut g = SeededGenerator::new(cfg.seed.unwrap_or(0), 0);

    match rerandomize(&criterion, &csv.design, n1, &mut g, budget) {
        Ok(outcome) => {
            let mut csv_out = String::from("id,z\n");
            for (i, id) in csv.ids.iter().enumerate() {
                csv_out.push_str(&format!("{id},{}\n", outcome.assignment.z()[i]));
            }
            write_artifact(&cfg.out, "_assignment.csv", csv_out.as_bytes())?;
            let diag = json!({
                "accepted": true,
                "m": outcome.diagnostics.m,
                "m_t": outcome.diagnostics.m_t,
                "draws_used": outcome.draws_used,
                "empirical_acceptance": outcome.empirical_acceptance,
                "target_acceptance": p_a,
                "n1": n1,
                "seed": cfg.seed.unwrap_or(0),
            });
            write_artifact(&cfg.out, "_diagnostics.json", &to_json_bytes(&diag))?;
            eprintln!(
                "accepted after {} draws (acceptance {:.4})",
                outcome.draws_used, outcome.empirical_acceptance
            );
            Ok(0)
        }
        Err(Error::BudgetExhausted {
            draws,
            observed_acceptance,
        }) => {
            let diag = json!({
                "accepted": false,
                "draws_used": draws,
                "empirical_acceptance": observed_acceptance,
                "target_acceptance": p_a,
            });
            write_artifact(&cfg.out, "_diagnostics.json", &to_json_bytes(&diag))?;
            Err(Error::BudgetExhausted {
                draws,
                observed_acceptance,
            })
        }
        Err(e) => Err(e),
    }
}

/// Analyzes an experiment CSV and emits the JSON report plus an aligned
/// human-readable table (4 significant digits).
pub fn cmd_analyze(cfg: &RunConfig) -> i32 {
    match analyze_inner(cfg) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn analyze_inner(cfg: &RunConfig) -> Result<i32> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("analyze needs --data".into()))?;
    let outcome_col = cfg.outcome.clone().unwrap_or_else(|| "y".into());
    let csv = read_csv_file(path, Some(&outcome_col), cfg)?;
    let y = csv
        .outcome
        .clone()
        .ok_or_else(|| Error::Config(format!("outcome column {outcome_col:?} missing")))?;
    let zvec = csv
        .z
        .clone()
        .ok_or_else(|| Error::Config("analyze needs a treatment column named z".into()))?;
    let z = Assignment::new(zvec)?;
    let (criterion, _) = build_criterion(cfg, &csv)?;
    let alpha = cfg.alpha.unwrap_or(0.05);
    let n_mc = cfg.mc_samples.unwrap_or(200_000);
    let g = SeededGenerator::new(cfg.seed.unwrap_or(0), 0);
    let report = confidence_interval(&criterion, &y, &z, &csv.design, alpha, n_mc, &g)?;

    print_analysis_table(&report);
    let value = serde_json::to_value(&report).expect("report serialization");
    write_artifact(&cfg.out, "_analysis.json", &to_json_bytes(&value))?;
    Ok(0)
}

fn print_analysis_table(r: &AnalysisReport) {
    println!("method            {}", r.method);
    println!("n / n1 / n0 / K   {} / {} / {} / {}", r.n, r.n1, r.n0, r.k);
    println!("tau_hat           {:.4}", r.tau_hat);
    println!("V_tt_hat          {:.4}", r.v_tt_hat);
    println!("R2_hat            {:.4}", r.r2_hat);
    if !r.rho2_hat.is_empty() {
        let parts: Vec<String> = r.rho2_hat.iter().map(|v| format!("{v:.4}")).collect();
        println!("rho2_hat          {}", parts.join(", "));
    }
    println!(
        "{:.0}% CI            [{:.4}, {:.4}]",
        100.0 * (1.0 - r.alpha),
        r.ci_lower,
        r.ci_upper
    );
    println!(
        "baseline CI       [{:.4}, {:.4}]",
        r.neyman_ci_lower, r.neyman_ci_upper
    );
}

/// Emits the quantile table (and optionally a density grid) of the
/// asymptotic law as CSV, plus a JSON summary.
pub fn cmd_dist(cfg: &RunConfig) -> i32 {
    match dist_inner(cfg) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn dist_inner(cfg: &RunConfig) -> Result<i32> {
    let v_tt = cfg.v_tt.unwrap_or(1.0);
    let n_mc = cfg.mc_samples.unwrap_or(1_000_000);
    let g = SeededGenerator::new(cfg.seed.unwrap_or(0), 0);
    let probs = cfg
        .probabilities
        .clone()
        .unwrap_or_else(|| vec![0.5, 0.8, 0.9, 0.95, 0.975, 0.99]);

    let model = match (&cfg.rho2, &cfg.tier_sizes) {
        (Some(rho2), Some(sizes)) => {
            if rho2.len() != sizes.len() {
                return Err(Error::Config("rho2 and tier_sizes lengths differ".into()));
            }
            let thresholds = match (&cfg.thresholds, cfg.p_a) {
                (Some(t), _) => t.clone(),
                (None, Some(p_a)) => thresholds_from_probability(p_a, sizes)?,
                (None, None) => return Err(Error::Config("dist needs p_a or thresholds".into())),
            };
            let tiers: Vec<TierParam> = rho2
                .iter()
                .zip(sizes)
                .zip(&thresholds)
                .map(|((&rho2, &k), &a)| TierParam { rho2, k: k as u32, a })
                .collect();
            let resid = 1.0 - rho2.iter().sum::<f64>();
            AsymptoticModel::remt(v_tt, tiers, resid)?
        }
        _ => {
            let k = cfg.k.ok_or_else(|| Error::Config("dist needs --k".into()))?;
            let r2 = cfg.r2.unwrap_or(0.0);
            let a = match (&cfg.thresholds, cfg.p_a) {
                (Some(t), _) if t.len() == 1 => t[0],
                (None, Some(p_a)) => thresholds_from_probability(p_a, &[k])?[0],
                _ => return Err(Error::Config("dist needs p_a or one threshold".into())),
            };
            AsymptoticModel::rem(v_tt, r2, k as u32, a)?
        }
    };

    let dist = build_distribution(&model, n_mc, &g)?;
    let mut table = String::from("probability,quantile,mc_se\n");
    for &p in &probs {
        table.push_str(&format!(
            "{p},{},{}\n",
            dist.quantile(p)?,
            dist.quantile_se(p)
        ));
    }
    write_artifact(&cfg.out, "_quantiles.csv", table.as_bytes())?;

    let grid_points = cfg.density_grid.unwrap_or(0);
    if grid_points > 0 {
        if let AsymptoticModel::Rem { k, a, .. } = &model {
            // Density of the constrained coordinate L on its support.
            let root = a.sqrt().min(6.0);
            let mut density = String::from("x,density\n");
            for i in 0..grid_points {
                let x = -root + 2.0 * root * i as f64 / (grid_points - 1) as f64;
                density.push_str(&format!("{x},{}\n", density_l(x, *k, *a)));
            }
            write_artifact(&cfg.out, "_density.csv", density.as_bytes())?;
        }
    }

    let summary = json!({
        "v_tt": v_tt,
        "variance_mc": dist.variance(),
        "acceptance_probability": model.acceptance_probability(),
        "v_coeff": match &model {
            AsymptoticModel::Rem { k, a, .. } => Some(v_coeff(*k, *a)?),
            _ => None,
        },
        "n_mc": n_mc,
        "seed": cfg.seed.unwrap_or(0),
    });
    write_artifact(&cfg.out, "_summary.json", &to_json_bytes(&summary))?;
    Ok(0)
}

/// Runs a replication study from the `study` block of the config file and
/// writes the report JSON plus a tidy per-replication CSV. Exit 2 when the
/// study aborted on budget exhaustion.
pub fn cmd_simulate(cfg: &RunConfig) -> i32 {
    match simulate_inner(cfg) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn simulate_inner(cfg: &RunConfig) -> Result<i32> {
    let mut study: StudyConfig = cfg
        .study
        .clone()
        .ok_or_else(|| Error::Config("simulate needs a config file with a \"study\" block".into()))?;
    if let Some(seed) = cfg.seed {
        study.seed = seed;
    }
    if let Some(alpha) = cfg.alpha {
        study.alpha = alpha;
    }
    if let Some(n_mc) = cfg.mc_samples {
        study.n_mc = n_mc;
    }
    if let Some(max_draws) = cfg.max_draws {
        study.max_draws = Some(max_draws);
    }
    let report = run_study(&study)?;

    let mut rows = String::from(
        "rep,tau_hat,tau_hat_cre,ci_lower,ci_upper,neyman_lower,neyman_upper,covered,covered_neyman,r2_hat,draws_used\n",
    );
    for r in &report.rows {
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.rep,
            r.tau_hat,
            r.tau_hat_cre,
            r.ci_lower,
            r.ci_upper,
            r.neyman_lower,
            r.neyman_upper,
            u8::from(r.covered),
            u8::from(r.covered_neyman),
            r.r2_hat,
            r.draws_used
        ));
    }
    write_artifact(&cfg.out, "_replications.csv", rows.as_bytes())?;
    let value = serde_json::to_value(&report).expect("report serialization");
    write_artifact(&cfg.out, "_report.json", &to_json_bytes(&value))?;
    eprintln!(
        "completed {}/{} replications; coverage {:.4} vs baseline {:.4}",
        report.replications_completed,
        report.replications_requested,
        report.coverage,
        report.coverage_neyman
    );
    Ok(if report.aborted { 2 } else { 0 })
}

/// Exactly enumerates every size-n1 assignment of a small instance and
/// writes the acceptance summary as JSON.
pub fn cmd_enumerate(cfg: &RunConfig) -> i32 {
    match enumerate_inner(cfg) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn enumerate_inner(cfg: &RunConfig) -> Result<i32> {
    let path = cfg
        .covariates
        .as_ref()
        .ok_or_else(|| Error::Config("enumerate needs --covariates".into()))?;
    let csv = read_csv_file(path, None, cfg)?;
    let n1 = cfg
        .n1
        .ok_or_else(|| Error::Config("enumerate needs --n1".into()))?;
    let (criterion, _) = build_criterion(cfg, &csv)?;
    let report = enumerate_exact(&criterion, &csv.design, n1, None)?;
    let value = json!({
        "total": report.total,
        "accepted_count": report.accepted_count,
        "exact_acceptance_prob": report.exact_acceptance_prob,
        "cond_mean": report.cond_mean.as_slice(),
        "cond_cov": (0..report.cond_cov.nrows())
            .map(|i| report.cond_cov.row(i).iter().copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
    });
    write_artifact(&cfg.out, "_enumeration.json", &to_json_bytes(&value))?;
    eprintln!(
        "{} of {} assignments accepted (probability {:.4})",
        report.accepted_count, report.total, report.exact_acceptance_prob
    );
    Ok(0)
}
