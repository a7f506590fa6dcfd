//! Exact enumeration on a small instance: the true acceptance probability
//! and conditional moments of the covariate difference-in-means, checked
//! against the rejection sampler.

use nalgebra::DMatrix;
use rerand::criteria::BalanceCriterion;
use rerand::population::DesignMatrix;
use rerand::sampler::{enumerate_exact, rerandomize};
use rerand::specialfn::{chi2_quantile, SeededGenerator};

fn main() -> rerand::Result<()> {
    let n = 14;
    let x = DMatrix::from_fn(n, 1, |i, _| ((i * i) % 11) as f64);
    let design = DesignMatrix::new(x, vec!["x".into()])?;

    let a = chi2_quantile(0.3, 1)?;
    let criterion = BalanceCriterion::rem(a)?;
    let report = enumerate_exact(&criterion, &design, n / 2, None)?;
    println!(
        "{} of {} assignments accepted: exact probability {:.6}",
        report.accepted_count, report.total, report.exact_acceptance_prob
    );
    println!("conditional mean of tau_X: {:.2e}", report.cond_mean[0]);
    println!("conditional variance of tau_X: {:.6}", report.cond_cov[(0, 0)]);

    // The rejection sampler's empirical acceptance agrees with the exact
    // probability.
    let mut g = SeededGenerator::new(99, 0);
    let mut accepted_draws = 0u64;
    let trials = 200;
    let mut total_draws = 0u64;
    for _ in 0..trials {
        let out = rerandomize(&criterion, &design, n / 2, &mut g, 1_000_000)?;
        accepted_draws += 1;
        total_draws += out.draws_used;
    }
    println!(
        "rejection sampler: {:.6} empirical vs {:.6} exact",
        accepted_draws as f64 / total_draws as f64,
        report.exact_acceptance_prob
    );
    Ok(())
}
