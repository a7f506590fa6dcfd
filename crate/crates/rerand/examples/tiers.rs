//! Tiered rerandomization: covariates grouped by importance, a per-tier
//! balance constraint, and inference that tracks each tier's contribution.

use nalgebra::DMatrix;
use rerand::criteria::{tier_distances, thresholds_from_probability, BalanceCriterion};
use rerand::inference::{confidence_interval, estimate_rho_t};
use rerand::population::{tier_orthogonalize, DesignMatrix};
use rerand::sampler::{default_budget, rerandomize};
use rerand::specialfn::SeededGenerator;

fn main() -> rerand::Result<()> {
    // Tier 1: the covariate the outcome depends on most. Tier 2: two
    // weaker ones. Orthogonalization makes the constraints independent.
    let n = 60;
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => (i as f64 * 0.37).sin() * 3.0,
        1 => (i % 4) as f64,
        _ => (i as f64 * 0.11).cos(),
    });
    let design = DesignMatrix::with_tiers(
        x.clone(),
        vec!["primary".into(), "minor_a".into(), "minor_b".into()],
        vec![1, 2],
    )?;
    let basis = tier_orthogonalize(&design)?;

    // Overall acceptance 0.01 split evenly across tiers: 0.01^(1/2) each.
    let p_a = 0.01;
    let thresholds = thresholds_from_probability(p_a, &basis.tier_sizes)?;
    println!("per-tier thresholds: {thresholds:?}");
    let criterion = BalanceCriterion::remt(basis.clone(), thresholds)?;

    let mut g = SeededGenerator::new(42, 0);
    let outcome = rerandomize(&criterion, &design, n / 2, &mut g, default_budget(p_a))?;
    let z = outcome.assignment;
    println!("accepted after {} draws", outcome.draws_used);
    println!("per-tier distances: {:?}", tier_distances(&basis, &z)?);

    let y: Vec<f64> = (0..n)
        .map(|i| {
            2.0 * x[(i, 0)] + 0.4 * x[(i, 1)] + ((i * 11) % 5) as f64 * 0.5
                + if z.is_treated(i) { 1.0 } else { 0.0 }
        })
        .collect();

    let rho = estimate_rho_t(&y, &z, &design, &basis)?;
    println!("estimated rho^2 by tier (last = residual): {rho:?}");

    let report = confidence_interval(&criterion, &y, &z, &design, 0.05, 500_000, &g)?;
    println!("tau_hat {:.4}, 95% CI [{:.4}, {:.4}]", report.tau_hat, report.ci_lower, report.ci_upper);
    Ok(())
}
