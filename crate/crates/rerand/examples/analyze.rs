//! Post-experiment analysis: a confidence interval that accounts for the
//! rerandomization used at design time, next to the classical baseline.

use nalgebra::DMatrix;
use rerand::criteria::BalanceCriterion;
use rerand::inference::confidence_interval;
use rerand::population::DesignMatrix;
use rerand::sampler::{default_budget, rerandomize};
use rerand::specialfn::SeededGenerator;

fn main() -> rerand::Result<()> {
    let n = 40;
    let x = DMatrix::from_fn(n, 2, |i, j| {
        if j == 0 { (i as f64 * 1.3).cos() * 2.0 } else { (i % 5) as f64 }
    });
    let design = DesignMatrix::new(x.clone(), vec!["x1".into(), "x2".into()])?;

    // The design was rerandomized, so analysis must condition on that.
    let p_a = 0.01;
    let criterion = BalanceCriterion::rem_from_probability(p_a, 2)?;
    let mut g = SeededGenerator::new(7, 0);
    let z = rerandomize(&criterion, &design, n / 2, &mut g, default_budget(p_a))?.assignment;

    // Outcomes correlated with the covariates plus a treatment effect.
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let base = 1.5 * x[(i, 0)] + 0.8 * x[(i, 1)] + ((i * 13) % 7) as f64 * 0.3;
            base + if z.is_treated(i) { 2.0 } else { 0.0 }
        })
        .collect();

    let report = confidence_interval(&criterion, &y, &z, &design, 0.05, 500_000, &g)?;
    println!("tau_hat      {:.4}", report.tau_hat);
    println!("R2_hat       {:.4}", report.r2_hat);
    println!("95% CI       [{:.4}, {:.4}]", report.ci_lower, report.ci_upper);
    println!(
        "baseline CI  [{:.4}, {:.4}]",
        report.neyman_ci_lower, report.neyman_ci_upper
    );
    println!(
        "length ratio {:.3}",
        (report.ci_upper - report.ci_lower)
            / (report.neyman_ci_upper - report.neyman_ci_lower)
    );
    Ok(())
}
