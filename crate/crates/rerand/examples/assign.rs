//! Design-time workflow: draw an accepted assignment for a small trial
//! under a Mahalanobis balance constraint and inspect the diagnostics.

use nalgebra::DMatrix;
use rerand::criteria::BalanceCriterion;
use rerand::population::DesignMatrix;
use rerand::sampler::{default_budget, rerandomize};
use rerand::specialfn::SeededGenerator;

fn main() -> rerand::Result<()> {
    // 24 units, two covariates: a baseline score and an age-like column.
    let n = 24;
    let x = DMatrix::from_fn(n, 2, |i, j| match j {
        0 => (i as f64 * 0.7).sin() * 10.0 + 50.0,
        _ => 20.0 + (i % 7) as f64 * 5.0,
    });
    let design = DesignMatrix::new(x, vec!["score".into(), "age".into()])?;

    let p_a = 0.05;
    let criterion = BalanceCriterion::rem_from_probability(p_a, design.k())?;
    let mut g = SeededGenerator::new(20260824, 0);
    let outcome = rerandomize(&criterion, &design, n / 2, &mut g, default_budget(p_a))?;

    println!("accepted after {} draws", outcome.draws_used);
    println!("empirical acceptance rate: {:.4}", outcome.empirical_acceptance);
    println!("Mahalanobis distance of winner: {:.4}", outcome.diagnostics.m);
    println!("treated units: {:?}", outcome.assignment.z());

    // Compare with the balance of a plain randomization draw.
    let unconstrained = rerandomize(&BalanceCriterion::cre(), &design, n / 2, &mut g, 1)?;
    println!(
        "unconstrained draw distance: {:.4}",
        rerand::criteria::mahalanobis(&design, &unconstrained.assignment)
    );
    Ok(())
}
