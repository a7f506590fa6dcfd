//! The non-Gaussian asymptotic law of the difference-in-means estimator
//! under rerandomization: quantiles, variance reduction, and how both move
//! with the acceptance probability.

use rerand::asymptotics::{
    asymptotic_variance, build_distribution, priasv, v_coeff, AsymptoticModel,
};
use rerand::criteria::thresholds_from_probability;
use rerand::specialfn::SeededGenerator;

fn main() -> rerand::Result<()> {
    let (k, r2) = (3u32, 0.5);
    let g = SeededGenerator::new(1, 0);

    println!("K = {k}, R^2 = {r2}");
    println!("{:>8} {:>10} {:>10} {:>10} {:>10}", "p_a", "a", "v_K_a", "nu_0.975", "priasv");
    for p_a in [1.0, 0.1, 0.01, 0.001] {
        let a = thresholds_from_probability(p_a, &[k as usize])?[0];
        let model = AsymptoticModel::rem(1.0, r2, k, a)?;
        let dist = build_distribution(&model, 1_000_000, &g)?;
        println!(
            "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            p_a,
            a,
            v_coeff(k, a)?,
            dist.quantile(0.975)?,
            priasv(&model)?
        );
    }

    // The Monte Carlo variance agrees with the closed form.
    let a = thresholds_from_probability(0.001, &[k as usize])?[0];
    let model = AsymptoticModel::rem(1.0, r2, k, a)?;
    let dist = build_distribution(&model, 2_000_000, &g)?;
    println!(
        "variance: closed form {:.5}, Monte Carlo {:.5}",
        asymptotic_variance(&model)?,
        dist.variance()
    );
    Ok(())
}
