//! Prints the sampled conditional entropy and posterior estimates over a grid
//! of payment values for a config.
//!
//! ```text
//! cargo run --release -p incentive-core --example payment_sweep -- fire_rescue 0 3 0.1
//! ```

use incentive_core::gridworld::{build_problem, bundled_config, load_config};
use incentive_core::hmm::sample_observations_for_type;
use incentive_core::incentive::{total_gradient, ObjectiveConfig};
use incentive_core::inference::posterior_estimator;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = args.first().map(String::as_str).unwrap_or("fire_rescue");
    let text = match bundled_config(name) {
        Some(t) => t.to_string(),
        None => std::fs::read_to_string(name)?,
    };
    let lo: f64 = args.get(1).map_or(Ok(0.0), |s| s.parse())?;
    let hi: f64 = args.get(2).map_or(Ok(3.0), |s| s.parse())?;
    let step: f64 = args.get(3).map_or(Ok(0.25), |s| s.parse())?;

    let problem = build_problem(&load_config(&text)?)?;
    let config = ObjectiveConfig::default();
    println!("x,H,se,dJ,P1,P2");
    let mut x = lo;
    while x <= hi + 1e-12 {
        let payment = problem.uniform_payment(x)?;
        let tg = total_gradient(&payment, &problem, &config)?;
        let aug = problem.respond(&payment)?.aug;
        let last = problem.num_types() - 1;
        let samples = sample_observations_for_type(&aug, last, 2000, config.horizon, 1)?;
        let est = posterior_estimator(&aug, &samples)?;
        println!(
            "{x:.3},{:.4},{:.4},{:.4},{:.3},{:.3}",
            tg.value.entropy.value,
            tg.value.entropy.std_error.unwrap_or(0.0),
            tg.gradient[0],
            est[0],
            est[last]
        );
        x += step;
    }
    Ok(())
}
