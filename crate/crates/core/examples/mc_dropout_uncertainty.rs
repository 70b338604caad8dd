//! MC-dropout mean and variance for a few inputs, and how the variance
//! shrinks as the dropout probability goes to zero.

use alrank::inference::{predict, trial_scores};
use alrank::model::{forward_mean, init_params, NetworkConfig};

fn main() {
    let x = [0.2, 0.7, 0.4, 0.9];
    for p in [0.5, 0.3, 0.1, 0.0] {
        let cfg = NetworkConfig::new(4, &[32, 16]).with_dropout(p);
        let params = init_params(&cfg, 1).unwrap();
        let pred = predict(&params, &x, 30, 42).unwrap();
        println!(
            "p={p:.1}  mean {:+.4}  deterministic {:+.4}  variance {:.5}",
            pred.mean_score,
            forward_mean(&params, &x).unwrap(),
            pred.variance
        );
    }

    let cfg = NetworkConfig::new(4, &[32, 16]).with_dropout(0.5);
    let params = init_params(&cfg, 1).unwrap();
    let scores = trial_scores(&params, &x, 8, 42).unwrap();
    println!("first trials: {:?}", scores.iter().map(|s| format!("{s:+.3}")).collect::<Vec<_>>());
}
