//! Compares the analytic pair-loss gradient with central differences.

use alrank::loss::{batch_loss, batch_loss_grad, BatchPair, PairBatch, PairMasks, RelativeLabel};
use alrank::model::{init_params, sample_mask, NetworkConfig};

fn main() {
    let cfg = NetworkConfig::new(3, &[6, 4]).with_dropout(0.3).with_weight_decay(1e-4);
    let mut params = init_params(&cfg, 7).unwrap();
    // move off zero biases so no unit sits on the relu kink
    let shifted: Vec<f64> = params.flatten().iter().enumerate().map(|(k, v)| v + 0.01 * (k % 7) as f64).collect();
    params.set_flat(&shifted);

    let xs = [[0.1, 0.8, 0.3], [0.7, 0.2, 0.9], [0.5, 0.5, 0.1], [0.9, 0.6, 0.4]];
    let batch = PairBatch::new(vec![
        BatchPair { left: &xs[0], right: &xs[1], label: RelativeLabel::Lower },
        BatchPair { left: &xs[2], right: &xs[3], label: RelativeLabel::Tie },
        BatchPair { left: &xs[3], right: &xs[0], label: RelativeLabel::Higher },
    ])
    .unwrap();
    let masks: Vec<PairMasks> = (0..3)
        .map(|k| PairMasks { left: sample_mask(&cfg, 2 * k), right: sample_mask(&cfg, 2 * k + 1) })
        .collect();

    let lambda = cfg.weight_decay;
    let analytic = batch_loss_grad(&params, &batch, &masks, lambda).unwrap().flatten();
    let base = params.flatten();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut v = base.clone();
        v[k] += h;
        params.set_flat(&v);
        let up = batch_loss(&params, &batch, &masks, lambda).unwrap();
        v[k] -= 2.0 * h;
        params.set_flat(&v);
        let down = batch_loss(&params, &batch, &masks, lambda).unwrap();
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6));
    }
    println!("{} parameters, max relative error {worst:.2e}", base.len());
}
