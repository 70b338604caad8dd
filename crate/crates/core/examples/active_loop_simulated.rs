//! Runs the uncertainty-driven loop with a simulated oracle and prints the
//! labeling ratio and validation accuracy after every round.

use alrank::active::{run_loop, LoopConfig, LoopData, SimulatedOracle};
use alrank::data::{group_kfold_split, synth_generate, Dataset, SplitSpec, SynthSpec};
use alrank::model::NetworkConfig;
use alrank::train::TrainConfig;

fn main() {
    let manifest = synth_generate(&SynthSpec::new(2000, vec![0.65, 0.19, 0.14, 0.02], 8, 0.8, 1)).unwrap();
    let fold = group_kfold_split(&manifest, &SplitSpec::default()).unwrap().remove(0);
    let data = LoopData::new(Dataset::from_manifest(&manifest), fold.train, &fold.val, 1).unwrap();
    let config = LoopConfig {
        train: TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() },
        seed: 1,
        ..LoopConfig::default()
    };
    let out = run_loop(&data, NetworkConfig::new(8, &[32, 16]), config, &mut SimulatedOracle::new(&data.dataset)).unwrap();
    for cp in &out.checkpoints {
        println!(
            "round {}: ratio {:.2}, {} pairs, val acc {:.3}",
            cp.round,
            cp.labeling_ratio,
            cp.state.labeled_pairs.len(),
            cp.train.best_val_accuracy.unwrap_or(f64::NAN)
        );
    }
}
