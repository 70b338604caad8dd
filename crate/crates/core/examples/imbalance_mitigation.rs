//! Uncertainty vs random acquisition on an imbalanced pool: the share of the
//! rarest level among acquired samples.

use alrank::active::{run_loop, LoopConfig, LoopData, SimulatedOracle, Strategy};
use alrank::data::{group_kfold_split, synth_generate, Dataset, SplitSpec, SynthSpec};
use alrank::eval::acquired_proportions;
use alrank::model::NetworkConfig;
use alrank::train::TrainConfig;

fn main() {
    let priors = vec![0.65, 0.19, 0.14, 0.02];
    for seed in 1..=3 {
        let manifest = synth_generate(&SynthSpec::new(2000, priors.clone(), 8, 0.8, seed)).unwrap();
        let fold = group_kfold_split(&manifest, &SplitSpec::default()).unwrap().remove(0);
        let data = LoopData::new(Dataset::from_manifest(&manifest), fold.train, &fold.val, seed).unwrap();
        let labels = data.dataset.label_map();
        let mut line = format!("seed {seed}:");
        for strategy in [Strategy::Uncertainty, Strategy::Random] {
            let config = LoopConfig {
                train: TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() },
                seed,
                strategy,
                ..LoopConfig::default()
            };
            let out = run_loop(&data, NetworkConfig::new(8, &[32, 16]), config, &mut SimulatedOracle::new(&data.dataset)).unwrap();
            let last = acquired_proportions(&out.state, &labels, 4).pop().unwrap();
            line += &format!("  {strategy} {:.3}", last.fractions[3]);
        }
        println!("{line}  (prior {})", priors[3]);
    }
}
