//! Runs two loop arms on one fold, evaluates both, and compares their test
//! pair decisions with McNemar's test.

use alrank::active::{run_loop, LoopConfig, LoopData, SimulatedOracle, Strategy};
use alrank::data::{group_kfold_split, synth_generate, Dataset, SplitSpec, SynthSpec};
use alrank::eval::{mcnemar, EvalConfig, RunEvaluation};
use alrank::model::NetworkConfig;
use alrank::train::TrainConfig;

fn main() {
    let manifest = synth_generate(&SynthSpec::new(1500, vec![0.5, 0.25, 0.15, 0.1], 8, 0.8, 4)).unwrap();
    let dataset = Dataset::from_manifest(&manifest);
    let fold = group_kfold_split(&manifest, &SplitSpec::default()).unwrap().remove(0);
    let data = LoopData::new(Dataset::from_manifest(&manifest), fold.train.clone(), &fold.val, 4).unwrap();
    let ev = RunEvaluation::new(&dataset, &fold, EvalConfig::default()).unwrap();

    let mut results = Vec::new();
    for (strategy, iterations) in [(Strategy::Uncertainty, 6), (Strategy::Uncertainty, 0)] {
        let config = LoopConfig {
            iterations,
            train: TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() },
            seed: 4,
            strategy,
            ..LoopConfig::default()
        };
        let out = run_loop(&data, NetworkConfig::new(8, &[32, 16]), config, &mut SimulatedOracle::new(&data.dataset)).unwrap();
        let report = ev.report(&out.checkpoints).unwrap();
        println!(
            "K={iterations}: overall {:.3}, neighboring {:?}",
            report.overall_accuracy,
            report.neighboring_accuracies.iter().map(|(k, v)| format!("{k} {v:.3}")).collect::<Vec<_>>()
        );
        results.push(ev.score_checkpoint(&out.params).unwrap());
    }
    let m = mcnemar(&results[0].overall.correct, &results[1].overall.correct).unwrap();
    println!("McNemar b={} c={} statistic {:.3} p {:.4} ({:?})", m.b, m.c, m.statistic, m.p_value, m.method);
}
