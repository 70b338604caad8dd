//! Trains a scorer from simulated relative labels on synthetic data and
//! reports held-out pair accuracy.

use alrank::active::{make_pairs, simulated_oracle, LoopData};
use alrank::data::{group_kfold_split, synth_generate, Dataset, SplitSpec, SynthSpec};
use alrank::eval::TestSuite;
use alrank::model::{forward_mean, init_params, NetworkConfig};
use alrank::train::{train, IndexedPair, TrainConfig};

fn main() {
    let manifest = synth_generate(&SynthSpec::new(1200, vec![0.4, 0.3, 0.2, 0.1], 8, 0.6, 3)).unwrap();
    let fold = group_kfold_split(&manifest, &SplitSpec::default()).unwrap().remove(0);
    let data = LoopData::new(Dataset::from_manifest(&manifest), fold.train.clone(), &fold.val, 3).unwrap();
    let ds = &data.dataset;

    let pairs: Vec<IndexedPair> = make_pairs(&data.pool, 3)
        .unwrap()
        .into_iter()
        .map(|q| {
            let (i, j) = (ds.index_of(&q.i).unwrap(), ds.index_of(&q.j).unwrap());
            IndexedPair { left: i, right: j, label: simulated_oracle(ds.label(i), ds.label(j)) }
        })
        .collect();

    let cfg = NetworkConfig::new(8, &[32, 16]);
    let tc = TrainConfig { learning_rate: 1e-3, seed: 3, ..TrainConfig::default() };
    let (params, report) = train(init_params(&cfg, 3).unwrap(), ds, &pairs, &data.validation, &tc).unwrap();
    println!(
        "{} pairs, {} epochs (best {}), validation accuracy {:.3}",
        pairs.len(),
        report.epochs_run,
        report.best_epoch,
        report.best_val_accuracy.unwrap_or(f64::NAN)
    );

    let test = ds.labeled(&fold.test);
    let suite = TestSuite::build(&test, ds.num_levels, 0).unwrap();
    let scores: std::collections::HashMap<String, f64> =
        test.iter().map(|(id, _)| (id.clone(), forward_mean(&params, ds.features_of(id).unwrap()).unwrap())).collect();
    let res = suite.evaluate(&scores).unwrap();
    println!("overall {:.3}", res.overall.accuracy);
    for (bucket, acc) in &res.neighboring {
        println!("  {bucket}: {:.3}", acc.accuracy);
    }
}
