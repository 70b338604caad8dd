//! Group-level k-fold splitting: no group crosses a train/val/test boundary.

use alrank::data::{group_kfold_split, synth_generate, SplitSpec, SynthSpec};

fn main() {
    let manifest = synth_generate(&SynthSpec::new(500, vec![0.65, 0.19, 0.14, 0.02], 4, 0.8, 9)).unwrap();
    println!("{} samples, class counts {:?}", manifest.samples.len(), manifest.class_counts());
    let folds = group_kfold_split(&manifest, &SplitSpec::default()).unwrap();
    for f in &folds {
        assert!(f.train_groups.is_disjoint(&f.test_groups));
        assert!(f.val_groups.is_disjoint(&f.test_groups));
        println!(
            "fold {}: train {} ({} groups), val {} ({} groups), test {} ({} groups)",
            f.index,
            f.train.len(),
            f.train_groups.len(),
            f.val.len(),
            f.val_groups.len(),
            f.test.len(),
            f.test_groups.len()
        );
    }
}
