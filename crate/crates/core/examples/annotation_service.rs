//! Starts the annotation service on a small synthetic fold and answers the
//! first round from the hidden labels through the in-process session API.
//! Pass `--serve` to keep the HTTP server running afterwards.

use std::sync::{Arc, Mutex};

use alrank::active::{simulated_oracle, LoopConfig, LoopData};
use alrank::data::{group_kfold_split, synth_generate, Dataset, SplitSpec, SynthSpec};
use alrank::model::NetworkConfig;
use alrank::service::{bind, local_addr, router, serve, AppState, Session};
use alrank::train::TrainConfig;

fn main() {
    let manifest = synth_generate(&SynthSpec::new(300, vec![0.4, 0.3, 0.2, 0.1], 4, 0.5, 2)).unwrap();
    let fold = group_kfold_split(&manifest, &SplitSpec::default()).unwrap().remove(0);
    let data = LoopData::new(Dataset::from_manifest(&manifest), fold.train, &fold.val, 2).unwrap();
    let labels = data.dataset.label_map();
    let dir = std::env::temp_dir().join(format!("alrank-session-{}", std::process::id()));
    let config = LoopConfig { trials: 10, train: TrainConfig { epochs: 20, learning_rate: 1e-2, ..TrainConfig::default() }, ..LoopConfig::default() };
    let mut session = Session::create(&dir, None, data, NetworkConfig::new(4, &[16, 8]), config).unwrap();
    println!("session in {}: {:?}", dir.display(), session.status());

    for p in session.next_pending(usize::MAX) {
        let label = simulated_oracle(labels[&p.left.id], labels[&p.right.id]).value();
        session.submit(&p.pair_id, label, Some("example".into())).unwrap();
    }
    println!("after answering round 0: {:?}", session.status());
    println!("advanced: {:?}", session.advance().unwrap());

    if std::env::args().any(|a| a == "--serve") {
        let state = AppState { session: Arc::new(Mutex::new(session)), token: None };
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let listener = bind("127.0.0.1:0").await.unwrap();
            println!("listening on {}", local_addr(&listener).unwrap());
            serve(listener, router(state, None)).await.unwrap();
        });
    } else {
        std::fs::remove_dir_all(&dir).ok();
    }
}
