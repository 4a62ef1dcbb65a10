//! Plain supervised training and k-NN, scored on the same meta-test query sets
//! as the meta-learner.
//!
//!     cargo run --release --example baselines -- [epochs] [seed]

use metafap::baselines::{evaluate_knn, evaluate_plain, train_plain, BaselineConfig};
use metafap::data::{generate_dataset, preset_split, SplitPools, DEFAULT_DATASET_SIZE};
use metafap::metatrain::MetaConfig;
use metafap::objective::Metrics;
use metafap::OracleConfig;

fn show(label: &str, m: &Metrics) {
    println!("{label:>24}  mse {:.5}  mae {:.5}  cc {:.2}%", m.mse, m.mae, m.cc * 100.0);
}

fn main() -> metafap::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(50, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let meta = MetaConfig {
        seed,
        ..MetaConfig::default()
    };
    let data = generate_dataset(DEFAULT_DATASET_SIZE, &OracleConfig::default(), seed)?;
    let pools = SplitPools::build(&data, &preset_split("primary")?)?;

    let cfg = BaselineConfig {
        epochs,
        ..BaselineConfig::default()
    };
    let (ck, report) = train_plain(&pools, &meta, &cfg)?;
    if let Some(m) = report.in_distribution {
        show("plain, in-distribution", &m);
    }
    show("plain, 22-25 GHz", &evaluate_plain(&ck, &pools, &meta)?.metrics);
    for k in [1, 5, 20] {
        show(&format!("{k}-NN, 22-25 GHz"), &evaluate_knn(&pools, &meta, k)?.metrics);
    }
    Ok(())
}
