//! Adapts one meta-trained initialization with growing support sets.
//!
//!     cargo run --release --example support_sweep -- [epochs] [seed]

use metafap::data::{generate_dataset, preset_split, SplitPools, DEFAULT_DATASET_SIZE};
use metafap::metatrain::{meta_evaluate, meta_train, MetaConfig};
use metafap::OracleConfig;

fn main() -> metafap::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let cfg = MetaConfig {
        epochs,
        seed,
        ..MetaConfig::default()
    };
    let data = generate_dataset(DEFAULT_DATASET_SIZE, &OracleConfig::default(), seed)?;
    let pools = SplitPools::build(&data, &preset_split("primary")?)?;
    let (ck, _) = meta_train(&cfg, &pools)?;

    let zero_shot = meta_evaluate(&ck, &pools.test, &MetaConfig { inner_lr: 0.0, ..cfg.clone() })?;
    println!("{:>10}  mse {:.5}  cc {:.2}%", "no adapt", zero_shot.metrics.mse, zero_shot.metrics.cc * 100.0);
    for n_support in [64, 128, 512, 1024] {
        let rep = meta_evaluate(&ck, &pools.test, &MetaConfig { n_support, ..cfg.clone() })?;
        println!(
            "{:>10}  mse {:.5}  mae {:.5}  cc {:.2}%",
            n_support,
            rep.metrics.mse,
            rep.metrics.mae,
            rep.metrics.cc * 100.0
        );
    }
    Ok(())
}
