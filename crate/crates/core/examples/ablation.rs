//! Meta-trains the complete network and the two single-branch variants.
//!
//!     cargo run --release --example ablation -- [epochs] [seed]

use metafap::data::{generate_dataset, preset_split, SplitPools, DEFAULT_DATASET_SIZE};
use metafap::metatrain::{meta_train, MetaConfig};
use metafap::net::Ablation;
use metafap::OracleConfig;

fn main() -> metafap::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let data = generate_dataset(DEFAULT_DATASET_SIZE, &OracleConfig::default(), seed)?;
    let pools = SplitPools::build(&data, &preset_split("primary")?)?;
    for ab in [Ablation::Complete, Ablation::NoFreqBranch, Ablation::NoOtherBranch] {
        let base = MetaConfig {
            epochs,
            seed,
            ..MetaConfig::default()
        };
        let cfg = MetaConfig {
            architecture: base.architecture.clone().with_ablation(ab),
            ..base
        };
        let (_, rep) = meta_train(&cfg, &pools)?;
        println!(
            "{:>16}  mse {:.5}  mae {:.5}  cc {:.2}%  best epoch {}",
            ab.name(),
            rep.test.mse,
            rep.test.mae,
            rep.test.cc * 100.0,
            rep.best_epoch
        );
    }
    Ok(())
}
