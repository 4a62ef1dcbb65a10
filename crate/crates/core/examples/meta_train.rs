//! Meta-trains the default model on the primary split and saves the checkpoint.
//!
//!     cargo run --release --example meta_train -- [epochs] [seed] [out_dir]

use metafap::data::{generate_dataset, preset_split, SplitPools, DEFAULT_DATASET_SIZE};
use metafap::metatrain::{meta_train_with, MetaConfig};
use metafap::OracleConfig;

fn main() -> metafap::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let out = args.next();

    let cfg = MetaConfig {
        epochs,
        seed,
        split: preset_split("primary")?,
        ..MetaConfig::default()
    };
    let data = generate_dataset(DEFAULT_DATASET_SIZE, &OracleConfig::default(), seed)?;
    let pools = SplitPools::build(&data, &cfg.split)?;

    let (ck, report) = meta_train_with(&cfg, &pools, |e| {
        println!(
            "epoch {:>3}  query loss {:.5}  val mse {:.5}  val cc {:.3}  outer lr {:.2e}",
            e.epoch, e.train_query_loss, e.val.mse, e.val.cc, e.outer_lr
        );
    })?;
    println!("best epoch {} (val mse {:.5})", report.best_epoch, report.best_val_loss);
    println!(
        "meta-test: mse {:.5} mae {:.5} cc {:.2}%  ({:.1}s)",
        report.test.mse,
        report.test.mae,
        report.test.cc * 100.0,
        report.timings.total_secs
    );

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        ck.save(format!("{dir}/checkpoint.json"))?;
        std::fs::write(format!("{dir}/report.json"), report.to_json()?)?;
        std::fs::write(format!("{dir}/epochs.csv"), report.epoch_csv())?;
        println!("saved to {dir}");
    }
    Ok(())
}
