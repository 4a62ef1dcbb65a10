//! Generates a labelled dataset and summarises it per split region.
//!
//!     cargo run --release --example generate_dataset -- [samples] [seed] [out.csv]

use metafap::data::{generate_dataset, preset_split, write_csv, Sample, SplitPools, TaskSampler, Phase};
use metafap::OracleConfig;

fn mean_response(rows: &[Sample]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for s in rows {
        for (a, v) in acc.iter_mut().zip(s.y.to_array()) {
            *a += v;
        }
    }
    acc.map(|a| a / rows.len().max(1) as f64)
}

fn main() -> metafap::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(20_000, |s| s.parse().expect("samples"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let data = generate_dataset(n, &OracleConfig::default(), seed)?;
    println!("{} samples, seed {seed}", data.len());
    let [t, r, a] = mean_response(&data);
    println!("mean T {t:.4}  R {r:.4}  A {a:.4}");

    for name in ["primary", "easy", "hard"] {
        let spec = preset_split(name)?;
        let pools = SplitPools::build(&data, &spec)?;
        let train = TaskSampler::new(&pools.train, &pools.scaler, &spec, Phase::Train);
        let test = TaskSampler::new(&pools.test, &pools.scaler, &spec, Phase::Eval);
        println!(
            "{name:>8}: train support {:>6} query {:>6} | test support {:>5} query {:>5} | val rows {:>5}",
            train.support_len(),
            train.query_len(),
            test.support_len(),
            test.query_len(),
            pools.val.len()
        );
    }

    if let Some(path) = args.next() {
        write_csv(&data, &path)?;
        println!("wrote {path}");
    }
    Ok(())
}
