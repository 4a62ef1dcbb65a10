//! Single-sample prediction latency of the default network.
//!
//!     cargo run --release --example latency -- [iterations]

use metafap::cli::bench_latency;
use metafap::data::{fit_scaler, generate_dataset};
use metafap::net::{init_params, Architecture};
use metafap::OracleConfig;

fn main() -> metafap::Result<()> {
    let iterations: usize = std::env::args().nth(1).map_or(10_000, |s| s.parse().expect("iterations"));
    let arch = Architecture::default();
    let p = init_params(&arch, 0)?;
    let scaler = fit_scaler(&generate_dataset(1_000, &OracleConfig::default(), 0)?)?;
    println!("parameters: {}", arch.param_count());
    for (label, n) in [("random array_n", None), ("array_n = 2", Some(2)), ("array_n = 6", Some(6))] {
        let s = bench_latency(&p, &scaler, iterations, n, 1)?;
        println!("{label:>15}: mean {:.4} ms  p50 {:.4} ms  p99 {:.4} ms", s.mean_ms, s.p50_ms, s.p99_ms);
    }
    Ok(())
}
