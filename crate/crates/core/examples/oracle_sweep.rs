//! Frequency sweep of one unit cell through the circuit oracle.
//!
//!     cargo run --release --example oracle_sweep -- [out.csv]

use metafap::data::{frequency_grid, frequency_sweep, write_csv};
use metafap::oracle::{evaluate_circuit, DesignVector, OracleConfig, Polarization};

fn main() -> metafap::Result<()> {
    let base = DesignVector::new(10.0, 30.0, 0.375, 200.0, 2.0, 10.0, 800.0, 4)?;
    let grid = frequency_grid(0.5);

    for pol in [Polarization::Te, Polarization::Tm] {
        let cfg = OracleConfig {
            polarization: pol,
            ..OracleConfig::default()
        };
        println!("{pol:?} polarization, theta = {} deg", base.theta_deg);
        println!("{:>8} {:>8} {:>8} {:>8} {:>10}", "f_GHz", "T", "R", "A", "|det|-1");
        for s in frequency_sweep(&base, &grid, &cfg)? {
            let det = evaluate_circuit(&s.x, &cfg)?.matrix.det().norm() - 1.0;
            println!(
                "{:>8.2} {:>8.4} {:>8.4} {:>8.4} {:>10.1e}",
                s.x.freq_ghz, s.y.transmittance, s.y.reflectance, s.y.absorbance, det
            );
        }
        println!();
    }

    if let Some(path) = std::env::args().nth(1) {
        let sweep = frequency_sweep(&base, &grid, &OracleConfig::default())?;
        write_csv(&sweep, &path)?;
        println!("wrote {path}");
    }
    Ok(())
}
