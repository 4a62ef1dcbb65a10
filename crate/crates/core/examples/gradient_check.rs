//! Compares the hand-written backward pass with central finite differences.
//!
//!     cargo run --release --example gradient_check

use metafap::data::{generate_dataset, fit_scaler, Batch};
use metafap::net::{init_params, loss_and_grad, Ablation, Architecture, GateMode, Mode};
use metafap::objective::LossConfig;
use metafap::OracleConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> metafap::Result<()> {
    let data = generate_dataset(64, &OracleConfig::default(), 1)?;
    let batch = Batch::from_samples(&data, &fit_scaler(&data)?);
    let loss_cfg = LossConfig::default();
    let h = 1e-5;

    for (gate, ab) in [
        (GateMode::Concat, Ablation::Complete),
        (GateMode::Multiply, Ablation::Complete),
        (GateMode::Concat, Ablation::NoFreqBranch),
        (GateMode::Concat, Ablation::NoOtherBranch),
    ] {
        let arch = Architecture {
            gate_mode: gate,
            ..Architecture::default()
        }
        .with_ablation(ab);
        let p = init_params(&arch, 7)?;
        // eval mode keeps the loss a deterministic function of the parameters
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, g) = loss_and_grad(&p, &batch.x, &batch.y, Mode::Eval, &loss_cfg, &mut rng)?;
        let mut pick = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let i = pick.random_range(0..p.len());
            let mut plus = p.clone();
            plus.values[i] += h;
            let mut minus = p.clone();
            minus.values[i] -= h;
            let lp = loss_and_grad(&plus, &batch.x, &batch.y, Mode::Eval, &loss_cfg, &mut rng)?.0;
            let lm = loss_and_grad(&minus, &batch.x, &batch.y, Mode::Eval, &loss_cfg, &mut rng)?.0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        println!("{:>8?} {:>16}: {} params, worst relative error {worst:.2e}", gate, ab.name(), p.len());
    }
    Ok(())
}
