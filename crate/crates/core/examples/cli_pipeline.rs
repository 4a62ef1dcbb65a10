//! Drives the command-line front end in-process: generate, train, eval.
//!
//!     cargo run --release --example cli_pipeline -- [work_dir]

use metafap::cli::run;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("metafap-pipeline").display().to_string());
    let steps: [&[&str]; 3] = [
        &["generate", "--samples", "20000", "--seed", "1", "--out", &format!("{dir}/data")],
        &["train", "--data", &format!("{dir}/data/dataset.csv"), "--epochs", "10", "--seed", "1", "--out", &format!("{dir}/train")],
        &[
            "eval",
            "--data",
            &format!("{dir}/data/dataset.csv"),
            "--checkpoint",
            &format!("{dir}/train/checkpoint.json"),
            "--n-support",
            "128",
            "--out",
            &format!("{dir}/eval"),
        ],
    ];
    for args in steps {
        println!("$ metafap {}", args.join(" "));
        let code = run(std::iter::once("metafap").chain(args.iter().copied()));
        if code != 0 {
            std::process::exit(code);
        }
    }
}
