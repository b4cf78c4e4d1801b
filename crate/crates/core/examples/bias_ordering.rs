//! Desk-scale Baseline / Embedding / Deep comparison on surrogate data, plus
//! the per-epoch estimate of the fusion network on the first split.
//!
//! `cargo run --release -p mmdml --example bias_ordering -- [n] [seed]`

use std::time::Instant;

use mmdml::dgp::{attenuated_theta_plim, generate, DgpConfig};
use mmdml::dml::{split_indices, SplitScheme};
use mmdml::eval::render::report_markdown;
use mmdml::eval::{default_roster, epoch_trace, run_benchmark};
use mmdml::learners::{presets, train_fusion};
use mmdml::Dataset;

fn main() -> Result<(), mmdml::Error> {
    let args: Vec<String> = std::env::args().collect();
    let n = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2024);
    let config = DgpConfig::three_modalities(n, 0.9, 8, seed);
    let data: Dataset = generate(&config)?;
    let scheme = SplitScheme::single(0.5, 5, 7);

    let start = Instant::now();
    let (train_rows, test_rows) = split_indices(data.n(), 0.5, scheme.seeds()[0])?;
    let (train, test) = (data.select_rows(&train_rows), data.select_rows(&test_rows));
    let net = train_fusion(&presets::fusion(), &train, Some(&test), &data.modality_names(), 3)?;
    for p in &epoch_trace(&net.log, &test, 0.05)?.points {
        println!("epoch {:>3}  theta {:.4}  [{:.4}, {:.4}]", p.epoch, p.theta_hat, p.ci_low, p.ci_high);
    }
    println!("trace: {:.1?}\n", start.elapsed());

    let start = Instant::now();
    let report = run_benchmark(&data, &default_roster(), &scheme, 0.05)?;
    print!("{}", report_markdown(&report));
    println!("attenuated limit (population): {:.4}", attenuated_theta_plim(&config)?);
    println!("benchmark: {:.1?}", start.elapsed());
    Ok(())
}
