//! Pass@k of left-to-right versus confidence-ordered sampling at T = 0.6,
//! plus the coverage split at the largest k.
//!
//! cargo run --release --example passk_curves -- [checkpoint] [instances] [n]

mod common;

use mdm_lab::analysis::{coverage, passk_experiment};
use mdm_lab::decoding::{DecodeConfig, DecodeMode};
use mdm_lab::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let params = common::base_model(args.first().map(String::as_str))?;
    let count: usize = args.get(1).map_or(100, |s| s.parse().expect("instances"));
    let n: usize = args.get(2).map_or(32, |s| s.parse().expect("n"));
    let sp = common::task().vocabulary().specials();
    let instances = common::held_out(count)?;
    let k_grid: Vec<usize> = (0..).map(|e| 1usize << e).take_while(|&k| k <= n).collect();

    let mut exps = Vec::new();
    for mode in [DecodeMode::Ar, DecodeMode::Confidence] {
        let cfg = DecodeConfig::new(mode, common::GEN_BUDGET, 0.6);
        exps.push(passk_experiment(&params, &instances, &cfg, n, &k_grid, 1, sp)?);
    }
    print!("{:>6}", "k");
    for e in &exps {
        print!("{:>12}", e.mode.as_str());
    }
    println!();
    for (j, k) in k_grid.iter().enumerate() {
        print!("{k:>6}");
        for e in &exps {
            print!("{:>12.4}", e.table.mean[j]);
        }
        println!();
    }
    let k = *k_grid.last().expect("non-empty grid");
    let cov = coverage(&exps[0].table.flags, &exps[1].table.flags, k)?;
    println!(
        "\nat k={k}: only ar {} | only confidence {} | both {} | neither {}",
        cov.exclusive_a, cov.exclusive_b, cov.both, cov.neither
    );
    Ok(())
}
