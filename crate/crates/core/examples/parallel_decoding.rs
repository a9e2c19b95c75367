//! Entropy-bounded parallel decoding: accuracy against tokens per step.
//!
//! cargo run --release --example parallel_decoding -- [checkpoint]

mod common;

use mdm_lab::analysis::eb_sweep;
use mdm_lab::decoding::{DecodeConfig, DecodeMode};
use mdm_lab::Result;

fn main() -> Result<()> {
    let arg = std::env::args().nth(1);
    let params = common::base_model(arg.as_deref())?;
    let sp = common::task().vocabulary().specials();
    let instances = common::held_out(200)?;
    let base = DecodeConfig::new(DecodeMode::EbParallel, common::GEN_BUDGET, 0.0);
    let gammas = [0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0];
    println!("{:>6} {:>10} {:>16}", "gamma", "accuracy", "tokens/step");
    for row in eb_sweep(&params, &instances, &base, &gammas, 1, 0, sp)? {
        println!("{:>6} {:>10.3} {:>16.2}", row.gamma, row.accuracy, row.tokens_per_step);
    }
    Ok(())
}
