//! Pretrain the denoiser on `dag-path` with the masked-diffusion loss and
//! report held-out greedy accuracy.
//!
//! cargo run --release --example pretrain -- [steps] [out.ckpt]

mod common;

use std::path::PathBuf;
use std::time::Instant;

use mdm_lab::denoiser::save_checkpoint;
use mdm_lab::diffusion::{pretrain, PretrainConfig};
use mdm_lab::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(4000, |s| s.parse().expect("steps"));
    let out = args.next().map_or_else(|| PathBuf::from("dag8_base.ckpt"), PathBuf::from);

    let spec = common::task();
    let sp = spec.vocabulary().specials();
    let (_, corpus) = spec.generate(20_000)?;
    let model = common::model_config(&spec);
    println!("{} parameters, {} training examples", model.layout().total, corpus.len());

    let cfg = PretrainConfig {
        steps,
        batch_size: 32,
        lr: 1e-3,
        gen_budget: common::GEN_BUDGET,
    };
    let t0 = Instant::now();
    let mut window = Vec::new();
    let (params, _) = pretrain(model, &corpus, &cfg, sp.mask_id, sp.eos_id, 0, |row| {
        window.push(row.loss);
        if window.len() == 250 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {:>5}  mean loss {mean:.3}", row.step + 1);
            window.clear();
        }
    })?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let held_out = common::held_out(200)?;
    println!("held-out greedy accuracy {:.3}", common::greedy_accuracy(&params, &held_out)?);
    save_checkpoint(&params, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
