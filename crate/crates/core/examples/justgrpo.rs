//! GRPO over the exact autoregressive policy of the pretrained denoiser
//! (G = 16, one update step per batch, rollout temperature 1, no KL).
//!
//! cargo run --release --example justgrpo -- [checkpoint] [updates] [queries]

mod common;

use mdm_lab::grpo::{train_rl, GrpoConfig};
use mdm_lab::optim::{AdamConfig, AdamW};
use mdm_lab::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut params = common::base_model(args.first().map(String::as_str))?;
    let updates: usize = args.get(1).map_or(100, |s| s.parse().expect("updates"));
    let queries: usize = args.get(2).map_or(16, |s| s.parse().expect("queries"));

    let spec = common::task();
    let sp = spec.vocabulary().specials();
    let (train, _) = spec.generate_range(common::TRAIN_FIRST_ID, 2000)?;
    let held_out = common::held_out(200)?;
    println!("base greedy accuracy {:.3}", common::greedy_accuracy(&params, &held_out)?);

    let cfg = GrpoConfig {
        lr: 2e-4,
        queries_per_update: queries,
        gen_budget: common::GEN_BUDGET,
        ..GrpoConfig::default()
    };
    let mut opt = AdamW::new(AdamConfig::with_lr(cfg.lr), params.len());
    train_rl(&mut params, &mut opt, &train, &cfg, sp, 1, 0..updates, |p| {
        let m = p.metrics;
        if m.update % 10 == 0 {
            println!(
                "update {:>4}  reward {:.3}  entropy {:.3}  rollout {:.2}s  update {:.2}s",
                m.update, m.mean_reward, m.mean_entropy, m.rollout_secs, m.update_secs
            );
        }
        Ok(())
    })?;
    println!("after {updates} updates greedy accuracy {:.3}", common::greedy_accuracy(&params, &held_out)?);
    Ok(())
}
