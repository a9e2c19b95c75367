//! Checkpoint round trip and interrupted-training resume.
//!
//! Logits from a reloaded checkpoint are bit-identical, and pretraining split
//! across a save/load of parameters and optimizer state matches one
//! uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use mdm_lab::denoiser::{load_checkpoint, logits, save_checkpoint, DenoiserConfig};
use mdm_lab::diffusion::{init_params, pretrain, pretrain_steps, PretrainConfig};
use mdm_lab::optim::{AdamConfig, AdamW};
use mdm_lab::sequence::MaskedSequence;
use mdm_lab::tasks::TaskSpec;
use mdm_lab::Result;

fn main() -> Result<()> {
    let spec = TaskSpec::arith(49, 0);
    let sp = spec.vocabulary().specials();
    let (instances, corpus) = spec.generate(500)?;
    let mut model = DenoiserConfig::desk(spec.vocabulary().size());
    model.d_model = 32;
    model.n_layers = 2;
    model.d_ff = 64;
    model.max_len = spec.max_prompt_len() + 8;
    let cfg = PretrainConfig {
        steps: 40,
        batch_size: 16,
        lr: 1e-3,
        gen_budget: 8,
    };
    let seed = 11;

    let (straight, _) = pretrain(model, &corpus, &cfg, sp.mask_id, sp.eos_id, seed, |_| {})?;

    let dir = std::env::temp_dir().join("mdm-lab-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let mut params = init_params(model, seed)?;
    let mut opt = AdamW::new(AdamConfig::with_lr(cfg.lr), params.len());
    pretrain_steps(&mut params, &mut opt, &corpus, &cfg, sp.mask_id, sp.eos_id, seed, 0..25, |_| {})?;
    save_checkpoint(&params, &dir.join("model.ckpt"))?;
    opt.save(&dir.join("optimizer.json"))?;
    println!("interrupted after 25 of {} steps", cfg.steps);

    let mut params = load_checkpoint(&dir.join("model.ckpt"))?;
    let mut opt = AdamW::load(&dir.join("optimizer.json"))?;
    pretrain_steps(&mut params, &mut opt, &corpus, &cfg, sp.mask_id, sp.eos_id, seed, 25..cfg.steps, |_| {})?;
    println!("resumed run equals uninterrupted run: {}", params == straight);

    save_checkpoint(&straight, &dir.join("final.ckpt"))?;
    let reloaded = load_checkpoint(&dir.join("final.ckpt"))?;
    let state = MaskedSequence::all_masked_response(&instances[0].prompt, 8, sp.mask_id);
    let a = logits(&straight, &state)?;
    let b = logits(&reloaded, &state)?;
    let same = a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("reloaded logits bit-identical: {same}");
    Ok(())
}
