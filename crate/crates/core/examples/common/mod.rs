//! Helpers shared by the examples: a cached pretrained `dag-path` base model.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mdm_lab::analysis::passk_experiment;
use mdm_lab::decoding::{DecodeConfig, DecodeMode};
use mdm_lab::denoiser::{load_checkpoint, save_checkpoint, DenoiserConfig, DenoiserParams};
use mdm_lab::diffusion::{pretrain, PretrainConfig};
use mdm_lab::tasks::{Instance, TaskSpec};
use mdm_lab::Result;

pub const GEN_BUDGET: usize = 16;
pub const HELD_OUT_FIRST_ID: u64 = 1_000_000;
pub const TRAIN_FIRST_ID: u64 = 2_000_000;

pub fn task() -> TaskSpec {
    TaskSpec::dag_path(8, 0).expect("8 nodes is in range")
}

pub fn model_config(spec: &TaskSpec) -> DenoiserConfig {
    let mut mc = DenoiserConfig::desk(spec.vocabulary().size());
    mc.max_len = spec.max_prompt_len() + GEN_BUDGET;
    mc
}

fn cache_path() -> PathBuf {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/mdm-lab-examples");
    std::fs::create_dir_all(&dir).expect("create example cache");
    dir.join("dag8_base.ckpt")
}

/// The checkpoint named on the command line, else a cached base model
/// (4000 steps at lr 1e-3, about three minutes on one core).
pub fn base_model(arg: Option<&str>) -> Result<DenoiserParams> {
    if let Some(path) = arg {
        return load_checkpoint(Path::new(path));
    }
    let path = cache_path();
    if path.exists() {
        return load_checkpoint(&path);
    }
    let spec = task();
    let sp = spec.vocabulary().specials();
    eprintln!("pretraining a base model; cached at {}", path.display());
    let (_, corpus) = spec.generate(20_000)?;
    let cfg = PretrainConfig {
        steps: 4000,
        batch_size: 32,
        lr: 1e-3,
        gen_budget: GEN_BUDGET,
    };
    let (params, _) = pretrain(model_config(&spec), &corpus, &cfg, sp.mask_id, sp.eos_id, 0, |r| {
        if r.step % 500 == 0 {
            eprintln!("  step {:>5}  loss {:.3}", r.step, r.loss);
        }
    })?;
    save_checkpoint(&params, &path)?;
    Ok(params)
}

pub fn held_out(count: usize) -> Result<Vec<Instance>> {
    Ok(task().generate_range(HELD_OUT_FIRST_ID, count)?.0)
}

/// Greedy left-to-right accuracy.
pub fn greedy_accuracy(params: &DenoiserParams, instances: &[Instance]) -> Result<f64> {
    let sp = task().vocabulary().specials();
    let cfg = DecodeConfig::new(DecodeMode::Ar, GEN_BUDGET, 0.0);
    Ok(passk_experiment(params, instances, &cfg, 1, &[1], 0, sp)?.accuracy())
}
