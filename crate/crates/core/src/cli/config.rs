//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::decoding::{ConfidenceKey, DecodeConfig, DecodeMode};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::PretrainConfig;
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::tasks::{TaskName, TaskSpec};

/// Every recognised key with its default; `None` marks a required key.
/// The echo lists keys in this order.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("task", None),
    ("out_dir", None),
    ("seed", Some("0")),
    ("task_seed", Some("0")),
    ("dag_nodes", Some("8")),
    ("max_operand", Some("49")),
    ("gen_budget", Some("32")),
    // denoiser
    ("d_model", Some("64")),
    ("n_layers", Some("3")),
    ("n_heads", Some("4")),
    ("d_ff", Some("128")),
    ("max_len", Some("auto")),
    ("init_std", Some("0.02")),
    // pretraining
    ("corpus_size", Some("20000")),
    ("steps", Some("3000")),
    ("batch_size", Some("32")),
    ("pretrain_lr", Some("0.0003")),
    // reinforcement learning
    ("checkpoint", Some("")),
    ("train_first_id", Some("2000000")),
    ("train_instances", Some("2000")),
    ("updates", Some("200")),
    ("group_size", Some("16")),
    ("clip_eps", Some("0.2")),
    ("kl_beta", Some("0")),
    ("lr", Some("0.000005")),
    ("queries_per_update", Some("64")),
    ("update_steps", Some("1")),
    ("rollout_temperature", Some("1")),
    ("entropy_top_frac", Some("1")),
    ("save_every", Some("10")),
    ("log_rollouts", Some("true")),
    // decoding and evaluation
    ("eval_first_id", Some("1000000")),
    ("eval_instances", Some("200")),
    ("modes", Some("ar")),
    ("n", Some("1")),
    ("k", Some("1")),
    ("temperature", Some("0")),
    ("block_size", Some("auto")),
    ("tokens_per_step", Some("1")),
    ("eb_gamma", Some("0")),
    ("eb_gammas", Some("0,0.05,0.1,0.25,0.5,1,2")),
    ("confidence_key", Some("sampled_prob")),
    // analysis
    ("source_run", Some("")),
];

/// `eb_gamma` is either a threshold or a request for the full sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Value(f64),
    Sweep,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    raw: BTreeMap<String, String>,
    pub task: TaskSpec,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub gen_budget: usize,
    pub model: DenoiserConfig,
    pub corpus_size: usize,
    pub pretrain: PretrainConfig,
    pub checkpoint: Option<PathBuf>,
    pub train_first_id: u64,
    pub train_instances: usize,
    pub updates: usize,
    pub grpo: GrpoConfig,
    pub save_every: usize,
    pub log_rollouts: bool,
    pub eval_first_id: u64,
    pub eval_instances: usize,
    pub modes: Vec<DecodeMode>,
    pub n: usize,
    pub k_grid: Vec<usize>,
    pub decode: DecodeConfig,
    pub eb_gamma: Gamma,
    pub eb_gammas: Vec<f64>,
    pub source_run: Option<PathBuf>,
}

/// Parse config text into ordered pairs. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Split `key=value` from a command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not `key=value`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse {x:?}"))))
        .collect()
}

fn opt_path(s: &str) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

impl RunConfig {
    /// Apply `pairs` in order on top of the defaults. Later pairs win.
    pub fn resolve(pairs: &[(String, String)]) -> Result<Self> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            raw.insert(k.clone(), v.clone());
        }
        for (name, default) in KEYS {
            if !raw.contains_key(*name) {
                match default {
                    Some(d) => {
                        raw.insert(name.to_string(), d.to_string());
                    }
                    None => return Err(Error::Config(format!("missing required key `{name}`"))),
                }
            }
        }
        Self::from_raw(raw)
    }

    fn from_raw(raw: BTreeMap<String, String>) -> Result<Self> {
        let s = |k: &str| raw[k].as_str();
        fn get<T: FromStr>(raw: &BTreeMap<String, String>, k: &str) -> Result<T> {
            raw[k]
                .parse()
                .map_err(|_| Error::Config(format!("`{k}`: cannot parse {:?}", raw[k])))
        }
        let cfg_err = |e: Error| Error::Config(e.to_string());

        let task_seed: u64 = get(&raw, "task_seed")?;
        let task = match s("task").parse::<TaskName>().map_err(cfg_err)? {
            TaskName::Arith => TaskSpec::arith(get(&raw, "max_operand")?, task_seed),
            TaskName::DagPath => TaskSpec::dag_path(get(&raw, "dag_nodes")?, task_seed).map_err(cfg_err)?,
        };
        let gen_budget: usize = get(&raw, "gen_budget")?;
        if gen_budget < task.max_response_len() {
            return Err(Error::Config(format!(
                "`gen_budget` = {gen_budget} is shorter than the longest response ({})",
                task.max_response_len()
            )));
        }
        let max_len = match s("max_len") {
            "auto" => task.max_prompt_len() + gen_budget,
            _ => get(&raw, "max_len")?,
        };
        let model = DenoiserConfig {
            vocab_size: task.vocabulary().size(),
            d_model: get(&raw, "d_model")?,
            n_layers: get(&raw, "n_layers")?,
            n_heads: get(&raw, "n_heads")?,
            d_ff: get(&raw, "d_ff")?,
            max_len,
            init_std: get(&raw, "init_std")?,
        };
        model.validate().map_err(cfg_err)?;
        if max_len < task.max_prompt_len() + gen_budget {
            return Err(Error::Config(format!("`max_len` = {max_len} cannot hold prompt plus gen_budget")));
        }
        let pretrain = PretrainConfig {
            steps: get(&raw, "steps")?,
            batch_size: get(&raw, "batch_size")?,
            lr: get(&raw, "pretrain_lr")?,
            gen_budget,
        };
        let grpo = GrpoConfig {
            group_size: get(&raw, "group_size")?,
            clip_eps: get(&raw, "clip_eps")?,
            kl_beta: get(&raw, "kl_beta")?,
            lr: get(&raw, "lr")?,
            queries_per_update: get(&raw, "queries_per_update")?,
            update_steps: get(&raw, "update_steps")?,
            temperature: get(&raw, "rollout_temperature")?,
            gen_budget,
            entropy_top_frac: get(&raw, "entropy_top_frac")?,
        };
        grpo.validate().map_err(cfg_err)?;

        let modes: Vec<DecodeMode> = list("modes", s("modes"))?;
        if modes.is_empty() {
            return Err(Error::Config("`modes` is empty".into()));
        }
        let n: usize = get(&raw, "n")?;
        let k_grid: Vec<usize> = list("k", s("k"))?;
        if let Some(&k) = k_grid.iter().find(|&&k| k == 0 || k > n) {
            return Err(Error::Config(format!("`k` entry {k} must be in 1..={n}")));
        }
        let eb_gamma = match s("eb_gamma") {
            "sweep" => Gamma::Sweep,
            _ => Gamma::Value(get(&raw, "eb_gamma")?),
        };
        let block_size = match s("block_size") {
            "auto" => gen_budget,
            _ => get(&raw, "block_size")?,
        };
        let decode = DecodeConfig {
            mode: modes[0],
            block_size,
            tokens_per_step: get(&raw, "tokens_per_step")?,
            temperature: get(&raw, "temperature")?,
            gen_budget,
            eb_gamma: match eb_gamma {
                Gamma::Value(g) => g,
                Gamma::Sweep => 0.0,
            },
            confidence_key: s("confidence_key").parse::<ConfidenceKey>().map_err(cfg_err)?,
        };
        decode.validate().map_err(cfg_err)?;
        let eb_gammas: Vec<f64> = list("eb_gammas", s("eb_gammas"))?;

        let corpus_size: usize = get(&raw, "corpus_size")?;
        let train_first_id: u64 = get(&raw, "train_first_id")?;
        let train_instances: usize = get(&raw, "train_instances")?;
        let eval_first_id: u64 = get(&raw, "eval_first_id")?;
        let eval_instances: usize = get(&raw, "eval_instances")?;
        let ranges = [
            ("corpus", 0, corpus_size as u64),
            ("train", train_first_id, train_first_id + train_instances as u64),
            ("eval", eval_first_id, eval_first_id + eval_instances as u64),
        ];
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.1 < b.2 && b.1 < a.2 {
                    return Err(Error::Config(format!("{} and {} instance id ranges overlap", a.0, b.0)));
                }
            }
        }

        Ok(Self {
            task,
            out_dir: PathBuf::from(s("out_dir")),
            seed: get(&raw, "seed")?,
            gen_budget,
            model,
            corpus_size,
            pretrain,
            checkpoint: opt_path(s("checkpoint")),
            train_first_id,
            train_instances,
            updates: get(&raw, "updates")?,
            grpo,
            save_every: get(&raw, "save_every")?,
            log_rollouts: get(&raw, "log_rollouts")?,
            eval_first_id,
            eval_instances,
            modes,
            n,
            k_grid,
            decode,
            eb_gamma,
            eb_gammas,
            source_run: opt_path(s("source_run")),
            raw,
        })
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.raw.get(key).map(String::as_str)
    }

    /// The resolved configuration as `key = value` lines, in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (name, _) in KEYS {
            let _ = writeln!(out, "{name} = {}", self.raw[*name]);
        }
        out
    }

    /// Decode settings for one mode.
    pub fn decode_for(&self, mode: DecodeMode) -> DecodeConfig {
        DecodeConfig { mode, ..self.decode }
    }
}
