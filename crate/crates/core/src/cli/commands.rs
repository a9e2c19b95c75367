//! Subcommand bodies. Each one creates or reuses a run directory:
//! `config.echo`, `checkpoints/`, `logs/*.csv`, `traces/*.jsonl`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{Gamma, RunConfig};
use crate::analysis::{
    coverage, entropy_degradation, eb_sweep, passk_experiment, PassAtKTable, PassKExperiment, ProblemFlags,
    ProblemRun, COVERAGE_CSV_HEADER, ENTROPY_CSV_HEADER, SWEEP_CSV_HEADER,
};
use crate::decoding::{DecodeMode, DecodeTrace, TraceHeader, TraceLine};
use crate::denoiser::{load_checkpoint, save_checkpoint, DenoiserParams};
use crate::diffusion::{pretrain, PRETRAIN_CSV_HEADER};
use crate::error::{Error, Result};
use crate::grpo::{train_rl, METRICS_CSV_HEADER};
use crate::io::write_jsonl;
use crate::optim::{AdamConfig, AdamW};
use crate::sequence::Completion;
use crate::tasks::{verify, Instance};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LATEST_DIR: &str = "latest";

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Create the layout and write the resolved config.
    fn create(cfg: &RunConfig) -> Result<Self> {
        let run = Self::new(&cfg.out_dir);
        for dir in [run.root.clone(), run.checkpoints(), run.logs(), run.traces()] {
            fs::create_dir_all(dir)?;
        }
        write_atomic(&run.root.join("config.echo"), cfg.echo().as_bytes())?;
        write_atomic(&run.root.join("vocab.txt"), cfg.task.vocabulary().to_text().as_bytes())?;
        Ok(run)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join(FINAL_CHECKPOINT)
    }

    pub fn trace_file(&self, mode: DecodeMode) -> PathBuf {
        self.traces().join(format!("{mode}.jsonl"))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Load a checkpoint and check it fits the configured task and budget.
fn load_model(cfg: &RunConfig) -> Result<DenoiserParams> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("missing required key `checkpoint`".into()))?;
    let params = load_checkpoint(path)?;
    let m = params.config();
    let vocab = cfg.task.vocabulary().size();
    if m.vocab_size != vocab {
        return Err(Error::Config(format!(
            "checkpoint vocabulary has {} tokens, task `{}` has {vocab}",
            m.vocab_size,
            cfg.task.name()
        )));
    }
    let need = cfg.task.max_prompt_len() + cfg.gen_budget;
    if m.max_len < need {
        return Err(Error::Config(format!("checkpoint max_len {} is below prompt plus gen_budget ({need})", m.max_len)));
    }
    Ok(params)
}

fn eval_instances(cfg: &RunConfig) -> Result<Vec<Instance>> {
    Ok(cfg.task.generate_range(cfg.eval_first_id, cfg.eval_instances)?.0)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::create(cfg)?;
    let sp = cfg.task.vocabulary().specials();
    let (_, corpus) = cfg.task.generate_range(0, cfg.corpus_size)?;
    write_jsonl(&run.root.join("corpus.jsonl"), &corpus)?;
    let mut csv = format!("{PRETRAIN_CSV_HEADER}\n");
    let result = pretrain(cfg.model, &corpus, &cfg.pretrain, sp.mask_id, sp.eos_id, cfg.seed, |row| {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    });
    write_atomic(&run.logs().join("pretrain.csv"), csv.as_bytes())?;
    let (params, log) = result?;
    save_checkpoint(&params, &run.final_checkpoint())?;
    match log.last() {
        Some(r) => println!("pretrained {} steps, final loss {:.4}", log.len(), r.loss),
        None => println!("zero steps, wrote the initialization"),
    }
    println!("checkpoint {}", run.final_checkpoint().display());
    Ok(())
}

/// Saved RL state: parameters, optimizer and the number of finished updates.
fn save_latest(run: &RunDir, params: &DenoiserParams, opt: &AdamW, done: usize) -> Result<()> {
    let dir = run.checkpoints();
    let partial = dir.join("latest.partial");
    let old = dir.join("latest.old");
    let latest = dir.join(LATEST_DIR);
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    fs::create_dir_all(&partial)?;
    save_checkpoint(params, &partial.join("model.ckpt"))?;
    opt.save(&partial.join("optimizer.json"))?;
    fs::write(partial.join("updates_done"), done.to_string())?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    if latest.exists() {
        fs::rename(&latest, &old)?;
    }
    fs::rename(&partial, &latest)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

fn load_latest(run: &RunDir) -> Result<Option<(DenoiserParams, AdamW, usize)>> {
    let dir = run.checkpoints();
    let Some(found) = [LATEST_DIR, "latest.old"].iter().map(|d| dir.join(d)).find(|d| d.join("updates_done").exists())
    else {
        return Ok(None);
    };
    let done_text = fs::read_to_string(found.join("updates_done"))?;
    let done = done_text
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("corrupt {}", found.join("updates_done").display())))?;
    Ok(Some((load_checkpoint(&found.join("model.ckpt"))?, AdamW::load(&found.join("optimizer.json"))?, done)))
}

/// Keep the header (if any) and the lines `keep` accepts; rewrite in place.
fn truncate_log(path: &Path, mut keep: impl FnMut(&str) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if keep(&line) {
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
    }
    write_atomic(path, &out)
}

/// GRPO from `checkpoint`. With `resume`, continue from `checkpoints/latest`;
/// only `updates` may differ from the echoed config.
pub fn cmd_rl(cfg: &RunConfig, resume: bool) -> Result<()> {
    let base = load_model(cfg)?;
    let shape = *base.config();
    let echo_path = cfg.out_dir.join("config.echo");
    let settings = |echo: &str| echo.lines().filter(|l| !l.starts_with("updates =")).collect::<Vec<_>>().join("\n");
    if resume && echo_path.exists() && settings(&fs::read_to_string(&echo_path)?) != settings(&cfg.echo()) {
        return Err(Error::Config(format!("{} differs from the resumed config", echo_path.display())));
    }
    let run = RunDir::create(cfg)?;
    let sp = cfg.task.vocabulary().specials();
    let (instances, _) = cfg.task.generate_range(cfg.train_first_id, cfg.train_instances)?;

    let resumed = if resume { load_latest(&run)? } else { None };
    let (mut params, mut opt, start) = match resumed {
        Some(state) => state,
        None => {
            let n = base.len();
            (base, AdamW::new(AdamConfig::with_lr(cfg.grpo.lr), n), 0)
        }
    };
    if *params.config() != shape {
        return Err(Error::Config("resumed checkpoint shape differs from the base".into()));
    }

    let metrics_path = run.logs().join("metrics.csv");
    let rollouts_path = run.traces().join("rollouts.jsonl");
    if start == 0 {
        fs::write(&metrics_path, format!("{METRICS_CSV_HEADER}\n"))?;
        fs::write(&rollouts_path, "")?;
    } else {
        let before = |field: Option<usize>| field.is_some_and(|u| u < start);
        truncate_log(&metrics_path, |l| {
            l == METRICS_CSV_HEADER || before(l.split(',').next().and_then(|u| u.parse().ok()))
        })?;
        truncate_log(&rollouts_path, |l| {
            before(
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v.get("update")?.as_u64())
                    .map(|u| u as usize),
            )
        })?;
    }
    let mut metrics = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
    let mut rollouts = BufWriter::new(OpenOptions::new().append(true).open(&rollouts_path)?);
    if start > 0 {
        println!("resuming after {start} updates");
    }

    let total = cfg.updates;
    train_rl(&mut params, &mut opt, &instances, &cfg.grpo, sp, cfg.seed, start..total.max(start), |p| {
        let u = p.metrics.update;
        writeln!(metrics, "{}", p.metrics.csv_line())?;
        metrics.flush()?;
        if cfg.log_rollouts {
            for g in p.groups {
                for line in g.log_lines(u) {
                    serde_json::to_writer(&mut rollouts, &line)?;
                    rollouts.write_all(b"\n")?;
                }
            }
            rollouts.flush()?;
        }
        if cfg.save_every > 0 && ((u + 1) % cfg.save_every == 0 || u + 1 == total) {
            save_latest(&run, p.params, p.optimizer, u + 1)?;
        }
        if u % 10 == 0 || u + 1 == total {
            println!("update {u} mean_reward {:.4} objective {:.4}", p.metrics.mean_reward, p.metrics.objective);
        }
        Ok(())
    })?;
    save_checkpoint(&params, &run.final_checkpoint())?;
    println!("checkpoint {}", run.final_checkpoint().display());
    Ok(())
}

fn write_traces(path: &Path, exp: &PassKExperiment, header: &TraceHeader) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut w = BufWriter::new(File::create(&tmp)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for run in &exp.runs {
        for (sample, trace) in run.traces.iter().enumerate() {
            for record in &trace.records {
                let line = TraceLine {
                    problem_id: run.problem_id,
                    sample,
                    record: record.clone(),
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()?;
    drop(w);
    fs::rename(tmp, path)?;
    Ok(())
}

/// Rebuild an experiment from a trace file written by `decode` or `eval`.
pub fn read_traces(path: &Path, instances: &[Instance], k_grid: &[usize], cfg: &RunConfig) -> Result<PassKExperiment> {
    let sp = cfg.task.vocabulary().specials();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: TraceHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::InvalidArgument(format!("{} is empty", path.display()))),
    };
    let budget = header.config.gen_budget;
    let mut grouped: BTreeMap<(u64, usize), DecodeTrace> = BTreeMap::new();
    for line in lines {
        let line: TraceLine = serde_json::from_str(&line?)?;
        let tr = grouped.entry((line.problem_id, line.sample)).or_default();
        tr.steps = tr.steps.max(line.record.step + 1);
        tr.records.push(line.record);
    }
    let mut runs = Vec::with_capacity(instances.len());
    for inst in instances {
        let mut run = ProblemRun {
            problem_id: inst.id,
            completions: Vec::new(),
            traces: Vec::new(),
            rewards: Vec::new(),
        };
        for ((_, _), trace) in grouped.range((inst.id, 0)..(inst.id + 1, 0)) {
            let mut tokens = vec![sp.mask_id; budget];
            for r in &trace.records {
                tokens[r.position] = r.token;
            }
            let completion = Completion::new(tokens, sp.eos_id, sp.mask_id)?;
            run.rewards.push(verify(inst, completion.tokens()));
            run.completions.push(completion);
            run.traces.push(trace.clone());
        }
        if run.traces.is_empty() {
            return Err(Error::InvalidArgument(format!("{} has no samples for problem {}", path.display(), inst.id)));
        }
        runs.push(run);
    }
    let flags = runs
        .iter()
        .map(|r| ProblemFlags {
            problem_id: r.problem_id,
            correct: r.rewards.iter().map(|x| x.is_correct()).collect(),
        })
        .collect();
    Ok(PassKExperiment {
        mode: header.config.mode,
        table: PassAtKTable::from_flags(flags, k_grid)?,
        runs,
    })
}

fn write_samples_csv(path: &Path, exp: &PassKExperiment, cfg: &RunConfig) -> Result<()> {
    let vocab = cfg.task.vocabulary();
    let mut out = String::from("problem_id,sample,correct,format,steps,response\n");
    for run in &exp.runs {
        for (j, ((c, r), t)) in run.completions.iter().zip(&run.rewards).zip(&run.traces).enumerate() {
            let text = vocab.decode(c.answer(vocab.eos_id()));
            writeln!(out, "{},{j},{},{},{},{text}", run.problem_id, r.correct, r.format, t.steps).unwrap();
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Summary, Pass@k, coverage and entropy tables for a set of experiments.
fn write_tables(run: &RunDir, exps: &[PassKExperiment], instances: &[Instance], k_grid: &[usize]) -> Result<()> {
    let mut summary = String::from("mode,accuracy,tokens_per_step");
    for k in k_grid {
        write!(summary, ",pass@{k}").unwrap();
    }
    summary.push('\n');
    let mut passk = String::new();
    for e in exps {
        if passk.is_empty() {
            passk = format!("{}\n", e.table.csv_header());
        }
        passk.push_str(&e.table.csv_rows(e.mode.as_str()));
        write!(summary, "{},{},{}", e.mode, e.accuracy(), e.tokens_per_step()).unwrap();
        for m in &e.table.mean {
            write!(summary, ",{m}").unwrap();
        }
        summary.push('\n');
    }
    write_atomic(&run.logs().join("summary.csv"), summary.as_bytes())?;
    write_atomic(&run.logs().join("passk.csv"), passk.as_bytes())?;

    let mut cov = format!("{COVERAGE_CSV_HEADER}\n");
    for (i, a) in exps.iter().enumerate() {
        for b in &exps[i + 1..] {
            for &k in k_grid {
                let rep = coverage(&a.table.flags, &b.table.flags, k)?;
                cov.push_str(&rep.csv_row(a.mode.as_str(), b.mode.as_str()));
                cov.push('\n');
            }
        }
    }
    write_atomic(&run.logs().join("coverage.csv"), cov.as_bytes())?;

    let refs: Vec<&PassKExperiment> = exps.iter().collect();
    let report = entropy_degradation(&refs, instances)?;
    debug_assert!(report.to_csv().starts_with(ENTROPY_CSV_HEADER));
    write_atomic(&run.logs().join("entropy.csv"), report.to_csv().as_bytes())?;
    write_atomic(&run.logs().join("bypass_tokens.csv"), report.bypass_tokens_csv().as_bytes())?;
    Ok(())
}

fn sample_modes(cfg: &RunConfig) -> Vec<DecodeMode> {
    cfg.modes
        .iter()
        .copied()
        .filter(|&m| !(cfg.eb_gamma == Gamma::Sweep && m == DecodeMode::EbParallel))
        .collect()
}

fn run_modes(cfg: &RunConfig, run: &RunDir, params: &DenoiserParams, instances: &[Instance], k_grid: &[usize]) -> Result<Vec<PassKExperiment>> {
    let sp = cfg.task.vocabulary().specials();
    sample_modes(cfg)
        .into_iter()
        .map(|mode| {
            let dc = cfg.decode_for(mode);
            let exp = passk_experiment(params, instances, &dc, cfg.n, k_grid, cfg.seed, sp)?;
            write_traces(&run.trace_file(mode), &exp, &TraceHeader { config: dc })?;
            println!("{mode}: accuracy {:.4}, {:.3} tokens/step", exp.accuracy(), exp.tokens_per_step());
            Ok(exp)
        })
        .collect()
}

/// Sample `n` responses per evaluation instance under each mode.
pub fn cmd_decode(cfg: &RunConfig) -> Result<()> {
    let params = load_model(cfg)?;
    let run = RunDir::create(cfg)?;
    let instances = eval_instances(cfg)?;
    for exp in run_modes(cfg, &run, &params, &instances, &[1])? {
        write_samples_csv(&run.logs().join(format!("samples_{}.csv", exp.mode)), &exp, cfg)?;
    }
    Ok(())
}

/// Pass@k, coverage and entropy tables, plus the `eb_parallel` sweep when
/// `eb_gamma = sweep`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let params = load_model(cfg)?;
    let run = RunDir::create(cfg)?;
    let instances = eval_instances(cfg)?;
    let exps = run_modes(cfg, &run, &params, &instances, &cfg.k_grid)?;
    if !exps.is_empty() {
        write_tables(&run, &exps, &instances, &cfg.k_grid)?;
    }
    if cfg.eb_gamma == Gamma::Sweep {
        let sp = cfg.task.vocabulary().specials();
        let base = cfg.decode_for(DecodeMode::EbParallel);
        let rows = eb_sweep(&params, &instances, &base, &cfg.eb_gammas, cfg.n, cfg.seed, sp)?;
        let mut csv = format!("{SWEEP_CSV_HEADER}\n");
        for r in &rows {
            csv.push_str(&r.csv_line());
            csv.push('\n');
            println!("gamma {}: accuracy {:.4}, {:.3} tokens/step", r.gamma, r.accuracy, r.tokens_per_step);
        }
        write_atomic(&run.logs().join("eb_sweep.csv"), csv.as_bytes())?;
    }
    Ok(())
}

/// Recompute the evaluation tables of `source_run` from its traces alone.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    let source = cfg
        .source_run
        .as_ref()
        .ok_or_else(|| Error::Config("missing required key `source_run`".into()))?;
    let src = RunDir::new(source);
    let run = RunDir::create(cfg)?;
    let instances = eval_instances(cfg)?;
    let exps = sample_modes(cfg)
        .into_iter()
        .map(|mode| read_traces(&src.trace_file(mode), &instances, &cfg.k_grid, cfg))
        .collect::<Result<Vec<_>>>()?;
    write_tables(&run, &exps, &instances, &cfg.k_grid)?;
    for e in &exps {
        println!("{}: accuracy {:.4}, {:.3} tokens/step", e.mode, e.accuracy(), e.tokens_per_step());
    }
    Ok(())
}
