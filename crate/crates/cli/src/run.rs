use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use commformer_core::diffmath::checkpoint::{self, MANIFEST_FILE};
use commformer_core::diffmath::Scalar;
use commformer_core::relformer::ActMode;
use commformer_core::trainer::{EvalSummary, IterationOutput, RunSetup, Stage, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Dtype, RunConfig, StageSel};
use crate::{HarnessError, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SNAPSHOTS_FILE: &str = "alpha_snapshots.jsonl";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Seed of the end-of-run evaluation, fixed so manifests are comparable.
const FINAL_EVAL_SEED: u64 = 0xe7a1;

/// Run-level record written once training finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub started_at: u64,
    pub finished_at: u64,
    pub env: String,
    pub n_agents: usize,
    pub k: usize,
    pub dtype: String,
    pub iterations: u64,
    pub env_steps: u64,
    pub stage: u8,
    pub final_graph: Vec<Vec<u8>>,
    pub last_record: Option<Value>,
    pub eval: EvalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub gated: bool,
    pub k: usize,
    pub graph: Vec<Vec<u8>>,
    #[serde(flatten)]
    pub summary: EvalSummary,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Where a run writes when the config names no directory:
/// `$COMMFORMER_OUT` (or `runs`) / `<env>-s<seed>-<hash prefix>`.
pub fn default_out_dir(cfg: &RunConfig) -> PathBuf {
    let root =
        std::env::var_os("COMMFORMER_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{}-s{}-{}", cfg.env, cfg.seed, &cfg.hash()[..8]))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(HarnessError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(HarnessError::io(path))
}

/// Keeps the first `keep` lines of a JSONL file.
fn truncate_lines(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(HarnessError::io(path))?;
    let mut out = String::new();
    for line in BufReader::new(file).lines().take(keep) {
        out.push_str(&line.map_err(HarnessError::io(path))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Counters persisted alongside the trainer state.
#[derive(Clone, Copy, Debug)]
struct Progress {
    lines: usize,
    stage_start: u64,
    started_at: u64,
}

struct RunFiles {
    dir: PathBuf,
    metrics: File,
    snapshots: File,
}

impl RunFiles {
    fn open(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            let p = dir.join(name);
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(HarnessError::io(p))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open(METRICS_FILE)?,
            snapshots: open(SNAPSHOTS_FILE)?,
        })
    }

    fn append(&mut self, out: &IterationOutput) -> Result<()> {
        let rec = serde_json::to_string(&out.record)
            .map_err(HarnessError::json(self.dir.join(METRICS_FILE)))?;
        let snap = serde_json::to_string(&out.snapshot)
            .map_err(HarnessError::json(self.dir.join(SNAPSHOTS_FILE)))?;
        writeln!(self.metrics, "{rec}").map_err(HarnessError::io(self.dir.join(METRICS_FILE)))?;
        writeln!(self.snapshots, "{snap}")
            .map_err(HarnessError::io(self.dir.join(SNAPSHOTS_FILE)))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics
            .flush()
            .map_err(HarnessError::io(self.dir.join(METRICS_FILE)))?;
        self.snapshots
            .flush()
            .map_err(HarnessError::io(self.dir.join(SNAPSHOTS_FILE)))
    }
}

fn save_checkpoint<T: Scalar>(
    trainer: &Trainer<T>,
    dir: &Path,
    name: &str,
    cfg: &RunConfig,
    progress: Progress,
) -> Result<()> {
    let (store, mut meta) = trainer.state()?;
    meta.insert("metrics_lines".into(), json!(progress.lines));
    meta.insert("stage_start_steps".into(), json!(progress.stage_start));
    meta.insert("started_at".into(), json!(progress.started_at));
    meta.insert("config_hash".into(), json!(cfg.hash()));
    checkpoint::save(&dir.join(CHECKPOINT_DIR).join(name), &store, meta)?;
    Ok(())
}

fn meta_u64(meta: &BTreeMap<String, Value>, key: &str) -> Result<u64> {
    meta.get(key).and_then(Value::as_u64).ok_or_else(|| {
        commformer_core::Error::Checkpoint(format!("checkpoint metadata lacks `{key}`")).into()
    })
}

fn load_trainer<T: Scalar>(
    ckpt: &Path,
    setup: Option<RunSetup>,
) -> Result<(Trainer<T>, BTreeMap<String, Value>)> {
    if !ckpt.join(MANIFEST_FILE).exists() {
        return Err(HarnessError::MissingCheckpoint(ckpt.to_path_buf()));
    }
    let (store, manifest) = checkpoint::load::<T>(ckpt)?;
    let setup = match setup {
        Some(s) => s,
        None => {
            let raw = manifest.meta.get("setup").cloned().ok_or_else(|| {
                commformer_core::Error::Checkpoint("checkpoint metadata lacks `setup`".into())
            })?;
            serde_json::from_value(raw).map_err(HarnessError::json(ckpt))?
        }
    };
    let trainer = Trainer::from_state(setup, &store, &manifest.meta)?;
    Ok((trainer, manifest.meta))
}

fn drive<T: Scalar>(
    cfg: &RunConfig,
    dir: &Path,
    mut trainer: Trainer<T>,
    mut progress: Progress,
) -> Result<RunManifest> {
    let mut files = RunFiles::open(dir)?;
    let every = cfg.checkpoint_every.max(1);
    let step =
        |trainer: &mut Trainer<T>, files: &mut RunFiles, progress: &mut Progress| -> Result<()> {
            let out = trainer.run_iteration()?;
            files.append(&out)?;
            progress.lines += 1;
            if trainer.iteration().is_multiple_of(every) {
                files.flush()?;
                save_checkpoint(trainer, dir, "latest", cfg, *progress)?;
            }
            Ok(())
        };
    if trainer.stage() == Stage::One {
        while trainer.env_steps() - progress.stage_start < cfg.steps {
            step(&mut trainer, &mut files, &mut progress)?;
        }
        files.flush()?;
        save_checkpoint(&trainer, dir, "stage1", cfg, progress)?;
        if cfg.stage == StageSel::Both {
            trainer.begin_stage2()?;
            progress.stage_start = trainer.env_steps();
        }
    }
    if trainer.stage() == Stage::Two {
        while trainer.env_steps() - progress.stage_start < cfg.stage2_budget() {
            step(&mut trainer, &mut files, &mut progress)?;
        }
    }
    files.flush()?;
    save_checkpoint(&trainer, dir, "latest", cfg, progress)?;
    save_checkpoint(&trainer, dir, "final", cfg, progress)?;

    let gated = cfg.dyn_gate && trainer.has_gates();
    let eval = trainer.evaluate(cfg.eval_episodes, gated, ActMode::Greedy, FINAL_EVAL_SEED)?;
    let metrics_path = dir.join(METRICS_FILE);
    let last_record = fs::read_to_string(&metrics_path)
        .map_err(HarnessError::io(&metrics_path))?
        .lines()
        .last()
        .map(serde_json::from_str)
        .transpose()
        .map_err(HarnessError::json(&metrics_path))?;
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: progress.started_at,
        finished_at: now(),
        env: trainer.setup().env.name().to_string(),
        n_agents: trainer.dims().n_agents,
        k: trainer.sparsity().k,
        dtype: T::DTYPE.to_string(),
        iterations: trainer.iteration(),
        env_steps: trainer.env_steps(),
        stage: trainer.stage().number(),
        final_graph: trainer.graph()?.rows(),
        last_record,
        eval,
    };
    let path = dir.join(RUN_MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(HarnessError::json(&path))?;
    write_atomic(&path, &bytes)?;
    Ok(manifest)
}

fn start<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<RunManifest> {
    let setup = cfg.setup()?;
    let started_at = now();
    let (trainer, progress) = match cfg.stage {
        StageSel::One | StageSel::Both => (
            Trainer::<T>::new(setup)?,
            Progress {
                lines: 0,
                stage_start: 0,
                started_at,
            },
        ),
        StageSel::Two => {
            let ckpt = cfg.stage1_checkpoint.as_ref().ok_or_else(|| {
                crate::ConfigError::Invalid("stage = 2 needs stage1_checkpoint".into())
            })?;
            let (mut trainer, _) = load_trainer::<T>(ckpt, Some(setup))?;
            trainer.begin_stage2()?;
            let stage_start = trainer.env_steps();
            (
                trainer,
                Progress {
                    lines: 0,
                    stage_start,
                    started_at,
                },
            )
        }
    };
    drive(cfg, dir, trainer, progress)
}

/// Trains according to `cfg`. The run directory is `cfg.out` or
/// [`default_out_dir`]; it must not already hold a run.
pub fn train(cfg: &RunConfig) -> Result<(PathBuf, RunManifest)> {
    let dir = cfg.out.clone().unwrap_or_else(|| default_out_dir(cfg));
    if dir.join(METRICS_FILE).exists() {
        return Err(crate::ConfigError::Invalid(format!(
            "{} already holds a run; use resume or another output directory",
            dir.display()
        ))
        .into());
    }
    fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.render().as_bytes())?;
    let manifest = match cfg.dtype {
        Dtype::F64 => start::<f64>(cfg, &dir)?,
        Dtype::F32 => start::<f32>(cfg, &dir)?,
    };
    Ok((dir, manifest))
}

fn continue_run<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<RunManifest> {
    let ckpt = dir.join(CHECKPOINT_DIR).join("latest");
    let (trainer, meta) = load_trainer::<T>(&ckpt, Some(cfg.setup()?))?;
    if meta.get("config_hash").and_then(Value::as_str) != Some(cfg.hash().as_str()) {
        return Err(commformer_core::Error::Checkpoint(
            "checkpoint was written under a different config".into(),
        )
        .into());
    }
    let progress = Progress {
        lines: meta_u64(&meta, "metrics_lines")? as usize,
        stage_start: meta_u64(&meta, "stage_start_steps")?,
        started_at: meta_u64(&meta, "started_at")?,
    };
    truncate_lines(&dir.join(METRICS_FILE), progress.lines)?;
    truncate_lines(&dir.join(SNAPSHOTS_FILE), progress.lines)?;
    drive(cfg, dir, trainer, progress)
}

/// Continues an interrupted run from its latest checkpoint. Metrics
/// written after that checkpoint are discarded and regenerated.
pub fn resume(dir: &Path) -> Result<RunManifest> {
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(HarnessError::MissingCheckpoint(dir.to_path_buf()));
    }
    let mut cfg = RunConfig::from_file(&cfg_path)?;
    cfg.out = Some(dir.to_path_buf());
    match cfg.dtype {
        Dtype::F64 => continue_run::<f64>(&cfg, dir),
        Dtype::F32 => continue_run::<f32>(&cfg, dir),
    }
}

/// Accepts a checkpoint directory or a run directory (then `final`, else
/// `latest`, is used).
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST_FILE).exists() && path.join(checkpoint::VALUES_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    for name in ["final", "latest"] {
        let p = path.join(CHECKPOINT_DIR).join(name);
        if p.join(MANIFEST_FILE).exists() {
            return Ok(p);
        }
    }
    Err(HarnessError::MissingCheckpoint(path.to_path_buf()))
}

fn eval_as<T: Scalar>(
    ckpt: &Path,
    episodes: usize,
    gated: bool,
    mode: ActMode,
    seed: u64,
) -> Result<EvalReport> {
    let (trainer, _) = load_trainer::<T>(ckpt, None)?;
    let summary = trainer.evaluate(episodes, gated, mode, seed)?;
    Ok(EvalReport {
        checkpoint: ckpt.to_path_buf(),
        gated,
        k: trainer.sparsity().k,
        graph: trainer.graph()?.rows(),
        summary,
    })
}

/// Evaluates a saved policy on the deterministic execution graph,
/// optionally with dynamic gating.
pub fn evaluate_checkpoint(
    path: &Path,
    episodes: usize,
    gated: bool,
    mode: ActMode,
    seed: u64,
) -> Result<EvalReport> {
    let ckpt = resolve_checkpoint(path)?;
    let manifest = checkpoint::read_manifest(&ckpt)?;
    match manifest.dtype.as_str() {
        "f32" => eval_as::<f32>(&ckpt, episodes, gated, mode, seed),
        _ => eval_as::<f64>(&ckpt, episodes, gated, mode, seed),
    }
}
