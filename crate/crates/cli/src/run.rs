//! Run directories: preparing data, training with checkpoints, evaluating.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use rna_core::checkpoint::Checkpoint;
use rna_core::data::{assign_class_groups, DatasetBundle};
use rna_core::evaluation::{evaluate, ScoreTable};
use rna_core::metrics::{dsv, text_table, DetectionMetrics, MetricsReport};
use rna_core::model::ModelBundle;
use rna_core::training::{probe_norm_stats, DiagnosticsSeries, Trainer};
use rna_core::Scalar;

use crate::config::{Dtype, ExperimentConfig};
use crate::dataset::{self, Prepared};

/// Histogram bins for the persisted representation-norm distributions.
const NORM_BINS: usize = 30;
/// Images per split used for the norm histograms.
const NORM_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepared,
    Training,
    Trained,
    Evaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub digest: String,
    pub stage: Stage,
    pub epochs_completed: usize,
    pub epochs_total: usize,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn digest(&self) -> PathBuf {
        self.root.join("digest")
    }
    pub fn status_path(&self) -> PathBuf {
        self.root.join("status.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("records")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn status(&self) -> Result<Option<Status>> {
        let p = self.status_path();
        if !p.exists() {
            return Ok(None);
        }
        let s = serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("unreadable {}", p.display()))?;
        Ok(Some(s))
    }

    fn write_status(&self, status: &Status) -> Result<()> {
        write_atomic(&self.status_path(), &(serde_json::to_string_pretty(status)? + "\n"))
    }

    /// Latest checkpoint by epoch number, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut best: Option<(usize, PathBuf)> = None;
        for e in fs::read_dir(&dir)? {
            let p = e?.path();
            let Some(epoch) = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("epoch-"))
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<usize>().ok())
            else {
                continue;
            };
            if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
                best = Some((epoch, p));
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Whether an existing run directory may be reused, resumed or replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reuse {
    Fresh,
    Resume,
}

/// Creates or vets the run directory and pins the config in it.
///
/// A directory holding a different digest, or a finished run with the same
/// digest, is only replaced with `force`.
pub fn open_run(cfg: &ExperimentConfig, dir: &RunDir, force: bool) -> Result<Reuse> {
    let digest = cfg.digest();
    let mut reuse = Reuse::Fresh;
    if dir.digest().exists() {
        let old = fs::read_to_string(dir.digest())?.trim().to_string();
        let finished = matches!(dir.status()?, Some(Status { stage: Stage::Trained | Stage::Evaluated, .. }));
        if old != digest {
            if !force {
                bail!(
                    "{} holds a run with config digest {old}, not {digest}; pass --force to replace it",
                    dir.root.display()
                );
            }
            warn!("replacing run with digest {old}");
            fs::remove_dir_all(&dir.root)?;
        } else if finished && force {
            warn!("--force: discarding the finished run in {}", dir.root.display());
            fs::remove_dir_all(&dir.root)?;
        } else {
            reuse = Reuse::Resume;
        }
    }
    fs::create_dir_all(&dir.root)?;
    fs::write(dir.config(), cfg.to_toml())?;
    fs::write(dir.digest(), format!("{digest}\n"))?;
    Ok(reuse)
}

/// Builds the data and writes (or checks) `data/`.
pub fn prepare_data<T: Scalar>(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Prepared<T>> {
    let mut prepared = dataset::prepare::<T>(cfg)?;
    dataset::check_manifest(&prepared.manifest, &dir.data())?;
    dataset::write_artifacts(&prepared, &dir.data())?;
    if let Some(filter) = &cfg.eval.ood_tests {
        for name in filter {
            if !prepared.data.ood_tests.contains_key(name) {
                warn!("eval.ood_tests: no OOD test set named {name:?}; skipped");
            }
        }
        prepared.data.ood_tests.retain(|k, _| filter.contains(k));
        if prepared.data.ood_tests.is_empty() {
            bail!("eval.ood_tests selects none of the available OOD test sets");
        }
    }
    info!(
        "data: {} training images {:?}, {} auxiliary, OOD tests {:?}",
        prepared.data.id_train.len(),
        prepared.manifest.train_counts,
        prepared.data.aux_ood.len(),
        prepared.manifest.ood_tests
    );
    Ok(prepared)
}

fn checkpoint_path(dir: &RunDir, epoch: usize) -> PathBuf {
    dir.checkpoints().join(format!("epoch-{epoch:04}.json"))
}

fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_series(dir: &RunDir, series: &DiagnosticsSeries) -> Result<()> {
    fs::create_dir_all(dir.records())?;
    write_jsonl(&dir.records().join("epochs.jsonl"), &series.epochs)?;
    write_jsonl(&dir.records().join("steps.jsonl"), &series.steps)
}

/// Trains to completion, resuming from the latest checkpoint when allowed.
pub fn train<T: Scalar>(cfg: &ExperimentConfig, dir: &RunDir, data: &DatasetBundle<T>, reuse: Reuse) -> Result<()> {
    let digest = cfg.digest();
    let tcfg = cfg.train_config();
    let total = tcfg.optim.epochs;
    let latest = if reuse == Reuse::Resume { dir.latest_checkpoint()? } else { None };
    let (mut model, mut trainer) = match latest {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            let model = ck.restore::<T>(Some(&digest))?;
            let (Some(state), Some(series)) = (ck.optimizer.clone(), ck.series.clone()) else {
                bail!("{} lacks optimizer state; cannot resume", path.display());
            };
            info!("resuming from {} after epoch {}", path.display(), ck.epoch);
            (model, Trainer::resume(data, tcfg, state, series, ck.epoch)?)
        }
        None => {
            if dir.checkpoints().exists() {
                fs::remove_dir_all(dir.checkpoints())?;
            }
            let mcfg = cfg.model_config(data.shape(), data.num_classes);
            let model = ModelBundle::<T>::new(mcfg, data.prior()?, cfg.model.init_seed)?;
            (model, Trainer::new(data, tcfg)?)
        }
    };
    fs::create_dir_all(dir.checkpoints())?;
    let every = cfg.train.checkpoint_every;
    let mut status = Status {
        digest: digest.clone(),
        stage: Stage::Training,
        epochs_completed: trainer.next_epoch(),
        epochs_total: total,
    };
    dir.write_status(&status)?;
    trainer.run_with(&mut model, |t, m| {
        let done = t.next_epoch();
        if let Some(r) = t.series.epochs.last() {
            info!("epoch {done}/{total}: loss {:.4} lr {:.2e}", r.mean_loss, r.lr);
        }
        if done % every == 0 || done == total {
            let ck = Checkpoint::capture(m, &digest, done, Some(t.optimizer_state()), Some(&t.series));
            ck.save(&checkpoint_path(dir, done))?;
            write_series(dir, &t.series).map_err(|e| rna_core::RnaError::Io(e.to_string()))?;
            status.epochs_completed = done;
            dir.write_status(&status).map_err(|e| rna_core::RnaError::Io(e.to_string()))?;
        }
        Ok(())
    })?;
    write_series(dir, &trainer.series)?;
    status.stage = Stage::Trained;
    status.epochs_completed = total;
    dir.write_status(&status)?;
    Ok(())
}

/// Loads the final checkpoint and writes everything under `eval/`.
pub fn evaluate_run<T: Scalar>(cfg: &ExperimentConfig, dir: &RunDir, data: &DatasetBundle<T>) -> Result<MetricsReport> {
    let digest = cfg.digest();
    let total = cfg.optim.epochs;
    let path = checkpoint_path(dir, total);
    if !path.exists() {
        bail!("{} has no final checkpoint (epoch {total}); train first", dir.root.display());
    }
    let ck = Checkpoint::load(&path)?;
    let model = ck.restore::<T>(Some(&digest))?;
    let groups = assign_class_groups(&data.train_counts())?;
    let (table, mut report) = evaluate(&model, data, &groups, &cfg.eval_config())?;
    let meta = &mut report.metadata;
    meta.insert("run_id".into(), cfg.run_id.clone());
    meta.insert("config_digest".into(), digest.clone());
    meta.insert("method".into(), cfg.loss.method_name());
    meta.insert("imbalance_ratio".into(), cfg.dataset.imbalance_ratio.to_string());
    meta.insert("bn_affine".into(), cfg.bn_affine().to_string());
    meta.insert("dtype".into(), format!("{:?}", cfg.model.dtype).to_lowercase());
    meta.insert("checkpoint_epoch".into(), ck.epoch.to_string());
    meta.insert("score_convention".into(), "larger score means more likely OOD".into());

    let out = dir.eval();
    fs::create_dir_all(&out)?;
    write_tables(&table, &out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join("summary.tsv"), report.to_dsv('\t'))?;
    let mut text = format!("{} ({})\n", cfg.run_id, cfg.loss.method_name());
    text.push_str(&report.to_text_table());
    fs::write(out.join("summary.txt"), text)?;
    let grids: [(&str, fn(&DetectionMetrics) -> f64); 3] =
        [("auc", |m| m.auc), ("aupr", |m| m.aupr), ("fpr95", |m| m.fpr95)];
    for (name, metric) in grids {
        let (header, rows) = report.grid_rows(metric);
        fs::write(out.join(format!("grid_{name}.tsv")), dsv(&header, &rows, '\t'))?;
        fs::write(out.join(format!("grid_{name}.txt")), text_table(&header, &rows))?;
    }
    let norms = probe_norm_stats(&model, data, NORM_LIMIT, NORM_BINS)?;
    fs::write(out.join("norms.json"), serde_json::to_string_pretty(&norms)? + "\n")?;

    if let Some(mut status) = dir.status()? {
        status.stage = Stage::Evaluated;
        dir.write_status(&status)?;
    }
    Ok(report)
}

fn write_tables(table: &ScoreTable, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("scores.csv"))?;
    w.write_record(["sample", "domain", "label", "scorer", "score"])?;
    for r in &table.scores {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([r.sample.to_string(), r.domain.clone(), label, r.scorer.name().to_string(), repr(r.score)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    w.write_record(["sample", "label", "prediction", "confidence"])?;
    for p in &table.predictions {
        w.write_record([p.sample.to_string(), p.label.to_string(), p.prediction.to_string(), repr(p.confidence)])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
fn repr(v: f64) -> String {
    format!("{v:?}")
}

/// What a subcommand should do after the data are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Prepare,
    Train,
    Evaluate,
    Full,
}

fn execute_typed<T: Scalar>(cfg: &ExperimentConfig, dir: &RunDir, action: Action, force: bool) -> Result<Option<MetricsReport>> {
    match action {
        Action::Prepare => {
            open_prepare(cfg, dir, force)?;
            prepare_data::<T>(cfg, dir)?;
            Ok(None)
        }
        Action::Train | Action::Full => {
            let reuse = open_run(cfg, dir, force)?;
            if reuse == Reuse::Resume && matches!(dir.status()?, Some(Status { stage: Stage::Trained | Stage::Evaluated, .. })) {
                bail!(
                    "{} already holds a finished run with this config; pass --force to retrain",
                    dir.root.display()
                );
            }
            let prepared = prepare_data::<T>(cfg, dir)?;
            train(cfg, dir, &prepared.data, reuse)?;
            if action == Action::Full {
                return evaluate_run(cfg, dir, &prepared.data).map(Some);
            }
            Ok(None)
        }
        Action::Evaluate => {
            check_digest(cfg, dir)?;
            let prepared = prepare_data::<T>(cfg, dir)?;
            evaluate_run(cfg, dir, &prepared.data).map(Some)
        }
    }
}

fn open_prepare(cfg: &ExperimentConfig, dir: &RunDir, force: bool) -> Result<()> {
    let reuse = open_run(cfg, dir, force)?;
    if reuse == Reuse::Fresh {
        dir.write_status(&Status {
            digest: cfg.digest(),
            stage: Stage::Prepared,
            epochs_completed: 0,
            epochs_total: cfg.optim.epochs,
        })?;
    }
    Ok(())
}

fn check_digest(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let path = dir.digest();
    let old = fs::read_to_string(&path).with_context(|| format!("{} is not a run directory", dir.root.display()))?;
    if old.trim() != cfg.digest() {
        bail!(
            "config digest {} does not match the run in {} ({})",
            cfg.digest(),
            dir.root.display(),
            old.trim()
        );
    }
    Ok(())
}

/// Dispatches on the configured numeric precision.
pub fn execute(cfg: &ExperimentConfig, dir: &RunDir, action: Action, force: bool) -> Result<Option<MetricsReport>> {
    match cfg.model.dtype {
        Dtype::F32 => execute_typed::<f32>(cfg, dir, action, force),
        Dtype::F64 => execute_typed::<f64>(cfg, dir, action, force),
    }
}
