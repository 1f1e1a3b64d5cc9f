//! Resumable sweep execution.
//!
//! Layout of an output directory:
//!
//! ```text
//! config.toml         the effective configuration
//! manifest.json       per-cell stage digests and snapshot hashes
//! cells/<id>/         snapshots, metrics.csv, per_input.csv,
//!                     spatial.csv, spatial_per_input.csv
//! metrics.csv         merged records, cells in config order
//! per_input.csv       merged per-image PR values
//! accuracy.csv        clean test accuracy per snapshot
//! metrics.json        merged records with the configuration embedded
//! ```
//!
//! Every stage of a cell is keyed by a digest of the configuration it
//! depends on, so a rerun only recomputes what changed and an interrupted
//! sweep resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{CellKey, ExperimentConfig, SnapshotSelection};
use crate::error::{Error, Result};
use crate::metrics::{
    self, kl_divergence, participation_ratio, rotation_ratios, MetricsRecord, RotationBank,
    RotationSpec,
};
use crate::minors::{MinorCaps, MinorPlan};
use crate::mlp::{
    self, layer_jacobian, read_snapshot, write_snapshot, Layer, MlpParams, ModelSnapshot,
};
use crate::mnist::{MnistData, NormalizationSpec, IMAGE_PIXELS, IMAGE_SIDE};
use crate::seed::{self, tag};
use crate::spatial::{euclidean_ball_mask, patch_mask, SeparationConstraint, SpatialCondition};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PER_INPUT_CSV: &str = "per_input.csv";
pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const METRICS_JSON: &str = "metrics.json";
const SPATIAL_CSV: &str = "spatial.csv";
const SPATIAL_PER_INPUT_CSV: &str = "spatial_per_input.csv";

/// PR of one evaluation image, trained and at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerInputRecord {
    pub h: usize,
    pub seed: u64,
    pub regime: mlp::Regime,
    pub epoch: usize,
    pub layer: Layer,
    pub k: usize,
    pub condition: String,
    /// Index into the test split.
    pub input: usize,
    pub pr: f64,
    pub pr_init: f64,
    pub pr_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub h: usize,
    pub seed: u64,
    pub regime: mlp::Regime,
    pub epoch: usize,
    pub test_accuracy: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub epoch: usize,
    pub file: String,
    pub sha256: String,
    pub test_accuracy: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub train_digest: Option<String>,
    pub snapshots: Vec<SnapshotEntry>,
    pub analysis_digest: Option<String>,
    pub spatial_digest: Option<String>,
    /// Digest of the failed attempt and its error message.
    pub failure: Option<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cells: BTreeMap<String, CellEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub train: bool,
    pub analyze: bool,
    pub spatial: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        train: true,
        analyze: true,
        spatial: true,
    };
}

pub type ProgressFn = Arc<dyn Fn(&str) + Send + Sync>;

#[derive(Clone)]
pub struct RunOptions {
    pub stages: Stages,
    /// Stop after this many cells did any work (simulates interruption).
    pub max_new_cells: Option<usize>,
    /// Recompute analysis and spatial stages even when up to date.
    pub force_reanalysis: bool,
    pub progress: Option<ProgressFn>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            stages: Stages::ALL,
            max_new_cells: None,
            force_reanalysis: false,
            progress: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub completed: Vec<String>,
    pub failed: Vec<(String, String)>,
    /// Cells whose requested stages could not run (e.g. not yet trained).
    pub incomplete: Vec<String>,
    pub interrupted: bool,
}

impl RunSummary {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty() && self.incomplete.is_empty() && !self.interrupted
    }
}

/// The fixed evaluation images of one experiment, normalized.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub indices: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
}

/// First `n` entries of a seeded shuffle of `0..test_len`.
pub fn select_eval_indices(test_len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > test_len {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} evaluation images from {test_len}"
        )));
    }
    let mut all: Vec<usize> = (0..test_len).collect();
    all.shuffle(&mut seed::rng_from(seed, &[tag::EVAL_IMAGES]));
    all.truncate(n);
    Ok(all)
}

impl EvalSet {
    pub fn new(data: &MnistData, n: usize, seed: u64) -> Result<Self> {
        let indices = select_eval_indices(data.test_images.len(), n, seed)?;
        let norm = NormalizationSpec::MNIST;
        let inputs = indices
            .iter()
            .map(|&i| {
                data.test_images
                    .image(i)
                    .iter()
                    .map(|&p| norm.apply(p))
                    .collect()
            })
            .collect();
        Ok(EvalSet { indices, inputs })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn prefix(&self, n: usize) -> EvalSet {
        EvalSet {
            indices: self.indices[..n].to_vec(),
            inputs: self.inputs[..n].to_vec(),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for r in csv::Reader::from_reader(file).deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

fn jacobians(params: &MlpParams, eval: &EvalSet, layer: Layer) -> Vec<Array2<f64>> {
    eval.inputs
        .par_iter()
        .map(|x| layer_jacobian(params, x, layer).entries)
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn mean_zero_rows(js: &[Array2<f64>], tol: f64) -> Result<f64> {
    let fractions = js
        .iter()
        .map(|j| Ok(metrics::zero_row_fraction(j.view(), tol)?.fraction))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(fractions))
}

/// Minor values of one plan on every Jacobian.
fn evaluate_all(plan: &MinorPlan, js: &[Array2<f64>], chunk: usize) -> Result<Vec<Vec<f64>>> {
    js.iter().map(|j| plan.evaluate(j.view(), chunk)).collect()
}

struct Row<'a> {
    cell: CellKey,
    epoch: usize,
    layer: Layer,
    k: usize,
    condition: &'a str,
}

impl Row<'_> {
    fn per_input(&self, input: usize, pr: f64, pr_init: f64) -> PerInputRecord {
        PerInputRecord {
            h: self.cell.h,
            seed: self.cell.seed,
            regime: self.cell.regime,
            epoch: self.epoch,
            layer: self.layer,
            k: self.k,
            condition: self.condition.to_string(),
            input,
            pr,
            pr_init,
            pr_ratio: pr / pr_init,
        }
    }
}

/// Trained-vs-init comparison of per-image minor samples taken with
/// identical plans. Returns the pooled record fields and per-image rows.
fn compare(
    row: &Row<'_>,
    trained: &[Vec<f64>],
    init: &[Vec<f64>],
    indices: &[usize],
) -> Result<(f64, f64, f64, usize, Vec<PerInputRecord>)> {
    let pooled_t = trained.concat();
    let pooled_0 = init.concat();
    let pr = participation_ratio(&pooled_t)?;
    let pr_init = participation_ratio(&pooled_0)?;
    let kl = kl_divergence(&pooled_t, &pooled_0)?;
    let mut per_input = Vec::with_capacity(indices.len());
    for ((t, z), &idx) in trained.iter().zip(init).zip(indices) {
        per_input.push(row.per_input(idx, participation_ratio(t)?, participation_ratio(z)?));
    }
    Ok((pr, pr_init, kl, pooled_t.len(), per_input))
}

/// Unrestricted metrics for every snapshot, layer and order. `snapshots[0]`
/// must be the epoch-0 baseline.
pub fn analyze_cell(
    cfg: &ExperimentConfig,
    cell: CellKey,
    snapshots: &[ModelSnapshot],
    eval: &EvalSet,
) -> Result<(Vec<MetricsRecord>, Vec<PerInputRecord>)> {
    let init = baseline(snapshots)?;
    let h = cell.h;
    let caps = cfg.minors.caps();
    let chunk = cfg.minors.chunk;
    let plans = cfg
        .minors
        .ks
        .iter()
        .map(|&k| MinorPlan::sample(h, IMAGE_PIXELS, k, caps, cfg.minors.seed, None))
        .collect::<Result<Vec<_>>>()?;
    let plan_refs: Vec<&MinorPlan> = plans.iter().collect();
    let bank = if cfg.rotation.images > 0 {
        let spec = RotationSpec {
            count: cfg.rotation.count,
            seed: cfg.rotation.seed,
            side: cfg.rotation.side,
        };
        Some(RotationBank::new(&spec, h, IMAGE_PIXELS)?)
    } else {
        None
    };
    let n = eval.len();

    let mut records = Vec::new();
    let mut per_input = Vec::new();
    for layer in Layer::ALL {
        let j0 = jacobians(&init.params, eval, layer);
        let v0 = plans
            .iter()
            .map(|p| evaluate_all(p, &j0, chunk))
            .collect::<Result<Vec<_>>>()?;
        let kl_floor = v0
            .iter()
            .map(|v| {
                if n < 2 {
                    return Ok(None);
                }
                let (a, b) = v.split_at(n / 2);
                kl_divergence(&a.concat(), &b.concat()).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;

        for snap in snapshots {
            let js = if snap.epoch == 0 {
                j0.clone()
            } else {
                jacobians(&snap.params, eval, layer)
            };
            let zero_rows = mean_zero_rows(&js, cfg.zero_row_tol)?;
            let rotation = match &bank {
                Some(bank) => {
                    let per_image = js[..cfg.rotation.images]
                        .iter()
                        .map(|j| rotation_ratios(j.view(), &plan_refs, bank, chunk))
                        .collect::<Result<Vec<_>>>()?;
                    (0..plans.len())
                        .map(|p| {
                            Some((
                                mean(per_image.iter().map(|r| r[p].ratio)),
                                mean(per_image.iter().map(|r| r[p].reciprocal)),
                            ))
                        })
                        .collect()
                }
                None => vec![None; plans.len()],
            };
            for (p, plan) in plans.iter().enumerate() {
                let k = plan.order();
                let row = Row {
                    cell,
                    epoch: snap.epoch,
                    layer,
                    k,
                    condition: "full",
                };
                let vt = evaluate_all(plan, &js, chunk)?;
                let (pr, pr_init, kl, n_minors, rows) = compare(&row, &vt, &v0[p], &eval.indices)?;
                per_input.extend(rows);
                records.push(MetricsRecord {
                    h,
                    seed: cell.seed,
                    regime: cell.regime,
                    epoch: snap.epoch,
                    layer,
                    k,
                    condition: "full".into(),
                    pr,
                    pr_ratio: pr / pr_init,
                    kl,
                    rr: rotation[p].map(|r| r.0),
                    zero_row_fraction: zero_rows,
                    pr_init,
                    rr_inverse: rotation[p].map(|r| r.1),
                    kl_floor: kl_floor[p],
                    n_minors,
                    n_inputs: n,
                });
            }
        }
    }
    Ok((records, per_input))
}

fn baseline(snapshots: &[ModelSnapshot]) -> Result<&ModelSnapshot> {
    match snapshots.first() {
        Some(s) if s.epoch == 0 => Ok(s),
        _ => Err(Error::InvalidArgument(
            "analysis needs the epoch-0 baseline snapshot first".into(),
        )),
    }
}

/// Ball seed pixel for one (test image, repetition).
pub fn ball_center(spatial_seed: u64, input: usize, rep: usize) -> (usize, usize) {
    let mut rng = seed::rng_from(spatial_seed, &[tag::BALL, input as u64, rep as u64]);
    let f = rng.random_range(0..IMAGE_PIXELS);
    (f / IMAGE_SIDE, f % IMAGE_SIDE)
}

/// A spatial condition whose plan is shared by every image.
struct SharedCondition {
    label: String,
    plan: MinorPlan,
}

/// A layer with its trained and init Jacobians over the evaluation images.
type LayerJacobians = (Layer, Vec<Array2<f64>>, Vec<Array2<f64>>);

/// Spatially restricted metrics. Column tuples are restricted per
/// condition; trained and init Jacobians always share the plan.
pub fn spatial_cell(
    cfg: &ExperimentConfig,
    cell: CellKey,
    snapshots: &[ModelSnapshot],
    eval: &EvalSet,
) -> Result<(Vec<MetricsRecord>, Vec<PerInputRecord>)> {
    let s = &cfg.spatial;
    let init = baseline(snapshots)?;
    let eval = eval.prefix(cfg.spatial_images());
    let h = cell.h;
    let chunk = cfg.minors.chunk;
    let caps = MinorCaps {
        pair_budget: s.pair_budget,
        ..cfg.minors.caps()
    };
    let selected: Vec<&ModelSnapshot> = match s.snapshots {
        SnapshotSelection::All => snapshots.iter().collect(),
        SnapshotSelection::Final => vec![snapshots.last().expect("non-empty")],
    };

    let mut shared = Vec::new();
    for &region in &s.regions {
        for &k in &s.patch_ks {
            let cond = SpatialCondition::Mask(patch_mask(region));
            shared.push(SharedCondition {
                label: cond.label(),
                plan: cond.plan(h, k, caps, cfg.minors.seed)?,
            });
        }
    }
    for &d in &s.min_dists {
        for &k in &s.separated_ks {
            let cond = SpatialCondition::Separated(SeparationConstraint {
                k,
                min_dist: d,
                seed: seed::derive_seed(s.seed, &[k as u64, d.to_bits()]),
                sample_count: s.separated_samples,
            });
            shared.push(SharedCondition {
                label: cond.label(),
                plan: cond.plan(h, k, caps, cfg.minors.seed)?,
            });
        }
    }

    let mut records = Vec::new();
    let mut per_input = Vec::new();
    let n = eval.len();
    for snap in selected {
        // Per layer: (trained Jacobians, init Jacobians).
        let js: Vec<LayerJacobians> = s
            .layers
            .iter()
            .map(|&layer| {
                let j0 = jacobians(&init.params, &eval, layer);
                let jt = if snap.epoch == 0 {
                    j0.clone()
                } else {
                    jacobians(&snap.params, &eval, layer)
                };
                (layer, jt, j0)
            })
            .collect();
        let mut zero_rows = BTreeMap::new();
        for (layer, jt, _) in &js {
            zero_rows.insert(*layer, mean_zero_rows(jt, cfg.zero_row_tol)?);
        }
        let mut emit = |layer: Layer,
                        k: usize,
                        label: &str,
                        vt: Vec<Vec<f64>>,
                        v0: Vec<Vec<f64>>|
         -> Result<()> {
            let row = Row {
                cell,
                epoch: snap.epoch,
                layer,
                k,
                condition: label,
            };
            let (pr, pr_init, kl, n_minors, rows) = compare(&row, &vt, &v0, &eval.indices)?;
            per_input.extend(rows);
            records.push(MetricsRecord {
                h,
                seed: cell.seed,
                regime: cell.regime,
                epoch: snap.epoch,
                layer,
                k,
                condition: label.to_string(),
                pr,
                pr_ratio: pr / pr_init,
                kl,
                rr: None,
                zero_row_fraction: zero_rows[&layer],
                pr_init,
                rr_inverse: None,
                kl_floor: None,
                n_minors,
                n_inputs: n,
            });
            Ok(())
        };

        // Balls: a fresh plan per (image, repetition); an image's values
        // pool its repetitions.
        for &radius in &s.radii {
            for &k in &s.ball_ks {
                let mut vt: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; js.len()];
                let mut v0 = vt.clone();
                for (i, &input) in eval.indices.iter().enumerate() {
                    for rep in 0..s.ball_repetitions {
                        let mask = euclidean_ball_mask(ball_center(s.seed, input, rep), radius)?;
                        let plan_seed = seed::derive_seed(
                            cfg.minors.seed,
                            &[tag::BALL, input as u64, rep as u64],
                        );
                        let plan = SpatialCondition::Mask(mask).plan(h, k, caps, plan_seed)?;
                        for (l, (_, jt, j0)) in js.iter().enumerate() {
                            vt[l][i].extend(plan.evaluate(jt[i].view(), chunk)?);
                            v0[l][i].extend(plan.evaluate(j0[i].view(), chunk)?);
                        }
                    }
                }
                let label = format!("ball_r{radius}");
                for (l, (vt, v0)) in vt.into_iter().zip(v0).enumerate() {
                    emit(js[l].0, k, &label, vt, v0)?;
                }
            }
        }
        for cond in &shared {
            for (layer, jt, j0) in &js {
                let vt = evaluate_all(&cond.plan, jt, chunk)?;
                let v0 = evaluate_all(&cond.plan, j0, chunk)?;
                emit(*layer, cond.plan.order(), &cond.label, vt, v0)?;
            }
        }
    }
    Ok((records, per_input))
}

/// Sweep driver bound to one configuration and dataset.
pub struct Runner {
    cfg: ExperimentConfig,
    data: Arc<MnistData>,
    eval: EvalSet,
    dir: PathBuf,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, data: Arc<MnistData>) -> Result<Self> {
        cfg.validate()?;
        let eval = EvalSet::new(&data, cfg.eval_images, cfg.eval_seed)?;
        let dir = cfg.output_dir.clone();
        Ok(Runner {
            cfg,
            data,
            eval,
            dir,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn eval_set(&self) -> &EvalSet {
        &self.eval
    }

    pub fn output_dir(&self) -> &Path {
        &self.dir
    }

    pub fn cell_dir(&self, cell: CellKey) -> PathBuf {
        self.dir.join("cells").join(cell.id())
    }

    pub fn run(&self, opts: &RunOptions) -> Result<RunSummary> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_atomic(
            &self.dir.join("config.toml"),
            self.cfg.to_toml_string().as_bytes(),
        )?;
        let mut manifest = Manifest::load(&self.dir)?;
        let mut summary = RunSummary::default();
        let mut worked = 0usize;
        let say = |msg: &str| {
            if let Some(p) = &opts.progress {
                p(msg)
            }
        };

        for cell in self.cfg.cells() {
            let id = cell.id();
            if opts.max_new_cells.is_some_and(|m| worked >= m) {
                summary.interrupted = true;
                summary.incomplete.push(id);
                continue;
            }
            let mut entry = manifest.cells.get(&id).cloned().unwrap_or_default();
            let attempt = self.attempt_digest(cell);
            if let Some((digest, err)) = &entry.failure {
                if *digest == attempt && !opts.force_reanalysis {
                    say(&format!("{id}: previously failed ({err}), skipping"));
                    summary.failed.push((id, err.clone()));
                    continue;
                }
            }
            match self.run_cell(cell, &mut entry, opts, &mut manifest, &say) {
                Ok(CellOutcome { did_work, done }) => {
                    worked += usize::from(did_work);
                    if done {
                        summary.completed.push(id);
                    } else {
                        summary.incomplete.push(id);
                    }
                }
                // Unwritable output is fatal for the whole sweep.
                Err(e @ Error::Io { .. }) => return Err(e),
                Err(e) => {
                    worked += 1;
                    say(&format!("{id}: failed: {e}"));
                    if let Some(current) = manifest.cells.get(&id) {
                        entry = current.clone();
                    }
                    entry.failure = Some((attempt, e.to_string()));
                    manifest.cells.insert(id.clone(), entry);
                    manifest.save(&self.dir)?;
                    summary.failed.push((id, e.to_string()));
                }
            }
        }
        self.merge(&manifest)?;
        Ok(summary)
    }

    fn attempt_digest(&self, cell: CellKey) -> String {
        let mut d = self.cfg.analysis_digest(cell);
        if self.cfg.spatial.enabled {
            d.push('/');
            d.push_str(&self.cfg.spatial_digest(cell));
        }
        d
    }

    fn snapshot_path(&self, cell: CellKey, epoch: usize) -> PathBuf {
        self.cell_dir(cell)
            .join(format!("snapshot_e{epoch:04}.bin"))
    }

    /// Snapshots recorded in the manifest, verified against their hashes.
    fn load_snapshots(&self, cell: CellKey, entry: &CellEntry) -> Option<Vec<ModelSnapshot>> {
        if entry.train_digest.as_deref() != Some(&self.cfg.train_digest(cell))
            || entry.snapshots.is_empty()
        {
            return None;
        }
        let mut out = Vec::with_capacity(entry.snapshots.len());
        for s in &entry.snapshots {
            let (snap, digest) = read_snapshot(self.cell_dir(cell).join(&s.file)).ok()?;
            if digest != s.sha256 || snap.epoch != s.epoch {
                return None;
            }
            out.push(snap);
        }
        Some(out)
    }

    fn train_cell(&self, cell: CellKey, say: &dyn Fn(&str)) -> Result<CellEntry> {
        let tc = self.cfg.train_config(cell);
        let (images, labels) = match self.cfg.train_limit {
            Some(n) if n < self.data.train_images.len() => {
                let idx: Vec<usize> = (0..n).collect();
                (
                    self.data.train_images.select(&idx),
                    self.data.train_labels.select(&idx),
                )
            }
            _ => (
                self.data.train_images.clone(),
                self.data.train_labels.clone(),
            ),
        };
        let params = mlp::init_params(cell.h, cell.seed)?;
        let id = cell.id();
        let run = mlp::train_with_progress(params, &images, &labels, &tc, |r| {
            say(&format!("{id}: epoch {} loss {:.5}", r.epoch, r.loss))
        })?;
        let dir = self.cell_dir(cell);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut snapshots = Vec::with_capacity(run.snapshots.len());
        for snap in &run.snapshots {
            let path = self.snapshot_path(cell, snap.epoch);
            let sha256 = write_snapshot(&path, snap)?;
            let test_accuracy = mlp::accuracy(
                &snap.params,
                &self.data.test_images,
                &self.data.test_labels,
                tc.normalization(),
            )?;
            snapshots.push(SnapshotEntry {
                epoch: snap.epoch,
                file: path.file_name().unwrap().to_string_lossy().into_owned(),
                sha256,
                test_accuracy,
                train_loss: run.losses[snap.epoch],
            });
        }
        say(&format!(
            "{id}: trained, final test accuracy {:.4}",
            snapshots.last().map_or(f64::NAN, |s| s.test_accuracy)
        ));
        Ok(CellEntry {
            train_digest: Some(self.cfg.train_digest(cell)),
            snapshots,
            ..CellEntry::default()
        })
    }

    fn run_cell(
        &self,
        cell: CellKey,
        entry: &mut CellEntry,
        opts: &RunOptions,
        manifest: &mut Manifest,
        say: &dyn Fn(&str),
    ) -> Result<CellOutcome> {
        let id = cell.id();
        let dir = self.cell_dir(cell);
        let mut did_work = false;
        let mut snapshots = self.load_snapshots(cell, entry);
        if snapshots.is_none() {
            if !opts.stages.train {
                return Ok(CellOutcome {
                    did_work,
                    done: false,
                });
            }
            *entry = self.train_cell(cell, say)?;
            did_work = true;
            manifest.cells.insert(id.clone(), entry.clone());
            manifest.save(&self.dir)?;
            snapshots = Some(self.load_snapshots(cell, entry).ok_or_else(|| {
                Error::Snapshot(format!("{id}: snapshots unreadable right after writing"))
            })?);
        }
        let snapshots = snapshots.expect("trained");

        let stale = |current: &Option<String>, wanted: &str, file: &str| {
            opts.force_reanalysis || current.as_deref() != Some(wanted) || !dir.join(file).exists()
        };
        let mut done = true;
        let analysis_digest = self.cfg.analysis_digest(cell);
        if stale(&entry.analysis_digest, &analysis_digest, METRICS_CSV) {
            if opts.stages.analyze {
                say(&format!("{id}: analyzing {} snapshots", snapshots.len()));
                let (records, per_input) = analyze_cell(&self.cfg, cell, &snapshots, &self.eval)?;
                write_csv(&dir.join(METRICS_CSV), &records)?;
                write_csv(&dir.join(PER_INPUT_CSV), &per_input)?;
                entry.analysis_digest = Some(analysis_digest);
                did_work = true;
                manifest.cells.insert(id.clone(), entry.clone());
                manifest.save(&self.dir)?;
            } else {
                done = false;
            }
        }
        if self.cfg.spatial.enabled {
            let spatial_digest = self.cfg.spatial_digest(cell);
            if stale(&entry.spatial_digest, &spatial_digest, SPATIAL_CSV) {
                if opts.stages.spatial {
                    say(&format!("{id}: spatial conditions"));
                    let (records, per_input) =
                        spatial_cell(&self.cfg, cell, &snapshots, &self.eval)?;
                    write_csv(&dir.join(SPATIAL_CSV), &records)?;
                    write_csv(&dir.join(SPATIAL_PER_INPUT_CSV), &per_input)?;
                    entry.spatial_digest = Some(spatial_digest);
                    did_work = true;
                    manifest.cells.insert(id.clone(), entry.clone());
                    manifest.save(&self.dir)?;
                } else {
                    done = false;
                }
            }
        }
        entry.failure = None;
        manifest.cells.insert(id, entry.clone());
        manifest.save(&self.dir)?;
        Ok(CellOutcome { did_work, done })
    }

    /// Rewrites the merged tables from every cell whose outputs are current.
    fn merge(&self, manifest: &Manifest) -> Result<()> {
        let mut records: Vec<MetricsRecord> = Vec::new();
        let mut per_input: Vec<PerInputRecord> = Vec::new();
        let mut accuracy = Vec::new();
        for cell in self.cfg.cells() {
            let Some(entry) = manifest.cells.get(&cell.id()) else {
                continue;
            };
            if entry.train_digest.as_deref() != Some(&self.cfg.train_digest(cell)) {
                continue;
            }
            for s in &entry.snapshots {
                accuracy.push(AccuracyRecord {
                    h: cell.h,
                    seed: cell.seed,
                    regime: cell.regime,
                    epoch: s.epoch,
                    test_accuracy: s.test_accuracy,
                    train_loss: s.train_loss,
                });
            }
            let dir = self.cell_dir(cell);
            if entry.analysis_digest.as_deref() == Some(&self.cfg.analysis_digest(cell)) {
                records.extend(read_csv::<MetricsRecord>(&dir.join(METRICS_CSV))?);
                per_input.extend(read_csv::<PerInputRecord>(&dir.join(PER_INPUT_CSV))?);
            }
            if self.cfg.spatial.enabled
                && entry.spatial_digest.as_deref() == Some(&self.cfg.spatial_digest(cell))
            {
                records.extend(read_csv::<MetricsRecord>(&dir.join(SPATIAL_CSV))?);
                per_input.extend(read_csv::<PerInputRecord>(
                    &dir.join(SPATIAL_PER_INPUT_CSV),
                )?);
            }
        }
        write_csv(&self.dir.join(METRICS_CSV), &records)?;
        write_csv(&self.dir.join(PER_INPUT_CSV), &per_input)?;
        write_csv(&self.dir.join(ACCURACY_CSV), &accuracy)?;
        let json = serde_json::json!({ "config": self.cfg, "records": records });
        write_atomic(
            &self.dir.join(METRICS_JSON),
            &serde_json::to_vec_pretty(&json)?,
        )
    }
}

struct CellOutcome {
    did_work: bool,
    done: bool,
}
