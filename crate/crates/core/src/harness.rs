//! Config-driven training, evaluation, sweeps and the rendering benchmark.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{train_flops, FlopMode, DEFAULT_BACKWARD_MULTIPLIER};
use crate::models::{episode_batches, ContextBatch, Model, ModelConfig, PerceptualNet, TargetBatch};
use crate::scaling::{read_run_log, write_run_log, RunLogRecord};
use crate::scenegen::{
    assert_disjoint, generate_scene, orbit_trajectory, read_dataset, sample_episode, scene_seeds, Episode, Image,
    SceneDataset, TrajectoryConfig,
};
use crate::tensor::{lr_at_step, write_checkpoint, OptimizerConfig, OptimizerState, Precision, Scalar, Tape};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;
/// Seed of the held-out episode draw, shared by every run.
pub const EVAL_EPISODE_SEED: u64 = 7_919;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MIN_WARMUP_ITERS: usize = 5;
pub const MIN_TIMED_ITERS: usize = 20;
/// Timing coefficient of variation above which a bench is flagged.
pub const UNSTABLE_CV: f64 = 0.2;

/// Where training scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Pre-rendered dataset; generated from the seeds below when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_train_scenes")]
    pub train_scenes: usize,
    /// First training scene seed. A dataset file must have been generated
    /// from this base.
    #[serde(default)]
    pub train_seed_base: u64,
    #[serde(default = "default_eval_seed_base")]
    pub eval_seed_base: u64,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
}

fn default_train_scenes() -> usize {
    256
}

fn default_eval_seed_base() -> u64 {
    1_000_000
}

impl DataConfig {
    pub fn synthetic(height: usize, width: usize, train_scenes: usize) -> Self {
        DataConfig {
            path: None,
            height,
            width,
            train_scenes,
            train_seed_base: 0,
            eval_seed_base: default_eval_seed_base(),
            trajectory: TrajectoryConfig::default(),
        }
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        scene_seeds(self.train_seed_base, self.train_scenes)
    }

    pub fn eval_seeds(&self, count: usize) -> Vec<u64> {
        scene_seeds(self.eval_seed_base, count)
    }

    /// Loads or renders the training scenes.
    pub fn load(&self) -> Result<SceneDataset> {
        let data = match &self.path {
            Some(p) => read_dataset(p)?,
            None => SceneDataset::generate(&self.train_seeds(), &self.trajectory, self.height, self.width)?,
        };
        if (data.height, data.width) != (self.height, self.width) {
            return Err(Error::config(format!(
                "dataset is {}x{}, config says {}x{}",
                data.height, data.width, self.height, self.width
            )));
        }
        if data.scenes.len() != self.train_scenes {
            return Err(Error::config(format!(
                "dataset holds {} scenes, config says {}",
                data.scenes.len(),
                self.train_scenes
            )));
        }
        Ok(data)
    }
}

fn default_eval_scenes() -> usize {
    64
}

fn default_warmup_fraction() -> Option<f64> {
    Some(0.03)
}

fn default_precision() -> Precision {
    Precision::F32
}

fn one() -> u64 {
    1
}

/// One training run, read from a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub vc: usize,
    pub vt: usize,
    /// Scenes per step.
    pub batch: usize,
    /// Declared `batch * vt`, checked when present.
    #[serde(default)]
    pub effective_batch: Option<usize>,
    pub steps: u64,
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    pub eval_every: u64,
    #[serde(default = "one")]
    pub log_every: u64,
    #[serde(default = "default_eval_scenes")]
    pub eval_scene_count: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Warmup as a fraction of `steps`; `null` uses `optimizer.warmup_steps`.
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: Option<f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_resolution(self.data.height, self.data.width)?;
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config(format!("run_id {:?} is not a plain name", self.run_id)));
        }
        if self.vc == 0 || self.vt == 0 || self.batch == 0 {
            return Err(Error::config("vc, vt and batch must be at least 1"));
        }
        if let Some(b) = self.effective_batch {
            if b != self.batch * self.vt {
                return Err(Error::config(format!(
                    "effective_batch {b} != batch {} * vt {}",
                    self.batch, self.vt
                )));
            }
        }
        if self.steps == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::config("steps, eval_every and log_every must be positive"));
        }
        if self.eval_scene_count == 0 {
            return Err(Error::config("eval_scene_count must be positive"));
        }
        if self.vc + self.vt > self.data.trajectory.window {
            return Err(Error::config(format!(
                "vc + vt = {} exceeds the trajectory window {}",
                self.vc + self.vt,
                self.data.trajectory.window
            )));
        }
        if let Some(f) = self.warmup_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("warmup_fraction {f} outside [0, 1]")));
            }
        }
        self.warmup_steps().and_then(|w| lr_at_step(0, 1.0, w, self.steps)).map(|_| ())?;
        assert_disjoint(&self.data.train_seeds(), &self.data.eval_seeds(self.eval_scene_count))
    }

    pub fn warmup_steps(&self) -> Result<u64> {
        Ok(match self.warmup_fraction {
            Some(f) => (f * self.steps as f64).round() as u64,
            None => self.optimizer.warmup_steps,
        })
    }

    /// Target views rendered after `step` steps.
    pub fn samples_at(&self, step: u64) -> u64 {
        (self.batch * self.vt) as u64 * step
    }

    /// Cumulative training compute after `step` steps, paper convention.
    pub fn flops_at(&self, step: u64) -> Result<u128> {
        train_flops(
            &self.model,
            self.vc,
            self.vt,
            self.batch,
            step,
            self.data.height,
            self.data.width,
            FlopMode::Paper,
            DEFAULT_BACKWARD_MULTIPLIER,
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

/// Reconstruction metrics over a set of episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub mse: f64,
    /// Mean per-image PSNR.
    pub psnr: f64,
    pub ssim: f64,
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn image_mse(a: &Image, b: &Image) -> f64 {
    let n = a.data.len() as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n
}

fn luminance(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
        .collect()
}

/// Mean SSIM over all valid 7x7 windows of the luminance channel, with
/// sample covariances. Images smaller than the window use one window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim(format!(
            "ssim: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (x, y) = (luminance(a), luminance(b));
    let (wh, ww) = (SSIM_WINDOW.min(a.height), SSIM_WINDOW.min(a.width));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = (wh * ww) as f64;
    let cov_norm = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=a.height - wh {
        for c in 0..=a.width - ww {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + wh {
                for j in c..c + ww {
                    let (u, v) = (x[i * a.width + j], y[i * a.width + j]);
                    sx += u;
                    sy += v;
                    sxx += u * u;
                    syy += v * v;
                    sxy += u * v;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx) * cov_norm;
            let vy = (syy / n - my * my) * cov_norm;
            let cxy = (sxy / n - mx * my) * cov_norm;
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Held-out episodes, one per evaluation scene, identical across runs.
pub fn eval_episodes(config: &ExperimentConfig) -> Result<Vec<Episode>> {
    let seeds = config.data.eval_seeds(config.eval_scene_count);
    assert_disjoint(&config.data.train_seeds(), &seeds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_EPISODE_SEED);
    seeds
        .iter()
        .map(|&s| {
            let traj = orbit_trajectory(&config.data.trajectory, s)?;
            sample_episode(
                &generate_scene(s),
                &traj,
                config.vc,
                config.vt,
                config.data.height,
                config.data.width,
                &mut rng,
            )
        })
        .collect()
}

const EVAL_CHUNK: usize = 8;

/// Loss, MSE, PSNR and SSIM of `model` on `episodes`.
pub fn evaluate<T: Scalar>(model: &Model<T>, episodes: &[Episode], net: &PerceptualNet<T>) -> Result<EvalMetrics> {
    if episodes.is_empty() {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let c = &model.config;
    let (mut loss, mut mse, mut psnr_sum, mut ssim_sum, mut images) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let (ctx, tgt) = episode_batches::<T>(c, chunk)?;
        let mut tape = Tape::inference();
        let vars = model.bind(&mut tape, false);
        let pred = model.predict_on(&mut tape, &vars, &ctx, &tgt)?;
        let pred_val = tape.value(pred).clone();
        let gt = tape.constant(tgt.images.clone().expect("supervised batch"));
        let geom = (tgt.batch * tgt.views, tgt.height, tgt.width, tgt.patch);
        let l = crate::models::training_loss(&mut tape, pred, gt, geom, T::of(crate::models::PERCEPTUAL_WEIGHT), net)?;
        let n_img = tgt.batch * tgt.views;
        loss += tape.value(l).item().as_f64() * n_img as f64;
        let rendered = model.to_images(&pred_val, tgt.height, tgt.width)?;
        let truth = chunk.iter().flat_map(|e| e.targets.iter().map(|v| &v.image));
        for (p, g) in rendered.iter().zip(truth) {
            let m = image_mse(p, g);
            mse += m;
            psnr_sum += psnr(m);
            ssim_sum += ssim(p, g)?;
        }
        images += n_img;
    }
    let n = images as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        mse: mse / n,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
    })
}

/// A trained model in the precision it was trained in.
#[derive(Clone)]
pub enum TrainedModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl TrainedModel {
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        match self {
            TrainedModel::F32(m) => write_checkpoint(path, &m.to_checkpoint()),
            TrainedModel::F64(m) => write_checkpoint(path, &m.to_checkpoint()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TrainedModel::F32(m) => m.param_count(),
            TrainedModel::F64(m) => m.param_count(),
        }
    }
}

pub struct TrainOutcome {
    pub records: Vec<RunLogRecord>,
    pub model: TrainedModel,
}

/// Trains one run, generating or loading its data.
pub fn train_run(config: &ExperimentConfig, sink: &mut dyn FnMut(&RunLogRecord) -> Result<()>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = config.data.load()?;
    train_run_with_data(config, &data, sink)
}

/// Trains one run on already loaded scenes. `sink` sees every record as it
/// is produced; a non-finite loss ends the run after a diagnostic record.
pub fn train_run_with_data(
    config: &ExperimentConfig,
    data: &SceneDataset,
    sink: &mut dyn FnMut(&RunLogRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    match config.precision {
        Precision::F32 => train_typed::<f32>(config, data, sink).map(|(r, m)| TrainOutcome {
            records: r,
            model: TrainedModel::F32(m),
        }),
        Precision::F64 => train_typed::<f64>(config, data, sink).map(|(r, m)| TrainOutcome {
            records: r,
            model: TrainedModel::F64(m),
        }),
    }
}

fn train_typed<T: Scalar>(
    config: &ExperimentConfig,
    data: &SceneDataset,
    sink: &mut dyn FnMut(&RunLogRecord) -> Result<()>,
) -> Result<(Vec<RunLogRecord>, Model<T>)> {
    let start = Instant::now();
    let mut model = Model::<T>::new(config.model.clone(), config.seed)?;
    let net = PerceptualNet::<T>::standard();
    let eval_set = eval_episodes(config)?;
    let warmup = config.warmup_steps()?;
    let mut opt = OptimizerState::new(config.optimizer.clone(), model.params(), model.decay_exempt());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let n_params = model.param_count() as u64;
    let mut records = Vec::new();

    let mut emit = |step: u64, train_loss: f64, eval: Option<EvalMetrics>, records: &mut Vec<RunLogRecord>| -> Result<()> {
        let r = RunLogRecord {
            run_id: config.run_id.clone(),
            family: config.model.family.to_string(),
            n: n_params,
            step,
            d: config.samples_at(step),
            flops: config.flops_at(step)?,
            train_loss,
            eval_loss: eval.map_or(f64::NAN, |e| e.loss),
            eval_psnr: eval.map_or(f64::NAN, |e| e.psnr),
            eval_ssim: eval.map_or(f64::NAN, |e| e.ssim),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        sink(&r)?;
        records.push(r);
        Ok(())
    };

    emit(0, f64::NAN, Some(evaluate(&model, &eval_set, &net)?), &mut records)?;
    let mut recent = Vec::with_capacity(config.log_every as usize);
    for step in 0..config.steps {
        let episodes = (0..config.batch)
            .map(|_| {
                let scene = rng.gen_range(0..data.scenes.len());
                data.episode(scene, config.vc, config.vt, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (ctx, tgt) = episode_batches::<T>(&config.model, &episodes)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let loss = model.loss_on(&mut tape, &vars, &ctx, &tgt, &net)?;
        let value = tape.value(loss).item().as_f64();
        let done = step + 1;
        if !value.is_finite() {
            log::error!("{}: loss {value} at step {done}", config.run_id);
            emit(done, value, None, &mut records)?;
            return Err(Error::NonFiniteLoss {
                run_id: config.run_id.clone(),
                step: done,
            });
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
        let lr = lr_at_step(step, config.optimizer.peak_lr, warmup, config.steps)?;
        opt.step(model.params_mut(), &grads, lr)?;
        recent.push(value);

        let eval_now = done % config.eval_every == 0 || done == config.steps;
        if done % config.log_every == 0 || eval_now {
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            recent.clear();
            let eval = if eval_now { Some(evaluate(&model, &eval_set, &net)?) } else { None };
            if let Some(e) = eval {
                log::info!(
                    "{} step {done}: train {mean:.5} eval {:.5} psnr {:.2}",
                    config.run_id,
                    e.loss,
                    e.psnr
                );
            }
            emit(done, mean, eval, &mut records)?;
        }
    }
    Ok((records, model))
}

/// Model variants crossed with step counts, batch shapes and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub models: Vec<ModelVariant>,
    #[serde(default)]
    pub steps: Vec<u64>,
    /// `[batch, vt]` pairs.
    #[serde(default)]
    pub batch_views: Vec<[usize; 2]>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Training FLOP budgets. When set they replace `steps`: each run trains
    /// for as many whole steps as fit in the budget.
    #[serde(default)]
    pub flops_budgets: Vec<u128>,
    /// Evaluations per run, spread evenly; overrides `base.eval_every`.
    #[serde(default)]
    pub evals_per_run: Option<u64>,
    #[serde(default = "one_worker")]
    pub workers: usize,
}

fn one_worker() -> usize {
    1
}

#[derive(Clone, Copy)]
enum Length {
    Steps(u64),
    Budget(u128),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelVariant {
    pub name: String,
    pub model: ModelConfig,
}

impl SweepConfig {
    /// Expanded grid; empty axes fall back to the base value.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        if !self.steps.is_empty() && !self.flops_budgets.is_empty() {
            return Err(Error::config("a sweep sets either steps or flops_budgets, not both"));
        }
        let lengths: Vec<Length> = if !self.flops_budgets.is_empty() {
            self.flops_budgets.iter().map(|&c| Length::Budget(c)).collect()
        } else if self.steps.is_empty() {
            vec![Length::Steps(self.base.steps)]
        } else {
            self.steps.iter().map(|&s| Length::Steps(s)).collect()
        };
        let shapes = if self.batch_views.is_empty() {
            vec![[self.base.batch, self.base.vt]]
        } else {
            self.batch_views.clone()
        };
        let seeds = if self.seeds.is_empty() { vec![self.base.seed] } else { self.seeds.clone() };
        let mut out = Vec::new();
        for m in &self.models {
            for &len in &lengths {
                for &[b, vt] in &shapes {
                    for &seed in &seeds {
                        let mut c = self.base.clone();
                        c.model = m.model.clone();
                        c.batch = b;
                        c.vt = vt;
                        c.seed = seed;
                        c.effective_batch = None;
                        let tag = match len {
                            Length::Steps(s) => {
                                c.steps = s;
                                format!("s{s}")
                            }
                            Length::Budget(budget) => {
                                c.steps = 1;
                                let per_step = c.flops_at(1)?;
                                c.steps = (budget / per_step) as u64;
                                if c.steps == 0 {
                                    return Err(Error::config(format!(
                                        "budget {budget:.3e} is below one step of {} ({per_step} FLOPs)",
                                        m.name
                                    )));
                                }
                                format!("c{:.2e}", budget as f64)
                            }
                        };
                        c.run_id = format!("{}-{tag}-b{b}x{vt}-seed{seed}", m.name);
                        c.eval_every = match self.evals_per_run {
                            Some(k) => c.steps.div_ceil(k.max(1)),
                            None => c.eval_every.min(c.steps),
                        };
                        out.push(c);
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepSummary {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Per-run files live next to the merged log.
pub fn runs_dir(log: &Path) -> PathBuf {
    let mut name = log.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".runs");
    log.with_file_name(name)
}

fn append_record(file: &mut std::fs::File, path: &Path, r: &RunLogRecord) -> Result<()> {
    use std::io::Write;
    let mut line = serde_json::to_vec(r)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Runs every grid entry whose per-run log is missing, then merges all
/// per-run logs into `log`, sorted by `(run_id, step)`.
///
/// Each run streams into `<id>.jsonl.tmp` and is renamed on success, so an
/// interrupted sweep resumes by rerunning only unfinished runs.
pub fn sweep(grid: &[ExperimentConfig], log: &Path, workers: usize) -> Result<SweepSummary> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut ids = HashSet::new();
    for c in grid {
        c.validate()?;
        if !ids.insert(c.run_id.as_str()) {
            return Err(Error::config(format!("duplicate run_id {}", c.run_id)));
        }
    }
    let dir = runs_dir(log);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let summary = Mutex::new(SweepSummary::default());
    let mut pending = Vec::new();
    for c in grid {
        if dir.join(format!("{}.jsonl", c.run_id)).exists() {
            summary.lock().unwrap().skipped.push(c.run_id.clone());
        } else {
            pending.push(c);
        }
    }
    let cache: Mutex<BTreeMap<String, Arc<SceneDataset>>> = Mutex::new(BTreeMap::new());
    let load = |d: &DataConfig| -> Result<Arc<SceneDataset>> {
        let key = serde_json::to_string(d)?;
        let mut cache = cache.lock().unwrap();
        if let Some(ds) = cache.get(&key) {
            return Ok(ds.clone());
        }
        let ds = Arc::new(d.load()?);
        cache.insert(key, ds.clone());
        Ok(ds)
    };
    let run_one = |c: &ExperimentConfig| -> Result<()> {
        let data = load(&c.data)?;
        let tmp = dir.join(format!("{}.jsonl.tmp", c.run_id));
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let out = train_run_with_data(c, &data, &mut |r| append_record(&mut f, &tmp, r))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        out.model.write_checkpoint(&dir.join(format!("{}.ckpt", c.run_id)))?;
        let done = dir.join(format!("{}.jsonl", c.run_id));
        std::fs::rename(&tmp, &done).map_err(|e| Error::io(&done, e))
    };
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, pending.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = pending.get(i) else { break };
                log::info!("run {} ({} steps)", c.run_id, c.steps);
                let res = run_one(c);
                let mut s = summary.lock().unwrap();
                match res {
                    Ok(()) => s.completed.push(c.run_id.clone()),
                    Err(e) => {
                        log::error!("run {} failed: {e}", c.run_id);
                        s.failed.push((c.run_id.clone(), e.to_string()));
                    }
                }
            });
        }
    });

    let mut merged = Vec::new();
    for c in grid {
        let p = dir.join(format!("{}.jsonl", c.run_id));
        if p.exists() {
            merged.extend(read_run_log(&p)?);
        }
    }
    merged.sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.step.cmp(&b.step)));
    let tmp = log.with_extension("jsonl.tmp");
    write_run_log(&tmp, &merged)?;
    std::fs::rename(&tmp, log).map_err(|e| Error::io(log, e))?;
    let mut s = summary.into_inner().unwrap();
    s.completed.sort();
    s.skipped.sort();
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub family: String,
    pub vc: usize,
    pub batch: usize,
    pub vt: usize,
    /// Mean seconds per timed iteration.
    pub t_iter: f64,
    pub fps: f64,
    pub timed_iters: usize,
    /// Standard deviation over mean of the iteration times.
    pub cv: f64,
    pub unstable: bool,
}

pub fn fps(batch: usize, vt: usize, t_iter: f64) -> f64 {
    (batch * vt) as f64 / t_iter
}

/// Times the per-frame rendering path. Models with an encoder encode the
/// context once, outside the timed region, and time decoding only; the
/// decoder-only family times its full forward pass.
pub fn bench_render<T: Scalar>(
    model: &Model<T>,
    ctx: &ContextBatch<T>,
    tgt: &TargetBatch<T>,
    warmup: usize,
    reps: usize,
) -> Result<BenchResult> {
    if warmup < MIN_WARMUP_ITERS || reps < MIN_TIMED_ITERS {
        return Err(Error::config(format!(
            "bench needs at least {MIN_WARMUP_ITERS} warmup and {MIN_TIMED_ITERS} timed iterations"
        )));
    }
    let latent = if model.config.family.has_encoder() { Some(model.encode(ctx)?) } else { None };
    let iter = || -> Result<()> {
        match &latent {
            Some(z) => model.decode(z, tgt).map(drop),
            None => model.render(ctx, tgt).map(drop),
        }
    };
    for _ in 0..warmup {
        iter()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        iter()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / reps as f64;
    let cv = var.sqrt() / mean;
    Ok(BenchResult {
        family: model.config.family.to_string(),
        vc: ctx.views,
        batch: tgt.batch,
        vt: tgt.views,
        t_iter: mean,
        fps: fps(tgt.batch, tgt.views, mean),
        timed_iters: reps,
        cv,
        unstable: cv > UNSTABLE_CV,
    })
}

/// Context and target batches of `batch` synthetic scenes for benchmarking.
pub fn bench_batches<T: Scalar>(
    model: &ModelConfig,
    vc: usize,
    vt: usize,
    batch: usize,
    res: usize,
    seed: u64,
) -> Result<(ContextBatch<T>, TargetBatch<T>)> {
    let traj = TrajectoryConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes = (0..batch as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            sample_episode(&generate_scene(s), &orbit_trajectory(&traj, s)?, vc, vt, res, res, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    episode_batches(model, &episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Family;

    pub(crate) fn tiny_config(family: Family, precision: Precision, steps: u64) -> ExperimentConfig {
        let model = ModelConfig::svsm(16, 1, 1, 8, 4).with_family(family);
        ExperimentConfig {
            run_id: format!("tiny-{family}"),
            model,
            data: DataConfig::synthetic(8, 8, 6),
            vc: 2,
            vt: 2,
            batch: 2,
            effective_batch: Some(4),
            steps,
            seed: 3,
            precision,
            eval_every: steps,
            log_every: 1,
            eval_scene_count: 2,
            optimizer: OptimizerConfig {
                peak_lr: 3e-3,
                ..Default::default()
            },
            warmup_fraction: Some(0.05),
        }
    }

    #[test]
    fn metric_formulas() {
        assert_eq!(psnr(0.0), PSNR_CAP);
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
        let img = Image::new(8, 8, (0..192).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        assert_eq!(image_mse(&img, &img), 0.0);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        let gray = Image::filled(8, 8, [0.5; 3]);
        assert!(ssim(&img, &gray).unwrap() < 1.0);
        assert_eq!(fps(8, 1, 0.05), 160.0);
    }

    #[test]
    fn ssim_matches_a_single_window_oracle() {
        // a 7x7 image has exactly one window
        let a = Image::new(7, 7, (0..147).map(|i| ((i * 37) % 11) as f32 / 11.0).collect()).unwrap();
        let b = Image::new(7, 7, (0..147).map(|i| ((i * 13) % 5) as f32 / 5.0).collect()).unwrap();
        let (x, y) = (luminance(&a), luminance(&b));
        let n = 49.0;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|u| (u - mx).powi(2)).sum::<f64>() / (n - 1.0);
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (n - 1.0);
        let cxy = x.iter().zip(&y).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / (n - 1.0);
        let (c1, c2) = (1e-4, 9e-4);
        let want = (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let c = tiny_config(Family::SvsmEncdec, Precision::F64, 4);
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["bogus"] = 1.into();
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let mut bad = c.clone();
        bad.effective_batch = Some(5);
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.data.eval_seed_base = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn records_are_consistent_and_runs_deterministic() {
        let c = tiny_config(Family::SvsmEncdec, Precision::F64, 6);
        let a = train_run(&c, &mut |_| Ok(())).unwrap();
        let b = train_run(&c, &mut |_| Ok(())).unwrap();
        let (la, lb) = (a.records.last().unwrap(), b.records.last().unwrap());
        assert_eq!(la.eval_loss.to_bits(), lb.eval_loss.to_bits());
        assert_eq!(a.records.len(), 7);
        for r in &a.records {
            assert_eq!(r.d, 4 * r.step);
            assert_eq!(r.flops, c.flops_at(r.step).unwrap());
            assert_eq!(r.n as usize, a.model.param_count());
        }
        assert!(a.records[0].has_eval() && la.has_eval());
        assert!(!a.records[3].has_eval());
    }

    #[test]
    fn sweep_expansion_counts() {
        let base = tiny_config(Family::SvsmEncdec, Precision::F32, 4);
        let sc = SweepConfig {
            models: vec![
                ModelVariant { name: "a".into(), model: base.model.clone() },
                ModelVariant { name: "b".into(), model: base.model.clone().with_family(Family::LvsmDec) },
            ],
            base,
            steps: vec![2, 4],
            batch_views: vec![],
            seeds: vec![],
            flops_budgets: vec![],
            evals_per_run: None,
            workers: 1,
        };
        let grid = sc.expand().unwrap();
        let ids: HashSet<_> = grid.iter().map(|c| c.run_id.clone()).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn budget_sweeps_fill_but_never_exceed_the_budget() {
        let base = tiny_config(Family::SvsmEncdec, Precision::F32, 4);
        let budget = 50 * base.flops_at(1).unwrap() + 7;
        let mut sc = SweepConfig {
            models: vec![
                ModelVariant { name: "svsm".into(), model: base.model.clone() },
                ModelVariant { name: "lvsm".into(), model: ModelConfig::lvsm(16, 2, 8, 4) },
            ],
            base,
            steps: vec![],
            batch_views: vec![],
            seeds: vec![],
            flops_budgets: vec![budget],
            evals_per_run: Some(4),
            workers: 1,
        };
        for c in sc.expand().unwrap() {
            assert!(c.flops_at(c.steps).unwrap() <= budget);
            assert!(c.flops_at(c.steps + 1).unwrap() > budget);
            assert!(c.steps.div_ceil(c.eval_every) <= 4);
        }
        sc.steps = vec![3];
        assert!(sc.expand().is_err());
    }
}
