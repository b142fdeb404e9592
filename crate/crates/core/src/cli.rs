//! Command-line front end. The binary only forwards `argv` to [`run`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::flops::{decoder_flops, encoder_flops, train_flops, FlopMode, FlopsBreakdown, DEFAULT_BACKWARD_MULTIPLIER};
use crate::harness::{
    bench_batches, bench_render, eval_episodes, sweep, train_run, DataConfig, ExperimentConfig, SweepConfig,
};
use crate::models::{episode_batches, Family, Model, ModelConfig};
use crate::scaling::{
    effective_batch_report, fit_laws, laws_csv_rows, read_run_log, recommend_allocation, write_laws_csv,
    DEFAULT_SMOOTHING_WINDOW, DEFAULT_SPLIT_LOSS,
};
use crate::scenegen::{write_dataset, SceneDataset, TrajectoryConfig};
use crate::tensor::{read_checkpoint, Precision, Scalar};

/// Environment variable selecting the log level.
pub const LOG_ENV: &str = "SVSM_LOG_LEVEL";

#[derive(Parser, Debug)]
#[command(name = "svsm", about = "View-synthesis transformer scaling lab", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic scene dataset to a binary file.
    GenData(GenDataArgs),
    /// Train one run from an experiment config.
    Train(TrainArgs),
    /// Run a grid of experiments, resuming completed runs.
    Sweep(SweepArgs),
    /// Print the FLOP breakdown of a model configuration.
    Flops(FlopsArgs),
    /// Fit compute frontiers and power laws to a run log.
    FitLaws(FitLawsArgs),
    /// Compare runs that share an effective batch size.
    EffectiveBatch(EffectiveBatchArgs),
    /// Measure rendering throughput.
    BenchRender(BenchArgs),
    /// Render held-out targets of a trained checkpoint to PNG.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Data config (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Trajectory preset: default, stereo or multiview.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed_base: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run log output (JSONL).
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Merged run log output (JSONL).
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub family: String,
    #[arg(long)]
    pub vc: usize,
    #[arg(long)]
    pub vt: usize,
    #[arg(long)]
    pub dim: usize,
    /// Layers per stack.
    #[arg(long)]
    pub layers: usize,
    /// Encoder layers when they differ from `--layers`.
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub res: usize,
    #[arg(long)]
    pub patch: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub fixed_latent: usize,
    /// paper or exact.
    #[arg(long, default_value = "paper")]
    pub mode: String,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub steps: u64,
}

#[derive(Args, Debug)]
pub struct FitLawsArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Scaling-laws CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub per_decade: usize,
    #[arg(long, default_value_t = DEFAULT_SPLIT_LOSS)]
    pub split: f64,
    /// Also print the allocation the fits prescribe for this budget.
    #[arg(long)]
    pub budget: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EffectiveBatchArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW)]
    pub window: usize,
    /// Report output (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Model config (JSON).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub vc: usize,
    #[arg(long, default_value_t = 1)]
    pub vt: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Experiment config the checkpoint was trained with.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for PNG files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub episodes: usize,
}

/// Exit code for a library error: 1 for problems with the user's inputs,
/// 2 for failures inside the lab.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Domain(_) | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 1,
        Error::Dimension(_) | Error::Numerical(_) | Error::NonFiniteLoss { .. } => 2,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing human output to `out`. Returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Installs the logger once, honoring [`LOG_ENV`].
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn w(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text).map_err(|e| Error::io("<stdout>", e))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => { w($out, format_args!("{}\n", format_args!($($arg)*))) };
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Sweep(a) => run_sweep(a, out),
        Command::Flops(a) => flops(a, out),
        Command::FitLaws(a) => fit(a, out),
        Command::EffectiveBatch(a) => effective_batch(a, out),
        Command::BenchRender(a) => bench(a, out),
        Command::Render(a) => render(a, out),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut d = match &a.config {
        Some(p) => read_json::<DataConfig>(p)?,
        None => DataConfig::synthetic(32, 32, 64),
    };
    if let Some(p) = &a.preset {
        d.trajectory = match p.as_str() {
            "default" => TrajectoryConfig::default(),
            "stereo" => TrajectoryConfig::stereo(),
            "multiview" => TrajectoryConfig::multiview(),
            _ => return Err(Error::config(format!("unknown trajectory preset '{p}'"))),
        };
    }
    if let Some(r) = a.res {
        d.height = r;
        d.width = r;
    }
    d.train_scenes = a.scenes.unwrap_or(d.train_scenes);
    d.train_seed_base = a.seed_base.unwrap_or(d.train_seed_base);
    let data = SceneDataset::generate(&d.train_seeds(), &d.trajectory, d.height, d.width)?;
    write_dataset(&a.out, &data)?;
    say!(
        out,
        "wrote {} scenes x {} frames at {}x{} to {}",
        data.scenes.len(),
        data.frames_per_scene(),
        d.height,
        d.width,
        a.out.display()
    )
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = ExperimentConfig::read(&a.config)?;
    c.steps = a.steps.unwrap_or(c.steps);
    c.seed = a.seed.unwrap_or(c.seed);
    c.eval_every = c.eval_every.min(c.steps);
    c.validate()?;
    let tmp = a.log.with_extension("jsonl.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let res = train_run(&c, &mut |r| {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&tmp, e))
    });
    drop(f);
    std::fs::rename(&tmp, &a.log).map_err(|e| Error::io(&a.log, e))?;
    let outcome = res?;
    if let Some(p) = &a.checkpoint {
        outcome.model.write_checkpoint(p)?;
    }
    let last = outcome.records.last().expect("at least the initial record");
    say!(
        out,
        "{}: {} steps, N={}, flops={:.3e}, eval loss {:.5}, psnr {:.2} dB, ssim {:.4}",
        c.run_id,
        last.step,
        last.n,
        last.flops as f64,
        last.eval_loss,
        last.eval_psnr,
        last.eval_ssim
    )
}

fn run_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let sc = SweepConfig::read(&a.config)?;
    let grid = sc.expand()?;
    let s = sweep(&grid, &a.log, a.workers.unwrap_or(sc.workers))?;
    say!(
        out,
        "{} runs: {} completed, {} skipped, {} failed",
        grid.len(),
        s.completed.len(),
        s.skipped.len(),
        s.failed.len()
    )?;
    for (id, e) in &s.failed {
        say!(out, "failed {id}: {e}")?;
    }
    if s.failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{} runs failed", s.failed.len())))
    }
}

fn flops(a: FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let family: Family = a.family.parse()?;
    let mode: FlopMode = a.mode.parse()?;
    let mut c = ModelConfig::svsm(a.dim, a.enc_layers.unwrap_or(a.layers), a.layers, a.head_dim, a.patch)
        .with_family(family)
        .with_fixed_latent(a.fixed_latent);
    if !family.has_encoder() {
        c.enc_dim = 0;
        c.enc_layers = 0;
    }
    c.validate()?;
    c.check_resolution(a.res, a.res)?;
    let enc = encoder_flops(&c, a.vc, a.res, a.res, mode);
    let dec = decoder_flops(&c, a.vc, a.vt, a.res, a.res, mode);
    let fwd = enc.plus(dec);
    let train = train_flops(&c, a.vc, a.vt, a.batch, a.steps, a.res, a.res, mode, DEFAULT_BACKWARD_MULTIPLIER)?;
    say!(
        out,
        "{} d={} L={} V_C={} V_T={} {}x{} patch {} ({} mode)",
        family,
        a.dim,
        a.layers,
        a.vc,
        a.vt,
        a.res,
        a.res,
        a.patch,
        mode
    )?;
    say!(out, "{:<10} {:>20} {:>20} {:>20}", "part", "attention", "mlp+proj", "total")?;
    let rows: [(&str, FlopsBreakdown); 3] = [("encoder", enc), ("decoder", dec), ("forward", fwd)];
    for (name, f) in &rows {
        say!(out, "{:<10} {:>20} {:>20} {:>20}", name, f.attn, f.mlp_proj, f.total())?;
    }
    say!(
        out,
        "train: {} FLOPs for batch {} x {} steps (backward x{})",
        train,
        a.batch,
        a.steps,
        DEFAULT_BACKWARD_MULTIPLIER
    )?;
    say!(out, "")?;
    say!(out, "family,mode,vc,vt,part,attn,mlp_proj,total")?;
    for (name, f) in &rows {
        say!(out, "{},{},{},{},{},{},{},{}", family, mode, a.vc, a.vt, name, f.attn, f.mlp_proj, f.total())?;
    }
    say!(out, "{},{},{},{},train,,,{}", family, mode, a.vc, a.vt, train)
}

fn fit(a: FitLawsArgs, out: &mut dyn Write) -> Result<()> {
    let records = read_run_log(&a.log)?;
    if records.is_empty() {
        return Err(Error::config(format!("{} holds no records", a.log.display())));
    }
    let laws = fit_laws(&records, a.per_decade, a.split)?;
    for fam in &laws {
        say!(out, "{}: {} frontier points", fam.family, fam.frontier.len())?;
        if let Some(c) = &fam.chinchilla {
            say!(
                out,
                "  N_opt ~ C^{:.2} (r2 {:.3})   D_opt ~ C^{:.2} (r2 {:.3})",
                c.n_fit.exponent,
                c.n_fit.r2,
                c.d_fit.exponent,
                c.d_fit.r2
            )?;
            for warning in &c.warnings {
                say!(out, "  warning: {warning}")?;
            }
            if let Some(b) = a.budget {
                let r = recommend_allocation(b, c)?;
                say!(out, "  at C={b:.3e}: N_opt {:.3e}, D_opt {:.3e}", r.n_opt, r.d_opt)?;
                if let Some(wn) = r.warning {
                    say!(out, "  warning: {wn}")?;
                }
            }
        }
        if let Some(p) = &fam.piecewise {
            say!(
                out,
                "  loss ~ C^{:.3} above {} and C^{:.3} below{}",
                p.high.exponent,
                p.split_loss,
                p.low.exponent,
                if p.fallback { " (single segment)" } else { "" }
            )?;
        }
        for n in &fam.notes {
            say!(out, "  note: {n}")?;
        }
    }
    if let Some(p) = &a.out {
        write_laws_csv(p, &laws_csv_rows(&laws, DEFAULT_SMOOTHING_WINDOW, a.split))?;
        say!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

fn effective_batch(a: EffectiveBatchArgs, out: &mut dyn Write) -> Result<()> {
    let records = read_run_log(&a.log)?;
    let r = effective_batch_report(&records, a.window)?;
    say!(out, "{:>6} {:>6} {:>10} {:>8} {:>10}  runs", "B_eff", "count", "mean PSNR", "spread", "curve dev")?;
    for g in &r.groups {
        say!(
            out,
            "{:>6} {:>6} {:>10.3} {:>8.3} {:>10.5}  {}",
            g.b_eff,
            g.run_ids.len(),
            g.mean_psnr,
            g.spread,
            g.curve_deviation,
            g.run_ids.join(" ")
        )?;
    }
    say!(out, "max within-group spread {:.3} dB, across-group gap {:.3} dB", r.max_within_spread, r.across_spread)?;
    for n in &r.notes {
        say!(out, "note: {n}")?;
    }
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_vec_pretty(&r)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn load_model<T: Scalar>(config: ModelConfig, checkpoint: Option<&Path>, seed: u64) -> Result<Model<T>> {
    match checkpoint {
        Some(p) => Model::from_checkpoint(config, read_checkpoint(p)?),
        None => Model::new(config, seed),
    }
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let c: ModelConfig = read_json(&a.model)?;
    c.validate()?;
    c.check_resolution(a.res, a.res)?;
    let model = load_model::<f32>(c, a.checkpoint.as_deref(), 0)?;
    let (ctx, tgt) = bench_batches(&model.config, a.vc, a.vt, a.batch, a.res, 11)?;
    let r = bench_render(&model, &ctx, &tgt, a.warmup, a.reps)?;
    say!(
        out,
        "{} V_C={} B={} V_T={}: t_iter {:.6} s, {:.1} FPS (cv {:.3}{})",
        r.family,
        r.vc,
        r.batch,
        r.vt,
        r.t_iter,
        r.fps,
        r.cv,
        if r.unstable { ", unstable" } else { "" }
    )
}

fn render(a: RenderArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = ExperimentConfig::read(&a.config)?;
    c.eval_scene_count = a.episodes.max(1);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let episodes = eval_episodes(&c)?;
    let images = match c.precision {
        Precision::F32 => render_typed::<f32>(&c, &a.checkpoint, &episodes)?,
        Precision::F64 => render_typed::<f64>(&c, &a.checkpoint, &episodes)?,
    };
    let truth = episodes.iter().flat_map(|e| e.targets.iter().map(|v| &v.image));
    let mut count = 0;
    for (i, (pred, gt)) in images.iter().zip(truth).enumerate() {
        pred.save_png(&a.out.join(format!("target_{i:03}_pred.png")))?;
        gt.save_png(&a.out.join(format!("target_{i:03}_gt.png")))?;
        count += 1;
    }
    say!(out, "wrote {count} predicted/ground-truth pairs to {}", a.out.display())
}

fn render_typed<T: Scalar>(
    c: &ExperimentConfig,
    checkpoint: &Path,
    episodes: &[crate::scenegen::Episode],
) -> Result<Vec<crate::scenegen::Image>> {
    let model = load_model::<T>(c.model.clone(), Some(checkpoint), c.seed)?;
    let (ctx, tgt) = episode_batches::<T>(&model.config, episodes)?;
    let patches = model.render(&ctx, &tgt)?;
    model.to_images(&patches, c.data.height, c.data.width)
}
