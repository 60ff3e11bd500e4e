//! Command-line front end: `synth`, `train`, `eval`, `attack`, `emdemo`, `report`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, save_dataset, split, CorruptionConfig, ShapeKind, SyntheticSpec};
use crate::em::{random_init, run_em, EmMode, MixtureParams};
use crate::error::{Error, Result};
use crate::eval::{robustness_sweep, SweepSettings, DEFAULT_MC_SAMPLES};
use crate::plot;
use crate::presets::{desk_config, desk_synthetic, DESK_SPLIT};
use crate::pseudo::HeadInput;
use crate::trainer::{fit, load_checkpoint, read_metrics, Mode, TrainConfig, BEST_CHECKPOINT, FINAL_CHECKPOINT, METRICS_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "segpl", version, about = "Pseudo-label and variational-threshold segmentation training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic shape dataset and write its split to disk.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Clean metrics and the intensity-shift sweep for a trained run.
    Eval(EvalArgs),
    /// FGSM sweep for a trained run.
    Attack(AttackArgs),
    /// Two-component Gaussian mixture EM trace.
    Emdemo(EmArgs),
    /// Plots from a run directory's metrics.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `HxW` or `DxHxW`.
    #[arg(long, default_value = "32x32", value_parser = parse_dims)]
    pub image_size: Dims,
    #[arg(long, default_value_t = 108)]
    pub num_images: usize,
    #[arg(long, value_delimiter = ',', default_value = "ellipse,rectangle,blob")]
    pub shapes: Vec<ShapeArg>,
    #[arg(long)]
    pub fg_lo: Option<f64>,
    #[arg(long)]
    pub fg_hi: Option<f64>,
    #[arg(long)]
    pub bg_lo: Option<f64>,
    #[arg(long)]
    pub bg_hi: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long, default_value_t = DESK_SPLIT.0)]
    pub labelled: usize,
    #[arg(long, default_value_t = DESK_SPLIT.1)]
    pub unlabelled: usize,
    #[arg(long, default_value_t = DESK_SPLIT.2)]
    pub val: usize,
    #[arg(long, default_value_t = DESK_SPLIT.3)]
    pub test: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ShapeArg {
    Ellipse,
    Rectangle,
    Blob,
}

impl From<ShapeArg> for ShapeKind {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Ellipse => ShapeKind::Ellipse,
            ShapeArg::Rectangle => ShapeKind::Rectangle,
            ShapeArg::Blob => ShapeKind::Blob,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Segpl,
    #[value(name = "segpl_vi", alias = "segpl-vi")]
    SegplVi,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => Mode::Supervised,
            ModeArg::Segpl => Mode::Segpl,
            ModeArg::SegplVi => Mode::SegplVi,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeadInputArg {
    Bottleneck,
    Logits,
}

/// Run-directory placement shared by the commands that create runs.
#[derive(Args, Debug)]
pub struct RunDirArgs {
    /// Parent of `<timestamp>-<tag>` run directories.
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
    #[arg(long)]
    pub tag: Option<String>,
    /// Exact run directory, bypassing the timestamp convention.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with `TrainConfig` keys; flags override it. Defaults to the desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunDirArgs,
    #[arg(long)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub labelled_bs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub ratio: Option<usize>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub prior_mean: Option<f64>,
    #[arg(long)]
    pub prior_std: Option<f64>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub head_input: Option<HeadInputArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Which {
    Best,
    Final,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Dataset directory; defaults to the one recorded at training time.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "best")]
    pub checkpoint: Which,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = 0.4)]
    pub contrast_lo: f64,
    #[arg(long, default_value_t = 2.5)]
    pub contrast_hi: f64,
    #[arg(long, default_value_t = 0.2)]
    pub corruption_noise: f64,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "best")]
    pub checkpoint: Which,
    #[arg(long, value_delimiter = ',', default_value = "0,0.002,0.005,0.01")]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EmModeArg {
    Soft,
    Hard,
}

#[derive(Args, Debug)]
pub struct EmArgs {
    #[command(flatten)]
    pub run: RunDirArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub n_points: usize,
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    #[arg(long, value_enum, default_value = "soft")]
    pub mode: EmModeArg,
    /// Hard-assignment threshold on the component-1 responsibility.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
}

/// Spatial size given as `HxW` or `DxHxW`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let dims: std::result::Result<Vec<usize>, _> = s.split('x').map(str::parse).collect();
    match dims {
        Ok(d) if (2..=3).contains(&d.len()) && d.iter().all(|&v| v > 0) => Ok(Dims(d)),
        _ => Err(format!("expected HxW or DxHxW with positive sizes, got {s:?}")),
    }
}

/// Record of one command's inputs and outputs, kept as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub code_version: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Paths relative to `output_dir`.
    pub artifacts: Vec<String>,
    pub data_dir: Option<PathBuf>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    pub fn save(&self) -> Result<()> {
        for a in &self.artifacts {
            if !self.output_dir.join(a).exists() {
                return Err(Error::MissingFile(self.output_dir.join(a)));
            }
        }
        fs::write(self.output_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn add(&mut self, artifact: &Path) {
        let rel = artifact
            .strip_prefix(&self.output_dir)
            .unwrap_or(artifact)
            .to_string_lossy()
            .into_owned();
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }
}

pub fn code_version() -> String {
    let rev = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match rev {
        Some(r) if !r.is_empty() => format!("{}+g{r}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn make_run_dir(args: &RunDirArgs, default_tag: &str) -> Result<PathBuf> {
    let dir = match &args.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let tag = args.tag.as_deref().unwrap_or(default_tag);
            let base = args.runs_root.join(format!("{stamp}-{tag}"));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn is_nonempty_dir(p: &Path) -> Result<bool> {
    Ok(p.is_dir() && fs::read_dir(p)?.next().is_some())
}

fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    if is_nonempty_dir(&a.out)? {
        if !a.force {
            return Err(Error::invalid(
                "out",
                format!("{} exists and is not empty; pass --force to overwrite", a.out.display()),
            ));
        }
        fs::remove_dir_all(&a.out)?;
    }
    let d = desk_synthetic(a.seed);
    let spec = SyntheticSpec {
        image_size: a.image_size.0.clone(),
        num_images: a.num_images,
        shapes: a.shapes.iter().map(|&s| s.into()).collect(),
        fg_intensity_range: (a.fg_lo.unwrap_or(d.fg_intensity_range.0), a.fg_hi.unwrap_or(d.fg_intensity_range.1)),
        bg_intensity_range: (a.bg_lo.unwrap_or(d.bg_intensity_range.0), a.bg_hi.unwrap_or(d.bg_intensity_range.1)),
        noise_std: a.noise_std.unwrap_or(d.noise_std),
        seed: a.seed,
    };
    let samples = generate_synthetic(&spec)?;
    let s = split(samples, a.labelled, a.unlabelled, a.val, a.test, a.seed)?;
    save_dataset(&a.out, &s, Some(&spec))?;
    println!(
        "wrote {} images ({} labelled, {} unlabelled, {} val, {} test) to {}",
        spec.num_images,
        a.labelled,
        a.unlabelled,
        a.val,
        a.test,
        a.out.display()
    );
    Ok(a.out.clone())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => desk_config(Mode::Segpl, 0),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { c.$f = v.into(); } )* };
    }
    set!(labelled_bs, lr, steps, alpha, ratio, warmup_fraction, prior_mean, prior_std, kl_weight, seed, eval_every, base_width, depth);
    if let Some(m) = a.mode {
        c.mode = m.into();
    }
    if let Some(h) = a.head_input {
        c.head_input = match h {
            HeadInputArg::Bottleneck => HeadInput::Bottleneck,
            HeadInputArg::Logits => HeadInput::Logits,
        };
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let config = resolve_train_config(a)?;
    let (split, _, _) = load_dataset(&a.data)?;
    let dir = make_run_dir(&a.run, config.mode.as_str())?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, config.to_toml_string())?;
    let out = fit(&config, &split, &dir)?;
    let mut manifest = RunManifest {
        command: "train".into(),
        config: serde_json::to_value(&config)?,
        code_version: code_version(),
        seed: config.seed,
        output_dir: dir.clone(),
        artifacts: Vec::new(),
        data_dir: Some(fs::canonicalize(&a.data)?),
    };
    for p in [&config_path, &out.metrics_path, &out.best_checkpoint, &out.final_checkpoint] {
        manifest.add(p);
    }
    manifest.save()?;
    let last = out.history.last().expect("at least one step");
    println!(
        "trained {} for {} steps; final loss {:.4}, best val IoU {:.4}; run dir {}",
        config.mode,
        config.steps,
        last.loss_total,
        out.state.best_val_iou,
        dir.display()
    );
    Ok(dir)
}

fn load_run(run_dir: &Path, data: Option<&Path>, which: Which) -> Result<(RunManifest, crate::trainer::TrainState, crate::data::DatasetSplit)> {
    let manifest = RunManifest::load(run_dir)?;
    let ckpt = run_dir.join(match which {
        Which::Best => BEST_CHECKPOINT,
        Which::Final => FINAL_CHECKPOINT,
    });
    let (state, _) = load_checkpoint(&ckpt)?;
    let data = data
        .map(Path::to_path_buf)
        .or_else(|| manifest.data_dir.clone())
        .ok_or_else(|| Error::invalid("data", "run has no recorded dataset; pass --data"))?;
    let (split, _, _) = load_dataset(&data)?;
    Ok((manifest, state, split))
}

fn cmd_eval(a: &EvalArgs) -> Result<PathBuf> {
    let (mut manifest, state, split) = load_run(&a.run_dir, a.data.as_deref(), a.checkpoint)?;
    let settings = SweepSettings {
        gammas: a.gammas.clone(),
        epsilons: Vec::new(),
        corruption: CorruptionConfig {
            contrast_range: (a.contrast_lo, a.contrast_hi),
            noise_std: a.corruption_noise,
            ..CorruptionConfig::default()
        },
        mc_samples: a.mc_samples,
        seed: a.seed,
    };
    let report = robustness_sweep(&state.model, state.head.as_ref(), &split.test, &settings)?;
    let csv = a.run_dir.join("eval.csv");
    report.write_csv(&csv)?;
    let per_image = a.run_dir.join("per_image_iou.csv");
    report.write_per_image_csv(&per_image, &split.test.iter().map(|s| s.id).collect::<Vec<_>>())?;
    manifest.add(&csv);
    manifest.add(&per_image);
    for p in plot::sweep_plots(&a.run_dir, &report)? {
        manifest.add(&p);
    }
    manifest.save()?;
    println!(
        "test IoU {:.4} ± {:.4}, Brier {:.4}; wrote {}",
        report.mean_iou,
        report.std_iou,
        report.brier,
        csv.display()
    );
    Ok(csv)
}

fn cmd_attack(a: &AttackArgs) -> Result<PathBuf> {
    let (mut manifest, state, split) = load_run(&a.run_dir, a.data.as_deref(), a.checkpoint)?;
    let settings = SweepSettings {
        gammas: Vec::new(),
        epsilons: a.epsilons.clone(),
        mc_samples: 0,
        seed: a.seed,
        ..SweepSettings::default()
    };
    let report = robustness_sweep(&state.model, None, &split.test, &settings)?;
    let csv = a.run_dir.join("attack.csv");
    report.write_csv(&csv)?;
    manifest.add(&csv);
    for p in plot::sweep_plots(&a.run_dir, &report)? {
        manifest.add(&p);
    }
    manifest.save()?;
    for r in &report.epsilon_table {
        println!("epsilon {:<8} IoU {:.4}", r.key, r.mean_iou);
    }
    Ok(csv)
}

fn cmd_emdemo(a: &EmArgs) -> Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let truth = MixtureParams::new([0.4, 0.6], [-2.0, 1.5], [0.8, 1.0])?;
    let data = truth.sample(a.n_points, &mut rng);
    let init = random_init(&data, &mut rng);
    let mode = match a.mode {
        EmModeArg::Soft => EmMode::Soft,
        EmModeArg::Hard => EmMode::Hard { threshold: a.threshold },
    };
    let trace = run_em(&data, &init, mode, a.iters)?;
    let dir = make_run_dir(&a.run, "emdemo")?;
    let csv = dir.join("em_trace.csv");
    trace.write_csv(&csv)?;
    let svg = dir.join("em_convergence.svg");
    plot::em_convergence(&svg, &trace)?;
    let mut manifest = RunManifest {
        command: "emdemo".into(),
        config: serde_json::json!({
            "n_points": a.n_points, "iters": a.iters, "mode": format!("{:?}", a.mode), "threshold": a.threshold,
        }),
        code_version: code_version(),
        seed: a.seed,
        output_dir: dir.clone(),
        artifacts: Vec::new(),
        data_dir: None,
    };
    manifest.add(&csv);
    manifest.add(&svg);
    manifest.save()?;
    println!(
        "{} iterations, log-likelihood decreases: {}, final means {:?}; wrote {}",
        trace.iterations.len(),
        trace.log_likelihood_decreases(1e-9),
        trace.final_params.means,
        csv.display()
    );
    Ok(dir)
}

fn cmd_report(a: &ReportArgs) -> Result<PathBuf> {
    let mut manifest = RunManifest::load(&a.run_dir)?;
    let rows = read_metrics(&a.run_dir.join(METRICS_FILE))?;
    let losses = a.run_dir.join("loss_curves.svg");
    plot::loss_curves(&losses, &rows)?;
    manifest.add(&losses);
    if rows.iter().any(|r| r.val_iou.is_some()) {
        let p = a.run_dir.join("validation_iou.svg");
        plot::validation_curve(&p, &rows)?;
        manifest.add(&p);
    }
    if rows.iter().any(|r| r.sampled_t.is_some()) {
        let p = a.run_dir.join("threshold_trajectory.svg");
        plot::threshold_trajectory(&p, &rows)?;
        manifest.add(&p);
    }
    manifest.save()?;
    println!("plots written to {}", a.run_dir.display());
    Ok(a.run_dir.clone())
}

/// Runs one already-parsed command and returns its main output path.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Emdemo(a) => cmd_emdemo(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
