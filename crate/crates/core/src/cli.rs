//! Command-line surface: `train`, `sweep`, `certify`, and `verify`
//! subcommands over a flat key=value config with flag overrides. Every run
//! writes into a fresh timestamped directory together with a manifest that
//! is sufficient to reproduce it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::data::{load_idx, synth_two_class, Dataset, SampleLabel};
use crate::error::{Error, Result};
use crate::eval::{
    mc_expected_loss, mc_max_output_norm, mc_rho_profile, noise_sweep, threshold_extract,
};
use crate::linalg::{Matrix, RngState, Vector};
use crate::model::{forward, ActivationKind, LossSpec, RnnParams};
use crate::robustness::{propagate_covariance, stability_report, BoundReport, NoiseSpec};
use crate::train::{train, MuSchedule, Regime, TrainConfig};

/// Resolved run configuration: defaults, then config-file keys, then flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub regime: Regime,
    pub mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub gradient_clip_norm: Option<f64>,
    /// Noise amplitude ω the regularizers train against (Σ = ωI).
    pub omega: f64,
    /// Initial-state covariance amplitude (Γ = γI).
    pub gamma: f64,
    pub mu_schedule: MuSchedule,
    pub hidden: usize,
    pub activation: ActivationKind,
    pub loss: String,
    pub omega_grid: Vec<f64>,
    pub sweep_repeats: usize,
    pub mc_samples: usize,
    pub threshold_pct: Option<f64>,
    pub horizon: usize,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
    pub synthetic: bool,
    pub synth_n_per_class: usize,
    pub synth_seq_len: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,
    /// Desk-scale subset sizes; 0 means the full set.
    pub train_subset: usize,
    pub test_subset: usize,
    /// Worker threads; 0 keeps the library default.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            regime: Regime::Regular,
            mu: 0.0,
            epochs: 30,
            batch_size: 32,
            step_size: 0.015,
            momentum: 0.9,
            gradient_clip_norm: Some(1.0),
            omega: 1.0,
            gamma: 0.0,
            mu_schedule: MuSchedule::CurrentEpoch,
            hidden: 60,
            activation: ActivationKind::ReLU,
            loss: "cross_entropy".into(),
            omega_grid: (0..=12).map(|i| i as f64 * 0.25).collect(),
            sweep_repeats: 1,
            mc_samples: 10_000,
            threshold_pct: None,
            horizon: 28,
            out: PathBuf::from("runs"),
            checkpoints: Vec::new(),
            mnist_images: None,
            mnist_labels: None,
            mnist_test_images: None,
            mnist_test_labels: None,
            synthetic: false,
            synth_n_per_class: 64,
            synth_seq_len: 10,
            synth_dim: 8,
            synth_separation: 3.0,
            train_subset: 10_000,
            test_subset: 2_000,
            workers: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key:?}")))
}

fn parse_grid(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad omega grid entry {s:?}")))
        })
        .collect()
}

impl RunConfig {
    /// Apply one key=value setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "regime" => self.regime = Regime::parse(value)?,
            "mu" => self.mu = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "step_size" => self.step_size = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "gradient_clip_norm" => {
                let v: f64 = parse_num(key, value)?;
                self.gradient_clip_norm = if v > 0.0 { Some(v) } else { None };
            }
            "omega" => self.omega = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "mu_schedule" => {
                self.mu_schedule = match value {
                    "current_epoch" => MuSchedule::CurrentEpoch,
                    "total_epochs" => MuSchedule::TotalEpochs,
                    other => {
                        return Err(Error::Config(format!("unknown mu_schedule {other:?}")))
                    }
                }
            }
            "hidden" => self.hidden = parse_num(key, value)?,
            "activation" => self.activation = ActivationKind::parse(value)?,
            "loss" => match value {
                "cross_entropy" | "mse" => self.loss = value.into(),
                other => return Err(Error::Config(format!("unknown loss {other:?}"))),
            },
            "omega_grid" => self.omega_grid = parse_grid(value)?,
            "sweep_repeats" => self.sweep_repeats = parse_num(key, value)?,
            "mc_samples" => self.mc_samples = parse_num(key, value)?,
            "threshold_pct" => self.threshold_pct = Some(parse_num(key, value)?),
            "horizon" => self.horizon = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self
                .checkpoints
                .extend(value.split(',').map(PathBuf::from)),
            "mnist_images" => self.mnist_images = Some(PathBuf::from(value)),
            "mnist_labels" => self.mnist_labels = Some(PathBuf::from(value)),
            "mnist_test_images" => self.mnist_test_images = Some(PathBuf::from(value)),
            "mnist_test_labels" => self.mnist_test_labels = Some(PathBuf::from(value)),
            "synthetic" => self.synthetic = parse_num::<bool>(key, value)?,
            "synth_n_per_class" => self.synth_n_per_class = parse_num(key, value)?,
            "synth_seq_len" => self.synth_seq_len = parse_num(key, value)?,
            "synth_dim" => self.synth_dim = parse_num(key, value)?,
            "synth_separation" => self.synth_separation = parse_num(key, value)?,
            "train_subset" => self.train_subset = parse_num(key, value)?,
            "test_subset" => self.test_subset = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.omega < 0.0 {
            return Err(Error::Config("omega must be >= 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if self.mu < 0.0 {
            return Err(Error::Config("mu must be >= 0".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if let Some(p) = self.threshold_pct {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config("threshold_pct must be in [0, 100]".into()));
            }
        }
        Ok(())
    }

    /// Flat snapshot of every field, written into the manifest.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let grid = self
            .omega_grid
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let checkpoints = self
            .checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("seed".into(), self.seed.to_string()),
            ("regime".into(), self.regime.name().into()),
            ("mu".into(), self.mu.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("step_size".into(), self.step_size.to_string()),
            (
                "gradient_clip_norm".into(),
                self.gradient_clip_norm.map(|v| v.to_string()).unwrap_or("0".into()),
            ),
            ("momentum".into(), self.momentum.to_string()),
            ("omega".into(), self.omega.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            (
                "mu_schedule".into(),
                match self.mu_schedule {
                    MuSchedule::CurrentEpoch => "current_epoch".into(),
                    MuSchedule::TotalEpochs => "total_epochs".into(),
                },
            ),
            ("hidden".into(), self.hidden.to_string()),
            ("activation".into(), self.activation.name().into()),
            ("loss".into(), self.loss.clone()),
            ("omega_grid".into(), grid),
            ("sweep_repeats".into(), self.sweep_repeats.to_string()),
            ("mc_samples".into(), self.mc_samples.to_string()),
            (
                "threshold_pct".into(),
                self.threshold_pct.map(|v| v.to_string()).unwrap_or_default(),
            ),
            ("horizon".into(), self.horizon.to_string()),
            ("out".into(), self.out.display().to_string()),
            ("checkpoint".into(), checkpoints),
            ("mnist_images".into(), opt_path(&self.mnist_images)),
            ("mnist_labels".into(), opt_path(&self.mnist_labels)),
            ("mnist_test_images".into(), opt_path(&self.mnist_test_images)),
            ("mnist_test_labels".into(), opt_path(&self.mnist_test_labels)),
            ("synthetic".into(), self.synthetic.to_string()),
            ("synth_n_per_class".into(), self.synth_n_per_class.to_string()),
            ("synth_seq_len".into(), self.synth_seq_len.to_string()),
            ("synth_dim".into(), self.synth_dim.to_string()),
            ("synth_separation".into(), self.synth_separation.to_string()),
            ("train_subset".into(), self.train_subset.to_string()),
            ("test_subset".into(), self.test_subset.to_string()),
            ("workers".into(), self.workers.to_string()),
        ]
    }

    fn loss_spec(&self) -> LossSpec {
        match self.loss.as_str() {
            "mse" => LossSpec::mse(1.0),
            _ => LossSpec::cross_entropy(),
        }
    }

    fn noise(&self, input_dim: usize, state_dim: usize) -> NoiseSpec {
        let mut spec = NoiseSpec::isotropic(self.omega, input_dim, state_dim);
        if self.gamma > 0.0 {
            spec.init_cov = Matrix::identity(state_dim).scale(self.gamma);
        }
        spec
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "rnn-robust",
    version,
    about = "Train and certify recurrent networks under additive Gaussian input noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model in one of the four regimes.
    Train(CommonArgs),
    /// Noise-amplitude misclassification sweep over one or more checkpoints.
    Sweep(CommonArgs),
    /// Print Lipschitz constants, upper bounds, and the stability verdict.
    Certify(CommonArgs),
    /// Cross-check the covariance estimate against Monte Carlo on a checkpoint.
    Verify(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// regular | stable | estimator | upperbound
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated noise amplitudes, e.g. 0,0.5,1.
    #[arg(long = "omega-grid")]
    omega_grid: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Base output directory (each run creates a fresh subdirectory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint path; repeatable for multi-model sweeps.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long = "mnist-images")]
    mnist_images: Option<PathBuf>,
    #[arg(long = "mnist-labels")]
    mnist_labels: Option<PathBuf>,
    #[arg(long = "mnist-test-images")]
    mnist_test_images: Option<PathBuf>,
    #[arg(long = "mnist-test-labels")]
    mnist_test_labels: Option<PathBuf>,
    /// Use the built-in synthetic two-class task instead of MNIST.
    #[arg(long)]
    synthetic: bool,
    /// Override any config key, e.g. --set batch_size=32. Repeatable.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.regime {
            cfg.regime = Regime::parse(v)?;
        }
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = &self.omega_grid {
            cfg.omega_grid = parse_grid(v)?;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.checkpoints.extend(self.checkpoint.iter().cloned());
        if let Some(v) = &self.mnist_images {
            cfg.mnist_images = Some(v.clone());
        }
        if let Some(v) = &self.mnist_labels {
            cfg.mnist_labels = Some(v.clone());
        }
        if let Some(v) = &self.mnist_test_images {
            cfg.mnist_test_images = Some(v.clone());
        }
        if let Some(v) = &self.mnist_test_labels {
            cfg.mnist_test_labels = Some(v.clone());
        }
        if self.synthetic {
            cfg.synthetic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Run manifest: written with status=running before any compute, rewritten
/// with wall time and the output file list once the command finishes.
pub struct RunManifest {
    path: PathBuf,
    command: String,
    snapshot: Vec<(String, String)>,
    outputs: Vec<String>,
    started: Instant,
}

impl RunManifest {
    pub fn begin(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        let m = RunManifest {
            path: dir.join("manifest.txt"),
            command: command.to_string(),
            snapshot: cfg.snapshot(),
            outputs: Vec::new(),
            started: Instant::now(),
        };
        m.write("running", None)?;
        Ok(m)
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(&self) -> Result<()> {
        self.write("ok", Some(self.started.elapsed().as_secs_f64()))
    }

    fn write(&self, status: &str, wall_secs: Option<f64>) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "command={}", self.command).unwrap();
        writeln!(text, "version={}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(text, "status={status}").unwrap();
        if let Some(w) = wall_secs {
            writeln!(text, "wall_secs={w:.3}").unwrap();
        }
        for (k, v) in &self.snapshot {
            writeln!(text, "{k}={v}").unwrap();
        }
        for o in &self.outputs {
            writeln!(text, "output={o}").unwrap();
        }
        fs::write(&self.path, text)?;
        Ok(())
    }
}

/// Create `base/<command>-<epoch-secs>[-<k>]/`, guaranteed fresh.
fn fresh_out_dir(base: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(base)?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("system clock before 1970")
        .as_secs();
    for k in 0.. {
        let name = if k == 0 {
            format!("{command}-{secs}")
        } else {
            format!("{command}-{secs}-{k}")
        };
        let dir = base.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn init_workers(cfg: &RunConfig) {
    if cfg.workers > 0 {
        // Ignore the error if a global pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
}

/// Deterministic seed-shuffled prefix subset; writes the index manifest.
fn subset_dataset(
    ds: &Dataset,
    take: usize,
    seed: u64,
    out_dir: &Path,
    tag: &str,
    manifest: &mut RunManifest,
) -> Result<Dataset> {
    if take == 0 || take >= ds.len() {
        return Ok(ds.clone());
    }
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    let mut rng = RngState::new(seed).split(0xda7a);
    rng.shuffle(&mut indices);
    indices.truncate(take);
    let path = out_dir.join(format!("{tag}-indices.txt"));
    Dataset::write_index_manifest(&indices, &path)?;
    manifest.add_output(&path);
    Ok(ds.subset(&indices))
}

fn load_train_test(
    cfg: &RunConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(Dataset, Dataset)> {
    if cfg.synthetic {
        let mut rng_train = RngState::new(cfg.seed).split(0x5717a);
        let mut rng_test = RngState::new(cfg.seed).split(0x5717b);
        let train = synth_two_class(
            cfg.synth_n_per_class,
            cfg.synth_seq_len,
            cfg.synth_dim,
            cfg.synth_separation,
            &mut rng_train,
        )?;
        let test = synth_two_class(
            (cfg.synth_n_per_class / 4).max(1),
            cfg.synth_seq_len,
            cfg.synth_dim,
            cfg.synth_separation,
            &mut rng_test,
        )?;
        return Ok((train, test));
    }
    let (Some(ti), Some(tl), Some(si), Some(sl)) = (
        &cfg.mnist_images,
        &cfg.mnist_labels,
        &cfg.mnist_test_images,
        &cfg.mnist_test_labels,
    ) else {
        return Err(Error::Config(
            "need --synthetic or all four MNIST paths (--mnist-images/--mnist-labels/--mnist-test-images/--mnist-test-labels)"
                .into(),
        ));
    };
    let mut train = load_idx(ti, tl)?;
    train.split = crate::data::SplitTag::Train;
    let test = load_idx(si, sl)?;
    let train = subset_dataset(&train, cfg.train_subset, cfg.seed, out_dir, "train", manifest)?;
    let test = subset_dataset(&test, cfg.test_subset, cfg.seed, out_dir, "test", manifest)?;
    Ok((train, test))
}

fn load_test_only(
    cfg: &RunConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<Dataset> {
    if cfg.synthetic {
        let mut rng_test = RngState::new(cfg.seed).split(0x5717b);
        return synth_two_class(
            (cfg.synth_n_per_class / 4).max(1),
            cfg.synth_seq_len,
            cfg.synth_dim,
            cfg.synth_separation,
            &mut rng_test,
        );
    }
    let (Some(si), Some(sl)) = (&cfg.mnist_test_images, &cfg.mnist_test_labels) else {
        return Err(Error::Config(
            "need --synthetic or --mnist-test-images/--mnist-test-labels".into(),
        ));
    };
    let test = load_idx(si, sl)?;
    subset_dataset(&test, cfg.test_subset, cfg.seed, out_dir, "test", manifest)
}

fn n_classes(ds: &Dataset) -> usize {
    ds.samples
        .iter()
        .filter_map(|s| match s.label {
            SampleLabel::Class(c) => Some(c + 1),
            SampleLabel::Sequence(_) => None,
        })
        .max()
        .unwrap_or(1)
        .max(2)
}

fn single_checkpoint(cfg: &RunConfig) -> Result<&PathBuf> {
    match cfg.checkpoints.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::Config("a --checkpoint is required".into())),
        _ => Err(Error::Config("exactly one --checkpoint expected".into())),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    init_workers(cfg);
    let out_dir = fresh_out_dir(&cfg.out, "train")?;
    let mut manifest = RunManifest::begin(&out_dir, "train", cfg)?;
    let (train_set, test_set) = load_train_test(cfg, &out_dir, &mut manifest)?;

    let mut init_rng = RngState::new(cfg.seed).split(0x1417);
    let params0 = RnnParams::init(
        cfg.hidden,
        train_set.input_dim(),
        n_classes(&train_set),
        cfg.activation,
        &mut init_rng,
    );
    let tc = TrainConfig {
        regime: cfg.regime,
        mu: cfg.mu,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        step_size: cfg.step_size,
        momentum: cfg.momentum,
        seed: cfg.seed,
        gradient_clip_norm: cfg.gradient_clip_norm,
        noise: cfg.noise(train_set.input_dim(), cfg.hidden),
        mu_schedule: cfg.mu_schedule,
        loss: cfg.loss_spec(),
    };
    let (params, log) = train(&params0, &train_set, Some(&test_set), &tc)?;

    let ckpt_path = out_dir.join("checkpoint.txt");
    params.save(&ckpt_path)?;
    manifest.add_output(&ckpt_path);
    let log_path = out_dir.join("trainlog.csv");
    fs::write(&log_path, log.to_table())?;
    manifest.add_output(&log_path);
    manifest.finish()?;

    if let Some(epoch) = log.diverged_at {
        println!("warning: training diverged at epoch {epoch}; kept last stable parameters");
    }
    if let Some(last) = log.records.last() {
        println!(
            "trained regime={} epochs={} test_acc={:.4} spec_norm_a={:.4}",
            cfg.regime.name(),
            last.epoch,
            last.test_accuracy,
            last.spec_norm_a
        );
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    init_workers(cfg);
    if cfg.checkpoints.is_empty() {
        return Err(Error::Config("at least one --checkpoint is required".into()));
    }
    let out_dir = fresh_out_dir(&cfg.out, "sweep")?;
    let mut manifest = RunManifest::begin(&out_dir, "sweep", cfg)?;
    let test_set = load_test_only(cfg, &out_dir, &mut manifest)?;

    let mut thresholds = Vec::new();
    for (i, ckpt) in cfg.checkpoints.iter().enumerate() {
        let params = RnnParams::load(ckpt)?;
        let stem = ckpt
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("model{i}"));
        let mut sweep = noise_sweep(
            &params,
            &test_set,
            &cfg.omega_grid,
            cfg.sweep_repeats,
            &RngState::new(cfg.seed),
        )?;
        sweep.model_id = stem.clone();
        let path = out_dir.join(format!("sweep-{i}-{stem}.csv"));
        fs::write(&path, sweep.to_table())?;
        manifest.add_output(&path);
        println!(
            "{stem}: clean error {:.2}%",
            sweep.rows[0].misclassification_pct
        );
        if let Some(target) = cfg.threshold_pct {
            let omega = threshold_extract(&sweep, target)?;
            println!("{stem}: {target}% misclassification at omega = {omega:.4}");
            thresholds.push((stem, omega));
        }
    }
    if let Some(target) = cfg.threshold_pct {
        let mut table = String::from("model,target_pct,omega\n");
        for (stem, omega) in &thresholds {
            writeln!(table, "{stem},{target},{omega:.6}").unwrap();
        }
        let path = out_dir.join("thresholds.csv");
        fs::write(&path, table)?;
        manifest.add_output(&path);
    }
    manifest.finish()?;
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_certify(cfg: &RunConfig) -> Result<()> {
    init_workers(cfg);
    let ckpt = single_checkpoint(cfg)?;
    let params = RnnParams::load(ckpt)?;
    let out_dir = fresh_out_dir(&cfg.out, "certify")?;
    let mut manifest = RunManifest::begin(&out_dir, "certify", cfg)?;
    let noise = cfg.noise(params.input_dim(), params.state_dim());

    let report = BoundReport::compute(&params, &noise, cfg.horizon)?;
    let stability = stability_report(&params, &noise, cfg.horizon)?;

    let bounds_path = out_dir.join("bounds.csv");
    fs::write(&bounds_path, report.to_table())?;
    manifest.add_output(&bounds_path);

    let mut cert = String::new();
    writeln!(cert, "lambda={:.6e}", report.lambda).unwrap();
    writeln!(cert, "kappa_u={:.6e}", report.kappa_u).unwrap();
    writeln!(cert, "kappa_g={:.6e}", report.kappa_g).unwrap();
    writeln!(cert, "spec_norm_a={:.6e}", stability.spec_norm_a).unwrap();
    writeln!(cert, "omega_at_horizon={:.6e}", stability.omega_at_horizon).unwrap();
    writeln!(cert, "condition_rhs={:.6e}", stability.condition_rhs).unwrap();
    writeln!(cert, "omega_condition={}", stability.omega_condition).unwrap();
    writeln!(cert, "spec_norm_lt_one={}", stability.spec_norm_lt_one).unwrap();
    writeln!(cert, "certified={}", stability.certified).unwrap();
    let cert_path = out_dir.join("certificate.txt");
    fs::write(&cert_path, &cert)?;
    manifest.add_output(&cert_path);
    manifest.finish()?;

    print!("{cert}");
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_verify(cfg: &RunConfig) -> Result<()> {
    init_workers(cfg);
    let ckpt = single_checkpoint(cfg)?;
    let params = RnnParams::load(ckpt)?;
    let out_dir = fresh_out_dir(&cfg.out, "verify")?;
    let mut manifest = RunManifest::begin(&out_dir, "verify", cfg)?;
    let noise = cfg.noise(params.input_dim(), params.state_dim());

    // Probe sequence: first test sample if data is available, otherwise a
    // seed-deterministic standard-normal sequence at the configured horizon.
    let inputs: Vec<Vector> = match load_test_only(cfg, &out_dir, &mut manifest) {
        Ok(ds) if ds.input_dim() == params.input_dim() => ds.samples[0].inputs.clone(),
        _ => {
            let mut rng = RngState::new(cfg.seed).split(0x1d);
            (0..cfg.horizon)
                .map(|_| {
                    Vector::from(
                        (0..params.input_dim())
                            .map(|_| rng.standard_normal())
                            .collect(),
                    )
                })
                .collect()
        }
    };
    let x0 = Vector::zeros(params.state_dim());
    let traj = forward(&params, &inputs, &x0)?;
    let trace = propagate_covariance(&params, &traj, &noise)?;
    let profile = mc_rho_profile(&params, &inputs, &x0, &noise, cfg.mc_samples, &RngState::new(cfg.seed))?;

    let mut table = String::from("t,rho_hat,rho_mc,rho_mc_stderr,omega_t\n");
    let mut dominance_ok = true;
    for t in 1..=inputs.len() {
        let omega_t = crate::robustness::upper_bound_basic(&params, &noise, t)?;
        let mc = &profile[t - 1];
        if mc.mean > omega_t + 3.0 * mc.std_error {
            dominance_ok = false;
        }
        writeln!(
            table,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            t,
            trace.rho_hat[t - 1],
            mc.mean,
            mc.std_error,
            omega_t
        )
        .unwrap();
    }
    let verify_path = out_dir.join("verify.csv");
    fs::write(&verify_path, &table)?;
    manifest.add_output(&verify_path);

    // First-order loss deviation check with the squared-norm (MSE-to-zero)
    // loss: E{L(ỹ)} ≤ κ_L Σ_t √ρ_t + L(y), with κ_L taken from the output
    // range the rollouts actually visit and ρ_t from the MC estimate.
    let kappa_l = 2.0
        * mc_max_output_norm(&params, &inputs, &x0, &noise, cfg.mc_samples.min(1000), &RngState::new(cfg.seed ^ 1))?;
    let zero_targets = SampleLabel::Sequence(vec![Vector::zeros(params.output_dim()); inputs.len()]);
    let spec = LossSpec::mse(kappa_l);
    let clean_loss = crate::train::sequence_loss(&spec, &traj, &zero_targets)?;
    let noisy_loss = mc_expected_loss(
        &params,
        &inputs,
        &x0,
        &noise,
        &spec,
        &zero_targets,
        cfg.mc_samples,
        &RngState::new(cfg.seed ^ 2),
    )?;
    let rho_sum: f64 = profile
        .iter()
        .map(|m| (m.mean + 3.0 * m.std_error).max(0.0).sqrt())
        .sum();
    let rhs = kappa_l * rho_sum + clean_loss;
    let loss_bound_ok = noisy_loss.mean <= rhs + 3.0 * noisy_loss.std_error;

    let mut summary = String::new();
    writeln!(summary, "bound_dominance_ok={dominance_ok}").unwrap();
    writeln!(summary, "loss_deviation_lhs={:.6e}", noisy_loss.mean).unwrap();
    writeln!(summary, "loss_deviation_rhs={rhs:.6e}").unwrap();
    writeln!(summary, "loss_deviation_ok={loss_bound_ok}").unwrap();
    let summary_path = out_dir.join("verify-summary.txt");
    fs::write(&summary_path, &summary)?;
    manifest.add_output(&summary_path);
    manifest.finish()?;

    print!("{summary}");
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let (common, handler): (&CommonArgs, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Train(a) => (a, cmd_train),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Certify(a) => (a, cmd_certify),
        Command::Verify(a) => (a, cmd_verify),
    };
    let cfg = match common.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match handler(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
