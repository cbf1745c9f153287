//! Command-line front end. Every invocation creates a fresh run directory
//! under `--out`, echoes the executed config into it and writes all
//! artifacts there.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::convert::{convert, LayerCalibration};
use crate::data::{extract_patches, generate_synthetic, load_cube, normalize, save_cube, split, PatchSet};
use crate::energy::{energy_totals, ActivityProfile, EnergyReport};
use crate::error::{config, Error, Result};
use crate::metrics::Metrics;
use crate::network::{Mode, Model};
use crate::neuron::{write_traces, SpikeTrace};
use crate::train::{evaluate_ann, evaluate_snn, spike_traces, train_ann, train_snn, EpochLog, InferenceConfig};

#[derive(Debug, Parser)]
#[command(name = "spikehsi", version, about = "Quantized spiking networks for hyperspectral patch classification")]
pub struct Cli {
    /// Run configuration (JSON); defaults apply to anything missing.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cube described by `dataset.synthetic`.
    Synth,
    /// Train the ReLU network from scratch.
    TrainAnn {
        /// Cube to use instead of `dataset.path`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Transfer ANN weights and calibrate SNN thresholds.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Q-STDB fine-tuning of a converted network.
    TrainSnn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Test-split metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's own mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-layer spiking activity on the test split.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write packed spike traces of the first N test patches.
        #[arg(long)]
        traces: Option<usize>,
    },
    /// Energy report from a checkpoint's architecture and an activity profile.
    Energy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        ann_bits: Option<u32>,
        #[arg(long)]
        snn_bits: Option<u32>,
    },
    /// ANN training, conversion, Q-STDB, evaluation and energy in one run.
    Pipeline {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ann,
    Snn,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainAnn { .. } => "train-ann",
            Command::Convert { .. } => "convert",
            Command::TrainSnn { .. } => "train-snn",
            Command::Eval { .. } => "eval",
            Command::Profile { .. } => "profile",
            Command::Energy { .. } => "energy",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub samples: usize,
    /// Inference settings for SNN evaluations.
    pub inference: Option<InferenceConfig>,
    pub metrics: Metrics,
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

/// Creates `<out>/<timestamp>-seed<N>`, adding a numeric suffix if taken.
pub fn create_run_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let base = format!("{}-seed{seed}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

/// Loads the dataset and returns its stratified train/test split with
/// patches of side `patch`.
fn load_splits(cfg: &RunConfig, data: Option<&Path>, patch: usize) -> Result<(PatchSet, PatchSet)> {
    let (cube, labels) = match data.or(cfg.dataset.path.as_deref()) {
        Some(p) => load_cube(p)?,
        None => generate_synthetic(&cfg.dataset.synthetic)?,
    };
    let cube = if cfg.dataset.normalize { normalize(&cube) } else { cube };
    let set = extract_patches(&cube, &labels, patch)?;
    log::info!("{} labelled patches, {} classes", set.len(), set.num_classes);
    split(&set, cfg.dataset.train_fraction, cfg.seed)
}

fn load_model(dir: &Path) -> Result<Model> {
    load_checkpoint(dir).map_err(|e| match e {
        Error::Io(io) => Error::Input(format!("checkpoint {}: {io}", dir.display())),
        other => other,
    })
}

fn require_snn(model: &Model, what: &str) -> Result<()> {
    if model.spec.mode != Mode::Snn || model.lif.is_none() {
        return config(format!(
            "{what} needs a converted SNN checkpoint, but this one holds an ANN; run `convert` first"
        ));
    }
    Ok(())
}

struct JsonlLog {
    out: BufWriter<File>,
    err: Option<std::io::Error>,
}

impl JsonlLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            err: None,
        })
    }

    fn push(&mut self, entry: &EpochLog) {
        if self.err.is_some() {
            return;
        }
        let line = serde_json::to_string(entry).expect("epoch log serializes");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.err = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.err.take() {
            Some(e) => Err(e.into()),
            None => Ok(self.out.flush()?),
        }
    }
}

fn evaluate(run: &Run, model: &Model, mode: Mode, test: &PatchSet, prefix: &str) -> Result<(EvalReport, Option<Vec<f64>>)> {
    let (report, totals) = match mode {
        Mode::Ann => (
            EvalReport {
                mode,
                samples: test.len(),
                inference: None,
                metrics: evaluate_ann(model, test)?,
            },
            None,
        ),
        Mode::Snn => {
            require_snn(model, "SNN evaluation")?;
            let ev = evaluate_snn(model, test, &run.cfg.inference)?;
            (
                EvalReport {
                    mode,
                    samples: ev.samples,
                    inference: Some(run.cfg.inference),
                    metrics: ev.metrics,
                },
                Some(ev.spike_totals),
            )
        }
    };
    run.write_json(&format!("{prefix}metrics.json"), &report)?;
    run.write(&format!("{prefix}confusion.csv"), &report.metrics.confusion.to_csv())?;
    log::info!(
        "{mode:?} test OA {:.4} AA {:.4} kappa {:.4}",
        report.metrics.oa,
        report.metrics.aa,
        report.metrics.kappa
    );
    Ok((report, totals))
}

fn do_train_ann(run: &Run, train: &PatchSet, test: &PatchSet) -> Result<Model> {
    let spec = run.cfg.build_network(
        train.bands().unwrap_or(0),
        train.num_classes,
    )?;
    for note in &spec.adaptations {
        log::info!("architecture adaptation: {note}");
    }
    let model = Model::init(spec.with_mode(Mode::Ann), run.cfg.seed);
    let mut log = JsonlLog::create(&run.path("ann_log.jsonl"))?;
    let out = train_ann(model, train, test, &run.cfg.ann_train_config(), &mut |e| log.push(e))?;
    log.finish()?;
    save_checkpoint(&out.best, &run.path("checkpoints/ann"), None)?;
    Ok(out.best)
}

fn calibration_batch(run: &Run, train: &PatchSet) -> Vec<crate::tensor::Tensor> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(run.cfg.seed));
    idx.truncate(run.cfg.calibration.batch_size);
    idx.iter().map(|&i| train.patches[i].clone()).collect()
}

fn do_convert(run: &Run, ann: &Model, train: &PatchSet) -> Result<Model> {
    if ann.spec.mode != Mode::Ann {
        return config("convert expects an ANN checkpoint");
    }
    let batch = calibration_batch(run, train);
    let (snn, report): (Model, Vec<LayerCalibration>) = convert(ann, &batch, &run.cfg.calibration_config())?;
    run.write_json("calibration.json", &report)?;
    save_checkpoint(&snn, &run.path("checkpoints/snn_converted"), run.cfg.inference.weight_bits)?;
    Ok(snn)
}

fn do_train_snn(run: &Run, snn: Model, train: &PatchSet, test: &PatchSet) -> Result<Model> {
    require_snn(&snn, "train-snn")?;
    let mut log = JsonlLog::create(&run.path("snn_log.jsonl"))?;
    let out = train_snn(
        snn,
        train,
        test,
        &run.cfg.snn_train_config(),
        &run.cfg.inference,
        &mut |e| log.push(e),
    )?;
    log.finish()?;
    save_checkpoint(&out.best, &run.path("checkpoints/snn"), run.cfg.inference.weight_bits)?;
    Ok(out.best)
}

fn do_energy(run: &Run, model: &Model, profile: &ActivityProfile, ann_bits: u32, snn_bits: u32) -> Result<EnergyReport> {
    let report = energy_totals(&model.spec, profile, ann_bits, snn_bits, &run.cfg.energy.constants())?;
    run.write("energy.json", &(report.to_json()? + "\n"))?;
    run.write("energy.csv", &report.to_csv())?;
    for r in &report.ratios {
        log::info!("energy ratio ANN{}/SNN{}: {:.3}", r.ann_bits, r.snn_bits, r.ratio);
    }
    Ok(report)
}

fn profile_from(model: &Model, totals: &[f64], samples: usize, timesteps: usize) -> Result<ActivityProfile> {
    ActivityProfile::from_totals(&model.spec, totals, samples, timesteps)
}

fn execute(run: &Run, command: &Command) -> Result<()> {
    let cfg = &run.cfg;
    match command {
        Command::Synth => {
            let (cube, labels) = generate_synthetic(&cfg.dataset.synthetic)?;
            fs::create_dir_all(run.path("data"))?;
            save_cube(&run.path("data/synthetic"), &cube, &labels)?;
        }
        Command::TrainAnn { data } => {
            let (train, test) = load_splits(cfg, data.as_deref(), cfg.patch_size())?;
            let ann = do_train_ann(run, &train, &test)?;
            evaluate(run, &ann, Mode::Ann, &test, "")?;
        }
        Command::Convert { checkpoint, data } => {
            let ann = load_model(checkpoint)?;
            let (train, test) = load_splits(cfg, data.as_deref(), ann.spec.input.patch_size)?;
            let snn = do_convert(run, &ann, &train)?;
            evaluate(run, &snn, Mode::Snn, &test, "")?;
        }
        Command::TrainSnn { checkpoint, data } => {
            let snn = load_model(checkpoint)?;
            require_snn(&snn, "train-snn")?;
            let (train, test) = load_splits(cfg, data.as_deref(), snn.spec.input.patch_size)?;
            let snn = do_train_snn(run, snn, &train, &test)?;
            evaluate(run, &snn, Mode::Snn, &test, "")?;
        }
        Command::Eval { checkpoint, mode, data } => {
            let model = load_model(checkpoint)?;
            let mode = match mode {
                Some(ModeArg::Ann) => Mode::Ann,
                Some(ModeArg::Snn) => Mode::Snn,
                None => model.spec.mode,
            };
            let (_, test) = load_splits(cfg, data.as_deref(), model.spec.input.patch_size)?;
            evaluate(run, &model, mode, &test, "")?;
        }
        Command::Profile {
            checkpoint,
            data,
            traces,
        } => {
            let model = load_model(checkpoint)?;
            require_snn(&model, "profile")?;
            let (_, test) = load_splits(cfg, data.as_deref(), model.spec.input.patch_size)?;
            let ev = evaluate_snn(&model, &test, &cfg.inference)?;
            let profile = profile_from(&model, &ev.spike_totals, ev.samples, ev.timesteps)?;
            run.write_json("activity.json", &profile)?;
            if let Some(n) = traces {
                let mut all: Vec<SpikeTrace> = Vec::new();
                for (s, patch) in test.patches.iter().take(*n).enumerate() {
                    for mut t in spike_traces(&model, patch, &cfg.inference)? {
                        t.layer = format!("sample{s}/{}", t.layer);
                        all.push(t);
                    }
                }
                write_traces(BufWriter::new(File::create(run.path("traces.spkt"))?), &all)?;
            }
        }
        Command::Energy {
            checkpoint,
            profile,
            ann_bits,
            snn_bits,
        } => {
            let model = load_model(checkpoint)?;
            let text = fs::read_to_string(profile)
                .map_err(|e| Error::Input(format!("cannot read profile {}: {e}", profile.display())))?;
            let profile: ActivityProfile = serde_json::from_str(&text)
                .map_err(|e| Error::Input(format!("invalid activity profile: {e}")))?;
            do_energy(
                run,
                &model,
                &profile,
                ann_bits.unwrap_or(cfg.energy.ann_bits),
                snn_bits.unwrap_or(cfg.energy.snn_bits),
            )?;
        }
        Command::Pipeline { data } => {
            let (train, test) = load_splits(cfg, data.as_deref(), cfg.patch_size())?;
            let ann = do_train_ann(run, &train, &test)?;
            evaluate(run, &ann, Mode::Ann, &test, "ann_")?;
            let snn = do_convert(run, &ann, &train)?;
            evaluate(run, &snn, Mode::Snn, &test, "converted_")?;
            let snn = do_train_snn(run, snn, &train, &test)?;
            let (report, totals) = evaluate(run, &snn, Mode::Snn, &test, "")?;
            let totals = totals.ok_or_else(|| Error::Internal("SNN evaluation lost its activity".into()))?;
            let profile = profile_from(&snn, &totals, report.samples, cfg.inference.timesteps)?;
            run.write_json("activity.json", &profile)?;
            do_energy(run, &snn, &profile, cfg.energy.ann_bits, cfg.energy.snn_bits)?;
        }
    }
    Ok(())
}

/// Parses the config, creates the run directory and executes the command.
/// Returns the run directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dir = create_run_dir(&cli.out, cfg.seed)?;
    log::info!("{} run in {}", cli.command.name(), dir.display());
    let run = Run { dir, cfg };
    run.write("config.json", &(run.cfg.to_json()? + "\n"))?;
    execute(&run, &cli.command)?;
    Ok(run.dir)
}

/// The single-line machine-readable form of an error.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

/// Binary entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                eprintln!("{}", serde_json::json!({ "error": "usage", "message": e.kind().to_string() }));
            }
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            eprintln!("error: {e}");
            1
        }
    }
}
