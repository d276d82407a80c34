//! `hybridflow`: synthesize data, train, evaluate, estimate energy and run
//! ablations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence,
//! 4 artifact mismatch.

mod manifest;
mod viz;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hybridflow_core::energy::{energy_of, variants_csv, EnergyTable, VariantEnergy};
use hybridflow_core::losses::aee;
use hybridflow_core::network::{HybridConfig, Network, NetworkFile, NetworkSpec};
use hybridflow_core::neuron::ResetMode;
use hybridflow_core::synth::{synthesize_scene, SceneSpec};
use hybridflow_core::train::{
    ablate, ablation_csv, metrics_csv, AugmentConfig, ClipMode, Dataset, LossMode, TrainConfig,
    Trainer,
};
use hybridflow_core::{Error, Result};

use manifest::{to_table, RunManifest};

const DEFAULT_TABLE_FILE: &str = "energy_table.txt";

#[derive(Parser)]
#[command(
    name = "hybridflow",
    version,
    about = "Hybrid SNN-ANN optical flow from event cameras"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event dataset with ground-truth flow.
    Synth(SynthArgs),
    /// Train a network with BPTT.
    Train(TrainArgs),
    /// Compute AEE of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Estimate inference energy of network variants.
    Energy(EnergyArgs),
    /// Train a sweep of spiking-layer configurations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    /// Square resolution in pixels.
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Number of time bins stored in dataset.toml.
    #[arg(long = "T", visible_alias = "steps", default_value_t = 5)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum pattern speed, pixels per window.
    #[arg(long, default_value_t = 4.0)]
    max_speed: f32,
    /// Expected noise events per pixel per window.
    #[arg(long, default_value_t = 0.02)]
    noise_rate: f32,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct NetArgs {
    #[arg(long, default_value = "evflownet")]
    family: String,
    /// Base channel count (EV-FlowNet) or width (FireFlowNet).
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value = "hard")]
    reset: String,
    #[arg(long)]
    no_bntt: bool,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr0: f32,
    #[arg(long, default_value_t = 0.7)]
    lr_decay: f32,
    #[arg(long, default_value_t = 10)]
    lr_every: usize,
    /// supervised | selfsup
    #[arg(long, default_value = "supervised")]
    loss: String,
    #[arg(long)]
    flip: bool,
    #[arg(long)]
    rotate: bool,
    #[arg(long)]
    crop: Option<usize>,
    /// auto | always | never
    #[arg(long, default_value = "auto")]
    clip: String,
    #[arg(long)]
    multiscale: bool,
    /// Time bins; defaults to the dataset's own.
    #[arg(long = "T", visible_alias = "steps")]
    steps: Option<usize>,
    /// TOML file with `[network]` and `[train]` tables; overrides flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    /// none | all | first | rnn | comma-separated layer indices
    #[arg(long, default_value = "first")]
    spiking: String,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from a checkpoint up to `--epochs` total.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// test | train | all
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    dump_flow: bool,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    data: PathBuf,
    /// Dataset sample used as input.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Take the architecture, seed and weights from a checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long = "T", visible_alias = "steps")]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated: full-ann, full-snn, hybrid, or indices joined by `+`.
    #[arg(long, default_value = "full-ann,full-snn,hybrid")]
    variants: String,
    /// key = value energy table; `energy_table.txt` is used when present.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// `positions` (one spiking layer at each index), `counts` (the first
    /// m layers spiking, m = 0..=n) or `;`-separated configs like `first;none;0,1`.
    #[arg(long, default_value = "positions")]
    sweep: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

/// Everything needed to rebuild a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunConfig {
    network: NetworkFile,
    train: TrainConfig,
}

/// Deterministic per-component seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_SCENES: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DivergedLoss { .. } => 3,
        Error::ShapeMismatch(_)
        | Error::CorruptCheckpoint(_)
        | Error::VersionMismatch { .. }
        | Error::Io(_)
        | Error::MalformedRecord { .. }
        | Error::OutOfBounds { .. }
        | Error::NonMonotonicTime { .. }
        | Error::EmptyWindow { .. }
        | Error::TraceMissing(_)
        | Error::EmptyDataset => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Energy(a) => cmd_energy(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs `body`, then stamps the manifest with the outcome.
fn finish(mut m: RunManifest, body: impl FnOnce(&mut RunManifest) -> Result<()>) -> Result<()> {
    match body(&mut m) {
        Ok(()) => m.finish("ok"),
        Err(e) => {
            m.finish(&format!("failed: {e}"))?;
            Err(e)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(Error::InvalidConfig("--scenes must be positive".into()));
    }
    if a.res < 2 {
        return Err(Error::InvalidConfig(format!(
            "--res must be at least 2, got {}",
            a.res
        )));
    }
    if a.steps == 0 {
        return Err(Error::InvalidConfig("--T must be positive".into()));
    }
    if !(a.max_speed >= 0.0) || !(a.noise_rate >= 0.0) {
        return Err(Error::InvalidConfig(
            "speed and noise rate must be non-negative".into(),
        ));
    }
    let mut config = toml::Table::new();
    config.insert("scenes".into(), (a.scenes as i64).into());
    config.insert("res".into(), (a.res as i64).into());
    config.insert("steps".into(), (a.steps as i64).into());
    config.insert("max_speed".into(), (a.max_speed as f64).into());
    config.insert("noise_rate".into(), (a.noise_rate as f64).into());
    let m = RunManifest::begin(&a.out, "synth", a.seed, config)?;
    finish(m, |m| {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(a.seed, STREAM_SCENES));
        let scenes = (0..a.scenes)
            .map(|i| {
                let spec = SceneSpec::random(a.res, a.res, a.max_speed, a.noise_rate, &mut rng);
                synthesize_scene(&spec, sub_seed(a.seed, 1000 + i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = Dataset::write_scenes(&a.out, &scenes, a.steps)?;
        for i in 0..info.count {
            for suffix in [".evt", ".flo", "_start.png", "_end.png"] {
                m.output(&a.out.join(format!("{i:04}{suffix}")));
            }
        }
        m.output(&a.out.join("dataset.toml"));
        println!(
            "wrote {} scenes ({}x{}) to {}",
            info.count,
            info.width,
            info.height,
            a.out.display()
        );
        Ok(())
    })
}

fn train_config(f: &TrainFlags, seed: u64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: f.epochs,
        lr0: f.lr0,
        lr_decay: f.lr_decay,
        lr_every: f.lr_every,
        batch_size: f.batch_size,
        loss_mode: LossMode::parse(&f.loss)?,
        seed,
        augment: AugmentConfig {
            flip: f.flip,
            rotation: f.rotate,
            crop_size: f.crop,
        },
        clip: match f.clip.as_str() {
            "auto" => ClipMode::Auto,
            "always" | "on" => ClipMode::Always,
            "never" | "off" => ClipMode::Never,
            other => return Err(Error::InvalidConfig(format!("unknown clip mode `{other}`"))),
        },
        multiscale: f.multiscale,
        ..Default::default()
    };
    Ok(cfg)
}

fn network_file(n: &NetArgs, spiking: &str, steps: usize, seed: u64) -> Result<NetworkFile> {
    let reset = match n.reset.as_str() {
        "hard" => ResetMode::Hard,
        "soft" => ResetMode::Soft,
        other => return Err(Error::InvalidConfig(format!("unknown reset `{other}`"))),
    };
    Ok(NetworkFile {
        family: hybridflow_core::network::Family::parse(&n.family)?,
        k: n.k,
        steps,
        spiking: spiking.to_string(),
        seed,
        reset,
        bntt: !n.no_bntt,
    })
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves flags, then lets the config file override them.
fn resolve_run(
    net: &NetArgs,
    spiking: &str,
    flags: &TrainFlags,
    data: &Path,
    seed: u64,
) -> Result<RunConfig> {
    let info = Dataset::read_info(data)?;
    let steps = flags.steps.unwrap_or(info.steps);
    let run = RunConfig {
        network: network_file(net, spiking, steps, sub_seed(seed, STREAM_INIT))?,
        train: train_config(flags, sub_seed(seed, STREAM_TRAIN))?,
    };
    let Some(path) = &flags.config else {
        return Ok(run);
    };
    let text = fs::read_to_string(path)?;
    let over: toml::Table = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let mut table = to_table(&run)?;
    merge(&mut table, over);
    let run: RunConfig = table
        .try_into()
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    Ok(run)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = resolve_run(&a.net, &a.spiking, &a.train, &a.data, a.seed)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            t.cfg.epochs = run.train.epochs;
            run.train = t.cfg.clone();
            run.network.steps = t.net.spec().steps;
            t
        }
        None => {
            run.train.validate()?;
            let (spec, hybrid) = run.network.resolve()?;
            Trainer::new(
                Network::build(&spec, &hybrid, run.network.seed)?,
                run.train.clone(),
            )?
        }
    };
    let m = RunManifest::begin(&a.out, "train", a.seed, to_table(&run)?)?;
    finish(m, |m| {
        let spec = trainer.net.spec().clone();
        let (data, _) = Dataset::load(&a.data, Some(spec.steps))?;
        let (h, w) = data.resolution().ok_or(Error::EmptyDataset)?;
        spec.check_resolution(h, w)?;
        let (tr, val) = data.split(run.train.train_fraction);
        fs::write(a.out.join("network.toml"), run.network.to_toml())?;
        m.output(&a.out.join("network.toml"));
        let metrics = a.out.join("metrics.csv");
        let ckpt = a.out.join("checkpoint.ckpt");
        m.output(&metrics);
        m.output(&ckpt);
        m.write()?;
        println!(
            "training {} ({}) on {} samples, validating on {}",
            spec.family,
            trainer.net.hybrid().label(spec.num_activation_layers()),
            tr.len(),
            val.len()
        );
        while trainer.epoch < run.train.epochs {
            let e = trainer.run_epoch(&tr, &val)?;
            println!(
                "epoch {:3}  lr {:.6}  loss {:.5}  val AEE {:.4}",
                e.epoch, e.lr, e.train_loss, e.val_aee
            );
            fs::write(&metrics, metrics_csv(&trainer.log))?;
        }
        fs::write(&metrics, metrics_csv(&trainer.log))?;
        trainer.save(&ckpt)?;
        Ok(())
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let trainer = Trainer::load(&a.checkpoint)?;
    let net = trainer.net;
    let mut config = toml::Table::new();
    config.insert(
        "checkpoint".into(),
        a.checkpoint.display().to_string().into(),
    );
    config.insert("data".into(), a.data.display().to_string().into());
    config.insert("split".into(), a.split.clone().into());
    config.insert("dump_flow".into(), a.dump_flow.into());
    config.insert(
        "flow_visualization".into(),
        "color wheel, normalized by per-image max magnitude".into(),
    );
    let m = RunManifest::begin(&a.out, "eval", net.seed(), config)?;
    finish(m, |m| {
        let (data, info) = Dataset::load(&a.data, Some(net.spec().steps))?;
        if let Some(r) = trainer.resolution {
            if r != (info.height, info.width) {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint trained at {}x{}, dataset is {}x{}",
                    r.0, r.1, info.height, info.width
                )));
            }
        }
        net.spec().check_resolution(info.height, info.width)?;
        let (tr, te) = data.split(trainer.cfg.train_fraction);
        let (subset, offset) = match a.split.as_str() {
            "test" => (te, tr.len()),
            "train" => (tr, 0),
            "all" => (data, 0),
            other => return Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        };
        if subset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let viz_dir = a.out.join("viz");
        let flow_dir = a.out.join("flow");
        fs::create_dir_all(&viz_dir)?;
        m.note(viz::NORMALIZATION_NOTE);
        if a.dump_flow {
            fs::create_dir_all(&flow_dir)?;
        }
        let mut csv = String::from("sample,aee,event_pixels\n");
        let (mut total, mut n) = (0.0f64, 0usize);
        for (c, chunk) in subset.samples.chunks(a.batch_size.max(1)).enumerate() {
            let events: Vec<_> = chunk.iter().map(|s| &s.events).collect();
            let out = net.forward_sequence(&events)?;
            for (j, (pred, s)) in out.flow.iter().zip(chunk).enumerate() {
                let idx = offset + c * a.batch_size.max(1) + j;
                let mask = s.event_mask();
                let pixels = mask.iter().filter(|&&b| b).count();
                let value = match aee(pred, &s.flow, &mask) {
                    Ok(v) => {
                        total += v as f64;
                        n += 1;
                        v.to_string()
                    }
                    Err(Error::EmptyMask) => "nan".into(),
                    Err(e) => return Err(e),
                };
                csv.push_str(&format!("{idx},{value},{pixels}\n"));
                let png = viz_dir.join(format!("{idx:04}.png"));
                viz::write_flow_png(&png, pred)?;
                m.output(&png);
                if a.dump_flow {
                    let flo = flow_dir.join(format!("{idx:04}.flo"));
                    fs::write(&flo, pred.to_bytes())?;
                    m.output(&flo);
                }
            }
        }
        let mean = if n == 0 { f64::NAN } else { total / n as f64 };
        csv.push_str(&format!("mean,{mean},\n"));
        fs::write(a.out.join("aee.csv"), csv)?;
        m.output(&a.out.join("aee.csv"));
        println!("mean AEE over {n} samples: {mean:.4}");
        Ok(())
    })
}

fn parse_variant(name: &str, layers: usize) -> Result<HybridConfig> {
    HybridConfig::parse(&name.replace('+', ","), layers)
}

/// Builds `hybrid` with the weights of `trained` wherever names and shapes
/// agree.
fn transplant(trained: &Network, hybrid: &HybridConfig) -> Result<Network> {
    let mut net = Network::build(trained.spec(), hybrid, trained.seed())?;
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let name = net.params().name(id).to_string();
        if let Some(src) = trained.params().id(&name) {
            let t = trained.params().get(src);
            if t.shape() == net.params().get(id).shape() {
                *net.params_mut().get_mut(id) = t.clone();
            }
        }
    }
    if net.running_stats().len() == trained.running_stats().len() {
        net.running_stats_mut()
            .clone_from_slice(trained.running_stats());
    }
    Ok(net)
}

fn cmd_energy(a: EnergyArgs) -> Result<()> {
    let (table, table_note) = match &a.table {
        Some(p) => (
            EnergyTable::load(p)?,
            format!("energy table from {}", p.display()),
        ),
        None if Path::new(DEFAULT_TABLE_FILE).exists() => (
            EnergyTable::load(Path::new(DEFAULT_TABLE_FILE))?,
            format!("energy table from ./{DEFAULT_TABLE_FILE}"),
        ),
        None => (
            EnergyTable::default(),
            "energy table file absent; built-in defaults used".to_string(),
        ),
    };
    let base = match &a.checkpoint {
        Some(p) => Trainer::load(p)?.net,
        None => {
            let info = Dataset::read_info(&a.data)?;
            let nf = network_file(&a.net, "none", a.steps.unwrap_or(info.steps), a.seed)?;
            let (spec, hybrid) = nf.resolve()?;
            Network::build(&spec, &hybrid, a.seed)?
        }
    };
    let spec: NetworkSpec = base.spec().clone();
    let layers = spec.num_activation_layers();
    let names: Vec<&str> = a
        .variants
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidConfig("no variants given".into()));
    }
    let variants = names
        .iter()
        .map(|n| {
            let h = parse_variant(n, layers)?;
            h.validate(&spec)?;
            Ok((n.to_string(), h))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut config = toml::Table::new();
    config.insert("data".into(), a.data.display().to_string().into());
    config.insert("sample".into(), (a.sample as i64).into());
    config.insert("variants".into(), a.variants.clone().into());
    config.insert("family".into(), spec.family.to_string().into());
    config.insert("k".into(), (spec.k as i64).into());
    config.insert("steps".into(), (spec.steps as i64).into());
    if let Some(p) = &a.checkpoint {
        config.insert("checkpoint".into(), p.display().to_string().into());
    }
    config.insert(
        "table".into(),
        toml::Value::Table(toml::from_str(&table.to_text()).expect("table text is TOML")),
    );
    let mut m = RunManifest::begin(&a.out, "energy", base.seed(), config)?;
    m.note(table_note);
    finish(m, |m| {
        let (data, _) = Dataset::load(&a.data, Some(spec.steps))?;
        let sample = data.samples.get(a.sample).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "sample {} out of range ({} samples)",
                a.sample,
                data.len()
            ))
        })?;
        spec.check_resolution(sample.height(), sample.width())?;
        let mut rows = Vec::new();
        for (label, h) in &variants {
            let net = if h == base.hybrid() {
                base.clone()
            } else {
                transplant(&base, h)?
            };
            let report = energy_of(&net, &[&sample.events], &table)?;
            let path = a
                .out
                .join(format!("layers_{}.csv", label.replace('+', "_")));
            fs::write(&path, report.to_csv())?;
            m.output(&path);
            println!("{label}\n{report}\n");
            rows.push(VariantEnergy {
                label: label.clone(),
                report,
            });
        }
        let path = a.out.join("energy.csv");
        fs::write(&path, variants_csv(&rows))?;
        m.output(&path);
        println!("{:<14} {:>12}", "variant", "energy mJ");
        for r in &rows {
            println!("{:<14} {:>12.6}", r.label, r.total_mj());
        }
        Ok(())
    })
}

fn sweep_configs(sweep: &str, layers: usize) -> Result<Vec<HybridConfig>> {
    let configs = match sweep.trim() {
        "positions" => (0..layers).map(|i| HybridConfig::spiking([i])).collect(),
        "counts" => (0..=layers).map(|m| HybridConfig::spiking(0..m)).collect(),
        list => list
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| HybridConfig::parse(s, layers))
            .collect::<Result<Vec<_>>>()?,
    };
    if configs.is_empty() {
        return Err(Error::InvalidConfig("empty ablation sweep".into()));
    }
    Ok(configs)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let run = resolve_run(&a.net, "none", &a.train, &a.data, a.seed)?;
    run.train.validate()?;
    let (spec, _) = run.network.resolve()?;
    let configs = sweep_configs(&a.sweep, spec.num_activation_layers())?;
    let mut config = to_table(&run)?;
    config.insert("sweep".into(), a.sweep.clone().into());
    let m = RunManifest::begin(&a.out, "ablate", a.seed, config)?;
    finish(m, |m| {
        let (data, _) = Dataset::load(&a.data, Some(spec.steps))?;
        let (h, w) = data.resolution().ok_or(Error::EmptyDataset)?;
        spec.check_resolution(h, w)?;
        let (tr, val) = data.split(run.train.train_fraction);
        let mut cfg = run.train.clone();
        cfg.seed = run.network.seed;
        let rows = ablate(&spec, &configs, &tr, &val, &cfg)?;
        let path = a.out.join("ablation.csv");
        fs::write(&path, ablation_csv(&rows))?;
        m.output(&path);
        for r in &rows {
            println!("{:<20} val AEE {:.4}", r.label, r.val_aee);
        }
        Ok(())
    })
}
