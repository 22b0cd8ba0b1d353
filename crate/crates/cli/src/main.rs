//! `scd`: data generation, training, rollout, probing, benchmarking, and
//! container inspection.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use scd_core::config::{merge, RunConfig};
use scd_core::container::{diff_keys, Container};
use scd_core::data::{detokenize_video, gen_dataset, Dataset};
use scd_core::diffusion::DiffusionSchedule;
use scd_core::family::Model;
use scd_core::metrics::{score_video, scores_csv};
use scd_core::probe::{
    cross_frame_attention_mass, curve_csv, leave_one_out, matrix_csv, pca_alignment, per_layer_mean_distance,
    step_similarity_matrix, trend_report, ActivationTrace, SimMetric,
};
use scd_core::rollout::{bench, rollout};
use scd_core::train::{check_config, load_params, TrainData, Trainer};
use scd_core::{Error, Tensor};

/// Keys that may change between a checkpoint and the run resuming it.
const RESUME_FREE_KEYS: [&str; 3] = ["train.steps", "train.log_every", "train.save_every"];

/// Data keys that fix a model's shapes.
const GEOM_KEYS: [&str; 5] = ["height", "width", "channels", "patch_size", "num_actions"];

#[derive(Parser)]
#[command(name = "scd", version, about = "Separable causal video diffusion toolkit")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Roll out frames from a checkpoint.
    Rollout(RolloutArgs),
    /// Run a diagnostic probe on a trace or checkpoint.
    Probe(ProbeArgs),
    /// Time full rollouts and check block-pass counts.
    Bench(BenchArgs),
    /// Print the header of any container file.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file; generated from the `data` section when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    cfg_eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset supplying actions, context frames, and reference frames.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequence index within `--data`.
    #[arg(long, default_value_t = 0)]
    seq: usize,
    /// Comma-separated actions when no dataset is given (default all 0).
    #[arg(long, value_delimiter = ',')]
    actions: Option<Vec<usize>>,
    /// Record per-layer, per-step features.
    #[arg(long)]
    capture: bool,
    /// Record attention maps as well.
    #[arg(long)]
    capture_attn: bool,
    /// `all` or comma-separated global layer indices.
    #[arg(long)]
    capture_layers: Option<String>,
    /// Trace path; defaults to `<out>.trace`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Per-frame PSNR/SSIM CSV against the dataset sequence.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    StepSim,
    MeanDistance,
    Pca,
    XframeMass,
    LeaveOneOut,
    Trend,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(value_enum)]
    kind: ProbeKind,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `cosine`, `cosine_flat`, or `mse`.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    frame: Option<usize>,
    #[arg(long)]
    head: Option<usize>,
    #[arg(long)]
    ref_step: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Two comma-separated variant names, e.g. `scd-b,dit-b`.
    #[arg(long, value_delimiter = ',')]
    pair: Option<Vec<String>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status 2 for anything wrong with the configuration.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn config_err(key: &str, msg: impl Into<String>) -> anyhow::Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
    .into()
}

struct Ctx {
    file: Option<Value>,
    sets: Vec<String>,
    env_seed: Option<u64>,
}

impl Ctx {
    fn new(cli: &Cli) -> anyhow::Result<Self> {
        let file = match &cli.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Some(serde_json::from_str(&text).map_err(|e| config_err("<config>", e.to_string()))?)
            }
            None => None,
        };
        let env_seed = match std::env::var("SCD_SEED") {
            Ok(s) => Some(
                s.trim()
                    .parse()
                    .map_err(|_| config_err("SCD_SEED", format!("`{s}` is not a u64")))?,
            ),
            Err(_) => None,
        };
        Ok(Ctx {
            file,
            sets: cli.sets.clone(),
            env_seed,
        })
    }

    /// Layers: `base` (a checkpoint snapshot), the config file, `--set`, then
    /// subcommand flags.
    fn load(&self, base: Option<&Value>, flags: &[String]) -> anyhow::Result<RunConfig> {
        let user = match (base, &self.file) {
            (Some(b), Some(f)) => {
                let mut v = b.clone();
                merge(&mut v, f);
                Some(v)
            }
            (Some(b), None) => Some(b.clone()),
            (None, f) => f.clone(),
        };
        let mut overrides = self.sets.clone();
        overrides.extend_from_slice(flags);
        Ok(RunConfig::load(user.as_ref(), &overrides, self.env_seed)?)
    }
}

fn flag<V: std::fmt::Display>(out: &mut Vec<String>, key: &str, v: Option<V>) {
    if let Some(v) = v {
        out.push(format!("{key}={v}"));
    }
}

fn write_out(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_container(path: &Path, kind: &str) -> anyhow::Result<Container> {
    let c = Container::load(path).with_context(|| format!("reading {}", path.display()))?;
    c.expect_kind(kind)?;
    Ok(c)
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Ok(Dataset::from_container(&load_container(path, "dataset")?)?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Error unless `ds` was generated with the same `data` section as `cfg`.
fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> anyhow::Result<()> {
    let ignore = ["num_sequences", "seed"];
    Ok(check_config(
        &serde_json::to_value(&cfg.data)?,
        &serde_json::to_value(&ds.config)?,
        &ignore,
    )?)
}

/// Error if `cfg` would build a model with different shapes than the one in `snapshot`.
fn check_model_matches(snapshot: &Value, cfg: &RunConfig) -> anyhow::Result<()> {
    let now = cfg.to_json();
    let mut keys: Vec<String> = diff_keys(&snapshot["model"], &now["model"])
        .into_iter()
        .map(|k| format!("model.{k}"))
        .collect();
    for k in GEOM_KEYS {
        if snapshot["data"][k] != now["data"][k] {
            keys.push(format!("data.{k}"));
        }
    }
    if keys.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(keys).into())
    }
}

fn model_from_ckpt(ckpt: &Container, cfg: &RunConfig, use_ema: bool) -> anyhow::Result<Model<f32>> {
    check_model_matches(&ckpt.config, cfg)?;
    let mut model = Model::new(&cfg.model_config()?, cfg.model.init_seed)?;
    load_params(ckpt, model.params_mut(), use_ema)?;
    Ok(model)
}

fn cmd_gen_data(ctx: &Ctx, out: &Path) -> anyhow::Result<()> {
    let cfg = ctx.load(None, &[])?;
    let ds = gen_dataset(&cfg.data, cfg.data.num_sequences, cfg.data.seed)?;
    let mut c = ds.to_container()?;
    c.meta["run_config"] = cfg.to_json();
    c.save(out)?;
    eprintln!("wrote {} sequences to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<()> {
    let mut flags = Vec::new();
    flag(&mut flags, "train.steps", a.steps);
    let resume = a
        .resume
        .as_deref()
        .map(|p| load_container(p, "checkpoint"))
        .transpose()?;
    let cfg = ctx.load(None, &flags)?;
    let ds = match &a.data {
        Some(p) => {
            let ds = load_dataset(p)?;
            check_dataset(&cfg, &ds)?;
            ds
        }
        None => gen_dataset(&cfg.data, cfg.data.num_sequences, cfg.data.seed)?,
    };
    let data = TrainData::<f32>::from_dataset(&ds)?;
    let model = Model::new(&cfg.model_config()?, cfg.model.init_seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), DiffusionSchedule::default())?;
    let snapshot = cfg.to_json();
    if let Some(c) = &resume {
        check_config(&c.config, &snapshot, &RESUME_FREE_KEYS)?;
        trainer.restore(c)?;
    }
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let out = a.out.clone();
    let stats = trainer.run(&data, &mut log, |t| t.to_container(snapshot.clone()).save(&out))?;
    trainer.to_container(snapshot).save(&a.out)?;
    if let Some(s) = stats.last() {
        eprintln!("step {} loss {:.6}", s.step, s.loss);
    }
    Ok(())
}

fn parse_layers(spec: &str) -> anyhow::Result<Option<Vec<usize>>> {
    if spec == "all" {
        return Ok(None);
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| config_err("rollout.capture_layers", format!("bad layer `{s}`")))
        })
        .collect::<anyhow::Result<Vec<usize>>>()
        .map(Some)
}

fn cmd_rollout(ctx: &Ctx, a: &RolloutArgs) -> anyhow::Result<()> {
    let ckpt = load_container(&a.ckpt, "checkpoint")?;
    let mut flags = Vec::new();
    flag(&mut flags, "rollout.num_frames", a.frames);
    flag(&mut flags, "rollout.denoise_steps", a.steps);
    flag(&mut flags, "rollout.cfg_scale", a.cfg_scale);
    flag(&mut flags, "rollout.cfg_eta", a.cfg_eta);
    flag(&mut flags, "rollout.seed", a.seed);
    if a.capture {
        flags.push("rollout.capture=true".into());
    }
    if a.capture_attn {
        flags.push("rollout.capture_attn=true".into());
    }
    if let Some(spec) = &a.capture_layers {
        let layers = parse_layers(spec)?;
        flags.push(format!("rollout.capture_layers={}", serde_json::to_string(&layers)?));
        flags.push("rollout.capture=true".into());
    }
    let cfg = ctx.load(Some(&ckpt.config), &flags)?;
    let model = model_from_ckpt(&ckpt, &cfg, cfg.rollout.use_ema)?;
    let n = cfg.rollout.num_frames;
    let ds = a.data.as_deref().map(load_dataset).transpose()?;
    if let Some(ds) = &ds {
        check_dataset(&cfg, ds)?;
        if a.seq >= ds.len() {
            bail!(config_err("--seq", format!("sequence {} of {}", a.seq, ds.len())));
        }
    }
    let actions: Vec<usize> = match (&ds, &a.actions) {
        (Some(ds), _) => {
            let acts = &ds.samples[a.seq].actions;
            if acts.len() < n {
                bail!(config_err(
                    "rollout.num_frames",
                    format!("dataset sequences have {} frames", acts.len())
                ));
            }
            acts[..n].to_vec()
        }
        (None, Some(acts)) if acts.len() == n => acts.clone(),
        (None, Some(acts)) => bail!(config_err(
            "--actions",
            format!("{} actions for {n} frames", acts.len())
        )),
        (None, None) => vec![0; n],
    };
    let c = cfg.rollout.context_frames;
    let context: Option<Tensor<f32>> = match (&ds, c) {
        (_, 0) => None,
        (Some(ds), c) => Some(ds.tokens::<f32>(a.seq)?.rows(0, c)?),
        (None, _) => bail!(config_err("rollout.context_frames", "context frames need --data")),
    };
    let p = model.params().bind(false);
    let out = rollout(&model, &p, &actions, context.as_ref(), &cfg.rollout_config())?;
    let frames = detokenize_video(&out.frames, &cfg.data.geom())?;
    let snapshot = cfg.to_json();
    let mut fc = Container::new("frames", snapshot.clone());
    fc.meta = json!({
        "family": cfg.model.family,
        "actions": actions,
        "context_frames": c,
        "block_invocations": out.block_invocations,
        "cache_tokens": out.cache_tokens,
    });
    fc.push("frames", &frames);
    fc.push("tokens", &out.frames);
    fc.save(&a.out)?;
    if let Some(mut trace) = out.trace {
        trace.meta["config"] = snapshot;
        let path = a.trace.clone().unwrap_or_else(|| with_suffix(&a.out, ".trace"));
        trace.to_container().save(&path)?;
        eprintln!("wrote trace to {}", path.display());
    }
    if let Some(path) = &a.metrics {
        let ds = ds
            .as_ref()
            .ok_or_else(|| config_err("--metrics", "metrics need --data"))?;
        let reference = ds.samples[a.seq].frames.rows(0, n)?;
        write_out(Some(path), &scores_csv(&score_video(a.seq, &reference, &frames)?))?;
    }
    eprintln!("wrote {n} frames to {}", a.out.display());
    Ok(())
}

fn parse_metric(s: &str) -> anyhow::Result<SimMetric> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| config_err("probe.metric", format!("unknown metric `{s}`")))
}

fn load_trace(path: Option<&Path>) -> anyhow::Result<ActivationTrace> {
    let path = path.ok_or_else(|| config_err("--trace", "this probe needs a trace"))?;
    Ok(ActivationTrace::from_container(&load_container(path, "trace")?)?)
}

fn cmd_probe(ctx: &Ctx, a: &ProbeArgs) -> anyhow::Result<()> {
    let mut flags = Vec::new();
    if let Some(m) = &a.metric {
        flags.push(format!("probe.metric={}", serde_json::to_string(&parse_metric(m)?)?));
    }
    flag(&mut flags, "probe.layer", a.layer);
    flag(&mut flags, "probe.frame", a.frame);
    flag(&mut flags, "probe.head", a.head);
    flag(&mut flags, "probe.ref_step", a.ref_step);
    flag(&mut flags, "probe.k", a.k);
    let out = a.out.as_deref();
    if let ProbeKind::LeaveOneOut = a.kind {
        let path = a
            .ckpt
            .as_deref()
            .ok_or_else(|| config_err("--ckpt", "leave-one-out needs a checkpoint"))?;
        let ckpt = load_container(path, "checkpoint")?;
        let cfg = ctx.load(Some(&ckpt.config), &flags)?;
        let model = model_from_ckpt(&ckpt, &cfg, cfg.rollout.use_ema)?;
        let ds = match &a.data {
            Some(p) => load_dataset(p)?,
            None => gen_dataset(&cfg.data, cfg.probe.batch, cfg.probe.seed)?,
        };
        check_dataset(&cfg, &ds)?;
        let data = TrainData::<f32>::from_dataset(&ds)?;
        let idx: Vec<usize> = (0..cfg.probe.batch.min(data.len())).collect();
        let (frames, actions) = data.batch(&idx)?;
        let p = model.params().bind(false);
        let r = leave_one_out(&model, &p, &frames, &actions, &cfg.probe.levels, cfg.probe.seed)?;
        if r.full.to_bits() != r.full_after.to_bits() {
            bail!(
                "full-model loss changed across the sweep: {} vs {}",
                r.full,
                r.full_after
            );
        }
        let rows: Vec<(usize, f64)> = r.deltas.iter().copied().enumerate().collect();
        eprintln!("full validation loss {}", r.full);
        return write_out(out, &curve_csv("layer,delta_loss", &rows));
    }
    let cfg = ctx.load(None, &flags)?;
    let trace = load_trace(a.trace.as_deref())?;
    let pc = &cfg.probe;
    let layer = match pc.layer {
        Some(l) => l,
        None => *trace
            .layers()
            .first()
            .ok_or_else(|| anyhow!("trace holds no features"))?,
    };
    let text = match a.kind {
        ProbeKind::StepSim => matrix_csv(&step_similarity_matrix(&trace, layer, pc.frame, pc.metric)?),
        ProbeKind::MeanDistance => curve_csv("layer,mean_mse_distance", &per_layer_mean_distance(&trace, pc.frame)?),
        ProbeKind::Pca => {
            let r = pca_alignment(&trace, layer, pc.frame, pc.ref_step, pc.k)?;
            format!("{}\n", serde_json::to_string_pretty(&r)?)
        }
        ProbeKind::XframeMass => {
            let rows = trace
                .attn_layers()
                .into_iter()
                .map(|l| Ok((l, cross_frame_attention_mass(&trace, l, pc.head, pc.frame)?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            if rows.is_empty() {
                bail!("trace holds no attention maps; capture with --capture-attn");
            }
            curve_csv("layer,xframe_mass", &rows)
        }
        ProbeKind::Trend => format!("{}\n", serde_json::to_string_pretty(&trend_report(&trace)?)?),
        ProbeKind::LeaveOneOut => unreachable!("handled above"),
    };
    write_out(out, &text)
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> anyhow::Result<()> {
    let mut flags = Vec::new();
    flag(&mut flags, "bench.steps", a.steps);
    flag(&mut flags, "bench.trials", a.trials);
    flag(&mut flags, "bench.frames", a.frames);
    let variants: Vec<Option<&String>> = match &a.pair {
        Some(p) if p.len() == 2 => p.iter().map(Some).collect(),
        Some(p) => bail!(config_err("--pair", format!("expected two variants, got {}", p.len()))),
        None => vec![None],
    };
    let mut reports = Vec::new();
    for v in variants {
        let mut f = flags.clone();
        if let Some(v) = v {
            f.push(format!("model.variant={v}"));
        }
        let cfg = ctx.load(None, &f)?;
        let model = Model::<f32>::new(&cfg.model_config()?, cfg.model.init_seed)?;
        let r = bench(&model, &cfg.bench)?;
        eprintln!(
            "{}: {:.4} s/frame, {} block passes per frame",
            v.map_or("model", |s| s.as_str()),
            r.sec_per_frame,
            r.bp_per_frame
        );
        reports.push((v.cloned(), r));
    }
    let mut doc = json!({
        "reports": reports
            .iter()
            .map(|(v, r)| {
                let mut j = serde_json::to_value(r).expect("report serializes");
                j["variant"] = json!(v);
                j
            })
            .collect::<Vec<_>>(),
    });
    if let [(_, x), (_, y)] = reports.as_slice() {
        doc["bp_ratio"] = json!(format!("{}:{}", x.bp_per_frame, y.bp_per_frame));
        doc["sec_per_frame_ratio"] = json!(x.sec_per_frame / y.sec_per_frame);
    }
    write_out(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    let bad: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.counts_match())
        .map(|(v, r)| {
            format!(
                "{}: counted {} block passes, expected {}",
                v.as_deref().unwrap_or("model"),
                r.block_invocations,
                r.expected_invocations
            )
        })
        .collect();
    if !bad.is_empty() {
        bail!("{}", bad.join("; "));
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> anyhow::Result<()> {
    let c = Container::load(path).with_context(|| format!("reading {}", path.display()))?;
    let tensors: Vec<Value> = c
        .tensors
        .iter()
        .map(|(n, t)| json!({"name": n, "shape": t.shape(), "dtype": t.dtype()}))
        .collect();
    let doc = json!({
        "kind": c.kind,
        "step": c.step,
        "config": c.config,
        "meta": c.meta,
        "tensors": tensors,
    });
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx::new(&cli)?;
    match &cli.cmd {
        Cmd::GenData { out } => cmd_gen_data(&ctx, out),
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::Rollout(a) => cmd_rollout(&ctx, a),
        Cmd::Probe(a) => cmd_probe(&ctx, a),
        Cmd::Bench(a) => cmd_bench(&ctx, a),
        Cmd::Inspect { path } => cmd_inspect(path),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
