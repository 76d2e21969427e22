//! `gmlnet` command-line tool.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gmlnet::blocks::BlockMode;
use gmlnet::config::{parse_kv, parse_switch};
use gmlnet::data::{gen_dataset, write_dataset, Dataset, GenParams};
use gmlnet::eval::{accuracy, auc, export_heatmap, report_csv, score_dataset};
use gmlnet::gradcheck::{grad_check, OpId, TOLERANCE};
use gmlnet::io::read_tensor;
use gmlnet::network::{L1Reduction, Model, ModelConfig};
use gmlnet::training::{load_checkpoint, log_csv, save_checkpoint, TrainConfig, Trainer};
use gmlnet::Tape;

// Training frees and reallocates many large activations every step; the
// system allocator returns them to the kernel and pays page faults each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "gmlnet", version, about = "Motion-consistency video manipulation detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset of real and jittered sequences.
    GenData(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Report accuracy and AUC of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradArgs),
    /// Export per-frame F* heatmaps for one sequence.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    fake_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// C,T,H,W
    #[arg(long)]
    shape: Option<Shape>,
    #[arg(long)]
    jitter_amp: Option<f64>,
    #[arg(long)]
    region_fraction: Option<f64>,
    #[arg(long)]
    blob_count: Option<usize>,
    /// `key = value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path; the model configuration goes to `<out>.config`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    wd: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    /// cstm, stm or mcb
    #[arg(long)]
    mode: Option<String>,
    /// on or off
    #[arg(long)]
    ad: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    multiplier: Option<usize>,
    /// Stage feeding the AD branch (default: last).
    #[arg(long)]
    tap: Option<usize>,
    /// Channel reduction of the motion branch.
    #[arg(long)]
    ratio: Option<usize>,
    /// sum or mean
    #[arg(long)]
    l1_reduction: Option<String>,
    /// Loss log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Continue from this checkpoint; `--steps` is the total.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    op: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Files are written as `<out>_t<frame>.pgm`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
struct Shape([usize; 4]);

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        let dims: [usize; 4] = parts
            .try_into()
            .map_err(|v: Vec<usize>| format!("expected C,T,H,W, got {} values", v.len()))?;
        Ok(Shape(dims))
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [c, t, h, w] = self.0;
        write!(f, "{c},{t},{h},{w}")
    }
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<gmlnet::Error> for Failure {
    fn from(e: gmlnet::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<ExitCode, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Values from `--config`, consulted for every flag left unset.
struct FileLayer {
    values: BTreeMap<String, String>,
}

impl FileLayer {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_kv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))? {
                let k = k.replace('-', "_");
                if !allowed.contains(&k.as_str()) {
                    return Err(usage(format!("{}: unknown key {k:?}", path.display())));
                }
                values.insert(k, v);
            }
        }
        Ok(Self { values })
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| usage(format!("config key {key}: {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| usage(format!("missing required --{}", key.replace('_', "-"))))
    }
}

/// Prints the resolved settings as one `key=value` line.
fn echo(cmd: &str, pairs: &[(&str, String)]) {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("effective config: {cmd} {}", body.join(" "));
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn load_model(ckpt_path: &Path) -> anyhow::Result<Model<f32>> {
    let side = sidecar(ckpt_path);
    let text = fs::read_to_string(&side).with_context(|| format!("reading model config {}", side.display()))?;
    let cfg = ModelConfig::from_kv(&text).with_context(|| format!("parsing {}", side.display()))?;
    let ckpt = load_checkpoint(ckpt_path)?;
    Ok(ckpt.restore_model(&cfg)?)
}

fn gen_data(a: GenArgs) -> Outcome {
    const KEYS: &[&str] = &["out", "count", "fake_ratio", "seed", "shape", "jitter_amp", "region_fraction", "blob_count"];
    let f = FileLayer::load(a.config.as_deref(), KEYS)?;
    let d = GenParams::default();
    let out: PathBuf = f.required(a.out, "out")?;
    let count = f.or(a.count, "count", 512)?;
    let fake_ratio = f.or(a.fake_ratio, "fake_ratio", 0.5)?;
    let seed = f.or(a.seed, "seed", 0)?;
    let shape = f.or(a.shape, "shape", Shape([d.channels, d.t, d.h, d.w]))?;
    let [channels, t, h, w] = shape.0;
    let p = GenParams {
        channels,
        t,
        h,
        w,
        jitter_amp: f.or(a.jitter_amp, "jitter_amp", d.jitter_amp)?,
        region_fraction: f.or(a.region_fraction, "region_fraction", d.region_fraction)?,
        blob_count: f.or(a.blob_count, "blob_count", d.blob_count)?,
        ..d
    };
    p.validate().map_err(|e| usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&fake_ratio) {
        return Err(usage(format!("--fake-ratio {fake_ratio} not in [0, 1]")));
    }
    echo(
        "gen-data",
        &[
            ("out", out.display().to_string()),
            ("count", count.to_string()),
            ("fake_ratio", fake_ratio.to_string()),
            ("seed", seed.to_string()),
            ("shape", shape.to_string()),
            ("jitter_amp", p.jitter_amp.to_string()),
            ("region_fraction", p.region_fraction.to_string()),
            ("blob_count", p.blob_count.to_string()),
        ],
    );
    let samples = gen_dataset(&p, count, fake_ratio, seed)?;
    let manifest = write_dataset(&out, &samples)?;
    let fakes = manifest.entries.iter().filter(|e| e.label == 1).count();
    println!("wrote {} sequences ({fakes} fake) to {}", manifest.entries.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Outcome {
    const KEYS: &[&str] = &[
        "data", "out", "steps", "lr", "wd", "momentum", "batch", "mode", "ad", "seed", "stages", "width",
        "multiplier", "tap", "ratio", "l1_reduction", "log", "log_every", "resume",
    ];
    let f = FileLayer::load(a.config.as_deref(), KEYS)?;
    let data_dir: PathBuf = f.required(a.data, "data")?;
    let out: PathBuf = f.required(a.out, "out")?;
    let tc0 = TrainConfig::default();
    let mc0 = ModelConfig::default();
    let seed = f.or(a.seed, "seed", 0)?;
    let stages = f.or(a.stages, "stages", mc0.stages)?;
    let ad = f.or(a.ad, "ad", "on".to_string())?;
    let mode = f.or(a.mode, "mode", mc0.mode.to_string())?;
    let reduction = f.or(a.l1_reduction, "l1_reduction", mc0.l1_reduction.to_string())?;
    let model_cfg = ModelConfig {
        stages,
        base_width: f.or(a.width, "width", mc0.base_width)?,
        width_multiplier: f.or(a.multiplier, "multiplier", mc0.width_multiplier)?,
        mode: mode.parse::<BlockMode>().map_err(|e| usage(e.to_string()))?,
        ad_enabled: parse_switch(&ad).map_err(|e| usage(format!("--ad: {e}")))?,
        ad_tap_stage: f.or(a.tap, "tap", stages.saturating_sub(1))?,
        reduction_ratio: f.or(a.ratio, "ratio", mc0.reduction_ratio)?,
        seed,
        l1_reduction: reduction.parse::<L1Reduction>().map_err(|e| usage(e.to_string()))?,
    };
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let tc = TrainConfig {
        lr: f.or(a.lr, "lr", tc0.lr)?,
        weight_decay: f.or(a.wd, "wd", tc0.weight_decay)?,
        momentum: f.or(a.momentum, "momentum", tc0.momentum)?,
        batch_size: f.or(a.batch, "batch", tc0.batch_size)?,
        steps: f.or(a.steps, "steps", tc0.steps)?,
        seed,
        log_every: f.or(a.log_every, "log_every", tc0.log_every)?,
    };
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let log: Option<PathBuf> = f.pick(a.log, "log")?;
    let resume: Option<PathBuf> = f.pick(a.resume, "resume")?;

    let mut pairs = vec![
        ("data", data_dir.display().to_string()),
        ("out", out.display().to_string()),
        ("steps", tc.steps.to_string()),
        ("lr", tc.lr.to_string()),
        ("wd", tc.weight_decay.to_string()),
        ("momentum", tc.momentum.to_string()),
        ("batch", tc.batch_size.to_string()),
        ("mode", model_cfg.mode.to_string()),
        ("ad", if model_cfg.ad_enabled { "on" } else { "off" }.to_string()),
        ("seed", seed.to_string()),
        ("stages", model_cfg.stages.to_string()),
        ("width", model_cfg.base_width.to_string()),
        ("multiplier", model_cfg.width_multiplier.to_string()),
        ("tap", model_cfg.ad_tap_stage.to_string()),
        ("ratio", model_cfg.reduction_ratio.to_string()),
        ("l1_reduction", model_cfg.l1_reduction.to_string()),
        ("log_every", tc.log_every.to_string()),
    ];
    if let Some(l) = &log {
        pairs.push(("log", l.display().to_string()));
    }
    if let Some(r) = &resume {
        pairs.push(("resume", r.display().to_string()));
    }
    echo("train", &pairs);

    let data = Dataset::load(&data_dir)?;
    let mut trainer = match &resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            Trainer::resume(&model_cfg, &ckpt, &data, tc.clone())?
        }
        None => Trainer::new(Model::build(&model_cfg)?, &data, tc.clone())?,
    };
    let start = trainer.step();
    let report_every = (tc.steps.saturating_sub(start) / 20).max(1);
    let mut last = None;
    let rows = trainer.run_until(&data, tc.steps, |row| {
        if row.step % report_every == 0 || row.step == tc.steps {
            let l = &row.losses;
            eprintln!(
                "step {:>6}  l_cls1 {:.4}  l_l1 {:.4}  l_cls2 {:.4}  total {:.4}",
                row.step, l.l_cls1, l.l_l1, l.l_cls2, l.total
            );
        }
        last = Some(row.losses);
    });
    let rows = match rows {
        Ok(r) => r,
        Err(e) => {
            let hint = if model_cfg.ad_enabled && model_cfg.l1_reduction == L1Reduction::Sum {
                " (the summed L1 term can be large; try --l1-reduction mean or a smaller --lr)"
            } else {
                ""
            };
            return Err(Failure::Runtime(anyhow::anyhow!("{e}{hint}")));
        }
    };

    save_checkpoint(&out, &trainer.checkpoint())?;
    let side = sidecar(&out);
    fs::write(&side, model_cfg.to_kv()).with_context(|| format!("writing {}", side.display()))?;
    if let Some(path) = &log {
        fs::write(path, log_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    match last {
        Some(l) => println!("trained to step {} (total loss {:.4}); checkpoint {}", trainer.step(), l.total, out.display()),
        None => println!("no steps run; checkpoint {}", out.display()),
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Outcome {
    let f = FileLayer::load(a.config.as_deref(), &["data", "ckpt", "report", "batch"])?;
    let data_dir: PathBuf = f.required(a.data, "data")?;
    let ckpt: PathBuf = f.required(a.ckpt, "ckpt")?;
    let report: Option<PathBuf> = f.pick(a.report, "report")?;
    let batch = f.or(a.batch, "batch", 16)?;
    if batch == 0 {
        return Err(usage("--batch must be at least 1"));
    }
    let mut pairs = vec![
        ("data", data_dir.display().to_string()),
        ("ckpt", ckpt.display().to_string()),
        ("batch", batch.to_string()),
    ];
    if let Some(r) = &report {
        pairs.push(("report", r.display().to_string()));
    }
    echo("eval", &pairs);

    let model = load_model(&ckpt)?;
    let data = Dataset::load(&data_dir)?;
    let scores = score_dataset(&model, &data, batch)?;
    let acc = accuracy(&scores, 0.5)?;
    let auc = auc(&scores)?;
    let csv = report_csv(acc, auc);
    print!("{csv}");
    if let Some(path) = &report {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradArgs) -> Outcome {
    let f = FileLayer::load(a.config.as_deref(), &["seed", "op"])?;
    let seed = f.or(a.seed, "seed", 0)?;
    let op: Option<String> = f.pick(a.op, "op")?;
    let ops: Vec<OpId> = match &op {
        Some(name) => vec![name.parse().map_err(|e: gmlnet::Error| {
            let names: Vec<&str> = OpId::ALL.iter().map(|o| o.name()).collect();
            usage(format!("{e}; known ops: {}", names.join(", ")))
        })?],
        None => OpId::ALL.to_vec(),
    };
    let mut pairs = vec![("seed", seed.to_string())];
    if let Some(o) = &op {
        pairs.push(("op", o.clone()));
    }
    echo("gradcheck", &pairs);

    let mut all_ok = true;
    for op in ops {
        let r = grad_check(op, seed)?;
        let ok = r.passed(TOLERANCE);
        all_ok &= ok;
        println!(
            "{:<28} max_rel_error {:.3e}  checked {:>5}  skipped {:>3}  {}",
            op.name(),
            r.max_rel_error,
            r.checked,
            r.skipped,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn heatmap(a: HeatmapArgs) -> Outcome {
    let f = FileLayer::load(a.config.as_deref(), &["ckpt", "input", "out"])?;
    let ckpt: PathBuf = f.required(a.ckpt, "ckpt")?;
    let input: PathBuf = f.required(a.input, "input")?;
    let out: PathBuf = f.required(a.out, "out")?;
    echo(
        "heatmap",
        &[
            ("ckpt", ckpt.display().to_string()),
            ("input", input.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let model = load_model(&ckpt)?;
    if model.ad.is_none() {
        return Err(Failure::Runtime(anyhow::anyhow!("checkpoint {} has no AD branch", ckpt.display())));
    }
    let x = read_tensor(&input)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let fwd = model.forward(&mut tape, xv)?;
    let f_star = tape.value(fwd.f_star.expect("AD branch present"));
    let paths = export_heatmap(f_star, &out.to_string_lossy())?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Heatmap(a) => heatmap(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: gmlnet <gen-data|train|eval|gradcheck|heatmap> [OPTIONS]\nRun `gmlnet help <command>` for the options of a command.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
