use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tempretinex::data_io::{
    load_dataset, load_frame, save_frame, save_sequence, synth_sequence, SaveFormat, SynthKind, MIN_SIDE,
};
use tempretinex::flow::{build_estimator, build_estimator_or_classical, FlowEstimator};
use tempretinex::frame::FrameSequence;
use tempretinex::metrics::{evaluate, mabd_pairwise, EvalReport, MabdMode, Protocol, SequenceScores};
use tempretinex::networks::Networks;
use tempretinex::pipeline::{enhance_sequence, reverse_inference, train, Manifest};
use tempretinex::preprocessing::{apply_aba_with, channel_histogram};
use tempretinex::{Error, RunConfig};

const CONFIG_ENV: &str = "TEMPRETINEX_CONFIG";

#[derive(Parser)]
#[command(name = "tempretinex", version, about = "Unsupervised low-light video enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the enhancement networks on unlabeled low-light sequences.
    Train(TrainArgs),
    /// Enhance sequences with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Run adaptive brightness adjustment alone and dump histograms.
    Aba(AbaArgs),
    /// Write a synthetic low-light sequence and its ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; falls back to $TEMPRETINEX_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["external", "classical", "zero"])]
    flow: Option<String>,
    /// Checkpoint of the external flow model.
    #[arg(long)]
    flow_ckpt: Option<PathBuf>,
    /// Program run by the external flow backend.
    #[arg(long)]
    flow_command: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory: frames, or one subdirectory per sequence. Repeatable.
    #[arg(long = "data", alias = "data2", required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Train a separate model on each sequence.
    #[arg(long)]
    per_video: bool,
    #[arg(long, default_value = "*")]
    pattern: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Average a forward and a backward pass.
    #[arg(long)]
    offline: bool,
    #[arg(long, default_value = "*")]
    pattern: String,
    #[arg(long, default_value = "png16", value_parser = ["png8", "png16"])]
    format: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also score after histogram matching each prediction to its ground truth.
    #[arg(long)]
    hm: bool,
    /// Report MABD between each frame and its flow-aligned predecessor.
    #[arg(long)]
    mabd_pairwise: bool,
    /// Flow model checkpoint for pairwise MABD (same as --flow-ckpt).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Directory for the CSV/JSON reports.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value = "*")]
    pattern: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AbaArgs {
    /// An image file or a directory of frames.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "*")]
    pattern: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "static", value_parser = ["static", "pan", "occlusion"])]
    kind: String,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0.1)]
    brightness: f32,
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Checkpoint(_) | Error::ShapeMismatch(_) => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn resolve_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let path = args
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(&p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(flow) = &args.flow {
        cfg.flow_backend = flow.parse()?;
    }
    if let Some(p) = &args.flow_ckpt {
        cfg.flow_checkpoint_path = Some(p.clone());
    }
    if let Some(c) = &args.flow_command {
        cfg.flow_command = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn estimator(cfg: &RunConfig, strict: bool) -> CliResult<Box<dyn FlowEstimator>> {
    let build = if strict {
        build_estimator
    } else {
        build_estimator_or_classical
    };
    Ok(build(
        cfg.flow_backend,
        cfg.flow_command.as_deref(),
        cfg.flow_checkpoint_path.as_deref(),
    )?)
}

fn ensure_distinct(input: &Path, out: &Path) -> CliResult<()> {
    let canon = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    if canon(input) == canon(out) {
        return Err(usage(format!("--out must differ from the input directory {}", input.display())));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.cfg)?;
    let mut sequences = Vec::new();
    for d in &a.data {
        ensure_distinct(d, &a.out)?;
        sequences.extend(load_dataset(d, &a.pattern)?);
    }
    let mut est = estimator(&cfg, false)?;
    let mut runs = Vec::new();
    if a.per_video {
        let mut names = BTreeSet::new();
        for seq in &sequences {
            if !names.insert(seq.name.clone()) {
                return Err(usage(format!("duplicate sequence name {:?} with --per-video", seq.name)));
            }
            let dir = a.out.join(&seq.name);
            let outcome = train(std::slice::from_ref(seq), &cfg, a.steps, &dir, est.as_mut())?;
            runs.push(json!({
                "sequence": seq.name,
                "checkpoint": outcome.checkpoint.strip_prefix(&a.out).unwrap_or(&outcome.checkpoint),
                "final_total": outcome.reports.last().map(|r| r.total),
            }));
        }
    } else {
        let outcome = train(&sequences, &cfg, a.steps, &a.out, est.as_mut())?;
        runs.push(json!({
            "sequences": sequences.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
            "checkpoint": outcome.checkpoint.strip_prefix(&a.out).unwrap_or(&outcome.checkpoint),
            "final_total": outcome.reports.last().map(|r| r.total),
        }));
    }
    for r in &runs {
        println!("{r}");
    }
    let details = json!({
        "data": a.data,
        "pattern": a.pattern,
        "steps": a.steps,
        "per_video": a.per_video,
        "runs": runs,
    });
    Manifest::new("train", &cfg, details).write(&a.out)?;
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.cfg)?;
    ensure_distinct(&a.input, &a.out)?;
    let format: SaveFormat = a.format.parse()?;
    let nets = Networks::load(&a.ckpt)?;
    let sequences = load_dataset(&a.input, &a.pattern)?;
    let nested = sequences.len() > 1 || a.input.read_dir().map_or(false, |mut d| d.any(|e| e.is_ok_and(|e| e.path().is_dir())));
    let mut est = estimator(&cfg, false)?;
    let mut written = Vec::new();
    for seq in &sequences {
        let out = if a.offline {
            reverse_inference(&nets, seq, est.as_mut(), &cfg)?
        } else {
            enhance_sequence(&nets, seq, est.as_mut(), &cfg)?
        };
        let dir = if nested { a.out.join(&seq.name) } else { a.out.clone() };
        let n = save_sequence(&out, &dir, format)?;
        println!("{}: {n} frames -> {}", seq.name, dir.display());
        written.push(json!({"sequence": seq.name, "frames": n}));
    }
    let details = json!({
        "checkpoint": a.ckpt,
        "input": a.input,
        "pattern": a.pattern,
        "mode": if a.offline { "offline" } else { "online" },
        "format": format,
        "sequences": written,
    });
    Manifest::new("enhance", &cfg, details).write(&a.out)?;
    Ok(())
}

/// Pairs sequences by name; every difference is reported.
fn pair_sets(pred: Vec<FrameSequence>, gt: Vec<FrameSequence>) -> CliResult<Vec<(FrameSequence, FrameSequence)>> {
    let pn: BTreeSet<String> = pred.iter().map(|s| s.name.clone()).collect();
    let gn: BTreeSet<String> = gt.iter().map(|s| s.name.clone()).collect();
    let mut problems = Vec::new();
    if pred.len() == 1 && gt.len() == 1 {
        // Two flat directories are compared directly whatever their names.
    } else {
        for n in pn.difference(&gn) {
            problems.push(format!("only in --pred: {n}"));
        }
        for n in gn.difference(&pn) {
            problems.push(format!("only in --gt: {n}"));
        }
    }
    let mut pairs = Vec::new();
    let mut gt = gt;
    for p in pred {
        let idx = if gt.len() == 1 && pn.len() == 1 {
            Some(0)
        } else {
            gt.iter().position(|g| g.name == p.name)
        };
        if let Some(i) = idx {
            let g = gt.remove(i);
            if g.len() != p.len() {
                problems.push(format!("{}: {} predicted frames vs {} ground-truth frames", p.name, p.len(), g.len()));
            } else if g.dims() != p.dims() {
                problems.push(format!("{}: frame size {:?} vs {:?}", p.name, p.dims(), g.dims()));
            }
            pairs.push((p, g));
        }
    }
    if !problems.is_empty() {
        return Err(usage(format!("prediction and ground-truth sets differ:\n  {}", problems.join("\n  "))));
    }
    Ok(pairs)
}

fn score_all(
    pairs: &[(FrameSequence, FrameSequence)],
    protocols: &[Protocol],
    cfg: &RunConfig,
    pairwise: bool,
    workers: usize,
) -> CliResult<Vec<Vec<SequenceScores>>> {
    let score_one = |(p, g): &(FrameSequence, FrameSequence)| -> CliResult<Vec<SequenceScores>> {
        let pairwise_value = if pairwise && p.len() >= 2 {
            let mut est = estimator(cfg, true)?;
            Some(mabd_pairwise(p, est.as_mut())?)
        } else {
            None
        };
        protocols
            .iter()
            .map(|&proto| {
                let mut s = evaluate(p, g, proto)?;
                if let Some(v) = pairwise_value {
                    s.scores.mabd = v;
                }
                Ok(s)
            })
            .collect()
    };
    let workers = workers.clamp(1, pairs.len().max(1));
    let per_pair: Vec<CliResult<Vec<SequenceScores>>> = if workers == 1 {
        pairs.iter().map(score_one).collect()
    } else {
        let chunk = pairs.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(score_one).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let per_pair = per_pair.into_iter().collect::<CliResult<Vec<_>>>()?;
    Ok((0..protocols.len())
        .map(|k| per_pair.iter().map(|v| v[k].clone()).collect())
        .collect())
}

/// Formats a value the way it is written to the CSV.
fn cell(v: f64) -> String {
    v.to_string()
}

fn grid(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<24}", "sequence");
    for r in reports {
        for m in ["psnr", "ssim", "mabd"] {
            let _ = write!(out, " {:>22}", format!("{m}[{}]", r.protocol));
        }
    }
    out.push('\n');
    let rows = reports[0].sequences.len();
    let mut line = |name: &str, pick: &dyn Fn(&EvalReport) -> [f64; 3]| {
        let _ = write!(out, "{name:<24}");
        for r in reports {
            for v in pick(r) {
                let _ = write!(out, " {:>22}", cell(v));
            }
        }
        out.push('\n');
    };
    for i in 0..rows {
        let name = reports[0].sequences[i].name.clone();
        line(&name, &|r: &EvalReport| {
            let s = r.sequences[i].scores;
            [s.psnr, s.ssim, s.mabd]
        });
    }
    line("mean", &|r: &EvalReport| [r.aggregate.psnr, r.aggregate.ssim, r.aggregate.mabd]);
    out
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 1,
        message: format!("writing {}: {e}", path.display()),
    })
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(p) = &a.ckpt {
        cfg.flow_checkpoint_path = Some(p.clone());
    }
    let pairs = pair_sets(load_dataset(&a.pred, &a.pattern)?, load_dataset(&a.gt, &a.pattern)?)?;
    let mut protocols = vec![Protocol::Raw];
    if a.hm {
        protocols.push(Protocol::Hm);
    }
    let mode = if a.mabd_pairwise {
        MabdMode::Pairwise
    } else {
        MabdMode::Sequence
    };
    let scored = score_all(&pairs, &protocols, &cfg, a.mabd_pairwise, a.workers)?;
    let reports: Vec<EvalReport> = protocols
        .iter()
        .zip(scored)
        .map(|(&p, rows)| EvalReport::from_sequences(p, mode, rows))
        .collect();

    print!("{}", grid(&reports));
    std::fs::create_dir_all(&a.out).map_err(|e| usage(format!("creating {}: {e}", a.out.display())))?;
    for r in &reports {
        write_text(&a.out.join(format!("eval_{}.csv", r.protocol)), &r.to_csv())?;
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write_text(&a.out.join("eval.json"), &json)?;
    let details = json!({
        "pred": a.pred,
        "gt": a.gt,
        "pattern": a.pattern,
        "protocols": protocols,
        "mabd": mode,
    });
    Manifest::new("evaluate", &cfg, details).write(&a.out)?;
    Ok(())
}

fn cmd_aba(a: AbaArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.cfg)?;
    ensure_distinct(&a.input, &a.out)?;
    let frames = if a.input.is_file() {
        let f = load_frame(&a.input)?;
        let name = a.input.file_stem().map_or("frame".into(), |s| s.to_string_lossy().into_owned());
        vec![(name, f)]
    } else {
        load_dataset(&a.input, &a.pattern)?
            .into_iter()
            .flat_map(|s| {
                let name = s.name.clone();
                s.frames
                    .into_iter()
                    .enumerate()
                    .map(move |(i, f)| (format!("{name}_{i:06}"), f))
            })
            .collect()
    };
    std::fs::create_dir_all(&a.out).map_err(|e| usage(format!("creating {}: {e}", a.out.display())))?;
    let mut hist_csv = String::from("image,stage,bin,count\n");
    let mut results = Vec::new();
    for (name, frame) in &frames {
        let aba = apply_aba_with(frame, cfg.cdf_threshold, cfg.safety_factor)?;
        save_frame(&aba.r0, &a.out.join(format!("{name}_r0.png")), SaveFormat::Png16)?;
        for (stage, img) in [("input", frame), ("r0", &aba.r0)] {
            let hist = channel_histogram(&img.luminance().data);
            for (bin, count) in hist.iter().enumerate() {
                let _ = writeln!(hist_csv, "{name},{stage},{bin},{count}");
            }
        }
        println!("{name}: v = {} gamma = {} mean luminance {:.4} -> {:.4}", aba.v, aba.gamma, frame.mean_luminance(), aba.r0.mean_luminance());
        results.push(json!({"image": name, "v": aba.v, "gamma": aba.gamma}));
    }
    write_text(&a.out.join("histograms.csv"), &hist_csv)?;
    let details = json!({"input": a.input, "pattern": a.pattern, "images": results});
    Manifest::new("aba", &cfg, details).write(&a.out)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let kind: SynthKind = a.kind.parse()?;
    if a.height < MIN_SIDE || a.width < MIN_SIDE {
        return Err(usage(format!("--height/--width must be at least {MIN_SIDE}")));
    }
    let (low, truth) = synth_sequence(kind, a.frames, (a.height, a.width), a.brightness, a.noise, a.seed)?;
    save_sequence(&low, &a.out.join("low"), SaveFormat::Png16)?;
    save_sequence(&truth, &a.out.join("gt"), SaveFormat::Png16)?;
    println!("{} frames of {}x{} -> {}", a.frames, a.height, a.width, a.out.display());
    let cfg = RunConfig {
        seed: a.seed,
        ..RunConfig::default()
    };
    let details = json!({
        "kind": kind,
        "frames": a.frames,
        "height": a.height,
        "width": a.width,
        "brightness": a.brightness,
        "noise": a.noise,
    });
    Manifest::new("synth", &cfg, details).write(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Aba(a) => cmd_aba(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
