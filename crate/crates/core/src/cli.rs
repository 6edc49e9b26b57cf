//! Command-line front end.
//!
//! Results go to stdout as JSON lines; a human-readable summary goes to
//! stderr. Commands that write files stage them in `<out>.partial` and move
//! the directory into place only once everything has been written.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::discriminative::discriminative_decompose;
use crate::error::{Error, Result};
use crate::io::{read_video, render_heatmap, write_heatmap_frames, write_raw_tensor, WeightContainer};
use crate::network::{load_architecture, Architecture, Network, C3D_CONFIG, TINY_CONFIG};
use crate::relevance::{explain, RelevanceConfig, Target};
use crate::synth::{synthetic_clip, synthetic_weights};
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "vrel", version, about = "Relevance heatmaps for 3D CNN video classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the top classes for a clip.
    Predict(ModelArgs),
    /// Explain one clip and write a heatmap per frame.
    Explain(ExplainArgs),
    /// Split the explanation into spatial and temporal parts.
    Decompose(ExplainArgs),
    /// Write seeded random weights for an architecture.
    SynthWeights(SynthWeightsArgs),
    /// Write a seeded synthetic clip (PNG frames, or raw when OUT ends in .vrelv).
    SynthClip(SynthClipArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Architecture config path, or `tiny` / `c3d` for the bundled ones.
    #[arg(long)]
    pub arch: String,
    /// VRELW001 weight container.
    #[arg(long)]
    pub weights: PathBuf,
    /// PNG frame directory or raw VRELV001 clip.
    #[arg(long)]
    pub input: PathBuf,
    /// Per-channel means subtracted from pixel values, overriding the config.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub mean: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Heatmaps,
    Raw,
    Predictions,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f32,
    #[arg(long, default_value_t = 0.0)]
    pub beta: f32,
    #[arg(long, default_value_t = 1e-9)]
    pub eps: f32,
    /// Class index or `argmax`.
    #[arg(long, default_value = "argmax", value_parser = parse_target)]
    pub target: Target,
    #[arg(long, value_enum, value_delimiter = ',', num_args = 1.., default_values_t = [Emit::Heatmaps, Emit::Raw, Emit::Predictions])]
    pub emit: Vec<Emit>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthWeightsArgs {
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthClipArgs {
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repeat the first frame instead of moving the square.
    #[arg(long = "static")]
    pub still: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    if s.eq_ignore_ascii_case("argmax") {
        return Ok(Target::Argmax);
    }
    s.parse::<usize>()
        .map(Target::Class)
        .map_err(|_| format!("expected a class index or `argmax`, got `{s}`"))
}

/// Failure of a command-line invocation.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error(transparent)]
    Run(#[from] Error),
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I, stdout: &mut impl Write) -> std::result::Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    Ok(run(&cli, stdout)?)
}

pub fn run(cli: &Cli, stdout: &mut impl Write) -> Result<()> {
    match &cli.command {
        Command::Predict(args) => cmd_predict(args, stdout),
        Command::Explain(args) => cmd_explain(args, stdout),
        Command::Decompose(args) => cmd_decompose(args, stdout),
        Command::SynthWeights(args) => cmd_synth_weights(args, stdout),
        Command::SynthClip(args) => cmd_synth_clip(args, stdout),
    }
}

/// Sizes the global rayon pool from `VREL_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("VREL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("VREL_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

fn load_arch(spec: &str) -> Result<Architecture> {
    match spec {
        "tiny" => load_architecture(TINY_CONFIG),
        "c3d" => load_architecture(C3D_CONFIG),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            load_architecture(&text)
        }
    }
}

struct Loaded {
    net: Network,
    clip: Tensor,
    input: Tensor,
}

fn load(args: &ModelArgs) -> Result<Loaded> {
    let arch = load_arch(&args.arch)?;
    let weights = WeightContainer::load(&args.weights)?;
    let mut net = arch.bind(&weights)?;
    if let Some(mean) = &args.mean {
        net.normalization.mean = mean.clone();
        net.normalization.validate(net.input_shape()[0])?;
    }
    let clip = read_video(&args.input, Some(net.input_shape()[1]))?.tensor;
    if clip.shape() != net.input_shape() {
        return Err(Error::Video(format!(
            "clip shape {:?} does not match network input {:?}",
            clip.shape(),
            net.input_shape()
        )));
    }
    let input = net.normalization.apply(&clip)?;
    Ok(Loaded { net, clip, input })
}

fn relevance_config(args: &ExplainArgs, net: &Network) -> Result<RelevanceConfig> {
    let cfg = RelevanceConfig {
        alpha: args.alpha,
        beta: args.beta,
        eps: args.eps,
        target: args.target,
        ..RelevanceConfig::default()
    }
    .with_normalization(&net.normalization, net.input_shape()[0]);
    cfg.validate()?;
    Ok(cfg)
}

fn line(stdout: &mut impl Write, value: serde_json::Value) -> Result<()> {
    writeln!(stdout, "{value}").map_err(|e| Error::io("<stdout>", e))
}

fn cmd_predict(args: &ModelArgs, stdout: &mut impl Write) -> Result<()> {
    let loaded = load(args)?;
    let logits = loaded.net.logits(&loaded.input)?;
    let mut order: Vec<usize> = (0..logits.numel()).collect();
    order.sort_by(|&a, &b| logits.data()[b].total_cmp(&logits.data()[a]).then(a.cmp(&b)));
    for (rank, &class) in order.iter().take(5).enumerate() {
        line(stdout, json!({"rank": rank + 1, "class": class, "logit": logits.data()[class]}))?;
    }
    eprintln!("predicted class {} (logit {})", order[0], logits.data()[order[0]]);
    Ok(())
}

/// Runs `write` against a fresh staging directory and renames it to `out`
/// on success; the staging directory is removed on failure.
fn staged<T>(out: &Path, write: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let mut staging = out.as_os_str().to_owned();
    staging.push(".partial");
    let staging = PathBuf::from(staging);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let finish = write(&staging).and_then(|value| {
        if out.exists() {
            std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
        std::fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
        Ok(value)
    });
    if finish.is_err() {
        let _ = std::fs::remove_dir_all(&staging);
    }
    finish
}

fn cmd_explain(args: &ExplainArgs, stdout: &mut impl Write) -> Result<()> {
    let loaded = load(&args.model)?;
    let cfg = relevance_config(args, &loaded.net)?;
    let map = explain(&loaded.net, &loaded.input, &cfg)?;
    staged(&args.out, |dir| {
        if args.emit.contains(&Emit::Heatmaps) {
            write_heatmap_frames(dir.join("heatmaps"), &render_heatmap(&map.relevance)?)?;
        }
        if args.emit.contains(&Emit::Raw) {
            write_raw_tensor(dir.join("relevance.vrelv"), &map.relevance)?;
        }
        Ok(())
    })?;
    let sum = map.total();
    line(
        stdout,
        json!({"target": map.target_class, "logit": map.target_logit, "relevance_sum": sum}),
    )?;
    eprintln!(
        "explained class {} (logit {}), {} frames, total relevance {sum}",
        map.target_class,
        map.target_logit,
        loaded.clip.shape()[1]
    );
    Ok(())
}

fn cmd_decompose(args: &ExplainArgs, stdout: &mut impl Write) -> Result<()> {
    let loaded = load(&args.model)?;
    let cfg = relevance_config(args, &loaded.net)?;
    let triple = discriminative_decompose(&loaded.net, &loaded.input, &cfg)?;
    let maps = [
        ("original", &triple.original.relevance),
        ("spatial", &triple.spatial.relevance),
        ("temporal", &triple.temporal.relevance),
    ];
    staged(&args.out, |dir| {
        for (name, map) in maps {
            if args.emit.contains(&Emit::Heatmaps) {
                write_heatmap_frames(dir.join(name), &render_heatmap(map)?)?;
            }
            if args.emit.contains(&Emit::Raw) {
                write_raw_tensor(dir.join(format!("{name}.vrelv")), map)?;
            }
        }
        if args.emit.contains(&Emit::Predictions) {
            let frames: Vec<_> = triple
                .per_frame_predictions
                .iter()
                .zip(&triple.per_frame_logits)
                .enumerate()
                .map(|(frame, (class, logit))| json!({"frame": frame, "prediction": class, "target_logit": logit}))
                .collect();
            let doc = json!({
                "target": triple.target_class,
                "logit": triple.original.target_logit,
                "explain_passes": triple.explain_passes,
                "frames": frames,
            });
            let path = dir.join("predictions.json");
            let text = serde_json::to_string_pretty(&doc)?;
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })?;
    let [o, s, t] = maps.map(|(_, m)| m.sum_abs());
    line(
        stdout,
        json!({
            "target": triple.target_class,
            "logit": triple.original.target_logit,
            "sum_abs_original": o,
            "sum_abs_spatial": s,
            "sum_abs_temporal": t,
            "explain_passes": triple.explain_passes,
        }),
    )?;
    eprintln!(
        "decomposed class {}: sum|original| {o}, sum|spatial| {s}, sum|temporal| {t}, {} explain passes",
        triple.target_class, triple.explain_passes
    );
    Ok(())
}

fn cmd_synth_weights(args: &SynthWeightsArgs, stdout: &mut impl Write) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let container = synthetic_weights(&arch, args.seed)?;
    container.save(&args.out)?;
    line(stdout, json!({"weights": args.out, "tensors": container.len()}))
}

fn cmd_synth_clip(args: &SynthClipArgs, stdout: &mut impl Write) -> Result<()> {
    let clip = synthetic_clip(args.frames, args.height, args.width, args.seed, !args.still)?;
    if args.out.extension().is_some_and(|e| e == "vrelv") {
        write_raw_tensor(&args.out, &clip)?;
    } else {
        crate::io::write_frames(&args.out, &clip)?;
    }
    line(stdout, json!({"clip": args.out, "shape": clip.shape()}))
}
