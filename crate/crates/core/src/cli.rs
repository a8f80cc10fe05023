//! Command-line front end: `explain`, `eval` and `inspect`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::denoise::DEFAULT_KEEP_FRACTION;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_list, EvalConfig, Metric};
use crate::fgm::read_fgm;
use crate::io::{load_image, write_raw_map};
use crate::model::{fold_batchnorm, validate_model, ModelGraph};
use crate::pipeline::{explain, ExplainRequest, Method};
use crate::render::save_heatmap;

#[derive(Debug, Parser)]
#[command(
    name = "fgcam",
    version,
    about = "Fine-grained class activation maps for sequential CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain a single image.
    Explain(ExplainArgs),
    /// Evaluate a method over a JSON-lines image list.
    Eval(EvalArgs),
    /// Print the layer table of a model file and validate it.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// FGM model file.
    #[arg(long)]
    pub model: PathBuf,
    /// grad-cam, score-cam, layer-cam, fg-grad-cam, fg-score-cam or lrp
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// Target layer name or `input`.
    #[arg(long)]
    pub layer: Option<String>,
    /// Low-rank denoising of the explanation components.
    #[arg(long)]
    pub denoise: bool,
    /// Fraction of singular values kept by `--denoise`.
    #[arg(long, default_value_t = DEFAULT_KEEP_FRACTION)]
    pub keep: f64,
    /// Keep negative relevance (skip the final ReLU).
    #[arg(long)]
    pub signed: bool,
    /// Seed for any sampling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl MethodArgs {
    fn request(&self, class_index: Option<usize>) -> ExplainRequest {
        ExplainRequest {
            method: self.method,
            layer: self.layer.clone(),
            class_index,
            denoise: self.denoise,
            keep_fraction: self.keep,
            signed: self.signed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: MethodArgs,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Raw little-endian f32 map (FGMAP01)
    #[arg(long)]
    pub out_map: Option<PathBuf>,
    /// Rendered heatmap PNG
    #[arg(long)]
    pub out_png: Option<PathBuf>,
    /// JSON sidecar; printed to stdout when no output path is given
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    /// Input image (PNG or JPEG)
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: MethodArgs,
    /// ad-ai, insdel or loc
    #[arg(long, value_parser = parse_metric)]
    pub metric: Metric,
    /// Evaluate a seeded random subset of N entries.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Pixels changed per insertion/deletion step
    #[arg(long, default_value_t = 448)]
    pub step_pixels: usize,
    /// Gaussian kernel size of the blurred baseline
    #[arg(long, default_value_t = 51)]
    pub blur_ksize: usize,
    #[arg(long, default_value_t = 50.0)]
    pub blur_sigma: f32,
    /// Fraction of top-ranked pixels kept for A.D./A.I.
    #[arg(long, default_value_t = 0.5)]
    pub retain: f64,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    /// JSON-lines list of {"path", "class", "bbox"?} entries
    pub listfile: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Load a model for explanation: checksummed, validated and batchnorm-folded.
pub fn load_engine_model(path: &Path) -> Result<ModelGraph> {
    let model = crate::fgm::load_model(path)?;
    fold_batchnorm(&model)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Explain(args) => cmd_explain(&args, out),
        Command::Eval(args) => cmd_eval(&args, out),
        Command::Inspect { model } => cmd_inspect(&model, out),
    }
}

fn cmd_explain(args: &ExplainArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_engine_model(&args.common.model)?;
    let [c, h, w] = model.input_shape();
    let image = load_image(&args.image, c, h, w)?;
    let input = model.preprocessing().apply(&image.pixels)?;
    let request = args.common.request(args.class);
    let result = explain(&model, &input, &request)?;
    let expl = &result.explanation;

    if let Some(path) = &args.out_map {
        write_raw_map(&expl.map, path)?;
    }
    if let Some(path) = &args.out_png {
        save_heatmap(expl, path)?;
    }
    let sidecar = json!({
        "config": {
            "model": args.common.model.display().to_string(),
            "image": args.image.display().to_string(),
            "method": request.method,
            "layer": expl.layer,
            "denoise": request.denoise,
            "keep_fraction": request.keep_fraction,
            "signed": expl.signed,
            "seed": args.common.seed,
        },
        "class_index": result.class_index,
        "predicted_class": result.predicted_class,
        "logits": result.logits,
        "map_shape": expl.map.shape(),
    });
    let text = serde_json::to_string_pretty(&sidecar)?;
    match &args.out_json {
        Some(path) => fs::write(path, text + "\n")?,
        None if args.out_map.is_none() && args.out_png.is_none() => writeln!(out, "{text}")?,
        None => {}
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_engine_model(&args.common.model)?;
    let config = EvalConfig {
        request: args.common.request(None),
        metric: args.metric,
        seed: args.common.seed,
        sample: args.sample,
        step_pixels: args.step_pixels,
        blur_ksize: args.blur_ksize,
        blur_sigma: args.blur_sigma,
        retain: args.retain,
    };
    let report = evaluate_list(&model, &args.listfile, &config)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out_json {
        Some(path) => fs::write(path, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let model = read_fgm(path)?;
    let findings = validate_model(&model);
    let feature = model.feature_layer_index().ok();
    writeln!(
        out,
        "input {:?}, {} classes",
        model.input_shape(),
        model.class_count()
    )?;
    writeln!(
        out,
        "{:>3}  {:<2} {:<16} {:<12} {:<16} {:<16}",
        "#", "", "name", "kind", "input", "output"
    )?;
    let mut shape = model.input_shape().to_vec();
    for (i, layer) in model.layers().iter().enumerate() {
        let next = layer.output_shape(&shape);
        let shown = match &next {
            Ok(s) => format!("{s:?}"),
            Err(_) => "?".to_string(),
        };
        let mark = if Some(i) == feature { "L" } else { "" };
        writeln!(
            out,
            "{i:>3}  {mark:<2} {:<16} {:<12} {:<16} {shown:<16}",
            layer.name,
            layer.kind.tag(),
            format!("{shape:?}")
        )?;
        match next {
            Ok(s) => shape = s,
            Err(_) => break,
        }
    }
    if findings.is_empty() {
        writeln!(out, "checksums ok, model valid")?;
        return Ok(());
    }
    for finding in &findings {
        log::error!("{finding}");
    }
    Err(Error::InvalidModel(format!(
        "{} validation finding(s)",
        findings.len()
    )))
}
