//! Batch evaluation over a JSON-lines image list.
//!
//! Each list line is `{"path": string, "class": int, "bbox": [x1, y1, x2, y2]}`
//! with an optional, half-open bbox in original-image pixels. Relative paths
//! resolve against the list file's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::load_image;
use crate::metrics::{self, BBox, Direction, EvalRecord};
use crate::model::{forward_trace, ModelGraph};
use crate::pipeline::{explain_traced, ExplainRequest, Method};
use crate::relprop::Explanation;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListEntry {
    pub path: String,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
}

pub fn read_list(path: impl AsRef<Path>) -> Result<Vec<ListEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    AdAi,
    Insdel,
    Loc,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::AdAi => "ad-ai",
            Metric::Insdel => "insdel",
            Metric::Loc => "loc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Metric::AdAi, Metric::Insdel, Metric::Loc]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown metric `{s}` (expected ad-ai, insdel or loc)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub request: ExplainRequest,
    pub metric: Metric,
    pub seed: u64,
    /// Evaluate a seeded random subset of this many entries.
    pub sample: Option<usize>,
    pub step_pixels: usize,
    pub blur_ksize: usize,
    pub blur_sigma: f32,
    pub retain: f64,
}

impl EvalConfig {
    pub fn new(request: ExplainRequest, metric: Metric) -> Self {
        EvalConfig {
            request,
            metric,
            seed: 0,
            sample: None,
            step_pixels: 448,
            blur_ksize: 51,
            blur_sigma: 50.0,
            retain: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub path: String,
    pub class: usize,
    pub predicted_class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<EvalRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportion: Option<f64>,
    /// Share of the image covered by the (rescaled) bounding box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub listed: usize,
    pub sampled: usize,
    pub evaluated: usize,
    /// Entries skipped for lacking a bbox (`loc` only).
    pub skipped: usize,
    /// Entries left out of the A.D./A.I. averages for a zero original score.
    pub excluded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_drop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_increase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub layer: String,
    pub aggregates: Aggregates,
    pub counts: Counts,
    pub images: Vec<ImageResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub listfile: String,
    pub config: EvalConfig,
    pub results: Vec<MethodReport>,
}

/// Indices of the entries to evaluate, in list order.
pub fn select_entries(count: usize, sample: Option<usize>, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    if let Some(n) = sample.filter(|&n| n < count) {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n);
        order.sort_unstable();
    }
    order
}

struct Prepared {
    raw: Tensor,
    bbox: Option<BBox>,
}

fn prepare(model: &ModelGraph, root: &Path, entry: &ListEntry) -> Result<Prepared> {
    let [c, h, w] = model.input_shape();
    let path: PathBuf = root.join(&entry.path);
    let loaded = load_image(&path, c, h, w).map_err(|e| match e {
        Error::Image(err) => {
            Error::InvalidArgument(format!("cannot read image `{}`: {err}", path.display()))
        }
        Error::Io(err) => {
            Error::InvalidArgument(format!("cannot read image `{}`: {err}", path.display()))
        }
        other => other,
    })?;
    let bbox = entry
        .bbox
        .map(|[x1, y1, x2, y2]| {
            BBox::new(
                x1,
                y1,
                x2,
                y2,
                loaded.original_width,
                loaded.original_height,
            )?
            .rescale((loaded.original_width, loaded.original_height), (w, h))
        })
        .transpose()?;
    Ok(Prepared {
        raw: loaded.pixels,
        bbox,
    })
}

fn evaluate_one(
    model: &ModelGraph,
    config: &EvalConfig,
    entry: &ListEntry,
    prepared: &Prepared,
) -> Result<ImageResult> {
    let input = model.preprocessing().apply(&prepared.raw)?;
    let trace = forward_trace(model, &input)?;
    let class = entry.class;
    let explanation = explain_traced(model, &trace, class, &config.request)?;
    let [_, h, w] = model.input_shape();
    let mut result = ImageResult {
        path: entry.path.clone(),
        class,
        predicted_class: trace.predicted_class(),
        record: None,
        deletion_auc: None,
        insertion_auc: None,
        overall: None,
        proportion: None,
        bbox_fraction: None,
    };
    match config.metric {
        Metric::AdAi => {
            let blurred = tensor::gaussian_blur(&input, config.blur_ksize, config.blur_sigma)?;
            let kept = metrics::retain_top(&input, &explanation, &blurred, config.retain)?;
            let y = tensor::softmax(trace.logits())[class];
            let o = model.probabilities(&kept)?[class];
            result.record = Some(EvalRecord {
                y: f64::from(y),
                o: f64::from(o),
                class_index: class,
            });
        }
        Metric::Insdel => {
            let blurred = tensor::gaussian_blur(&input, config.blur_ksize, config.blur_sigma)?;
            let curve = |direction| {
                metrics::perturbation_curve(
                    model,
                    &input,
                    &blurred,
                    &explanation,
                    class,
                    direction,
                    config.step_pixels,
                )
            };
            let deletion = metrics::auc(&curve(Direction::Deletion)?);
            let insertion = metrics::auc(&curve(Direction::Insertion)?);
            result.deletion_auc = Some(deletion);
            result.insertion_auc = Some(insertion);
            result.overall = Some(metrics::overall_score(insertion, deletion));
        }
        Metric::Loc => {
            let bbox = prepared
                .bbox
                .expect("loc entries are filtered to those with a bbox");
            let resized = Explanation {
                layer: explanation.layer.clone(),
                map: Tensor::new(vec![h, w], metrics::explanation_at(&explanation, h, w)?)?,
                signed: explanation.signed,
            };
            result.proportion = Some(metrics::proportion(&resized, &bbox)?);
            result.bbox_fraction = Some(bbox.area() as f64 / (h * w) as f64);
        }
    }
    Ok(result)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0f64, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Run one method over the list file. Images are processed concurrently and
/// aggregated in list order, so the report depends only on the inputs.
pub fn evaluate_list(
    model: &ModelGraph,
    listfile: impl AsRef<Path>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let listfile = listfile.as_ref();
    let entries = read_list(listfile)?;
    let root = listfile.parent().unwrap_or(Path::new("."));
    let layer = config.request.resolve_layer(model)?;
    let selected = select_entries(entries.len(), config.sample, config.seed);
    let mut counts = Counts {
        listed: entries.len(),
        sampled: selected.len(),
        ..Counts::default()
    };
    let chosen: Vec<&ListEntry> = selected
        .iter()
        .map(|&i| &entries[i])
        .filter(|e| config.metric != Metric::Loc || e.bbox.is_some())
        .collect();
    counts.skipped = selected.len() - chosen.len();
    if config.metric == Metric::Loc {
        if chosen.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "listfile `{}` has no bbox entries; the loc metric needs them",
                listfile.display()
            )));
        }
        if counts.skipped > 0 {
            log::warn!("{} entries without a bbox skipped", counts.skipped);
        }
    }

    let images = chosen
        .par_iter()
        .map(|entry| {
            let prepared = prepare(model, root, entry)?;
            evaluate_one(model, config, entry, &prepared)
        })
        .collect::<Result<Vec<_>>>()?;
    counts.evaluated = images.len();

    let mut aggregates = Aggregates::default();
    match config.metric {
        Metric::AdAi => {
            let records: Vec<EvalRecord> = images.iter().filter_map(|r| r.record).collect();
            let di = metrics::average_drop_increase(&records)?;
            aggregates.average_drop = Some(di.average_drop);
            aggregates.average_increase = Some(di.average_increase);
            counts.excluded = di.excluded;
        }
        Metric::Insdel => {
            aggregates.deletion_auc = mean(images.iter().map(|r| r.deletion_auc));
            aggregates.insertion_auc = mean(images.iter().map(|r| r.insertion_auc));
            aggregates.overall = mean(images.iter().map(|r| r.overall));
        }
        Metric::Loc => aggregates.proportion = mean(images.iter().map(|r| r.proportion)),
    }

    Ok(EvalReport {
        listfile: listfile.display().to_string(),
        config: config.clone(),
        results: vec![MethodReport {
            method: config.request.method,
            layer,
            aggregates,
            counts,
            images,
        }],
    })
}
