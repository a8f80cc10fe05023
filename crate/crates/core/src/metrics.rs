//! Faithfulness and localization metrics: Average Drop / Increase,
//! deletion / insertion curves with their AUC and Over-all score, and the
//! Proportion of explanation mass inside a bounding box.
//!
//! A "pixel" is a spatial site; perturbing it replaces all of its channels.
//! Pixel rankings sort by explanation value, descending, ties to the lowest
//! flat index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::relprop::Explanation;
use crate::tensor::{self, Tensor};

/// Softmax score of the explained class on the original (`y`) and perturbed
/// (`o`) image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub y: f64,
    pub o: f64,
    pub class_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropIncrease {
    pub average_drop: f64,
    pub average_increase: f64,
    /// Records that entered the averages.
    pub count: usize,
    /// Records skipped because `y <= 0`.
    pub excluded: usize,
}

/// A.D. = mean of `max(0, y - o) / y` and A.I. = fraction of records with
/// `y < o`, both in percent.
pub fn average_drop_increase(records: &[EvalRecord]) -> Result<DropIncrease> {
    let mut drop = 0f64;
    let mut increase = 0usize;
    let mut count = 0usize;
    for r in records {
        if r.y.is_nan() || r.y <= 0.0 {
            continue;
        }
        count += 1;
        drop += (r.y - r.o).max(0.0) / r.y;
        if r.y < r.o {
            increase += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "no evaluation record with a positive original score".into(),
        ));
    }
    let excluded = records.len() - count;
    if excluded > 0 {
        log::warn!("{excluded} record(s) with zero original score excluded from A.D./A.I.");
    }
    Ok(DropIncrease {
        average_drop: drop * 100.0 / count as f64,
        average_increase: increase as f64 * 100.0 / count as f64,
        count,
        excluded,
    })
}

/// Flat pixel indices sorted by value, descending; ties keep index order.
pub fn rank_pixels(values: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// The explanation map resized (bilinearly, if needed) to `h x w`.
pub fn explanation_at(explanation: &Explanation, h: usize, w: usize) -> Result<Vec<f32>> {
    let map = &explanation.map;
    let [mh, mw] = *map.shape() else {
        return Err(Error::shape(
            "explanation",
            format!("expected [h, w], got {:?}", map.shape()),
        ));
    };
    if (mh, mw) == (h, w) {
        return Ok(map.data().to_vec());
    }
    let plane = map.clone().reshape(vec![1, mh, mw])?;
    Ok(tensor::bilinear_resize(&plane, h, w)?.into_data())
}

fn check_pair(image: &Tensor, other: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = image.dims3()?;
    if image.shape() != other.shape() {
        return Err(Error::shape(
            "perturbation",
            format!("image {:?} vs reference {:?}", image.shape(), other.shape()),
        ));
    }
    Ok(dims)
}

/// Copy pixel sites `sites` of `source` into `target` across all channels.
fn paste_sites(target: &mut [f32], source: &[f32], sites: &[usize], plane: usize) {
    for c in 0..target.len() / plane {
        let off = c * plane;
        for &s in sites {
            target[off + s] = source[off + s];
        }
    }
}

/// Keep the top `fraction` of pixel sites (by explanation) from `image` and take
/// the rest from `blurred`.
///
/// For signed explanations with fewer positive sites than the budget, exactly
/// the positive sites are kept.
pub fn retain_top(
    image: &Tensor,
    explanation: &Explanation,
    blurred: &Tensor,
    fraction: f64,
) -> Result<Tensor> {
    let (_, h, w) = check_pair(image, blurred)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retain fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let values = explanation_at(explanation, h, w)?;
    let plane = h * w;
    let mut budget = (fraction * plane as f64).ceil() as usize;
    if explanation.signed {
        let positive = values.iter().filter(|&&v| v > 0.0).count();
        budget = budget.min(positive);
    }
    let order = rank_pixels(&values);
    let mut out = blurred.data().to_vec();
    paste_sites(&mut out, image.data(), &order[..budget], plane);
    Tensor::new(image.shape().to_vec(), out)
}

/// [`retain_top`] with the 50% budget.
pub fn retain_top_half(
    image: &Tensor,
    explanation: &Explanation,
    blurred: &Tensor,
) -> Result<Tensor> {
    retain_top(image, explanation, blurred, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Start from the original image, blur the most important pixels first.
    Deletion,
    /// Start from the blurred image, restore the most important pixels first.
    Insertion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// Fraction of pixel sites perturbed, strictly increasing from 0 to 1.
    pub xs: Vec<f64>,
    /// Softmax score of the explained class.
    pub ys: Vec<f64>,
}

impl Curve {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::InvalidArgument(
                "a curve needs >= 2 matching points".into(),
            ));
        }
        if xs[0] != 0.0 || *xs.last().unwrap() != 1.0 || xs.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidArgument(
                "curve xs must increase strictly from 0 to 1".into(),
            ));
        }
        Ok(Curve { xs, ys })
    }
}

/// Number of perturbation steps for `pixels` sites at `step_pixels` per step.
pub fn step_count(pixels: usize, step_pixels: usize) -> usize {
    pixels.div_ceil(step_pixels)
}

/// Deletion or insertion curve: perturb `step_pixels` sites per step in
/// explanation order and record the class softmax after each step, including
/// the unperturbed start and the fully perturbed end.
pub fn perturbation_curve(
    model: &ModelGraph,
    image: &Tensor,
    blurred: &Tensor,
    explanation: &Explanation,
    class_index: usize,
    direction: Direction,
    step_pixels: usize,
) -> Result<Curve> {
    if step_pixels == 0 {
        return Err(Error::InvalidArgument("step_pixels must be >= 1".into()));
    }
    if class_index >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: class_index,
            count: model.class_count(),
        });
    }
    let (_, h, w) = check_pair(image, blurred)?;
    let plane = h * w;
    let order = rank_pixels(&explanation_at(explanation, h, w)?);
    let (start, end) = match direction {
        Direction::Deletion => (image, blurred),
        Direction::Insertion => (blurred, image),
    };
    let steps = step_count(plane, step_pixels);
    let ys = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let n = (k * step_pixels).min(plane);
            let mut data = start.data().to_vec();
            paste_sites(&mut data, end.data(), &order[..n], plane);
            let probs = model.probabilities(&Tensor::new(image.shape().to_vec(), data)?)?;
            Ok(f64::from(probs[class_index]))
        })
        .collect::<Result<Vec<_>>>()?;
    let xs = (0..=steps)
        .map(|k| (k * step_pixels).min(plane) as f64 / plane as f64)
        .collect();
    Curve::new(xs, ys)
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &Curve) -> f64 {
    curve
        .xs
        .windows(2)
        .zip(curve.ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// `AUC(insertion) - AUC(deletion)`.
pub fn overall_score(insertion_auc: f64, deletion_auc: f64) -> f64 {
    insertion_auc - deletion_auc
}

/// Pixel-aligned box `[x1, x2) x [y1, y2)` in the model-input frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn new(
        x1: usize,
        y1: usize,
        x2: usize,
        y2: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 || x2 > width || y2 > height {
            return Err(Error::InvalidArgument(format!(
                "bounding box [{x1}, {y1}, {x2}, {y2}] is empty or outside {width}x{height}"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x1..self.x2).contains(&x) && (self.y1..self.y2).contains(&y)
    }

    /// Rescale a box given in a `from_w x from_h` frame to `to_w x to_h`.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> Result<Self> {
        let (fw, fh) = from;
        let (tw, th) = to;
        let sx = tw as f64 / fw as f64;
        let sy = th as f64 / fh as f64;
        let x1 = (self.x1 as f64 * sx).floor() as usize;
        let y1 = (self.y1 as f64 * sy).floor() as usize;
        let x2 = ((self.x2 as f64 * sx).ceil() as usize).clamp(x1 + 1, tw);
        let y2 = ((self.y2 as f64 * sy).ceil() as usize).clamp(y1 + 1, th);
        BBox::new(x1.min(tw - 1), y1.min(th - 1), x2, y2, tw, th)
    }
}

/// Share of the (non-negative part of the) explanation mass inside `bbox`;
/// zero when the map has no positive mass.
pub fn proportion(explanation: &Explanation, bbox: &BBox) -> Result<f64> {
    let [h, w] = *explanation.map.shape() else {
        return Err(Error::shape(
            "proportion",
            format!("expected [h, w], got {:?}", explanation.map.shape()),
        ));
    };
    if bbox.x2 > w || bbox.y2 > h {
        return Err(Error::InvalidArgument(format!(
            "bounding box {bbox:?} exceeds the {w}x{h} explanation"
        )));
    }
    let mut inside = 0f64;
    let mut total = 0f64;
    for (i, &v) in explanation.map.data().iter().enumerate() {
        let v = f64::from(v.max(0.0));
        total += v;
        if bbox.contains(i % w, i / w) {
            inside += v;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}
