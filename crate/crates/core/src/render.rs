//! Heatmap rendering for explanation maps. Display only: the colors are
//! normalized per image and never feed back into metrics.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::relprop::Explanation;

// Viridis sampled at nine evenly spaced stops.
const VIRIDIS: [[f32; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

fn viridis(t: f32) -> Rgb<u8> {
    let x = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f32;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f32;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    Rgb(std::array::from_fn(|c| {
        (a[c] + (b[c] - a[c]) * f).round() as u8
    }))
}

/// White at zero, saturating to red for `t = 1` and blue for `t = -1`.
fn diverging(t: f32) -> Rgb<u8> {
    let t = t.clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade, fade])
    } else {
        Rgb([fade, fade, 255])
    }
}

/// Unsigned maps are min-max normalized onto viridis; signed maps are scaled
/// by their largest magnitude onto a symmetric red/blue scale.
pub fn render_heatmap(explanation: &Explanation) -> Result<RgbImage> {
    let [h, w] = *explanation.map.shape() else {
        return Err(Error::shape(
            "render_heatmap",
            format!("expected [h, w], got {:?}", explanation.map.shape()),
        ));
    };
    let data = explanation.map.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("explanation map"));
    }
    let colors: Vec<Rgb<u8>> = if explanation.signed {
        let peak = data.iter().fold(0f32, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        data.iter().map(|&v| diverging(v * scale)).collect()
    } else {
        let (lo, hi) = data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        data.iter()
            .map(|&v| viridis(if range > 0.0 { (v - lo) / range } else { 0.0 }))
            .collect()
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        colors[y as usize * w + x as usize]
    }))
}

pub fn save_heatmap(explanation: &Explanation, path: impl AsRef<Path>) -> Result<()> {
    render_heatmap(explanation)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
