//! Programmatic checker for generated scenes.
//!
//! Pixels are labelled by their nearest prototype among the background and
//! the four palette colors. The foreground mask is matched against the
//! rendered footprint of every (shape, position, size) combination; the
//! best match by intersection-over-union, together with the majority
//! foreground color, is the estimated scene.

use crate::data::scene::{parse_caption, BACKGROUND};
use crate::data::{Color, Image, Position, SceneSpec, Shape, Size};
use crate::error::Result;

/// The best footprint must overlap the foreground at least this well.
pub const MIN_IOU: f64 = 0.5;
/// The majority color must hold at least this share of foreground pixels.
pub const MIN_COLOR_SHARE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneEstimate {
    pub spec: SceneSpec,
    pub iou: f64,
    pub color_share: f64,
}

impl SceneEstimate {
    pub fn confident(&self) -> bool {
        self.iou >= MIN_IOU && self.color_share >= MIN_COLOR_SHARE
    }
}

fn nearest_label(image: &Image, y: usize, x: usize) -> Option<usize> {
    let px = image.pixel(y, x);
    let dist = |proto: [f32; 3]| px.iter().zip(proto).map(|(&a, b)| (a - b) * (a - b)).sum::<f32>();
    let mut best = (dist([BACKGROUND; 3]), None);
    for (i, c) in Color::ALL.iter().enumerate() {
        let d = dist(c.rgb());
        if d < best.0 {
            best = (d, Some(i));
        }
    }
    best.1
}

/// Best-matching scene for `image`, or `None` if nothing is in the
/// foreground.
pub fn estimate_scene(image: &Image) -> Option<SceneEstimate> {
    let (h, w) = (image.height, image.width);
    let labels: Vec<Option<usize>> = (0..h * w).map(|i| nearest_label(image, i / w, i % w)).collect();
    let mut counts = [0usize; 4];
    for l in labels.iter().flatten() {
        counts[*l] += 1;
    }
    let fg: usize = counts.iter().sum();
    if fg == 0 {
        return None;
    }
    // first maximum wins ties
    let (ci, &cmax) = counts.iter().enumerate().rev().max_by_key(|&(_, c)| *c)?;
    let color = Color::ALL[ci];
    let mut best: Option<SceneEstimate> = None;
    for &shape in Shape::ALL {
        for &position in Position::ALL {
            for &size in Size::ALL {
                let spec = SceneSpec::new(shape, color, position, size);
                let (mut inter, mut union) = (0usize, 0usize);
                for (i, l) in labels.iter().enumerate() {
                    let a = l.is_some();
                    let b = spec.covers(h, w, i / w, i % w);
                    inter += (a && b) as usize;
                    union += (a || b) as usize;
                }
                let iou = inter as f64 / union.max(1) as f64;
                if best.is_none_or(|b| iou > b.iou) {
                    best = Some(SceneEstimate { spec, iou, color_share: cmax as f64 / fg as f64 });
                }
            }
        }
    }
    best
}

/// Whether `image` depicts `caption`: every attribute the caption names
/// must agree with a confident scene estimate.
pub fn scene_check(caption: &str, image: &Image) -> Result<bool> {
    let wanted = parse_caption(caption)?;
    Ok(estimate_scene(image).is_some_and(|e| e.confident() && wanted.matches(&e.spec)))
}

/// Probability that a uniformly guessed grammar scene passes the check for
/// a uniformly chosen full caption.
pub fn chance_bound(hw: usize) -> f64 {
    let all = SceneSpec::all();
    let estimates: Vec<Option<SceneEstimate>> = all.iter().map(|s| estimate_scene(&s.render(hw, hw))).collect();
    let mut hits = 0usize;
    for caption_spec in &all {
        for e in estimates.iter().flatten() {
            hits += (e.confident() && e.spec == *caption_spec) as usize;
        }
    }
    hits as f64 / (all.len() * all.len()) as f64
}
