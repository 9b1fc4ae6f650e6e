use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{self, Color, Position, SceneSpec, Shape, Size};
use super::sequence::{build_sequence, sample_layout, Layout, MixedSequence, Segment};
use super::Vocab;
use crate::error::Result;
use crate::par;
use crate::rng::{self, Purpose};

/// Parameters of a synthetic corpus; serialized as the corpus spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub count: usize,
    pub image_hw: usize,
    pub p_caption_first: f64,
    pub edit_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { seed: 0, count: 1024, image_hw: 16, p_caption_first: 0.8, edit_fraction: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusItem {
    Caption { scene: SceneSpec, caption: String, layout: Layout },
    Edit { input: SceneSpec, instruction: String, output: SceneSpec },
}

fn pick<T: Copy, R: Rng + ?Sized>(rng: &mut R, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// Random edit instruction in the synthetic grammar, with its target spec.
pub fn random_edit<R: Rng + ?Sized>(rng: &mut R, input: &SceneSpec) -> (String, SceneSpec) {
    let instruction = match rng.random_range(0..5) {
        0 => scene::color_instruction(pick(rng, Color::ALL)),
        1 => scene::size_instruction(pick(rng, Size::ALL)),
        2 => scene::move_instruction(pick(rng, Position::ALL)),
        3 => scene::shape_instruction(pick(rng, Shape::ALL)),
        _ => scene::IDENTITY_INSTRUCTION.to_string(),
    };
    let output = input.apply_instruction(&instruction).expect("generated instruction is in grammar");
    (instruction, output)
}

/// Item `index` of the corpus; a pure function of `(spec.seed, index)`.
pub fn generate_item(spec: &CorpusSpec, index: usize) -> CorpusItem {
    let mut rng = rng::stream(spec.seed, Purpose::Data, index as u64);
    let all = SceneSpec::all();
    let is_edit = rng.random::<f64>() < spec.edit_fraction;
    let scene = pick(&mut rng, &all);
    if is_edit {
        let (instruction, output) = random_edit(&mut rng, &scene);
        CorpusItem::Edit { input: scene, instruction, output }
    } else {
        let layout = sample_layout(&mut rng, spec.p_caption_first);
        CorpusItem::Caption { scene, caption: scene.caption(), layout }
    }
}

pub fn generate(spec: &CorpusSpec) -> Vec<CorpusItem> {
    par::map_range(spec.count, |i| generate_item(spec, i))
}

/// `count` distinct grammar scenes in a seeded random order.
pub fn distinct_scenes(seed: u64, count: usize) -> Vec<SceneSpec> {
    let mut all = SceneSpec::all();
    all.shuffle(&mut rng::stream(seed, Purpose::Data, u64::MAX));
    all.truncate(count);
    all
}

/// Caption/image pair in the given order.
pub fn pair_sequence(scene: &SceneSpec, layout: Layout, hw: usize, k: usize) -> Result<MixedSequence> {
    let text = Segment::Text(scene.caption());
    let img = Segment::Image(scene.render(hw, hw));
    let segs = match layout {
        Layout::CaptionFirst => [text, img],
        Layout::ImageFirst => [img, text],
    };
    build_sequence(&segs, &Vocab::text(), k)
}

/// `[BOS, BOI, input, EOI, instruction, BOI, output, EOI, EOS]`.
pub fn make_edit_triple(input: &SceneSpec, instruction: &str, output: &SceneSpec, hw: usize, k: usize) -> Result<MixedSequence> {
    let segs = [
        Segment::Image(input.render(hw, hw)),
        Segment::Text(instruction.to_string()),
        Segment::Image(output.render(hw, hw)),
    ];
    build_sequence(&segs, &Vocab::text(), k)
}

impl CorpusItem {
    pub fn to_sequence(&self, hw: usize, k: usize) -> Result<MixedSequence> {
        match self {
            CorpusItem::Caption { scene, layout, .. } => pair_sequence(scene, *layout, hw, k),
            CorpusItem::Edit { input, instruction, output } => make_edit_triple(input, instruction, output, hw, k),
        }
    }
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(items: &[CorpusItem], mut w: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<CorpusItem>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
