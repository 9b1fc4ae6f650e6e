#![allow(dead_code)]

use transfusion::data::vocab::{BOI, BOS, EOI, EOS};
use transfusion::data::{Element, Image, Layout, MixedSequence};
use transfusion::diffusion::{DiffusionDraw, NoiseSchedule};
use transfusion::model::{ModelConfig, TrainingExample, TransfusionModel};
use transfusion::patch::CodecKind;
use transfusion::rng::{normal_vec, stream, Purpose};

pub fn probe_config(kind: CodecKind) -> ModelConfig {
    let mut cfg = ModelConfig::preset("probe").unwrap();
    cfg.codec.kind = kind;
    cfg
}

pub fn probe_model(kind: CodecKind, seed: u64) -> TransfusionModel<f64> {
    TransfusionModel::new(&probe_config(kind), &mut stream(seed, Purpose::Init, 0)).unwrap()
}

pub fn random_image(seed: u64, c: usize, hw: usize) -> Image {
    let v: Vec<f32> = normal_vec(&mut stream(seed, Purpose::Data, 0), c * hw * hw).into_iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    Image::from_vec(c, hw, hw, v).unwrap()
}

/// `[BOS, 7, 8, BOI, 4 patches, EOI, 9, 10, EOS]` with a 4x4 image, k = 2.
pub fn probe_sequence(seed: u64) -> MixedSequence {
    let mut seq = MixedSequence::empty(2);
    seq.push_token(BOS);
    seq.push_token(7);
    seq.push_token(8);
    seq.push_image(random_image(seed, 3, 4), Layout::CaptionFirst).unwrap();
    seq.push_token(9);
    seq.push_token(10);
    seq.push_token(EOS);
    seq
}

pub fn probe_example(seed: u64, t: usize) -> TrainingExample {
    let seq = probe_sequence(seed);
    let schedule = NoiseSchedule::cosine(1000, 0.008).unwrap();
    let draws = seq
        .images
        .iter()
        .map(|img| DiffusionDraw::new(img, t, &schedule, &mut stream(seed, Purpose::Noise, 0)).unwrap())
        .collect();
    TrainingExample::new(seq, draws).unwrap()
}

/// Element labels for diagnostics.
pub fn describe(seq: &MixedSequence) -> Vec<String> {
    seq.elements
        .iter()
        .map(|e| match e {
            Element::Token(BOS) => "BOS".into(),
            Element::Token(BOI) => "BOI".into(),
            Element::Token(EOI) => "EOI".into(),
            Element::Token(EOS) => "EOS".into(),
            Element::Token(t) => format!("t{t}"),
            Element::ImageRef { image, patch } => format!("i{image}p{patch}"),
        })
        .collect()
}
