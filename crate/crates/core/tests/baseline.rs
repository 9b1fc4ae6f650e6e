use proptest::prelude::*;

use transfusion::baseline::{
    baseline_config, collect_patches, discretize, fit_codebook, generate_image, image_token, Codebook, ParityKey,
};
use transfusion::data::corpus::{distinct_scenes, pair_sequence};
use transfusion::data::vocab::{BOI, BOS, EOI};
use transfusion::data::{Element, Layout, MixedSequence, Vocab};
use transfusion::infer::GenerationParams;
use transfusion::model::TransfusionModel;
use transfusion::rng::{normal_vec, stream, Purpose};
use transfusion::train::TrainConfig;

fn brute_force(codebook: &Codebook, patch: &[f32]) -> usize {
    (0..codebook.len())
        .map(|i| {
            let d: f64 = codebook.centroid(i).iter().zip(patch).map(|(&c, &p)| ((c - p) as f64) * ((c - p) as f64)).sum();
            (d, i)
        })
        .min_by(|a, b| a.partial_cmp(b).unwrap())
        .unwrap()
        .1
}

fn corpus(count: usize) -> Vec<MixedSequence> {
    distinct_scenes(1, count).iter().map(|s| pair_sequence(s, Layout::CaptionFirst, 16, 4).unwrap()).collect()
}

#[test]
fn quantizer_matches_brute_force_on_a_thousand_patches() {
    let patches = collect_patches(&corpus(20)).unwrap();
    let codebook = fit_codebook(&patches, 16, 10, 0).unwrap();
    let mut rng = stream(5, Purpose::Eval, 0);
    let probes: Vec<Vec<f32>> = (0..1000).map(|_| normal_vec(&mut rng, codebook.dim())).collect();
    for p in &probes {
        assert_eq!(codebook.quantize(p), brute_force(&codebook, p));
    }
    for p in &patches {
        assert_eq!(codebook.quantize(p), brute_force(&codebook, p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn quantize_is_nearest(cents in prop::collection::vec(-2.0f32..2.0, 12), probe in prop::collection::vec(-3.0f32..3.0, 3)) {
        let codebook = Codebook::new(3, cents).unwrap();
        prop_assert_eq!(codebook.quantize(&probe), brute_force(&codebook, &probe));
    }
}

#[test]
fn discretized_sequence_keeps_markers_and_length() {
    let seqs = corpus(6);
    let codebook = fit_codebook(&collect_patches(&seqs).unwrap(), 8, 5, 3).unwrap();
    for s in &seqs {
        let d = discretize(s, &codebook).unwrap();
        assert_eq!(d.len(), s.len());
        assert!(d.images.is_empty());
        for (a, b) in s.elements.iter().zip(&d.elements) {
            match (a, b) {
                (Element::Token(x), Element::Token(y)) => assert_eq!(x, y),
                (Element::ImageRef { .. }, Element::Token(y)) => {
                    assert!(*y >= image_token(0) && *y < image_token(codebook.len()));
                }
                _ => panic!("patch survived discretization"),
            }
        }
    }
}

#[test]
fn baseline_pairs_with_its_transfusion_run() {
    let cfg = TrainConfig::default();
    let base = baseline_config(&cfg, 64);
    assert!(base.causal_only);
    assert_eq!(base.model.vocab_size, Vocab::text_size() + 64);
    assert_eq!(ParityKey::new(&cfg, 7).hash().unwrap(), ParityKey::new(&base, 7).hash().unwrap());
    assert_ne!(ParityKey::new(&cfg, 7).hash().unwrap(), ParityKey::new(&cfg, 8).hash().unwrap());
    let mut wider = cfg.clone();
    wider.model.d_model = 128;
    assert_ne!(ParityKey::new(&wider, 7).hash().unwrap(), ParityKey::new(&cfg, 7).hash().unwrap());
}

#[test]
fn baseline_samples_only_image_tokens() {
    let seqs = corpus(4);
    let codebook = fit_codebook(&collect_patches(&seqs).unwrap(), 6, 4, 0).unwrap();
    let mut cfg = baseline_config(&TrainConfig::default(), codebook.len());
    cfg.model.d_model = 16;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg.model.ffn_hidden = 32;
    let model: TransfusionModel<f32> = TransfusionModel::new(&cfg.model, &mut stream(0, Purpose::Init, 0)).unwrap();
    let mut prefix = MixedSequence::empty(4);
    prefix.push_token(BOS);
    prefix.push_token(BOI);
    let params = GenerationParams { temperature: 1.0, ..Default::default() };
    let (image, seq) = generate_image(&model, &prefix, &codebook, &params, 0).unwrap();
    assert_eq!(image.shape(), [3, 16, 16]);
    assert_eq!(seq.len(), 2 + 16 + 1);
    assert_eq!(seq.elements.last(), Some(&Element::Token(EOI)));
    for e in &seq.elements[2..18] {
        let id = e.token().unwrap();
        assert!(id >= image_token(0) && id < image_token(codebook.len()));
    }
}
