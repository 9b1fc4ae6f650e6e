mod common;

use common::{probe_config, probe_example, probe_model, probe_sequence, random_image};
use transfusion::data::vocab::{BOI, BOS, EOS};
use transfusion::data::{Element, Image, Layout, MixedSequence};
use transfusion::mask::build_mask;
use transfusion::model::{
    batch_loss, ddpm_loss, lm_loss, transfusion_loss, ImageInput, LossPlan, PositionRole, TrainingExample,
    TransfusionModel,
};
use transfusion::patch::CodecKind;
use transfusion::rng::{stream, Purpose};
use transfusion::tensor::{Graph, Mat};

/// Logits at every position and the noise prediction of every image, with
/// each image at its own timestep.
fn outputs(model: &TransfusionModel<f64>, seq: &MixedSequence, t: usize, causal_only: bool) -> (Mat<f64>, Vec<Mat<f64>>) {
    let mask = build_mask(&seq.elements, &seq.spans, causal_only).unwrap();
    let inputs: Vec<ImageInput> = seq.images.iter().map(|x| ImageInput { x_t: x, t }).collect();
    let mut g = Graph::new(&model.params);
    let pass = model.forward(&mut g, &seq.elements, &seq.spans, &inputs, &mask).unwrap();
    let all: Vec<usize> = (0..seq.len()).collect();
    let logits = model.logits(&mut g, &pass, &all);
    let eps = (0..seq.images.len())
        .map(|i| {
            let v = model.eps_hat(&mut g, &pass, i).unwrap();
            g.value(v).clone()
        })
        .collect();
    (g.value(logits).clone(), eps)
}

fn row(m: &Mat<f64>, r: usize) -> &[f64] {
    &m.data[r * m.cols..(r + 1) * m.cols]
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Adds `delta` to every pixel of patch `p` (k = 2, 4x4 image).
fn perturb_patch(img: &Image, p: usize, delta: f32) -> Image {
    let mut out = img.clone();
    let (py, px) = (p / 2 * 2, p % 2 * 2);
    for c in 0..img.channels {
        for y in py..py + 2 {
            for x in px..px + 2 {
                out.set(c, y, x, img.get(c, y, x) + delta);
            }
        }
    }
    out
}

#[test]
fn logits_never_see_later_positions() {
    for kind in [CodecKind::Linear, CodecKind::Unet] {
        let model = probe_model(kind, 3);
        let seq = probe_sequence(5);
        let span = seq.spans[0];
        for causal_only in [false, true] {
            let (base, _) = outputs(&model, &seq, 300, causal_only);
            for j in 0..seq.len() {
                let mut pert = seq.clone();
                match pert.elements[j] {
                    Element::Token(id) => pert.elements[j] = Element::Token(if id == 7 { 8 } else { 7 }),
                    Element::ImageRef { image, patch } => {
                        pert.images[image] = perturb_patch(&pert.images[image], patch, 0.5);
                    }
                }
                let (after, _) = outputs(&model, &pert, 300, causal_only);
                for i in 0..j {
                    // patch perturbations under the U-Net codec reach the whole image
                    let same_image = span.contains(i) && span.contains(j);
                    if same_image {
                        continue;
                    }
                    assert_eq!(row(&base, i), row(&after, i), "{kind:?} causal_only={causal_only} i={i} j={j}");
                }
            }
        }
    }
}

#[test]
fn patch_perturbation_probe() {
    let model = probe_model(CodecKind::Linear, 11);
    let seq = probe_sequence(2);
    let mut pert = seq.clone();
    pert.images[0] = perturb_patch(&seq.images[0], 2, 0.7);
    let k2 = 3 * 4;
    for (causal_only, should_change) in [(true, false), (false, true)] {
        let (_, base) = outputs(&model, &seq, 500, causal_only);
        let (_, after) = outputs(&model, &pert, 500, causal_only);
        // eps_hat rows are per patch; patch 1 precedes patch 2
        let d = max_diff(&base[0].data[k2..2 * k2], &after[0].data[k2..2 * k2]);
        assert_eq!(d > 1e-9, should_change, "causal_only={causal_only} diff={d}");
    }
}

#[test]
fn zero_image_sequence_is_a_plain_lm() {
    let model = probe_model(CodecKind::Linear, 1);
    let mut seq = MixedSequence::empty(2);
    for id in [BOS, 7, 9, 11, EOS] {
        seq.push_token(id);
    }
    let (logits, eps) = outputs(&model, &seq, 1, false);
    assert!(eps.is_empty());
    assert_eq!(logits.rows, 5);
    let (causal, _) = outputs(&model, &seq, 1, true);
    assert_eq!(logits.data, causal.data);
    let rep = batch_loss(&model, &[TrainingExample::clean(seq)], false, 5.0).unwrap();
    assert_eq!(rep.images, 0);
    assert_eq!(rep.ddpm_loss, 0.0);
    assert_eq!(rep.total, rep.lm_loss);
}

#[test]
fn batch_members_do_not_interact() {
    let model = probe_model(CodecKind::Linear, 4);
    let a = probe_example(1, 200);
    let b = probe_example(2, 800);
    let ab = batch_loss(&model, &[a.clone(), b.clone()], false, 5.0).unwrap();
    let ba = batch_loss(&model, &[b.clone(), a.clone()], false, 5.0).unwrap();
    let ra = batch_loss(&model, &[a], false, 5.0).unwrap();
    let rb = batch_loss(&model, &[b], false, 5.0).unwrap();
    assert!((ab.total - ba.total).abs() < 1e-12 * ab.total.abs());
    // equal token and image counts, so the batch value is the average
    assert!((ab.lm_loss - 0.5 * (ra.lm_loss + rb.lm_loss)).abs() < 1e-12);
    assert!((ab.ddpm_loss - 0.5 * (ra.ddpm_loss + rb.ddpm_loss)).abs() < 1e-12);
}

#[test]
fn loss_examples() {
    let one_hot = Mat::from_vec(2, 3, vec![50.0, -50.0, -50.0, -50.0, -50.0, 50.0]);
    let (v, n) = lm_loss(&one_hot, &[0, 2], &[true, true]);
    assert!(v < 1e-12 && n == 2);
    let uniform = Mat::from_vec(1, 4, vec![0.3; 4]);
    assert!((lm_loss(&uniform, &[1], &[true]).0 - 4f64.ln()).abs() < 1e-12);
    let (v, n) = lm_loss(&uniform, &[1], &[false]);
    assert_eq!((v, n), (0.0, 0));

    let ones = Image::from_vec(1, 2, 2, vec![1.0; 4]).unwrap();
    let zeros = Image::zeros(1, 2, 2);
    assert_eq!(ddpm_loss(&[ones.clone()], &[ones.clone()]).unwrap(), 0.0);
    assert_eq!(ddpm_loss(&[zeros.clone()], &[ones.clone()]).unwrap(), 1.0);
    assert!(ddpm_loss(&[Image::zeros(1, 4, 4)], &[ones]).is_err());

    assert_eq!(transfusion_loss(2.0, 0.1, 5.0), 2.5);
    assert_eq!(transfusion_loss(2.0, 0.1, 0.0), 2.0);
    assert_eq!(transfusion_loss(2.0, 0.0, 5.0), 2.0);
}

#[test]
fn ddpm_loss_ignores_patch_size() {
    let eps = random_image(1, 3, 8);
    let hat = random_image(2, 3, 8);
    let direct = ddpm_loss(&[hat.clone()], &[eps.clone()]).unwrap();
    let manual: f64 = hat.data.iter().zip(&eps.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / 192.0;
    assert!((direct - manual).abs() < 1e-12);
}

#[test]
fn boi_input_position_carries_no_loss() {
    let seq = probe_sequence(7);
    let plan = LossPlan::new(&seq).unwrap();
    let boi = seq.elements.iter().position(|e| *e == Element::Token(BOI)).unwrap();
    assert_eq!(plan.roles[boi], PositionRole::BoiInput);
    let (positions, _) = plan.lm_positions();
    assert!(!positions.contains(&boi));
}

#[test]
fn every_position_has_exactly_one_role() {
    for layout in [Layout::CaptionFirst, Layout::ImageFirst] {
        let mut seq = MixedSequence::empty(2);
        seq.push_token(BOS);
        seq.push_token(9);
        seq.push_image(random_image(1, 3, 4), layout).unwrap();
        seq.push_image(random_image(2, 3, 4), layout).unwrap();
        seq.push_token(EOS);
        let padded = seq.padded(seq.len() + 3);
        let plan = LossPlan::new(&padded).unwrap();
        let lm = plan.roles.iter().filter(|r| matches!(r, PositionRole::Lm { .. })).count();
        let diff = plan.roles.iter().filter(|r| matches!(r, PositionRole::Diffusion { .. })).count();
        let boi = plan.roles.iter().filter(|r| matches!(r, PositionRole::BoiInput)).count();
        // the final EOS is never an input
        assert_eq!(lm + diff + boi, seq.len() - 1);
        assert_eq!(diff, 8);
        assert_eq!(boi, 2);
    }
}

#[test]
fn cast_preserves_outputs() {
    let model = probe_model(CodecKind::Linear, 8);
    let there: TransfusionModel<f32> = model.cast();
    let back: TransfusionModel<f64> = there.cast();
    let seq = probe_sequence(3);
    let (a, _) = outputs(&model, &seq, 100, false);
    let (b, _) = outputs(&back, &seq, 100, false);
    assert!(max_diff(&a.data, &b.data) < 1e-4);
}

#[test]
fn init_is_seeded() {
    let cfg = probe_config(CodecKind::Unet);
    let a: TransfusionModel<f32> = TransfusionModel::new(&cfg, &mut stream(9, Purpose::Init, 0)).unwrap();
    let b: TransfusionModel<f32> = TransfusionModel::new(&cfg, &mut stream(9, Purpose::Init, 0)).unwrap();
    let c: TransfusionModel<f32> = TransfusionModel::new(&cfg, &mut stream(10, Purpose::Init, 0)).unwrap();
    let values = |m: &TransfusionModel<f32>| m.params.iter().flat_map(|p| p.value.data.clone()).collect::<Vec<f32>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}
