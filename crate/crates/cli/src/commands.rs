use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use transfusion::baseline::{self, baseline_config, collect_patches, discretize, fit_codebook, Codebook, ParityKey};
use transfusion::config::{resolve, Mode, RunConfig};
use transfusion::data::corpus::{self, generate_item, random_edit, read_jsonl, write_jsonl};
use transfusion::data::vocab::{BOI, BOS, EOI};
use transfusion::data::{CorpusItem, CorpusSpec, Element, MixedSequence, SceneSpec, Span, Vocab};
use transfusion::eval::{self, chance_bound, EditCase, EvalReport};
use transfusion::infer::{generate_from_text, render_text, IMAGE_PLACEHOLDER};
use transfusion::mask::build_mask;
use transfusion::model::TransfusionModel;
use transfusion::rng::{stream, Purpose};
use transfusion::train::{grad_check, load_checkpoint, probe_batch, save_checkpoint, LogRow, Trainer};

use crate::ConfigArgs;

pub const CONFIG_HELP: &str = "\
Configuration: a JSON object with any subset of these sections, each key
optional (defaults apply); unknown keys are rejected.
  mode        \"transfusion\" | \"baseline\"
  corpus      seed, count, image_hw, p_caption_first, edit_fraction
  train       lr_peak, warmup_steps, lr_final, beta1, beta2, adam_eps,
              weight_decay, grad_clip, batch_size, total_steps, lambda,
              diffusion_steps, schedule_offset, noise_limit, causal_only,
              seed, model { vocab_size, d_model, layers, heads, ffn_hidden,
              rope_base, norm_eps, codec { ... } }
  generation  max_new_elements, temperature, top_p, diffusion_steps,
              cfg_weight, stochastic, causal_only, seed
  eval        heldout_seed, heldout_count, prompt_count, edit_count
  baseline    codebook_size, kmeans_iters
Override any leaf with --set section.key=value (value parsed as JSON).";

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const CODEBOOK_FILE: &str = "codebook.bin";

/// A configuration the user must fix; reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let cfg: RunConfig = resolve(text.as_deref(), &args.overrides).map_err(|e| UsageError(e.to_string()))?;
    cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
    cfg.generation.validate(&cfg.train.schedule()?).map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct ConfigArtifact<'a> {
    config_hash: String,
    config: &'a RunConfig,
}

/// Creates `dir` and records the resolved config and its hash there.
fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let hash = cfg.hash()?;
    let artifact = ConfigArtifact { config_hash: hash.clone(), config: cfg };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&artifact)?)?;
    fs::write(dir.join("config_hash.txt"), format!("{hash}\n"))?;
    Ok(hash)
}

fn corpus_items(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<CorpusItem>> {
    match data {
        Some(p) => Ok(read_jsonl(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => Ok(corpus::generate(&cfg.corpus)),
    }
}

fn to_sequences(cfg: &RunConfig, items: &[CorpusItem]) -> Result<Vec<MixedSequence>> {
    let codec = &cfg.train.model.codec;
    if codec.image_hw != cfg.corpus.image_hw {
        bail!("corpus.image_hw={} but train.model.codec.image_hw={}", cfg.corpus.image_hw, codec.image_hw);
    }
    if items.is_empty() {
        bail!("empty corpus");
    }
    Ok(items.iter().map(|it| it.to_sequence(codec.image_hw, codec.patch_size)).collect::<transfusion::Result<_>>()?)
}

fn write_run_logs(dir: &Path, trainer: &Trainer) -> Result<()> {
    trainer.write_log(BufWriter::new(File::create(dir.join("log.csv"))?))?;
    trainer.histogram.write_csv(BufWriter::new(File::create(dir.join("timesteps.csv"))?))?;
    Ok(())
}

fn run_training(trainer: &mut Trainer, data: &[MixedSequence], steps: usize, dir: &Path) -> Result<()> {
    let mut live = BufWriter::new(File::create(dir.join("progress.csv"))?);
    writeln!(live, "{}", LogRow::HEADER)?;
    trainer.run(data, steps, Some(&mut live), |_| false)?;
    live.flush()?;
    write_run_logs(dir, trainer)?;
    save_checkpoint(trainer, &dir.join("checkpoint"))?;
    Ok(())
}

pub fn gen_data(args: &ConfigArgs, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    prepare_dir(out, &cfg)?;
    let items = corpus::generate(&cfg.corpus);
    write_jsonl(&items, BufWriter::new(File::create(out.join("corpus.jsonl"))?))?;
    info!("wrote {} items to {}", items.len(), out.join("corpus.jsonl").display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    args: &ConfigArgs,
    out: &Path,
    data: Option<&Path>,
    steps: Option<usize>,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    if cfg.mode == Mode::Baseline {
        if resume.is_some() {
            bail!("--resume is not supported for baseline runs");
        }
        return train_baseline(args, out, data, steps);
    }
    let hash = prepare_dir(out, &cfg)?;
    let sequences = to_sequences(&cfg, &corpus_items(&cfg, data)?)?;
    let mut trainer = match resume {
        Some(dir) => {
            let t = load_checkpoint(dir)?;
            if t.config != cfg.train {
                bail!("checkpoint config differs from the resolved train config");
            }
            t
        }
        None => Trainer::new(cfg.train.clone())?,
    };
    let steps = steps.unwrap_or(cfg.train.total_steps.saturating_sub(trainer.step));
    info!("config {hash}: {} sequences, {} params, {steps} steps", sequences.len(), trainer.model.num_params());
    run_training(&mut trainer, &sequences, steps, out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn train_baseline(args: &ConfigArgs, out: &Path, data: Option<&Path>, steps: Option<usize>) -> Result<ExitCode> {
    let mut cfg = load_config(args)?;
    cfg.mode = Mode::Baseline;
    prepare_dir(out, &cfg)?;
    let sequences = to_sequences(&cfg, &corpus_items(&cfg, data)?)?;
    let patches = collect_patches(&sequences)?;
    let codebook = fit_codebook(&patches, cfg.baseline.codebook_size, cfg.baseline.kmeans_iters, cfg.train.seed)?;
    let tokens: Vec<MixedSequence> = sequences.iter().map(|s| discretize(s, &codebook)).collect::<transfusion::Result<_>>()?;
    let train_cfg = baseline_config(&cfg.train, codebook.len());
    let parity = ParityKey::new(&train_cfg, cfg.corpus.seed);
    fs::write(
        out.join("parity.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "hash": parity.hash()?, "key": parity }))?,
    )?;
    let mut trainer = Trainer::new(train_cfg)?;
    let steps = steps.unwrap_or(cfg.train.total_steps);
    info!("baseline: {} patches, codebook {}, {steps} steps", patches.len(), codebook.len());
    run_training(&mut trainer, &tokens, steps, out)?;
    codebook.write(BufWriter::new(File::create(out.join("checkpoint").join(CODEBOOK_FILE))?))?;
    Ok(ExitCode::SUCCESS)
}

/// Baseline sampling: each placeholder becomes `n` sampled codebook tokens.
fn sample_baseline(
    trainer: &Trainer,
    codebook: &Codebook,
    cfg: &RunConfig,
    prompt: &str,
) -> Result<(String, Vec<transfusion::data::Image>)> {
    let model = &trainer.model;
    let vocab = Vocab::text();
    let mut seq = MixedSequence::empty(model.config.codec.patch_size);
    seq.push_token(BOS);
    let mut text = String::new();
    let mut images = Vec::new();
    let parts: Vec<&str> = prompt.split(IMAGE_PLACEHOLDER).collect();
    for (i, part) in parts.iter().enumerate() {
        for id in vocab.tokenize(part)? {
            seq.push_token(id);
        }
        text.push_str(part);
        if i + 1 < parts.len() {
            seq.push_token(BOI);
            let (image, extended) = baseline::generate_image(model, &seq, codebook, &cfg.generation, i as u64)?;
            seq = extended;
            text.push_str(&format!("<image:{:03}>", images.len()));
            images.push(image);
        }
    }
    Ok((text, images))
}

pub fn sample(args: &ConfigArgs, checkpoint: &Path, prompt: &str, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    prepare_dir(out, &cfg)?;
    let trainer = load_checkpoint(checkpoint)?;
    let codebook_path = checkpoint.join(CODEBOOK_FILE);
    let (text, images) = if codebook_path.exists() {
        let codebook = Codebook::read(File::open(&codebook_path)?)?;
        sample_baseline(&trainer, &codebook, &cfg, prompt)?
    } else {
        let mut params = cfg.generation.clone();
        params.causal_only |= trainer.config.causal_only;
        let generation = generate_from_text(&trainer.model, prompt, &params, &trainer.schedule)?;
        if generation.budget_exceeded {
            log::warn!("generation stopped at the element budget");
        }
        info!("{} forward passes", generation.forward_passes);
        (render_text(&generation.sequence), generation.sequence.images)
    };
    fs::write(out.join("out.txt"), format!("{text}\n"))?;
    for (i, img) in images.iter().enumerate() {
        fs::write(out.join(format!("out_{i:03}.ppm")), img.clipped().to_ppm_bytes()?)?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

/// Test cases whose input scenes are disjoint from every edit input in the
/// training corpus, when enough such scenes exist.
fn edit_cases(cfg: &RunConfig) -> (Vec<EditCase>, bool) {
    let train_inputs: Vec<SceneSpec> = (0..cfg.corpus.count)
        .filter_map(|i| match generate_item(&cfg.corpus, i) {
            CorpusItem::Edit { input, .. } => Some(input),
            CorpusItem::Caption { .. } => None,
        })
        .collect();
    let pool = corpus::distinct_scenes(cfg.eval.heldout_seed, usize::MAX);
    let fresh: Vec<SceneSpec> = pool.iter().filter(|s| !train_inputs.contains(s)).copied().collect();
    let disjoint = !fresh.is_empty();
    let inputs = if disjoint { fresh } else { pool };
    let mut rng = stream(cfg.eval.heldout_seed, Purpose::Eval, 0);
    let cases = (0..cfg.eval.edit_count)
        .map(|i| {
            let input = inputs[i % inputs.len()];
            let (instruction, target) = random_edit(&mut rng, &input);
            EditCase { input, instruction, target }
        })
        .collect();
    (cases, disjoint)
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let hash = prepare_dir(out, &cfg)?;
    let trainer = load_checkpoint(checkpoint)?;
    if checkpoint.join(CODEBOOK_FILE).exists() {
        bail!("eval supports Transfusion checkpoints only");
    }
    let model = &trainer.model;
    let causal = trainer.config.causal_only;
    let heldout_spec =
        CorpusSpec { seed: cfg.eval.heldout_seed, count: cfg.eval.heldout_count, edit_fraction: 0.0, ..cfg.corpus.clone() };
    let heldout = to_sequences(&cfg, &corpus::generate(&heldout_spec))?;
    let text_ppl = eval::perplexity(model, &heldout, causal)?;
    let ddpm = eval::heldout_ddpm_loss(
        model,
        &heldout,
        &trainer.schedule,
        cfg.eval.heldout_seed,
        causal,
        trainer.config.noise_limit,
    )?;
    info!("held-out perplexity {text_ppl:.4}, ddpm loss {ddpm:.5}");

    let mut params = cfg.generation.clone();
    params.causal_only |= causal;
    let scenes = match cfg.eval.prompt_count {
        0 => SceneSpec::all(),
        n => corpus::distinct_scenes(cfg.eval.heldout_seed, n),
    };
    let captions: Vec<String> = scenes.iter().map(SceneSpec::caption).collect();
    let accuracy = eval::generation_accuracy(model, &captions, &params, &trainer.schedule)?;
    let images = out.join("images");
    fs::create_dir_all(&images)?;
    accuracy.write_csv(BufWriter::new(File::create(out.join("generation.csv"))?), "images/gen_")?;
    for (i, o) in accuracy.outcomes.iter().enumerate() {
        fs::write(images.join(format!("gen_{i:03}.ppm")), o.image.clipped().to_ppm_bytes()?)?;
    }
    info!("generation accuracy {:.4} over {} prompts", accuracy.accuracy, captions.len());

    let (edit_accuracy, edit_split_disjoint) = if cfg.eval.edit_count > 0 {
        let (cases, disjoint) = edit_cases(&cfg);
        let report = eval::edit_accuracy(model, &cases, &params, &trainer.schedule)?;
        report.write_csv(BufWriter::new(File::create(out.join("edit.csv"))?), "images/edit_")?;
        for (i, o) in report.outcomes.iter().enumerate() {
            fs::write(images.join(format!("edit_{i:03}.ppm")), o.image.clipped().to_ppm_bytes()?)?;
        }
        (Some(report.accuracy), Some(disjoint))
    } else {
        (None, None)
    };

    let train_seqs = to_sequences(&cfg, &corpus::generate(&cfg.corpus))?;
    let mean_len = train_seqs.iter().map(MixedSequence::len).sum::<usize>() as f64 / train_seqs.len() as f64;
    let tokens = (trainer.step * trainer.config.batch_size) as f64 * mean_len;
    let report = EvalReport {
        config_hash: hash,
        step: trainer.step,
        text_ppl,
        heldout_ddpm_loss: ddpm,
        generation_accuracy: accuracy.accuracy,
        generation_prompts: captions.len(),
        edit_accuracy,
        edit_split_disjoint,
        chance_bound: chance_bound(cfg.corpus.image_hw),
        flops: eval::estimate_flops(model.num_params(), tokens.round() as usize),
        cfg_weight: params.cfg_weight,
        diffusion_steps: params.diffusion_steps,
    };
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join("eval.json"), &json)?;
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: &ConfigArgs, stride: usize, step: f64) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let t = &cfg.train;
    let model: TransfusionModel<f64> = TransfusionModel::new(&t.model, &mut stream(t.seed, Purpose::Init, 0))?;
    let batch = probe_batch(&t.model, t.seed)?;
    let report = grad_check(&model, &batch, t.causal_only, t.lambda, step, stride.max(1))?;
    for p in &report.params {
        println!("{:<32} {:>6} {:.3e}", p.name, p.checked, p.max_rel_err);
    }
    println!(
        "max relative error {:.3e} ({} at {}), {} elements",
        report.max_rel_err, report.worst_param, report.worst_index, report.checked
    );
    if report.max_rel_err < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", report.max_rel_err);
        Ok(ExitCode::from(2))
    }
}

pub fn inspect_mask(args: &ConfigArgs, prompt: &str, patches: Option<usize>, causal_only: bool) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let codec = &cfg.train.model.codec;
    let n = match patches {
        Some(n) => n,
        None => transfusion::data::patches_per_image(codec.image_hw, codec.image_hw, codec.patch_size)?,
    };
    let vocab = Vocab::text();
    let mut elements = vec![Element::Token(BOS)];
    let mut labels = vec![vocab.describe(BOS)];
    let mut spans = Vec::new();
    let parts: Vec<&str> = prompt.split(IMAGE_PLACEHOLDER).collect();
    for (i, part) in parts.iter().enumerate() {
        for id in vocab.tokenize(part)? {
            elements.push(Element::Token(id));
            labels.push(vocab.describe(id));
        }
        if i + 1 < parts.len() {
            let image = spans.len();
            elements.push(Element::Token(BOI));
            labels.push(vocab.describe(BOI));
            spans.push(Span { start: elements.len(), len: n });
            for patch in 0..n {
                elements.push(Element::ImageRef { image, patch });
                labels.push(format!("i{image}p{patch}"));
            }
            elements.push(Element::Token(EOI));
            labels.push(vocab.describe(EOI));
        }
    }
    let mask = build_mask(&elements, &spans, causal_only || cfg.train.causal_only)?;
    print!("{}", mask.annotated_grid(&labels));
    Ok(ExitCode::SUCCESS)
}
