//! Deterministic training and evaluation loops.
//!
//! Each step corrupts a batch (ITM swap, then MLM masking of the post-swap
//! text), builds one tape over the whole batch, backpropagates the weighted
//! joint loss, and applies AdamW with separate encoder/fusion learning
//! rates. Corruption rng streams are derived from (seed, stream, step), so
//! runs are reproducible row for row and byte for byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::checkpoint::{save_checkpoint, Checkpoint};
use crate::harness::config::RunConfig;
use crate::harness::data::{generate_dataset, Dataset, Sample};
use crate::model::VlModel;
use crate::objectives;
use crate::tensor::optim::{AdamW, AdamWParams};
use crate::tensor::tape::{NodeId, Tape};

/// Derives an independent ChaCha stream from (seed, stream tag, index).
pub fn derived_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in stream.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e3779b97f4a7c15))
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_mlm: f64,
    pub loss_itm: f64,
    pub loss_vqa: f64,
    pub loss_total: f64,
    pub itm_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub last: Option<StepMetrics>,
}

pub const METRICS_HEADER: &str = "step,loss_mlm,loss_itm,loss_vqa,loss_total,itm_acc";

fn mean_node(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64))
}

fn check_finite(step: usize, name: &str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "step {step}: {name} loss is not finite ({value})"
        )));
    }
    Ok(value)
}

/// One corrupted forward/backward over `samples`; returns the metrics and
/// leaves gradients populated (caller steps the optimizer).
fn batch_pass(
    model: &mut VlModel,
    run: &RunConfig,
    samples: &[&Sample],
    step: usize,
    corruption_index: u64,
) -> Result<StepMetrics> {
    let texts: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
    let itm = objectives::apply_itm_corruption(
        &texts,
        run.itm_prob,
        &mut derived_rng(run.seed, "itm", corruption_index),
    )?;
    let mlm = objectives::apply_mlm_mask(
        &itm.texts,
        run.mlm_rate,
        &mut derived_rng(run.seed, "mlm", corruption_index),
    )?;

    let mut tape = Tape::new();
    let mut mlm_losses = Vec::new();
    let mut itm_losses = Vec::new();
    let mut vqa_losses = Vec::new();
    let mut itm_correct = 0usize;
    let n = model.cfg.seq_len();
    for (j, sample) in samples.iter().enumerate() {
        let patches = sample.patch_values(model.cfg.patch_dim);
        let out = model.forward(&mut tape, &mlm.tokens[j], &patches)?;

        let logits = model.mlm_head(&mut tape, out.hidden)?;
        let mut labels = vec![None; n];
        for (t, lab) in mlm.labels[j].iter().enumerate() {
            labels[1 + t] = *lab;
        }
        mlm_losses.push(objectives::mlm_loss(&mut tape, logits, &labels)?);

        let itm_logits = model.itm_head(&mut tape, out.pooled)?;
        let label = itm.label(j);
        itm_losses.push(objectives::itm_loss(&mut tape, itm_logits, label)?);
        let lv = tape.value(itm_logits);
        let pred = if lv[1] > lv[0] { 1 } else { 0 };
        if pred == label {
            itm_correct += 1;
        }

        if !itm.replaced[j] {
            let vqa_logits = model.vqa_head(&mut tape, out.pooled)?;
            let target = objectives::one_hot(sample.answer, model.cfg.answer_vocab_size);
            vqa_losses.push(objectives::vqa_loss(&mut tape, vqa_logits, &target)?);
        }
    }

    let mlm_mean = mean_node(&mut tape, &mlm_losses)?;
    let itm_mean = mean_node(&mut tape, &itm_losses)?;
    let vqa_mean = if vqa_losses.is_empty() {
        tape.input(vec![1], vec![0.0])?
    } else {
        mean_node(&mut tape, &vqa_losses)?
    };
    let loss_mlm = check_finite(step, "mlm", tape.scalar(mlm_mean))?;
    let loss_itm = check_finite(step, "itm", tape.scalar(itm_mean))?;
    let loss_vqa = check_finite(step, "vqa", tape.scalar(vqa_mean))?;

    let wm = tape.scale(mlm_mean, run.weights.mlm);
    let wi = tape.scale(itm_mean, run.weights.itm);
    let wv = tape.scale(vqa_mean, run.weights.vqa);
    let partial = tape.add(wm, wi)?;
    let total = tape.add(partial, wv)?;
    let loss_total = check_finite(step, "total", tape.scalar(total))?;

    model.store.zero_grads();
    tape.backward(total, &mut model.store)?;

    Ok(StepMetrics {
        step,
        loss_mlm,
        loss_itm,
        loss_vqa,
        loss_total,
        itm_acc: itm_correct as f64 / samples.len() as f64,
    })
}

fn optimizer_for(model: &VlModel, run: &RunConfig) -> AdamW {
    let hp = AdamWParams {
        beta1: run.optim.beta1,
        beta2: run.optim.beta2,
        eps: run.optim.eps,
        weight_decay: run.optim.weight_decay,
    };
    let (lr_fusion, lr_encoder) = (run.optim.lr_fusion, run.optim.lr_encoder);
    AdamW::new(&model.store, hp, move |name| {
        if name.starts_with("text.") || name.starts_with("vision.") {
            lr_encoder
        } else {
            lr_fusion
        }
    })
}

fn rng_seed_bytes(run: &RunConfig) -> Vec<u8> {
    ChaCha8Rng::seed_from_u64(run.seed).get_seed().to_vec()
}

/// Full training run: metrics CSV plus a final checkpoint (and periodic
/// checkpoints when configured) under `out_dir`.
pub fn train(run: &RunConfig, out_dir: &Path) -> Result<TrainOutput> {
    let dataset = generate_dataset(&run.task)?;
    if dataset.train.len() < run.batch_size {
        return Err(Error::Contract(format!(
            "train split has {} samples, batch size is {}",
            dataset.train.len(),
            run.batch_size
        )));
    }
    if run.batch_size < 2 {
        return Err(Error::Contract(
            "batch size must be at least 2 for in-batch ITM negatives".into(),
        ));
    }
    let model_cfg = run.model_config();
    let mut model = VlModel::new(model_cfg, run.seed)?;
    let mut opt = optimizer_for(&model, run);

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;

    let mut last = None;
    for step in 0..run.steps {
        let samples: Vec<&Sample> = (0..run.batch_size)
            .map(|j| {
                let idx = if run.fixed_batch {
                    j
                } else {
                    (step * run.batch_size + j) % dataset.train.len()
                };
                &dataset.train[idx]
            })
            .collect();
        let corruption_index = if run.fixed_batch { 0 } else { step as u64 };
        let m = batch_pass(&mut model, run, &samples, step, corruption_index)?;
        opt.step(&mut model.store)?;
        writeln!(
            metrics,
            "{},{},{},{},{},{}",
            m.step, m.loss_mlm, m.loss_itm, m.loss_vqa, m.loss_total, m.itm_acc
        )?;
        last = Some(m);
        if run.checkpoint_every > 0 && (step + 1) % run.checkpoint_every == 0 {
            let ckpt = Checkpoint::from_store(
                run.to_kv(),
                (step + 1) as u64,
                rng_seed_bytes(run),
                &model.store,
            );
            save_checkpoint(&out_dir.join(format!("step{}.ckpt", step + 1)), &ckpt)?;
        }
    }
    metrics.flush()?;

    let checkpoint_path = out_dir.join("final.ckpt");
    let ckpt = Checkpoint::from_store(
        run.to_kv(),
        run.steps as u64,
        rng_seed_bytes(run),
        &model.store,
    );
    save_checkpoint(&checkpoint_path, &ckpt)?;
    Ok(TrainOutput {
        metrics_path,
        checkpoint_path,
        last,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Mlm,
    Itm,
    Vqa,
}

impl EvalTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlm" => Ok(EvalTask::Mlm),
            "itm" => Ok(EvalTask::Itm),
            "vqa" => Ok(EvalTask::Vqa),
            other => Err(Error::Config(format!("unknown eval task {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalTask::Mlm => "mlm",
            EvalTask::Itm => "itm",
            EvalTask::Vqa => "vqa",
        }
    }
}

/// Accuracy of one task over a split. Deterministic: eval corruption is
/// derived from the dataset seed, and VQA/ITM argmax breaks ties toward
/// the lowest index.
pub fn evaluate(model: &VlModel, dataset: &Dataset, split: &str, task: EvalTask) -> Result<f64> {
    let samples = dataset.split(split)?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("split {split} is empty")));
    }
    if model.cfg.text_len != dataset.spec.text_len
        || model.cfg.patch_dim != dataset.spec.alphabet
        || model.cfg.patches() != dataset.spec.cells()
        || model.cfg.vocab_size != dataset.spec.vocab_size()
    {
        return Err(Error::Contract(
            "checkpoint model dimensions do not match the dataset spec".into(),
        ));
    }
    match task {
        EvalTask::Vqa => {
            let mut correct = 0usize;
            for s in samples {
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &s.tokens, &s.patch_values(model.cfg.patch_dim))?;
                let logits = model.vqa_head(&mut tape, out.pooled)?;
                if argmax(tape.value(logits)) == s.answer {
                    correct += 1;
                }
            }
            Ok(correct as f64 / samples.len() as f64)
        }
        EvalTask::Itm => {
            let texts: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
            let itm = objectives::apply_itm_corruption(
                &texts,
                objectives::DEFAULT_ITM_PROB,
                &mut derived_rng(dataset.spec.seed, "eval-itm", 0),
            )?;
            let mut correct = 0usize;
            for (j, s) in samples.iter().enumerate() {
                let mut tape = Tape::new();
                let out = model.forward(
                    &mut tape,
                    &itm.texts[j],
                    &s.patch_values(model.cfg.patch_dim),
                )?;
                let logits = model.itm_head(&mut tape, out.pooled)?;
                if argmax(tape.value(logits)) == itm.label(j) {
                    correct += 1;
                }
            }
            Ok(correct as f64 / samples.len() as f64)
        }
        EvalTask::Mlm => {
            let texts: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
            let mlm = objectives::apply_mlm_mask(
                &texts,
                objectives::DEFAULT_MLM_RATE,
                &mut derived_rng(dataset.spec.seed, "eval-mlm", 0),
            )?;
            let mut correct = 0usize;
            let mut total = 0usize;
            for (j, s) in samples.iter().enumerate() {
                let mut tape = Tape::new();
                let out = model.forward(
                    &mut tape,
                    &mlm.tokens[j],
                    &s.patch_values(model.cfg.patch_dim),
                )?;
                let logits = model.mlm_head(&mut tape, out.hidden)?;
                let v = tape.value(logits).to_vec();
                let vocab = model.cfg.vocab_size;
                for (t, lab) in mlm.labels[j].iter().enumerate() {
                    if let Some(orig) = lab {
                        let row = &v[(1 + t) * vocab..(2 + t) * vocab];
                        if argmax(row) == *orig {
                            correct += 1;
                        }
                        total += 1;
                    }
                }
            }
            Ok(correct as f64 / total as f64)
        }
    }
}

/// First index of the maximum (lowest-index tie-breaking).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
