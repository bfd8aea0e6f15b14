//! Pre-training objectives: MLM masking, ITM text replacement, and the
//! three losses. Corruption procedures are pure functions of the input and
//! the rng stream, so derived seeds make data preparation reproducible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ITM_MATCHED, ITM_REPLACED, MASK_ID, PAD_ID};
use crate::tensor::tape::{NodeId, Tape};

pub const DEFAULT_MLM_RATE: f64 = 0.15;
pub const DEFAULT_ITM_PROB: f64 = 0.5;

/// Masked token sequences with reconstruction labels; labels are Some
/// exactly where corruption was applied.
#[derive(Debug, Clone)]
pub struct MlmBatch {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<Vec<Option<usize>>>,
    pub rate: f64,
}

/// Each non-pad token is masked independently at `rate`, with at least one
/// masked position per sequence. A zero-mask draw is resampled a bounded
/// number of times, then one non-pad position is forced.
pub fn apply_mlm_mask(
    sequences: &[Vec<usize>],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<MlmBatch> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Contract(format!("mask rate {rate} outside (0, 1]")));
    }
    let mut tokens = Vec::with_capacity(sequences.len());
    let mut labels = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let non_pad: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] != PAD_ID).collect();
        if non_pad.is_empty() {
            return Err(Error::Contract(
                "apply_mlm_mask: sequence has no non-pad token".into(),
            ));
        }
        let mut selected = vec![false; seq.len()];
        let mut any = false;
        for _attempt in 0..16 {
            for &i in &non_pad {
                selected[i] = rng.gen::<f64>() < rate;
                any |= selected[i];
            }
            if any {
                break;
            }
        }
        if !any {
            selected[non_pad[rng.gen_range(0..non_pad.len())]] = true;
        }
        let mut masked = seq.clone();
        let mut lab = vec![None; seq.len()];
        for (i, &sel) in selected.iter().enumerate() {
            if sel {
                lab[i] = Some(seq[i]);
                masked[i] = MASK_ID;
            }
        }
        tokens.push(masked);
        labels.push(lab);
    }
    Ok(MlmBatch {
        tokens,
        labels,
        rate,
    })
}

/// ITM corruption over a batch of texts: each pair's text is replaced, with
/// probability `p`, by the original text of a different uniformly chosen
/// pair. A pair is never assigned its own text as a replacement.
#[derive(Debug, Clone)]
pub struct ItmBatch {
    pub texts: Vec<Vec<usize>>,
    /// true where the text was swapped in from another pair
    pub replaced: Vec<bool>,
    /// index the text came from (self when not replaced)
    pub source: Vec<usize>,
}

impl ItmBatch {
    pub fn label(&self, i: usize) -> usize {
        if self.replaced[i] {
            ITM_REPLACED
        } else {
            ITM_MATCHED
        }
    }
}

pub fn apply_itm_corruption(
    texts: &[Vec<usize>],
    p: f64,
    rng: &mut impl Rng,
) -> Result<ItmBatch> {
    if texts.len() < 2 {
        return Err(Error::Contract(
            "apply_itm_corruption requires a batch of at least 2 pairs".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!(
            "replacement probability {p} outside [0, 1]"
        )));
    }
    let mut out = Vec::with_capacity(texts.len());
    let mut replaced = Vec::with_capacity(texts.len());
    let mut source = Vec::with_capacity(texts.len());
    for i in 0..texts.len() {
        if rng.gen::<f64>() < p {
            let mut j = rng.gen_range(0..texts.len() - 1);
            if j >= i {
                j += 1;
            }
            out.push(texts[j].clone());
            replaced.push(true);
            source.push(j);
        } else {
            out.push(texts[i].clone());
            replaced.push(false);
            source.push(i);
        }
    }
    Ok(ItmBatch {
        texts: out,
        replaced,
        source,
    })
}

/// Softmax cross-entropy over masked positions only (labels aligned with
/// the logit rows; None rows are ignored).
pub fn mlm_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[Option<usize>],
) -> Result<NodeId> {
    tape.cross_entropy_rows(logits, labels).map_err(|e| match e {
        Error::Contract(_) => Error::Contract("mlm_loss: no masked position to score".into()),
        other => other,
    })
}

/// Binary softmax cross-entropy on the matched/replaced logits.
pub fn itm_loss(tape: &mut Tape, logits: NodeId, label: usize) -> Result<NodeId> {
    tape.cross_entropy_rows(logits, &[Some(label)])
}

/// Elementwise sigmoid binary cross-entropy summed over the answer
/// vocabulary; targets are multi-hot scores in [0, 1].
pub fn vqa_loss(tape: &mut Tape, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
    for &t in targets {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!(
                "vqa target {t} outside [0, 1]"
            )));
        }
    }
    tape.bce_with_logits(logits, targets)
}

/// One-hot target vector for an answer id.
pub fn one_hot(answer: usize, classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    t[answer] = 1.0;
    t
}
