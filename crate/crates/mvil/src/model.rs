//! The full backbone: toy encoders, sequence assembly, the fusion stack,
//! pooling, and task heads.

use crate::error::{Error, Result};
use crate::layers::{
    self, FusionLayerConfig, Init, LayerKind, Mechanism, ParamSpec,
};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::ParamStore;

/// Reserved token ids. Real tokens start at 2.
pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;

pub const ITM_REPLACED: usize = 0;
pub const ITM_MATCHED: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisionEncoderCfg {
    /// Patch linear projection only.
    PatchLinearOnly,
    /// Patch projection followed by this many position+channel mixer blocks.
    MixerBlocks(usize),
}

impl VisionEncoderCfg {
    pub fn block_count(&self) -> usize {
        match self {
            VisionEncoderCfg::PatchLinearOnly => 0,
            VisionEncoderCfg::MixerBlocks(c) => *c,
        }
    }

    pub fn as_str(&self) -> String {
        match self {
            VisionEncoderCfg::PatchLinearOnly => "linear".into(),
            VisionEncoderCfg::MixerBlocks(c) => format!("mixer:{c}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(VisionEncoderCfg::PatchLinearOnly);
        }
        if let Some(c) = s.strip_prefix("mixer:") {
            let c = c
                .parse()
                .map_err(|_| Error::Config(format!("bad mixer block count in {s}")))?;
            return Ok(VisionEncoderCfg::MixerBlocks(c));
        }
        Err(Error::Config(format!("unknown vision encoder {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Cls,
    Average,
}

impl Pooling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pooling::Cls => "cls",
            Pooling::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(Pooling::Cls),
            "average" | "avg" => Ok(Pooling::Average),
            other => Err(Error::Config(format!("unknown pooling mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSet {
    pub mlm: bool,
    pub itm: bool,
    pub vqa: bool,
    pub nlvr2: bool,
}

impl HeadSet {
    pub fn pretraining() -> Self {
        HeadSet {
            mlm: true,
            itm: true,
            vqa: true,
            nlvr2: false,
        }
    }

    pub fn as_str(&self) -> String {
        let mut parts = Vec::new();
        if self.mlm {
            parts.push("mlm");
        }
        if self.itm {
            parts.push("itm");
        }
        if self.vqa {
            parts.push("vqa");
        }
        if self.nlvr2 {
            parts.push("nlvr2");
        }
        parts.join(",")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut set = HeadSet {
            mlm: false,
            itm: false,
            vqa: false,
            nlvr2: false,
        };
        for part in s.split(',').filter(|p| !p.is_empty()) {
            match part.trim() {
                "mlm" => set.mlm = true,
                "itm" => set.itm = true,
                "vqa" => set.vqa = true,
                "nlvr2" => set.nlvr2 = true,
                other => return Err(Error::Config(format!("unknown head {other}"))),
            }
        }
        Ok(set)
    }
}

/// Full model description. The sequence budget is
/// n = 1 (CLS) + text_len + rows*cols, shared by every fusion layer.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub answer_vocab_size: usize,
    pub text_len: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub patch_dim: usize,
    pub d: usize,
    pub vision_encoder: VisionEncoderCfg,
    pub fusion: Vec<FusionLayerConfig>,
    pub pooling: Pooling,
    pub heads: HeadSet,
    pub position_embeddings: bool,
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn seq_len(&self) -> usize {
        1 + self.text_len + self.patches()
    }

    /// Mixer blocks in the vision encoder are position+channel layers over
    /// the patch positions, with the usual 4x channel expansion and square
    /// position mixing.
    pub fn vision_block_config(&self) -> FusionLayerConfig {
        FusionLayerConfig {
            kind: LayerKind::Mlp,
            d: self.d,
            n: self.patches(),
            h: 4 * self.d,
            h_pos: self.patches(),
            m: 1,
            k: 1,
            norm_placement: layers::NormPlacement::PostNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must be at least 2 (pad and mask ids are reserved)".into(),
            ));
        }
        for (label, v) in [
            ("text_len", self.text_len),
            ("patch_rows", self.patch_rows),
            ("patch_cols", self.patch_cols),
            ("patch_dim", self.patch_dim),
            ("d", self.d),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{label} must be positive")));
            }
        }
        if self.heads.vqa && self.answer_vocab_size < 2 {
            return Err(Error::Config(
                "answer_vocab_size must be at least 2 for the vqa head".into(),
            ));
        }
        let n = self.seq_len();
        for (i, layer) in self.fusion.iter().enumerate() {
            layer.validate()?;
            if layer.n != n {
                return Err(Error::Config(format!(
                    "fusion layer {i} has n={} but the model sequence budget is {n}",
                    layer.n
                )));
            }
            if layer.d != self.d {
                return Err(Error::Config(format!(
                    "fusion layer {i} has d={} but the model width is {}",
                    layer.d, self.d
                )));
            }
        }
        Ok(())
    }

    /// Every parameter tensor of the model, in registration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        use Mechanism::EmbedHead;
        let w = Init::Normal(0.02);
        let d = self.d;
        let mut specs = Vec::new();
        let mut p = |name: &str, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec {
                name: name.to_string(),
                shape,
                mechanism: EmbedHead,
                init,
            });
        };
        p("cls", vec![1, d], w);
        p("type.cls", vec![d], w);
        p("type.text", vec![d], w);
        p("type.vision", vec![d], w);
        if self.position_embeddings {
            p("pos", vec![self.text_len + self.patches(), d], w);
        }
        p("text.embed", vec![self.vocab_size, d], w);
        p("vision.proj.w", vec![self.patch_dim, d], w);
        p("vision.proj.b", vec![d], Init::Zero);
        let vision_cfg = self.vision_block_config();
        for b in 0..self.vision_encoder.block_count() {
            specs.extend(layers::layer_param_specs(
                &vision_cfg,
                &format!("vision.block{b}"),
            ));
        }
        for (i, layer) in self.fusion.iter().enumerate() {
            specs.extend(layers::layer_param_specs(layer, &format!("fusion.{i}")));
        }
        let mut p = |name: &str, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec {
                name: name.to_string(),
                shape,
                mechanism: EmbedHead,
                init,
            });
        };
        if self.heads.mlm {
            p("head.mlm.w", vec![d, self.vocab_size], w);
            p("head.mlm.b", vec![self.vocab_size], Init::Zero);
        }
        if self.heads.itm {
            p("head.itm.w", vec![d, 2], w);
            p("head.itm.b", vec![2], Init::Zero);
        }
        if self.heads.vqa {
            p("head.vqa.w1", vec![d, d], w);
            p("head.vqa.b1", vec![d], Init::Zero);
            p("head.vqa.w2", vec![d, self.answer_vocab_size], w);
            p("head.vqa.b2", vec![self.answer_vocab_size], Init::Zero);
        }
        if self.heads.nlvr2 {
            p("head.nlvr2.w1", vec![2 * d, d], w);
            p("head.nlvr2.b1", vec![d], Init::Zero);
            p("head.nlvr2.w2", vec![d, 2], w);
            p("head.nlvr2.b2", vec![2], Init::Zero);
        }
        specs
    }

    /// Sequence positions occupied by text tokens.
    pub fn text_range(&self) -> std::ops::Range<usize> {
        1..1 + self.text_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionTag {
    Cls,
    Text,
    Vision,
    Pad,
}

/// Assembled fusion input: feature node plus per-position bookkeeping.
/// Position 0 is CLS; padded positions carry zero feature rows.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub features: NodeId,
    pub tags: Vec<PositionTag>,
    pub pad: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub seq: SequenceState,
    pub hidden: NodeId,
    pub pooled: NodeId,
}

#[derive(Debug)]
pub struct VlModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl VlModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = layers::build_param_store(&cfg.param_specs(), seed)?;
        Ok(VlModel { cfg, store })
    }

    /// Embedding lookup plus the learned text-type embedding per row.
    pub fn encode_text(&self, tape: &mut Tape, token_ids: &[usize]) -> Result<NodeId> {
        if token_ids.len() != self.cfg.text_len {
            return Err(Error::Contract(format!(
                "expected {} token ids, got {}",
                self.cfg.text_len,
                token_ids.len()
            )));
        }
        for &id in token_ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::Vocab {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        let table = tape.param_by_name(&self.store, "text.embed")?;
        let rows = tape.lookup(table, token_ids)?;
        let ty = tape.param_by_name(&self.store, "type.text")?;
        tape.add_bias_row(rows, ty)
    }

    /// Patch projection, optional mixer blocks over the patch positions,
    /// then the learned vision-type embedding per row.
    pub fn encode_vision(&self, tape: &mut Tape, patches: &[f64]) -> Result<NodeId> {
        let cells = self.cfg.patches();
        if patches.len() != cells * self.cfg.patch_dim {
            return Err(Error::Contract(format!(
                "expected {}x{} patch values, got {}",
                cells,
                self.cfg.patch_dim,
                patches.len()
            )));
        }
        let x = tape.input(vec![cells, self.cfg.patch_dim], patches.to_vec())?;
        let w = tape.param_by_name(&self.store, "vision.proj.w")?;
        let b = tape.param_by_name(&self.store, "vision.proj.b")?;
        let proj = tape.matmul(x, w)?;
        let mut feats = tape.add_bias_row(proj, b)?;
        let block_cfg = self.cfg.vision_block_config();
        for bi in 0..self.cfg.vision_encoder.block_count() {
            feats = layers::layer_forward(
                tape,
                &self.store,
                &format!("vision.block{bi}"),
                &block_cfg,
                feats,
            )?;
        }
        let ty = tape.param_by_name(&self.store, "type.vision")?;
        tape.add_bias_row(feats, ty)
    }

    /// CLS + text + vision concatenation with position embeddings added to
    /// text and vision rows; padded positions are zeroed on entry.
    pub fn assemble_sequence(
        &self,
        tape: &mut Tape,
        text_feats: NodeId,
        vision_feats: NodeId,
        token_ids: &[usize],
    ) -> Result<SequenceState> {
        let d = self.cfg.d;
        let cells = self.cfg.patches();
        if tape.shape(text_feats) != [self.cfg.text_len, d] {
            return Err(Error::Contract(format!(
                "text features shape {:?}, expected [{}, {d}]",
                tape.shape(text_feats),
                self.cfg.text_len
            )));
        }
        if tape.shape(vision_feats) != [cells, d] {
            return Err(Error::Contract(format!(
                "vision features shape {:?}, expected [{cells}, {d}]",
                tape.shape(vision_feats)
            )));
        }
        let cls = tape.param_by_name(&self.store, "cls")?;
        let ty_cls = tape.param_by_name(&self.store, "type.cls")?;
        let cls_row = tape.add_bias_row(cls, ty_cls)?;

        let (text_feats, vision_feats) = if self.cfg.position_embeddings {
            let pos = tape.param_by_name(&self.store, "pos")?;
            let text_pos = tape.slice_rows(pos, 0, self.cfg.text_len)?;
            let vision_pos = tape.slice_rows(pos, self.cfg.text_len, cells)?;
            (
                tape.add(text_feats, text_pos)?,
                tape.add(vision_feats, vision_pos)?,
            )
        } else {
            (text_feats, vision_feats)
        };

        let seq = tape.concat_rows(&[cls_row, text_feats, vision_feats])?;

        let mut tags = vec![PositionTag::Cls];
        let mut scales = vec![1.0];
        for &id in token_ids {
            if id == PAD_ID {
                tags.push(PositionTag::Pad);
                scales.push(0.0);
            } else {
                tags.push(PositionTag::Text);
                scales.push(1.0);
            }
        }
        for _ in 0..cells {
            tags.push(PositionTag::Vision);
            scales.push(1.0);
        }
        let features = tape.row_scale(seq, scales)?;
        let pad = tags.iter().map(|t| *t == PositionTag::Pad).collect();
        Ok(SequenceState {
            features,
            tags,
            pad,
        })
    }

    /// Sequential application of the fusion stack.
    pub fn fusion_forward(&self, tape: &mut Tape, seq: &SequenceState) -> Result<NodeId> {
        let mut hidden = seq.features;
        for (i, layer) in self.cfg.fusion.iter().enumerate() {
            let shape = tape.shape(hidden);
            if shape != [layer.n, layer.d] {
                return Err(Error::Contract(format!(
                    "fusion layer {i} expects [{}, {}], got {:?}",
                    layer.n, layer.d, shape
                )));
            }
            hidden = layers::layer_forward(tape, &self.store, &format!("fusion.{i}"), layer, hidden)?;
        }
        Ok(hidden)
    }

    /// Cls: row 0. Average: mean over non-pad rows.
    pub fn pool(&self, tape: &mut Tape, hidden: NodeId, seq: &SequenceState) -> Result<NodeId> {
        match self.cfg.pooling {
            Pooling::Cls => tape.slice_rows(hidden, 0, 1),
            Pooling::Average => {
                let live = seq.pad.iter().filter(|&&p| !p).count();
                let w = 1.0 / live as f64;
                let weights = seq.pad.iter().map(|&p| if p { 0.0 } else { w }).collect();
                tape.row_weighted_sum(hidden, weights)
            }
        }
    }

    pub fn mlm_head(&self, tape: &mut Tape, hidden: NodeId) -> Result<NodeId> {
        let w = tape.param_by_name(&self.store, "head.mlm.w")?;
        let b = tape.param_by_name(&self.store, "head.mlm.b")?;
        let logits = tape.matmul(hidden, w)?;
        tape.add_bias_row(logits, b)
    }

    pub fn itm_head(&self, tape: &mut Tape, pooled: NodeId) -> Result<NodeId> {
        let w = tape.param_by_name(&self.store, "head.itm.w")?;
        let b = tape.param_by_name(&self.store, "head.itm.b")?;
        let logits = tape.matmul(pooled, w)?;
        tape.add_bias_row(logits, b)
    }

    pub fn vqa_head(&self, tape: &mut Tape, pooled: NodeId) -> Result<NodeId> {
        let w1 = tape.param_by_name(&self.store, "head.vqa.w1")?;
        let b1 = tape.param_by_name(&self.store, "head.vqa.b1")?;
        let w2 = tape.param_by_name(&self.store, "head.vqa.w2")?;
        let b2 = tape.param_by_name(&self.store, "head.vqa.b2")?;
        let h = tape.matmul(pooled, w1)?;
        let h = tape.add_bias_row(h, b1)?;
        let h = tape.gelu(h);
        let logits = tape.matmul(h, w2)?;
        tape.add_bias_row(logits, b2)
    }

    /// Two pooled representations from two (question, image) passes,
    /// concatenated through a two-layer head.
    pub fn nlvr2_pair_head(
        &self,
        tape: &mut Tape,
        pooled_a: NodeId,
        pooled_b: NodeId,
    ) -> Result<NodeId> {
        let w1 = tape.param_by_name(&self.store, "head.nlvr2.w1")?;
        let b1 = tape.param_by_name(&self.store, "head.nlvr2.b1")?;
        let w2 = tape.param_by_name(&self.store, "head.nlvr2.w2")?;
        let b2 = tape.param_by_name(&self.store, "head.nlvr2.b2")?;
        let cat = tape.concat_cols(&[pooled_a, pooled_b])?;
        let h = tape.matmul(cat, w1)?;
        let h = tape.add_bias_row(h, b1)?;
        let h = tape.gelu(h);
        let logits = tape.matmul(h, w2)?;
        tape.add_bias_row(logits, b2)
    }

    /// Encoders, assembly, fusion stack, and pooling in one pass.
    pub fn forward(&self, tape: &mut Tape, token_ids: &[usize], patches: &[f64]) -> Result<ForwardOut> {
        let text = self.encode_text(tape, token_ids)?;
        let vision = self.encode_vision(tape, patches)?;
        let seq = self.assemble_sequence(tape, text, vision, token_ids)?;
        let hidden = self.fusion_forward(tape, &seq)?;
        let pooled = self.pool(tape, hidden, &seq)?;
        Ok(ForwardOut {
            seq,
            hidden,
            pooled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NormPlacement;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny_config(kind: LayerKind, layers_count: usize) -> ModelConfig {
        let text_len = 4;
        let (rows, cols) = (2, 2);
        let n = 1 + text_len + rows * cols;
        let d = 8;
        let layer = FusionLayerConfig {
            kind,
            d,
            n,
            h: 16,
            h_pos: n,
            m: 2,
            k: 3,
            norm_placement: NormPlacement::PostNorm,
        };
        ModelConfig {
            vocab_size: 12,
            answer_vocab_size: 5,
            text_len,
            patch_rows: rows,
            patch_cols: cols,
            patch_dim: 6,
            d,
            vision_encoder: VisionEncoderCfg::MixerBlocks(1),
            fusion: vec![layer; layers_count],
            pooling: Pooling::Cls,
            heads: HeadSet {
                mlm: true,
                itm: true,
                vqa: true,
                nlvr2: true,
            },
            position_embeddings: true,
        }
    }

    fn patches_for(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.patches() * cfg.patch_dim)
            .map(|_| rng.gen::<f64>())
            .collect()
    }

    #[test]
    fn encode_text_repeated_id_rows_match() {
        let model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 1).unwrap();
        let mut tape = Tape::new();
        let feats = model.encode_text(&mut tape, &[3, 5, 3, 7]).unwrap();
        let d = model.cfg.d;
        let v = tape.value(feats);
        assert_eq!(&v[0..d], &v[2 * d..3 * d]);
    }

    #[test]
    fn encode_text_rejects_out_of_range_id() {
        let model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 1).unwrap();
        let mut tape = Tape::new();
        let err = model.encode_text(&mut tape, &[3, 99, 0, 0]).unwrap_err();
        assert!(matches!(err, Error::Vocab { id: 99, .. }));
    }

    #[test]
    fn pad_rows_are_zero_after_assembly() {
        let model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 2).unwrap();
        let mut tape = Tape::new();
        let tokens = [3, PAD_ID, 5, PAD_ID];
        let patches = patches_for(&model.cfg, 3);
        let out = model.forward(&mut tape, &tokens, &patches).unwrap();
        let d = model.cfg.d;
        let feats = tape.value(out.seq.features);
        for (i, tag) in out.seq.tags.iter().enumerate() {
            if *tag == PositionTag::Pad {
                assert!(feats[i * d..(i + 1) * d].iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(out.seq.tags[0], PositionTag::Cls);
        assert_eq!(out.seq.tags[1], PositionTag::Text);
        assert_eq!(out.seq.tags[2], PositionTag::Pad);
    }

    #[test]
    fn embedding_grad_counts_token_occurrences() {
        // loss = sum of text features: the gradient of an embedding row is
        // its occurrence count (pads excluded by assembly zeroing is not in
        // play here since we bypass assembly).
        let model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 4).unwrap();
        let mut model = model;
        let mut tape = Tape::new();
        let feats = model.encode_text(&mut tape, &[3, 3, 5, 3]).unwrap();
        let loss = tape.sum(feats);
        model.store.zero_grads();
        tape.backward(loss, &mut model.store).unwrap();
        let d = model.cfg.d;
        let grad = model.store.by_name("text.embed").unwrap().grad.clone().unwrap();
        for j in 0..d {
            assert_eq!(grad[3 * d + j], 3.0);
            assert_eq!(grad[5 * d + j], 1.0);
            assert_eq!(grad[7 * d + j], 0.0);
        }
    }

    #[test]
    fn vision_zero_projection_gives_type_embedding_rows() {
        let mut model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 5).unwrap();
        model.cfg.vision_encoder = VisionEncoderCfg::PatchLinearOnly;
        model.store.by_name_mut("vision.proj.w").unwrap().values.fill(0.0);
        let mut tape = Tape::new();
        let patches = patches_for(&model.cfg, 6);
        let feats = model.encode_vision(&mut tape, &patches).unwrap();
        let ty = model.store.by_name("type.vision").unwrap().values.clone();
        let d = model.cfg.d;
        for row in 0..model.cfg.patches() {
            assert_eq!(&tape.value(feats)[row * d..(row + 1) * d], &ty[..]);
        }
    }

    #[test]
    fn mixer_zero_blocks_equals_linear_bitwise() {
        let cfg = tiny_config(LayerKind::Mlp, 1);
        let mut a = cfg.clone();
        a.vision_encoder = VisionEncoderCfg::MixerBlocks(0);
        let mut b = cfg;
        b.vision_encoder = VisionEncoderCfg::PatchLinearOnly;
        let ma = VlModel::new(a, 7).unwrap();
        let mut mb = VlModel::new(b, 8).unwrap();
        for name in ["vision.proj.w", "vision.proj.b", "type.vision"] {
            let v = ma.store.by_name(name).unwrap().values.clone();
            mb.store.by_name_mut(name).unwrap().values = v;
        }
        let patches = patches_for(&ma.cfg, 9);
        let mut ta = Tape::new();
        let fa = ma.encode_vision(&mut ta, &patches).unwrap();
        let mut tb = Tape::new();
        let fb = mb.encode_vision(&mut tb, &patches).unwrap();
        assert_eq!(ta.value(fa), tb.value(fb));
    }

    #[test]
    fn vision_shape_contract() {
        let mut cfg = tiny_config(LayerKind::Mlp, 0);
        cfg.patch_rows = 4;
        cfg.patch_cols = 4;
        cfg.patch_dim = 12;
        cfg.d = 16;
        cfg.fusion.clear();
        cfg.vision_encoder = VisionEncoderCfg::PatchLinearOnly;
        let model = VlModel::new(cfg, 10).unwrap();
        let mut tape = Tape::new();
        let patches = patches_for(&model.cfg, 11);
        let feats = model.encode_vision(&mut tape, &patches).unwrap();
        assert_eq!(tape.shape(feats), &[16, 16]);
    }

    #[test]
    fn assembly_partitions_positions() {
        let model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 12).unwrap();
        let mut tape = Tape::new();
        let tokens = [4, 5, PAD_ID, PAD_ID];
        let patches = patches_for(&model.cfg, 13);
        let out = model.forward(&mut tape, &tokens, &patches).unwrap();
        let n = model.cfg.seq_len();
        assert_eq!(out.seq.tags.len(), n);
        assert_eq!(out.seq.pad.len(), n);
        let cls = out.seq.tags.iter().filter(|t| **t == PositionTag::Cls).count();
        let text = out.seq.tags.iter().filter(|t| **t == PositionTag::Text).count();
        let pad = out.seq.tags.iter().filter(|t| **t == PositionTag::Pad).count();
        let vis = out.seq.tags.iter().filter(|t| **t == PositionTag::Vision).count();
        assert_eq!(cls, 1);
        assert_eq!(text + pad, model.cfg.text_len);
        assert_eq!(vis, model.cfg.patches());
        assert_eq!(cls + text + pad + vis, n);
    }

    #[test]
    fn empty_fusion_stack_is_identity() {
        let mut cfg = tiny_config(LayerKind::Mlp, 0);
        cfg.fusion.clear();
        let model = VlModel::new(cfg, 14).unwrap();
        let mut tape = Tape::new();
        let patches = patches_for(&model.cfg, 15);
        let out = model.forward(&mut tape, &[3, 4, 5, 6], &patches).unwrap();
        assert_eq!(tape.value(out.hidden), tape.value(out.seq.features));
    }

    #[test]
    fn stack_equals_manual_composition() {
        let model = VlModel::new(tiny_config(LayerKind::MlpTinyAtt, 2), 16).unwrap();
        // force both layers to share parameters by copying layer 0 into 1
        let mut model = model;
        let names: Vec<String> = model
            .store
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("fusion.0."))
            .collect();
        for n in names {
            let v = model.store.by_name(&n).unwrap().values.clone();
            let dst = n.replace("fusion.0.", "fusion.1.");
            model.store.by_name_mut(&dst).unwrap().values = v;
        }
        let patches = patches_for(&model.cfg, 17);
        let tokens = [3, 4, 5, 6];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &tokens, &patches).unwrap();

        // manual: apply layer 0 twice
        let mut tape2 = Tape::new();
        let text = model.encode_text(&mut tape2, &tokens).unwrap();
        let vision = model.encode_vision(&mut tape2, &patches).unwrap();
        let seq = model
            .assemble_sequence(&mut tape2, text, vision, &tokens)
            .unwrap();
        let l0 = &model.cfg.fusion[0];
        let h1 = layers::layer_forward(&mut tape2, &model.store, "fusion.0", l0, seq.features)
            .unwrap();
        let h2 = layers::layer_forward(&mut tape2, &model.store, "fusion.0", l0, h1).unwrap();
        assert_eq!(tape.value(out.hidden), tape2.value(h2));
    }

    #[test]
    fn mixed_stack_preserves_shape() {
        let mut cfg = tiny_config(LayerKind::Mlp, 3);
        cfg.fusion[1].kind = LayerKind::Transformer;
        cfg.fusion[2].kind = LayerKind::MlpTinyAtt;
        let model = VlModel::new(cfg, 18).unwrap();
        let mut tape = Tape::new();
        let patches = patches_for(&model.cfg, 19);
        let out = model.forward(&mut tape, &[3, 4, 5, 6], &patches).unwrap();
        assert_eq!(
            tape.shape(out.hidden),
            &[model.cfg.seq_len(), model.cfg.d]
        );
    }

    #[test]
    fn pooling_modes() {
        // all rows equal -> both modes agree; average excludes pads
        let mut cfg = tiny_config(LayerKind::Mlp, 0);
        cfg.fusion.clear();
        cfg.d = 1;
        cfg.text_len = 3;
        cfg.patch_rows = 1;
        cfg.patch_cols = 1;
        let model = VlModel::new(cfg, 20).unwrap();
        let mut tape = Tape::new();
        let hidden = tape
            .input(vec![5, 1], vec![1.0, 1.0, 2.0, 3.0, 0.0])
            .unwrap();
        let seq = SequenceState {
            features: hidden,
            tags: vec![
                PositionTag::Cls,
                PositionTag::Text,
                PositionTag::Text,
                PositionTag::Text,
                PositionTag::Pad,
            ],
            pad: vec![false, false, false, false, true],
        };
        // Cls mode returns row 0 exactly
        let pooled = model.pool(&mut tape, hidden, &seq).unwrap();
        assert_eq!(tape.value(pooled), &[1.0]);
        // Average over [1,1,2,3] excluding the pad row
        let mut avg_model = model;
        avg_model.cfg.pooling = Pooling::Average;
        let pooled = avg_model.pool(&mut tape, hidden, &seq).unwrap();
        assert_abs_diff_eq!(tape.value(pooled)[0], 1.75, epsilon = 1e-15);

        // hand case from a 3-row [1],[2],[3] + pad
        let hidden = tape
            .input(vec![4, 1], vec![1.0, 2.0, 3.0, 9.0])
            .unwrap();
        let seq = SequenceState {
            features: hidden,
            tags: vec![
                PositionTag::Text,
                PositionTag::Text,
                PositionTag::Text,
                PositionTag::Pad,
            ],
            pad: vec![false, false, false, true],
        };
        let pooled = avg_model.pool(&mut tape, hidden, &seq).unwrap();
        assert_abs_diff_eq!(tape.value(pooled)[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_weight_heads_give_zero_logits() {
        let mut model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 21).unwrap();
        for name in ["head.mlm.w", "head.mlm.b", "head.itm.w", "head.itm.b"] {
            model.store.by_name_mut(name).unwrap().values.fill(0.0);
        }
        let mut tape = Tape::new();
        let patches = patches_for(&model.cfg, 22);
        let out = model.forward(&mut tape, &[3, 4, 5, 6], &patches).unwrap();
        let mlm = model.mlm_head(&mut tape, out.hidden).unwrap();
        let itm = model.itm_head(&mut tape, out.pooled).unwrap();
        assert!(tape.value(mlm).iter().all(|&v| v == 0.0));
        assert!(tape.value(itm).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_logit_shapes() {
        let mut cfg = tiny_config(LayerKind::Mlp, 1);
        cfg.vocab_size = 11;
        cfg.answer_vocab_size = 5;
        cfg.text_len = 2;
        // n = 1 + 2 + 4 = 7
        for l in &mut cfg.fusion {
            l.n = 7;
            l.h_pos = 7;
        }
        let model = VlModel::new(cfg, 23).unwrap();
        let mut tape = Tape::new();
        let patches = patches_for(&model.cfg, 24);
        let out = model.forward(&mut tape, &[3, 4], &patches).unwrap();
        let mlm = model.mlm_head(&mut tape, out.hidden).unwrap();
        let vqa = model.vqa_head(&mut tape, out.pooled).unwrap();
        assert_eq!(tape.shape(mlm), &[7, 11]);
        assert_eq!(tape.shape(vqa), &[1, 5]);
    }

    #[test]
    fn vqa_head_scalar_hand_case() {
        // d=1, answers=2: logits = gelu(p*w1 + b1)*w2 + b2 per answer.
        let mut cfg = tiny_config(LayerKind::Mlp, 0);
        cfg.fusion.clear();
        cfg.d = 1;
        cfg.answer_vocab_size = 2;
        let mut model = VlModel::new(cfg, 25).unwrap();
        for (name, vals) in [
            ("head.vqa.w1", vec![2.0]),
            ("head.vqa.b1", vec![0.5]),
            ("head.vqa.w2", vec![1.0, -1.0]),
            ("head.vqa.b2", vec![0.25, 0.75]),
        ] {
            model.store.by_name_mut(name).unwrap().values = vals;
        }
        let mut tape = Tape::new();
        let pooled = tape.input(vec![1, 1], vec![0.3]).unwrap();
        let logits = model.vqa_head(&mut tape, pooled).unwrap();
        let h = crate::tensor::kernels::gelu_scalar(0.3 * 2.0 + 0.5);
        assert_abs_diff_eq!(tape.value(logits)[0], h + 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(tape.value(logits)[1], -h + 0.75, epsilon = 1e-14);
    }

    #[test]
    fn nlvr2_symmetric_weights_ignore_image_order() {
        let mut model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 26).unwrap();
        // make the two d-wide halves of w1 identical
        let d = model.cfg.d;
        let w1 = model.store.by_name("head.nlvr2.w1").unwrap().values.clone();
        let mut sym = w1.clone();
        for i in 0..d {
            for j in 0..d {
                sym[(d + i) * d + j] = w1[i * d + j];
            }
        }
        model.store.by_name_mut("head.nlvr2.w1").unwrap().values = sym;
        let mut tape = Tape::new();
        let pa = tape.input(vec![1, d], (0..d).map(|i| i as f64 * 0.1).collect()).unwrap();
        let pb = tape.input(vec![1, d], (0..d).map(|i| 1.0 - i as f64 * 0.05).collect()).unwrap();
        let ab = model.nlvr2_pair_head(&mut tape, pa, pb).unwrap();
        let ba = model.nlvr2_pair_head(&mut tape, pb, pa).unwrap();
        for (x, y) in tape.value(ab).iter().zip(tape.value(ba)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_eq!(tape.shape(ab), &[1, 2]);
    }

    #[test]
    fn nlvr2_zero_weights_zero_logits() {
        let mut model = VlModel::new(tiny_config(LayerKind::Mlp, 1), 27).unwrap();
        for name in ["head.nlvr2.w1", "head.nlvr2.b1", "head.nlvr2.w2", "head.nlvr2.b2"] {
            model.store.by_name_mut(name).unwrap().values.fill(0.0);
        }
        let d = model.cfg.d;
        let mut tape = Tape::new();
        let pa = tape.input(vec![1, d], vec![0.5; d]).unwrap();
        let pb = tape.input(vec![1, d], vec![-0.5; d]).unwrap();
        let logits = model.nlvr2_pair_head(&mut tape, pa, pb).unwrap();
        assert_eq!(tape.value(logits), &[0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let model = VlModel::new(tiny_config(LayerKind::MlpTinyAtt, 2), 42).unwrap();
            let mut tape = Tape::new();
            let patches = patches_for(&model.cfg, 43);
            let out = model.forward(&mut tape, &[3, 4, 5, PAD_ID], &patches).unwrap();
            tape.value(out.hidden).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn padding_invariance_of_losses() {
        // Changing the PAD embedding row (pad feature content before
        // zeroing) leaves pooled output and hidden states unchanged.
        let run = |pad_fill: f64| {
            let mut model = VlModel::new(tiny_config(LayerKind::MlpTinyAtt, 1), 44).unwrap();
            let d = model.cfg.d;
            model.store.by_name_mut("text.embed").unwrap().values[PAD_ID * d..(PAD_ID + 1) * d]
                .fill(pad_fill);
            let mut tape = Tape::new();
            let patches = patches_for(&model.cfg, 45);
            let out = model
                .forward(&mut tape, &[3, PAD_ID, 5, PAD_ID], &patches)
                .unwrap();
            (
                tape.value(out.hidden).to_vec(),
                tape.value(out.pooled).to_vec(),
            )
        };
        assert_eq!(run(0.0), run(123.456));
    }
}
