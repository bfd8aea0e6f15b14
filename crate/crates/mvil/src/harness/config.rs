//! Run configuration: a flat key=value text format with presets. Files
//! list overrides over the documented defaults; `to_kv` always writes the
//! fully resolved configuration, which is also what checkpoints echo.

use crate::error::{Error, Result};
use crate::harness::data::SyntheticTaskSpec;
use crate::layers::{FusionLayerConfig, LayerKind, NormPlacement};
use crate::model::{HeadSet, ModelConfig, Pooling, VisionEncoderCfg};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr_fusion: f64,
    pub lr_encoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_fusion: 5e-5,
            lr_encoder: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub mlm: f64,
    pub itm: f64,
    pub vqa: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            mlm: 1.0,
            itm: 1.0,
            vqa: 1.0,
        }
    }
}

/// Everything a training run needs. Two runs with an identical RunConfig
/// produce identical metric logs and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub vision_encoder: VisionEncoderCfg,
    pub pooling: Pooling,
    pub heads: HeadSet,
    pub position_embeddings: bool,
    pub fusion_kind: LayerKind,
    pub fusion_layers: usize,
    pub fusion_h: Option<usize>,
    pub fusion_h_pos: Option<usize>,
    pub fusion_m: usize,
    pub fusion_k: usize,
    pub fusion_norm: NormPlacement,
    pub task: SyntheticTaskSpec,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: ObjectiveWeights,
    pub mlm_rate: f64,
    pub itm_prob: f64,
    pub checkpoint_every: usize,
    pub fixed_batch: bool,
    pub out_dir: Option<String>,
}

impl RunConfig {
    /// Desk-scale default: d=32, 2 MLP fusion layers, one vision mixer
    /// block, all three pre-training heads.
    pub fn toy() -> Self {
        RunConfig {
            d: 32,
            vision_encoder: VisionEncoderCfg::MixerBlocks(1),
            pooling: Pooling::Cls,
            heads: HeadSet::pretraining(),
            position_embeddings: true,
            fusion_kind: LayerKind::Mlp,
            fusion_layers: 2,
            fusion_h: None,
            fusion_h_pos: None,
            fusion_m: 4,
            fusion_k: 8,
            fusion_norm: NormPlacement::PostNorm,
            task: SyntheticTaskSpec {
                alphabet: 6,
                grid_rows: 2,
                grid_cols: 2,
                text_len: 6,
                answer_vocab: 6,
                train: 256,
                val: 64,
                test: 64,
                seed: 7,
            },
            optim: OptimConfig::default(),
            steps: 200,
            batch_size: 8,
            seed: 42,
            weights: ObjectiveWeights::default(),
            mlm_rate: crate::objectives::DEFAULT_MLM_RATE,
            itm_prob: crate::objectives::DEFAULT_ITM_PROB,
            checkpoint_every: 0,
            fixed_batch: false,
            out_dir: None,
        }
    }

    /// Reference-scale dims for the accountant: d=1024, 6 layers, 16 heads
    /// of width 64, channel hidden 4608, position hidden 1024, and an
    /// 11x11 patch grid with 20 text tokens (n = 142).
    pub fn paper_scale() -> Self {
        let mut cfg = Self::toy();
        cfg.d = 1024;
        cfg.vision_encoder = VisionEncoderCfg::PatchLinearOnly;
        cfg.fusion_kind = LayerKind::Transformer;
        cfg.fusion_layers = 6;
        cfg.fusion_h = Some(4608);
        cfg.fusion_h_pos = Some(1024);
        cfg.fusion_m = 16;
        cfg.fusion_k = 64;
        cfg.task = SyntheticTaskSpec {
            alphabet: 16,
            grid_rows: 11,
            grid_cols: 11,
            text_len: 20,
            answer_vocab: 16,
            train: 64,
            val: 16,
            test: 16,
            seed: 7,
        };
        cfg
    }

    pub fn seq_len(&self) -> usize {
        1 + self.task.text_len + self.task.cells()
    }

    pub fn fusion_layer_config(&self) -> FusionLayerConfig {
        let n = self.seq_len();
        FusionLayerConfig {
            kind: self.fusion_kind,
            d: self.d,
            n,
            h: self.fusion_h.unwrap_or(4 * self.d),
            h_pos: self.fusion_h_pos.unwrap_or(n),
            m: self.fusion_m,
            k: self.fusion_k,
            norm_placement: self.fusion_norm,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.fusion_kind, self.fusion_layers)
    }

    /// Same model with a different fusion kind or depth (for sweeps and
    /// family tables).
    pub fn model_config_for(&self, kind: LayerKind, layers: usize) -> ModelConfig {
        let layer = FusionLayerConfig {
            kind,
            ..self.fusion_layer_config()
        };
        ModelConfig {
            vocab_size: self.task.vocab_size(),
            answer_vocab_size: self.task.answer_vocab,
            text_len: self.task.text_len,
            patch_rows: self.task.grid_rows,
            patch_cols: self.task.grid_cols,
            patch_dim: self.task.alphabet,
            d: self.d,
            vision_encoder: self.vision_encoder,
            fusion: vec![layer; layers],
            pooling: self.pooling,
            heads: self.heads,
            position_embeddings: self.position_embeddings,
        }
    }

    /// Fully resolved key=value text, one key per line, fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let lc = self.fusion_layer_config();
        let mut w = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        w("model.d", self.d.to_string());
        w("model.vision_encoder", self.vision_encoder.as_str());
        w("model.pooling", self.pooling.as_str().into());
        w("model.heads", self.heads.as_str());
        w("model.position_embeddings", self.position_embeddings.to_string());
        w("fusion.kind", self.fusion_kind.as_str().into());
        w("fusion.layers", self.fusion_layers.to_string());
        w("fusion.h", lc.h.to_string());
        w("fusion.h_pos", lc.h_pos.to_string());
        w("fusion.heads", self.fusion_m.to_string());
        w("fusion.k", self.fusion_k.to_string());
        w("fusion.norm", self.fusion_norm.as_str().into());
        w("task.alphabet", self.task.alphabet.to_string());
        w("task.grid_rows", self.task.grid_rows.to_string());
        w("task.grid_cols", self.task.grid_cols.to_string());
        w("task.text_len", self.task.text_len.to_string());
        w("task.answer_vocab", self.task.answer_vocab.to_string());
        w("task.train", self.task.train.to_string());
        w("task.val", self.task.val.to_string());
        w("task.test", self.task.test.to_string());
        w("task.seed", self.task.seed.to_string());
        w("train.steps", self.steps.to_string());
        w("train.batch_size", self.batch_size.to_string());
        w("train.seed", self.seed.to_string());
        w("train.lr_fusion", self.optim.lr_fusion.to_string());
        w("train.lr_encoder", self.optim.lr_encoder.to_string());
        w("train.beta1", self.optim.beta1.to_string());
        w("train.beta2", self.optim.beta2.to_string());
        w("train.eps", self.optim.eps.to_string());
        w("train.weight_decay", self.optim.weight_decay.to_string());
        w("train.w_mlm", self.weights.mlm.to_string());
        w("train.w_itm", self.weights.itm.to_string());
        w("train.w_vqa", self.weights.vqa.to_string());
        w("train.mlm_rate", self.mlm_rate.to_string());
        w("train.itm_prob", self.itm_prob.to_string());
        w("train.checkpoint_every", self.checkpoint_every.to_string());
        w("train.fixed_batch", self.fixed_batch.to_string());
        if let Some(dir) = &self.out_dir {
            w("out", dir.clone());
        }
        out
    }

    /// Applies one `key=value` override.
    pub fn apply_set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
        }
        match key {
            "model.d" => self.d = num(key, value)?,
            "model.vision_encoder" => self.vision_encoder = VisionEncoderCfg::parse(value)?,
            "model.pooling" => self.pooling = Pooling::parse(value)?,
            "model.heads" => self.heads = HeadSet::parse(value)?,
            "model.position_embeddings" => self.position_embeddings = num(key, value)?,
            "fusion.kind" => self.fusion_kind = LayerKind::parse(value)?,
            "fusion.layers" => self.fusion_layers = num(key, value)?,
            "fusion.h" => self.fusion_h = Some(num(key, value)?),
            "fusion.h_pos" => self.fusion_h_pos = Some(num(key, value)?),
            "fusion.heads" => self.fusion_m = num(key, value)?,
            "fusion.k" => self.fusion_k = num(key, value)?,
            "fusion.norm" => self.fusion_norm = NormPlacement::parse(value)?,
            "task.alphabet" => self.task.alphabet = num(key, value)?,
            "task.grid_rows" => self.task.grid_rows = num(key, value)?,
            "task.grid_cols" => self.task.grid_cols = num(key, value)?,
            "task.text_len" => self.task.text_len = num(key, value)?,
            "task.answer_vocab" => self.task.answer_vocab = num(key, value)?,
            "task.train" => self.task.train = num(key, value)?,
            "task.val" => self.task.val = num(key, value)?,
            "task.test" => self.task.test = num(key, value)?,
            "task.seed" => self.task.seed = num(key, value)?,
            "train.steps" => self.steps = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            "train.lr_fusion" => self.optim.lr_fusion = num(key, value)?,
            "train.lr_encoder" => self.optim.lr_encoder = num(key, value)?,
            "train.beta1" => self.optim.beta1 = num(key, value)?,
            "train.beta2" => self.optim.beta2 = num(key, value)?,
            "train.eps" => self.optim.eps = num(key, value)?,
            "train.weight_decay" => self.optim.weight_decay = num(key, value)?,
            "train.w_mlm" => self.weights.mlm = num(key, value)?,
            "train.w_itm" => self.weights.itm = num(key, value)?,
            "train.w_vqa" => self.weights.vqa = num(key, value)?,
            "train.mlm_rate" => self.mlm_rate = num(key, value)?,
            "train.itm_prob" => self.itm_prob = num(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "train.fixed_batch" => self.fixed_batch = num(key, value)?,
            "out" => self.out_dir = Some(value.to_string()),
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Parses key=value lines over the toy defaults. `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            cfg.apply_set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_kv(&text)
    }
}
