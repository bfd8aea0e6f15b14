//! Analytical parameter and FLOP accounting.
//!
//! Counts come from closed-form shape formulas, never from instantiating
//! tensors, so they can be cross-checked against the model module. The FLOP
//! convention is matmuls only at 2 FLOPs per multiply-accumulate;
//! elementwise work (activations, norms, softmax) is excluded. All counts
//! are exact integers; rounding happens only at presentation.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::{FusionLayerConfig, LayerKind, Mechanism};
use crate::model::{ModelConfig, VlModel};

/// Exact counts split by mechanism.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MechSplit {
    pub attention: u64,
    pub position: u64,
    pub channel: u64,
    pub norm: u64,
    pub embed_head: u64,
}

impl MechSplit {
    pub fn total(&self) -> u64 {
        self.attention + self.position + self.channel + self.norm + self.embed_head
    }

    pub fn add(&mut self, other: &MechSplit) {
        self.attention += other.attention;
        self.position += other.position;
        self.channel += other.channel;
        self.norm += other.norm;
        self.embed_head += other.embed_head;
    }

    pub fn bucket(&mut self, mech: Mechanism) -> &mut u64 {
        match mech {
            Mechanism::Attention => &mut self.attention,
            Mechanism::PositionMixing => &mut self.position,
            Mechanism::ChannelFfn => &mut self.channel,
            Mechanism::Norm => &mut self.norm,
            Mechanism::EmbedHead => &mut self.embed_head,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModuleCost {
    pub module: String,
    pub params: MechSplit,
    pub flops: MechSplit,
}

/// Per-module and per-mechanism breakdown for one model configuration.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub modules: Vec<ModuleCost>,
    pub seq_len: usize,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.modules.iter().map(|m| m.params.total()).sum()
    }

    pub fn params_split(&self) -> MechSplit {
        let mut s = MechSplit::default();
        for m in &self.modules {
            s.add(&m.params);
        }
        s
    }

    pub fn attention_params(&self) -> u64 {
        self.params_split().attention
    }

    fn fusion_modules(&self) -> impl Iterator<Item = &ModuleCost> {
        self.modules.iter().filter(|m| m.module.starts_with("fusion."))
    }

    pub fn fusion_params(&self) -> u64 {
        self.fusion_modules().map(|m| m.params.total()).sum()
    }

    pub fn fusion_attention_params(&self) -> u64 {
        self.fusion_modules().map(|m| m.params.attention).sum()
    }

    pub fn fusion_flops(&self) -> u64 {
        self.fusion_modules().map(|m| m.flops.total()).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.modules.iter().map(|m| m.flops.total()).sum()
    }

    /// Attention fraction of the fusion parameter budget.
    pub fn fusion_attention_share(&self) -> f64 {
        let fusion = self.fusion_params();
        if fusion == 0 {
            return 0.0;
        }
        self.fusion_attention_params() as f64 / fusion as f64
    }
}

/// Exact per-layer parameter counts from shape formulas. Attention carries
/// no biases; FFN projections do; norms contribute two gamma/beta pairs.
pub fn layer_param_split(cfg: &FusionLayerConfig) -> MechSplit {
    let (d, n, h, h_pos, m, k) = (
        cfg.d as u64,
        cfg.n as u64,
        cfg.h as u64,
        cfg.h_pos as u64,
        cfg.m as u64,
        cfg.k as u64,
    );
    let mut s = MechSplit {
        channel: 2 * d * h + h + d,
        norm: 4 * d,
        ..Default::default()
    };
    match cfg.kind {
        LayerKind::Transformer => {
            s.attention = m * (2 * d * k + d * (d / m));
        }
        LayerKind::Mlp => {
            s.position = 2 * n * h_pos + n + h_pos;
        }
        LayerKind::MlpTinyAtt => {
            s.position = 2 * n * h_pos + n + h_pos;
            s.attention = 2 * d * k;
        }
        LayerKind::TinyAttOnly => {
            s.attention = 2 * d * k;
        }
        LayerKind::SquareMlp => {
            s.position = n * n;
        }
    }
    s
}

/// Per-layer forward FLOPs at sequence length `n`, from the shape algebra
/// of each matmul in the layer.
pub fn layer_flop_split(cfg: &FusionLayerConfig, n: usize) -> MechSplit {
    let (d, h, h_pos, m, k) = (
        cfg.d as u64,
        cfg.h as u64,
        cfg.h_pos as u64,
        cfg.m as u64,
        cfg.k as u64,
    );
    let n = n as u64;
    let mut s = MechSplit {
        channel: 4 * n * d * h,
        ..Default::default()
    };
    match cfg.kind {
        LayerKind::Transformer => {
            // per head: X Wq, X Wk (2ndk each), X Wv (2nd(d/m)),
            // Q K^T (2n^2 k), A V (2n^2 d/m); summed over m heads
            s.attention =
                2 * n * d * (2 * k * m + (d / m) * m) + 2 * n * n * (k * m) + 2 * n * n * d;
        }
        LayerKind::Mlp => {
            s.position = 4 * n * h_pos * d;
        }
        LayerKind::MlpTinyAtt => {
            s.position = 4 * n * h_pos * d;
            s.attention = 4 * n * d * k + 2 * n * n * k + 2 * n * n * d;
        }
        LayerKind::TinyAttOnly => {
            s.attention = 4 * n * d * k + 2 * n * n * k + 2 * n * n * d;
        }
        LayerKind::SquareMlp => {
            s.position = 2 * n * n * d;
        }
    }
    s
}

fn modules_for(cfg: &ModelConfig, n: usize, with_flops: bool) -> Vec<ModuleCost> {
    let d = cfg.d as u64;
    let cells = cfg.patches() as u64;
    let mut modules = Vec::new();

    let mut text = ModuleCost {
        module: "text".into(),
        params: MechSplit::default(),
        flops: MechSplit::default(),
    };
    text.params.embed_head = cfg.vocab_size as u64 * d;
    modules.push(text);

    let mut vision = ModuleCost {
        module: "vision".into(),
        params: MechSplit::default(),
        flops: MechSplit::default(),
    };
    vision.params.embed_head = cfg.patch_dim as u64 * d + d;
    if with_flops {
        vision.flops.embed_head = 2 * cells * cfg.patch_dim as u64 * d;
    }
    let block_cfg = cfg.vision_block_config();
    for _ in 0..cfg.vision_encoder.block_count() {
        vision.params.add(&layer_param_split(&block_cfg));
        if with_flops {
            vision.flops.add(&layer_flop_split(&block_cfg, cfg.patches()));
        }
    }
    modules.push(vision);

    let mut seq = ModuleCost {
        module: "sequence".into(),
        params: MechSplit::default(),
        flops: MechSplit::default(),
    };
    seq.params.embed_head = d + 3 * d; // cls vector + three type embeddings
    if cfg.position_embeddings {
        seq.params.embed_head += (cfg.text_len as u64 + cells) * d;
    }
    modules.push(seq);

    for (i, layer) in cfg.fusion.iter().enumerate() {
        modules.push(ModuleCost {
            module: format!("fusion.{i}"),
            params: layer_param_split(layer),
            flops: if with_flops {
                layer_flop_split(layer, n)
            } else {
                MechSplit::default()
            },
        });
    }

    let mut heads = ModuleCost {
        module: "heads".into(),
        params: MechSplit::default(),
        flops: MechSplit::default(),
    };
    let (vocab, answers) = (cfg.vocab_size as u64, cfg.answer_vocab_size as u64);
    if cfg.heads.mlm {
        heads.params.embed_head += d * vocab + vocab;
        if with_flops {
            heads.flops.embed_head += 2 * n as u64 * d * vocab;
        }
    }
    if cfg.heads.itm {
        heads.params.embed_head += 2 * d + 2;
        if with_flops {
            heads.flops.embed_head += 4 * d;
        }
    }
    if cfg.heads.vqa {
        heads.params.embed_head += d * d + d + d * answers + answers;
        if with_flops {
            heads.flops.embed_head += 2 * d * d + 2 * d * answers;
        }
    }
    if cfg.heads.nlvr2 {
        heads.params.embed_head += 2 * d * d + d + 2 * d + 2;
        if with_flops {
            heads.flops.embed_head += 4 * d * d + 4 * d;
        }
    }
    modules.push(heads);
    modules
}

/// Exact parameter counts for the whole model.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    Ok(CostReport {
        modules: modules_for(cfg, cfg.seq_len(), false),
        seq_len: cfg.seq_len(),
    })
}

/// Parameter counts plus forward-pass FLOPs with the fusion stack
/// evaluated at sequence length `n`.
pub fn estimate_flops(cfg: &ModelConfig, n: usize) -> Result<CostReport> {
    cfg.validate()?;
    Ok(CostReport {
        modules: modules_for(cfg, n, true),
        seq_len: n,
    })
}

pub fn format_millions(count: u64) -> String {
    format!("{:.1}", count as f64 / 1e6)
}

pub fn format_giga(count: u64) -> String {
    format!("{:.2}", count as f64 / 1e9)
}

/// "18.9M (25.0%)" style cell for an attention budget.
pub fn format_attention_cell(attention: u64, total: u64) -> String {
    let share = if total == 0 {
        0.0
    } else {
        100.0 * attention as f64 / total as f64
    };
    format!("{}M ({:.1}%)", format_millions(attention), share)
}

/// TSV summary, one fusion-scope row per labeled report.
pub fn emit_cost_table(rows: &[(String, usize, CostReport)]) -> String {
    let mut out = String::from("model\tlayers\tparams(M)\tattention-params(M, %)\tFLOPs(G)\n");
    for (label, layer_count, report) in rows {
        out.push_str(&format!(
            "{label}\t{layer_count}\t{}\t{}\t{}\n",
            format_millions(report.fusion_params()),
            format_attention_cell(report.fusion_attention_params(), report.fusion_params()),
            format_giga(report.fusion_flops()),
        ));
    }
    out
}

/// Per-module, per-mechanism breakdown with exact integers.
pub fn format_breakdown(report: &CostReport) -> String {
    let mut out = String::from(
        "module\tparams\tattention\tposition\tchannel\tnorm\tembed/head\tflops\n",
    );
    for m in &report.modules {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            m.module,
            m.params.total(),
            m.params.attention,
            m.params.position,
            m.params.channel,
            m.params.norm,
            m.params.embed_head,
            m.flops.total(),
        ));
    }
    let total = report.params_split();
    out.push_str(&format!(
        "total\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        total.total(),
        total.attention,
        total.position,
        total.channel,
        total.norm,
        total.embed_head,
        report.total_flops(),
    ));
    out.push_str(&format!(
        "fusion\t{}\t{}\t-\t-\t-\t-\t{}\n",
        report.fusion_params(),
        format_attention_cell(report.fusion_attention_params(), report.fusion_params()),
        report.fusion_flops(),
    ));
    out
}

/// Writes one CSV per position-FFN fusion layer with the P*Q interaction
/// matrix. Row and column order follow the assembled sequence: CLS, then
/// text positions, then vision positions. Values round-trip exactly.
pub fn export_mixing_matrices(
    model: &VlModel,
    layer_indices: Option<&[usize]>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let indices: Vec<usize> = match layer_indices {
        Some(idx) => idx.to_vec(),
        None => model
            .cfg
            .fusion
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.has_position_ffn())
            .map(|(i, _)| i)
            .collect(),
    };
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for i in indices {
        let layer = model
            .cfg
            .fusion
            .get(i)
            .ok_or_else(|| Error::Config(format!("no fusion layer {i}")))?;
        let matrix = crate::layers::mixing_matrix(&model.store, &format!("fusion.{i}"), layer)?;
        let path = out_dir.join(format!("mixing_layer{i}.csv"));
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for row in 0..layer.n {
            let cells: Vec<String> = (0..layer.n)
                .map(|col| format!("{}", matrix[row * layer.n + col]))
                .collect();
            writeln!(file, "{}", cells.join(","))?;
        }
        written.push(path);
    }
    Ok(written)
}
