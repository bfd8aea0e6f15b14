//! The fusion layer family: channel-wise FFN, position-wise FFN, multi-head
//! attention, one-head tiny attention, square mixing, and the residual/norm
//! compositions that assemble them into five layer kinds.
//!
//! Layer parameters live in a [`ParamStore`] under a per-layer prefix; every
//! parameter shape is a function of [`FusionLayerConfig`] alone, which is
//! what makes the analytical cost accounting exact.

use crate::error::{Error, Result};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::ParamStore;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which budget a parameter belongs to in cost reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Attention,
    PositionMixing,
    ChannelFfn,
    Norm,
    EmbedHead,
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zero,
    One,
}

/// Declarative description of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub mechanism: Mechanism,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, mechanism: Mechanism, init: Init) -> Self {
        ParamSpec {
            name,
            shape,
            mechanism,
            init,
        }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Transformer,
    Mlp,
    MlpTinyAtt,
    TinyAttOnly,
    SquareMlp,
}

impl LayerKind {
    pub const ALL: [LayerKind; 5] = [
        LayerKind::Transformer,
        LayerKind::Mlp,
        LayerKind::MlpTinyAtt,
        LayerKind::TinyAttOnly,
        LayerKind::SquareMlp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Transformer => "transformer",
            LayerKind::Mlp => "mlp",
            LayerKind::MlpTinyAtt => "mlp_tiny_att",
            LayerKind::TinyAttOnly => "tiny_att_only",
            LayerKind::SquareMlp => "square_mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transformer" => Ok(LayerKind::Transformer),
            "mlp" => Ok(LayerKind::Mlp),
            "mlp_tiny_att" | "mlptinyatt" => Ok(LayerKind::MlpTinyAtt),
            "tiny_att_only" | "tinyattonly" => Ok(LayerKind::TinyAttOnly),
            "square_mlp" | "squaremlp" => Ok(LayerKind::SquareMlp),
            other => Err(Error::Config(format!("unknown layer kind {other}"))),
        }
    }

    pub fn has_position_ffn(&self) -> bool {
        matches!(self, LayerKind::Mlp | LayerKind::MlpTinyAtt)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    PostNorm,
    PreNorm,
}

impl NormPlacement {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormPlacement::PostNorm => "post",
            NormPlacement::PreNorm => "pre",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "post" | "postnorm" => Ok(NormPlacement::PostNorm),
            "pre" | "prenorm" => Ok(NormPlacement::PreNorm),
            other => Err(Error::Config(format!("unknown norm placement {other}"))),
        }
    }
}

/// Declarative description of one fusion layer.
///
/// `d` is the channel width, `n` the fixed sequence length, `h` the
/// channel-FFN hidden width, `h_pos` the position-FFN hidden width, `m`
/// the head count (transformer only) and `k` the query/key width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionLayerConfig {
    pub kind: LayerKind,
    pub d: usize,
    pub n: usize,
    pub h: usize,
    pub h_pos: usize,
    pub m: usize,
    pub k: usize,
    pub norm_placement: NormPlacement,
}

impl FusionLayerConfig {
    /// Defaults: channel hidden 4d, position hidden n, 4 heads with
    /// k = d/m. All of these are knobs.
    pub fn new(kind: LayerKind, d: usize, n: usize) -> Self {
        let m = if d % 4 == 0 { 4 } else { 1 };
        FusionLayerConfig {
            kind,
            d,
            n,
            h: 4 * d,
            h_pos: n,
            m,
            k: d / m,
            norm_placement: NormPlacement::PostNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (label, v) in [
            ("d", self.d),
            ("n", self.n),
            ("h", self.h),
            ("h_pos", self.h_pos),
            ("m", self.m),
            ("k", self.k),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("layer dimension {label} must be positive")));
            }
        }
        if self.kind == LayerKind::Transformer && self.d % self.m != 0 {
            return Err(Error::Config(format!(
                "transformer layer requires d divisible by m, got d={} m={}",
                self.d, self.m
            )));
        }
        Ok(())
    }

    /// Per-head value width; head outputs concatenate back to d.
    pub fn head_width(&self) -> usize {
        self.d / self.m
    }
}

/// Parameter tensors of one layer under `prefix`. Attention projections
/// carry no biases; FFN projections do.
pub fn layer_param_specs(cfg: &FusionLayerConfig, prefix: &str) -> Vec<ParamSpec> {
    use Mechanism::*;
    let w = Init::Normal(0.02);
    let mut specs = Vec::new();
    let mut p = |name: String, shape: Vec<usize>, mech: Mechanism, init: Init| {
        specs.push(ParamSpec::new(name, shape, mech, init));
    };
    match cfg.kind {
        LayerKind::Transformer => {
            for j in 0..cfg.m {
                p(format!("{prefix}.attn{j}.wq"), vec![cfg.d, cfg.k], Attention, w);
                p(format!("{prefix}.attn{j}.wk"), vec![cfg.d, cfg.k], Attention, w);
                p(
                    format!("{prefix}.attn{j}.wv"),
                    vec![cfg.d, cfg.head_width()],
                    Attention,
                    w,
                );
            }
        }
        LayerKind::Mlp => {
            position_ffn_specs(cfg, prefix, &mut p);
        }
        LayerKind::MlpTinyAtt => {
            position_ffn_specs(cfg, prefix, &mut p);
            p(format!("{prefix}.tiny.wq"), vec![cfg.d, cfg.k], Attention, w);
            p(format!("{prefix}.tiny.wk"), vec![cfg.d, cfg.k], Attention, w);
        }
        LayerKind::TinyAttOnly => {
            p(format!("{prefix}.tiny.wq"), vec![cfg.d, cfg.k], Attention, w);
            p(format!("{prefix}.tiny.wk"), vec![cfg.d, cfg.k], Attention, w);
        }
        LayerKind::SquareMlp => {
            p(
                format!("{prefix}.square.s"),
                vec![cfg.n, cfg.n],
                PositionMixing,
                w,
            );
        }
    }
    p(format!("{prefix}.ch.u"), vec![cfg.d, cfg.h], ChannelFfn, w);
    p(format!("{prefix}.ch.ub"), vec![cfg.h], ChannelFfn, Init::Zero);
    p(format!("{prefix}.ch.v"), vec![cfg.h, cfg.d], ChannelFfn, w);
    p(format!("{prefix}.ch.vb"), vec![cfg.d], ChannelFfn, Init::Zero);
    for norm in ["norm1", "norm2"] {
        p(format!("{prefix}.{norm}.g"), vec![cfg.d], Norm, Init::One);
        p(format!("{prefix}.{norm}.b"), vec![cfg.d], Norm, Init::Zero);
    }
    specs
}

fn position_ffn_specs(
    cfg: &FusionLayerConfig,
    prefix: &str,
    p: &mut impl FnMut(String, Vec<usize>, Mechanism, Init),
) {
    use Mechanism::PositionMixing;
    let w = Init::Normal(0.02);
    p(format!("{prefix}.pos.q"), vec![cfg.h_pos, cfg.n], PositionMixing, w);
    p(format!("{prefix}.pos.qb"), vec![cfg.h_pos], PositionMixing, Init::Zero);
    p(format!("{prefix}.pos.p"), vec![cfg.n, cfg.h_pos], PositionMixing, w);
    p(format!("{prefix}.pos.pb"), vec![cfg.n], PositionMixing, Init::Zero);
}

/// Test hooks for the algebraic checks: swap the activation for identity
/// and/or bypass the norms. Defaults leave the layer as specified.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerToggles {
    pub identity_activation: bool,
    pub skip_norm: bool,
}

fn activate(tape: &mut Tape, x: NodeId, toggles: LayerToggles) -> NodeId {
    if toggles.identity_activation {
        x
    } else {
        tape.gelu(x)
    }
}

/// Y = sigma(X U + ub) V + vb, refining each position independently.
pub fn channel_ffn(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    channel_ffn_with(tape, store, prefix, x, LayerToggles::default())
}

pub fn channel_ffn_with(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    toggles: LayerToggles,
) -> Result<NodeId> {
    let u = tape.param_by_name(store, &format!("{prefix}.ch.u"))?;
    let ub = tape.param_by_name(store, &format!("{prefix}.ch.ub"))?;
    let v = tape.param_by_name(store, &format!("{prefix}.ch.v"))?;
    let vb = tape.param_by_name(store, &format!("{prefix}.ch.vb"))?;
    let xu = tape.matmul(x, u)?;
    let xu = tape.add_bias_row(xu, ub)?;
    let act = activate(tape, xu, toggles);
    let y = tape.matmul(act, v)?;
    tape.add_bias_row(y, vb)
}

/// Y = P sigma(Q X + qb) + pb, mixing across positions identically per
/// channel. The sequence length must match the configured n.
pub fn position_ffn(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
    x: NodeId,
) -> Result<NodeId> {
    position_ffn_with(tape, store, prefix, cfg, x, LayerToggles::default())
}

pub fn position_ffn_with(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
    x: NodeId,
    toggles: LayerToggles,
) -> Result<NodeId> {
    let rows = tape.shape(x)[0];
    if rows != cfg.n {
        return Err(Error::Contract(format!(
            "position_ffn: sequence length {rows} does not match configured n={}",
            cfg.n
        )));
    }
    let q = tape.param_by_name(store, &format!("{prefix}.pos.q"))?;
    let qb = tape.param_by_name(store, &format!("{prefix}.pos.qb"))?;
    let p = tape.param_by_name(store, &format!("{prefix}.pos.p"))?;
    let pb = tape.param_by_name(store, &format!("{prefix}.pos.pb"))?;
    let qx = tape.matmul(q, x)?;
    let qx = tape.add_bias_col(qx, qb)?;
    let act = activate(tape, qx, toggles);
    let y = tape.matmul(p, act)?;
    tape.add_bias_col(y, pb)
}

/// Per head: softmax(Q K^T / sqrt(k)) V; outputs concatenate back to
/// width d. No output projection and no projection biases.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
    x: NodeId,
) -> Result<NodeId> {
    Ok(multi_head_attention_with_probs(tape, store, prefix, cfg, x)?.0)
}

/// Like [`multi_head_attention`] but also returns each head's row-stochastic
/// attention matrix node.
pub fn multi_head_attention_with_probs(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    if cfg.d % cfg.m != 0 {
        return Err(Error::Config(format!(
            "multi_head_attention requires d divisible by m, got d={} m={}",
            cfg.d, cfg.m
        )));
    }
    let scale = 1.0 / (cfg.k as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.m);
    let mut probs = Vec::with_capacity(cfg.m);
    for j in 0..cfg.m {
        let wq = tape.param_by_name(store, &format!("{prefix}.attn{j}.wq"))?;
        let wk = tape.param_by_name(store, &format!("{prefix}.attn{j}.wk"))?;
        let wv = tape.param_by_name(store, &format!("{prefix}.attn{j}.wv"))?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        probs.push(attn);
        heads.push(tape.matmul(attn, v)?);
    }
    Ok((tape.concat_cols(&heads)?, probs))
}

/// Y = softmax(X Wq (X Wk)^T / sqrt(k)) X: the attention matrix applies
/// directly to the input, so every output row is a convex combination of
/// input rows.
pub fn tiny_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
    x: NodeId,
) -> Result<NodeId> {
    let attn = tiny_attention_matrix(tape, store, prefix, cfg, x)?;
    tape.matmul(attn, x)
}

/// The [n, n] row-stochastic matrix softmax(X Wq (X Wk)^T / sqrt(k)).
pub fn tiny_attention_matrix(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
    x: NodeId,
) -> Result<NodeId> {
    let wq = tape.param_by_name(store, &format!("{prefix}.tiny.wq"))?;
    let wk = tape.param_by_name(store, &format!("{prefix}.tiny.wk"))?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (cfg.k as f64).sqrt());
    tape.softmax_rows(scores)
}

/// Y = sigma(S X) with a single square mixing matrix.
pub fn square_mixing(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    square_mixing_with(tape, store, prefix, x, LayerToggles::default())
}

pub fn square_mixing_with(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    toggles: LayerToggles,
) -> Result<NodeId> {
    let s = tape.param_by_name(store, &format!("{prefix}.square.s"))?;
    let sx = tape.matmul(s, x)?;
    Ok(activate(tape, sx, toggles))
}

/// Full layer: mixer sub-block with residual and norm, then channel FFN
/// with residual and norm. PostNorm normalizes the summation; PreNorm
/// normalizes each sub-block input instead.
pub fn layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
    x: NodeId,
) -> Result<NodeId> {
    layer_forward_with(tape, store, prefix, cfg, x, LayerToggles::default())
}

pub fn layer_forward_with(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
    x: NodeId,
    toggles: LayerToggles,
) -> Result<NodeId> {
    cfg.validate()?;
    let norm = |tape: &mut Tape, which: &str, v: NodeId| -> Result<NodeId> {
        if toggles.skip_norm {
            return Ok(v);
        }
        let g = tape.param_by_name(store, &format!("{prefix}.{which}.g"))?;
        let b = tape.param_by_name(store, &format!("{prefix}.{which}.b"))?;
        tape.layer_norm(v, g, b, LAYER_NORM_EPS)
    };

    let mixer = |tape: &mut Tape, input: NodeId| -> Result<Vec<NodeId>> {
        Ok(match cfg.kind {
            LayerKind::Transformer => {
                vec![multi_head_attention(tape, store, prefix, cfg, input)?]
            }
            LayerKind::Mlp => vec![position_ffn_with(tape, store, prefix, cfg, input, toggles)?],
            LayerKind::MlpTinyAtt => vec![
                position_ffn_with(tape, store, prefix, cfg, input, toggles)?,
                tiny_attention(tape, store, prefix, cfg, input)?,
            ],
            LayerKind::TinyAttOnly => vec![tiny_attention(tape, store, prefix, cfg, input)?],
            LayerKind::SquareMlp => {
                vec![square_mixing_with(tape, store, prefix, input, toggles)?]
            }
        })
    };

    let x1 = match cfg.norm_placement {
        NormPlacement::PostNorm => {
            // normalized summation of the input and the mixer outputs
            let parts = mixer(tape, x)?;
            let mut acc = x;
            for p in parts {
                acc = tape.add(acc, p)?;
            }
            norm(tape, "norm1", acc)?
        }
        NormPlacement::PreNorm => {
            let normed = norm(tape, "norm1", x)?;
            let parts = mixer(tape, normed)?;
            let mut acc = x;
            for p in parts {
                acc = tape.add(acc, p)?;
            }
            acc
        }
    };

    match cfg.norm_placement {
        NormPlacement::PostNorm => {
            let ff = channel_ffn_with(tape, store, prefix, x1, toggles)?;
            let sum = tape.add(x1, ff)?;
            norm(tape, "norm2", sum)
        }
        NormPlacement::PreNorm => {
            let normed = norm(tape, "norm2", x1)?;
            let ff = channel_ffn_with(tape, store, prefix, normed, toggles)?;
            tape.add(x1, ff)
        }
    }
}

/// Instantiates parameters for `specs` in order, drawing normal weights
/// from a ChaCha stream so initialization is a pure function of the seed.
pub fn build_param_store(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let values = match spec.init {
            Init::Zero => vec![0.0; numel],
            Init::One => vec![1.0; numel],
            Init::Normal(std) => (0..numel).map(|_| std * normal_draw(&mut rng)).collect(),
        };
        store.add(
            spec.name.clone(),
            crate::tensor::Tensor::from_values(spec.shape.clone(), values)?.with_grad(),
        )?;
    }
    Ok(store)
}

/// One standard normal draw via Box-Muller; kept in-crate so initialization
/// stays bit-stable across dependency upgrades.
fn normal_draw(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// The input-independent position-interaction matrix P*Q of a
/// position-FFN layer, as an [n, n] row-major buffer.
pub fn mixing_matrix(
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionLayerConfig,
) -> Result<Vec<f64>> {
    if !cfg.kind.has_position_ffn() {
        return Err(Error::UnsupportedLayer(format!(
            "{} layer has no position-wise FFN, so no P*Q mixing matrix",
            cfg.kind
        )));
    }
    let p = store.by_name(&format!("{prefix}.pos.p"))?;
    let q = store.by_name(&format!("{prefix}.pos.q"))?;
    let mut out = vec![0.0; cfg.n * cfg.n];
    crate::tensor::kernels::matmul(&p.values, &q.values, cfg.n, cfg.h_pos, cfg.n, &mut out);
    Ok(out)
}
