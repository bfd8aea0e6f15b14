//! Central finite-difference checking of reverse-mode gradients.
//!
//! The numeric side only ever calls the forward path, so it stays an
//! independent oracle for the backward rules. Checks run at double
//! precision with step 1e-5 against a 1e-4 relative tolerance.

use crate::error::Result;
use crate::layers::{
    self, FusionLayerConfig, Init, LayerKind, Mechanism, NormPlacement, ParamSpec,
};
use crate::model::{HeadSet, ModelConfig, Pooling, VisionEncoderCfg, VlModel};
use crate::objectives;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::ParamStore;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub entries: usize,
}

impl CheckOutcome {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_TOL
    }
}

/// Compares tape gradients of a scalar loss against central finite
/// differences over every requires_grad parameter entry.
pub fn finite_diff_check(
    store: &mut ParamStore,
    build_loss: &dyn Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
) -> Result<CheckOutcome> {
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, store)?;
        Ok(tape.scalar(loss))
    };

    store.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, store)?;
        tape.backward(loss, store)?;
    }
    let analytic: Vec<Option<Vec<f64>>> = (0..store.len())
        .map(|id| {
            let t = store.get(id);
            t.requires_grad.then(|| t.grad.clone().unwrap())
        })
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut entries = 0;
    for id in 0..store.len() {
        let Some(grad) = &analytic[id] else {
            continue;
        };
        for e in 0..grad.len() {
            let orig = store.get(id).values[e];
            store.get_mut(id).values[e] = orig + FD_STEP;
            let up = eval(store)?;
            store.get_mut(id).values[e] = orig - FD_STEP;
            let down = eval(store)?;
            store.get_mut(id).values[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            max_rel_err = max_rel_err.max(rel);
            entries += 1;
        }
    }
    Ok(CheckOutcome {
        max_rel_err,
        entries,
    })
}

fn covector(len: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

fn input_spec(name: &str, shape: Vec<usize>) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape,
        mechanism: Mechanism::EmbedHead,
        init: Init::Normal(0.8),
    }
}

fn small_layer(kind: LayerKind) -> FusionLayerConfig {
    FusionLayerConfig {
        kind,
        d: 6,
        n: 4,
        h: 5,
        h_pos: 3,
        m: 2,
        k: 2,
        norm_placement: NormPlacement::PostNorm,
    }
}

fn layer_env(cfg: &FusionLayerConfig, seed: u64) -> Result<ParamStore> {
    let mut specs = layers::layer_param_specs(cfg, "l");
    specs.push(input_spec("x", vec![cfg.n, cfg.d]));
    layers::build_param_store(&specs, seed)
}

fn check_on_layer(
    cfg: FusionLayerConfig,
    seed: u64,
    forward: impl Fn(&mut Tape, &ParamStore, NodeId) -> Result<NodeId>,
) -> Result<CheckOutcome> {
    let mut store = layer_env(&cfg, seed)?;
    let out_len = cfg.n * cfg.d;
    let weights = covector(out_len, seed);
    finite_diff_check(&mut store, &|tape, store| {
        let x = tape.param_by_name(store, "x")?;
        let y = forward(tape, store, x)?;
        tape.weighted_sum(y, weights.clone())
    })
}

pub fn check_primitives(seed: u64) -> Result<CheckOutcome> {
    // matmul, gelu, softmax, layer norm composed into one scalar
    let specs = vec![
        input_spec("a", vec![3, 4]),
        input_spec("b", vec![4, 5]),
        input_spec("g", vec![5]),
        input_spec("be", vec![5]),
    ];
    let mut store = layers::build_param_store(&specs, seed)?;
    let weights = covector(15, seed);
    finite_diff_check(&mut store, &|tape, store| {
        let a = tape.param_by_name(store, "a")?;
        let b = tape.param_by_name(store, "b")?;
        let g = tape.param_by_name(store, "g")?;
        let be = tape.param_by_name(store, "be")?;
        let y = tape.matmul(a, b)?;
        let y = tape.gelu(y);
        let y = tape.layer_norm(y, g, be, 1e-5)?;
        let y = tape.softmax_rows(y)?;
        tape.weighted_sum(y, weights.clone())
    })
}

pub fn check_channel_ffn(seed: u64) -> Result<CheckOutcome> {
    check_on_layer(small_layer(LayerKind::Mlp), seed, |tape, store, x| {
        layers::channel_ffn(tape, store, "l", x)
    })
}

pub fn check_position_ffn(seed: u64) -> Result<CheckOutcome> {
    let cfg = small_layer(LayerKind::Mlp);
    check_on_layer(cfg, seed, move |tape, store, x| {
        layers::position_ffn(tape, store, "l", &cfg, x)
    })
}

pub fn check_multi_head_attention(seed: u64) -> Result<CheckOutcome> {
    let cfg = small_layer(LayerKind::Transformer);
    check_on_layer(cfg, seed, move |tape, store, x| {
        layers::multi_head_attention(tape, store, "l", &cfg, x)
    })
}

pub fn check_tiny_attention(seed: u64) -> Result<CheckOutcome> {
    let cfg = small_layer(LayerKind::TinyAttOnly);
    check_on_layer(cfg, seed, move |tape, store, x| {
        layers::tiny_attention(tape, store, "l", &cfg, x)
    })
}

pub fn check_square_mixing(seed: u64) -> Result<CheckOutcome> {
    check_on_layer(small_layer(LayerKind::SquareMlp), seed, |tape, store, x| {
        layers::square_mixing(tape, store, "l", x)
    })
}

pub fn check_layer(kind: LayerKind, norm: NormPlacement, seed: u64) -> Result<CheckOutcome> {
    let cfg = FusionLayerConfig {
        norm_placement: norm,
        ..small_layer(kind)
    };
    check_on_layer(cfg, seed, move |tape, store, x| {
        layers::layer_forward(tape, store, "l", &cfg, x)
    })
}

fn tiny_model(kind: LayerKind) -> ModelConfig {
    let text_len = 3;
    let n = 1 + text_len + 4;
    ModelConfig {
        vocab_size: 10,
        answer_vocab_size: 3,
        text_len,
        patch_rows: 2,
        patch_cols: 2,
        patch_dim: 5,
        d: 6,
        vision_encoder: VisionEncoderCfg::MixerBlocks(1),
        fusion: vec![FusionLayerConfig {
            kind,
            d: 6,
            n,
            h: 5,
            h_pos: 4,
            m: 2,
            k: 2,
            norm_placement: NormPlacement::PostNorm,
        }],
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

fn model_env(kind: LayerKind, seed: u64) -> Result<(VlModel, Vec<usize>, Vec<f64>)> {
    use rand::{Rng, SeedableRng};
    let model = VlModel::new(tiny_model(kind), seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let tokens: Vec<usize> = (0..model.cfg.text_len)
        .map(|_| rng.gen_range(2..model.cfg.vocab_size))
        .collect();
    let patches: Vec<f64> = (0..model.cfg.patches() * model.cfg.patch_dim)
        .map(|_| rng.gen::<f64>())
        .collect();
    Ok((model, tokens, patches))
}

pub fn check_mlm_head_loss(seed: u64) -> Result<CheckOutcome> {
    let (mut model, tokens, patches) = model_env(LayerKind::Mlp, seed)?;
    let mut labels = vec![None; model.cfg.seq_len()];
    labels[1] = Some(tokens[0]);
    labels[3] = Some(tokens[2]);
    let cfg = model.cfg.clone();
    finite_diff_check(&mut model.store, &|tape, store| {
        let m = VlModel {
            cfg: cfg.clone(),
            store: store.clone(),
        };
        let out = m.forward(tape, &tokens, &patches)?;
        let logits = m.mlm_head(tape, out.hidden)?;
        objectives::mlm_loss(tape, logits, &labels)
    })
}

pub fn check_itm_head_loss(seed: u64) -> Result<CheckOutcome> {
    let (mut model, tokens, patches) = model_env(LayerKind::MlpTinyAtt, seed)?;
    let cfg = model.cfg.clone();
    finite_diff_check(&mut model.store, &|tape, store| {
        let m = VlModel {
            cfg: cfg.clone(),
            store: store.clone(),
        };
        let out = m.forward(tape, &tokens, &patches)?;
        let logits = m.itm_head(tape, out.pooled)?;
        objectives::itm_loss(tape, logits, 1)
    })
}

pub fn check_vqa_head_loss(seed: u64) -> Result<CheckOutcome> {
    let (mut model, tokens, patches) = model_env(LayerKind::Transformer, seed)?;
    let target = objectives::one_hot(1, model.cfg.answer_vocab_size);
    let cfg = model.cfg.clone();
    finite_diff_check(&mut model.store, &|tape, store| {
        let m = VlModel {
            cfg: cfg.clone(),
            store: store.clone(),
        };
        let out = m.forward(tape, &tokens, &patches)?;
        let logits = m.vqa_head(tape, out.pooled)?;
        objectives::vqa_loss(tape, logits, &target)
    })
}

pub fn check_nlvr2_head(seed: u64) -> Result<CheckOutcome> {
    let (mut model, tokens, patches) = model_env(LayerKind::Mlp, seed)?;
    let patches_b: Vec<f64> = patches.iter().map(|v| 1.0 - v).collect();
    let cfg = model.cfg.clone();
    finite_diff_check(&mut model.store, &|tape, store| {
        let m = VlModel {
            cfg: cfg.clone(),
            store: store.clone(),
        };
        let a = m.forward(tape, &tokens, &patches)?;
        let b = m.forward(tape, &tokens, &patches_b)?;
        let logits = m.nlvr2_pair_head(tape, a.pooled, b.pooled)?;
        tape.cross_entropy_rows(logits, &[Some(0)])
    })
}

/// Full joint objective through encoders, fusion, heads, and all three
/// losses at once.
pub fn check_model_joint(kind: LayerKind, seed: u64) -> Result<CheckOutcome> {
    let (mut model, tokens, patches) = model_env(kind, seed)?;
    let mut labels = vec![None; model.cfg.seq_len()];
    labels[2] = Some(tokens[1]);
    let target = objectives::one_hot(2, model.cfg.answer_vocab_size);
    let cfg = model.cfg.clone();
    finite_diff_check(&mut model.store, &|tape, store| {
        let m = VlModel {
            cfg: cfg.clone(),
            store: store.clone(),
        };
        let mut masked = tokens.clone();
        masked[1] = crate::model::MASK_ID;
        let out = m.forward(tape, &masked, &patches)?;
        let mlm_logits = m.mlm_head(tape, out.hidden)?;
        let l_mlm = objectives::mlm_loss(tape, mlm_logits, &labels)?;
        let itm_logits = m.itm_head(tape, out.pooled)?;
        let l_itm = objectives::itm_loss(tape, itm_logits, 1)?;
        let vqa_logits = m.vqa_head(tape, out.pooled)?;
        let l_vqa = objectives::vqa_loss(tape, vqa_logits, &target)?;
        let a = tape.add(l_mlm, l_itm)?;
        tape.add(a, l_vqa)
    })
}

type CheckFn = fn(u64) -> Result<CheckOutcome>;

/// Every named gradient check, as run by the CLI and the acceptance suite.
pub fn named_checks() -> Vec<(&'static str, CheckFn)> {
    fn layer_transformer(s: u64) -> Result<CheckOutcome> {
        check_layer(LayerKind::Transformer, NormPlacement::PostNorm, s)
    }
    fn layer_mlp(s: u64) -> Result<CheckOutcome> {
        check_layer(LayerKind::Mlp, NormPlacement::PostNorm, s)
    }
    fn layer_mlp_tiny(s: u64) -> Result<CheckOutcome> {
        check_layer(LayerKind::MlpTinyAtt, NormPlacement::PostNorm, s)
    }
    fn layer_tiny_only(s: u64) -> Result<CheckOutcome> {
        check_layer(LayerKind::TinyAttOnly, NormPlacement::PreNorm, s)
    }
    fn layer_square(s: u64) -> Result<CheckOutcome> {
        check_layer(LayerKind::SquareMlp, NormPlacement::PostNorm, s)
    }
    fn model_joint(s: u64) -> Result<CheckOutcome> {
        check_model_joint(LayerKind::MlpTinyAtt, s)
    }
    vec![
        ("primitives", check_primitives),
        ("channel_ffn", check_channel_ffn),
        ("position_ffn", check_position_ffn),
        ("multi_head_attention", check_multi_head_attention),
        ("tiny_attention", check_tiny_attention),
        ("square_mixing", check_square_mixing),
        ("layer_transformer", layer_transformer),
        ("layer_mlp", layer_mlp),
        ("layer_mlp_tiny_att", layer_mlp_tiny),
        ("layer_tiny_att_only", layer_tiny_only),
        ("layer_square_mlp", layer_square),
        ("mlm_head_loss", check_mlm_head_loss),
        ("itm_head_loss", check_itm_head_loss),
        ("vqa_head_loss", check_vqa_head_loss),
        ("nlvr2_head", check_nlvr2_head),
        ("model_joint", model_joint),
    ]
}

/// Worst relative error for one layer kind across both norm placements.
pub fn check_layer_kind(kind: LayerKind, seeds: u64) -> Result<CheckOutcome> {
    let mut worst = CheckOutcome {
        max_rel_err: 0.0,
        entries: 0,
    };
    for seed in 0..seeds {
        for norm in [NormPlacement::PostNorm, NormPlacement::PreNorm] {
            let out = check_layer(kind, norm, seed)?;
            worst.max_rel_err = worst.max_rel_err.max(out.max_rel_err);
            worst.entries += out.entries;
        }
    }
    Ok(worst)
}
