use super::params::{adapter_in_name, adapter_out_name, block_name, embed_name, head_name, rel_bias_name};
use super::window::{invert, partition_index, relative_position_index, shift_mask};
use super::{ModelConfig, ModelError, ModelParams};
use crate::complexity::{CoarseDecision, CoarseStage, Granularity};
use crate::image::{to_grayscale, RgbImage};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Geometry of one block application on a batch of token grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockContext {
    pub side: usize,
    pub window: usize,
    pub shift: usize,
    pub batch: usize,
    pub heads: usize,
}

impl BlockContext {
    pub fn for_block(config: &ModelConfig, g: Granularity, block: usize, batch: usize) -> Self {
        Self {
            side: config.grid_side(g),
            window: config.effective_window(g),
            shift: config.shift(g, block),
            batch,
            heads: config.heads,
        }
    }

    fn windows(&self) -> usize {
        self.batch * (self.side / self.window).pow(2)
    }
}

/// Attention probabilities of one block, `[heads, windows, M*M, M*M]` with
/// windows ordered batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub block: usize,
    pub granularity: Granularity,
    pub window: usize,
    pub shift: usize,
    pub probs: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub attention: Vec<AttentionRecord>,
}

/// Flatten non-overlapping `patch x patch` regions of every image into rows
/// of `[B * N, patch * patch * 3]`, pixel-major then channel.
pub fn patch_matrix(images: &[&RgbImage], patch: usize) -> Result<Tensor, ModelError> {
    let first = images.first().ok_or_else(|| ModelError::Shape("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(ModelError::Shape(format!("image {w}x{h} not divisible by patch {patch}")));
    }
    let (gw, gh) = (w / patch, h / patch);
    let row = patch * patch * 3;
    let mut data = Vec::with_capacity(images.len() * gw * gh * row);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(ModelError::Shape(format!(
                "mixed image sizes in batch: {w}x{h} and {}x{}",
                img.width(),
                img.height()
            )));
        }
        let px = img.data();
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..patch {
                    let start = ((ty * patch + py) * w + tx * patch) * 3;
                    data.extend_from_slice(&px[start..start + patch * 3]);
                }
            }
        }
    }
    Ok(Tensor::new(&[images.len() * gw * gh, row], data)?)
}

/// Patch tokens `[B * N_g, D_g]` for granularity `g`.
pub fn patch_embed(
    graph: &mut Graph,
    store: &ParamStore,
    config: &ModelConfig,
    images: &[&RgbImage],
    g: Granularity,
) -> Result<Var, ModelError> {
    let lvl = config.level(g);
    for img in images {
        if img.width() != config.image_size || img.height() != config.image_size {
            return Err(ModelError::Shape(format!(
                "model expects {0}x{0} images, got {1}x{2}",
                config.image_size,
                img.width(),
                img.height()
            )));
        }
    }
    let x = graph.constant(patch_matrix(images, lvl.patch)?);
    let w = graph.param(store, &embed_name(g, "weight"))?;
    let b = graph.param(store, &embed_name(g, "bias"))?;
    Ok(graph.linear(x, w, b)?)
}

pub fn adapt_in(graph: &mut Graph, store: &ParamStore, x: Var, g: Granularity) -> Result<Var, ModelError> {
    let w = graph.param(store, &adapter_in_name(g, "weight"))?;
    let b = graph.param(store, &adapter_in_name(g, "bias"))?;
    Ok(graph.linear(x, w, b)?)
}

pub fn adapt_out(graph: &mut Graph, store: &ParamStore, x: Var, g: Granularity) -> Result<Var, ModelError> {
    let w = graph.param(store, &adapter_out_name(g, "weight"))?;
    let b = graph.param(store, &adapter_out_name(g, "bias"))?;
    Ok(graph.linear(x, w, b)?)
}

fn linear_named(graph: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var, ModelError> {
    let w = graph.param(store, &format!("{prefix}.weight"))?;
    let b = graph.param(store, &format!("{prefix}.bias"))?;
    Ok(graph.linear(x, w, b)?)
}

/// Windowed multi-head self-attention of block `block` on grid-ordered
/// tokens `[B * S * S, D]`. The cyclic shift, window partition and their
/// inverses are folded into two row gathers. Returns tokens in grid order.
pub fn window_mhsa(
    graph: &mut Graph,
    store: &ParamStore,
    x: Var,
    block: usize,
    ctx: BlockContext,
    probs_out: Option<&mut Tensor>,
) -> Result<Var, ModelError> {
    let d = match graph.shape(x) {
        &[n, d] if n == ctx.batch * ctx.side * ctx.side => d,
        other => {
            return Err(ModelError::Shape(format!(
                "attention expects [{}, D] tokens, got {other:?}",
                ctx.batch * ctx.side * ctx.side
            )))
        }
    };
    let h = ctx.heads;
    if h == 0 || d % h != 0 {
        return Err(ModelError::Shape(format!("width {d} not divisible by {h} heads")));
    }
    let dh = d / h;
    let m = ctx.window;
    let mm = m * m;
    let nw = ctx.windows();
    let gather = partition_index(ctx.side, m, ctx.shift, ctx.batch)?;

    let prefix = block_name(block, "attn");
    let qkv = linear_named(graph, store, x, &format!("{prefix}.qkv"))?;
    let qkv = graph.gather_rows(qkv, &gather)?;
    let qkv = graph.reshape(qkv, &[nw, mm, 3, h, dh])?;
    let qkv = graph.permute(qkv, &[2, 3, 0, 1, 4])?;
    let mut part = |i: usize| -> Result<Var, ModelError> {
        let t = graph.slice(qkv, 0, i, 1)?;
        Ok(graph.reshape(t, &[h * nw, mm, dh])?)
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let q = graph.scale(q, 1.0 / (dh as f64).sqrt());
    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;

    // relative-position bias: [(2M-1)^2, h] -> [h * nW, M^2, M^2]
    let table = graph.param(store, &rel_bias_name(block, m))?;
    let bias = graph.gather_rows(table, &relative_position_index(m))?;
    let bias = graph.transpose(bias)?;
    let bias = graph.reshape(bias, &[h, 1, mm, mm])?;
    let bias = graph.expand(bias, nw);
    let bias = graph.permute(bias, &[1, 0, 2, 3, 4])?;
    let bias = graph.reshape(bias, &[h * nw, mm, mm])?;
    let mut scores = graph.add(scores, bias)?;

    if ctx.shift > 0 {
        let mask = shift_mask(ctx.side, m, ctx.shift)?
            .expand_leading(ctx.batch)
            .expand_leading(h)
            .reshape(&[h * nw, mm, mm])?;
        let mask = graph.constant(mask);
        scores = graph.add(scores, mask)?;
    }
    let attn = graph.softmax(scores)?;
    if let Some(out) = probs_out {
        *out = graph.value(attn).reshape(&[h, nw, mm, mm])?;
    }
    let ctx_v = graph.matmul(attn, v)?;
    let ctx_v = graph.reshape(ctx_v, &[h, nw, mm, dh])?;
    let ctx_v = graph.permute(ctx_v, &[1, 2, 0, 3])?;
    let ctx_v = graph.reshape(ctx_v, &[nw * mm, d])?;
    let out = linear_named(graph, store, ctx_v, &format!("{prefix}.proj"))?;
    Ok(graph.gather_rows(out, &invert(&gather))?)
}

/// Pre-norm block: `x + WMSA(LN(x))`, then `+ MLP(LN(.))`.
pub fn block_forward(
    graph: &mut Graph,
    store: &ParamStore,
    x: Var,
    block: usize,
    ctx: BlockContext,
    probs_out: Option<&mut Tensor>,
) -> Result<Var, ModelError> {
    let norm = |graph: &mut Graph, x: Var, which: &str| -> Result<Var, ModelError> {
        let gamma = graph.param(store, &block_name(block, &format!("{which}.gamma")))?;
        let beta = graph.param(store, &block_name(block, &format!("{which}.beta")))?;
        Ok(graph.layer_norm(x, gamma, beta)?)
    };
    let y = norm(graph, x, "norm1")?;
    let y = window_mhsa(graph, store, y, block, ctx, probs_out)?;
    let x = graph.add(x, y)?;
    let y = norm(graph, x, "norm2")?;
    let y = linear_named(graph, store, y, &block_name(block, "mlp.fc1"))?;
    let y = graph.gelu(y);
    let y = linear_named(graph, store, y, &block_name(block, "mlp.fc2"))?;
    Ok(graph.add(x, y)?)
}

/// Logits `[B, classes]` recorded on `graph`: embed, adapt in, the first
/// `L_g` shared blocks, adapt out, mean-pool, head.
pub fn forward_logits(
    graph: &mut Graph,
    config: &ModelConfig,
    store: &ParamStore,
    images: &[&RgbImage],
    g: Granularity,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Var, ModelError> {
    let depth = config.level(g).depth;
    if depth == 0 {
        return Err(ModelError::Config(format!("granularity {g} has no blocks in this model")));
    }
    let batch = images.len();
    let x = patch_embed(graph, store, config, images, g)?;
    let mut x = adapt_in(graph, store, x, g)?;
    for block in 0..depth {
        let ctx = BlockContext::for_block(config, g, block, batch);
        let mut probs = Tensor::zeros(&[0]);
        let want = trace.is_some();
        x = block_forward(graph, store, x, block, ctx, want.then_some(&mut probs))?;
        if let Some(t) = trace.as_deref_mut() {
            t.attention.push(AttentionRecord { block, granularity: g, window: ctx.window, shift: ctx.shift, probs });
        }
    }
    let x = adapt_out(graph, store, x, g)?;
    let dg = config.level(g).branch_dim;
    let x = graph.reshape(x, &[batch, config.tokens(g), dg])?;
    let pooled = graph.mean_axis(x, 1)?;
    let w = graph.param(store, &head_name(g, "weight"))?;
    let b = graph.param(store, &head_name(g, "bias"))?;
    Ok(graph.linear(pooled, w, b)?)
}

/// Evaluate logits `[B, classes]` for a batch routed to `g`.
pub fn forward_fine(params: &ModelParams, images: &[&RgbImage], g: Granularity) -> Result<Tensor, ModelError> {
    let mut graph = Graph::new();
    let out = forward_logits(&mut graph, &params.config, &params.store, images, g, None)?;
    Ok(graph.value(out).clone())
}

/// Index of the largest logit in each row.
pub fn classify(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(c.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub decision: CoarseDecision,
    pub logits: Tensor,
}

/// Coarse decision on the grayscale image, then the fine stage at the chosen
/// granularity. The coarse stage is evaluated outside any tape.
pub fn route_and_forward(img: &RgbImage, stage: &CoarseStage, params: &ModelParams) -> Result<Routed, ModelError> {
    let decision = stage.decide(&to_grayscale(img))?;
    let logits = forward_fine(params, &[img], decision.granularity)?;
    let logits = logits.reshape(&[params.config.classes])?;
    Ok(Routed { decision, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{generate, SyntheticKind, SyntheticSpec};
    use crate::model::InitOptions;

    fn img(kind: SyntheticKind, side: usize) -> RgbImage {
        generate(&SyntheticSpec { kind, width: side, height: side }).to_rgb()
    }

    fn noise(seed: u64) -> RgbImage {
        img(SyntheticKind::UniformNoise { seed }, 32)
    }

    #[test]
    fn patch_counts_at_224() {
        let im = img(SyntheticKind::Constant { value: 0.3 }, 224);
        for (p, n) in [(16, 196), (8, 784), (4, 3136)] {
            assert_eq!(patch_matrix(&[&im], p).unwrap().shape(), &[n, p * p * 3]);
        }
        assert!(patch_matrix(&[&im], 5).is_err());
    }

    #[test]
    fn logits_shape_and_purity() {
        let p = ModelParams::init(ModelConfig::tiny(), 1).unwrap();
        let a = noise(4);
        for g in Granularity::ALL {
            let l1 = forward_fine(&p, &[&a], g).unwrap();
            let l2 = forward_fine(&p, &[&a.clone()], g).unwrap();
            assert_eq!(l1.shape(), &[1, 3]);
            assert_eq!(l1, l2);
        }
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let p = ModelParams::init(ModelConfig::tiny(), 2).unwrap();
        let (a, b) = (noise(1), noise(2));
        for g in Granularity::ALL {
            let both = forward_fine(&p, &[&a, &b], g).unwrap();
            let lb = forward_fine(&p, &[&b], g).unwrap();
            for (x, y) in both.data()[3..].iter().zip(lb.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn branches_differ() {
        let p = ModelParams::init(ModelConfig::tiny(), 3).unwrap();
        let a = noise(9);
        let l1 = forward_fine(&p, &[&a], Granularity::Coarse).unwrap();
        let l3 = forward_fine(&p, &[&a], Granularity::Fine).unwrap();
        assert_ne!(l1, l3);
    }

    #[test]
    fn zero_residual_blocks_are_identity() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::init_with(cfg.clone(), InitOptions { zero_residual: true, ..Default::default() })
            .unwrap();
        p.perturb(5, 0.0);
        let a = noise(7);
        let g = Granularity::Fine;
        let mut graph = Graph::new();
        let x = patch_embed(&mut graph, &p.store, &cfg, &[&a], g).unwrap();
        let x = adapt_in(&mut graph, &p.store, x, g).unwrap();
        let mut y = x;
        for block in 0..2 {
            y = block_forward(&mut graph, &p.store, y, block, BlockContext::for_block(&cfg, g, block, 1), None)
                .unwrap();
        }
        assert_eq!(graph.value(x), graph.value(y));
    }

    #[test]
    fn adapters_are_isolated_per_granularity() {
        let p = ModelParams::init(ModelConfig::tiny(), 4).unwrap();
        let a = noise(3);
        let before = forward_fine(&p, &[&a], Granularity::Coarse).unwrap();
        let mut q = p.clone();
        for part in ["weight", "bias"] {
            q.store
                .get_mut(&adapter_in_name(Granularity::Medium, part))
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += 1.0);
        }
        assert_eq!(forward_fine(&q, &[&a], Granularity::Coarse).unwrap(), before);
        assert_ne!(forward_fine(&q, &[&a], Granularity::Medium).unwrap(), forward_fine(&p, &[&a], Granularity::Medium).unwrap());
    }

    #[test]
    fn trace_rows_are_distributions() {
        let p = ModelParams::init(ModelConfig::tiny(), 0).unwrap();
        let a = noise(11);
        let mut trace = ForwardTrace::default();
        let mut graph = Graph::new();
        forward_logits(&mut graph, &p.config, &p.store, &[&a], Granularity::Medium, Some(&mut trace)).unwrap();
        assert_eq!(trace.attention.len(), 2);
        assert_eq!(trace.attention[1].shift, 1);
        for rec in &trace.attention {
            for row in rec.probs.data().chunks_exact(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn classify_picks_argmax() {
        let t = Tensor::new(&[2, 3], vec![0.1, 0.5, 0.2, 3.0, -1.0, 2.0]).unwrap();
        assert_eq!(classify(&t), vec![1, 0]);
    }
}
