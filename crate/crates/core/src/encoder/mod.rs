//! Compact multimodal masked-concept encoder.
//!
//! A batch of instances is encoded in one graph: every caption token and
//! region of every instance is a row, and attention is restricted to rows of
//! the same instance with an additive block mask. Regions carry no position
//! embedding, so the output does not depend on region order.

mod checkpoint;
mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMode, Graph, NodeId, ParamLayout, ParamNodes, ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::world::{Instance, MaskedView, TokenId};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use train::{mask_audit, train_retriever_encoder, MaskAudit, MlmBatch, TrainConfig, TrainReport};

const MASK_NEG: f64 = -1e9;
const LN_EPS: f64 = 1e-5;
/// Instances per graph in batched passes.
pub const SUB_BATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    OneStream,
    TwoStream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Region input width (feature dim plus 4 box coordinates).
    pub region_dim: usize,
    pub max_len: usize,
    pub arch: Arch,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, region_dim: usize) -> Self {
        Self { d: 64, layers: 2, heads: 4, vocab_size, region_dim, max_len: 16, arch: Arch::OneStream }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("encoder.d", self.d),
            ("encoder.layers", self.layers),
            ("encoder.heads", self.heads),
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.region_dim", self.region_dim),
            ("encoder.max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::config("encoder.heads", format!("d = {} is not divisible by {}", self.d, self.heads)));
        }
        Ok(())
    }

    fn ff(&self) -> usize {
        2 * self.d
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

fn push_ln(out: &mut Vec<(String, usize, usize, Init)>, name: &str, d: usize) {
    out.push((format!("{name}.ln_g"), 1, d, Init::Ones));
    out.push((format!("{name}.ln_b"), 1, d, Init::Zeros));
}

fn push_attn(out: &mut Vec<(String, usize, usize, Init)>, name: &str, d: usize) {
    push_ln(out, name, d);
    let s = 1.0 / (d as f64).sqrt();
    for w in ["q", "k", "v", "o"] {
        out.push((format!("{name}.w{w}"), d, d, Init::Normal(s)));
        out.push((format!("{name}.b{w}"), 1, d, Init::Zeros));
    }
}

fn push_mlp(out: &mut Vec<(String, usize, usize, Init)>, name: &str, d: usize, ff: usize) {
    push_ln(out, name, d);
    out.push((format!("{name}.w1"), d, ff, Init::Normal(1.0 / (d as f64).sqrt())));
    out.push((format!("{name}.b1"), 1, ff, Init::Zeros));
    out.push((format!("{name}.w2"), ff, d, Init::Normal(1.0 / (ff as f64).sqrt())));
    out.push((format!("{name}.b2"), 1, d, Init::Zeros));
}

/// Segment table in the exact order the forward pass consumes it.
fn segment_specs(c: &EncoderConfig) -> Vec<(String, usize, usize, Init)> {
    let d = c.d;
    let emb = 1.0 / (d as f64).sqrt();
    let mut out = vec![
        ("tok_emb".to_string(), c.vocab_size, d, Init::Normal(emb)),
        ("pos_emb".to_string(), c.max_len, d, Init::Normal(emb)),
        ("reg_w".to_string(), c.region_dim, d, Init::Normal(1.0 / (c.region_dim as f64).sqrt())),
        ("reg_b".to_string(), 1, d, Init::Zeros),
    ];
    for l in 0..c.layers {
        match c.arch {
            Arch::OneStream => {
                push_attn(&mut out, &format!("l{l}.attn"), d);
                push_mlp(&mut out, &format!("l{l}.mlp"), d, c.ff());
            }
            Arch::TwoStream => {
                push_attn(&mut out, &format!("l{l}.t_self"), d);
                push_attn(&mut out, &format!("l{l}.v_self"), d);
                push_attn(&mut out, &format!("l{l}.t_cross"), d);
                push_attn(&mut out, &format!("l{l}.v_cross"), d);
                push_mlp(&mut out, &format!("l{l}.t_mlp"), d, c.ff());
                push_mlp(&mut out, &format!("l{l}.v_mlp"), d, c.ff());
            }
        }
    }
    push_ln(&mut out, "final", d);
    out.push(("head.w1".into(), d, d, Init::Normal(1.0 / (d as f64).sqrt())));
    out.push(("head.b1".into(), 1, d, Init::Zeros));
    out.push(("head.w2".into(), d, c.vocab_size, Init::Normal(1.0 / (d as f64).sqrt())));
    out.push(("head.b2".into(), 1, c.vocab_size, Init::Zeros));
    out
}

pub fn param_layout(config: &EncoderConfig) -> ParamLayout {
    let mut layout = ParamLayout::new();
    for (name, r, c, _) in segment_specs(config) {
        layout.push(name, r, c);
    }
    layout
}

/// Encoder weights together with the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub theta: ParamVector,
}

impl ModelParams {
    pub fn with_theta(&self, theta: ParamVector) -> Self {
        Self { config: self.config.clone(), theta }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Random initialization; a pure function of `(config, seed)`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let specs = segment_specs(config);
    let layout = Arc::new(param_layout(config));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(layout.len());
    for (_, r, c, init) in specs {
        match init {
            Init::Normal(s) => {
                let dist = Normal::new(0.0, s).expect("positive std");
                data.extend((0..r * c).map(|_| dist.sample(&mut rng)));
            }
            Init::Ones => data.extend(std::iter::repeat(1.0).take(r * c)),
            Init::Zeros => data.extend(std::iter::repeat(0.0).take(r * c)),
        }
    }
    Ok(ModelParams { config: config.clone(), theta: ParamVector::from_data(layout, data)? })
}

/// Walks parameter nodes in segment order during a forward pass.
struct Cursor<'a> {
    nodes: &'a ParamNodes,
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> NodeId {
        let n = self.nodes.node(self.next);
        self.next += 1;
        n
    }

    fn take_n<const N: usize>(&mut self) -> [NodeId; N] {
        std::array::from_fn(|_| self.take())
    }
}

fn layer_norm(g: &mut Graph, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
    let (r, c) = g.shape(x);
    let avg = g.constant(Tensor::filled(c, 1, 1.0 / c as f64));
    let mu = g.matmul(x, avg)?;
    let mu = g.expand(mu, r, c)?;
    let xc = g.sub(x, mu)?;
    let sq = g.mul(xc, xc)?;
    let var = g.matmul(sq, avg)?;
    let var = g.add_scalar(var, LN_EPS)?;
    let inv = g.pow(var, -0.5)?;
    let inv = g.expand(inv, r, c)?;
    let xn = g.mul(xc, inv)?;
    let gain = g.expand(gain, r, c)?;
    let y = g.mul(xn, gain)?;
    g.add_row(y, bias)
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Pre-norm residual attention block: `q_in + Attn(LN(q_in), LN(kv_in))`.
/// When `kv_in` is `None` the block is self-attention.
fn attention_block(
    g: &mut Graph,
    cur: &mut Cursor<'_>,
    heads: usize,
    q_in: NodeId,
    kv_in: Option<NodeId>,
    mask: NodeId,
) -> Result<NodeId> {
    let [ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo] = cur.take_n::<10>();
    let q_norm = layer_norm(g, q_in, ln_g, ln_b)?;
    // Cross-attention keys are normalized with the same block LN.
    let kv_norm = match kv_in {
        Some(kv) => layer_norm(g, kv, ln_g, ln_b)?,
        None => q_norm,
    };
    let q = linear(g, q_norm, wq, bq)?;
    let k = linear(g, kv_norm, wk, bk)?;
    let v = linear(g, kv_norm, wv, bv)?;
    let d = g.shape(q).1;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let s = g.add(s, mask)?;
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let o = linear(g, cat, wo, bo)?;
    g.add(q_in, o)
}

fn mlp_block(g: &mut Graph, cur: &mut Cursor<'_>, x: NodeId) -> Result<NodeId> {
    let [ln_g, ln_b, w1, b1, w2, b2] = cur.take_n::<6>();
    let xn = layer_norm(g, x, ln_g, ln_b)?;
    let h = linear(g, xn, w1, b1)?;
    let h = g.tanh(h)?;
    let o = linear(g, h, w2, b2)?;
    g.add(x, o)
}

fn block_mask(row_owner: &[usize], col_owner: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(row_owner.len(), col_owner.len());
    for (i, a) in row_owner.iter().enumerate() {
        for (j, b) in col_owner.iter().enumerate() {
            if a != b {
                t.set(i, j, MASK_NEG);
            }
        }
    }
    t
}

/// Row bookkeeping for one batch.
struct BatchRows {
    tok_ids: Vec<usize>,
    pos_ids: Vec<usize>,
    tok_owner: Vec<usize>,
    regions: Tensor,
    reg_owner: Vec<usize>,
    /// Token-row index of each slot, ordered attr0, obj0, attr1, obj1, ...
    slot_rows: Vec<usize>,
}

fn batch_rows(config: &EncoderConfig, batch: &[MaskedView<'_>]) -> Result<BatchRows> {
    let mut rows = BatchRows {
        tok_ids: Vec::new(),
        pos_ids: Vec::new(),
        tok_owner: Vec::new(),
        regions: Tensor::zeros(0, 0),
        reg_owner: Vec::new(),
        slot_rows: Vec::with_capacity(2 * batch.len()),
    };
    let mut feats = Vec::new();
    for (b, view) in batch.iter().enumerate() {
        let len = view.caption.len();
        if len > config.max_len {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("caption of {len} tokens exceeds max_len {}", config.max_len),
            });
        }
        let (sa, so) = view.mask_slots;
        if sa >= len || so >= len || sa == so {
            return Err(Error::MaskSlots(format!("slots ({sa}, {so}) in caption of {len}")));
        }
        if view.regions.is_empty() {
            return Err(Error::Shape { op: "encode", detail: "instance has no regions".into() });
        }
        let base = rows.tok_ids.len();
        rows.slot_rows.push(base + sa);
        rows.slot_rows.push(base + so);
        for (p, &t) in view.caption.iter().enumerate() {
            if t as usize >= config.vocab_size {
                return Err(Error::Shape { op: "encode", detail: format!("token {t} outside vocabulary") });
            }
            rows.tok_ids.push(t as usize);
            rows.pos_ids.push(p);
            rows.tok_owner.push(b);
        }
        for r in view.regions {
            if r.feat.len() + 4 != config.region_dim {
                return Err(Error::Shape {
                    op: "encode",
                    detail: format!("region of width {} vs region_dim {}", r.feat.len() + 4, config.region_dim),
                });
            }
            feats.extend_from_slice(&r.feat);
            feats.extend_from_slice(&r.bbox);
            rows.reg_owner.push(b);
        }
    }
    rows.regions = Tensor::new(rows.reg_owner.len(), config.region_dim, feats);
    Ok(rows)
}

/// Forward pass to the two slot hidden states of every instance in `batch`.
/// Returns a `(2 * batch) x d` node with rows attr0, obj0, attr1, obj1, ...
pub fn slot_states(
    g: &mut Graph,
    params: &ParamNodes,
    config: &EncoderConfig,
    batch: &[MaskedView<'_>],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty encoder batch".into()));
    }
    let rows = batch_rows(config, batch)?;
    let mut cur = Cursor { nodes: params, next: 0 };
    let [tok_emb, pos_emb, reg_w, reg_b] = cur.take_n::<4>();
    let tok = g.embedding(tok_emb, &rows.tok_ids)?;
    let pos = g.embedding(pos_emb, &rows.pos_ids)?;
    let text = g.add(tok, pos)?;
    let feats = g.constant(rows.regions.clone());
    let vis = linear(g, feats, reg_w, reg_b)?;

    let text_out = match config.arch {
        Arch::OneStream => {
            let owner: Vec<usize> = rows.tok_owner.iter().chain(&rows.reg_owner).copied().collect();
            let mask = g.constant(block_mask(&owner, &owner));
            let mut h = g.concat_rows(&[text, vis])?;
            for _ in 0..config.layers {
                h = attention_block(g, &mut cur, config.heads, h, None, mask)?;
                h = mlp_block(g, &mut cur, h)?;
            }
            g.slice_rows(h, 0, rows.tok_ids.len())?
        }
        Arch::TwoStream => {
            let tt = g.constant(block_mask(&rows.tok_owner, &rows.tok_owner));
            let vv = g.constant(block_mask(&rows.reg_owner, &rows.reg_owner));
            let tv = g.constant(block_mask(&rows.tok_owner, &rows.reg_owner));
            let vt = g.constant(block_mask(&rows.reg_owner, &rows.tok_owner));
            let (mut t, mut v) = (text, vis);
            for _ in 0..config.layers {
                t = attention_block(g, &mut cur, config.heads, t, None, tt)?;
                v = attention_block(g, &mut cur, config.heads, v, None, vv)?;
                let t2 = attention_block(g, &mut cur, config.heads, t, Some(v), tv)?;
                let v2 = attention_block(g, &mut cur, config.heads, v, Some(t), vt)?;
                t = mlp_block(g, &mut cur, t2)?;
                v = mlp_block(g, &mut cur, v2)?;
            }
            t
        }
    };
    let [fg, fb] = cur.take_n::<2>();
    let normed = layer_norm(g, text_out, fg, fb)?;
    g.embedding(normed, &rows.slot_rows)
}

/// Two-layer MLM head applied to every row of `slots`.
pub fn head_logits(g: &mut Graph, params: &ParamNodes, slots: NodeId) -> Result<NodeId> {
    let n = params.nodes.len();
    let [w1, b1, w2, b2] = std::array::from_fn(|i| params.node(n - 4 + i));
    let h = linear(g, slots, w1, b1)?;
    let h = g.tanh(h)?;
    linear(g, h, w2, b2)
}

/// Mean cross-entropy of both slots of every instance over the full vocabulary.
pub fn mlm_loss(g: &mut Graph, params: &ParamNodes, config: &EncoderConfig, batch: &[&Instance]) -> Result<NodeId> {
    let views: Vec<_> = batch.iter().map(|i| i.masked()).collect();
    let slots = slot_states(g, params, config, &views)?;
    let logits = head_logits(g, params, slots)?;
    let targets: Vec<usize> = batch.iter().flat_map(|i| [i.gold.attr as usize, i.gold.obj as usize]).collect();
    g.cross_entropy(logits, &targets)
}

/// Slot vectors of one instance.
pub fn encode_slots(params: &ModelParams, view: MaskedView<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(encode_batch(params, &[view])?.pop().expect("one instance"))
}

/// Slot vectors for many instances, encoded in fixed-size chunks.
pub fn encode_batch(params: &ModelParams, views: &[MaskedView<'_>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(views.len());
    for chunk in views.chunks(SUB_BATCH) {
        let mut g = Graph::new();
        let nodes = params.theta.to_nodes(&mut g);
        let s = slot_states(&mut g, &nodes, &params.config, chunk)?;
        let t = g.value(s);
        for b in 0..chunk.len() {
            out.push((t.row_slice(2 * b).to_vec(), t.row_slice(2 * b + 1).to_vec()));
        }
    }
    Ok(out)
}

/// Full-vocabulary logits for one slot vector.
pub fn mlm_logits(params: &ModelParams, slot: &[f64]) -> Result<Vec<f64>> {
    if slot.len() != params.config.d {
        return Err(Error::Shape { op: "mlm_logits", detail: format!("slot of {} vs d {}", slot.len(), params.config.d) });
    }
    let mut g = Graph::new();
    let nodes = params.theta.to_nodes(&mut g);
    let s = g.constant(Tensor::row(slot));
    let l = head_logits(&mut g, &nodes, s)?;
    Ok(g.value(l).data().to_vec())
}

/// Logits for both slots of every view, chunked. Rows as in [`slot_states`].
pub fn batch_logits(params: &ModelParams, views: &[MaskedView<'_>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(2 * views.len());
    for chunk in views.chunks(SUB_BATCH) {
        let mut g = Graph::new();
        let nodes = params.theta.to_nodes(&mut g);
        let s = slot_states(&mut g, &nodes, &params.config, chunk)?;
        let l = head_logits(&mut g, &nodes, s)?;
        let t = g.value(l);
        out.extend((0..t.rows()).map(|r| t.row_slice(r).to_vec()));
    }
    Ok(out)
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax restricted to `candidates`; ties go to the smallest token id.
pub fn argmax_among(logits: &[f64], candidates: &[TokenId]) -> Option<TokenId> {
    let mut best: Option<TokenId> = None;
    for &c in candidates {
        let v = logits[c as usize];
        best = match best {
            None => Some(c),
            Some(b) if v > logits[b as usize] || (v == logits[b as usize] && c < b) => Some(c),
            keep => keep,
        };
    }
    best
}

/// Flatten per-segment gradient nodes into a vector in layout order.
pub fn flat_grad(g: &Graph, grads: &[NodeId]) -> Vec<f64> {
    let mut out = Vec::new();
    for &n in grads {
        out.extend_from_slice(g.value(n).data());
    }
    out
}

/// Loss and flat gradient of the MLM objective on `batch`.
///
/// Large batches are split into sub-batches (block-masked attention grows
/// quadratically with rows) and recombined with size weights.
pub fn mlm_loss_and_grad(params: &ModelParams, batch: &[&Instance]) -> Result<(f64, Vec<f64>)> {
    let mut total_loss = 0.0;
    let mut total_grad = vec![0.0; params.len()];
    for chunk in batch.chunks(SUB_BATCH) {
        let mut g = Graph::new();
        let nodes = params.theta.to_nodes(&mut g);
        let loss = mlm_loss(&mut g, &nodes, &params.config, chunk)?;
        let grads = g.grad(loss, &nodes.nodes, GradMode::Detached)?;
        let w = chunk.len() as f64 / batch.len() as f64;
        total_loss += w * g.value(loss).item();
        for (t, x) in total_grad.iter_mut().zip(flat_grad(&g, &grads)) {
            *t += w * x;
        }
    }
    Ok((total_loss, total_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_difference, relative_error};
    use crate::world::{generate_world, WorldConfig};

    fn tiny_world() -> crate::world::World {
        let cfg = WorldConfig {
            attributes: 4,
            verbs: 1,
            objects: 4,
            context_tokens: 6,
            pairs: 8,
            novel_pairs: 2,
            instances_per_pair: 2,
            feature_dim: 4,
            ..WorldConfig::default()
        };
        generate_world(&cfg, 3).unwrap()
    }

    fn cfg_for(w: &crate::world::World, d: usize, layers: usize, arch: Arch) -> EncoderConfig {
        EncoderConfig { d, layers, heads: 2, arch, ..EncoderConfig::new(w.vocab.size(), 8) }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let c = EncoderConfig::new(20, 8);
        assert_eq!(init_params(&c, 1).unwrap(), init_params(&c, 1).unwrap());
        assert_ne!(init_params(&c, 1).unwrap().theta, init_params(&c, 2).unwrap().theta);
    }

    #[test]
    fn parameter_count_matches_hand_formula() {
        // V=10, R=6, L=16, d=4, ff=8, one layer.
        let c = EncoderConfig { d: 4, layers: 1, heads: 2, vocab_size: 10, region_dim: 6, max_len: 16, arch: Arch::OneStream };
        let emb = 10 * 4 + 16 * 4 + 6 * 4 + 4; // 132
        let attn = 2 * 4 + 4 * (16 + 4); // 88
        let mlp = 2 * 4 + 4 * 8 + 8 + 8 * 4 + 4; // 84
        let fin = 2 * 4; // 8
        let head = 16 + 4 + 40 + 10; // 70
        assert_eq!(init_params(&c, 0).unwrap().len(), emb + attn + mlp + fin + head);
        assert_eq!(emb + attn + mlp + fin + head, 382);
        let two = EncoderConfig { arch: Arch::TwoStream, ..c };
        assert_eq!(init_params(&two, 0).unwrap().len(), 132 + 4 * 88 + 2 * 84 + 8 + 70);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = EncoderConfig { d: 6, heads: 4, ..EncoderConfig::new(10, 6) };
        assert!(matches!(init_params(&c, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn slot_shapes_and_softmax_normalization() {
        let w = tiny_world();
        for arch in [Arch::OneStream, Arch::TwoStream] {
            let p = init_params(&cfg_for(&w, 8, 2, arch), 0).unwrap();
            let (a, o) = encode_slots(&p, w.instances[0].masked()).unwrap();
            assert_eq!((a.len(), o.len()), (8, 8));
            let l = mlm_logits(&p, &a).unwrap();
            assert_eq!(l.len(), w.vocab.size());
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
            let total: f64 = l.iter().map(|x| (x - m).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_encoding_matches_single() {
        let w = tiny_world();
        for arch in [Arch::OneStream, Arch::TwoStream] {
            let p = init_params(&cfg_for(&w, 8, 2, arch), 4).unwrap();
            let views: Vec<_> = w.instances.iter().take(5).map(|i| i.masked()).collect();
            let batch = encode_batch(&p, &views).unwrap();
            for (v, b) in views.iter().zip(&batch) {
                let single = encode_slots(&p, *v).unwrap();
                for (x, y) in single.0.iter().chain(&single.1).zip(b.0.iter().chain(&b.1)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn region_order_does_not_matter() {
        let w = tiny_world();
        for arch in [Arch::OneStream, Arch::TwoStream] {
            let p = init_params(&cfg_for(&w, 8, 2, arch), 5).unwrap();
            let mut inst = w.instances[0].clone();
            let before = encode_slots(&p, inst.masked()).unwrap();
            inst.regions.reverse();
            let after = encode_slots(&p, inst.masked()).unwrap();
            for (x, y) in before.0.iter().chain(&before.1).zip(after.0.iter().chain(&after.1)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distinct_prototypes_give_distinct_slot_vectors() {
        let cfg = WorldConfig { noise: 0.0, pairs: 10, novel_pairs: 2, instances_per_pair: 1, ..WorldConfig::default() };
        let w = generate_world(&cfg, 9).unwrap();
        let p = init_params(&EncoderConfig::new(w.vocab.size(), cfg.region_dim()), 0).unwrap();
        let mut a = w.instances[0].clone();
        let b_src = &w.instances[1];
        a.regions = b_src.regions.clone();
        let mut b = w.instances[0].clone();
        b.gold = b_src.gold;
        b.regions = w.instances[0].regions.clone();
        assert_ne!(encode_slots(&p, a.masked()).unwrap(), encode_slots(&p, b.masked()).unwrap());
    }

    #[test]
    fn missing_mask_slot_is_an_error() {
        let w = tiny_world();
        let p = init_params(&cfg_for(&w, 8, 1, Arch::OneStream), 0).unwrap();
        let mut inst = w.instances[0].clone();
        inst.mask_slots = (0, 0);
        assert!(matches!(encode_slots(&p, inst.masked()), Err(Error::MaskSlots(_))));
    }

    #[test]
    fn argmax_prefers_smallest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_among(&[0.0, 5.0, 5.0, 9.0], &[2, 1]), Some(1));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = tiny_world();
        for arch in [Arch::OneStream, Arch::TwoStream] {
            let p = init_params(&cfg_for(&w, 8, 2, arch), 11).unwrap();
            let batch: Vec<&Instance> = w.instances.iter().take(3).collect();
            let (_, analytic) = mlm_loss_and_grad(&p, &batch).unwrap();
            let f = |x: &[f64]| {
                let q = p.with_theta(ParamVector::from_data(p.theta.layout().clone(), x.to_vec()).unwrap());
                let mut g = Graph::new();
                let nodes = q.theta.to_nodes(&mut g);
                let l = mlm_loss(&mut g, &nodes, &q.config, &batch).unwrap();
                g.value(l).item()
            };
            let numeric = central_difference(f, p.theta.data(), 1e-5);
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{arch:?}: relative error {err}");
        }
    }
}
