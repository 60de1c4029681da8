//! The three transformer towers (query, title, image) and the embedding
//! heads on top of them.
//!
//! Towers are pre-norm transformer stacks over token or patch sequences.
//! Queries embed through their own tower and a projection head; products
//! combine the title and image CLS outputs through a learned two-way gate
//! before projection. Both embeddings are L2-normalized. The gate weights
//! are exposed because they are the per-product record of how much the
//! model leans on each modality.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamBinding, ParamStore, Tensor, Var};
use crate::text::{PatchSequence, Segment, TokenSequence};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Additive logit bias that zeroes attention onto padded keys. The
/// exponential of a shifted logit this small underflows to exactly 0.0,
/// so padding invariance is exact rather than approximate.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-token hidden states plus the position-0 summary vector.
pub struct EncoderOutput {
    /// `[L, d_model]` after the final layer norm.
    pub hidden: Var,
    /// `[1, d_model]`, row 0 of `hidden`.
    pub cls: Var,
    /// 1.0 at real positions, 0.0 at padding; length L.
    pub attention_mask: Vec<f64>,
}

pub fn init_text_tower(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    vocab_size: usize,
    seed: u64,
) {
    let d = cfg.d_model;
    store.init_randn(&format!("{prefix}.tok_emb"), vec![vocab_size, d], INIT_STD, seed);
    store.init_randn(&format!("{prefix}.pos_emb"), vec![cfg.max_len, d], INIT_STD, seed);
    store.init_randn(&format!("{prefix}.seg_emb"), vec![3, d], INIT_STD, seed);
    init_block_stack(store, prefix, cfg, seed);
}

pub fn init_image_tower(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    d_img: usize,
    seed: u64,
) {
    let d = cfg.d_model;
    store.init_randn(&format!("{prefix}.patch_proj.w"), vec![d_img, d], INIT_STD, seed);
    store.init_const(&format!("{prefix}.patch_proj.b"), vec![d], 0.0);
    store.init_randn(&format!("{prefix}.cls_emb"), vec![1, d], INIT_STD, seed);
    // One extra position for the prepended CLS.
    store.init_randn(&format!("{prefix}.pos_emb"), vec![cfg.max_len + 1, d], INIT_STD, seed);
    store.init_randn(&format!("{prefix}.seg_emb"), vec![3, d], INIT_STD, seed);
    init_block_stack(store, prefix, cfg, seed);
}

fn init_block_stack(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, seed: u64) {
    let d = cfg.d_model;
    for i in 0..cfg.n_layers {
        let p = format!("{prefix}.l{i}");
        init_layer_norm(store, &format!("{p}.ln1"), d);
        init_attention(store, &format!("{p}.attn"), d, seed);
        init_layer_norm(store, &format!("{p}.ln2"), d);
        store.init_randn(&format!("{p}.ff.w1"), vec![d, cfg.d_ff], INIT_STD, seed);
        store.init_const(&format!("{p}.ff.b1"), vec![cfg.d_ff], 0.0);
        store.init_randn(&format!("{p}.ff.w2"), vec![cfg.d_ff, d], INIT_STD, seed);
        store.init_const(&format!("{p}.ff.b2"), vec![d], 0.0);
    }
    init_layer_norm(store, &format!("{prefix}.lnf"), d);
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.init_const(&format!("{prefix}.g"), vec![d], 1.0);
    store.init_const(&format!("{prefix}.b"), vec![d], 0.0);
}

pub(crate) fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) {
    for name in ["wq", "wk", "wv", "wo"] {
        store.init_randn(&format!("{prefix}.{name}"), vec![d, d], INIT_STD, seed);
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.init_const(&format!("{prefix}.{name}"), vec![d], 0.0);
    }
}

/// Embedding projections, the modality gate, and the masked-reconstruction
/// decoder heads.
pub fn init_heads(
    store: &mut ParamStore,
    d_model: usize,
    d_embed: usize,
    vocab_size: usize,
    d_img: usize,
    seed: u64,
) {
    store.init_randn("heads.query_proj.w", vec![d_model, d_embed], INIT_STD, seed);
    store.init_const("heads.query_proj.b", vec![d_embed], 0.0);
    store.init_randn("heads.product_proj.w", vec![d_model, d_embed], INIT_STD, seed);
    store.init_const("heads.product_proj.b", vec![d_embed], 0.0);
    store.init_randn("heads.gate.wt", vec![d_model, 1], INIT_STD, seed);
    store.init_const("heads.gate.bt", vec![1], 0.0);
    store.init_randn("heads.gate.wi", vec![d_model, 1], INIT_STD, seed);
    store.init_const("heads.gate.bi", vec![1], 0.0);
    store.init_randn("heads.mlm.query.w", vec![d_model, vocab_size], INIT_STD, seed);
    store.init_const("heads.mlm.query.b", vec![vocab_size], 0.0);
    store.init_randn("heads.mlm.title.w", vec![d_model, vocab_size], INIT_STD, seed);
    store.init_const("heads.mlm.title.b", vec![vocab_size], 0.0);
    store.init_randn("heads.mpm.w", vec![d_model, d_img], INIT_STD, seed);
    store.init_const("heads.mpm.b", vec![d_img], 0.0);
}

pub(crate) fn linear(
    g: &mut Graph,
    bind: &ParamBinding,
    w: &str,
    b: &str,
    x: Var,
) -> Result<Var> {
    let wv = bind.var(g, w)?;
    let bv = bind.var(g, b)?;
    let y = g.matmul(x, wv)?;
    g.add_bias(y, bv)
}

pub(crate) fn layer_norm(
    g: &mut Graph,
    bind: &ParamBinding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = bind.var(g, &format!("{prefix}.g"))?;
    let bias = bind.var(g, &format!("{prefix}.b"))?;
    g.layer_norm_rows(x, gain, bias, LN_EPS)
}

/// Bias matrix `[rows, len(key_mask)]` with `MASK_BIAS` on padded keys.
pub(crate) fn key_mask_bias(g: &mut Graph, rows: usize, key_mask: &[f64]) -> Result<Var> {
    let cols = key_mask.len();
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for (c, &m) in key_mask.iter().enumerate() {
            if m == 0.0 {
                data[r * cols + c] = MASK_BIAS;
            }
        }
    }
    Ok(g.constant(Tensor::new(vec![rows, cols], data)?))
}

/// Multi-head scaled-dot-product attention. Queries come from `q_in`
/// `[Lq, d]`, keys and values from `kv_in` `[Lk, d]`; `key_mask` marks which
/// keys are real. Self-attention passes the same Var for both.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    bind: &ParamBinding,
    prefix: &str,
    n_heads: usize,
    q_in: Var,
    kv_in: Var,
    key_mask: &[f64],
) -> Result<Var> {
    attention_with_weights(g, bind, prefix, n_heads, q_in, kv_in, key_mask)
        .map(|(out, _)| out)
}

/// As [`multi_head_attention`], but also returns each head's attention
/// weight matrix `[Lq, Lk]` (post-softmax).
pub(crate) fn attention_with_weights(
    g: &mut Graph,
    bind: &ParamBinding,
    prefix: &str,
    n_heads: usize,
    q_in: Var,
    kv_in: Var,
    key_mask: &[f64],
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(q_in).cols();
    if d % n_heads != 0 {
        return Err(Error::InvalidParameter(format!(
            "width {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let lq = g.value(q_in).rows();
    let q = linear(g, bind, &format!("{prefix}.wq"), &format!("{prefix}.bq"), q_in)?;
    let k = linear(g, bind, &format!("{prefix}.wk"), &format!("{prefix}.bk"), kv_in)?;
    let v = linear(g, bind, &format!("{prefix}.wv"), &format!("{prefix}.bv"), kv_in)?;
    let mask = key_mask_bias(g, lq, key_mask)?;
    let mut contexts = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let masked = g.add(scaled, mask)?;
        let probs = g.softmax_rows(masked, 1.0)?;
        let ctx = g.matmul(probs, vh)?;
        contexts.push(ctx);
        weights.push(probs);
    }
    let merged = g.concat_cols(&contexts)?;
    let out = linear(g, bind, &format!("{prefix}.wo"), &format!("{prefix}.bo"), merged)?;
    Ok((out, weights))
}

pub(crate) fn feed_forward(
    g: &mut Graph,
    bind: &ParamBinding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = linear(g, bind, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x)?;
    let h = g.gelu(h)?;
    linear(g, bind, &format!("{prefix}.w2"), &format!("{prefix}.b2"), h)
}

/// One pre-norm transformer block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
fn encoder_block(
    g: &mut Graph,
    bind: &ParamBinding,
    prefix: &str,
    n_heads: usize,
    x: Var,
    key_mask: &[f64],
) -> Result<Var> {
    let a = layer_norm(g, bind, &format!("{prefix}.ln1"), x)?;
    let attn = multi_head_attention(g, bind, &format!("{prefix}.attn"), n_heads, a, a, key_mask)?;
    let x = g.add(x, attn)?;
    let b = layer_norm(g, bind, &format!("{prefix}.ln2"), x)?;
    let ff = feed_forward(g, bind, &format!("{prefix}.ff"), b)?;
    g.add(x, ff)
}

fn run_block_stack(
    g: &mut Graph,
    bind: &ParamBinding,
    prefix: &str,
    cfg: &EncoderConfig,
    mut x: Var,
    key_mask: &[f64],
) -> Result<EncoderOutput> {
    for i in 0..cfg.n_layers {
        x = encoder_block(g, bind, &format!("{prefix}.l{i}"), cfg.n_heads, x, key_mask)?;
    }
    let hidden = layer_norm(g, bind, &format!("{prefix}.lnf"), x)?;
    let cls = g.slice_rows(hidden, 0, 1)?;
    Ok(EncoderOutput {
        hidden,
        cls,
        attention_mask: key_mask.to_vec(),
    })
}

/// Runs a token sequence through a text tower (`prefix` is `query` or
/// `title`). Token, position, and segment embeddings sum into the input;
/// attention never reads padded positions.
pub fn encode_text(
    g: &mut Graph,
    bind: &ParamBinding,
    prefix: &str,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let len = seq.ids.len();
    if len > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_len,
        });
    }
    if seq.attention_mask.len() != len {
        return Err(Error::Contract("attention mask length != ids length".into()));
    }
    let tok_table = bind.var(g, &format!("{prefix}.tok_emb"))?;
    let pos_table = bind.var(g, &format!("{prefix}.pos_emb"))?;
    let seg_table = bind.var(g, &format!("{prefix}.seg_emb"))?;
    let tok = g.embed_lookup(tok_table, &seq.ids)?;
    let pos = g.slice_rows(pos_table, 0, len)?;
    let seg_idx = seq.segment.index();
    let seg_row = g.slice_rows(seg_table, seg_idx, seg_idx + 1)?;
    let x = g.add(tok, pos)?;
    let x = g.add_bias(x, seg_row)?;
    run_block_stack(g, bind, prefix, cfg, x, &seq.attention_mask)
}

/// Runs patch features through the image tower: linear projection into
/// model space, learned CLS prepended, position and segment marks added.
/// `patches` must be a `[P, d_img]` Var (leaf or constant) so callers can
/// choose whether patch features receive gradients.
pub fn encode_image(
    g: &mut Graph,
    bind: &ParamBinding,
    prefix: &str,
    cfg: &EncoderConfig,
    patches: Var,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let p = g.value(patches).rows();
    if p > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: p,
            max: cfg.max_len,
        });
    }
    let proj = linear(
        g,
        bind,
        &format!("{prefix}.patch_proj.w"),
        &format!("{prefix}.patch_proj.b"),
        patches,
    )?;
    let cls = bind.var(g, &format!("{prefix}.cls_emb"))?;
    let x = g.concat_rows(&[cls, proj])?;
    let pos_table = bind.var(g, &format!("{prefix}.pos_emb"))?;
    let pos = g.slice_rows(pos_table, 0, p + 1)?;
    let seg_table = bind.var(g, &format!("{prefix}.seg_emb"))?;
    let seg_idx = Segment::Image.index();
    let seg_row = g.slice_rows(seg_table, seg_idx, seg_idx + 1)?;
    let x = g.add(x, pos)?;
    let x = g.add_bias(x, seg_row)?;
    let key_mask = vec![1.0; p + 1];
    run_block_stack(g, bind, prefix, cfg, x, &key_mask)
}

/// Turns a patch sequence into a graph constant `[P, d_img]`.
pub fn patches_to_tensor(patches: &PatchSequence) -> Result<Tensor> {
    Tensor::from_rows(&patches.features)
}

/// Query embedding `u`: projected, L2-normalized CLS of the query tower.
pub fn query_embedding(g: &mut Graph, bind: &ParamBinding, out: &EncoderOutput) -> Result<Var> {
    let p = linear(g, bind, "heads.query_proj.w", "heads.query_proj.b", out.cls)?;
    g.l2_normalize_rows(p)
}

/// Product embedding `v` plus the modality gate weights `[w_title, w_image]`.
///
/// The gate scores each modality's CLS with its own linear head, softmaxes
/// the two scores, and blends the CLS vectors with the resulting weights
/// before the shared projection and normalization. No query is involved, so
/// product embeddings can be computed offline for the whole catalog.
pub fn product_embedding(
    g: &mut Graph,
    bind: &ParamBinding,
    title_out: &EncoderOutput,
    image_out: &EncoderOutput,
) -> Result<(Var, Var)> {
    let st = linear(g, bind, "heads.gate.wt", "heads.gate.bt", title_out.cls)?;
    let si = linear(g, bind, "heads.gate.wi", "heads.gate.bi", image_out.cls)?;
    let scores = g.concat_cols(&[st, si])?;
    let gate = g.softmax_rows(scores, 1.0)?;
    let wt = g.slice_cols(gate, 0, 1)?;
    let wi = g.slice_cols(gate, 1, 2)?;
    let t_part = g.scale_by(title_out.cls, wt)?;
    let i_part = g.scale_by(image_out.cls, wi)?;
    let blended = g.add(t_part, i_part)?;
    let p = linear(g, bind, "heads.product_proj.w", "heads.product_proj.b", blended)?;
    let v = g.l2_normalize_rows(p)?;
    Ok((v, gate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_param_gradients;
    use crate::text::{tokenize, Vocabulary, CLS_ID, PAD_ID};

    fn tiny_cfg(max_len: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_ff: 8,
            max_len,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["alpha", "beta", "gamma", "delta"])
    }

    fn build_text_tower(cfg: &EncoderConfig, vocab_size: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_text_tower(&mut store, "title", cfg, vocab_size, seed);
        store
    }

    #[test]
    fn single_block_matches_hand_computed_forward() {
        // Weights chosen so the block reduces to closed-form arithmetic:
        // zero query/key weights make attention uniform over real keys,
        // identity value/output weights make it an average of LN rows, and
        // a zero first FF weight makes the feed-forward contribute nothing.
        let cfg = tiny_cfg(2);
        let d = 4;
        let mut store = build_text_tower(&cfg, 7, 0);
        let zero = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, vec![0.0; n]).unwrap()
        };
        let eye = {
            let mut data = vec![0.0; d * d];
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
            Tensor::new(vec![d, d], data).unwrap()
        };
        store.set("title.l0.attn.wq", zero(vec![d, d])).unwrap();
        store.set("title.l0.attn.wk", zero(vec![d, d])).unwrap();
        store.set("title.l0.attn.wv", eye.clone()).unwrap();
        store.set("title.l0.attn.wo", eye).unwrap();
        store.set("title.l0.ff.w1", zero(vec![d, 8])).unwrap();
        store.set("title.pos_emb", zero(vec![2, d])).unwrap();
        store.set("title.seg_emb", zero(vec![3, d])).unwrap();
        let x0 = [1.0, 2.0, 3.0, 4.0];
        let x1 = [0.5, -1.0, 2.0, 0.0];
        let mut tok = zero(vec![7, d]);
        tok.data_mut()[5 * d..6 * d].copy_from_slice(&x0);
        tok.data_mut()[6 * d..7 * d].copy_from_slice(&x1);
        store.set("title.tok_emb", tok).unwrap();

        let seq = TokenSequence {
            ids: vec![5, 6],
            segment: Segment::Title,
            attention_mask: vec![1.0, 1.0],
            mlm_labels: None,
        };
        let mut g = Graph::new();
        let bind = ParamBinding::new(&store);
        let out = encode_text(&mut g, &bind, "title", &cfg, &seq).unwrap();
        let got = g.value(out.hidden).data().to_vec();

        // Hand computation with plain scalar arithmetic.
        let ln = |row: &[f64]| -> Vec<f64> {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter().map(|x| (x - m) * inv).collect()
        };
        let a0 = ln(&x0);
        let a1 = ln(&x1);
        let attn: Vec<f64> = (0..d).map(|j| 0.5 * (a0[j] + a1[j])).collect();
        let r0: Vec<f64> = (0..d).map(|j| x0[j] + attn[j]).collect();
        let r1: Vec<f64> = (0..d).map(|j| x1[j] + attn[j]).collect();
        let want: Vec<f64> = ln(&r0).into_iter().chain(ln(&r1)).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "got {a}, want {b}");
        }
        let cls = g.value(out.cls).data();
        assert_eq!(cls, &got[..d]);
    }

    #[test]
    fn cls_is_invariant_to_padding_and_pad_embedding() {
        let cfg = tiny_cfg(8);
        let v = vocab();
        let store = build_text_tower(&cfg, v.len(), 3);
        let run = |store: &ParamStore, text: &str, max_len: usize| -> Vec<f64> {
            let seq = tokenize(&v, text, Segment::Title, max_len).unwrap();
            let mut g = Graph::inference();
            let bind = ParamBinding::new(store);
            let out = encode_text(&mut g, &bind, "title", &cfg, &seq).unwrap();
            g.value(out.cls).data().to_vec()
        };
        let short = run(&store, "alpha beta", 3);
        let padded = run(&store, "alpha beta", 8);
        assert_eq!(short, padded);

        // Rewriting the PAD row of the token table must not leak into cls.
        let mut poisoned = store.clone();
        let d = cfg.d_model;
        let mut tok = poisoned.get("title.tok_emb").unwrap().clone();
        for x in &mut tok.data_mut()[PAD_ID * d..(PAD_ID + 1) * d] {
            *x = 77.0;
        }
        poisoned.set("title.tok_emb", tok).unwrap();
        assert_eq!(padded, run(&poisoned, "alpha beta", 8));
    }

    #[test]
    fn permuting_tokens_changes_the_output() {
        let cfg = tiny_cfg(8);
        let v = vocab();
        let store = build_text_tower(&cfg, v.len(), 3);
        let bind = ParamBinding::new(&store);
        let mut g = Graph::inference();
        let a = tokenize(&v, "alpha beta", Segment::Title, 8).unwrap();
        let b = tokenize(&v, "beta alpha", Segment::Title, 8).unwrap();
        let oa = encode_text(&mut g, &bind, "title", &cfg, &a).unwrap();
        let va = g.value(oa.cls).data().to_vec();
        let mut g = Graph::inference();
        let bind = ParamBinding::new(&store);
        let ob = encode_text(&mut g, &bind, "title", &cfg, &b).unwrap();
        let vb = g.value(ob.cls).data().to_vec();
        assert_ne!(va, vb);
    }

    #[test]
    fn rejects_out_of_range_ids_and_overlong_sequences() {
        let cfg = tiny_cfg(4);
        let store = build_text_tower(&cfg, 6, 0);
        let bind = ParamBinding::new(&store);
        let mut g = Graph::new();
        let seq = TokenSequence {
            ids: vec![CLS_ID, 99],
            segment: Segment::Title,
            attention_mask: vec![1.0, 1.0],
            mlm_labels: None,
        };
        assert!(matches!(
            encode_text(&mut g, &bind, "title", &cfg, &seq),
            Err(Error::Vocabulary(_))
        ));
        let seq = TokenSequence {
            ids: vec![CLS_ID; 5],
            segment: Segment::Title,
            attention_mask: vec![1.0; 5],
            mlm_labels: None,
        };
        assert!(matches!(
            encode_text(&mut g, &bind, "title", &cfg, &seq),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    fn image_store(cfg: &EncoderConfig, d_img: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_image_tower(&mut store, "image", cfg, d_img, seed);
        store
    }

    #[test]
    fn zero_patches_give_finite_deterministic_output() {
        let cfg = tiny_cfg(4);
        let store = image_store(&cfg, 3, 5);
        let run = || {
            let mut g = Graph::inference();
            let bind = ParamBinding::new(&store);
            let patches = g.constant(Tensor::zeros(vec![4, 3]));
            let out = encode_image(&mut g, &bind, "image", &cfg, patches).unwrap();
            g.value(out.cls).data().to_vec()
        };
        let a = run();
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a, run());
    }

    #[test]
    fn zeroing_a_patch_changes_its_hidden_state() {
        let cfg = tiny_cfg(4);
        let store = image_store(&cfg, 3, 5);
        let features = Tensor::randn(vec![4, 3], 1.0, 11);
        let mut zeroed = features.clone();
        for x in &mut zeroed.data_mut()[0..3] {
            *x = 0.0;
        }
        let run = |t: &Tensor| {
            let mut g = Graph::inference();
            let bind = ParamBinding::new(&store);
            let patches = g.constant(t.clone());
            let out = encode_image(&mut g, &bind, "image", &cfg, patches).unwrap();
            g.value(out.hidden).data().to_vec()
        };
        assert_ne!(run(&features), run(&zeroed));
    }

    #[test]
    fn patch_gradients_match_finite_differences() {
        let cfg = tiny_cfg(4);
        let store = image_store(&cfg, 3, 5);
        let rel = crate::tensor::check_gradients(
            |g, vars| {
                let bind = ParamBinding::new(&store);
                let out = encode_image(g, &bind, "image", &cfg, vars[0])?;
                let sq = g.mul(out.cls, out.cls)?;
                g.sum_all(sq)
            },
            &[Tensor::randn(vec![4, 3], 0.5, 21)],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "rel err {rel}");
    }

    fn full_store(cfg: &EncoderConfig) -> ParamStore {
        let mut store = ParamStore::new();
        init_text_tower(&mut store, "query", cfg, 9, 1);
        init_text_tower(&mut store, "title", cfg, 9, 1);
        init_image_tower(&mut store, "image", cfg, 3, 1);
        init_heads(&mut store, cfg.d_model, cfg.d_model, 9, 3, 1);
        store
    }

    #[test]
    fn gate_is_half_half_when_scores_tie_and_shifts_with_ln2() {
        let cfg = tiny_cfg(4);
        let mut store = full_store(&cfg);
        let d = cfg.d_model;
        store.set("heads.gate.wt", Tensor::zeros(vec![d, 1])).unwrap();
        store.set("heads.gate.wi", Tensor::zeros(vec![d, 1])).unwrap();
        let v = vocab();
        let gate_for = |store: &ParamStore| -> Vec<f64> {
            let mut g = Graph::inference();
            let bind = ParamBinding::new(store);
            let seq = tokenize(&v, "alpha beta", Segment::Title, 4).unwrap();
            let t_out = encode_text(&mut g, &bind, "title", &cfg, &seq).unwrap();
            let patches = g.constant(Tensor::randn(vec![4, 3], 0.5, 2));
            let i_out = encode_image(&mut g, &bind, "image", &cfg, patches).unwrap();
            let (_, gate) = product_embedding(&mut g, &bind, &t_out, &i_out).unwrap();
            g.value(gate).data().to_vec()
        };
        let gate = gate_for(&store);
        assert!((gate[0] - 0.5).abs() < 1e-12);
        assert!((gate[1] - 0.5).abs() < 1e-12);

        // A title score ln 2 above the image score gives weights [2/3, 1/3].
        store
            .set("heads.gate.bt", Tensor::new(vec![1], vec![2.0f64.ln()]).unwrap())
            .unwrap();
        let gate = gate_for(&store);
        assert!((gate[0] - 2.0 / 3.0).abs() < 1e-12, "gate {gate:?}");
        assert!((gate[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let cfg = tiny_cfg(8);
        let store = full_store(&cfg);
        let v = vocab();
        let mut g = Graph::inference();
        let bind = ParamBinding::new(&store);
        let q = tokenize(&v, "gamma", Segment::Query, 8).unwrap();
        let q_out = encode_text(&mut g, &bind, "query", &cfg, &q).unwrap();
        let u = query_embedding(&mut g, &bind, &q_out).unwrap();
        let norm: f64 = g.value(u).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        let t = tokenize(&v, "alpha beta gamma", Segment::Title, 8).unwrap();
        let t_out = encode_text(&mut g, &bind, "title", &cfg, &t).unwrap();
        let patches = g.constant(Tensor::randn(vec![4, 3], 0.5, 9));
        let i_out = encode_image(&mut g, &bind, "image", &cfg, patches).unwrap();
        let (pv, gate) = product_embedding(&mut g, &bind, &t_out, &i_out).unwrap();
        let norm: f64 = g.value(pv).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let gw = g.value(gate).data();
        assert!((gw[0] + gw[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_projection_is_a_degenerate_input_error() {
        let cfg = tiny_cfg(4);
        let mut store = full_store(&cfg);
        let d = cfg.d_model;
        store
            .set("heads.product_proj.w", Tensor::zeros(vec![d, d]))
            .unwrap();
        store
            .set("heads.product_proj.b", Tensor::zeros(vec![d]))
            .unwrap();
        let v = vocab();
        let mut g = Graph::inference();
        let bind = ParamBinding::new(&store);
        let seq = tokenize(&v, "alpha", Segment::Title, 4).unwrap();
        let t_out = encode_text(&mut g, &bind, "title", &cfg, &seq).unwrap();
        let patches = g.constant(Tensor::randn(vec![4, 3], 0.5, 2));
        let i_out = encode_image(&mut g, &bind, "image", &cfg, patches).unwrap();
        assert!(matches!(
            product_embedding(&mut g, &bind, &t_out, &i_out),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn every_tower_parameter_passes_finite_difference_checks() {
        let cfg = EncoderConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            max_len: 3,
        };
        let mut store = full_store(&cfg);
        let v = vocab();
        let q = tokenize(&v, "alpha beta", Segment::Query, 3).unwrap();
        let t = tokenize(&v, "gamma delta", Segment::Title, 3).unwrap();
        let patch_t = Tensor::randn(vec![2, 3], 0.5, 33);
        let rel = check_param_gradients(
            &mut store,
            |g, bind| {
                let q_out = encode_text(g, bind, "query", &cfg, &q)?;
                let u = query_embedding(g, bind, &q_out)?;
                let t_out = encode_text(g, bind, "title", &cfg, &t)?;
                let patches = g.constant(patch_t.clone());
                let i_out = encode_image(g, bind, "image", &cfg, patches)?;
                let (pv, _) = product_embedding(g, bind, &t_out, &i_out)?;
                let prod = g.mul(u, pv)?;
                g.sum_all(prod)
            },
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-3, "rel err {rel}");
    }
}
