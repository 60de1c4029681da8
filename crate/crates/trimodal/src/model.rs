//! Model assembly: one configuration covering the three towers, the fusion
//! stack, and the heads, plus the forward paths shared by training and
//! serving.

use serde::{Deserialize, Serialize};

use crate::corpus::Product;
use crate::encoder::{
    encode_image, encode_text, init_heads, init_image_tower, init_text_tower, linear,
    patches_to_tensor, product_embedding, query_embedding, EncoderConfig, EncoderOutput,
};
use crate::error::{Error, Result};
use crate::fusion::{init_fusion, FusionConfig, FusionDirection};
use crate::loss::{mlm_loss, mpm_loss};
use crate::tensor::{Graph, ParamBinding, ParamStore, Var};
use crate::text::{apply_mlm_mask, apply_mpm_mask, tokenize, PatchSequence, Segment, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub fusion_layers: usize,
    /// Dimension of the retrieval embeddings.
    pub d_embed: usize,
    /// Dimension of the raw patch features.
    pub d_img: usize,
    pub max_query_len: usize,
    pub max_title_len: usize,
    pub max_patches: usize,
    pub fusion_direction: FusionDirection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            fusion_layers: 2,
            d_embed: 32,
            d_img: 32,
            max_query_len: 16,
            max_title_len: 48,
            max_patches: 16,
            fusion_direction: FusionDirection::QueryReadsFused,
        }
    }
}

impl ModelConfig {
    pub fn query_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_query_len,
        }
    }

    pub fn title_encoder(&self) -> EncoderConfig {
        EncoderConfig { max_len: self.max_title_len, ..self.query_encoder() }
    }

    pub fn image_encoder(&self) -> EncoderConfig {
        EncoderConfig { max_len: self.max_patches, ..self.query_encoder() }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            n_layers: self.fusion_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            direction: self.fusion_direction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.query_encoder().validate()?;
        self.title_encoder().validate()?;
        self.image_encoder().validate()?;
        self.fusion().validate()?;
        if self.d_embed == 0 {
            return Err(Error::InvalidParameter("d_embed must be positive".into()));
        }
        if self.d_img == 0 {
            return Err(Error::InvalidParameter("d_img must be positive".into()));
        }
        Ok(())
    }
}

/// Initializes every parameter of the model under derived per-tensor seeds.
pub fn init_model(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, seed: u64) {
    init_text_tower(store, "query", &cfg.query_encoder(), vocab_size, seed);
    init_text_tower(store, "title", &cfg.title_encoder(), vocab_size, seed);
    init_image_tower(store, "image", &cfg.image_encoder(), cfg.d_img, seed);
    init_heads(store, cfg.d_model, cfg.d_embed, vocab_size, cfg.d_img, seed);
    init_fusion(store, &cfg.fusion(), seed);
}

/// Clean product-side forward: both towers, the gate, and the catalog
/// embedding. No query is involved anywhere on this path.
pub struct ProductForward {
    pub title: EncoderOutput,
    pub image: EncoderOutput,
    /// `[1, d_embed]`, unit norm.
    pub embedding: Var,
    /// `[1, 2]` softmax weights `[title, image]`.
    pub gate: Var,
}

pub fn forward_product(
    g: &mut Graph,
    bind: &ParamBinding,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    product: &Product,
) -> Result<ProductForward> {
    let title_seq = tokenize(vocab, &product.title, Segment::Title, cfg.max_title_len)?;
    let title = encode_text(g, bind, "title", &cfg.title_encoder(), &title_seq)?;
    let patches = PatchSequence::new(product.patches.clone())?;
    if patches.dim() != cfg.d_img {
        return Err(Error::ShapeMismatch {
            op: "forward_product",
            lhs: vec![cfg.d_img],
            rhs: vec![patches.dim()],
        });
    }
    let pv = g.constant(patches_to_tensor(&patches)?);
    let image = encode_image(g, bind, "image", &cfg.image_encoder(), pv)?;
    let (embedding, gate) = product_embedding(g, bind, &title, &image)?;
    Ok(ProductForward { title, image, embedding, gate })
}

pub struct QueryForward {
    pub output: EncoderOutput,
    /// `[1, d_embed]`, unit norm.
    pub embedding: Var,
}

pub fn forward_query(
    g: &mut Graph,
    bind: &ParamBinding,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    query: &str,
) -> Result<QueryForward> {
    let seq = tokenize(vocab, query, Segment::Query, cfg.max_query_len)?;
    let output = encode_text(g, bind, "query", &cfg.query_encoder(), &seq)?;
    let embedding = query_embedding(g, bind, &output)?;
    Ok(QueryForward { output, embedding })
}

/// Masked-token loss for one text: mask, re-encode, decode with the tower's
/// token head, score against the original tokens.
pub fn masked_text_loss(
    g: &mut Graph,
    bind: &ParamBinding,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    text: &str,
    segment: Segment,
    rate: f64,
    seed: u64,
) -> Result<Var> {
    let (prefix, enc_cfg, head) = match segment {
        Segment::Query => ("query", cfg.query_encoder(), "heads.mlm.query"),
        Segment::Title => ("title", cfg.title_encoder(), "heads.mlm.title"),
        Segment::Image => {
            return Err(Error::InvalidParameter("image segment has no token loss".into()))
        }
    };
    let clean = tokenize(vocab, text, segment, enc_cfg.max_len)?;
    let masked = apply_mlm_mask(vocab, &clean, rate, seed)?;
    let labels = masked.mlm_labels.clone().expect("apply_mlm_mask sets labels");
    let out = encode_text(g, bind, prefix, &enc_cfg, &masked)?;
    let logits = linear(g, bind, &format!("{head}.w"), &format!("{head}.b"), out.hidden)?;
    mlm_loss(g, logits, &labels)
}

/// Masked-patch loss: zero a random subset of patches, re-encode, predict
/// the original features with the patch head at the masked rows.
pub fn masked_patch_loss(
    g: &mut Graph,
    bind: &ParamBinding,
    cfg: &ModelConfig,
    product: &Product,
    rate: f64,
    seed: u64,
) -> Result<Var> {
    let clean = PatchSequence::new(product.patches.clone())?;
    let masked = apply_mpm_mask(&clean, rate, seed)?;
    let pv = g.constant(patches_to_tensor(&masked)?);
    let out = encode_image(g, bind, "image", &cfg.image_encoder(), pv)?;
    let n = masked.num_patches();
    let patch_hidden = g.slice_rows(out.hidden, 1, n + 1)?;
    let predicted = linear(g, bind, "heads.mpm.w", "heads.mpm.b", patch_hidden)?;
    let targets = patches_to_tensor(&clean)?;
    mpm_loss(g, predicted, &targets, &masked.mpm_mask)
}

/// Collects per-row `[1, d]` vars into one `[n, d]` matrix.
pub fn stack_rows(g: &mut Graph, rows: &[Var]) -> Result<Var> {
    g.concat_rows(rows)
}

/// Serving-path product embedding for one product, values only.
pub fn product_vector(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    product: &Product,
) -> Result<(Vec<f64>, [f64; 2])> {
    let mut g = Graph::inference();
    let bind = ParamBinding::new(store);
    let fwd = forward_product(&mut g, &bind, cfg, vocab, product)?;
    let emb = g.value(fwd.embedding).data().to_vec();
    let gate = g.value(fwd.gate).data();
    Ok((emb, [gate[0], gate[1]]))
}

/// Serving-path query embedding, values only.
pub fn query_vector(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    query: &str,
) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let bind = ParamBinding::new(store);
    let fwd = forward_query(&mut g, &bind, cfg, vocab, query)?;
    Ok(g.value(fwd.embedding).data().to_vec())
}

/// Builds the vocabulary a corpus needs and a store with every parameter
/// initialized from `seed`.
pub fn fresh_model(
    corpus: &[Product],
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(Vocabulary, ParamStore)> {
    cfg.validate()?;
    let vocab = crate::corpus::build_vocabulary(corpus);
    let mut store = ParamStore::new();
    init_model(&mut store, cfg, vocab.len(), seed);
    Ok((vocab, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};
    use crate::tensor::seed_for;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            fusion_layers: 1,
            d_embed: 6,
            d_img: 4,
            max_query_len: 8,
            max_title_len: 16,
            max_patches: 6,
            fusion_direction: FusionDirection::QueryReadsFused,
        }
    }

    fn tiny_corpus() -> Vec<Product> {
        let cfg = GenConfig {
            n_categories: 2,
            products_per_category: 3,
            queries_per_product: 2,
            n_patches: 4,
            d_img: 4,
            title_len: 6,
            ..GenConfig::default()
        };
        generate(&cfg).unwrap()
    }

    #[test]
    fn init_model_covers_all_towers() {
        let corpus = tiny_corpus();
        let cfg = tiny_model();
        let (vocab, store) = fresh_model(&corpus, &cfg, 1).unwrap();
        for name in [
            "query.tok_emb",
            "title.tok_emb",
            "image.patch_proj.w",
            "heads.query_proj.w",
            "heads.product_proj.w",
            "heads.gate.wt",
            "heads.mlm.query.w",
            "heads.mlm.title.w",
            "heads.mpm.w",
            "fusion.l0.self_ln.g",
            "heads.qpc.w",
        ] {
            assert!(store.contains(name), "missing {name}");
        }
        assert_eq!(store.get("query.tok_emb").unwrap().rows(), vocab.len());
    }

    #[test]
    fn forward_paths_produce_unit_embeddings() {
        let corpus = tiny_corpus();
        let cfg = tiny_model();
        let (vocab, store) = fresh_model(&corpus, &cfg, 2).unwrap();
        let mut g = Graph::new();
        let bind = ParamBinding::new(&store);
        let pf = forward_product(&mut g, &bind, &cfg, &vocab, &corpus[0]).unwrap();
        let qf = forward_query(&mut g, &bind, &cfg, &vocab, &corpus[0].queries[0]).unwrap();
        for v in [pf.embedding, qf.embedding] {
            let norm = g.value(v).l2_norm();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        }
        let gate = g.value(pf.gate).data();
        assert!((gate[0] + gate[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_losses_are_finite_and_deterministic() {
        let corpus = tiny_corpus();
        let cfg = tiny_model();
        let (vocab, store) = fresh_model(&corpus, &cfg, 3).unwrap();
        let run = || {
            let mut g = Graph::new();
            let bind = ParamBinding::new(&store);
            let lt = masked_text_loss(
                &mut g,
                &bind,
                &cfg,
                &vocab,
                &corpus[0].title,
                Segment::Title,
                0.4,
                seed_for(9, "mlm"),
            )
            .unwrap();
            let lq = masked_text_loss(
                &mut g,
                &bind,
                &cfg,
                &vocab,
                &corpus[0].queries[0],
                Segment::Query,
                0.4,
                seed_for(9, "mlm.q"),
            )
            .unwrap();
            let lp =
                masked_patch_loss(&mut g, &bind, &cfg, &corpus[0], 0.5, seed_for(9, "mpm"))
                    .unwrap();
            (
                g.value(lt).data()[0],
                g.value(lq).data()[0],
                g.value(lp).data()[0],
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.0.is_finite() && a.1.is_finite() && a.2.is_finite());
        assert!(a.2 > 0.0);
    }

    #[test]
    fn product_vector_ignores_query_tower() {
        let corpus = tiny_corpus();
        let cfg = tiny_model();
        let (vocab, mut store) = fresh_model(&corpus, &cfg, 4).unwrap();
        let (before, gate_before) = product_vector(&store, &cfg, &vocab, &corpus[1]).unwrap();

        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("query.") || n.starts_with("heads.query_proj"))
            .map(|s| s.to_string())
            .collect();
        assert!(!names.is_empty());
        for name in names {
            let mut t = store.get(&name).unwrap().clone();
            for x in t.data_mut() {
                *x += 1.0;
            }
            store.set(&name, t).unwrap();
        }

        let (after, gate_after) = product_vector(&store, &cfg, &vocab, &corpus[1]).unwrap();
        assert_eq!(before, after);
        assert_eq!(gate_before, gate_after);

        let q_before = query_vector(&store, &cfg, &vocab, &corpus[1].queries[0]).unwrap();
        let norm = q_before.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_patch_dimension_mismatch() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_model();
        cfg.d_img = 5;
        let (vocab, store) = fresh_model(&corpus, &cfg, 5).unwrap();
        let mut g = Graph::new();
        let bind = ParamBinding::new(&store);
        assert!(matches!(
            forward_product(&mut g, &bind, &cfg, &vocab, &corpus[0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
