//! Query-conditioned fusion of the title and image token streams, the
//! classification head on top of it, and hard-negative selection.
//!
//! Each fusion layer runs three sublayers: self-attention over the
//! concatenated title+image stream, cross-attention between that stream and
//! the query stream, and a feed-forward update, all pre-norm with residuals.
//! Which stream asks and which answers in the cross-attention step is
//! configurable; the default has the query stream read from the fused
//! stream, so the output is query-aligned and its position 0 serves as the
//! joint CLS. The cross-attention weights are also the measurement surface
//! for how much of the model's attention lands on title versus image keys.

use crate::encoder::{
    attention_with_weights, feed_forward, init_attention, init_layer_norm, layer_norm, linear,
    multi_head_attention, EncoderOutput,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamBinding, ParamStore, Tensor, Var};

/// Which stream supplies the attention queries in the cross-attention step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionDirection {
    /// Query stream reads from the fused title+image stream (default).
    QueryReadsFused,
    /// Fused stream reads from the query stream; the joint CLS then lives
    /// at position 0 of the fused stream (the title CLS slot).
    FusedReadsQuery,
}

impl FusionDirection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "query-reads-fused" => Ok(FusionDirection::QueryReadsFused),
            "fused-reads-query" => Ok(FusionDirection::FusedReadsQuery),
            other => Err(Error::Config(format!("unknown fusion direction {other:?}"))),
        }
    }
}

/// Diagnostic override that masks one modality's keys out of the attention
/// step the modality statistics are measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionHook {
    #[default]
    None,
    /// Only title keys visible.
    TitleOnly,
    /// Only image keys visible.
    ImageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub direction: FusionDirection,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!(
                    "fusion {name} must be positive"
                )));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "fusion d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

pub struct FusionOutput {
    /// `[L, d_model]` of the output stream after the final layer norm.
    pub joint_hidden: Var,
    /// `[1, d_model]`, row 0 of `joint_hidden`.
    pub joint_cls: Var,
    /// `[mass on title keys, mass on image keys]`, averaged over layers,
    /// heads, and non-pad attention-query rows. Nonnegative, sums to 1.
    pub modality_attention: [f64; 2],
}

pub fn init_fusion(store: &mut ParamStore, cfg: &FusionConfig, seed: u64) {
    let d = cfg.d_model;
    for i in 0..cfg.n_layers {
        let p = format!("fusion.l{i}");
        init_layer_norm(store, &format!("{p}.self_ln"), d);
        init_attention(store, &format!("{p}.self_attn"), d, seed);
        init_layer_norm(store, &format!("{p}.cross_ln"), d);
        init_attention(store, &format!("{p}.cross_attn"), d, seed);
        init_layer_norm(store, &format!("{p}.ff_ln"), d);
        store.init_randn(&format!("{p}.ff.w1"), vec![d, cfg.d_ff], 0.02, seed);
        store.init_const(&format!("{p}.ff.b1"), vec![cfg.d_ff], 0.0);
        store.init_randn(&format!("{p}.ff.w2"), vec![cfg.d_ff, d], 0.02, seed);
        store.init_const(&format!("{p}.ff.b2"), vec![d], 0.0);
    }
    init_layer_norm(store, "fusion.lnf", d);
    store.init_randn("heads.qpc.w", vec![d, 1], 0.02, seed);
    store.init_const("heads.qpc.b", vec![1], 0.0);
}

/// Fuses the three encoder outputs into a joint representation.
///
/// `hook` masks one modality's keys out of the measured attention step;
/// it exists so experiments can confirm the modality statistics respond
/// to a forced saturation.
pub fn modal_adapt(
    g: &mut Graph,
    bind: &ParamBinding,
    cfg: &FusionConfig,
    query_out: &EncoderOutput,
    title_out: &EncoderOutput,
    image_out: &EncoderOutput,
    hook: FusionHook,
) -> Result<FusionOutput> {
    cfg.validate()?;
    let dq = g.value(query_out.hidden).cols();
    let dt = g.value(title_out.hidden).cols();
    let di = g.value(image_out.hidden).cols();
    if dq != cfg.d_model || dt != cfg.d_model || di != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "modal_adapt",
            lhs: vec![dq, dt],
            rhs: vec![di, cfg.d_model],
        });
    }
    let lt = g.value(title_out.hidden).rows();

    let mut fused = g.concat_rows(&[title_out.hidden, image_out.hidden])?;
    let mut fused_mask = title_out.attention_mask.clone();
    fused_mask.extend_from_slice(&image_out.attention_mask);

    // The mask used by the attention step modality statistics are read from,
    // with the hook's modality restriction applied.
    let mut measured_mask = fused_mask.clone();
    match hook {
        FusionHook::None => {}
        FusionHook::TitleOnly => {
            measured_mask[lt..].iter_mut().for_each(|m| *m = 0.0);
            if measured_mask.iter().all(|&m| m == 0.0) {
                return Err(Error::DegenerateInput(
                    "title-only hook with no real title keys".into(),
                ));
            }
        }
        FusionHook::ImageOnly => {
            measured_mask[..lt].iter_mut().for_each(|m| *m = 0.0);
            if measured_mask.iter().all(|&m| m == 0.0) {
                return Err(Error::DegenerateInput(
                    "image-only hook with no real image keys".into(),
                ));
            }
        }
    }

    let mut query_stream = query_out.hidden;
    let mut title_mass = 0.0;
    let mut image_mass = 0.0;

    for i in 0..cfg.n_layers {
        let p = format!("fusion.l{i}");
        match cfg.direction {
            FusionDirection::QueryReadsFused => {
                let sa_in = layer_norm(g, bind, &format!("{p}.self_ln"), fused)?;
                let sa = multi_head_attention(
                    g,
                    bind,
                    &format!("{p}.self_attn"),
                    cfg.n_heads,
                    sa_in,
                    sa_in,
                    &fused_mask,
                )?;
                fused = g.add(fused, sa)?;

                let ca_q = layer_norm(g, bind, &format!("{p}.cross_ln"), query_stream)?;
                let (ca, head_probs) = attention_with_weights(
                    g,
                    bind,
                    &format!("{p}.cross_attn"),
                    cfg.n_heads,
                    ca_q,
                    fused,
                    &measured_mask,
                )?;
                accumulate_modality_mass(
                    g,
                    &head_probs,
                    &query_out.attention_mask,
                    lt,
                    &mut title_mass,
                    &mut image_mass,
                );
                query_stream = g.add(query_stream, ca)?;

                let ff_in = layer_norm(g, bind, &format!("{p}.ff_ln"), query_stream)?;
                let ff = feed_forward(g, bind, &format!("{p}.ff"), ff_in)?;
                query_stream = g.add(query_stream, ff)?;
            }
            FusionDirection::FusedReadsQuery => {
                let sa_in = layer_norm(g, bind, &format!("{p}.self_ln"), fused)?;
                let (sa, head_probs) = attention_with_weights(
                    g,
                    bind,
                    &format!("{p}.self_attn"),
                    cfg.n_heads,
                    sa_in,
                    sa_in,
                    &measured_mask,
                )?;
                accumulate_modality_mass(
                    g,
                    &head_probs,
                    &fused_mask,
                    lt,
                    &mut title_mass,
                    &mut image_mass,
                );
                fused = g.add(fused, sa)?;

                let ca_q = layer_norm(g, bind, &format!("{p}.cross_ln"), fused)?;
                let ca = multi_head_attention(
                    g,
                    bind,
                    &format!("{p}.cross_attn"),
                    cfg.n_heads,
                    ca_q,
                    query_stream,
                    &query_out.attention_mask,
                )?;
                fused = g.add(fused, ca)?;

                let ff_in = layer_norm(g, bind, &format!("{p}.ff_ln"), fused)?;
                let ff = feed_forward(g, bind, &format!("{p}.ff"), ff_in)?;
                fused = g.add(fused, ff)?;
            }
        }
    }

    let out_stream = match cfg.direction {
        FusionDirection::QueryReadsFused => query_stream,
        FusionDirection::FusedReadsQuery => fused,
    };
    let joint_hidden = layer_norm(g, bind, "fusion.lnf", out_stream)?;
    let joint_cls = g.slice_rows(joint_hidden, 0, 1)?;

    let total = title_mass + image_mass;
    let modality_attention = if total > 0.0 {
        [title_mass / total, image_mass / total]
    } else {
        [0.5, 0.5]
    };
    Ok(FusionOutput {
        joint_hidden,
        joint_cls,
        modality_attention,
    })
}

/// Adds each non-pad attention-query row's probability mass on title keys
/// (columns `< lt`) and image keys (columns `>= lt`) into the accumulators.
/// Per row the two masses sum to 1, so the normalized totals are the mean
/// over rows, heads, and layers.
fn accumulate_modality_mass(
    g: &Graph,
    head_probs: &[Var],
    row_mask: &[f64],
    lt: usize,
    title_mass: &mut f64,
    image_mass: &mut f64,
) {
    for &probs in head_probs {
        let t = g.value(probs);
        let cols = t.cols();
        for (r, &m) in row_mask.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let row = t.row(r);
            *title_mass += row[..lt.min(cols)].iter().sum::<f64>();
            *image_mass += row[lt.min(cols)..].iter().sum::<f64>();
        }
    }
}

/// Binary classification probability from the joint CLS. The paired
/// `qpc_logit` is what the loss consumes; the sigmoid here is saturating
/// but never over- or underflows.
pub fn qpc_head(g: &mut Graph, bind: &ParamBinding, joint_cls: Var) -> Result<Var> {
    let logit = qpc_logit(g, bind, joint_cls)?;
    g.sigmoid(logit)
}

pub fn qpc_logit(g: &mut Graph, bind: &ParamBinding, joint_cls: Var) -> Result<Var> {
    linear(g, bind, "heads.qpc.w", "heads.qpc.b", joint_cls)
}

/// For each row of a query-to-product similarity matrix, the most similar
/// product not marked positive for that row; `None` where every product is
/// positive. Reuses the similarity matrix already computed for the
/// contrastive loss, so no additional encoder passes happen here.
///
/// Ties break toward the lowest index.
pub fn select_hard_negative(sim: &Tensor, positives: &[Vec<bool>]) -> Result<Vec<Option<usize>>> {
    let n = sim.rows();
    let m = sim.cols();
    if positives.len() != n || positives.iter().any(|row| row.len() != m) {
        return Err(Error::ShapeMismatch {
            op: "select_hard_negative",
            lhs: vec![n, m],
            rhs: vec![positives.len()],
        });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = sim.row(i);
        let mut best: Option<(usize, f64)> = None;
        for (j, &s) in row.iter().enumerate() {
            if positives[i][j] {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bs)) => s > bs,
            };
            if better {
                best = Some((j, s));
            }
        }
        if best.is_none() {
            eprintln!("warning: row {i} has no non-positive product, skipping hard negative");
        }
        out.push(best.map(|(j, _)| j));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LN_EPS;
    use crate::tensor::check_param_gradients;

    fn cfg(d: usize, heads: usize) -> FusionConfig {
        FusionConfig {
            n_layers: 1,
            d_model: d,
            n_heads: heads,
            d_ff: 8,
            direction: FusionDirection::QueryReadsFused,
        }
    }

    fn init(cfg: &FusionConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_fusion(&mut store, cfg, seed);
        store
    }

    fn stream(g: &mut Graph, t: Tensor, mask: Vec<f64>) -> EncoderOutput {
        let hidden = g.constant(t);
        let cls = g.slice_rows(hidden, 0, 1).unwrap();
        EncoderOutput {
            hidden,
            cls,
            attention_mask: mask,
        }
    }

    #[test]
    fn identical_streams_split_attention_evenly() {
        let c = cfg(4, 2);
        let store = init(&c, 7);
        let mut g = Graph::inference();
        let bind = ParamBinding::new(&store);
        let content = Tensor::randn(vec![3, 4], 0.7, 5);
        let q = stream(&mut g, Tensor::randn(vec![2, 4], 0.7, 6), vec![1.0, 1.0]);
        let t = stream(&mut g, content.clone(), vec![1.0; 3]);
        let i = stream(&mut g, content, vec![1.0; 3]);
        let out = modal_adapt(&mut g, &bind, &c, &q, &t, &i, FusionHook::None).unwrap();
        let [a_t, a_i] = out.modality_attention;
        assert!((a_t - 0.5).abs() < 1e-6, "title mass {a_t}");
        assert!((a_i - 0.5).abs() < 1e-6);
    }

    #[test]
    fn hooks_force_modality_saturation() {
        let c = cfg(4, 2);
        let store = init(&c, 7);
        let run = |hook: FusionHook| {
            let mut g = Graph::inference();
            let bind = ParamBinding::new(&store);
            let q = stream(&mut g, Tensor::randn(vec![2, 4], 0.7, 1), vec![1.0, 1.0]);
            let t = stream(&mut g, Tensor::randn(vec![3, 4], 0.7, 2), vec![1.0; 3]);
            let i = stream(&mut g, Tensor::randn(vec![3, 4], 0.7, 3), vec![1.0; 3]);
            modal_adapt(&mut g, &bind, &c, &q, &t, &i, hook)
                .unwrap()
                .modality_attention
        };
        assert_eq!(run(FusionHook::TitleOnly), [1.0, 0.0]);
        assert_eq!(run(FusionHook::ImageOnly), [0.0, 1.0]);
    }

    #[test]
    fn single_layer_matches_hand_computed_forward() {
        // Same trick as the encoder block oracle: zero query/key weights
        // make both attention steps uniform over real keys, identity
        // value/output weights turn them into plain averages, and a zero
        // first feed-forward weight removes the FF term.
        let d = 4;
        let c = cfg(d, 1);
        let mut store = init(&c, 0);
        let zero = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, vec![0.0; n]).unwrap()
        };
        let eye = {
            let mut data = vec![0.0; d * d];
            for k in 0..d {
                data[k * d + k] = 1.0;
            }
            Tensor::new(vec![d, d], data).unwrap()
        };
        for attn in ["self_attn", "cross_attn"] {
            store.set(&format!("fusion.l0.{attn}.wq"), zero(vec![d, d])).unwrap();
            store.set(&format!("fusion.l0.{attn}.wk"), zero(vec![d, d])).unwrap();
            store.set(&format!("fusion.l0.{attn}.wv"), eye.clone()).unwrap();
            store.set(&format!("fusion.l0.{attn}.wo"), eye.clone()).unwrap();
        }
        store.set("fusion.l0.ff.w1", zero(vec![d, 8])).unwrap();

        let qv = [0.2, -0.4, 1.0, 0.6];
        let tv = [1.0, 2.0, 3.0, 4.0];
        let iv = [0.5, -1.0, 2.0, 0.0];
        let mut g = Graph::inference();
        let bind = ParamBinding::new(&store);
        let q = stream(&mut g, Tensor::new(vec![1, d], qv.to_vec()).unwrap(), vec![1.0]);
        let t = stream(&mut g, Tensor::new(vec![1, d], tv.to_vec()).unwrap(), vec![1.0]);
        let i = stream(&mut g, Tensor::new(vec![1, d], iv.to_vec()).unwrap(), vec![1.0]);
        let out = modal_adapt(&mut g, &bind, &c, &q, &t, &i, FusionHook::None).unwrap();
        let got = g.value(out.joint_cls).data().to_vec();

        let ln = |row: &[f64]| -> Vec<f64> {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter().map(|x| (x - m) * inv).collect()
        };
        // Fused self-attention: uniform average of the LN'd rows, added back.
        let lt = ln(&tv);
        let li = ln(&iv);
        let sa: Vec<f64> = (0..d).map(|k| 0.5 * (lt[k] + li[k])).collect();
        let t1: Vec<f64> = (0..d).map(|k| tv[k] + sa[k]).collect();
        let i1: Vec<f64> = (0..d).map(|k| iv[k] + sa[k]).collect();
        // Cross-attention: the query row reads a uniform average of the
        // updated fused rows; FF contributes nothing.
        let ca: Vec<f64> = (0..d).map(|k| 0.5 * (t1[k] + i1[k])).collect();
        let q1: Vec<f64> = (0..d).map(|k| qv[k] + ca[k]).collect();
        let want = ln(&q1);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "got {a}, want {b}");
        }
        assert_eq!(out.modality_attention, [0.5, 0.5]);
    }

    #[test]
    fn padding_any_stream_leaves_joint_cls_unchanged() {
        let c = cfg(4, 2);
        let store = init(&c, 9);
        let base_q = Tensor::randn(vec![2, 4], 0.7, 11);
        let base_t = Tensor::randn(vec![3, 4], 0.7, 12);
        let base_i = Tensor::randn(vec![2, 4], 0.7, 13);
        let pad_rows = |t: &Tensor, extra: usize| {
            let mut rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
            for _ in 0..extra {
                rows.push(vec![9.0; t.cols()]);
            }
            Tensor::from_rows(&rows).unwrap()
        };
        let run = |qt: &Tensor, qm: Vec<f64>, tt: &Tensor, tm: Vec<f64>, it: &Tensor, im: Vec<f64>| {
            let mut g = Graph::inference();
            let bind = ParamBinding::new(&store);
            let q = stream(&mut g, qt.clone(), qm);
            let t = stream(&mut g, tt.clone(), tm);
            let i = stream(&mut g, it.clone(), im);
            let out = modal_adapt(&mut g, &bind, &c, &q, &t, &i, FusionHook::None).unwrap();
            g.value(out.joint_cls).data().to_vec()
        };
        let baseline = run(
            &base_q, vec![1.0, 1.0],
            &base_t, vec![1.0; 3],
            &base_i, vec![1.0; 2],
        );
        let padded_t = run(
            &base_q, vec![1.0, 1.0],
            &pad_rows(&base_t, 2), vec![1.0, 1.0, 1.0, 0.0, 0.0],
            &base_i, vec![1.0; 2],
        );
        let padded_q = run(
            &pad_rows(&base_q, 1), vec![1.0, 1.0, 0.0],
            &base_t, vec![1.0; 3],
            &base_i, vec![1.0; 2],
        );
        let padded_i = run(
            &base_q, vec![1.0, 1.0],
            &base_t, vec![1.0; 3],
            &pad_rows(&base_i, 3), vec![1.0, 1.0, 0.0, 0.0, 0.0],
        );
        for (name, got) in [("title", padded_t), ("query", padded_q), ("image", padded_i)] {
            for (a, b) in baseline.iter().zip(&got) {
                assert!((a - b).abs() < 1e-6, "{name} padding moved cls: {a} vs {b}");
            }
        }
    }

    #[test]
    fn modality_attention_is_a_distribution_on_random_inputs() {
        let c = FusionConfig {
            n_layers: 2,
            ..cfg(4, 2)
        };
        let store = init(&c, 3);
        for seed in 0..10 {
            let mut g = Graph::inference();
            let bind = ParamBinding::new(&store);
            let q = stream(&mut g, Tensor::randn(vec![2, 4], 1.0, seed), vec![1.0, 1.0]);
            let t = stream(
                &mut g,
                Tensor::randn(vec![3, 4], 1.0, seed + 100),
                vec![1.0, 1.0, 0.0],
            );
            let i = stream(&mut g, Tensor::randn(vec![2, 4], 1.0, seed + 200), vec![1.0; 2]);
            let out = modal_adapt(&mut g, &bind, &c, &q, &t, &i, FusionHook::None).unwrap();
            let [a_t, a_i] = out.modality_attention;
            assert!(a_t >= 0.0 && a_i >= 0.0);
            assert!((a_t + a_i - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn alternate_direction_runs_and_produces_cls() {
        let c = FusionConfig {
            direction: FusionDirection::FusedReadsQuery,
            ..cfg(4, 2)
        };
        let store = init(&c, 5);
        let mut g = Graph::inference();
        let bind = ParamBinding::new(&store);
        let q = stream(&mut g, Tensor::randn(vec![2, 4], 0.7, 1), vec![1.0, 1.0]);
        let t = stream(&mut g, Tensor::randn(vec![3, 4], 0.7, 2), vec![1.0; 3]);
        let i = stream(&mut g, Tensor::randn(vec![2, 4], 0.7, 3), vec![1.0; 2]);
        let out = modal_adapt(&mut g, &bind, &c, &q, &t, &i, FusionHook::None).unwrap();
        assert_eq!(g.value(out.joint_cls).shape(), &[1, 4]);
        let [a_t, a_i] = out.modality_attention;
        assert!((a_t + a_i - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let c = cfg(4, 2);
        let store = init(&c, 0);
        let mut g = Graph::inference();
        let bind = ParamBinding::new(&store);
        let q = stream(&mut g, Tensor::randn(vec![1, 4], 0.7, 1), vec![1.0]);
        let t = stream(&mut g, Tensor::randn(vec![1, 4], 0.7, 2), vec![1.0]);
        let i = stream(&mut g, Tensor::randn(vec![1, 6], 0.7, 3), vec![1.0]);
        assert!(matches!(
            modal_adapt(&mut g, &bind, &c, &q, &t, &i, FusionHook::None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn qpc_head_matches_sigmoid_points() {
        let c = cfg(4, 2);
        let mut store = init(&c, 0);
        store.set("heads.qpc.w", Tensor::zeros(vec![4, 1])).unwrap();
        let prob_for = |store: &ParamStore| {
            let mut g = Graph::inference();
            let bind = ParamBinding::new(store);
            let cls = g.constant(Tensor::randn(vec![1, 4], 1.0, 4));
            let p = qpc_head(&mut g, &bind, cls).unwrap();
            g.value(p).data()[0]
        };
        assert_eq!(prob_for(&store), 0.5);
        store
            .set("heads.qpc.b", Tensor::new(vec![1], vec![3.0f64.ln()]).unwrap())
            .unwrap();
        assert!((prob_for(&store) - 0.75).abs() < 1e-12);
        store
            .set("heads.qpc.b", Tensor::new(vec![1], vec![-1000.0]).unwrap())
            .unwrap();
        let p = prob_for(&store);
        assert!(p >= 0.0 && p < 1e-9, "p {p}");
    }

    #[test]
    fn hard_negative_selection_follows_argmax_and_tie_rules() {
        let sim = Tensor::from_rows(&[
            vec![0.9, 0.1, 0.2],
            vec![0.1, 0.8, 0.7],
            vec![0.3, 0.2, 0.6],
        ])
        .unwrap();
        let diag = vec![
            vec![true, false, false],
            vec![false, true, false],
            vec![false, false, true],
        ];
        let picks = select_hard_negative(&sim, &diag).unwrap();
        assert_eq!(picks, vec![Some(2), Some(2), Some(0)]);

        let one = Tensor::from_rows(&[vec![0.4]]).unwrap();
        let picks = select_hard_negative(&one, &[vec![true]]).unwrap();
        assert_eq!(picks, vec![None]);

        let tie = Tensor::from_rows(&[vec![0.4, 0.5, 0.5]]).unwrap();
        let picks = select_hard_negative(&tie, &[vec![true, false, false]]).unwrap();
        assert_eq!(picks, vec![Some(1)]);
    }

    #[test]
    fn hard_negatives_never_hit_positives() {
        let sim = Tensor::randn(vec![6, 6], 1.0, 17);
        let mut positives = vec![vec![false; 6]; 6];
        for i in 0..6 {
            positives[i][i] = true;
            positives[i][(i + 1) % 6] = true;
        }
        let picks = select_hard_negative(&sim, &positives).unwrap();
        for (i, p) in picks.iter().enumerate() {
            let j = p.expect("negatives exist");
            assert!(!positives[i][j]);
        }
    }

    #[test]
    fn fusion_parameters_pass_finite_difference_checks() {
        let c = cfg(4, 2);
        let mut store = init(&c, 21);
        let qt = Tensor::randn(vec![2, 4], 0.6, 31);
        let tt = Tensor::randn(vec![2, 4], 0.6, 32);
        let it = Tensor::randn(vec![2, 4], 0.6, 33);
        let rel = check_param_gradients(
            &mut store,
            |g, bind| {
                let q = stream(g, qt.clone(), vec![1.0, 1.0]);
                let t = stream(g, tt.clone(), vec![1.0, 1.0]);
                let i = stream(g, it.clone(), vec![1.0, 1.0]);
                let out = modal_adapt(g, bind, &c, &q, &t, &i, FusionHook::None)?;
                let logit = qpc_logit(g, bind, out.joint_cls)?;
                g.sum_all(logit)
            },
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-3, "rel err {rel}");
    }
}
