//! Training loop: batch grouping, the combined objective under its ablation
//! modes, Adam with warmup-decay scheduling, and bitwise-resumable
//! checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{build_vocabulary, validate_corpus, Product};
use crate::error::{Error, Result};
use crate::fusion::{modal_adapt, qpc_head, select_hard_negative, FusionHook};
use crate::loss::{
    ke_qpm_group_loss, qpc_loss, qpm_loss_from_sim, similarity_matrix, total_loss, FrequencyTable,
    LossConfig,
};
use crate::model::{
    forward_product, forward_query, init_model, masked_patch_loss, masked_text_loss, ModelConfig,
};
use crate::tensor::{
    load_tensors, save_tensors, seed_for, Graph, ParamBinding, ParamStore, Precision, Tensor, Var,
};
use crate::text::{Segment, Vocabulary};

/// Which objective terms a run trains.
///
/// `make` is the full objective. `ibns` swaps the grouped contrastive term
/// for the plain in-batch softmax loss (`no-ke` is the same wiring under the
/// ablation's name). `no-ma` drops the fusion module and its classification
/// term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Make,
    Ibns,
    NoMa,
    NoKe,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "make" => Ok(LossMode::Make),
            "ibns" => Ok(LossMode::Ibns),
            "no-ma" => Ok(LossMode::NoMa),
            "no-ke" => Ok(LossMode::NoKe),
            other => Err(Error::InvalidParameter(format!(
                "unknown loss mode {other:?} (expected make, ibns, no-ma, or no-ke)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Make => "make",
            LossMode::Ibns => "ibns",
            LossMode::NoMa => "no-ma",
            LossMode::NoKe => "no-ke",
        }
    }

    /// Fusion forwards and the classification term run in this mode.
    pub fn uses_fusion(self) -> bool {
        matches!(self, LossMode::Make | LossMode::Ibns | LossMode::NoKe)
    }

    /// The contrastive term groups all M queries per product in this mode.
    pub fn uses_grouped_contrastive(self) -> bool {
        matches!(self, LossMode::Make | LossMode::NoMa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub loss_mode: LossMode,
    /// Product groups per batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Explicit step budget; overrides `epochs` when set.
    pub total_steps: Option<usize>,
    pub peak_lr: f64,
    pub warmup_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub mlm_rate: f64,
    pub mpm_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            loss_mode: LossMode::Make,
            batch_size: 64,
            epochs: 10,
            total_steps: None,
            peak_lr: 1e-4,
            warmup_iters: 2000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: Some(1.0),
            mlm_rate: 0.15,
            mpm_rate: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(
                "batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        if self.warmup_iters == 0 {
            return Err(Error::InvalidParameter("warmup_iters must be at least 1".into()));
        }
        if self.epochs == 0 && self.total_steps.is_none() {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParameter(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidParameter("eps must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        for (name, r) in [("mlm_rate", self.mlm_rate), ("mpm_rate", self.mpm_rate)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0,1), got {r}")));
            }
        }
        Ok(())
    }

    /// Optimizer steps the run will take on a corpus of `n_products`.
    /// Partial trailing batches are dropped so every batch stays full.
    pub fn resolved_total_steps(&self, n_products: usize) -> Result<usize> {
        let per_epoch = n_products / self.batch_size;
        if per_epoch == 0 {
            return Err(Error::DegenerateInput(format!(
                "{n_products} products cannot fill a batch of {}",
                self.batch_size
            )));
        }
        let total = self.total_steps.unwrap_or(self.epochs * per_epoch);
        if total == 0 {
            return Err(Error::InvalidParameter("run resolves to zero steps".into()));
        }
        if self.warmup_iters >= total {
            return Err(Error::InvalidParameter(format!(
                "warmup_iters {} must end before the final step {total}",
                self.warmup_iters
            )));
        }
        Ok(total)
    }
}

/// Linear warmup from 0 to `peak` over `warmup_iters`, then linear decay to
/// 0 at `total_steps`.
pub fn lr_schedule(step: usize, peak: f64, warmup_iters: usize, total_steps: usize) -> f64 {
    if step <= warmup_iters {
        peak * step as f64 / warmup_iters as f64
    } else if step >= total_steps {
        0.0
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup_iters) as f64
    }
}

/// First and second Adam moments, keyed like the parameter store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: AdamState,
    pub step: usize,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig, vocab_size: usize) -> Self {
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg.model, vocab_size, seed_for(cfg.seed, "init"));
        TrainState { store, adam: AdamState::default(), step: 0 }
    }
}

/// Per-step loss values in logging order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub mlm_query: f64,
    pub mlm_title: f64,
    pub mpm: f64,
    pub qpc: f64,
    /// The contrastive term: grouped form in `make`/`no-ma`, plain in-batch
    /// form in `ibns`/`no-ke`.
    pub contrastive: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_mlm_q,l_mlm_t,l_mpm,l_qpc,l_ke_qpm,total";

pub fn append_loss_csv(path: &Path, step: usize, c: &LossComponents) -> Result<()> {
    let mut out = String::new();
    if !path.exists() {
        out.push_str(LOSS_CSV_HEADER);
        out.push('\n');
    }
    out.push_str(&format!(
        "{step},{},{},{},{},{},{}\n",
        c.mlm_query, c.mlm_title, c.mpm, c.qpc, c.contrastive, c.total
    ));
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Deterministic product order for an epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed_for(seed, &format!("epoch{epoch}")));
    idx.shuffle(&mut rng);
    idx
}

/// Product indices making up the batch at `step`.
pub fn batch_indices(step: usize, n_products: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n_products / batch_size;
    let epoch = step / per_epoch;
    let pos = step % per_epoch;
    let order = epoch_order(n_products, seed, epoch);
    order[pos * batch_size..(pos + 1) * batch_size].to_vec()
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let stacked = g.concat_rows(parts)?;
    g.mean_all(stacked)
}

/// Maps a non-finite abort inside one objective's forward to a divergence
/// error naming that objective.
fn section<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::DivergedLoss { component: name.to_string() },
        other => other,
    })
}

/// One optimizer step over a batch of product groups.
pub fn train_step(
    state: &mut TrainState,
    corpus: &[Product],
    batch: &[usize],
    vocab: &Vocabulary,
    freq: &FrequencyTable,
    cfg: &TrainConfig,
    total_steps: usize,
) -> Result<LossComponents> {
    let n = batch.len();
    let m = cfg.loss.m;
    let step = state.step;
    let mut g = Graph::new();
    let bind = ParamBinding::new(&state.store);

    let w = cfg.loss.weights;
    let build_mlm_q = w.mlm_query > 0.0;
    let build_mlm_t = w.mlm_title > 0.0;
    let build_mpm = w.mpm > 0.0;
    let build_qpc = cfg.loss_mode.uses_fusion() && w.qpc > 0.0;
    let build_contrastive = w.ke_qpm > 0.0;

    let mut products = Vec::with_capacity(n);
    let mut rep_outputs = Vec::with_capacity(n);
    let mut group_queries = Vec::with_capacity(n);
    for &pi in batch {
        let product = &corpus[pi];
        if product.queries.len() < m {
            return Err(Error::Contract(format!(
                "product {} has {} queries, grouping needs {m}",
                product.product_id,
                product.queries.len()
            )));
        }
        let pf = forward_product(&mut g, &bind, &cfg.model, vocab, product)?;
        let mut qs = Vec::with_capacity(m);
        for (qi, qtext) in product.queries.iter().take(m).enumerate() {
            let qf = forward_query(&mut g, &bind, &cfg.model, vocab, qtext)?;
            if qi == 0 {
                rep_outputs.push(qf.output);
            }
            qs.push(qf.embedding);
        }
        products.push(pf);
        group_queries.push(qs);
    }

    let zero = g.scalar(0.0);
    let l_mlm_q = if build_mlm_q {
        let built = (|| {
            let parts: Vec<Var> = batch
                .iter()
                .enumerate()
                .map(|(i, &pi)| {
                    masked_text_loss(
                        &mut g,
                        &bind,
                        &cfg.model,
                        vocab,
                        &corpus[pi].queries[0],
                        Segment::Query,
                        cfg.mlm_rate,
                        seed_for(cfg.seed, &format!("mlm.q.{step}.{i}")),
                    )
                })
                .collect::<Result<_>>()?;
            mean_of(&mut g, &parts)
        })();
        section("mlm_query", built)?
    } else {
        zero
    };

    let l_mlm_t = if build_mlm_t {
        let built = (|| {
            let parts: Vec<Var> = batch
                .iter()
                .enumerate()
                .map(|(i, &pi)| {
                    masked_text_loss(
                        &mut g,
                        &bind,
                        &cfg.model,
                        vocab,
                        &corpus[pi].title,
                        Segment::Title,
                        cfg.mlm_rate,
                        seed_for(cfg.seed, &format!("mlm.t.{step}.{i}")),
                    )
                })
                .collect::<Result<_>>()?;
            mean_of(&mut g, &parts)
        })();
        section("mlm_title", built)?
    } else {
        zero
    };

    let l_mpm = if build_mpm {
        let built = (|| {
            let parts: Vec<Var> = batch
                .iter()
                .enumerate()
                .map(|(i, &pi)| {
                    masked_patch_loss(
                        &mut g,
                        &bind,
                        &cfg.model,
                        &corpus[pi],
                        cfg.mpm_rate,
                        seed_for(cfg.seed, &format!("mpm.{step}.{i}")),
                    )
                })
                .collect::<Result<_>>()?;
            mean_of(&mut g, &parts)
        })();
        section("mpm", built)?
    } else {
        zero
    };

    let need_sim = build_qpc || build_contrastive;
    let sim = if need_sim {
        let rep_embs: Vec<Var> = group_queries.iter().map(|qs| qs[0]).collect();
        let u = g.concat_rows(&rep_embs)?;
        let emb_rows: Vec<Var> = products.iter().map(|p| p.embedding).collect();
        let v = g.concat_rows(&emb_rows)?;
        Some(similarity_matrix(&mut g, u, v)?)
    } else {
        None
    };

    let contrastive_name =
        if cfg.loss_mode.uses_grouped_contrastive() { "ke_qpm" } else { "qpm" };
    let l_contrastive = if build_contrastive {
        let sim = sim.expect("similarity matrix built");
        if cfg.loss_mode.uses_grouped_contrastive() {
            let built = (|| {
                let nlps: Vec<f64> = batch
                    .iter()
                    .map(|&pi| freq.neg_log_prob(corpus[pi].product_id))
                    .collect::<Result<_>>()?;
                let parts: Vec<Var> = (0..n)
                    .map(|i| {
                        let u_pos = g.concat_rows(&group_queries[i])?;
                        let neg_rows: Vec<Var> = (0..n)
                            .filter(|&j| j != i)
                            .map(|j| products[j].embedding)
                            .collect();
                        let neg_nlp: Vec<f64> =
                            (0..n).filter(|&j| j != i).map(|j| nlps[j]).collect();
                        let negatives = if neg_rows.is_empty() {
                            None
                        } else {
                            Some(g.concat_rows(&neg_rows)?)
                        };
                        ke_qpm_group_loss(
                            &mut g,
                            &cfg.loss,
                            u_pos,
                            products[i].embedding,
                            negatives,
                            nlps[i],
                            &neg_nlp,
                        )
                    })
                    .collect::<Result<_>>()?;
                mean_of(&mut g, &parts)
            })();
            section("ke_qpm", built)?
        } else {
            section("qpm", qpm_loss_from_sim(&mut g, sim, cfg.loss.tau))?
        }
    } else {
        zero
    };

    let l_qpc = if build_qpc {
        let built = (|| {
            let sim = sim.expect("similarity matrix built");
            let sim_values = g.value(sim).clone();
            let positives: Vec<Vec<bool>> =
                (0..n).map(|i| (0..n).map(|j| j == i).collect()).collect();
            let hard = select_hard_negative(&sim_values, &positives)?;
            let fusion_cfg = cfg.model.fusion();
            let mut p_pos = Vec::new();
            let mut p_neg = Vec::new();
            for i in 0..n {
                let Some(j) = hard[i] else { continue };
                let pos = modal_adapt(
                    &mut g,
                    &bind,
                    &fusion_cfg,
                    &rep_outputs[i],
                    &products[i].title,
                    &products[i].image,
                    FusionHook::None,
                )?;
                let neg = modal_adapt(
                    &mut g,
                    &bind,
                    &fusion_cfg,
                    &rep_outputs[i],
                    &products[j].title,
                    &products[j].image,
                    FusionHook::None,
                )?;
                p_pos.push(qpc_head(&mut g, &bind, pos.joint_cls)?);
                p_neg.push(qpc_head(&mut g, &bind, neg.joint_cls)?);
            }
            if p_pos.is_empty() {
                return Ok(zero);
            }
            let pp = g.concat_rows(&p_pos)?;
            let pn = g.concat_rows(&p_neg)?;
            qpc_loss(&mut g, pp, pn)
        })();
        section("qpc", built)?
    } else {
        zero
    };

    let mut weights = [w.mlm_query, w.mlm_title, w.mpm, w.qpc, w.ke_qpm];
    if !cfg.loss_mode.uses_fusion() {
        weights[3] = 0.0;
    }
    let components = [
        ("mlm_query", l_mlm_q),
        ("mlm_title", l_mlm_t),
        ("mpm", l_mpm),
        ("qpc", l_qpc),
        (contrastive_name, l_contrastive),
    ];
    let total = total_loss(&mut g, &components, &weights)?;
    let stats = LossComponents {
        mlm_query: g.value(l_mlm_q).data()[0],
        mlm_title: g.value(l_mlm_t).data()[0],
        mpm: g.value(l_mpm).data()[0],
        qpc: g.value(l_qpc).data()[0],
        contrastive: g.value(l_contrastive).data()[0],
        total: g.value(total).data()[0],
    };

    g.backward(total)?;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, var) in bind.bound() {
        if let Some(grad) = g.grad(var) {
            grads.insert(name, grad.to_vec());
        }
    }

    let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_iters, total_steps);
    apply_adam(&mut state.store, &mut state.adam, &mut grads, lr, cfg, step + 1)?;
    state.step += 1;
    Ok(stats)
}

/// Clips by global norm, then applies one Adam update with bias correction.
fn apply_adam(
    store: &mut ParamStore,
    adam: &mut AdamState,
    grads: &mut BTreeMap<String, Vec<f64>>,
    lr: f64,
    cfg: &TrainConfig,
    t: usize,
) -> Result<()> {
    if let Some(clip) = cfg.grad_clip {
        let sq: f64 = grads.values().flat_map(|g| g.iter().map(|x| x * x)).sum();
        let norm = sq.sqrt();
        if norm > clip {
            let scale = clip / norm;
            for g in grads.values_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, grad) in grads.iter() {
        let mut theta = store.get(name)?.clone();
        if theta.numel() != grad.len() {
            return Err(Error::Contract(format!("gradient shape mismatch for {name}")));
        }
        let m = adam.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = adam.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let data = theta.data_mut();
        for k in 0..grad.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            data[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        store.set(name, theta)?;
    }
    Ok(())
}

/// Shared validation for fresh and resumed runs. Returns the vocabulary,
/// the frequency table, and the resolved step budget.
pub fn prepare(
    corpus: &[Product],
    cfg: &TrainConfig,
) -> Result<(Vocabulary, FrequencyTable, usize)> {
    cfg.validate()?;
    let (n_patches, d_img) = validate_corpus(corpus)?;
    if d_img != cfg.model.d_img {
        return Err(Error::ShapeMismatch {
            op: "prepare",
            lhs: vec![cfg.model.d_img],
            rhs: vec![d_img],
        });
    }
    if n_patches > cfg.model.max_patches {
        return Err(Error::SequenceTooLong { len: n_patches, max: cfg.model.max_patches });
    }
    for p in corpus {
        if p.queries.len() < cfg.loss.m {
            return Err(Error::Contract(format!(
                "product {} has {} queries, config needs {}",
                p.product_id,
                p.queries.len(),
                cfg.loss.m
            )));
        }
    }
    let vocab = build_vocabulary(corpus);
    let freq = FrequencyTable::from_products(corpus)?;
    let total = cfg.resolved_total_steps(corpus.len())?;
    Ok((vocab, freq, total))
}

/// Runs `state` forward to the step budget, invoking `on_step` after every
/// optimizer step.
pub fn train_loop<F>(
    corpus: &[Product],
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    freq: &FrequencyTable,
    mut state: TrainState,
    total_steps: usize,
    mut on_step: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState, &LossComponents) -> Result<()>,
{
    while state.step < total_steps {
        let batch = batch_indices(state.step, corpus.len(), cfg.batch_size, cfg.seed);
        let stats = train_step(&mut state, corpus, &batch, vocab, freq, cfg, total_steps)?;
        on_step(&state, &stats)?;
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (name, t) in state.store.iter() {
        tensors.insert(format!("param.{name}"), t.clone());
    }
    for (name, m) in &state.adam.m {
        tensors.insert(format!("adam.m.{name}"), Tensor::new(vec![m.len()], m.clone())?);
    }
    for (name, v) in &state.adam.v {
        tensors.insert(format!("adam.v.{name}"), Tensor::new(vec![v.len()], v.clone())?);
    }
    let extras = json!({ "kind": "checkpoint", "step": state.step, "config": cfg });
    save_tensors(path, &tensors, Precision::F64, &extras)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let (tensors, _, extras) = load_tensors(path)?;
    if extras.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
        return Err(Error::Format(format!("{}: not a training checkpoint", path.display())));
    }
    let step = extras
        .get("step")
        .and_then(|s| s.as_u64())
        .ok_or_else(|| Error::Format("checkpoint missing step counter".into()))?
        as usize;
    let cfg: TrainConfig = serde_json::from_value(
        extras
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint missing config".into()))?,
    )?;
    let mut params = BTreeMap::new();
    let mut adam = AdamState::default();
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix("param.") {
            params.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("adam.m.") {
            adam.m.insert(p.to_string(), t.data().to_vec());
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            adam.v.insert(p.to_string(), t.data().to_vec());
        } else {
            return Err(Error::Format(format!("unexpected checkpoint entry {name}")));
        }
    }
    if params.is_empty() {
        return Err(Error::Format("checkpoint holds no parameters".into()));
    }
    for name in adam.m.keys().chain(adam.v.keys()) {
        if !params.contains_key(name) {
            return Err(Error::Format(format!("optimizer state for unknown parameter {name}")));
        }
    }
    let state = TrainState { store: ParamStore::from_tensors(params), adam, step };
    Ok((state, cfg))
}
