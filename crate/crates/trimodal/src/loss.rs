//! Training objectives: contrastive retrieval losses, the pairwise
//! classification loss, masked-token and masked-patch reconstruction, and
//! their weighted combination.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Product;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities this small are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Unit-norm tolerance for embedding rows entering a contrastive loss.
const UNIT_TOL: f64 = 1e-3;

/// Per-component weights on the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mlm_query: f64,
    pub mlm_title: f64,
    pub mpm: f64,
    pub qpc: f64,
    pub ke_qpm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mlm_query: 1.0, mlm_title: 1.0, mpm: 1.0, qpc: 1.0, ke_qpm: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("mlm_query", self.mlm_query),
            ("mlm_title", self.mlm_title),
            ("mpm", self.mpm),
            ("qpc", self.qpc),
            ("ke_qpm", self.ke_qpm),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "loss weight {name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Hyperparameters shared by the loss functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature for the in-batch contrastive loss.
    pub tau: f64,
    /// Scale applied to corrected similarities in the grouped loss.
    pub gamma: f64,
    /// Margin added to negative similarities in the grouped loss.
    pub theta: f64,
    /// Queries grouped with each product.
    pub m: usize,
    pub weights: LossWeights,
    /// Exponentiate negative similarities before scaling. Overflows once
    /// s + theta exceeds roughly 3; kept for comparison runs only.
    pub ke_literal_form: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            gamma: 32.0,
            theta: 0.25,
            m: 5,
            weights: LossWeights::default(),
            ke_literal_form: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "theta must be nonnegative, got {}",
                self.theta
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        self.weights.validate()
    }
}

/// Smoothed empirical frequency of each product, used to discount similarity
/// scores of popular products.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyTable {
    probs: BTreeMap<u64, f64>,
    total: u64,
}

impl FrequencyTable {
    /// Add-one smoothing over the observed catalog: p = (count + 1) / (total + n).
    pub fn from_counts<I>(counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64)>,
    {
        let mut merged: BTreeMap<u64, u64> = BTreeMap::new();
        for (id, c) in counts {
            *merged.entry(id).or_insert(0) += c;
        }
        if merged.is_empty() {
            return Err(Error::DegenerateInput("frequency table needs at least one product".into()));
        }
        let total: u64 = merged.values().sum();
        let denom = (total + merged.len() as u64) as f64;
        let probs = merged.iter().map(|(&id, &c)| (id, (c + 1) as f64 / denom)).collect();
        Ok(FrequencyTable { probs, total })
    }

    pub fn from_products(products: &[Product]) -> Result<Self> {
        Self::from_counts(products.iter().map(|p| (p.product_id, p.frequency)))
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    pub fn prob(&self, product_id: u64) -> Result<f64> {
        self.probs.get(&product_id).copied().ok_or_else(|| {
            Error::Contract(format!("product {product_id} missing from frequency table"))
        })
    }

    /// The additive similarity correction: -ln p(product).
    pub fn neg_log_prob(&self, product_id: u64) -> Result<f64> {
        Ok(-self.prob(product_id)?.ln())
    }
}

fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let cols = t.cols();
    for r in 0..t.rows() {
        let norm = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!("{what} row {r} has norm {norm}, expected 1")));
        }
    }
    let _ = cols;
    Ok(())
}

/// Cosine similarities between unit-norm query rows and product rows.
pub fn similarity_matrix(g: &mut Graph, queries: Var, products: Var) -> Result<Var> {
    check_unit_rows(g, queries, "query embedding")?;
    check_unit_rows(g, products, "product embedding")?;
    let pt = g.transpose(products)?;
    g.matmul(queries, pt)
}

/// In-batch softmax loss over a square similarity matrix whose diagonal holds
/// the positive pairs.
pub fn qpm_loss_from_sim(g: &mut Graph, sim: Var, tau: f64) -> Result<Var> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let t = g.value(sim);
    let n = t.rows();
    if t.cols() != n {
        return Err(Error::Contract(format!(
            "in-batch loss needs a square similarity matrix, got {:?}",
            t.shape()
        )));
    }
    let scaled = g.scale(sim, 1.0 / tau)?;
    let logp = g.log_softmax_rows(scaled)?;
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let pos = g.select_entries(logp, &diag)?;
    let total = g.sum_all(pos)?;
    g.scale(total, -1.0 / n as f64)
}

/// In-batch contrastive loss: each query is scored against every product in
/// the batch and trained to rank its own product first.
pub fn qpm_loss(g: &mut Graph, queries: Var, products: Var, tau: f64) -> Result<Var> {
    let (nq, np) = (g.value(queries).rows(), g.value(products).rows());
    if nq != np {
        return Err(Error::ShapeMismatch {
            op: "qpm_loss",
            lhs: g.value(queries).shape().to_vec(),
            rhs: g.value(products).shape().to_vec(),
        });
    }
    let sim = similarity_matrix(g, queries, products)?;
    qpm_loss_from_sim(g, sim, tau)
}

/// Grouped contrastive loss on precomputed corrected similarities.
///
/// `s_pos` holds the group's query-to-own-product scores, `s_neg` the
/// representative query's scores against other products. With no negatives
/// the loss is identically zero.
pub fn ke_qpm_from_scores(
    g: &mut Graph,
    cfg: &LossConfig,
    s_pos: Var,
    s_neg: Option<Var>,
) -> Result<Var> {
    cfg.validate()?;
    let s_neg = match s_neg {
        Some(v) => v,
        None => return Ok(g.scalar(0.0)),
    };
    let shifted = g.add_scalar(s_neg, cfg.theta)?;
    let a = if cfg.ke_literal_form {
        let e = g.exp(shifted)?;
        g.scale(e, cfg.gamma)?
    } else {
        g.scale(shifted, cfg.gamma)?
    };
    let b = g.scale(s_pos, -cfg.gamma)?;
    let pairs = g.outer_add(a, b)?;
    let lse = g.log_sum_exp_all(pairs)?;
    g.softplus(lse)
}

/// Grouped contrastive loss for one product and its queries against the
/// batch's other products.
///
/// `queries` is [M, d] with the representative query in row 0, `own` is the
/// group's product embedding [1, d], and `negatives` holds the other
/// products' embeddings. `own_nlp` and `neg_nlp` are the -ln p frequency
/// corrections for the corresponding products.
pub fn ke_qpm_group_loss(
    g: &mut Graph,
    cfg: &LossConfig,
    queries: Var,
    own: Var,
    negatives: Option<Var>,
    own_nlp: f64,
    neg_nlp: &[f64],
) -> Result<Var> {
    cfg.validate()?;
    check_unit_rows(g, queries, "group query")?;
    check_unit_rows(g, own, "group product")?;
    if g.value(own).rows() != 1 || g.value(own).cols() != g.value(queries).cols() {
        return Err(Error::ShapeMismatch {
            op: "ke_qpm_group_loss",
            lhs: g.value(queries).shape().to_vec(),
            rhs: g.value(own).shape().to_vec(),
        });
    }
    if !own_nlp.is_finite() {
        return Err(Error::InvalidParameter(format!("own -ln p is not finite: {own_nlp}")));
    }
    let own_t = g.transpose(own)?;
    let pos_dot = g.matmul(queries, own_t)?;
    let s_pos = g.add_scalar(pos_dot, own_nlp)?;

    let s_neg = match negatives {
        None => None,
        Some(neg) => {
            check_unit_rows(g, neg, "negative product")?;
            let nt = g.value(neg);
            if nt.rows() != neg_nlp.len() {
                return Err(Error::Contract(format!(
                    "{} negative embeddings but {} frequency corrections",
                    nt.rows(),
                    neg_nlp.len()
                )));
            }
            if neg_nlp.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("negative -ln p is not finite".into()));
            }
            let own_row = g.value(own).row(0).to_vec();
            for r in 0..g.value(neg).rows() {
                if g.value(neg).row(r) == own_row.as_slice() {
                    return Err(Error::Contract(format!(
                        "group's own product appears in its negative set at row {r}"
                    )));
                }
            }
            let rep = g.slice_rows(queries, 0, 1)?;
            let rep_t = g.transpose(rep)?;
            let neg_dot = g.matmul(neg, rep_t)?;
            let nlp = g.constant(Tensor::new(vec![neg_nlp.len(), 1], neg_nlp.to_vec())?);
            Some(g.add(neg_dot, nlp)?)
        }
    };
    ke_qpm_from_scores(g, cfg, s_pos, s_neg)
}

/// Pairwise classification loss: positives should score near 1, negatives
/// near 0. Probabilities are clamped at `PROB_FLOOR` before the log.
pub fn qpc_loss(g: &mut Graph, p_pos: Var, p_neg: Var) -> Result<Var> {
    let k = g.value(p_pos).numel();
    if g.value(p_neg).numel() != k {
        return Err(Error::ShapeMismatch {
            op: "qpc_loss",
            lhs: g.value(p_pos).shape().to_vec(),
            rhs: g.value(p_neg).shape().to_vec(),
        });
    }
    let cp = g.clamp_min(p_pos, PROB_FLOOR)?;
    let lp = g.ln(cp)?;
    let pos_sum = g.sum_all(lp)?;
    let flipped = g.scale(p_neg, -1.0)?;
    let one_minus = g.add_scalar(flipped, 1.0)?;
    let cn = g.clamp_min(one_minus, PROB_FLOOR)?;
    let ln_ = g.ln(cn)?;
    let neg_sum = g.sum_all(ln_)?;
    let total = g.add(pos_sum, neg_sum)?;
    g.scale(total, -1.0 / k as f64)
}

/// Mean cross-entropy over the labeled positions of a token-logit matrix.
/// Positions with no label are ignored; no labels at all gives zero.
pub fn mlm_loss(g: &mut Graph, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let t = g.value(logits);
    let (rows, vocab) = (t.rows(), t.cols());
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "{} label slots for {} logit rows",
            labels.len(),
            rows
        )));
    }
    let mut entries = Vec::new();
    for (i, lab) in labels.iter().enumerate() {
        if let Some(id) = lab {
            if *id >= vocab {
                return Err(Error::Contract(format!(
                    "label {id} at position {i} out of range for vocab {vocab}"
                )));
            }
            entries.push((i, *id));
        }
    }
    if entries.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let k = entries.len();
    let logp = g.log_softmax_rows(logits)?;
    let sel = g.select_entries(logp, &entries)?;
    let total = g.sum_all(sel)?;
    g.scale(total, -1.0 / k as f64)
}

/// Mean squared error between predicted and original patch features at the
/// masked positions, averaged over every masked component.
pub fn mpm_loss(g: &mut Graph, predicted: Var, targets: &Tensor, mask: &[bool]) -> Result<Var> {
    let t = g.value(predicted);
    if t.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "mpm_loss",
            lhs: t.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let (rows, cols) = (t.rows(), t.cols());
    if mask.len() != rows {
        return Err(Error::Contract(format!("{} mask slots for {rows} patch rows", mask.len())));
    }
    let picked: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    if picked.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let parts: Vec<Var> = picked
        .iter()
        .map(|&r| g.slice_rows(predicted, r, r + 1))
        .collect::<Result<_>>()?;
    let pred_m = g.concat_rows(&parts)?;
    let mut tgt = Vec::with_capacity(picked.len() * cols);
    for &r in &picked {
        tgt.extend_from_slice(targets.row(r));
    }
    let tgt_c = g.constant(Tensor::new(vec![picked.len(), cols], tgt)?);
    let diff = g.sub(pred_m, tgt_c)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq)?;
    g.scale(total, 1.0 / (picked.len() * cols) as f64)
}

/// Weighted sum of named scalar components. Zero-weight components are
/// skipped entirely so they contribute neither value nor gradient; a single
/// unit-weight survivor is returned as-is.
pub fn total_loss(g: &mut Graph, components: &[(&str, Var)], weights: &[f64]) -> Result<Var> {
    if components.len() != weights.len() {
        return Err(Error::InvalidParameter(format!(
            "{} components but {} weights",
            components.len(),
            weights.len()
        )));
    }
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be finite and nonnegative, got {w}"
            )));
        }
    }
    for (name, v) in components {
        let t = g.value(*v);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss component {name} is not a scalar, shape {:?}",
                t.shape()
            )));
        }
        if !t.data()[0].is_finite() {
            return Err(Error::DivergedLoss { component: (*name).to_string() });
        }
    }
    let mut acc: Option<Var> = None;
    for ((_, v), &w) in components.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { *v } else { g.scale(*v, w)? };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.scalar(0.0)))
}
