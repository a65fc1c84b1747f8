//! The four loss terms of the training objective and their combination.
//!
//! Every loss is built as a graph subexpression so gradients flow through the
//! same tape as the networks. The adversarial sign on the domain term is not
//! applied here: the gradient reversal layer negates the encoder-bound
//! gradient, so the graph always *adds* the domain loss.

use crate::error::{CatError, Result};
use crate::graph::{Graph, Var};

/// Probabilities are clamped to this floor before any log.
pub const PROB_EPS: f64 = 1e-12;

/// Default softmax temperature inside the class-confusion loss.
pub const DEFAULT_MCC_TEMPERATURE: f64 = 2.5;

/// Per-iteration loss values; `total` carries the reported objective value
/// `l_c - l_dc + l_pl + l_mcc` (inactive terms are zero).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_pl: f64,
    pub l_dc: f64,
    pub l_mcc: f64,
    pub total: f64,
}

/// Mean negative log probability of the true label:
/// `-(1/B) sum_i log probs[i, y_i]`. An empty batch contributes a constant 0.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        let zero = g.input(crate::tensor::Tensor::scalar(0.0));
        return Ok(zero);
    }
    let shape = g.value(probs).shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(CatError::Shape {
            op: "cross_entropy",
            detail: format!("probs {:?} vs {} labels", shape, labels.len()),
        });
    }
    let picked = g.pick_per_row(probs, labels)?;
    let logp = g.log_clamped(picked, PROB_EPS)?;
    let m = g.mean(logp)?;
    g.scale(m, -1.0)
}

/// Cross-entropy of the student on the selected pseudo-labeled subset;
/// zero (with no gradient contribution) when the selection is empty.
pub fn pseudo_label_loss(g: &mut Graph, student_probs: Var, pseudo_labels: &[usize]) -> Result<Var> {
    cross_entropy(g, student_probs, pseudo_labels)
}

/// Binary cross-entropy of the domain classifier with domain labels 1 for
/// source and 0 for target:
/// `-(1/B_s) sum log d_src - (1/B_t) sum log(1 - d_tgt)`.
pub fn domain_bce(g: &mut Graph, d_src: Var, d_tgt: Var) -> Result<Var> {
    if g.value(d_src).numel() == 0 || g.value(d_tgt).numel() == 0 {
        return Err(CatError::Shape {
            op: "domain_bce",
            detail: "empty source or target batch".into(),
        });
    }
    let log_src = g.log_clamped(d_src, PROB_EPS)?;
    let m_src = g.mean(log_src)?;
    let neg_tgt = g.scale(d_tgt, -1.0)?;
    let one_minus = g.add_scalar(neg_tgt, 1.0)?;
    let log_tgt = g.log_clamped(one_minus, PROB_EPS)?;
    let m_tgt = g.mean(log_tgt)?;
    let s = g.add(m_src, m_tgt)?;
    g.scale(s, -1.0)
}

/// Minimum class confusion on target logits.
///
/// With `Y = softmax(z / t)`, per-sample entropies `H_i` and certainty
/// weights `W_ii = B (1 + exp(-H_i)) / sum_j (1 + exp(-H_j))`, the class
/// confusion matrix is `C = Y^T W Y`; after row normalization the loss is the
/// mean off-diagonal mass `(1/K) sum_{j != j'} C~[j, j']`.
pub fn mcc_loss(g: &mut Graph, target_logits: Var, temperature: f64) -> Result<Var> {
    let shape = g.value(target_logits).shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(CatError::Shape {
            op: "mcc_loss",
            detail: format!("expected non-empty (B, K) logits, got {:?}", shape),
        });
    }
    let (b, k) = (shape[0], shape[1]);
    let z = g.scale(target_logits, 1.0 / temperature)?;
    let y = g.softmax(z)?;
    let logy = g.log_clamped(y, PROB_EPS)?;
    let plogp = g.mul(y, logy)?;
    let neg_entropy = g.row_sum(plogp)?; // -H_i
    let exp_neg_h = g.exp(neg_entropy)?;
    let u = g.add_scalar(exp_neg_h, 1.0)?; // 1 + exp(-H_i)
    let scaled = g.scale(u, b as f64)?;
    let total = g.sum(u)?;
    let w = g.div_by_scalar(scaled, total)?; // diagonal of W
    let wy = g.scale_rows(y, w)?;
    let c = g.matmul(y, wy, true, false)?; // (K, K)
    let row_sums = g.row_sum(c)?;
    // Classes with no mass produce an all-zero row; floor the divisor so they
    // normalize to zero instead of 0/0.
    let row_sums = g.add_scalar(row_sums, PROB_EPS)?;
    let c_norm = g.div_rows(c, row_sums)?;
    let off = g.sum_off_diag(c_norm)?;
    g.scale(off, 1.0 / k as f64)
}

/// Which loss terms are active for the current epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseFlags {
    pub adversarial: bool,
    pub pseudo: bool,
    pub mcc: bool,
}

/// Graph-side loss terms assembled by the trainer. Inactive terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_c: Var,
    pub l_dc: Option<Var>,
    pub l_pl: Option<Var>,
    pub l_mcc: Option<Var>,
}

/// Equally-weighted sum of the active terms. In the graph the domain term is
/// added with a plus sign (the GRL realizes the min-max); the reported bundle
/// carries the objective value with `-l_dc`.
pub fn cat_total_loss(g: &mut Graph, terms: &LossTerms) -> Result<(Var, LossBundle)> {
    let mut bundle = LossBundle {
        l_c: g.value(terms.l_c).item(),
        ..LossBundle::default()
    };
    let mut total = terms.l_c;
    if let Some(dc) = terms.l_dc {
        bundle.l_dc = g.value(dc).item();
        total = g.add(total, dc)?;
    }
    if let Some(pl) = terms.l_pl {
        bundle.l_pl = g.value(pl).item();
        total = g.add(total, pl)?;
    }
    if let Some(mcc) = terms.l_mcc {
        bundle.l_mcc = g.value(mcc).item();
        total = g.add(total, mcc)?;
    }
    bundle.total = bundle.l_c - bundle.l_dc + bundle.l_pl + bundle.l_mcc;
    Ok((total, bundle))
}
