//! Contrastive, supervised and consistency losses with exact gradients with
//! respect to embeddings and logits.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::ViewBatch;
use crate::error::{param_err, shape_err, CclError, Result};
use crate::labeling::LabelState;
use crate::network::{argmax, log_softmax};
use crate::pairs::PairSets;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub tau: f64,
    /// Complementary classes per low-confidence view. `None` means
    /// `min(7, C - 1)`.
    pub k: Option<usize>,
    pub contrastive_reduction: Reduction,
}

/// How the per-anchor contrastive terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sum over anchors.
    #[default]
    Sum,
    /// Sum divided by the number of views in the batch.
    Mean,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            tau: 0.95,
            k: None,
            contrastive_reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub const DEFAULT_K: usize = 7;

    pub fn k_for(&self, n_classes: usize) -> usize {
        self.k
            .unwrap_or_else(|| Self::DEFAULT_K.min(n_classes.saturating_sub(1)))
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return param_err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return param_err(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        let k = self.k_for(n_classes);
        if k == 0 || k + 1 > n_classes {
            return param_err(format!("k must lie in 1..={}, got {k}", n_classes - 1));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub l_c: f64,
    pub l_x: f64,
    pub l_u: f64,
    pub total: f64,
    /// `l_c` divided by the number of views, for diagnostics.
    pub l_c_mean: f64,
    pub d_embeddings: Array2<f64>,
    pub d_logits: Array2<f64>,
}

/// Pair-masked contrastive loss at temperature `t`, summed over anchors.
///
/// Anchors with no positives contribute nothing. For anchor `i` with
/// positives `P` and candidates `A = P ∪ N` the term is
/// `logsumexp_{k∈A}(s_ik) - mean_{j∈P}(s_ij)` with `s_ik = z_i·z_k / t`.
pub fn contrastive_loss(z: &Array2<f64>, pairs: &PairSets, t: f64) -> Result<(f64, Array2<f64>)> {
    let n = z.nrows();
    if pairs.len() != n {
        return shape_err("contrastive_loss", n, pairs.len());
    }
    if !(t > 0.0) {
        return param_err(format!("temperature must be positive, got {t}"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CclError::Numeric("non-finite embeddings".into()));
    }
    let sim = z.dot(&z.t()) / t;
    // coeff[i][k] = d(term_i) / d(s_ik)
    let mut coeff = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    let mut cand = Vec::with_capacity(n);
    for i in 0..n {
        let n_pos = pairs.pos.row(i).iter().filter(|&&p| p).count();
        if n_pos == 0 {
            continue;
        }
        cand.clear();
        cand.extend((0..n).filter(|&k| pairs.pos[[i, k]] || pairs.neg[[i, k]]));
        let top = cand
            .iter()
            .copied()
            .max_by(|&a, &b| sim[[i, a]].total_cmp(&sim[[i, b]]))
            .expect("a positive is always a candidate");
        let m = sim[[i, top]];
        // ln_1p keeps full precision when one candidate dominates.
        let rest: f64 = cand.iter().filter(|&&k| k != top).map(|&k| (sim[[i, k]] - m).exp()).sum();
        let log_z = rest.ln_1p();
        let lse = m + log_z;
        let inv_p = 1.0 / n_pos as f64;
        let mut mean_pos = 0.0;
        for &k in &cand {
            let mut w = (sim[[i, k]] - lse).exp();
            if pairs.pos[[i, k]] {
                mean_pos += sim[[i, k]];
                w -= inv_p;
            }
            coeff[[i, k]] = w;
        }
        // Subtract before adding log_z; lse itself is rounded at the scale of 1/T.
        loss += (m - mean_pos * inv_p) + log_z;
    }
    let grad = (coeff.dot(z) + coeff.t().dot(z)) / t;
    Ok((loss, grad))
}

/// Mean cross-entropy of the labeled views.
pub fn supervised_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if b == 0 {
        return param_err("supervised loss needs at least one labeled view");
    }
    if labels.len() != b {
        return shape_err("supervised_loss", b, labels.len());
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return param_err(format!("label {y} outside 0..{c}"));
    }
    let mut grad = Array2::zeros((b, c));
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let logp = log_softmax(logits.row(r));
        loss -= logp[y];
        let mut g = grad.row_mut(r);
        g.assign(&logp.mapv(f64::exp));
        g[y] -= 1.0;
    }
    let scale = 1.0 / b as f64;
    grad *= scale;
    Ok((loss * scale, grad))
}

/// Confidence-gated cross-entropy between each weak view's pseudo label and
/// the prediction on its strong sibling, averaged over all strong views.
///
/// `weak_p_hat[r]` is the prediction on the weak sibling of strong view `r`.
pub fn consistency_loss(
    weak_p_hat: ArrayView2<f64>,
    strong_logits: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if weak_p_hat.dim() != strong_logits.dim() {
        return shape_err(
            "consistency_loss",
            format!("{:?}", strong_logits.dim()),
            format!("{:?}", weak_p_hat.dim()),
        );
    }
    let (m, c) = strong_logits.dim();
    let mut grad = Array2::zeros((m, c));
    if m == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for r in 0..m {
        let p = weak_p_hat.row(r);
        let confident = p.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) >= tau;
        if !confident {
            continue;
        }
        let y = argmax(p);
        let logq = log_softmax(strong_logits.row(r));
        loss -= logq[y];
        let mut g = grad.row_mut(r);
        g.assign(&logq.mapv(f64::exp));
        g[y] -= 1.0;
    }
    let scale = 1.0 / m as f64;
    grad *= scale;
    Ok((loss * scale, grad))
}

/// Inputs to [`total_loss`], all aligned with the rows of `batch`.
pub struct LossInputs<'a> {
    pub logits: &'a Array2<f64>,
    pub embeddings: &'a Array2<f64>,
    pub batch: &'a ViewBatch,
    pub state: &'a LabelState,
    pub pairs: &'a PairSets,
    /// When false the consistency term is left out entirely.
    pub with_consistency: bool,
}

/// `l_x + l_u + l_c` with gradients accumulated into shared buffers.
pub fn total_loss(inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    let LossInputs {
        logits,
        embeddings,
        batch,
        state,
        pairs,
        with_consistency,
    } = *inputs;
    let n = batch.len();
    if logits.nrows() != n || embeddings.nrows() != n || state.len() != n {
        return Err(CclError::BatchIntegrity("loss inputs not aligned with batch".into()));
    }
    let mut d_logits = Array2::zeros(logits.raw_dim());

    let lab = batch.labeled_range();
    let (l_x, g_x) = supervised_loss(logits.slice(s![lab.clone(), ..]), &batch.labels)?;
    d_logits.slice_mut(s![lab, ..]).assign(&g_x);

    let mut l_u = 0.0;
    if with_consistency {
        let strong = batch.strong_range();
        let siblings: Vec<usize> = strong.clone().map(|v| batch.psi(v)).collect();
        let weak_p = state.p_hat.select(ndarray::Axis(0), &siblings);
        let (value, g_u) =
            consistency_loss(weak_p.view(), logits.slice(s![strong.clone(), ..]), cfg.tau)?;
        l_u = value;
        d_logits.slice_mut(s![strong, ..]).assign(&g_u);
    }

    let (mut l_c, mut d_embeddings) = contrastive_loss(embeddings, pairs, cfg.temperature)?;
    let l_c_sum = l_c;
    if cfg.contrastive_reduction == Reduction::Mean {
        l_c /= n as f64;
        d_embeddings /= n as f64;
    }

    let total = l_x + l_u + l_c;
    if !total.is_finite() {
        return Err(CclError::Numeric(format!(
            "non-finite loss: l_x={l_x} l_u={l_u} l_c={l_c}"
        )));
    }
    Ok(LossOutput {
        l_c,
        l_x,
        l_u,
        total,
        l_c_mean: l_c_sum / n as f64,
        d_embeddings,
        d_logits,
    })
}
