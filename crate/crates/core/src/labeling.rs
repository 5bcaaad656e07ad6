//! Per-view predictions, pseudo labels, confidence tiers and complementary
//! label sets.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{ViewBatch, ViewOrigin};
use crate::error::{param_err, CclError, Result};
use crate::network::{argmax, softmax, ForwardRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "H")]
    High,
    #[serde(rename = "L")]
    Low,
}

/// Everything the pair builders need to know about each view.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelState {
    pub n_classes: usize,
    /// `[views × classes]`; strong views hold their weak sibling's row.
    pub p_hat: Array2<f64>,
    /// Ground truth for labeled views, the pseudo label for confident
    /// unlabeled views, `None` otherwise.
    pub y_hat: Vec<Option<usize>>,
    pub tier: Vec<Tier>,
    /// Complementary classes, listed in ascending-probability order.
    pub phi: Vec<Vec<usize>>,
    /// Classes sorted by ascending probability, ties by lower index.
    pub order: Vec<Vec<usize>>,
}

impl LabelState {
    pub fn len(&self) -> usize {
        self.tier.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tier.is_empty()
    }

    pub fn count(&self, tier: Tier) -> usize {
        self.tier.iter().filter(|&&t| t == tier).count()
    }
}

/// Weak views get the softmax of their own logits; strong views copy the
/// distribution of their weak sibling.
pub fn predict_views(record: &ForwardRecord, batch: &ViewBatch) -> Result<Array2<f64>> {
    batch.validate()?;
    if record.logits.nrows() != batch.len() {
        return Err(CclError::BatchIntegrity(format!(
            "{} logit rows for {} views",
            record.logits.nrows(),
            batch.len()
        )));
    }
    let mut p_hat = Array2::zeros(record.logits.raw_dim());
    for v in 0..batch.len() {
        let src = batch.psi(v);
        p_hat.row_mut(v).assign(&softmax(record.logits.row(src))?);
    }
    Ok(p_hat)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return param_err(format!("tau must lie in (0, 1], got {tau}"));
    }
    Ok(())
}

fn max_prob(p: ArrayView1<f64>) -> f64 {
    p.fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

/// Labels and tiers given per-view ground truth (`Some` marks a labeled
/// view). Labeled views are always high-confidence.
pub fn assign_labels_with_truth(
    p_hat: &Array2<f64>,
    ground_truth: &[Option<usize>],
    tau: f64,
) -> Result<(Vec<Option<usize>>, Vec<Tier>)> {
    check_tau(tau)?;
    if ground_truth.len() != p_hat.nrows() {
        return crate::error::shape_err("assign_labels", p_hat.nrows(), ground_truth.len());
    }
    let mut y_hat = Vec::with_capacity(p_hat.nrows());
    let mut tier = Vec::with_capacity(p_hat.nrows());
    for (p, truth) in p_hat.rows().into_iter().zip(ground_truth) {
        let (y, t) = match truth {
            Some(y) => (Some(*y), Tier::High),
            None if max_prob(p) >= tau => (Some(argmax(p)), Tier::High),
            None => (None, Tier::Low),
        };
        y_hat.push(y);
        tier.push(t);
    }
    Ok((y_hat, tier))
}

pub fn assign_labels(
    p_hat: &Array2<f64>,
    batch: &ViewBatch,
    tau: f64,
) -> Result<(Vec<Option<usize>>, Vec<Tier>)> {
    let mut truth = vec![None; batch.len()];
    for (v, &y) in batch.labeled_range().zip(&batch.labels) {
        truth[v] = Some(y);
    }
    assign_labels_with_truth(p_hat, &truth, tau)
}

/// Stable ascending argsort: equal probabilities keep lower classes first.
pub fn ascending_order(p: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    idx
}

/// Complementary sets and the ascending orders they were drawn from.
///
/// High-confidence views get every class except their label; low-confidence
/// views get their `k` least likely classes.
pub fn complementary_labels(
    p_hat: &Array2<f64>,
    y_hat: &[Option<usize>],
    tier: &[Tier],
    k: usize,
    n_classes: usize,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if n_classes < 2 || k == 0 || k > n_classes - 1 {
        return param_err(format!("k must lie in 1..={}, got {k}", n_classes.saturating_sub(1)));
    }
    if p_hat.ncols() != n_classes {
        return crate::error::shape_err("complementary_labels", n_classes, p_hat.ncols());
    }
    let mut phi = Vec::with_capacity(tier.len());
    let mut orders = Vec::with_capacity(tier.len());
    for ((p, y), t) in p_hat.rows().into_iter().zip(y_hat).zip(tier) {
        let order = ascending_order(p);
        let set = match t {
            Tier::High => order.iter().copied().filter(|&c| Some(c) != *y).collect(),
            Tier::Low => order[..k].to_vec(),
        };
        phi.push(set);
        orders.push(order);
    }
    Ok((phi, orders))
}

/// Disjoint, exhaustive split of view indices into (high, low).
pub fn partition(state: &LabelState) -> (Vec<usize>, Vec<usize>) {
    (0..state.len()).partition(|&v| state.tier[v] == Tier::High)
}

/// Runs prediction, labeling and complementary labeling for one batch.
pub fn label_views(record: &ForwardRecord, batch: &ViewBatch, tau: f64, k: usize) -> Result<LabelState> {
    let p_hat = predict_views(record, batch)?;
    let (y_hat, tier) = assign_labels(&p_hat, batch, tau)?;
    let n_classes = p_hat.ncols();
    let (phi, order) = complementary_labels(&p_hat, &y_hat, &tier, k, n_classes)?;
    Ok(LabelState {
        n_classes,
        p_hat,
        y_hat,
        tier,
        phi,
        order,
    })
}

/// Origin of a view in a dump, with its weak sibling spelled out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpOrigin {
    pub source: usize,
    pub kind: crate::data::ViewKind,
    pub psi: usize,
}

/// One line of a label-state dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub view_id: usize,
    pub origin: DumpOrigin,
    pub p_hat: Vec<f64>,
    /// `-1` when the view has no label.
    pub y_hat: i64,
    pub tier: Tier,
    pub phi: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
}

/// A label state together with the view bookkeeping needed to rebuild pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDump {
    pub state: LabelState,
    pub origins: Vec<ViewOrigin>,
    pub psi: Vec<usize>,
    pub truth: Option<Vec<usize>>,
}

impl LabelDump {
    pub fn from_batch(state: LabelState, batch: &ViewBatch) -> Self {
        Self {
            state,
            origins: batch.origins.clone(),
            psi: batch.psi_map(),
            truth: Some(batch.truth.clone()),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let s = &self.state;
        for v in 0..s.len() {
            let rec = LabelRecord {
                view_id: v,
                origin: DumpOrigin {
                    source: self.origins[v].source,
                    kind: self.origins[v].kind,
                    psi: self.psi[v],
                },
                p_hat: s.p_hat.row(v).to_vec(),
                y_hat: s.y_hat[v].map_or(-1, |y| y as i64),
                tier: s.tier[v],
                phi: s.phi[v].clone(),
                true_label: self.truth.as_ref().map(|t| t[v]),
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| CclError::Format(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses a dump. Structural problems are reported with their 1-based
    /// line number; semantic consistency is left to the pair oracle.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<LabelDump> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord = serde_json::from_str(&line)
                .map_err(|e| CclError::Format(format!("line {lineno}: {e}")))?;
            records.push((lineno, rec));
        }
        let Some((_, first)) = records.first() else {
            return Err(CclError::Format("label dump is empty".into()));
        };
        let n = records.len();
        let c = first.p_hat.len();
        if c < 2 {
            return Err(CclError::Format("line 1: p_hat needs at least two classes".into()));
        }
        let mut p_hat = Array2::zeros((n, c));
        let mut y_hat = Vec::with_capacity(n);
        let mut tier = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n);
        let mut order = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        let mut psi = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        let mut all_truth = true;
        for (v, (lineno, rec)) in records.into_iter().enumerate() {
            let bad = |msg: String| CclError::Format(format!("line {lineno}: {msg}"));
            if rec.view_id != v {
                return Err(bad(format!("view_id {} out of sequence, expected {v}", rec.view_id)));
            }
            if rec.p_hat.len() != c {
                return Err(bad(format!("p_hat has {} entries, expected {c}", rec.p_hat.len())));
            }
            if rec.p_hat.iter().any(|p| !p.is_finite()) {
                return Err(bad("p_hat has non-finite entries".into()));
            }
            if rec.y_hat < -1 || rec.y_hat >= c as i64 {
                return Err(bad(format!("y_hat {} outside -1..{c}", rec.y_hat)));
            }
            if let Some(&bad_c) = rec.phi.iter().find(|&&k| k >= c) {
                return Err(bad(format!("phi contains class {bad_c} >= {c}")));
            }
            if rec.origin.psi >= n {
                return Err(bad(format!("psi {} outside 0..{n}", rec.origin.psi)));
            }
            if let Some(t) = rec.true_label {
                if t >= c {
                    return Err(bad(format!("true_label {t} >= {c}")));
                }
            }
            let row = ArrayView1::from(&rec.p_hat[..]);
            order.push(ascending_order(row));
            p_hat.row_mut(v).assign(&row);
            y_hat.push(usize::try_from(rec.y_hat).ok());
            tier.push(rec.tier);
            phi.push(rec.phi);
            origins.push(ViewOrigin {
                source: rec.origin.source,
                kind: rec.origin.kind,
            });
            psi.push(rec.origin.psi);
            match rec.true_label {
                Some(t) => truth.push(t),
                None => all_truth = false,
            }
        }
        Ok(LabelDump {
            state: LabelState {
                n_classes: c,
                p_hat,
                y_hat,
                tier,
                phi,
                order,
            },
            origins,
            psi,
            truth: all_truth.then_some(truth),
        })
    }

    /// Re-derives labels, tiers and complementary sets from `p_hat` with new
    /// thresholds. Labeled views keep their recorded label.
    pub fn relabel(&self, tau: f64, k: usize) -> Result<LabelDump> {
        let s = &self.state;
        let truth: Vec<Option<usize>> = (0..s.len())
            .map(|v| match self.origins[v].kind {
                crate::data::ViewKind::WeakLabeled => s.y_hat[v],
                _ => None,
            })
            .collect();
        let (y_hat, tier) = assign_labels_with_truth(&s.p_hat, &truth, tau)?;
        let (phi, order) = complementary_labels(&s.p_hat, &y_hat, &tier, k, s.n_classes)?;
        Ok(LabelDump {
            state: LabelState {
                n_classes: s.n_classes,
                p_hat: s.p_hat.clone(),
                y_hat,
                tier,
                phi,
                order,
            },
            origins: self.origins.clone(),
            psi: self.psi.clone(),
            truth: self.truth.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unlabeled(n: usize) -> Vec<Option<usize>> {
        vec![None; n]
    }

    #[test]
    fn threshold_branches() {
        let p = array![[0.97, 0.02, 0.01], [0.5, 0.3, 0.2], [0.1, 0.1, 0.8]];
        let mut truth = unlabeled(3);
        truth[2] = Some(2);
        let (y, t) = assign_labels_with_truth(&p, &truth, 0.95).unwrap();
        assert_eq!(y, vec![Some(0), None, Some(2)]);
        assert_eq!(t, vec![Tier::High, Tier::Low, Tier::High]);
        // Labeled views ignore their own confidence.
        truth[2] = Some(0);
        let (y, t) = assign_labels_with_truth(&p, &truth, 0.95).unwrap();
        assert_eq!((y[2], t[2]), (Some(0), Tier::High));
    }

    #[test]
    fn tau_bounds() {
        let p = array![[0.5, 0.5], [1.0, 0.0]];
        assert!(assign_labels_with_truth(&p, &unlabeled(2), 0.0).is_err());
        assert!(assign_labels_with_truth(&p, &unlabeled(2), 1.0 + 1e-9).is_err());
        let (_, t) = assign_labels_with_truth(&p, &unlabeled(2), 1.0).unwrap();
        assert_eq!(t, vec![Tier::Low, Tier::High]);
        let (_, t) = assign_labels_with_truth(&p, &unlabeled(2), 1e-12).unwrap();
        assert_eq!(t, vec![Tier::High, Tier::High]);
    }

    #[test]
    fn complementary_examples() {
        let p = array![[0.1, 0.1, 0.8], [0.2, 0.5, 0.3]];
        let (phi, _) = complementary_labels(
            &p,
            &[Some(2), None],
            &[Tier::High, Tier::Low],
            1,
            3,
        )
        .unwrap();
        let mut high = phi[0].clone();
        high.sort_unstable();
        assert_eq!(high, vec![0, 1]);
        assert_eq!(phi[1], vec![0]);

        let p = array![[0.25, 0.25, 0.2, 0.3]];
        let (phi, order) = complementary_labels(&p, &[None], &[Tier::Low], 2, 4).unwrap();
        assert_eq!(order[0], vec![2, 0, 1, 3]);
        assert_eq!(phi[0], vec![2, 0]);
    }

    #[test]
    fn k_range() {
        let p = array![[0.3, 0.3, 0.4]];
        for k in [0, 3] {
            assert!(complementary_labels(&p, &[None], &[Tier::Low], k, 3).is_err());
        }
    }

    #[test]
    fn partition_is_exhaustive() {
        let p = array![[0.97, 0.03], [0.6, 0.4], [0.2, 0.8]];
        let (y_hat, tier) = assign_labels_with_truth(&p, &unlabeled(3), 0.7).unwrap();
        let (phi, order) = complementary_labels(&p, &y_hat, &tier, 1, 2).unwrap();
        let state = LabelState {
            n_classes: 2,
            p_hat: p,
            y_hat,
            tier,
            phi,
            order,
        };
        assert_eq!(partition(&state), (vec![0, 2], vec![1]));
    }

    #[test]
    fn dump_round_trip_and_errors() {
        let p = array![[0.9, 0.1], [0.4, 0.6], [0.4, 0.6]];
        let truth = vec![Some(0), None, None];
        let (y_hat, tier) = assign_labels_with_truth(&p, &truth, 0.95).unwrap();
        let (phi, order) = complementary_labels(&p, &y_hat, &tier, 1, 2).unwrap();
        let dump = LabelDump {
            state: LabelState {
                n_classes: 2,
                p_hat: p,
                y_hat,
                tier,
                phi,
                order,
            },
            origins: vec![
                ViewOrigin { source: 3, kind: crate::data::ViewKind::WeakLabeled },
                ViewOrigin { source: 5, kind: crate::data::ViewKind::WeakUnlabeled },
                ViewOrigin { source: 5, kind: crate::data::ViewKind::StrongUnlabeled },
            ],
            psi: vec![0, 1, 1],
            truth: None,
        };
        let mut buf = Vec::new();
        dump.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("\"y_hat\":-1"));
        assert_eq!(LabelDump::read_jsonl(&buf[..]).unwrap(), dump);
        assert_eq!(dump.relabel(0.95, 1).unwrap(), dump);

        let broken = text.replacen("\"y_hat\":-1", "\"y_hat\":7", 1);
        let err = LabelDump::read_jsonl(broken.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
