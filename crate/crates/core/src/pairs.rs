//! Reliable negative and positive pairs over the view universe.
//!
//! Negatives: `j` is a negative of `i` when `ŷ_j ∈ Φ(i)` or `ŷ_i ∈ Φ(j)`.
//! Positives: a high-confidence view pairs with every other view of the same
//! label; a low-confidence view pairs only with other views of its own sample.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CclError, Result};
use crate::labeling::{LabelState, Tier};
use crate::network::argmax;

/// Dense symmetric pair masks over `n` views.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSets {
    pub neg: Array2<bool>,
    pub pos: Array2<bool>,
}

impl PairSets {
    pub fn empty(n: usize) -> Self {
        Self {
            neg: Array2::from_elem((n, n), false),
            pos: Array2::from_elem((n, n), false),
        }
    }

    pub fn len(&self) -> usize {
        self.neg.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of unordered negative pairs.
    pub fn neg_count(&self) -> usize {
        upper_count(&self.neg)
    }

    pub fn pos_count(&self) -> usize {
        upper_count(&self.pos)
    }
}

fn upper_count(mask: &Array2<bool>) -> usize {
    let n = mask.nrows();
    (0..n)
        .map(|i| (i + 1..n).filter(|&j| mask[[i, j]]).count())
        .sum()
}

fn set_both(mask: &mut Array2<bool>, a: usize, b: usize) {
    mask[[a, b]] = true;
    mask[[b, a]] = true;
}

/// Negative mask, built per class: every view labeled `c` is paired with every
/// view whose complementary set contains `c`.
pub fn build_negative_pairs(state: &LabelState) -> Array2<bool> {
    let n = state.len();
    let c = state.n_classes;
    let mut labeled_as: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut excludes: Vec<Vec<usize>> = vec![Vec::new(); c];
    for v in 0..n {
        if let Some(y) = state.y_hat[v] {
            labeled_as[y].push(v);
        }
        for &k in &state.phi[v] {
            excludes[k].push(v);
        }
    }
    let mut neg = Array2::from_elem((n, n), false);
    for class in 0..c {
        for &a in &labeled_as[class] {
            for &b in &excludes[class] {
                if a != b {
                    set_both(&mut neg, a, b);
                }
            }
        }
    }
    neg
}

/// Positive mask: same-label cliques over high-confidence views and
/// same-sample cliques over low-confidence views.
pub fn build_positive_pairs(state: &LabelState, psi: &[usize]) -> Array2<bool> {
    let n = state.len();
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); state.n_classes];
    let mut by_sample: Vec<Vec<usize>> = vec![Vec::new(); n];
    for v in 0..n {
        match (state.tier[v], state.y_hat[v]) {
            (Tier::High, Some(y)) => by_label[y].push(v),
            (Tier::High, None) => {}
            (Tier::Low, _) => by_sample[psi[v]].push(v),
        }
    }
    let mut pos = Array2::from_elem((n, n), false);
    for group in by_label.iter().chain(&by_sample) {
        for (i, &a) in group.iter().enumerate() {
            for &b in &group[i + 1..] {
                set_both(&mut pos, a, b);
            }
        }
    }
    pos
}

pub fn build_pairs(state: &LabelState, psi: &[usize]) -> PairSets {
    PairSets {
        neg: build_negative_pairs(state),
        pos: build_positive_pairs(state, psi),
    }
}

/// Literal row-by-row transcription of the pair definitions with `-1` for
/// "no label". Used as an independent oracle for [`build_pairs`]; rows are
/// not symmetrized, so inconsistent label states show up as mismatches.
pub fn brute_force_pairs(state: &LabelState, psi: &[usize]) -> PairSets {
    let n = state.len();
    let label = |v: usize| -> i64 { state.y_hat[v].map_or(-1, |y| y as i64) };
    let in_phi = |v: usize, y: i64| -> bool { state.phi[v].iter().any(|&c| c as i64 == y) };
    let mut out = PairSets::empty(n);
    for i in 0..n {
        for j in 0..n {
            out.neg[[i, j]] = in_phi(i, label(j)) || in_phi(j, label(i));
            out.pos[[i, j]] = j != i
                && match state.tier[i] {
                    Tier::High => label(i) == label(j),
                    Tier::Low => psi[i] == psi[j],
                };
        }
    }
    out
}

/// How the contrastive term chooses its pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// Complementary-label negatives plus tiered positives.
    Complementary,
    /// No pairs at all; the contrastive term vanishes.
    Disabled,
    /// Supervised-contrastive pairs among high-confidence views only.
    HighOnly,
    /// Low-confidence argmax predictions trusted as labels for pairing.
    NaiveArgmax,
}

pub fn pairs_for_strategy(state: &LabelState, psi: &[usize], strategy: PairStrategy) -> PairSets {
    match strategy {
        PairStrategy::Complementary => build_pairs(state, psi),
        PairStrategy::Disabled => PairSets::empty(state.len()),
        PairStrategy::HighOnly => {
            let mut pairs = build_pairs(state, psi);
            for v in 0..state.len() {
                if state.tier[v] == Tier::Low {
                    pairs.neg.row_mut(v).fill(false);
                    pairs.neg.column_mut(v).fill(false);
                    pairs.pos.row_mut(v).fill(false);
                    pairs.pos.column_mut(v).fill(false);
                }
            }
            pairs
        }
        PairStrategy::NaiveArgmax => build_pairs(&trust_argmax(state), psi),
    }
}

/// Treats every low-confidence view as confidently labeled with its argmax.
fn trust_argmax(state: &LabelState) -> LabelState {
    let mut out = state.clone();
    for v in 0..state.len() {
        if state.tier[v] == Tier::Low {
            let y = argmax(state.p_hat.row(v));
            out.y_hat[v] = Some(y);
            out.tier[v] = Tier::High;
            out.phi[v] = state.order[v].iter().copied().filter(|&c| c != y).collect();
        }
    }
    out
}

/// Pair counts by tier cell; all counts are unordered pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub n_views: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub neg_hh: usize,
    pub neg_hl: usize,
    pub neg_ll: usize,
    pub pos_hh: usize,
    pub pos_hl: usize,
    pub pos_ll: usize,
    pub neg_total: usize,
    pub pos_total: usize,
    /// Average number of negative partners of a low-confidence view.
    pub mean_neg_per_low: f64,
    /// Share of negative pairs whose hidden true classes coincide.
    pub false_negative_fraction: Option<f64>,
}

pub fn pair_stats(pairs: &PairSets, state: &LabelState, truth: Option<&[usize]>) -> PairStats {
    let n = state.len();
    let mut s = PairStats {
        n_views: n,
        n_high: state.count(Tier::High),
        n_low: state.count(Tier::Low),
        neg_hh: 0,
        neg_hl: 0,
        neg_ll: 0,
        pos_hh: 0,
        pos_hl: 0,
        pos_ll: 0,
        neg_total: 0,
        pos_total: 0,
        mean_neg_per_low: 0.0,
        false_negative_fraction: None,
    };
    let mut false_neg = 0usize;
    let mut low_neg = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if pairs.neg[[i, j]] && state.tier[i] == Tier::Low {
                low_neg += 1;
            }
            if j < i {
                continue;
            }
            let cell = (state.tier[i], state.tier[j]);
            if pairs.neg[[i, j]] {
                match cell {
                    (Tier::High, Tier::High) => s.neg_hh += 1,
                    (Tier::Low, Tier::Low) => s.neg_ll += 1,
                    _ => s.neg_hl += 1,
                }
                if truth.is_some_and(|t| t[i] == t[j]) {
                    false_neg += 1;
                }
            }
            if pairs.pos[[i, j]] {
                match cell {
                    (Tier::High, Tier::High) => s.pos_hh += 1,
                    (Tier::Low, Tier::Low) => s.pos_ll += 1,
                    _ => s.pos_hl += 1,
                }
            }
        }
    }
    s.neg_total = s.neg_hh + s.neg_hl + s.neg_ll;
    s.pos_total = s.pos_hh + s.pos_hl + s.pos_ll;
    if s.n_low > 0 {
        s.mean_neg_per_low = low_neg as f64 / s.n_low as f64;
    }
    if truth.is_some() {
        s.false_negative_fraction = Some(if s.neg_total == 0 {
            0.0
        } else {
            false_neg as f64 / s.neg_total as f64
        });
    }
    s
}

/// Structural invariants of a pair set, as human-readable violations.
pub fn check_invariants(pairs: &PairSets, state: &LabelState) -> Vec<String> {
    let n = state.len();
    let mut bad = Vec::new();
    if pairs.len() != n {
        bad.push(format!("masks cover {} views, state has {n}", pairs.len()));
        return bad;
    }
    for i in 0..n {
        if pairs.neg[[i, i]] || pairs.pos[[i, i]] {
            bad.push(format!("self-pair at view {i}"));
        }
        for j in 0..n {
            if pairs.neg[[i, j]] != pairs.neg[[j, i]] {
                bad.push(format!("negative mask asymmetric at ({i},{j})"));
            }
            if pairs.pos[[i, j]] != pairs.pos[[j, i]] {
                bad.push(format!("positive mask asymmetric at ({i},{j})"));
            }
            if pairs.neg[[i, j]] && pairs.pos[[i, j]] {
                bad.push(format!("({i},{j}) is both positive and negative"));
            }
            let (ti, tj) = (state.tier[i], state.tier[j]);
            if pairs.neg[[i, j]] && ti == Tier::Low && tj == Tier::Low {
                bad.push(format!("negative between low-confidence views ({i},{j})"));
            }
            if pairs.pos[[i, j]] && ti != tj {
                bad.push(format!("positive across tiers ({i},{j})"));
            }
        }
    }
    bad
}

/// Coordinates where two pair sets disagree, as `(mask, i, j)`.
pub fn mask_mismatches(a: &PairSets, b: &PairSets) -> Vec<(&'static str, usize, usize)> {
    let mut out = Vec::new();
    for ((idx, x), y) in a.neg.indexed_iter().zip(b.neg.iter()) {
        if x != y {
            out.push(("neg", idx.0, idx.1));
        }
    }
    for ((idx, x), y) in a.pos.indexed_iter().zip(b.pos.iter()) {
        if x != y {
            out.push(("pos", idx.0, idx.1));
        }
    }
    out
}

/// Run-length encoding of a boolean mask: one `row,start,len` record per
/// maximal run of `true` entries.
pub fn write_mask_rle<W: Write>(mask: &Array2<bool>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| CclError::Format(e.to_string());
    w.write_record(["row", "start", "len"]).map_err(err)?;
    for (i, row) in mask.rows().into_iter().enumerate() {
        let mut j = 0;
        while j < row.len() {
            if row[j] {
                let start = j;
                while j < row.len() && row[j] {
                    j += 1;
                }
                w.write_record([i.to_string(), start.to_string(), (j - start).to_string()])
                    .map_err(err)?;
            } else {
                j += 1;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask_rle(input: &str, n: usize) -> Result<Array2<bool>> {
    let mut r = csv::Reader::from_reader(input.as_bytes());
    let mut mask = Array2::from_elem((n, n), false);
    for rec in r.records() {
        let rec = rec.map_err(|e| CclError::Format(e.to_string()))?;
        let field = |k: usize| -> Result<usize> {
            rec[k]
                .parse()
                .map_err(|e| CclError::Format(format!("bad run-length field {:?}: {e}", &rec[k])))
        };
        let (row, start, len) = (field(0)?, field(1)?, field(2)?);
        if row >= n || start + len > n {
            return Err(CclError::Format(format!("run ({row},{start},{len}) outside {n}x{n}")));
        }
        for j in start..start + len {
            mask[[row, j]] = true;
        }
    }
    Ok(mask)
}
