//! Random label states shaped like real batches, shared by the integration
//! and acceptance tests.
#![allow(dead_code)]

use ccl_core::labeling::{assign_labels_with_truth, complementary_labels, LabelState};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub state: LabelState,
    pub psi: Vec<usize>,
    pub truth: Vec<Option<usize>>,
    pub tau: f64,
    pub k: usize,
}

/// Softmax of Gaussian logits with a random sharpness, so that both tiers
/// are well populated across draws.
pub fn random_probs<R: Rng>(rng: &mut R, n: usize, c: usize) -> Array2<f64> {
    let sharp = rng.random_range(0.5..6.0);
    let mut p = Array2::from_shape_simple_fn((n, c), || sharp * rng.sample::<f64, _>(StandardNormal));
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// A batch-like instance: labeled views first, each its own group, then
/// unlabeled weak views, then strong views pointing at a random unlabeled
/// weak sibling whose probabilities they share.
pub fn random_instance<R: Rng>(rng: &mut R, max_views: usize, max_classes: usize) -> Instance {
    let n = rng.random_range(1..=max_views);
    let c = rng.random_range(2..=max_classes);
    let n_labeled = rng.random_range(0..=n / 2);
    let n_weak = rng.random_range(0..=n - n_labeled);
    let n_weak = if n_weak == 0 { n - n_labeled } else { n_weak };
    let first_weak = n_labeled;
    let psi: Vec<usize> = (0..n)
        .map(|v| {
            if v < n_labeled + n_weak {
                v
            } else {
                rng.random_range(first_weak..first_weak + n_weak)
            }
        })
        .collect();
    let truth: Vec<Option<usize>> = (0..n)
        .map(|v| (v < n_labeled).then(|| rng.random_range(0..c)))
        .collect();
    let tau = rng.random_range(0.3..=1.0);
    let k = rng.random_range(1..c);
    let mut p_hat = random_probs(rng, n, c);
    for (v, &w) in psi.iter().enumerate() {
        if w != v {
            let sibling = p_hat.row(w).to_owned();
            p_hat.row_mut(v).assign(&sibling);
        }
    }
    let state = label_state(&p_hat, &truth, tau, k);
    Instance {
        state,
        psi,
        truth,
        tau,
        k,
    }
}

pub fn label_state(p_hat: &Array2<f64>, truth: &[Option<usize>], tau: f64, k: usize) -> LabelState {
    let c = p_hat.ncols();
    let (y_hat, tier) = assign_labels_with_truth(p_hat, truth, tau).unwrap();
    let (phi, order) = complementary_labels(p_hat, &y_hat, &tier, k, c).unwrap();
    LabelState {
        n_classes: c,
        p_hat: p_hat.clone(),
        y_hat,
        tier,
        phi,
        order,
    }
}

/// Random embeddings with unit rows.
pub fn unit_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Array2<f64> {
    let mut z = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    for mut r in z.rows_mut() {
        let s = r.dot(&r).sqrt();
        r /= s;
    }
    z
}
