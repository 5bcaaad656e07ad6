//! Encoder with rectifier nonlinearities, a linear classifier head and an
//! L2-normalized projector head, with hand-derived gradients.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, CclError, Result};

/// Added to the squared norm before normalizing so a zero projection maps to
/// zero instead of NaN.
pub const NORM_EPS: f64 = 1e-12;

/// Affine map `x -> x W + b` with `W` stored as `[inputs × outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let scale = (gain / inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        });
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 16,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return param_err("hidden widths must be non-empty and positive");
        }
        if self.embed_dim == 0 {
            return param_err("embed_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
    pub projector: Dense,
}

/// Gradient buffers with exactly the layout of [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradState(pub ModelParams);

impl ModelParams {
    /// He-normal encoder weights, `1/fan_in` heads, zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        n_classes: usize,
        cfg: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || n_classes < 2 {
            return param_err("network needs input_dim >= 1 and at least two classes");
        }
        let mut encoder = Vec::with_capacity(cfg.hidden.len());
        let mut width = input_dim;
        for &h in &cfg.hidden {
            encoder.push(Dense::random(width, h, 2.0, rng));
            width = h;
        }
        let classifier = Dense::random(width, n_classes, 1.0, rng);
        let projector = Dense::random(width, cfg.embed_dim, 1.0, rng);
        Ok(Self {
            encoder,
            classifier,
            projector,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.inputs(), d.outputs());
        Self {
            encoder: self.encoder.iter().map(z).collect(),
            classifier: z(&self.classifier),
            projector: z(&self.projector),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].inputs()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.outputs()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.outputs()
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        self.encoder
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("encoder.{i}"), d))
            .chain([
                ("classifier".to_string(), &self.classifier),
                ("projector".to_string(), &self.projector),
            ])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .iter_mut()
            .chain([&mut self.classifier, &mut self.projector])
    }

    /// `(name, shape, row-major values)` for every tensor, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, d) in self.layers() {
            out.push((
                format!("{name}.weight"),
                d.weight.shape().to_vec(),
                d.weight.iter().copied().collect(),
            ));
            out.push((
                format!("{name}.bias"),
                d.bias.shape().to_vec(),
                d.bias.to_vec(),
            ));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .map(|(_, d)| d.weight.len() + d.bias.len())
            .sum()
    }

    /// Visits every scalar of `self` alongside the matching scalar of `other`.
    pub fn zip_mut_with(&mut self, other: &ModelParams, mut f: impl FnMut(&mut f64, f64)) {
        let others: Vec<&Dense> = other.layers().map(|(_, d)| d).collect();
        for (mine, theirs) in self.layers_mut().zip(others) {
            mine.weight.zip_mut_with(&theirs.weight, |a, &b| f(a, b));
            mine.bias.zip_mut_with(&theirs.bias, |a, &b| f(a, b));
        }
    }

    pub fn map_inplace(&mut self, mut f: impl FnMut(&mut f64)) {
        for d in self.layers_mut() {
            d.weight.map_inplace(&mut f);
            d.bias.map_inplace(&mut f);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers()
            .flat_map(|(_, d)| d.weight.iter().chain(d.bias.iter()).copied())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.encoder.len() == other.encoder.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|((_, a), (_, b))| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    /// Mutable access to the `index`-th scalar in [`ModelParams::values`] order.
    pub fn value_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for d in self.layers_mut() {
            let n = d.weight.len();
            if index < n {
                return d.weight.iter_mut().nth(index);
            }
            index -= n;
            let n = d.bias.len();
            if index < n {
                return d.bias.get_mut(index);
            }
            index -= n;
        }
        None
    }
}

impl GradState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradState(params.zeros_like())
    }

    pub fn scaled(mut self, a: f64) -> Self {
        self.0.map_inplace(|v| *v *= a);
        self
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(f64::is_finite)
    }
}

/// Outputs of a forward pass plus the intermediates backward needs.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub logits: Array2<f64>,
    /// Unit-norm embeddings, one row per view.
    pub embeddings: Array2<f64>,
    input: Array2<f64>,
    /// Encoder pre-activations, one per layer.
    pre: Vec<Array2<f64>>,
    /// Rectified encoder outputs, one per layer; the last is the feature.
    post: Vec<Array2<f64>>,
    /// `sqrt(|u|^2 + eps)` per row of the projector output.
    norms: Array1<f64>,
}

impl ForwardRecord {
    pub fn features(&self) -> &Array2<f64> {
        self.post.last().expect("encoder has at least one layer")
    }

    /// Encoder pre-activations, exposed for kink-avoidance in gradient checks.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }

    /// Projector output norms before normalization.
    pub fn embedding_norms(&self) -> &Array1<f64> {
        &self.norms
    }
}

pub fn forward(params: &ModelParams, views: &Array2<f64>) -> Result<ForwardRecord> {
    if views.ncols() != params.input_dim() {
        return shape_err("forward", params.input_dim(), views.ncols());
    }
    let mut pre = Vec::with_capacity(params.encoder.len());
    let mut post: Vec<Array2<f64>> = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let x = post.last().unwrap_or(views);
        let a = layer.apply(x);
        post.push(a.mapv(|v| v.max(0.0)));
        pre.push(a);
    }
    let h = post.last().expect("encoder has at least one layer");
    let logits = params.classifier.apply(h);
    let mut embeddings = params.projector.apply(h);
    let mut norms = Array1::zeros(embeddings.nrows());
    for (mut row, s) in embeddings.rows_mut().into_iter().zip(norms.iter_mut()) {
        *s = (row.dot(&row) + NORM_EPS).sqrt();
        row /= *s;
    }
    Ok(ForwardRecord {
        logits,
        embeddings,
        input: views.clone(),
        pre,
        post,
        norms,
    })
}

/// Gradients of the scalar whose cotangents with respect to the logits and
/// the normalized embeddings are `d_logits` and `d_embeddings`.
pub fn backward(
    params: &ModelParams,
    record: &ForwardRecord,
    d_logits: &Array2<f64>,
    d_embeddings: &Array2<f64>,
) -> Result<GradState> {
    if d_logits.dim() != record.logits.dim() {
        return shape_err("backward", format!("{:?}", record.logits.dim()), format!("{:?}", d_logits.dim()));
    }
    if d_embeddings.dim() != record.embeddings.dim() {
        return shape_err(
            "backward",
            format!("{:?}", record.embeddings.dim()),
            format!("{:?}", d_embeddings.dim()),
        );
    }
    let mut grads = GradState::zeros_like(params);

    // z = u / s with s = sqrt(|u|^2 + eps)  =>  du = (dz - z (z . dz)) / s
    let mut d_proj = d_embeddings.clone();
    for ((mut g, z), &s) in d_proj
        .rows_mut()
        .into_iter()
        .zip(record.embeddings.rows())
        .zip(record.norms.iter())
    {
        let zg = z.dot(&g);
        g.scaled_add(-zg, &z);
        g /= s;
    }

    let h = record.features();
    let g = &mut grads.0;
    g.classifier.weight = h.t().dot(d_logits);
    g.classifier.bias = d_logits.sum_axis(Axis(0));
    g.projector.weight = h.t().dot(&d_proj);
    g.projector.bias = d_proj.sum_axis(Axis(0));

    let mut d_h = d_logits.dot(&params.classifier.weight.t()) + d_proj.dot(&params.projector.weight.t());
    for l in (0..params.encoder.len()).rev() {
        d_h.zip_mut_with(&record.pre[l], |d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        let input = if l == 0 { &record.input } else { &record.post[l - 1] };
        g.encoder[l].weight = input.t().dot(&d_h);
        g.encoder[l].bias = d_h.sum_axis(Axis(0));
        if l > 0 {
            d_h = d_h.dot(&params.encoder[l].weight.t());
        }
    }
    Ok(grads)
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(logits: ArrayView1<f64>) -> Result<Array1<f64>> {
    if logits.iter().any(|v| v.is_nan()) {
        return Err(CclError::Numeric("softmax input contains NaN".into()));
    }
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let total = e.sum();
    Ok(e / total)
}

/// `log softmax` of one row, via the max-shifted log-sum-exp.
pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        dst.assign(&softmax(src)?);
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    fn small_net(input: usize) -> ModelParams {
        let cfg = NetworkConfig {
            hidden: vec![5, 4],
            embed_dim: 3,
        };
        ModelParams::init(input, 3, &cfg, &mut stream(11, Stream::Init)).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(array![0.0, 0.0, 0.0].view()).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(array![1000.0, 0.0, 0.0].view()).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p.iter().all(|v| v.is_finite()));
        // Hand-evaluated: e^k / (e + e^2 + e^3).
        let p = softmax(array![1.0, 2.0, 3.0].view()).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert!(softmax(array![f64::NAN, 0.0].view()).is_err());
    }

    #[test]
    fn zero_params_give_uniform_predictions() {
        let net = small_net(4).zeros_like();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let rec = forward(&net, &x).unwrap();
        assert!(rec.logits.iter().all(|&v| v == 0.0));
        let p = softmax_rows(&rec.logits).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let net = small_net(4);
        let mut x = Array2::from_shape_fn((6, 4), |(i, j)| (i as f64 - 2.5) * (j as f64 + 0.3));
        x.row_mut(0).fill(0.0);
        let rec = forward(&net, &x).unwrap();
        // A zero input meets zero biases at init, so its embedding stays zero.
        assert!(rec.embeddings.row(0).iter().all(|&v| v == 0.0));
        for z in rec.embeddings.rows().into_iter().skip(1) {
            assert!((z.dot(&z).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = small_net(4);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64).sin());
        let a = forward(&net, &x).unwrap();
        let b = forward(&net, &x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn shape_errors() {
        let net = small_net(4);
        let x = Array2::zeros((2, 3));
        assert!(matches!(forward(&net, &x), Err(CclError::Shape { .. })));
        let rec = forward(&net, &Array2::zeros((2, 4))).unwrap();
        assert!(backward(&net, &rec, &Array2::zeros((2, 2)), &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn zero_cotangents_give_zero_gradients() {
        let net = small_net(4);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * j) as f64).cos());
        let rec = forward(&net, &x).unwrap();
        let g = backward(&net, &rec, &Array2::zeros((5, 3)), &Array2::zeros((5, 3))).unwrap();
        assert!(g.0.values().all(|v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_cotangents() {
        let net = small_net(4);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 3 + j) as f64 * 0.7).sin());
        let rec = forward(&net, &x).unwrap();
        let dl = Array2::from_shape_fn((5, 3), |(i, j)| ((i + j) as f64 * 0.3).cos());
        let dz = Array2::from_shape_fn((5, 3), |(i, j)| ((i * j) as f64 * 0.5).sin());
        let g1 = backward(&net, &rec, &dl, &dz).unwrap().scaled(-2.5);
        let g2 = backward(&net, &rec, &(&dl * -2.5), &(&dz * -2.5)).unwrap();
        for (a, b) in g1.0.values().zip(g2.0.values()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn value_mut_walks_in_values_order() {
        let mut net = small_net(2);
        let n = net.num_params();
        let values: Vec<f64> = net.values().collect();
        assert_eq!(values.len(), n);
        for i in [0, 7, n - 1] {
            assert_eq!(*net.value_mut(i).unwrap(), values[i]);
        }
        assert!(net.value_mut(n).is_none());
    }
}
