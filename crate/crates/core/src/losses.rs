//! Training objectives with closed-form gradients.
//!
//! * [`softmax_loss`]: linear classifier + cross-entropy.
//! * [`normalized_softmax_loss`] / [`am_softmax_loss`]: cosine logits,
//!   optionally scaled and with an additive margin on the target class.
//! * [`angular_prototypical_loss`]: each class's last item is a query,
//!   scored against the centroids of every class's remaining items with an
//!   affine cosine similarity.
//!
//! All gradients are derived by hand; see the tests for the
//! finite-difference checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{Episode, FlatBatch};
use crate::error::{Error, Result};
use crate::numcore::{cross_entropy, dot, log_softmax, mean, norm, Matrix};
use crate::scalar::Scalar;

/// Lower bound applied to the prototypical similarity scale after updates.
pub const MIN_AP_SCALE: f64 = 1e-6;

/// Classifier head: `C x D` weights and `C` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ClassifierParams<T> {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ClassifierParams {
            weights: Matrix::zeros(classes, dim),
            bias: vec![T::zero(); classes],
        }
    }

    /// Uniform in `±1/sqrt(dim)`, zero bias.
    pub fn random(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut p = Self::zeros(classes, dim);
        for w in p.weights.values_mut() {
            *w = T::of(rng.random_range(-bound..bound));
        }
        p
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn blocks_mut(&mut self) -> [&mut [T]; 2] {
        [self.weights.values_mut(), &mut self.bias]
    }

    pub fn blocks(&self) -> [&[T]; 2] {
        [self.weights.values(), &self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmSoftmaxConfig<T> {
    pub margin: T,
    pub scale: T,
}

impl<T: Scalar> Default for AmSoftmaxConfig<T> {
    fn default() -> Self {
        AmSoftmaxConfig {
            margin: T::of(0.2),
            scale: T::of(30.0),
        }
    }
}

impl<T: Scalar> AmSoftmaxConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= T::zero()) || !(self.scale > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "AM-softmax needs margin >= 0 and scale > 0, got m={}, s={}",
                self.margin, self.scale
            )));
        }
        Ok(())
    }
}

/// Learnable affine map `w * cos + b` of the prototypical loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApParams<T> {
    pub scale: T,
    pub bias: T,
}

impl<T: Scalar> Default for ApParams<T> {
    fn default() -> Self {
        ApParams {
            scale: T::of(10.0),
            bias: T::of(-5.0),
        }
    }
}

impl<T: Scalar> ApParams<T> {
    pub fn clamp_scale(&mut self) {
        self.scale = self.scale.max(T::of(MIN_AP_SCALE));
    }
}

/// Loss value with gradients. For episodes, `grad_embeddings` is
/// class-major: entry `j * M + i` is item `i` of class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T, G> {
    pub value: T,
    pub grad_embeddings: Vec<Vec<T>>,
    pub grad_params: G,
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn check_labels<E>(batch: &FlatBatch<E>, classes: usize) -> Result<()> {
    if let Some(&l) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `W x + b`.
pub fn softmax_loss<T: Scalar, E: AsRef<[T]>>(
    batch: &FlatBatch<E>,
    params: &ClassifierParams<T>,
) -> Result<LossResult<T, ClassifierParams<T>>> {
    let (c, d) = params.weights.shape();
    check_dim(c, params.bias.len())?;
    check_labels(batch, c)?;
    let n = T::of(batch.len() as f64);

    let mut value = T::zero();
    let mut grads = ClassifierParams::zeros(c, d);
    let mut grad_x = Vec::with_capacity(batch.len());
    let mut logits = vec![T::zero(); c];
    for (x, &y) in batch.items.iter().zip(&batch.labels) {
        let x = x.as_ref();
        check_dim(d, x.len())?;
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(params.weights.row(j), x) + params.bias[j];
        }
        let ls = log_softmax(&logits)?;
        value += cross_entropy(&logits, y)?;
        let mut gx = vec![T::zero(); d];
        for j in 0..c {
            let g = (ls[j].exp() - if j == y { T::one() } else { T::zero() }) / n;
            for (gxk, &wk) in gx.iter_mut().zip(params.weights.row(j)) {
                *gxk += g * wk;
            }
            for (gw, &xk) in grads.weights.row_mut(j).iter_mut().zip(x) {
                *gw += g * xk;
            }
            grads.bias[j] += g;
        }
        grad_x.push(gx);
    }
    Ok(LossResult {
        value: value / n,
        grad_embeddings: grad_x,
        grad_params: grads,
    })
}

/// Cosine-logit softmax; identical to [`am_softmax_loss`] with `m = 0`,
/// `s = 1`. The bias is ignored and receives a zero gradient.
pub fn normalized_softmax_loss<T: Scalar, E: AsRef<[T]>>(
    batch: &FlatBatch<E>,
    params: &ClassifierParams<T>,
) -> Result<LossResult<T, ClassifierParams<T>>> {
    am_softmax_loss(
        batch,
        params,
        &AmSoftmaxConfig {
            margin: T::zero(),
            scale: T::one(),
        },
    )
}

struct Unit<T> {
    dir: Vec<T>,
    len: T,
}

fn unit<T: Scalar>(v: &[T], what: &'static str) -> Result<Unit<T>> {
    let len = norm(v);
    if !(len > T::zero()) || !len.is_finite() {
        return Err(Error::ZeroNorm(what));
    }
    Ok(Unit {
        dir: v.iter().map(|&x| x / len).collect(),
        len,
    })
}

/// Accumulates `coef * (a_hat - cos * b_hat) / |b|` into `out`: the
/// gradient of `cos(a, b)` with respect to `b`, scaled.
fn add_cosine_grad<T: Scalar>(out: &mut [T], coef: T, a: &Unit<T>, b: &Unit<T>, cos: T) {
    let k = coef / b.len;
    for ((o, &ah), &bh) in out.iter_mut().zip(&a.dir).zip(&b.dir) {
        *o += k * (ah - cos * bh);
    }
}

/// Additive-margin softmax over cosine logits `s * (cos - m * [j = y])`.
pub fn am_softmax_loss<T: Scalar, E: AsRef<[T]>>(
    batch: &FlatBatch<E>,
    params: &ClassifierParams<T>,
    cfg: &AmSoftmaxConfig<T>,
) -> Result<LossResult<T, ClassifierParams<T>>> {
    cfg.validate()?;
    let (c, d) = params.weights.shape();
    check_labels(batch, c)?;
    let n = T::of(batch.len() as f64);
    let w_units = params
        .weights
        .iter_rows()
        .map(|r| unit(r, "classifier weight row"))
        .collect::<Result<Vec<_>>>()?;

    let mut value = T::zero();
    let mut grads = ClassifierParams::zeros(c, d);
    let mut grad_x = Vec::with_capacity(batch.len());
    let mut cos = vec![T::zero(); c];
    let mut logits = vec![T::zero(); c];
    for (x, &y) in batch.items.iter().zip(&batch.labels) {
        let x = x.as_ref();
        check_dim(d, x.len())?;
        let xu = unit(x, "embedding")?;
        for j in 0..c {
            cos[j] = dot(&xu.dir, &w_units[j].dir);
            let margin = if j == y { cfg.margin } else { T::zero() };
            logits[j] = cfg.scale * (cos[j] - margin);
        }
        let ls = log_softmax(&logits)?;
        value += cross_entropy(&logits, y)?;
        let mut gx = vec![T::zero(); d];
        for j in 0..c {
            let g = (ls[j].exp() - if j == y { T::one() } else { T::zero() }) / n;
            let dcos = cfg.scale * g;
            add_cosine_grad(&mut gx, dcos, &w_units[j], &xu, cos[j]);
            add_cosine_grad(grads.weights.row_mut(j), dcos, &xu, &w_units[j], cos[j]);
        }
        grad_x.push(gx);
    }
    Ok(LossResult {
        value: value / n,
        grad_embeddings: grad_x,
        grad_params: grads,
    })
}

/// Component-wise mean of a support set.
pub fn centroid<T: Scalar, E: AsRef<[T]>>(support: &[E]) -> Result<Vec<T>> {
    mean(support)
}

/// Angular prototypical loss over one episode.
///
/// `S[j][k] = w * cos(query_j, centroid_k) + b`, and the loss is the mean
/// over queries of the cross-entropy of row `j` against column `j`.
pub fn angular_prototypical_loss<T: Scalar, E: AsRef<[T]>>(
    ep: &Episode<E>,
    params: &ApParams<T>,
) -> Result<LossResult<T, ApParams<T>>> {
    let b = ep.classes();
    let m = ep.per_class();
    let d = ep.query(0).as_ref().len();
    for row in &ep.items {
        for e in row {
            check_dim(d, e.as_ref().len())?;
        }
    }
    let queries = (0..b)
        .map(|j| unit(ep.query(j).as_ref(), "query embedding"))
        .collect::<Result<Vec<_>>>()?;
    let centroids = (0..b)
        .map(|k| unit(&centroid(ep.support(k))?, "centroid"))
        .collect::<Result<Vec<_>>>()?;

    let bt = T::of(b as f64);
    let mut value = T::zero();
    let mut grad_w = T::zero();
    let mut grad_b = T::zero();
    let mut grad_q = vec![vec![T::zero(); d]; b];
    let mut grad_c = vec![vec![T::zero(); d]; b];
    let mut cos = vec![T::zero(); b];
    let mut sim = vec![T::zero(); b];
    for j in 0..b {
        for k in 0..b {
            cos[k] = dot(&queries[j].dir, &centroids[k].dir);
            sim[k] = params.scale * cos[k] + params.bias;
        }
        let ls = log_softmax(&sim)?;
        value += cross_entropy(&sim, j)?;
        for k in 0..b {
            let g = (ls[k].exp() - if k == j { T::one() } else { T::zero() }) / bt;
            grad_w += g * cos[k];
            grad_b += g;
            let dcos = params.scale * g;
            add_cosine_grad(&mut grad_q[j], dcos, &centroids[k], &queries[j], cos[k]);
            add_cosine_grad(&mut grad_c[k], dcos, &queries[j], &centroids[k], cos[k]);
        }
    }

    let support_share = T::one() / T::of((m - 1) as f64);
    let mut grad_embeddings = Vec::with_capacity(b * m);
    for j in 0..b {
        let gs: Vec<T> = grad_c[j].iter().map(|&g| g * support_share).collect();
        for _ in 0..m - 1 {
            grad_embeddings.push(gs.clone());
        }
        grad_embeddings.push(std::mem::take(&mut grad_q[j]));
    }
    Ok(LossResult {
        value: value / bt,
        grad_embeddings,
        grad_params: ApParams {
            scale: grad_w,
            bias: grad_b,
        },
    })
}
