//! Epoch loop for the pre-training and fine-tuning stages.

use serde::{Deserialize, Serialize};

use crate::batching::{ClassPool, Episode, EpisodeSampler, FlatBatch};
use crate::error::{Error, Result};
use crate::losses::{
    am_softmax_loss, angular_prototypical_loss, normalized_softmax_loss, softmax_loss,
    AmSoftmaxConfig, ApParams, ClassifierParams, LossResult,
};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

use super::{adam_step, AdamState, Embedder, EmbedderConfig, GradAccumulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Multiplicative learning-rate decay applied at every epoch boundary.
    pub decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn pretrain(epochs: usize, seed: u64) -> Self {
        TrainSchedule {
            stage: Stage::Pretrain,
            batch_size: 256,
            initial_lr: 1e-3,
            decay: 0.95,
            epochs,
            seed,
        }
    }

    pub fn finetune(epochs: usize, seed: u64) -> Self {
        TrainSchedule {
            stage: Stage::Finetune,
            batch_size: 16,
            initial_lr: 1e-5,
            decay: 0.95,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay {} must lie in (0, 1]",
                self.decay
            )));
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "initial_lr {} must be positive",
                self.initial_lr
            )));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossChoice {
    Softmax,
    NormalizedSoftmax,
    AmSoftmax { margin: f64, scale: f64 },
    /// Episodes of `per_class` items per class; the batch size sets the
    /// number of classes per episode.
    AngularPrototypical { per_class: usize },
}

impl LossChoice {
    pub fn am_softmax_default() -> Self {
        let d = AmSoftmaxConfig::<f64>::default();
        LossChoice::AmSoftmax {
            margin: d.margin,
            scale: d.scale,
        }
    }
}

/// Where a stage's parameters come from.
#[derive(Debug, Clone)]
pub enum Start<T> {
    Fresh(EmbedderConfig),
    From(Embedder<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub batches: usize,
}

/// Trained embedder plus the loss-specific parameters that are discarded
/// after training (classifier head or prototypical scale/bias).
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub embedder: Embedder<T>,
    pub head: Option<ClassifierParams<T>>,
    pub ap: Option<ApParams<T>>,
    pub log: Vec<EpochLog>,
}

fn head_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Runs `schedule.epochs` epochs over `pool` and returns the final
/// parameters with a per-epoch log.
pub fn train_stage<T: Scalar>(
    pool: &ClassPool<Matrix<T>>,
    loss: &LossChoice,
    schedule: &TrainSchedule,
    start: Start<T>,
) -> Result<TrainOutcome<T>> {
    schedule.validate()?;
    let embedder = match start {
        Start::Fresh(config) => Embedder::new(config)?,
        Start::From(e) => e,
    };
    if pool.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 classes, got {}",
            pool.len()
        )));
    }
    match *loss {
        LossChoice::AngularPrototypical { per_class } => {
            train_prototypical(pool, per_class, schedule, embedder)
        }
        LossChoice::AmSoftmax { margin, scale } => {
            let cfg = AmSoftmaxConfig {
                margin: T::of(margin),
                scale: T::of(scale),
            };
            cfg.validate()?;
            train_flat(pool, schedule, embedder, |b, p| am_softmax_loss(b, p, &cfg))
        }
        LossChoice::NormalizedSoftmax => {
            train_flat(pool, schedule, embedder, normalized_softmax_loss)
        }
        LossChoice::Softmax => train_flat(pool, schedule, embedder, softmax_loss),
    }
}

type FlatLoss<T> =
    fn(&FlatBatch<Vec<T>>, &ClassifierParams<T>) -> Result<LossResult<T, ClassifierParams<T>>>;

fn train_flat<T: Scalar, F>(
    pool: &ClassPool<Matrix<T>>,
    schedule: &TrainSchedule,
    mut embedder: Embedder<T>,
    loss_fn: F,
) -> Result<TrainOutcome<T>>
where
    F: Fn(&FlatBatch<Vec<T>>, &ClassifierParams<T>) -> Result<LossResult<T, ClassifierParams<T>>>,
{
    let items: Vec<(usize, &Matrix<T>)> = pool
        .values()
        .enumerate()
        .flat_map(|(label, xs)| xs.iter().map(move |x| (label, x)))
        .collect();
    if items.is_empty() {
        return Err(Error::InsufficientData("training pool has no items".into()));
    }
    let classes = pool.len();
    let mut head = ClassifierParams::random(classes, embedder.embedding_dim(), head_seed(schedule.seed));
    let mut sizes: Vec<usize> = embedder.blocks().iter().map(|b| b.len()).collect();
    sizes.extend(head.blocks().iter().map(|b| b.len()));
    let mut adam = AdamState::new(&sizes, schedule.initial_lr);
    let mut sampler = EpisodeSampler::new(schedule.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        adam.learning_rate = schedule.lr_at(epoch);
        sampler.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(schedule.batch_size) {
            let mut embeddings = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (label, x) = items[i];
                let (e, cache) = embedder.forward(x)?;
                embeddings.push(e);
                caches.push(cache);
                labels.push(label);
            }
            let batch = FlatBatch::new(embeddings, labels, classes)?;
            let result = loss_fn(&batch, &head)?;
            let mut acc = GradAccumulator::new(embedder.config());
            for (g, cache) in result.grad_embeddings.iter().zip(&caches) {
                acc.add(&embedder.backward(g, cache)?);
            }
            let mut grads = acc.blocks();
            grads.extend(result.grad_params.blocks());
            let mut params = embedder.blocks_mut();
            params.extend(head.blocks_mut());
            adam_step(&mut params, &grads, &mut adam)?;
            total += result.value.as_f64();
            batches += 1;
        }
        log.push(EpochLog {
            stage: schedule.stage,
            epoch,
            learning_rate: adam.learning_rate,
            mean_loss: total / batches as f64,
            batches,
        });
    }
    Ok(TrainOutcome {
        embedder,
        head: Some(head),
        ap: None,
        log,
    })
}

fn train_prototypical<T: Scalar>(
    pool: &ClassPool<Matrix<T>>,
    per_class: usize,
    schedule: &TrainSchedule,
    mut embedder: Embedder<T>,
) -> Result<TrainOutcome<T>> {
    if per_class < 2 {
        return Err(Error::InvalidArgument(format!(
            "prototypical episodes need at least 2 items per class, got {per_class}"
        )));
    }
    let refs: ClassPool<&Matrix<T>> = pool
        .iter()
        .filter(|(_, xs)| xs.len() >= per_class)
        .map(|(k, xs)| (k.clone(), xs.iter().collect()))
        .collect();
    let b = (schedule.batch_size / per_class).min(refs.len());
    if b < 2 {
        return Err(Error::InsufficientData(format!(
            "batch size {} with {per_class} items per class over {} eligible classes \
             gives fewer than 2 classes per episode",
            schedule.batch_size,
            refs.len()
        )));
    }
    let total_items: usize = refs.values().map(Vec::len).sum();
    let episodes = (total_items / (b * per_class)).max(1);

    let mut ap = ApParams::<T>::default();
    let mut sizes: Vec<usize> = embedder.blocks().iter().map(|b| b.len()).collect();
    sizes.extend([1, 1]);
    let mut adam = AdamState::new(&sizes, schedule.initial_lr);
    let mut sampler = EpisodeSampler::new(schedule.seed);
    let mut log = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        adam.learning_rate = schedule.lr_at(epoch);
        let mut total = 0.0;
        for _ in 0..episodes {
            let episode = sampler.sample_episode(&refs, b, per_class)?;
            let mut caches = Vec::with_capacity(b * per_class);
            let embedded: Episode<Vec<T>> = episode.try_map(|x| {
                let (e, cache) = embedder.forward(x)?;
                caches.push(cache);
                Ok(e)
            })?;
            let result = angular_prototypical_loss(&embedded, &ap)?;
            let mut acc = GradAccumulator::new(embedder.config());
            for (g, cache) in result.grad_embeddings.iter().zip(&caches) {
                acc.add(&embedder.backward(g, cache)?);
            }
            let gw = [result.grad_params.scale];
            let gb = [result.grad_params.bias];
            let mut grads = acc.blocks();
            grads.extend([&gw[..], &gb[..]]);
            let mut params = embedder.blocks_mut();
            let ApParams { scale, bias } = &mut ap;
            params.extend([std::slice::from_mut(scale), std::slice::from_mut(bias)]);
            adam_step(&mut params, &grads, &mut adam)?;
            ap.clamp_scale();
            total += result.value.as_f64();
        }
        log.push(EpochLog {
            stage: schedule.stage,
            epoch,
            learning_rate: adam.learning_rate,
            mean_loss: total / episodes as f64,
            batches: episodes,
        });
    }
    Ok(TrainOutcome {
        embedder,
        head: None,
        ap: Some(ap),
        log,
    })
}

/// Mean flat-loss over every item of `pool`, in one batch.
pub fn pool_loss<T: Scalar>(
    pool: &ClassPool<Matrix<T>>,
    embedder: &Embedder<T>,
    head: &ClassifierParams<T>,
    loss: FlatLoss<T>,
) -> Result<T> {
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for (label, xs) in pool.values().enumerate() {
        for x in xs {
            embeddings.push(embedder.embed(x)?);
            labels.push(label);
        }
    }
    let batch = FlatBatch::new(embeddings, labels, pool.len())?;
    Ok(loss(&batch, head)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn toy_pool(classes: usize, per_class: usize, seed: u64) -> ClassPool<Matrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        (0..classes)
            .map(|c| {
                let items = (0..per_class)
                    .map(|_| {
                        let v = (0..2 * 3)
                            .map(|k| {
                                let centre = if k % 3 == c % 3 { 2.0 } else { 0.0 };
                                let sign = if c >= 3 { -1.0 } else { 1.0 };
                                sign * centre + noise.sample(&mut rng)
                            })
                            .collect();
                        Matrix::new(2, 3, v).unwrap()
                    })
                    .collect();
                (format!("class{c}"), items)
            })
            .collect()
    }

    fn config(hidden: Vec<usize>) -> EmbedderConfig {
        EmbedderConfig {
            frames: 2,
            coeffs: 3,
            mean_pool: true,
            hidden_sizes: hidden,
            embedding_dim: 4,
            activation: Activation::Relu,
            seed: 5,
        }
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let s = TrainSchedule::pretrain(3, 0);
        assert_eq!(s.lr_at(0), 1e-3);
        assert!((s.lr_at(1) - 0.95e-3).abs() < 1e-18);
        let pool = toy_pool(2, 8, 1);
        let out = train_stage(&pool, &LossChoice::Softmax, &s, Start::Fresh(config(vec![]))).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.log[1].learning_rate, 0.95 * out.log[0].learning_rate);
    }

    #[test]
    fn one_epoch_of_softmax_reduces_loss() {
        let pool = toy_pool(2, 20, 2);
        let mut s = TrainSchedule::pretrain(0, 4);
        s.batch_size = 8;
        s.initial_lr = 1e-2;
        let before = train_stage(&pool, &LossChoice::Softmax, &s, Start::Fresh(config(vec![8]))).unwrap();
        let head0 = before.head.unwrap();
        let l0 = pool_loss(&pool, &before.embedder, &head0, softmax_loss).unwrap();
        s.epochs = 1;
        let after = train_stage(&pool, &LossChoice::Softmax, &s, Start::Fresh(config(vec![8]))).unwrap();
        let l1 = pool_loss(&pool, &after.embedder, after.head.as_ref().unwrap(), softmax_loss).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn full_batch_linear_softmax_loss_is_non_increasing() {
        let pool = toy_pool(2, 10, 3);
        let mut s = TrainSchedule::pretrain(40, 0);
        s.initial_lr = 1e-2;
        let out = train_stage(&pool, &LossChoice::Softmax, &s, Start::Fresh(config(vec![]))).unwrap();
        assert!(out.log.iter().all(|l| l.batches == 1));
        for w in out.log.windows(2) {
            assert!(w[1].mean_loss <= w[0].mean_loss + 1e-9, "{:?}", w);
        }
        assert!(out.log.last().unwrap().mean_loss < out.log[0].mean_loss);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let pool = toy_pool(4, 6, 4);
        let start: Embedder<f64> = Embedder::new(config(vec![5])).unwrap();
        let out = train_stage(
            &pool,
            &LossChoice::AngularPrototypical { per_class: 3 },
            &TrainSchedule::finetune(0, 1),
            Start::From(start.clone()),
        )
        .unwrap();
        assert_eq!(out.embedder.blocks(), start.blocks());
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let pool = toy_pool(6, 8, 5);
        for loss in [
            LossChoice::Softmax,
            LossChoice::NormalizedSoftmax,
            LossChoice::am_softmax_default(),
            LossChoice::AngularPrototypical { per_class: 4 },
        ] {
            let mut s = TrainSchedule::pretrain(3, 11);
            s.batch_size = 12;
            let run = || train_stage(&pool, &loss, &s, Start::Fresh(config(vec![6]))).unwrap();
            let (a, b) = (run(), run());
            assert_eq!(a.embedder.checksum(), b.embedder.checksum());
            assert_eq!(a.log, b.log);
            assert_ne!(a.embedder.checksum(), Embedder::<f64>::new(config(vec![6])).unwrap().checksum());
        }
    }

    #[test]
    fn prototypical_training_reduces_loss() {
        let pool = toy_pool(6, 20, 6);
        let mut s = TrainSchedule::pretrain(30, 2);
        s.batch_size = 24;
        s.initial_lr = 1e-2;
        let out = train_stage(
            &pool,
            &LossChoice::AngularPrototypical { per_class: 4 },
            &s,
            Start::Fresh(config(vec![8])),
        )
        .unwrap();
        let first: f64 = out.log[..5].iter().map(|l| l.mean_loss).sum();
        let last: f64 = out.log[25..].iter().map(|l| l.mean_loss).sum();
        assert!(last < first, "{last} !< {first}");
        assert!(out.ap.unwrap().scale >= 1e-6);
    }

    #[test]
    fn insufficient_data_is_reported() {
        let pool = toy_pool(2, 3, 7);
        let s = TrainSchedule::pretrain(1, 0);
        let r = train_stage(
            &pool,
            &LossChoice::AngularPrototypical { per_class: 4 },
            &s,
            Start::Fresh(config(vec![])),
        );
        assert!(matches!(r, Err(Error::InsufficientData(_))));
        let one: ClassPool<Matrix<f64>> = pool.into_iter().take(1).collect();
        assert!(train_stage(&one, &LossChoice::Softmax, &s, Start::Fresh(config(vec![]))).is_err());
        let mut bad = s.clone();
        bad.decay = 0.0;
        assert!(bad.validate().is_err());
    }
}
