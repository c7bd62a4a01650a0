//! Desk-scale two-stage training experiment on [`GaussianKeywords`] data.
//!
//! Three disjoint class sets are drawn: a large pre-training inventory, a
//! small fine-tuning set and held-out "user-defined" keywords. Held-out
//! keywords are enrolled from their first `shots` samples and the rest are
//! scored as queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::batching::ClassPool;
use crate::embedder::{train_stage, Embedder, EmbedderConfig, LossChoice, Start, TrainSchedule};
use crate::enrollment::{enroll, EnrollMode};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, F1Mode};
use crate::numcore::Matrix;
use crate::synthetic::GaussianKeywords;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub data: GaussianKeywords,
    pub pretrain_classes: usize,
    pub finetune_classes: usize,
    pub heldout_classes: usize,
    pub per_class: usize,
    pub shots: usize,
    pub embedder: EmbedderConfig,
    pub loss: LossChoice,
    pub pretrain: TrainSchedule,
    pub finetune: TrainSchedule,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        let data = GaussianKeywords::default();
        TwoStageConfig {
            embedder: EmbedderConfig {
                frames: data.frames,
                coeffs: data.coeffs,
                ..EmbedderConfig::default()
            },
            data,
            pretrain_classes: 30,
            finetune_classes: 5,
            heldout_classes: 5,
            per_class: 50,
            shots: 5,
            loss: LossChoice::AngularPrototypical { per_class: 4 },
            pretrain: TrainSchedule::pretrain(30, 0),
            finetune: TrainSchedule::finetune(5, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub seed: u64,
    pub untrained: EvalReport,
    pub finetune_only: EvalReport,
    pub pretrain_finetune: EvalReport,
}

/// Enrolls held-out classes with `shots` samples each and evaluates the
/// remaining samples as queries.
pub fn evaluate_heldout(
    embedder: &Embedder<f64>,
    heldout: &ClassPool<Matrix<f64>>,
    shots: usize,
) -> Result<EvalReport> {
    let mut samples = BTreeMap::new();
    let mut queries = Vec::new();
    for (keyword, items) in heldout {
        if items.len() <= shots {
            return Err(Error::InsufficientData(format!(
                "class {keyword:?} has {} samples, needs more than {shots}",
                items.len()
            )));
        }
        let embedded = items.iter().map(|x| embedder.embed(x)).collect::<Result<Vec<_>>>()?;
        let (enrolled, rest) = embedded.split_at(shots);
        samples.insert(keyword.clone(), enrolled.to_vec());
        queries.extend(rest.iter().map(|e| (keyword.clone(), e.clone())));
    }
    let prototypes = enroll(&samples, EnrollMode::Mean)?;
    Ok(evaluate(&queries, &prototypes, None, F1Mode::Macro)?.0)
}

/// Runs the untrained, fine-tune-only and pre-train + fine-tune arms for
/// one seed. The seed selects the data, the initialization and the
/// episode order.
pub fn run_two_stage(cfg: &TwoStageConfig, seed: u64) -> Result<TwoStageResult> {
    let pre = cfg.data.pool("pre", cfg.pretrain_classes, cfg.per_class, seed)?;
    let fine = cfg.data.pool("fine", cfg.finetune_classes, cfg.per_class, seed)?;
    let held = cfg.data.pool("user", cfg.heldout_classes, cfg.per_class, seed)?;

    let embedder_cfg = EmbedderConfig {
        seed,
        ..cfg.embedder.clone()
    };
    let pretrain = TrainSchedule {
        seed,
        ..cfg.pretrain.clone()
    };
    let finetune = TrainSchedule {
        seed: seed.wrapping_add(1),
        ..cfg.finetune.clone()
    };

    let untrained = Embedder::new(embedder_cfg.clone())?;
    let ft_only = train_stage(&fine, &cfg.loss, &finetune, Start::Fresh(embedder_cfg.clone()))?;
    let pretrained = train_stage(&pre, &cfg.loss, &pretrain, Start::Fresh(embedder_cfg))?;
    let two_stage = train_stage(&fine, &cfg.loss, &finetune, Start::From(pretrained.embedder))?;

    Ok(TwoStageResult {
        seed,
        untrained: evaluate_heldout(&untrained, &held, cfg.shots)?,
        finetune_only: evaluate_heldout(&ft_only.embedder, &held, cfg.shots)?,
        pretrain_finetune: evaluate_heldout(&two_stage.embedder, &held, cfg.shots)?,
    })
}
