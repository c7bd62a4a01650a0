//! Detection trials and metrics: DET curve, EER, FRR at a fixed FAR,
//! closed-set accuracy and F1.
//!
//! Conventions: at threshold `t` a target is rejected when `score < t` and a
//! non-target is accepted when `score >= t`. Curves are swept over every
//! distinct score plus `-inf` and `+inf`, so they always include the
//! `(FAR, FRR) = (1, 0)` and `(0, 1)` endpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::UNKNOWN_LABEL;
use crate::enrollment::{score, Prototype};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// FAR levels reported by [`evaluate`].
pub const REPORT_FAR_LEVELS: [f64; 2] = [0.025, 0.10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub score: f64,
    pub is_target: bool,
    pub query_keyword: String,
    pub prototype_keyword: String,
}

fn prototype_index<T>(prototypes: &[Prototype<T>]) -> BTreeSet<&str> {
    prototypes.iter().map(|p| p.keyword.as_str()).collect()
}

/// Scores every query against every prototype. A query with keyword `k`
/// yields one target trial (against `k`) and `K - 1` non-target trials.
pub fn make_trials<T: Scalar>(
    queries: &[(String, Vec<T>)],
    prototypes: &[Prototype<T>],
) -> Result<Vec<Trial>> {
    let known = prototype_index(prototypes);
    let mut trials = Vec::with_capacity(queries.len() * prototypes.len());
    for (keyword, q) in queries {
        if !known.contains(keyword.as_str()) {
            return Err(Error::MissingPrototype(keyword.clone()));
        }
        for (proto, s) in score(q, prototypes)?.scores {
            trials.push(Trial {
                score: s.as_f64(),
                is_target: proto == *keyword,
                query_keyword: keyword.clone(),
                prototype_keyword: proto,
            });
        }
    }
    Ok(trials)
}

/// Non-target trials for out-of-vocabulary queries, each scored against
/// every prototype.
pub fn make_impostor_trials<T: Scalar>(
    impostors: &[Vec<T>],
    prototypes: &[Prototype<T>],
) -> Result<Vec<Trial>> {
    if prototype_index(prototypes).contains(UNKNOWN_LABEL) {
        return Err(Error::InvalidArgument(format!(
            "a prototype is named {UNKNOWN_LABEL:?}, which is reserved for impostors"
        )));
    }
    let mut trials = Vec::with_capacity(impostors.len() * prototypes.len());
    for q in impostors {
        for (proto, s) in score(q, prototypes)?.scores {
            trials.push(Trial {
                score: s.as_f64(),
                is_target: false,
                query_keyword: UNKNOWN_LABEL.to_string(),
                prototype_keyword: proto,
            });
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points in increasing threshold order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
    pub n_target: usize,
    pub n_nontarget: usize,
}

fn split_scores(trials: &[Trial]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in trials {
        if !t.score.is_finite() {
            return Err(Error::NonFinite("trial score"));
        }
        if t.is_target {
            targets.push(t.score);
        } else {
            nontargets.push(t.score);
        }
    }
    if targets.is_empty() {
        return Err(Error::Empty("target trial population"));
    }
    if nontargets.is_empty() {
        return Err(Error::Empty("non-target trial population"));
    }
    targets.sort_by(f64::total_cmp);
    nontargets.sort_by(f64::total_cmp);
    Ok((targets, nontargets))
}

pub fn det_curve(trials: &[Trial]) -> Result<DetCurve> {
    let (targets, nontargets) = split_scores(trials)?;
    let mut thresholds: Vec<f64> = targets.iter().chain(&nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nt, nn) = (targets.len(), nontargets.len());
    let point = |t: f64| DetPoint {
        threshold: t,
        far: (nn - nontargets.partition_point(|&s| s < t)) as f64 / nn as f64,
        frr: targets.partition_point(|&s| s < t) as f64 / nt as f64,
    };
    let points = std::iter::once(f64::NEG_INFINITY)
        .chain(thresholds)
        .chain(std::iter::once(f64::INFINITY))
        .map(point)
        .collect();
    Ok(DetCurve {
        points,
        n_target: nt,
        n_nontarget: nn,
    })
}

/// Index of the first point with `FAR <= FRR`.
fn crossing(curve: &DetCurve) -> Option<usize> {
    curve.points.iter().position(|p| p.far <= p.frr)
}

/// Equal error rate, interpolated linearly between the two operating points
/// that straddle `FAR = FRR`.
pub fn eer(curve: &DetCurve) -> Result<f64> {
    let i = crossing(curve).ok_or(Error::Empty("DET curve crossing"))?;
    let p = curve.points[i];
    if p.far == p.frr || i == 0 {
        return Ok(p.frr);
    }
    let q = curve.points[i - 1];
    let (d0, d1) = (q.far - q.frr, p.far - p.frr);
    let lambda = d0 / (d0 - d1);
    Ok(q.frr + lambda * (p.frr - q.frr))
}

/// Threshold of the operating point closest to the EER (first such point).
pub fn eer_threshold(curve: &DetCurve) -> f64 {
    curve
        .points
        .iter()
        .fold(None::<DetPoint>, |best, &p| match best {
            Some(b) if (b.far - b.frr).abs() <= (p.far - p.frr).abs() => Some(b),
            _ => Some(p),
        })
        .map_or(0.0, |p| p.threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrrAtFar {
    pub frr: f64,
    /// Set when no operating point reaches the requested FAR and the FRR
    /// of the lowest-FAR point was returned instead.
    pub extrapolated: bool,
}

/// FRR at `far_level`, interpolated along the curve. At a FAR shared by
/// several points the lowest FRR is used.
pub fn frr_at_far(curve: &DetCurve, far_level: f64) -> Result<FrrAtFar> {
    if !(far_level > 0.0 && far_level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "FAR level {far_level} must lie in (0, 1)"
        )));
    }
    let pts = &curve.points;
    if pts.is_empty() {
        return Err(Error::Empty("DET curve"));
    }
    let Some(j) = pts.iter().position(|p| p.far <= far_level) else {
        let last = pts[pts.len() - 1];
        return Ok(FrrAtFar {
            frr: last.frr,
            extrapolated: true,
        });
    };
    let p = pts[j];
    if p.far == far_level || j == 0 {
        return Ok(FrrAtFar {
            frr: p.frr,
            extrapolated: false,
        });
    }
    let q = pts[j - 1];
    let lambda = (q.far - far_level) / (q.far - p.far);
    Ok(FrrAtFar {
        frr: q.frr + lambda * (p.frr - q.frr),
        extrapolated: false,
    })
}

/// `(true keyword, argmax keyword)` for every query.
pub fn classify<T: Scalar>(
    queries: &[(String, Vec<T>)],
    prototypes: &[Prototype<T>],
) -> Result<Vec<(String, String)>> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let known = prototype_index(prototypes);
    queries
        .iter()
        .map(|(k, q)| {
            if !known.contains(k.as_str()) {
                return Err(Error::MissingPrototype(k.clone()));
            }
            Ok((k.clone(), score(q, prototypes)?.best))
        })
        .collect()
}

pub fn accuracy_of(decisions: &[(String, String)]) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    let hits = decisions.iter().filter(|(t, p)| t == p).count();
    hits as f64 / decisions.len() as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Macro-averaged F1 over `keywords` from closed-set decisions.
pub fn macro_f1_of<'a>(
    decisions: &[(String, String)],
    keywords: impl IntoIterator<Item = &'a str>,
) -> f64 {
    let keywords: BTreeSet<&str> = keywords.into_iter().collect();
    if keywords.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, [usize; 3]> = keywords.iter().map(|&k| (k, [0; 3])).collect();
    for (t, p) in decisions {
        if t == p {
            if let Some(c) = counts.get_mut(t.as_str()) {
                c[0] += 1;
            }
        } else {
            if let Some(c) = counts.get_mut(p.as_str()) {
                c[1] += 1;
            }
            if let Some(c) = counts.get_mut(t.as_str()) {
                c[2] += 1;
            }
        }
    }
    let total: f64 = counts
        .values()
        .map(|&[tp, fp, fn_]| f1(ratio(tp, tp + fp), ratio(tp, tp + fn_)))
        .sum();
    total / keywords.len() as f64
}

pub fn classify_accuracy<T: Scalar>(
    queries: &[(String, Vec<T>)],
    prototypes: &[Prototype<T>],
) -> Result<f64> {
    Ok(accuracy_of(&classify(queries, prototypes)?))
}

pub fn macro_f1<T: Scalar>(
    queries: &[(String, Vec<T>)],
    prototypes: &[Prototype<T>],
) -> Result<f64> {
    let decisions = classify(queries, prototypes)?;
    Ok(macro_f1_of(&decisions, prototypes.iter().map(|p| p.keyword.as_str())))
}

/// F1 of the target-vs-non-target decision `score >= threshold`.
pub fn binary_f1(trials: &[Trial], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for t in trials {
        match (t.is_target, t.score >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    f1(ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    #[default]
    Macro,
    BinaryAtEer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    /// Keyed by the FAR level as a decimal string.
    pub frr_at_far: BTreeMap<String, f64>,
    pub frr_at_far_extrapolated: BTreeMap<String, bool>,
    pub f1: f64,
    pub f1_mode: F1Mode,
    pub accuracy: f64,
    pub n_queries: usize,
    pub n_target_trials: usize,
    pub n_nontarget_trials: usize,
}

/// All metrics for a query set scored against enrolled prototypes.
/// Impostor queries, when given, add non-target trials only.
pub fn evaluate<T: Scalar>(
    queries: &[(String, Vec<T>)],
    prototypes: &[Prototype<T>],
    impostors: Option<&[Vec<T>]>,
    f1_mode: F1Mode,
) -> Result<(EvalReport, DetCurve)> {
    let mut trials = make_trials(queries, prototypes)?;
    if let Some(imp) = impostors {
        trials.extend(make_impostor_trials(imp, prototypes)?);
    }
    let curve = det_curve(&trials)?;
    let mut frr_map = BTreeMap::new();
    let mut flag_map = BTreeMap::new();
    for level in REPORT_FAR_LEVELS {
        let r = frr_at_far(&curve, level)?;
        frr_map.insert(level.to_string(), r.frr);
        flag_map.insert(level.to_string(), r.extrapolated);
    }
    let decisions = classify(queries, prototypes)?;
    let f1 = match f1_mode {
        F1Mode::Macro => macro_f1_of(&decisions, prototypes.iter().map(|p| p.keyword.as_str())),
        F1Mode::BinaryAtEer => binary_f1(&trials, eer_threshold(&curve)),
    };
    let report = EvalReport {
        eer: eer(&curve)?,
        frr_at_far: frr_map,
        frr_at_far_extrapolated: flag_map,
        f1,
        f1_mode,
        accuracy: accuracy_of(&decisions),
        n_queries: queries.len(),
        n_target_trials: curve.n_target,
        n_nontarget_trials: curve.n_nontarget,
    };
    Ok((report, curve))
}

/// `threshold,far,frr` CSV, one row per operating point.
pub fn det_csv(curve: &DetCurve) -> String {
    let mut out = String::from("threshold,far,frr\n");
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.threshold, p.far, p.frr).expect("writing to a String");
    }
    out
}
