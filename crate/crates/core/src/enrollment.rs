//! Few-shot enrollment of keywords as mean-embedding prototypes, and cosine
//! scoring of query embeddings against them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{cosine, l2_normalize, mean};
use crate::scalar::Scalar;

pub const STORE_MAGIC: &[u8; 8] = b"KWSPROTO";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype<T> {
    pub keyword: String,
    pub vector: Vec<T>,
    /// Number of enrollment samples averaged into `vector`.
    pub shots: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrollMode {
    /// Arithmetic mean of the raw embeddings.
    #[default]
    Mean,
    /// Mean of the unit-normalized embeddings.
    NormalizeThenAverage,
}

/// One prototype per keyword, in keyword order.
pub fn enroll<T: Scalar>(
    samples: &BTreeMap<String, Vec<Vec<T>>>,
    mode: EnrollMode,
) -> Result<Vec<Prototype<T>>> {
    if samples.is_empty() {
        return Err(Error::Empty("enrollment sample set"));
    }
    let dim = samples.values().flatten().next().map(Vec::len);
    samples
        .iter()
        .map(|(keyword, embeddings)| {
            if embeddings.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "keyword {keyword:?} has no enrollment samples"
                )));
            }
            if let (Some(d), Some(bad)) = (dim, embeddings.iter().find(|e| Some(e.len()) != dim)) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: bad.len(),
                });
            }
            let vector = match mode {
                EnrollMode::Mean => mean(embeddings)?,
                EnrollMode::NormalizeThenAverage => {
                    let units = embeddings
                        .iter()
                        .map(|e| l2_normalize(e))
                        .collect::<Result<Vec<_>>>()?;
                    mean(&units)?
                }
            };
            Ok(Prototype {
                keyword: keyword.clone(),
                vector,
                shots: embeddings.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport<T> {
    /// Cosine against each prototype, in prototype order.
    pub scores: Vec<(String, T)>,
    pub best: String,
    pub max_score: T,
}

/// Cosine of `query` against every prototype. Ties on the maximum go to
/// the lexicographically smallest keyword.
pub fn score<T: Scalar>(query: &[T], prototypes: &[Prototype<T>]) -> Result<ScoreReport<T>> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype set"));
    }
    let mut scores = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        if p.vector.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: p.vector.len(),
                actual: query.len(),
            });
        }
        scores.push((p.keyword.clone(), cosine(query, &p.vector)?));
    }
    let (best, max_score) = scores
        .iter()
        .fold(None::<(&String, T)>, |acc, (k, s)| match acc {
            Some((bk, bs)) if bs > *s || (bs == *s && bk <= k) => Some((bk, bs)),
            _ => Some((k, *s)),
        })
        .map(|(k, s)| (k.clone(), s))
        .expect("non-empty");
    Ok(ScoreReport {
        scores,
        best,
        max_score,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Accept(String),
    Reject,
}

pub fn detect<T: Scalar>(report: &ScoreReport<T>, threshold: T) -> Decision {
    if report.max_score >= threshold {
        Decision::Accept(report.best.clone())
    } else {
        Decision::Reject
    }
}

/// Binary prototype store (little-endian):
///
/// ```text
/// magic "KWSPROTO", u32 version, u32 count, u32 dim,
/// count x (u32 keyword byte length, UTF-8 keyword, u32 shots),
/// count x dim f32 values
/// ```
pub fn write_store<T: Scalar>(prototypes: &[Prototype<T>]) -> Result<Vec<u8>> {
    let dim = prototypes.first().map_or(0, |p| p.vector.len());
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(prototypes.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for p in prototypes {
        if p.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.vector.len(),
            });
        }
        out.extend_from_slice(&(p.keyword.len() as u32).to_le_bytes());
        out.extend_from_slice(p.keyword.as_bytes());
        out.extend_from_slice(&(p.shots as u32).to_le_bytes());
    }
    for p in prototypes {
        for v in &p.vector {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_store<T: Scalar>(bytes: &[u8]) -> Result<Vec<Prototype<T>>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("prototype store truncated".into()))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_le = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;

    if take(8)? != STORE_MAGIC {
        return Err(Error::Format("not a prototype store (bad magic)".into()));
    }
    let version = u32_le(take(4)?);
    if version != STORE_VERSION as usize {
        return Err(Error::Format(format!("unsupported prototype store version {version}")));
    }
    let count = u32_le(take(4)?);
    let dim = u32_le(take(4)?);
    let mut header = Vec::new();
    for _ in 0..count {
        let len = u32_le(take(4)?);
        let keyword = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::Format("prototype keyword is not UTF-8".into()))?
            .to_owned();
        let shots = u32_le(take(4)?);
        header.push((keyword, shots));
    }
    let mut prototypes = Vec::with_capacity(count);
    for (keyword, shots) in header {
        let vector = (0..dim)
            .map(|_| {
                let v = f32::from_le_bytes(take(4)?.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::NonFinite("prototype vector"));
                }
                Ok(T::of(v as f64))
            })
            .collect::<Result<Vec<T>>>()?;
        prototypes.push(Prototype {
            keyword,
            vector,
            shots,
        });
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after prototype store".into()));
    }
    Ok(prototypes)
}

pub fn save_store<T: Scalar>(path: impl AsRef<Path>, prototypes: &[Prototype<T>]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_store(prototypes)?).map_err(|e| Error::io(path, e))
}

pub fn load_store<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Prototype<T>>> {
    let path = path.as_ref();
    read_store(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Serialize)]
struct PrototypeJson<'a> {
    keyword: &'a str,
    shots: usize,
    vector: Vec<f64>,
}

/// Pretty JSON array of `{keyword, shots, vector}` objects.
pub fn store_to_json<T: Scalar>(prototypes: &[Prototype<T>]) -> Result<String> {
    let rows: Vec<PrototypeJson> = prototypes
        .iter()
        .map(|p| PrototypeJson {
            keyword: &p.keyword,
            shots: p.shots,
            vector: p.vector.iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(rows: &[(&str, Vec<Vec<f64>>)]) -> BTreeMap<String, Vec<Vec<f64>>> {
        rows.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn proto(k: &str, v: Vec<f64>) -> Prototype<f64> {
        Prototype {
            keyword: k.into(),
            vector: v,
            shots: 1,
        }
    }

    #[test]
    fn enroll_examples() {
        let p = enroll(&samples(&[("a", vec![vec![1.0, 2.0]])]), EnrollMode::Mean).unwrap();
        assert_eq!(p[0].vector, vec![1.0, 2.0]);
        assert_eq!(p[0].shots, 1);

        let p = enroll(&samples(&[("a", vec![vec![1.0, 0.0], vec![0.0, 1.0]])]), EnrollMode::Mean).unwrap();
        assert_eq!(p[0].vector, vec![0.5, 0.5]);
        assert_eq!(p[0].shots, 2);

        let x = vec![0.3, -1.7, 2.2];
        let once = enroll(&samples(&[("a", vec![x.clone()])]), EnrollMode::Mean).unwrap();
        let thrice = enroll(&samples(&[("a", vec![x.clone(); 3])]), EnrollMode::Mean).unwrap();
        assert_eq!(once[0].vector, thrice[0].vector);
    }

    #[test]
    fn enroll_modes_differ_on_unequal_norms() {
        let s = samples(&[("a", vec![vec![2.0, 0.0], vec![0.0, 1.0]])]);
        assert_eq!(enroll(&s, EnrollMode::Mean).unwrap()[0].vector, vec![1.0, 0.5]);
        assert_eq!(
            enroll(&s, EnrollMode::NormalizeThenAverage).unwrap()[0].vector,
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn enroll_errors() {
        let err = enroll(&samples(&[("yes", vec![])]), EnrollMode::Mean).unwrap_err();
        assert!(err.to_string().contains("yes"));
        assert!(enroll::<f64>(&BTreeMap::new(), EnrollMode::Mean).is_err());
        let s = samples(&[("a", vec![vec![1.0, 0.0]]), ("b", vec![vec![1.0]])]);
        assert!(matches!(enroll(&s, EnrollMode::Mean), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn score_examples() {
        let protos = vec![proto("a", vec![1.0, 0.0]), proto("b", vec![0.0, 1.0])];
        let r = score(&[3.0, 4.0], &protos).unwrap();
        assert!((r.scores[0].1 - 0.6).abs() < 1e-15);
        assert!((r.scores[1].1 - 0.8).abs() < 1e-15);
        assert_eq!(r.best, "b");

        let r = score(&[0.0, 2.0], &protos).unwrap();
        assert_eq!(r.max_score, 1.0);
        assert_eq!(r.best, "b");

        let protos3 = vec![proto("a", vec![1.0, 0.0, 0.0]), proto("b", vec![0.0, 1.0, 0.0])];
        let r = score(&[0.0, 0.0, 5.0], &protos3).unwrap();
        assert!(r.scores.iter().all(|(_, s)| *s == 0.0));

        assert!(matches!(score(&[0.0, 0.0], &protos), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn ties_go_to_smallest_keyword() {
        let protos = vec![proto("zeta", vec![1.0, 0.0]), proto("alpha", vec![2.0, 0.0])];
        assert_eq!(score(&[1.0, 1.0], &protos).unwrap().best, "alpha");
        let rev: Vec<_> = protos.into_iter().rev().collect();
        assert_eq!(score(&[1.0, 1.0], &rev).unwrap().best, "alpha");
    }

    #[test]
    fn detect_examples() {
        let report = |s: f64| ScoreReport {
            scores: vec![("k".into(), s)],
            best: "k".into(),
            max_score: s,
        };
        assert_eq!(detect(&report(0.9), 0.5), Decision::Accept("k".into()));
        assert_eq!(detect(&report(0.3), 0.5), Decision::Reject);
        assert_eq!(detect(&report(-1.0), -1.0), Decision::Accept("k".into()));
    }

    #[test]
    fn store_round_trip() {
        let protos = vec![
            Prototype {
                keyword: "on".into(),
                vector: vec![0.25, -1.5, 3.0],
                shots: 5,
            },
            Prototype {
                keyword: "wow".into(),
                vector: vec![1.0, 0.0, -0.125],
                shots: 5,
            },
        ];
        let bytes = write_store(&protos).unwrap();
        assert_eq!(&bytes[..8], b"KWSPROTO");
        // header 20 + keyword table (4+2+4)+(4+3+4) + 6 floats
        assert_eq!(bytes.len(), 20 + 21 + 24);
        assert_eq!(read_store::<f64>(&bytes).unwrap(), protos);
        assert!(read_store::<f64>(&bytes[..bytes.len() - 2]).is_err());
        let json = store_to_json(&protos).unwrap();
        assert!(json.contains("\"wow\""));
    }

    proptest! {
        #[test]
        fn enroll_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8),
            seed in any::<u64>(),
        ) {
            let mut shuffled = rows.clone();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
            let a = enroll(&samples(&[("k", rows)]), EnrollMode::Mean).unwrap();
            let b = enroll(&samples(&[("k", shuffled)]), EnrollMode::Mean).unwrap();
            for (x, y) in a[0].vector.iter().zip(&b[0].vector) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn argmax_is_scale_invariant(
            q in prop::collection::vec(-5.0f64..5.0, 3),
            protos in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..6),
            k in 1e-3f64..1e3,
        ) {
            prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
            prop_assume!(protos.iter().all(|p| p.iter().any(|v| v.abs() > 1e-3)));
            let protos: Vec<_> = protos
                .into_iter()
                .enumerate()
                .map(|(i, v)| proto(&format!("k{i}"), v))
                .collect();
            let scaled: Vec<f64> = q.iter().map(|v| v * k).collect();
            let a = score(&q, &protos).unwrap();
            let b = score(&scaled, &protos).unwrap();
            // distinct maxima only; exact ties may resolve differently after rounding
            let mut s: Vec<f64> = a.scores.iter().map(|x| x.1).collect();
            s.sort_by(|x, y| y.partial_cmp(x).unwrap());
            prop_assume!(s[0] - s[1] > 1e-9);
            prop_assert_eq!(a.best, b.best);
        }
    }
}
