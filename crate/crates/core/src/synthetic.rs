//! Synthetic keyword data for experiments and pipeline tests.
//!
//! [`GaussianKeywords`] draws feature matrices directly: each class owns a
//! mean in a low-dimensional informative subspace, and every sample adds a
//! large shared offset and strong per-sample noise on the remaining
//! coefficients. [`synth_clip`] renders a keyword as a short multi-tone
//! waveform for exercising the audio front-end.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batching::ClassPool;
use crate::dataset::{write_jsonl, ManifestEntry};
use crate::error::{Error, Result};
use crate::features::{AudioClip, PIPELINE_SAMPLE_RATE};
use crate::numcore::Matrix;
use crate::wav::write_wav;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianKeywords {
    pub frames: usize,
    pub coeffs: usize,
    /// Leading coefficients that carry class identity.
    pub informative: usize,
    pub class_sigma: f64,
    pub within_sigma: f64,
    pub nuisance_sigma: f64,
    pub frame_sigma: f64,
    pub offset: f64,
}

impl Default for GaussianKeywords {
    fn default() -> Self {
        GaussianKeywords {
            frames: 10,
            coeffs: 40,
            informative: 8,
            class_sigma: 1.0,
            within_sigma: 0.3,
            nuisance_sigma: 2.0,
            frame_sigma: 0.1,
            offset: 5.0,
        }
    }
}

impl GaussianKeywords {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.informative == 0 || self.informative > self.coeffs {
            return Err(Error::InvalidArgument(
                "need frames > 0 and 0 < informative <= coeffs".into(),
            ));
        }
        let sigmas = [
            self.class_sigma,
            self.within_sigma,
            self.nuisance_sigma,
            self.frame_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) || !self.offset.is_finite() {
            return Err(Error::InvalidArgument("spreads must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Class mean over the informative coefficients.
    fn class_mean(&self, class_seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
        (0..self.informative)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.class_sigma * z
            })
            .collect()
    }

    fn sample(&self, mean: &[f64], rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let mut base = vec![self.offset; self.coeffs];
        for (b, &m) in base.iter_mut().zip(mean) {
            let z: f64 = StandardNormal.sample(rng);
            *b += m + self.within_sigma * z;
        }
        for b in &mut base[self.informative..] {
            let z: f64 = StandardNormal.sample(rng);
            *b += self.nuisance_sigma * z;
        }
        let mut values = Vec::with_capacity(self.frames * self.coeffs);
        for _ in 0..self.frames {
            for &b in &base {
                let jitter: f64 = StandardNormal.sample(rng);
                values.push(b + self.frame_sigma * jitter);
            }
        }
        Matrix::new(self.frames, self.coeffs, values).expect("shape by construction")
    }

    /// `classes` classes named `{prefix}{index:03}` with `per_class` samples
    /// each. Class means depend on `(seed, prefix, index)` only.
    pub fn pool(
        &self,
        prefix: &str,
        classes: usize,
        per_class: usize,
        seed: u64,
    ) -> Result<ClassPool<Matrix<f64>>> {
        self.validate()?;
        (0..classes)
            .map(|c| {
                let name = format!("{prefix}{c:03}");
                let class_seed = derive_seed(seed, &name);
                let mean = self.class_mean(class_seed);
                let mut rng = ChaCha8Rng::seed_from_u64(class_seed ^ 0x5eed);
                let items = (0..per_class).map(|_| self.sample(&mean, &mut rng)).collect();
                Ok((name, items))
            })
            .collect()
    }
}

/// Deterministic 64-bit seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Three keyword-specific tones, 0.6 s long inside a 1 s clip, with small
/// per-utterance pitch, timing and level variation plus white noise.
pub fn synth_clip(keyword: &str, utterance_seed: u64) -> AudioClip {
    let sr = PIPELINE_SAMPLE_RATE as f64;
    let k = derive_seed(0, keyword);
    let tones: Vec<f64> = (0..3)
        .map(|i| 200.0 + ((k >> (i * 16)) & 0xffff) as f64 / 65535.0 * 3300.0)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(utterance_seed, keyword));
    let pitch = 1.0 + rng.random_range(-0.02..0.02);
    let start = rng.random_range(0.1..0.3);
    let level = rng.random_range(0.2..0.4);
    let noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let samples = (0..PIPELINE_SAMPLE_RATE as usize)
        .map(|n| {
            let t = n as f64 / sr;
            let local = t - start;
            let voiced = if (0.0..0.6).contains(&local) {
                let env = (PI * local / 0.6).sin();
                let tone: f64 = tones.iter().map(|f| (2.0 * PI * f * pitch * t).sin()).sum();
                level * env * tone / 3.0
            } else {
                0.0
            };
            voiced + noise.sample(&mut rng)
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: PIPELINE_SAMPLE_RATE,
    }
}

/// Writes `per_keyword` clips of each keyword to `dir` as WAV files plus
/// `manifest.jsonl`. Every `corrupt_every`-th entry (if non-zero) gets a
/// hypothesis that disagrees with its keyword.
pub fn synth_corpus(
    dir: impl AsRef<Path>,
    keywords: &[String],
    per_keyword: usize,
    corrupt_every: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(keywords.len() * per_keyword);
    for keyword in keywords {
        for i in 0..per_keyword {
            let name = format!("{keyword}_{i:04}.wav");
            let clip = synth_clip(keyword, seed.wrapping_add(i as u64));
            write_wav(dir.join(&name), &clip)?;
            let n = entries.len() + 1;
            let hypothesis = if corrupt_every > 0 && n % corrupt_every == 0 {
                format!("{keyword}x")
            } else {
                keyword.clone()
            };
            entries.push(ManifestEntry {
                audio_path: name,
                keyword: keyword.clone(),
                hypothesis,
                duration_s: 1.0,
                source: "synthetic".into(),
            });
        }
    }
    write_jsonl(dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}
