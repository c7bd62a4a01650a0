//! Audio front-end: length normalization, MFCC extraction and additive
//! noise augmentation.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const PIPELINE_SAMPLE_RATE: u32 = 16000;

/// Clip length used by the pipeline, in seconds.
pub const CLIP_SECONDS: f64 = 1.0;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio clip"));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|s| s * s).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub fft_size: usize,
    pub log_floor: f64,
    /// First-order pre-emphasis coefficient; 0 disables it.
    pub pre_emphasis: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            window_ms: 30.0,
            shift_ms: 10.0,
            n_mels: 40,
            n_coeffs: 40,
            fft_size: 512,
            log_floor: 1e-10,
            pre_emphasis: 0.0,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames produced for a clip of `len` samples.
    pub fn frame_count(&self, len: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_samples(sample_rate);
        let shift = self.shift_samples(sample_rate);
        (len >= win).then(|| 1 + (len - win) / shift)
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        let win = self.window_samples(sample_rate);
        if win == 0 || self.shift_samples(sample_rate) == 0 {
            return Err(Error::InvalidArgument("window and shift must be non-empty".into()));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(Error::InvalidArgument(format!(
                "n_coeffs {} must be in 1..={}",
                self.n_coeffs, self.n_mels
            )));
        }
        if self.fft_size < win {
            return Err(Error::InvalidArgument(format!(
                "fft_size {} shorter than window {win}",
                self.fft_size
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidArgument("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Truncates from the end or zero-pads at the end to `round(seconds * rate)`
/// samples.
pub fn fix_length(clip: &AudioClip, seconds: f64) -> AudioClip {
    let target = (seconds * clip.sample_rate as f64).round() as usize;
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Reusable MFCC pipeline for one sample rate.
pub struct MfccExtractor {
    cfg: MfccConfig,
    sample_rate: u32,
    window: Vec<f64>,
    // n_mels rows over fft_size / 2 + 1 bins
    filterbank: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let win = cfg.window_samples(sample_rate);
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (win as f64 - 1.0).max(1.0)).cos())
            .collect();

        let n_bins = cfg.fft_size / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let filterbank = (0..cfg.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate as f64 / cfg.fft_size as f64;
                        let up = (f - lo) / (mid - lo);
                        let down = (hi - f) / (hi - mid);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();

        // orthonormal DCT-II
        let n = cfg.n_mels as f64;
        let dct = (0..cfg.n_coeffs)
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                (0..cfg.n_mels)
                    .map(|i| scale * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                    .collect()
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(MfccExtractor {
            cfg,
            sample_rate,
            window,
            filterbank,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.filterbank
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<Matrix<f64>> {
        if clip.sample_rate != self.sample_rate {
            return Err(Error::SampleRateMismatch(clip.sample_rate, self.sample_rate));
        }
        let win = self.window.len();
        let shift = self.cfg.shift_samples(self.sample_rate);
        let frames = self
            .cfg
            .frame_count(clip.len(), self.sample_rate)
            .ok_or(Error::ClipTooShort {
                len: clip.len(),
                window: win,
            })?;

        let signal: Vec<f64> = if self.cfg.pre_emphasis != 0.0 {
            let a = self.cfg.pre_emphasis;
            let s = &clip.samples;
            (0..s.len())
                .map(|i| if i == 0 { s[0] } else { s[i] - a * s[i - 1] })
                .collect()
        } else {
            clip.samples.clone()
        };

        let n_bins = self.cfg.fft_size / 2 + 1;
        let mut out = Matrix::zeros(frames, self.cfg.n_coeffs);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut mag = vec![0.0; n_bins];
        let mut logmel = vec![0.0; self.cfg.n_mels];
        for f in 0..frames {
            let start = f * shift;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (&s, &w)) in signal[start..start + win].iter().zip(&self.window).enumerate() {
                buf[i].re = s * w;
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for (lm, filt) in logmel.iter_mut().zip(&self.filterbank) {
                let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
                *lm = e.max(self.cfg.log_floor).ln();
            }
            for (c, basis) in out.row_mut(f).iter_mut().zip(&self.dct) {
                *c = basis.iter().zip(&logmel).map(|(b, x)| b * x).sum();
            }
        }
        Ok(out)
    }
}

/// One-shot MFCC extraction; build an [`MfccExtractor`] to amortize setup.
pub fn mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<Matrix<f64>> {
    MfccExtractor::new(cfg.clone(), clip.sample_rate)?.extract(clip)
}

/// Gain applied to the noise segment so that clip power over scaled noise
/// power equals `10^(snr_db / 10)`.
pub fn noise_gain(clip_power: f64, noise_power: f64, snr_db: f64) -> Result<f64> {
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db {snr_db}")));
    }
    if noise_power <= 0.0 {
        return Err(Error::InvalidArgument(
            "silent noise cannot reach a finite SNR".into(),
        ));
    }
    Ok((clip_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Mixes a noise segment into `clip` at `snr_db`. The noise is tiled if
/// shorter than the clip; the segment offset is drawn from `seed`.
/// `f64::INFINITY` returns the clip unchanged.
pub fn add_noise(clip: &AudioClip, noise: &AudioClip, snr_db: f64, seed: u64) -> Result<AudioClip> {
    if clip.sample_rate != noise.sample_rate {
        return Err(Error::SampleRateMismatch(clip.sample_rate, noise.sample_rate));
    }
    if snr_db == f64::INFINITY {
        return Ok(clip.clone());
    }
    if noise.is_empty() {
        return Err(Error::Empty("noise clip"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..noise.len());
    let segment: Vec<f64> = (0..clip.len())
        .map(|i| noise.samples[(offset + i) % noise.len()])
        .collect();
    let g = noise_gain(clip.power(), mean_power(&segment), snr_db)?;
    let samples = clip
        .samples
        .iter()
        .zip(&segment)
        .map(|(s, n)| s + g * n)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn noise_clip(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip {
            samples: (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn fix_length_cases() {
        let c = noise_clip(16000, 1);
        assert_eq!(fix_length(&c, 1.0), c);

        let long = noise_clip(20000, 2);
        let t = fix_length(&long, 1.0);
        assert_eq!(t.samples, long.samples[..16000]);

        let short = noise_clip(8000, 3);
        let p = fix_length(&short, 1.0);
        assert_eq!(p.len(), 16000);
        assert_eq!(p.samples[..8000], short.samples[..]);
        assert!(p.samples[8000..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn one_second_gives_98_by_40() {
        let m = mfcc(&noise_clip(16000, 4), &MfccConfig::default()).unwrap();
        assert_eq!(m.shape(), (98, 40));
    }

    #[test]
    fn silent_clip_frames_identical() {
        let z = AudioClip {
            samples: vec![0.0; 16000],
            sample_rate: 16000,
        };
        let m = mfcc(&z, &MfccConfig::default()).unwrap();
        for r in 1..m.rows() {
            assert_eq!(m.row(r), m.row(0));
        }
    }

    #[test]
    fn deterministic() {
        let c = noise_clip(16000, 5);
        let cfg = MfccConfig::default();
        assert_eq!(mfcc(&c, &cfg).unwrap(), mfcc(&c, &cfg).unwrap());
    }

    #[test]
    fn too_short_rejected() {
        let c = noise_clip(479, 6);
        assert!(matches!(
            mfcc(&c, &MfccConfig::default()),
            Err(Error::ClipTooShort { len: 479, window: 480 })
        ));
    }

    #[test]
    fn config_validation() {
        let cfg = MfccConfig {
            n_coeffs: 41,
            ..MfccConfig::default()
        };
        assert!(MfccExtractor::new(cfg, 16000).is_err());
        let cfg = MfccConfig {
            fft_size: 256,
            ..MfccConfig::default()
        };
        assert!(MfccExtractor::new(cfg, 16000).is_err());
    }

    #[test]
    fn every_mel_filter_is_populated() {
        let ex = MfccExtractor::new(MfccConfig::default(), 16000).unwrap();
        for (i, f) in ex.filterbank().iter().enumerate() {
            assert!(f.iter().sum::<f64>() > 0.0, "filter {i} empty");
        }
    }

    #[test]
    fn gain_is_unity_at_zero_db_for_equal_power() {
        assert!((noise_gain(1.0, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-9);
        assert!(noise_gain(1.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn add_noise_contract() {
        let c = noise_clip(16000, 7);
        let n = noise_clip(4000, 8);
        assert_eq!(add_noise(&c, &n, f64::INFINITY, 0).unwrap(), c);

        let a = add_noise(&c, &n, 5.0, 42).unwrap();
        assert_eq!(a, add_noise(&c, &n, 5.0, 42).unwrap());

        // achieved SNR matches the request
        let resid: Vec<f64> = a.samples.iter().zip(&c.samples).map(|(x, y)| x - y).collect();
        let snr = 10.0 * (c.power() / mean_power(&resid)).log10();
        assert!((snr - 5.0).abs() < 1e-9);

        let mut other_rate = n.clone();
        other_rate.sample_rate = 8000;
        assert!(matches!(
            add_noise(&c, &other_rate, 5.0, 0),
            Err(Error::SampleRateMismatch(..))
        ));
        let silent = AudioClip {
            samples: vec![0.0; 100],
            sample_rate: 16000,
        };
        assert!(add_noise(&c, &silent, 5.0, 0).is_err());
    }

    #[test]
    fn unit_power_noise_at_zero_db_adds_noise_unscaled() {
        // +/-1 square waves: unit power for any segment
        let c = AudioClip {
            samples: (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            sample_rate: 16000,
        };
        let n = AudioClip {
            samples: (0..1000).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect(),
            sample_rate: 16000,
        };
        let out = add_noise(&c, &n, 0.0, 9).unwrap();
        let diff: Vec<f64> = out.samples.iter().zip(&c.samples).map(|(a, b)| a - b).collect();
        assert!(diff.iter().all(|d| (d.abs() - 1.0).abs() < 1e-9));
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 480usize..32000) {
            let cfg = MfccConfig::default();
            prop_assert_eq!(cfg.frame_count(len, 16000), Some(1 + (len - 480) / 160));
        }

        #[test]
        fn scaling_moves_only_c0(seed in 0u64..1000, s in 0.05..20.0f64) {
            let c = noise_clip(4000, seed);
            let scaled = AudioClip {
                samples: c.samples.iter().map(|x| x * s).collect(),
                sample_rate: 16000,
            };
            let cfg = MfccConfig::default();
            let a = mfcc(&c, &cfg).unwrap();
            let b = mfcc(&scaled, &cfg).unwrap();
            let c0_shift = s.ln() * (cfg.n_mels as f64).sqrt();
            for r in 0..a.rows() {
                prop_assert!((b[(r, 0)] - a[(r, 0)] - c0_shift).abs() < 1e-6);
                for k in 1..cfg.n_coeffs {
                    prop_assert!((b[(r, k)] - a[(r, k)]).abs() < 1e-6);
                }
            }
        }
    }
}
