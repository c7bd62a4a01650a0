//! Minimal RIFF/WAVE reader and writer for mono 16 kHz 16-bit PCM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{AudioClip, PIPELINE_SAMPLE_RATE};

const FORMAT_PCM: u16 = 1;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a WAV image held in memory.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let bad = |m: &str| Error::UnsupportedWav(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated chunk"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("short fmt chunk"));
                }
                let tag = u16_at(body, 0);
                let channels = u16_at(body, 2);
                let rate = u32_at(body, 4);
                let bits = u16_at(body, 14);
                if tag != FORMAT_PCM {
                    return Err(Error::UnsupportedWav(format!(
                        "format tag {tag}, expected 1 (PCM)"
                    )));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedWav(format!(
                        "{channels} channels, expected mono"
                    )));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedWav(format!(
                        "{bits}-bit samples, expected 16-bit"
                    )));
                }
                if rate != PIPELINE_SAMPLE_RATE {
                    return Err(Error::UnsupportedWav(format!(
                        "sample rate {rate} Hz, expected {PIPELINE_SAMPLE_RATE} Hz"
                    )));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(bad("data chunk before fmt chunk"));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(AudioClip {
                    samples,
                    sample_rate: PIPELINE_SAMPLE_RATE,
                });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    Err(bad("no data chunk"))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::UnsupportedWav(m) => Error::UnsupportedWav(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encodes a clip as 16-bit PCM; samples are clamped to `[-1, 1]`.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}
