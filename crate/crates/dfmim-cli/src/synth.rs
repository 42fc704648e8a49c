//! Synthetic labeled audio for pipeline smoke tests.
//!
//! Four acoustically distinct classes: three harmonic tones at well
//! separated fundamentals with class-specific noise floors, and one
//! broadband hiss. "Speakers" shift the fundamentals by a per-speaker
//! factor of up to a few percent, small against the class spacing, so a
//! speaker-independent split stays solvable. Every utterance is a pure
//! function of (seed, utterance index).

use std::path::{Path, PathBuf};

use dfmim_core::rng::{stream, Domain};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::audio::{save_wav_mono16, AudioError};
use crate::manifest::{Manifest, ManifestError, Utterance};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot create {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

pub const CLASS_NAMES: [&str; 4] = ["tone_low", "tone_mid", "tone_high", "hiss"];

/// Fundamentals (Hz) of the tonal classes; the fourth class is noise.
const FUNDAMENTALS: [f64; 3] = [250.0, 700.0, 1600.0];
/// Noise floor relative to tone amplitude, one per class.
const NOISE_FLOORS: [f64; 4] = [0.02, 0.04, 0.08, 1.0];
const HARMONIC_AMPS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 20,
            sample_rate: 16_000,
            seed: 7,
        }
    }
}

/// Per-speaker pitch factor in [0.94, 1.06], spread evenly so speakers
/// are distinct but never bridge the class spacing.
fn speaker_factor(speaker: usize, n_speakers: usize) -> f64 {
    if n_speakers <= 1 {
        return 1.0;
    }
    let centered = speaker as f64 / (n_speakers - 1) as f64 - 0.5;
    1.0 + 0.12 * centered
}

fn synthesize(class: usize, pitch_factor: f64, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let duration = 0.8 + 0.4 * rng.random::<f64>();
    let n = (duration * sample_rate as f64).round() as usize;
    let amp = 0.35 + 0.25 * rng.random::<f64>();
    let vib_depth = 0.004 + 0.004 * rng.random::<f64>();
    let vib_rate = 4.0 + 2.0 * rng.random::<f64>();
    let phases: Vec<f64> = (0..HARMONIC_AMPS.len())
        .map(|_| rng.random::<f64>() * core::f64::consts::TAU)
        .collect();
    let noise_floor = NOISE_FLOORS[class];
    let dt = 1.0 / sample_rate as f64;
    let ramp = (0.01 * sample_rate as f64) as usize;

    (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            let tone = if class < 3 {
                let f0 = FUNDAMENTALS[class]
                    * pitch_factor
                    * (1.0 + vib_depth * (core::f64::consts::TAU * vib_rate * t).sin());
                HARMONIC_AMPS
                    .iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(h, (&a, &phi))| {
                        a * (core::f64::consts::TAU * f0 * (h + 1) as f64 * t + phi).sin()
                    })
                    .sum::<f64>()
                    / 1.75
            } else {
                0.0
            };
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * noise_floor;
            let envelope = if i < ramp {
                i as f64 / ramp as f64
            } else if i + ramp >= n {
                (n - i) as f64 / ramp as f64
            } else {
                1.0
            };
            (amp * (tone + 0.3 * noise) * envelope).clamp(-0.99, 0.99)
        })
        .collect()
}

/// Writes `n_speakers * utts_per_speaker` WAVs under `dir/wav/` plus a
/// `manifest.csv`, and returns the manifest path. Classes rotate within
/// each speaker, so every speaker covers all four classes.
pub fn generate_corpus(dir: &Path, spec: &SynthSpec) -> Result<PathBuf, SynthError> {
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|source| SynthError::Io {
        path: wav_dir.display().to_string(),
        source,
    })?;

    let mut rows = Vec::new();
    for speaker in 0..spec.n_speakers {
        let pitch = speaker_factor(speaker, spec.n_speakers);
        for u in 0..spec.utts_per_speaker {
            let idx = speaker * spec.utts_per_speaker + u;
            let class = idx % CLASS_NAMES.len();
            let mut rng = stream(spec.seed, Domain::Synth, idx as u64);
            let samples = synthesize(class, pitch, spec.sample_rate, &mut rng);
            let speaker_name = format!("spk{speaker:02}");
            let file = format!("utt{idx:04}_{speaker_name}_{}.wav", CLASS_NAMES[class]);
            let path = wav_dir.join(&file);
            save_wav_mono16(&path, &samples, spec.sample_rate)?;
            rows.push(Utterance {
                path: PathBuf::from("wav").join(&file),
                speaker: speaker_name,
                session: format!("ses{}", u % 2),
                label: CLASS_NAMES[class].to_string(),
            });
        }
    }
    let manifest = Manifest::from_rows(rows)?;
    let manifest_path = dir.join("manifest.csv");
    manifest.write(&manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            n_speakers: 4,
            utts_per_speaker: 4,
            sample_rate: 16_000,
            seed: 3,
        }
    }

    #[test]
    fn corpus_has_declared_shape_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = generate_corpus(dir.path(), &tiny_spec()).unwrap();
        let manifest = Manifest::read(&manifest_path).unwrap();
        assert_eq!(manifest.len(), 16);
        assert_eq!(manifest.speakers().len(), 4);
        let labels = manifest.labels();
        assert_eq!(labels.len(), 4);
        for name in CLASS_NAMES {
            assert!(labels.contains(name));
        }
        let first = &manifest.rows()[0];
        let signal = crate::audio::load_wav(&dir.path().join(&first.path)).unwrap();
        assert_eq!(signal.sample_rate(), 16_000);
        let secs = signal.samples().len() as f64 / 16_000.0;
        assert!((0.8..=1.2).contains(&secs), "duration {secs}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let ma = generate_corpus(a.path(), &spec).unwrap();
        let mb = generate_corpus(b.path(), &spec).unwrap();
        assert_eq!(
            Manifest::read(&ma).unwrap().rows(),
            Manifest::read(&mb).unwrap().rows()
        );
        let rel = &Manifest::read(&ma).unwrap().rows()[5].path.clone();
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap()
        );
    }

    #[test]
    fn classes_have_distinct_energy_profiles() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = generate_corpus(dir.path(), &tiny_spec()).unwrap();
        let manifest = Manifest::read(&manifest_path).unwrap();
        // Zero-crossing rate orders the tonal classes and peaks for hiss.
        let mut zcr_by_label = std::collections::BTreeMap::<String, Vec<f64>>::new();
        for row in manifest.rows() {
            let signal = crate::audio::load_wav(&dir.path().join(&row.path)).unwrap();
            let s = signal.samples();
            let crossings = s.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
            zcr_by_label
                .entry(row.label.clone())
                .or_default()
                .push(crossings as f64 / s.len() as f64);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let low = mean(&zcr_by_label["tone_low"]);
        let mid = mean(&zcr_by_label["tone_mid"]);
        let high = mean(&zcr_by_label["tone_high"]);
        let hiss = mean(&zcr_by_label["hiss"]);
        assert!(low < mid && mid < high && high < hiss, "{low} {mid} {high} {hiss}");
    }
}
