use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::wav::AudioClip;
use crate::error::{Error, Result};

const F_LOW: f64 = 300.0;
const F_HIGH: f64 = 4000.0;
const SWEEP: f64 = 0.2;
const TONE_START: f64 = 0.2;
const TONE_SECS: f64 = 0.6;
const TAPER_SECS: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub duration_secs: f64,
    /// Inclusive SNR range in dB; `None` yields noiseless clips.
    pub snr_db: Option<(f64, f64)>,
}

impl SynthConfig {
    pub fn new(num_classes: usize, per_class: usize, seed: u64) -> Self {
        SynthConfig {
            num_classes,
            per_class,
            seed,
            sample_rate: 16000,
            duration_secs: 1.0,
            snr_db: Some((5.0, 20.0)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clip: AudioClip,
    pub label: usize,
    /// `class_XX/NNNN`
    pub id: String,
}

pub fn class_name(label: usize) -> String {
    format!("class_{label:02}")
}

/// Start frequency of class `c`, log-spaced over 300 Hz to 4 kHz.
pub fn base_frequency(c: usize, num_classes: usize) -> f64 {
    let t = c as f64 / (num_classes - 1) as f64;
    F_LOW * (F_HIGH / F_LOW).powf(t)
}

/// Even classes sweep up by 20%, odd classes sweep down.
pub fn sweep_factor(c: usize) -> f64 {
    if c.is_multiple_of(2) {
        1.0 + SWEEP
    } else {
        1.0 - SWEEP
    }
}

/// Unit-amplitude chirp for class `c` with a given frequency scale and phase;
/// silent outside the centered tone segment.
pub fn chirp(c: usize, num_classes: usize, sample_rate: u32, len: usize, freq_scale: f64, phase: f64) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f0 = base_frequency(c, num_classes) * freq_scale;
    let f1 = f0 * sweep_factor(c);
    let start = (TONE_START * sr) as usize;
    let n = ((TONE_SECS * sr) as usize).min(len.saturating_sub(start));
    let taper = (TAPER_SECS * sr).max(1.0);
    let mut out = vec![0.0; len];
    for i in 0..n {
        let t = i as f64 / sr;
        // linear chirp: phase = 2π (f0 t + (f1 - f0) t² / (2 T))
        let arg = 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * TONE_SECS)) + phase;
        let edge = (i as f64).min((n - 1 - i) as f64);
        let env = if edge < taper {
            0.5 - 0.5 * (PI * edge / taper).cos()
        } else {
            1.0
        };
        out[start + i] = env * arg.sin();
    }
    out
}

/// Chirp templates mixed with Gaussian noise at a random SNR; fully
/// determined by the config.
pub fn synth_clips(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    if cfg.num_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.sample_rate == 0 || cfg.duration_secs <= 0.0 {
        return Err(Error::Config("synthetic clips need a positive rate and duration".into()));
    }
    let len = (cfg.duration_secs * cfg.sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    for c in 0..cfg.num_classes {
        for i in 0..cfg.per_class {
            let amp = rng.random_range(0.2..0.6);
            let phase = rng.random_range(0.0..2.0 * PI);
            let scale = rng.random_range(0.98..1.02);
            let mut x = chirp(c, cfg.num_classes, cfg.sample_rate, len, scale, phase);
            x.iter_mut().for_each(|v| *v *= amp);
            if let Some((lo, hi)) = cfg.snr_db {
                let snr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let p_signal = x.iter().map(|v| v * v).sum::<f64>() / len as f64;
                let sigma = (p_signal / 10f64.powf(snr / 10.0)).sqrt();
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * z;
                }
            }
            let samples = x.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();
            out.push(SynthClip {
                clip: AudioClip::new(samples, cfg.sample_rate)?,
                label: c,
                id: format!("{}/{:04}", class_name(c), i),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn power_spectrum(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf[..x.len() / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::new(3, 4, 9);
        let a = synth_clips(&cfg).unwrap();
        let b = synth_clips(&cfg).unwrap();
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.id, y.id);
        }
        let c = synth_clips(&SynthConfig::new(3, 4, 10)).unwrap();
        assert_ne!(a[0].clip, c[0].clip);
    }

    #[test]
    fn counts_and_labels() {
        let clips = synth_clips(&SynthConfig::new(4, 250, 0)).unwrap();
        assert_eq!(clips.len(), 1000);
        for c in 0..4 {
            assert_eq!(clips.iter().filter(|x| x.label == c).count(), 250);
        }
        assert_eq!(clips[251].id, "class_01/0001");
        assert!(synth_clips(&SynthConfig::new(1, 5, 0)).is_err());
    }

    #[test]
    fn noiseless_clips_match_their_own_template() {
        let mut cfg = SynthConfig::new(6, 20, 4);
        cfg.snr_db = None;
        let clips = synth_clips(&cfg).unwrap();
        let len = clips[0].clip.samples.len();
        let templates: Vec<Vec<f64>> = (0..6)
            .map(|c| power_spectrum(&chirp(c, 6, 16000, len, 1.0, 0.0)))
            .collect();
        for s in &clips {
            let x: Vec<f64> = s.clip.samples.iter().map(|&v| v as f64).collect();
            let p = power_spectrum(&x);
            let best = (0..6)
                .max_by(|&a, &b| cosine(&p, &templates[a]).total_cmp(&cosine(&p, &templates[b])))
                .unwrap();
            assert_eq!(best, s.label, "{}", s.id);
        }
    }

    #[test]
    fn noise_level_tracks_the_snr_range() {
        let clean = {
            let mut c = SynthConfig::new(2, 1, 3);
            c.snr_db = None;
            synth_clips(&c).unwrap()
        };
        let mut cfg = SynthConfig::new(2, 1, 3);
        cfg.snr_db = Some((10.0, 10.0));
        let noisy = synth_clips(&cfg).unwrap();
        // same rng draws for amplitude/phase/scale, so the difference is the noise
        let s: f64 = clean[0].clip.samples.iter().map(|&v| (v as f64).powi(2)).sum();
        let n: f64 = clean[0]
            .clip
            .samples
            .iter()
            .zip(&noisy[0].clip.samples)
            .map(|(&a, &b)| ((b - a) as f64).powi(2))
            .sum();
        let snr = 10.0 * (s / n).log10();
        assert!((snr - 10.0).abs() < 0.3, "{snr}");
    }
}
