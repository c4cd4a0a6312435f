use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::AudioClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `frames × mel_bins` log-mel energies.
pub type FeatureMatrix = Tensor<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub mel_bins: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub f_min: f64,
    /// Upper filterbank edge; `None` means the Nyquist frequency.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16000,
            mel_bins: 64,
            window_ms: 25.0,
            hop_ms: 10.0,
            f_min: 20.0,
            f_max: None,
            log_floor: 1e-6,
        }
    }
}

impl FeatureConfig {
    pub fn with_mel_bins(mel_bins: usize) -> Self {
        FeatureConfig {
            mel_bins,
            ..Self::default()
        }
    }

    pub fn window_len(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_len().next_power_of_two()
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Value of a frame with zero energy in every band.
    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        let (w, h) = (self.window_len(), self.hop_len());
        if samples < w {
            0
        } else {
            (samples - w) / h + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.mel_bins == 0 {
            return Err(Error::Config("sample_rate and mel_bins must be >= 1".into()));
        }
        if self.window_len() == 0 || self.hop_len() == 0 {
            return Err(Error::Config("window and hop must cover at least one sample".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max() && self.f_max() <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "filterbank band {}..{} Hz is invalid for {} Hz audio",
                self.f_min,
                self.f_max(),
                self.sample_rate
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, evaluated at FFT bin centers.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[mel_bins][fft_size / 2 + 1]`
    pub weights: Vec<Vec<f64>>,
    /// Lower edge, center and upper edge of each filter in Hz.
    pub edges: Vec<(f64, f64, f64)>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let n_fft = cfg.fft_size();
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max()));
        let m = cfg.mel_bins;
        let points: Vec<f64> = (0..m + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (m + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
        let mut weights = vec![vec![0.0; bins]; m];
        let mut edges = Vec::with_capacity(m);
        for (j, row) in weights.iter_mut().enumerate() {
            let (l, c, r) = (points[j], points[j + 1], points[j + 2]);
            edges.push((l, c, r));
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
            }
        }
        MelFilterbank { weights, edges }
    }
}

/// Reusable frame analyzer; precomputes the window, FFT plan and filterbank.
pub struct Lfbe {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl Lfbe {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_len();
        // periodic Hann
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size());
        Ok(Lfbe {
            cfg: cfg.clone(),
            window,
            fft,
            bank: MelFilterbank::new(cfg),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::Input(format!(
                "clip sampled at {} Hz, features configured for {} Hz",
                clip.sample_rate, self.cfg.sample_rate
            )));
        }
        let frames = self.cfg.frame_count(clip.samples.len());
        if frames == 0 {
            return Err(Error::Input(format!(
                "clip of {} samples is shorter than one {}-sample window",
                clip.samples.len(),
                self.cfg.window_len()
            )));
        }
        let (w, h, n_fft) = (self.cfg.window_len(), self.cfg.hop_len(), self.cfg.fft_size());
        let bins = n_fft / 2 + 1;
        let m = self.cfg.mel_bins;
        let mut out = Vec::with_capacity(frames * m);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; bins];
        for f in 0..frames {
            let seg = &clip.samples[f * h..f * h + w];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < w {
                    Complex::new(seg[i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr();
            }
            for row in &self.bank.weights {
                let e: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
                out.push((e + self.cfg.log_floor).ln() as f32);
            }
        }
        Tensor::new(&[frames, m], out)
    }
}

/// One-shot LFBE extraction.
pub fn lfbe(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    Lfbe::new(cfg)?.compute(clip)
}

/// Center-crops or pads (with `pad_value`) along the frame axis. Cropping
/// starts at `floor(excess / 2)`; padding puts `floor(missing / 2)` frames
/// before and the rest after.
pub fn fit_frames(features: &FeatureMatrix, target_frames: usize, pad_value: f32) -> Result<FeatureMatrix> {
    if target_frames == 0 {
        return Err(Error::Config("target frame count must be >= 1".into()));
    }
    let (frames, m) = (features.shape()[0], features.shape()[1]);
    let data = features.data();
    let out = if frames >= target_frames {
        let start = (frames - target_frames) / 2;
        data[start * m..(start + target_frames) * m].to_vec()
    } else {
        let before = (target_frames - frames) / 2;
        let after = target_frames - frames - before;
        let mut v = vec![pad_value; before * m];
        v.extend_from_slice(data);
        v.extend(std::iter::repeat_n(pad_value, after * m));
        v
    };
    Tensor::new(&[target_frames, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> AudioClip {
        let n = (secs * sr as f64) as usize;
        let s = (0..n).map(|i| (0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32).collect();
        AudioClip::new(s, sr).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let cfg = FeatureConfig::default();
        assert_eq!((cfg.window_len(), cfg.hop_len(), cfg.fft_size()), (400, 160, 512));
        let f = lfbe(&sine(440.0, 1.0, 16000), &cfg).unwrap();
        assert_eq!(f.shape(), &[98, 64]);
    }

    #[test]
    fn silence_is_the_log_floor() {
        let cfg = FeatureConfig::with_mel_bins(20);
        let clip = AudioClip::new(vec![0.0; 16000], 16000).unwrap();
        let f = lfbe(&clip, &cfg).unwrap();
        let floor = (1e-6f64).ln() as f32;
        assert!(f.data().iter().all(|&v| v == floor));
        assert_eq!(cfg.floor_value(), floor);
    }

    #[test]
    fn tone_peaks_in_the_filter_covering_it() {
        let cfg = FeatureConfig::default();
        let ex = Lfbe::new(&cfg).unwrap();
        // 1 kHz falls exactly on FFT bin 32 at 16 kHz / 512.
        let col = 32;
        let expect = (0..cfg.mel_bins)
            .max_by(|&a, &b| ex.bank.weights[a][col].total_cmp(&ex.bank.weights[b][col]))
            .unwrap();
        let (l, _, r) = ex.bank.edges[expect];
        assert!(l < 1000.0 && 1000.0 < r);
        let f = ex.compute(&sine(1000.0, 1.0, 16000)).unwrap();
        for frame in 0..f.shape()[0] {
            let row = f.row(frame);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, expect, "frame {frame}");
        }
    }

    #[test]
    fn filterbank_is_a_partition_bounded_by_one() {
        for mels in [20, 40, 64] {
            let bank = MelFilterbank::new(&FeatureConfig::with_mel_bins(mels));
            for k in 0..bank.weights[0].len() {
                let total: f64 = bank.weights.iter().map(|r| r[k]).sum();
                assert!(total <= 1.0 + 1e-6, "bin {k}: {total}");
            }
            assert!(bank.weights.iter().flatten().all(|&w| w >= 0.0));
            assert!(bank.weights.iter().all(|r| r.iter().any(|&w| w > 0.0)));
        }
    }

    #[test]
    fn short_clip_is_an_input_error() {
        let clip = AudioClip::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(lfbe(&clip, &FeatureConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn fit_frames_crop_and_pad() {
        let f = Tensor::from_fn(&[98, 2], |i| (i / 2) as f32).unwrap();
        assert!(fit_frames(&f, 98, -1.0).unwrap().bit_eq(&f));
        let c = fit_frames(&f, 76, -1.0).unwrap();
        assert_eq!(c.row(0), &[11.0, 11.0]);
        assert_eq!(c.row(75), &[86.0, 86.0]);

        let s = Tensor::from_fn(&[50, 1], |i| i as f32).unwrap();
        let p = fit_frames(&s, 98, -9.0).unwrap();
        assert!(p.data()[..24].iter().all(|&v| v == -9.0));
        assert_eq!(p.data()[24], 0.0);
        assert_eq!(p.data()[73], 49.0);
        assert!(p.data()[74..].iter().all(|&v| v == -9.0));
        assert_eq!(p.data().len() - 74, 24);

        let odd = fit_frames(&s, 53, -9.0).unwrap();
        assert_eq!(odd.data()[1], 0.0);
        assert_eq!(odd.data()[51], -9.0);
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 400usize..40_000) {
            let cfg = FeatureConfig::with_mel_bins(8);
            let clip = AudioClip::new(vec![0.01; len], 16000).unwrap();
            let f = lfbe(&clip, &cfg).unwrap();
            prop_assert_eq!(f.shape()[0], (len - 400) / 160 + 1);
            prop_assert!(f.data().iter().all(|v| v.is_finite() && *v >= cfg.floor_value()));
        }
    }
}
