use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono audio with samples nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Input("audio clip is empty".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit PCM mono RIFF/WAVE file, scaling samples by 1/32768.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Input(format!("{}: not a readable WAV file: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Input(format!(
            "{}: expected 16-bit PCM, found {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Input(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| Error::Input(format!("{}: corrupt sample data: {e}", path.display())))?;
    AudioClip::new(samples, spec.sample_rate)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Quantizes to 16-bit PCM with `round(x · 32768)` clamped to the i16 range.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other}", path.display())),
    };
    let mut w = WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &clip.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.0; 100], 16000).unwrap();
        write_wav(&p, &clip).unwrap();
        assert!(read_wav(&p).unwrap().samples.iter().all(|&s| s == 0.0));

        let clip = AudioClip::new(vec![1.0, -1.0, 32767.0 / 32768.0], 16000).unwrap();
        write_wav(&p, &clip).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples, vec![32767.0 / 32768.0, -1.0, 32767.0 / 32768.0]);
        assert!((back.samples[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn round_trip_error_is_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.wav");
        let samples: Vec<f32> = (0..4000).map(|i| 0.7 * (i as f32 * 0.05).sin()).collect();
        let clip = AudioClip::new(samples.clone(), 8000).unwrap();
        write_wav(&p, &clip).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        let err = samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1.0 / 32768.0, "{err}");
    }

    #[test]
    fn rejects_stereo_and_float_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&p).unwrap_err();
        assert!(err.to_string().contains("mono"), "{err}");

        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&p).unwrap_err().to_string().contains("16-bit"));

        std::fs::write(&p, b"not a wav").unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Input(_))));
    }
}
