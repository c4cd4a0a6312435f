use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::slim::{ac, WidthList};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvRow {
    pub kernel: (usize, usize),
    pub channels: usize,
    pub stride: (usize, usize),
    pub pool: (usize, usize),
}

impl ConvRow {
    pub const fn new(kernel: (usize, usize), channels: usize, stride: (usize, usize), pool: (usize, usize)) -> Self {
        ConvRow {
            kernel,
            channels,
            stride,
            pool,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Width of the frame embedding, positional table and class token. These
    /// stay at full width; the first block's input projection slims them.
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    Cnn {
        rows: Vec<ConvRow>,
        /// Slim the output channels of the last conv as well as its input.
        slim_last_output: bool,
    },
    Transformer(TransformerSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub frames: usize,
    pub mel_bins: usize,
    pub num_classes: usize,
    pub widths: WidthList,
}

/// Spatial bookkeeping for one conv row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConvGeometry {
    pub input_hw: (usize, usize),
    pub conv_hw: (usize, usize),
    pub pooled_hw: (usize, usize),
}

/// Walks the conv stack under valid padding; fails naming the first layer
/// whose kernel or pool window no longer fits.
pub fn cnn_geometry(rows: &[ConvRow], frames: usize, mel_bins: usize) -> Result<Vec<ConvGeometry>> {
    let (mut h, mut w) = (frames, mel_bins);
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let layer = i + 1;
        let (kh, kw) = r.kernel;
        if kh > h || kw > w {
            return Err(Error::Config(format!(
                "conv layer {layer}: kernel {kh}x{kw} larger than its {h}x{w} input"
            )));
        }
        let conv_hw = ((h - kh) / r.stride.0 + 1, (w - kw) / r.stride.1 + 1);
        let (ph, pw) = r.pool;
        if ph > conv_hw.0 || pw > conv_hw.1 {
            return Err(Error::Config(format!(
                "conv layer {layer}: pool {ph}x{pw} larger than its {}x{} input",
                conv_hw.0, conv_hw.1
            )));
        }
        let pooled_hw = (conv_hw.0 / ph, conv_hw.1 / pw);
        out.push(ConvGeometry {
            input_hw: (h, w),
            conv_hw,
            pooled_hw,
        });
        (h, w) = pooled_hw;
    }
    Ok(out)
}

/// Rows of the five-layer CNN super-network.
pub const BASELINE_CNN_ROWS: [ConvRow; 5] = [
    ConvRow::new((5, 4), 32, (1, 2), (2, 1)),
    ConvRow::new((3, 4), 32, (1, 3), (2, 1)),
    ConvRow::new((4, 4), 40, (1, 2), (2, 1)),
    ConvRow::new((7, 4), 128, (1, 1), (1, 1)),
    ConvRow::new((1, 1), 160, (1, 1), (1, 1)),
];

/// Small CNN sized for 20 mel bins and fast CPU training.
pub const DESK_CNN_ROWS: [ConvRow; 4] = [
    ConvRow::new((5, 3), 16, (1, 1), (2, 2)),
    ConvRow::new((3, 3), 32, (1, 1), (2, 2)),
    ConvRow::new((3, 3), 32, (1, 1), (1, 1)),
    ConvRow::new((1, 1), 48, (1, 1), (1, 1)),
];

fn default_widths() -> WidthList {
    WidthList::new(vec![1.0, 0.75, 0.5, 0.25]).expect("static width list")
}

impl ModelSpec {
    /// Five-layer CNN over 76 frames of 64 mel bins.
    pub fn baseline_cnn(num_classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::Cnn {
                rows: BASELINE_CNN_ROWS.to_vec(),
                slim_last_output: true,
            },
            frames: 76,
            mel_bins: 64,
            num_classes,
            widths: default_widths(),
        }
    }

    /// Four-layer CNN over 76 frames of 20 mel bins.
    pub fn desk_cnn(num_classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::Cnn {
                rows: DESK_CNN_ROWS.to_vec(),
                slim_last_output: true,
            },
            frames: 76,
            mel_bins: 20,
            num_classes,
            widths: default_widths(),
        }
    }

    /// Three-layer transformer over 182 frames, binary wakeword task.
    pub fn transformer_wakeword() -> Self {
        ModelSpec {
            arch: Architecture::Transformer(TransformerSpec {
                dim: 64,
                mlp_dim: 128,
                heads: 1,
                layers: 3,
                embed_dim: 64,
            }),
            frames: 182,
            mel_bins: 64,
            num_classes: 2,
            widths: default_widths(),
        }
    }

    /// Two-layer transformer over 98 frames, 35 Speech Commands classes.
    pub fn transformer_speech_commands() -> Self {
        ModelSpec {
            arch: Architecture::Transformer(TransformerSpec {
                dim: 64,
                mlp_dim: 64,
                heads: 1,
                layers: 2,
                embed_dim: 64,
            }),
            frames: 98,
            mel_bins: 64,
            num_classes: 35,
            widths: default_widths(),
        }
    }

    pub fn preset(name: &str, num_classes: Option<usize>) -> Result<Self> {
        let mut spec = match name {
            "baseline-cnn" => ModelSpec::baseline_cnn(2),
            "desk-cnn" => ModelSpec::desk_cnn(4),
            "transformer-wakeword" => ModelSpec::transformer_wakeword(),
            "transformer-speech-commands" => ModelSpec::transformer_speech_commands(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        if let Some(k) = num_classes {
            spec.num_classes = k;
        }
        Ok(spec)
    }

    pub fn is_cnn(&self) -> bool {
        matches!(self.arch, Architecture::Cnn { .. })
    }

    pub fn input_shape(&self) -> [usize; 2] {
        [self.frames, self.mel_bins]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.mel_bins == 0 {
            return Err(Error::Config("frames and mel_bins must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        match &self.arch {
            Architecture::Cnn { rows, .. } => {
                if rows.is_empty() {
                    return Err(Error::Config("cnn needs at least one conv row".into()));
                }
                for (i, r) in rows.iter().enumerate() {
                    let dims = [r.kernel.0, r.kernel.1, r.channels, r.stride.0, r.stride.1, r.pool.0, r.pool.1];
                    if dims.contains(&0) {
                        return Err(Error::Config(format!(
                            "conv layer {}: all extents must be >= 1, got {r:?}",
                            i + 1
                        )));
                    }
                }
                cnn_geometry(rows, self.frames, self.mel_bins)?;
            }
            Architecture::Transformer(t) => {
                if t.dim == 0 || t.mlp_dim == 0 || t.heads == 0 || t.embed_dim == 0 {
                    return Err(Error::Config(format!(
                        "transformer extents must be >= 1, got {t:?}"
                    )));
                }
                for w in self.widths.iter() {
                    let d = ac(t.dim, w);
                    if t.layers > 0 && !d.is_multiple_of(t.heads) {
                        return Err(Error::Config(format!(
                            "{} heads do not divide active dim {d} at width {w}",
                            t.heads
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Plain single-width spec of the sub-network at `width`.
    pub fn sub_spec(&self, width: f64) -> Result<ModelSpec> {
        self.widths.index_of(width)?;
        let arch = match &self.arch {
            Architecture::Cnn {
                rows,
                slim_last_output,
            } => {
                let last = rows.len() - 1;
                let rows = rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| ConvRow {
                        channels: if i < last || *slim_last_output {
                            ac(r.channels, width)
                        } else {
                            r.channels
                        },
                        ..*r
                    })
                    .collect();
                Architecture::Cnn {
                    rows,
                    slim_last_output: *slim_last_output,
                }
            }
            Architecture::Transformer(t) => Architecture::Transformer(TransformerSpec {
                dim: ac(t.dim, width),
                mlp_dim: ac(t.mlp_dim, width),
                ..*t
            }),
        };
        Ok(ModelSpec {
            arch,
            widths: WidthList::full(),
            ..self.clone()
        })
    }

    /// Short hex digest identifying the architecture and width list.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub const PRESETS: [&str; 4] = [
    "baseline-cnn",
    "desk-cnn",
    "transformer-wakeword",
    "transformer-speech-commands",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_geometry_reduces_to_one_by_one() {
        let g = cnn_geometry(&BASELINE_CNN_ROWS, 76, 64).unwrap();
        assert_eq!(g[0].conv_hw, (72, 31));
        assert_eq!(g[0].pooled_hw, (36, 31));
        assert_eq!(g[1].pooled_hw, (17, 10));
        assert_eq!(g[2].pooled_hw, (7, 4));
        assert_eq!(g[3].pooled_hw, (1, 1));
        assert_eq!(g[4].pooled_hw, (1, 1));
    }

    #[test]
    fn desk_geometry() {
        let g = cnn_geometry(&DESK_CNN_ROWS, 76, 20).unwrap();
        let pooled: Vec<_> = g.iter().map(|l| l.pooled_hw).collect();
        assert_eq!(pooled, vec![(36, 9), (17, 3), (15, 1), (15, 1)]);
    }

    #[test]
    fn underflow_names_layer() {
        let err = cnn_geometry(&BASELINE_CNN_ROWS, 40, 64).unwrap_err();
        assert!(err.to_string().contains("conv layer 4"), "{err}");
    }

    #[test]
    fn sub_spec_scales_channels() {
        let s = ModelSpec::baseline_cnn(2).sub_spec(0.25).unwrap();
        let Architecture::Cnn { rows, .. } = &s.arch else { panic!() };
        let ch: Vec<_> = rows.iter().map(|r| r.channels).collect();
        assert_eq!(ch, vec![8, 8, 10, 32, 40]);
        assert_eq!(s.widths.widths(), &[1.0]);
        assert!(ModelSpec::baseline_cnn(2).sub_spec(0.3).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelSpec::desk_cnn(4);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.num_classes = 5;
        assert_ne!(a.hash(), b.hash());
    }
}
