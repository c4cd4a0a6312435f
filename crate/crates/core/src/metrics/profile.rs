use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::slim::WidthList;
use crate::tensor::Tensor;
use crate::trainer::{train_step, Optimizer, OptimizerConfig};

/// Steps shorter than this are dominated by timer and scheduling noise.
pub const MIN_RELIABLE_MS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileConfig {
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub timed_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            batch_size: 32,
            warmup_steps: 5,
            timed_steps: 20,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub width_count: usize,
    pub seconds_per_step: f64,
    /// Relative to the row with the fewest widths, normally 1.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileTable {
    pub batch_size: usize,
    pub rows: Vec<ProfileRow>,
    pub warnings: Vec<String>,
}

impl ProfileTable {
    pub fn row(&self, width_count: usize) -> Option<&ProfileRow> {
        self.rows.iter().find(|r| r.width_count == width_count)
    }
}

impl fmt::Display for ProfileTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>7}  {:>14}  {:>7}", "widths", "sec/step", "ratio")?;
        for r in &self.rows {
            writeln!(f, "{:>7}  {:>14.6}  {:>7.3}", r.width_count, r.seconds_per_step, r.ratio)?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median seconds per training step of `spec` trained on `n` evenly spaced
/// widths, for each `n` in `width_counts`. Every row uses the same random
/// batch; the replaced width list is the only difference between rows.
pub fn profile_time_per_step(spec: &ModelSpec, width_counts: &[usize], cfg: &ProfileConfig) -> Result<ProfileTable> {
    if width_counts.is_empty() {
        return Err(Error::Config("no width counts to profile".into()));
    }
    if cfg.timed_steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("profiling needs at least one timed step and example".into()));
    }
    let mut counts = width_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = Tensor::<f32>::from_fn(&[cfg.batch_size, spec.frames, spec.mel_bins], |_| rng.random_range(-1.0..1.0))?;
    let labels: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let lr = cfg.optimizer.lr();

    let mut medians = Vec::with_capacity(counts.len());
    let mut warnings = Vec::new();
    for &n in &counts {
        let widths = WidthList::evenly_spaced(n)?;
        let s = ModelSpec {
            widths: widths.clone(),
            ..spec.clone()
        };
        let mut model = Model::<f32>::build(&s, cfg.seed)?;
        let mut opt = Optimizer::new(cfg.optimizer.clone(), model.store());
        let mut times = Vec::with_capacity(cfg.timed_steps);
        for i in 0..cfg.warmup_steps + cfg.timed_steps {
            let start = Instant::now();
            train_step(&mut model, &mut opt, &batch, &labels, widths.widths(), lr)?;
            let dt = start.elapsed().as_secs_f64();
            if i >= cfg.warmup_steps {
                times.push(dt);
            }
        }
        let m = median(times);
        if m * 1e3 < MIN_RELIABLE_MS {
            let msg = format!(
                "{n} widths: {:.3} ms/step is below {MIN_RELIABLE_MS} ms; increase the batch size for stable ratios",
                m * 1e3
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        log::info!("profiled {n} widths: {:.6} s/step", m);
        medians.push(m);
    }
    let base = medians[0];
    let rows = counts
        .iter()
        .zip(&medians)
        .map(|(&n, &m)| ProfileRow {
            width_count: n,
            seconds_per_step: m,
            ratio: m / base,
        })
        .collect();
    Ok(ProfileTable {
        batch_size: cfg.batch_size,
        rows,
        warnings,
    })
}
