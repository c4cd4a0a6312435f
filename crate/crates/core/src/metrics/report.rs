use std::fmt;
use std::path::Path;
use std::time::SystemTime;

use serde::Serialize;

use super::count::{count_multiplies, count_params, NormSets};
use super::fa::{false_accepts_at_miss_rate, relative_fa, FaResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::tensor::Scalar;
use crate::trainer::evaluate;

/// Keyword class and operating point for false-accept reporting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FaSettings {
    pub positive_class: usize,
    pub target_miss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub width: f64,
    pub params: usize,
    pub multiplies: u64,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub false_accepts: Option<usize>,
    /// False accepts over the width-1.0 row's count.
    pub relative_fa: Option<f64>,
    pub time_per_step_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub spec_hash: String,
    pub seed: u64,
    pub date: String,
    pub norm_sets: NormSets,
    pub fa: Option<FaSettings>,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    /// One row per width of `spec` with parameter and multiply counts.
    pub fn new(spec: &ModelSpec, seed: u64, norm_sets: NormSets) -> Result<Self> {
        let rows = spec
            .widths
            .iter()
            .map(|w| {
                Ok(ReportRow {
                    width: w,
                    params: count_params(spec, w, norm_sets)?,
                    multiplies: count_multiplies(spec, w)?,
                    loss: None,
                    accuracy: None,
                    false_accepts: None,
                    relative_fa: None,
                    time_per_step_ms: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunReport {
            spec_hash: spec.hash(),
            seed,
            date: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
            norm_sets,
            fa: None,
            rows,
        })
    }

    /// Fills loss and accuracy (and false accepts when `fa` is given) for
    /// every row by evaluating `model` on `data`.
    pub fn evaluate<T: Scalar>(
        &mut self,
        model: &Model<T>,
        data: &Dataset,
        batch_size: usize,
        fa: Option<FaSettings>,
    ) -> Result<()> {
        self.fa = fa;
        let mut fas: Vec<Option<FaResult>> = Vec::new();
        for row in &mut self.rows {
            let r = evaluate(model, data, row.width, batch_size)?;
            row.loss = Some(r.loss);
            row.accuracy = Some(r.accuracy);
            let f = match fa {
                Some(s) => {
                    let positive: Vec<bool> = r.labels.iter().map(|&l| l == s.positive_class).collect();
                    let res = false_accepts_at_miss_rate(&r.class_scores(s.positive_class), &positive, s.target_miss)?;
                    row.false_accepts = Some(res.false_accepts);
                    Some(res)
                }
                None => None,
            };
            fas.push(f);
        }
        let base = self.rows.iter().position(|r| r.width == 1.0).and_then(|i| fas[i]);
        if let Some(b) = base {
            for (row, f) in self.rows.iter_mut().zip(&fas) {
                row.relative_fa = f.as_ref().map(|f| relative_fa(f, &b));
            }
        }
        Ok(())
    }

    pub fn set_time_per_step(&mut self, width: f64, ms: f64) -> Result<()> {
        let row = self
            .rows
            .iter_mut()
            .find(|r| r.width == width)
            .ok_or_else(|| Error::Config(format!("no report row for width {width}")))?;
        row.time_per_step_ms = Some(ms);
        Ok(())
    }

    /// Keeps only the listed widths, in report order.
    pub fn retain_widths(&mut self, widths: &[f64]) {
        self.rows.retain(|r| widths.contains(&r.width));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes the JSON document to `path` and the text table beside it
    /// with a `.txt` extension.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))?;
        let txt = path.with_extension("txt");
        std::fs::write(&txt, self.to_string()).map_err(|e| Error::io(&txt, e))
    }
}

fn compact(n: f64) -> String {
    if n >= 1e6 {
        format!("{:.2}M", n / 1e6)
    } else if n >= 1e3 {
        format!("{:.1}k", n / 1e3)
    } else {
        format!("{n}")
    }
}

fn opt<V>(v: Option<V>, f: impl Fn(V) -> String) -> String {
    v.map(f).unwrap_or_else(|| "-".into())
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "spec {}  seed {}  {}", self.spec_hash, self.seed, self.date)?;
        writeln!(
            f,
            "{:>6}  {:>10}  {:>11}  {:>8}  {:>8}  {:>6}  {:>7}  {:>9}",
            "width", "params", "multiplies", "loss", "accuracy", "FA", "rel. FA", "ms/step"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>6}  {:>10}  {:>11}  {:>8}  {:>8}  {:>6}  {:>7}  {:>9}",
                r.width,
                compact(r.params as f64),
                compact(r.multiplies as f64),
                opt(r.loss, |v| format!("{v:.4}")),
                opt(r.accuracy, |v| format!("{v:.4}")),
                opt(r.false_accepts, |v| v.to_string()),
                opt(r.relative_fa, |v| format!("{v:.3}")),
                opt(r.time_per_step_ms, |v| format!("{v:.2}")),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cover_every_width_with_positive_counts() {
        let spec = ModelSpec::baseline_cnn(2);
        let r = RunReport::new(&spec, 7, NormSets::Active).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.width).collect::<Vec<_>>(), vec![1.0, 0.75, 0.5, 0.25]);
        assert!(r.rows.iter().all(|r| r.params > 0 && r.multiplies > 0));
        assert_eq!(r.rows[0].params, 198_746);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 4);
        assert_eq!(v["seed"], 7);
        let text = r.to_string();
        assert!(text.contains("198.7k"), "{text}");
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn compact_units() {
        assert_eq!(compact(950.0), "950");
        assert_eq!(compact(12_824.0), "12.8k");
        assert_eq!(compact(3_500_000.0), "3.50M");
    }
}
