//! Audio ingestion, log-mel features, and labeled datasets.

mod lfbe;
mod speech_commands;
mod synth;
mod wav;

pub use lfbe::{fit_frames, hz_to_mel, lfbe, mel_to_hz, FeatureConfig, FeatureMatrix, Lfbe, MelFilterbank};
pub use speech_commands::{list_speech_commands, ClipRef, Listing, TEST_LIST, VALIDATION_LIST};
pub use synth::{base_frequency, chirp, class_name, synth_clips, sweep_factor, SynthClip, SynthConfig};
pub use wav::{read_wav, write_wav, AudioClip};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    /// `[frames × mel_bins]`
    pub features: FeatureMatrix,
    pub label: usize,
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, classes: Vec<String>) -> Result<Self> {
        let d = Dataset { examples, classes };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.examples.first() else { return Ok(()) };
        let shape = first.features.shape().to_vec();
        for e in &self.examples {
            if e.label >= self.classes.len() {
                return Err(Error::Input(format!(
                    "{}: label {} out of range for {} classes",
                    e.source,
                    e.label,
                    self.classes.len()
                )));
            }
            if e.features.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "{}: features {:?} differ from {:?}",
                    e.source,
                    e.features.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `(frames, mel_bins)` of the examples, if any.
    pub fn feature_shape(&self) -> Option<(usize, usize)> {
        self.examples.first().map(|e| (e.features.shape()[0], e.features.shape()[1]))
    }

    /// Stacks the selected examples into `[N×frames×mels]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (f, m) = self
            .feature_shape()
            .ok_or_else(|| Error::Input("cannot batch an empty dataset".into()))?;
        let mut data = Vec::with_capacity(indices.len() * f * m);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = self.examples.get(i).ok_or_else(|| {
                Error::Index(format!("example {i} out of range for {} examples", self.len()))
            })?;
            data.extend_from_slice(e.features.data());
            labels.push(e.label);
        }
        Ok((Tensor::new(&[indices.len(), f, m], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            classes: self.classes.clone(),
        }
    }

    /// Seeded per-class split putting `round(n_c · test_fraction)` examples
    /// of each class in the second part.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.examples[i].label == c).collect();
            idx.shuffle(&mut rng);
            let k = (idx.len() as f64 * test_fraction).round() as usize;
            test.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Writes the features to a SLNK container, one named matrix per clip.
    pub fn save_cache(&self, path: &Path, features: &FeatureConfig) -> Result<()> {
        let mut c = Container::new();
        c.put_text("meta/features", &serde_json::to_string(features).expect("serializable"));
        c.put_text("meta/classes", &self.classes.join("\n"));
        for e in &self.examples {
            c.put(&format!("feat/{}", e.source), e.features.clone());
            c.put_u64(&format!("label/{}", e.source), e.label as u64);
        }
        c.write(path)
    }

    /// Loads a cache written by [`Dataset::save_cache`]; fails when it was
    /// computed with different feature settings.
    pub fn load_cache(path: &Path, features: &FeatureConfig) -> Result<Dataset> {
        let c = Container::read(path)?;
        let stored: FeatureConfig = serde_json::from_str(&c.get_text("meta/features")?.unwrap_or_default())
            .map_err(|e| Error::Format(format!("{}: bad feature settings: {e}", path.display())))?;
        if &stored != features {
            return Err(Error::Format(format!(
                "{} was computed with different feature settings",
                path.display()
            )));
        }
        let classes_text = c.get_text("meta/classes")?.unwrap_or_default();
        let classes: Vec<String> = classes_text.split('\n').filter(|s| !s.is_empty()).map(String::from).collect();
        let mut examples = Vec::new();
        for (name, t) in c.entries() {
            if let Some(source) = name.strip_prefix("feat/") {
                let label = c
                    .get_u64(&format!("label/{source}"))?
                    .ok_or_else(|| Error::Format(format!("no label for '{source}'")))?;
                examples.push(LabeledExample {
                    features: t.clone(),
                    label: label as usize,
                    source: source.to_string(),
                });
            }
        }
        Dataset::new(examples, classes)
    }
}

/// LFBE features fitted to `frames`.
pub fn featurize(extractor: &Lfbe, clip: &AudioClip, frames: usize) -> Result<FeatureMatrix> {
    let f = extractor.compute(clip)?;
    fit_frames(&f, frames, extractor.config().floor_value())
}

/// Applies `f` to every item on up to `threads` scoped workers; output
/// order matches input order, so results do not depend on the thread count.
fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("featurization worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Featurized synthetic keyword dataset, computed on `threads` workers.
pub fn synth_dataset(cfg: &SynthConfig, features: &FeatureConfig, frames: usize, threads: usize) -> Result<Dataset> {
    let ex = Lfbe::new(features)?;
    let clips = synth_clips(cfg)?;
    let examples = par_map(&clips, threads, |s| {
        Ok(LabeledExample {
            features: featurize(&ex, &s.clip, frames)?,
            label: s.label,
            source: s.id.clone(),
        })
    })?;
    Dataset::new(examples, (0..cfg.num_classes).map(class_name).collect())
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn load_refs(refs: &[ClipRef], classes: &[String], ex: &Lfbe, frames: usize, threads: usize) -> Result<Dataset> {
    let examples = par_map(refs, threads, |r| {
        let clip = read_wav(&r.path)?;
        let features = featurize(ex, &clip, frames)
            .map_err(|e| Error::Input(format!("{}: {e}", r.path.display())))?;
        Ok(LabeledExample {
            features,
            label: r.label,
            source: r.rel.trim_end_matches(".wav").to_string(),
        })
    })?;
    Dataset::new(examples, classes.to_vec())
}

/// Reads and featurizes a Speech-Commands-style tree (see
/// [`list_speech_commands`]).
pub fn load_speech_commands(
    root: &Path,
    classes: Option<&[String]>,
    features: &FeatureConfig,
    frames: usize,
    threads: usize,
) -> Result<Splits> {
    let listing = list_speech_commands(root, classes)?;
    let ex = Lfbe::new(features)?;
    Ok(Splits {
        train: load_refs(&listing.train, &listing.classes, &ex, frames, threads)?,
        validation: load_refs(&listing.validation, &listing.classes, &ex, frames, threads)?,
        test: load_refs(&listing.test, &listing.classes, &ex, frames, threads)?,
    })
}

/// Writes synthetic clips as `<out>/class_XX/NNNN.wav`.
pub fn write_synth_tree(out: &Path, cfg: &SynthConfig) -> Result<usize> {
    let clips = synth_clips(cfg)?;
    for s in &clips {
        let path = out.join(format!("{}.wav", s.id));
        let dir = path.parent().expect("clip path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_wav(&path, &s.clip)?;
    }
    Ok(clips.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (SynthConfig, FeatureConfig) {
        (SynthConfig::new(3, 4, 1), FeatureConfig::with_mel_bins(20))
    }

    #[test]
    fn synthetic_dataset_shapes() {
        let (s, f) = small();
        let d = synth_dataset(&s, &f, 76, 1).unwrap();
        assert_eq!(d.len(), 12);
        assert_eq!(d.feature_shape(), Some((76, 20)));
        assert_eq!(d.classes, vec!["class_00", "class_01", "class_02"]);
        let (x, y) = d.batch(&[0, 5, 11]).unwrap();
        assert_eq!(x.shape(), &[3, 76, 20]);
        assert_eq!(y, vec![0, 1, 2]);
        assert_eq!(&x.data()[76 * 20..2 * 76 * 20], d.examples[5].features.data());
    }

    #[test]
    fn stratified_split_is_disjoint_and_balanced() {
        let (s, f) = small();
        let d = synth_dataset(&SynthConfig { per_class: 10, ..s }, &f, 20, 1).unwrap();
        let (a, b) = d.stratified_split(0.2, 0).unwrap();
        assert_eq!((a.len(), b.len()), (24, 6));
        for c in 0..3 {
            assert_eq!(b.examples.iter().filter(|e| e.label == c).count(), 2);
        }
        let names: std::collections::HashSet<_> = a.examples.iter().map(|e| &e.source).collect();
        assert!(b.examples.iter().all(|e| !names.contains(&e.source)));
    }

    #[test]
    fn written_tree_loads_back_with_same_features() {
        let (s, f) = small();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_synth_tree(dir.path(), &s).unwrap(), 12);
        let splits = load_speech_commands(dir.path(), None, &f, 76, 2).unwrap();
        assert_eq!(splits.train.len(), 12);
        assert_eq!(splits.train.classes.len(), 3);
        let direct = synth_dataset(&s, &f, 76, 1).unwrap();
        for (a, b) in splits.train.examples.iter().zip(&direct.examples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.source, b.source);
            // 16-bit quantization only
            let diff = a.features.max_abs_diff(&b.features).unwrap();
            assert!(diff < 0.5, "{diff}");
        }
    }

    #[test]
    fn thread_count_does_not_change_features() {
        let (s, f) = small();
        let one = synth_dataset(&s, &f, 40, 1).unwrap();
        for t in [2, 5, 64] {
            assert_eq!(synth_dataset(&s, &f, 40, t).unwrap(), one);
        }
    }

    #[test]
    fn cache_round_trip() {
        let (s, f) = small();
        let d = synth_dataset(&s, &f, 30, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feats.slnk");
        d.save_cache(&p, &f).unwrap();
        let back = Dataset::load_cache(&p, &f).unwrap();
        assert_eq!(back, d);
        assert!(Dataset::load_cache(&p, &FeatureConfig::with_mel_bins(40)).is_err());
    }
}
