//! INI-style run configuration: `[model]`, `[train]`, `[data]`,
//! `[features]` and `[profile]` sections of `key = value` lines.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use slimkws::data::{FeatureConfig, SynthConfig};
use slimkws::metrics::ProfileConfig;
use slimkws::models::{Architecture, ConvRow, ModelSpec, TransformerSpec};
use slimkws::slim::WidthList;
use slimkws::trainer::{LrSchedule, OptimizerConfig, TrainConfig};
use slimkws::{Error, Result};

/// Model used when `[model]` names neither a preset nor an architecture.
pub const DEFAULT_PRESET: &str = "desk-cnn";

pub const SECTIONS: [&str; 5] = ["model", "train", "data", "features", "profile"];

const MODEL_KEYS: [&str; 16] = [
    "preset",
    "arch",
    "num_classes",
    "frames",
    "mel_bins",
    "widths",
    "kernels",
    "channels",
    "strides",
    "pools",
    "slim_last_output",
    "dim",
    "mlp_dim",
    "heads",
    "layers",
    "embed_dim",
];
const TRAIN_KEYS: [&str; 16] = [
    "widths",
    "epochs",
    "batch_size",
    "optimizer",
    "lr",
    "momentum",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "schedule",
    "seed",
    "eval_every",
    "log_every",
    "eval_batch_size",
    "out_dir",
];
const DATA_KEYS: [&str; 12] = [
    "source",
    "root",
    "classes",
    "synth_classes",
    "per_class",
    "synth_seed",
    "snr_db",
    "duration_secs",
    "validation_fraction",
    "test_fraction",
    "positive_class",
    "target_miss",
];
const FEATURE_KEYS: [&str; 7] = ["sample_rate", "mel_bins", "window_ms", "hop_ms", "f_min", "f_max", "log_floor"];
const PROFILE_KEYS: [&str; 5] = ["width_counts", "batch_size", "warmup_steps", "timed_steps", "seed"];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthConfig),
    SpeechCommands {
        root: PathBuf,
        classes: Option<Vec<String>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Fraction of the training clips held out for validation when the
    /// source has no validation list of its own.
    pub validation_fraction: f64,
    /// Synthetic data only; Speech Commands trees use their list files.
    pub test_fraction: f64,
    /// Keyword class for false-accept reporting on binary tasks.
    pub positive_class: Option<String>,
    pub target_miss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSettings {
    pub width_counts: Vec<usize>,
    pub cfg: ProfileConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelSpec,
    /// False when `num_classes` came from a preset and may follow the data.
    pub num_classes_set: bool,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub profile: ProfileSettings,
}

struct Entry {
    key: String,
    value: String,
    line: usize,
}

struct Section {
    name: String,
    entries: Vec<Entry>,
}

fn line_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| line_err(n, format!("malformed section header '{line}'")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(line_err(
                    n,
                    format!("unknown section [{name}] (expected one of {})", SECTIONS.join(", ")),
                ));
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(line_err(n, format!("section [{name}] appears twice")));
            }
            sections.push(Section {
                name: name.to_string(),
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| line_err(n, format!("expected 'key = value', got '{line}'")))?;
        let section = sections
            .last_mut()
            .ok_or_else(|| line_err(n, "key outside of any section"))?;
        let key = key.trim();
        let allowed: &[&str] = match section.name.as_str() {
            "model" => &MODEL_KEYS,
            "train" => &TRAIN_KEYS,
            "data" => &DATA_KEYS,
            "features" => &FEATURE_KEYS,
            _ => &PROFILE_KEYS,
        };
        if !allowed.contains(&key) {
            return Err(line_err(n, format!("unknown key '{key}' in [{}]", section.name)));
        }
        if section.entries.iter().any(|e| e.key == key) {
            return Err(line_err(n, format!("duplicate key '{key}' in [{}]", section.name)));
        }
        section.entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line: n,
        });
    }
    Ok(sections)
}

/// Typed access to one section's entries.
struct Fields<'a> {
    name: &'a str,
    entries: HashMap<&'a str, &'a Entry>,
}

impl<'a> Fields<'a> {
    fn new(sections: &'a [Section], name: &'a str) -> Self {
        let entries = sections
            .iter()
            .filter(|s| s.name == name)
            .flat_map(|s| s.entries.iter().map(|e| (e.key.as_str(), e)))
            .collect();
        Fields { name, entries }
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|e| e.line)
    }

    fn raw(&self, key: &str) -> Option<&'a Entry> {
        self.entries.get(key).copied()
    }

    fn map<T>(&self, key: &str, f: impl FnOnce(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => f(&e.value)
                .map(Some)
                .map_err(|m| line_err(e.line, format!("bad value for '{key}': {m}"))),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.map(key, |v| v.parse::<T>().map_err(|e| format!("'{v}' ({e})")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.map(key, parse_list)
    }

    fn pairs(&self, key: &str) -> Result<Option<Vec<(usize, usize)>>> {
        self.map(key, |v| v.split(',').map(|p| parse_pair(p.trim())).collect())
    }

    fn required<T>(&self, v: Option<T>, key: &str) -> Result<T> {
        v.ok_or_else(|| Error::Config(format!("[{}]: missing required key '{key}'", self.name)))
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("'{s}' ({e})")))
        .collect()
}

/// `5x4` or a single `n` meaning `nxn`.
fn parse_pair(v: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("'{v}' ({e})"));
    match v.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => parse(v).map(|n| (n, n)),
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("'{other}' is not a boolean")),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn widths_from(f: &Fields, key: &str) -> Result<Option<WidthList>> {
    match f.list::<f64>(key)? {
        None => Ok(None),
        Some(v) => WidthList::new(v)
            .map(Some)
            .map_err(|e| line_err(f.line(key).unwrap_or(0), format!("bad value for '{key}': {e}"))),
    }
}

fn parse_model(f: &Fields) -> Result<(ModelSpec, bool)> {
    let preset = match (f.get::<String>("preset")?, f.has("arch")) {
        (Some(p), true) => {
            return Err(line_err(
                f.line("arch").unwrap_or(0),
                format!("'arch' conflicts with preset '{p}'"),
            ))
        }
        (None, false) => Some(DEFAULT_PRESET.to_string()),
        (p, _) => p,
    };
    let mut spec = match preset {
        Some(p) => ModelSpec::preset(&p, None).map_err(|e| line_err(f.line("preset").unwrap_or(0), e))?,
        None => {
            let arch = f.required(f.get::<String>("arch")?, "arch")?;
            let frames = f.required(f.get("frames")?, "frames")?;
            let mel_bins = f.required(f.get("mel_bins")?, "mel_bins")?;
            let num_classes = f.required(f.get("num_classes")?, "num_classes")?;
            let arch = match arch.as_str() {
                "cnn" => {
                    let kernels = f.required(f.pairs("kernels")?, "kernels")?;
                    let rows = kernels.iter().map(|&k| ConvRow::new(k, 1, (1, 1), (1, 1))).collect();
                    Architecture::Cnn {
                        rows,
                        slim_last_output: true,
                    }
                }
                "transformer" => {
                    let dim = f.required(f.get("dim")?, "dim")?;
                    Architecture::Transformer(TransformerSpec {
                        dim,
                        mlp_dim: f.required(f.get("mlp_dim")?, "mlp_dim")?,
                        heads: f.required(f.get("heads")?, "heads")?,
                        layers: f.required(f.get("layers")?, "layers")?,
                        embed_dim: f.get("embed_dim")?.unwrap_or(dim),
                    })
                }
                other => {
                    return Err(line_err(
                        f.line("arch").unwrap_or(0),
                        format!("arch must be 'cnn' or 'transformer', got '{other}'"),
                    ))
                }
            };
            if matches!(arch, Architecture::Cnn { .. }) && !f.has("channels") {
                return Err(Error::Config("[model]: missing required key 'channels'".into()));
            }
            ModelSpec {
                arch,
                frames,
                mel_bins,
                num_classes,
                widths: WidthList::new(vec![1.0, 0.75, 0.5, 0.25])?,
            }
        }
    };
    if let Some(v) = f.get("frames")? {
        spec.frames = v;
    }
    if let Some(v) = f.get("mel_bins")? {
        spec.mel_bins = v;
    }
    let num_classes_set = f.has("num_classes");
    if let Some(v) = f.get("num_classes")? {
        spec.num_classes = v;
    }
    if let Some(w) = widths_from(f, "widths")? {
        spec.widths = w;
    }
    let cnn_keys = ["kernels", "channels", "strides", "pools", "slim_last_output"];
    let tf_keys = ["dim", "mlp_dim", "heads", "layers", "embed_dim"];
    match &mut spec.arch {
        Architecture::Cnn { rows, slim_last_output } => {
            if let Some(k) = tf_keys.iter().find(|k| f.has(k)) {
                return Err(line_err(f.line(k).unwrap_or(0), format!("'{k}' does not apply to a CNN")));
            }
            if let Some(k) = f.pairs("kernels")? {
                if k.len() != rows.len() {
                    rows.resize(k.len(), ConvRow::new((1, 1), 1, (1, 1), (1, 1)));
                }
                rows.iter_mut().zip(k).for_each(|(r, k)| r.kernel = k);
            }
            let n = rows.len();
            let check = |key: &str, len: usize| -> Result<()> {
                if len != n {
                    return Err(line_err(
                        f.line(key).unwrap_or(0),
                        format!("'{key}' lists {len} layers but the CNN has {n}"),
                    ));
                }
                Ok(())
            };
            if let Some(c) = f.list::<usize>("channels")? {
                check("channels", c.len())?;
                rows.iter_mut().zip(c).for_each(|(r, c)| r.channels = c);
            }
            if let Some(s) = f.pairs("strides")? {
                check("strides", s.len())?;
                rows.iter_mut().zip(s).for_each(|(r, s)| r.stride = s);
            }
            if let Some(p) = f.pairs("pools")? {
                check("pools", p.len())?;
                rows.iter_mut().zip(p).for_each(|(r, p)| r.pool = p);
            }
            if let Some(b) = f.map("slim_last_output", parse_bool)? {
                *slim_last_output = b;
            }
        }
        Architecture::Transformer(t) => {
            if let Some(k) = cnn_keys.iter().find(|k| f.has(k)) {
                return Err(line_err(
                    f.line(k).unwrap_or(0),
                    format!("'{k}' does not apply to a transformer"),
                ));
            }
            if let Some(v) = f.get("dim")? {
                t.dim = v;
            }
            if let Some(v) = f.get("mlp_dim")? {
                t.mlp_dim = v;
            }
            if let Some(v) = f.get("heads")? {
                t.heads = v;
            }
            if let Some(v) = f.get("layers")? {
                t.layers = v;
            }
            if let Some(v) = f.get("embed_dim")? {
                t.embed_dim = v;
            }
        }
    }
    spec.validate()?;
    Ok((spec, num_classes_set))
}

fn parse_train(f: &Fields, model: &ModelSpec, base: &Path) -> Result<(TrainConfig, PathBuf)> {
    let d = TrainConfig::default();
    let kind = f.get::<String>("optimizer")?.unwrap_or_else(|| "adam".into());
    let opt_line = f.line("optimizer").unwrap_or(0);
    let optimizer = match kind.as_str() {
        "adam" => {
            if f.has("momentum") {
                return Err(line_err(f.line("momentum").unwrap_or(0), "'momentum' only applies to sgd"));
            }
            let OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } = OptimizerConfig::default()
            else {
                unreachable!("default optimizer is adam")
            };
            OptimizerConfig::Adam {
                lr: f.get("lr")?.unwrap_or(lr),
                beta1: f.get("beta1")?.unwrap_or(beta1),
                beta2: f.get("beta2")?.unwrap_or(beta2),
                eps: f.get("eps")?.unwrap_or(eps),
                weight_decay: f.get("weight_decay")?.unwrap_or(weight_decay),
            }
        }
        "sgd" => {
            if let Some(k) = ["beta1", "beta2", "eps"].iter().find(|k| f.has(k)) {
                return Err(line_err(f.line(k).unwrap_or(0), format!("'{k}' only applies to adam")));
            }
            OptimizerConfig::Sgd {
                lr: f.get("lr")?.unwrap_or(0.1),
                momentum: f.get("momentum")?.unwrap_or(0.9),
                weight_decay: f.get("weight_decay")?.unwrap_or(0.0),
            }
        }
        other => return Err(line_err(opt_line, format!("optimizer must be 'adam' or 'sgd', got '{other}'"))),
    };
    optimizer.validate().map_err(|e| line_err(opt_line, e))?;
    let schedule = match f.get::<String>("schedule")?.as_deref() {
        None | Some("constant") => LrSchedule::Constant,
        Some("cosine") => LrSchedule::Cosine,
        Some(other) => {
            return Err(line_err(
                f.line("schedule").unwrap_or(0),
                format!("schedule must be 'constant' or 'cosine', got '{other}'"),
            ))
        }
    };
    let cfg = TrainConfig {
        widths: widths_from(f, "widths")?.unwrap_or_else(|| model.widths.clone()),
        epochs: f.get("epochs")?.unwrap_or(d.epochs),
        batch_size: f.get("batch_size")?.unwrap_or(d.batch_size),
        optimizer,
        schedule,
        seed: f.get("seed")?.unwrap_or(d.seed),
        eval_every: f.get("eval_every")?.unwrap_or(d.eval_every),
        log_every: f.get("log_every")?.unwrap_or(d.log_every),
        eval_batch_size: f.get("eval_batch_size")?.unwrap_or(d.eval_batch_size),
    };
    cfg.validate(&model.widths)?;
    let out_dir = resolve(base, &f.get::<String>("out_dir")?.unwrap_or_else(|| "run".into()));
    Ok((cfg, out_dir))
}

fn parse_data(f: &Fields, base: &Path) -> Result<DataConfig> {
    let source = f.get::<String>("source")?.unwrap_or_else(|| "synth".into());
    let synth_only = ["synth_classes", "per_class", "synth_seed", "snr_db", "duration_secs", "test_fraction"];
    let source = match source.as_str() {
        "synth" => {
            if let Some(k) = ["root", "classes"].iter().find(|k| f.has(k)) {
                return Err(line_err(f.line(k).unwrap_or(0), format!("'{k}' does not apply to synthetic data")));
            }
            let mut s = SynthConfig::new(
                f.get("synth_classes")?.unwrap_or(4),
                f.get("per_class")?.unwrap_or(250),
                f.get("synth_seed")?.unwrap_or(0),
            );
            if let Some(v) = f.get("duration_secs")? {
                s.duration_secs = v;
            }
            if let Some(snr) = f.map("snr_db", |v| {
                if v == "none" {
                    return Ok(None);
                }
                match parse_list::<f64>(v)?.as_slice() {
                    [x] => Ok(Some((*x, *x))),
                    [lo, hi] if lo <= hi => Ok(Some((*lo, *hi))),
                    _ => Err(format!("expected 'lo,hi', a single value or 'none', got '{v}'")),
                }
            })? {
                s.snr_db = snr;
            }
            DataSource::Synth(s)
        }
        "speech_commands" => {
            if let Some(k) = synth_only.iter().find(|k| f.has(k)) {
                return Err(line_err(f.line(k).unwrap_or(0), format!("'{k}' only applies to synthetic data")));
            }
            let root = f.required(f.get::<String>("root")?, "root")?;
            DataSource::SpeechCommands {
                root: resolve(base, &root),
                classes: f.list::<String>("classes")?,
            }
        }
        other => {
            return Err(line_err(
                f.line("source").unwrap_or(0),
                format!("source must be 'synth' or 'speech_commands', got '{other}'"),
            ))
        }
    };
    let fraction = |key: &str, default: f64| -> Result<f64> {
        let v = f.get::<f64>(key)?.unwrap_or(default);
        if !(0.0..1.0).contains(&v) {
            return Err(line_err(f.line(key).unwrap_or(0), format!("'{key}' must be in [0, 1), got {v}")));
        }
        Ok(v)
    };
    let target_miss = f.get::<f64>("target_miss")?.unwrap_or(0.05);
    if !(0.0..=1.0).contains(&target_miss) {
        return Err(line_err(f.line("target_miss").unwrap_or(0), "target_miss must be in [0, 1]"));
    }
    Ok(DataConfig {
        source,
        validation_fraction: fraction("validation_fraction", 0.1)?,
        test_fraction: fraction("test_fraction", 0.1)?,
        positive_class: f.get("positive_class")?,
        target_miss,
    })
}

fn parse_features(f: &Fields, model: &ModelSpec) -> Result<FeatureConfig> {
    let d = FeatureConfig::with_mel_bins(model.mel_bins);
    let mel_bins = f.get("mel_bins")?.unwrap_or(d.mel_bins);
    if mel_bins != model.mel_bins {
        return Err(line_err(
            f.line("mel_bins").unwrap_or(0),
            format!("mel_bins = {mel_bins} but the model expects {}", model.mel_bins),
        ));
    }
    let cfg = FeatureConfig {
        sample_rate: f.get("sample_rate")?.unwrap_or(d.sample_rate),
        mel_bins,
        window_ms: f.get("window_ms")?.unwrap_or(d.window_ms),
        hop_ms: f.get("hop_ms")?.unwrap_or(d.hop_ms),
        f_min: f.get("f_min")?.unwrap_or(d.f_min),
        f_max: f.get("f_max")?.or(d.f_max),
        log_floor: f.get("log_floor")?.unwrap_or(d.log_floor),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_profile(f: &Fields) -> Result<ProfileSettings> {
    let d = ProfileConfig::default();
    let width_counts = f.list::<usize>("width_counts")?.unwrap_or_else(|| vec![1, 2, 3, 4, 5, 10, 20, 40]);
    if width_counts.is_empty() || width_counts.contains(&0) {
        return Err(line_err(
            f.line("width_counts").unwrap_or(0),
            "width_counts must be positive integers",
        ));
    }
    let cfg = ProfileConfig {
        batch_size: f.get("batch_size")?.unwrap_or(d.batch_size),
        warmup_steps: f.get("warmup_steps")?.unwrap_or(d.warmup_steps),
        timed_steps: f.get("timed_steps")?.unwrap_or(d.timed_steps),
        seed: f.get("seed")?.unwrap_or(d.seed),
        optimizer: d.optimizer,
    };
    if cfg.batch_size == 0 || cfg.timed_steps == 0 {
        return Err(Error::Config("[profile]: batch_size and timed_steps must be >= 1".into()));
    }
    Ok(ProfileSettings { width_counts, cfg })
}

impl Config {
    /// Parses `text`; relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Config> {
        let sections = parse_sections(text)?;
        let (model, num_classes_set) = parse_model(&Fields::new(&sections, "model"))?;
        let (train, out_dir) = parse_train(&Fields::new(&sections, "train"), &model, base)?;
        let data = parse_data(&Fields::new(&sections, "data"), base)?;
        let features = parse_features(&Fields::new(&sections, "features"), &model)?;
        let profile = parse_profile(&Fields::new(&sections, "profile"))?;
        let mut cfg = Config {
            model,
            num_classes_set,
            train,
            out_dir,
            data,
            features,
            profile,
        };
        if let (false, DataSource::Synth(s)) = (cfg.num_classes_set, &cfg.data.source) {
            cfg.model.num_classes = s.num_classes;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Fully explicit INI text; parses back to an equal config.
    pub fn to_ini(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let pair = |p: (usize, usize)| format!("{}x{}", p.0, p.1);
        let mut s = String::new();
        let m = &self.model;
        s.push_str("[model]\n");
        match &m.arch {
            Architecture::Cnn { rows, slim_last_output } => {
                let _ = writeln!(s, "arch = cnn");
                let _ = writeln!(s, "kernels = {}", join(&mut rows.iter().map(|r| pair(r.kernel))));
                let _ = writeln!(s, "channels = {}", join(&mut rows.iter().map(|r| r.channels.to_string())));
                let _ = writeln!(s, "strides = {}", join(&mut rows.iter().map(|r| pair(r.stride))));
                let _ = writeln!(s, "pools = {}", join(&mut rows.iter().map(|r| pair(r.pool))));
                let _ = writeln!(s, "slim_last_output = {slim_last_output}");
            }
            Architecture::Transformer(t) => {
                let _ = writeln!(s, "arch = transformer");
                let _ = writeln!(s, "dim = {}\nmlp_dim = {}\nheads = {}", t.dim, t.mlp_dim, t.heads);
                let _ = writeln!(s, "layers = {}\nembed_dim = {}", t.layers, t.embed_dim);
            }
        }
        let _ = writeln!(s, "frames = {}\nmel_bins = {}", m.frames, m.mel_bins);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "widths = {}", join(&mut m.widths.iter().map(|w| w.to_string())));

        let t = &self.train;
        s.push_str("\n[train]\n");
        let _ = writeln!(s, "widths = {}", join(&mut t.widths.iter().map(|w| w.to_string())));
        let _ = writeln!(s, "epochs = {}\nbatch_size = {}", t.epochs, t.batch_size);
        match t.optimizer {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                let _ = writeln!(s, "optimizer = sgd\nlr = {lr}\nmomentum = {momentum}\nweight_decay = {weight_decay}");
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let _ = writeln!(s, "optimizer = adam\nlr = {lr}\nbeta1 = {beta1}\nbeta2 = {beta2}");
                let _ = writeln!(s, "eps = {eps}\nweight_decay = {weight_decay}");
            }
        }
        let schedule = match t.schedule {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        };
        let _ = writeln!(s, "schedule = {schedule}\nseed = {}", t.seed);
        let _ = writeln!(s, "eval_every = {}\nlog_every = {}", t.eval_every, t.log_every);
        let _ = writeln!(s, "eval_batch_size = {}", t.eval_batch_size);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());

        let d = &self.data;
        s.push_str("\n[data]\n");
        match &d.source {
            DataSource::Synth(c) => {
                let _ = writeln!(s, "source = synth\nsynth_classes = {}", c.num_classes);
                let _ = writeln!(s, "per_class = {}\nsynth_seed = {}", c.per_class, c.seed);
                let _ = writeln!(s, "duration_secs = {}", c.duration_secs);
                match c.snr_db {
                    Some((lo, hi)) => {
                        let _ = writeln!(s, "snr_db = {lo},{hi}");
                    }
                    None => s.push_str("snr_db = none\n"),
                }
                let _ = writeln!(s, "test_fraction = {}", d.test_fraction);
            }
            DataSource::SpeechCommands { root, classes } => {
                let _ = writeln!(s, "source = speech_commands\nroot = {}", root.display());
                if let Some(c) = classes {
                    let _ = writeln!(s, "classes = {}", c.join(","));
                }
            }
        }
        let _ = writeln!(s, "validation_fraction = {}", d.validation_fraction);
        if let Some(p) = &d.positive_class {
            let _ = writeln!(s, "positive_class = {p}");
        }
        let _ = writeln!(s, "target_miss = {}", d.target_miss);

        let f = &self.features;
        s.push_str("\n[features]\n");
        let _ = writeln!(s, "sample_rate = {}\nmel_bins = {}", f.sample_rate, f.mel_bins);
        let _ = writeln!(s, "window_ms = {}\nhop_ms = {}", f.window_ms, f.hop_ms);
        let _ = writeln!(s, "f_min = {}", f.f_min);
        if let Some(v) = f.f_max {
            let _ = writeln!(s, "f_max = {v}");
        }
        let _ = writeln!(s, "log_floor = {}", f.log_floor);

        let p = &self.profile;
        s.push_str("\n[profile]\n");
        let _ = writeln!(
            s,
            "width_counts = {}",
            join(&mut p.width_counts.iter().map(|n| n.to_string()))
        );
        let _ = writeln!(s, "batch_size = {}\nwarmup_steps = {}", p.cfg.batch_size, p.cfg.warmup_steps);
        let _ = writeln!(s, "timed_steps = {}\nseed = {}", p.cfg.timed_steps, p.cfg.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Config> {
        Config::parse(text, Path::new("/base"))
    }

    #[test]
    fn bundled_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = Config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(cfg.out_dir.starts_with(&dir));
            assert_eq!(parse(&cfg.to_ini()).unwrap().to_ini(), cfg.to_ini());
            n += 1;
        }
        assert!(n >= 4);
    }

    fn config_err(text: &str) -> String {
        match parse(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_config_uses_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.model, ModelSpec::desk_cnn(4));
        assert_eq!(c.train.widths, c.model.widths);
        assert_eq!(c.features, FeatureConfig::with_mel_bins(20));
        assert_eq!(c.out_dir, PathBuf::from("/base/run"));
        assert_eq!(c.profile.width_counts, vec![1, 2, 3, 4, 5, 10, 20, 40]);
        assert!(matches!(c.data.source, DataSource::Synth(ref s) if s.num_classes == 4 && s.per_class == 250));
    }

    #[test]
    fn unknown_keys_are_reported_with_their_line() {
        let m = config_err("[model]\npreset = desk-cnn\n\n[train]\nepochs = 3\nepoch = 4\n");
        assert!(m.starts_with("line 6:"), "{m}");
        assert!(m.contains("'epoch'"), "{m}");
        let m = config_err("# comment\n[modle]\n");
        assert!(m.starts_with("line 2:") && m.contains("[modle]"), "{m}");
        let m = config_err("[train]\nepochs = three\n");
        assert!(m.starts_with("line 2:") && m.contains("epochs"), "{m}");
        let m = config_err("epochs = 3\n");
        assert!(m.starts_with("line 1:"), "{m}");
        let m = config_err("[train]\nlr = 0.1\nlr = 0.2\n");
        assert!(m.starts_with("line 3:") && m.contains("duplicate"), "{m}");
    }

    #[test]
    fn lists_and_tuples() {
        let c = parse(
            "[model]\narch = cnn\nframes = 20\nmel_bins = 10\nnum_classes = 3\nkernels = 3x2, 2\nchannels = 8,12\n\
             strides = 1x1,1x1\npools = 2x1,1\nwidths = 1.0,0.5\n",
        )
        .unwrap();
        let Architecture::Cnn { rows, .. } = &c.model.arch else { panic!() };
        assert_eq!(rows[0], ConvRow::new((3, 2), 8, (1, 1), (2, 1)));
        assert_eq!(rows[1], ConvRow::new((2, 2), 12, (1, 1), (1, 1)));
        assert_eq!(c.model.widths.widths(), &[1.0, 0.5]);
        assert_eq!(c.model.num_classes, 3);
        let m = config_err("[model]\npreset = desk-cnn\nchannels = 1,2\n");
        assert!(m.contains("4"), "{m}");
    }

    #[test]
    fn transformer_keys_rejected_on_cnn_and_vice_versa() {
        assert!(config_err("[model]\npreset = desk-cnn\nheads = 2\n").contains("heads"));
        assert!(config_err("[model]\npreset = transformer-wakeword\nmel_bins=64\npools = 1\n").contains("pools"));
    }

    #[test]
    fn training_widths_must_come_from_the_model() {
        let m = config_err("[model]\nwidths = 1.0,0.5\n[train]\nwidths = 1.0,0.25\n");
        assert!(m.contains("0.25"), "{m}");
    }

    #[test]
    fn mel_bins_must_agree() {
        let m = config_err("[model]\npreset = desk-cnn\n[features]\nmel_bins = 40\n");
        assert!(m.contains("mel_bins"), "{m}");
    }

    #[test]
    fn explicit_text_round_trips() {
        let texts = [
            "",
            "[model]\npreset = transformer-speech-commands\n[train]\noptimizer = sgd\nlr = 0.05\nschedule = cosine\n\
             [data]\nsource = speech_commands\nroot = data/sc\nclasses = yes,no\npositive_class = yes\n\
             [features]\nf_max = 7600\n[profile]\nwidth_counts = 1,4\n",
            "[data]\nsnr_db = none\nsynth_classes = 2\n[model]\nwidths = 1,0.5\n",
        ];
        for t in texts {
            let c = parse(t).unwrap();
            let again = parse(&c.to_ini()).unwrap();
            assert_eq!(again.to_ini(), c.to_ini());
            assert_eq!(again.model, c.model);
            assert_eq!(again.train, c.train);
            assert_eq!(again.data, c.data);
            assert_eq!(again.features, c.features);
            assert_eq!(again.profile, c.profile);
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let c = parse("[data]\nsource = speech_commands\nroot = sc\n[train]\nout_dir = /abs/out\n").unwrap();
        assert!(matches!(c.data.source, DataSource::SpeechCommands { ref root, .. } if root == Path::new("/base/sc")));
        assert_eq!(c.out_dir, PathBuf::from("/abs/out"));
    }

    #[test]
    fn synthetic_class_count_follows_data_unless_set() {
        let c = parse("[data]\nsynth_classes = 6\n").unwrap();
        assert_eq!(c.model.num_classes, 6);
        let c = parse("[model]\nnum_classes = 8\n[data]\nsynth_classes = 6\n").unwrap();
        assert_eq!(c.model.num_classes, 8);
    }
}
