//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment outside quoted strings.
//! Values are numbers, `true`/`false`, bare words or double-quoted strings
//! (with `\"` and `\\` escapes). Every key is optional and appears at most
//! once.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::net::TrainConfig;

pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

const TRAIN_KEYS: &[&str] = &[
    "eta",
    "momentum",
    "lambda",
    "batch_size",
    "epochs",
    "seed",
    "normalizer",
    "alpha_f",
    "alpha_b",
    "layer_scaling",
    "affine",
    "hidden",
    "eval_interval",
];
const DATA_KEYS: &[&str] =
    &["dataset", "classes", "samples", "dims", "blob_scale", "blob_std", "idx_images", "idx_labels", "val_fraction"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// Tail fraction of the dataset held out for validation.
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), dataset: DatasetSpec::default(), val_fraction: DEFAULT_VAL_FRACTION }
    }
}

#[derive(Debug, Clone)]
enum Value {
    Bare(String),
    Quoted(String),
}

impl Value {
    fn text(&self) -> &str {
        match self {
            Value::Bare(s) | Value::Quoted(s) => s,
        }
    }
}

struct Entry {
    line: usize,
    value: Value,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn parse_quoted(rest: &str, line: usize) -> Result<(String, &str)> {
    let mut out = String::new();
    let mut chars = rest.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Ok((out, &rest[i + 1..])),
            '\\' => match chars.next() {
                Some((_, '"')) => out.push('"'),
                Some((_, '\\')) => out.push('\\'),
                Some((_, other)) => return Err(err(line, format!("unknown escape '\\{other}'"))),
                None => break,
            },
            c => out.push(c),
        }
    }
    Err(err(line, "unterminated string"))
}

fn parse_line(raw: &str, line: usize) -> Result<Option<(String, Value)>> {
    let trimmed = raw.trim_start();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let (key, rest) = trimmed.split_once('=').ok_or_else(|| err(line, "expected `key = value`"))?;
    let key = key.trim();
    if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(err(line, format!("bad key '{key}'")));
    }
    let rest = rest.trim_start();
    let (value, tail) = if let Some(q) = rest.strip_prefix('"') {
        let (s, tail) = parse_quoted(q, line)?;
        (Value::Quoted(s), tail)
    } else {
        let end = rest.find('#').unwrap_or(rest.len());
        let word = rest[..end].trim();
        if word.is_empty() {
            return Err(err(line, format!("missing value for '{key}'")));
        }
        if word.contains(char::is_whitespace) {
            return Err(err(line, format!("value for '{key}' contains spaces; quote it")));
        }
        (Value::Bare(word.to_string()), &rest[end..])
    };
    let tail = tail.trim();
    if !(tail.is_empty() || tail.starts_with('#')) {
        return Err(err(line, format!("trailing text after value: '{tail}'")));
    }
    Ok(Some((key.to_string(), value)))
}

struct Entries(HashMap<String, Entry>);

impl Entries {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.0.remove(key)
    }

    fn f64(&mut self, key: &str, default: f64, ok: impl Fn(f64) -> bool, range: &str) -> Result<f64> {
        let Some(e) = self.take(key) else { return Ok(default) };
        let v: f64 = match &e.value {
            Value::Bare(s) => s.parse().map_err(|_| err(e.line, format!("{key}: '{s}' is not a number")))?,
            Value::Quoted(_) => return Err(err(e.line, format!("{key}: expected a number, got a string"))),
        };
        if !v.is_finite() || !ok(v) {
            return Err(err(e.line, format!("{key} = {v} is out of range: {range}")));
        }
        Ok(v)
    }

    fn uint(&mut self, key: &str, default: u64, min: u64) -> Result<u64> {
        let Some(e) = self.take(key) else { return Ok(default) };
        let v: u64 = match &e.value {
            Value::Bare(s) => {
                s.parse().map_err(|_| err(e.line, format!("{key}: '{s}' is not a non-negative integer")))?
            }
            Value::Quoted(_) => return Err(err(e.line, format!("{key}: expected an integer, got a string"))),
        };
        if v < min {
            return Err(err(e.line, format!("{key} = {v} is out of range: must be at least {min}")));
        }
        Ok(v)
    }

    fn usize(&mut self, key: &str, default: usize, min: usize) -> Result<usize> {
        let line = self.0.get(key).map_or(0, |e| e.line);
        let v = self.uint(key, default as u64, min as u64)?;
        usize::try_from(v).map_err(|_| err(line, format!("{key} = {v} is too large")))
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        let Some(e) = self.take(key) else { return Ok(default) };
        match &e.value {
            Value::Bare(s) if s == "true" => Ok(true),
            Value::Bare(s) if s == "false" => Ok(false),
            v => Err(err(e.line, format!("{key}: expected true or false, got '{}'", v.text()))),
        }
    }

    fn word(&mut self, key: &str) -> Option<(usize, String)> {
        self.take(key).map(|e| (e.line, e.value.text().to_string()))
    }
}

/// Parses a config file. Keys that are absent keep their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let Some((key, value)) = parse_line(raw, line)? else { continue };
        if !TRAIN_KEYS.contains(&key.as_str()) && !DATA_KEYS.contains(&key.as_str()) {
            return Err(err(line, format!("unknown key '{key}'")));
        }
        if let Some(prev) = map.get(&key) {
            let Entry { line: first, .. } = prev;
            return Err(err(line, format!("duplicate key '{key}' (first set on line {first})")));
        }
        map.insert(key, Entry { line, value });
    }
    let lines: HashMap<String, usize> = map.iter().map(|(k, e)| (k.clone(), e.line)).collect();
    let mut e = Entries(map);

    let d = TrainConfig::default();
    let unit_open = |v: f64| v > 0.0 && v < 1.0;
    let mut train = TrainConfig {
        eta: e.f64("eta", d.eta, |v| v >= 0.0, "must be >= 0")?,
        momentum: e.f64("momentum", d.momentum, |v| (0.0..1.0).contains(&v), "must lie in [0, 1)")?,
        lambda: e.f64("lambda", d.lambda, |v| v >= 0.0, "must be >= 0")?,
        batch_size: e.usize("batch_size", d.batch_size, 1)?,
        epochs: e.usize("epochs", d.epochs, 1)?,
        seed: e.uint("seed", d.seed, 0)?,
        normalizer: d.normalizer,
        alpha_f: e.f64("alpha_f", d.alpha_f, unit_open, "must lie strictly inside (0, 1)")?,
        alpha_b: e.f64("alpha_b", d.alpha_b, unit_open, "must lie strictly inside (0, 1)")?,
        layer_scaling: e.bool("layer_scaling", d.layer_scaling)?,
        affine: e.bool("affine", d.affine)?,
        hidden: e.usize("hidden", d.hidden, 1)?,
        eval_interval: e.usize("eval_interval", d.eval_interval, 0)?,
    };
    if let Some((line, s)) = e.word("normalizer") {
        train.normalizer = s.parse().map_err(|_| {
            err(line, format!("normalizer: '{s}' is not one of online, batch, layer, population, none"))
        })?;
    }
    if let Err(Error::InvalidParam(msg)) = train.validate() {
        let line = ["batch_size", "normalizer"].iter().filter_map(|k| lines.get(*k)).max().copied().unwrap_or(0);
        return Err(err(line, msg));
    }

    let val_fraction =
        e.f64("val_fraction", DEFAULT_VAL_FRACTION, |v| (0.0..1.0).contains(&v), "must lie in [0, 1)")?;

    let kind = e.word("dataset");
    let dataset = match kind.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "gaussian-blobs")) => {
            let DatasetSpec::GaussianBlobs { classes, samples, dims, scale, std } = DatasetSpec::default() else {
                unreachable!("default dataset is gaussian blobs")
            };
            let classes = e.usize("classes", classes, 1)?;
            let samples = e.usize("samples", samples, 1)?;
            let dims_line = lines.get("dims").copied().unwrap_or(0);
            let dims = e.usize("dims", dims.max(classes), 1)?;
            if dims < classes {
                return Err(err(dims_line, format!("dims = {dims} must be at least classes = {classes}")));
            }
            DatasetSpec::GaussianBlobs {
                classes,
                samples,
                dims,
                scale: e.f64("blob_scale", scale, |_| true, "must be finite")?,
                std: e.f64("blob_std", std, |v| v >= 0.0, "must be >= 0")?,
            }
        }
        Some((_, "synthetic-images")) => DatasetSpec::SyntheticImages {
            classes: e.usize("classes", 10, 1)?,
            samples: e.usize("samples", 2048, 1)?,
        },
        Some((line, "idx-file")) => {
            let images = e.word("idx_images").ok_or_else(|| err(line, "idx-file dataset needs idx_images"))?;
            let labels = e.word("idx_labels").ok_or_else(|| err(line, "idx-file dataset needs idx_labels"))?;
            DatasetSpec::IdxFile { images: PathBuf::from(images.1), labels: PathBuf::from(labels.1) }
        }
        Some((line, other)) => {
            return Err(err(
                line,
                format!("dataset: '{other}' is not one of gaussian-blobs, synthetic-images, idx-file"),
            ))
        }
    };

    // Whatever is left belongs to a different dataset kind.
    if let Some((key, entry)) = e.0.iter().min_by_key(|(_, en)| en.line) {
        let kind = dataset.kind();
        return Err(err(entry.line, format!("'{key}' does not apply to dataset '{kind}'")));
    }
    Ok(RunConfig { train, dataset, val_fraction })
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Writes every setting explicitly, in a form [`parse_config`] reads back
/// to an equal config.
pub fn serialize_config(c: &RunConfig) -> String {
    let t = &c.train;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("eta", format!("{:?}", t.eta));
    kv("momentum", format!("{:?}", t.momentum));
    kv("lambda", format!("{:?}", t.lambda));
    kv("batch_size", t.batch_size.to_string());
    kv("epochs", t.epochs.to_string());
    kv("seed", t.seed.to_string());
    kv("normalizer", t.normalizer.to_string());
    kv("alpha_f", format!("{:?}", t.alpha_f));
    kv("alpha_b", format!("{:?}", t.alpha_b));
    kv("layer_scaling", t.layer_scaling.to_string());
    kv("affine", t.affine.to_string());
    kv("hidden", t.hidden.to_string());
    kv("eval_interval", t.eval_interval.to_string());
    kv("val_fraction", format!("{:?}", c.val_fraction));
    kv("dataset", c.dataset.kind().to_string());
    match &c.dataset {
        DatasetSpec::GaussianBlobs { classes, samples, dims, scale, std } => {
            kv("classes", classes.to_string());
            kv("samples", samples.to_string());
            kv("dims", dims.to_string());
            kv("blob_scale", format!("{scale:?}"));
            kv("blob_std", format!("{std:?}"));
        }
        DatasetSpec::SyntheticImages { classes, samples } => {
            kv("classes", classes.to_string());
            kv("samples", samples.to_string());
        }
        DatasetSpec::IdxFile { images, labels } => {
            kv("idx_images", quote(&images.to_string_lossy()));
            kv("idx_labels", quote(&labels.to_string_lossy()));
        }
    }
    s
}
