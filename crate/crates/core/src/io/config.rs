//! Line-oriented run configuration: `key = value` pairs under optional
//! `[section]` headers, `#` comments.
//!
//! ```text
//! model = segnext-micro
//! seed = 0
//! out_dir = runs/micro
//!
//! [model]
//! decoder = c
//!
//! [train]
//! iters = 2000
//! lr = 6e-5
//! ```
//!
//! The top-level `model` key selects a preset; keys in `[model]` override
//! individual fields of it. Every section is optional.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::Error;
use crate::model::{DecoderKind, ModelConfig};
use crate::msca::AttentionKind;
use crate::train::optim::{AdamWConfig, LrSchedule};

pub const DEFAULT_PRESET: &str = "segnext-micro";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub power: f64,
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier for decoder parameters.
    pub head_lr_mult: f64,
    /// Iterations between validation passes; 0 disables them (a final pass still runs).
    pub eval_interval: usize,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Worker threads; 1 is the fully deterministic single-threaded mode.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            batch: 8,
            crop: 128,
            lr: 6e-5,
            power: 1.0,
            warmup_iters: 0,
            warmup_ratio: 1e-6,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            head_lr_mult: 10.0,
            eval_interval: 500,
            checkpoint_interval: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            max_iter: self.iters,
            power: self.power,
            warmup_iters: self.warmup_iters,
            warmup_ratio: self.warmup_ratio,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_samples: 64, val_samples: 16, size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { scales: vec![1.0], flip: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_preset(DEFAULT_PRESET).expect("default preset exists")
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, Error> {
    v.parse().map_err(|_| Error::Parse { line, msg: format!("invalid value `{v}` for `{key}`") })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, Error> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Parse { line, msg: format!("invalid value `{v}` for `{key}` (expected true or false)") }),
    }
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, Error> {
    v.split(',').map(|x| parse_value(line, key, x.trim())).collect()
}

fn parse_four(line: usize, key: &str, v: &str) -> Result<[usize; 4], Error> {
    let list: Vec<usize> = parse_list(line, key, v)?;
    list.try_into().map_err(|_| Error::Parse { line, msg: format!("`{key}` needs exactly four comma-separated values") })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

struct Entry {
    line: usize,
    section: String,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Entry>, Error> {
    let mut section = String::new();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse { line, msg: format!("malformed section header `{body}`") })?
                .trim();
            if !["model", "train", "data", "eval"].contains(&name) {
                return Err(Error::Parse { line, msg: format!("unknown section `[{name}]`") });
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{body}`") })?;
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() || value.is_empty() || value.starts_with('=') || key.contains(char::is_whitespace) {
            return Err(Error::Parse { line, msg: format!("malformed line `{body}`") });
        }
        if !seen.insert((section.clone(), key.to_string())) {
            return Err(Error::Parse { line, msg: format!("duplicate key `{key}`") });
        }
        out.push(Entry { line, section: section.clone(), key: key.to_string(), value: value.to_string() });
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self, Error> {
        Ok(RunConfig {
            preset: name.to_string(),
            model: ModelConfig::preset(name)?,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs"),
        })
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let entries = tokenize(text)?;
        let preset = entries.iter().find(|e| e.section.is_empty() && e.key == "model");
        let mut cfg = match preset {
            Some(e) => RunConfig::from_preset(&e.value).map_err(|err| Error::Parse { line: e.line, msg: err.to_string() })?,
            None => RunConfig::default(),
        };
        for e in &entries {
            cfg.apply(e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn apply(&mut self, e: &Entry) -> Result<(), Error> {
        let (l, k, v) = (e.line, e.key.as_str(), e.value.as_str());
        let m = &mut self.model;
        let t = &mut self.train;
        match (e.section.as_str(), k) {
            ("", "model") => {}
            ("", "seed") => self.seed = parse_value(l, k, v)?,
            ("", "out_dir") => self.out_dir = PathBuf::from(v),
            ("model", "channels") => {
                let c = parse_four(l, k, v)?;
                (0..4).for_each(|i| m.stages[i].channels = c[i]);
            }
            ("model", "depths") => {
                let d = parse_four(l, k, v)?;
                (0..4).for_each(|i| m.stages[i].depth = d[i]);
            }
            ("model", "expansions") => {
                let x = parse_four(l, k, v)?;
                (0..4).for_each(|i| m.stages[i].expansion = x[i]);
            }
            ("model", "decoder_dim") => m.decoder_dim = parse_value(l, k, v)?,
            ("model", "num_classes") => m.num_classes = parse_value(l, k, v)?,
            ("model", "decoder") => m.decoder = DecoderKind::from_str(v).map_err(|err| Error::Parse { line: l, msg: err.to_string() })?,
            ("model", "include_stage1") => m.include_stage1 = parse_bool(l, k, v)?,
            ("model", "ham_rank") => m.ham_rank = parse_value(l, k, v)?,
            ("model", "ham_iters") => m.ham_iters = parse_value(l, k, v)?,
            ("model", "attention") => m.attention = AttentionKind::from_str(v).map_err(|err| Error::Parse { line: l, msg: err.to_string() })?,
            ("model", "drop_path") => m.drop_path = parse_value(l, k, v)?,
            ("train", "iters") => t.iters = parse_value(l, k, v)?,
            ("train", "batch") => t.batch = parse_value(l, k, v)?,
            ("train", "crop") => t.crop = parse_value(l, k, v)?,
            ("train", "lr") => t.lr = parse_value(l, k, v)?,
            ("train", "power") => t.power = parse_value(l, k, v)?,
            ("train", "warmup_iters") => t.warmup_iters = parse_value(l, k, v)?,
            ("train", "warmup_ratio") => t.warmup_ratio = parse_value(l, k, v)?,
            ("train", "weight_decay") => t.weight_decay = parse_value(l, k, v)?,
            ("train", "beta1") => t.beta1 = parse_value(l, k, v)?,
            ("train", "beta2") => t.beta2 = parse_value(l, k, v)?,
            ("train", "eps") => t.eps = parse_value(l, k, v)?,
            ("train", "head_lr_mult") => t.head_lr_mult = parse_value(l, k, v)?,
            ("train", "eval_interval") => t.eval_interval = parse_value(l, k, v)?,
            ("train", "checkpoint_interval") => t.checkpoint_interval = parse_value(l, k, v)?,
            ("train", "threads") => t.threads = parse_value(l, k, v)?,
            ("data", "train_samples") => self.data.train_samples = parse_value(l, k, v)?,
            ("data", "val_samples") => self.data.val_samples = parse_value(l, k, v)?,
            ("data", "size") => self.data.size = parse_value(l, k, v)?,
            ("eval", "scales") => self.eval.scales = parse_list(l, k, v)?,
            ("eval", "flip") => self.eval.flip = parse_bool(l, k, v)?,
            (s, _) => {
                let place = if s.is_empty() { "top level".to_string() } else { format!("section [{s}]") };
                return Err(Error::Parse { line: l, msg: format!("unknown key `{k}` in {place}") });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if t.batch == 0 || t.crop < crate::encoder::MIN_INPUT || t.threads == 0 {
            return bad(format!("batch and threads must be positive and crop at least {}", crate::encoder::MIN_INPUT));
        }
        if !(t.lr > 0.0) || !(t.head_lr_mult > 0.0) || !(t.power > 0.0) || !(0.0..=1.0).contains(&t.warmup_ratio) {
            return bad("lr, head_lr_mult and power must be positive; warmup_ratio in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) || t.weight_decay < 0.0 {
            return bad("invalid AdamW hyperparameters".into());
        }
        if self.data.train_samples == 0 || self.data.val_samples == 0 || self.data.size < crate::train::data::MIN_SYNTH_SIZE {
            return bad(format!("data needs samples and size at least {}", crate::train::data::MIN_SYNTH_SIZE));
        }
        if self.eval.scales.is_empty() || self.eval.scales.iter().any(|s| !(*s > 0.0)) {
            return bad("eval scales must be positive and non-empty".into());
        }
        Ok(())
    }
}

impl std::fmt::Display for RunConfig {
    /// Serializes every field, so `parse(to_string(c)) == c`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let _ = writeln!(s, "model = {}", self.preset);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "channels = {}", join(&m.channels()));
        let _ = writeln!(s, "depths = {}", join(&m.depths()));
        let _ = writeln!(s, "expansions = {}", join(&m.stages.map(|x| x.expansion)));
        let _ = writeln!(s, "decoder_dim = {}", m.decoder_dim);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "decoder = {}", m.decoder);
        let _ = writeln!(s, "include_stage1 = {}", m.include_stage1);
        let _ = writeln!(s, "ham_rank = {}", m.ham_rank);
        let _ = writeln!(s, "ham_iters = {}", m.ham_iters);
        let _ = writeln!(s, "attention = {}", m.attention);
        let _ = writeln!(s, "drop_path = {}", m.drop_path);
        let _ = writeln!(s, "\n[train]");
        for (k, v) in [
            ("iters", t.iters.to_string()),
            ("batch", t.batch.to_string()),
            ("crop", t.crop.to_string()),
            ("lr", t.lr.to_string()),
            ("power", t.power.to_string()),
            ("warmup_iters", t.warmup_iters.to_string()),
            ("warmup_ratio", t.warmup_ratio.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("head_lr_mult", t.head_lr_mult.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("checkpoint_interval", t.checkpoint_interval.to_string()),
            ("threads", t.threads.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "train_samples = {}", self.data.train_samples);
        let _ = writeln!(s, "val_samples = {}", self.data.val_samples);
        let _ = writeln!(s, "size = {}", self.data.size);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "scales = {}", join(&self.eval.scales));
        let _ = writeln!(s, "flip = {}", self.eval.flip);
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_expands() {
        let c = RunConfig::parse("model = segnext-t\n").unwrap();
        assert_eq!(c.model.channels(), [32, 64, 160, 256]);
        assert_eq!(c.model.depths(), [3, 3, 5, 2]);
    }

    #[test]
    fn empty_sections_use_defaults() {
        let c = RunConfig::parse("model = segnext-micro\n[train]\n[eval]\n").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.eval, EvalConfig::default());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("model = segnext-micro\n[train]\nlr == 5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = RunConfig::parse("[train]\nlearning_rate = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = RunConfig::parse("\n[train]\nbatch = eight\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = RunConfig::parse("model = segnext-q\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn overrides_and_round_trip() {
        let text = "model = segnext-t # tiny\nseed = 7\n[model]\ndecoder = a\ninclude_stage1 = true\nnum_classes = 19\n[eval]\nscales = 0.75, 1.0, 1.25\nflip = true\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.decoder, DecoderKind::Mlp);
        assert_eq!(c.model.num_classes, 19);
        assert_eq!(c.eval.scales, vec![0.75, 1.0, 1.25]);
        assert_eq!(RunConfig::parse(&c.to_string()).unwrap(), c);
    }
}
