//! Layered experiment configuration: preset, then config file, then
//! `--set` pairs, then the dedicated flags.
//!
//! Config files are flat `section.key = value` lines (TOML dotted keys, so
//! `[section]` tables work too). Sections: `gen`, `train`, `model`, `loss`,
//! `probe`, `eval`, `experiment`. A run manifest (`*.json`) is also accepted
//! and replays its resolved config verbatim.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use causalrm::evaluation::Experiment;
use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Library defaults, one seed.
    Default,
    /// The desk-scale experiment grid: three seeds, tuned loss weights.
    PaperDesk,
}

impl Preset {
    fn parse(s: &str) -> Result<Preset> {
        Preset::from_str(s, true).map_err(|_| usage(format!("unknown preset '{s}'; valid: default, paper-desk")))
    }

    fn experiment(self) -> Experiment {
        match self {
            Preset::Default => Experiment::default(),
            Preset::PaperDesk => Experiment::paper_desk(),
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Config file with `section.key = value` lines, or a run manifest.
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    /// Starting point before the config file is applied.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Extra override, e.g. `--set gen.mixing=tanh` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for data, training and probes (replaces experiment.seeds).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<Experiment> {
        let mut pairs: Vec<(String, Value)> = Vec::new();
        let mut preset = self.preset;
        let mut exp = None;

        if let Some(path) = &self.config {
            if path.extension().is_some_and(|e| e == "json") {
                exp = Some(from_manifest(path)?);
            } else {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let table: Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
                flatten("", &table, &mut pairs);
                if let Some(pos) = pairs.iter().position(|(k, _)| k == "preset") {
                    let (_, v) = pairs.remove(pos);
                    let name = v.as_str().ok_or_else(|| usage("preset must be a string"))?;
                    preset = preset.or(Some(Preset::parse(name)?));
                }
            }
        }
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
            pairs.push((k.trim().to_string(), parse_value(v.trim())));
        }

        let mut exp = exp.unwrap_or_else(|| preset.unwrap_or(Preset::Default).experiment());
        for (k, v) in pairs {
            apply(&mut exp, &k, v)?;
        }

        if let Some(v) = self.rho {
            exp.gen.rho = v;
        }
        if let Some(v) = self.embed_dim {
            exp.gen.embed_dim = v;
            exp.train.dims.embed = v;
        }
        if let Some(v) = self.n_train {
            exp.gen.n_train = v;
        }
        if let Some(v) = self.n_test {
            exp.gen.n_test = v;
        }
        if let Some(v) = self.epochs {
            exp.train.epochs = v;
        }
        if let Some(v) = self.lr {
            exp.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            exp.train.batch_size = v;
        }
        if let Some(s) = self.seed {
            exp = exp.with_seed(s);
        }
        if exp.seeds.is_empty() {
            bail!(usage("experiment.seeds must not be empty"));
        }
        exp.gen.validate().map_err(|e| usage(e.to_string()))?;
        exp.train.validate().map_err(|e| usage(e.to_string()))?;
        Ok(exp)
    }
}

fn from_manifest(path: &Path) -> Result<Experiment> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let cfg = v.get("config").ok_or_else(|| usage(format!("{}: no 'config' object", path.display())))?;
    serde_json::from_value(cfg.clone()).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parses a `--set` value as a TOML scalar or array, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Writes `value` into field `field` of `target` through its serde form,
/// so field names and types are checked by the config structs themselves.
fn set_field<T: Serialize + DeserializeOwned>(target: &mut T, key: &str, field: &str, value: Value) -> Result<()> {
    let mut table = match Value::try_from(&*target).map_err(|e| anyhow!("serializing config: {e}"))? {
        Value::Table(t) => t,
        _ => bail!("config section is not a table"),
    };
    table.insert(field.to_string(), value);
    *target = Value::Table(table).try_into().map_err(|e: toml::de::Error| usage(format!("{key}: {}", e.message())))?;
    Ok(())
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(usage(format!("{key} must be a number"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| usage(format!("{key} must be a non-negative integer")))
}

const TRAIN_KEYS: [&str; 8] =
    ["epochs", "batch_size", "lr", "seed", "checkpoint_interval", "log_interval", "clip_norm", "timing"];

pub fn apply(exp: &mut Experiment, key: &str, value: Value) -> Result<()> {
    let (section, field) =
        key.split_once('.').ok_or_else(|| usage(format!("config key '{key}' needs a section prefix")))?;
    match section {
        // integer-valued floats are common in hand-written files
        "gen" => {
            let value = match (field, &value) {
                (
                    "beta" | "rho" | "p_chosen" | "p_rejected" | "p_test" | "noise_scale" | "prefix_magnitude",
                    Value::Integer(i),
                ) => Value::Float(*i as f64),
                _ => value,
            };
            set_field(&mut exp.gen, key, field, value)
        }
        "train" if TRAIN_KEYS.contains(&field) => {
            let value = match (field, &value) {
                ("lr" | "clip_norm", Value::Integer(i)) => Value::Float(*i as f64),
                _ => value,
            };
            if field == "clip_norm" && value.as_str() == Some("none") {
                exp.train.clip_norm = None;
                return Ok(());
            }
            set_field(&mut exp.train, key, field, value)
        }
        "model" => {
            let n = as_usize(key, &value)?;
            match field {
                "embed_dim" => exp.train.dims.embed = n,
                "d_c" => exp.train.dims.d_c = n,
                "d_nc" => exp.train.dims.d_nc = n,
                _ => bail!(usage(format!("unknown config key '{key}'; model keys: embed_dim, d_c, d_nc"))),
            }
            Ok(())
        }
        "loss" => {
            let x = as_f64(key, &value)?;
            let w = &mut exp.train.weights;
            let slot = match field {
                "lambda_pred" => &mut w.pred,
                "lambda_kl_c" => &mut w.kl_c,
                "lambda_kl_nc" => &mut w.kl_nc,
                "lambda_adv" => &mut w.adv,
                "lambda_rec" => &mut w.rec,
                "lambda_grl" => &mut w.grl,
                _ => bail!(usage(format!(
                    "unknown config key '{key}'; loss keys: lambda_pred, lambda_kl_c, lambda_kl_nc, lambda_adv, lambda_rec, lambda_grl"
                ))),
            };
            *slot = x;
            Ok(())
        }
        "probe" => {
            let value = match (field, &value) {
                ("lr" | "train_fraction", Value::Integer(i)) => Value::Float(*i as f64),
                _ => value,
            };
            set_field(&mut exp.probe, key, field, value)
        }
        "eval" if field == "buckets" => {
            exp.buckets = as_usize(key, &value)?;
            Ok(())
        }
        "experiment" if field == "seeds" => {
            let arr = value.as_array().ok_or_else(|| usage(format!("{key} must be an array of seeds")))?;
            exp.seeds = arr
                .iter()
                .map(|v| {
                    v.as_integer()
                        .and_then(|i| u64::try_from(i).ok())
                        .ok_or_else(|| usage(format!("{key} entries must be non-negative integers")))
                })
                .collect::<Result<_>>()?;
            Ok(())
        }
        _ => Err(usage(format!("unknown config key '{key}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_text(text: &str) -> Result<Experiment> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.cfg");
        fs::write(&p, text).unwrap();
        ConfigArgs { config: Some(p), ..ConfigArgs::default() }.resolve()
    }

    #[test]
    fn dotted_keys_reach_every_section() {
        let e = resolve_text(
            "gen.rho = 0.8\ngen.mixing = \"tanh\"\ntrain.lr = 0.01\nmodel.d_c = 6\nloss.lambda_adv = 0.2\nprobe.steps = 50\neval.buckets = 5\nexperiment.seeds = [4, 5]\n",
        )
        .unwrap();
        assert_eq!(e.gen.rho, 0.8);
        assert_eq!(e.train.lr, 0.01);
        assert_eq!(e.train.dims.d_c, 6);
        assert_eq!(e.train.weights.adv, 0.2);
        assert_eq!(e.probe.steps, 50);
        assert_eq!(e.buckets, 5);
        assert_eq!(e.seeds, vec![4, 5]);
    }

    #[test]
    fn preset_in_file_and_flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.cfg");
        fs::write(&p, "preset = \"paper-desk\"\ngen.rho = 0.7\n").unwrap();
        let args = ConfigArgs {
            config: Some(p),
            rho: Some(0.6),
            set: vec!["loss.lambda_rec=0.5".into()],
            ..ConfigArgs::default()
        };
        let e = args.resolve().unwrap();
        assert_eq!(e.seeds, vec![1, 2, 3]);
        assert_eq!(e.train.weights.grl, Experiment::paper_desk().train.weights.grl);
        assert_eq!(e.gen.rho, 0.6);
        assert_eq!(e.train.weights.rec, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        let err = resolve_text("gen.rhoo = 0.5\n").unwrap_err().to_string();
        assert!(err.contains("rhoo"), "{err}");
        let err = resolve_text("loss.lambda_foo = 1\n").unwrap_err().to_string();
        assert!(err.contains("lambda_foo"), "{err}");
        let err = resolve_text("train.weights = 1\n").unwrap_err().to_string();
        assert!(err.contains("train.weights"), "{err}");
        let err = resolve_text("gen.rho = 1.5\n").unwrap_err().to_string();
        assert!(err.contains("rho must lie in [0,1]"), "{err}");
    }

    #[test]
    fn seed_flag_moves_every_seed() {
        let e =
            ConfigArgs { seed: Some(9), preset: Some(Preset::PaperDesk), ..ConfigArgs::default() }.resolve().unwrap();
        assert_eq!((e.gen.seed, e.train.seed, e.probe.seed, e.seeds.clone()), (9, 9, 9, vec![9]));
    }

    #[test]
    fn set_values_parse_as_toml() {
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert_eq!(parse_value("tanh"), Value::String("tanh".into()));
    }
}
