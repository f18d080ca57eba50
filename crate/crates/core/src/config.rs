//! Run configuration: every tunable in one tree, stored as plain text with
//! one `dotted.key = value` per line.
//!
//! ```text
//! # comment
//! model.l_max = 1
//! solver.eps_reuse = 0.1
//! sim.potential = water
//! ```
//!
//! Keys are checked against the default tree, so a typo is an error rather
//! than a silently ignored line. Values take the type of the default at that
//! key.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::deq::SolverConfig;
use crate::eqnet::ModelConfig;
use crate::sim::DatasetSpec;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdConfig {
    pub steps: usize,
    /// fs.
    pub dt: f64,
    /// Initial velocities are drawn at this temperature (K) when the
    /// starting structure has none.
    pub temperature: f64,
    pub seed: u64,
    pub reuse: bool,
}

impl Default for MdConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            dt: 0.5,
            temperature: 300.0,
            seed: 0,
            reuse: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxConfig {
    pub steps: usize,
    /// Steepest-descent step, Å² / eV.
    pub step_size: f64,
    /// Early stop once every force norm is below this (eV/Å); 0 disables it.
    pub f_max: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.01,
            f_max: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Oracle preset name or path to a JSON oracle description.
    pub potential: String,
    pub dataset: DatasetSpec,
    pub md: MdConfig,
    pub relax: RelaxConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            potential: "water".into(),
            dataset: DatasetSpec::default(),
            md: MdConfig::default(),
            relax: RelaxConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        self.sim.dataset.validate()?;
        if self.sim.potential.trim().is_empty() {
            return Err(Error::Config("sim.potential is empty".into()));
        }
        let md = &self.sim.md;
        if !(md.dt > 0.0) || !(md.temperature >= 0.0) {
            return Err(Error::Config(format!("invalid md settings {md:?}")));
        }
        let r = &self.sim.relax;
        if !(r.step_size > 0.0) || !(r.f_max >= 0.0) {
            return Err(Error::Config(format!("invalid relax settings {r:?}")));
        }
        Ok(())
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default()).map_err(json_err)?;
        let mut seen = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", ln + 1)));
            }
            let slot = lookup(&mut tree, key).ok_or_else(|| Error::Config(format!("line {}: unknown key {key}", ln + 1)))?;
            *slot = parse_value(slot, value).map_err(|m| Error::Config(format!("line {}: {key}: {m}", ln + 1)))?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(json_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key, in a stable order.
    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        let mut leaves = Vec::new();
        flatten("", &tree, &mut leaves);
        for (k, v) in leaves {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = node.as_object_mut()?.get_mut(part)?;
    }
    (!node.is_object()).then_some(node)
}

fn parse_value(current: &Value, text: &str) -> std::result::Result<Value, String> {
    match current {
        Value::Bool(_) => match text {
            "true" | "on" => Ok(Value::Bool(true)),
            "false" | "off" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true/false, got {text:?}")),
        },
        Value::String(_) => {
            let s = text.strip_prefix('"').and_then(|t| t.strip_suffix('"')).unwrap_or(text);
            Ok(Value::String(s.to_string()))
        }
        Value::Number(n) if n.is_u64() => text
            .parse::<u64>()
            .map(|v| Value::Number(v.into()))
            .map_err(|_| format!("expected a non-negative integer, got {text:?}")),
        Value::Number(n) if n.is_i64() => text
            .parse::<i64>()
            .map(|v| Value::Number(v.into()))
            .map_err(|_| format!("expected an integer, got {text:?}")),
        Value::Number(_) => text
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a finite number, got {text:?}")),
        other => Err(format!("unsupported value kind {other}")),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => flatten_map(prefix, map, out),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn flatten_map(prefix: &str, map: &Map<String, Value>, out: &mut Vec<(String, String)>) {
    for (k, v) in map {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        flatten(&key, v, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_cover_every_section() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        for key in ["model.r_cut", "model.max_neighbors", "solver.eps_train", "train.lambda_f", "sim.dataset.frames", "sim.md.reuse", "sim.relax.step_size"] {
            assert!(text.contains(&format!("{key} = ")), "{key}");
        }
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("# toy\nmodel.l_max = 1\n\nsolver.solver = broyden\nsim.md.reuse = off\ntrain.warmup_epochs = 2\nsim.potential = \"water\"\n").unwrap();
        assert_eq!(cfg.model.l_max, 1);
        assert_eq!(cfg.solver.solver, crate::deq::SolverKind::Broyden);
        assert!(!cfg.sim.md.reuse);
        assert_eq!(cfg.train.warmup_epochs, 2.0);
        assert_eq!(cfg.sim.potential, "water");
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "model.lmax = 1",
            "model = 1",
            "model.l_max = 1.5",
            "model.l_max = -1",
            "sim.md.reuse = maybe",
            "solver.eps_train = nan",
            "solver.solver = newton",
            "just text",
            "model.l_max = 1\nmodel.l_max = 2",
            "solver.eps_train = 0.5",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn shipped_presets_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
            n += 1;
        }
        assert!(n >= 2);
    }

    proptest! {
        #[test]
        fn round_trip_is_a_fixed_point(
            l in 0usize..4,
            heads in 1usize..4,
            eps in 1e-9f64..1e-2,
            loose in 1.0f64..1e3,
            lr in 1e-5f64..1e-2,
            reuse: bool,
            temp in 0.0f64..2000.0,
        ) {
            let mut cfg = RunConfig::default();
            cfg.model.l_max = l;
            cfg.model.heads = heads;
            cfg.model.channels = 4 * heads;
            cfg.solver.eps_train = eps;
            cfg.solver.eps_reuse = eps * loose;
            cfg.train.lr_max = lr;
            cfg.sim.md.reuse = reuse;
            cfg.sim.dataset.temperature = temp;
            let text = cfg.to_text();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
