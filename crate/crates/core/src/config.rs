//! Run configuration files: flat `section.key = value` lines.
//!
//! Sections are `model`, `train`, `task` and optionally `grid`. Every key is
//! optional; model keys default to the preset of `model.kind`, task keys to
//! the task's standard range and vocabulary.
//!
//! ```text
//! task.name = "copy"
//! task.max = 8
//! task.vocab = 16
//! model.kind = "lantm"
//! train.learning_rate = 0.02
//! train.samples = 8000
//! ```

use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::tasks::{Task, TaskSpec};
use crate::training::{Grid, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub grid: Option<Grid>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub task: Option<Task>,
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self> {
        let doc = parse_flat(text)?;
        Self::from_sections(doc, overrides)
    }

    pub fn defaults(task: Task, kind: ModelKind) -> Self {
        let task = TaskSpec::new(task, 1);
        RunConfig { model: ModelConfig::preset(kind, task.vocab), train: TrainConfig::default(), task, grid: None }
    }

    fn from_sections(mut doc: Map<String, Value>, ov: &Overrides) -> Result<Self> {
        for key in doc.keys() {
            if !matches!(key.as_str(), "model" | "train" | "task" | "grid") {
                return Err(Error::Config(format!("unknown section {key:?}")));
            }
        }
        let mut task_sec = take_section(&mut doc, "task")?;
        let name = task_sec.remove("name");
        let task = match (ov.task, name) {
            (Some(t), _) => t,
            (None, Some(v)) => parse_task(&v)?,
            (None, None) => return Err(Error::Config("no task given (task.name or --task)".into())),
        };
        let mut spec = TaskSpec::new(task, 1);
        for (k, v) in task_sec {
            let n = || v.as_u64().ok_or_else(|| Error::Config(format!("task.{k} must be a nonnegative integer")));
            match k.as_str() {
                "min" => spec.min = n()? as usize,
                "max" => spec.max = n()? as usize,
                "vocab" => spec.vocab = n()? as usize,
                "seed" => spec.seed = n()?,
                _ => return Err(Error::Config(format!("unknown key task.{k}"))),
            }
        }
        spec.validate()?;

        let mut model_sec = take_section(&mut doc, "model")?;
        let kind_value = model_sec.remove("kind");
        let kind = match (ov.model, kind_value) {
            (Some(k), _) => k,
            (None, Some(Value::String(s))) => ModelKind::parse(&s).ok_or_else(|| Error::Config(format!("unknown model {s:?}")))?,
            (None, Some(v)) => return Err(Error::Config(format!("model.kind must be a string, got {v}"))),
            (None, None) => ModelKind::Lantm,
        };
        let model: ModelConfig = overlay(ModelConfig::preset(kind, spec.vocab), model_sec, "model")?;
        model.validate()?;

        let mut train: TrainConfig = overlay(TrainConfig::default(), take_section(&mut doc, "train")?, "train")?;
        if let Some(s) = ov.seed {
            train.seed = s;
        }
        train.validate()?;

        let grid = match doc.remove("grid") {
            Some(Value::Object(g)) => Some(overlay(Grid::table(kind), g, "grid")?),
            Some(_) => return Err(Error::Config("grid must be a section".into())),
            None => None,
        };
        Ok(RunConfig { model, train, task: spec, grid })
    }

    /// Flat text that parses back to the same configuration.
    pub fn to_flat_string(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&format!("task.name = \"{}\"\n", self.task.task.name()));
        for (k, v) in [("min", self.task.min as u64), ("max", self.task.max as u64), ("vocab", self.task.vocab as u64), ("seed", self.task.seed)] {
            out.push_str(&format!("task.{k} = {v}\n"));
        }
        out.push_str(&flatten("model", &self.model)?);
        out.push_str(&flatten("train", &self.train)?);
        if let Some(g) = &self.grid {
            out.push_str(&flatten("grid", g)?);
        }
        Ok(out)
    }
}

fn parse_task(v: &Value) -> Result<Task> {
    match v {
        Value::String(s) => Task::parse(s).ok_or_else(|| Error::Config(format!("unknown task {s:?}"))),
        Value::Number(n) => n.as_u64().and_then(|i| Task::from_id(i as usize)).ok_or_else(|| Error::Config(format!("unknown task id {n}"))),
        other => Err(Error::Config(format!("task.name must be a name or id, got {other}"))),
    }
}

fn take_section(doc: &mut Map<String, Value>, name: &str) -> Result<Map<String, Value>> {
    match doc.remove(name) {
        None => Ok(Map::new()),
        Some(Value::Object(m)) => Ok(m),
        Some(_) => Err(Error::Config(format!("{name} must be a section"))),
    }
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: T, keys: Map<String, Value>, section: &str) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("config sections serialize as objects");
    for (k, val) in keys {
        if !obj.contains_key(&k) && !optional_key(section, &k) {
            return Err(Error::Config(format!("unknown key {section}.{k}")));
        }
        obj.insert(k, val);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{section}: {e}")))
}

fn optional_key(section: &str, key: &str) -> bool {
    section == "train" && key == "stop_at_coarse"
}

/// Parses `a.b = value` lines (TOML dotted keys) into nested sections.
pub fn parse_flat(text: &str) -> Result<Map<String, Value>> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    match serde_json::to_value(table)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config("configuration must be a table".into())),
    }
}

/// Renders a serializable struct as `prefix.key = value` lines.
pub fn flatten<T: Serialize>(prefix: &str, value: &T) -> Result<String> {
    let mut out = String::new();
    flatten_value(prefix, &serde_json::to_value(value)?, &mut out)?;
    Ok(out)
}

fn flatten_value(prefix: &str, v: &Value, out: &mut String) -> Result<()> {
    match v {
        Value::Object(m) => {
            for (k, val) in m {
                flatten_value(&format!("{prefix}.{k}"), val, out)?;
            }
        }
        Value::Null => {}
        other => {
            out.push_str(prefix);
            out.push_str(" = ");
            out.push_str(&scalar_text(other)?);
            out.push('\n');
        }
    }
    Ok(())
}

fn scalar_text(v: &Value) -> Result<String> {
    Ok(match v {
        Value::Array(items) => {
            let parts: Result<Vec<String>> = items.iter().map(scalar_text).collect();
            format!("[{}]", parts?.join(", "))
        }
        Value::Number(n) if n.is_f64() => {
            let f = n.as_f64().unwrap_or(0.0);
            if f.fract() == 0.0 && f.abs() < 1e15 {
                format!("{f:.1}")
            } else {
                format!("{f:?}")
            }
        }
        Value::Object(_) | Value::Null => return Err(Error::Config("nested values cannot be flattened".into())),
        other => other.to_string(),
    })
}
