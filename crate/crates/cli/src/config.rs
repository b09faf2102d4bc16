//! Layered configuration: built-in defaults, then a JSON file, then
//! command-line overrides, then `VTON_<SECTION>_<KEY>` environment variables.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vton_core::augment::AugmentConfig;
use vton_core::data::DEFAULT_LABEL;
use vton_core::detect::DetectorConfig;
use vton_core::pipeline::PipelineConfig;
use vton_core::segnet::SegTrainConfig;
use vton_core::transnet::GanTrainConfig;
use vton_core::{Error, Result};

pub const ENV_PREFIX: &str = "VTON_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic sample count.
    pub n: usize,
    /// Synthetic image side in pixels.
    pub size: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub label: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 32, size: 64, seed: 0, split_fraction: 0.8, label: DEFAULT_LABEL.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Inference requests allowed to run at once.
    pub workers: usize,
    pub max_body_bytes: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, workers: 2, max_body_bytes: 32 << 20 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub detect: DetectorConfig,
    pub seg: SegTrainConfig,
    pub gan: GanTrainConfig,
    pub pipeline: PipelineConfig,
    pub serve: ServeConfig,
}

/// One `section.key[.subkey]` assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn new(path: &str, value: Value) -> Self {
        Self { path: path.split('.').map(str::to_string).collect(), value }
    }

    /// Parses `section.key=value`; the value is read as JSON when possible
    /// and as a plain string otherwise.
    pub fn parse(assignment: &str) -> Result<Self> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{assignment}`")))?;
        if k.split('.').count() < 2 || k.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("config key `{k}` must look like section.key")));
        }
        Ok(Self::new(k, parse_scalar(v)))
    }
}

fn parse_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let dotted = path.join(".");
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("`{dotted}` does not name a setting")))?;
        let slot = obj.get_mut(key).ok_or_else(|| Error::Config(format!("unknown config key `{dotted}`")))?;
        if i + 1 == path.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config("empty config key".into()))
}

/// Keys of `tree` whose upper-cased, underscore-joined path equals `name`.
fn env_matches(tree: &Value, name: &str, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    let Some(obj) = tree.as_object() else { return };
    for (k, v) in obj {
        prefix.push(k.clone());
        let joined = prefix[1..].join("_").to_uppercase();
        if joined == name {
            out.push(prefix.clone());
        } else if name.starts_with(&(joined + "_")) {
            env_matches(v, name, prefix, out);
        }
        prefix.pop();
    }
}

/// Resolves `VTON_SEG_BATCH_SIZE` style names against the known keys.
pub fn env_override(tree: &Value, var: &str, value: &str) -> Result<Option<Override>> {
    let Some(rest) = var.strip_prefix(ENV_PREFIX) else { return Ok(None) };
    let Some((section, key)) = rest.split_once('_') else { return Ok(None) };
    let section = section.to_lowercase();
    let Some(sub) = tree.get(&section) else { return Ok(None) };
    let mut found = Vec::new();
    let mut prefix = vec![section.clone()];
    env_matches(sub, key, &mut prefix, &mut found);
    match found.len() {
        0 => Err(Error::Config(format!("environment variable {var} does not name a setting"))),
        1 => Ok(Some(Override { path: found.remove(0), value: parse_scalar(value) })),
        _ => Err(Error::Config(format!("environment variable {var} is ambiguous"))),
    }
}

fn merge(base: &mut Value, file: Value, trail: &str) -> Result<()> {
    match (base, file) {
        (Value::Object(b), Value::Object(f)) => {
            for (k, v) in f {
                let path = if trail.is_empty() { k.clone() } else { format!("{trail}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::Config(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (b, f) => {
            *b = f;
            Ok(())
        }
    }
}

/// Builds the effective configuration. `env` is normally `std::env::vars()`.
pub fn load_config(
    file: Option<&Path>,
    overrides: &[Override],
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<AppConfig> {
    let mut tree = serde_json::to_value(AppConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !parsed.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut tree, parsed, "")?;
    }
    for o in overrides {
        set_path(&mut tree, &o.path, o.value.clone())?;
    }
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (k, v) in env {
        if let Some(o) = env_override(&tree, &k, &v)? {
            set_path(&mut tree, &o.path, o.value)?;
        }
    }
    let cfg: AppConfig = serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &AppConfig) -> Result<()> {
    let as_config = |e: Error| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    };
    cfg.augment.validate().map_err(as_config)?;
    cfg.detect.validate().map_err(as_config)?;
    cfg.seg.validate().map_err(as_config)?;
    cfg.gan.validate().map_err(as_config)?;
    cfg.pipeline.validate().map_err(as_config)?;
    if !(0.0..=1.0).contains(&cfg.data.split_fraction) {
        return Err(Error::Config("data.split_fraction must lie in [0,1]".into()));
    }
    if cfg.serve.workers == 0 {
        return Err(Error::Config("serve.workers must be at least 1".into()));
    }
    Ok(())
}

/// Every leaf key as a dotted path.
pub fn leaf_keys(cfg: &AppConfig) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, v) in m {
                    walk(v, &if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") }, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(&serde_json::to_value(cfg).expect("config serializes"), "", &mut out);
    out
}

pub fn to_map(cfg: &AppConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is an object"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn defaults_load() {
        assert_eq!(load_config(None, &[], no_env()).unwrap(), AppConfig::default());
        assert_eq!(AppConfig::default().serve.workers, 2);
    }

    #[test]
    fn precedence_chain() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"seg": {"iterations": 10, "batch_size": 3}, "data": {"n": 5}}"#).unwrap();
        let cfg = load_config(Some(&file), &[], no_env()).unwrap();
        assert_eq!((cfg.seg.iterations, cfg.seg.batch_size, cfg.data.n), (10, 3, 5));
        let flags = [Override::parse("seg.iterations=20").unwrap()];
        let cfg = load_config(Some(&file), &flags, no_env()).unwrap();
        assert_eq!((cfg.seg.iterations, cfg.seg.batch_size), (20, 3));
        let env = vec![("VTON_SEG_ITERATIONS".to_string(), "30".to_string()), ("VTON_SEG_BATCH_SIZE".into(), "7".into())];
        let cfg = load_config(Some(&file), &flags, env).unwrap();
        assert_eq!((cfg.seg.iterations, cfg.seg.batch_size), (30, 7));
    }

    #[test]
    fn every_leaf_key_is_reachable_from_flags_and_env() {
        let base = serde_json::to_value(AppConfig::default()).unwrap();
        for key in leaf_keys(&AppConfig::default()) {
            let path: Vec<String> = key.split('.').map(str::to_string).collect();
            let var = format!("{ENV_PREFIX}{}", path.join("_").to_uppercase());
            let o = env_override(&base, &var, "1").unwrap().unwrap_or_else(|| panic!("{var}"));
            assert_eq!(o.path, path, "{var}");
        }
    }

    #[test]
    fn nested_keys_and_strings() {
        let flags = [Override::parse("seg.optimizer.lr=0.01").unwrap(), Override::parse("data.label=torso").unwrap()];
        let env = vec![("VTON_GAN_G_OPTIMIZER_LR".to_string(), "0.5".to_string())];
        let cfg = load_config(None, &flags, env).unwrap();
        assert_eq!(cfg.seg.optimizer.lr, 0.01);
        assert_eq!(cfg.data.label, "torso");
        assert_eq!(cfg.gan.g_optimizer.lr, 0.5);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(load_config(None, &[Override::parse("seg.nope=1").unwrap()], no_env()), Err(Error::Config(_))));
        assert!(Override::parse("nokey").is_err());
        let env = vec![("VTON_SEG_NOPE".to_string(), "1".to_string())];
        assert!(load_config(None, &[], env).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"sig": {}}"#).unwrap();
        assert!(load_config(Some(&file), &[], no_env()).is_err());
        assert!(load_config(None, &[Override::parse("serve.workers=0").unwrap()], no_env()).is_err());
        assert!(load_config(None, &[Override::parse("seg.iterations=lots").unwrap()], no_env()).is_err());
    }

    #[test]
    fn foreign_env_vars_are_ignored() {
        let env = vec![("PATH".to_string(), "/bin".to_string()), ("VTON_OTHER_THING".into(), "1".into())];
        assert_eq!(load_config(None, &[], env).unwrap(), AppConfig::default());
    }
}
