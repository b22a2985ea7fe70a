//! Run configuration plumbing: a JSON config file, then dotted-key
//! `key=value` overrides applied in order, then deserialization into the
//! typed per-command config. The typed configs reject unknown keys
//! themselves (`deny_unknown_fields`), so a typo fails loudly instead of
//! silently using a default.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Splits a `key=value` override. The value is parsed as JSON when possible
/// and falls back to a bare string, so `shape=torus` needs no quoting while
/// `lr=0.01`, `enabled=false` and `background=[0,0,0]` keep their types.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn array_index(seg: &str, key: &str, len: usize) -> Result<usize> {
    let idx: usize = seg.parse().map_err(|_| {
        Error::Config(format!("override {key:?}: segment {seg:?} must be an array index"))
    })?;
    if idx >= len {
        return Err(Error::Config(format!(
            "override {key:?}: index {idx} out of bounds (array length {len})"
        )));
    }
    Ok(idx)
}

fn descend<'a>(cur: &'a mut Value, seg: &str, key: &str) -> Result<&'a mut Value> {
    match cur {
        Value::Object(map) => Ok(map
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()))),
        Value::Array(items) => {
            let idx = array_index(seg, key, items.len())?;
            Ok(&mut items[idx])
        }
        other => Err(Error::Config(format!(
            "override {key:?}: segment {seg:?} descends into the non-container value {other}"
        ))),
    }
}

/// Sets `root[key] = value` where `key` is a dotted path. Intermediate
/// objects are created on demand; numeric segments index existing arrays.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let segs: Vec<&str> = key.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    let mut cur = root;
    for seg in &segs[..segs.len() - 1] {
        cur = descend(cur, seg, key)?;
    }
    let last = segs[segs.len() - 1];
    match cur {
        Value::Object(map) => {
            map.insert(last.to_string(), value);
        }
        Value::Array(items) => {
            let idx = array_index(last, key, items.len())?;
            items[idx] = value;
        }
        other => {
            return Err(Error::Config(format!(
                "override {key:?}: segment {last:?} descends into the non-container value {other}"
            )));
        }
    }
    Ok(())
}

/// Reads a JSON object from `path`; `None` yields an empty object so every
/// field falls back to its serde default.
pub fn load_json(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(serde_json::Map::new()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config(format!(
            "config {} must be a JSON object at the top level",
            path.display()
        )));
    }
    Ok(v)
}

/// Deserializes a merged JSON value into a typed config. Unknown keys and
/// type mismatches surface as [`Error::Config`].
pub fn typed<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Loads `path` (or an empty object), applies `key=value` overrides in
/// order, and deserializes the result. Later overrides win.
pub fn resolve<T: DeserializeOwned>(path: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut v = load_json(path)?;
    for s in sets {
        let (k, val) = parse_override(s)?;
        apply_override(&mut v, &k, val)?;
    }
    typed(v)
}

/// Pretty JSON of the fully-defaulted config, for the run banner.
pub fn banner<T: Serialize>(cfg: &T) -> String {
    serde_json::to_string_pretty(cfg).unwrap_or_else(|e| format!("<unprintable config: {e}>"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::FitConfig;
    use serde_json::json;
    use std::io::Write;

    #[test]
    fn override_values_keep_their_json_types() {
        assert_eq!(parse_override("lr=0.01").unwrap(), ("lr".into(), json!(0.01)));
        assert_eq!(parse_override("steps=50").unwrap(), ("steps".into(), json!(50)));
        assert_eq!(parse_override("on=true").unwrap(), ("on".into(), json!(true)));
        assert_eq!(parse_override("bg=[0,0,0]").unwrap(), ("bg".into(), json!([0, 0, 0])));
        assert_eq!(parse_override("shape=torus").unwrap(), ("shape".into(), json!("torus")));
        assert_eq!(parse_override("s=\"50\"").unwrap(), ("s".into(), json!("50")));
        assert!(parse_override("no_equals").is_err());
        assert!(parse_override("=5").is_err());
    }

    #[test]
    fn dotted_keys_create_nested_objects() {
        let mut v = json!({});
        apply_override(&mut v, "a.b.c", json!(1)).unwrap();
        apply_override(&mut v, "a.d", json!("x")).unwrap();
        assert_eq!(v, json!({"a": {"b": {"c": 1}, "d": "x"}}));
    }

    #[test]
    fn numeric_segments_index_arrays() {
        let mut v = json!({"background": [1.0, 1.0, 1.0]});
        apply_override(&mut v, "background.1", json!(0.25)).unwrap();
        assert_eq!(v, json!({"background": [1.0, 0.25, 1.0]}));
        assert!(apply_override(&mut v, "background.3", json!(0.0)).is_err());
        assert!(apply_override(&mut v, "background.x", json!(0.0)).is_err());
    }

    #[test]
    fn descending_into_a_scalar_is_rejected() {
        let mut v = json!({"lr": 0.01});
        let err = apply_override(&mut v, "lr.nested", json!(1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn later_overrides_win() {
        let mut v = json!({});
        apply_override(&mut v, "seed", json!(1)).unwrap();
        apply_override(&mut v, "seed", json!(2)).unwrap();
        assert_eq!(v, json!({"seed": 2}));
    }

    #[test]
    fn resolve_without_a_file_uses_defaults() {
        let cfg: FitConfig = resolve(None, &[]).unwrap();
        assert_eq!(cfg, FitConfig::default());
    }

    #[test]
    fn resolve_applies_file_then_overrides() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{}", json!({"steps": 7, "lr": 0.5})).unwrap();
        let cfg: FitConfig =
            resolve(Some(f.path()), &["lr=0.25".into(), "seed=9".into()]).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = resolve::<FitConfig>(None, &["lrr=0.1".into()]).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("unknown field"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn type_mismatches_are_rejected() {
        let err = resolve::<FitConfig>(None, &["steps=fast".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_object_config_file_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "[1,2,3]").unwrap();
        assert!(load_json(Some(f.path())).is_err());
        let mut g = tempfile::NamedTempFile::new().unwrap();
        write!(g, "not json").unwrap();
        assert!(load_json(Some(g.path())).is_err());
        assert!(load_json(Some(Path::new("/nonexistent/config.json"))).is_err());
    }

    #[test]
    fn banner_is_pretty_json() {
        let s = banner(&FitConfig::default());
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["steps"], json!(500));
    }
}
