//! Layered run configuration: built-in defaults, then an optional JSON file,
//! then command-line flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

fn object(v: Value, what: &str) -> Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Config(format!("{what} must be a JSON object"))),
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Merges `file` and `flags` over the serialized defaults of `T`.
///
/// Unknown keys in the file are rejected. Null flag values are ignored.
/// Keys listed in `exclusive` form one group: if the flags set any member,
/// the file's values for the whole group are dropped.
pub fn resolve<T>(file: Option<Value>, flags: &impl Serialize, exclusive: &[&str]) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut merged = object(serde_json::to_value(T::default())?, "defaults")?;
    let flags = object(serde_json::to_value(flags)?, "flags")?;
    if let Some(file) = file {
        let mut file = object(file, "config file")?;
        if exclusive.iter().any(|k| flags.get(*k).is_some_and(|v| !v.is_null())) {
            for k in exclusive {
                file.remove(*k);
            }
        }
        for (k, v) in file {
            if !merged.contains_key(&k) {
                return Err(CliError::Config(format!("unknown config key {k:?}")));
            }
            merged.insert(k, v);
        }
    }
    for (k, v) in flags {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    struct Cfg {
        a: u32,
        b: Option<f64>,
        c: Option<f64>,
    }

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        a: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        c: Option<f64>,
    }

    #[test]
    fn flags_override_file() {
        let file = serde_json::json!({"a": 3, "b": 1.5});
        let cfg: Cfg = resolve(Some(file.clone()), &Flags { a: Some(7), c: None }, &[]).unwrap();
        assert_eq!(cfg, Cfg { a: 7, b: Some(1.5), c: None });
        let cfg: Cfg = resolve(Some(file), &Flags { a: None, c: Some(2.0) }, &["b", "c"]).unwrap();
        assert_eq!(cfg, Cfg { a: 3, b: None, c: Some(2.0) });
    }

    #[test]
    fn unknown_keys_rejected() {
        let file = serde_json::json!({"zzz": 1});
        let err = resolve::<Cfg>(Some(file), &Flags { a: None, c: None }, &[]).unwrap_err();
        assert_eq!(err.code(), "config_error");
    }
}
