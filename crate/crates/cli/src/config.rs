//! Flat `key = value` config files merged under command-line flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

/// Flags whose config value is a whitespace-separated list.
const LIST_KEYS: &[&str] = &["props"];

/// Keys consumed here rather than forwarded as flags.
const RESERVED: &[&str] = &["config", "workers"];

#[derive(Debug, Default)]
pub struct ConfigFile {
    pub path: Option<PathBuf>,
    pub values: BTreeMap<String, String>,
}

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Syntax(PathBuf, usize, String),
}

/// Normalizes `frames_fps_motion` and `frames-fps-motion` to the flag spelling.
pub fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

pub fn parse(text: &str, path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut values = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax(
                path.into(),
                i + 1,
                format!("expected key = value, got {line:?}"),
            ));
        };
        let key = normalize_key(k);
        if key.is_empty() || key.starts_with('-') {
            return Err(ConfigError::Syntax(
                path.into(),
                i + 1,
                format!("bad key {k:?}"),
            ));
        }
        if values.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Syntax(
                path.into(),
                i + 1,
                format!("key {key:?} given twice"),
            ));
        }
    }
    Ok(values)
}

/// Value of `--config` in raw arguments, if any.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn flag_given(args: &[OsString], key: &str) -> bool {
    let long = format!("--{key}");
    let eq = format!("--{key}=");
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == long || s.starts_with(&eq)
    })
}

pub fn load(args: &[OsString]) -> Result<ConfigFile, ConfigError> {
    let Some(path) = config_path(args) else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io(path.clone(), e))?;
    let values = parse(&text, &path)?;
    Ok(ConfigFile {
        path: Some(path),
        values,
    })
}

impl ConfigFile {
    /// Arguments with every config value the command `accepts` and not
    /// already given as a flag appended.
    ///
    /// Returns the new argument list and the keys that came from the file.
    pub fn merge(
        &self,
        args: &[OsString],
        accepts: impl Fn(&str) -> bool,
    ) -> (Vec<OsString>, Vec<String>) {
        let mut out = args.to_vec();
        let mut used = Vec::new();
        for (key, value) in &self.values {
            if RESERVED.contains(&key.as_str()) || !accepts(key) || flag_given(args, key) {
                continue;
            }
            match value.as_str() {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => {
                    out.push(format!("--{key}").into());
                    if LIST_KEYS.contains(&key.as_str()) {
                        out.extend(value.split_whitespace().map(OsString::from));
                    } else {
                        out.push(value.into());
                    }
                }
            }
            used.push(key.replace('-', "_"));
        }
        (out, used)
    }

    pub fn workers(&self) -> Option<&str> {
        self.values.get("workers").map(String::as_str)
    }
}
