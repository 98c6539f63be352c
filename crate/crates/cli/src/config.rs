//! Resolved run settings: flags over config file over defaults.

use std::path::{Path, PathBuf};

use gesturenet::dataio::SynthConfig;
use gesturenet::kv::{parse_kv, parse_value, render_kv};
use gesturenet::metrics::AbsentPairs;
use gesturenet::trainer::TrainConfig;
use gesturenet::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Manifest keys that describe a run's results rather than its inputs.
fn informational(key: &str) -> bool {
    key == "command" || key == "version" || key.starts_with("result.")
}

pub fn read_config_file(path: Option<&Path>) -> Result<Vec<(String, String)>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Usage(format!("cannot read config file {}: {e}", p.display())))?;
            Ok(parse_kv(&text)?.into_iter().filter(|(k, _)| !informational(k)).collect())
        }
    }
}

pub fn parse_absent(v: &str) -> Result<AbsentPairs> {
    match v {
        "skip" => Ok(AbsentPairs::Skip),
        "include" => Ok(AbsentPairs::Include),
        _ => Err(Error::Usage(format!("absent_pairs must be skip or include, got '{v}'"))),
    }
}

pub fn absent_name(a: AbsentPairs) -> &'static str {
    match a {
        AbsentPairs::Skip => "skip",
        AbsentPairs::Include => "include",
    }
}

#[derive(Clone, Debug, Default)]
pub struct GenConfig {
    pub synth: SynthConfig,
    pub out: Option<PathBuf>,
}

impl GenConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "out" => self.out = Some(value.into()),
            _ => self.synth.set(key, value)?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainRun {
    pub train: TrainConfig,
    pub arch: Option<String>,
    /// Needed only for inline architecture strings.
    pub variant: Option<String>,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub activate_spatial: bool,
}

impl TrainRun {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = Some(value.into()),
            "variant" => self.variant = Some(value.into()),
            "data" => self.data = Some(value.into()),
            "val" => self.val = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "activate_spatial" => self.activate_spatial = parse_value(key, value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut p = Vec::new();
        if let Some(a) = &self.arch {
            p.push(("arch".into(), a.clone()));
        }
        if let Some(v) = &self.variant {
            p.push(("variant".into(), v.clone()));
        }
        push_path(&mut p, "data", &self.data);
        push_path(&mut p, "val", &self.val);
        push_path(&mut p, "out", &self.out);
        p.push(("activate_spatial".into(), self.activate_spatial.to_string()));
        p.extend(self.train.to_pairs());
        p
    }
}

#[derive(Clone, Debug)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub arch: Option<String>,
    pub absent: AbsentPairs,
    pub batch_size: usize,
    pub sequence: Option<usize>,
    /// Directory of binary prediction tracks: read by `eval` in place of a
    /// checkpoint, written by `predict` next to the CSV.
    pub tracks: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            checkpoint: None,
            data: None,
            out: None,
            arch: None,
            absent: AbsentPairs::Skip,
            batch_size: 32,
            sequence: None,
            tracks: None,
        }
    }
}

impl EvalRun {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "checkpoint" => self.checkpoint = Some(value.into()),
            "data" => self.data = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "arch" => self.arch = Some(value.into()),
            "absent_pairs" => self.absent = parse_absent(value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "sequence" => self.sequence = Some(parse_value(key, value)?),
            "tracks" => self.tracks = Some(value.into()),
            _ => return Err(Error::Usage(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut p = Vec::new();
        push_path(&mut p, "checkpoint", &self.checkpoint);
        push_path(&mut p, "tracks", &self.tracks);
        push_path(&mut p, "data", &self.data);
        push_path(&mut p, "out", &self.out);
        if let Some(a) = &self.arch {
            p.push(("arch".into(), a.clone()));
        }
        p.push(("absent_pairs".into(), absent_name(self.absent).into()));
        p.push(("batch_size".into(), self.batch_size.to_string()));
        if let Some(s) = self.sequence {
            p.push(("sequence".into(), s.to_string()));
        }
        p
    }
}

fn push_path(p: &mut Vec<(String, String)>, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        p.push((key.into(), v.display().to_string()));
    }
}

/// Applies config-file pairs, then flag pairs, through `set`.
pub fn resolve<T>(
    target: &mut T,
    file: Vec<(String, String)>,
    flags: Vec<(&str, Option<String>)>,
    set: impl Fn(&mut T, &str, &str) -> Result<()>,
) -> Result<()> {
    for (k, v) in file {
        set(target, &k, &v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            set(target, k, &v)?;
        }
    }
    Ok(())
}

pub fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Usage(format!("missing --{what}")))
}

/// `command=..`, `version=..`, the settings, then `result.*` keys.
pub fn manifest(command: &str, settings: &[(String, String)], results: &[(String, String)]) -> String {
    let mut p = vec![("command".to_string(), command.to_string()), ("version".to_string(), VERSION.to_string())];
    p.extend(settings.iter().cloned());
    p.extend(results.iter().map(|(k, v)| (format!("result.{k}"), v.clone())));
    render_kv(&p)
}
