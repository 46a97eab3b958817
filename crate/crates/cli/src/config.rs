//! Run configuration from defaults, a key/value file, a grid file and flags.
//!
//! Files hold one `key = value` per line; `#` starts a comment. A value may
//! be a comma-separated list, and every list in the merged configuration
//! multiplies the grid. Later sources replace a key entirely: defaults,
//! then `--config`, then `--grid`, then flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Invalid input: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

/// Key → candidate values.
pub type Layer = BTreeMap<String, Vec<String>>;

fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

fn split_values(value: &str) -> Vec<String> {
    value.split(',').map(|v| v.trim().to_string()).collect()
}

/// Parses a key/value file, rejecting keys outside `allowed`.
pub fn parse_text(text: &str, origin: &str, allowed: &[&str]) -> Result<Layer, UsageError> {
    let mut layer = Layer::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{origin}:{}: expected `key = value`", no + 1)))?;
        let key = normalize_key(key);
        if !allowed.contains(&key.as_str()) {
            return Err(usage(format!("{origin}:{}: unknown key '{key}'", no + 1)));
        }
        let values = split_values(value);
        if values.iter().any(String::is_empty) {
            return Err(usage(format!(
                "{origin}:{}: empty value for '{key}'",
                no + 1
            )));
        }
        layer.insert(key, values);
    }
    Ok(layer)
}

pub fn read_layer(path: &Path, allowed: &[&str]) -> Result<Layer, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    parse_text(&text, &path.display().to_string(), allowed)
}

/// Layer built from command-line flags; each flag may also be a list.
pub fn flag_layer(flags: &[(&str, Option<&String>)]) -> Layer {
    flags
        .iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), split_values(v))))
        .collect()
}

pub fn merge(layers: &[Layer]) -> Layer {
    let mut out = Layer::new();
    for l in layers {
        for (k, v) in l {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

/// Every combination of the listed values, keys in sorted order.
pub fn expand(layer: &Layer) -> Vec<BTreeMap<String, String>> {
    let mut combos = vec![BTreeMap::new()];
    for (key, values) in layer {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    combos
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value '{value}' for '{key}'")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool, UsageError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(usage(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Lasp1,
    Lasp2,
    Lasp2h,
    Cp,
    Oracle,
}

impl FromStr for MethodKind {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "lasp1" => MethodKind::Lasp1,
            "lasp2" => MethodKind::Lasp2,
            "lasp2h" => MethodKind::Lasp2h,
            "cp" => MethodKind::Cp,
            "oracle" => MethodKind::Oracle,
            other => {
                return Err(usage(format!(
                    "unknown method '{other}' (expected lasp1, lasp2, lasp2h, cp or oracle)"
                )))
            }
        })
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodKind::Lasp1 => "lasp1",
            MethodKind::Lasp2 => "lasp2",
            MethodKind::Lasp2h => "lasp2h",
            MethodKind::Cp => "cp",
            MethodKind::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(usage(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    }
}

pub const RUN_KEYS: &[&str] = &[
    "method",
    "seq-len",
    "chunks",
    "world",
    "dim",
    "heads",
    "batch",
    "masked",
    "pattern",
    "precision",
    "seed",
    "latency-per-launch",
    "latency-per-byte",
];

pub const DEFAULT_PATTERN: &str = "LLLN";

/// One fully specified run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub method: MethodKind,
    pub seq_len: usize,
    pub chunks: usize,
    pub world: usize,
    pub dim: usize,
    pub heads: usize,
    pub batch: usize,
    pub masked: bool,
    pub pattern: Option<String>,
    pub precision: Precision,
    pub seed: u64,
    pub latency_per_launch: f64,
    pub latency_per_byte: f64,
}

impl RunConfig {
    fn from_map(m: &BTreeMap<String, String>) -> Result<Self, UsageError> {
        let get = |k: &str| m.get(k).map(String::as_str);
        let req = |k: &str| get(k).ok_or_else(|| usage(format!("missing '{k}'")));
        let method: MethodKind = req("method")?.parse()?;
        let chunks = parse_value("chunks", req("chunks")?)?;
        let world = match get("world") {
            Some(w) => parse_value("world", w)?,
            None => chunks,
        };
        let pattern = match method {
            MethodKind::Lasp2h => Some(get("pattern").unwrap_or(DEFAULT_PATTERN).to_string()),
            _ => None,
        };
        let cfg = Self {
            method,
            seq_len: parse_value("seq-len", req("seq-len")?)?,
            chunks,
            world,
            dim: parse_value("dim", req("dim")?)?,
            heads: parse_value("heads", req("heads")?)?,
            batch: parse_value("batch", req("batch")?)?,
            masked: parse_bool("masked", req("masked")?)?,
            pattern,
            precision: req("precision")?.parse()?,
            seed: parse_value("seed", req("seed")?)?,
            latency_per_launch: parse_value("latency-per-launch", req("latency-per-launch")?)?,
            latency_per_byte: parse_value("latency-per-byte", req("latency-per-byte")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let counts = [
            ("seq-len", self.seq_len),
            ("chunks", self.chunks),
            ("world", self.world),
            ("dim", self.dim),
            ("heads", self.heads),
            ("batch", self.batch),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(usage(format!("'{k}' must be positive")));
            }
        }
        if !self.seq_len.is_multiple_of(self.chunks) {
            return Err(usage(format!(
                "chunks T={} does not divide seq-len N={}",
                self.chunks, self.seq_len
            )));
        }
        if !self.world.is_multiple_of(self.chunks) {
            return Err(usage(format!(
                "chunks T={} does not divide world W={}",
                self.chunks, self.world
            )));
        }
        let dp = self.world / self.chunks;
        if !self.batch.is_multiple_of(dp) {
            return Err(usage(format!(
                "batch B={} cannot be split over {dp} data-parallel groups",
                self.batch
            )));
        }
        if let Some(p) = &self.pattern {
            lasp_core::hybrid::parse_pattern(p).map_err(|e| usage(e.to_string()))?;
        }
        for (k, v) in [
            ("latency-per-launch", self.latency_per_launch),
            ("latency-per-byte", self.latency_per_byte),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(usage(format!("'{k}' must be a non-negative number")));
            }
        }
        Ok(())
    }

    pub fn dp(&self) -> usize {
        self.world / self.chunks
    }

    pub fn world_config(&self) -> lasp_core::comm::WorldConfig {
        lasp_core::comm::WorldConfig::new(self.world, self.chunks)
            .expect("validated layout")
            .with_latency(lasp_core::comm::LatencyModel {
                per_launch: self.latency_per_launch,
                per_byte: self.latency_per_byte,
            })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn label(&self) -> String {
        let mut s = format!(
            "{} N={} T={} W={} d={} H={} B={} {} {}",
            self.method,
            self.seq_len,
            self.chunks,
            self.world,
            self.dim,
            self.heads,
            self.batch,
            if self.masked { "masked" } else { "unmasked" },
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
        );
        if let Some(p) = &self.pattern {
            s.push_str(&format!(" pattern={p:?}"));
        }
        s
    }
}

fn single(pairs: &[(&str, &str)]) -> Layer {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), split_values(v)))
        .collect()
}

/// Values used for keys no source sets.
pub fn base_defaults() -> Layer {
    single(&[
        ("method", "lasp2"),
        ("seq-len", "64"),
        ("chunks", "4"),
        ("dim", "16"),
        ("heads", "1"),
        ("batch", "1"),
        ("masked", "true"),
        ("precision", "f64"),
        ("seed", "0"),
        ("latency-per-launch", "10"),
        ("latency-per-byte", "0.0009765625"),
    ])
}

/// The verification grid: every method over N, T, d and both mask settings.
pub fn verify_defaults() -> Layer {
    merge(&[
        base_defaults(),
        single(&[
            ("method", "lasp1, lasp2, lasp2h, cp, oracle"),
            ("seq-len", "8, 64, 256"),
            ("chunks", "1, 2, 4, 8"),
            ("dim", "4, 16"),
            ("masked", "true, false"),
        ]),
    ])
}

/// The benchmark grid: the three SP methods over N and T.
pub fn bench_defaults() -> Layer {
    merge(&[
        base_defaults(),
        single(&[
            ("method", "lasp1, lasp2, cp"),
            ("seq-len", "64, 128"),
            ("chunks", "2, 4, 8"),
        ]),
    ])
}

/// Merges the sources and expands them into validated runs. Nothing is
/// computed unless every run is valid.
pub fn build_runs(defaults: Layer, sources: &[Layer]) -> Result<Vec<RunConfig>, UsageError> {
    let explicit = merge(sources);
    if explicit.contains_key("pattern") {
        let methods = explicit
            .get("method")
            .or_else(|| defaults.get("method"))
            .cloned()
            .unwrap_or_default();
        if !methods.iter().any(|m| m.eq_ignore_ascii_case("lasp2h")) {
            return Err(usage("'pattern' applies only to method lasp2h"));
        }
    }
    let merged = merge(&[defaults, explicit]);
    let mut runs = Vec::new();
    for combo in expand(&merged) {
        let cfg = RunConfig::from_map(&combo)?;
        // The pattern only multiplies lasp2h runs.
        if !runs.contains(&cfg) {
            runs.push(cfg);
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_parsing() {
        let l = parse_text(
            "# c\nseq_len = 8, 16\n\nmethod=lasp2 # trailing\n",
            "t",
            RUN_KEYS,
        )
        .unwrap();
        assert_eq!(l["seq-len"], vec!["8", "16"]);
        assert_eq!(l["method"], vec!["lasp2"]);
        assert!(parse_text("bogus = 1", "t", RUN_KEYS).is_err());
        assert!(parse_text("method", "t", RUN_KEYS).is_err());
        assert!(parse_text("seq-len = 8,", "t", RUN_KEYS).is_err());
    }

    #[test]
    fn grid_expansion_and_override() {
        let grid = parse_text("seq-len = 8, 16\nchunks = 1, 2", "g", RUN_KEYS).unwrap();
        let flags = flag_layer(&[("chunks", Some(&"4".to_string()))]);
        let runs = build_runs(base_defaults(), &[grid, flags]).unwrap();
        assert_eq!(runs.len(), 2);
        assert!(runs.iter().all(|r| r.chunks == 4 && r.world == 4));
    }

    #[test]
    fn invalid_layouts_are_usage_errors() {
        let bad = single(&[("seq-len", "10"), ("chunks", "4")]);
        assert!(build_runs(base_defaults(), &[bad]).is_err());
        let bad = single(&[("world", "6"), ("chunks", "4")]);
        assert!(build_runs(base_defaults(), &[bad]).is_err());
        let bad = single(&[("world", "8"), ("chunks", "4"), ("batch", "1")]);
        assert!(build_runs(base_defaults(), &[bad]).is_err());
        let bad = single(&[("pattern", "LLLN")]);
        assert!(build_runs(base_defaults(), &[bad]).is_err());
        let bad = single(&[("method", "lasp2h"), ("pattern", "LXN")]);
        assert!(build_runs(base_defaults(), &[bad]).is_err());
    }

    #[test]
    fn pattern_applies_to_hybrid_runs_only() {
        let src = single(&[("method", "lasp2, lasp2h"), ("pattern", "LN, NL")]);
        let runs = build_runs(base_defaults(), &[src]).unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs.iter().filter(|r| r.pattern.is_none()).count(), 1);
    }

    #[test]
    fn hash_tracks_content() {
        let runs = build_runs(base_defaults(), &[]).unwrap();
        let mut other = runs[0].clone();
        assert_eq!(runs[0].hash(), other.hash());
        other.seed = 1;
        assert_ne!(runs[0].hash(), other.hash());
        assert_eq!(runs[0].hash().len(), 64);
    }
}
