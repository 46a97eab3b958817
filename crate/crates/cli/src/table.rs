//! `lasp costmodel`: closed-form steps and traffic as CSV rows.

use std::collections::BTreeMap;

use serde::Serialize;

use lasp_core::costmodel::{self, CostParams, Method};

use crate::config::{self, merge, parse_value, usage, Layer, UsageError};

pub const COST_KEYS: &[&str] = &[
    "method",
    "world",
    "sp",
    "batch",
    "heads",
    "dim",
    "iterations",
    "element-bytes",
];

pub fn cost_defaults() -> Layer {
    [
        ("method", "lasp1, lasp2"),
        ("world", "1, 8, 64"),
        ("batch", "16"),
        ("heads", "16, 32"),
        ("dim", "2048, 4096"),
        ("iterations", "1"),
        ("element-bytes", "2"),
    ]
    .iter()
    .map(|(k, v)| {
        (
            k.to_string(),
            v.split(',').map(|s| s.trim().to_string()).collect(),
        )
    })
    .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CostRow {
    pub method: String,
    #[serde(rename = "W")]
    pub world: u64,
    #[serde(rename = "T")]
    pub sp: u64,
    #[serde(rename = "B")]
    pub batch: u64,
    #[serde(rename = "H")]
    pub heads: u64,
    pub d: u64,
    #[serde(rename = "I")]
    pub iterations: u64,
    pub element_bytes: u64,
    pub steps: u64,
    pub traffic_per_step_bytes: u64,
    /// Decimal gigabytes, three places.
    pub traffic_per_step_gb: String,
    pub total_traffic_bytes: u64,
    pub state_params: u64,
}

fn row(method: Method, p: &CostParams) -> Result<CostRow, UsageError> {
    let err = |e: lasp_core::Error| usage(e.to_string());
    let per_step = costmodel::traffic_per_step(p);
    Ok(CostRow {
        method: method.to_string(),
        world: p.world,
        sp: p.sp,
        batch: p.batch,
        heads: p.heads,
        d: p.dim,
        iterations: p.iterations,
        element_bytes: p.element_bytes,
        steps: costmodel::comm_steps_per_iteration(method, p.sp).map_err(err)?,
        traffic_per_step_bytes: per_step,
        traffic_per_step_gb: format!("{:.3}", per_step as f64 / 1e9),
        total_traffic_bytes: costmodel::total_traffic(method, p).map_err(err)?,
        state_params: costmodel::state_param_count(p.batch, p.heads, p.dim),
    })
}

fn combo_row(m: &BTreeMap<String, String>) -> Result<CostRow, UsageError> {
    let num = |k: &str| -> Result<u64, UsageError> {
        parse_value(k, m.get(k).ok_or_else(|| usage(format!("missing '{k}'")))?)
    };
    let method: Method = m["method"]
        .parse()
        .map_err(|e: lasp_core::Error| usage(e.to_string()))?;
    let world = num("world")?;
    let p = CostParams {
        world,
        sp: if m.contains_key("sp") {
            num("sp")?
        } else {
            world
        },
        batch: num("batch")?,
        heads: num("heads")?,
        dim: num("dim")?,
        iterations: num("iterations")?,
        element_bytes: num("element-bytes")?,
    };
    p.validate().map_err(|e| usage(e.to_string()))?;
    row(method, &p)
}

/// Rows for every combination in the merged sources.
pub fn build_rows(sources: &[Layer]) -> Result<Vec<CostRow>, UsageError> {
    let merged = merge(&[&[cost_defaults()], sources].concat());
    config::expand(&merged).iter().map(combo_row).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_has_the_reference_rows() {
        let rows = build_rows(&[]).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 2 * 2);
        let r = rows
            .iter()
            .find(|r| r.method == "lasp2" && r.world == 64 && r.heads == 16 && r.d == 2048)
            .unwrap();
        assert_eq!(r.traffic_per_step_bytes, 2_147_483_648);
        assert_eq!(r.traffic_per_step_gb, "2.147");
        assert_eq!(r.state_params, 1_073_741_824);
        assert!(rows
            .iter()
            .filter(|r| r.world == 1 && r.method == "lasp1")
            .all(|r| r.steps == 0));
    }

    #[test]
    fn sp_defaults_to_world_and_must_divide_it() {
        let src: Layer = [("world".to_string(), vec!["8".to_string()])].into();
        assert!(build_rows(std::slice::from_ref(&src))
            .unwrap()
            .iter()
            .all(|r| r.sp == 8));
        let mut bad = src;
        bad.insert("sp".into(), vec!["3".into()]);
        assert!(build_rows(&[bad]).is_err());
    }
}
