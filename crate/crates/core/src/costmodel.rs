//! Closed-form communication cost of the two linear-attention SP methods,
//! and a check of those formulas against what the runtime recorded.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::comm::CommReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lasp1,
    Lasp2,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lasp1" => Ok(Method::Lasp1),
            "lasp2" => Ok(Method::Lasp2),
            other => Err(Error::Config(format!(
                "unknown method '{other}' for the cost model (expected lasp1 or lasp2)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lasp1 => "lasp1",
            Method::Lasp2 => "lasp2",
        })
    }
}

/// Inputs of the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostParams {
    pub world: u64,
    pub sp: u64,
    pub batch: u64,
    pub heads: u64,
    pub dim: u64,
    pub iterations: u64,
    pub element_bytes: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.world,
            self.sp,
            self.batch,
            self.heads,
            self.dim,
            self.iterations,
            self.element_bytes,
        ];
        if fields.contains(&0) {
            return Err(Error::Config(format!(
                "cost parameters must be positive: {self:?}"
            )));
        }
        if !self.world.is_multiple_of(self.sp) {
            return Err(Error::Config(format!(
                "SP size {} does not divide world size {}",
                self.sp, self.world
            )));
        }
        Ok(())
    }
}

/// Communication steps of one forward+backward iteration over `world`
/// ranks: `2(W−1)` around a ring, or two all-gathers.
pub fn comm_steps_per_iteration(method: Method, world: u64) -> Result<u64> {
    if world == 0 {
        return Err(Error::Config("world size must be at least 1".into()));
    }
    Ok(match method {
        Method::Lasp1 => 2 * (world - 1),
        Method::Lasp2 => 2,
    })
}

/// Bytes one step moves per rank: one `d×d` state for every slot,
/// `B·H·d²·element_bytes`. Sequence length does not appear.
pub fn traffic_per_step(p: &CostParams) -> u64 {
    state_param_count(p.batch, p.heads, p.dim) * p.element_bytes
}

/// Elements in one memory state across the batch: `B·H·d²`.
pub fn state_param_count(batch: u64, heads: u64, dim: u64) -> u64 {
    batch * heads * dim * dim
}

/// `steps × traffic_per_step × I`, with steps counted over the SP size.
pub fn total_traffic(method: Method, p: &CostParams) -> Result<u64> {
    p.validate()?;
    Ok(comm_steps_per_iteration(method, p.sp)? * traffic_per_step(p) * p.iterations)
}

/// Outcome of comparing a recorded run with the formulas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerCheck {
    pub expected_steps: u64,
    pub recorded_steps: u64,
    pub expected_bytes_per_step: u64,
    /// Distinct per-rank contribution sizes seen in the recorded steps.
    pub recorded_bytes_per_step: Vec<u64>,
}

impl LedgerCheck {
    pub fn agrees(&self) -> bool {
        self.expected_steps == self.recorded_steps
            && self
                .recorded_bytes_per_step
                .iter()
                .all(|&b| b == self.expected_bytes_per_step)
    }
}

/// Compares a single-iteration run with the formulas. Recorded steps are
/// the world total divided by the number of SP groups; bytes per step are
/// the payload each rank contributed to a gather or sent around the ring.
/// `p.batch` is the batch handled by one SP group.
pub fn check_ledger(method: Method, p: &CostParams, report: &CommReport) -> Result<LedgerCheck> {
    p.validate()?;
    if report.ledgers.is_empty() {
        return Err(Error::Config("run recorded no ranks".into()));
    }
    let mut sizes: Vec<u64> = report
        .ledgers
        .iter()
        .flat_map(|l| {
            l.events
                .iter()
                .filter(|e| e.primitive != crate::comm::Primitive::Recv)
                .map(|e| e.bytes)
        })
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    let recorded_steps = report.totals.communication_steps / (p.world / p.sp);
    Ok(LedgerCheck {
        expected_steps: comm_steps_per_iteration(method, p.sp)?,
        recorded_steps,
        expected_bytes_per_step: traffic_per_step(p),
        recorded_bytes_per_step: sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(b: u64, h: u64, d: u64, eb: u64) -> CostParams {
        CostParams {
            world: 4,
            sp: 4,
            batch: b,
            heads: h,
            dim: d,
            iterations: 1,
            element_bytes: eb,
        }
    }

    #[test]
    fn step_counts() {
        assert_eq!(comm_steps_per_iteration(Method::Lasp2, 64).unwrap(), 2);
        assert_eq!(comm_steps_per_iteration(Method::Lasp1, 64).unwrap(), 126);
        assert_eq!(comm_steps_per_iteration(Method::Lasp1, 1).unwrap(), 0);
        assert!(comm_steps_per_iteration(Method::Lasp1, 0).is_err());
        assert!("ring".parse::<Method>().is_err());
    }

    #[test]
    fn unit_cases() {
        assert_eq!(traffic_per_step(&params(1, 1, 1, 8)), 8);
        assert_eq!(state_param_count(1, 1, 1), 1);
        let mut p = params(1, 1, 1, 1);
        assert_eq!(total_traffic(Method::Lasp2, &p).unwrap(), 2);
        p.iterations = 0;
        assert!(total_traffic(Method::Lasp2, &p).is_err());
    }

    #[test]
    fn small_composition() {
        let mut p = params(2, 4, 8, 8);
        p.iterations = 10;
        // 10 iterations · 2 steps · 2·4·64 elements · 8 bytes
        assert_eq!(
            total_traffic(Method::Lasp2, &p).unwrap(),
            10 * 2 * 2 * 4 * 64 * 8
        );
    }

    #[test]
    fn ring_to_gather_ratio() {
        for w in [2u64, 4, 8, 64] {
            let mut p = params(3, 2, 5, 2);
            p.world = w;
            p.sp = w;
            let a = total_traffic(Method::Lasp1, &p).unwrap();
            let b = total_traffic(Method::Lasp2, &p).unwrap();
            assert_eq!(a, b * (w - 1));
        }
    }
}
