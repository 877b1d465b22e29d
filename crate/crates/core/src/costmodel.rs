//! Closed-form communication and memory accounting for synchronous data
//! parallelism (DDP) versus parallel low-rank training with merges (LTE).
//!
//! All quantities are parameter counts: communication per synchronization
//! round, memory per device.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Parameters of the full model.
    pub m: u64,
    /// Trainable (adapter) parameters per device.
    pub m_lte: u64,
    pub n_ddp: u64,
    pub n_lte: u64,
    /// Merge period.
    pub t: u64,
    /// Stored size of the frozen base relative to full precision.
    pub q: f64,
}

impl CostInputs {
    pub fn new(m: u64, m_lte: u64, n_ddp: u64, n_lte: u64, t: u64, q: f64) -> Result<Self> {
        let inputs = CostInputs {
            m,
            m_lte,
            n_ddp,
            n_lte,
            t,
            q,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m", self.m),
            ("m_lte", self.m_lte),
            ("n_ddp", self.n_ddp),
            ("n_lte", self.n_lte),
            ("t", self.t),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::config(
                "q",
                format!("must be in (0, 1], got {}", self.q),
            ));
        }
        if self.m_lte > self.m {
            return Err(Error::config("m_lte", "cannot exceed m"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// `N(N−1)M`
    pub comm_allreduce_ddp: f64,
    /// `(1/T) N_lte(N_lte−1) M_lte`: only adapter parameters are exchanged.
    pub comm_allreduce_lte: f64,
    /// `(1/T) N_lte(N_lte−1) M`: the same expression with the full model size.
    pub comm_allreduce_lte_full_m: f64,
    /// `2(N−1)M`
    pub comm_ps_ddp: f64,
    /// `(1/T)((N_lte−1)M_lte + (N_lte−1)qM)`
    pub comm_ps_lte: f64,
    /// `3M`: weights plus two optimizer moments.
    pub mem_ddp_per_device: f64,
    /// `qM + 3M_lte`
    pub mem_lte_per_device: f64,
    /// `M / M_lte`
    pub param_ratio: f64,
    /// `mem_lte / mem_ddp`
    pub memory_ratio: f64,
}

pub fn cost_report(inputs: &CostInputs) -> Result<CostReport> {
    inputs.validate()?;
    let m = inputs.m as f64;
    let m_lte = inputs.m_lte as f64;
    let n_ddp = inputs.n_ddp as f64;
    let n_lte = inputs.n_lte as f64;
    let t = inputs.t as f64;
    let mem_ddp = 3.0 * m;
    let mem_lte = inputs.q * m + 3.0 * m_lte;
    Ok(CostReport {
        comm_allreduce_ddp: n_ddp * (n_ddp - 1.0) * m,
        comm_allreduce_lte: n_lte * (n_lte - 1.0) * m_lte / t,
        comm_allreduce_lte_full_m: n_lte * (n_lte - 1.0) * m / t,
        comm_ps_ddp: 2.0 * (n_ddp - 1.0) * m,
        comm_ps_lte: ((n_lte - 1.0) * m_lte + (n_lte - 1.0) * inputs.q * m) / t,
        mem_ddp_per_device: mem_ddp,
        mem_lte_per_device: mem_lte,
        param_ratio: m / m_lte,
        memory_ratio: mem_lte / mem_ddp,
    })
}

impl CostReport {
    fn rows(&self) -> [(&'static str, f64); 9] {
        [
            ("comm_allreduce_ddp", self.comm_allreduce_ddp),
            ("comm_allreduce_lte", self.comm_allreduce_lte),
            ("comm_allreduce_lte_full_m", self.comm_allreduce_lte_full_m),
            ("comm_ps_ddp", self.comm_ps_ddp),
            ("comm_ps_lte", self.comm_ps_lte),
            ("mem_ddp_per_device", self.mem_ddp_per_device),
            ("mem_lte_per_device", self.mem_lte_per_device),
            ("param_ratio", self.param_ratio),
            ("memory_ratio", self.memory_ratio),
        ]
    }

    /// Aligned text table; counts are optionally converted to bytes.
    pub fn to_text(&self, bytes_per_param: Option<f64>) -> String {
        let mut out = String::new();
        let width = self.rows().iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (key, value) in self.rows() {
            let is_count = !key.ends_with("ratio");
            let shown = match bytes_per_param {
                Some(b) if is_count => format!("{} bytes", value * b),
                _ => value.to_string(),
            };
            out.push_str(&format!("{key:<width$}  {shown}\n"));
        }
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text(None))
    }
}
