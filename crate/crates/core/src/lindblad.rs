//! Unconditional evolution under the Lindblad master equation
//!
//! ```text
//! dρ/dt = -i[H, ρ] + Σ_j κ_j D[ĉ_j]ρ
//! ```
//!
//! integrated with classical RK4 at the trajectory time step.

use crate::error::{Error, Result};
use crate::graph::CycleGraph;
use crate::monitoring::MonitoringSetup;
use crate::qcore::{c, commutator, uniform_superposition, CMatrix, DensityMatrix, HermitianOperator, I};

fn check(c_op: &HermitianOperator, rho: &CMatrix) -> Result<()> {
    if c_op.dim() != rho.nrows() {
        return Err(Error::DimensionMismatch {
            expected: c_op.dim(),
            found: rho.nrows(),
        });
    }
    Ok(())
}

pub(crate) fn dissipator_raw(cm: &CMatrix, rho: &CMatrix) -> CMatrix {
    let cdag = cm.adjoint();
    let cdc = &cdag * cm;
    cm * rho * &cdag - (&cdc * rho + rho * &cdc) * c(0.5)
}

pub(crate) fn measurement_superop_raw(cm: &CMatrix, rho: &CMatrix) -> CMatrix {
    let cdag = cm.adjoint();
    let mean = ((cm + &cdag) * rho).trace();
    cm * rho + rho * &cdag - rho * mean
}

/// `D[ĉ]ρ = ĉρĉ† - (ĉ†ĉρ + ρĉ†ĉ)/2`
pub fn dissipator(c_op: &HermitianOperator, rho: &DensityMatrix) -> Result<CMatrix> {
    check(c_op, rho.matrix())?;
    Ok(dissipator_raw(c_op.matrix(), rho.matrix()))
}

/// `H[ĉ]ρ = ĉρ + ρĉ† - Tr[(ĉ + ĉ†)ρ]ρ`
pub fn measurement_superop(c_op: &HermitianOperator, rho: &DensityMatrix) -> Result<CMatrix> {
    check(c_op, rho.matrix())?;
    Ok(measurement_superop_raw(c_op.matrix(), rho.matrix()))
}

/// Right-hand side of the master equation.
pub fn lindblad_rhs(rho: &CMatrix, h_s: &HermitianOperator, m: &MonitoringSetup) -> CMatrix {
    let mut out = commutator(h_s.matrix(), rho) * (-I);
    for ch in m.channels() {
        if ch.kappa() != 0.0 {
            out += dissipator_raw(ch.op().matrix(), rho) * c(ch.kappa());
        }
    }
    out
}

/// One RK4 step; the result is re-Hermitized.
pub fn lindblad_step(rho: &DensityMatrix, h_s: &HermitianOperator, m: &MonitoringSetup, dt: f64) -> Result<DensityMatrix> {
    if h_s.dim() != rho.dim() || m.dim() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            found: h_s.dim(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let r = rho.matrix();
    let k1 = lindblad_rhs(r, h_s, m);
    let k2 = lindblad_rhs(&(r + &k1 * c(dt / 2.0)), h_s, m);
    let k3 = lindblad_rhs(&(r + &k2 * c(dt / 2.0)), h_s, m);
    let k4 = lindblad_rhs(&(r + &k3 * c(dt)), h_s, m);
    let next = r + (k1 + k2 * c(2.0) + k3 * c(2.0) + k4) * c(dt / 6.0);
    Ok(DensityMatrix::from_raw(next))
}

/// Evolves `rho0` for `steps` RK4 steps and returns every intermediate state,
/// `steps + 1` in total.
pub fn evolve(
    rho0: &DensityMatrix,
    h_s: &HermitianOperator,
    m: &MonitoringSetup,
    dt: f64,
    steps: usize,
) -> Result<Vec<DensityMatrix>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(rho0.clone());
    let mut rho = rho0.clone();
    for _ in 0..steps {
        rho = lindblad_step(&rho, h_s, m, dt)?;
        out.push(rho.clone());
    }
    Ok(out)
}

/// `K̂ = Σ_k k |k⟩⟨k|`
pub fn index_jump_operator(g: &CycleGraph) -> HermitianOperator {
    let diag: Vec<f64> = (0..g.n()).map(|k| k as f64).collect();
    HermitianOperator::from_real_diagonal(&diag)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationSample {
    pub t: f64,
    pub populations: Vec<f64>,
    pub max_offdiag: f64,
}

fn max_offdiag(rho: &DensityMatrix) -> f64 {
    let m = rho.matrix();
    let n = rho.dim();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                worst = worst.max(m[(i, j)].norm());
            }
        }
    }
    worst
}

/// Position-basis populations of the unconditional state started from the
/// uniform superposition, one sample per step including `t = 0`.
pub fn populations_series(
    g: &CycleGraph,
    h_s: &HermitianOperator,
    m: &MonitoringSetup,
    dt: f64,
    steps: usize,
) -> Result<Vec<PopulationSample>> {
    let mut rho = uniform_superposition(g.n())?.projector();
    let mut out = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        if i > 0 {
            rho = lindblad_step(&rho, h_s, m, dt)?;
        }
        out.push(PopulationSample {
            t: i as f64 * dt,
            populations: rho.populations(),
            max_offdiag: max_offdiag(&rho),
        });
    }
    Ok(out)
}
