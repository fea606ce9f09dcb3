//! Continuous homodyne monitoring of the walker position.
//!
//! Each channel couples a Hermitian jump operator `ĉ_j` with rate `κ_j` and
//! detection efficiency `η_j`. One finite step of length `Δt` produces the
//! photocurrent increments
//!
//! ```text
//! Δy_j = √(η_j κ_j) ⟨ĉ_j + ĉ_j†⟩ Δt + ΔW_j,      ΔW_j ~ N(0, Δt)
//! ```
//!
//! and the state is propagated with the Kraus operator
//!
//! ```text
//! M = I - i H Δt - Σ_j [ κ_j/2 ĉ_j†ĉ_j Δt - √(η_j κ_j) ĉ_j Δy_j - η_j κ_j/2 ĉ_j² (Δy_j² - Δt) ]
//! ```
//!
//! whose last term is the Milstein correction for finite `Δt`.
//!
//! Gaussian increments are `√Δt · z` with `z` drawn by the ziggurat sampler
//! of `rand_distr::StandardNormal`. Together with the ChaCha8 streams set up
//! in [`crate::ensemble`] this fixes every random number of a run.


use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{node_coordinates, CycleGraph};
use crate::qcore::{c, CMatrix, DensityMatrix, HermitianOperator, StateVector, C64, I};

/// Smallest norm (or trace) a conditional update may produce.
pub const COLLAPSE_TOL: f64 = 1e-14;

#[derive(Clone, Debug)]
pub struct Channel {
    op: HermitianOperator,
    kappa: f64,
    eta: f64,
    op_sq: CMatrix,
}

impl Channel {
    pub fn new(op: HermitianOperator, kappa: f64, eta: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidParameter(format!("rate must be non-negative, got {kappa}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidParameter(format!("efficiency must lie in [0, 1], got {eta}")));
        }
        let op_sq = op.matrix() * op.matrix();
        Ok(Self { op, kappa, eta, op_sq })
    }

    pub fn op(&self) -> &HermitianOperator {
        &self.op
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `ĉ†ĉ`, which equals `ĉ²` for a Hermitian jump operator.
    pub fn op_sq(&self) -> &CMatrix {
        &self.op_sq
    }
}

/// The set of monitored channels.
#[derive(Clone, Debug)]
pub struct MonitoringSetup {
    dim: usize,
    channels: Vec<Channel>,
}

impl MonitoringSetup {
    pub fn new(dim: usize, channels: Vec<Channel>) -> Result<Self> {
        for ch in &channels {
            if ch.op.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: ch.op.dim(),
                });
            }
        }
        Ok(Self { dim, channels })
    }

    /// The `x̂`, `ŷ` position channels with a shared rate and efficiency.
    pub fn position(g: &CycleGraph, kappa: f64, eta: f64) -> Result<Self> {
        let (x, y) = position_jump_operators(g);
        Self::new(g.n(), vec![Channel::new(x, kappa, eta)?, Channel::new(y, kappa, eta)?])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// Innovations `ΔW_j` and photocurrent increments `Δy_j` of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementStep {
    pub dw: Vec<f64>,
    pub dy: Vec<f64>,
}

/// Diagonal operators whose eigenvalues are the node coordinates on the unit
/// circle.
pub fn position_jump_operators(g: &CycleGraph) -> (HermitianOperator, HermitianOperator) {
    let (xs, ys): (Vec<f64>, Vec<f64>) = node_coordinates(g).into_iter().unzip();
    (
        HermitianOperator::from_real_diagonal(&xs),
        HermitianOperator::from_real_diagonal(&ys),
    )
}

/// Assembles the photocurrent increments for given innovations.
pub fn record_increments(s: &StateVector, m: &MonitoringSetup, dt: f64, dw: Vec<f64>) -> Result<MeasurementStep> {
    if s.dim() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            found: s.dim(),
        });
    }
    if dw.len() != m.len() {
        return Err(Error::DimensionMismatch {
            expected: m.len(),
            found: dw.len(),
        });
    }
    let amps = s.amplitudes();
    let dy = m
        .channels
        .iter()
        .zip(&dw)
        .map(|(ch, &w)| {
            // ⟨ĉ + ĉ†⟩ = 2⟨ĉ⟩ for Hermitian ĉ
            let mean = 2.0 * amps.dotc(&(ch.op.matrix() * amps)).re;
            (ch.eta * ch.kappa).sqrt() * mean * dt + w
        })
        .collect();
    Ok(MeasurementStep { dw, dy })
}

/// Draws independent `ΔW_j ~ N(0, Δt)` and assembles `Δy_j`.
pub fn sample_increments<R: Rng + ?Sized>(
    s: &StateVector,
    m: &MonitoringSetup,
    dt: f64,
    rng: &mut R,
) -> Result<MeasurementStep> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let sd = dt.sqrt();
    let dw = (0..m.len())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect();
    record_increments(s, m, dt, dw)
}

/// Milstein-corrected Kraus operator for one measurement step.
pub fn kraus_milstein(h_s: &HermitianOperator, m: &MonitoringSetup, dt: f64, step: &MeasurementStep) -> Result<CMatrix> {
    let n = m.dim();
    if h_s.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: h_s.dim(),
        });
    }
    if step.dy.len() != m.len() {
        return Err(Error::DimensionMismatch {
            expected: m.len(),
            found: step.dy.len(),
        });
    }
    let mut k = CMatrix::identity(n, n) - h_s.matrix() * (I * dt);
    for (ch, &dy) in m.channels.iter().zip(&step.dy) {
        let rate = ch.eta * ch.kappa;
        // c†c and c² coincide for Hermitian c
        let sq_coeff = -0.5 * ch.kappa * dt + 0.5 * rate * (dy * dy - dt);
        k += ch.op.matrix() * c(rate.sqrt() * dy);
        k += &ch.op_sq * c(sq_coeff);
    }
    Ok(k)
}

/// `M|ψ⟩ / ‖M|ψ⟩‖`
pub fn conditional_pure_update(s: &StateVector, kraus: &CMatrix) -> Result<StateVector> {
    if kraus.ncols() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            found: kraus.ncols(),
        });
    }
    StateVector::from_unnormalized(kraus * s.amplitudes())
}

/// `(MρM† + Σ_j (1-η_j) ĉ_j ρ ĉ_j† Δt) / Tr[·]`
pub fn conditional_mixed_update(
    rho: &DensityMatrix,
    kraus: &CMatrix,
    m: &MonitoringSetup,
    dt: f64,
) -> Result<DensityMatrix> {
    if kraus.ncols() != rho.dim() || m.dim() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            found: kraus.ncols(),
        });
    }
    let r = rho.matrix();
    let mut num = kraus * r * kraus.adjoint();
    for ch in &m.channels {
        let lost = 1.0 - ch.eta;
        if lost > 0.0 {
            let cm = ch.op.matrix();
            num += cm * r * cm.adjoint() * c(lost * ch.kappa * dt);
        }
    }
    let tr: C64 = num.trace();
    if !(tr.re > COLLAPSE_TOL) {
        return Err(Error::DegenerateMeasurement { norm: tr.re });
    }
    Ok(DensityMatrix::from_raw(num * c(1.0 / tr.re)))
}
