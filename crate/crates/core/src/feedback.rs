//! Control operators, the feedback Hamiltonian `H_fb(θ) = Σ_k θ_k ĥ_k` and
//! the combined measurement-plus-feedback step.
//!
//! Couplings are measured in units of the hopping rate. Within one time step
//! the measurement update comes first and the feedback unitary
//! `exp(-i H_fb dt)` is applied right after it, with no delay.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CycleGraph;
use crate::monitoring::{conditional_pure_update, kraus_milstein, sample_increments, MeasurementStep, MonitoringSetup};
use crate::optimize::Controller;
use crate::qcore::{check_dim, fidelity_to_target, hermitian_exp, CMatrix, HermitianOperator, StateVector, UnitaryMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Hopping,
    OnSite,
}

/// A family of real control operators with unit entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSet {
    kind: ControlKind,
    dim: usize,
    operators: Vec<HermitianOperator>,
    // Nonzero (row, col) positions of each operator; all values are 1.
    support: Vec<Vec<(usize, usize)>>,
}

impl ControlSet {
    /// Validates the operators against the structure implied by `kind`.
    pub fn from_operators(kind: ControlKind, operators: Vec<HermitianOperator>) -> Result<Self> {
        let dim = operators
            .first()
            .map(|o| o.dim())
            .ok_or_else(|| Error::InvalidParameter("empty control set".into()))?;
        let mut support = Vec::with_capacity(operators.len());
        for op in &operators {
            check_dim(dim, op.dim())?;
            if !op.is_real() {
                return Err(Error::InvalidParameter("control operators must be real".into()));
            }
            let m = op.real_part();
            let mut entries = Vec::new();
            for i in 0..dim {
                for j in 0..dim {
                    let v = m[(i, j)];
                    if v == 1.0 {
                        entries.push((i, j));
                    } else if v != 0.0 {
                        return Err(Error::InvalidParameter(format!("control entry {v} at ({i}, {j}) is not 0 or 1")));
                    }
                }
            }
            let ok = match kind {
                ControlKind::Hopping => entries.len() == 2 && entries.iter().all(|&(i, j)| i != j),
                ControlKind::OnSite => entries.len() == 1 && entries[0].0 == entries[0].1,
            };
            if !ok {
                return Err(Error::InvalidParameter(format!("operator does not match {kind:?} structure")));
            }
            support.push(entries);
        }
        Ok(Self {
            kind,
            dim,
            operators,
            support,
        })
    }

    pub fn kind(&self) -> ControlKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn operators(&self) -> &[HermitianOperator] {
        &self.operators
    }

    pub(crate) fn support(&self, k: usize) -> &[(usize, usize)] {
        &self.support[k]
    }

    /// `Σ_k w_k ĥ_k` as a real matrix.
    pub(crate) fn real_combination(&self, w: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim, self.dim);
        for (k, &wk) in w.iter().enumerate() {
            for &(i, j) in &self.support[k] {
                g[(i, j)] += wk;
            }
        }
        g
    }
}

/// `ĥ_k = |k⟩⟨k+1| + |k+1⟩⟨k|` for every edge of the cycle, including the
/// closing edge `(n-1, 0)`.
pub fn hopping_controls(g: &CycleGraph) -> ControlSet {
    let n = g.n();
    let ops = (0..n)
        .map(|k| {
            let mut m = DMatrix::zeros(n, n);
            m[(k, g.next(k))] = 1.0;
            m[(g.next(k), k)] = 1.0;
            HermitianOperator::from_real(&m).expect("symmetric by construction")
        })
        .collect();
    ControlSet::from_operators(ControlKind::Hopping, ops).expect("valid hopping set")
}

/// On-site projectors `|k⟩⟨k|`.
pub fn onsite_controls(g: &CycleGraph) -> ControlSet {
    let n = g.n();
    let ops = (0..n)
        .map(|k| {
            let mut d = vec![0.0; n];
            d[k] = 1.0;
            HermitianOperator::from_real_diagonal(&d)
        })
        .collect();
    ControlSet::from_operators(ControlKind::OnSite, ops).expect("valid on-site set")
}

pub fn controls(g: &CycleGraph, kind: ControlKind) -> ControlSet {
    match kind {
        ControlKind::Hopping => hopping_controls(g),
        ControlKind::OnSite => onsite_controls(g),
    }
}

/// One real coupling per control operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackCouplings {
    theta: Vec<f64>,
}

impl FeedbackCouplings {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if let Some(bad) = theta.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite coupling {bad}")));
        }
        Ok(Self { theta })
    }

    pub fn zeros(len: usize) -> Self {
        Self { theta: vec![0.0; len] }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.theta.iter().all(|&t| t == 0.0)
    }
}

fn check_len(cs: &ControlSet, theta: &FeedbackCouplings) -> Result<()> {
    if cs.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: cs.len(),
            found: theta.len(),
        });
    }
    Ok(())
}

pub fn feedback_hamiltonian(cs: &ControlSet, theta: &FeedbackCouplings) -> Result<HermitianOperator> {
    check_len(cs, theta)?;
    let m = cs.real_combination(theta.theta());
    Ok(HermitianOperator::from_real(&m).expect("symmetric by construction"))
}

/// `exp(-i H_fb(θ) dt)`.
pub fn feedback_unitary(cs: &ControlSet, theta: &FeedbackCouplings, dt: f64) -> Result<UnitaryMatrix> {
    if theta.is_zero() {
        check_len(cs, theta)?;
        return Ok(UnitaryMatrix::identity(cs.dim()));
    }
    hermitian_exp(&feedback_hamiltonian(cs, theta)?, dt)
}

pub fn apply_feedback(s: &StateVector, cs: &ControlSet, theta: &FeedbackCouplings, dt: f64) -> Result<StateVector> {
    check_dim(cs.dim(), s.dim())?;
    if theta.is_zero() {
        check_len(cs, theta)?;
        return Ok(s.clone());
    }
    feedback_unitary(cs, theta, dt)?.apply(s)
}

/// Result of one measurement-plus-feedback step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: StateVector,
    pub theta: FeedbackCouplings,
    pub measurement: MeasurementStep,
    /// Fidelity with the target after feedback.
    pub reward: f64,
    /// Fidelity of the conditional state before feedback.
    pub reward_without_feedback: f64,
    /// Second derivative of the reward along the single-coupling family;
    /// only the analytic strategy reports it.
    pub curvature: Option<f64>,
    pub applied: bool,
    pub converged: bool,
    pub unitary_defect: f64,
}

/// Full pipeline for one time step with fresh innovations drawn from `rng`.
pub fn feedback_step<R: Rng + ?Sized>(
    s: &StateVector,
    h_s: &HermitianOperator,
    m: &MonitoringSetup,
    ctrl: &Controller,
    warm: &FeedbackCouplings,
    rng: &mut R,
) -> Result<StepOutcome> {
    let step = sample_increments(s, m, ctrl.dt(), rng)?;
    feedback_step_with(s, h_s, m, ctrl, warm, step)
}

/// Same as [`feedback_step`] with a given measurement record.
pub fn feedback_step_with(
    s: &StateVector,
    h_s: &HermitianOperator,
    m: &MonitoringSetup,
    ctrl: &Controller,
    warm: &FeedbackCouplings,
    step: MeasurementStep,
) -> Result<StepOutcome> {
    let dt = ctrl.dt();
    let kraus = kraus_milstein(h_s, m, dt, &step)?;
    let post = conditional_pure_update(s, &kraus)?;
    let target = ctrl.target();
    let reward_without_feedback = fidelity_to_target(&post, target)?;
    let decision = ctrl.decide(s, &post, &step, warm)?;
    let (state, unitary_defect) = if decision.theta.is_zero() {
        (post, 0.0)
    } else {
        let u = feedback_unitary(ctrl.controls(), &decision.theta, dt)?;
        (u.apply(&post)?, u.defect())
    };
    let reward = fidelity_to_target(&state, target)?;
    Ok(StepOutcome {
        state,
        theta: decision.theta,
        measurement: step,
        reward,
        reward_without_feedback,
        curvature: decision.curvature,
        applied: decision.applied,
        converged: decision.converged,
        unitary_defect,
    })
}

/// `⟨0|(H_s + H_fb)|1⟩`-style matrix element of the combined generator.
pub fn combined_element(h_s: &HermitianOperator, cs: &ControlSet, theta: &FeedbackCouplings, i: usize, j: usize) -> Result<f64> {
    let h_fb = feedback_hamiltonian(cs, theta)?;
    check_dim(h_s.dim(), h_fb.dim())?;
    let m: CMatrix = h_s.matrix() + h_fb.matrix();
    Ok(m[(i, j)].re)
}
