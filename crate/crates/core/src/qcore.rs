//! Dense complex linear algebra for small Hilbert spaces.
//!
//! All types wrap `nalgebra` dynamic matrices. Dimensions in this crate stay
//! well below 64, so everything is dense and exponentials go through the
//! Hermitian eigendecomposition.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Maximum deviation from Hermiticity or unitarity.
pub const UNITARY_TOL: f64 = 1e-12;
/// Maximum deviation of norms and traces from one.
pub const NORM_TOL: f64 = 1e-10;
/// Most negative eigenvalue tolerated in a density matrix.
pub const POSITIVITY_TOL: f64 = -1e-9;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

pub(crate) const I: C64 = C64::new(0.0, 1.0);

pub(crate) fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Largest entrywise modulus of `a - a†`.
pub fn hermiticity_defect(a: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Largest entrywise modulus of `u†u - 1`.
pub fn unitarity_defect(u: &CMatrix) -> f64 {
    let prod = u.adjoint() * u;
    let mut worst = 0.0_f64;
    for i in 0..prod.nrows() {
        for j in 0..prod.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((prod[(i, j)] - c(target)).norm());
        }
    }
    worst
}

pub(crate) fn hermitize(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()) * c(0.5)
}

pub(crate) fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// A normalized pure state in the position basis.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    amps: CVector,
}

impl StateVector {
    /// Normalizes `amps`. Fails when the norm is below `1e-14`.
    pub fn from_unnormalized(amps: CVector) -> Result<Self> {
        let norm = amps.norm();
        if !(norm > 1e-14) || !norm.is_finite() {
            return Err(Error::DegenerateMeasurement { norm });
        }
        Ok(Self {
            amps: amps.unscale(norm),
        })
    }

    pub fn from_real(amps: &[f64]) -> Result<Self> {
        Self::from_unnormalized(CVector::from_iterator(amps.len(), amps.iter().map(|&x| c(x))))
    }

    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::IndexOutOfRange { index: k, dim });
        }
        let mut amps = CVector::zeros(dim);
        amps[k] = c(1.0);
        Ok(Self { amps })
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.norm()
    }

    /// `|ψ⟩⟨ψ|`
    pub fn projector(&self) -> DensityMatrix {
        DensityMatrix {
            rho: &self.amps * self.amps.adjoint(),
        }
    }

    /// Probabilities `|a_k|²` for every node.
    pub fn populations(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }
}

/// `|ψ0⟩ = Σ_k |k⟩ / √n`
pub fn uniform_superposition(n: usize) -> Result<StateVector> {
    if n == 0 {
        return Err(Error::InvalidParameter("state dimension must be positive".into()));
    }
    let amp = c(1.0 / (n as f64).sqrt());
    Ok(StateVector {
        amps: CVector::from_element(n, amp),
    })
}

/// `|⟨target|ψ⟩|²`
pub fn fidelity_to_target(s: &StateVector, target: usize) -> Result<f64> {
    if target >= s.dim() {
        return Err(Error::IndexOutOfRange {
            index: target,
            dim: s.dim(),
        });
    }
    Ok(s.amps[target].norm_sqr())
}

/// `⟨ψ|op|ψ⟩`, with the (round-off) imaginary residue discarded.
pub fn expectation(s: &StateVector, op: &HermitianOperator) -> Result<f64> {
    check_dim(op.dim(), s.dim())?;
    Ok(s.amps.dotc(&(op.matrix() * &s.amps)).re)
}

/// A density matrix. Hermiticity is restored exactly on every construction
/// from raw data.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    rho: CMatrix,
}

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(rho: CMatrix) -> Result<Self> {
        if !rho.is_square() {
            return Err(Error::DimensionMismatch {
                expected: rho.nrows(),
                found: rho.ncols(),
            });
        }
        let defect = hermiticity_defect(&rho);
        if defect > UNITARY_TOL {
            return Err(Error::NotHermitian(defect));
        }
        let out = Self {
            rho: hermitize(&rho),
        };
        out.check_invariants()?;
        Ok(out)
    }

    pub(crate) fn from_raw(rho: CMatrix) -> Self {
        Self {
            rho: hermitize(&rho),
        }
    }

    pub fn maximally_mixed(n: usize) -> Self {
        Self {
            rho: CMatrix::identity(n, n) * c(1.0 / n as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.rho[(k, k)].re).collect()
    }

    /// Smallest eigenvalue of the (Hermitian) matrix.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let eig = SymmetricEigen::try_new(self.rho.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or(Error::Eigensolver)?;
        Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    pub fn check_invariants(&self) -> Result<()> {
        let tr = self.trace();
        if (tr - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidParameter(format!("density matrix trace {tr}")));
        }
        let min = self.min_eigenvalue()?;
        if min < POSITIVITY_TOL {
            return Err(Error::InvalidParameter(format!(
                "density matrix eigenvalue {min:e} below tolerance"
            )));
        }
        Ok(())
    }
}

/// A Hermitian matrix, stored exactly Hermitian.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator {
    m: CMatrix,
}

impl HermitianOperator {
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let defect = hermiticity_defect(&m);
        if defect > UNITARY_TOL {
            return Err(Error::NotHermitian(defect));
        }
        Ok(Self { m: hermitize(&m) })
    }

    pub fn from_real(m: &DMatrix<f64>) -> Result<Self> {
        Self::new(m.map(c))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = CMatrix::zeros(n, n);
        for (k, &d) in diag.iter().enumerate() {
            m[(k, k)] = c(d);
        }
        Self { m }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            m: CMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            m: CMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    /// `true` when every entry has zero imaginary part.
    pub fn is_real(&self) -> bool {
        self.m.iter().all(|z| z.im == 0.0)
    }

    pub fn real_part(&self) -> DMatrix<f64> {
        self.m.map(|z| z.re)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            m: &self.m * c(factor),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self {
            m: &self.m + &other.m,
        })
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let mut vals: Vec<f64> = if self.is_real() {
            real_symmetric_eigen(&self.real_part())?.0.iter().cloned().collect()
        } else {
            SymmetricEigen::try_new(self.m.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
                .ok_or(Error::Eigensolver)?
                .eigenvalues
                .iter()
                .cloned()
                .collect()
        };
        vals.sort_by(|a, b| a.total_cmp(b));
        Ok(vals)
    }
}

/// A unitary matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryMatrix {
    u: CMatrix,
}

impl UnitaryMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            u: CMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.u
    }

    pub fn defect(&self) -> f64 {
        unitarity_defect(&self.u)
    }

    pub fn apply(&self, s: &StateVector) -> Result<StateVector> {
        check_dim(self.dim(), s.dim())?;
        // Re-normalize to keep round-off from accumulating over long runs.
        StateVector::from_unnormalized(&self.u * s.amplitudes())
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self { u: &self.u * &other.u })
    }
}

/// Eigendecomposition of a real symmetric matrix: `(values, vectors)` with the
/// eigenvectors stored as columns.
pub fn real_symmetric_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::try_new(m.clone(), EIGEN_EPS, EIGEN_MAX_ITER).ok_or(Error::Eigensolver)?;
    Ok((eig.eigenvalues, eig.eigenvectors))
}

/// `exp(-i · scale · op)` through the eigendecomposition of `op`.
pub fn hermitian_exp(op: &HermitianOperator, scale: f64) -> Result<UnitaryMatrix> {
    let n = op.dim();
    let u = if op.is_real() {
        let (vals, vecs) = real_symmetric_eigen(&op.real_part())?;
        let mut u = CMatrix::zeros(n, n);
        for m in 0..n {
            let phase = C64::from_polar(1.0, -scale * vals[m]);
            for i in 0..n {
                let vi = vecs[(i, m)] * phase;
                for j in 0..n {
                    u[(i, j)] += vi * vecs[(j, m)];
                }
            }
        }
        u
    } else {
        let eig = SymmetricEigen::try_new(op.matrix().clone(), EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or(Error::Eigensolver)?;
        let phases = CMatrix::from_diagonal(&eig.eigenvalues.map(|l| C64::from_polar(1.0, -scale * l)));
        &eig.eigenvectors * phases * eig.eigenvectors.adjoint()
    };
    Ok(UnitaryMatrix { u })
}
