//! Complex linear-algebra kernels.
//!
//! The LMMSE weights `(Ĥ^H Ĥ + σ² I)^-1 Ĥ^H` are obtained without an explicit
//! inverse: QR-factor the extended matrix `B = [Ĥ ; σ I]`, split `Q` into its
//! top `M×K` block `Q1` and bottom `K×K` block `Q2`, and since `Q2 R = σ I`
//! the weights collapse to `Q2 Q1^H / σ`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `[Ĥ ; σ·I_K]`, an `(M+K)×K` matrix with full column rank whenever σ > 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedChannelMatrix {
    matrix: CMatrix,
    top_rows: usize,
}

impl ExtendedChannelMatrix {
    pub fn new(hhat: &CMatrix, sigma: f64) -> Self {
        let (m, k) = hhat.shape();
        let mut matrix = CMatrix::zeros(m + k, k);
        matrix.view_mut((0, 0), (m, k)).copy_from(hhat);
        for i in 0..k {
            matrix[(m + i, i)] = Complex64::new(sigma, 0.0);
        }
        Self {
            matrix,
            top_rows: m,
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn top_rows(&self) -> usize {
        self.top_rows
    }
}

/// Thin QR factors with `Q` split at the channel/regularizer boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct QrPair {
    pub q: CMatrix,
    pub r: CMatrix,
    top_rows: usize,
}

impl QrPair {
    pub fn q1(&self) -> CMatrix {
        self.q.rows(0, self.top_rows).into_owned()
    }

    pub fn q2(&self) -> CMatrix {
        let k = self.q.ncols();
        self.q.rows(self.top_rows, k).into_owned()
    }
}

/// Modified Gram-Schmidt QR of the extended channel matrix.
///
/// Each new column is orthogonalized against the already-finished columns
/// one at a time, using the partially reduced vector at every step. `R`
/// comes out with a real, positive diagonal.
pub fn gram_schmidt_qr(b: &ExtendedChannelMatrix) -> Result<QrPair> {
    let (q, r) = modified_gram_schmidt(b.matrix())?;
    Ok(QrPair {
        q,
        r,
        top_rows: b.top_rows,
    })
}

pub(crate) fn modified_gram_schmidt(a: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    let (rows, cols) = a.shape();
    let mut q = a.clone();
    let mut r = CMatrix::zeros(cols, cols);
    let scale = a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for j in 0..cols {
        for i in 0..j {
            let mut dot = ZERO;
            for row in 0..rows {
                dot += q[(row, i)].conj() * q[(row, j)];
            }
            r[(i, j)] = dot;
            for row in 0..rows {
                let qi = q[(row, i)];
                q[(row, j)] -= dot * qi;
            }
        }
        let norm = (0..rows).map(|row| q[(row, j)].norm_sqr()).sum::<f64>().sqrt();
        if norm <= 1e-13 * scale {
            return Err(Error::RankDeficient { column: j });
        }
        r[(j, j)] = Complex64::new(norm, 0.0);
        let inv = 1.0 / norm;
        for row in 0..rows {
            q[(row, j)] *= inv;
        }
    }
    Ok((q, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmmseMode {
    /// `Q2 Q1^H / σ` from the QR factorization.
    Qr,
    /// Explicit inverse of the regularized normal matrix.
    Direct,
}

/// LMMSE weights `W` (`K×M`) for the estimated channel `hhat` (`M×K`).
pub fn lmmse_weights(hhat: &CMatrix, sigma: f64, mode: LmmseMode) -> Result<CMatrix> {
    match mode {
        LmmseMode::Qr => {
            if !(sigma > 0.0) {
                return Err(Error::Singular);
            }
            let qr = gram_schmidt_qr(&ExtendedChannelMatrix::new(hhat, sigma))?;
            Ok(qr.q2() * qr.q1().adjoint() / Complex64::new(sigma, 0.0))
        }
        LmmseMode::Direct => {
            let k = hhat.ncols();
            let gram = hhat.adjoint() * hhat
                + CMatrix::identity(k, k) * Complex64::new(sigma * sigma, 0.0);
            let inv = gram.try_inverse().ok_or(Error::Singular)?;
            Ok(inv * hhat.adjoint())
        }
    }
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn relative_frobenius(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm() / b.norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DftDirection {
    Forward,
    Inverse,
}

/// Unitary DFT of one fixed power-of-two length (`1/√N` on both sides).
#[derive(Clone)]
pub struct UnitaryDft {
    len: usize,
    scale: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for UnitaryDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnitaryDft").field("len", &self.len).finish()
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, UnitaryDft>> = RefCell::new(HashMap::new());
}

impl UnitaryDft {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(len));
        }
        PLANS.with(|plans| {
            Ok(plans
                .borrow_mut()
                .entry(len)
                .or_insert_with(|| {
                    let mut planner = FftPlanner::new();
                    UnitaryDft {
                        len,
                        scale: 1.0 / (len as f64).sqrt(),
                        forward: planner.plan_fft_forward(len),
                        inverse: planner.plan_fft_inverse(len),
                    }
                })
                .clone())
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn process(&self, buf: &mut [Complex64], direction: DftDirection) {
        debug_assert_eq!(buf.len(), self.len);
        match direction {
            DftDirection::Forward => self.forward.process(buf),
            DftDirection::Inverse => self.inverse.process(buf),
        }
        for v in buf.iter_mut() {
            *v *= self.scale;
        }
    }
}

pub fn unitary_dft(x: &[Complex64], direction: DftDirection) -> Result<Vec<Complex64>> {
    let dft = UnitaryDft::new(x.len())?;
    let mut buf = x.to_vec();
    dft.process(&mut buf, direction);
    Ok(buf)
}
