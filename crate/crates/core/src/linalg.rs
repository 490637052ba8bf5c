//! Small dense linear algebra: matrix exponential, spectra, linear solves.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest matrix handed to the dense eigenvalue solver.
pub const MAX_EIGEN_DIM: usize = 512;

const PADE6: [f64; 7] = [
    1.0,
    1.0 / 2.0,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(m)` by scaling and squaring with a diagonal Padé(6, 6) approximant.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::input("matrix exponential of a non-square matrix"));
    }
    let n = m.nrows();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential of a non-finite matrix".into()));
    }
    let norm = inf_norm(m);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m * 0.5f64.powi(squarings);

    let ident = DMatrix::<f64>::identity(n, n);
    let mut power = ident.clone();
    let mut numer = ident.clone() * PADE6[0];
    let mut denom = ident * PADE6[0];
    for (k, c) in PADE6.iter().enumerate().skip(1) {
        power = &power * &scaled;
        numer += &power * *c;
        if k % 2 == 0 {
            denom += &power * *c;
        } else {
            denom -= &power * *c;
        }
    }
    let mut out = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::Numeric("singular Padé denominator".into()))?;
    for _ in 0..squarings {
        out = &out * &out;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential overflowed".into()));
    }
    Ok(out)
}

/// All eigenvalues of a real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if !m.is_square() {
        return Err(Error::input("eigenvalues of a non-square matrix"));
    }
    if m.nrows() > MAX_EIGEN_DIM {
        return Err(Error::TooLarge(format!(
            "{0}x{0} eigenproblem exceeds the dense limit {MAX_EIGEN_DIM}",
            m.nrows()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    let eig = eigenvalues(m)?;
    eig.iter()
        .map(|z| z.re)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or_else(|| Error::input("empty matrix has no spectrum"))
}

/// Solves `m x = rhs` by LU with partial pivoting.
pub fn solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Numeric("singular linear system".into()))
}
