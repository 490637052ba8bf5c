//! Mode-indexed vector fields, their flows and the dissipativity audits.
//!
//! Affine fields `F(x) = Mx + v` are flowed exactly: in closed form when `M`
//! is a multiple of the identity, through the exponential of the augmented
//! matrix `[[M, v], [0, 0]]` when `d <= 8`. Everything else goes through
//! fixed-step classical RK4 with a step-halving error check.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::open_uniform;

/// Largest dimension flowed through the augmented matrix exponential.
pub const MAX_EXACT_AFFINE_DIM: usize = 8;

/// Opaque field evaluation `out = F(x)`.
pub type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum FieldKind {
    /// `F(x) = matrix * x + offset`.
    Affine {
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
    },
    General(FieldFn),
}

/// `F(x) = rate * x + offset`, the case flowed in closed form.
#[derive(Debug, Clone, PartialEq)]
struct ScalarAffine {
    rate: f64,
    offset: Vec<f64>,
}

/// A vector field on `R^d` together with its declared dissipativity constant.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    kind: FieldKind,
    alpha: Option<f64>,
    scalar: Option<ScalarAffine>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("VectorField");
        s.field("dim", &self.dim).field("alpha", &self.alpha);
        match &self.kind {
            FieldKind::Affine { matrix, offset } => {
                s.field("matrix", matrix).field("offset", offset);
            }
            FieldKind::General(_) => {
                s.field("kind", &"general");
            }
        }
        s.finish()
    }
}

impl VectorField {
    pub fn affine(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let dim = offset.len();
        if dim == 0 || matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::input(format!(
                "affine field needs a {dim}x{dim} matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("affine field has non-finite coefficients"));
        }
        let diag = matrix[(0, 0)];
        let is_scalar = (0..dim).all(|r| {
            (0..dim).all(|c| {
                let expected = if r == c { diag } else { 0.0 };
                matrix[(r, c)] == expected
            })
        });
        let scalar = is_scalar.then(|| ScalarAffine {
            rate: diag,
            offset: offset.iter().copied().collect(),
        });
        Ok(Self {
            dim,
            kind: FieldKind::Affine { matrix, offset },
            alpha: None,
            scalar,
        })
    }

    /// Affine field from a row-major matrix and an offset.
    pub fn affine_from_rows(rows: &[Vec<f64>], offset: &[f64]) -> Result<Self> {
        let d = offset.len();
        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
            return Err(Error::input(format!("affine field matrix must be {d}x{d}")));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::affine(DMatrix::from_row_slice(d, d, &flat), DVector::from_column_slice(offset))
    }

    /// `F(x) = -rate * (x - center)`; contracting with `alpha = rate`.
    pub fn linear_attractor(rate: f64, center: &[f64]) -> Result<Self> {
        let d = center.len();
        let matrix = DMatrix::identity(d, d) * -rate;
        let offset = DVector::from_iterator(d, center.iter().map(|c| rate * c));
        Ok(Self::affine(matrix, offset)?.with_alpha(rate))
    }

    pub fn general(dim: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            dim,
            kind: FieldKind::General(Arc::new(f)),
            alpha: None,
            scalar: None,
        }
    }

    /// Declares the one-sided contraction constant of this field.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.kind, FieldKind::Affine { .. })
    }

    /// `(matrix, offset)` for affine fields.
    pub fn affine_data(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        match &self.kind {
            FieldKind::Affine { matrix, offset } => Some((matrix, offset)),
            FieldKind::General(_) => None,
        }
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            FieldKind::Affine { matrix, offset } => {
                for r in 0..self.dim {
                    let mut acc = offset[r];
                    for c in 0..self.dim {
                        acc += matrix[(r, c)] * x[c];
                    }
                    out[r] = acc;
                }
            }
            FieldKind::General(f) => f(x, out),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        out
    }

    /// Flows `x` forward by `dt` in place.
    pub fn flow_in_place(&self, x: &mut [f64], dt: f64, integrator: &FlowIntegrator) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::input(format!(
                "point has dimension {}, field has {}",
                x.len(),
                self.dim
            )));
        }
        if !(dt >= 0.0) {
            return Err(Error::input(format!("negative or NaN flow time {dt}")));
        }
        if dt == 0.0 {
            return Ok(());
        }
        if let Some(s) = &self.scalar {
            let growth = (s.rate * dt).exp();
            // (e^{m dt} - 1) / m, continuous at m = 0
            let integral = if s.rate == 0.0 {
                dt
            } else {
                (s.rate * dt).exp_m1() / s.rate
            };
            for (xi, vi) in x.iter_mut().zip(&s.offset) {
                *xi = growth * *xi + integral * vi;
            }
        } else if let (FieldKind::Affine { matrix, offset }, true) =
            (&self.kind, self.dim <= MAX_EXACT_AFFINE_DIM)
        {
            let d = self.dim;
            let mut aug = DMatrix::<f64>::zeros(d + 1, d + 1);
            aug.view_mut((0, 0), (d, d)).copy_from(&(matrix * dt));
            aug.view_mut((0, d), (d, 1)).copy_from(&(offset * dt));
            let e = linalg::expm(&aug).map_err(|_| Error::IntegrationDiverged { t: dt })?;
            let old = x.to_vec();
            for r in 0..d {
                let mut acc = e[(r, d)];
                for c in 0..d {
                    acc += e[(r, c)] * old[c];
                }
                x[r] = acc;
            }
        } else {
            integrator.integrate(self, x, dt)?;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { t: dt });
        }
        Ok(())
    }

    /// `phi_dt(x)`.
    pub fn flow(&self, x: &[f64], dt: f64, integrator: &FlowIntegrator) -> Result<Vec<f64>> {
        let mut y = x.to_vec();
        self.flow_in_place(&mut y, dt, integrator)?;
        Ok(y)
    }
}

/// Free-function form of [`VectorField::flow`].
pub fn flow_step(field: &VectorField, x: &[f64], dt: f64, integrator: &FlowIntegrator) -> Result<Vec<f64>> {
    field.flow(x, dt, integrator)
}

/// Fixed-step classical RK4 with a step-halving local error check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowIntegrator {
    /// Nominal step `h`.
    pub step: f64,
    /// Largest accepted difference between one `h` step and two `h/2` steps.
    pub tolerance: f64,
    /// Every interval is cut into at least this many steps.
    pub min_steps: usize,
}

impl Default for FlowIntegrator {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-10,
            min_steps: 16,
        }
    }
}

const MAX_HALVINGS: u32 = 12;

impl FlowIntegrator {
    pub fn new(step: f64, tolerance: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::input(format!("integrator step must be positive, got {step}")));
        }
        if !(tolerance > 0.0) {
            return Err(Error::input("integrator tolerance must be positive"));
        }
        Ok(Self { step, tolerance, ..Self::default() })
    }

    /// Number of equal steps used for an interval of length `dt`.
    pub fn steps_for(&self, dt: f64) -> usize {
        ((dt / self.step).ceil() as usize).max(self.min_steps)
    }

    /// RK4 from `x` over `dt` with error control.
    pub fn integrate(&self, field: &VectorField, x: &mut [f64], dt: f64) -> Result<()> {
        let n = self.steps_for(dt);
        let h = dt / n as f64;
        let mut scratch = Rk4Scratch::new(x.len());
        for k in 0..n {
            self.controlled_step(field, x, h, 0, &mut scratch)
                .map_err(|_| Error::IntegrationDiverged { t: h * k as f64 })?;
        }
        Ok(())
    }

    fn controlled_step(
        &self,
        field: &VectorField,
        x: &mut [f64],
        h: f64,
        depth: u32,
        scratch: &mut Rk4Scratch,
    ) -> Result<()> {
        let mut full = x.to_vec();
        rk4_step(field, &mut full, h, scratch);
        let mut half = x.to_vec();
        rk4_step(field, &mut half, 0.5 * h, scratch);
        rk4_step(field, &mut half, 0.5 * h, scratch);
        if full.iter().chain(&half).any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { t: h });
        }
        let err = full
            .iter()
            .zip(&half)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if err > self.tolerance && depth < MAX_HALVINGS {
            self.controlled_step(field, x, 0.5 * h, depth + 1, scratch)?;
            self.controlled_step(field, x, 0.5 * h, depth + 1, scratch)
        } else {
            x.copy_from_slice(&half);
            Ok(())
        }
    }

    /// Plain RK4 with exactly `steps` equal steps and no error control.
    pub fn rk4_fixed(field: &VectorField, x: &[f64], dt: f64, steps: usize) -> Vec<f64> {
        let mut y = x.to_vec();
        let h = dt / steps as f64;
        let mut scratch = Rk4Scratch::new(y.len());
        for _ in 0..steps {
            rk4_step(field, &mut y, h, &mut scratch);
        }
        y
    }
}

pub(crate) struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }
}

pub(crate) fn rk4_step(field: &VectorField, x: &mut [f64], h: f64, s: &mut Rk4Scratch) {
    let d = x.len();
    field.eval_into(x, &mut s.k1);
    for i in 0..d {
        s.tmp[i] = x[i] + 0.5 * h * s.k1[i];
    }
    field.eval_into(&s.tmp, &mut s.k2);
    for i in 0..d {
        s.tmp[i] = x[i] + 0.5 * h * s.k2[i];
    }
    field.eval_into(&s.tmp, &mut s.k3);
    for i in 0..d {
        s.tmp[i] = x[i] + h * s.k3[i];
    }
    field.eval_into(&s.tmp, &mut s.k4);
    for i in 0..d {
        x[i] += h / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// Outcome of a sampled dissipativity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DissipativityAudit {
    pub pass: bool,
    /// Max over samples of `<x - y, F(x) - F(y)> + alpha |x - y|^2`.
    pub worst_margin: f64,
    pub tolerance: f64,
    pub samples: usize,
}

/// Uniform point in the centered ball of radius `radius` in `R^d`.
pub fn sample_ball<R: RngCore + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    // Gaussian direction by Box–Muller, radius by inversion of r^d.
    let mut v = Vec::with_capacity(dim);
    while v.len() < dim {
        let u1 = open_uniform(rng);
        let u2 = open_uniform(rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = std::f64::consts::TAU * u2;
        v.push(r * th.cos());
        if v.len() < dim {
            v.push(r * th.sin());
        }
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rho = radius * open_uniform(rng).powf(1.0 / dim as f64);
    v.iter().map(|a| a * rho / norm).collect()
}

/// Samples pairs uniformly in the ball of `domain_radius` and checks
/// `<x - y, F(x) - F(y)> <= -alpha |x - y|^2`.
pub fn audit_dissipativity<R: RngCore + ?Sized>(
    field: &VectorField,
    alpha: f64,
    domain_radius: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<DissipativityAudit> {
    audit_dissipativity_with(field, alpha, n_samples, |rng| sample_ball(rng, field.dim(), domain_radius), rng)
}

/// Same check with a caller-supplied point sampler.
pub fn audit_dissipativity_with<R: RngCore + ?Sized>(
    field: &VectorField,
    alpha: f64,
    n_samples: usize,
    mut sampler: impl FnMut(&mut R) -> Vec<f64>,
    rng: &mut R,
) -> Result<DissipativityAudit> {
    if n_samples == 0 {
        return Err(Error::input("dissipativity audit needs at least one sample"));
    }
    let d = field.dim();
    let mut fx = vec![0.0; d];
    let mut fy = vec![0.0; d];
    let mut worst = f64::NEG_INFINITY;
    let mut scale: f64 = 0.0;
    for _ in 0..n_samples {
        let x = sampler(rng);
        let y = sampler(rng);
        field.eval_into(&x, &mut fx);
        field.eval_into(&y, &mut fy);
        let mut inner = 0.0;
        let mut dist2 = 0.0;
        for i in 0..d {
            let dx = x[i] - y[i];
            inner += dx * (fx[i] - fy[i]);
            dist2 += dx * dx;
        }
        scale = scale.max(dist2);
        worst = worst.max(inner + alpha * dist2);
    }
    let tolerance = 1e-9 * (1.0 + scale);
    Ok(DissipativityAudit {
        pass: worst <= tolerance,
        worst_margin: worst,
        tolerance,
        samples: n_samples,
    })
}

/// `r = max_i |F^i(0)| / alpha`, the radius of the absorbing ball.
pub fn invariant_radius(fields: &[VectorField], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::assumption(format!(
            "invariant radius needs a positive uniform dissipativity constant, got {alpha}"
        )));
    }
    let mut worst: f64 = 0.0;
    for f in fields {
        let zero = vec![0.0; f.dim()];
        let v = f.eval(&zero);
        worst = worst.max(v.iter().map(|a| a * a).sum::<f64>().sqrt());
    }
    Ok(worst / alpha)
}
