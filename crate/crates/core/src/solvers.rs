//! Direct and iterative solvers turning a representation plus damping into
//! a preconditioned gradient.

use thiserror::Error;

use crate::curvature::{BfgsForm, BfgsState};
use crate::linalg::{
    axpy, dot, inverse_spd_damped, norm2, solve_spd, sym_power, triangular_solve, EigenvalueMode, LinalgError, Matrix,
    Vector,
};
use crate::representation::{DiagonalSecondMoment, GramSketch, KfacFactors, ShampooFactors};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, SolverError>;

fn check_layer(g: &Matrix, d_out: usize, d_in: usize) -> Result<()> {
    if g.shape() != (d_out, d_in) {
        return Err(SolverError::ShapeMismatch(format!(
            "layer gradient {:?} vs factors {d_out}x{d_in}",
            g.shape()
        )));
    }
    Ok(())
}

/// Materializes `(A + √τ I)⁻¹` and `(B + √τ I)⁻¹` on the factors.
pub fn kfac_invert(factors: &mut KfacFactors, tau: f64) -> Result<()> {
    let split = tau.sqrt();
    let a_inv = inverse_spd_damped(&factors.a, split)?;
    let b_inv = inverse_spd_damped(&factors.b, split)?;
    factors.a_inv = Some(a_inv);
    factors.b_inv = Some(b_inv);
    factors.inverse_damping = Some(tau);
    Ok(())
}

/// `(B + √τ I)⁻¹ G (A + √τ I)⁻¹`, reusing cached inverses built with the
/// same `τ`.
pub fn kfac_precondition(factors: &KfacFactors, g: &Matrix, tau: f64) -> Result<Matrix> {
    check_layer(g, factors.b.rows(), factors.a.rows())?;
    if factors.inverse_damping == Some(tau) {
        if let (Some(a_inv), Some(b_inv)) = (&factors.a_inv, &factors.b_inv) {
            return Ok(b_inv.matmul(g).matmul(a_inv));
        }
    }
    let split = tau.sqrt();
    let left = solve_spd(&factors.b, split, g)?;
    // X A_d = Y  ⇔  A_d Xᵀ = Yᵀ for symmetric A_d.
    Ok(solve_spd(&factors.a, split, &left.transpose())?.transpose())
}

/// Materializes `(L + τI)^{-1/4}` and `(R + τI)^{-1/4}` on the factors.
pub fn shampoo_roots(factors: &mut ShampooFactors, tau: f64) -> Result<()> {
    let l = sym_power(&factors.l, -0.25, tau, EigenvalueMode::Signed)?;
    let r = sym_power(&factors.r, -0.25, tau, EigenvalueMode::Signed)?;
    factors.roots = Some((l, r, tau));
    Ok(())
}

/// `(L + τI)^{-1/4} G (R + τI)^{-1/4}`.
pub fn shampoo_precondition(factors: &ShampooFactors, g: &Matrix, tau: f64) -> Result<Matrix> {
    check_layer(g, factors.l.rows(), factors.r.rows())?;
    if let Some((l, r, t)) = &factors.roots {
        if *t == tau {
            return Ok(l.matmul(g).matmul(r));
        }
    }
    let l = sym_power(&factors.l, -0.25, tau, EigenvalueMode::Signed)?;
    let r = sym_power(&factors.r, -0.25, tau, EigenvalueMode::Signed)?;
    Ok(l.matmul(g).matmul(&r))
}

/// `(UᵀU/n + τI)⁻¹ g` for an explicit `U` (`n × d`) through the `n × n`
/// system `(nτI + UUᵀ)`.
pub fn smw_precondition(u: &Matrix, g: &[f64], tau: f64, n: usize) -> Result<Vector> {
    if u.cols() != g.len() {
        return Err(SolverError::ShapeMismatch(format!(
            "U has {} columns, g has {} entries",
            u.cols(),
            g.len()
        )));
    }
    let ug = Matrix::column(&u.matvec(g));
    let c = solve_spd(&u.matmul_nt(u), n as f64 * tau, &ug)?;
    let mut out = g.to_vec();
    axpy(-1.0, &u.matvec_t(c.as_slice()), &mut out);
    out.iter_mut().for_each(|v| *v /= tau);
    Ok(out)
}

/// Layer-matrix form of [`smw_precondition`] for a Gram representation.
///
/// Products with `U` and `Uᵀ` use the exact per-example factors,
/// `(U g)_i = e_iᵀ G ā_i` and `Uᵀ c = Eᵀ diag(c) Ā`; only the Gram matrix
/// comes from the sketch.
pub fn smw_precondition_gram(sketch: &GramSketch, g: &Matrix, tau: f64) -> Result<Matrix> {
    check_layer(g, sketch.errors.cols(), sketch.activations.cols())?;
    let n = sketch.batch_size();
    let ga = sketch.activations.matmul_nt(g);
    let ug: Vector = (0..n).map(|i| dot(ga.row(i), sketch.errors.row(i))).collect();
    let c = solve_spd(&sketch.gram, n as f64 * tau, &Matrix::column(&ug))?;
    let mut scaled = sketch.errors.clone();
    for (i, &ci) in c.as_slice().iter().enumerate() {
        scaled.row_mut(i).iter_mut().for_each(|v| *v *= ci);
    }
    let mut out = g.sub(&scaled.matmul_tn(&sketch.activations));
    out.scale_mut(1.0 / tau);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgConfig {
    /// Stop once `‖r‖ ≤ tol·‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Added to the operator as `τ x`.
    pub damping: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            damping: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome {
    pub x: Vector,
    pub iterations: usize,
    pub converged: bool,
    /// Residual norm of the returned iterate.
    pub residual: f64,
}

/// Conjugate gradient on `(M + τI) x = b` from `x₀ = 0`.
pub fn cg_solve<F, E>(matvec: F, b: &[f64], cfg: &CgConfig) -> std::result::Result<CgOutcome, E>
where
    F: FnMut(&[f64]) -> std::result::Result<Vector, E>,
{
    cg_solve_from(matvec, b, None, cfg)
}

/// [`cg_solve`] with an optional warm start. The iterate with the smallest
/// residual is returned.
pub fn cg_solve_from<F, E>(
    mut matvec: F,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &CgConfig,
) -> std::result::Result<CgOutcome, E>
where
    F: FnMut(&[f64]) -> std::result::Result<Vector, E>,
{
    let mut op = |v: &[f64]| -> std::result::Result<Vector, E> {
        let mut out = matvec(v)?;
        if cfg.damping != 0.0 {
            axpy(cfg.damping, v, &mut out);
        }
        Ok(out)
    };
    let target = cfg.tol * norm2(b);
    let mut x = x0.map_or_else(|| vec![0.0; b.len()], <[f64]>::to_vec);
    let mut r = b.to_vec();
    if x0.is_some() {
        axpy(-1.0, &op(&x)?, &mut r);
    }
    let mut rr = dot(&r, &r);
    let mut best = (rr.sqrt(), x.clone());
    if rr.sqrt() <= target {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            converged: true,
            residual: best.0,
        });
    }
    let mut p = r.clone();
    for it in 1..=cfg.max_iter {
        let ap = op(&p)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        let res = rr_new.sqrt();
        if res < best.0 {
            best = (res, x.clone());
        }
        if res <= target {
            return Ok(CgOutcome {
                x,
                iterations: it,
                converged: true,
                residual: res,
            });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        if it == cfg.max_iter {
            return Ok(CgOutcome {
                x: best.1,
                iterations: it,
                converged: false,
                residual: best.0,
            });
        }
    }
    Ok(CgOutcome {
        x: best.1,
        iterations: cfg.max_iter,
        converged: false,
        residual: best.0,
    })
}

/// Upper-triangular factors with `P = (Q_outᵀ Q_out) ⊗ (Q_inᵀ Q_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangularFactors {
    pub q_out: Matrix,
    pub q_in: Matrix,
    pub step: f64,
}

/// Smallest diagonal entry a factor keeps.
const DIAG_FLOOR: f64 = 1e-8;

impl TriangularFactors {
    pub fn identity(d_out: usize, d_in_aug: usize, step: f64) -> Self {
        Self {
            q_out: Matrix::identity(d_out),
            q_in: Matrix::identity(d_in_aug),
            step,
        }
    }

    pub fn state_bytes(&self) -> usize {
        (self.q_out.len() + self.q_in.len()) * 8
    }
}

/// `A' = Q_out dG Q_inᵀ` and `B' = Q_out⁻ᵀ dΘ Q_in⁻¹`.
fn psgd_pair(f: &TriangularFactors, d_theta: &Matrix, d_g: &Matrix) -> Result<(Matrix, Matrix)> {
    check_layer(d_theta, f.q_out.rows(), f.q_in.rows())?;
    check_layer(d_g, f.q_out.rows(), f.q_in.rows())?;
    let a = f.q_out.matmul(d_g).matmul_nt(&f.q_in);
    let left = triangular_solve(&f.q_out, d_theta, true)?;
    let b = triangular_solve(&f.q_in, &left.transpose(), true)?.transpose();
    Ok((a, b))
}

/// Fitting criterion `‖A'‖² + ‖B'‖²` minimized by the PSGD update.
pub fn psgd_criterion(f: &TriangularFactors, d_theta: &Matrix, d_g: &Matrix) -> Result<f64> {
    let (a, b) = psgd_pair(f, d_theta, d_g)?;
    Ok(a.frobenius_norm().powi(2) + b.frobenius_norm().powi(2))
}

/// One normalized relative-gradient step of both factors on the probe pair
/// `(dΘ, dG)`.
pub fn psgd_update(f: &mut TriangularFactors, d_theta: &Matrix, d_g: &Matrix) -> Result<()> {
    let (a, b) = psgd_pair(f, d_theta, d_g)?;
    let grad_out = a.matmul_nt(&a).sub(&b.matmul_nt(&b)).triu();
    let grad_in = a.matmul_tn(&a).sub(&b.matmul_tn(&b)).triu();
    let mu = f.step;
    for (q, grad) in [(&mut f.q_out, grad_out), (&mut f.q_in, grad_in)] {
        let scale = mu / grad.max_abs().max(1e-12);
        let delta = grad.matmul(q);
        q.axpy(-scale, &delta);
        for i in 0..q.rows() {
            if q[(i, i)] < DIAG_FLOOR {
                q[(i, i)] = DIAG_FLOOR;
            }
        }
    }
    Ok(())
}

/// `(Q_outᵀ Q_out) G (Q_inᵀ Q_in)`.
pub fn psgd_precondition(f: &TriangularFactors, g: &Matrix) -> Result<Matrix> {
    check_layer(g, f.q_out.rows(), f.q_in.rows())?;
    let left = f.q_out.matmul_tn(&f.q_out.matmul(g));
    let right = f.q_in.matmul_tn(&f.q_in);
    Ok(left.matmul(&right))
}

/// `B⁻¹ g` for the direct form, `H g` for the inverse form.
pub fn bfgs_inverse_apply(state: &BfgsState, g: &[f64]) -> Result<Vector> {
    if g.len() != state.dim() {
        return Err(SolverError::ShapeMismatch(format!(
            "vector of length {} for dimension {}",
            g.len(),
            state.dim()
        )));
    }
    Ok(match state.form {
        BfgsForm::Direct => solve_spd(&state.matrix, 0.0, &Matrix::column(g))?.into_vec(),
        BfgsForm::Inverse => state.matrix.matvec(g),
    })
}

/// `g / (√v̂ + ε)`, with `v̂ = v / (1 - α^t)` when `bias_correction` carries
/// the EMA weight `α`.
pub fn elementwise_precondition(
    v: &DiagonalSecondMoment,
    g: &[f64],
    eps: f64,
    bias_correction: Option<f64>,
) -> Result<Vector> {
    if g.len() != v.v.len() {
        return Err(SolverError::ShapeMismatch(format!(
            "gradient length {} vs state length {}",
            g.len(),
            v.v.len()
        )));
    }
    let correction = match bias_correction {
        Some(ema) if v.steps > 0 => 1.0 - ema.powi(v.steps.min(i32::MAX as u64) as i32),
        _ => 1.0,
    };
    Ok(g.iter()
        .zip(&v.v)
        .map(|(gi, vi)| gi / ((vi / correction).sqrt() + eps))
        .collect())
}
