//! Curvature matrices: inner-loop plans, dense reference constructors, and
//! the quasi-Newton update.

use rand::Rng;
use thiserror::Error;

use crate::linalg::{dot, sym_power, EigenvalueMode, LinalgError, Matrix, Vector};
use crate::network::{
    loss_output_grad, loss_output_hessian, sample_mc_targets, softmax, Batch, FlatGradient, LossKind, Network,
    NetworkError, Targets,
};
use crate::representation::{diagonal_update, Accumulation, DiagonalSecondMoment, RepresentationError, ShampooFactors};

/// Largest parameter count the dense constructors accept.
pub const ORACLE_LIMIT: usize = 5000;
/// Powell damping keeps `yᵀs ≥ POWELL · sᵀBs`.
pub const POWELL: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurvatureError {
    #[error("curvature kind {0:?} not supported here")]
    UnsupportedKind(CurvatureKind),
    #[error("{params} parameters exceeds the dense oracle limit")]
    ScaleExceeded { params: usize },
    #[error("degenerate curvature: {0}")]
    DegenerateCurvature(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
}

pub type Result<T> = std::result::Result<T, CurvatureError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CurvatureKind {
    Hessian,
    AbsHessian,
    Ggn,
    Fisher,
    /// `samples` draws per example, each weighted `1/samples` when
    /// `normalize` is set and `1` otherwise.
    McFisher {
        samples: usize,
        normalize: bool,
    },
    EmpFisher,
    BatchedEmpFisher {
        ema: f64,
    },
    Bfgs,
}

impl CurvatureKind {
    pub const fn mc_fisher(samples: usize) -> Self {
        Self::McFisher {
            samples,
            normalize: true,
        }
    }
}

/// One backward pass of the inner loop: a target per example and the
/// weight its log-likelihood-gradient outer product carries.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerPass {
    pub targets: Targets,
    pub weights: Vector,
}

impl InnerPass {
    /// Per-example output gradients scaled by `√w_i`, so that outer products
    /// of the resulting parameter gradients carry weight `w_i`.
    pub fn output_grad(&self, kind: LossKind, logits: &Matrix) -> Result<Matrix> {
        let mut g = loss_output_grad(kind, logits, &self.targets)?;
        for (i, &w) in self.weights.iter().enumerate() {
            let s = w.sqrt();
            g.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerLoopPlan {
    pub passes: Vec<InnerPass>,
}

impl InnerLoopPlan {
    pub fn backward_passes(&self) -> usize {
        self.passes.len()
    }
}

/// Targets and weights for the backward passes of a Fisher-type curvature.
pub fn plan_inner_loop<R: Rng + ?Sized>(
    kind: CurvatureKind,
    loss: LossKind,
    logits: &Matrix,
    targets: &Targets,
    rng: &mut R,
) -> Result<InnerLoopPlan> {
    let n = logits.rows();
    let k = logits.cols();
    let passes = match kind {
        CurvatureKind::Fisher => match loss {
            LossKind::CrossEntropy => {
                let p = softmax(logits);
                (0..k)
                    .map(|c| InnerPass {
                        targets: Targets::Classes(vec![c; n]),
                        weights: (0..n).map(|i| p[(i, c)]).collect(),
                    })
                    .collect()
            }
            // Targets `y - e_c` give output gradient `e_c`; the K passes sum
            // to the unit-variance Gaussian Fisher.
            LossKind::Mse => (0..k)
                .map(|c| {
                    let mut t = logits.clone();
                    for i in 0..n {
                        t[(i, c)] -= 1.0;
                    }
                    InnerPass {
                        targets: Targets::Values(t),
                        weights: vec![1.0; n],
                    }
                })
                .collect(),
        },
        CurvatureKind::McFisher { samples, normalize } => {
            if samples == 0 {
                return Err(CurvatureError::UnsupportedKind(kind));
            }
            let w = if normalize { 1.0 / samples as f64 } else { 1.0 };
            sample_mc_targets(loss, logits, rng, samples)
                .into_iter()
                .map(|targets| InnerPass {
                    targets,
                    weights: vec![w; n],
                })
                .collect()
        }
        CurvatureKind::EmpFisher => vec![InnerPass {
            targets: targets.clone(),
            weights: vec![1.0; n],
        }],
        other => return Err(CurvatureError::UnsupportedKind(other)),
    };
    Ok(InnerLoopPlan { passes })
}

fn check_scale(net: &Network) -> Result<usize> {
    let p = net.param_count();
    if p > ORACLE_LIMIT {
        return Err(CurvatureError::ScaleExceeded { params: p });
    }
    Ok(p)
}

/// Dense Hessian, one finite-difference Hvp per column.
pub fn dense_hessian(net: &mut Network, batch: &Batch) -> Result<Matrix> {
    let p = check_scale(net)?;
    let mut h = Matrix::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e[j] = 1.0;
        let col = net.hessian_vector_product(batch, &e)?;
        e[j] = 0.0;
        h.set_col(j, &col);
    }
    Ok(h.symmetrize())
}

/// `H_{|λ|}`: the dense Hessian with every eigenvalue replaced by its
/// absolute value.
pub fn abs_hessian_dense(net: &mut Network, batch: &Batch) -> Result<Matrix> {
    let h = dense_hessian(net, batch)?;
    Ok(sym_power(&h, 1.0, 0.0, EigenvalueMode::Absolute)?)
}

/// Runs `f` on a fresh captured forward pass and restores the previous
/// capture afterwards.
fn with_capture<T>(net: &mut Network, batch: &Batch, f: impl FnOnce(&mut Network, &Matrix) -> Result<T>) -> Result<T> {
    let saved = net.take_capture();
    let result = net
        .forward(&batch.inputs, true)
        .map_err(CurvatureError::from)
        .and_then(|logits| f(net, &logits));
    net.restore_capture(saved);
    result
}

fn dense_ggn(net: &mut Network, batch: &Batch) -> Result<Matrix> {
    let p = check_scale(net)?;
    let n = batch.len();
    let loss = net.loss_kind();
    with_capture(net, batch, |net, logits| {
        let k = logits.cols();
        // jac[c] row i holds ∂y_ic/∂θ for example i.
        let mut jac = Vec::with_capacity(k);
        for c in 0..k {
            let mut unit = Matrix::zeros(n, k);
            for i in 0..n {
                unit[(i, c)] = 1.0;
            }
            net.backward(&unit, true)?;
            jac.push(net.capture().expect("forward ran").per_example_gradient_rows()?);
        }
        let mut g = Matrix::zeros(p, p);
        for i in 0..n {
            let j_i = Matrix::from_fn(k, p, |c, q| jac[c][(i, q)]);
            let h_i = loss_output_hessian(loss, logits.row(i));
            g.axpy(1.0, &j_i.matmul_tn(&h_i.matmul(&j_i)));
        }
        Ok(g.scale(1.0 / n as f64).symmetrize())
    })
}

/// Weighted per-example gradient outer products over the plan's passes,
/// averaged over the batch.
pub fn fisher_from_plan(net: &mut Network, batch: &Batch, plan: &InnerLoopPlan) -> Result<Matrix> {
    let p = check_scale(net)?;
    let n = batch.len();
    let loss = net.loss_kind();
    with_capture(net, batch, |net, logits| {
        let mut f = Matrix::zeros(p, p);
        for pass in &plan.passes {
            net.backward(&pass.output_grad(loss, logits)?, true)?;
            let rows = net.capture().expect("forward ran").per_example_gradient_rows()?;
            f.axpy(1.0, &rows.matmul_tn(&rows));
        }
        Ok(f.scale(1.0 / n as f64).symmetrize())
    })
}

/// Dense `P × P` curvature of `kind` on `batch`; reference use only.
pub fn dense_curvature_oracle<R: Rng + ?Sized>(
    net: &mut Network,
    batch: &Batch,
    kind: CurvatureKind,
    rng: &mut R,
) -> Result<Matrix> {
    match kind {
        CurvatureKind::Hessian => dense_hessian(net, batch),
        CurvatureKind::AbsHessian => abs_hessian_dense(net, batch),
        CurvatureKind::Ggn => dense_ggn(net, batch),
        CurvatureKind::Fisher | CurvatureKind::McFisher { .. } | CurvatureKind::EmpFisher => {
            check_scale(net)?;
            let logits = net.predict(&batch.inputs);
            let plan = plan_inner_loop(kind, net.loss_kind(), &logits, &batch.targets, rng)?;
            fisher_from_plan(net, batch, &plan)
        }
        CurvatureKind::BatchedEmpFisher { .. } | CurvatureKind::Bfgs => Err(CurvatureError::UnsupportedKind(kind)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfgsForm {
    /// The matrix approximates the Hessian.
    Direct,
    /// The matrix approximates the inverse Hessian.
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfgsDamping {
    None,
    Powell,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BfgsState {
    pub matrix: Matrix,
    pub form: BfgsForm,
}

impl BfgsState {
    pub fn identity(dim: usize, form: BfgsForm) -> Self {
        Self {
            matrix: Matrix::identity(dim),
            form,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
}

/// Interpolation weight applied to the secant pair; `1` means undamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BfgsStep {
    pub theta: f64,
}

fn powell_theta(curv: f64, quad: f64) -> f64 {
    if curv >= POWELL * quad {
        1.0
    } else {
        (1.0 - POWELL) * quad / (quad - curv)
    }
}

/// One BFGS update from the step `s` and gradient change `y`.
///
/// In direct form the secant condition `B s = ỹ` holds afterwards, with `ỹ`
/// the damped gradient change. In inverse form the dual update is applied
/// and `H y = s̃` holds, with `s̃` damped against `yᵀHy`.
pub fn bfgs_update(state: &mut BfgsState, s: &[f64], y: &[f64], damping: BfgsDamping) -> Result<BfgsStep> {
    let d = state.dim();
    if s.len() != d || y.len() != d {
        return Err(CurvatureError::ShapeMismatch(format!(
            "step lengths {}/{} for dimension {d}",
            s.len(),
            y.len()
        )));
    }
    match state.form {
        BfgsForm::Direct => {
            if dot(s, s) == 0.0 {
                return Err(CurvatureError::DegenerateCurvature("zero step".into()));
            }
            let bs = state.matrix.matvec(s);
            let sbs = dot(s, &bs);
            if sbs <= 0.0 || !sbs.is_finite() {
                return Err(CurvatureError::DegenerateCurvature(format!("sᵀBs = {sbs}")));
            }
            let (theta, yd) = damp(y, &bs, dot(s, y), sbs, damping)?;
            let ys = dot(&yd, s);
            let mut b = state.matrix.clone();
            b.axpy(1.0 / ys, &Matrix::outer(&yd, &yd));
            b.axpy(-1.0 / sbs, &Matrix::outer(&bs, &bs));
            state.matrix = b.symmetrize();
            Ok(BfgsStep { theta })
        }
        BfgsForm::Inverse => {
            if dot(y, y) == 0.0 {
                return Err(CurvatureError::DegenerateCurvature("zero gradient change".into()));
            }
            let hy = state.matrix.matvec(y);
            let yhy = dot(y, &hy);
            if yhy <= 0.0 || !yhy.is_finite() {
                return Err(CurvatureError::DegenerateCurvature(format!("yᵀHy = {yhy}")));
            }
            let (theta, sd) = damp(s, &hy, dot(s, y), yhy, damping)?;
            let rho = 1.0 / dot(&sd, y);
            // H⁺ = (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ, expanded.
            let mut h = state.matrix.clone();
            h.axpy(-rho, &Matrix::outer(&sd, &hy));
            h.axpy(-rho, &Matrix::outer(&hy, &sd));
            h.axpy(rho * rho * yhy + rho, &Matrix::outer(&sd, &sd));
            state.matrix = h.symmetrize();
            Ok(BfgsStep { theta })
        }
    }
}

/// Returns `θ v + (1-θ) w` with `θ` chosen by Powell's rule, where `curv`
/// is the pair's curvature `sᵀy` and `quad` the model's quadratic form.
fn damp(v: &[f64], w: &[f64], curv: f64, quad: f64, damping: BfgsDamping) -> Result<(f64, Vector)> {
    let theta = match damping {
        BfgsDamping::Powell => powell_theta(curv, quad),
        BfgsDamping::None if curv > 0.0 => 1.0,
        BfgsDamping::None => return Err(CurvatureError::DegenerateCurvature(format!("sᵀy = {curv}"))),
    };
    let out = v
        .iter()
        .zip(w)
        .map(|(vi, wi)| theta * vi + (1.0 - theta) * wi)
        .collect();
    Ok((theta, out))
}

/// Running gradient second-moment state.
#[derive(Clone, Debug, PartialEq)]
pub enum SecondMomentState {
    Diagonal(DiagonalSecondMoment),
    /// One `(G Gᵀ, Gᵀ G)` factor pair per layer.
    Kronecker(Vec<ShampooFactors>),
}

/// `state ← α·state + (1-α)·stat(g gᵀ)` in the state's representation.
pub fn batched_emp_fisher_update(state: &mut SecondMomentState, g: &FlatGradient, ema: f64) -> Result<()> {
    match state {
        SecondMomentState::Diagonal(d) => diagonal_update(d, &g.flatten(), ema)?,
        SecondMomentState::Kronecker(factors) => {
            if factors.len() != g.layers.len() {
                return Err(CurvatureError::ShapeMismatch(format!(
                    "{} factor pairs for {} layers",
                    factors.len(),
                    g.layers.len()
                )));
            }
            for (f, gl) in factors.iter_mut().zip(&g.layers) {
                if gl.rows() != f.l.rows() || gl.cols() != f.r.rows() {
                    return Err(CurvatureError::ShapeMismatch(format!(
                        "layer gradient {:?}",
                        gl.shape()
                    )));
                }
                f.accumulate(gl, Accumulation::Ema(ema));
            }
        }
    }
    Ok(())
}
