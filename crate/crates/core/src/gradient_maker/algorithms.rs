//! The concrete preconditioning algorithms behind each maker kind.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::curvature::{bfgs_update, plan_inner_loop, BfgsDamping, BfgsForm, BfgsState, CurvatureError, CurvatureKind};
use crate::linalg::{inverse_spd_damped, LinalgError, Matrix, Vector};
use crate::network::{Batch, FlatGradient, Network, NetworkError};
use crate::representation::{
    diagonal_update, gram_sketch_build, kfac_accumulate, kfac_update, shampoo_update, DiagonalSecondMoment, GramSketch,
    KfacFactors, RepresentationError, ShampooFactors,
};
use crate::solvers::{
    cg_solve, elementwise_precondition, kfac_invert, kfac_precondition, psgd_precondition, psgd_update,
    shampoo_precondition, shampoo_roots, smw_precondition_gram, CgConfig, SolverError, TriangularFactors,
};

use super::{FisherSource, MakerKind, PrecondConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl NumericError {
    /// Failures that more damping can repair.
    pub fn is_indefinite(&self) -> bool {
        let linalg = match self {
            NumericError::Linalg(e) => Some(e),
            NumericError::Solver(SolverError::Linalg(e)) => Some(e),
            NumericError::Curvature(CurvatureError::Linalg(e)) => Some(e),
            NumericError::Representation(RepresentationError::Linalg(e)) => Some(e),
            _ => None,
        };
        matches!(
            linalg,
            Some(LinalgError::NotPositiveDefinite { .. } | LinalgError::SingularPower { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Failure {
    pub layer: Option<usize>,
    pub source: NumericError,
}

fn at<E: Into<NumericError>>(layer: usize) -> impl FnOnce(E) -> Failure {
    move |e| Failure {
        layer: Some(layer),
        source: e.into(),
    }
}

fn global<E: Into<NumericError>>(e: E) -> Failure {
    Failure {
        layer: None,
        source: e.into(),
    }
}

pub(crate) struct StepContext<'a> {
    pub net: &'a mut Network,
    pub batch: &'a Batch,
    pub logits: &'a Matrix,
    /// Mean gradient of the current step, before preconditioning.
    pub grad: &'a FlatGradient,
    pub rng: &'a mut ChaCha8Rng,
    pub config: &'a PrecondConfig,
}

/// Read-only view of an algorithm's persistent state.
pub enum CurvatureState<'a> {
    Identity,
    Kronecker(&'a [KfacFactors]),
    Shampoo(&'a [ShampooFactors]),
    Gram(&'a [GramSketch]),
    Triangular(&'a [TriangularFactors]),
    KroneckerBfgs {
        activation: &'a [KfacFactors],
        bfgs: &'a [BfgsState],
    },
    Diagonal(&'a DiagonalSecondMoment),
}

pub(crate) trait Algorithm {
    fn update_curvature(&mut self, ctx: &mut StepContext<'_>) -> Result<(), Failure>;
    fn update_preconditioner(&mut self, damping: f64) -> Result<(), Failure>;
    fn precondition(&mut self, ctx: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure>;
    fn state_bytes(&self) -> usize;
    fn state(&self) -> CurvatureState<'_>;
    /// Whether preconditioning waits for a first curvature update.
    fn uses_curvature(&self) -> bool {
        true
    }
    #[cfg(test)]
    fn kronecker_mut(&mut self) -> Option<&mut [KfacFactors]> {
        None
    }
}

pub(crate) fn build(kind: MakerKind, net: &Network, config: &PrecondConfig) -> Box<dyn Algorithm> {
    let shapes = net.layer_shapes();
    match kind {
        MakerKind::Plain => Box::new(Plain),
        MakerKind::Kfac(source) => Box::new(Kfac {
            source,
            factors: shapes.iter().map(|&(o, i)| KfacFactors::zeros(i, o)).collect(),
        }),
        MakerKind::Shampoo => Box::new(Shampoo {
            factors: shapes
                .iter()
                .map(|&(o, i)| ShampooFactors::zeros(o, i, config.shampoo_accumulation))
                .collect(),
        }),
        MakerKind::Psgd => Box::new(Psgd {
            factors: shapes
                .iter()
                .map(|&(o, i)| TriangularFactors::identity(o, i, config.psgd_step))
                .collect(),
        }),
        MakerKind::Kbfgs => Box::new(Kbfgs {
            activation: shapes.iter().map(|&(_, i)| KfacFactors::zeros(i, 0)).collect(),
            bfgs: shapes
                .iter()
                .map(|&(o, _)| BfgsState::identity(o, BfgsForm::Inverse))
                .collect(),
            previous: None,
        }),
        MakerKind::Seng => Box::new(Seng { sketches: Vec::new() }),
        MakerKind::HessianFree => Box::new(HessianFree),
        MakerKind::DiagonalAdamLike => Box::new(AdamLike {
            moment: DiagonalSecondMoment::zeros(net.param_count()),
        }),
    }
}

fn per_layer(
    g: &FlatGradient,
    mut f: impl FnMut(usize, &Matrix) -> Result<Matrix, Failure>,
) -> Result<FlatGradient, Failure> {
    let layers = g
        .layers
        .iter()
        .enumerate()
        .map(|(l, gl)| f(l, gl))
        .collect::<Result<_, _>>()?;
    Ok(FlatGradient { layers })
}

struct Plain;

impl Algorithm for Plain {
    fn update_curvature(&mut self, _: &mut StepContext<'_>) -> Result<(), Failure> {
        Ok(())
    }

    fn update_preconditioner(&mut self, _: f64) -> Result<(), Failure> {
        Ok(())
    }

    fn precondition(&mut self, _: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure> {
        Ok(g.clone())
    }

    fn state_bytes(&self) -> usize {
        0
    }

    fn state(&self) -> CurvatureState<'_> {
        CurvatureState::Identity
    }

    fn uses_curvature(&self) -> bool {
        false
    }
}

struct Kfac {
    source: FisherSource,
    factors: Vec<KfacFactors>,
}

impl Algorithm for Kfac {
    fn update_curvature(&mut self, ctx: &mut StepContext<'_>) -> Result<(), Failure> {
        let ema = ctx.config.ema;
        match self.source {
            // The captured errors already come from the true labels.
            FisherSource::Empirical => {
                let capture = ctx.net.capture().ok_or_else(|| global(NetworkError::NoForwardState))?;
                for (l, f) in self.factors.iter_mut().enumerate() {
                    kfac_update(f, capture, l, ema).map_err(at(l))?;
                }
            }
            FisherSource::MonteCarlo => {
                let kind = CurvatureKind::McFisher {
                    samples: ctx.config.mc_samples,
                    normalize: ctx.config.mc_normalize,
                };
                let loss = ctx.net.loss_kind();
                let plan = plan_inner_loop(kind, loss, ctx.logits, &ctx.batch.targets, ctx.rng).map_err(global)?;
                let n = ctx.batch.len() as f64;
                let mut b_stats: Vec<Matrix> = self
                    .factors
                    .iter()
                    .map(|f| Matrix::zeros(f.b.rows(), f.b.cols()))
                    .collect();
                for pass in &plan.passes {
                    let og = pass.output_grad(loss, ctx.logits).map_err(global)?;
                    ctx.net.backward(&og, true).map_err(global)?;
                    let capture = ctx.net.capture().expect("backward succeeded");
                    for (l, b) in b_stats.iter_mut().enumerate() {
                        let e = capture.errors(l).map_err(at(l))?;
                        b.axpy(1.0 / n, &e.matmul_tn(e));
                    }
                }
                let capture = ctx.net.capture().expect("backward succeeded");
                for (l, (f, b)) in self.factors.iter_mut().zip(&b_stats).enumerate() {
                    let acts = capture.activations(l).map_err(at(l))?;
                    let a = second_moment(acts);
                    kfac_accumulate(f, &a, &b.symmetrize(), ema);
                }
            }
        }
        Ok(())
    }

    fn update_preconditioner(&mut self, damping: f64) -> Result<(), Failure> {
        for (l, f) in self.factors.iter_mut().enumerate() {
            kfac_invert(f, damping).map_err(at(l))?;
        }
        Ok(())
    }

    fn precondition(&mut self, ctx: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure> {
        per_layer(g, |l, gl| {
            let f = &self.factors[l];
            let tau = f.inverse_damping.unwrap_or(ctx.config.damping);
            kfac_precondition(f, gl, tau).map_err(at(l))
        })
    }

    fn state_bytes(&self) -> usize {
        self.factors.iter().map(KfacFactors::state_bytes).sum()
    }

    fn state(&self) -> CurvatureState<'_> {
        CurvatureState::Kronecker(&self.factors)
    }

    #[cfg(test)]
    fn kronecker_mut(&mut self) -> Option<&mut [KfacFactors]> {
        Some(&mut self.factors)
    }
}

struct Shampoo {
    factors: Vec<ShampooFactors>,
}

impl Algorithm for Shampoo {
    fn update_curvature(&mut self, ctx: &mut StepContext<'_>) -> Result<(), Failure> {
        for (l, (f, gl)) in self.factors.iter_mut().zip(&ctx.grad.layers).enumerate() {
            shampoo_update(f, gl).map_err(at(l))?;
        }
        Ok(())
    }

    fn update_preconditioner(&mut self, damping: f64) -> Result<(), Failure> {
        for (l, f) in self.factors.iter_mut().enumerate() {
            shampoo_roots(f, damping).map_err(at(l))?;
        }
        Ok(())
    }

    fn precondition(&mut self, ctx: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure> {
        per_layer(g, |l, gl| {
            let f = &self.factors[l];
            let tau = f.roots.as_ref().map_or(ctx.config.damping, |r| r.2);
            shampoo_precondition(f, gl, tau).map_err(at(l))
        })
    }

    fn state_bytes(&self) -> usize {
        self.factors.iter().map(ShampooFactors::state_bytes).sum()
    }

    fn state(&self) -> CurvatureState<'_> {
        CurvatureState::Shampoo(&self.factors)
    }
}

/// Standard deviation of the PSGD parameter probe.
const PROBE_STD: f64 = 1e-2;

struct Psgd {
    factors: Vec<TriangularFactors>,
}

impl Algorithm for Psgd {
    fn update_curvature(&mut self, ctx: &mut StepContext<'_>) -> Result<(), Failure> {
        let shapes = ctx.net.layer_shapes();
        let normal = Normal::new(0.0, PROBE_STD).expect("valid deviation");
        let probe: Vector = (0..ctx.net.param_count()).map(|_| normal.sample(ctx.rng)).collect();
        let response = ctx.net.hessian_vector_product(ctx.batch, &probe).map_err(global)?;
        let d_theta = FlatGradient::unflatten(&shapes, &probe);
        let d_g = FlatGradient::unflatten(&shapes, &response);
        for (l, f) in self.factors.iter_mut().enumerate() {
            psgd_update(f, &d_theta.layers[l], &d_g.layers[l]).map_err(at(l))?;
        }
        Ok(())
    }

    fn update_preconditioner(&mut self, _: f64) -> Result<(), Failure> {
        Ok(())
    }

    fn precondition(&mut self, _: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure> {
        per_layer(g, |l, gl| psgd_precondition(&self.factors[l], gl).map_err(at(l)))
    }

    fn state_bytes(&self) -> usize {
        self.factors.iter().map(TriangularFactors::state_bytes).sum()
    }

    fn state(&self) -> CurvatureState<'_> {
        CurvatureState::Triangular(&self.factors)
    }
}

fn second_moment(m: &Matrix) -> Matrix {
    m.matmul_tn(m).scale(1.0 / m.rows() as f64).symmetrize()
}

fn column_means(m: &Matrix) -> Vector {
    let n = m.rows() as f64;
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v / n;
        }
    }
    out
}

struct Kbfgs {
    /// Activation-side factors; the `b` side is unused and empty.
    activation: Vec<KfacFactors>,
    bfgs: Vec<BfgsState>,
    /// Batch-mean pre-activations and output-gradients per layer at the
    /// previous curvature update.
    previous: Option<Vec<(Vector, Vector)>>,
}

impl Algorithm for Kbfgs {
    fn update_curvature(&mut self, ctx: &mut StepContext<'_>) -> Result<(), Failure> {
        let ema = ctx.config.ema;
        let capture = ctx.net.capture().ok_or_else(|| global(NetworkError::NoForwardState))?;
        let mut means = Vec::with_capacity(self.activation.len());
        for (l, f) in self.activation.iter_mut().enumerate() {
            let acts = capture.activations(l).map_err(at(l))?;
            let a = second_moment(acts);
            kfac_accumulate(f, &a, &Matrix::zeros(0, 0), ema);
            let z = column_means(&capture.preactivations[l]);
            let e = column_means(capture.errors(l).map_err(at(l))?);
            means.push((z, e));
        }
        if let Some(prev) = &self.previous {
            for (l, ((z, e), (z0, e0))) in means.iter().zip(prev).enumerate() {
                let s: Vector = z.iter().zip(z0).map(|(a, b)| a - b).collect();
                let y: Vector = e.iter().zip(e0).map(|(a, b)| a - b).collect();
                if s.iter().all(|v| *v == 0.0) || y.iter().all(|v| *v == 0.0) {
                    continue;
                }
                match bfgs_update(&mut self.bfgs[l], &s, &y, BfgsDamping::Powell) {
                    Ok(_) => {}
                    Err(CurvatureError::DegenerateCurvature(_)) => {
                        self.bfgs[l] = BfgsState::identity(s.len(), BfgsForm::Inverse);
                    }
                    Err(e) => return Err(at(l)(e)),
                }
            }
        }
        self.previous = Some(means);
        Ok(())
    }

    fn update_preconditioner(&mut self, damping: f64) -> Result<(), Failure> {
        let split = damping.sqrt();
        for (l, f) in self.activation.iter_mut().enumerate() {
            f.a_inv = Some(inverse_spd_damped(&f.a, split).map_err(at(l))?);
            f.inverse_damping = Some(damping);
        }
        Ok(())
    }

    fn precondition(&mut self, ctx: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure> {
        per_layer(g, |l, gl| {
            let f = &self.activation[l];
            let right = match &f.a_inv {
                Some(inv) => gl.matmul(inv),
                None => {
                    let inv = inverse_spd_damped(&f.a, ctx.config.damping.sqrt()).map_err(at(l))?;
                    gl.matmul(&inv)
                }
            };
            Ok(self.bfgs[l].matrix.matmul(&right))
        })
    }

    fn state_bytes(&self) -> usize {
        let a: usize = self.activation.iter().map(KfacFactors::state_bytes).sum();
        let h: usize = self.bfgs.iter().map(|b| b.matrix.len() * 8).sum();
        let prev = self
            .previous
            .as_ref()
            .map_or(0, |p| p.iter().map(|(z, e)| (z.len() + e.len()) * 8).sum());
        a + h + prev
    }

    fn state(&self) -> CurvatureState<'_> {
        CurvatureState::KroneckerBfgs {
            activation: &self.activation,
            bfgs: &self.bfgs,
        }
    }
}

struct Seng {
    sketches: Vec<GramSketch>,
}

impl Algorithm for Seng {
    fn update_curvature(&mut self, ctx: &mut StepContext<'_>) -> Result<(), Failure> {
        let capture = ctx.net.capture().ok_or_else(|| global(NetworkError::NoForwardState))?;
        self.sketches = (0..ctx.net.layers().len())
            .map(|l| gram_sketch_build(capture, l, ctx.config.sketch_seed).map_err(at(l)))
            .collect::<Result<_, _>>()?;
        Ok(())
    }

    fn update_preconditioner(&mut self, _: f64) -> Result<(), Failure> {
        Ok(())
    }

    fn precondition(&mut self, ctx: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure> {
        per_layer(g, |l, gl| {
            smw_precondition_gram(&self.sketches[l], gl, ctx.config.damping).map_err(at(l))
        })
    }

    fn state_bytes(&self) -> usize {
        self.sketches.iter().map(GramSketch::state_bytes).sum()
    }

    fn state(&self) -> CurvatureState<'_> {
        CurvatureState::Gram(&self.sketches)
    }
}

struct HessianFree;

impl Algorithm for HessianFree {
    fn update_curvature(&mut self, _: &mut StepContext<'_>) -> Result<(), Failure> {
        Ok(())
    }

    fn update_preconditioner(&mut self, _: f64) -> Result<(), Failure> {
        Ok(())
    }

    fn precondition(&mut self, ctx: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure> {
        let cfg = CgConfig {
            tol: ctx.config.cg_tol,
            max_iter: ctx.config.cg_max_iter,
            damping: ctx.config.damping,
        };
        let batch = ctx.batch;
        let net = &mut *ctx.net;
        let out = cg_solve(
            |v: &[f64]| net.gauss_newton_vector_product(batch, v),
            &g.flatten(),
            &cfg,
        )
        .map_err(global)?;
        Ok(FlatGradient::unflatten(&g.shapes(), &out.x))
    }

    fn state_bytes(&self) -> usize {
        0
    }

    fn state(&self) -> CurvatureState<'_> {
        CurvatureState::Identity
    }

    fn uses_curvature(&self) -> bool {
        false
    }
}

struct AdamLike {
    moment: DiagonalSecondMoment,
}

impl Algorithm for AdamLike {
    fn update_curvature(&mut self, ctx: &mut StepContext<'_>) -> Result<(), Failure> {
        let g = ctx.grad.flatten();
        diagonal_update(&mut self.moment, &g, ctx.config.ema).map_err(global)
    }

    fn update_preconditioner(&mut self, _: f64) -> Result<(), Failure> {
        Ok(())
    }

    fn precondition(&mut self, ctx: &mut StepContext<'_>, g: &FlatGradient) -> Result<FlatGradient, Failure> {
        let out = elementwise_precondition(&self.moment, &g.flatten(), ctx.config.eps, Some(ctx.config.ema))
            .map_err(global)?;
        Ok(FlatGradient::unflatten(&g.shapes(), &out))
    }

    fn state_bytes(&self) -> usize {
        self.moment.state_bytes()
    }

    fn state(&self) -> CurvatureState<'_> {
        CurvatureState::Diagonal(&self.moment)
    }
}
