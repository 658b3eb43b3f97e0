//! Oracle checks run by `precond verify`.
//!
//! Each check compares a library result with an independently computed
//! reference and reports the observed error next to its tolerance. A
//! [`Mutation`] deliberately breaks one computation so that the matching
//! check can be seen to fail.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use precond_core::curvature::{
    abs_hessian_dense, bfgs_update, dense_curvature_oracle, dense_hessian, plan_inner_loop, BfgsDamping, BfgsForm,
    BfgsState, CurvatureKind,
};
use precond_core::gradient_maker::{
    CurvatureState, FisherSource, GradientMaker, MakerKind, ModelCall, OutputFormat, PrecondConfig,
};
use precond_core::linalg::{
    cholesky, dot, kron, norm2, solve_spd, sym_eig, sym_power, triangular_solve, EigenvalueMode, Matrix, Vector,
};
use precond_core::network::{loss_value, Activation, Batch, LossKind, Network, Targets};
use precond_core::representation::kfac_statistics;
use precond_core::solvers::{cg_solve, psgd_criterion, psgd_update, smw_precondition, CgConfig, TriangularFactors};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Assembles K-FAC layer blocks as `A ⊗ B` instead of `B ⊗ A`.
    KfacVecOrder,
    /// Keeps signed eigenvalues where absolute values are required.
    SignedEigenvalues,
}

impl Mutation {
    pub const ALL: [Mutation; 2] = [Mutation::KfacVecOrder, Mutation::SignedEigenvalues];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::KfacVecOrder => "kfac-vec-order",
            Mutation::SignedEigenvalues => "signed-eigenvalues",
        }
    }

    /// The check this mutation is expected to break.
    pub fn target(self) -> &'static str {
        match self {
            Mutation::KfacVecOrder => "kfac-single-example-exact",
            Mutation::SignedEigenvalues => "abs-hessian-unit-condition",
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mutation {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    Above(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub bound: Bound,
    pub observed: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, bound: Bound, observed: f64) -> Self {
        let passed = match bound {
            Bound::AtMost(t) => observed <= t,
            Bound::AtLeast(t) => observed >= t,
            Bound::Above(t) => observed > t,
        };
        Self {
            name,
            bound,
            observed,
            passed,
            detail: String::new(),
        }
    }

    fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    /// Adds a further condition that must hold for the check to pass.
    fn require(mut self, ok: bool, why: &str) -> Self {
        if !ok {
            self.passed = false;
            if !self.detail.is_empty() {
                self.detail.push_str("; ");
            }
            self.detail.push_str(why);
        }
        self
    }

    fn failed(name: &'static str, bound: Bound, err: impl fmt::Display) -> Self {
        Self::new(name, bound, f64::NAN).require(false, &err.to_string())
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let bound = match self.bound {
            Bound::AtMost(t) => format!("<= {t:.0e}"),
            Bound::AtLeast(t) => format!(">= {t}"),
            Bound::Above(t) => format!("> {t}"),
        };
        write!(
            f,
            "{status}  {:<30} observed {:<12.3e} tolerance {bound}",
            self.name, self.observed
        )?;
        if !self.detail.is_empty() {
            write!(f, "  ({})", self.detail)?;
        }
        Ok(())
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_targets(rng: &mut impl Rng, loss: LossKind, n: usize, k: usize) -> Targets {
    match loss {
        LossKind::CrossEntropy => Targets::Classes((0..n).map(|_| rng.random_range(0..k)).collect()),
        LossKind::Mse => Targets::Values(random_matrix(rng, n, k)),
    }
}

fn problem(seed: u64, dims: &[usize], act: Activation, loss: LossKind, n: usize) -> (Network, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::mlp(dims, act, loss, &mut rng);
    let x = random_matrix(&mut rng, n, dims[0]);
    let t = random_targets(&mut rng, loss, n, *dims.last().expect("nonempty dims"));
    (net, Batch::new(x, t))
}

fn rel_frobenius(a: &Matrix, reference: &Matrix) -> f64 {
    a.sub(reference).frobenius_norm() / reference.frobenius_norm().max(f64::MIN_POSITIVE)
}

fn rel_vec(a: &[f64], reference: &[f64]) -> f64 {
    let diff: Vector = a.iter().zip(reference).map(|(x, y)| x - y).collect();
    norm2(&diff) / norm2(reference).max(f64::MIN_POSITIVE)
}

const LOSSES: [LossKind; 2] = [LossKind::CrossEntropy, LossKind::Mse];

/// Fisher from the per-class backward passes against `JᵀHJ` on five random
/// nets per loss.
pub fn fisher_equals_ggn() -> Check {
    const NAME: &str = "fisher-equals-ggn";
    let bound = Bound::AtMost(1e-6);
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for seed in 0..5u64 {
        for loss in LOSSES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [rng.random_range(2..6), rng.random_range(2..9), rng.random_range(2..5)];
            let (mut net, batch) = problem(10 + seed, &dims, Activation::Tanh, loss, 8);
            largest = largest.max(net.param_count());
            let f = dense_curvature_oracle(&mut net, &batch, CurvatureKind::Fisher, &mut rng);
            let g = dense_curvature_oracle(&mut net, &batch, CurvatureKind::Ggn, &mut rng);
            match (f, g) {
                (Ok(f), Ok(g)) => worst = worst.max(rel_frobenius(&f, &g)),
                (Err(e), _) | (_, Err(e)) => return Check::failed(NAME, bound, e),
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Check::new(NAME, bound, worst)
        .detail(format!("10 nets, P <= {largest}, {secs:.2} s"))
        .require(largest <= 200, "a net exceeds 200 parameters")
        .require(secs < 10.0, "slower than 10 s")
}

/// For a single example the K-FAC factors from the exact Fisher passes
/// reproduce each layer's block of `JᵀHJ`.
pub fn kfac_single_example(mutation: Option<Mutation>) -> Check {
    const NAME: &str = "kfac-single-example-exact";
    let bound = Bound::AtMost(1e-10);
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        for loss in LOSSES {
            let (mut net, batch) = problem(20 + seed, &[3, 4, 3], Activation::Tanh, loss, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let oracle = match dense_curvature_oracle(&mut net, &batch, CurvatureKind::Ggn, &mut rng) {
                Ok(m) => m,
                Err(e) => return Check::failed(NAME, bound, e),
            };
            let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
                let logits = net.forward(&batch.inputs, true)?;
                let plan = plan_inner_loop(CurvatureKind::Fisher, loss, &logits, &batch.targets, &mut rng)?;
                let shapes = net.layer_shapes();
                let mut a = Vec::new();
                let mut b: Vec<Matrix> = shapes.iter().map(|&(o, _)| Matrix::zeros(o, o)).collect();
                for pass in &plan.passes {
                    net.backward(&pass.output_grad(loss, &logits)?, true)?;
                    let cap = net.capture().ok_or("capture missing")?;
                    a.clear();
                    for (l, bl) in b.iter_mut().enumerate() {
                        let (al, el) = kfac_statistics(cap.activations(l)?, cap.errors(l)?);
                        bl.axpy(1.0, &el);
                        a.push(al);
                    }
                }
                let mut offset = 0;
                let mut err: f64 = 0.0;
                for (l, &(o, i)) in shapes.iter().enumerate() {
                    let block = match mutation {
                        Some(Mutation::KfacVecOrder) => kron(&a[l], &b[l]),
                        _ => kron(&b[l], &a[l]),
                    };
                    let size = o * i;
                    for r in 0..size {
                        for c in 0..size {
                            err = err.max((block[(r, c)] - oracle[(offset + r, offset + c)]).abs());
                        }
                    }
                    offset += size;
                }
                Ok(err)
            })();
            match result {
                Ok(err) => worst = worst.max(err),
                Err(e) => return Check::failed(NAME, bound, e),
            }
        }
    }
    Check::new(NAME, bound, worst).detail("6 single-example problems, max abs error per layer block")
}

/// Woodbury solve against the dense damped inverse.
pub fn smw_identity() -> Check {
    const NAME: &str = "smw-identity";
    let bound = Bound::AtMost(1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=16);
        let d = rng.random_range(1..=64);
        let tau = 10f64.powf(rng.random_range(-3.0..0.0));
        let u = random_matrix(&mut rng, n, d);
        let g: Vector = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let curvature = u.matmul_tn(&u).scale(1.0 / n as f64);
        let expected = match solve_spd(&curvature, tau, &Matrix::column(&g)) {
            Ok(x) => x.into_vec(),
            Err(e) => return Check::failed(NAME, bound, e),
        };
        match smw_precondition(&u, &g, tau, n) {
            Ok(x) => worst = worst.max(rel_vec(&x, &expected)),
            Err(e) => return Check::failed(NAME, bound, e),
        }
    }
    Check::new(NAME, bound, worst).detail("20 instances, n <= 16, d <= 64, relative error")
}

/// Conjugate gradient on the finite-difference Gauss-Newton operator against
/// a Cholesky solve with the dense `JᵀHJ`.
pub fn cg_matches_direct_solve() -> Check {
    const NAME: &str = "cg-ggn-direct-solve";
    let bound = Bound::AtMost(1e-5);
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    let tau = 1e-2;
    for (seed, dims) in [(40u64, [3, 4, 2]), (41, [4, 5, 3]), (42, [2, 6, 4])] {
        for loss in LOSSES {
            let (mut net, batch) = problem(seed, &dims, Activation::Tanh, loss, 6);
            largest = largest.max(net.param_count());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
                let g = net.loss_and_gradient(&batch)?.1.flatten();
                let ggn = dense_curvature_oracle(&mut net, &batch, CurvatureKind::Ggn, &mut rng)?;
                let expected = solve_spd(&ggn, tau, &Matrix::column(&g))?;
                let cfg = CgConfig {
                    tol: 1e-10,
                    max_iter: 500,
                    damping: tau,
                };
                let out = cg_solve(|v: &[f64]| net.gauss_newton_vector_product(&batch, v), &g, &cfg)?;
                let err = out
                    .x
                    .iter()
                    .zip(expected.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                Ok(err / (1.0 + expected.max_abs()))
            })();
            match result {
                Ok(err) => worst = worst.max(err),
                Err(e) => return Check::failed(NAME, bound, e),
            }
        }
    }
    Check::new(NAME, bound, worst)
        .detail(format!("6 systems, P <= {largest}"))
        .require(largest <= 50, "a net exceeds 50 parameters")
}

/// Direct-form update satisfies `B⁺s = y` when `sᵀy > 0`.
pub fn bfgs_secant() -> Check {
    const NAME: &str = "bfgs-secant";
    let bound = Bound::AtMost(1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    while trials < 50 {
        let d = rng.random_range(2..9);
        let m = random_matrix(&mut rng, d, d);
        let b = m.matmul_nt(&m).add_identity(0.5);
        let s: Vector = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y: Vector = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if dot(&s, &y) < 0.0 {
            y.iter_mut().for_each(|v| *v = -*v);
        }
        if dot(&s, &y) < 1e-3 {
            continue;
        }
        trials += 1;
        let mut st = BfgsState {
            matrix: b,
            form: BfgsForm::Direct,
        };
        if let Err(e) = bfgs_update(&mut st, &s, &y, BfgsDamping::None) {
            return Check::failed(NAME, bound, e);
        }
        let bs = st.matrix.matvec(&s);
        let err = bs.iter().zip(&y).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        worst = worst.max(err / (1.0 + st.matrix.max_abs()));
    }
    Check::new(NAME, bound, worst).detail("50 random pairs with sᵀy > 0")
}

/// Smallest eigenvalue seen over 100 sequential damped updates in either
/// form, with curvature pairs that are sometimes negative.
pub fn bfgs_positive_definite() -> Check {
    const NAME: &str = "bfgs-positive-definite";
    let bound = Bound::Above(0.0);
    let mut lowest = f64::INFINITY;
    for (seed, form) in [(60u64, BfgsForm::Direct), (61, BfgsForm::Inverse)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 5;
        let m = random_matrix(&mut rng, d, d);
        let model = m.matmul_nt(&m).add_identity(0.1);
        let mut st = BfgsState::identity(d, form);
        for _ in 0..100 {
            let s: Vector = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut y = model.matvec(&s);
            y.iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
            if let Err(e) = bfgs_update(&mut st, &s, &y, BfgsDamping::Powell) {
                return Check::failed(NAME, bound, e);
            }
            match sym_eig(&st.matrix) {
                Ok(eig) => lowest = lowest.min(eig.eigenvalues[0]),
                Err(e) => return Check::failed(NAME, bound, e),
            }
        }
    }
    Check::new(NAME, bound, lowest).detail("min eigenvalue over 2 x 100 Powell-damped updates")
}

/// Eigenvalues of `(H_{|λ|} + 1e-12 I)⁻¹ H_{|λ|}` on small MSE nets, computed
/// through the symmetric similarity `L⁻¹ H_{|λ|} L⁻ᵀ`.
pub fn abs_hessian_unit_condition(mutation: Option<Mutation>) -> Check {
    const NAME: &str = "abs-hessian-unit-condition";
    let bound = Bound::AtMost(1e-6);
    let mut worst: f64 = 0.0;
    let mut indefinite = 0;
    for seed in 0..4u64 {
        let (mut net, batch) = problem(70 + seed, &[2, 3, 2], Activation::Tanh, LossKind::Mse, 12);
        let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
            let h = dense_hessian(&mut net, &batch)?;
            if sym_eig(&h)?.eigenvalues[0] < 0.0 {
                indefinite += 1;
            }
            let habs = match mutation {
                Some(Mutation::SignedEigenvalues) => sym_power(&h, 1.0, 0.0, EigenvalueMode::Signed)?,
                _ => abs_hessian_dense(&mut net, &batch)?,
            };
            let l = cholesky(&habs, 1e-12)?;
            let lt = l.transpose();
            let x = triangular_solve(&lt, &habs, true)?;
            let s = triangular_solve(&lt, &x.transpose(), true)?;
            let eig = sym_eig(&s.symmetrize())?;
            Ok(eig.eigenvalues.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max))
        })();
        match result {
            Ok(err) => worst = worst.max(err),
            Err(e) => return Check::failed(NAME, bound, e),
        }
    }
    Check::new(NAME, bound, worst).detail(format!("4 nets, {indefinite} with indefinite Hessian"))
}

fn fd_gradient(net: &mut Network, batch: &Batch, h: f64) -> Result<Vector, Box<dyn std::error::Error>> {
    let theta = net.params();
    let mut g = vec![0.0; theta.len()];
    let mut shifted = theta.clone();
    for j in 0..theta.len() {
        shifted[j] = theta[j] + h;
        net.set_params(&shifted);
        let plus = net.loss(batch)?;
        shifted[j] = theta[j] - h;
        net.set_params(&shifted);
        let minus = net.loss(batch)?;
        shifted[j] = theta[j];
        g[j] = (plus - minus) / (2.0 * h);
    }
    net.set_params(&theta);
    Ok(g)
}

/// Hessian from second-order central differences of the loss value alone.
fn fd_hessian(net: &mut Network, batch: &Batch, h: f64) -> Result<Matrix, Box<dyn std::error::Error>> {
    let theta = net.params();
    let p = theta.len();
    let mut eval = |dj: (usize, f64), dk: (usize, f64)| -> Result<f64, Box<dyn std::error::Error>> {
        let mut t = theta.clone();
        t[dj.0] += dj.1;
        t[dk.0] += dk.1;
        net.set_params(&t);
        Ok(loss_value(
            net.loss_kind(),
            &net.predict(&batch.inputs),
            &batch.targets,
        )?)
    };
    let mut hm = Matrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let v = (eval((j, h), (k, h))? - eval((j, h), (k, -h))? - eval((j, -h), (k, h))? + eval((j, -h), (k, -h))?)
                / (4.0 * h * h);
            hm[(j, k)] = v;
            hm[(k, j)] = v;
        }
    }
    net.set_params(&theta);
    Ok(hm)
}

/// Backprop gradient against central differences of the loss.
pub fn gradient_check() -> Check {
    const NAME: &str = "gradient-finite-differences";
    let bound = Bound::AtMost(1e-5);
    let mut worst: f64 = 0.0;
    for (seed, act) in [
        (80u64, Activation::Tanh),
        (81, Activation::Relu),
        (82, Activation::Identity),
    ] {
        for loss in LOSSES {
            let (mut net, batch) = problem(seed, &[4, 5, 3], act, loss, 7);
            let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
                let g = net.loss_and_gradient(&batch)?.1.flatten();
                let fd = fd_gradient(&mut net, &batch, 1e-6)?;
                Ok(rel_vec(&g, &fd))
            })();
            match result {
                Ok(err) => worst = worst.max(err),
                Err(e) => return Check::failed(NAME, bound, e),
            }
        }
    }
    Check::new(NAME, bound, worst).detail("6 nets, relative error")
}

/// Columns of the Hessian-vector product against a Hessian built from loss
/// values only.
pub fn hvp_check() -> Check {
    const NAME: &str = "hvp-dense-hessian";
    let bound = Bound::AtMost(1e-4);
    let mut worst: f64 = 0.0;
    for (seed, loss) in [(90u64, LossKind::CrossEntropy), (91, LossKind::Mse)] {
        let (mut net, batch) = problem(seed, &[3, 4, 2], Activation::Tanh, loss, 6);
        let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
            let reference = fd_hessian(&mut net, &batch, 1e-4)?;
            let p = net.param_count();
            let mut hv = Matrix::zeros(p, p);
            let mut e = vec![0.0; p];
            for j in 0..p {
                e[j] = 1.0;
                hv.set_col(j, &net.hessian_vector_product(&batch, &e)?);
                e[j] = 0.0;
            }
            Ok(rel_frobenius(&hv, &reference))
        })();
        match result {
            Ok(err) => worst = worst.max(err),
            Err(e) => return Check::failed(NAME, bound, e),
        }
    }
    Check::new(NAME, bound, worst).detail("2 nets, relative Frobenius error")
}

/// Largest relative rise of the PSGD fitting criterion over 100 updates on
/// a fixed quadratic.
pub fn psgd_monotone() -> Check {
    const NAME: &str = "psgd-criterion-nonincreasing";
    let bound = Bound::AtMost(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (d_out, d_in) = (3, 4);
    let m = random_matrix(&mut rng, d_out * d_in, d_out * d_in);
    let h = m.matmul_nt(&m).add_identity(0.1);
    let dt = random_matrix(&mut rng, d_out, d_in);
    let dg = Matrix::from_vec(d_out, d_in, h.matvec(dt.as_slice()));
    let mut f = TriangularFactors::identity(d_out, d_in, 0.002);
    let result = (|| -> Result<(f64, f64, f64), Box<dyn std::error::Error>> {
        let first = psgd_criterion(&f, &dt, &dg)?;
        let mut last = first;
        let mut rise: f64 = 0.0;
        for _ in 0..100 {
            psgd_update(&mut f, &dt, &dg)?;
            let c = psgd_criterion(&f, &dt, &dg)?;
            rise = rise.max((c - last) / last);
            last = c;
        }
        Ok((rise, first, last))
    })();
    match result {
        Ok((rise, first, last)) => {
            Check::new(NAME, bound, rise.max(0.0)).detail(format!("criterion {first:.4} -> {last:.4}"))
        }
        Err(e) => Check::failed(NAME, bound, e),
    }
}

fn interface_problem() -> (Network, Matrix, Targets) {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let net = Network::mlp(&[4, 5, 3], Activation::Tanh, LossKind::CrossEntropy, &mut rng);
    let x = random_matrix(&mut rng, 6, 4);
    (net, x, Targets::Classes(vec![0, 1, 2, 1, 0, 2]))
}

/// Stored gradients after three steps with the model output declared as a
/// tensor, sequence, mapping, record, or record of flattened parts.
pub fn stored_gradients(kind: MakerKind, format: OutputFormat) -> Result<Vec<u64>, Box<dyn std::error::Error>> {
    let (net, x, t) = interface_problem();
    let mut m = GradientMaker::new(net, kind, PrecondConfig::for_kind(kind), 3)?;
    let ce = LossKind::CrossEntropy;
    let call = ModelCall::new(x).format(format);
    match format {
        OutputFormat::Tensor => {
            let root = m.setup_model_call(call);
            m.setup_loss_call(ce, &root, t)?;
        }
        OutputFormat::Sequence => {
            let root = m.setup_model_call(call.with_loss(ce, t));
            m.setup_loss_repr(&root.index(1))?;
        }
        OutputFormat::Mapping => {
            let root = m.setup_model_call(call.with_loss(ce, t));
            m.setup_loss_repr(&root.key("loss"))?;
        }
        OutputFormat::Record => {
            let root = m.setup_model_call(call.with_loss(ce, t));
            m.setup_loss_repr(&root.field("loss"))?;
        }
        OutputFormat::Parts(_) => {
            let root = m.setup_model_call(call);
            m.setup_loss_call(ce, &root.field("parts").flatten(), t)?;
        }
    }
    for _ in 0..3 {
        m.forward_and_backward()?;
    }
    let g = m.network().grad().ok_or("no stored gradient")?;
    Ok(g.flatten().iter().map(|v| v.to_bits()).collect())
}

pub const OUTPUT_FORMATS: [OutputFormat; 4] = [
    OutputFormat::Tensor,
    OutputFormat::Sequence,
    OutputFormat::Mapping,
    OutputFormat::Record,
];

/// Number of (maker, format) pairs whose stored gradient differs in any bit
/// from the plain-tensor case.
pub fn interface_equivalence() -> Check {
    const NAME: &str = "output-formats-bit-identical";
    let bound = Bound::AtMost(0.0);
    let mut mismatches = 0;
    let mut compared = 0;
    for kind in MakerKind::ALL {
        let reference = match stored_gradients(kind, OutputFormat::Tensor) {
            Ok(r) => r,
            Err(e) => return Check::failed(NAME, bound, format!("{kind}: {e}")),
        };
        for format in OUTPUT_FORMATS.into_iter().skip(1).chain([OutputFormat::Parts(2)]) {
            compared += 1;
            match stored_gradients(kind, format) {
                Ok(g) if g == reference => {}
                Ok(_) => mismatches += 1,
                Err(e) => return Check::failed(NAME, bound, format!("{kind} {format:?}: {e}")),
            }
        }
    }
    Check::new(NAME, bound, mismatches as f64).detail(format!("{compared} maker/format pairs against the tensor case"))
}

/// Per interval-driven maker: update counts over 95 steps at T = 10 and
/// checksum changes inside an interval window.
pub fn schedule_windows(
    kind: MakerKind,
    interval: u64,
    steps: u64,
) -> Result<(u64, u64, u64), Box<dyn std::error::Error>> {
    let (net, x, t) = interface_problem();
    let cfg = PrecondConfig::for_kind(kind).with_interval(interval);
    let mut m = GradientMaker::new(net, kind, cfg, 5)?;
    let root = m.setup_model_call(ModelCall::new(x));
    m.setup_loss_call(LossKind::CrossEntropy, &root, t)?;
    let mut window = 0;
    let mut changes = 0;
    for step in 0..steps {
        m.forward_and_backward()?;
        let sum = m.checksum();
        if step % interval == 0 {
            window = sum;
        } else if sum != window {
            changes += 1;
        }
    }
    Ok((
        m.counter().curvature_updates,
        m.counter().preconditioner_updates,
        changes,
    ))
}

pub fn scheduling() -> Check {
    const NAME: &str = "interval-schedule";
    let bound = Bound::AtMost(0.0);
    let mut violations = 0;
    let mut makers = 0;
    for kind in MakerKind::ALL.into_iter().filter(|k| k.uses_interval()) {
        makers += 1;
        match schedule_windows(kind, 10, 95) {
            Ok((10, 10, 0)) => {}
            Ok(_) => violations += 1,
            Err(e) => return Check::failed(NAME, bound, format!("{kind}: {e}")),
        }
    }
    Check::new(NAME, bound, violations as f64).detail(format!(
        "{makers} makers, T = 10 over 95 steps, 10 updates and fixed state per window"
    ))
}

/// Plain maker reports no state and K-FAC reports both factors and both
/// inverses per layer.
pub fn state_bytes_accounting() -> Check {
    const NAME: &str = "state-bytes-accounting";
    let bound = Bound::AtMost(0.0);
    let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
        let mut off = 0.0;
        for kind in [MakerKind::Plain, MakerKind::Kfac(FisherSource::MonteCarlo)] {
            let (net, x, t) = interface_problem();
            let shapes = net.layer_shapes();
            let mut m = GradientMaker::new(net, kind, PrecondConfig::for_kind(kind), 0)?;
            let root = m.setup_model_call(ModelCall::new(x));
            m.setup_loss_call(LossKind::CrossEntropy, &root, t)?;
            m.forward_and_backward()?;
            let inverses = match m.state() {
                CurvatureState::Kronecker(fs) => usize::from(fs.iter().all(|f| f.a_inv.is_some() && f.b_inv.is_some())),
                _ => 0,
            };
            let expected: usize = match kind {
                MakerKind::Plain => 0,
                _ => shapes.iter().map(|&(o, i)| 8 * (i * i + o * o) * (1 + inverses)).sum(),
            };
            off += (m.state_bytes() as f64 - expected as f64).abs();
        }
        Ok(off)
    })();
    match result {
        Ok(off) => Check::new(NAME, bound, off).detail("bytes off the closed form"),
        Err(e) => Check::failed(NAME, bound, e),
    }
}

/// Plain maker's stored gradient against direct backprop, bit for bit.
pub fn plain_matches_backprop() -> Check {
    const NAME: &str = "plain-maker-equals-backprop";
    let bound = Bound::AtMost(0.0);
    let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
        let (mut net, x, t) = interface_problem();
        let direct = net.loss_and_gradient(&Batch::new(x.clone(), t.clone()))?.1.flatten();
        let stored: Vec<f64> = stored_gradients(MakerKind::Plain, OutputFormat::Tensor)?
            .into_iter()
            .map(f64::from_bits)
            .collect();
        Ok(stored
            .iter()
            .zip(&direct)
            .filter(|(s, d)| s.to_bits() != (3.0 * **d).to_bits())
            .count() as f64)
    })();
    match result {
        Ok(n) => Check::new(NAME, bound, n).detail("entries differing after 3 accumulated steps"),
        Err(e) => Check::failed(NAME, bound, e),
    }
}

/// Every check, in report order.
pub fn run_checks(mutation: Option<Mutation>) -> Vec<Check> {
    vec![
        fisher_equals_ggn(),
        kfac_single_example(mutation),
        smw_identity(),
        cg_matches_direct_solve(),
        bfgs_secant(),
        bfgs_positive_definite(),
        abs_hessian_unit_condition(mutation),
        gradient_check(),
        hvp_check(),
        psgd_monotone(),
        interface_equivalence(),
        scheduling(),
        state_bytes_accounting(),
        plain_matches_backprop(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_names_round_trip() {
        for m in Mutation::ALL {
            assert_eq!(m.name().parse::<Mutation>().unwrap(), m);
        }
        assert!("off-by-one".parse::<Mutation>().is_err());
    }

    #[test]
    fn check_bounds_and_display() {
        let c = Check::new("x", Bound::AtMost(1e-6), 2e-7);
        assert!(c.passed);
        assert!(c.to_string().starts_with("PASS  x"));
        assert!(!Check::new("x", Bound::Above(0.0), 0.0).passed);
        assert!(!Check::new("x", Bound::AtMost(1.0), f64::NAN).passed);
        let c = Check::new("x", Bound::AtMost(1.0), 0.5).require(false, "too slow");
        assert!(!c.passed);
        assert!(c.to_string().contains("too slow"));
    }

    #[test]
    fn each_mutation_breaks_its_target() {
        assert!(kfac_single_example(None).passed);
        assert!(!kfac_single_example(Some(Mutation::KfacVecOrder)).passed);
        assert!(abs_hessian_unit_condition(None).passed);
        assert!(!abs_hessian_unit_condition(Some(Mutation::SignedEigenvalues)).passed);
    }
}
