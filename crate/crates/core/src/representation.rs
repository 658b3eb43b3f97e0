//! Compact per-layer curvature representations.
//!
//! Layer blocks use the row-major vec convention `vec(e āᵀ) = e ⊗ ā`, so a
//! Kronecker-factored block is `B ⊗ A` with `B` acting on the output side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{kron, sym_eig, LinalgError, Matrix, Vector};
use crate::network::{CaptureStore, NetworkError};

/// Largest block dimension [`expand_to_dense`] will materialize.
pub const DENSE_LIMIT: usize = 5000;
/// Per-side sketch size.
pub const SKETCH_SIZE: usize = 256;
/// Rank kept along a feature-map axis.
pub const SKETCH_RANK: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepresentationError {
    #[error(transparent)]
    Capture(#[from] NetworkError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dense block of dimension {dim} exceeds the oracle limit")]
    ScaleExceeded { dim: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, RepresentationError>;

/// `A` (activation side) and `B` (output-gradient side) factors of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacFactors {
    pub a: Matrix,
    pub b: Matrix,
    pub a_inv: Option<Matrix>,
    pub b_inv: Option<Matrix>,
    /// Damping the cached inverses were built with.
    pub inverse_damping: Option<f64>,
}

impl KfacFactors {
    pub fn zeros(d_in_aug: usize, d_out: usize) -> Self {
        Self {
            a: Matrix::zeros(d_in_aug, d_in_aug),
            b: Matrix::zeros(d_out, d_out),
            a_inv: None,
            b_inv: None,
            inverse_damping: None,
        }
    }

    pub fn identity(d_in_aug: usize, d_out: usize) -> Self {
        Self {
            a: Matrix::identity(d_in_aug),
            b: Matrix::identity(d_out),
            ..Self::zeros(0, 0)
        }
    }

    pub fn state_bytes(&self) -> usize {
        let f = (self.a.len() + self.b.len()) * 8;
        let inv = self.a_inv.as_ref().map_or(0, Matrix::len) + self.b_inv.as_ref().map_or(0, Matrix::len);
        f + inv * 8
    }
}

/// `X ← α·X + (1-α)·S`.
fn ema_into(target: &mut Matrix, stat: &Matrix, ema: f64) {
    target.scale_mut(ema);
    target.axpy(1.0 - ema, stat);
}

/// Batch second moments `mean_i(ā_i ā_iᵀ)` and `mean_i(e_i e_iᵀ)`.
pub fn kfac_statistics(activations: &Matrix, errors: &Matrix) -> (Matrix, Matrix) {
    let n = activations.rows() as f64;
    let a = activations.matmul_tn(activations).scale(1.0 / n).symmetrize();
    let b = errors.matmul_tn(errors).scale(1.0 / n).symmetrize();
    (a, b)
}

/// Exponential-moving-average update of one layer's factors from the
/// captured activations and output-gradients. `ema = 0` keeps only the
/// current batch.
pub fn kfac_update(factors: &mut KfacFactors, capture: &CaptureStore, layer: usize, ema: f64) -> Result<()> {
    let (a, b) = kfac_statistics(capture.activations(layer)?, capture.errors(layer)?);
    if a.shape() != factors.a.shape() || b.shape() != factors.b.shape() {
        return Err(RepresentationError::ShapeMismatch(format!(
            "factor shapes {:?}/{:?} vs statistics {:?}/{:?}",
            factors.a.shape(),
            factors.b.shape(),
            a.shape(),
            b.shape()
        )));
    }
    kfac_accumulate(factors, &a, &b, ema);
    Ok(())
}

/// EMA step of both factors from precomputed statistics; drops cached
/// inverses.
pub fn kfac_accumulate(factors: &mut KfacFactors, a: &Matrix, b: &Matrix, ema: f64) {
    ema_into(&mut factors.a, a, ema);
    ema_into(&mut factors.b, b, ema);
    factors.a_inv = None;
    factors.b_inv = None;
    factors.inverse_damping = None;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Accumulation {
    /// Running sum, every weight 1.
    Sum,
    /// `X ← α·X + (1-α)·S`.
    Ema(f64),
}

/// Left (`d_out²`) and right (`(d_in+1)²`) second-moment factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ShampooFactors {
    pub l: Matrix,
    pub r: Matrix,
    pub mode: Accumulation,
    /// Cached `(L+τI)^{-1/4}`, `(R+τI)^{-1/4}` and the damping used.
    pub roots: Option<(Matrix, Matrix, f64)>,
}

impl ShampooFactors {
    pub fn zeros(d_out: usize, d_in_aug: usize, mode: Accumulation) -> Self {
        Self {
            l: Matrix::zeros(d_out, d_out),
            r: Matrix::zeros(d_in_aug, d_in_aug),
            mode,
            roots: None,
        }
    }

    pub fn state_bytes(&self) -> usize {
        let roots = self.roots.as_ref().map_or(0, |(l, r, _)| l.len() + r.len());
        (self.l.len() + self.r.len() + roots) * 8
    }

    pub(crate) fn accumulate(&mut self, g: &Matrix, mode: Accumulation) {
        let left = g.matmul_nt(g).symmetrize();
        let right = g.matmul_tn(g).symmetrize();
        match mode {
            Accumulation::Sum => {
                self.l.axpy(1.0, &left);
                self.r.axpy(1.0, &right);
            }
            Accumulation::Ema(ema) => {
                ema_into(&mut self.l, &left, ema);
                ema_into(&mut self.r, &right, ema);
            }
        }
        self.roots = None;
    }
}

/// `L ← acc(L, G Gᵀ)`, `R ← acc(R, Gᵀ G)`.
pub fn shampoo_update(factors: &mut ShampooFactors, g: &Matrix) -> Result<()> {
    if g.rows() != factors.l.rows() || g.cols() != factors.r.rows() {
        return Err(RepresentationError::ShapeMismatch(format!(
            "gradient {:?} vs factors {}x{}",
            g.shape(),
            factors.l.rows(),
            factors.r.rows()
        )));
    }
    let mode = factors.mode;
    factors.accumulate(g, mode);
    Ok(())
}

/// Elementwise second moment of the flattened gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalSecondMoment {
    pub v: Vector,
    pub steps: u64,
}

impl DiagonalSecondMoment {
    pub fn zeros(len: usize) -> Self {
        Self {
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn state_bytes(&self) -> usize {
        self.v.len() * 8
    }
}

/// `v ← α·v + (1-α)·g⊙g`.
pub fn diagonal_update(state: &mut DiagonalSecondMoment, g: &[f64], ema: f64) -> Result<()> {
    if g.len() != state.v.len() {
        return Err(RepresentationError::ShapeMismatch(format!(
            "gradient length {} vs state length {}",
            g.len(),
            state.v.len()
        )));
    }
    for (v, &gi) in state.v.iter_mut().zip(g) {
        *v = ema * *v + (1.0 - ema) * gi * gi;
    }
    state.steps += 1;
    Ok(())
}

/// Sparse sign sketch with one nonzero per input coordinate. Identity when
/// the input dimension already fits.
#[derive(Clone, Debug, PartialEq)]
pub struct CountSketch {
    pub input_dim: usize,
    pub output_dim: usize,
    bucket: Vec<usize>,
    sign: Vec<f64>,
}

impl CountSketch {
    pub fn new(input_dim: usize, limit: usize, seed: u64) -> Self {
        if input_dim <= limit {
            return Self {
                input_dim,
                output_dim: input_dim,
                bucket: (0..input_dim).collect(),
                sign: vec![1.0; input_dim],
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Every output coordinate gets at least one input: shuffle a
        // covering assignment rather than hashing independently.
        let mut bucket: Vec<usize> = (0..input_dim).map(|j| j % limit).collect();
        for i in (1..input_dim).rev() {
            let j = rng.random_range(0..=i);
            bucket.swap(i, j);
        }
        let sign = (0..input_dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Self {
            input_dim,
            output_dim: limit,
            bucket,
            sign,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.input_dim == self.output_dim
    }

    /// Applies the sketch to every row of `m`.
    pub fn apply_rows(&self, m: &Matrix) -> Matrix {
        if self.is_identity() {
            return m.clone();
        }
        let mut out = Matrix::zeros(m.rows(), self.output_dim);
        for i in 0..m.rows() {
            let src = m.row(i);
            let dst = out.row_mut(i);
            for (j, &x) in src.iter().enumerate() {
                dst[self.bucket[j]] += self.sign[j] * x;
            }
        }
        out
    }
}

/// Gram representation of one layer's per-example gradients.
///
/// The exact factors `ā_i`, `e_i` are kept for products with `U` and `Uᵀ`;
/// the `n × n` Gram matrix `U Uᵀ` is computed from the sketched factors as
/// `(Ẽ Ẽᵀ) ⊙ (Ã Ãᵀ)`.
#[derive(Clone, Debug)]
pub struct GramSketch {
    pub activations: Matrix,
    pub errors: Matrix,
    pub sketched_activations: Matrix,
    pub sketched_errors: Matrix,
    pub gram: Matrix,
    pub sketch_in: CountSketch,
    pub sketch_out: CountSketch,
}

impl GramSketch {
    pub fn batch_size(&self) -> usize {
        self.activations.rows()
    }

    pub fn is_exact(&self) -> bool {
        self.sketch_in.is_identity() && self.sketch_out.is_identity()
    }

    /// Width of a sketched per-example gradient row.
    pub fn sketch_width(&self) -> usize {
        self.sketch_in.output_dim * self.sketch_out.output_dim
    }

    /// Materialized `U`, row `i = vec(ẽ_i ã_iᵀ)`.
    pub fn u_matrix(&self) -> Matrix {
        let n = self.batch_size();
        let (si, so) = (self.sketch_in.output_dim, self.sketch_out.output_dim);
        let mut u = Matrix::zeros(n, si * so);
        for i in 0..n {
            let a = self.sketched_activations.row(i);
            let e = self.sketched_errors.row(i);
            let row = u.row_mut(i);
            for (k, &ek) in e.iter().enumerate() {
                for (dst, &aj) in row[k * si..(k + 1) * si].iter_mut().zip(a) {
                    *dst = ek * aj;
                }
            }
        }
        u
    }

    pub fn state_bytes(&self) -> usize {
        let mut total = self.activations.len() + self.errors.len() + self.gram.len();
        if !self.sketch_in.is_identity() {
            total += self.sketched_activations.len() + self.sketch_in.input_dim * 2;
        }
        if !self.sketch_out.is_identity() {
            total += self.sketched_errors.len() + self.sketch_out.input_dim * 2;
        }
        total * 8
    }
}

fn sketch_seed(seed: u64, layer: usize, side: u64) -> u64 {
    seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ side.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Builds the Gram representation of `layer` from a populated capture.
pub fn gram_sketch_build(capture: &CaptureStore, layer: usize, seed: u64) -> Result<GramSketch> {
    let activations = capture.activations(layer)?.clone();
    let errors = capture.errors(layer)?.clone();
    let sketch_in = CountSketch::new(activations.cols(), SKETCH_SIZE, sketch_seed(seed, layer, 1));
    let sketch_out = CountSketch::new(errors.cols(), SKETCH_SIZE, sketch_seed(seed, layer, 2));
    let sketched_activations = sketch_in.apply_rows(&activations);
    let sketched_errors = sketch_out.apply_rows(&errors);
    let ga = sketched_activations.matmul_nt(&sketched_activations);
    let ge = sketched_errors.matmul_nt(&sketched_errors);
    let n = activations.rows();
    let gram = Matrix::from_fn(n, n, |i, j| ga[(i, j)] * ge[(i, j)]).symmetrize();
    Ok(GramSketch {
        activations,
        errors,
        sketched_activations,
        sketched_errors,
        gram,
        sketch_in,
        sketch_out,
    })
}

/// Truncates the shared feature axis of a per-example pair (`e`: `D_out×r`,
/// `a`: `D_in×r`) to at most `max_rank` columns, keeping the best rank-k
/// approximation of `e aᵀ`. Pairs already within the rank are returned as is.
pub fn reduce_rank(e: &Matrix, a: &Matrix, max_rank: usize) -> Result<(Matrix, Matrix)> {
    if e.cols() != a.cols() {
        return Err(RepresentationError::ShapeMismatch(format!(
            "feature axes differ: {} vs {}",
            e.cols(),
            a.cols()
        )));
    }
    if e.cols() <= max_rank {
        return Ok((e.clone(), a.clone()));
    }
    let m = e.matmul_nt(a);
    let eig = sym_eig(&m.matmul_tn(&m))?;
    let d_in = a.rows();
    let k = max_rank.min(d_in);
    let mut e_out = Matrix::zeros(e.rows(), k);
    let mut a_out = Matrix::zeros(d_in, k);
    for c in 0..k {
        let idx = d_in - 1 - c;
        let w = eig.eigenvectors.col(idx);
        let mw = m.matvec(&w);
        let sigma = crate::linalg::norm2(&mw);
        if sigma == 0.0 {
            continue;
        }
        let root = sigma.sqrt();
        e_out.set_col(c, &mw.iter().map(|x| x / sigma * root).collect::<Vec<_>>());
        a_out.set_col(c, &w.iter().map(|x| x * root).collect::<Vec<_>>());
    }
    Ok((e_out, a_out))
}

/// A layer block in one of the compact formats.
pub enum LayerRepr<'a> {
    Kronecker(&'a KfacFactors),
    /// The slice of a diagonal state covering one layer.
    Diagonal(&'a [f64]),
    Gram(&'a GramSketch),
}

/// Dense matrix for a compact layer block; test and oracle use only.
pub fn expand_to_dense(repr: &LayerRepr<'_>) -> Result<Matrix> {
    let dim = match repr {
        LayerRepr::Kronecker(f) => f.a.rows() * f.b.rows(),
        LayerRepr::Diagonal(v) => v.len(),
        LayerRepr::Gram(s) => s.sketch_width(),
    };
    if dim > DENSE_LIMIT {
        return Err(RepresentationError::ScaleExceeded { dim });
    }
    Ok(match repr {
        LayerRepr::Kronecker(f) => kron(&f.b, &f.a),
        LayerRepr::Diagonal(v) => Matrix::from_diag(v),
        LayerRepr::Gram(s) => {
            let u = s.u_matrix();
            u.matmul_tn(&u).scale(1.0 / s.batch_size() as f64)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;

    fn capture(acts: Matrix, errs: Matrix) -> CaptureStore {
        let n = acts.rows();
        let d_out = errs.cols();
        CaptureStore {
            activations: vec![acts],
            preactivations: vec![Matrix::zeros(n, d_out)],
            errors: Some(vec![errs]),
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn kfac_single_example_is_rank_one_exact() {
        let cap = capture(Matrix::from_rows(&[&[1.0, 1.0]]), Matrix::from_rows(&[&[2.0]]));
        let mut f = KfacFactors::zeros(2, 1);
        kfac_update(&mut f, &cap, 0, 0.0).unwrap();
        assert_eq!(f.a, Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]));
        assert_eq!(f.b, Matrix::from_rows(&[&[4.0]]));
        let g = [2.0, 2.0];
        let dense = expand_to_dense(&LayerRepr::Kronecker(&f)).unwrap();
        assert_eq!(dense, Matrix::outer(&g, &g));
    }

    #[test]
    fn kfac_zero_errors_and_frozen_ema() {
        let cap = capture(Matrix::from_rows(&[&[1.0, 1.0]]), Matrix::zeros(1, 2));
        let mut f = KfacFactors::zeros(2, 2);
        kfac_update(&mut f, &cap, 0, 0.0).unwrap();
        assert_eq!(f.b, Matrix::zeros(2, 2));
        assert_eq!(f.a[(1, 1)], 1.0);

        let mut g = KfacFactors::identity(2, 2);
        let before = g.clone();
        kfac_update(&mut g, &cap, 0, 1.0).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn kfac_requires_capture() {
        let mut f = KfacFactors::zeros(2, 1);
        let err = kfac_update(&mut f, &CaptureStore::default(), 0, 0.0).unwrap_err();
        assert!(matches!(
            err,
            RepresentationError::Capture(NetworkError::NoCaptureState { .. })
        ));
    }

    #[test]
    fn shampoo_update_cases() {
        let mut f = ShampooFactors::zeros(2, 2, Accumulation::Sum);
        shampoo_update(&mut f, &Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(f.l, Matrix::from_diag(&[1.0, 0.0]));
        assert_eq!(f.r, Matrix::from_diag(&[1.0, 0.0]));
        let before = f.clone();
        shampoo_update(&mut f, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(f, before);
    }

    #[test]
    fn shampoo_traces_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut f = ShampooFactors::zeros(3, 5, Accumulation::Sum);
        let mut last = 0.0;
        for _ in 0..10 {
            let g = random(&mut rng, 3, 5);
            shampoo_update(&mut f, &g).unwrap();
            assert!((f.l.trace() - f.r.trace()).abs() < 1e-12 * f.l.trace());
            assert!(f.l.trace() >= last);
            last = f.l.trace();
        }
    }

    #[test]
    fn diagonal_update_cases() {
        let mut s = DiagonalSecondMoment::zeros(2);
        diagonal_update(&mut s, &[1.0, 2.0], 0.9).unwrap();
        assert!((s.v[0] - 0.1).abs() < 1e-15 && (s.v[1] - 0.4).abs() < 1e-15);
        let before = s.v.clone();
        diagonal_update(&mut s, &[0.0, 0.0], 0.9).unwrap();
        assert!((s.v[0] - 0.9 * before[0]).abs() < 1e-16);
        diagonal_update(&mut s, &[3.0, -1.0], 0.0).unwrap();
        assert_eq!(s.v, vec![9.0, 1.0]);
        assert_eq!(s.steps, 3);
    }

    #[test]
    fn gram_without_sketching_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5;
        let cap = capture(random(&mut rng, n, 4), random(&mut rng, n, 3));
        let s = gram_sketch_build(&cap, 0, 7).unwrap();
        assert!(s.is_exact());
        let per = cap.per_example_gradients(0).unwrap();
        let u = s.u_matrix();
        for (i, p) in per.iter().enumerate() {
            assert_eq!(u.row(i), p.as_slice());
        }
        // UᵀU/n equals the empirical-Fisher block built from the outer products.
        let mut dense = Matrix::zeros(12, 12);
        for p in &per {
            dense.axpy(1.0 / n as f64, &Matrix::outer(p.as_slice(), p.as_slice()));
        }
        let expanded = expand_to_dense(&LayerRepr::Gram(&s)).unwrap();
        assert!(expanded.sub(&dense).max_abs() <= 1e-12);
        assert!(s.gram.sub(&u.matmul_nt(&u)).max_abs() <= 1e-12);
    }

    #[test]
    fn sketch_is_deterministic_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cap = capture(random(&mut rng, 4, 300), random(&mut rng, 4, 2));
        let s1 = gram_sketch_build(&cap, 0, 11).unwrap();
        let s2 = gram_sketch_build(&cap, 0, 11).unwrap();
        assert!(!s1.is_exact());
        assert_eq!(s1.sketched_activations.cols(), SKETCH_SIZE);
        assert_eq!(s1.u_matrix(), s2.u_matrix());
        let min = sym_eig(&s1.gram).unwrap().eigenvalues[0];
        assert!(min >= -1e-10 * s1.gram.max_abs());
    }

    #[test]
    fn reduce_rank_keeps_small_axes_and_truncates_large_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random(&mut rng, 5, 3);
        let a = random(&mut rng, 6, 3);
        let (e2, a2) = reduce_rank(&e, &a, 16).unwrap();
        assert_eq!((e2, a2), (e.clone(), a.clone()));

        // A rank-2 product spread over a 20-wide axis survives truncation to 2.
        let basis_e = random(&mut rng, 5, 2);
        let basis_a = random(&mut rng, 6, 2);
        let mix = random(&mut rng, 2, 20);
        let e = basis_e.matmul(&mix);
        let a = basis_a.matmul(&mix);
        let (e2, a2) = reduce_rank(&e, &a, 2).unwrap();
        assert_eq!(e2.cols(), 2);
        let full = e.matmul_nt(&a);
        let approx = e2.matmul_nt(&a2);
        assert!(full.sub(&approx).max_abs() <= 1e-8 * full.max_abs());
    }

    #[test]
    fn expand_cases() {
        let f = KfacFactors::identity(3, 2);
        assert_eq!(expand_to_dense(&LayerRepr::Kronecker(&f)).unwrap(), Matrix::identity(6));
        assert_eq!(
            expand_to_dense(&LayerRepr::Diagonal(&[1.0, 2.0])).unwrap(),
            Matrix::from_diag(&[1.0, 2.0])
        );
        let big = KfacFactors::identity(101, 50);
        assert!(matches!(
            expand_to_dense(&LayerRepr::Kronecker(&big)),
            Err(RepresentationError::ScaleExceeded { dim: 5050 })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cap = capture(random(&mut rng, 3, 3), random(&mut rng, 3, 2));
        let mut f = KfacFactors::zeros(3, 2);
        kfac_update(&mut f, &cap, 0, 0.0).unwrap();
        let dense = expand_to_dense(&LayerRepr::Kronecker(&f)).unwrap();
        assert!(dense.diag().iter().all(|&d| d >= 0.0));
    }
}
