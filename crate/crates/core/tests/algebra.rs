use precond_core::linalg::{inverse_spd_damped, kron, sym_power, EigenvalueMode, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let m = random(rng, n, n);
    m.matmul_nt(&m).scale(1.0 / n as f64).add_identity(0.05)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kron_mixed_product(seed in 0u64..10_000, p in 1usize..4, q in 1usize..4, r in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, c) = (random(&mut rng, p, q), random(&mut rng, q, r));
        let (b, d) = (random(&mut rng, r, p), random(&mut rng, p, q));
        let lhs = kron(&a, &b).matmul(&kron(&c, &d));
        let rhs = kron(&a.matmul(&c), &b.matmul(&d));
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12);
    }

    #[test]
    fn kron_of_inverses_inverts_kron(seed in 0u64..10_000, m in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (spd(&mut rng, m), spd(&mut rng, n));
        let inv = kron(&inverse_spd_damped(&a, 0.0).unwrap(), &inverse_spd_damped(&b, 0.0).unwrap());
        let prod = kron(&a, &b).matmul(&inv);
        prop_assert!(prod.sub(&Matrix::identity(m * n)).max_abs() <= 1e-8);
    }

    #[test]
    fn inverse_fourth_roots_compose_to_the_inverse(seed in 0u64..10_000, n in 1usize..8, tau in 1e-4f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(&mut rng, n);
        let root = sym_power(&a, -0.25, tau, EigenvalueMode::Signed).unwrap();
        let fourth = root.matmul(&root).matmul(&root).matmul(&root);
        let inv = inverse_spd_damped(&a, tau).unwrap();
        prop_assert!(fourth.sub(&inv).max_abs() <= 1e-8 * (1.0 + inv.max_abs()));
        prop_assert!(root.asymmetry() <= 1e-10);
    }

    #[test]
    fn absolute_mode_is_positive_definite(seed in 0u64..10_000, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random(&mut rng, n, n);
        let indefinite = m.add(&m.transpose());
        let p = sym_power(&indefinite, -1.0, 1e-3, EigenvalueMode::Absolute).unwrap();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pv = p.matvec(&v);
        prop_assert!(v.iter().zip(&pv).map(|(a, b)| a * b).sum::<f64>() > 0.0);
    }
}
