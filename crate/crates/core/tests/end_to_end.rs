use precond_core::gradient_maker::{GradientMaker, MakerKind, ModelCall, OutputFormat, PrecondConfig};
use precond_core::linalg::{axpy, Matrix};
use precond_core::network::{Activation, Batch, LossKind, Network, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem(seed: u64) -> (Network, Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::mlp(&[6, 10, 3], Activation::Tanh, LossKind::CrossEntropy, &mut rng);
    let x = Matrix::from_fn(24, 6, |_, _| rng.random_range(-1.0..1.0));
    // Linearly separable labels from a fixed teacher.
    let y = (0..24)
        .map(|i| {
            let r = x.row(i);
            let s = [r[0] + r[1], r[2] - r[3], r[4] + 0.5 * r[5]];
            (0..3).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap()
        })
        .collect();
    (net, x, y)
}

fn full_loss(net: &mut Network, x: &Matrix, y: &[usize]) -> f64 {
    net.loss_and_gradient(&Batch::new(x.clone(), Targets::Classes(y.to_vec())))
        .unwrap()
        .0
}

fn run(kind: MakerKind, steps: usize, lr: f64, format: OutputFormat) -> (f64, f64, Vec<f64>) {
    let (net, x, y) = problem(11);
    let mut maker = GradientMaker::new(net, kind, PrecondConfig::for_kind(kind).with_interval(2), 5).unwrap();
    let before = full_loss(maker.network_mut(), &x, &y);
    for _ in 0..steps {
        maker.network_mut().zero_grad();
        let root = maker.setup_model_call(ModelCall::new(x.clone()).format(format));
        let logits = match format {
            OutputFormat::Tensor => root,
            _ => root.index(0),
        };
        maker
            .setup_loss_call(LossKind::CrossEntropy, &logits, Targets::Classes(y.clone()))
            .unwrap();
        maker.forward_and_backward().unwrap();
        let g = maker.network().grad().unwrap().flatten();
        let mut theta = maker.network().params();
        axpy(-lr, &g, &mut theta);
        maker.network_mut().set_params(&theta);
    }
    let after = full_loss(maker.network_mut(), &x, &y);
    (before, after, maker.network().params())
}

fn step_size(kind: MakerKind) -> f64 {
    match kind {
        MakerKind::Plain => 0.5,
        MakerKind::Kbfgs | MakerKind::DiagonalAdamLike => 0.02,
        _ => 0.1,
    }
}

#[test]
fn every_maker_reduces_the_training_loss() {
    for kind in MakerKind::ALL {
        let (before, after, _) = run(kind, 40, step_size(kind), OutputFormat::Tensor);
        assert!(after.is_finite() && after < 0.7 * before, "{kind}: {before} -> {after}");
    }
}

#[test]
fn trajectories_are_reproducible_and_format_independent() {
    for kind in MakerKind::ALL {
        let (_, _, a) = run(kind, 6, step_size(kind), OutputFormat::Tensor);
        let (_, _, b) = run(kind, 6, step_size(kind), OutputFormat::Tensor);
        let (_, _, c) = run(kind, 6, step_size(kind), OutputFormat::Sequence);
        assert_eq!(a, b, "{kind}");
        assert_eq!(a, c, "{kind}");
    }
}
