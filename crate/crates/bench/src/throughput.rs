//! Examples-per-second and state-memory grid over batch sizes, update
//! intervals and maker kinds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use precond_core::gradient_maker::{GradientMaker, MakerKind, ModelCall, PrecondConfig};
use precond_core::linalg::{axpy, Matrix};
use precond_core::network::{Activation, LossKind, Network, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_list, read_pairs, ConfigError};
use crate::train::{clip_by_global_norm, TrainError};

/// Distinct mini-batches cycled through during a cell.
const BATCH_POOL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub makers: Vec<MakerKind>,
    pub batch_sizes: Vec<usize>,
    pub intervals: Vec<u64>,
    pub widths: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    pub warmup: usize,
    pub steps: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            makers: vec![
                MakerKind::Plain,
                MakerKind::Kfac(precond_core::gradient_maker::FisherSource::MonteCarlo),
                MakerKind::Shampoo,
                MakerKind::Seng,
            ],
            batch_sizes: vec![32, 512],
            intervals: vec![1, 100],
            widths: vec![512, 512],
            input_dim: 784,
            classes: 10,
            warmup: 5,
            steps: 100,
            seed: 0,
            output: None,
        }
    }
}

const GRID_KEYS: &[&str] = &[
    "makers",
    "batch_sizes",
    "intervals",
    "widths",
    "input_dim",
    "classes",
    "warmup",
    "steps",
    "seed",
    "output",
];

fn parsed<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl FromStr for GridConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let map: BTreeMap<String, String> = read_pairs(text, GRID_KEYS)?;
        let mut g = GridConfig::default();
        for (k, v) in &map {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "makers" => g.makers = parse_list(k, v)?,
                "batch_sizes" => g.batch_sizes = parse_list(k, v)?,
                "intervals" => g.intervals = parse_list(k, v)?,
                "widths" => g.widths = parse_list(k, v)?,
                "input_dim" => g.input_dim = parsed(k, v)?,
                "classes" => g.classes = parsed(k, v)?,
                "warmup" => g.warmup = parsed(k, v)?,
                "steps" => g.steps = parsed(k, v)?,
                "seed" => g.seed = parsed(k, v)?,
                "output" => g.output = Some(v.into()),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        g.validate()?;
        Ok(g)
    }
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        text.parse()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.makers.is_empty() || self.batch_sizes.is_empty() || self.intervals.is_empty() {
            return bad("makers, batch_sizes and intervals must be nonempty");
        }
        if self.batch_sizes.contains(&0) || self.intervals.contains(&0) {
            return bad("batch sizes and intervals must be ≥ 1");
        }
        if self.steps == 0 || self.input_dim == 0 || self.classes < 2 {
            return bad("steps and input_dim must be ≥ 1 and classes ≥ 2");
        }
        if self.intervals.iter().any(|&t| !(self.steps as u64).is_multiple_of(t)) {
            return bad("steps must be a multiple of every interval");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub maker: String,
    pub batch_size: usize,
    pub interval: u64,
    pub steps: usize,
    pub examples_per_sec: f64,
    /// Throughput over SGD's at the same batch size.
    pub throughput_ratio: f64,
    pub state_bytes: usize,
    /// (momentum + preconditioner state) over momentum alone.
    pub state_bytes_ratio: f64,
    pub ms_per_step: f64,
}

/// One maker being timed inside an interleaved group.
struct Cell {
    kind: MakerKind,
    interval: u64,
    maker: GradientMaker,
    momentum: Vec<f64>,
    elapsed: f64,
}

impl Cell {
    fn new(grid: &GridConfig, kind: MakerKind, interval: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
        let mut dims = vec![grid.input_dim];
        dims.extend(&grid.widths);
        dims.push(grid.classes);
        let net = Network::mlp(&dims, Activation::Relu, LossKind::CrossEntropy, &mut rng);
        let params = net.param_count();
        let cfg = PrecondConfig::for_kind(kind).with_interval(interval);
        Ok(Self {
            kind,
            interval,
            maker: GradientMaker::new(net, kind, cfg, grid.seed)?,
            momentum: vec![0.0; params],
            elapsed: 0.0,
        })
    }

    /// The full training update: maker step, clipping, momentum and the
    /// parameter write-back.
    fn step(&mut self, x: &Matrix, y: &[usize]) -> Result<f64, TrainError> {
        let started = Instant::now();
        let maker = &mut self.maker;
        maker.network_mut().zero_grad();
        let root = maker.setup_model_call(ModelCall::new(x.clone()));
        maker.setup_loss_call(LossKind::CrossEntropy, &root, Targets::Classes(y.to_vec()))?;
        maker.forward_and_backward()?;
        let mut g = maker.network().grad().expect("gradient stored").flatten();
        clip_by_global_norm(&mut g, 10.0);
        let mut theta = maker.network().params();
        for (m, gi) in self.momentum.iter_mut().zip(&g) {
            *m = 0.9 * *m + gi;
        }
        axpy(-1e-3, &self.momentum, &mut theta);
        maker.network_mut().set_params(&theta);
        Ok(started.elapsed().as_secs_f64())
    }

    fn row(&self, batch_size: usize, steps: usize) -> ThroughputRow {
        let mean = self.elapsed / steps as f64;
        let state_bytes = self.maker.state_bytes();
        let momentum_bytes = 8 * self.momentum.len();
        ThroughputRow {
            maker: self.kind.name().into(),
            batch_size,
            interval: self.interval,
            steps,
            examples_per_sec: batch_size as f64 / mean,
            throughput_ratio: f64::NAN,
            state_bytes,
            state_bytes_ratio: (momentum_bytes + state_bytes) as f64 / momentum_bytes as f64,
            ms_per_step: 1e3 * mean,
        }
    }
}

/// Runs every cell of the grid. Kinds without an update interval run once
/// per batch size, and SGD always runs as the baseline for the ratios.
///
/// All cells of one batch size advance in lockstep, one step each per
/// round, so slow drifts in machine speed affect them equally. The mean
/// step time covers `steps` rounds after `warmup` untimed ones; since
/// `steps` is a multiple of every interval, each cell pays its exact share
/// of refreshes.
pub fn bench_throughput(
    grid: &GridConfig,
    mut progress: impl FnMut(&ThroughputRow),
) -> Result<Vec<ThroughputRow>, TrainError> {
    grid.validate()?;
    let mut rows = Vec::new();
    for &b in &grid.batch_sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(grid.seed ^ b as u64);
        let batches: Vec<(Matrix, Vec<usize>)> = (0..BATCH_POOL)
            .map(|_| {
                let x = Matrix::from_fn(b, grid.input_dim, |_, _| rng.random_range(0.0..1.0));
                let y = (0..b).map(|_| rng.random_range(0..grid.classes)).collect();
                (x, y)
            })
            .collect();

        let mut cells = vec![Cell::new(grid, MakerKind::Plain, 1)?];
        for &kind in grid.makers.iter().filter(|&&k| k != MakerKind::Plain) {
            let intervals: &[u64] = if kind.uses_interval() {
                &grid.intervals
            } else {
                &grid.intervals[..1]
            };
            for &t in intervals {
                cells.push(Cell::new(grid, kind, t)?);
            }
        }
        for round in 0..grid.warmup + grid.steps {
            let (x, y) = &batches[round % BATCH_POOL];
            for cell in &mut cells {
                let secs = cell.step(x, y)?;
                if round >= grid.warmup {
                    cell.elapsed += secs;
                }
            }
        }

        let baseline = cells[0].row(b, grid.steps);
        for &kind in &grid.makers {
            let group: Vec<ThroughputRow> = if kind == MakerKind::Plain {
                vec![ThroughputRow {
                    interval: grid.intervals[0],
                    ..baseline.clone()
                }]
            } else {
                cells
                    .iter()
                    .filter(|c| c.kind == kind)
                    .map(|c| c.row(b, grid.steps))
                    .collect()
            };
            for mut row in group {
                row.throughput_ratio = row.examples_per_sec / baseline.examples_per_sec;
                progress(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use precond_core::gradient_maker::FisherSource;

    fn small() -> GridConfig {
        GridConfig {
            makers: vec![
                MakerKind::Plain,
                MakerKind::Kfac(FisherSource::MonteCarlo),
                MakerKind::Seng,
            ],
            batch_sizes: vec![4, 16],
            intervals: vec![1, 10],
            widths: vec![6],
            input_dim: 5,
            classes: 3,
            warmup: 2,
            steps: 10,
            seed: 1,
            output: None,
        }
    }

    #[test]
    fn grid_parses_and_rejects_unknown_keys() {
        let g: GridConfig = "makers = sgd, kfac, seng\nbatch_sizes = 4,16\nintervals = 1,10\nwidths = 6\n\
                             input_dim = 5\nclasses = 3\nwarmup = 2\nsteps = 10\nseed = 1"
            .parse()
            .unwrap();
        assert_eq!(g, small());
        assert!(matches!(
            "batch = 4".parse::<GridConfig>().unwrap_err(),
            ConfigError::UnknownKey { .. }
        ));
        assert!(matches!(
            "makers =".parse::<GridConfig>().unwrap_err(),
            ConfigError::Invalid(_)
        ));
        assert!(matches!(
            "intervals = 1,10\nsteps = 15".parse::<GridConfig>().unwrap_err(),
            ConfigError::Invalid(_)
        ));
    }

    #[test]
    fn sgd_ratio_is_one_and_state_is_interval_invariant() {
        let rows = bench_throughput(&small(), |_| {}).unwrap();
        // SGD once per batch size, the others at both intervals.
        assert_eq!(rows.len(), 2 * (1 + 2 + 2));
        for r in rows.iter().filter(|r| r.maker == "sgd") {
            assert_eq!(r.throughput_ratio, 1.0);
            assert_eq!(r.state_bytes, 0);
            assert_eq!(r.state_bytes_ratio, 1.0);
        }
        for r in &rows {
            assert!(r.examples_per_sec > 0.0 && r.throughput_ratio.is_finite());
            let twin = rows
                .iter()
                .find(|o| o.maker == r.maker && o.batch_size == r.batch_size && o.interval != r.interval);
            if let Some(o) = twin {
                assert_eq!(o.state_bytes, r.state_bytes, "{}", r.maker);
            }
        }
        let seng = |b| {
            rows.iter()
                .find(|r| r.maker == "seng" && r.batch_size == b)
                .unwrap()
                .state_bytes
        };
        assert!(seng(16) > seng(4));
        let kfac = |b| {
            rows.iter()
                .find(|r| r.maker == "kfac-mc" && r.batch_size == b)
                .unwrap()
                .state_bytes
        };
        assert_eq!(kfac(16), kfac(4));
    }
}
