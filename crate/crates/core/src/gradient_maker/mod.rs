//! Unified gradient-maker interface.
//!
//! A maker owns a network and a preconditioning algorithm. The model call
//! and the loss are declared up front through [`DeferredExpr`]s; each
//! [`GradientMaker::forward_and_backward`] then runs the forward pass,
//! resolves the loss from the output tree, backpropagates, refreshes the
//! curvature and preconditioner when their intervals are due, and adds the
//! preconditioned gradient to the network's gradient slot.

mod algorithms;
mod expr;

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use algorithms::{CurvatureState, NumericError};
pub use expr::{DeferredExpr, ExprError, LossValue, Step, Value};

use crate::linalg::Matrix;
use crate::network::{loss_output_grad, loss_value, Batch, FlatGradient, LossKind, Network, NetworkError, Targets};
use crate::representation::Accumulation;
use algorithms::{Algorithm, Failure, StepContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MakerError {
    #[error("forward_and_backward needs a model call and exactly one loss definition")]
    MissingSetup,
    #[error("expression belongs to a different maker or an earlier model call")]
    ForeignExpression,
    #[error("a loss is already defined for this model call")]
    ConflictingLossDefinition,
    #[error("loss expression resolved to a {found} value")]
    NonScalarLoss { found: &'static str },
    #[error("logits expression resolved to a {found} value, not the model's output tensor")]
    NotModelOutput { found: &'static str },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{maker}{}: {source}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    Numeric {
        maker: MakerKind,
        layer: Option<usize>,
        source: NumericError,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, MakerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FisherSource {
    /// One sampled target per example.
    MonteCarlo,
    /// The true labels.
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MakerKind {
    Plain,
    Kfac(FisherSource),
    Shampoo,
    Psgd,
    Kbfgs,
    Seng,
    HessianFree,
    DiagonalAdamLike,
}

impl MakerKind {
    pub const ALL: [MakerKind; 9] = [
        MakerKind::Plain,
        MakerKind::Kfac(FisherSource::MonteCarlo),
        MakerKind::Kfac(FisherSource::Empirical),
        MakerKind::Shampoo,
        MakerKind::Psgd,
        MakerKind::Kbfgs,
        MakerKind::Seng,
        MakerKind::HessianFree,
        MakerKind::DiagonalAdamLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MakerKind::Plain => "sgd",
            MakerKind::Kfac(FisherSource::MonteCarlo) => "kfac-mc",
            MakerKind::Kfac(FisherSource::Empirical) => "kfac-emp",
            MakerKind::Shampoo => "shampoo",
            MakerKind::Psgd => "psgd",
            MakerKind::Kbfgs => "kbfgs",
            MakerKind::Seng => "seng",
            MakerKind::HessianFree => "hessian-free",
            MakerKind::DiagonalAdamLike => "adam",
        }
    }

    /// Whether the kind keeps state refreshed on an interval.
    pub fn uses_interval(self) -> bool {
        !matches!(self, MakerKind::Plain | MakerKind::HessianFree)
    }
}

impl fmt::Display for MakerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MakerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lowered = s.to_ascii_lowercase();
        let alias = match lowered.as_str() {
            "plain" => "sgd",
            "kfac" | "kfac-1mc" | "kfac_mc" => "kfac-mc",
            "kfac_emp" => "kfac-emp",
            "hf" | "hessian_free" | "hessianfree" => "hessian-free",
            "k-bfgs" => "kbfgs",
            "adamlike" | "diagonal" => "adam",
            other => other,
        };
        MakerKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| format!("unknown maker kind {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecondConfig {
    pub damping: f64,
    pub curvature_interval: u64,
    pub preconditioner_interval: u64,
    /// EMA weight on the previous state.
    pub ema: f64,
    pub mc_samples: usize,
    pub mc_normalize: bool,
    pub sketch_seed: u64,
    pub psgd_step: f64,
    pub eps: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub shampoo_accumulation: Accumulation,
    /// Times a failed preconditioner update is retried with ten times the
    /// damping.
    pub damping_retries: u32,
}

impl PrecondConfig {
    pub fn for_kind(kind: MakerKind) -> Self {
        let base = Self {
            damping: 1e-3,
            curvature_interval: 1,
            preconditioner_interval: 1,
            ema: 0.0,
            mc_samples: 1,
            mc_normalize: true,
            sketch_seed: 0,
            psgd_step: 0.1,
            eps: 1e-8,
            cg_tol: 1e-6,
            cg_max_iter: 50,
            shampoo_accumulation: Accumulation::Sum,
            damping_retries: 3,
        };
        match kind {
            MakerKind::Kbfgs => Self { damping: 1e-6, ..base },
            MakerKind::DiagonalAdamLike => Self { ema: 0.999, ..base },
            _ => base,
        }
    }

    /// Sets both update intervals.
    pub fn with_interval(mut self, interval: u64) -> Self {
        self.curvature_interval = interval;
        self.preconditioner_interval = interval;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MakerError::InvalidConfig(m.to_string()));
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return bad("damping must be a finite value ≥ 0");
        }
        if self.curvature_interval == 0 || self.preconditioner_interval == 0 {
            return bad("intervals must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return bad("ema must lie in [0, 1]");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be ≥ 1");
        }
        if ![self.eps, self.psgd_step, self.cg_tol].iter().all(|&v| v > 0.0) || self.cg_max_iter == 0 {
            return bad("eps, psgd_step, cg_tol and cg_max_iter must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepCounter {
    pub steps_taken: u64,
    pub last_curvature_step: Option<u64>,
    pub last_preconditioner_step: Option<u64>,
    pub curvature_updates: u64,
    pub preconditioner_updates: u64,
}

impl StepCounter {
    pub fn due(&self, interval: u64) -> bool {
        self.steps_taken.is_multiple_of(interval)
    }
}

/// Shape of the value tree a model call returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    /// The logits alone.
    Tensor,
    /// `[logits, loss]`.
    Sequence,
    /// `{"logits": .., "loss": ..}`.
    Mapping,
    /// Record with `logits` and `loss` fields.
    Record,
    /// Record whose `parts` field holds the logits split column-wise into
    /// `n` chunks; reassembled with [`DeferredExpr::flatten`].
    Parts(usize),
}

/// Inputs for the maker's network plus, for models that compute their own
/// loss, the loss kind and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCall {
    pub inputs: Matrix,
    pub format: OutputFormat,
    pub loss: Option<(LossKind, Targets)>,
}

impl ModelCall {
    pub fn new(inputs: Matrix) -> Self {
        Self {
            inputs,
            format: OutputFormat::Tensor,
            loss: None,
        }
    }

    pub fn format(mut self, format: OutputFormat) -> Self {
        self.format = format;
        self
    }

    pub fn with_loss(mut self, kind: LossKind, targets: Targets) -> Self {
        self.loss = Some((kind, targets));
        self
    }

    fn build_output(&self, logits: &Matrix) -> Result<Value> {
        let loss = match &self.loss {
            Some((kind, targets)) => Some(Value::Loss(LossValue {
                value: loss_value(*kind, logits, targets)?,
                kind: *kind,
                targets: targets.clone(),
            })),
            None => None,
        };
        let tensor = Value::Tensor(logits.clone());
        let named = |loss: Option<Value>| {
            let mut entries = vec![("logits".to_string(), tensor.clone())];
            entries.extend(loss.map(|l| ("loss".to_string(), l)));
            entries
        };
        Ok(match self.format {
            OutputFormat::Tensor => tensor,
            OutputFormat::Sequence => {
                let mut items = vec![tensor];
                items.extend(loss);
                Value::Sequence(items)
            }
            OutputFormat::Mapping => Value::Mapping(named(loss)),
            OutputFormat::Record => Value::Record {
                name: "ModelOutput".into(),
                fields: named(loss),
            },
            OutputFormat::Parts(chunks) => {
                let k = logits.cols();
                let chunks = chunks.clamp(1, k.max(1));
                let width = k.div_ceil(chunks);
                let parts = (0..k)
                    .step_by(width)
                    .map(|start| {
                        let end = (start + width).min(k);
                        Value::Tensor(Matrix::from_fn(logits.rows(), end - start, |i, j| {
                            logits[(i, start + j)]
                        }))
                    })
                    .collect();
                let mut fields = vec![("parts".to_string(), Value::Sequence(parts))];
                fields.extend(loss.map(|l| ("loss".to_string(), l)));
                Value::Record {
                    name: "ModelOutput".into(),
                    fields,
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum LossDefinition {
    Call {
        kind: LossKind,
        logits: DeferredExpr,
        targets: Targets,
    },
    Repr(DeferredExpr),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub output: Value,
    pub loss: f64,
}

static NEXT_MAKER_ID: AtomicU64 = AtomicU64::new(1);

pub struct GradientMaker {
    id: u64,
    generation: u64,
    kind: MakerKind,
    config: PrecondConfig,
    network: Network,
    rng: ChaCha8Rng,
    counter: StepCounter,
    call: Option<ModelCall>,
    loss: Option<LossDefinition>,
    algorithm: Box<dyn Algorithm>,
    ready: bool,
    effective_damping: f64,
    last_batch: Option<Batch>,
}

impl fmt::Debug for GradientMaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradientMaker")
            .field("kind", &self.kind)
            .field("config", &self.config)
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

impl GradientMaker {
    pub fn new(network: Network, kind: MakerKind, config: PrecondConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let algorithm = algorithms::build(kind, &network, &config);
        Ok(Self {
            id: NEXT_MAKER_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            kind,
            effective_damping: config.damping,
            config,
            network,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counter: StepCounter::default(),
            call: None,
            loss: None,
            algorithm,
            ready: false,
            last_batch: None,
        })
    }

    pub fn kind(&self) -> MakerKind {
        self.kind
    }

    pub fn config(&self) -> &PrecondConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn counter(&self) -> &StepCounter {
        &self.counter
    }

    /// Damping the current preconditioner was built with, after any
    /// escalation.
    pub fn effective_damping(&self) -> f64 {
        self.effective_damping
    }

    pub fn state(&self) -> CurvatureState<'_> {
        self.algorithm.state()
    }

    /// Bytes held by persistent curvature and preconditioner buffers.
    pub fn state_bytes(&self) -> usize {
        self.algorithm.state_bytes()
    }

    /// Hash over the bit patterns of the preconditioner state.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut put = |m: &Matrix| m.as_slice().iter().for_each(|v| v.to_bits().hash(&mut h));
        match self.algorithm.state() {
            CurvatureState::Identity => {}
            CurvatureState::Kronecker(fs) => {
                for f in fs {
                    for m in [Some(&f.a), Some(&f.b), f.a_inv.as_ref(), f.b_inv.as_ref()]
                        .into_iter()
                        .flatten()
                    {
                        put(m);
                    }
                }
            }
            CurvatureState::Shampoo(fs) => {
                for f in fs {
                    put(&f.l);
                    put(&f.r);
                    if let Some((l, r, _)) = &f.roots {
                        put(l);
                        put(r);
                    }
                }
            }
            CurvatureState::Gram(sketches) => {
                for s in sketches {
                    put(&s.activations);
                    put(&s.errors);
                    put(&s.gram);
                }
            }
            CurvatureState::Triangular(fs) => {
                for f in fs {
                    put(&f.q_out);
                    put(&f.q_in);
                }
            }
            CurvatureState::KroneckerBfgs { activation, bfgs } => {
                for f in activation {
                    put(&f.a);
                    if let Some(inv) = &f.a_inv {
                        put(inv);
                    }
                }
                for b in bfgs {
                    put(&b.matrix);
                }
            }
            CurvatureState::Diagonal(d) => d.v.iter().for_each(|v| v.to_bits().hash(&mut h)),
        }
        h.finish()
    }

    /// Declares the model call and returns the expression standing for its
    /// not-yet-computed output. Any earlier loss definition is dropped.
    pub fn setup_model_call(&mut self, call: ModelCall) -> DeferredExpr {
        self.generation += 1;
        self.call = Some(call);
        self.loss = None;
        DeferredExpr::root(self.id, self.generation)
    }

    fn check_owner(&self, expr: &DeferredExpr) -> Result<()> {
        if expr.owner != self.id || expr.generation != self.generation || self.call.is_none() {
            return Err(MakerError::ForeignExpression);
        }
        Ok(())
    }

    /// Loss computed outside the model: `kind(eval(logits), targets)`.
    pub fn setup_loss_call(&mut self, kind: LossKind, logits: &DeferredExpr, targets: Targets) -> Result<()> {
        self.check_owner(logits)?;
        if self.loss.is_some() {
            return Err(MakerError::ConflictingLossDefinition);
        }
        self.loss = Some(LossDefinition::Call {
            kind,
            logits: logits.clone(),
            targets,
        });
        Ok(())
    }

    /// Loss computed by the model and read from its output at `loss`.
    pub fn setup_loss_repr(&mut self, loss: &DeferredExpr) -> Result<()> {
        self.check_owner(loss)?;
        if self.loss.is_some() {
            return Err(MakerError::ConflictingLossDefinition);
        }
        self.loss = Some(LossDefinition::Repr(loss.clone()));
        Ok(())
    }

    fn numeric(&self, f: Failure) -> MakerError {
        MakerError::Numeric {
            maker: self.kind,
            layer: f.layer,
            source: f.source,
        }
    }

    /// Captured forward and backward pass on the current model call.
    /// Returns the output tree, the loss, the batch and the mean gradient.
    fn run_passes(&mut self) -> Result<(Value, f64, Batch, Matrix, FlatGradient)> {
        let (call, def) = match (&self.call, &self.loss) {
            (Some(c), Some(d)) => (c, d),
            _ => return Err(MakerError::MissingSetup),
        };
        let logits = self.network.forward(&call.inputs, true)?;
        let output = call.build_output(&logits)?;
        let (kind, targets, loss) = match def {
            LossDefinition::Call {
                kind,
                logits: expr,
                targets,
            } => {
                match expr.evaluate(&output)?.as_ref() {
                    Value::Tensor(m) if *m == logits => {}
                    other => {
                        return Err(MakerError::NotModelOutput {
                            found: other.type_name(),
                        })
                    }
                }
                let value = loss_value(*kind, &logits, targets)?;
                (*kind, targets.clone(), value)
            }
            LossDefinition::Repr(expr) => match expr.evaluate(&output)?.into_owned() {
                Value::Loss(l) => (l.kind, l.targets, l.value),
                other => {
                    return Err(MakerError::NonScalarLoss {
                        found: other.type_name(),
                    })
                }
            },
        };
        if kind != self.network.loss_kind() {
            return Err(MakerError::Network(NetworkError::TargetKind));
        }
        let out_grad = loss_output_grad(kind, &logits, &targets)?;
        let grad = self.network.backward(&out_grad, true)?;
        let batch = Batch::new(call.inputs.clone(), targets);
        Ok((output, loss, batch, logits, grad))
    }

    fn curvature_step(&mut self, batch: &Batch, logits: &Matrix, grad: &FlatGradient) -> Result<()> {
        let mut ctx = StepContext {
            net: &mut self.network,
            batch,
            logits,
            grad,
            rng: &mut self.rng,
            config: &self.config,
        };
        let r = self.algorithm.update_curvature(&mut ctx);
        r.map_err(|f| self.numeric(f))?;
        self.counter.last_curvature_step = Some(self.counter.steps_taken);
        self.counter.curvature_updates += 1;
        Ok(())
    }

    fn preconditioner_step(&mut self) -> Result<()> {
        let mut tau = self.config.damping;
        let mut attempt = 0;
        loop {
            match self.algorithm.update_preconditioner(tau) {
                Ok(()) => break,
                Err(f) if f.source.is_indefinite() && attempt < self.config.damping_retries => {
                    attempt += 1;
                    tau = if tau > 0.0 { tau * 10.0 } else { 1e-8 };
                }
                Err(f) => return Err(self.numeric(f)),
            }
        }
        self.effective_damping = tau;
        self.ready = true;
        self.counter.last_preconditioner_step = Some(self.counter.steps_taken);
        self.counter.preconditioner_updates += 1;
        Ok(())
    }

    fn apply(&mut self, batch: &Batch, logits: &Matrix, grad: &FlatGradient) -> Result<FlatGradient> {
        if self.algorithm.uses_curvature() && !self.ready {
            return Ok(grad.clone());
        }
        let mut ctx = StepContext {
            net: &mut self.network,
            batch,
            logits,
            grad,
            rng: &mut self.rng,
            config: &self.config,
        };
        let r = self.algorithm.precondition(&mut ctx, grad);
        r.map_err(|f| self.numeric(f))
    }

    /// One training step's gradient work; see the module docs. The
    /// preconditioned gradient of this call is added to the network's
    /// gradient slot.
    pub fn forward_and_backward(&mut self) -> Result<StepOutput> {
        let (output, loss, batch, logits, grad) = self.run_passes()?;
        if self.algorithm.uses_curvature() {
            let curvature_due = self.counter.due(self.config.curvature_interval);
            if curvature_due {
                self.curvature_step(&batch, &logits, &grad)?;
            }
            if self.counter.due(self.config.preconditioner_interval) && self.counter.last_curvature_step.is_some() {
                self.preconditioner_step()?;
            }
        }
        let pg = self.apply(&batch, &logits, &grad)?;
        self.network.accumulate_grad(&pg);
        self.last_batch = Some(batch);
        self.counter.steps_taken += 1;
        Ok(StepOutput { output, loss })
    }

    /// Refreshes the curvature state from a fresh pass over the current
    /// model call, outside the step schedule.
    pub fn update_curvature(&mut self) -> Result<()> {
        let (_, _, batch, logits, grad) = self.run_passes()?;
        if self.algorithm.uses_curvature() {
            self.curvature_step(&batch, &logits, &grad)?;
        }
        self.last_batch = Some(batch);
        Ok(())
    }

    /// Rebuilds the preconditioner from the current curvature state,
    /// escalating the damping on indefinite factors.
    pub fn update_preconditioner(&mut self) -> Result<()> {
        if self.algorithm.uses_curvature() {
            self.preconditioner_step()?;
        }
        Ok(())
    }

    /// Applies the current preconditioner to `g` without touching the
    /// gradient slot. Matrix-free kinds use the most recent batch.
    pub fn precondition(&mut self, g: &FlatGradient) -> Result<FlatGradient> {
        let batch = match self.last_batch.take() {
            Some(b) => b,
            None if self.kind == MakerKind::HessianFree => return Err(MakerError::MissingSetup),
            None => Batch::new(Matrix::zeros(0, self.network.input_dim()), Targets::Classes(vec![])),
        };
        let logits = Matrix::zeros(0, 0);
        let result = self.apply(&batch, &logits, g);
        self.last_batch = Some(batch);
        result
    }

    #[cfg(test)]
    fn kronecker_mut(&mut self) -> Option<&mut [crate::representation::KfacFactors]> {
        self.algorithm.kronecker_mut()
    }
}
