//! Output value trees and deferred expressions over them.

use std::borrow::Cow;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::network::{LossKind, Targets};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("index {index} out of range for a sequence of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no entry {0:?}")]
    MissingKey(String),
    #[error("no field {0:?}")]
    MissingField(String),
    #[error("cannot apply {step} to a {found} value")]
    TypeMismatch { step: &'static str, found: &'static str },
    #[error("flatten needs tensors with equal row counts")]
    RaggedFlatten,
}

/// A differentiable scalar produced by a model: the mean loss together with
/// what is needed to differentiate it with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
    pub targets: Targets,
}

/// A model output.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Tensor(Matrix),
    Loss(LossValue),
    Sequence(Vec<Value>),
    /// Insertion-ordered string keys.
    Mapping(Vec<(String, Value)>),
    Record {
        name: String,
        fields: Vec<(String, Value)>,
    },
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Tensor(_) => "tensor",
            Value::Loss(_) => "loss",
            Value::Sequence(_) => "sequence",
            Value::Mapping(_) => "mapping",
            Value::Record { .. } => "record",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    Index(usize),
    Key(String),
    Field(String),
    /// Concatenates a sequence of tensors column-wise; a tensor is left as is.
    Flatten,
}

/// Stands for a part of a model output that does not exist yet. Built from
/// the root returned by the model-call setup and resolved once the forward
/// pass has produced a concrete [`Value`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DeferredExpr {
    pub(crate) owner: u64,
    pub(crate) generation: u64,
    steps: Vec<Step>,
}

impl DeferredExpr {
    pub(crate) fn root(owner: u64, generation: u64) -> Self {
        Self {
            owner,
            generation,
            steps: Vec::new(),
        }
    }

    fn then(&self, step: Step) -> Self {
        let mut steps = self.steps.clone();
        steps.push(step);
        Self { steps, ..self.clone() }
    }

    pub fn index(&self, i: usize) -> Self {
        self.then(Step::Index(i))
    }

    pub fn key(&self, k: impl Into<String>) -> Self {
        self.then(Step::Key(k.into()))
    }

    pub fn field(&self, name: impl Into<String>) -> Self {
        self.then(Step::Field(name.into()))
    }

    pub fn flatten(&self) -> Self {
        self.then(Step::Flatten)
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn is_root(&self) -> bool {
        self.steps.is_empty()
    }

    /// Applies the recorded steps, in construction order, to `value`.
    pub fn evaluate<'v>(&self, value: &'v Value) -> Result<Cow<'v, Value>, ExprError> {
        let mut current = Cow::Borrowed(value);
        for step in &self.steps {
            current = match current {
                Cow::Borrowed(v) => apply(step, v)?,
                Cow::Owned(v) => Cow::Owned(apply(step, &v)?.into_owned()),
            };
        }
        Ok(current)
    }
}

fn lookup<'v>(entries: &'v [(String, Value)], name: &str) -> Option<&'v Value> {
    entries.iter().find(|(k, _)| k == name).map(|(_, v)| v)
}

fn apply<'v>(step: &Step, value: &'v Value) -> Result<Cow<'v, Value>, ExprError> {
    let mismatch = |step| ExprError::TypeMismatch {
        step,
        found: value.type_name(),
    };
    match (step, value) {
        (Step::Index(i), Value::Sequence(items)) => {
            items.get(*i).map(Cow::Borrowed).ok_or(ExprError::IndexOutOfRange {
                index: *i,
                len: items.len(),
            })
        }
        (Step::Index(_), _) => Err(mismatch("index")),
        (Step::Key(k), Value::Mapping(entries)) => lookup(entries, k)
            .map(Cow::Borrowed)
            .ok_or_else(|| ExprError::MissingKey(k.clone())),
        (Step::Key(_), _) => Err(mismatch("key")),
        (Step::Field(f), Value::Record { fields, .. }) => lookup(fields, f)
            .map(Cow::Borrowed)
            .ok_or_else(|| ExprError::MissingField(f.clone())),
        (Step::Field(_), _) => Err(mismatch("field")),
        (Step::Flatten, Value::Tensor(_)) => Ok(Cow::Borrowed(value)),
        (Step::Flatten, Value::Sequence(items)) => {
            let parts = items
                .iter()
                .map(|v| match v {
                    Value::Tensor(m) => Ok(m),
                    other => Err(ExprError::TypeMismatch {
                        step: "flatten",
                        found: other.type_name(),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let rows = parts.first().map_or(0, |m| m.rows());
            if parts.iter().any(|m| m.rows() != rows) {
                return Err(ExprError::RaggedFlatten);
            }
            let cols: usize = parts.iter().map(|m| m.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for m in &parts {
                    data.extend_from_slice(m.row(i));
                }
            }
            Ok(Cow::Owned(Value::Tensor(Matrix::from_vec(rows, cols, data))))
        }
        (Step::Flatten, _) => Err(mismatch("flatten")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(v: f64) -> Value {
        Value::Loss(LossValue {
            value: v,
            kind: LossKind::Mse,
            targets: Targets::Values(Matrix::zeros(1, 1)),
        })
    }

    #[test]
    fn root_and_paths() {
        let t = Value::Tensor(Matrix::identity(2));
        let root = DeferredExpr::root(1, 0);
        assert_eq!(root.evaluate(&t).unwrap().as_ref(), &t);

        let seq = Value::Sequence(vec![t.clone(), loss(0.5)]);
        assert_eq!(root.index(1).evaluate(&seq).unwrap().as_ref(), &loss(0.5));

        let map = Value::Mapping(vec![("logits".into(), t.clone()), ("loss".into(), loss(1.0))]);
        assert_eq!(root.key("loss").evaluate(&map).unwrap().as_ref(), &loss(1.0));

        let rec = Value::Record {
            name: "Out".into(),
            fields: vec![("logits".into(), t.clone()), ("loss".into(), loss(2.0))],
        };
        assert_eq!(root.field("loss").evaluate(&rec).unwrap().as_ref(), &loss(2.0));
    }

    #[test]
    fn nested_and_flatten() {
        let a = Matrix::from_rows(&[&[1.0], &[3.0]]);
        let b = Matrix::from_rows(&[&[2.0, 5.0], &[4.0, 6.0]]);
        let rec = Value::Record {
            name: "Out".into(),
            fields: vec![(
                "parts".into(),
                Value::Sequence(vec![Value::Tensor(a), Value::Tensor(b)]),
            )],
        };
        let e = DeferredExpr::root(1, 0).field("parts").flatten();
        let Value::Tensor(m) = e.evaluate(&rec).unwrap().into_owned() else {
            panic!("expected tensor")
        };
        assert_eq!(m, Matrix::from_rows(&[&[1.0, 2.0, 5.0], &[3.0, 4.0, 6.0]]));
    }

    #[test]
    fn errors() {
        let root = DeferredExpr::root(1, 0);
        let seq = Value::Sequence(vec![loss(0.0)]);
        assert_eq!(
            root.index(3).evaluate(&seq).unwrap_err(),
            ExprError::IndexOutOfRange { index: 3, len: 1 }
        );
        assert!(matches!(
            root.field("loss").evaluate(&seq).unwrap_err(),
            ExprError::TypeMismatch {
                step: "field",
                found: "sequence"
            }
        ));
        let map = Value::Mapping(vec![]);
        assert_eq!(
            root.key("x").evaluate(&map).unwrap_err(),
            ExprError::MissingKey("x".into())
        );
    }
}
