//! Named learnable arrays.

use indexmap::IndexMap;

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

/// How an array was (or will be) initialized. Stored in checkpoints as text.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in) * gain`.
    KaimingNormal { gain: f64 },
    Zeros,
    /// Rows of the kernel-space projection.
    Pca,
    /// Centered delta per output channel (identity map for matching channels).
    Identity,
    /// Bias that makes a predicted per-pixel kernel start as a centered delta.
    CenteredDelta,
}

impl Init {
    pub fn id(&self) -> String {
        match self {
            Init::KaimingNormal { gain } => format!("kaiming_normal:{gain}"),
            Init::Zeros => "zeros".into(),
            Init::Pca => "pca".into(),
            Init::Identity => "identity".into(),
            Init::CenteredDelta => "centered_delta".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "zeros" => Init::Zeros,
            "pca" => Init::Pca,
            "identity" => Init::Identity,
            "centered_delta" => Init::CenteredDelta,
            _ => Init::KaimingNormal {
                gain: s.strip_prefix("kaiming_normal:")?.parse().ok()?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub init: Init,
}

/// Ordered map from parameter name to array. The text before the first `.`
/// of a name is its component (`extractor` or `sr`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, init: Init) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), ParamEntry { tensor, init });
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            init: e.init.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Total learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }
}

pub fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}
