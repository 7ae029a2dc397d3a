//! Named parameter storage shared by the models, optimizers and checkpoints.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, RngStream, Tensor, Var};

/// What a parameter is, which decides weight-decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Embedding,
}

impl ParamRole {
    /// Biases and normalisation terms are exempt from weight decay.
    pub fn decay_exempt(self) -> bool {
        matches!(self, ParamRole::Bias | ParamRole::NormGain | ParamRole::NormBias)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::NormGain => "norm_gain",
            ParamRole::NormBias => "norm_bias",
            ParamRole::Embedding => "embedding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamRole::Weight,
            "bias" => ParamRole::Bias,
            "norm_gain" => ParamRole::NormGain,
            "norm_bias" => ParamRole::NormBias,
            "embedding" => ParamRole::Embedding,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F: Real> {
    pub name: String,
    pub value: Tensor<F>,
    pub role: ParamRole,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Real> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, role: ParamRole) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, value, role });
        ParamId(self.entries.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_linear(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| F::c(rng.range(-bound, bound)));
        self.add(name, w, ParamRole::Weight)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[len]), ParamRole::Bias)
    }

    /// Gain (ones) and bias (zeros) of a normalisation layer.
    pub fn add_norm(&mut self, prefix: &str, len: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{prefix}.gain"), Tensor::ones(&[len]), ParamRole::NormGain),
            self.add(format!("{prefix}.bias"), Tensor::zeros(&[len]), ParamRole::NormBias),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose names start with any of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| prefixes.iter().any(|p| e.name.starts_with(p)))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Places every parameter on `graph` as a trainable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        self.bind_where(graph, |_| true)
    }

    /// Places every parameter on `graph`; those rejected by `trainable` become
    /// constants.
    pub fn bind_where<'g>(
        &self,
        graph: &'g Graph<F>,
        trainable: impl Fn(&ParamEntry<F>) -> bool,
    ) -> Bound<'g, F> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| {
                    if trainable(e) {
                        graph.param(e.value.clone())
                    } else {
                        graph.constant(e.value.clone())
                    }
                })
                .collect(),
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    role: e.role,
                })
                .collect(),
        }
    }
}

/// Parameters placed on a particular graph.
pub struct Bound<'g, F: Real> {
    vars: Vec<Var<'g, F>>,
}

impl<'g, F: Real> Bound<'g, F> {
    /// Wraps graph variables laid out in store order.
    pub fn from_vars(vars: Vec<Var<'g, F>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g, F> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, F>] {
        &self.vars
    }
}

impl<'g, F: Real> Index<ParamId> for Bound<'g, F> {
    type Output = Var<'g, F>;

    fn index(&self, id: ParamId) -> &Var<'g, F> {
        &self.vars[id.0]
    }
}
