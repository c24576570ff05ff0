//! Named parameter storage shared across training steps. Parameters are
//! bound into each step's tape as leaves; gradients are read back out by
//! the optimizer. Registration order is fixed, which makes checkpoint
//! layout and update order deterministic.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, TensorId};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Mel predictor, duration predictor, prosody learner and mapping.
    Stage1,
    /// Prosody predictor (trained in stage 2 with stage 1 frozen).
    Predictor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub group: ParamGroup,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>, group: ParamGroup) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
            group,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut Vec<f32> {
        &mut self.entries[idx].data
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Insert every parameter into a tape as a leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Binding> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            ids.push(tape.leaf(&e.shape, e.data.clone(), requires_grad)?);
        }
        Ok(Binding { ids })
    }

    /// Collect per-parameter gradients after backward. Parameters the loss
    /// never touched come back as None.
    pub fn collect_grads(&self, tape: &Tape, binding: &Binding) -> Vec<Option<Vec<f32>>> {
        binding.ids.iter().map(|&id| tape.grad(id).map(<[f32]>::to_vec)).collect()
    }
}

/// Tape-local handles for the bound parameters of one forward pass.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn get(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}
