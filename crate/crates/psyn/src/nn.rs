//! Layer wrappers over the tape ops: linear, conv1d, layer norm,
//! embedding. Each wrapper owns the parameter handles and knows how to
//! run itself on a tape given a binding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::Result;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Train/eval switch carrying the dropout RNG. Dropout is skipped entirely
/// in eval mode, making inference a pure function of the parameters.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

pub fn maybe_dropout(tape: &mut Tape, x: TensorId, p: f32, mode: &mut Mode) -> Result<TensorId> {
    match mode {
        Mode::Train(rng) if p > 0.0 => tape.dropout(x, p, rng),
        _ => Ok(x),
    }
}

/// Scaled uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, count: usize) -> Vec<f32> {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    (0..count).map(|_| rng.gen_range(-a..a)).collect()
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup, rng: &mut ChaCha8Rng) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            vec![in_dim, out_dim],
            uniform_init(rng, in_dim, out_dim, in_dim * out_dim),
            group,
        );
        let b = store.register(&format!("{name}.b"), vec![out_dim], vec![0.0; out_dim], group);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let y = tape.matmul(x, bind.get(self.w))?;
        tape.add_bias(y, bind.get(self.b))
    }
}

pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, c_in: usize, c_out: usize, group: ParamGroup, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = k * c_in;
        let kernel = store.register(
            &format!("{name}.kernel"),
            vec![k, c_in, c_out],
            uniform_init(rng, fan_in, c_out, k * c_in * c_out),
            group,
        );
        let bias = store.register(&format!("{name}.bias"), vec![c_out], vec![0.0; c_out], group);
        Conv1d { kernel, bias, k, c_in, c_out }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        tape.conv1d_same(x, bind.get(self.kernel), Some(bind.get(self.bias)))
    }
}

pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gain = store.register(&format!("{name}.gain"), vec![dim], vec![1.0; dim], group);
        let bias = store.register(&format!("{name}.bias"), vec![dim], vec![0.0; dim], group);
        LayerNorm { gain, bias, dim }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        tape.layer_norm(x, bind.get(self.gain), bind.get(self.bias), LAYER_NORM_EPS)
    }
}

pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, group: ParamGroup, rng: &mut ChaCha8Rng) -> Self {
        let table = store.register(
            &format!("{name}.table"),
            vec![vocab, dim],
            uniform_init(rng, vocab, dim, vocab * dim),
            group,
        );
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, ids: &[usize]) -> Result<TensorId> {
        tape.embedding(bind.get(self.table), ids)
    }
}
