//! Windowed relative-position self-attention ("local attention") and the
//! block that stacks it with a 2-layer 1D conv network, residuals, layer
//! norm and dropout. No positional encodings exist anywhere: position is
//! carried entirely by the 2T+1 learned bilinear matrices indexed by the
//! relative offset i-j, so the block handles any sequence length with a
//! fixed parameter count.
//!
//! Scores are evaluated only on the band |i-j| <= T (O(n*T*d^2)); a dense
//! oracle lives in the tests. Out-of-window positions are a boolean mask
//! consumed by the softmax, never stored sentinels, so backward never sees
//! an infinity. Near sequence ends the window clips and the softmax
//! renormalizes over the shrunken window.

use rand_chacha::ChaCha8Rng;

use crate::nn::{maybe_dropout, uniform_init, Conv1d, LayerNorm, Mode};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::{Error, Result};

/// Boolean band mask: position (i, j) participates iff |i-j| <= window.
pub fn band_mask(n: usize, window: usize) -> Vec<bool> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i.abs_diff(j) <= window {
                mask[i * n + j] = true;
            }
        }
    }
    mask
}

struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wloc: ParamId,
}

pub struct LocalAttention {
    heads: Vec<Head>,
    wout: ParamId,
    pub d_model: usize,
    pub d_head: usize,
    pub window: usize,
}

/// W_loc init: identity at offset 0, identity scaled by 0.1 elsewhere,
/// starting near content-based attention with a mild positional bias.
fn wloc_init(window: usize, d_head: usize) -> Vec<f32> {
    let mut data = vec![0.0f32; (2 * window + 1) * d_head * d_head];
    for delta in 0..(2 * window + 1) {
        let scale = if delta == window { 1.0 } else { 0.1 };
        for r in 0..d_head {
            data[delta * d_head * d_head + r * d_head + r] = scale;
        }
    }
    data
}

impl LocalAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        window: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by head count {heads}"
            )));
        }
        let d_head = d_model / heads;
        let mut head_params = Vec::with_capacity(heads);
        for h in 0..heads {
            let mk = |store: &mut ParamStore, rng: &mut ChaCha8Rng, kind: &str| {
                store.register(
                    &format!("{name}.head{h}.{kind}"),
                    vec![d_model, d_head],
                    uniform_init(rng, d_model, d_head, d_model * d_head),
                    group,
                )
            };
            let wq = mk(store, rng, "wq");
            let wk = mk(store, rng, "wk");
            let wv = mk(store, rng, "wv");
            let wloc = store.register(
                &format!("{name}.head{h}.wloc"),
                vec![2 * window + 1, d_head, d_head],
                wloc_init(window, d_head),
                group,
            );
            head_params.push(Head { wq, wk, wv, wloc });
        }
        let wout = store.register(
            &format!("{name}.wout"),
            vec![heads * d_head, d_model],
            uniform_init(rng, heads * d_head, d_model, heads * d_head * d_model),
            group,
        );
        Ok(LocalAttention {
            heads: head_params,
            wout,
            d_model,
            d_head,
            window,
        })
    }

    /// q, k, v projections for one head.
    pub fn project_qkv(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h: TensorId,
        head: usize,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let hp = &self.heads[head];
        let q = tape.matmul(h, bind.get(hp.wq))?;
        let k = tape.matmul(h, bind.get(hp.wk))?;
        let v = tape.matmul(h, bind.get(hp.wv))?;
        Ok((q, k, v))
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Multi-head local attention: per head softmax(A / sqrt(d_head)) v on
    /// the band, heads concatenated then projected.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, h: TensorId) -> Result<TensorId> {
        let n = tape.shape(h)[0];
        let mask = band_mask(n, self.window);
        let scale = 1.0 / (self.d_head as f32).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for hi in 0..self.heads.len() {
            let (q, k, v) = self.project_qkv(tape, bind, h, hi)?;
            let scores = tape.relative_scores(q, k, bind.get(self.heads[hi].wloc), self.window)?;
            let scaled = tape.scale(scores, scale)?;
            let weights = tape.masked_softmax(scaled, &mask)?;
            outs.push(tape.matmul(weights, v)?);
        }
        let cat = tape.concat_cols(&outs)?;
        tape.matmul(cat, bind.get(self.wout))
    }
}

pub struct LocalAttentionBlock {
    pub attn: LocalAttention,
    conv1: Conv1d,
    conv2: Conv1d,
    ln1: LayerNorm,
    ln2: LayerNorm,
    dropout: f32,
}

impl LocalAttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        window: usize,
        kernel: usize,
        d_ff: usize,
        dropout: f32,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(LocalAttentionBlock {
            attn: LocalAttention::new(store, &format!("{name}.attn"), d_model, heads, window, group, rng)?,
            conv1: Conv1d::new(store, &format!("{name}.conv1"), kernel, d_model, d_ff, group, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), kernel, d_ff, d_model, group, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model, group),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model, group),
            dropout,
        })
    }

    /// y1 = LN(h + dropout(attn(h))); y2 = LN(y1 + dropout(conv2(relu(conv1(y1)))))
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, h: TensorId, mode: &mut Mode) -> Result<TensorId> {
        let a = self.attn.forward(tape, bind, h)?;
        let a = maybe_dropout(tape, a, self.dropout, mode)?;
        let y1 = tape.add(h, a)?;
        let y1 = self.ln1.forward(tape, bind, y1)?;
        let c = self.conv1.forward(tape, bind, y1)?;
        let c = tape.relu(c)?;
        let c = self.conv2.forward(tape, bind, c)?;
        let c = maybe_dropout(tape, c, self.dropout, mode)?;
        let y2 = tape.add(y1, c)?;
        self.ln2.forward(tape, bind, y2)
    }
}
