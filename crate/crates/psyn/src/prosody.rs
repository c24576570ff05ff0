//! Prosody learning and prediction. The learner distills the mel-spectrum
//! into a low-dimensional per-phoneme representation by conv encoding and
//! alignment-guided mean pooling; a linear mapping lifts it to model width.
//! The predictor models the representation's distribution per phoneme as a
//! Gaussian mixture, conditioned on phonemes and word embeddings from a
//! pluggable provider.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::LocalAttentionBlock;
use crate::nn::{Conv1d, Embedding, Linear, Mode};
use crate::params::{Binding, ParamGroup, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::{Error, Result};

/// Deterministic word-to-vector source. One vector per word, fixed width.
/// `Sync` so batch workers can share one provider.
pub trait WordEmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, word: &str) -> Vec<f32>;
}

/// Hash-seeded unit-norm random vectors; identical words map to identical
/// vectors across runs and platforms.
pub struct StubWordEmbeddings {
    dim: usize,
}

impl StubWordEmbeddings {
    pub fn new(dim: usize) -> Self {
        StubWordEmbeddings { dim }
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl WordEmbeddingProvider for StubWordEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, word: &str) -> Vec<f32> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word));
        let mut v: Vec<f32> = (0..self.dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

/// Repeat each word vector across its phoneme span. Same repetition
/// semantics (and tape op) as the length regulator.
pub fn upsample_word_embeddings(
    tape: &mut Tape,
    provider: &dyn WordEmbeddingProvider,
    words: &[String],
    spans: &[usize],
    phoneme_count: usize,
) -> Result<TensorId> {
    if words.len() != spans.len() {
        return Err(Error::Invariant(format!(
            "{} words but {} spans",
            words.len(),
            spans.len()
        )));
    }
    let total: usize = spans.iter().sum();
    if total != phoneme_count {
        return Err(Error::Invariant(format!(
            "word spans sum {total} != phoneme count {phoneme_count}"
        )));
    }
    let dim = provider.dim();
    let mut data = Vec::with_capacity(words.len() * dim);
    for w in words {
        let v = provider.embed(w);
        debug_assert_eq!(v.len(), dim);
        data.extend_from_slice(&v);
    }
    let mat = tape.constant(&[words.len(), dim], data)?;
    tape.length_regulate(mat, spans)
}

/// Mel encoder: conv stack with relu and residual connections, then
/// alignment-guided mean pooling, then a linear projection down to the
/// prosody dimension.
pub struct ProsodyLearner {
    convs: Vec<Conv1d>,
    pub proj: Linear,
}

impl ProsodyLearner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mel_dim: usize,
        d_model: usize,
        layers: usize,
        kernel: usize,
        prosody_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(layers);
        for i in 0..layers {
            let c_in = if i == 0 { mel_dim } else { d_model };
            convs.push(Conv1d::new(
                store,
                &format!("{name}.conv{i}"),
                kernel,
                c_in,
                d_model,
                ParamGroup::Stage1,
                rng,
            ));
        }
        let proj = Linear::new(store, &format!("{name}.proj"), d_model, prosody_dim, ParamGroup::Stage1, rng);
        ProsodyLearner { convs, proj }
    }

    /// mel `[n, 80]` (already on the tape) -> representation `[m, D_p]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, mel: TensorId, durations: &[usize]) -> Result<TensorId> {
        let frames: usize = durations.iter().sum();
        if tape.shape(mel)[0] != frames {
            return Err(Error::Invariant(format!(
                "prosody learner: alignment covers {frames} frames but mel has {}",
                tape.shape(mel)[0]
            )));
        }
        let mut x = mel;
        for (i, conv) in self.convs.iter().enumerate() {
            let c = conv.forward(tape, bind, x)?;
            let c = tape.relu(c)?;
            // width changes on the first layer, so the residual starts at layer 2
            x = if i == 0 { c } else { tape.add(x, c)? };
        }
        let pooled = tape.segment_mean_pool(x, durations)?;
        self.proj.forward(tape, bind, pooled)
    }
}

/// Per-phoneme Gaussian mixture parameters read off a tape.
#[derive(Debug, Clone)]
pub struct MdnParams {
    pub weights: Vec<f32>, // [m, C] logits
    pub means: Vec<f32>,   // [m, C*D_p]
    pub logvars: Vec<f32>, // [m, C*D_p]
    pub phonemes: usize,
    pub components: usize,
    pub dim: usize,
}

/// Phoneme conv stack plus word-embedding branch feeding stacked local
/// attention blocks and a mixture-density head.
pub struct ProsodyPredictor {
    pub embedding: Embedding,
    convs: Vec<Conv1d>,
    word_proj: Linear,
    blocks: Vec<LocalAttentionBlock>,
    head: Linear,
    pub components: usize,
    pub prosody_dim: usize,
    pub use_word_branch: bool,
}

pub struct ProsodyPredictorConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub word_dim: usize,
    pub conv_layers: usize,
    pub blocks: usize,
    pub heads: usize,
    pub window: usize,
    pub kernel: usize,
    pub dropout: f32,
    pub components: usize,
    pub prosody_dim: usize,
    pub use_word_branch: bool,
}

impl ProsodyPredictor {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ProsodyPredictorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let group = ParamGroup::Predictor;
        let embedding = Embedding::new(store, &format!("{name}.embedding"), cfg.vocab, cfg.d_model, group, rng);
        let mut convs = Vec::with_capacity(cfg.conv_layers);
        for i in 0..cfg.conv_layers {
            convs.push(Conv1d::new(
                store,
                &format!("{name}.conv{i}"),
                cfg.kernel,
                cfg.d_model,
                cfg.d_model,
                group,
                rng,
            ));
        }
        let word_proj = Linear::new(store, &format!("{name}.word_proj"), cfg.word_dim, cfg.d_model, group, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            blocks.push(LocalAttentionBlock::new(
                store,
                &format!("{name}.block{i}"),
                cfg.d_model,
                cfg.heads,
                cfg.window,
                cfg.kernel,
                cfg.d_model,
                cfg.dropout,
                group,
                rng,
            )?);
        }
        let head = Linear::new(
            store,
            &format!("{name}.head"),
            cfg.d_model,
            cfg.components * (1 + 2 * cfg.prosody_dim),
            group,
            rng,
        );
        Ok(ProsodyPredictor {
            embedding,
            convs,
            word_proj,
            blocks,
            head,
            components: cfg.components,
            prosody_dim: cfg.prosody_dim,
            use_word_branch: cfg.use_word_branch,
        })
    }

    /// Returns tape handles for (weight logits, means, logvars).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        phonemes: &[usize],
        provider: &dyn WordEmbeddingProvider,
        words: &[String],
        spans: &[usize],
        mode: &mut Mode,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let m = phonemes.len();
        let mut x = self.embedding.forward(tape, bind, phonemes)?;
        for conv in &self.convs {
            let c = conv.forward(tape, bind, x)?;
            x = tape.relu(c)?;
        }
        if self.use_word_branch {
            let up = upsample_word_embeddings(tape, provider, words, spans, m)?;
            let w = self.word_proj.forward(tape, bind, up)?;
            x = tape.add(x, w)?;
        }
        for block in &self.blocks {
            x = block.forward(tape, bind, x, mode)?;
        }
        let out = self.head.forward(tape, bind, x)?;
        let c = self.components;
        let dp = self.prosody_dim;
        let weights = tape.slice_cols(out, 0, c)?;
        let means = tape.slice_cols(out, c, c + c * dp)?;
        let logvars = tape.slice_cols(out, c + c * dp, c * (1 + 2 * dp))?;
        Ok((weights, means, logvars))
    }

    pub fn read_params(&self, tape: &Tape, ids: (TensorId, TensorId, TensorId), m: usize) -> MdnParams {
        MdnParams {
            weights: tape.data(ids.0).to_vec(),
            means: tape.data(ids.1).to_vec(),
            logvars: tape.data(ids.2).to_vec(),
            phonemes: m,
            components: self.components,
            dim: self.prosody_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Argmax,
}

fn box_muller(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

fn softmax_row(logits: &[f32]) -> Vec<f32> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|l| (l - mx).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Draw a prosody representation from mixture parameters.
/// Argmax mode picks the most probable component's mean deterministically.
/// Sample mode draws the component categorically, then a Gaussian draw with
/// the standard deviation scaled by `temperature` (0 gives the mean).
pub fn mdn_sample(params: &MdnParams, rng: &mut ChaCha8Rng, temperature: f32, mode: SampleMode) -> Result<Vec<f32>> {
    if temperature < 0.0 {
        return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
    }
    let (m, c, dp) = (params.phonemes, params.components, params.dim);
    let mut out = Vec::with_capacity(m * dp);
    for i in 0..m {
        let probs = softmax_row(&params.weights[i * c..(i + 1) * c]);
        let comp = match mode {
            SampleMode::Argmax => {
                probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            }
            SampleMode::Sample => {
                let u: f32 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = c - 1;
                for (j, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = j;
                        break;
                    }
                }
                chosen
            }
        };
        for d in 0..dp {
            let idx = i * c * dp + comp * dp + d;
            let mean = params.means[idx];
            match mode {
                SampleMode::Argmax => out.push(mean),
                SampleMode::Sample => {
                    let std = (params.logvars[idx].exp().max(crate::tensor::VARIANCE_FLOOR as f32)).sqrt();
                    out.push(mean + temperature * std * box_muller(rng));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const LOG_2PI: f64 = 1.837_877_066_409_345_5;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn stub_embeddings_deterministic_and_unit_norm() {
        let p = StubWordEmbeddings::new(64);
        let a = p.embed("hello");
        let b = p.embed("hello");
        assert_eq!(a, b);
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stub_embeddings_no_collisions_over_ten_thousand_words() {
        let p = StubWordEmbeddings::new(64);
        let mut seen = std::collections::HashSet::new();
        for i in 0..10_000 {
            let v = p.embed(&format!("word{i}"));
            let bits: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(bits), "collision at word{i}");
        }
    }

    #[test]
    fn upsample_matches_length_regulator_bit_exact() {
        let p = StubWordEmbeddings::new(8);
        let words = vec!["u".to_string(), "v".to_string()];
        let spans = vec![2usize, 1];
        let mut tape = Tape::new();
        let up = upsample_word_embeddings(&mut tape, &p, &words, &spans, 3).unwrap();
        // direct length_regulate on the same matrix
        let mut data = p.embed("u");
        data.extend(p.embed("v"));
        let mat = tape.constant(&[2, 8], data).unwrap();
        let reg = tape.length_regulate(mat, &spans).unwrap();
        assert_eq!(tape.data(up), tape.data(reg));
        assert_eq!(tape.shape(up), &[3, 8]);
    }

    #[test]
    fn upsample_span_mismatch_is_error() {
        let p = StubWordEmbeddings::new(4);
        let mut tape = Tape::new();
        assert!(upsample_word_embeddings(&mut tape, &p, &["a".to_string()], &[2], 3).is_err());
    }

    #[test]
    fn learner_constant_mel_gives_identical_rows() {
        let mut r = rng(30);
        let mut store = ParamStore::new();
        let learner = ProsodyLearner::new(&mut store, "l", 4, 8, 4, 3, 3, &mut r);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false).unwrap();
        let n = 20;
        let mel = tape.constant(&[n, 4], vec![0.7; n * 4]).unwrap();
        let rep = learner.forward(&mut tape, &bind, mel, &[5, 5, 5, 5]).unwrap();
        assert_eq!(tape.shape(rep), &[4, 3]);
        // segments 1 and 2 sit fully inside the signal, so with a constant
        // input their conv responses (and pooled rows) coincide
        let d = tape.data(rep);
        for k in 0..3 {
            assert!((d[3 + k] - d[6 + k]).abs() < 1e-6);
        }
    }

    #[test]
    fn learner_single_phoneme_is_global_pooling() {
        let mut r = rng(31);
        let mut store = ParamStore::new();
        let learner = ProsodyLearner::new(&mut store, "l", 4, 8, 2, 3, 3, &mut r);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false).unwrap();
        use rand::Rng;
        let n = 6;
        let meldata: Vec<f32> = (0..n * 4).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let mel = tape.constant(&[n, 4], meldata).unwrap();
        let rep = learner.forward(&mut tape, &bind, mel, &[n]).unwrap();
        assert_eq!(tape.shape(rep), &[1, 3]);
    }

    #[test]
    fn learner_zero_projection_gives_zero_rep_but_nonzero_grad() {
        let mut r = rng(32);
        let mut store = ParamStore::new();
        let learner = ProsodyLearner::new(&mut store, "l", 4, 8, 2, 3, 2, &mut r);
        // zero the final projection
        let wlen = store.entries()[learner.proj.w.0].data.len();
        *store.data_mut(learner.proj.w.0) = vec![0.0; wlen];
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, true).unwrap();
        use rand::Rng;
        let meldata: Vec<f32> = (0..6 * 4).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let mel = tape.constant(&[6, 4], meldata).unwrap();
        let rep = learner.forward(&mut tape, &bind, mel, &[2, 4]).unwrap();
        assert!(tape.data(rep).iter().all(|&v| v == 0.0));
        // gradient still reaches the zeroed projection through a sum loss
        let loss = tape.sum_all(rep).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(bind.get(learner.proj.w)).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mdn_nll_single_component_at_mean_unit_variance() {
        // NLL per phoneme = (D_p/2) log(2 pi) for C=1, mu=target, s=0
        let mut tape = Tape::new();
        let m = 2;
        let dp = 3;
        let target = vec![0.3f32, -0.5, 1.2, 0.0, 0.7, -0.2];
        let w = tape.constant(&[m, 1], vec![0.0; m]).unwrap();
        let mu = tape.constant(&[m, dp], target.clone()).unwrap();
        let s = tape.constant(&[m, dp], vec![0.0; m * dp]).unwrap();
        let nll = tape.mdn_nll(w, mu, s, &target, 1, dp).unwrap();
        let expect = (dp as f64 / 2.0) * LOG_2PI;
        assert!((tape.scalar_value(nll) as f64 - expect).abs() < 1e-4);
    }

    #[test]
    fn mdn_duplicated_components_collapse_to_single() {
        let mut tape = Tape::new();
        let (m, dp) = (1, 2);
        let target = vec![0.4f32, -0.9];
        // two identical components with arbitrary weights
        let w = tape.constant(&[m, 2], vec![1.3, -0.7]).unwrap();
        let mu = tape.constant(&[m, 4], vec![0.1, 0.2, 0.1, 0.2]).unwrap();
        let s = tape.constant(&[m, 4], vec![-0.3, 0.5, -0.3, 0.5]).unwrap();
        let nll2 = tape.mdn_nll(w, mu, s, &target, 2, dp).unwrap();
        let w1 = tape.constant(&[m, 1], vec![0.0]).unwrap();
        let mu1 = tape.constant(&[m, 2], vec![0.1, 0.2]).unwrap();
        let s1 = tape.constant(&[m, 2], vec![-0.3, 0.5]).unwrap();
        let nll1 = tape.mdn_nll(w1, mu1, s1, &target, 1, dp).unwrap();
        assert!((tape.scalar_value(nll2) - tape.scalar_value(nll1)).abs() < 1e-5);
    }

    #[test]
    fn mdn_nll_matches_f64_oracle() {
        use rand::Rng;
        let mut r = rng(33);
        let (m, c, dp) = (3usize, 2usize, 3usize);
        let w: Vec<f32> = (0..m * c).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let mu: Vec<f32> = (0..m * c * dp).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let s: Vec<f32> = (0..m * c * dp).map(|_| r.gen_range(-0.5f32..0.5)).collect();
        let target: Vec<f32> = (0..m * dp).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        // f64 direct evaluation
        let mut total = 0.0f64;
        for i in 0..m {
            let wrow: Vec<f64> = (0..c).map(|j| w[i * c + j] as f64).collect();
            let wmax = wrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = wrow.iter().map(|x| (x - wmax).exp()).sum();
            let mut px = 0.0f64;
            for j in 0..c {
                let weight = (wrow[j] - wmax).exp() / z;
                let mut dens = 1.0f64;
                for d in 0..dp {
                    let idx = i * c * dp + j * dp + d;
                    let v = (s[idx] as f64).exp();
                    let diff = target[i * dp + d] as f64 - mu[idx] as f64;
                    dens *= (-0.5 * diff * diff / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                px += weight * dens;
            }
            total -= px.ln();
        }
        total /= m as f64;

        let mut tape = Tape::new();
        let wt = tape.constant(&[m, c], w).unwrap();
        let mut_ = tape.constant(&[m, c * dp], mu).unwrap();
        let st = tape.constant(&[m, c * dp], s).unwrap();
        let nll = tape.mdn_nll(wt, mut_, st, &target, c, dp).unwrap();
        assert!((tape.scalar_value(nll) as f64 - total).abs() < 1e-5);
    }

    #[test]
    fn mdn_nll_gradient_check() {
        use rand::Rng;
        let mut r = rng(34);
        let (m, c, dp) = (2usize, 2usize, 2usize);
        let mu: Vec<f32> = (0..m * c * dp).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let s: Vec<f32> = (0..m * c * dp).map(|_| r.gen_range(-0.5f32..0.5)).collect();
        let target: Vec<f32> = (0..m * dp).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let w0: Vec<f32> = (0..m * c).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let (mu2, s2, t2) = (mu.clone(), s.clone(), target.clone());
        let err = crate::tensor::check_gradients(
            move |tape, w| {
                let muid = tape.constant(&[m, c * dp], mu2.clone())?;
                let sid = tape.constant(&[m, c * dp], s2.clone())?;
                tape.mdn_nll(w, muid, sid, &t2, c, dp)
            },
            &[m, c],
            &w0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "weights rel err {err}");

        let (w2, s3, t3) = (w0.clone(), s.clone(), target.clone());
        let err = crate::tensor::check_gradients(
            move |tape, mu| {
                let wid = tape.constant(&[m, c], w2.clone())?;
                let sid = tape.constant(&[m, c * dp], s3.clone())?;
                tape.mdn_nll(wid, mu, sid, &t3, c, dp)
            },
            &[m, c * dp],
            &mu,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "means rel err {err}");

        let (w3, mu3, t4) = (w0, mu, target);
        let err = crate::tensor::check_gradients(
            move |tape, s| {
                let wid = tape.constant(&[m, c], w3.clone())?;
                let muid = tape.constant(&[m, c * dp], mu3.clone())?;
                tape.mdn_nll(wid, muid, s, &t4, c, dp)
            },
            &[m, c * dp],
            &s,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "logvars rel err {err}");
    }

    #[test]
    fn mdn_mixture_bound_property() {
        use rand::Rng;
        let mut r = rng(35);
        for _ in 0..20 {
            let (m, c, dp) = (1usize, 3usize, 2usize);
            let w: Vec<f32> = (0..c).map(|_| r.gen_range(-1.0f32..1.0)).collect();
            let mu: Vec<f32> = (0..c * dp).map(|_| r.gen_range(-1.0f32..1.0)).collect();
            let s: Vec<f32> = (0..c * dp).map(|_| r.gen_range(-0.5f32..0.5)).collect();
            let target: Vec<f32> = (0..dp).map(|_| r.gen_range(-1.0f32..1.0)).collect();
            let mut tape = Tape::new();
            let wid = tape.constant(&[m, c], w).unwrap();
            let muid = tape.constant(&[m, c * dp], mu.clone()).unwrap();
            let sid = tape.constant(&[m, c * dp], s.clone()).unwrap();
            let mix_id = tape.mdn_nll(wid, muid, sid, &target, c, dp).unwrap();
            let mix = tape.scalar_value(mix_id);
            // best single component NLL
            let mut best = f32::INFINITY;
            for j in 0..c {
                let mut t2 = Tape::new();
                let w1 = t2.constant(&[1, 1], vec![0.0]).unwrap();
                let mu1 = t2.constant(&[1, dp], mu[j * dp..(j + 1) * dp].to_vec()).unwrap();
                let s1 = t2.constant(&[1, dp], s[j * dp..(j + 1) * dp].to_vec()).unwrap();
                let nll = t2.mdn_nll(w1, mu1, s1, &target, 1, dp).unwrap();
                best = best.min(t2.scalar_value(nll));
            }
            assert!(mix >= best - (c as f32).ln() - 1e-5);
        }
    }

    #[test]
    fn sampling_temperature_zero_returns_mean() {
        let params = MdnParams {
            weights: vec![0.0],
            means: vec![0.5, -1.0],
            logvars: vec![0.3, -0.2],
            phonemes: 1,
            components: 1,
            dim: 2,
        };
        let mut r = rng(36);
        let out = mdn_sample(&params, &mut r, 0.0, SampleMode::Sample).unwrap();
        assert_eq!(out, vec![0.5, -1.0]);
    }

    #[test]
    fn argmax_mode_deterministic() {
        let params = MdnParams {
            weights: vec![0.1, 2.0],
            means: vec![1.0, 1.0, -2.0, -2.0],
            logvars: vec![0.0; 4],
            phonemes: 1,
            components: 2,
            dim: 2,
        };
        let mut r1 = rng(37);
        let mut r2 = rng(99);
        let a = mdn_sample(&params, &mut r1, 1.0, SampleMode::Argmax).unwrap();
        let b = mdn_sample(&params, &mut r2, 1.0, SampleMode::Argmax).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![-2.0, -2.0]);
    }

    #[test]
    fn monte_carlo_mean_matches_mixture_mean() {
        let params = MdnParams {
            weights: vec![0.0, (3.0f32).ln()], // probs 0.25 / 0.75
            means: vec![1.0, -2.0],
            logvars: vec![(0.25f32).ln(), (0.5f32).ln()],
            phonemes: 1,
            components: 2,
            dim: 1,
        };
        let probs = [0.25f64, 0.75];
        let mix_mean = probs[0] * 1.0 + probs[1] * -2.0;
        let vars = [0.25f64, 0.5];
        let second: f64 = probs[0] * (vars[0] + 1.0) + probs[1] * (vars[1] + 4.0);
        let mix_var = second - mix_mean * mix_mean;
        let n = 100_000usize;
        let mut r = rng(38);
        let mut sum = 0.0f64;
        for _ in 0..n {
            let s = mdn_sample(&params, &mut r, 1.0, SampleMode::Sample).unwrap();
            sum += s[0] as f64;
        }
        let emp = sum / n as f64;
        let se = (mix_var / n as f64).sqrt();
        assert!((emp - mix_mean).abs() < 3.0 * se, "emp {emp} vs {mix_mean} (se {se})");
    }

    #[test]
    fn predictor_nll_decreases_under_adam() {
        use crate::nn::Mode;
        use crate::optim::Adam;
        use rand::Rng;

        let mut r = rng(70);
        let mut store = ParamStore::new();
        let cfg = ProsodyPredictorConfig {
            vocab: 8,
            d_model: 16,
            word_dim: 8,
            conv_layers: 1,
            blocks: 1,
            heads: 2,
            window: 2,
            kernel: 3,
            dropout: 0.0,
            components: 2,
            prosody_dim: 3,
            use_word_branch: false,
        };
        let predictor = ProsodyPredictor::new(&mut store, "p", &cfg, &mut r).unwrap();
        let phonemes = [1usize, 3, 5, 2];
        let target: Vec<f32> = (0..phonemes.len() * cfg.prosody_dim)
            .map(|_| r.gen_range(-0.8f32..0.8))
            .collect();
        let provider = StubWordEmbeddings::new(cfg.word_dim);
        let mut adam = Adam::new(&store);
        let mut curve = Vec::with_capacity(50);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape, true).unwrap();
            let ids = predictor
                .forward(&mut tape, &bind, &phonemes, &provider, &[], &[], &mut Mode::Eval)
                .unwrap();
            let nll = tape
                .mdn_nll(ids.0, ids.1, ids.2, &target, cfg.components, cfg.prosody_dim)
                .unwrap();
            curve.push(tape.scalar_value(nll));
            tape.backward(nll).unwrap();
            let grads = store.collect_grads(&tape, &bind);
            adam.step(&mut store, &grads, 1e-2, Some(ParamGroup::Predictor));
        }
        let first: f32 = curve[..10].iter().sum::<f32>() / 10.0;
        let last: f32 = curve[40..].iter().sum::<f32>() / 10.0;
        assert!(last.is_finite());
        assert!(last < first, "NLL did not decrease: {first} -> {last}");
    }
}
