use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::LocalAttentionBlock;
use crate::features::MEL_CHANNELS;
use crate::model::ModelConfig;
use crate::nn::{Embedding, Linear, Mode};
use crate::params::{Binding, ParamGroup, ParamStore};
use crate::prosody::{ProsodyLearner, ProsodyPredictor, ProsodyPredictorConfig};
use crate::tensor::{Tape, TensorId};
use crate::Result;

/// Encoder-side outputs of one forward pass.
pub struct EncoderOut {
    /// m x d_model phoneme hidden states, input to the length regulator.
    pub hidden: TensorId,
    /// m x 80 emission means for the alignment model.
    pub mu: TensorId,
    /// m x 80 emission log-variances.
    pub logvar: TensorId,
    /// m x 1 predicted log-durations.
    pub log_dur: TensorId,
}

/// The complete system: phoneme encoder with emission and duration heads,
/// mel decoder, prosody learner/mapping, and the prosody predictor.
pub struct TtsModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub prosody_mapping: Linear,
    pub encoder_blocks: Vec<LocalAttentionBlock>,
    pub emission_head: Linear,
    pub duration_blocks: Vec<LocalAttentionBlock>,
    pub duration_head: Linear,
    pub decoder_blocks: Vec<LocalAttentionBlock>,
    pub mel_head: Linear,
    pub learner: ProsodyLearner,
    pub predictor: ProsodyPredictor,
    pub stage1_done: bool,
    pub stage2_done: bool,
}

impl TtsModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let block = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            LocalAttentionBlock::new(
                store, name, c.d_model, c.heads, c.window, c.kernel, c.d_model, c.dropout, ParamGroup::Stage1, rng,
            )
        };

        let embedding = Embedding::new(&mut store, "embedding", c.vocab_size, c.d_model, ParamGroup::Stage1, &mut rng);
        let prosody_mapping = Linear::new(
            &mut store,
            "prosody_mapping",
            c.prosody_dim,
            c.d_model,
            ParamGroup::Stage1,
            &mut rng,
        );
        let mut encoder_blocks = Vec::with_capacity(c.encoder_blocks);
        for i in 0..c.encoder_blocks {
            encoder_blocks.push(block(&mut store, &format!("encoder.block{i}"), &mut rng)?);
        }
        let emission_head = Linear::new(
            &mut store,
            "emission_head",
            c.d_model,
            2 * MEL_CHANNELS,
            ParamGroup::Stage1,
            &mut rng,
        );
        let mut duration_blocks = Vec::with_capacity(c.duration_blocks);
        for i in 0..c.duration_blocks {
            duration_blocks.push(block(&mut store, &format!("duration.block{i}"), &mut rng)?);
        }
        let duration_head = Linear::new(&mut store, "duration_head", c.d_model, 1, ParamGroup::Stage1, &mut rng);
        let mut decoder_blocks = Vec::with_capacity(c.decoder_blocks);
        for i in 0..c.decoder_blocks {
            decoder_blocks.push(block(&mut store, &format!("decoder.block{i}"), &mut rng)?);
        }
        let mel_head = Linear::new(&mut store, "mel_head", c.d_model, MEL_CHANNELS, ParamGroup::Stage1, &mut rng);
        let learner = ProsodyLearner::new(
            &mut store,
            "learner",
            MEL_CHANNELS,
            c.d_model,
            c.learner_layers,
            c.kernel,
            c.prosody_dim,
            &mut rng,
        );
        let predictor = ProsodyPredictor::new(
            &mut store,
            "predictor",
            &ProsodyPredictorConfig {
                vocab: c.vocab_size,
                d_model: c.d_model,
                word_dim: c.word_dim,
                conv_layers: c.predictor_convs,
                blocks: c.predictor_blocks,
                heads: c.heads,
                window: c.window,
                kernel: c.kernel,
                dropout: c.dropout,
                components: c.mixtures,
                prosody_dim: c.prosody_dim,
                use_word_branch: c.use_word_branch,
            },
            &mut rng,
        )?;
        Ok(TtsModel {
            config,
            store,
            embedding,
            prosody_mapping,
            encoder_blocks,
            emission_head,
            duration_blocks,
            duration_head,
            decoder_blocks,
            mel_head,
            learner,
            predictor,
            stage1_done: false,
            stage2_done: false,
        })
    }

    /// Phoneme ids (+ optional m x d_model prosody embedding) -> hidden
    /// states, alignment emission stats, and log-durations.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        phonemes: &[usize],
        prosody_emb: Option<TensorId>,
        mode: &mut Mode,
    ) -> Result<EncoderOut> {
        let mut h = self.embedding.forward(tape, bind, phonemes)?;
        if let Some(p) = prosody_emb {
            h = tape.add(h, p)?;
        }
        for block in &self.encoder_blocks {
            h = block.forward(tape, bind, h, mode)?;
        }
        let stats = self.emission_head.forward(tape, bind, h)?;
        let mu = tape.slice_cols(stats, 0, MEL_CHANNELS)?;
        let logvar = tape.slice_cols(stats, MEL_CHANNELS, 2 * MEL_CHANNELS)?;
        let mut d = h;
        for block in &self.duration_blocks {
            d = block.forward(tape, bind, d, mode)?;
        }
        let log_dur = self.duration_head.forward(tape, bind, d)?;
        Ok(EncoderOut {
            hidden: h,
            mu,
            logvar,
            log_dur,
        })
    }

    /// Length-regulated hidden states -> n x 80 mel frames.
    pub fn decoder_forward(&self, tape: &mut Tape, bind: &Binding, expanded: TensorId, mode: &mut Mode) -> Result<TensorId> {
        let mut h = expanded;
        for block in &self.decoder_blocks {
            h = block.forward(tape, bind, h, mode)?;
        }
        self.mel_head.forward(tape, bind, h)
    }

    /// Prosody representation (m x D_p) -> prosody embedding (m x d_model).
    pub fn prosody_embed(&self, tape: &mut Tape, bind: &Binding, rep: TensorId) -> Result<TensorId> {
        self.prosody_mapping.forward(tape, bind, rep)
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Binding> {
        self.store.bind(tape, requires_grad)
    }
}
