//! Inference: sampled-prosody synthesis from text, oracle-prosody
//! reconstruction of a reference mel, and the metric report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::durations_from_predictor;
use crate::corpus::{Corpus, LoadedUtterance};
use crate::features::{MelSpectrogram, MEL_CHANNELS};
use crate::model::train::viterbi_teacher;
use crate::model::TtsModel;
use crate::nn::Mode;
use crate::prosody::{mdn_sample, SampleMode, WordEmbeddingProvider};
use crate::tensor::Tape;
use crate::{Error, Result};

pub struct SynthRequest<'a> {
    pub phonemes: &'a [usize],
    pub words: &'a [String],
    pub spans: &'a [usize],
    pub seed: u64,
    pub temperature: f32,
    pub mode: SampleMode,
    /// Multiplies predicted durations before rounding.
    pub speed: f32,
}

/// Full inference path: prosody predictor -> sample -> prosody mapping ->
/// encoder -> predicted durations -> length regulator -> decoder.
pub fn synthesize(model: &TtsModel, provider: &dyn WordEmbeddingProvider, req: &SynthRequest) -> Result<MelSpectrogram> {
    if !model.stage2_done {
        return Err(Error::StageOrder(
            "synthesis needs a stage-2 checkpoint; run training stage 2 first".into(),
        ));
    }
    let m = req.phonemes.len();
    let params = {
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, false)?;
        let ids = model
            .predictor
            .forward(&mut tape, &bind, req.phonemes, provider, req.words, req.spans, &mut Mode::Eval)?;
        model.predictor.read_params(&tape, ids, m)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let rep = mdn_sample(&params, &mut rng, req.temperature, req.mode)?;

    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false)?;
    let rep_id = tape.constant(&[m, model.config.prosody_dim], rep)?;
    let pemb = model.prosody_embed(&mut tape, &bind, rep_id)?;
    let out = model.encoder_forward(&mut tape, &bind, req.phonemes, Some(pemb), &mut Mode::Eval)?;
    let durations = durations_from_predictor(tape.data(out.log_dur), req.speed).durations;
    let expanded = tape.length_regulate(out.hidden, &durations)?;
    let mel = model.decoder_forward(&mut tape, &bind, expanded, &mut Mode::Eval)?;
    let frames: usize = durations.iter().sum();
    MelSpectrogram::new(tape.data(mel).to_vec(), frames)
}

/// Oracle-prosody reconstruction of a reference utterance: prosody from
/// the learner, durations from Viterbi against the reference mel. With
/// `zero_prosody` the prosody embedding is omitted (ablation baseline).
/// Returns the predicted mel and its L1 distance to the reference.
pub fn reconstruct(model: &TtsModel, utt: &LoadedUtterance, zero_prosody: bool) -> Result<(MelSpectrogram, f32)> {
    if !model.stage1_done {
        return Err(Error::StageOrder("reconstruction requires a stage-1 checkpoint".into()));
    }
    let frames = utt.mel.frames;
    let durations = viterbi_teacher(model, &utt.phonemes, &utt.mel.data, frames)?;
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false)?;
    let pemb = if zero_prosody {
        None
    } else {
        let mel_const = tape.constant(&[frames, MEL_CHANNELS], utt.mel.data.clone())?;
        let rep = model.learner.forward(&mut tape, &bind, mel_const, &durations)?;
        Some(model.prosody_embed(&mut tape, &bind, rep)?)
    };
    let out = model.encoder_forward(&mut tape, &bind, &utt.phonemes, pemb, &mut Mode::Eval)?;
    let expanded = tape.length_regulate(out.hidden, &durations)?;
    let mel = model.decoder_forward(&mut tape, &bind, expanded, &mut Mode::Eval)?;
    let l1 = tape.l1_loss(mel, &utt.mel.data)?;
    let l1_v = tape.scalar_value(l1);
    Ok((MelSpectrogram::new(tape.data(mel).to_vec(), frames)?, l1_v))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Mean oracle-prosody reconstruction L1 over the corpus.
    pub mel_l1: f32,
    /// Mean |viterbi - ground truth| over phonemes, when duration
    /// sidecars exist.
    pub duration_mae: Option<f32>,
    /// Mean predictor NLL against learner targets, when stage 2 is done.
    pub prosody_nll: Option<f32>,
}

pub fn evaluate(model: &TtsModel, corpus: &Corpus, provider: &dyn WordEmbeddingProvider) -> Result<EvalReport> {
    if !model.stage1_done {
        return Err(Error::StageOrder("evaluation requires a stage-1 checkpoint".into()));
    }
    let mut l1_sum = 0.0f64;
    let mut mae_sum = 0.0f64;
    let mut mae_count = 0usize;
    let mut nll_sum = 0.0f64;
    for utt in &corpus.utterances {
        let (_, l1) = reconstruct(model, utt, false)?;
        l1_sum += f64::from(l1);
        if let Some(gt) = &utt.durations {
            let vit = viterbi_teacher(model, &utt.phonemes, &utt.mel.data, utt.mel.frames)?;
            for (a, b) in vit.iter().zip(gt) {
                mae_sum += (*a as f64 - *b as f64).abs();
                mae_count += 1;
            }
        }
        if model.stage2_done {
            let target = crate::model::train::extract_prosody_target(model, utt)?;
            let mut tape = Tape::new();
            let bind = model.bind(&mut tape, false)?;
            let ids = model
                .predictor
                .forward(&mut tape, &bind, &utt.phonemes, provider, &utt.words, &utt.spans, &mut Mode::Eval)?;
            let nll = tape.mdn_nll(
                ids.0,
                ids.1,
                ids.2,
                &target,
                model.config.mixtures,
                model.config.prosody_dim,
            )?;
            nll_sum += f64::from(tape.scalar_value(nll));
        }
    }
    let n = corpus.utterances.len() as f64;
    Ok(EvalReport {
        mel_l1: (l1_sum / n) as f32,
        duration_mae: (mae_count > 0).then(|| (mae_sum / mae_count as f64) as f32),
        prosody_nll: model.stage2_done.then(|| (nll_sum / n) as f32),
    })
}
