//! Two-stage training. Stage 1 jointly fits the mel predictor, duration
//! predictor and prosody learner against self-extracted monotonic
//! alignments; stage 2 fits the prosody predictor to the learner's frozen
//! outputs. Batches run one tape per utterance; gradients reduce in a
//! fixed slot order so results are bit-identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::viterbi_durations_f32;
use crate::corpus::{Corpus, LoadedUtterance};
use crate::model::TtsModel;
use crate::nn::Mode;
use crate::optim::{noam_lr, Adam};
use crate::params::ParamGroup;
use crate::prosody::WordEmbeddingProvider;
use crate::tensor::Tape;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of steps at the start of stage 1 spent on the alignment
    /// loss alone.
    pub warmup_frac: f32,
    pub lambda_dur: f32,
    pub lambda_align: f32,
    pub lr_factor: f32,
    pub lr_warmup: u64,
    pub workers: usize,
}

impl TrainOptions {
    pub fn stage1(steps: usize, seed: u64) -> Self {
        TrainOptions {
            steps,
            batch_size: 4,
            seed,
            warmup_frac: 0.2,
            lambda_dur: 0.1,
            lambda_align: 1.0,
            lr_factor: 1.0,
            lr_warmup: 200,
            workers: 1,
        }
    }

    pub fn stage2(steps: usize, seed: u64) -> Self {
        TrainOptions {
            steps,
            batch_size: 4,
            seed,
            warmup_frac: 0.0,
            lambda_dur: 0.0,
            lambda_align: 0.0,
            lr_factor: 0.5,
            lr_warmup: 100,
            workers: 1,
        }
    }
}

/// Per-step loss record (batch means).
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: f32,
    pub mel: f32,
    pub dur: f32,
    pub align: f32,
}

fn dropout_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let s = seed
        .wrapping_add((step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((slot as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
    ChaCha8Rng::seed_from_u64(s)
}

/// Viterbi durations from a no-prosody, no-dropout encoder pass.
pub fn viterbi_teacher(model: &TtsModel, phonemes: &[usize], mel: &[f32], frames: usize) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false)?;
    let out = model.encoder_forward(&mut tape, &bind, phonemes, None, &mut Mode::Eval)?;
    let align = viterbi_durations_f32(
        tape.data(out.mu),
        tape.data(out.logvar),
        mel,
        phonemes.len(),
        frames,
        crate::features::MEL_CHANNELS,
    )?;
    Ok(align.durations)
}

struct SlotResult {
    loss: StepLoss,
    grads: Vec<Option<Vec<f32>>>,
}

fn stage1_slot(
    model: &TtsModel,
    utt: &LoadedUtterance,
    warmup: bool,
    opts: &TrainOptions,
    step: usize,
    slot: usize,
) -> Result<SlotResult> {
    let frames = utt.mel.frames;
    let mel = &utt.mel.data;
    let mut rng = dropout_rng(opts.seed, step, slot);
    let mut mode = if model.config.dropout > 0.0 {
        Mode::Train(&mut rng)
    } else {
        Mode::Eval
    };

    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, true)?;
    let (loss_id, parts) = if warmup {
        let out = model.encoder_forward(&mut tape, &bind, &utt.phonemes, None, &mut mode)?;
        let align = tape.forward_sum_loss(out.mu, out.logvar, mel, frames)?;
        let align_v = tape.scalar_value(align);
        let total = tape.scale(align, opts.lambda_align)?;
        (
            total,
            StepLoss {
                total: opts.lambda_align * align_v,
                mel: 0.0,
                dur: 0.0,
                align: align_v,
            },
        )
    } else {
        let durations = viterbi_teacher(model, &utt.phonemes, mel, frames)?;
        let mel_const = tape.constant(&[frames, crate::features::MEL_CHANNELS], mel.clone())?;
        let rep = model.learner.forward(&mut tape, &bind, mel_const, &durations)?;
        let pemb = model.prosody_embed(&mut tape, &bind, rep)?;
        let out = model.encoder_forward(&mut tape, &bind, &utt.phonemes, Some(pemb), &mut mode)?;
        let align = tape.forward_sum_loss(out.mu, out.logvar, mel, frames)?;
        let expanded = tape.length_regulate(out.hidden, &durations)?;
        let mel_pred = model.decoder_forward(&mut tape, &bind, expanded, &mut mode)?;
        let l_mel = tape.l1_loss(mel_pred, mel)?;
        let dur_target: Vec<f32> = durations.iter().map(|&d| (d as f32).ln()).collect();
        let l_dur = tape.mse_loss(out.log_dur, &dur_target)?;
        let mel_v = tape.scalar_value(l_mel);
        let dur_v = tape.scalar_value(l_dur);
        let align_v = tape.scalar_value(align);
        let dur_scaled = tape.scale(l_dur, opts.lambda_dur)?;
        let align_scaled = tape.scale(align, opts.lambda_align)?;
        let s = tape.add(l_mel, dur_scaled)?;
        let total = tape.add(s, align_scaled)?;
        (
            total,
            StepLoss {
                total: mel_v + opts.lambda_dur * dur_v + opts.lambda_align * align_v,
                mel: mel_v,
                dur: dur_v,
                align: align_v,
            },
        )
    };
    if !tape.scalar_value(loss_id).is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on utterance {}", utt.id)));
    }
    tape.backward(loss_id)?;
    let grads = model.store.collect_grads(&tape, &bind);
    Ok(SlotResult { loss: parts, grads })
}

fn stage2_slot(
    model: &TtsModel,
    utt: &LoadedUtterance,
    provider: &dyn WordEmbeddingProvider,
    opts: &TrainOptions,
    step: usize,
    slot: usize,
) -> Result<SlotResult> {
    let target = utt
        .prosody
        .as_ref()
        .ok_or_else(|| Error::Input(format!("utterance {}: no prosody target", utt.id)))?;
    let m = utt.phonemes.len();
    let dp = model.config.prosody_dim;
    if target.len() != m * dp {
        return Err(Error::Input(format!(
            "utterance {}: prosody target has {} values, expected {m} x {dp}",
            utt.id,
            target.len()
        )));
    }
    let mut rng = dropout_rng(opts.seed, step, slot);
    let mut mode = if model.config.dropout > 0.0 {
        Mode::Train(&mut rng)
    } else {
        Mode::Eval
    };
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, true)?;
    let (w, mu, s) = model
        .predictor
        .forward(&mut tape, &bind, &utt.phonemes, provider, &utt.words, &utt.spans, &mut mode)?;
    let nll = tape.mdn_nll(w, mu, s, target, model.config.mixtures, dp)?;
    let nll_v = tape.scalar_value(nll);
    if !nll_v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on utterance {}", utt.id)));
    }
    tape.backward(nll)?;
    let grads = model.store.collect_grads(&tape, &bind);
    Ok(SlotResult {
        loss: StepLoss {
            total: nll_v,
            mel: 0.0,
            dur: 0.0,
            align: nll_v,
        },
        grads,
    })
}

/// Run every slot of one batch, possibly across worker threads, and
/// return the results ordered by slot.
fn run_batch<F>(slots: usize, workers: usize, job: F) -> Result<Vec<SlotResult>>
where
    F: Fn(usize) -> Result<SlotResult> + Sync,
{
    if workers <= 1 {
        return (0..slots).map(&job).collect();
    }
    let mut results: Vec<Option<Result<SlotResult>>> = (0..slots).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers.min(slots) {
            let job = &job;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut slot = w;
                while slot < slots {
                    out.push((slot, job(slot)));
                    slot += workers;
                }
                out
            }));
        }
        for h in handles {
            for (slot, res) in h.join().expect("training worker panicked") {
                results[slot] = Some(res);
            }
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("slot not computed"))
        .collect()
}

/// Fixed-order reduction: slot 0 first, always, so the sum is identical
/// for any worker count.
fn reduce_grads(results: &[SlotResult], params: usize) -> Vec<Option<Vec<f32>>> {
    let scale = 1.0 / results.len() as f32;
    let mut acc: Vec<Option<Vec<f32>>> = vec![None; params];
    for r in results {
        for (idx, g) in r.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut acc[idx] {
                Some(a) => {
                    for (av, gv) in a.iter_mut().zip(g) {
                        *av += gv;
                    }
                }
                None => acc[idx] = Some(g.clone()),
            }
        }
    }
    for a in acc.iter_mut().flatten() {
        for v in a.iter_mut() {
            *v *= scale;
        }
    }
    acc
}

fn batch_indices(step: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch).map(|k| (step * batch + k) % n).collect()
}

fn diverged(step: usize, err: Error, last: f32) -> Error {
    match err {
        Error::Numeric(_) => Error::Diverged { step, last_loss: last },
        other => other,
    }
}

pub fn stage1_train(model: &mut TtsModel, corpus: &Corpus, opts: &TrainOptions) -> Result<(Vec<StepLoss>, Adam)> {
    if corpus.inventory_size > model.config.vocab_size {
        return Err(Error::Config(format!(
            "corpus inventory {} exceeds model vocab {}",
            corpus.inventory_size, model.config.vocab_size
        )));
    }
    let warmup_steps = (opts.steps as f32 * opts.warmup_frac).round() as usize;
    let mut adam = Adam::new(&model.store);
    let mut curve = Vec::with_capacity(opts.steps);
    let mut last = f32::NAN;
    for step in 0..opts.steps {
        let warmup = step < warmup_steps;
        let indices = batch_indices(step, opts.batch_size, corpus.utterances.len());
        let results = run_batch(indices.len(), opts.workers, |slot| {
            stage1_slot(model, &corpus.utterances[indices[slot]], warmup, opts, step, slot)
        })
        .map_err(|e| diverged(step, e, last))?;
        let grads = reduce_grads(&results, model.store.len());
        let lr = noam_lr(adam.step_count() + 1, model.config.d_model, opts.lr_warmup, opts.lr_factor);
        adam.step(&mut model.store, &grads, lr, Some(ParamGroup::Stage1));
        let b = results.len() as f32;
        let mean = StepLoss {
            total: results.iter().map(|r| r.loss.total).sum::<f32>() / b,
            mel: results.iter().map(|r| r.loss.mel).sum::<f32>() / b,
            dur: results.iter().map(|r| r.loss.dur).sum::<f32>() / b,
            align: results.iter().map(|r| r.loss.align).sum::<f32>() / b,
        };
        if !mean.total.is_finite() {
            return Err(Error::Diverged { step, last_loss: last });
        }
        last = mean.total;
        curve.push(mean);
    }
    model.stage1_done = true;
    Ok((curve, adam))
}

/// Deterministic learner outputs for every utterance, pooled over
/// self-extracted Viterbi alignments. Returns one m x D_p row-major
/// vector per utterance, in corpus order.
pub fn extract_prosody_targets(model: &TtsModel, corpus: &Corpus) -> Result<Vec<Vec<f32>>> {
    if !model.stage1_done {
        return Err(Error::StageOrder("prosody extraction requires a stage-1 checkpoint".into()));
    }
    corpus.utterances.iter().map(|u| extract_prosody_target(model, u)).collect()
}

/// Learner output for one utterance (m x D_p, row-major).
pub fn extract_prosody_target(model: &TtsModel, utt: &LoadedUtterance) -> Result<Vec<f32>> {
    let durations = viterbi_teacher(model, &utt.phonemes, &utt.mel.data, utt.mel.frames)?;
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false)?;
    let mel_const = tape.constant(&[utt.mel.frames, crate::features::MEL_CHANNELS], utt.mel.data.clone())?;
    let rep = model.learner.forward(&mut tape, &bind, mel_const, &durations)?;
    Ok(tape.data(rep).to_vec())
}

pub fn stage2_train(
    model: &mut TtsModel,
    corpus: &Corpus,
    provider: &dyn WordEmbeddingProvider,
    opts: &TrainOptions,
) -> Result<(Vec<f32>, Adam)> {
    if !model.stage1_done {
        return Err(Error::StageOrder("stage 2 requires a completed stage 1".into()));
    }
    if provider.dim() != model.config.word_dim {
        return Err(Error::Config(format!(
            "word embedding provider dim {} != configured word_dim {}",
            provider.dim(),
            model.config.word_dim
        )));
    }
    let mut adam = Adam::new(&model.store);
    let mut curve = Vec::with_capacity(opts.steps);
    let mut last = f32::NAN;
    for step in 0..opts.steps {
        let indices = batch_indices(step, opts.batch_size, corpus.utterances.len());
        let results = run_batch(indices.len(), opts.workers, |slot| {
            stage2_slot(model, &corpus.utterances[indices[slot]], provider, opts, step, slot)
        })
        .map_err(|e| diverged(step, e, last))?;
        let grads = reduce_grads(&results, model.store.len());
        let lr = noam_lr(adam.step_count() + 1, model.config.d_model, opts.lr_warmup, opts.lr_factor);
        adam.step(&mut model.store, &grads, lr, Some(ParamGroup::Predictor));
        let mean = results.iter().map(|r| r.loss.total).sum::<f32>() / results.len() as f32;
        if !mean.is_finite() {
            return Err(Error::Diverged { step, last_loss: last });
        }
        last = mean;
        curve.push(mean);
    }
    model.stage2_done = true;
    Ok((curve, adam))
}
