//! WAV to mel-spectrogram extraction: 22050 Hz mono input, 1024-point FFT,
//! 1024 Hann window, 256 hop, 80 mel channels spanning 60 Hz to 7.6 kHz.
//! Also the character-level phoneme frontend.
//!
//! Conventions fixed here (tests depend on them being exact): center frames
//! with reflection padding, HTK mel scale 2595*log10(1 + f/700), log
//! compression floored at 1e-5.

use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const FFT_SIZE: usize = 1024;
pub const WIN_SIZE: usize = 1024;
pub const HOP_SIZE: usize = 256;
pub const MEL_CHANNELS: usize = 80;
pub const MEL_FMIN: f64 = 60.0;
pub const MEL_FMAX: f64 = 7600.0;
pub const LOG_FLOOR: f32 = 1e-5;

pub const N_BINS: usize = FFT_SIZE / 2 + 1;

/// frames x 80 log-mel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Vec<f32>,
    pub frames: usize,
    pub sample_rate: u32,
    pub hop: usize,
}

impl MelSpectrogram {
    pub fn new(data: Vec<f32>, frames: usize) -> Result<Self> {
        if frames == 0 || data.len() != frames * MEL_CHANNELS {
            return Err(Error::Invariant(format!(
                "mel spectrogram: {} values for {frames} frames x {MEL_CHANNELS} channels",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("mel spectrogram contains non-finite values".into()));
        }
        Ok(MelSpectrogram {
            data,
            frames,
            sample_rate: SAMPLE_RATE,
            hop: HOP_SIZE,
        })
    }
}

fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .map(|v| v as f32)
        .collect()
}

fn reflect_pad(wav: &[f32], pad: usize) -> Result<Vec<f32>> {
    if wav.len() <= pad {
        return Err(Error::Input(format!(
            "signal too short for reflection padding: {} samples, need > {pad}",
            wav.len()
        )));
    }
    let mut out = Vec::with_capacity(wav.len() + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(wav[i]);
    }
    out.extend_from_slice(wav);
    for i in (wav.len() - pad - 1..wav.len() - 1).rev() {
        out.push(wav[i]);
    }
    Ok(out)
}

pub struct Stft {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Stft {
            fft: planner.plan_fft_forward(FFT_SIZE),
            window: hann_window(WIN_SIZE),
        }
    }

    /// Number of frames under center padding: 1 + floor(len / hop).
    pub fn frame_count(len: usize) -> usize {
        1 + len / HOP_SIZE
    }

    /// Magnitude spectrogram, frames x 513.
    pub fn magnitudes(&self, wav: &[f32]) -> Result<Vec<f32>> {
        if wav.is_empty() {
            return Err(Error::Input("stft: empty signal".into()));
        }
        let padded = reflect_pad(wav, FFT_SIZE / 2)?;
        let frames = Self::frame_count(wav.len());
        let mut out = vec![0.0f32; frames * N_BINS];
        let mut buf = vec![Complex::new(0.0f32, 0.0); FFT_SIZE];
        for t in 0..frames {
            let start = t * HOP_SIZE;
            for i in 0..FFT_SIZE {
                let s = if start + i < padded.len() { padded[start + i] } else { 0.0 };
                buf[i] = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (b, c) in buf.iter().take(N_BINS).enumerate() {
                out[t * N_BINS + b] = c.norm();
            }
        }
        Ok(out)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// 80 triangular filters, centers equally spaced on the mel scale between
/// mel(60) and mel(7600). Row-major [80 x 513].
pub fn mel_filterbank() -> Vec<f32> {
    let mlo = hz_to_mel(MEL_FMIN);
    let mhi = hz_to_mel(MEL_FMAX);
    let edges: Vec<f64> = (0..MEL_CHANNELS + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (MEL_CHANNELS + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..N_BINS)
        .map(|b| b as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64)
        .collect();
    let mut fb = vec![0.0f32; MEL_CHANNELS * N_BINS];
    for ch in 0..MEL_CHANNELS {
        let (lo, center, hi) = (edges[ch], edges[ch + 1], edges[ch + 2]);
        for (b, &f) in bin_hz.iter().enumerate() {
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            let w = up.min(down).max(0.0);
            fb[ch * N_BINS + b] = w as f32;
        }
    }
    fb
}

/// Full extraction: log(max(filterbank * |STFT|, 1e-5)).
pub fn wav_to_mel(wav: &[f32]) -> Result<MelSpectrogram> {
    let stft = Stft::new();
    let mags = stft.magnitudes(wav)?;
    let frames = Stft::frame_count(wav.len());
    let fb = mel_filterbank();
    let mut out = vec![0.0f32; frames * MEL_CHANNELS];
    for t in 0..frames {
        let mrow = &mags[t * N_BINS..(t + 1) * N_BINS];
        for ch in 0..MEL_CHANNELS {
            let frow = &fb[ch * N_BINS..(ch + 1) * N_BINS];
            let e: f32 = frow.iter().zip(mrow).map(|(w, m)| w * m).sum();
            out[t * MEL_CHANNELS + ch] = e.max(LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(out, frames)
}

// ---- WAV reading -----------------------------------------------------------

/// Reads 16-bit PCM mono RIFF WAV at 22050 Hz, scaled to [-1, 1).
pub fn read_wav(bytes: &[u8]) -> Result<Vec<f32>> {
    let fail = |msg: &str| Error::Format(format!("wav: {msg}"));
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(fail("truncated chunk"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too small"));
                }
                let format = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                let channels = u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap());
                let rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                let bits = u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let (format, channels, rate, bits) =
                    fmt.ok_or_else(|| fail("data chunk before fmt"))?;
                if format != 1 || bits != 16 {
                    return Err(fail("only 16-bit PCM supported"));
                }
                if channels != 1 {
                    return Err(fail("only mono supported"));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::Input(format!(
                        "wav: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz"
                    )));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect();
                return Ok(samples);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(fail("no data chunk"))
}

// ---- phoneme frontend ------------------------------------------------------

/// Integer phoneme ids with their inventory size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub inventory_size: usize,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, inventory_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("phoneme sequence is empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= inventory_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: inventory_size,
            });
        }
        Ok(PhonemeSequence { ids, inventory_size })
    }
}

/// Symbol-to-id map for character-level input.
pub struct Lexicon {
    map: HashMap<char, usize>,
    size: usize,
}

impl Lexicon {
    pub fn from_symbols(symbols: &str) -> Self {
        let map: HashMap<char, usize> = symbols.chars().enumerate().map(|(i, c)| (c, i)).collect();
        let size = map.len();
        Lexicon { map, size }
    }

    /// Lowercase letters, space and light punctuation.
    pub fn english() -> Self {
        Self::from_symbols("abcdefghijklmnopqrstuvwxyz ,.'?!-")
    }

    pub fn inventory_size(&self) -> usize {
        self.size
    }

    pub fn lookup(&self, c: char) -> Option<usize> {
        self.map.get(&c).copied()
    }
}

/// Normalize and map text to phoneme ids: rhythm-boundary marks #1..#4
/// become spaces, text is lowercased, runs of whitespace collapse to one
/// space. Unknown symbols are an error naming the symbol.
pub fn text_to_phonemes(text: &str, lexicon: &Lexicon) -> Result<PhonemeSequence> {
    let mut normalized = text.to_lowercase();
    for mark in ["#1", "#2", "#3", "#4"] {
        normalized = normalized.replace(mark, " ");
    }
    let collapsed = normalized.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(Error::Input("text is empty after normalization".into()));
    }
    let mut ids = Vec::with_capacity(collapsed.len());
    for c in collapsed.chars() {
        match lexicon.lookup(c) {
            Some(id) => ids.push(id),
            None => return Err(Error::UnknownSymbol(c.to_string())),
        }
    }
    PhonemeSequence::new(ids, lexicon.inventory_size())
}

/// Whitespace-delimited chunks as words, trailing separator space assigned
/// to the preceding word; returns (words, phoneme spans).
pub fn words_and_spans(text: &str) -> Result<(Vec<String>, Vec<usize>)> {
    let mut normalized = text.to_lowercase();
    for mark in ["#1", "#2", "#3", "#4"] {
        normalized = normalized.replace(mark, " ");
    }
    let chunks: Vec<&str> = normalized.split_whitespace().collect();
    if chunks.is_empty() {
        return Err(Error::Input("text is empty after normalization".into()));
    }
    let mut words = Vec::with_capacity(chunks.len());
    let mut spans = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        words.push((*chunk).to_string());
        let sep = usize::from(i + 1 < chunks.len()); // the joining space
        spans.push(chunk.chars().count() + sep);
    }
    Ok((words, spans))
}
