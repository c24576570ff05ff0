//! Corpus artifacts: the manifest (JSON-lines), MELB mel files, prosody
//! target sidecars, duration sidecars, and the synthetic toy corpus
//! generator used for desk-scale training and evaluation.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{Lexicon, MelSpectrogram, MEL_CHANNELS, SAMPLE_RATE};
use crate::{Error, Result};

pub const MELB_MAGIC: &[u8; 8] = b"MELB0001";
pub const PROS_MAGIC: &[u8; 8] = b"PROS0001";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub words: Vec<String>,
    pub spans: Vec<usize>,
    pub mel: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prosody: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    inventory_size: usize,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub inventory_size: usize,
    pub utterances: Vec<Utterance>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header = ManifestHeader {
            inventory_size: self.inventory_size,
        };
        out.push_str(&serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("{}: empty manifest", path.display())))?,
        )
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
        let mut utterances = Vec::new();
        for (i, line) in lines.enumerate() {
            let u: Utterance = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}: record {}: {e}", path.display(), i + 1)))?;
            utterances.push(u);
        }
        let manifest = Manifest {
            inventory_size: header.inventory_size,
            utterances,
        };
        manifest.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(manifest)
    }

    /// Reject invariant breaches before any compute starts: referenced
    /// files must exist, spans must cover the phonemes, ids must be in
    /// range, and mel files must carry 80 channels.
    pub fn validate(&self, base: &Path) -> Result<()> {
        for u in &self.utterances {
            if u.phonemes.is_empty() {
                return Err(Error::Input(format!("utterance {}: no phonemes", u.id)));
            }
            if let Some(&bad) = u.phonemes.iter().find(|&&p| p >= self.inventory_size) {
                return Err(Error::Input(format!(
                    "utterance {}: phoneme id {bad} outside inventory of {}",
                    u.id, self.inventory_size
                )));
            }
            let span_sum: usize = u.spans.iter().sum();
            if u.words.len() != u.spans.len() || span_sum != u.phonemes.len() {
                return Err(Error::Input(format!(
                    "utterance {}: word spans sum {span_sum} != {} phonemes",
                    u.id,
                    u.phonemes.len()
                )));
            }
            let mel_path = base.join(&u.mel);
            if !mel_path.is_file() {
                return Err(Error::Input(format!(
                    "utterance {}: missing mel file {}",
                    u.id,
                    mel_path.display()
                )));
            }
            for opt in [&u.durations, &u.prosody] {
                if let Some(p) = opt {
                    if !base.join(p).is_file() {
                        return Err(Error::Input(format!(
                            "utterance {}: missing sidecar {}",
                            u.id,
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---- MELB ------------------------------------------------------------

pub fn write_melb(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + mel.data.len() * 4);
    buf.extend_from_slice(MELB_MAGIC);
    buf.extend_from_slice(&(mel.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(MEL_CHANNELS as u32).to_le_bytes());
    for v in &mel.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_melb(path: &Path) -> Result<MelSpectrogram> {
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let mut file = fs::File::open(path)?;
    let mut head = [0u8; 16];
    file.read_exact(&mut head).map_err(|_| fail("truncated header".into()))?;
    if &head[0..8] != MELB_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let frames = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    if channels != MEL_CHANNELS {
        return Err(fail(format!("expected {MEL_CHANNELS} channels, got {channels}")));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != frames * channels * 4 {
        return Err(fail(format!(
            "payload {} bytes != {frames} frames x {channels} channels x 4",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(data, frames)
}

// ---- prosody targets ---------------------------------------------------

pub fn write_prosody(path: &Path, rep: &[f32], rows: usize, dim: usize) -> Result<()> {
    if rep.len() != rows * dim {
        return Err(Error::Invariant(format!(
            "prosody sidecar: {} values for {rows} x {dim}",
            rep.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + rep.len() * 4);
    buf.extend_from_slice(PROS_MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in rep {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Returns (values, rows, dim).
pub fn read_prosody(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut file = fs::File::open(path)?;
    let mut head = [0u8; 16];
    file.read_exact(&mut head).map_err(|_| fail("truncated header"))?;
    if &head[0..8] != PROS_MAGIC {
        return Err(fail("bad magic"));
    }
    let rows = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != rows * dim * 4 {
        return Err(fail("payload size mismatch"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((data, rows, dim))
}

// ---- duration sidecars ---------------------------------------------------

pub fn write_durations(path: &Path, durations: &[usize]) -> Result<()> {
    let line: Vec<String> = durations.iter().map(usize::to_string).collect();
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", line.join(" "))?;
    Ok(())
}

pub fn read_durations(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Format(format!("{}: bad duration {t:?}", path.display())))
        })
        .collect()
}

// ---- in-memory corpus ------------------------------------------------------

/// Fully loaded utterance ready for training.
pub struct LoadedUtterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub words: Vec<String>,
    pub spans: Vec<usize>,
    pub mel: MelSpectrogram,
    pub durations: Option<Vec<usize>>,
    pub prosody: Option<Vec<f32>>,
}

pub struct Corpus {
    pub inventory_size: usize,
    pub utterances: Vec<LoadedUtterance>,
}

impl Corpus {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for u in &manifest.utterances {
            let mel = read_melb(&base.join(&u.mel))?;
            let durations = u.durations.as_ref().map(|p| read_durations(&base.join(p))).transpose()?;
            let prosody = u
                .prosody
                .as_ref()
                .map(|p| read_prosody(&base.join(p)).map(|(v, _, _)| v))
                .transpose()?;
            utterances.push(LoadedUtterance {
                id: u.id.clone(),
                phonemes: u.phonemes.clone(),
                words: u.words.clone(),
                spans: u.spans.clone(),
                mel,
                durations,
                prosody,
            });
        }
        if utterances.is_empty() {
            return Err(Error::Input(format!("{}: empty corpus", manifest_path.display())));
        }
        Ok(Corpus {
            inventory_size: manifest.inventory_size,
            utterances,
        })
    }
}

// ---- synthetic toy corpus ---------------------------------------------------

/// Spectral template for one phoneme id: a Gaussian bump whose center
/// channel is determined by the id, on a quiet floor.
pub fn phoneme_template(id: usize) -> Vec<f32> {
    let center = 4.0 + (id % 16) as f32 * 4.75;
    (0..MEL_CHANNELS)
        .map(|c| {
            let d = (c as f32 - center) / 3.0;
            0.8 * (-0.5 * d * d).exp() - 0.5
        })
        .collect()
}

/// Linear spectral tilt scaled by a per-phoneme jitter amplitude — the
/// "prosody" the learner is supposed to capture.
fn tilt(c: usize) -> f32 {
    c as f32 / (MEL_CHANNELS - 1) as f32 - 0.5
}

const TOY_LETTERS: &[char] = &['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];

fn toy_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(2..=3);
    (0..len).map(|_| TOY_LETTERS[rng.gen_range(0..TOY_LETTERS.len())]).collect()
}

pub struct SyntheticUtterance {
    pub text: String,
    pub phonemes: Vec<usize>,
    pub words: Vec<String>,
    pub spans: Vec<usize>,
    pub durations: Vec<usize>,
    pub jitter: Vec<f32>,
    pub mel: MelSpectrogram,
}

/// One deterministic toy utterance: random short words, per-phoneme
/// template frames with a seeded duration and tilt jitter.
pub fn synth_utterance(rng: &mut ChaCha8Rng) -> Result<SyntheticUtterance> {
    let word_count = rng.gen_range(2..=3);
    let text: String = (0..word_count).map(|_| toy_word(rng)).collect::<Vec<_>>().join(" ");
    synth_utterance_from_text(rng, &text)
}

/// Toy utterance over a fixed text: durations and jitter are drawn
/// fresh, so repeated texts carry different prosody.
pub fn synth_utterance_from_text(rng: &mut ChaCha8Rng, text: &str) -> Result<SyntheticUtterance> {
    let lexicon = Lexicon::english();
    let seq = crate::features::text_to_phonemes(text, &lexicon)?;
    let (words, spans) = crate::features::words_and_spans(text)?;
    let space = lexicon.lookup(' ').unwrap();
    let mut durations = Vec::with_capacity(seq.ids.len());
    let mut jitter = Vec::with_capacity(seq.ids.len());
    for &p in &seq.ids {
        let d = if p == space { rng.gen_range(2..=3) } else { rng.gen_range(2..=6) };
        durations.push(d);
        let a = rng.gen_range(0.1f32..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        jitter.push(a);
    }
    let frames: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(frames * MEL_CHANNELS);
    for (i, &p) in seq.ids.iter().enumerate() {
        let template = phoneme_template(p);
        for _ in 0..durations[i] {
            for (c, t) in template.iter().enumerate() {
                data.push(t + jitter[i] * tilt(c));
            }
        }
    }
    Ok(SyntheticUtterance {
        text: text.to_string(),
        phonemes: seq.ids,
        words,
        spans,
        durations,
        jitter,
        mel: MelSpectrogram::new(data, frames)?,
    })
}

/// Write a synthetic corpus: MELB files, duration sidecars, and train/test
/// manifests under `out`. Returns (train manifest path, test manifest path).
///
/// Texts come from a small pool so each text recurs with independently
/// drawn durations and jitter: the prosody cannot be inferred from the
/// phoneme sequence alone and must travel through the prosody channel.
pub fn generate_synthetic(out: &Path, count: usize, split: f64, seed: u64) -> Result<(PathBuf, PathBuf)> {
    if count < 2 {
        return Err(Error::Input(format!("synthetic corpus needs >= 2 utterances, got {count}")));
    }
    if !(0.0..1.0).contains(&split) && (split - 1.0).abs() > f64::EPSILON {
        return Err(Error::Input(format!("split must be in (0, 1], got {split}")));
    }
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = Lexicon::english();
    let pool_size = (count / 4).clamp(2, 12.min(count));
    let mut pool: Vec<String> = Vec::with_capacity(pool_size);
    while pool.len() < pool_size {
        let word_count = rng.gen_range(2..=3);
        let text: String = (0..word_count).map(|_| toy_word(&mut rng)).collect::<Vec<_>>().join(" ");
        if !pool.contains(&text) {
            pool.push(text);
        }
    }
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let s = synth_utterance_from_text(&mut rng, &pool[i % pool_size])?;
        let id = format!("toy{i:04}");
        let mel_rel = PathBuf::from(format!("{id}.melb"));
        let dur_rel = PathBuf::from(format!("{id}.dur"));
        write_melb(&out.join(&mel_rel), &s.mel)?;
        write_durations(&out.join(&dur_rel), &s.durations)?;
        utterances.push(Utterance {
            id,
            phonemes: s.phonemes,
            words: s.words,
            spans: s.spans,
            mel: mel_rel,
            durations: Some(dur_rel),
            prosody: None,
        });
    }
    let train_count = ((count as f64 * split).round() as usize).clamp(1, count - 1);
    let (train_utts, test_utts) = utterances.split_at(train_count);
    let train_path = out.join("train.manifest");
    let test_path = out.join("test.manifest");
    Manifest {
        inventory_size: lexicon.inventory_size(),
        utterances: train_utts.to_vec(),
    }
    .save(&train_path)?;
    Manifest {
        inventory_size: lexicon.inventory_size(),
        utterances: test_utts.to_vec(),
    }
    .save(&test_path)?;
    Ok((train_path, test_path))
}

/// Convert a directory of 22.05 kHz mono 16-bit wav files into MELB files
/// plus a manifest; phonemes come from the file-stem text via the English
/// character lexicon.
pub fn prepare_wav_dir(wav_dir: &Path, out: &Path, split: f64, _seed: u64) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out)?;
    let lexicon = Lexicon::english();
    let mut paths: Vec<PathBuf> = fs::read_dir(wav_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(Error::Input(format!(
            "{}: need at least 2 wav files, found {}",
            wav_dir.display(),
            paths.len()
        )));
    }
    let mut utterances = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let text = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Input(format!("{}: unusable file name", p.display())))?
            .replace('_', " ");
        let seq = crate::features::text_to_phonemes(&text, &lexicon)?;
        let (words, spans) = crate::features::words_and_spans(&text)?;
        let wav = crate::features::read_wav(&fs::read(p)?)?;
        let mel = crate::features::wav_to_mel(&wav)?;
        let id = format!("wav{i:04}");
        let mel_rel = PathBuf::from(format!("{id}.melb"));
        write_melb(&out.join(&mel_rel), &mel)?;
        utterances.push(Utterance {
            id,
            phonemes: seq.ids,
            words,
            spans,
            mel: mel_rel,
            durations: None,
            prosody: None,
        });
    }
    let n = utterances.len();
    let train_count = ((n as f64 * split).round() as usize).clamp(1, n - 1);
    let (train_utts, test_utts) = utterances.split_at(train_count);
    let train_path = out.join("train.manifest");
    let test_path = out.join("test.manifest");
    Manifest {
        inventory_size: lexicon.inventory_size(),
        utterances: train_utts.to_vec(),
    }
    .save(&train_path)?;
    Manifest {
        inventory_size: lexicon.inventory_size(),
        utterances: test_utts.to_vec(),
    }
    .save(&test_path)?;
    let _ = SAMPLE_RATE;
    Ok((train_path, test_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn melb_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.melb");
        let data: Vec<f32> = (0..3 * MEL_CHANNELS).map(|i| (i as f32).sin()).collect();
        let mel = MelSpectrogram::new(data, 3).unwrap();
        write_melb(&path, &mel).unwrap();
        let back = read_melb(&path).unwrap();
        assert_eq!(mel.data, back.data);
        assert_eq!(mel.frames, back.frames);
    }

    #[test]
    fn melb_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.melb");
        fs::write(&path, b"NOTMELB!\x01\x00\x00\x00\x50\x00\x00\x00").unwrap();
        assert!(read_melb(&path).is_err());
    }

    #[test]
    fn prosody_sidecar_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pros");
        let rep = vec![0.1f32, -0.2, 0.3, 0.4, -0.5, 0.6];
        write_prosody(&path, &rep, 2, 3).unwrap();
        let (back, rows, dim) = read_prosody(&path).unwrap();
        assert_eq!(back, rep);
        assert_eq!((rows, dim), (2, 3));
    }

    #[test]
    fn durations_sidecar_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.dur");
        write_durations(&path, &[3, 1, 4]).unwrap();
        assert_eq!(read_durations(&path).unwrap(), vec![3, 1, 4]);
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_synthetic(d1.path(), 6, 0.98, 7).unwrap();
        generate_synthetic(d2.path(), 6, 0.98, 7).unwrap();
        for name in ["train.manifest", "test.manifest", "toy0000.melb", "toy0003.dur"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn split_98_of_100() {
        let dir = tempdir().unwrap();
        let (train, test) = generate_synthetic(dir.path(), 100, 0.98, 1).unwrap();
        let train = Manifest::load(&train).unwrap();
        let test = Manifest::load(&test).unwrap();
        assert_eq!(train.utterances.len(), 98);
        assert_eq!(test.utterances.len(), 2);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let (train, _) = generate_synthetic(dir.path(), 5, 0.8, 3).unwrap();
        let manifest = Manifest::load(&train).unwrap();
        assert!(manifest.utterances.len() >= 2);
        let corpus = Corpus::load(&train).unwrap();
        for u in &corpus.utterances {
            let dur_sum: usize = u.durations.as_ref().unwrap().iter().sum();
            assert_eq!(dur_sum, u.mel.frames);
            let span_sum: usize = u.spans.iter().sum();
            assert_eq!(span_sum, u.phonemes.len());
        }
    }

    #[test]
    fn manifest_rejects_missing_mel() {
        let dir = tempdir().unwrap();
        let (train, _) = generate_synthetic(dir.path(), 4, 0.75, 3).unwrap();
        fs::remove_file(dir.path().join("toy0000.melb")).unwrap();
        let err = Manifest::load(&train).unwrap_err();
        assert!(err.to_string().contains("toy0000"), "{err}");
    }

    #[test]
    fn manifest_rejects_bad_spans() {
        let dir = tempdir().unwrap();
        let (train, _) = generate_synthetic(dir.path(), 4, 0.75, 3).unwrap();
        let text = fs::read_to_string(&train).unwrap();
        let mangled = text.replace("\"spans\":[", "\"spans\":[9,");
        fs::write(&train, mangled).unwrap();
        assert!(Manifest::load(&train).is_err());
    }

    #[test]
    fn synthetic_mel_matches_templates_plus_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = synth_utterance(&mut rng).unwrap();
        let frames: usize = s.durations.iter().sum();
        assert_eq!(s.mel.frames, frames);
        // first frame belongs to the first phoneme
        let template = phoneme_template(s.phonemes[0]);
        for c in 0..MEL_CHANNELS {
            let expect = template[c] + s.jitter[0] * tilt(c);
            assert!((s.mel.data[c] - expect).abs() < 1e-6);
        }
    }
}
