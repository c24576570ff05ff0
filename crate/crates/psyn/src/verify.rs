//! Self-check suites behind the `verify` command: gradient checks,
//! attention invariants, alignment oracles, and MDN identities. Each
//! check prints one key=value line; the first failure aborts the suite
//! with a nonzero exit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{forward_sum_log_total, viterbi_durations, viterbi_log_prob};
use crate::attention::{band_mask, LocalAttentionBlock};
use crate::nn::Mode;
use crate::params::{ParamGroup, ParamStore};
use crate::prosody::{mdn_sample, MdnParams, SampleMode};
use crate::tensor::{check_gradients, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Attention,
    Alignment,
    Mdn,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Suite::Gradients),
            "attention" => Ok(Suite::Attention),
            "alignment" => Ok(Suite::Alignment),
            "mdn" => Ok(Suite::Mdn),
            "all" => Ok(Suite::All),
            other => Err(Error::Input(format!(
                "unknown suite {other:?}; expected gradients|attention|alignment|mdn|all"
            ))),
        }
    }
}

fn check(name: &str, pass: bool, detail: impl std::fmt::Display) -> Result<()> {
    println!("check.{name}={}", if pass { "pass" } else { "fail" });
    if pass {
        Ok(())
    } else {
        Err(Error::Invariant(format!("verify: {name} failed ({detail})")))
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()
}

pub fn run(suite: Suite) -> Result<()> {
    match suite {
        Suite::Gradients => gradients(),
        Suite::Attention => attention(),
        Suite::Alignment => alignment(),
        Suite::Mdn => mdn(),
        Suite::All => {
            gradients()?;
            attention()?;
            alignment()?;
            mdn()
        }
    }
}

fn gradients() -> Result<()> {
    let mut r = rng(101);

    let b = rand_vec(&mut r, 12);
    let x0 = rand_vec(&mut r, 8);
    let err = check_gradients(
        move |t, x| {
            let bid = t.constant(&[4, 3], b.clone())?;
            let y = t.matmul(x, bid)?;
            let y2 = t.mul(y, y)?;
            t.sum_all(y2)
        },
        &[2, 4],
        &x0,
        1e-3,
    )?;
    check("gradients.matmul", err < 1e-3, err)?;

    let k = rand_vec(&mut r, 3 * 2 * 2);
    let x0 = rand_vec(&mut r, 10);
    let err = check_gradients(
        move |t, x| {
            let kid = t.constant(&[3, 2, 2], k.clone())?;
            let y = t.conv1d_same(x, kid, None)?;
            let y2 = t.mul(y, y)?;
            t.sum_all(y2)
        },
        &[5, 2],
        &x0,
        1e-3,
    )?;
    check("gradients.conv1d", err < 1e-3, err)?;

    let x0 = rand_vec(&mut r, 12);
    let err = check_gradients(
        move |t, x| {
            let g = t.constant(&[4], vec![1.2, 0.8, 1.0, 0.9])?;
            let bi = t.constant(&[4], vec![0.1, -0.1, 0.0, 0.2])?;
            let y = t.layer_norm(x, g, bi, 1e-5)?;
            let y2 = t.mul(y, y)?;
            t.sum_all(y2)
        },
        &[3, 4],
        &x0,
        1e-3,
    )?;
    check("gradients.layer_norm", err < 1e-3, err)?;

    let x0 = rand_vec(&mut r, 9);
    let err = check_gradients(
        move |t, x| {
            let mask = band_mask(3, 1);
            let w = t.masked_softmax(x, &mask)?;
            let y = t.slice_cols(w, 0, 1)?;
            t.sum_all(y)
        },
        &[3, 3],
        &x0,
        1e-3,
    )?;
    check("gradients.masked_softmax", err < 1e-3, err)?;

    let target = rand_vec(&mut r, 4);
    let mu0 = rand_vec(&mut r, 8);
    let t2 = target.clone();
    let err = check_gradients(
        move |t, mu| {
            let w = t.constant(&[2, 2], vec![0.3, -0.2, 0.1, 0.4])?;
            let s = t.constant(&[2, 4], vec![-0.1; 8])?;
            t.mdn_nll(w, mu, s, &t2, 2, 2)
        },
        &[2, 4],
        &mu0,
        1e-3,
    )?;
    check("gradients.mdn_nll", err < 1e-3, err)?;

    let mel: Vec<f32> = (0..5 * 3).map(|_| r.gen_range(1.5f32..2.5)).collect();
    let mu0: Vec<f32> = (0..2 * 3).map(|_| r.gen_range(-0.3f32..0.3)).collect();
    let err = check_gradients(
        move |t, mu| {
            let lv = t.constant(&[2, 3], vec![-0.2; 6])?;
            t.forward_sum_loss(mu, lv, &mel, 5)
        },
        &[2, 3],
        &mu0,
        1e-3,
    )?;
    check("gradients.forward_sum", err < 1e-3, err)?;

    // composed block; data picked away from relu kinks, where central
    // differences are meaningless
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let block = LocalAttentionBlock::new(&mut store, "b", 8, 2, 2, 3, 8, 0.0, ParamGroup::Stage1, &mut r)?;
    let store = std::sync::Arc::new(store);
    let x0 = rand_vec(&mut r, 4 * 8);
    let w = rand_vec(&mut r, 4 * 8);
    let err = check_gradients(
        move |t, x| {
            let bind = store.bind(t, false)?;
            let y = block.forward(t, &bind, x, &mut Mode::Eval)?;
            let wt = t.constant(&[4, 8], w.clone())?;
            let y = t.mul(y, wt)?;
            t.sum_all(y)
        },
        &[4, 8],
        &x0,
        1e-3,
    )?;
    check("gradients.attention_block", err < 1e-2, err)
}

fn attention() -> Result<()> {
    // band structure
    let mask = band_mask(6, 2);
    let outside = (0..6)
        .flat_map(|i| (0..6).map(move |j| (i, j)))
        .filter(|&(i, j)| (i as isize - j as isize).unsigned_abs() > 2)
        .all(|(i, j)| !mask[i * 6 + j]);
    check("attention.band_mask", outside, "entries outside |i-j|<=T must be masked")?;

    // masked softmax rows sum to one inside the band and are zero outside
    let mut r = rng(102);
    let scores = rand_vec(&mut r, 36);
    let mut tape = Tape::new();
    let s = tape.constant(&[6, 6], scores)?;
    let w = tape.masked_softmax(s, &mask)?;
    let data = tape.data(w);
    let mut ok = true;
    for i in 0..6 {
        let row = &data[i * 6..(i + 1) * 6];
        let sum: f32 = row.iter().sum();
        ok &= (sum - 1.0).abs() < 1e-5;
        for (j, v) in row.iter().enumerate() {
            if (i as isize - j as isize).unsigned_abs() > 2 {
                ok &= *v == 0.0;
            }
        }
    }
    check("attention.softmax_rows", ok, "row sums / band zeros")?;

    // window covering the whole sequence leaves nothing masked
    let full = band_mask(4, 10);
    check("attention.window_geq_n", full.iter().all(|&m| m), "T >= n must disable masking")
}

fn alignment() -> Result<()> {
    // forward-sum equals brute-force enumeration on small instances
    let mut r = rng(103);
    let mut ok = true;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (m, n, d) = (2usize, 4usize, 2usize);
        let mu: Vec<f64> = (0..m * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..m * d).map(|_| r.gen_range(0.5..1.5)).collect();
        let mel: Vec<f32> = (0..n * d).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let total = forward_sum_log_total(&mu, &var, &mel, m, n, d)?;
        let brute = brute_force_log_total(&mu, &var, &mel, m, n, d);
        worst = worst.max((total - brute).abs());
        ok &= (total - brute).abs() < 1e-6;
    }
    check("alignment.forward_sum_oracle", ok, worst)?;

    // viterbi path is valid and never beats the total probability
    let mut ok = true;
    for _ in 0..5 {
        let (m, n, d) = (3usize, 7usize, 2usize);
        let mu: Vec<f64> = (0..m * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..m * d).map(|_| r.gen_range(0.5..1.5)).collect();
        let mel: Vec<f32> = (0..n * d).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let align = viterbi_durations(&mu, &var, &mel, m, n, d)?;
        let sum: usize = align.durations.iter().sum();
        ok &= sum == n && align.durations.iter().all(|&x| x >= 1);
        let best = viterbi_log_prob(&mu, &var, &mel, m, n, d)?;
        let total = forward_sum_log_total(&mu, &var, &mel, m, n, d)?;
        ok &= best <= total + 1e-9;
    }
    check("alignment.viterbi", ok, "validity / bound")
}

fn brute_force_log_total(mu: &[f64], var: &[f64], mel: &[f32], m: usize, n: usize, d: usize) -> f64 {
    // enumerate all monotonic segmentations of n frames into m nonempty runs
    fn go(mu: &[f64], var: &[f64], mel: &[f32], m: usize, n: usize, d: usize, p: usize, t: usize, acc: f64, out: &mut Vec<f64>) {
        if p == m {
            if t == n {
                out.push(acc);
            }
            return;
        }
        let remaining = m - p - 1;
        for end in (t + 1)..=(n - remaining) {
            let mut a = acc;
            for frame in t..end {
                for k in 0..d {
                    let x = f64::from(mel[frame * d + k]);
                    let mean = mu[p * d + k];
                    let v = var[p * d + k];
                    a += -0.5 * ((x - mean) * (x - mean) / v + v.ln() + (2.0 * std::f64::consts::PI).ln());
                }
            }
            go(mu, var, mel, m, n, d, p + 1, end, a, out);
        }
    }
    let mut terms = Vec::new();
    go(mu, var, mel, m, n, d, 0, 0, 0.0, &mut terms);
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

fn mdn() -> Result<()> {
    let log_2pi = (2.0 * std::f64::consts::PI).ln();
    let target = vec![0.3f32, -0.4, 0.9];
    let mut tape = Tape::new();
    let w = tape.constant(&[1, 1], vec![0.0])?;
    let mu = tape.constant(&[1, 3], target.clone())?;
    let s = tape.constant(&[1, 3], vec![0.0; 3])?;
    let nll = tape.mdn_nll(w, mu, s, &target, 1, 3)?;
    let expect = 1.5 * log_2pi;
    let got = f64::from(tape.scalar_value(nll));
    check("mdn.unit_gaussian_identity", (got - expect).abs() < 1e-4, got - expect)?;

    let params = MdnParams {
        weights: vec![0.7, -1.1],
        means: vec![0.5, -0.2, 0.5, -0.2],
        logvars: vec![0.1, 0.3, 0.1, 0.3],
        phonemes: 1,
        components: 2,
        dim: 2,
    };
    let mut r = rng(104);
    let zero = mdn_sample(&params, &mut r, 0.0, SampleMode::Sample)?;
    check(
        "mdn.temperature_zero_is_mean",
        zero == vec![0.5, -0.2],
        format!("{zero:?}"),
    )?;

    let a = mdn_sample(&params, &mut rng(1), 1.0, SampleMode::Argmax)?;
    let b = mdn_sample(&params, &mut rng(2), 1.0, SampleMode::Argmax)?;
    check("mdn.argmax_deterministic", a == b, "argmax must ignore the rng")
}
