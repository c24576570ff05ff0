//! Shared f64 reference implementations and fixtures for the
//! integration suites. Oracles here are written independently of the
//! crate's banded fast paths: dense matrices, explicit loops.

#![allow(dead_code)]

use psyn::params::ParamStore;

/// Dense f64 matmul: a is n x k, b is k x m, result n x m.
pub fn matmul_f64(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

/// Dense relative-position scores: S[i][j] = q_i^T W[(i-j)+T] k_j for
/// |i-j| <= T, 0 elsewhere (masked later). q, k are n x d; wloc holds
/// 2T+1 stacked d x d matrices.
pub fn dense_relative_scores_f64(q: &[f64], k: &[f64], wloc: &[f64], n: usize, d: usize, window: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i.abs_diff(j) > window {
                continue;
            }
            let delta = (i as isize - j as isize + window as isize) as usize;
            let w = &wloc[delta * d * d..(delta + 1) * d * d];
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    s += q[i * d + a] * w[a * d + b] * k[j * d + b];
                }
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Row-wise softmax over the unmasked entries; masked entries become
/// exact zeros.
pub fn masked_softmax_f64(scores: &[f64], mask: &[bool], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &scores[i * n..(i + 1) * n];
        let m = &mask[i * n..(i + 1) * n];
        let max = row
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..n {
            if m[j] {
                z += (row[j] - max).exp();
            }
        }
        for j in 0..n {
            if m[j] {
                out[i * n + j] = (row[j] - max).exp() / z;
            }
        }
    }
    out
}

/// Standard (unwindowed) scaled dot-product attention:
/// softmax(q k^T / sqrt(d)) v, all in f64.
pub fn standard_attention_f64(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..d {
                s += q[i * d + t] * k[j * d + t];
            }
            scores[i * n + j] = s * scale;
        }
    }
    let mask = vec![true; n * n];
    let weights = masked_softmax_f64(&scores, &mask, n);
    matmul_f64(&weights, v, n, n, d)
}

/// Diagonal-Gaussian log density of frame t under phoneme i's emission.
pub fn log_density_f64(mu: &[f64], var: &[f64], mel: &[f32], i: usize, t: usize, dim: usize) -> f64 {
    let mut lp = 0.0;
    for c in 0..dim {
        let m = mu[i * dim + c];
        let v = var[i * dim + c];
        let x = f64::from(mel[t * dim + c]);
        lp += -0.5 * ((x - m) * (x - m) / v + v.ln() + (2.0 * std::f64::consts::PI).ln());
    }
    lp
}

/// Brute-force forward-sum oracle: enumerate every composition of n
/// frames into m positive segment lengths and logsumexp the segment
/// log-probabilities.
pub fn brute_force_log_total(mu: &[f64], var: &[f64], mel: &[f32], m: usize, n: usize, dim: usize) -> f64 {
    fn go(
        mu: &[f64],
        var: &[f64],
        mel: &[f32],
        m: usize,
        n: usize,
        dim: usize,
        i: usize,
        t: usize,
        acc: f64,
        totals: &mut Vec<f64>,
    ) {
        if i == m {
            if t == n {
                totals.push(acc);
            }
            return;
        }
        let remaining_phonemes = m - i - 1;
        let mut seg_lp = 0.0;
        for dur in 1..=(n - t).saturating_sub(remaining_phonemes) {
            seg_lp += log_density_f64(mu, var, mel, i, t + dur - 1, dim);
            go(mu, var, mel, m, n, dim, i + 1, t + dur, acc + seg_lp, totals);
        }
    }
    let mut totals = Vec::new();
    go(mu, var, mel, m, n, dim, 0, 0, 0.0, &mut totals);
    let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + totals.iter().map(|&lp| (lp - max).exp()).sum::<f64>().ln()
}

/// Index of a named parameter inside a store (for targeted overwrites).
pub fn param_index(store: &ParamStore, name: &str) -> usize {
    store
        .entries()
        .iter()
        .position(|e| e.name == name)
        .unwrap_or_else(|| panic!("no parameter named {name}"))
}

pub fn param_data<'a>(store: &'a ParamStore, name: &str) -> &'a [f32] {
    &store.entries()[param_index(store, name)].data
}
