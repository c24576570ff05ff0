//! Monotonic phoneme-to-frame alignment: forward-sum loss over all
//! segmentations, Viterbi duration extraction, and duration rounding.
//!
//! States are phonemes; each frame either stays in the current phoneme or
//! advances to the next (no skips), and every phoneme gets at least one
//! frame. Emissions are diagonal Gaussians over mel space. All DP runs in
//! f64 log space.

use crate::tensor::VARIANCE_FLOOR;
use crate::{Error, Result};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// A monotonic segmentation: one positive frame count per phoneme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub durations: Vec<usize>,
}

impl Alignment {
    pub fn new(durations: Vec<usize>, frames: usize) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::Invariant("alignment: empty durations".into()));
        }
        if durations.iter().any(|&d| d == 0) {
            return Err(Error::Invariant("alignment: zero duration".into()));
        }
        let total: usize = durations.iter().sum();
        if total != frames {
            return Err(Error::Invariant(format!(
                "alignment: durations sum {total} != frame count {frames}"
            )));
        }
        Ok(Alignment { durations })
    }

    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Diagonal-Gaussian log density of frame t of `mel` under phoneme i.
fn log_density(mu: &[f64], var: &[f64], mel: &[f32], i: usize, t: usize, dim: usize) -> f64 {
    let mut acc = 0.0f64;
    for d in 0..dim {
        let m = mu[i * dim + d];
        let v = var[i * dim + d];
        let x = mel[t * dim + d] as f64;
        acc += -0.5 * (LOG_2PI + v.ln() + (x - m) * (x - m) / v);
    }
    acc
}

fn to_f64_mu_var(mu: &[f32], logvar: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let mu64: Vec<f64> = mu.iter().map(|v| *v as f64).collect();
    let var64: Vec<f64> = logvar.iter().map(|v| (*v as f64).exp().max(VARIANCE_FLOOR)).collect();
    (mu64, var64)
}

/// Feasible phoneme range at frame t: enough frames before and after for
/// every phoneme to get at least one.
fn feasible_range(t: usize, m: usize, n: usize) -> (usize, usize) {
    let lo = (m + t).saturating_sub(n); // m-1 - (n-1-t)
    let hi = t.min(m - 1);
    (lo, hi)
}

/// Log of the total probability of all monotonic segmentations
/// (the forward recursion read at the terminal cell). Unnormalized.
pub fn forward_sum_log_total(mu: &[f64], var: &[f64], mel: &[f32], m: usize, n: usize, dim: usize) -> Result<f64> {
    if m == 0 || n == 0 {
        return Err(Error::Input("forward_sum: empty sequence".into()));
    }
    if m > n {
        return Err(Error::InfeasibleAlignment {
            phonemes: m,
            frames: n,
        });
    }
    let mut prev = vec![f64::NEG_INFINITY; m];
    prev[0] = log_density(mu, var, mel, 0, 0, dim);
    for t in 1..n {
        let mut cur = vec![f64::NEG_INFINITY; m];
        let (lo, hi) = feasible_range(t, m, n);
        for i in lo..=hi {
            let stay = prev[i];
            let advance = if i > 0 { prev[i - 1] } else { f64::NEG_INFINITY };
            let inc = logsumexp2(stay, advance);
            if inc > f64::NEG_INFINITY {
                cur[i] = inc + log_density(mu, var, mel, i, t, dim);
            }
        }
        prev = cur;
    }
    Ok(prev[m - 1])
}

pub(crate) fn forward_sum_log_total_f32(
    mu: &[f32],
    logvar: &[f32],
    mel: &[f32],
    m: usize,
    n: usize,
    dim: usize,
) -> Result<f64> {
    let (mu64, var64) = to_f64_mu_var(mu, logvar);
    forward_sum_log_total(&mu64, &var64, mel, m, n, dim)
}

/// Gradient of the normalized forward-sum loss (-logZ / n) with respect to
/// mu and logvar, via the alpha-beta occupancy posterior.
pub(crate) fn forward_sum_backward_f32(
    mu: &[f32],
    logvar: &[f32],
    mel: &[f32],
    m: usize,
    n: usize,
    dim: usize,
    upstream: f32,
) -> (Vec<f32>, Vec<f32>) {
    let (mu64, var64) = to_f64_mu_var(mu, logvar);
    // emissions
    let mut e = vec![f64::NEG_INFINITY; n * m];
    for t in 0..n {
        let (lo, hi) = feasible_range(t, m, n);
        for i in lo..=hi {
            e[t * m + i] = log_density(&mu64, &var64, mel, i, t, dim);
        }
    }
    // alpha
    let mut alpha = vec![f64::NEG_INFINITY; n * m];
    alpha[0] = e[0];
    for t in 1..n {
        let (lo, hi) = feasible_range(t, m, n);
        for i in lo..=hi {
            let stay = alpha[(t - 1) * m + i];
            let advance = if i > 0 { alpha[(t - 1) * m + i - 1] } else { f64::NEG_INFINITY };
            let inc = logsumexp2(stay, advance);
            if inc > f64::NEG_INFINITY {
                alpha[t * m + i] = inc + e[t * m + i];
            }
        }
    }
    let log_z = alpha[(n - 1) * m + m - 1];
    // beta
    let mut beta = vec![f64::NEG_INFINITY; n * m];
    beta[(n - 1) * m + m - 1] = 0.0;
    for t in (0..n - 1).rev() {
        let (lo, hi) = feasible_range(t, m, n);
        for i in lo..=hi {
            let stay = e[(t + 1) * m + i] + beta[(t + 1) * m + i];
            let advance = if i + 1 < m {
                e[(t + 1) * m + i + 1] + beta[(t + 1) * m + i + 1]
            } else {
                f64::NEG_INFINITY
            };
            beta[t * m + i] = logsumexp2(stay, advance);
        }
    }
    // occupancy posterior and chain rule into mu / logvar
    let scale = upstream as f64 / n as f64;
    let mut dmu = vec![0.0f32; m * dim];
    let mut dlv = vec![0.0f32; m * dim];
    for t in 0..n {
        let (lo, hi) = feasible_range(t, m, n);
        for i in lo..=hi {
            let occ = (alpha[t * m + i] + beta[t * m + i] - log_z).exp();
            if occ == 0.0 {
                continue;
            }
            let de = -occ * scale; // d(loss)/d(e[t][i])
            for d in 0..dim {
                let mval = mu64[i * dim + d];
                let v = var64[i * dim + d];
                let x = mel[t * dim + d] as f64;
                dmu[i * dim + d] += (de * (x - mval) / v) as f32;
                if (logvar[i * dim + d] as f64).exp() > VARIANCE_FLOOR {
                    dlv[i * dim + d] += (de * (-0.5) * (1.0 - (x - mval) * (x - mval) / v)) as f32;
                }
            }
        }
    }
    (dmu, dlv)
}

/// Max-probability monotonic segmentation with backtrace. Ties prefer the
/// advancing predecessor so transitions land as late as possible, which
/// keeps early phonemes long; the rule makes results deterministic.
pub fn viterbi_durations(mu: &[f64], var: &[f64], mel: &[f32], m: usize, n: usize, dim: usize) -> Result<Alignment> {
    if m == 0 || n == 0 {
        return Err(Error::Input("viterbi: empty sequence".into()));
    }
    if m > n {
        return Err(Error::InfeasibleAlignment {
            phonemes: m,
            frames: n,
        });
    }
    let mut delta = vec![f64::NEG_INFINITY; n * m];
    let mut from_advance = vec![false; n * m];
    delta[0] = log_density(mu, var, mel, 0, 0, dim);
    for t in 1..n {
        let (lo, hi) = feasible_range(t, m, n);
        for i in lo..=hi {
            let stay = delta[(t - 1) * m + i];
            let advance = if i > 0 { delta[(t - 1) * m + i - 1] } else { f64::NEG_INFINITY };
            let (best, adv) = if advance >= stay { (advance, true) } else { (stay, false) };
            if best > f64::NEG_INFINITY {
                delta[t * m + i] = best + log_density(mu, var, mel, i, t, dim);
                from_advance[t * m + i] = adv;
            }
        }
    }
    let mut durations = vec![0usize; m];
    let mut i = m - 1;
    for t in (0..n).rev() {
        durations[i] += 1;
        if t > 0 && from_advance[t * m + i] {
            i -= 1;
        }
    }
    Alignment::new(durations, n)
}

/// Viterbi from f32 mean / log-variance stats, as produced by the model.
pub fn viterbi_durations_f32(mu: &[f32], logvar: &[f32], mel: &[f32], m: usize, n: usize, dim: usize) -> Result<Alignment> {
    let (mu64, var64) = to_f64_mu_var(mu, logvar);
    viterbi_durations(&mu64, &var64, mel, m, n, dim)
}

/// Log-probability of the Viterbi path (for the path <= total inequality).
pub fn viterbi_log_prob(mu: &[f64], var: &[f64], mel: &[f32], m: usize, n: usize, dim: usize) -> Result<f64> {
    let align = viterbi_durations(mu, var, mel, m, n, dim)?;
    let mut lp = 0.0f64;
    let mut t = 0;
    for (i, &du) in align.durations.iter().enumerate() {
        for _ in 0..du {
            lp += log_density(mu, var, mel, i, t, dim);
            t += 1;
        }
    }
    Ok(lp)
}

/// Convert predicted log-durations into integer frame counts:
/// round(exp(log_d) * scale) with ties to even, clamped to >= 1.
fn round_duration(d: f32) -> usize {
    d.round_ties_even().max(1.0) as usize
}

pub fn durations_from_predictor(log_d: &[f32], scale: f32) -> Alignment {
    let durations: Vec<usize> = log_d.iter().map(|&ld| round_duration(ld.exp() * scale)).collect();
    Alignment { durations }
}
