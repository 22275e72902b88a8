#![allow(dead_code)]

use mamba_desk::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Central finite difference of a scalar function w.r.t. every entry of `x`.
pub fn numeric_grad(x: &Array, eps: f64, mut f: impl FnMut(&Array) -> f64) -> Array {
    let mut g = Array::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    g
}

/// Largest relative error between two gradients; entries where both are
/// below `floor` in magnitude are compared against `floor` instead.
pub fn max_rel_err(analytic: &Array, numeric: &Array, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Sum of `w_i * y_i`: a generic scalar readout for gradient checks.
pub fn dot(y: &Array, w: &Array) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

const WORDS: &[&str] = &[
    "the", "state", "space", "model", "reads", "a", "token", "and", "updates", "its",
    "hidden", "memory", "with", "every", "step", "while", "attention", "keeps", "all",
    "keys", "values", "so", "cost", "grows", "over", "time", "we", "train", "small",
    "networks", "on", "plain", "text", "to", "check", "that", "loss", "falls", "quickly",
    "when", "rate", "schedule", "is", "warm", "stable", "then", "decays", "batch", "size",
    "ramps", "up", "noise", "temperature", "stays", "constant", "long", "prompts", "fit",
    "in", "fixed", "budget", "of", "bytes", "because", "recurrence", "never", "looks", "back",
];

/// Deterministic English-like text of roughly `bytes` bytes.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut r = rng(seed);
    let mut out = String::with_capacity(bytes + 64);
    while out.len() < bytes {
        let n_words = r.gen_range(5..14);
        for i in 0..n_words {
            let w = WORDS[r.gen_range(0..WORDS.len())];
            if i == 0 {
                let mut c = w.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                out.push(first);
                out.push_str(c.as_str());
            } else {
                out.push(' ');
                out.push_str(w);
            }
        }
        out.push_str(if r.gen_bool(0.2) { ".\n" } else { ". " });
    }
    out
}
