//! Forward-pass latency of an unpruned model against a pruned copy.
//!
//! Timing runs the transformer blocks on a random `seq_len x D` input, so the
//! measurement isolates the part pruning changes and is free of the
//! `max_seq` limit of the position table.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::layers::{attention_forward, block_forward, layer_norm_forward};
use crate::model::Model;
use crate::numerics::{Matrix, SeededRng};

/// Multiply-add FLOPs (2 per MAC) of the attention sublayers still active:
/// Q/K/V projections `6 s D^2`, scores `2 s^2 D`, weighted sum `2 s^2 D`,
/// output projection `2 s D^2`. Pruned layers contribute nothing.
pub fn attention_flops(seq_len: usize, d_model: usize, active_layers: usize) -> u64 {
    let (s, d) = (seq_len as u64, d_model as u64);
    active_layers as u64 * (8 * s * d * d + 4 * s * s * d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seq_len: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_len: 512,
            reps: 10,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub layers: usize,
    pub pruned_layers: Vec<usize>,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub p95_seconds: f64,
    pub std_seconds: f64,
    /// Share of forward time spent in attention sublayers (timed separately).
    pub attention_time_share: f64,
    pub attention_flops: u64,
    /// FLOPs of the `x W_c` products standing in for pruned attention.
    pub compensation_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub seq_len: usize,
    pub d_model: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub unpruned: TimingStats,
    pub pruned: TimingStats,
    /// `pruned.attention_flops / unpruned.attention_flops`.
    pub attention_flop_ratio: f64,
    /// Unpruned mean time over pruned mean time.
    pub speedup: f64,
    /// One standard error of `speedup` from the two timing spreads.
    pub speedup_noise: f64,
    pub environment: Environment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub available_parallelism: usize,
}

impl Environment {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

fn run_once(model: &Model, x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for lp in &model.params.layers {
        h = block_forward(&h, lp, model.config.heads, model.config.layer_norm).0;
    }
    h
}

/// Total seconds spent inside attention sublayers for one forward.
fn attention_seconds(model: &Model, x: &Matrix) -> f64 {
    let mut h = x.clone();
    let mut spent = 0.0;
    for lp in &model.params.layers {
        if !lp.pruned {
            let (a_in, _) = layer_norm_forward(&h, &lp.ln1_gain, &lp.ln1_bias, model.config.layer_norm);
            let t = Instant::now();
            std::hint::black_box(attention_forward(&a_in, lp, model.config.heads));
            spent += t.elapsed().as_secs_f64();
        }
        h = block_forward(&h, lp, model.config.heads, model.config.layer_norm).0;
    }
    spent
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx]
}

fn measure(model: &Model, x: &Matrix, cfg: &BenchConfig) -> TimingStats {
    for _ in 0..cfg.warmup {
        std::hint::black_box(run_once(model, x));
    }
    let mut times = Vec::with_capacity(cfg.reps);
    let mut attn = 0.0;
    for _ in 0..cfg.reps {
        let t = Instant::now();
        std::hint::black_box(run_once(model, x));
        times.push(t.elapsed().as_secs_f64());
        attn += attention_seconds(model, x);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let pruned = model.pruned_layers();
    let active = model.params.layers.len() - pruned.len();
    let compensated = model
        .params
        .layers
        .iter()
        .filter(|l| l.pruned && l.compensation.is_some())
        .count() as u64;
    let (s, d) = (x.rows() as u64, x.cols() as u64);
    TimingStats {
        layers: model.params.layers.len(),
        pruned_layers: pruned,
        mean_seconds: mean,
        median_seconds: percentile(&sorted, 0.5),
        p95_seconds: percentile(&sorted, 0.95),
        std_seconds: var.sqrt(),
        attention_time_share: if mean > 0.0 { (attn / n / mean).min(1.0) } else { 0.0 },
        attention_flops: attention_flops(x.rows(), x.cols(), active),
        compensation_flops: compensated * 2 * s * d * d,
    }
}

/// Times both models on the same input. Repetitions alternate between the
/// two so slow drifts in machine load affect them alike.
pub fn bench_latency(unpruned: &Model, pruned: &Model, cfg: &BenchConfig) -> Result<LatencyReport> {
    if cfg.reps < 10 {
        return Err(invalid(format!("bench reps must be at least 10, got {}", cfg.reps)));
    }
    if cfg.seq_len == 0 {
        return Err(invalid("bench seq_len must be positive"));
    }
    let (a, b) = (&unpruned.config, &pruned.config);
    if a.d_model != b.d_model || a.heads != b.heads || a.layers != b.layers || a.mlp_hidden != b.mlp_hidden {
        return Err(invalid("benchmarked models must share their architecture"));
    }
    let x = SeededRng::new(cfg.seed).normal_matrix(cfg.seq_len, a.d_model, 1.0);
    let single = BenchConfig { reps: 1, warmup: 0, ..cfg.clone() };
    for _ in 0..cfg.warmup {
        std::hint::black_box(run_once(unpruned, &x));
        std::hint::black_box(run_once(pruned, &x));
    }
    let mut runs_a = Vec::with_capacity(cfg.reps);
    let mut runs_b = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        runs_a.push(measure(unpruned, &x, &single));
        runs_b.push(measure(pruned, &x, &single));
    }
    let ua = merge(runs_a);
    let pb = merge(runs_b);
    let ratio = if ua.attention_flops == 0 {
        0.0
    } else {
        pb.attention_flops as f64 / ua.attention_flops as f64
    };
    let speedup = ua.mean_seconds / pb.mean_seconds;
    let n = cfg.reps as f64;
    let rel = ((ua.std_seconds / ua.mean_seconds).powi(2) + (pb.std_seconds / pb.mean_seconds).powi(2)).sqrt() / n.sqrt();
    Ok(LatencyReport {
        seq_len: cfg.seq_len,
        d_model: a.d_model,
        repetitions: cfg.reps,
        warmup: cfg.warmup,
        unpruned: ua,
        pruned: pb,
        attention_flop_ratio: ratio,
        speedup,
        speedup_noise: speedup * rel,
        environment: Environment::capture(),
    })
}

fn merge(runs: Vec<TimingStats>) -> TimingStats {
    let times: Vec<f64> = runs.iter().map(|r| r.mean_seconds).collect();
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let share = runs.iter().map(|r| r.attention_time_share).sum::<f64>() / n;
    let first = runs.into_iter().next().expect("at least one run");
    TimingStats {
        mean_seconds: mean,
        median_seconds: percentile(&sorted, 0.5),
        p95_seconds: percentile(&sorted, 0.95),
        std_seconds: var.sqrt(),
        attention_time_share: share,
        ..first
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn flop_formula() {
        // s = 3, D = 2: 8*3*4 + 4*9*2 = 96 + 72 per layer.
        assert_eq!(attention_flops(3, 2, 1), 168);
        assert_eq!(attention_flops(3, 2, 0), 0);
    }

    #[test]
    fn identical_models_and_full_pruning() {
        let m = Model::new(tiny_config(), 1).unwrap();
        let cfg = BenchConfig {
            seq_len: 24,
            reps: 10,
            warmup: 1,
            seed: 0,
        };
        let r = bench_latency(&m, &m, &cfg).unwrap();
        assert_eq!(r.attention_flop_ratio, 1.0);
        assert!(r.speedup > 0.0 && r.speedup_noise >= 0.0);

        let mut all = m.clone();
        for l in 0..2 {
            all.prune_layer(l, None).unwrap();
        }
        let r = bench_latency(&m, &all, &cfg).unwrap();
        assert_eq!(r.attention_flop_ratio, 0.0);
        assert_eq!(r.pruned.attention_time_share, 0.0);
        assert!(bench_latency(&m, &m, &BenchConfig { reps: 9, ..cfg }).is_err());
    }
}
