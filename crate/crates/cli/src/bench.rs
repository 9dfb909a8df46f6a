//! Per-component latency measurement.

use std::time::{Duration, Instant};

use spx_core::autodiff::{Tape, Tensor};
use spx_core::model::Model;
use spx_core::params::ParamStore;
use spx_core::Result;

use crate::cost::{flops_count, CostReport};

pub const WARMUPS: usize = 3;
/// A timed run must span at least this many timer ticks.
pub const MIN_TICKS: u32 = 10;

/// Smallest observable positive step of [`Instant`].
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Stage times (seconds) and the whole-pass time of `loops` forward passes, averaged.
fn timed_pass(model: &Model, params: &ParamStore<f32>, image: &Tensor<f32>, loops: usize) -> Result<([f64; 5], f64)> {
    let mut stage = [Duration::ZERO; 5];
    let start = Instant::now();
    for _ in 0..loops {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let x = tape.constant(image.clone());
        let t0 = Instant::now();
        let feats = model.encode(x, &p)?;
        let t1 = Instant::now();
        let hc = model.hypercolumn(&feats, &p)?;
        let t2 = Instant::now();
        let tokens = model.tokenize(hc, &p)?;
        let t3 = Instant::now();
        let cls = model.classify(tokens, &p)?;
        let t4 = Instant::now();
        let _ = model.associate(tokens, cls.logits)?;
        let t5 = Instant::now();
        for (acc, d) in stage.iter_mut().zip([t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4]) {
            *acc += d;
        }
    }
    let whole = start.elapsed().as_secs_f64() / loops as f64;
    Ok((stage.map(|d| d.as_secs_f64() / loops as f64), whole))
}

/// Median per-component wall time over `repeats` runs after [`WARMUPS`] warmup runs.
///
/// If the fastest component spans fewer than [`MIN_TICKS`] timer ticks, each
/// run loops the forward pass more times until it does.
pub fn benchmark(model: &Model, params: &ParamStore<f32>, repeats: usize) -> Result<CostReport> {
    let cfg = &model.cfg;
    let image = Tensor::from_fn(vec![cfg.image_h, cfg.image_w, 3], |i| ((i * 7919) % 255) as f32 / 255.0);
    for _ in 0..WARMUPS {
        timed_pass(model, params, &image, 1)?;
    }
    let tick = timer_resolution().as_secs_f64();
    let mut loops = 1;
    loop {
        let (stages, _) = timed_pass(model, params, &image, loops)?;
        let fastest = stages.iter().copied().fold(f64::INFINITY, f64::min);
        if fastest * loops as f64 >= f64::from(MIN_TICKS) * tick || loops >= 1 << 20 {
            break;
        }
        loops *= 2;
    }
    let repeats = repeats.max(1);
    let mut samples: Vec<([f64; 5], f64)> = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        samples.push(timed_pass(model, params, &image, loops)?);
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    let mut report = flops_count(cfg);
    for (i, row) in report.rows.iter_mut().enumerate() {
        row.time_ms = Some(1e3 * median(samples.iter().map(|s| s.0[i]).collect()));
    }
    report.finish_total();
    let whole_ms = 1e3 * median(samples.iter().map(|s| s.1).collect());
    report.overhead_ms = Some(whole_ms - report.total.time_ms.unwrap_or(0.0));
    Ok(report)
}
