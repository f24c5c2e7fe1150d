//! Each metric against a deliberately naive re-implementation on seeded
//! random windows.

use std::time::Instant;

use dqaf_core::episode::{ActionBound, TelemetrySample};
use dqaf_core::metrics::{
    action_saturation, gripper_chatter, ldlj, static_fraction, static_threshold, MetricConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 1000;
const REL_TOL: f64 = 1e-9;

struct Window {
    rate: f64,
    samples: Vec<TelemetrySample>,
    bounds: Vec<ActionBound>,
    gripper: usize,
}

fn random_window(rng: &mut ChaCha8Rng) -> Window {
    let n = rng.random_range(4..240);
    let rate = [10.0, 30.0, 50.0, 100.0, 500.0][rng.random_range(0..5)];
    let state_dims = rng.random_range(1..8);
    let arm_dims = rng.random_range(1..8);
    let mut bounds: Vec<ActionBound> = (0..arm_dims)
        .map(|_| {
            if rng.random_bool(0.1) {
                ActionBound { min: 0.5, max: 0.5 }
            } else {
                let lo = rng.random_range(-3.0..0.0);
                ActionBound { min: lo, max: lo + rng.random_range(0.1..6.0) }
            }
        })
        .collect();
    bounds.push(ActionBound { min: 0.0, max: 1.0 });
    let gripper = arm_dims;
    let idle = rng.random_bool(0.3);
    let mut x: Vec<f64> = (0..state_dims).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut grip = 0.0;
    let samples = (0..n)
        .map(|i| {
            for v in x.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
            if rng.random_bool(0.1) {
                grip = 1.0 - grip;
            }
            let mut action: Vec<f64> = bounds[..arm_dims]
                .iter()
                .map(|b| {
                    if idle && rng.random_bool(0.4) {
                        0.0
                    } else if rng.random_bool(0.15) {
                        if rng.random_bool(0.5) { b.max } else { b.min }
                    } else {
                        rng.random_range(b.min..=b.max)
                    }
                })
                .collect();
            action.push(grip + rng.random_range(-0.05..0.05));
            TelemetrySample { t: i as f64 / rate, state: x.clone(), action }
        })
        .collect();
    Window { rate, samples, bounds, gripper }
}

fn naive_saturation(w: &Window) -> f64 {
    let mut sum = 0.0;
    let mut valid = 0;
    for d in 0..w.bounds.len() {
        if d == w.gripper {
            continue;
        }
        let (lo, hi) = (w.bounds[d].min, w.bounds[d].max);
        if hi - lo < 1e-9 {
            continue;
        }
        let delta = 0.01 * (hi - lo);
        let mut hits = 0;
        for s in &w.samples {
            let a = s.action[d];
            if (a - lo).abs() <= delta || (hi - a).abs() <= delta || a < lo || a > hi {
                hits += 1;
            }
        }
        sum += hits as f64 / w.samples.len() as f64;
        valid += 1;
    }
    if valid == 0 { 0.0 } else { sum / valid as f64 }
}

/// Successive differences: velocity, then acceleration, then jerk.
fn naive_ldlj(w: &Window) -> f64 {
    let dt = 1.0 / w.rate;
    let n = w.samples.len();
    let dims = w.samples[0].state.len();
    let diff = |xs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        xs.windows(2)
            .map(|p| (0..dims).map(|d| (p[1][d] - p[0][d]) / dt).collect())
            .collect()
    };
    let pos: Vec<Vec<f64>> = w.samples.iter().map(|s| s.state.clone()).collect();
    let vel = diff(&pos);
    let acc = diff(&vel);
    let jerk = diff(&acc);
    let norm2 = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
    let vmax2 = vel.iter().map(norm2).fold(0.0, f64::max);
    let j2: Vec<f64> = jerk.iter().map(norm2).collect();
    let mut integral = 0.0;
    for k in 1..j2.len() {
        integral += 0.5 * (j2[k - 1] + j2[k]) * dt;
    }
    if j2.len() == 1 {
        integral = j2[0] * dt;
    }
    let t = (n - 1) as f64 * dt;
    let v = (t * t * t / vmax2 * integral).ln();
    if vmax2.sqrt() < 1e-9 || integral <= 0.0 || v <= -20.0 { -20.0 } else { v }
}

fn naive_chatter(w: &Window, duration: f64) -> f64 {
    let g: Vec<f64> = w.samples.iter().map(|s| s.action[w.gripper]).collect();
    let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let level = lo + 0.5 * (hi - lo);
    let closed: Vec<bool> = g.iter().map(|&x| x > level).collect();
    let mut flips = 0;
    for k in 1..closed.len() {
        if closed[k] != closed[k - 1] {
            flips += 1;
        }
    }
    flips as f64 / duration
}

fn naive_static(w: &Window) -> f64 {
    let norms: Vec<f64> = w
        .samples
        .iter()
        .map(|s| {
            let mut acc = 0.0;
            for (d, a) in s.action.iter().enumerate() {
                if d != w.gripper {
                    acc += a * a;
                }
            }
            acc.sqrt()
        })
        .collect();
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.10 * sorted.len() as f64).ceil() as usize).max(1);
    let theta = sorted[rank - 1].max(1e-6);
    norms.iter().filter(|&&x| x < theta).count() as f64 / norms.len() as f64
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= REL_TOL * a.abs().max(b.abs())
}

#[test]
fn metrics_match_naive_reference() {
    let started = Instant::now();
    let cfg = MetricConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_917);
    let mut zero_motion = 0;
    for trial in 0..TRIALS {
        let w = random_window(&mut rng);
        let duration = w.samples.last().unwrap().t;
        let skip = Some(w.gripper);

        let sat = action_saturation(&w.samples, &w.bounds, skip, &cfg).unwrap().value;
        assert!(close(sat, naive_saturation(&w)), "trial {trial}: saturation {sat} vs {}", naive_saturation(&w));

        let l = ldlj(&w.samples, w.rate, &cfg).unwrap();
        zero_motion += l.flag.is_some() as usize;
        assert!(close(l.value, naive_ldlj(&w)), "trial {trial}: ldlj {} vs {}", l.value, naive_ldlj(&w));

        let c = gripper_chatter(&w.samples, skip, duration, &cfg).unwrap();
        assert!(close(c, naive_chatter(&w, duration)), "trial {trial}: chatter {c}");

        let theta = static_threshold(&w.samples, skip, &cfg);
        let f = static_fraction(&w.samples, theta, skip).unwrap();
        assert!(close(f, naive_static(&w)), "trial {trial}: static {f} vs {}", naive_static(&w));
    }
    assert!(zero_motion < TRIALS / 10);
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn ldlj_converges_on_cubic() {
    // x(t) = t^3 on [0, 1]: the continuous value is ln 4. The error should
    // shrink as the step halves.
    let cfg = MetricConfig::default();
    let errors: Vec<f64> = [1000.0, 2000.0, 4000.0, 8000.0]
        .iter()
        .map(|&rate| {
            let n = rate as usize;
            let s: Vec<TelemetrySample> = (0..=n)
                .map(|i| {
                    let t = i as f64 / rate;
                    TelemetrySample { t, state: vec![t * t * t], action: vec![0.0] }
                })
                .collect();
            (ldlj(&s, rate, &cfg).unwrap().value - 4f64.ln()).abs()
        })
        .collect();
    for pair in errors.windows(2) {
        assert!(pair[1] < pair[0], "{errors:?}");
    }
    assert!(errors[0] < 0.02, "{errors:?}");
}
