use std::collections::BTreeMap;

use dqaf_core::episode::{ActionBound, Dims, Episode, EpisodeHeader, FramePointer, TelemetrySample};
use dqaf_core::evidence::{align_segment, build_evidence, classify_episode, ClassificationPolicy, ViolationStatus};
use dqaf_core::metrics::{
    aggregate_quality, anchor_subscore, action_saturation, Anchors, MetricConfig, MetricId, MetricResult,
};
use dqaf_core::segment::{classify_value, partition_times, Segment, SegmentReport};
use dqaf_core::semantic::{
    build_update_schedule, context_from_frames, detect_anomalies, global_progress, AnomalyRuleConfig,
    SemanticTrace, SemanticUpdate, TracePoint,
};
use dqaf_core::context::{ReferenceFrame, TaskContext};
use proptest::prelude::*;

fn metric() -> impl Strategy<Value = MetricId> {
    prop::sample::select(MetricId::ALL.to_vec())
}

fn episode_strategy() -> impl Strategy<Value = Episode> {
    (1usize..4, 1usize..4, 2usize..40, prop::bool::ANY, 0usize..10, 1.0f64..200.0).prop_flat_map(
        |(sd, ad, n, bounds, nf, rate)| {
            let sample = (prop::collection::vec(-1e3f64..1e3, sd), prop::collection::vec(-5f64..5.0, ad));
            (
                prop::collection::vec(sample, n),
                prop::collection::vec(0.0f64..1.0, nf),
                Just((sd, ad, bounds, rate)),
            )
        },
    )
    .prop_map(|(raw, frame_pos, (sd, ad, bounds, rate))| {
        let samples: Vec<TelemetrySample> = raw
            .into_iter()
            .enumerate()
            .map(|(i, (state, action))| TelemetrySample { t: i as f64 / rate, state, action })
            .collect();
        let duration = samples.last().unwrap().t;
        let mut ft: Vec<f64> = frame_pos.iter().map(|p| p * duration).collect();
        ft.sort_by(f64::total_cmp);
        let frames = ft
            .into_iter()
            .enumerate()
            .map(|(k, t)| FramePointer { t, uri: format!("frames/{k}.jpg") })
            .collect();
        let header = EpisodeHeader {
            episode_id: "prop".into(),
            task_id: "task".into(),
            sample_rate_hz: rate,
            action_bounds: bounds.then(|| vec![ActionBound { min: -5.0, max: 5.0 }; ad]),
            gripper_channel: None,
            dims: Dims { state: sd, action: ad },
        };
        Episode::new(header, samples, frames).unwrap()
    })
}

fn update(t: f64, progress: f64, index: usize) -> SemanticUpdate {
    SemanticUpdate {
        t,
        progress,
        subtask_index: index,
        completion_pct: 0.0,
        rationale: format!("at {t}"),
        anomaly: false,
        provider_flagged: false,
    }
}

fn ctx(plan_len: usize) -> TaskContext {
    TaskContext {
        task_id: "t".into(),
        description: String::new(),
        plan: (1..=plan_len).map(|i| format!("step {i}")).collect(),
        reference_frames: vec![ReferenceFrame { uri: "r".into(), caption: "c".into() }],
        expert_instructions: String::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn episode_jsonl_round_trip(ep in episode_strategy()) {
        let text = ep.to_jsonl_string();
        let back = Episode::from_jsonl(text.as_bytes()).unwrap();
        prop_assert_eq!(&back, &ep);
        prop_assert_eq!(back.to_jsonl_string(), text);
    }

    #[test]
    fn quality_in_range_and_weight_scale_invariant(
        subs in prop::collection::btree_map(metric(), 0.0f64..=1.0, 1..=4),
        weights in prop::collection::vec(0.01f64..10.0, 4),
        k in 0.01f64..1000.0,
    ) {
        let results: Vec<MetricResult> = subs
            .iter()
            .map(|(&metric, &s)| MetricResult { metric, raw_value: 0.0, subscore: s, flag: None })
            .collect();
        let cfg = MetricConfig {
            weights: MetricId::ALL.iter().copied().zip(weights.iter().copied()).collect(),
            ..MetricConfig::default()
        };
        let q = aggregate_quality(&results, &cfg).unwrap();
        prop_assert!((0.0..=10.0).contains(&q));
        let mut scaled = cfg.clone();
        for w in scaled.weights.values_mut() {
            *w *= k;
        }
        let q2 = aggregate_quality(&results, &scaled).unwrap();
        prop_assert!((q - q2).abs() <= 1e-12 * q.abs().max(1.0));
    }

    #[test]
    fn subscore_bounded_and_monotone(good in -50f64..50.0, span in 1e-3f64..100.0, a in -200f64..200.0, b in -200f64..200.0) {
        let anchors = Anchors { good, bad: good + span };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (s_lo, s_hi) = (anchor_subscore(anchors, lo), anchor_subscore(anchors, hi));
        prop_assert!((0.0..=1.0).contains(&s_lo) && (0.0..=1.0).contains(&s_hi));
        prop_assert!(s_lo >= s_hi);
    }

    #[test]
    fn saturation_is_a_fraction(ep in episode_strategy()) {
        let m = action_saturation(&ep.samples, &ep.action_bounds, None, &MetricConfig::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.value));
    }

    #[test]
    fn exceed_and_near_are_exclusive(v in -10f64..10.0, th in -10f64..10.0, eta in 0f64..1.0) {
        let (e, n) = classify_value(v, th, eta, 1e-9);
        prop_assert!(!(e && n));
        prop_assert_eq!(e, v > th);
    }

    #[test]
    fn progress_formula_exact(l in 1usize..12, i_frac in 0f64..1.0, c in 0f64..=100.0) {
        let i = 1 + ((i_frac * l as f64) as usize).min(l - 1);
        let p = global_progress(i, c, l).unwrap();
        prop_assert!((0.0..=100.0).contains(&p));
        let expected = (100.0 / l as f64) * ((i - 1) as f64 + c / 100.0);
        prop_assert!((p - expected).abs() <= 1e-12 * expected.max(1.0));
        prop_assert_eq!(global_progress(1, 0.0, l).unwrap(), 0.0);
        prop_assert_eq!(global_progress(l, 100.0, l).unwrap(), 100.0);
    }

    #[test]
    fn schedule_spacing(duration in 0.01f64..200.0, interval in 0.1f64..10.0) {
        let u = build_update_schedule(duration, interval).unwrap();
        prop_assert!(!u.is_empty());
        prop_assert!((u.last().unwrap() - duration).abs() < 1e-6);
        for w in u.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
        for w in u[..u.len() - 1].windows(2) {
            prop_assert!((w[1] - w[0] - interval).abs() < 1e-6);
        }
        if u.len() >= 2 {
            prop_assert!(u[u.len() - 1] - u[u.len() - 2] <= interval + 1e-6);
        }
    }

    #[test]
    fn clip_is_suffix_of_visible_frames(
        mut times in prop::collection::vec(0f64..30.0, 1..40),
        t in 0f64..30.0,
    ) {
        times.sort_by(f64::total_cmp);
        let frames: Vec<FramePointer> = times
            .iter()
            .enumerate()
            .map(|(k, &t)| FramePointer { t, uri: format!("{k}") })
            .collect();
        let visible: Vec<&FramePointer> = frames.iter().filter(|f| f.t <= t).collect();
        match context_from_frames("e", &frames, &ctx(3), t) {
            Err(_) => prop_assert!(visible.is_empty()),
            Ok(c) => {
                prop_assert_eq!(&c.anchor, &frames[0]);
                let want = visible.len().min(5);
                prop_assert_eq!(c.clip.len(), want);
                let suffix: Vec<FramePointer> = visible[visible.len() - want..].iter().map(|f| (*f).clone()).collect();
                prop_assert_eq!(c.clip, suffix);
            }
        }
    }

    #[test]
    fn alignment_matches_brute_force(
        points in prop::collection::vec((0f64..50.0, prop::bool::weighted(0.8)), 1..30),
        start in 0f64..50.0,
        len in 0.1f64..5.0,
    ) {
        // Quarter-second grid so that ties with the midpoint actually occur.
        let snap = |x: f64| (x * 4.0).round() / 4.0;
        let mut points: Vec<(f64, bool)> = points.into_iter().map(|(t, ok)| (snap(t), ok)).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        points.dedup_by(|a, b| a.0 == b.0);
        let (start, len) = (snap(start), snap(len).max(0.5));
        let trace = SemanticTrace {
            episode_id: "e".into(),
            plan_len: 1,
            points: points
                .iter()
                .map(|&(t, ok)| if ok { TracePoint::Update(update(t, 0.0, 1)) } else { TracePoint::Gap { t, reason: "x".into() } })
                .collect(),
        };
        let seg = Segment { index: 1, t_start: start, t_end: start + len, sample_range: 0..0 };
        let mid = seg.midpoint();
        let mut brute: Option<f64> = None;
        for &(t, ok) in &points {
            if !ok { continue; }
            brute = match brute {
                Some(b) if (b - mid).abs() <= (t - mid).abs() => Some(b),
                _ => Some(t),
            };
        }
        prop_assert_eq!(align_segment(&seg, &trace).ok(), brute);
    }

    #[test]
    fn anomaly_flags_only_strengthen(
        steps in prop::collection::vec((0usize..4, 0f64..=100.0, prop::bool::weighted(0.2)), 1..30),
    ) {
        let rules = AnomalyRuleConfig::default();
        let base: Vec<SemanticUpdate> = steps
            .iter()
            .enumerate()
            .map(|(k, &(i, c, _))| update(k as f64, global_progress(i + 1, c, 4).unwrap(), i + 1))
            .collect();
        let mut plain = base.clone();
        detect_anomalies(&mut plain, &rules);
        let mut flagged = base;
        for (u, &(_, _, f)) in flagged.iter_mut().zip(&steps) {
            u.provider_flagged = f;
            u.anomaly = f;
        }
        detect_anomalies(&mut flagged, &rules);
        for (p, f) in plain.iter().zip(&flagged) {
            prop_assert!(!p.anomaly || f.anomaly);
            prop_assert!(!f.provider_flagged || f.anomaly);
        }
    }

    #[test]
    fn evidence_covers_every_flag(
        flags in prop::collection::vec(prop::collection::btree_map(metric(), (0u8..3, 0f64..1.0), 0..4), 1..25),
    ) {
        let reports: Vec<SegmentReport> = flags
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let t = j as f64 * 2.5;
                let mut r = SegmentReport {
                    segment: Segment { index: j + 1, t_start: t, t_end: t + 2.5, sample_range: 0..0 },
                    values: BTreeMap::new(),
                    thresholds: BTreeMap::new(),
                    exceed: BTreeMap::new(),
                    near: BTreeMap::new(),
                };
                for (&metric, &(state, v)) in m {
                    r.values.insert(metric, v);
                    r.thresholds.insert(metric, 0.5);
                    r.exceed.insert(metric, state == 1);
                    r.near.insert(metric, state == 2);
                }
                r
            })
            .collect();
        let trace = SemanticTrace {
            episode_id: "e".into(),
            plan_len: 2,
            points: (1..=reports.len()).map(|k| TracePoint::Update(update(2.5 * k as f64, 50.0, 1 + k % 2))).collect(),
        };
        let plan = vec!["a".to_string(), "b".to_string()];
        let ev = build_evidence(&reports, &trace, &plan);
        let expected: usize = flags.iter().map(|m| m.values().filter(|(s, _)| *s > 0).count()).sum();
        prop_assert_eq!(ev.len(), expected);
        for e in &ev {
            let r = &reports[e.segment_index - 1];
            let want = if r.exceed[&e.metric] { ViolationStatus::Exceed } else { ViolationStatus::Near };
            prop_assert_eq!(e.status, want);
            let sub = e.aligned_subtask.as_ref().unwrap();
            prop_assert_eq!(&sub.name, &plan[sub.index - 1]);
        }

        // An isolated exceed never makes a metric persistent.
        let c = classify_episode(10.0, &trace, &ev, &ClassificationPolicy::default());
        for m in MetricId::ALL {
            let segs: Vec<usize> = ev.iter().filter(|e| e.metric == m && e.status == ViolationStatus::Exceed).map(|e| e.segment_index).collect();
            let adjacent = segs.windows(2).any(|w| w[1] == w[0] + 1);
            let persistent = c.reasons.contains(&format!("persistent:{m}"));
            prop_assert_eq!(persistent, adjacent || segs.len() >= 4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn segments_tile_the_episode(duration in 0.05f64..500.0, rate in 1f64..100.0, seg in prop::sample::select(vec![0.5, 1.0, 2.5, 3.7, 10.0])) {
        let n = (duration * rate).floor() as usize + 1;
        let mut times: Vec<f64> = (0..n).map(|i| i as f64 / rate).collect();
        if *times.last().unwrap() < duration {
            times.push(duration);
        }
        let segments = partition_times(&times, duration, seg).unwrap();
        prop_assert_eq!(segments.len(), ((duration / seg) - 1e-9).ceil().max(1.0) as usize);
        prop_assert_eq!(segments[0].t_start, 0.0);
        prop_assert_eq!(segments.last().unwrap().t_end, duration);
        prop_assert_eq!(segments[0].sample_range.start, 0);
        prop_assert_eq!(segments.last().unwrap().sample_range.end, times.len());
        for w in segments.windows(2) {
            prop_assert_eq!(w[0].t_end, w[1].t_start);
            prop_assert_eq!(w[0].sample_range.end, w[1].sample_range.start);
        }
        for s in &segments {
            for &t in &times[s.sample_range.clone()] {
                prop_assert!(t >= s.t_start - 1e-9);
                prop_assert!(t < s.t_end + 1e-9 || s.index == segments.len());
            }
        }
    }
}
