//! Streaming analysis on a virtual clock: semantic queries are issued while
//! the episode is still being recorded, as soon as the frames for each
//! update time have arrived.

use serde::{Deserialize, Serialize};

use crate::context::TaskContext;
use crate::episode::{Episode, FramePointer, TelemetrySample};
use crate::semantic::{
    apply_anomaly_rules, context_from_frames, make_update, query_provider, AnomalyRuleConfig, SemanticError,
    SemanticProvider, SemanticTrace, TracePoint, DEFAULT_UPDATE_INTERVAL_S,
};
use crate::validation::latency_budget;

const TIME_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamingConfig {
    pub interval_s: f64,
    /// Virtual latency of one semantic call.
    pub call_latency_s: f64,
    /// Virtual latency of the feedback call made after the last update.
    pub final_call_s: f64,
    /// Calls that may be in flight at once.
    pub parallelism: usize,
    pub retries: usize,
    pub rules: AnomalyRuleConfig,
}

impl Default for StreamingConfig {
    fn default() -> Self {
        StreamingConfig {
            interval_s: DEFAULT_UPDATE_INTERVAL_S,
            call_latency_s: 2.0,
            final_call_s: 3.0,
            parallelism: 1,
            retries: 1,
            rules: AnomalyRuleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IssuedQuery {
    pub update_time: f64,
    pub issue_time: f64,
    pub complete_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamingSchedule {
    pub issued: Vec<IssuedQuery>,
    pub completed_before_end: usize,
    pub total_updates: usize,
    pub episode_end_s: f64,
    pub overlap_fraction: f64,
    /// Post-episode latency from the latency-budget arithmetic at the
    /// observed overlap.
    pub residual_estimate_s: f64,
    /// Post-episode latency read off the simulated clock.
    pub simulated_residual_s: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StreamingError {
    #[error("data arrived out of order: t={t} after t={clock}")]
    OutOfOrder { t: f64, clock: f64 },
    #[error("session already finished")]
    Finished,
    #[error(transparent)]
    Semantic(#[from] SemanticError),
}

/// One recording in progress. Feed it frames and samples in time order,
/// then call [`StreamingSession::finish`].
pub struct StreamingSession<'a> {
    episode_id: String,
    ctx: &'a TaskContext,
    provider: &'a dyn SemanticProvider,
    cfg: StreamingConfig,
    frames: Vec<FramePointer>,
    clock: f64,
    next_k: usize,
    slots: Vec<f64>,
    points: Vec<TracePoint>,
    issued: Vec<IssuedQuery>,
    finished: bool,
}

impl<'a> StreamingSession<'a> {
    pub fn new(
        episode_id: impl Into<String>,
        ctx: &'a TaskContext,
        provider: &'a dyn SemanticProvider,
        cfg: StreamingConfig,
    ) -> Result<Self, StreamingError> {
        if !(cfg.interval_s > 0.0 && cfg.interval_s.is_finite()) {
            return Err(SemanticError::BadInterval.into());
        }
        let slots = vec![0.0; cfg.parallelism.max(1)];
        Ok(StreamingSession {
            episode_id: episode_id.into(),
            ctx,
            provider,
            cfg,
            frames: Vec::new(),
            clock: 0.0,
            next_k: 1,
            slots,
            points: Vec::new(),
            issued: Vec::new(),
            finished: false,
        })
    }

    fn advance(&mut self, t: f64) -> Result<(), StreamingError> {
        if self.finished {
            return Err(StreamingError::Finished);
        }
        if t + TIME_TOLERANCE < self.clock {
            return Err(StreamingError::OutOfOrder { t, clock: self.clock });
        }
        self.clock = self.clock.max(t);
        Ok(())
    }

    fn due(&self) -> f64 {
        self.next_k as f64 * self.cfg.interval_s
    }

    /// Issues every update whose time has been reached by the recording.
    fn issue_ready(&mut self, strictly_after: bool) {
        loop {
            let u = self.due();
            let reached = if strictly_after {
                self.clock > u + TIME_TOLERANCE
            } else {
                self.clock >= u - TIME_TOLERANCE
            };
            if !reached {
                break;
            }
            self.issue(u);
            self.next_k += 1;
        }
    }

    fn issue(&mut self, u: f64) {
        let (slot, free_at) = self
            .slots
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one slot");
        let issue_time = u.max(free_at);
        let complete_time = issue_time + self.cfg.call_latency_s;
        self.slots[slot] = complete_time;
        self.issued.push(IssuedQuery {
            update_time: u,
            issue_time,
            complete_time,
        });
        let point = match context_from_frames(&self.episode_id, &self.frames, self.ctx, u) {
            Err(e) => TracePoint::Gap { t: u, reason: e.to_string() },
            Ok(context) => match query_provider(self.provider, &context, self.cfg.retries) {
                Ok(out) => TracePoint::Update(make_update(u, out, self.ctx.plan_len())),
                Err(e) => TracePoint::Gap { t: u, reason: e.to_string() },
            },
        };
        self.points.push(point);
    }

    /// A frame at `t` makes every update time strictly before `t` ready; an
    /// update at exactly `t` waits until the frame is stored.
    pub fn push_frame(&mut self, frame: FramePointer) -> Result<(), StreamingError> {
        self.advance(frame.t)?;
        self.issue_ready(true);
        self.frames.push(frame);
        self.issue_ready(false);
        Ok(())
    }

    pub fn push_sample(&mut self, sample: &TelemetrySample) -> Result<(), StreamingError> {
        self.advance(sample.t)?;
        self.issue_ready(true);
        Ok(())
    }

    /// Ends the recording at `end_s`, issuing the remaining updates and the
    /// final-time update when it is not already on the interval grid.
    pub fn finish(mut self, end_s: f64) -> Result<(SemanticTrace, StreamingSchedule), StreamingError> {
        if end_s.is_nan() || end_s <= 0.0 {
            return Err(SemanticError::EmptyEpisode.into());
        }
        self.advance(end_s)?;
        while self.due() <= end_s + TIME_TOLERANCE {
            let u = self.due();
            self.issue(u);
            self.next_k += 1;
        }
        let covered = self.issued.last().is_some_and(|q| (q.update_time - end_s).abs() <= 1e-6);
        if !covered {
            self.issue(end_s);
        }
        self.finished = true;

        apply_anomaly_rules(&mut self.points, &self.cfg.rules);
        let n = self.issued.len();
        let completed_before_end = self
            .issued
            .iter()
            .filter(|q| q.complete_time <= end_s + TIME_TOLERANCE)
            .count();
        let overlap_fraction = completed_before_end as f64 / n as f64;
        let last_complete = self.issued.iter().map(|q| q.complete_time).fold(end_s, f64::max);
        let budget = latency_budget(n, self.cfg.call_latency_s, self.cfg.final_call_s, overlap_fraction);
        let schedule = StreamingSchedule {
            issued: self.issued,
            completed_before_end,
            total_updates: n,
            episode_end_s: end_s,
            overlap_fraction,
            residual_estimate_s: budget.residual_s,
            simulated_residual_s: (last_complete - end_s) + self.cfg.final_call_s,
        };
        let trace = SemanticTrace {
            episode_id: self.episode_id,
            plan_len: self.ctx.plan_len(),
            points: self.points,
        };
        Ok((trace, schedule))
    }
}

/// Replays a recorded episode through a session in real time, frames and
/// samples interleaved by timestamp.
pub fn simulate_streaming(
    episode: &Episode,
    ctx: &TaskContext,
    provider: &dyn SemanticProvider,
    cfg: StreamingConfig,
) -> Result<(SemanticTrace, StreamingSchedule), StreamingError> {
    let mut session = StreamingSession::new(episode.episode_id.clone(), ctx, provider, cfg)?;
    let mut frames = episode.frames.iter().peekable();
    for sample in &episode.samples {
        while let Some(f) = frames.next_if(|f| f.t <= sample.t) {
            session.push_frame(f.clone())?;
        }
        session.push_sample(sample)?;
    }
    for f in frames {
        session.push_frame(f.clone())?;
    }
    session.finish(episode.duration_s)
}
