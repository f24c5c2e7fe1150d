//! Synthetic validation harness and latency-budget arithmetic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evidence::{ClassificationPolicy, Label};
use crate::metrics::MetricConfig;
use crate::pipeline::{analyze, AnalysisOptions, PipelineError};
use crate::segment::{calibrate_thresholds, CalibrationOptions, SegmentError, ThresholdProfile};
use crate::semantic::ScriptedSemanticProvider;
use crate::synth::{generate_episode, FaultKind, FaultSpec, GenerationConfig, SynthError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBudget {
    pub n_calls: usize,
    pub per_call_s: f64,
    pub final_call_s: f64,
    pub total_s: f64,
    pub overlap_fraction: f64,
    pub residual_s: f64,
}

/// Post-episode latency of `n_calls` sequential semantic calls plus a final
/// feedback call, with `overlap_fraction` of the semantic work hidden behind
/// the recording.
pub fn latency_budget(n_calls: usize, per_call_s: f64, final_call_s: f64, overlap_fraction: f64) -> LatencyBudget {
    let semantic = n_calls as f64 * per_call_s;
    LatencyBudget {
        n_calls,
        per_call_s,
        final_call_s,
        total_s: semantic + final_call_s,
        overlap_fraction,
        residual_s: (1.0 - overlap_fraction) * semantic + final_call_s,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ValidationError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Calibration(#[from] SegmentError),
    #[error("episode {episode_id}: {source}")]
    Pipeline {
        episode_id: String,
        #[source]
        source: PipelineError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_id: String,
    pub seed: u64,
    pub faults: Vec<FaultSpec>,
    pub expected: Label,
    pub predicted: Label,
    pub reasons: Vec<String>,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub recall: f64,
    pub precision: f64,
    /// Per fault kind, the share of persistent injections whose matching
    /// reason code appeared on a failure label.
    pub per_fault_detection: BTreeMap<FaultKind, f64>,
    pub latency: LatencyBudget,
    #[serde(default)]
    pub episodes: Vec<EpisodeOutcome>,
}

impl ValidationReport {
    /// Report with rates derived from a confusion matrix (failure = positive).
    /// Undefined rates (no positives) are reported as 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b > 0 { a as f64 / (a + b) as f64 } else { 0.0 };
        ValidationReport {
            tp,
            fp,
            fn_,
            tn,
            recall: ratio(tp, fn_),
            precision: ratio(tp, fp),
            per_fault_detection: BTreeMap::new(),
            latency: latency_budget(0, 0.0, 0.0, 0.0),
            episodes: Vec::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "episodes        {}", self.total());
        let _ = writeln!(s, "                predicted failure  predicted success");
        let _ = writeln!(s, "actual failure  {:>17}  {:>17}", self.tp, self.fn_);
        let _ = writeln!(s, "actual success  {:>17}  {:>17}", self.fp, self.tn);
        let _ = writeln!(s, "recall          {:.3}", self.recall);
        let _ = writeln!(s, "precision       {:.3}", self.precision);
        for (kind, rate) in &self.per_fault_detection {
            let _ = writeln!(s, "detect {:<15} {:.3}", kind.as_str(), rate);
        }
        let l = &self.latency;
        let _ = writeln!(
            s,
            "latency         {} calls x {:.1}s + {:.1}s = {:.1}s; overlap {:.0}% -> residual {:.1}s",
            l.n_calls,
            l.per_call_s,
            l.final_call_s,
            l.total_s,
            l.overlap_fraction * 100.0,
            l.residual_s
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationOptions {
    pub generation: GenerationConfig,
    pub reference_count: usize,
    pub policy: ClassificationPolicy,
    pub analysis: AnalysisOptions,
    pub per_call_s: f64,
    pub final_call_s: f64,
    pub overlap_fraction: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            generation: GenerationConfig::default(),
            reference_count: 10,
            policy: ClassificationPolicy::default(),
            analysis: AnalysisOptions::default(),
            per_call_s: 2.0,
            final_call_s: 3.0,
            overlap_fraction: 0.6,
        }
    }
}

/// Seeds are drawn from one ChaCha stream so a cohort is fixed by `seed`.
fn seeds(seed: u64, salt: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt);
    (0..n).map(|_| rng.random()).collect()
}

/// Calibrates a profile from `count` clean generated references.
pub fn calibrate_from_clean(
    count: usize,
    seed: u64,
    cfg: &GenerationConfig,
    policy: &ClassificationPolicy,
) -> Result<ThresholdProfile, ValidationError> {
    let refs = seeds(seed, 0x5eed_0001, count)
        .into_iter()
        .enumerate()
        .map(|(k, s)| generate_episode(&format!("ref-{k:03}"), s, cfg, &[]).map(|g| g.episode))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = CalibrationOptions {
        task_id: Some(cfg.task_id.clone()),
        policy: policy.clone(),
        ..Default::default()
    };
    Ok(calibrate_thresholds(&refs, MetricConfig::default(), &opts)?)
}

/// A persistent fault of `kind` with a window drawn for a `duration_s` episode.
pub fn persistent_fault<R: Rng>(kind: FaultKind, duration_s: f64, rng: &mut R) -> FaultSpec {
    match kind {
        FaultKind::Backtrack => {
            let len = rng.random_range(12.5..=17.5);
            let start = rng.random_range(12.5..=(duration_s - len - 2.5).max(12.5));
            FaultSpec::new(kind, start, start + len)
        }
        FaultKind::PrematureStop => {
            let start = rng.random_range(0.3 * duration_s..=0.8 * duration_s);
            FaultSpec::new(kind, start, duration_s)
        }
        _ => {
            let len = rng.random_range(7.5..=10.0);
            let start = rng.random_range(0.0..=(duration_s - len));
            FaultSpec::new(kind, start, start + len)
        }
    }
}

struct Planned {
    id: String,
    seed: u64,
    faults: Vec<FaultSpec>,
}

/// Generates `n_success` clean and `n_failure` persistent-fault episodes
/// (fault kinds in rotation), runs the full pipeline with the scripted
/// provider and rule-based feedback, and scores the labels.
pub fn run_validation(
    n_success: usize,
    n_failure: usize,
    seed: u64,
    profile: &ThresholdProfile,
    opts: &ValidationOptions,
) -> Result<ValidationReport, ValidationError> {
    let gen = &opts.generation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planned = Vec::with_capacity(n_success + n_failure);
    for (k, s) in seeds(seed, 0x5eed_0002, n_success).into_iter().enumerate() {
        planned.push(Planned { id: format!("ok-{k:03}"), seed: s, faults: vec![] });
    }
    for (k, s) in seeds(seed, 0x5eed_0003, n_failure).into_iter().enumerate() {
        let kind = FaultKind::ALL[k % FaultKind::ALL.len()];
        let fault = persistent_fault(kind, gen.duration_s, &mut rng);
        planned.push(Planned { id: format!("fail-{k:03}-{kind}"), seed: s, faults: vec![fault] });
    }

    let mut profile = profile.clone();
    profile.classification_policy = opts.policy.clone();
    let outcomes: Vec<EpisodeOutcome> = planned
        .par_iter()
        .map(|p| -> Result<EpisodeOutcome, ValidationError> {
            let g = generate_episode(&p.id, p.seed, gen, &p.faults)?;
            let provider = ScriptedSemanticProvider::new().with_script(g.script.clone());
            let a = analyze(&g.episode, &g.context, &profile, &provider, None, &opts.analysis).map_err(|source| {
                ValidationError::Pipeline { episode_id: p.id.clone(), source }
            })?;
            Ok(EpisodeOutcome {
                episode_id: p.id.clone(),
                seed: p.seed,
                faults: p.faults.clone(),
                expected: g.truth.label,
                predicted: a.classification.label,
                reasons: a.classification.reasons,
                q: a.q,
            })
        })
        .collect::<Result<_, _>>()?;

    let count = |e: Label, p: Label| outcomes.iter().filter(|o| o.expected == e && o.predicted == p).count();
    let mut report = ValidationReport::from_counts(
        count(Label::Failure, Label::Failure),
        count(Label::Success, Label::Failure),
        count(Label::Failure, Label::Success),
        count(Label::Success, Label::Success),
    );

    let mut per_kind: BTreeMap<FaultKind, (usize, usize)> = BTreeMap::new();
    for o in &outcomes {
        for f in &o.faults {
            let entry = per_kind.entry(f.kind).or_default();
            entry.1 += 1;
            if o.predicted == Label::Failure && o.reasons.contains(&f.kind.reason_code()) {
                entry.0 += 1;
            }
        }
    }
    report.per_fault_detection = per_kind
        .into_iter()
        .map(|(k, (hit, n))| (k, hit as f64 / n as f64))
        .collect();
    let n_calls = crate::semantic::build_update_schedule(gen.duration_s, gen.update_interval_s)
        .map(|s| s.len())
        .unwrap_or(0);
    report.latency = latency_budget(n_calls, opts.per_call_s, opts.final_call_s, opts.overlap_fraction);
    report.episodes = outcomes;
    Ok(report)
}
