//! The distributed asynchronous iteration
//! `w^i(t+1) = sum_j a^{i,j}(t) w^j(t - d^{i,j}(t)) + s^i(t)` with competitive
//! learning descent terms `s^i(t) = -eps^i_{t+1} H(z^i_{t+1}, w^i(t))`.

use serde::{Deserialize, Serialize};

use crate::agreement::{general_step, phi_limits_for, AgreementTracker, History, PhiLimits};
use crate::baselines::lloyd;
use crate::diagnostics::{summarize, BoundInputs, ConvergenceReport, DescentTerm, MetricsRecord, Recorder, RunContext};
use crate::error::{config, internal, usage, Result};
use crate::geometry::{empirical_distortion, observation_h, QuantizerVec, SampleBatch};
use crate::measures::{
    init_quantizer_from, make_batch_from, Distribution, DistributionSpec, SampleSource, SamplingMode, StreamHandle,
};
use crate::schedule::{generate, validate, CommSchedule, ScheduleSpec, Topology, ValidationReport};

/// Lloyd termination tolerance (relative distortion change).
pub const LLOYD_TOL: f64 = 1e-10;
pub const LLOYD_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// `eps^i_{t+1} = c w / (t v w)`.
    GlobalClock,
    /// `eps^i_{t+1} = c w / (n^i_t v w)` with `n^i_t` the updates of `i` so far,
    /// the current one included.
    LocalClock,
}

fn one() -> u64 {
    1
}

/// Step sequence. `warmup = w` holds the step at `c` for the first `w`
/// clock values; `w = 1` gives `c / (t v 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepPolicy {
    pub mode: StepMode,
    pub c: f64,
    #[serde(default = "one")]
    pub warmup: u64,
    /// Declared lower constant; derived from the schedule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    /// Declared upper constant; derived from the schedule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<f64>,
}

impl StepPolicy {
    pub fn new(mode: StepMode, c: f64) -> Self {
        Self { mode, c, warmup: 1, k1: None, k2: None }
    }

    pub fn with_warmup(mut self, warmup: u64) -> Self {
        self.warmup = warmup;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(config(format!("step constant c must lie in (0, 1), got {}", self.c)));
        }
        if self.warmup == 0 {
            return Err(config("step warmup must be at least 1"));
        }
        if let Some(k1) = self.k1 {
            if k1.is_nan() || k1 <= 0.0 {
                return Err(config("Assumption 8 needs K1 > 0"));
            }
        }
        if let Some(k2) = self.k2 {
            if k2.is_nan() || k2 < 1.0 {
                return Err(config("Assumption 8 needs K2 >= 1"));
            }
        }
        if let (Some(k1), Some(k2)) = (self.k1, self.k2) {
            if k2 < k1 {
                return Err(config(format!("Assumption 8 needs K1 <= K2, got K1 = {k1}, K2 = {k2}")));
            }
        }
        Ok(())
    }

    /// `eps^i_{t+1}` at tick `t` for a processor whose update count is `n`.
    #[inline]
    pub fn step(&self, t: usize, n: u64) -> f64 {
        let clock = match self.mode {
            StepMode::GlobalClock => t as u64,
            StepMode::LocalClock => n,
        };
        self.c * self.warmup as f64 / clock.max(self.warmup) as f64
    }
}

/// Effective constants with `K1 / (t v 1) <= eps^i_{t+1} <= K2 / (t v 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBounds {
    pub k1: f64,
    pub k2: f64,
    /// `min eps^i_{t+1} (t v 1)` over the emitted steps.
    pub derived_k1: Option<f64>,
    /// `max eps^i_{t+1} (t v 1)` over the emitted steps.
    pub derived_k2: Option<f64>,
}

impl StepBounds {
    pub fn admits(&self, t: usize, eps: f64) -> bool {
        let s = t.max(1) as f64;
        eps * s >= self.k1 * (1.0 - 1e-12) && eps * s <= self.k2 * (1.0 + 1e-12)
    }
}

/// Derives the constants from the steps the schedule will emit over
/// `[0, horizon)` and checks declared ones against them.
pub fn step_bounds(policy: &StepPolicy, schedule: &CommSchedule, horizon: usize) -> Result<StepBounds> {
    let mut counts = vec![0u64; schedule.processors()];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for t in 0..horizon.min(schedule.horizon()) {
        for (i, n) in counts.iter_mut().enumerate() {
            if schedule.is_active(t, i) {
                *n += 1;
                let r = policy.step(t, *n) * t.max(1) as f64;
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
    }
    let any = lo.is_finite();
    let (derived_k1, derived_k2) = if any { (Some(lo), Some(hi)) } else { (None, None) };
    if let (Some(k1), Some(d)) = (policy.k1, derived_k1) {
        if k1 > d {
            return Err(config(format!("declared K1 = {k1} exceeds min eps (t v 1) = {d}; Assumption 8 fails")));
        }
    }
    if let (Some(k2), Some(d)) = (policy.k2, derived_k2) {
        if k2 < d {
            return Err(config(format!("declared K2 = {k2} is below max eps (t v 1) = {d}; Assumption 8 fails")));
        }
    }
    Ok(StepBounds {
        k1: policy.k1.or(derived_k1).unwrap_or(policy.c),
        k2: policy.k2.or(derived_k2.map(|d| d.max(1.0))).unwrap_or(1.0f64.max(policy.c * policy.warmup as f64)),
        derived_k1,
        derived_k2,
    })
}

fn default_n_ref() -> usize {
    1000
}

fn default_cadence() -> usize {
    10
}

fn default_phi_tail() -> usize {
    2000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Number of processors `M`.
    pub processors: usize,
    pub kappa: usize,
    pub dim: usize,
    /// Number of simulated ticks `T`.
    pub horizon: usize,
    pub distribution: DistributionSpec,
    pub schedule: ScheduleSpec,
    pub step: StepPolicy,
    #[serde(default)]
    pub seed: u64,
    /// Size of the reference batch.
    #[serde(default = "default_n_ref")]
    pub n_ref: usize,
    /// Metrics are recorded every `cadence` ticks.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default)]
    pub sampling: SamplingMode,
    /// Extra schedule ticks simulated past `T` to resolve `phi` limits.
    #[serde(default = "default_phi_tail")]
    pub phi_tail: usize,
    /// Run Lloyd from the shared initialization for comparison.
    #[serde(default = "default_true")]
    pub compare_lloyd: bool,
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        if self.processors == 0 || self.kappa == 0 || self.dim == 0 {
            return Err(config("processors, kappa and dim must be positive"));
        }
        if self.n_ref == 0 {
            return Err(config("n_ref must be positive"));
        }
        if self.cadence == 0 || self.horizon % self.cadence != 0 {
            return Err(config(format!("cadence {} must be positive and divide the horizon {}", self.cadence, self.horizon)));
        }
        self.step.check()?;
        self.schedule.check()?;
        if let Some(d) = self.schedule.declared {
            let m = self.processors as f64;
            let widest = match self.schedule.topology {
                Topology::Complete => 1.0 / m,
                Topology::Ring | Topology::RandomSymmetricGossip if self.processors > 1 => 0.5,
                _ => 1.0,
            };
            if d.alpha > widest * (1.0 + 1e-12) {
                return Err(config(format!(
                    "declared alpha = {} is impossible: uniform weights of this topology are {widest} (alpha * M = {})",
                    d.alpha,
                    d.alpha * m
                )));
            }
        }
        Ok(())
    }
}

/// `s = -eps H(z, w)`.
pub fn descent_term(w: &QuantizerVec, z: &[f64], eps: f64) -> Result<Vec<f64>> {
    Ok(observation_h(z, w)?.into_iter().map(|h| -(eps * h)).collect())
}

/// What happened at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub t: usize,
    pub steps: Vec<Option<f64>>,
    pub samples: Vec<Option<Vec<f64>>>,
    pub descents: Vec<Option<Vec<f64>>>,
}

impl TickOutput {
    pub fn descent_refs(&self) -> Vec<Option<&[f64]>> {
        self.descents.iter().map(|s| s.as_deref()).collect()
    }
}

/// Tick-by-tick driver over a fixed schedule and sample source.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    schedule: &'a CommSchedule,
    source: &'a SampleSource,
    policy: StepPolicy,
    bounds: Option<StepBounds>,
    kappa: usize,
    dim: usize,
    history: History,
    streams: Vec<StreamHandle>,
    counts: Vec<u64>,
}

impl<'a> Simulation<'a> {
    /// `initial` holds every processor's version, flat.
    pub fn new(
        schedule: &'a CommSchedule,
        source: &'a SampleSource,
        policy: StepPolicy,
        seed: u64,
        kappa: usize,
        initial: &[f64],
    ) -> Result<Self> {
        let m = schedule.processors();
        let dim = source.dim();
        if initial.len() != m * kappa * dim {
            return Err(usage(format!("initial state has {} values, expected {}", initial.len(), m * kappa * dim)));
        }
        let history = History::new(m, kappa * dim, History::depth_for(schedule), 0, initial)?;
        Ok(Self {
            schedule,
            source,
            policy,
            bounds: None,
            kappa,
            dim,
            history,
            streams: (0..m as u64).map(|i| StreamHandle::new(seed, i)).collect(),
            counts: vec![0; m],
        })
    }

    /// Every emitted step is checked against these.
    pub fn with_bounds(mut self, bounds: StepBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn time(&self) -> usize {
        self.history.newest_time()
    }

    pub fn versions_flat(&self) -> &[f64] {
        self.history.current()
    }

    pub fn version(&self, i: usize) -> QuantizerVec {
        let len = self.kappa * self.dim;
        let flat = &self.history.current()[i * len..(i + 1) * len];
        QuantizerVec::new(self.kappa, self.dim, flat.to_vec()).expect("versions stay finite")
    }

    pub fn versions(&self) -> Vec<QuantizerVec> {
        (0..self.schedule.processors()).map(|i| self.version(i)).collect()
    }

    /// Local update counts `n^i_t`.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn streams(&self) -> &[StreamHandle] {
        &self.streams
    }

    /// Steps the next tick would use, without advancing.
    pub fn pending_steps(&self) -> Vec<Option<f64>> {
        let t = self.time();
        (0..self.schedule.processors())
            .map(|i| {
                (t < self.schedule.horizon() && self.schedule.is_active(t, i))
                    .then(|| self.policy.step(t, self.counts[i] + 1))
            })
            .collect()
    }

    pub fn tick(&mut self) -> Result<TickOutput> {
        let t = self.time();
        if t >= self.schedule.horizon() {
            return Err(usage(format!("tick {t} outside schedule horizon {}", self.schedule.horizon())));
        }
        let m = self.schedule.processors();
        let mut out = TickOutput { t, steps: vec![None; m], samples: vec![None; m], descents: vec![None; m] };
        for i in (0..m).filter(|&i| self.schedule.is_active(t, i)) {
            self.counts[i] += 1;
            let eps = self.policy.step(t, self.counts[i]);
            if let Some(b) = self.bounds {
                if !b.admits(t, eps) {
                    return Err(internal(format!(
                        "step {eps} at tick {t} leaves [K1, K2] / (t v 1) with K1 = {}, K2 = {}",
                        b.k1, b.k2
                    )));
                }
            }
            let z = self.source.draw(&mut self.streams[i])?;
            let s = descent_term(&self.version(i), &z, eps)?;
            out.steps[i] = Some(eps);
            out.samples[i] = Some(z);
            out.descents[i] = Some(s);
        }
        let next = general_step(self.schedule, &self.history, &out.descent_refs())?;
        self.history.push(&next);
        Ok(out)
    }
}

/// Fitted constants of the `phi` limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiSummary {
    pub t_ref: usize,
    pub resolved_through: Option<i64>,
    pub rho_hat: Option<f64>,
    pub a_hat: Option<f64>,
    pub eta_hat: Option<f64>,
    pub converges: bool,
}

impl PhiSummary {
    pub fn from_limits(l: &PhiLimits) -> Self {
        Self {
            t_ref: l.t_ref(),
            resolved_through: l.resolved_through(),
            rho_hat: l.rho_hat(),
            a_hat: l.a_hat(),
            eta_hat: l.eta_hat,
            converges: l.converges(),
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: RunConfig,
    /// Simulated schedule including the tail used for `phi` limits.
    pub schedule: Option<CommSchedule>,
    pub validation: Option<ValidationReport>,
    pub step_bounds: StepBounds,
    pub initial: QuantizerVec,
    pub batch: SampleBatch,
    pub final_versions: Vec<QuantizerVec>,
    pub final_w_star: Option<QuantizerVec>,
    pub metrics: Vec<MetricsRecord>,
    pub phi: Option<PhiSummary>,
    pub context: RunContext,
    pub report: ConvergenceReport,
}

impl RunArtifacts {
    pub fn assumptions_violated(&self) -> bool {
        self.context.assumptions_violated
    }
}

/// Data shared by all run kinds: distribution, reference batch, shared
/// initialization and sample source.
pub(crate) struct Setup {
    pub dist: Distribution,
    pub batch: SampleBatch,
    pub initial: QuantizerVec,
    pub source: SampleSource,
}

pub(crate) fn setup(cfg: &RunConfig) -> Result<Setup> {
    cfg.check()?;
    let dist = Distribution::new(&cfg.distribution)?;
    if dist.dim() != cfg.dim {
        return Err(config(format!("distribution has dimension {}, config says {}", dist.dim(), cfg.dim)));
    }
    let batch = make_batch_from(&dist, cfg.seed, cfg.n_ref)?;
    let initial = init_quantizer_from(&dist, cfg.seed, cfg.kappa)?;
    let source = match cfg.sampling {
        SamplingMode::ReplayFromBatch => SampleSource::Replay(batch.clone()),
        SamplingMode::FreshStream => SampleSource::Fresh(dist.clone()),
    };
    Ok(Setup { dist, batch, initial, source })
}

pub(crate) fn lloyd_reference(cfg: &RunConfig, s: &Setup) -> Result<Option<f64>> {
    if !cfg.compare_lloyd {
        return Ok(None);
    }
    Ok(Some(lloyd(&s.initial, &s.batch, LLOYD_TOL, LLOYD_MAX_ITER)?.distortion))
}

/// Ticks of schedule a run consumes: the horizon plus the `phi` tail.
pub fn schedule_ticks(cfg: &RunConfig) -> usize {
    (cfg.horizon + cfg.phi_tail).max(1)
}

/// Runs the distributed iteration with full diagnostics.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.check()?;
    let schedule = generate(&cfg.schedule, cfg.processors, schedule_ticks(cfg))?;
    run_on(cfg, schedule)
}

/// Runs on a prebuilt schedule covering at least [`schedule_ticks`] ticks,
/// whether or not it satisfies the assumptions.
pub fn run_on(cfg: &RunConfig, schedule: CommSchedule) -> Result<RunArtifacts> {
    let s = setup(cfg)?;
    let m = cfg.processors;
    let len = cfg.kappa * cfg.dim;
    let total = cfg.horizon + cfg.phi_tail;
    if schedule.processors() != m || schedule.horizon() < schedule_ticks(cfg) {
        return Err(usage(format!(
            "schedule has {} processors and {} ticks, run needs {m} and {}",
            schedule.processors(),
            schedule.horizon(),
            schedule_ticks(cfg)
        )));
    }
    let schedule = schedule.truncated(schedule_ticks(cfg));
    let validation = validate(&schedule);
    let bounds = step_bounds(&cfg.step, &schedule, cfg.horizon)?;
    let limits = if total >= 3 { Some(phi_limits_for(&schedule, total, cfg.phi_tail.max(3))?) } else { None };

    let initial_flat: Vec<f64> = (0..m).flat_map(|_| s.initial.as_slice().iter().copied()).collect();
    let mut sim = Simulation::new(&schedule, &s.source, cfg.step, cfg.seed, cfg.kappa, &initial_flat)?.with_bounds(bounds);
    let mut tracker = limits.as_ref().map(|l| AgreementTracker::new(l, &initial_flat)).transpose()?;
    let inputs = BoundInputs {
        processors: m,
        kappa: cfg.kappa,
        diameter: s.dist.diameter(),
        k2: bounds.k2,
        fit: limits.as_ref().and_then(|l| l.fit),
    };
    let mut recorder = Recorder::new(inputs, cfg.horizon, len)?;
    let phi_at = |j: usize, t: usize| limits.as_ref().and_then(|l| l.value(j, t as i64)).unwrap_or(f64::NAN);
    let w_star_q = |tr: &Option<AgreementTracker>| {
        tr.as_ref().map(|tr| QuantizerVec::new(cfg.kappa, cfg.dim, tr.value().to_vec())).transpose()
    };

    let mut sum_eps_star = 0.0;
    for t in 0..=cfg.horizon {
        let record_now = t % cfg.cadence == 0;
        let before = record_now.then(|| sim.versions());
        let w_star = if record_now { w_star_q(&tracker)? } else { None };
        if t == cfg.horizon {
            let steps = sim.pending_steps();
            let eps = (0..m).filter_map(|j| steps[j].map(|e| e * phi_at(j, t))).sum();
            recorder.record(t, &before.expect("recorded"), w_star.as_ref(), eps, &[], &s.batch)?;
            break;
        }
        let out = sim.tick()?;
        let eps: f64 = (0..m).filter_map(|j| out.steps[j].map(|e| e * phi_at(j, t))).sum();
        if let Some(versions) = &before {
            let terms: Vec<DescentTerm> = (0..m)
                .filter_map(|j| {
                    Some(DescentTerm {
                        processor: j,
                        phi: phi_at(j, t),
                        eps: out.steps[j]?,
                        version: &versions[j],
                        sample: out.samples[j].as_deref()?,
                    })
                })
                .collect();
            recorder.record(t, versions, w_star.as_ref(), eps, &terms, &s.batch)?;
        }
        recorder.add_tick_eps(eps);
        sum_eps_star += eps;
        if let (Some(tr), Some(l)) = (tracker.as_mut(), limits.as_ref()) {
            tr.advance(l, &out.descent_refs())?;
        }
    }

    let final_versions = sim.versions();
    let final_w_star = w_star_q(&tracker)?;
    let final_distortion = final_versions
        .iter()
        .map(|v| empirical_distortion(v, &s.batch))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let (metrics, dm2) = recorder.finish();
    let phi = limits.as_ref().map(PhiSummary::from_limits);
    let assumptions_violated = !(validation.consensus_assumptions_hold()
        && validation.activity.passed
        && validation.merge_descent_separated.passed)
        || s.dist.assumption_violating();
    let context = RunContext {
        processors: m,
        kappa: cfg.kappa,
        horizon: cfg.horizon,
        diameter: s.dist.diameter(),
        k1: bounds.k1,
        k2: bounds.k2,
        eta_hat: phi.and_then(|p| p.eta_hat),
        rho_hat: phi.and_then(|p| p.rho_hat),
        a_hat: phi.and_then(|p| p.a_hat),
        sum_eps_star,
        dm2,
        final_distortion,
        lloyd_distortion: lloyd_reference(cfg, &s)?,
        assumptions_violated,
    };
    let report = summarize(&metrics, &context);
    Ok(RunArtifacts {
        config: cfg.clone(),
        schedule: Some(schedule),
        validation: Some(validation),
        step_bounds: bounds,
        initial: s.initial,
        batch: s.batch,
        final_versions,
        final_w_star,
        metrics,
        phi,
        context,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agreement::{agreement_step, compute_phi_adjoint, AgreementState};
    use crate::schedule::{ActivityLaw, DelayLaw, MergeDescent, TickPlan};
    use proptest::prelude::*;

    fn box_source(seed: u64, n: usize) -> SampleSource {
        SampleSource::Replay(crate::measures::make_batch(&DistributionSpec::unit_square(), seed, n).unwrap())
    }

    fn small_config() -> RunConfig {
        RunConfig {
            processors: 3,
            kappa: 3,
            dim: 2,
            horizon: 400,
            distribution: DistributionSpec::unit_square(),
            schedule: ScheduleSpec::new(Topology::Ring).with_delay(DelayLaw::Uniform { b1: 3 }).with_seed(1),
            step: StepPolicy::new(StepMode::GlobalClock, 0.5),
            seed: 11,
            n_ref: 300,
            cadence: 10,
            sampling: SamplingMode::ReplayFromBatch,
            phi_tail: 600,
            compare_lloyd: true,
        }
    }

    #[test]
    fn descent_term_example() {
        let w = QuantizerVec::from_points(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(descent_term(&w, &[1.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn step_policy_forms() {
        let g = StepPolicy::new(StepMode::GlobalClock, 0.5);
        assert_eq!(g.step(0, 1), 0.5);
        assert_eq!(g.step(4, 1), 0.125);
        let l = StepPolicy::new(StepMode::LocalClock, 0.5).with_warmup(10);
        assert_eq!(l.step(1000, 3), 0.5);
        assert_eq!(l.step(1000, 20), 0.25);
        let mut bad = g;
        bad.k1 = Some(2.0);
        bad.k2 = Some(1.5);
        assert!(matches!(bad.check(), Err(crate::Error::Config(m)) if m.contains("Assumption 8")));
        assert!(StepPolicy::new(StepMode::GlobalClock, 1.0).check().is_err());
    }

    #[test]
    fn active_processor_takes_homothety_step() {
        let mut plan = TickPlan::identity(2);
        plan.active = vec![0];
        let schedule = CommSchedule::from_ticks(2, &[plan], None).unwrap();
        let batch = SampleBatch::new(2, vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], 2f64.sqrt()).unwrap();
        let source = SampleSource::Replay(batch);
        let mut policy = StepPolicy::new(StepMode::GlobalClock, 0.1);
        policy.warmup = 1;
        let init = [0.0, 0.0, 0.3, 0.4];
        let mut sim = Simulation::new(&schedule, &source, policy, 0, 1, &init).unwrap();
        let out = sim.tick().unwrap();
        assert_eq!(sim.versions_flat(), &[0.1, 0.0, 0.3, 0.4]);
        assert_eq!(out.steps, vec![Some(0.1), None]);
        assert_eq!(sim.streams()[1].counter, 0, "idle stream untouched");
        assert_eq!(sim.streams()[0].counter, 1);
    }

    #[test]
    fn complete_averaging_equalizes_in_one_tick() {
        let schedule = CommSchedule::from_ticks(3, &[TickPlan::averaging(3)], None).unwrap();
        let source = box_source(1, 10);
        let init = [0.0, 0.0, 0.3, 0.9, 0.6, 0.3];
        let mut sim = Simulation::new(&schedule, &source, StepPolicy::new(StepMode::GlobalClock, 0.5), 0, 1, &init).unwrap();
        sim.tick().unwrap();
        let v = sim.versions_flat();
        assert_eq!(&v[0..2], &v[2..4]);
        assert_eq!(&v[0..2], &v[4..6]);
    }

    #[test]
    fn zero_descent_matches_agreement_algorithm() {
        let spec = ScheduleSpec::new(Topology::Ring).with_delay(DelayLaw::Uniform { b1: 4 }).with_activity(ActivityLaw::Idle).with_seed(8);
        let schedule = generate(&spec, 4, 300).unwrap();
        let source = box_source(2, 50);
        let init: Vec<f64> = (0..4 * 6).map(|k| (k as f64 * 0.37).sin()).collect();
        let mut sim = Simulation::new(&schedule, &source, StepPolicy::new(StepMode::GlobalClock, 0.5), 3, 3, &init).unwrap();
        let mut agr = AgreementState::new(&schedule, 6, &init).unwrap();
        for _ in 0..300 {
            sim.tick().unwrap();
            agreement_step(&mut agr, &schedule).unwrap();
            assert_eq!(sim.versions_flat(), agr.versions());
        }
    }

    #[test]
    fn phi_reconstruction_reproduces_versions() {
        let spec = ScheduleSpec::new(Topology::Ring).with_delay(DelayLaw::Uniform { b1: 3 }).with_seed(5);
        let schedule = generate(&spec, 4, 400).unwrap();
        let source = box_source(3, 200);
        let init: Vec<f64> = (0..4).flat_map(|_| [0.2, 0.3, 0.7, 0.8]).collect();
        let mut sim = Simulation::new(&schedule, &source, StepPolicy::new(StepMode::GlobalClock, 0.5), 9, 2, &init).unwrap();
        let mut descents = Vec::new();
        for _ in 0..400 {
            descents.push(sim.tick().unwrap().descents);
        }
        let table = compute_phi_adjoint(&schedule, 400, -1).unwrap();
        for i in 0..4 {
            let mut rec = vec![0.0; 4];
            for j in 0..4 {
                let p = table.get(i, j, -1).unwrap();
                rec.iter_mut().zip(&init[j * 4..(j + 1) * 4]).for_each(|(r, &x)| *r += p * x);
            }
            for (tau, tick) in descents.iter().enumerate() {
                for (j, s) in tick.iter().enumerate() {
                    if let Some(s) = s {
                        let p = table.get(i, j, tau as i64).unwrap();
                        rec.iter_mut().zip(s).for_each(|(r, &x)| *r += p * x);
                    }
                }
            }
            for (a, b) in rec.iter().zip(&sim.versions_flat()[i * 4..(i + 1) * 4]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn run_is_deterministic_and_complete() {
        let cfg = small_config();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.metrics.len(), 41);
        assert_eq!(a.metrics.iter().map(|r| r.t).collect::<Vec<_>>(), (0..=400).step_by(10).collect::<Vec<_>>());
        let bits = |r: &RunArtifacts| r.metrics.iter().map(|m| format!("{m:?}")).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(!a.assumptions_violated());
        let phi = a.phi.unwrap();
        assert!(phi.converges);
        assert_eq!(a.report.triangle_violations, 0);
        assert!(a.metrics.iter().all(|r| r.consensus_gap.is_finite() && r.agreement_gap.is_finite()));
    }

    #[test]
    fn horizon_zero_records_initial_state_only() {
        let mut cfg = small_config();
        cfg.horizon = 0;
        let a = run(&cfg).unwrap();
        assert_eq!(a.metrics.len(), 1);
        assert_eq!(a.metrics[0].t, 0);
        assert_eq!(a.final_versions[0], a.initial);
    }

    #[test]
    fn cadence_must_divide_horizon() {
        let mut cfg = small_config();
        cfg.cadence = 7;
        assert!(matches!(run(&cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn impossible_alpha_rejected() {
        let mut cfg = small_config();
        cfg.schedule.topology = Topology::Complete;
        cfg.schedule.declared = Some(crate::schedule::DeclaredConstants { alpha: 0.5, b1: 3, b2: None, b3: None });
        assert!(matches!(cfg.check(), Err(crate::Error::Config(m)) if m.contains("alpha")));
    }

    #[test]
    fn declared_k_outside_derived_range_rejected() {
        let mut cfg = small_config();
        cfg.step.k2 = Some(1.0);
        cfg.step.warmup = 10;
        cfg.step.mode = StepMode::LocalClock;
        assert!(matches!(run(&cfg), Err(crate::Error::Config(m)) if m.contains("Assumption 8")));
    }

    #[test]
    fn combined_mode_is_flagged() {
        let mut cfg = small_config();
        cfg.schedule.merge_descent = MergeDescent::Combined;
        cfg.schedule.activity = ActivityLaw::AllActive;
        cfg.schedule.topology = Topology::Complete;
        let a = run(&cfg).unwrap();
        assert!(a.assumptions_violated());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// In one dimension the convex hull is an interval, so containment is
        /// checked exactly against the initial components and consumed samples.
        #[test]
        fn versions_stay_in_hull(seed in 0u64..1000, m in 1usize..5, kappa in 1usize..4) {
            // with one processor always descending, a separated gossip pair needs M >= 3
            let topology = if m >= 3 { Topology::RandomSymmetricGossip } else { Topology::Ring };
            let spec = ScheduleSpec::new(topology)
                .with_delay(DelayLaw::Uniform { b1: 3 })
                .with_activity(ActivityLaw::RandomSubset { p: 0.5 })
                .with_seed(seed);
            let schedule = generate(&spec, m, 150).unwrap();
            let dist = DistributionSpec::uniform_box(vec![-1.0], vec![2.0]);
            let source = SampleSource::Fresh(Distribution::new(&dist).unwrap());
            let init: Vec<f64> = (0..m * kappa).map(|k| ((k as f64 + seed as f64) * 0.61).sin()).collect();
            let (mut lo, mut hi) = init.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let mut sim = Simulation::new(&schedule, &source, StepPolicy::new(StepMode::LocalClock, 0.7), seed, kappa, &init).unwrap();
            for _ in 0..150 {
                let out = sim.tick().unwrap();
                for z in out.samples.iter().flatten() {
                    lo = lo.min(z[0]);
                    hi = hi.max(z[0]);
                }
                for &x in sim.versions_flat() {
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn descent_norm_bounded_by_step_times_diameter(seed in 0u64..500, eps in 0.0f64..1.0) {
            let spec = DistributionSpec::unit_square();
            let d = Distribution::new(&spec).unwrap();
            let w = init_quantizer_from(&d, seed, 4).unwrap();
            let z = d.sample(&mut StreamHandle::new(seed, 0)).unwrap();
            let s = descent_term(&w, &z, eps).unwrap();
            for c in s.chunks(2) {
                prop_assert!(crate::geometry::norm(c) <= eps * d.diameter() + 1e-15);
            }
        }

        #[test]
        fn emitted_steps_respect_derived_constants(seed in 0u64..200, warmup in 1u64..50) {
            let spec = ScheduleSpec::new(Topology::Ring).with_activity(ActivityLaw::RandomSubset { p: 0.4 }).with_seed(seed);
            let schedule = generate(&spec, 3, 500).unwrap();
            let policy = StepPolicy::new(StepMode::LocalClock, 0.5).with_warmup(warmup);
            let bounds = step_bounds(&policy, &schedule, 500).unwrap();
            prop_assert!(bounds.k1 > 0.0 && bounds.k2 >= 1.0 && bounds.k1 <= bounds.k2);
            let source = box_source(seed, 20);
            let init = vec![0.5; 3 * 2];
            let mut sim = Simulation::new(&schedule, &source, policy, seed, 1, &init).unwrap().with_bounds(bounds);
            for _ in 0..500 {
                sim.tick().unwrap();
            }
        }
    }
}
