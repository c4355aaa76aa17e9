//! Communication schedules for the asynchronous model: per-tick combining
//! coefficients `a^{i,j}(t)`, delays `t - tau^{i,j}(t)`, the set of processors
//! taking a descent step, and a validator for the delay, threshold,
//! connectivity, communication-interval, symmetry and activity assumptions.
//!
//! Edges follow the receiver convention: `(j -> i)` belongs to `E(t)` iff
//! `a^{i,j}(t) > 0`, i.e. processor `i` reads the version of `j`.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Complete,
    /// Directed ring: processor `i` reads its predecessor `i - 1`.
    Ring,
    /// One random symmetric pair exchange per merge tick.
    RandomSymmetricGossip,
    /// Loaded from a JSON-lines trace.
    CustomTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DelayLaw {
    #[default]
    Zero,
    Fixed {
        k: u32,
    },
    /// Independent draws from `0..b1` per edge and tick.
    Uniform {
        b1: u32,
    },
}

impl DelayLaw {
    fn nominal_b1(&self) -> u32 {
        match *self {
            Self::Zero => 1,
            Self::Fixed { k } => k + 1,
            Self::Uniform { b1 } => b1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ActivityLaw {
    AllActive,
    /// Processor `t mod M` descends at tick `t`.
    #[default]
    RoundRobin,
    /// Each processor descends with probability `p`; one is forced when the
    /// draw comes out empty.
    RandomSubset {
        p: f64,
    },
    /// Nobody descends: the pure agreement algorithm. Violates the activity
    /// assumption by construction.
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MergeDescent {
    /// A processor taking a descent step keeps an identity row that tick.
    #[default]
    Separated,
    /// Descent and merging may happen on the same tick.
    Combined,
}

/// Constants a schedule claims to satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredConstants {
    pub alpha: f64,
    pub b1: u32,
    #[serde(default)]
    pub b2: Option<usize>,
    #[serde(default)]
    pub b3: Option<usize>,
}

fn default_period() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub topology: Topology,
    /// Merges happen on ticks that are multiples of the period.
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default)]
    pub delay: DelayLaw,
    #[serde(default)]
    pub activity: ActivityLaw,
    #[serde(default)]
    pub merge_descent: MergeDescent,
    #[serde(default)]
    pub seed: u64,
    /// Required for `custom-trace`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Overrides the constants inferred from the generated schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared: Option<DeclaredConstants>,
}

impl ScheduleSpec {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            period: 1,
            delay: DelayLaw::Zero,
            activity: ActivityLaw::RoundRobin,
            merge_descent: MergeDescent::Separated,
            seed: 0,
            trace: None,
            declared: None,
        }
    }

    pub fn with_delay(mut self, delay: DelayLaw) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_activity(mut self, activity: ActivityLaw) -> Self {
        self.activity = activity;
        self
    }

    pub fn with_merge_descent(mut self, mode: MergeDescent) -> Self {
        self.merge_descent = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_period(mut self, period: usize) -> Self {
        self.period = period;
        self
    }

    /// Parameter consistency that does not need the processor count.
    pub fn check(&self) -> Result<()> {
        if self.period == 0 {
            return Err(config("schedule period must be at least 1"));
        }
        match self.delay {
            DelayLaw::Uniform { b1: 0 } => return Err(config("uniform delay law needs b1 >= 1")),
            DelayLaw::Fixed { k } if k == u32::MAX => return Err(config("fixed delay too large")),
            _ => {}
        }
        if let ActivityLaw::RandomSubset { p } = self.activity {
            if !(0.0..=1.0).contains(&p) {
                return Err(config(format!("activity probability must lie in [0, 1], got {p}")));
            }
        }
        if self.topology == Topology::CustomTrace && self.trace.is_none() {
            return Err(config("custom-trace topology needs a `trace` path"));
        }
        if let Some(d) = self.declared {
            if !(d.alpha > 0.0 && d.alpha <= 1.0) {
                return Err(config("declared alpha must lie in (0, 1]"));
            }
            if d.b1 == 0 {
                return Err(config("declared B1 must be positive"));
            }
        }
        Ok(())
    }
}

/// One tick of a schedule in dense form.
#[derive(Debug, Clone, PartialEq)]
pub struct TickPlan {
    /// Row-major `M x M` combining coefficients.
    pub coeff: Vec<f64>,
    /// Row-major `M x M` delays `t - tau^{i,j}(t)`.
    pub delay: Vec<u32>,
    /// Processors taking a descent step at this tick.
    pub active: Vec<usize>,
}

impl TickPlan {
    pub fn identity(m: usize) -> Self {
        let mut coeff = vec![0.0; m * m];
        (0..m).for_each(|i| coeff[i * m + i] = 1.0);
        Self { coeff, delay: vec![0; m * m], active: Vec::new() }
    }

    pub fn averaging(m: usize) -> Self {
        Self { coeff: vec![1.0 / m as f64; m * m], delay: vec![0; m * m], active: Vec::new() }
    }
}

/// Directed edge `from -> to`: `to` combines the version of `from`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

/// An immutable, fully materialized communication schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct CommSchedule {
    m: usize,
    horizon: usize,
    coeff: Vec<f64>,
    delay: Vec<u32>,
    active: Vec<bool>,
    constants: DeclaredConstants,
}

impl CommSchedule {
    /// Builds a schedule from explicit ticks. Constants not supplied are
    /// measured from the ticks themselves.
    pub fn from_ticks(m: usize, ticks: &[TickPlan], declared: Option<DeclaredConstants>) -> Result<Self> {
        if m == 0 {
            return Err(usage("schedule needs at least one processor"));
        }
        let horizon = ticks.len();
        let mut coeff = Vec::with_capacity(horizon * m * m);
        let mut delay = Vec::with_capacity(horizon * m * m);
        let mut active = vec![false; horizon * m];
        for (t, tick) in ticks.iter().enumerate() {
            if tick.coeff.len() != m * m || tick.delay.len() != m * m {
                return Err(usage(format!("tick {t}: coefficient and delay matrices must be {m}x{m}")));
            }
            if tick.coeff.iter().any(|a| !a.is_finite()) {
                return Err(usage(format!("tick {t}: non-finite coefficient")));
            }
            coeff.extend_from_slice(&tick.coeff);
            delay.extend_from_slice(&tick.delay);
            for &i in &tick.active {
                if i >= m {
                    return Err(usage(format!("tick {t}: active processor {i} out of range")));
                }
                active[t * m + i] = true;
            }
        }
        let placeholder = DeclaredConstants { alpha: 1.0, b1: 1, b2: None, b3: None };
        let mut s = Self { m, horizon, coeff, delay, active, constants: placeholder };
        s.constants = declared.unwrap_or_else(|| s.measure_constants());
        Ok(s)
    }

    pub fn processors(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn constants(&self) -> DeclaredConstants {
        self.constants
    }

    pub fn with_constants(mut self, constants: DeclaredConstants) -> Self {
        self.constants = constants;
        self
    }

    #[inline]
    pub fn coeff(&self, t: usize, i: usize, j: usize) -> f64 {
        self.coeff[(t * self.m + i) * self.m + j]
    }

    #[inline]
    pub fn coeff_row(&self, t: usize, i: usize) -> &[f64] {
        let base = (t * self.m + i) * self.m;
        &self.coeff[base..base + self.m]
    }

    #[inline]
    pub fn delay(&self, t: usize, i: usize, j: usize) -> u32 {
        self.delay[(t * self.m + i) * self.m + j]
    }

    #[inline]
    pub fn delay_row(&self, t: usize, i: usize) -> &[u32] {
        let base = (t * self.m + i) * self.m;
        &self.delay[base..base + self.m]
    }

    #[inline]
    pub fn is_active(&self, t: usize, i: usize) -> bool {
        self.active[t * self.m + i]
    }

    pub fn active_set(&self, t: usize) -> Vec<usize> {
        (0..self.m).filter(|&i| self.is_active(t, i)).collect()
    }

    pub fn max_delay(&self) -> u32 {
        self.delay.iter().copied().max().unwrap_or(0)
    }

    pub fn tick(&self, t: usize) -> TickPlan {
        let base = t * self.m * self.m;
        TickPlan {
            coeff: self.coeff[base..base + self.m * self.m].to_vec(),
            delay: self.delay[base..base + self.m * self.m].to_vec(),
            active: self.active_set(t),
        }
    }

    /// Same schedule with nobody descending from tick `t0` on; merges continue.
    pub fn with_descent_frozen_after(&self, t0: usize) -> Self {
        let mut s = self.clone();
        for t in t0..s.horizon {
            for i in 0..s.m {
                s.active[t * s.m + i] = false;
            }
        }
        s
    }

    /// Prefix of the first `horizon` ticks.
    pub fn truncated(&self, horizon: usize) -> Self {
        let h = horizon.min(self.horizon);
        let mm = self.m * self.m;
        Self {
            m: self.m,
            horizon: h,
            coeff: self.coeff[..h * mm].to_vec(),
            delay: self.delay[..h * mm].to_vec(),
            active: self.active[..h * self.m].to_vec(),
            constants: self.constants,
        }
    }

    /// Edge set `E(t)`.
    pub fn communication_graph(&self, t: usize) -> Result<Vec<Edge>> {
        if t >= self.horizon {
            return Err(usage(format!("tick {t} outside schedule horizon {}", self.horizon)));
        }
        Ok(self.edges_at(t).collect())
    }

    fn edges_at(&self, t: usize) -> impl Iterator<Item = Edge> + '_ {
        (0..self.m).flat_map(move |i| {
            (0..self.m).filter(move |&j| self.coeff(t, i, j) > 0.0).map(move |j| Edge { from: j, to: i })
        })
    }

    /// Tightest constants this schedule satisfies.
    pub fn measure_constants(&self) -> DeclaredConstants {
        let alpha = self.coeff.iter().copied().filter(|a| *a > 0.0).fold(1.0, f64::min);
        let b1 = self.max_delay() + 1;
        let b2 = match (self.min_connectivity_window(), self.min_pair_interval()) {
            (Some(a), b) => Some(a.max(b)),
            (None, _) => None,
        };
        DeclaredConstants { alpha, b1, b2, b3: self.min_symmetry_window() }
    }

    /// `adjacency[to * m + from]` edge counts over a tick window.
    fn add_tick(&self, counts: &mut [u32], t: usize, sign: i32) {
        for i in 0..self.m {
            for j in 0..self.m {
                if self.coeff(t, i, j) > 0.0 {
                    let c = &mut counts[i * self.m + j];
                    *c = (*c as i32 + sign) as u32;
                }
            }
        }
    }

    fn strongly_connected(&self, counts: &[u32]) -> bool {
        let m = self.m;
        let reach = |forward: bool| {
            let mut seen = vec![false; m];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(u) = queue.pop_front() {
                for v in 0..m {
                    let edge = if forward { counts[v * m + u] } else { counts[u * m + v] };
                    if edge > 0 && !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }

    /// For each start `t`, the shortest window length whose edge union is
    /// strongly connected; `None` once the rest of the horizon is not.
    fn connectivity_lengths(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.horizon);
        let mut counts = vec![0u32; self.m * self.m];
        let mut end = 0;
        for t in 0..self.horizon {
            if end < t {
                end = t;
            }
            while end < self.horizon && !(end > t && self.strongly_connected(&counts)) {
                self.add_tick(&mut counts, end, 1);
                end += 1;
            }
            if end > t && self.strongly_connected(&counts) {
                out.push(Some(end - t));
            } else {
                out.push(None);
                break;
            }
            self.add_tick(&mut counts, t, -1);
        }
        out.resize(self.horizon, None);
        out
    }

    fn min_connectivity_window(&self) -> Option<usize> {
        let lengths = self.connectivity_lengths();
        let mut prefix_max = Vec::with_capacity(self.horizon);
        let mut acc = Some(0usize);
        for l in &lengths {
            acc = match (acc, l) {
                (Some(a), Some(b)) => Some(a.max(*b)),
                _ => None,
            };
            prefix_max.push(acc);
        }
        (1..=self.horizon).find(|&w| matches!(prefix_max[self.horizon - w], Some(p) if p <= w))
    }

    fn occurrences(&self) -> Vec<Vec<usize>> {
        let m = self.m;
        let mut occ = vec![Vec::new(); m * m];
        for t in 0..self.horizon {
            for i in 0..m {
                for j in 0..m {
                    if i != j && self.coeff(t, i, j) > 0.0 {
                        occ[i * m + j].push(t);
                    }
                }
            }
        }
        occ
    }

    /// Smallest B2 such that every recurrent pair shows up in each window of
    /// B2 consecutive ticks.
    fn min_pair_interval(&self) -> usize {
        self.occurrences()
            .iter()
            .filter(|o| o.len() >= 2)
            .map(|o| {
                let gaps = o.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
                (o[0] + 1).max(gaps).max(self.horizon - o[o.len() - 1])
            })
            .max()
            .unwrap_or(1)
    }

    fn min_symmetry_window(&self) -> Option<usize> {
        let m = self.m;
        let occ = self.occurrences();
        let mut worst = 1;
        for i in 0..m {
            for j in 0..m {
                let fwd = &occ[i * m + j];
                let rev = &occ[j * m + i];
                for &t in fwd {
                    let gap = nearest_gap(rev, t)?;
                    worst = worst.max(gap + 1);
                }
            }
        }
        Some(worst)
    }
}

fn nearest_gap(sorted: &[usize], t: usize) -> Option<usize> {
    let pos = sorted.partition_point(|&x| x < t);
    let after = sorted.get(pos).map(|&x| x - t);
    let before = pos.checked_sub(1).map(|p| t - sorted[p]);
    match (after, before) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Outcome of one assumption check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub passed: bool,
    /// First tick where the assumption fails.
    pub witness_tick: Option<usize>,
    pub detail: Option<String>,
}

impl Check {
    fn pass() -> Self {
        Self { passed: true, witness_tick: None, detail: None }
    }

    fn fail(t: Option<usize>, detail: impl Into<String>) -> Self {
        Self { passed: false, witness_tick: t, detail: Some(detail.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub constants: DeclaredConstants,
    /// Assumption 3: bounded communication delays.
    pub bounded_delays: Check,
    /// Assumption 4: convex combinations with threshold alpha.
    pub convex_threshold: Check,
    /// Assumption 5: windowed strong connectivity (finite-horizon surrogate).
    pub connectivity: Check,
    /// Window used for the connectivity check.
    pub connectivity_window: usize,
    /// Assumption 6: bounded communication intervals.
    pub bounded_intervals: Check,
    /// Assumption 7: symmetry.
    pub symmetry: Check,
    /// Assumption 9: someone descends at every tick.
    pub activity: Check,
    /// Descent ticks use identity rows (keeps versions in the support hull).
    pub merge_descent_separated: Check,
    /// Ordered pairs `(from, to)` that never communicate.
    pub never_communicating: Vec<Edge>,
    pub asy1: bool,
    pub asy2: bool,
}

impl ValidationReport {
    /// Either assumption bundle holds.
    pub fn consensus_assumptions_hold(&self) -> bool {
        self.asy1 || self.asy2
    }

    pub fn failed(&self) -> Vec<&'static str> {
        [
            ("bounded-delays", &self.bounded_delays),
            ("convex-threshold", &self.convex_threshold),
            ("connectivity", &self.connectivity),
            ("bounded-intervals", &self.bounded_intervals),
            ("symmetry", &self.symmetry),
            ("activity", &self.activity),
            ("merge-descent-separation", &self.merge_descent_separated),
        ]
        .into_iter()
        .filter(|(_, c)| !c.passed)
        .map(|(n, _)| n)
        .collect()
    }
}

/// Checks the schedule against its declared constants.
pub fn validate(s: &CommSchedule) -> ValidationReport {
    let k = s.constants;
    let m = s.m;

    let mut bounded_delays = Check::pass();
    'a3: for t in 0..s.horizon {
        for i in 0..m {
            for j in 0..m {
                let (a, d) = (s.coeff(t, i, j), s.delay(t, i, j));
                let problem = if a == 0.0 && d != 0 {
                    Some(format!("a[{i}][{j}] = 0 but delay {d} != 0"))
                } else if i == j && d != 0 {
                    Some(format!("self delay {d} for processor {i}"))
                } else if d >= k.b1 {
                    Some(format!("delay {d} on ({i},{j}) violates t - B1 < tau with B1 = {}", k.b1))
                } else if d as usize > t {
                    Some(format!("delay {d} on ({i},{j}) reaches before tick 0"))
                } else {
                    None
                };
                if let Some(p) = problem {
                    bounded_delays = Check::fail(Some(t), p);
                    break 'a3;
                }
            }
        }
    }

    let mut convex_threshold = Check::pass();
    let alpha_floor = k.alpha * (1.0 - 1e-12);
    'a4: for t in 0..s.horizon {
        for i in 0..m {
            let row = s.coeff_row(t, i);
            let sum: f64 = row.iter().sum();
            let problem = if row[i] < alpha_floor {
                Some(format!("a[{i}][{i}] = {} below alpha = {}", row[i], k.alpha))
            } else if let Some(j) = row.iter().position(|&a| a != 0.0 && (a < alpha_floor || a > 1.0)) {
                Some(format!("a[{i}][{j}] = {} outside {{0}} U [alpha, 1]", row[j]))
            } else if (sum - 1.0).abs() > ROW_SUM_TOL {
                Some(format!("row {i} sums to {sum}"))
            } else {
                None
            };
            if let Some(p) = problem {
                convex_threshold = Check::fail(Some(t), p);
                break 'a4;
            }
        }
    }

    let window = k.b2.unwrap_or(s.horizon).clamp(1, s.horizon.max(1));
    let mut connectivity = Check::pass();
    if s.horizon > 0 {
        let mut counts = vec![0u32; m * m];
        for t in 0..window {
            s.add_tick(&mut counts, t, 1);
        }
        for t in 0..=(s.horizon - window) {
            if t > 0 {
                s.add_tick(&mut counts, t - 1, -1);
                s.add_tick(&mut counts, t + window - 1, 1);
            }
            if !s.strongly_connected(&counts) {
                connectivity = Check::fail(Some(t), format!("edge union over [{t}, {}) not strongly connected", t + window));
                break;
            }
        }
    }

    let occ = s.occurrences();
    let mut never_communicating = Vec::new();
    let mut bounded_intervals = Check::pass();
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let o = &occ[i * m + j];
            if o.is_empty() {
                never_communicating.push(Edge { from: j, to: i });
                continue;
            }
            if o.len() < 2 || !bounded_intervals.passed {
                continue;
            }
            let Some(b2) = k.b2 else {
                bounded_intervals = Check::fail(None, "B2 not declared");
                continue;
            };
            if b2 > s.horizon {
                continue;
            }
            // empty stretch [last_end, t) of length >= b2 holds a whole window
            let mut last_end = 0usize;
            for &t in o.iter().chain(std::iter::once(&s.horizon)) {
                if t >= last_end + b2 {
                    bounded_intervals = Check::fail(
                        Some(last_end),
                        format!("edge ({j} -> {i}) absent from [{last_end}, {})", last_end + b2),
                    );
                    break;
                }
                last_end = t + 1;
            }
        }
    }

    let mut symmetry = Check::pass();
    match k.b3 {
        None => symmetry = Check::fail(None, "B3 not declared"),
        Some(b3) => {
            'a7: for i in 0..m {
                for j in 0..m {
                    for &t in &occ[i * m + j] {
                        let ok = nearest_gap(&occ[j * m + i], t).is_some_and(|g| g < b3);
                        if !ok {
                            symmetry = Check::fail(Some(t), format!("edge ({j} -> {i}) has no reverse within B3 = {b3}"));
                            break 'a7;
                        }
                    }
                }
            }
        }
    }

    let activity = match (0..s.horizon).find(|&t| !(0..m).any(|i| s.is_active(t, i))) {
        Some(t) => Check::fail(Some(t), "no processor descends"),
        None => Check::pass(),
    };

    let mut merge_descent_separated = Check::pass();
    'sep: for t in 0..s.horizon {
        for i in (0..m).filter(|&i| s.is_active(t, i)) {
            let row = s.coeff_row(t, i);
            let identity = row.iter().enumerate().all(|(j, &a)| if j == i { a == 1.0 } else { a == 0.0 });
            if !identity || s.delay(t, i, i) != 0 {
                merge_descent_separated = Check::fail(Some(t), format!("processor {i} merges while descending"));
                break 'sep;
            }
        }
    }

    let base = bounded_delays.passed && convex_threshold.passed && connectivity.passed;
    ValidationReport {
        constants: k,
        asy1: base && bounded_intervals.passed,
        asy2: base && symmetry.passed,
        bounded_delays,
        convex_threshold,
        connectivity,
        connectivity_window: window,
        bounded_intervals,
        symmetry,
        activity,
        merge_descent_separated,
        never_communicating,
    }
}

fn neighborhood(topology: Topology, m: usize, i: usize, pair: Option<(usize, usize)>) -> Vec<usize> {
    match topology {
        Topology::Complete => (0..m).collect(),
        Topology::Ring if m > 1 => {
            let mut n = vec![i, (i + m - 1) % m];
            n.sort_unstable();
            n
        }
        Topology::RandomSymmetricGossip => match pair {
            Some((a, b)) if a == i => vec![a.min(b), a.max(b)],
            Some((a, b)) if b == i => vec![a.min(b), a.max(b)],
            _ => vec![i],
        },
        _ => vec![i],
    }
}

/// Materializes `horizon` ticks of a schedule family for `m` processors.
/// Constants are those declared in the `ScheduleSpec`, else the tightest ones the
/// generated ticks satisfy (with B1 and alpha taken from the delay law and
/// the uniform-weight rule). Fails when the result violates bounded delays,
/// the convex threshold or connectivity.
pub fn generate(spec: &ScheduleSpec, m: usize, horizon: usize) -> Result<CommSchedule> {
    let s = generate_unchecked(spec, m, horizon)?;
    if spec.topology == Topology::CustomTrace {
        return Ok(s);
    }
    let report = validate(&s);
    for (name, check) in [
        ("bounded delays", &report.bounded_delays),
        ("convex threshold", &report.convex_threshold),
        ("connectivity", &report.connectivity),
    ] {
        if !check.passed {
            return Err(config(format!(
                "infeasible schedule ({name}): {}",
                check.detail.clone().unwrap_or_default()
            )));
        }
    }
    Ok(s)
}

/// As [`generate`] without the feasibility check.
pub fn generate_unchecked(spec: &ScheduleSpec, m: usize, horizon: usize) -> Result<CommSchedule> {
    spec.check()?;
    if m == 0 || horizon == 0 {
        return Err(config("schedule needs M >= 1 and T >= 1"));
    }
    if spec.topology == Topology::CustomTrace {
        let path = spec.trace.as_ref().expect("checked");
        let file = std::fs::File::open(path)
            .map_err(|e| config(format!("cannot open schedule trace {}: {e}", path.display())))?;
        let s = read_trace(std::io::BufReader::new(file), spec.declared)?;
        if s.processors() != m {
            return Err(config(format!("trace has {} processors, config asks for {m}", s.processors())));
        }
        if s.horizon() < horizon {
            return Err(config(format!("trace covers {} ticks, need {horizon}", s.horizon())));
        }
        return Ok(s.truncated(horizon));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let b1 = spec.delay.nominal_b1();
    let mut ticks = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let active: Vec<usize> = match spec.activity {
            ActivityLaw::AllActive => (0..m).collect(),
            ActivityLaw::RoundRobin => vec![t % m],
            ActivityLaw::RandomSubset { p } => {
                let mut a: Vec<usize> = (0..m).filter(|_| rng.random::<f64>() < p).collect();
                if a.is_empty() {
                    a.push(rng.random_range(0..m));
                }
                a
            }
            ActivityLaw::Idle => Vec::new(),
        };
        let merging =
            |i: usize| !(spec.merge_descent == MergeDescent::Separated && active.contains(&i));
        let merge_tick = t % spec.period == 0;
        let pair = if merge_tick && spec.topology == Topology::RandomSymmetricGossip {
            let candidates: Vec<usize> = (0..m).filter(|&i| merging(i)).collect();
            if candidates.len() >= 2 {
                let a = rng.random_range(0..candidates.len());
                let mut b = rng.random_range(0..candidates.len() - 1);
                if b >= a {
                    b += 1;
                }
                Some((candidates[a], candidates[b]))
            } else {
                None
            }
        } else {
            None
        };

        let mut tick = TickPlan::identity(m);
        tick.active = active.clone();
        for i in (0..m).filter(|&i| merge_tick && merging(i)) {
            let hood = neighborhood(spec.topology, m, i, pair);
            let w = 1.0 / hood.len() as f64;
            tick.coeff[i * m + i] = 0.0;
            for &j in &hood {
                tick.coeff[i * m + j] = w;
                if j != i {
                    let d = match spec.delay {
                        DelayLaw::Zero => 0,
                        DelayLaw::Fixed { k } => k,
                        DelayLaw::Uniform { b1 } => rng.random_range(0..b1),
                    };
                    tick.delay[i * m + j] = d.min(t as u32);
                }
            }
        }
        ticks.push(tick);
    }

    let s = CommSchedule::from_ticks(m, &ticks, spec.declared)?;
    Ok(if spec.declared.is_none() {
        let measured = s.measure_constants();
        let constants = DeclaredConstants { alpha: 1.0 / m as f64, b1: b1.max(1), ..measured };
        s.with_constants(constants)
    } else {
        s
    })
}

/// One line of a schedule trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub t: usize,
    pub coeff: Vec<Vec<f64>>,
    pub delay: Vec<Vec<u32>>,
    pub active: Vec<usize>,
}

pub fn write_trace<W: Write>(s: &CommSchedule, mut out: W) -> Result<()> {
    for t in 0..s.horizon {
        let rec = TraceRecord {
            t,
            coeff: (0..s.m).map(|i| s.coeff_row(t, i).to_vec()).collect(),
            delay: (0..s.m).map(|i| s.delay_row(t, i).to_vec()).collect(),
            active: s.active_set(t),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R, declared: Option<DeclaredConstants>) -> Result<CommSchedule> {
    let mut ticks = Vec::new();
    let mut m = None;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| config(format!("schedule trace line {}: {e}", lineno + 1)))?;
        if rec.t != ticks.len() {
            return Err(config(format!("schedule trace line {}: expected t = {}, got {}", lineno + 1, ticks.len(), rec.t)));
        }
        let size = *m.get_or_insert(rec.coeff.len());
        let square = rec.coeff.len() == size
            && rec.delay.len() == size
            && rec.coeff.iter().all(|r| r.len() == size)
            && rec.delay.iter().all(|r| r.len() == size);
        if !square {
            return Err(config(format!("schedule trace line {}: matrices must be {size}x{size}", lineno + 1)));
        }
        ticks.push(TickPlan { coeff: rec.coeff.concat(), delay: rec.delay.concat(), active: rec.active });
    }
    let m = m.ok_or_else(|| config("empty schedule trace"))?;
    CommSchedule::from_ticks(m, &ticks, declared).map_err(|e| config(e.to_string()))
}
