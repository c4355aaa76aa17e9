//! Agreement iterations, the impulse-response coefficients `phi^{i,j}(t, tau)`
//! and the agreement vector.
//!
//! Versions of all processors are stored flat: processor `i` owns
//! `state[i * len..(i + 1) * len]`.

use serde::{Deserialize, Serialize};

use crate::error::{internal, usage, Result};
use crate::schedule::CommSchedule;

/// Residuals at or below this level are treated as rounding noise.
pub const RESIDUAL_FLOOR: f64 = 1e-14;
/// A limit `phi^j(tau)` counts as resolved once the spread over receivers
/// drops below this.
pub const LIMIT_TOL: f64 = 1e-9;

/// Past versions of every processor, `depth` ticks deep.
///
/// Slots never written read as zero, which is what the impulse-response runs
/// need; the engine never reads before tick 0 because delays are at most `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    m: usize,
    len: usize,
    depth: usize,
    newest: usize,
    buf: Vec<f64>,
}

impl History {
    /// History whose newest entry, at time `start`, is `initial`.
    pub fn new(m: usize, len: usize, depth: usize, start: usize, initial: &[f64]) -> Result<Self> {
        if depth == 0 {
            return Err(usage("history depth must be positive"));
        }
        if initial.len() != m * len {
            return Err(usage(format!("initial state has {} values, expected {}", initial.len(), m * len)));
        }
        let mut h = Self { m, len, depth, newest: start, buf: vec![0.0; depth * m * len] };
        h.slot_mut(start).copy_from_slice(initial);
        Ok(h)
    }

    /// Depth needed to serve every delay in `schedule`.
    pub fn depth_for(schedule: &CommSchedule) -> usize {
        (schedule.max_delay() as usize + 1).max(schedule.constants().b1 as usize)
    }

    pub fn processors(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn newest_time(&self) -> usize {
        self.newest
    }

    fn slot_range(&self, time: usize) -> std::ops::Range<usize> {
        let base = (time % self.depth) * self.m * self.len;
        base..base + self.m * self.len
    }

    fn slot_mut(&mut self, time: usize) -> &mut [f64] {
        let r = self.slot_range(time);
        &mut self.buf[r]
    }

    /// All versions at the newest time.
    pub fn current(&self) -> &[f64] {
        &self.buf[self.slot_range(self.newest)]
    }

    /// Version of processor `j` at `time`.
    pub fn version(&self, time: usize, j: usize) -> Result<&[f64]> {
        if time > self.newest || self.newest - time >= self.depth {
            return Err(internal(format!(
                "history holds times ({}, {}] but time {time} was requested",
                self.newest as i64 - self.depth as i64,
                self.newest
            )));
        }
        let base = self.slot_range(time).start + j * self.len;
        Ok(&self.buf[base..base + self.len])
    }

    /// Appends the versions for time `newest + 1`.
    pub fn push(&mut self, next: &[f64]) {
        assert_eq!(next.len(), self.m * self.len);
        self.newest += 1;
        let t = self.newest;
        self.slot_mut(t).copy_from_slice(next);
    }
}

/// `out = sum_j a^{i,j}(t) w^j(t - d^{i,j}(t))`, summed in increasing `j`
/// over nonzero coefficients. The first term initializes `out`, so an
/// identity row copies the version exactly.
pub fn combine_row(schedule: &CommSchedule, history: &History, t: usize, i: usize, out: &mut [f64]) -> Result<()> {
    let row = schedule.coeff_row(t, i);
    let delays = schedule.delay_row(t, i);
    let mut first = true;
    for (j, (&a, &d)) in row.iter().zip(delays).enumerate() {
        if a == 0.0 {
            continue;
        }
        let time = t.checked_sub(d as usize).ok_or_else(|| internal(format!("delay {d} exceeds tick {t}")))?;
        let v = history.version(time, j)?;
        if first {
            out.iter_mut().zip(v).for_each(|(o, &x)| *o = a * x);
            first = false;
        } else {
            out.iter_mut().zip(v).for_each(|(o, &x)| *o += a * x);
        }
    }
    if first {
        return Err(internal(format!("row {i} at tick {t} has no positive coefficient")));
    }
    Ok(())
}

/// One tick of the general iterations: combination of delayed versions plus
/// the optional per-processor descent terms. `descent` is either empty or
/// holds one entry per processor.
pub fn general_step(
    schedule: &CommSchedule,
    history: &History,
    descent: &[Option<&[f64]>],
) -> Result<Vec<f64>> {
    let (m, len, t) = (history.m, history.len, history.newest);
    if schedule.processors() != m {
        return Err(usage(format!("schedule has {} processors, state has {m}", schedule.processors())));
    }
    if t >= schedule.horizon() {
        return Err(usage(format!("tick {t} outside schedule horizon {}", schedule.horizon())));
    }
    let mut next = vec![0.0; m * len];
    for (i, out) in next.chunks_exact_mut(len.max(1)).enumerate().take(m) {
        combine_row(schedule, history, t, i, out)?;
        if let Some(Some(s)) = descent.get(i) {
            out.iter_mut().zip(s.iter()).for_each(|(o, &x)| *o += x);
        }
    }
    Ok(next)
}

/// State of the descent-free agreement algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementState {
    pub history: History,
}

impl AgreementState {
    pub fn new(schedule: &CommSchedule, len: usize, initial: &[f64]) -> Result<Self> {
        let depth = History::depth_for(schedule);
        Ok(Self { history: History::new(schedule.processors(), len, depth, 0, initial)? })
    }

    pub fn time(&self) -> usize {
        self.history.newest
    }

    pub fn versions(&self) -> &[f64] {
        self.history.current()
    }
}

/// Advances the agreement algorithm by one tick.
pub fn agreement_step(state: &mut AgreementState, schedule: &CommSchedule) -> Result<()> {
    let next = general_step(schedule, &state.history, &[])?;
    state.history.push(&next);
    Ok(())
}

/// `max_{i,j} ||x^i - x^j||` over flat versions.
pub fn spread(states: &[f64], m: usize) -> f64 {
    let len = states.len() / m.max(1);
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let d = crate::geometry::dist(&states[i * len..(i + 1) * len], &states[j * len..(j + 1) * len]);
            worst = worst.max(d);
        }
    }
    worst
}

fn check_range(schedule: &CommSchedule, t: usize, tau: i64) -> Result<()> {
    if t > schedule.horizon() {
        return Err(usage(format!("t = {t} beyond schedule horizon {}", schedule.horizon())));
    }
    if tau < -1 || tau >= t as i64 {
        return Err(usage(format!("tau = {tau} outside [-1, {}]", t as i64 - 1)));
    }
    Ok(())
}

/// The `M x M` matrix `phi^{i,j}(t, tau)` (row-major, receiver `i`, sender `j`)
/// by direct impulse response: unit impulses enter as `w^j(0)` for
/// `tau = -1` or as `s^j(tau)` otherwise, and the general iterations run
/// descent-free up to `t`.
pub fn phi_matrix(schedule: &CommSchedule, t: usize, tau: i64) -> Result<Vec<f64>> {
    check_range(schedule, t, tau)?;
    let m = schedule.processors();
    let start = (tau + 1) as usize;
    let mut identity = vec![0.0; m * m];
    (0..m).for_each(|i| identity[i * m + i] = 1.0);
    let mut h = History::new(m, m, History::depth_for(schedule), start, &identity)?;
    for _ in start..t {
        let next = general_step(schedule, &h, &[])?;
        h.push(&next);
    }
    Ok(h.current().to_vec())
}

/// `phi^{i,j}(t, tau)` for a fixed `t` and `tau` in `[tau_min, t - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiTable {
    m: usize,
    t: usize,
    tau_min: i64,
    data: Vec<f64>,
}

impl PhiTable {
    pub fn processors(&self) -> usize {
        self.m
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn tau_min(&self) -> i64 {
        self.tau_min
    }

    /// `tau` values covered, in increasing order.
    pub fn taus(&self) -> std::ops::Range<i64> {
        self.tau_min..self.t as i64
    }

    pub fn matrix(&self, tau: i64) -> Option<&[f64]> {
        if !self.taus().contains(&tau) {
            return None;
        }
        let mm = self.m * self.m;
        let base = (tau - self.tau_min) as usize * mm;
        Some(&self.data[base..base + mm])
    }

    pub fn get(&self, i: usize, j: usize, tau: i64) -> Option<f64> {
        self.matrix(tau).map(|mat| mat[i * self.m + j])
    }

    pub fn to_records(&self) -> Vec<PhiRecord> {
        let mut out = Vec::with_capacity(self.data.len());
        for tau in self.taus() {
            let mat = self.matrix(tau).expect("in range");
            for i in 0..self.m {
                for j in 0..self.m {
                    out.push(PhiRecord { t: self.t, tau, i, j, value: mat[i * self.m + j] });
                }
            }
        }
        out
    }
}

/// One exported table entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiRecord {
    pub t: usize,
    pub tau: i64,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Full table by repeated impulse responses. Quadratic in `t`; meant for
/// small horizons and as a reference for [`compute_phi_adjoint`].
pub fn compute_phi(schedule: &CommSchedule, t: usize) -> Result<PhiTable> {
    check_range(schedule, t, t as i64 - 1)?;
    let m = schedule.processors();
    let mut data = Vec::with_capacity((t + 1) * m * m);
    for tau in -1..t as i64 {
        data.extend(phi_matrix(schedule, t, tau)?);
    }
    Ok(PhiTable { m, t, tau_min: -1, data })
}

/// Same table by one backward sweep: `lambda(v, k)` holds
/// `d w^i(t) / d w^k(v)` for every receiver `i`, and
/// `phi^{i,k}(t, v - 1) = lambda(v, k)`. Linear in `t`.
pub fn compute_phi_adjoint(schedule: &CommSchedule, t: usize, tau_min: i64) -> Result<PhiTable> {
    check_range(schedule, t, t as i64 - 1)?;
    if tau_min < -1 {
        return Err(usage("tau_min must be at least -1"));
    }
    let m = schedule.processors();
    let mm = m * m;
    let tau_min = tau_min.min(t as i64 - 1);
    let ring = History::depth_for(schedule) + 1;
    // lambda[(v % ring) * mm + k * m + i]
    let mut lambda = vec![0.0; ring * mm];
    let slot = |v: usize| (v % ring) * mm;
    for k in 0..m {
        lambda[slot(t) + k * m + k] = 1.0;
    }
    let rows = (t as i64 - tau_min) as usize;
    let mut data = vec![0.0; rows * mm];
    let emit = |lambda: &[f64], v: usize, data: &mut [f64]| {
        let tau = v as i64 - 1;
        if tau >= tau_min {
            let base = (tau - tau_min) as usize * mm;
            for k in 0..m {
                for i in 0..m {
                    data[base + i * m + k] = lambda[slot(v) + k * m + i];
                }
            }
        }
    };
    for u in (0..t).rev() {
        for k in 0..m {
            let src = slot(u + 1) + k * m;
            for (j, (&a, &d)) in schedule.coeff_row(u, k).iter().zip(schedule.delay_row(u, k)).enumerate() {
                if a == 0.0 {
                    continue;
                }
                let v = u.checked_sub(d as usize).ok_or_else(|| internal(format!("delay {d} exceeds tick {u}")))?;
                let dst = slot(v) + j * m;
                for i in 0..m {
                    lambda[dst + i] += a * lambda[src + i];
                }
            }
        }
        emit(&lambda, u + 1, &mut data);
        let s = slot(u + 1);
        lambda[s..s + mm].fill(0.0);
        if (u as i64) <= tau_min {
            break;
        }
    }
    if tau_min == -1 {
        emit(&lambda, 0, &mut data);
    }
    Ok(PhiTable { m, t, tau_min, data })
}

/// Least-squares fit of `r ~ A rho^lag` on log residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricFit {
    pub rho_hat: f64,
    /// Smallest `A` with `A rho_hat^lag >= r` at every fitted point.
    pub a_hat: f64,
    /// Intercept of the least-squares line, `exp(b)`.
    pub a_ls: f64,
    /// Root-mean-square residual of the log fit.
    pub rms_log_residual: f64,
    pub points: usize,
}

impl GeometricFit {
    pub fn converges(&self) -> bool {
        self.rho_hat.is_finite() && self.rho_hat < 1.0 - 1e-9
    }
}

/// Fits `(lag, r)` pairs with `r > RESIDUAL_FLOOR`. Returns `None` with fewer
/// than two distinct lags.
pub fn geometric_fit(points: &[(f64, f64)]) -> Option<GeometricFit> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.1 > RESIDUAL_FLOOR).map(|&(x, r)| (x, r.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let a_hat = pts.iter().map(|p| (p.1 - slope * p.0).exp()).fold(0.0, f64::max);
    Some(GeometricFit {
        rho_hat: slope.exp(),
        a_hat,
        a_ls: intercept.exp(),
        rms_log_residual: (rss / n).sqrt(),
        points: pts.len(),
    })
}

/// Estimated limits `phi^j(tau)` and the geometric convergence constants.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiLimits {
    m: usize,
    t_ref: usize,
    tau_min: i64,
    /// `phi_star[(tau - tau_min) * m + j]`: mean over receivers at `t_ref`.
    phi_star: Vec<f64>,
    /// Spread over receivers per `tau` (max over `j`).
    spread: Vec<f64>,
    /// Envelope of `|phi^{i,j}(t, tau) - phi^j(tau)|` per lag.
    pub residuals: Vec<(usize, f64)>,
    pub fit: Option<GeometricFit>,
    pub eta_hat: Option<f64>,
}

impl PhiLimits {
    pub fn processors(&self) -> usize {
        self.m
    }

    pub fn t_ref(&self) -> usize {
        self.t_ref
    }

    pub fn taus(&self) -> std::ops::Range<i64> {
        self.tau_min..self.t_ref as i64
    }

    fn idx(&self, tau: i64) -> Option<usize> {
        self.taus().contains(&tau).then(|| (tau - self.tau_min) as usize)
    }

    /// Estimated `phi^j(tau)`, resolved or not.
    pub fn value(&self, j: usize, tau: i64) -> Option<f64> {
        self.idx(tau).map(|k| self.phi_star[k * self.m + j])
    }

    pub fn spread(&self, tau: i64) -> Option<f64> {
        self.idx(tau).map(|k| self.spread[k])
    }

    pub fn is_resolved(&self, tau: i64) -> bool {
        self.spread(tau).is_some_and(|s| s < LIMIT_TOL)
    }

    /// Largest `tau'` such that every limit in `[tau_min, tau']` is resolved.
    pub fn resolved_through(&self) -> Option<i64> {
        let first_bad = self.spread.iter().position(|&s| s >= LIMIT_TOL).unwrap_or(self.spread.len());
        (first_bad > 0).then(|| self.tau_min + first_bad as i64 - 1)
    }

    pub fn rho_hat(&self) -> Option<f64> {
        self.fit.map(|f| f.rho_hat)
    }

    pub fn a_hat(&self) -> Option<f64> {
        self.fit.map(|f| f.a_hat)
    }

    /// `rho_hat < 1` and at least one resolved limit.
    pub fn converges(&self) -> bool {
        self.fit.is_some_and(|f| f.converges()) && self.resolved_through().is_some()
    }
}

/// Limits from the table with the largest `t`, residual fit against the
/// others. Needs at least three distinct `t`.
pub fn estimate_phi_limits(tables: &[PhiTable]) -> Result<PhiLimits> {
    let mut ts: Vec<usize> = tables.iter().map(|t| t.t).collect();
    ts.sort_unstable();
    ts.dedup();
    if ts.len() < 3 {
        return Err(usage("estimating phi limits needs tables at three or more distinct t"));
    }
    let reference = tables.iter().max_by_key(|t| t.t).expect("nonempty");
    let m = reference.m;
    if tables.iter().any(|t| t.m != m) {
        return Err(usage("phi tables disagree on the processor count"));
    }
    let n_tau = reference.taus().count();
    let mut phi_star = vec![0.0; n_tau * m];
    let mut spread = vec![0.0; n_tau];
    for (k, tau) in reference.taus().enumerate() {
        let mat = reference.matrix(tau).expect("in range");
        for j in 0..m {
            let col = (0..m).map(|i| mat[i * m + j]);
            let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            phi_star[k * m + j] = col.sum::<f64>() / m as f64;
            spread[k] = f64::max(spread[k], hi - lo);
        }
    }
    let mut limits = PhiLimits {
        m,
        t_ref: reference.t,
        tau_min: reference.tau_min,
        phi_star,
        spread,
        residuals: Vec::new(),
        fit: None,
        eta_hat: None,
    };
    let any_resolved = limits.resolved_through().is_some();

    let mut envelope: Vec<f64> = Vec::new();
    for table in tables.iter().filter(|t| t.t != reference.t) {
        for tau in table.taus() {
            if any_resolved && !limits.is_resolved(tau) {
                continue;
            }
            let Some(mat) = table.matrix(tau) else { continue };
            let mut r: f64 = 0.0;
            for j in 0..m {
                let Some(star) = limits.value(j, tau) else { continue };
                for i in 0..m {
                    r = r.max((mat[i * m + j] - star).abs());
                }
            }
            let lag = (table.t as i64 - tau) as usize;
            if envelope.len() <= lag {
                envelope.resize(lag + 1, 0.0);
            }
            envelope[lag] = envelope[lag].max(r);
        }
    }
    // non-increasing envelope from the right
    for lag in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[lag] = envelope[lag].max(envelope[lag + 1]);
    }
    let mut points = Vec::new();
    for (lag, &r) in envelope.iter().enumerate().skip(1) {
        if r > RESIDUAL_FLOOR {
            points.push((lag as f64, r));
        } else {
            points.push((lag as f64, RESIDUAL_FLOOR * (1.0 + f64::EPSILON)));
            break;
        }
    }
    limits.residuals = envelope.iter().copied().enumerate().skip(1).collect();
    limits.fit = geometric_fit(&points);
    limits.eta_hat = limits
        .taus()
        .filter(|&tau| limits.is_resolved(tau))
        .flat_map(|tau| (0..m).map(move |j| (j, tau)))
        .filter_map(|(j, tau)| limits.value(j, tau))
        .reduce(f64::min);
    Ok(limits)
}

/// Limits for every `tau` in `[-1, t_end - 1]`, from adjoint tables at
/// `t_end` and two earlier times covering the last `fit_window` lags.
pub fn phi_limits_for(schedule: &CommSchedule, t_end: usize, fit_window: usize) -> Result<PhiLimits> {
    if t_end < 3 {
        return Err(usage("phi limits need t_end >= 3"));
    }
    let step = (fit_window / 3).clamp(1, t_end / 3);
    let mut tables = vec![compute_phi_adjoint(schedule, t_end, -1)?];
    for k in 1..=2 {
        let t = t_end - k * step;
        let tau_min = (t as i64 - fit_window as i64).max(-1);
        tables.push(compute_phi_adjoint(schedule, t, tau_min)?);
    }
    estimate_phi_limits(&tables)
}

/// Incremental agreement vector:
/// `w*(0) = sum_j phi^j(-1) w^j(0)`, `w*(t+1) = w*(t) + sum_j phi^j(t) s^j(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementTracker {
    t: usize,
    w_star: Vec<f64>,
    resolved: bool,
}

impl AgreementTracker {
    pub fn new(limits: &PhiLimits, initial: &[f64]) -> Result<Self> {
        let m = limits.m;
        let len = initial.len() / m;
        let mut w_star = vec![0.0; len];
        for j in 0..m {
            let phi = limits.value(j, -1).ok_or_else(|| usage("phi limit at tau = -1 missing"))?;
            w_star.iter_mut().zip(&initial[j * len..(j + 1) * len]).for_each(|(w, &x)| *w += phi * x);
        }
        Ok(Self { t: 0, w_star, resolved: limits.is_resolved(-1) })
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn value(&self) -> &[f64] {
        &self.w_star
    }

    /// Every limit used so far was resolved.
    pub fn resolved(&self) -> bool {
        self.resolved
    }

    /// Adds the descent terms of tick `self.time()`.
    pub fn advance(&mut self, limits: &PhiLimits, descent: &[Option<&[f64]>]) -> Result<()> {
        let tau = self.t as i64;
        for (j, s) in descent.iter().enumerate() {
            if let Some(s) = s {
                let phi = limits.value(j, tau).ok_or_else(|| usage(format!("phi limit at tau = {tau} missing")))?;
                self.w_star.iter_mut().zip(s.iter()).for_each(|(w, &x)| *w += phi * x);
            }
        }
        self.resolved &= limits.is_resolved(tau);
        self.t += 1;
        Ok(())
    }
}

/// Direct evaluation of the agreement vector at `t` from the initial versions
/// and the recorded descent terms `descents[tau][j]`.
pub fn agreement_vector(
    limits: &PhiLimits,
    initial: &[f64],
    descents: &[Vec<Option<Vec<f64>>>],
    t: usize,
) -> Result<Vec<f64>> {
    if descents.len() < t {
        return Err(usage(format!("descent history covers {} ticks, need {t}", descents.len())));
    }
    let mut tracker = AgreementTracker::new(limits, initial)?;
    for tick in &descents[..t] {
        let refs: Vec<Option<&[f64]>> = tick.iter().map(|s| s.as_deref()).collect();
        tracker.advance(limits, &refs)?;
    }
    Ok(tracker.w_star)
}
