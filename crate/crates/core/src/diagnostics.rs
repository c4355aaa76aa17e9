//! Convergence diagnostics: the delay-decay series `theta_t`, the effective
//! step `eps*`, the perturbation terms `dM1` and `dM2`, metric records, and
//! the run summary.
//!
//! Every bound built from fitted constants (`A_hat`, `rho_hat`, `eta_hat`,
//! Lipschitz estimates) is an empirical-constant bound.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agreement::{geometric_fit, GeometricFit};
use crate::error::{usage, Result};
use crate::geometry::{
    distortion_and_h, empirical_h, min_component_separation, norm, observation_h, QuantizerVec, SampleBatch,
};

/// Safety multiplier applied to `A_hat` in the deviation bound.
pub const A_HAT_SAFETY: f64 = 1.1;

/// `sum_{tau >= 0} 1 / (tau v 1)^2 = 1 + pi^2 / 6`.
pub const INVERSE_SQUARE_SUM: f64 = 1.0 + std::f64::consts::PI * std::f64::consts::PI / 6.0;

pub const METRICS_COLUMNS: [&str; 11] = [
    "t",
    "consensus_gap",
    "agreement_gap",
    "bound_normmaj",
    "distortion_star",
    "grad_norm_star",
    "eps_star",
    "min_sep_star",
    "sum_eps_grad2",
    "sum_dm1",
    "dm2_partial_norm",
];

/// One row of `metrics.csv`. Unavailable values are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: usize,
    /// `max_{i,j} |w^i(t) - w^j(t)|`.
    pub consensus_gap: f64,
    /// `max_i |w*(t) - w^i(t)|`.
    pub agreement_gap: f64,
    /// `sqrt(kappa) M diam A_hat K2 theta_t`.
    pub bound_normmaj: f64,
    pub distortion_star: f64,
    pub grad_norm_star: f64,
    /// Step `eps*_{t+1}` taken at tick `t`.
    pub eps_star: f64,
    pub min_sep_star: f64,
    /// Cadence-weighted `sum_{u < t} eps*_{u+1} |h(w*(u))|^2`.
    pub sum_eps_grad2: f64,
    /// Cadence-weighted `sum_{u < t} |dM1_u|`.
    pub sum_dm1: f64,
    /// Norm of the sum of sampled `dM2_u`, `u < t`.
    pub dm2_partial_norm: f64,
}

impl MetricsRecord {
    fn values(&self) -> [f64; 10] {
        [
            self.consensus_gap,
            self.agreement_gap,
            self.bound_normmaj,
            self.distortion_star,
            self.grad_norm_star,
            self.eps_star,
            self.min_sep_star,
            self.sum_eps_grad2,
            self.sum_dm1,
            self.dm2_partial_norm,
        ]
    }
}

/// Writes records with the fixed column order and shortest round-trip floats.
pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    writeln!(out, "{}", METRICS_COLUMNS.join(","))?;
    for r in records {
        write!(out, "{}", r.t)?;
        for v in r.values() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(usage(format!("rho must lie in (0, 1), got {rho}")));
    }
    Ok(())
}

/// `theta_t = sum_{tau=-1}^{t-1} rho^{t - tau} / (tau v 1)` by direct summation.
pub fn theta(rho: f64, t: usize) -> Result<f64> {
    check_rho(rho)?;
    let mut sum = 0.0;
    for tau in -1..t as i64 {
        sum += rho.powi((t as i64 - tau) as i32) / tau.max(1) as f64;
    }
    Ok(sum)
}

/// Upper bound `rho^{t - floor(sqrt t) - 1} / (1 - rho) + t^{-1/2} / (1 - rho)`, `t >= 1`.
pub fn theta_tail_bound(rho: f64, t: usize) -> f64 {
    let s = (t as f64).sqrt().floor();
    (rho.powf(t as f64 - s - 1.0) + 1.0 / (t as f64).sqrt()) / (1.0 - rho)
}

/// `theta_0..=theta_{t_max}` by the recursion
/// `theta_0 = rho`, `theta_{t+1} = rho theta_t + rho / (t v 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSeries {
    pub rho: f64,
    pub values: Vec<f64>,
}

impl ThetaSeries {
    pub fn new(rho: f64, t_max: usize) -> Result<Self> {
        check_rho(rho)?;
        let mut values = Vec::with_capacity(t_max + 1);
        let mut th = rho;
        values.push(th);
        for t in 0..t_max {
            th = rho * th + rho / t.max(1) as f64;
            values.push(th);
        }
        Ok(Self { rho, values })
    }

    pub fn get(&self, t: usize) -> Option<f64> {
        self.values.get(t).copied()
    }

    /// Partial sums `sum_{t=1}^{n} theta_t / t` for `n = 0..=t_max`.
    pub fn weighted_partial_sums(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.values.len());
        out.push(0.0);
        for (t, th) in self.values.iter().enumerate().skip(1) {
            acc += th / t as f64;
            out.push(acc);
        }
        out
    }
}

/// `eps*_{t+1} = sum_j 1{t in T^j} phi^j(t) eps^j_{t+1}`; `steps[j]` is `None`
/// for idle processors.
pub fn eps_star(steps: &[Option<f64>], phi: &[f64]) -> f64 {
    steps.iter().zip(phi).filter_map(|(s, p)| s.map(|e| e * p)).sum()
}

/// One active processor's contribution at a tick.
#[derive(Debug, Clone, Copy)]
pub struct DescentTerm<'a> {
    pub processor: usize,
    pub phi: f64,
    pub eps: f64,
    pub version: &'a QuantizerVec,
    pub sample: &'a [f64],
}

/// `dM1 = sum_j phi^j eps^j (h(w*) - h(w^j))` over the active terms.
pub fn delta_m1(terms: &[DescentTerm], w_star: &QuantizerVec, batch: &SampleBatch) -> Result<Vec<f64>> {
    Ok(delta_terms(terms, w_star, batch)?.0)
}

/// `dM2 = sum_j phi^j eps^j (h(w^j) - H(z^j, w^j))` over the active terms.
pub fn delta_m2(terms: &[DescentTerm], batch: &SampleBatch) -> Result<Vec<f64>> {
    let mut out = vec![0.0; batch.dim() * terms.first().map_or(0, |t| t.version.kappa())];
    for term in terms {
        let h = empirical_h(term.version, batch)?;
        let obs = observation_h(term.sample, term.version)?;
        let c = term.phi * term.eps;
        for ((o, a), b) in out.iter_mut().zip(&h).zip(&obs) {
            *o += c * (a - b);
        }
    }
    Ok(out)
}

/// Both perturbation terms, sharing `h(w^j)`.
pub fn delta_terms(terms: &[DescentTerm], w_star: &QuantizerVec, batch: &SampleBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = w_star.as_slice().len();
    let mut m1 = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    if terms.is_empty() {
        return Ok((m1, m2));
    }
    let h_star = empirical_h(w_star, batch)?;
    for term in terms {
        let h = empirical_h(term.version, batch)?;
        let obs = observation_h(term.sample, term.version)?;
        let c = term.phi * term.eps;
        for k in 0..len {
            m1[k] += c * (h_star[k] - h[k]);
            m2[k] += c * (h[k] - obs[k]);
        }
    }
    Ok((m1, m2))
}

/// Largest observed `|h(a) - h(b)| / |a - b|` over the given pairs.
pub fn lipschitz_estimate(pairs: &[(QuantizerVec, QuantizerVec)], batch: &SampleBatch) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (a, b) in pairs {
        let d = crate::geometry::dist(a.as_slice(), b.as_slice());
        if d == 0.0 {
            continue;
        }
        let ha = empirical_h(a, batch)?;
        let hb = empirical_h(b, batch)?;
        best = best.max(crate::geometry::dist(&ha, &hb) / d);
    }
    Ok(best)
}

/// Running statistics of the sampled `dM2` increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dm2Stats {
    pub samples: usize,
    pub sum: Vec<f64>,
    pub sum_sq_norm: f64,
    pub max_partial_norm: f64,
}

impl Dm2Stats {
    pub fn new(len: usize) -> Self {
        Self { samples: 0, sum: vec![0.0; len], sum_sq_norm: 0.0, max_partial_norm: 0.0 }
    }

    fn push(&mut self, x: &[f64]) {
        self.samples += 1;
        self.sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
        self.sum_sq_norm += x.iter().map(|v| v * v).sum::<f64>();
        self.max_partial_norm = self.max_partial_norm.max(norm(&self.sum));
    }

    pub fn partial_norm(&self) -> f64 {
        norm(&self.sum)
    }

    /// Norm of the sample mean.
    pub fn mean_norm(&self) -> f64 {
        if self.samples == 0 {
            return f64::NAN;
        }
        self.partial_norm() / self.samples as f64
    }

    /// `sqrt(sum |x - mean|^2 / (n - 1))`.
    pub fn std(&self) -> f64 {
        if self.samples < 2 {
            return f64::NAN;
        }
        let n = self.samples as f64;
        let mean_sq = (self.partial_norm() / n).powi(2);
        ((self.sum_sq_norm - n * mean_sq).max(0.0) / (n - 1.0)).sqrt()
    }
}

/// Constants the recorder needs for the deviation bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub processors: usize,
    pub kappa: usize,
    pub diameter: f64,
    pub k2: f64,
    pub fit: Option<GeometricFit>,
}

/// Builds metric records tick by tick. Sums in a record cover ticks before it.
#[derive(Debug, Clone)]
pub struct Recorder {
    inputs: BoundInputs,
    theta: Option<ThetaSeries>,
    records: Vec<MetricsRecord>,
    /// `grad^2`, `|dM1|` and time of the last record.
    last: Option<(f64, f64, usize)>,
    eps_since_last: f64,
    sum_eps_grad2: f64,
    sum_dm1: f64,
    dm2: Dm2Stats,
}

impl Recorder {
    pub fn new(inputs: BoundInputs, horizon: usize, len: usize) -> Result<Self> {
        let theta = match inputs.fit {
            Some(f) if f.converges() && f.rho_hat > 0.0 => Some(ThetaSeries::new(f.rho_hat, horizon)?),
            _ => None,
        };
        Ok(Self {
            inputs,
            theta,
            records: Vec::new(),
            last: None,
            eps_since_last: 0.0,
            sum_eps_grad2: 0.0,
            sum_dm1: 0.0,
            dm2: Dm2Stats::new(len),
        })
    }

    /// Exact `eps*_{t+1}` of every simulated tick.
    pub fn add_tick_eps(&mut self, eps_star: f64) {
        self.eps_since_last += eps_star;
    }

    pub fn bound_normmaj(&self, t: usize) -> f64 {
        match (&self.theta, self.inputs.fit) {
            (Some(th), Some(fit)) => {
                let BoundInputs { processors, kappa, diameter, k2, .. } = self.inputs;
                (kappa as f64).sqrt()
                    * processors as f64
                    * diameter
                    * A_HAT_SAFETY
                    * fit.a_hat
                    * k2
                    * th.get(t).unwrap_or(f64::NAN)
            }
            _ => f64::NAN,
        }
    }

    /// Records the state at time `t`. `terms` are the descent terms of tick
    /// `t` (empty at the final record) and `w_star` the agreement vector.
    pub fn record(
        &mut self,
        t: usize,
        versions: &[QuantizerVec],
        w_star: Option<&QuantizerVec>,
        eps_star: f64,
        terms: &[DescentTerm],
        batch: &SampleBatch,
    ) -> Result<()> {
        if let Some((g2, dm1, t_prev)) = self.last.take() {
            self.sum_eps_grad2 += self.eps_since_last * g2;
            self.sum_dm1 += (t - t_prev) as f64 * dm1;
        }
        self.eps_since_last = 0.0;

        let mut consensus_gap: f64 = 0.0;
        for (i, a) in versions.iter().enumerate() {
            for b in &versions[i + 1..] {
                consensus_gap = consensus_gap.max(crate::geometry::dist(a.as_slice(), b.as_slice()));
            }
        }
        let nan = f64::NAN;
        let (agreement_gap, distortion_star, grad_norm_star, min_sep_star, dm1_norm) = match w_star {
            Some(ws) => {
                let gap = versions.iter().map(|v| crate::geometry::dist(ws.as_slice(), v.as_slice())).fold(0.0, f64::max);
                let (c, h) = distortion_and_h(ws, batch)?;
                let (m1, m2) = delta_terms(terms, ws, batch)?;
                if !terms.is_empty() {
                    self.dm2.push(&m2);
                }
                (gap, c, norm(&h), min_component_separation(ws), norm(&m1))
            }
            None => (nan, nan, nan, nan, nan),
        };
        self.records.push(MetricsRecord {
            t,
            consensus_gap,
            agreement_gap,
            bound_normmaj: self.bound_normmaj(t),
            distortion_star,
            grad_norm_star,
            eps_star,
            min_sep_star,
            sum_eps_grad2: self.sum_eps_grad2,
            sum_dm1: self.sum_dm1,
            dm2_partial_norm: self.dm2.partial_norm(),
        });
        self.last = Some((grad_norm_star * grad_norm_star, dm1_norm, t));
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn finish(self) -> (Vec<MetricsRecord>, Dm2Stats) {
        (self.records, self.dm2)
    }
}

/// Least-squares slope of `ln y` against `t` over points with `y > 0`.
pub fn log_slope(points: &[(f64, f64)]) -> Option<f64> {
    geometric_fit(points).map(|f| f.rho_hat.ln())
}

/// Everything [`summarize`] needs besides the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub processors: usize,
    pub kappa: usize,
    pub horizon: usize,
    pub diameter: f64,
    pub k1: f64,
    pub k2: f64,
    pub eta_hat: Option<f64>,
    pub rho_hat: Option<f64>,
    pub a_hat: Option<f64>,
    /// Exact `sum_{t=1}^{T} eps*_t`.
    pub sum_eps_star: f64,
    pub dm2: Dm2Stats,
    /// `max_i C(w^i(T))`.
    pub final_distortion: f64,
    pub lloyd_distortion: Option<f64>,
    pub assumptions_violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsStarCheck {
    pub checked: usize,
    pub violations: usize,
    pub first_violation: Option<usize>,
    pub sum_eps_star: f64,
    /// `eta_hat K1 ln(T) / 2`.
    pub divergence_floor: f64,
    pub divergence_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub samples: usize,
    pub mean_norm: f64,
    pub std: f64,
    /// `3 std / sqrt(n)`.
    pub lln_threshold: f64,
    pub lln_ok: bool,
    pub max_partial_norm: f64,
    /// `4 kappa diam^2 K2^2 sum (tau v 1)^-2`.
    pub envelope: f64,
    pub partial_ok: bool,
    pub sum_sq_norm: f64,
    /// `M^2` times the envelope.
    pub sq_envelope: f64,
    pub sq_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub bound_kind: String,
    pub records: usize,
    pub horizon: usize,
    /// Slope of `ln consensus_gap` over the last half of the records.
    pub consensus_slope: Option<f64>,
    pub final_consensus_gap: f64,
    pub final_consensus_gap_rel: f64,
    pub normmaj_checked: usize,
    pub normmaj_violations: usize,
    pub normmaj_first_violation: Option<usize>,
    pub normmaj_holds: Option<bool>,
    pub grad_norm_at_100: Option<f64>,
    pub grad_norm_final: f64,
    pub grad_norm_ratio: Option<f64>,
    pub distortion_first_quarter_mean: f64,
    pub distortion_last_quarter_mean: f64,
    pub distortion_decreasing: bool,
    pub eps_grad2_total: f64,
    pub eps_grad2_last_quarter_increment: f64,
    pub eps_grad2_tail_ratio: f64,
    pub min_sep_star: f64,
    pub triangle_violations: usize,
    pub eps_star: Option<EpsStarCheck>,
    pub martingale: MartingaleCheck,
    pub final_distortion: f64,
    pub lloyd_distortion: Option<f64>,
    pub distortion_ratio_to_lloyd: Option<f64>,
    pub rho_hat: Option<f64>,
    pub a_hat: Option<f64>,
    pub eta_hat: Option<f64>,
    pub k1: f64,
    pub k2: f64,
    pub assumptions_violated: bool,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Report-style summary; never fails.
pub fn summarize(records: &[MetricsRecord], ctx: &RunContext) -> ConvergenceReport {
    let n = records.len();
    let last = records.last().copied();
    let half = &records[n / 2..];
    let consensus_slope =
        log_slope(&half.iter().map(|r| (r.t as f64, r.consensus_gap)).collect::<Vec<_>>()).filter(|s| s.is_finite());

    let mut normmaj_checked = 0;
    let mut normmaj_violations = 0;
    let mut normmaj_first_violation = None;
    for r in records.iter().filter(|r| r.bound_normmaj.is_finite() && r.agreement_gap.is_finite()) {
        normmaj_checked += 1;
        if r.agreement_gap > r.bound_normmaj {
            normmaj_violations += 1;
            normmaj_first_violation.get_or_insert(r.t);
        }
    }
    let normmaj_holds = (normmaj_checked > 0).then_some(normmaj_violations == 0);

    let grad_norm_at_100 = records.iter().find(|r| r.t >= 100).map(|r| r.grad_norm_star);
    let grad_norm_final = last.map_or(f64::NAN, |r| r.grad_norm_star);
    let grad_norm_ratio = grad_norm_at_100.map(|g| grad_norm_final / g).filter(|r| r.is_finite());

    let q = n / 4;
    let first_q = mean(records[..q].iter().map(|r| r.distortion_star));
    let last_q = mean(records[n - q..].iter().map(|r| r.distortion_star));
    let total = last.map_or(f64::NAN, |r| r.sum_eps_grad2);
    let at_three_quarters = records.get(n.saturating_sub(q + 1)).map_or(f64::NAN, |r| r.sum_eps_grad2);
    let increment = total - at_three_quarters;

    let triangle_violations = records
        .iter()
        .filter(|r| r.agreement_gap.is_finite() && r.consensus_gap > 2.0 * r.agreement_gap * (1.0 + 1e-12) + 1e-15)
        .count();

    let eps_star = ctx.eta_hat.map(|eta| {
        let mut check = EpsStarCheck {
            checked: 0,
            violations: 0,
            first_violation: None,
            sum_eps_star: ctx.sum_eps_star,
            divergence_floor: eta * ctx.k1 * (ctx.horizon.max(1) as f64).ln() / 2.0,
            divergence_ok: false,
        };
        check.divergence_ok = ctx.sum_eps_star >= check.divergence_floor;
        for r in records.iter().filter(|r| r.t < ctx.horizon) {
            let t = r.t.max(1) as f64;
            check.checked += 1;
            let lo = eta * ctx.k1 / t;
            let hi = ctx.processors as f64 * ctx.k2 / t;
            if !(r.eps_star >= lo * (1.0 - 1e-12) && r.eps_star <= hi * (1.0 + 1e-12)) {
                check.violations += 1;
                check.first_violation.get_or_insert(r.t);
            }
        }
        check
    });

    let d = &ctx.dm2;
    let envelope = 4.0 * ctx.kappa as f64 * ctx.diameter.powi(2) * ctx.k2.powi(2) * INVERSE_SQUARE_SUM;
    let sq_envelope = (ctx.processors as f64).powi(2) * envelope;
    let lln_threshold = 3.0 * d.std() / (d.samples as f64).sqrt();
    let martingale = MartingaleCheck {
        samples: d.samples,
        mean_norm: d.mean_norm(),
        std: d.std(),
        lln_threshold,
        lln_ok: d.mean_norm() < lln_threshold,
        max_partial_norm: d.max_partial_norm,
        envelope,
        partial_ok: d.max_partial_norm <= envelope,
        sum_sq_norm: d.sum_sq_norm,
        sq_envelope,
        sq_ok: d.sum_sq_norm <= sq_envelope,
    };

    ConvergenceReport {
        bound_kind: "empirical-constant bound".into(),
        records: n,
        horizon: ctx.horizon,
        consensus_slope,
        final_consensus_gap: last.map_or(f64::NAN, |r| r.consensus_gap),
        final_consensus_gap_rel: last.map_or(f64::NAN, |r| r.consensus_gap / ctx.diameter),
        normmaj_checked,
        normmaj_violations,
        normmaj_first_violation,
        normmaj_holds,
        grad_norm_at_100,
        grad_norm_final,
        grad_norm_ratio,
        distortion_first_quarter_mean: first_q,
        distortion_last_quarter_mean: last_q,
        distortion_decreasing: last_q < first_q,
        eps_grad2_total: total,
        eps_grad2_last_quarter_increment: increment,
        eps_grad2_tail_ratio: increment / total,
        min_sep_star: records.iter().map(|r| r.min_sep_star).filter(|x| !x.is_nan()).fold(f64::INFINITY, f64::min),
        triangle_violations,
        eps_star,
        martingale,
        final_distortion: ctx.final_distortion,
        lloyd_distortion: ctx.lloyd_distortion,
        distortion_ratio_to_lloyd: ctx.lloyd_distortion.map(|l| ctx.final_distortion / l),
        rho_hat: ctx.rho_hat,
        a_hat: ctx.a_hat,
        eta_hat: ctx.eta_hat,
        k1: ctx.k1,
        k2: ctx.k2,
        assumptions_violated: ctx.assumptions_violated,
    }
}
