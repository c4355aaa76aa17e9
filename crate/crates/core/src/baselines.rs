//! Reference algorithms: single-processor competitive learning vector
//! quantization and Lloyd's batch iteration.

use crate::diagnostics::{summarize, BoundInputs, DescentTerm, Dm2Stats, MetricsRecord, Recorder, RunContext};
use crate::engine::{lloyd_reference, setup, step_bounds, RunArtifacts, RunConfig, StepBounds};
use crate::error::{usage, Result};
use crate::geometry::{distortion_and_h, empirical_distortion, nearest, norm, QuantizerVec, SampleBatch};
use crate::measures::StreamHandle;
use crate::schedule::{generate, ActivityLaw, ScheduleSpec, Topology};

/// In-place step `w_l <- w_l - eps (w_l - z)` on the winning component.
/// Returns the winner.
pub fn clvq_update(w: &mut QuantizerVec, z: &[f64], eps: f64) -> Result<usize> {
    if z.len() != w.dim() {
        return Err(usage(format!("point has dimension {}, quantizer has {}", z.len(), w.dim())));
    }
    let (l, _) = nearest(z, w);
    for (wc, &zc) in w.component_mut(l).iter_mut().zip(z) {
        *wc -= eps * (*wc - zc);
    }
    Ok(l)
}

/// One step `w - eps H(z, w)`; `eps` must lie in `(0, 1)`.
pub fn clvq_step(w: &QuantizerVec, z: &[f64], eps: f64) -> Result<QuantizerVec> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(usage(format!("step must lie in (0, 1), got {eps}")));
    }
    let mut next = w.clone();
    clvq_update(&mut next, z, eps)?;
    Ok(next)
}

/// Each nonempty cell moves to its centroid; empty cells keep their component.
pub fn lloyd_step(w: &QuantizerVec, batch: &SampleBatch) -> Result<QuantizerVec> {
    if batch.is_empty() {
        return Err(usage("empty sample batch"));
    }
    if batch.dim() != w.dim() {
        return Err(usage("batch and quantizer dimensions differ"));
    }
    let d = w.dim();
    let mut sums = vec![0.0; w.kappa() * d];
    let mut counts = vec![0usize; w.kappa()];
    for z in batch.points() {
        let (l, _) = nearest(z, w);
        counts[l] += 1;
        sums[l * d..(l + 1) * d].iter_mut().zip(z).for_each(|(s, &x)| *s += x);
    }
    let mut next = w.clone();
    for (l, &n) in counts.iter().enumerate() {
        if n > 0 {
            next.component_mut(l).iter_mut().zip(&sums[l * d..(l + 1) * d]).for_each(|(c, &s)| *c = s / n as f64);
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydState {
    pub quantizer: QuantizerVec,
    pub iterations: usize,
    pub distortion: f64,
    /// Distortion before the first step and after each step.
    pub distortions: Vec<f64>,
}

/// Iterates until the relative distortion decrease drops to `rel_tol` or
/// below, or `max_iter` steps.
pub fn lloyd(init: &QuantizerVec, batch: &SampleBatch, rel_tol: f64, max_iter: usize) -> Result<LloydState> {
    let mut w = init.clone();
    let mut d = empirical_distortion(&w, batch)?;
    let mut distortions = vec![d];
    let mut iterations = 0;
    while iterations < max_iter {
        let next = lloyd_step(&w, batch)?;
        let dn = empirical_distortion(&next, batch)?;
        iterations += 1;
        distortions.push(dn);
        let done = d == 0.0 || (d - dn) / d <= rel_tol;
        w = next;
        d = dn;
        if done {
            break;
        }
    }
    Ok(LloydState { quantizer: w, iterations, distortion: d, distortions })
}

fn single_processor_bounds(cfg: &RunConfig) -> Result<StepBounds> {
    let spec = ScheduleSpec::new(Topology::Complete).with_activity(ActivityLaw::AllActive);
    step_bounds(&cfg.step, &generate(&spec, 1, cfg.horizon.max(1))?, cfg.horizon)
}

fn artifacts(
    cfg: &RunConfig,
    s: crate::engine::Setup,
    bounds: StepBounds,
    final_w: QuantizerVec,
    metrics: Vec<MetricsRecord>,
    dm2: Dm2Stats,
    sum_eps_star: f64,
) -> Result<RunArtifacts> {
    let context = RunContext {
        processors: 1,
        kappa: cfg.kappa,
        horizon: cfg.horizon,
        diameter: s.dist.diameter(),
        k1: bounds.k1,
        k2: bounds.k2,
        eta_hat: None,
        rho_hat: None,
        a_hat: None,
        sum_eps_star,
        dm2,
        final_distortion: empirical_distortion(&final_w, &s.batch)?,
        lloyd_distortion: lloyd_reference(cfg, &s)?,
        assumptions_violated: s.dist.assumption_violating(),
    };
    let report = summarize(&metrics, &context);
    Ok(RunArtifacts {
        config: cfg.clone(),
        schedule: None,
        validation: None,
        step_bounds: bounds,
        initial: s.initial,
        batch: s.batch,
        final_versions: vec![final_w.clone()],
        final_w_star: Some(final_w),
        metrics,
        phi: None,
        context,
        report,
    })
}

/// Single-processor run on the stream of processor 0, ignoring the
/// schedule and processor count.
pub fn run_clvq(cfg: &RunConfig) -> Result<RunArtifacts> {
    let s = crate::engine::setup(cfg)?;
    let bounds = single_processor_bounds(cfg)?;
    let inputs = BoundInputs { processors: 1, kappa: cfg.kappa, diameter: s.dist.diameter(), k2: bounds.k2, fit: None };
    let mut recorder = Recorder::new(inputs, cfg.horizon, cfg.kappa * cfg.dim)?;
    let mut w = s.initial.clone();
    let mut stream = StreamHandle::new(cfg.seed, 0);
    let mut sum_eps_star = 0.0;
    for t in 0..=cfg.horizon {
        let n = t as u64 + 1;
        let eps = cfg.step.step(t, n);
        let record_now = t % cfg.cadence == 0;
        if t == cfg.horizon {
            recorder.record(t, std::slice::from_ref(&w), Some(&w), eps, &[], &s.batch)?;
            break;
        }
        let z = s.source.draw(&mut stream)?;
        if record_now {
            let before = w.clone();
            let term = DescentTerm { processor: 0, phi: 1.0, eps, version: &before, sample: &z };
            recorder.record(t, std::slice::from_ref(&before), Some(&before), eps, &[term], &s.batch)?;
        }
        clvq_update(&mut w, &z, eps)?;
        recorder.add_tick_eps(eps);
        sum_eps_star += eps;
    }
    let (metrics, dm2) = recorder.finish();
    artifacts(cfg, s, bounds, w, metrics, dm2, sum_eps_star)
}

/// Lloyd from the shared initialization; one record per iteration.
pub fn run_lloyd(cfg: &RunConfig) -> Result<RunArtifacts> {
    let s = setup(cfg)?;
    let bounds = single_processor_bounds(cfg)?;
    let state = lloyd(&s.initial, &s.batch, crate::engine::LLOYD_TOL, crate::engine::LLOYD_MAX_ITER)?;
    let mut w = s.initial.clone();
    let mut metrics = Vec::with_capacity(state.iterations + 1);
    for it in 0..=state.iterations {
        let (c, h) = distortion_and_h(&w, &s.batch)?;
        metrics.push(MetricsRecord {
            t: it,
            consensus_gap: 0.0,
            agreement_gap: 0.0,
            bound_normmaj: f64::NAN,
            distortion_star: c,
            grad_norm_star: norm(&h),
            eps_star: f64::NAN,
            min_sep_star: crate::geometry::min_component_separation(&w),
            sum_eps_grad2: f64::NAN,
            sum_dm1: f64::NAN,
            dm2_partial_norm: f64::NAN,
        });
        if it < state.iterations {
            w = lloyd_step(&w, &s.batch)?;
        }
    }
    let dm2 = Dm2Stats::new(cfg.kappa * cfg.dim);
    artifacts(cfg, s, bounds, w, metrics, dm2, f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, StepMode, StepPolicy};
    use crate::measures::SamplingMode;
    use crate::measures::DistributionSpec;
    use proptest::prelude::*;

    fn q(points: &[&[f64]]) -> QuantizerVec {
        QuantizerVec::from_points(&points.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn clvq_examples() {
        assert_eq!(clvq_step(&q(&[&[0.0, 0.0]]), &[1.0, 1.0], 0.5).unwrap(), q(&[&[0.5, 0.5]]));
        let w = q(&[&[0.3, 0.1], &[0.9, 0.9]]);
        assert_eq!(clvq_step(&w, &[0.3, 0.1], 0.4).unwrap(), w);
        assert!(clvq_step(&w, &[0.3, 0.1], 1.0).is_err());
    }

    #[test]
    fn lloyd_step_example() {
        let batch = SampleBatch::new(1, vec![0.0, 0.4, 1.0], vec![0.0], vec![1.0], 1.0).unwrap();
        let next = lloyd_step(&q(&[&[0.2], &[0.8]]), &batch).unwrap();
        assert_eq!(next, q(&[&[0.2], &[1.0]]));
        assert_eq!(lloyd_step(&next, &batch).unwrap(), next);
    }

    #[test]
    fn lloyd_keeps_empty_cells() {
        let batch = SampleBatch::new(1, vec![0.0, 0.1], vec![0.0], vec![1.0], 1.0).unwrap();
        let next = lloyd_step(&q(&[&[0.0], &[0.9]]), &batch).unwrap();
        assert_eq!(next.component(1), &[0.9]);
    }

    fn cfg(horizon: usize) -> RunConfig {
        RunConfig {
            processors: 1,
            kappa: 10,
            dim: 2,
            horizon,
            distribution: DistributionSpec::unit_square(),
            schedule: ScheduleSpec::new(Topology::Complete).with_activity(ActivityLaw::AllActive),
            step: StepPolicy::new(StepMode::GlobalClock, 0.5).with_warmup(100),
            seed: 21,
            n_ref: 2000,
            cadence: 100,
            sampling: SamplingMode::ReplayFromBatch,
            phi_tail: 10,
            compare_lloyd: true,
        }
    }

    #[test]
    fn single_processor_run_matches_clvq_bitwise() {
        let c = cfg(3000);
        let a = run(&c).unwrap();
        let b = run_clvq(&c).unwrap();
        assert_eq!(a.final_versions[0].as_slice(), b.final_versions[0].as_slice());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.distortion_star.to_bits(), y.distortion_star.to_bits());
            assert_eq!(x.consensus_gap, 0.0);
        }
    }

    #[test]
    fn clvq_horizon_zero_returns_initial() {
        let a = run_clvq(&cfg(0)).unwrap();
        assert_eq!(a.final_versions[0], a.initial);
        assert_eq!(a.metrics.len(), 1);
    }

    #[test]
    fn clvq_reduces_gradient() {
        let c = cfg(100_000);
        let a = run_clvq(&c).unwrap();
        let g0 = a.metrics[0].grad_norm_star;
        let g1 = a.metrics.last().unwrap().grad_norm_star;
        // threshold pinned from the first validated run (observed ratio 0.013)
        assert!(g1 < 0.05 * g0, "{g1} vs {g0}");
        assert!(a.report.min_sep_star > 0.0);
        let b = run_clvq(&c).unwrap();
        assert_eq!(a.final_versions, b.final_versions);
    }

    #[test]
    fn lloyd_reaches_fixed_point_monotonically() {
        let c = cfg(0);
        let a = run_lloyd(&c).unwrap();
        assert!(a.metrics.windows(2).all(|w| w[1].distortion_star <= w[0].distortion_star));
        let w = &a.final_versions[0];
        let again = lloyd_step(w, &a.batch).unwrap();
        let d0 = empirical_distortion(w, &a.batch).unwrap();
        let d1 = empirical_distortion(&again, &a.batch).unwrap();
        assert!((d0 - d1) / d0 <= 1e-10);
    }

    proptest! {
        #[test]
        fn moved_component_on_segment(
            pts in proptest::collection::vec(-5.0f64..5.0, 6),
            z in proptest::collection::vec(-5.0f64..5.0, 2),
            eps in 0.001f64..0.999,
        ) {
            let w = QuantizerVec::new(3, 2, pts).unwrap();
            let next = clvq_step(&w, &z, eps).unwrap();
            let (l, _) = nearest(&z, &w);
            for k in 0..3 {
                if k != l {
                    prop_assert_eq!(next.component(k), w.component(k));
                }
            }
            let (a, b, c) = (w.component(l), next.component(l), &z[..]);
            let ab = crate::geometry::dist(a, b);
            let bc = crate::geometry::dist(b, c);
            let ac = crate::geometry::dist(a, c);
            prop_assert!((ab + bc - ac).abs() <= 1e-12 * (1.0 + ac));
        }

        #[test]
        fn lloyd_never_increases_distortion(pts in proptest::collection::vec(0.0f64..1.0, 8), seed in 0u64..100) {
            let batch = crate::measures::make_batch(&DistributionSpec::unit_square(), seed, 200).unwrap();
            let w = QuantizerVec::new(4, 2, pts).unwrap();
            let next = lloyd_step(&w, &batch).unwrap();
            prop_assert!(empirical_distortion(&next, &batch).unwrap() <= empirical_distortion(&w, &batch).unwrap() + 1e-15);
        }
    }
}
