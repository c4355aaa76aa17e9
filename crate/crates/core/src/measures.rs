//! Compactly supported synthetic distributions and reproducible per-processor
//! sample streams.
//!
//! Streams are counter based: the draw for `(seed, processor, counter)` comes
//! from a ChaCha stream keyed by `(seed, processor)` with stream id `counter`,
//! so any sample can be replayed without touching the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::geometry::{dist, min_component_separation, sq_dist, QuantizerVec, SampleBatch};

/// Processor id reserved for reference batches.
pub const BATCH_STREAM: u64 = u64::MAX;
/// Processor id reserved for quantizer initialization.
pub const INIT_STREAM: u64 = u64::MAX - 1;

const MAX_REJECTIONS: usize = 100_000;
const MAX_INIT_ROUNDS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    TruncatedGaussianMixture {
        components: Vec<GaussianComponent>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// Uniform on a union of balls. Generally not convex, so it breaks the
    /// convex-support assumption; kept for stress runs.
    UniformDiskUnion {
        disks: Vec<Disk>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disk {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl DistributionSpec {
    pub fn uniform_box(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self::UniformBox { lo, hi }
    }

    pub fn unit_square() -> Self {
        Self::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0])
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::UniformBox { .. } => "uniform-box",
            Self::TruncatedGaussianMixture { .. } => "truncated-gaussian-mixture",
            Self::UniformDiskUnion { .. } => "uniform-disk-union",
        }
    }
}

#[derive(Debug, Clone)]
struct CompiledComponent {
    mean: Vec<f64>,
    /// Lower-triangular Cholesky factor, row-major `dim x dim`.
    chol: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Kind {
    Box,
    Mixture { cumulative: Vec<f64>, components: Vec<CompiledComponent> },
    Disks { disks: Vec<Disk>, cumulative: Vec<f64> },
}

/// A validated distribution ready for sampling.
#[derive(Debug, Clone)]
pub struct Distribution {
    spec: DistributionSpec,
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    diameter: f64,
    kind: Kind,
}

fn check_box(lo: &[f64], hi: &[f64]) -> Result<usize> {
    if lo.is_empty() || lo.len() != hi.len() {
        return Err(config("box corners must be nonempty and of equal dimension"));
    }
    if lo.iter().chain(hi).any(|x| !x.is_finite()) {
        return Err(config("box corners must be finite"));
    }
    if lo.iter().zip(hi).any(|(a, b)| a >= b) {
        return Err(config("box must satisfy lo < hi in every coordinate"));
    }
    Ok(lo.len())
}

fn cholesky(cov: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
        return Err(config(format!("covariance must be {dim}x{dim}")));
    }
    for i in 0..dim {
        for j in 0..i {
            if (cov[i][j] - cov[j][i]).abs() > 1e-12 * (1.0 + cov[i][j].abs()) {
                return Err(config("covariance is not symmetric"));
            }
        }
    }
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = cov[i][j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(config("covariance is not positive definite"));
                }
                l[i * dim + i] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Ok(l)
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn pick(cumulative: &[f64], u: f64) -> usize {
    let total = *cumulative.last().expect("nonempty");
    let target = u * total;
    cumulative.iter().position(|c| target < *c).unwrap_or(cumulative.len() - 1)
}

impl Distribution {
    pub fn new(spec: &DistributionSpec) -> Result<Self> {
        let (dim, lo, hi, diameter, kind) = match spec {
            DistributionSpec::UniformBox { lo, hi } => {
                let dim = check_box(lo, hi)?;
                (dim, lo.clone(), hi.clone(), dist(lo, hi), Kind::Box)
            }
            DistributionSpec::TruncatedGaussianMixture { components, lo, hi } => {
                let dim = check_box(lo, hi)?;
                if components.is_empty() {
                    return Err(config("mixture needs at least one component"));
                }
                if components.iter().any(|c| !(c.weight >= 0.0) || !c.weight.is_finite()) {
                    return Err(config("mixture weights must be finite and nonnegative"));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(config(format!("mixture weights sum to {total}, expected 1")));
                }
                let compiled = components
                    .iter()
                    .map(|c| {
                        if c.mean.len() != dim || c.mean.iter().any(|x| !x.is_finite()) {
                            return Err(config(format!("mixture mean must be a finite {dim}-vector")));
                        }
                        Ok(CompiledComponent { mean: c.mean.clone(), chol: cholesky(&c.cov, dim)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let kind = Kind::Mixture {
                    cumulative: cumulative(components.iter().map(|c| c.weight)),
                    components: compiled,
                };
                (dim, lo.clone(), hi.clone(), dist(lo, hi), kind)
            }
            DistributionSpec::UniformDiskUnion { disks } => {
                let dim = disks.first().map_or(0, |d| d.center.len());
                if dim == 0 {
                    return Err(config("disk union needs at least one disk with a nonempty center"));
                }
                for d in disks {
                    if d.center.len() != dim || d.center.iter().any(|x| !x.is_finite()) {
                        return Err(config(format!("disk centers must be finite {dim}-vectors")));
                    }
                    if !(d.radius > 0.0) || !d.radius.is_finite() {
                        return Err(config(format!("disk radius must be positive, got {}", d.radius)));
                    }
                }
                let lo = (0..dim)
                    .map(|k| disks.iter().map(|d| d.center[k] - d.radius).fold(f64::INFINITY, f64::min))
                    .collect();
                let hi = (0..dim)
                    .map(|k| disks.iter().map(|d| d.center[k] + d.radius).fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                let mut diameter = 0.0f64;
                for a in disks {
                    for b in disks {
                        diameter = diameter.max(dist(&a.center, &b.center) + a.radius + b.radius);
                    }
                }
                let cumulative = cumulative(disks.iter().map(|d| d.radius.powi(dim as i32)));
                (dim, lo, hi, diameter, Kind::Disks { disks: disks.clone(), cumulative })
            }
        };
        Ok(Self { spec: spec.clone(), dim, lo, hi, diameter, kind })
    }

    pub fn spec(&self) -> &DistributionSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Whether the convex-support assumption is broken by construction.
    pub fn assumption_violating(&self) -> bool {
        matches!(self.kind, Kind::Disks { .. })
    }

    pub fn contains_origin(&self) -> bool {
        self.contains(&vec![0.0; self.dim])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.kind {
            Kind::Box | Kind::Mixture { .. } => {
                x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
            }
            Kind::Disks { disks, .. } => disks
                .iter()
                .any(|d| sq_dist(x, &d.center) <= (d.radius * (1.0 + 1e-12)).powi(2)),
        }
    }

    pub fn is_interior(&self, x: &[f64]) -> bool {
        match &self.kind {
            Kind::Box | Kind::Mixture { .. } => {
                x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a < *v && *v < *b)
            }
            Kind::Disks { disks, .. } => disks.iter().any(|d| sq_dist(x, &d.center) < d.radius * d.radius),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match &self.kind {
            Kind::Box => Ok(self
                .lo
                .iter()
                .zip(&self.hi)
                .map(|(a, b)| {
                    let u: f64 = rng.random();
                    // a + u (b - a) can round past b for u close to 1
                    (a + u * (b - a)).min(*b)
                })
                .collect()),
            Kind::Mixture { cumulative, components } => {
                for _ in 0..MAX_REJECTIONS {
                    let c = &components[pick(cumulative, rng.random())];
                    let g: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let x: Vec<f64> = (0..self.dim)
                        .map(|i| c.mean[i] + (0..=i).map(|k| c.chol[i * self.dim + k] * g[k]).sum::<f64>())
                        .collect();
                    if self.contains(&x) {
                        return Ok(x);
                    }
                }
                Err(config("truncation box carries too little mixture mass to sample from"))
            }
            Kind::Disks { disks, cumulative } => {
                for _ in 0..MAX_REJECTIONS {
                    let d = &disks[pick(cumulative, rng.random())];
                    let g: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if gn == 0.0 {
                        continue;
                    }
                    let u: f64 = rng.random();
                    let r = d.radius * u.powf(1.0 / self.dim as f64);
                    let x: Vec<f64> = d.center.iter().zip(&g).map(|(c, gi)| c + r * gi / gn).collect();
                    // thin overlaps so the union is covered uniformly
                    let covering = disks.iter().filter(|e| sq_dist(&x, &e.center) <= e.radius * e.radius).count();
                    if covering <= 1 || rng.random::<f64>() * (covering as f64) < 1.0 {
                        return Ok(x);
                    }
                }
                Err(config("disk union sampler failed to accept a point"))
            }
        }
    }

    /// Draws the sample addressed by `stream` and advances its counter.
    pub fn sample(&self, stream: &mut StreamHandle) -> Result<Vec<f64>> {
        let x = self.draw(&mut stream.rng())?;
        stream.counter += 1;
        Ok(x)
    }
}

/// Address of one sample in a processor's stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamHandle {
    pub seed: u64,
    pub processor: u64,
    pub counter: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamHandle {
    pub fn new(seed: u64, processor: u64) -> Self {
        Self { seed, processor, counter: 0 }
    }

    /// Generator dedicated to the current counter value.
    pub(crate) fn rng(&self) -> ChaCha8Rng {
        let mut state = self.seed ^ splitmix64(&mut self.processor.clone());
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.counter);
        rng
    }
}

/// Draws one sample from `spec` at `stream` and returns the advanced handle.
pub fn sample(spec: &DistributionSpec, stream: StreamHandle) -> Result<(Vec<f64>, StreamHandle)> {
    let mut stream = stream;
    let x = Distribution::new(spec)?.sample(&mut stream)?;
    Ok((x, stream))
}

/// `n` samples on the reserved batch stream; box and diameter come from the
/// support, not from the realized points.
pub fn make_batch(spec: &DistributionSpec, seed: u64, n: usize) -> Result<SampleBatch> {
    let dist = Distribution::new(spec)?;
    make_batch_from(&dist, seed, n)
}

pub fn make_batch_from(dist: &Distribution, seed: u64, n: usize) -> Result<SampleBatch> {
    if n == 0 {
        return Err(usage("batch size must be at least 1"));
    }
    let mut stream = StreamHandle::new(seed, BATCH_STREAM);
    let mut points = Vec::with_capacity(n * dist.dim());
    for _ in 0..n {
        points.extend(dist.sample(&mut stream)?);
    }
    SampleBatch::new(dist.dim(), points, dist.lo().to_vec(), dist.hi().to_vec(), dist.diameter())
}

/// `kappa` interior prototypes drawn from the distribution with pairwise
/// separation at least `1e-6 * diam`.
pub fn init_quantizer(spec: &DistributionSpec, seed: u64, kappa: usize) -> Result<QuantizerVec> {
    init_quantizer_from(&Distribution::new(spec)?, seed, kappa)
}

pub fn init_quantizer_from(dist: &Distribution, seed: u64, kappa: usize) -> Result<QuantizerVec> {
    if kappa == 0 {
        return Err(usage("kappa must be at least 1"));
    }
    let mut stream = StreamHandle::new(seed, INIT_STREAM);
    let threshold = 1e-6 * dist.diameter();
    for _ in 0..MAX_INIT_ROUNDS {
        let mut coords = Vec::with_capacity(kappa * dist.dim());
        let mut interior = true;
        for _ in 0..kappa {
            let x = dist.sample(&mut stream)?;
            interior &= dist.is_interior(&x);
            coords.extend(x);
        }
        let w = QuantizerVec::new(kappa, dist.dim(), coords)?;
        if interior && min_component_separation(&w) >= threshold {
            return Ok(w);
        }
    }
    Err(config(format!(
        "could not draw {kappa} parted interior prototypes in {MAX_INIT_ROUNDS} rounds; support too degenerate"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Engine samples are drawn uniformly from the fixed reference batch.
    #[default]
    ReplayFromBatch,
    /// Engine samples are fresh draws from the distribution.
    FreshStream,
}

/// Where processors get their data from.
#[derive(Debug, Clone)]
pub enum SampleSource {
    Fresh(Distribution),
    Replay(SampleBatch),
}

impl SampleSource {
    pub fn dim(&self) -> usize {
        match self {
            Self::Fresh(d) => d.dim(),
            Self::Replay(b) => b.dim(),
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Self::Fresh(d) => d.diameter(),
            Self::Replay(b) => b.diameter(),
        }
    }

    /// Next sample of `stream`; the counter advances by one.
    pub fn draw(&self, stream: &mut StreamHandle) -> Result<Vec<f64>> {
        match self {
            Self::Fresh(d) => d.sample(stream),
            Self::Replay(b) => {
                let idx = stream.rng().random_range(0..b.len());
                stream.counter += 1;
                Ok(b.point(idx).to_vec())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    fn mixture() -> DistributionSpec {
        DistributionSpec::TruncatedGaussianMixture {
            components: vec![
                GaussianComponent { weight: 0.3, mean: vec![0.2, 0.2], cov: vec![vec![0.04, 0.01], vec![0.01, 0.02]] },
                GaussianComponent { weight: 0.7, mean: vec![0.8, 0.5], cov: vec![vec![0.09, 0.0], vec![0.0, 0.05]] },
            ],
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        }
    }

    #[test]
    fn uniform_box_samples_stay_in_box_and_replay() {
        let spec = DistributionSpec::unit_square();
        let mut stream = StreamHandle::new(42, 3);
        let d = Distribution::new(&spec).unwrap();
        for _ in 0..1000 {
            let before = stream;
            let x = d.sample(&mut stream).unwrap();
            assert!(x.iter().all(|c| (0.0..=1.0).contains(c)));
            assert_eq!(stream.counter, before.counter + 1);
            let (again, next) = sample(&spec, before).unwrap();
            assert_eq!(again, x);
            assert_eq!(next, stream);
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let neg = DistributionSpec::UniformDiskUnion { disks: vec![Disk { center: vec![0.0, 0.0], radius: -1.0 }] };
        assert!(matches!(Distribution::new(&neg), Err(crate::Error::Config(_))));
        let not_psd = DistributionSpec::TruncatedGaussianMixture {
            components: vec![GaussianComponent { weight: 1.0, mean: vec![0.5, 0.5], cov: vec![vec![1.0, 2.0], vec![2.0, 1.0]] }],
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        };
        assert!(matches!(Distribution::new(&not_psd), Err(crate::Error::Config(_))));
        let bad_weights = DistributionSpec::TruncatedGaussianMixture {
            components: vec![GaussianComponent { weight: 0.9, mean: vec![0.5], cov: vec![vec![1.0]] }],
            lo: vec![0.0],
            hi: vec![1.0],
        };
        assert!(Distribution::new(&bad_weights).is_err());
        assert!(Distribution::new(&DistributionSpec::uniform_box(vec![1.0], vec![0.0])).is_err());
    }

    /// Independent oracle: untruncated mixture draws from a separate generator,
    /// Box-Muller normals, and rejection outside the box.
    fn rejection_oracle_mean(n: usize) -> ([f64; 2], [f64; 2]) {
        let mut rng = StdRng::seed_from_u64(0xDEC0DE);
        let comps = [([0.2, 0.2], [[0.2, 0.0], [0.05, (0.02f64 - 0.0025).sqrt()]], 0.3), ([0.8, 0.5], [[0.3, 0.0], [0.0, 0.05f64.sqrt()]], 0.7)];
        let mut sum = [0.0; 2];
        let mut sumsq = [0.0; 2];
        let mut got = 0;
        while got < n {
            let (mean, l, _) = if rng.random::<f64>() < comps[0].2 { comps[0] } else { comps[1] };
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let g = [r * (std::f64::consts::TAU * u2).cos(), r * (std::f64::consts::TAU * u2).sin()];
            let x = [mean[0] + l[0][0] * g[0], mean[1] + l[1][0] * g[0] + l[1][1] * g[1]];
            if x.iter().all(|v| (0.0..=1.0).contains(v)) {
                for k in 0..2 {
                    sum[k] += x[k];
                    sumsq[k] += x[k] * x[k];
                }
                got += 1;
            }
        }
        let m = [sum[0] / n as f64, sum[1] / n as f64];
        (m, [sumsq[0] / n as f64 - m[0] * m[0], sumsq[1] / n as f64 - m[1] * m[1]])
    }

    #[test]
    fn truncated_mixture_mean_matches_rejection_oracle() {
        let n = 100_000;
        let batch = make_batch(&mixture(), 11, n).unwrap();
        let mut mean = [0.0; 2];
        for p in batch.points() {
            mean[0] += p[0];
            mean[1] += p[1];
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let (oracle, var) = rejection_oracle_mean(n);
        for k in 0..2 {
            let tol = 3.0 * (2.0 * var[k] / n as f64).sqrt();
            assert!((mean[k] - oracle[k]).abs() < tol, "coord {k}: {} vs {} (tol {tol})", mean[k], oracle[k]);
        }
    }

    #[test]
    fn make_batch_examples() {
        let spec = DistributionSpec::unit_square();
        assert_eq!(make_batch(&spec, 1, 1).unwrap().len(), 1);
        let b = make_batch(&spec, 5, 1000).unwrap();
        assert_eq!(b.diameter(), 2f64.sqrt());
        assert_eq!(b, make_batch(&spec, 5, 1000).unwrap());
        assert!(make_batch(&spec, 5, 0).is_err());
    }

    #[test]
    fn init_quantizer_examples() {
        let spec = DistributionSpec::unit_square();
        let d = Distribution::new(&spec).unwrap();
        let one = init_quantizer(&spec, 9, 1).unwrap();
        assert!(d.is_interior(one.component(0)));
        let w = init_quantizer(&spec, 9, 50).unwrap();
        assert!(w.is_parted(1e-6 * 2f64.sqrt()));
        assert!(w.components().all(|c| d.is_interior(c)));
        assert_eq!(w, init_quantizer(&spec, 9, 50).unwrap());
        assert!(init_quantizer(&spec, 9, 0).is_err());
    }

    #[test]
    fn streams_are_uncorrelated() {
        let d = Distribution::new(&DistributionSpec::unit_square()).unwrap();
        let mut a = StreamHandle::new(77, 1);
        let mut b = StreamHandle::new(77, 2);
        let n = 100_000;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| d.sample(&mut a).unwrap()).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| d.sample(&mut b).unwrap()).collect();
        for ka in 0..2 {
            for kb in 0..2 {
                let ma = xs.iter().map(|x| x[ka]).sum::<f64>() / n as f64;
                let mb = ys.iter().map(|y| y[kb]).sum::<f64>() / n as f64;
                let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
                for (x, y) in xs.iter().zip(&ys) {
                    cov += (x[ka] - ma) * (y[kb] - mb);
                    va += (x[ka] - ma).powi(2);
                    vb += (y[kb] - mb).powi(2);
                }
                let corr = cov / (va * vb).sqrt();
                assert!(corr.abs() < 0.02, "corr({ka},{kb}) = {corr}");
            }
        }
    }

    #[test]
    fn disk_union_support_and_flags() {
        let spec = DistributionSpec::UniformDiskUnion {
            disks: vec![Disk { center: vec![0.0, 0.0], radius: 1.0 }, Disk { center: vec![3.0, 0.0], radius: 0.5 }],
        };
        let d = Distribution::new(&spec).unwrap();
        assert!(d.assumption_violating());
        assert!(d.contains_origin());
        assert_eq!(d.diameter(), 4.5);
        let b = make_batch(&spec, 3, 2000).unwrap();
        assert!(b.points().all(|p| d.contains(p)));
        assert!(!Distribution::new(&mixture()).unwrap().assumption_violating());
    }

    #[test]
    fn replay_source_draws_batch_points() {
        let spec = DistributionSpec::unit_square();
        let batch = make_batch(&spec, 1, 50).unwrap();
        let src = SampleSource::Replay(batch.clone());
        let mut s = StreamHandle::new(1, 0);
        for _ in 0..200 {
            let z = src.draw(&mut s).unwrap();
            assert!(batch.points().any(|p| p == z.as_slice()));
        }
        assert_eq!(s.counter, 200);
    }

    #[test]
    fn spec_json_rejects_unknown_fields() {
        let ok: DistributionSpec = serde_json::from_str(r#"{"kind":"uniform-box","lo":[0,0],"hi":[1,1]}"#).unwrap();
        assert_eq!(ok, DistributionSpec::unit_square());
        let err = serde_json::from_str::<DistributionSpec>(r#"{"kind":"uniform-box","lo":[0],"hi":[1],"foo":1}"#).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }
}
