//! Quantization geometry: Voronoi cell assignment, the distortion of a
//! quantizer, the single-sample gradient observation `H(z, w)` and its
//! average `h(w)` under an empirical measure.
//!
//! A quantizer is a tuple of `kappa` prototypes in `R^dim`, stored flat
//! (`kappa * dim` coordinates, prototype-major). Every gradient-like vector
//! in this crate uses the same layout.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{usage, Result};

/// A `kappa`-tuple of prototypes in `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerVec {
    kappa: usize,
    dim: usize,
    coords: Vec<f64>,
}

impl QuantizerVec {
    pub fn new(kappa: usize, dim: usize, coords: Vec<f64>) -> Result<Self> {
        if kappa == 0 || dim == 0 {
            return Err(usage("quantizer needs kappa >= 1 and dim >= 1"));
        }
        if coords.len() != kappa * dim {
            return Err(usage(format!(
                "quantizer with kappa={kappa}, dim={dim} needs {} coordinates, got {}",
                kappa * dim,
                coords.len()
            )));
        }
        if let Some(bad) = coords.iter().position(|c| !c.is_finite()) {
            return Err(usage(format!("non-finite quantizer coordinate at index {bad}")));
        }
        Ok(Self { kappa, dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(usage("prototypes have inconsistent dimensions"));
        }
        Self::new(points.len(), dim, points.concat())
    }

    pub fn zeros(kappa: usize, dim: usize) -> Self {
        Self { kappa, dim, coords: vec![0.0; kappa * dim] }
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn component(&self, l: usize) -> &[f64] {
        &self.coords[l * self.dim..(l + 1) * self.dim]
    }

    pub fn component_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.coords[l * self.dim..(l + 1) * self.dim]
    }

    pub fn components(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }

    /// True when every pair of distinct prototypes is at least `delta` apart.
    pub fn is_parted(&self, delta: f64) -> bool {
        min_component_separation(self) >= delta
    }

    pub fn to_points(&self) -> Vec<Vec<f64>> {
        self.components().map(<[f64]>::to_vec).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct QuantizerRepr {
    kappa: usize,
    dim: usize,
    components: Vec<Vec<f64>>,
}

impl Serialize for QuantizerVec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        QuantizerRepr { kappa: self.kappa, dim: self.dim, components: self.to_points() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuantizerVec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = QuantizerRepr::deserialize(d)?;
        let q = QuantizerVec::from_points(&repr.components).map_err(serde::de::Error::custom)?;
        if q.kappa != repr.kappa || q.dim != repr.dim {
            return Err(serde::de::Error::custom("kappa/dim disagree with components"));
        }
        Ok(q)
    }
}

/// A fixed set of samples defining an empirical measure, together with the
/// bounding box and diameter of the support they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    points: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    diameter: f64,
}

impl SampleBatch {
    pub fn new(dim: usize, points: Vec<f64>, lo: Vec<f64>, hi: Vec<f64>, diameter: f64) -> Result<Self> {
        if dim == 0 || lo.len() != dim || hi.len() != dim {
            return Err(usage("bounding box dimension mismatch"));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(usage("sample batch must hold a positive whole number of points"));
        }
        if !(diameter.is_finite() && diameter >= 0.0) {
            return Err(usage("support diameter must be finite and nonnegative"));
        }
        for (idx, p) in points.chunks_exact(dim).enumerate() {
            let inside = p.iter().zip(lo.iter().zip(&hi)).all(|(x, (a, b))| *a <= *x && *x <= *b);
            if !inside {
                return Err(usage(format!("sample {idx} lies outside the declared bounding box")));
            }
        }
        let batch = Self { dim, points, lo, hi, diameter };
        if batch.observed_diameter_upper() > diameter && batch.observed_diameter() > diameter * (1.0 + 1e-12) {
            return Err(usage("declared diameter is smaller than the observed spread of the samples"));
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, idx: usize) -> &[f64] {
        &self.points[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
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

    /// Diagonal of the bounding box of the realized points.
    fn observed_diameter_upper(&self) -> f64 {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in self.points() {
            for k in 0..self.dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        lo.iter().zip(&hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
    }

    /// Exact maximum pairwise distance, O(n^2).
    pub fn observed_diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.max(sq_dist(self.point(i), self.point(j)));
            }
        }
        best.sqrt()
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Index and squared distance of the closest prototype; ties go to the
/// smallest index. No dimension checks.
#[inline]
pub(crate) fn nearest(z: &[f64], w: &QuantizerVec) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (l, c) in w.components().enumerate() {
        let d = sq_dist(z, c);
        if d < best_d {
            best = l;
            best_d = d;
        }
    }
    (best, best_d)
}

fn check_dim(z: &[f64], w: &QuantizerVec) -> Result<()> {
    if z.len() != w.dim() {
        return Err(usage(format!("point has dimension {}, quantizer has {}", z.len(), w.dim())));
    }
    Ok(())
}

fn check_batch(w: &QuantizerVec, data: &SampleBatch) -> Result<()> {
    if data.is_empty() {
        return Err(usage("empty sample batch"));
    }
    if data.dim() != w.dim() {
        return Err(usage(format!("batch has dimension {}, quantizer has {}", data.dim(), w.dim())));
    }
    Ok(())
}

/// Zero-based index of the Voronoi cell containing `z`. Equidistant and
/// duplicated prototypes resolve to the smallest index.
pub fn nearest_cell(z: &[f64], w: &QuantizerVec) -> Result<usize> {
    check_dim(z, w)?;
    Ok(nearest(z, w).0)
}

/// `H(z, w)`: `w_l - z` on the winning component, zero elsewhere.
pub fn observation_h(z: &[f64], w: &QuantizerVec) -> Result<Vec<f64>> {
    check_dim(z, w)?;
    let mut out = vec![0.0; w.kappa() * w.dim()];
    let (l, _) = nearest(z, w);
    let d = w.dim();
    for (o, (wc, zc)) in out[l * d..(l + 1) * d].iter_mut().zip(w.component(l).iter().zip(z)) {
        *o = wc - zc;
    }
    Ok(out)
}

/// Distortion `1/2 * mean_i min_l |z_i - w_l|^2` under the batch measure.
pub fn empirical_distortion(w: &QuantizerVec, data: &SampleBatch) -> Result<f64> {
    check_batch(w, data)?;
    let total: f64 = data.points().map(|z| nearest(z, w).1).sum();
    Ok(0.5 * total / data.len() as f64)
}

/// Average function `h(w) = mean_i H(z_i, w)` under the batch measure.
pub fn empirical_h(w: &QuantizerVec, data: &SampleBatch) -> Result<Vec<f64>> {
    Ok(distortion_and_h(w, data)?.1)
}

/// Distortion and average function from a single assignment pass.
pub fn distortion_and_h(w: &QuantizerVec, data: &SampleBatch) -> Result<(f64, Vec<f64>)> {
    check_batch(w, data)?;
    let d = w.dim();
    let mut h = vec![0.0; w.kappa() * d];
    let mut total = 0.0;
    for z in data.points() {
        let (l, sq) = nearest(z, w);
        total += sq;
        for (acc, (wc, zc)) in h[l * d..(l + 1) * d].iter_mut().zip(w.component(l).iter().zip(z)) {
            *acc += wc - zc;
        }
    }
    let n = data.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    Ok((0.5 * total / n, h))
}

/// Number of batch samples per cell.
pub fn cell_counts(w: &QuantizerVec, data: &SampleBatch) -> Result<Vec<usize>> {
    check_batch(w, data)?;
    let mut counts = vec![0; w.kappa()];
    for z in data.points() {
        counts[nearest(z, w).0] += 1;
    }
    Ok(counts)
}

/// Smallest distance between two distinct prototype slots; `+inf` when
/// `kappa == 1` so that partedness checks pass trivially.
pub fn min_component_separation(w: &QuantizerVec) -> f64 {
    let mut best = f64::INFINITY;
    for k in 0..w.kappa() {
        for l in k + 1..w.kappa() {
            best = best.min(sq_dist(w.component(k), w.component(l)));
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(points: &[&[f64]]) -> QuantizerVec {
        QuantizerVec::from_points(&points.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn batch(points: &[&[f64]], lo: &[f64], hi: &[f64]) -> SampleBatch {
        let diam = dist(lo, hi);
        SampleBatch::new(lo.len(), points.concat(), lo.to_vec(), hi.to_vec(), diam).unwrap()
    }

    #[test]
    fn nearest_cell_examples() {
        let w = q(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(nearest_cell(&[0.2, 0.0], &w).unwrap(), 0);
        assert_eq!(nearest_cell(&[0.5, 0.0], &w).unwrap(), 0);
        let dup = q(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(nearest_cell(&[3.0, 3.0], &dup).unwrap(), 0);
        assert!(matches!(nearest_cell(&[1.0], &w), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn observation_examples() {
        let w = q(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(observation_h(&[0.2, 0.1], &w).unwrap(), vec![-0.2, -0.1, 0.0, 0.0]);
        assert!(observation_h(&[1.0, 0.0], &w).unwrap().iter().all(|x| *x == 0.0));
        let single = q(&[&[0.5, 0.5]]);
        assert_eq!(observation_h(&[1.0, 0.0], &single).unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn distortion_examples() {
        let data = batch(&[&[0.0, 0.0], &[1.0, 0.0]], &[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(empirical_distortion(&q(&[&[0.5, 0.0]]), &data).unwrap(), 0.125);
        assert_eq!(empirical_distortion(&q(&[&[0.0, 0.0], &[1.0, 0.0]]), &data).unwrap(), 0.0);
    }

    #[test]
    fn h_examples() {
        let data = batch(&[&[0.0, 0.0], &[2.0, 0.0]], &[0.0, 0.0], &[2.0, 1.0]);
        assert_eq!(empirical_h(&q(&[&[0.0, 0.0]]), &data).unwrap(), vec![-1.0, 0.0]);
        // second prototype is far from every sample: its cell is empty
        let h = empirical_h(&q(&[&[0.0, 0.0], &[2.0, 1.0]]), &data).unwrap();
        assert_eq!(&h[..2], &[-0.0, -0.0]);
        assert_eq!(&h[2..], &[0.0, 0.5]);
        let h = empirical_h(&q(&[&[0.0, 0.0], &[-5.0, -5.0]]), &data).unwrap();
        assert_eq!(&h[2..], &[0.0, 0.0]);
    }

    #[test]
    fn empty_batch_and_dim_errors() {
        assert!(SampleBatch::new(2, vec![], vec![0.0, 0.0], vec![1.0, 1.0], 1.5).is_err());
        let data = batch(&[&[0.0]], &[0.0], &[1.0]);
        assert!(empirical_distortion(&q(&[&[0.0, 0.0]]), &data).is_err());
    }

    #[test]
    fn separation_examples() {
        assert_eq!(min_component_separation(&q(&[&[0.0, 0.0], &[1.0, 0.0]])), 1.0);
        assert_eq!(min_component_separation(&q(&[&[0.0, 0.0], &[0.0, 0.0]])), 0.0);
        assert_eq!(min_component_separation(&q(&[&[0.3, 0.1]])), f64::INFINITY);
        assert!(q(&[&[0.3, 0.1]]).is_parted(1e9));
    }

    #[test]
    fn batch_rejects_points_outside_box_and_small_diameter() {
        assert!(SampleBatch::new(1, vec![2.0], vec![0.0], vec![1.0], 1.0).is_err());
        assert!(SampleBatch::new(1, vec![0.0, 1.0], vec![0.0], vec![1.0], 0.5).is_err());
    }

    #[test]
    fn quantizer_json_shape() {
        let w = q(&[&[0.0, 1.5], &[2.0, -1.0]]);
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, r#"{"kappa":2,"dim":2,"components":[[0.0,1.5],[2.0,-1.0]]}"#);
        assert_eq!(serde_json::from_str::<QuantizerVec>(&s).unwrap(), w);
    }

    fn arb_setup() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, [f64; 2])> {
        (
            prop::collection::vec(0.0f64..1.0, 2 * 30),
            prop::collection::vec(0.0f64..1.0, 2 * 4),
            [-3.0f64..3.0, -3.0f64..3.0],
        )
    }

    proptest! {
        #[test]
        fn cells_partition_the_data((pts, ws, _) in arb_setup()) {
            let data = SampleBatch::new(2, pts, vec![0.0, 0.0], vec![1.0, 1.0], 2f64.sqrt()).unwrap();
            let w = QuantizerVec::new(4, 2, ws).unwrap();
            let counts = cell_counts(&w, &data).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), data.len());
        }

        #[test]
        fn translation_leaves_distortion_and_h_unchanged((pts, ws, shift) in arb_setup()) {
            let data = SampleBatch::new(2, pts.clone(), vec![0.0, 0.0], vec![1.0, 1.0], 2f64.sqrt()).unwrap();
            let w = QuantizerVec::new(4, 2, ws.clone()).unwrap();
            let moved = |v: &[f64]| v.chunks(2).flat_map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect::<Vec<_>>();
            let data2 = SampleBatch::new(2, moved(&pts), vec![shift[0], shift[1]], vec![1.0 + shift[0], 1.0 + shift[1]], 2f64.sqrt()).unwrap();
            let w2 = QuantizerVec::new(4, 2, moved(&ws)).unwrap();
            // skip configurations where a sample sits numerically on a bisector
            let margin_ok = data.points().all(|z| {
                let mut d: Vec<f64> = w.components().map(|c| sq_dist(z, c)).collect();
                d.sort_by(f64::total_cmp);
                d[1] - d[0] > 1e-9
            });
            prop_assume!(margin_ok);
            let (c1, h1) = distortion_and_h(&w, &data).unwrap();
            let (c2, h2) = distortion_and_h(&w2, &data2).unwrap();
            prop_assert!((c1 - c2).abs() <= 1e-12 * (1.0 + c1.abs()) * (1.0 + shift[0].abs() + shift[1].abs()).powi(2));
            for (a, b) in h1.iter().zip(&h2) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + shift[0].abs() + shift[1].abs()));
            }
        }

        #[test]
        fn nearest_cell_is_scale_invariant(z in [-2.0f64..2.0, -2.0f64..2.0], ws in prop::collection::vec(-2.0f64..2.0, 2 * 5), c in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 8.0])) {
            // powers of two scale exactly, so ties are preserved bit-for-bit
            let w = QuantizerVec::new(5, 2, ws.clone()).unwrap();
            let ws_scaled: Vec<f64> = ws.iter().map(|x| x * c).collect();
            let w2 = QuantizerVec::new(5, 2, ws_scaled).unwrap();
            prop_assert_eq!(nearest_cell(&z, &w).unwrap(), nearest_cell(&[z[0] * c, z[1] * c], &w2).unwrap());
        }

        #[test]
        fn observation_bounded_by_diameter(z in [0.0f64..1.0, 0.0f64..1.0], ws in prop::collection::vec(0.0f64..1.0, 2 * 6)) {
            let w = QuantizerVec::new(6, 2, ws).unwrap();
            let h = observation_h(&z, &w).unwrap();
            for comp in h.chunks(2) {
                prop_assert!(norm(comp) <= 2f64.sqrt() + 1e-15);
            }
        }

        #[test]
        fn separation_matches_pairwise_scan(ws in prop::collection::vec(-1.0f64..1.0, 2 * 10)) {
            let w = QuantizerVec::new(10, 2, ws.clone()).unwrap();
            let pts: Vec<&[f64]> = ws.chunks(2).collect();
            let mut brute = f64::INFINITY;
            for a in 0..10 {
                for b in 0..10 {
                    if a != b {
                        brute = brute.min(((pts[a][0] - pts[b][0]).powi(2) + (pts[a][1] - pts[b][1]).powi(2)).sqrt());
                    }
                }
            }
            prop_assert_eq!(min_component_separation(&w), brute);
        }
    }
}
