//! Data distributions: weighted point clouds and their Gaussian smoothings.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, domain, Error, Result};
use crate::linalg::dist_sq;

/// Name of the generator backing every seeded draw in this crate.
pub const PRNG_NAME: &str = "chacha8/rand_chacha-0.9";

/// Seeded generator used by all synthetic data and Monte Carlo routines.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A finitely supported probability measure `p = Σ a_i δ_{x_i}` on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

/// Summary statistics of a [`DiscreteMeasure`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub d: usize,
    pub mean: Vec<f64>,
    pub diam: f64,
    pub second_moment: f64,
}

#[derive(Serialize, Deserialize)]
struct MeasureDoc {
    d: usize,
    n: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Validates and builds a measure. Weights must be strictly positive and
    /// sum to one within `1e-12`.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return domain("a measure needs at least one point");
        }
        if points.len() != weights.len() {
            return domain(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            ));
        }
        let dim = points[0].len();
        if dim == 0 {
            return domain("points must have dimension ≥ 1");
        }
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in &points {
            check_dim(dim, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return domain("points must be finite");
            }
            coords.extend_from_slice(p);
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return domain("weights must be finite and strictly positive");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return domain(format!("weights sum to {total}, expected 1"));
        }
        Ok(Self {
            dim,
            coords,
            weights,
        })
    }

    /// Equal weights `1/N`.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n as f64; n])
    }

    /// Normalizes positive weights to sum to one before validating.
    pub fn normalized(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return domain("weights must have a positive finite sum");
        }
        Self::new(points, weights.iter().map(|w| w / total).collect())
    }

    /// The Dirac mass at `c`.
    pub fn dirac(c: Vec<f64>) -> Result<Self> {
        Self::new(vec![c], vec![1.0])
    }

    /// `½ δ_{-1} + ½ δ_{+1}` on the real line.
    pub fn two_point() -> Self {
        Self::new(vec![vec![-1.0], vec![1.0]], vec![0.5, 0.5]).expect("valid two-point measure")
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn to_points(&self) -> Vec<Vec<f64>> {
        self.points().map(<[f64]>::to_vec).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (p, &w) in self.points().zip(&self.weights) {
            for (mi, pi) in m.iter_mut().zip(p) {
                *mi += w * pi;
            }
        }
        m
    }

    /// Largest pairwise distance, exact `O(N²)`.
    pub fn diam(&self) -> f64 {
        let n = self.len();
        let mut best = 0.0_f64;
        for i in 0..n {
            for j in i + 1..n {
                best = best.max(dist_sq(self.point(i), self.point(j)));
            }
        }
        best.sqrt()
    }

    pub fn summary(&self) -> Summary {
        let second_moment = self
            .points()
            .zip(&self.weights)
            .map(|(p, w)| w * p.iter().map(|v| v * v).sum::<f64>())
            .sum();
        Summary {
            n: self.len(),
            d: self.dim,
            mean: self.mean(),
            diam: self.diam(),
            second_moment,
        }
    }

    /// Pushforward under a point map; weights are kept.
    pub fn map_points<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        Self::new(self.points().map(f).collect(), self.weights.clone())
    }

    /// Embeds the measure in `R^{d + extra}` by appending zero coordinates.
    pub fn embed(&self, extra: usize) -> Self {
        self.map_points(|p| {
            let mut v = p.to_vec();
            v.resize(p.len() + extra, 0.0);
            v
        })
        .expect("embedding preserves validity")
    }

    /// Hex SHA-256 of the dimension, coordinates and weights (little-endian bytes).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for v in self.coords.iter().chain(&self.weights) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// CSV with header `w,x0,...,x{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["w".to_string()];
        header.extend((0..self.dim).map(|k| format!("x{k}")));
        wtr.write_record(&header)?;
        for (p, w) in self.points().zip(&self.weights) {
            let mut row = vec![w.to_string()];
            row.extend(p.iter().map(f64::to_string));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the CSV format of [`DiscreteMeasure::write_csv`]. Weights are
    /// renormalized so that decimal round-off in hand-written files is accepted.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let (points, weights) = read_point_csv(input)?;
        let weights = weights.ok_or_else(|| Error::Parse("measure CSV needs a w column".into()))?;
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() <= WEIGHT_SUM_TOL {
            Self::new(points, weights)
        } else {
            Self::normalized(points, weights)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MeasureDoc {
            d: self.dim,
            n: self.len(),
            points: self.to_points(),
            weights: self.weights.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MeasureDoc = serde_json::from_str(text)?;
        if doc.n != doc.points.len() {
            return Err(Error::Parse(format!(
                "n = {} but {} points given",
                doc.n,
                doc.points.len()
            )));
        }
        let m = Self::new(doc.points, doc.weights)?;
        check_dim(doc.d, m.dim())?;
        Ok(m)
    }
}

/// Reads a point CSV with header `[w,]x0,...,x{d-1}[,extra...]`. Columns other
/// than `w` and `x<k>` are ignored.
pub fn read_point_csv<R: Read>(input: R) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let w_col = headers.iter().position(|h| h == "w");
    let mut x_cols = Vec::new();
    for k in 0.. {
        match headers.iter().position(|h| h == format!("x{k}")) {
            Some(c) => x_cols.push(c),
            None => break,
        }
    }
    if x_cols.is_empty() {
        return Err(Error::Parse("point CSV needs columns x0..x{d-1}".into()));
    }
    let mut points = Vec::new();
    let mut weights = w_col.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .ok_or_else(|| Error::Parse("short CSV row".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number {:?}: {e}", &rec[c])))
        };
        points.push(x_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
        if let (Some(c), Some(ws)) = (w_col, weights.as_mut()) {
            ws.push(num(c)?);
        }
    }
    Ok((points, weights))
}

/// A discrete measure convolved with `N(0, δ² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedMeasure {
    base: DiscreteMeasure,
    delta: f64,
}

impl SmoothedMeasure {
    pub fn new(base: DiscreteMeasure, delta: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return domain(format!("smoothing width must be finite and ≥ 0, got {delta}"));
        }
        Ok(Self { base, delta })
    }

    /// `N(0, I)` in `R^d`, realized as `δ_0 * N(0, I)`.
    pub fn standard_gaussian(d: usize) -> Result<Self> {
        Self::new(DiscreteMeasure::dirac(vec![0.0; d])?, 1.0)
    }

    pub fn base(&self) -> &DiscreteMeasure {
        &self.base
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }
}

/// A user-specified subset `S` of the support, with `D = diam(S)` and
/// `a_S = p(S)` cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    indices: Vec<usize>,
    diameter: f64,
    weight: f64,
}

impl ClusterSpec {
    pub fn new(measure: &DiscreteMeasure, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return domain("cluster must be nonempty");
        }
        let unique: BTreeSet<_> = indices.iter().copied().collect();
        if unique.len() != indices.len() {
            return domain("cluster indices must be unique");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= measure.len()) {
            return domain(format!("cluster index {bad} out of range"));
        }
        let mut best = 0.0_f64;
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                best = best.max(dist_sq(measure.point(i), measure.point(j)));
            }
        }
        let weight = indices.iter().map(|&i| measure.weight(i)).sum();
        Ok(Self {
            indices,
            diameter: best.sqrt(),
            weight,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    pub fn points(&self, measure: &DiscreteMeasure) -> Vec<Vec<f64>> {
        self.indices.iter().map(|&i| measure.point(i).to_vec()).collect()
    }
}

/// One disk of the three-cluster generator: `(count, center, radius)`.
pub const THREE_CLUSTER_DISKS: [(usize, [f64; 2], f64); 3] = [
    (80, [1.0, 2.5], 0.4),
    (44, [2.0, 1.5], 0.3),
    (20, [3.0, 3.0], 0.2),
];

fn sample_disk(rng: &mut impl Rng, center: [f64; 2], radius: f64) -> Vec<f64> {
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    let r = radius * v.sqrt();
    let theta = std::f64::consts::TAU * u;
    vec![center[0] + r * theta.cos(), center[1] + r * theta.sin()]
}

/// Three uniform-disk clusters in the plane (80 + 44 + 20 points, uniform
/// weights). Points are ordered cluster by cluster.
pub fn gen_three_clusters(seed: u64) -> DiscreteMeasure {
    let mut rng = seeded_rng(seed);
    let mut points = Vec::new();
    for (count, center, radius) in THREE_CLUSTER_DISKS {
        for _ in 0..count {
            points.push(sample_disk(&mut rng, center, radius));
        }
    }
    DiscreteMeasure::uniform(points).expect("generated points are valid")
}

/// The three generator clusters of a [`gen_three_clusters`] measure.
pub fn three_cluster_specs(measure: &DiscreteMeasure) -> Result<Vec<ClusterSpec>> {
    let total: usize = THREE_CLUSTER_DISKS.iter().map(|d| d.0).sum();
    if measure.len() != total {
        return domain("measure does not come from the three-cluster generator");
    }
    let mut start = 0;
    THREE_CLUSTER_DISKS
        .iter()
        .map(|&(count, _, _)| {
            let spec = ClusterSpec::new(measure, (start..start + count).collect());
            start += count;
            spec
        })
        .collect()
}

/// `n ≥ 3` equally spaced points on a circle in the plane, uniform weights.
pub fn gen_circle(n: usize, radius: f64, center: [f64; 2]) -> Result<DiscreteMeasure> {
    if n < 3 {
        return domain(format!("circle needs at least 3 points, got {n}"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return domain(format!("circle radius must be positive, got {radius}"));
    }
    let points = (0..n)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / n as f64;
            vec![
                center[0] + radius * theta.cos(),
                center[1] + radius * theta.sin(),
            ]
        })
        .collect();
    DiscreteMeasure::uniform(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dist;

    #[test]
    fn validation() {
        assert!(DiscreteMeasure::new(vec![], vec![]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![0.5]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![1.0, 0.0]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![f64::NAN]], vec![1.0]).is_err());
    }

    #[test]
    fn three_clusters_shape() {
        let m = gen_three_clusters(7);
        assert_eq!(m.len(), 144);
        assert_eq!(m.dim(), 2);
        assert!(m.weights().iter().all(|&w| w == 1.0 / 144.0));
        for i in 124..144 {
            assert!(dist(m.point(i), &[3.0, 3.0]) <= 0.2);
        }
        for i in 0..80 {
            assert!(dist(m.point(i), &[1.0, 2.5]) <= 0.4);
        }
        let d = m.diam();
        assert!((2.0..=2.9).contains(&d), "diam {d}");
    }

    #[test]
    fn three_clusters_deterministic() {
        let a = gen_three_clusters(11);
        let b = gen_three_clusters(11);
        let bits = |m: &DiscreteMeasure| -> Vec<u64> {
            m.points().flatten().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&gen_three_clusters(12)));
    }

    #[test]
    fn three_cluster_mean_near_mixture_centroid() {
        let m = gen_three_clusters(7);
        let s = m.summary();
        // Σ n_k c_k / 144 for the three disks
        let centroid = [228.0 / 144.0, 326.0 / 144.0];
        assert!(dist(&s.mean, &centroid) < 0.15, "mean {:?}", s.mean);
    }

    #[test]
    fn summary_examples() {
        let s = DiscreteMeasure::two_point().summary();
        assert_eq!(s.mean, vec![0.0]);
        assert_eq!(s.diam, 2.0);
        assert_eq!(s.second_moment, 1.0);
        let s = DiscreteMeasure::dirac(vec![1.5, -2.0]).unwrap().summary();
        assert_eq!(s.mean, vec![1.5, -2.0]);
        assert_eq!(s.diam, 0.0);
    }

    #[test]
    fn circle_examples() {
        let c = gen_circle(4, 1.0, [0.0, 0.0]).unwrap();
        let expect = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (p, e) in c.points().zip(expect) {
            assert!(dist(p, &e) < 1e-15);
        }
        let c = gen_circle(2048, 1.0, [0.5, -0.5]).unwrap();
        for p in c.points() {
            assert!((dist(p, &[0.5, -0.5]) - 1.0).abs() < 1e-12);
        }
        let spacing = dist(c.point(0), c.point(1));
        let arc = std::f64::consts::TAU / 2048.0;
        assert!((spacing - arc).abs() / arc < 0.01);
        assert!(gen_circle(2, 1.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn csv_and_json_round_trip() {
        let m = gen_three_clusters(3);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("w,x0,x1\n"));
        let back = DiscreteMeasure::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let json = m.to_json().unwrap();
        assert_eq!(DiscreteMeasure::from_json(&json).unwrap(), m);
    }

    #[test]
    fn cluster_spec_validation() {
        let m = gen_three_clusters(7);
        assert!(ClusterSpec::new(&m, vec![]).is_err());
        assert!(ClusterSpec::new(&m, vec![1, 1]).is_err());
        assert!(ClusterSpec::new(&m, vec![500]).is_err());
        let specs = three_cluster_specs(&m).unwrap();
        assert_eq!(specs[2].indices().len(), 20);
        assert!((specs[2].weight() - 20.0 / 144.0).abs() < 1e-15);
        assert!(specs[2].diameter() <= 0.4);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn measure() -> impl Strategy<Value = DiscreteMeasure> {
            (1usize..4, 1usize..12).prop_flat_map(|(d, n)| {
                (
                    prop::collection::vec(prop::collection::vec(-50.0f64..50.0, d), n),
                    prop::collection::vec(0.01f64..1.0, n),
                )
                    .prop_map(|(p, w)| DiscreteMeasure::normalized(p, w).unwrap())
            })
        }

        proptest! {
            #[test]
            fn second_moment_dominates_squared_mean(m in measure()) {
                let s = m.summary();
                let mean_sq: f64 = s.mean.iter().map(|v| v * v).sum();
                prop_assert!(s.second_moment >= mean_sq - 1e-9 * (1.0 + mean_sq));
            }
        }
    }
}
