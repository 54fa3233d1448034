//! K-Means over embedding vectors with farthest-point seeding, elbow-based
//! choice of k, and nearest-member representatives per cluster.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Seeded first pick, then repeatedly the point farthest from its
    /// nearest chosen centroid.
    #[default]
    FarthestPoint,
    /// Next centroid sampled with probability proportional to squared
    /// distance.
    DSquared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    pub init: InitMethod,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            seed: 0,
            init: InitMethod::FarthestPoint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index for each input row.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each row to its assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// Number of times an empty cluster was re-seeded.
    pub reseeded: usize,
    pub seed: u64,
}

impl ClusterModel {
    pub fn centroid_matrix(&self) -> Array2<f64> {
        let dim = self.centroids.first().map_or(0, Vec::len);
        Array2::from_shape_fn((self.k, dim), |(i, j)| self.centroids[i][j])
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == cluster)
            .map(|(i, _)| i)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub cluster: usize,
    /// Row index into the clustered points.
    pub index: usize,
    pub sample_id: String,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub entries: Vec<Representative>,
}

impl RepresentativeSet {
    pub fn sample_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|r| r.sample_id.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub best_k: usize,
    /// `(k, inertia)` for every fitted k.
    pub curve: Vec<(usize, f64)>,
    /// Perpendicular distance of each curve point to the endpoint chord.
    pub chord_distance: Vec<f64>,
    pub warnings: Vec<String>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_rows(points: ArrayView2<f64>) -> usize {
    points
        .outer_iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn check_k(points: ArrayView2<f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("points must be finite".into()));
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        return Err(Error::TooFewPoints { k, distinct });
    }
    Ok(())
}

/// Farthest-point seeding starting from row `first`. Ties go to the lowest
/// row index.
pub fn farthest_point_from(points: ArrayView2<f64>, k: usize, first: usize) -> Result<Array2<f64>> {
    check_k(points, k)?;
    if first >= points.nrows() {
        return Err(Error::InvalidParam(format!("first pick {first} out of range")));
    }
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, points.row(first))).collect();
    while chosen.len() < k {
        let mut best = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, p) in points.outer_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, points.row(best)));
        }
    }
    Ok(points.select(Axis(0), &chosen))
}

/// Farthest-point seeding with a uniformly drawn first pick.
pub fn farthest_point_init(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    check_k(points, k)?;
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..points.nrows());
    farthest_point_from(points, k, first)
}

/// Standard k-means++ seeding: each next centroid is drawn with probability
/// proportional to its squared distance to the nearest chosen one.
pub fn d_squared_init(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    check_k(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.nrows());
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, points.row(first))).collect();
    while chosen.len() < k {
        let next = WeightedIndex::new(&nearest)
            .map_err(|e| Error::InvalidParam(e.to_string()))?
            .sample(&mut rng);
        chosen.push(next);
        for (i, p) in points.outer_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, points.row(next)));
        }
    }
    Ok(points.select(Axis(0), &chosen))
}

/// Nearest centroid per row (ties to the lower index) and the inertia.
fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(points.nrows());
    let mut dists = Vec::with_capacity(points.nrows());
    for p in points.outer_iter() {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centroids.outer_iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1);
    }
    (labels, dists)
}

/// Lloyd iterations from the configured seeding until the assignment stops
/// changing or `max_iter` is reached. A cluster left empty is re-seeded at
/// the row farthest from its own centroid.
pub fn kmeans_fit(points: ArrayView2<f64>, k: usize, config: &KMeansConfig) -> Result<ClusterModel> {
    let centroids = match config.init {
        InitMethod::FarthestPoint => farthest_point_init(points, k, config.seed)?,
        InitMethod::DSquared => d_squared_init(points, k, config.seed)?,
    };
    let mut model = lloyd(points, centroids, config.max_iter);
    model.seed = config.seed;
    Ok(model)
}

fn lloyd(points: ArrayView2<f64>, mut centroids: Array2<f64>, max_iter: usize) -> ClusterModel {
    let k = centroids.nrows();
    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut reseeded = 0;
    let mut iterations = 0;
    let (labels, dists) = loop {
        let (labels, dists) = assign(points, &centroids);
        history.push(dists.iter().sum::<f64>());
        if previous.as_ref() == Some(&labels) || iterations == max_iter.max(1) {
            break (labels, dists);
        }
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (p, &l) in points.outer_iter().zip(&labels) {
            let mut row = sums.row_mut(l);
            row += &p;
            counts[l] += 1;
        }
        let mut taken: HashSet<usize> = HashSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                let mean: Array1<f64> = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            } else {
                let far = (0..points.nrows())
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("k <= number of points");
                taken.insert(far);
                centroids.row_mut(j).assign(&points.row(far));
                reseeded += 1;
            }
        }
        previous = Some(labels);
    };
    ClusterModel {
        k,
        centroids: centroids.outer_iter().map(|r| r.to_vec()).collect(),
        assignments: labels,
        inertia: dists.iter().sum(),
        inertia_history: history,
        iterations,
        reseeded,
        seed: 0,
    }
}

/// Fuzzy membership of `x` in each cluster:
/// `u_k = 1 / sum_j (d_k / d_j)^(2 / (m - 1))`. When `x` sits on one or more
/// centroids the membership is shared equally among those and zero
/// elsewhere.
pub fn membership_degree(x: ArrayView1<f64>, centroids: ArrayView2<f64>, m: f64) -> Result<Vec<f64>> {
    if m <= 1.0 || !m.is_finite() {
        return Err(Error::InvalidParam(format!("fuzzifier m must exceed 1, got {m}")));
    }
    if centroids.nrows() == 0 {
        return Err(Error::InvalidParam("no centroids".into()));
    }
    if centroids.ncols() != x.len() {
        return Err(Error::shape(centroids.ncols(), x.len()));
    }
    let d: Vec<f64> = centroids.outer_iter().map(|c| sq_dist(x, c).sqrt()).collect();
    let zeros = d.iter().filter(|&&v| v == 0.0).count();
    if zeros > 0 {
        return Ok(d.iter().map(|&v| if v == 0.0 { 1.0 / zeros as f64 } else { 0.0 }).collect());
    }
    let p = 2.0 / (m - 1.0);
    Ok(d
        .iter()
        .map(|&dk| 1.0 / d.iter().map(|&dj| (dk / dj).powf(p)).sum::<f64>())
        .collect())
}

/// Index of the knee: the point with the largest perpendicular distance to
/// the chord joining the first and last curve points. Only interior points
/// compete when there are at least three; near-ties go to the smallest k.
pub fn knee_index(curve: &[(usize, f64)]) -> (usize, Vec<f64>) {
    let n = curve.len();
    if n < 3 {
        return (0, vec![0.0; n]);
    }
    let (x0, y0) = (curve[0].0 as f64, curve[0].1);
    let (x1, y1) = (curve[n - 1].0 as f64, curve[n - 1].1);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len = (dx * dx + dy * dy).sqrt();
    let dist: Vec<f64> = curve
        .iter()
        .map(|&(k, y)| ((k as f64 - x0) * dy - (y - y0) * dx).abs() / len)
        .collect();
    let scale = curve.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-9 * scale;
    let mut best = 1;
    for i in 2..n - 1 {
        if dist[i] > dist[best] + tol {
            best = i;
        }
    }
    (best, dist)
}

/// Fits k-means for every k in `ks` and picks the knee of the inertia
/// curve. Increases in inertia with k are reported as warnings.
pub fn elbow_select(
    points: ArrayView2<f64>,
    ks: impl IntoIterator<Item = usize>,
    config: &KMeansConfig,
) -> Result<(ElbowResult, Vec<ClusterModel>)> {
    let mut models = Vec::new();
    for k in ks {
        models.push(kmeans_fit(points, k, config)?);
    }
    if models.is_empty() {
        return Err(Error::InvalidParam("empty k range".into()));
    }
    let curve: Vec<(usize, f64)> = models.iter().map(|m| (m.k, m.inertia)).collect();
    let mut warnings = Vec::new();
    for w in curve.windows(2) {
        let tol = 1e-9 * w[0].1.abs().max(1e-12);
        if w[1].1 > w[0].1 + tol {
            warnings.push(format!(
                "inertia rose from {:.6} at k={} to {:.6} at k={} (local optimum)",
                w[0].1, w[0].0, w[1].1, w[1].0
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let (best, chord_distance) = knee_index(&curve);
    Ok((
        ElbowResult {
            best_k: curve[best].0,
            curve,
            chord_distance,
            warnings,
        },
        models,
    ))
}

/// For each cluster, the member closest to its centroid (ties to the lowest
/// row index).
pub fn representatives(model: &ClusterModel, points: ArrayView2<f64>, ids: &[String]) -> Result<RepresentativeSet> {
    if model.assignments.len() != points.nrows() {
        return Err(Error::shape(model.assignments.len(), points.nrows()));
    }
    if ids.len() != points.nrows() {
        return Err(Error::shape(points.nrows(), ids.len()));
    }
    let centroids = model.centroid_matrix();
    let mut entries = Vec::with_capacity(model.k);
    for c in 0..model.k {
        let best = model
            .members(c)
            .map(|i| (i, sq_dist(points.row(i), centroids.row(c))))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            });
        if let Some((index, d)) = best {
            entries.push(Representative {
                cluster: c,
                index,
                sample_id: ids[index].clone(),
                distance: d.sqrt(),
            });
        }
    }
    Ok(RepresentativeSet { entries })
}
