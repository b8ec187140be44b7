//! k-means clustering of embedding sets (Lloyd iterations, k-means++ seeding).
//!
//! All computation runs over the id-sorted order of the input, so the result
//! only depends on the set contents, `k`, the seed and the stopping rule.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binfmt::{self, ByteReader};
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};

pub const EDSC_MAGIC: &[u8; 4] = b"EDSC";
pub const EDSC_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 300;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    centroids: Vec<Vec<f64>>,
    assignments: BTreeMap<String, usize>,
    inertia: f64,
}

/// A fitted model together with the inertia recorded after every Lloyd step.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub model: ClusterModel,
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            seed,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point coincides with a centroid already
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Moves the point farthest from its centroid into each empty cluster,
/// never emptying a donor cluster.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= n guarantees a donor cluster");
        labels[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let c = c.max(1) as f64;
        s.iter_mut().for_each(|v| *v /= c);
    }
    sums
}

fn inertia_of(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

/// Hartigan single-point moves: a point leaves its cluster when joining
/// another lowers the total inertia, with both means updated exactly.
/// Returns whether any point moved during the pass.
fn hartigan_pass(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [usize]) -> bool {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    let mut moved = false;
    for (i, p) in points.iter().enumerate() {
        let a = labels[i];
        if sizes[a] < 2 {
            continue;
        }
        let na = sizes[a] as f64;
        let removal = na / (na - 1.0) * sq_dist(p, &centroids[a]);
        let mut best: Option<(usize, f64)> = None;
        for b in (0..k).filter(|&b| b != a) {
            let nb = sizes[b] as f64;
            let cost = nb / (nb + 1.0) * sq_dist(p, &centroids[b]);
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((b, cost));
            }
        }
        let Some((b, cost)) = best else { continue };
        if cost < removal * (1.0 - 1e-12) {
            let nb = sizes[b] as f64;
            for (c, v) in centroids[a].iter_mut().zip(p) {
                *c = (*c * na - v) / (na - 1.0);
            }
            for (c, v) in centroids[b].iter_mut().zip(p) {
                *c = (*c * nb + v) / (nb + 1.0);
            }
            sizes[a] -= 1;
            sizes[b] += 1;
            labels[i] = b;
            moved = true;
        }
    }
    moved
}

/// Full run: Lloyd iterations followed by Hartigan refinement passes,
/// exposing the inertia after every iteration and pass.
pub fn kmeans_run(set: &EmbeddingSet, params: KMeansParams) -> Result<KMeansRun> {
    let KMeansParams {
        k,
        max_iter,
        tol,
        seed,
    } = params;
    if k == 0 || k > set.len() {
        return Err(Error::KOutOfRange {
            k,
            points: set.len(),
        });
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::invalid("tol must be non-negative"));
    }
    let mut order: Vec<_> = set.entries().iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let points: Vec<Vec<f64>> = order
        .iter()
        .map(|e| {
            if e.values.iter().all(|v| v.is_finite()) {
                Ok(e.values.iter().map(|&v| v as f64).collect())
            } else {
                Err(Error::NonFinite(e.id.clone()))
            }
        })
        .collect::<Result<_>>()?;
    let dim = set.dim();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        repair_empty(&points, &mut centroids, &mut next);
        let unchanged = next == labels;
        labels = next;
        let updated = means(&points, &labels, k, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        trace.push(inertia_of(&points, &labels, &centroids));
        if unchanged || shift < tol {
            break;
        }
    }
    for _ in 0..max_iter {
        if !hartigan_pass(&points, &mut centroids, &mut labels) {
            break;
        }
        iterations += 1;
        centroids = means(&points, &labels, k, dim);
        trace.push(inertia_of(&points, &labels, &centroids));
    }
    let assignments = order
        .iter()
        .zip(&labels)
        .map(|(e, &l)| (e.id.clone(), l))
        .collect();
    Ok(KMeansRun {
        model: ClusterModel {
            k,
            dim,
            centroids,
            assignments,
            inertia: *trace.last().unwrap(),
        },
        inertia_trace: trace,
        iterations,
    })
}

pub fn kmeans_fit(set: &EmbeddingSet, params: KMeansParams) -> Result<ClusterModel> {
    Ok(kmeans_run(set, params)?.model)
}

/// Lowest-inertia model over `restarts` seeds `seed, seed+1, ...`.
pub fn kmeans_best_of(set: &EmbeddingSet, params: KMeansParams, restarts: usize) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) as u64 {
        let model = kmeans_fit(
            set,
            KMeansParams {
                seed: params.seed.wrapping_add(r),
                ..params
            },
        )?;
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn assignments(&self) -> &BTreeMap<String, usize> {
        &self.assignments
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Member ids per cluster, each list id-sorted.
    pub fn members(&self) -> Vec<Vec<&str>> {
        let mut out = vec![Vec::new(); self.k];
        for (id, &c) in &self.assignments {
            out[c].push(id.as_str());
        }
        out
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }

    /// Nearest centroid of an out-of-sample embedding.
    pub fn assign(&self, values: &[f32]) -> Result<usize> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        let p: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        Ok(nearest(&self.centroids, &p).0)
    }

    /// Builds a model directly from parts, validating shapes.
    pub fn from_parts(
        centroids: Vec<Vec<f64>>,
        assignments: BTreeMap<String, usize>,
        inertia: f64,
    ) -> Result<Self> {
        let k = centroids.len();
        if k == 0 {
            return Err(Error::KOutOfRange { k, points: assignments.len() });
        }
        let dim = centroids[0].len();
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, actual: 0 });
        }
        if let Some(c) = centroids.iter().find(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: c.len(),
            });
        }
        if let Some((id, &c)) = assignments.iter().find(|(_, &c)| c >= k) {
            return Err(Error::InvalidRecord {
                id: id.clone(),
                message: format!("cluster index {c} >= k={k}"),
            });
        }
        Ok(ClusterModel {
            k,
            dim,
            centroids,
            assignments,
            inertia,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EDSC_MAGIC);
        out.extend_from_slice(&EDSC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.assignments.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.inertia.to_le_bytes());
        for c in &self.centroids {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (id, &c) in &self.assignments {
            binfmt::put_string(&mut out, id);
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(EDSC_MAGIC)?;
        let version = r.u32("version")?;
        if version != EDSC_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let k = r.usize_from_u64("k")?;
        let dim = r.usize_from_u64("dim")?;
        let count = r.usize_from_u64("count")?;
        let inertia = r.f64("inertia")?;
        let needed = k.saturating_mul(dim).saturating_mul(8);
        if r.remaining() < needed {
            return Err(Error::Truncated(format!("{k}x{dim} centroids")));
        }
        let mut centroids = Vec::with_capacity(k);
        for _ in 0..k {
            centroids.push((0..dim).map(|_| r.f64("centroids")).collect::<Result<Vec<_>>>()?);
        }
        let mut assignments = BTreeMap::new();
        for _ in 0..count {
            let id = r.string("id table")?;
            let c = r.u32("cluster index")? as usize;
            if assignments.insert(id.clone(), c).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::invalid("trailing bytes after id table"));
        }
        Self::from_parts(centroids, assignments, inertia)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binfmt::read_file(path)?)
    }
}
