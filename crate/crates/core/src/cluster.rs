//! Filter clusters: generation (even split or k-means), propagation through
//! constraint groups, and the averaging / decaying matrices of the matrix-form
//! update.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Partition of one layer's filter indices into clusters.
///
/// Stored canonically: each cluster sorted ascending, clusters ordered by their
/// smallest member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterSet {
    layer: usize,
    clusters: Vec<Vec<usize>>,
    lookup: Vec<usize>,
}

impl ClusterSet {
    /// Validate and canonicalize a partition of `0..filters`.
    pub fn new(layer: usize, filters: usize, mut clusters: Vec<Vec<usize>>) -> Result<Self> {
        let mut lookup = vec![usize::MAX; filters];
        for c in &mut clusters {
            if c.is_empty() {
                return Err(Error::Input(format!("layer {layer}: empty cluster")));
            }
            c.sort_unstable();
        }
        clusters.sort_by_key(|c| c[0]);
        for (ci, c) in clusters.iter().enumerate() {
            for &f in c {
                if f >= filters {
                    return Err(Error::Input(format!(
                        "layer {layer}: filter {f} out of range for {filters} filters"
                    )));
                }
                if lookup[f] != usize::MAX {
                    return Err(Error::Input(format!(
                        "layer {layer}: filter {f} appears in two clusters"
                    )));
                }
                lookup[f] = ci;
            }
        }
        if let Some(missing) = lookup.iter().position(|&c| c == usize::MAX) {
            return Err(Error::Input(format!(
                "layer {layer}: filter {missing} not assigned to any cluster"
            )));
        }
        Ok(ClusterSet {
            layer,
            clusters,
            lookup,
        })
    }

    pub fn singletons(layer: usize, filters: usize) -> Self {
        ClusterSet {
            layer,
            clusters: (0..filters).map(|f| vec![f]).collect(),
            lookup: (0..filters).collect(),
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn filters(&self) -> usize {
        self.lookup.len()
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// The cluster containing filter `j`.
    pub fn cluster_of(&self, j: usize) -> &[usize] {
        &self.clusters[self.lookup[j]]
    }

    pub fn cluster_id(&self, j: usize) -> usize {
        self.lookup[j]
    }

    pub fn is_singletons(&self) -> bool {
        self.clusters.len() == self.lookup.len()
    }

    /// Same partition reassigned to another layer.
    pub fn for_layer(&self, layer: usize) -> Self {
        ClusterSet {
            layer,
            ..self.clone()
        }
    }

    /// Same partition, ignoring which layer it belongs to.
    pub fn same_partition(&self, other: &ClusterSet) -> bool {
        self.clusters == other.clusters
    }
}

/// Layers whose outputs are summed together and therefore must share one
/// cluster set: the pacesetter and its followers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintGroup {
    pub pacesetter: usize,
    pub followers: Vec<usize>,
    /// Filter count shared by all members.
    pub width: usize,
}

impl ConstraintGroup {
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.pacesetter).chain(self.followers.iter().copied())
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.members().any(|m| m == layer)
    }
}

/// Cluster sets keyed by layer id. Layers without an entry are unclustered.
pub type ClusterMap = BTreeMap<usize, ClusterSet>;

/// Contiguous blocks; the first `c mod r` clusters hold one extra filter.
pub fn even_clusters(layer: usize, filters: usize, count: usize) -> Result<ClusterSet> {
    if count == 0 || count > filters {
        return Err(Error::Input(format!(
            "layer {layer}: cluster count {count} must be in 1..={filters}"
        )));
    }
    let (base, extra) = (filters / count, filters % count);
    let mut clusters = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let size = base + usize::from(i < extra);
        clusters.push((start..start + size).collect());
        start += size;
    }
    ClusterSet::new(layer, filters, clusters)
}

const KMEANS_MAX_ITER: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding on the flattened kernels of each
/// filter. Deterministic for a given seed; ties go to the lowest cluster index.
pub fn kmeans_clusters<T: Scalar>(
    layer: usize,
    kernel: &Tensor4<T>,
    count: usize,
    seed: u64,
) -> Result<ClusterSet> {
    let filters = kernel.shape()[3];
    if count == 0 || count > filters {
        return Err(Error::Input(format!(
            "layer {layer}: cluster count {count} must be in 1..={filters}"
        )));
    }
    let points: Vec<Vec<f64>> = (0..filters)
        .map(|j| {
            kernel
                .data()
                .iter()
                .skip(j)
                .step_by(filters)
                .map(|x| x.as_f64())
                .collect()
        })
        .collect();
    let assignment = kmeans(&points, count, seed);
    let mut clusters = vec![Vec::new(); count];
    for (j, &c) in assignment.iter().enumerate() {
        clusters[c].push(j);
    }
    ClusterSet::new(layer, filters, clusters)
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // every point already coincides with a centroid
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
    }

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..KMEANS_MAX_ITER {
        repair_empty(points, &mut assignment, &centroids, k);
        centroids = compute_centroids(points, &assignment, k);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    repair_empty(points, &mut assignment, &centroids, k);
    assignment
}

fn compute_centroids(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

/// Fill each empty cluster with the member of the largest cluster farthest from its centroid.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
        let victim = (0..points.len())
            .filter(|&i| assignment[i] == largest)
            .fold(None::<(usize, f64)>, |best, i| {
                let d = sq_dist(&points[i], &centroids[largest]);
                match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                }
            })
            .expect("largest cluster is non-empty")
            .0;
        assignment[victim] = empty;
    }
}

/// Copy each pacesetter's cluster set onto its followers. Layers outside every
/// group are returned untouched.
pub fn propagate_constraints(groups: &[ConstraintGroup], sets: &ClusterMap) -> Result<ClusterMap> {
    let mut out = sets.clone();
    for g in groups {
        let Some(pace) = sets.get(&g.pacesetter) else {
            if g.followers.iter().any(|f| sets.contains_key(f)) {
                return Err(Error::Structural(format!(
                    "group led by layer {} has follower clusters but no pacesetter clusters",
                    g.pacesetter
                )));
            }
            continue;
        };
        if pace.filters() != g.width {
            return Err(Error::Structural(format!(
                "pacesetter {} clusters cover {} filters, group width is {}",
                g.pacesetter,
                pace.filters(),
                g.width
            )));
        }
        for &f in &g.followers {
            out.insert(f, pace.for_layer(f));
        }
    }
    Ok(out)
}

/// Dense square matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix<T = f32> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> SquareMatrix<T> {
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.n + c]
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut data = vec![T::zero(); n * n];
        T::gemm(
            n,
            n,
            n,
            T::one(),
            &self.data,
            (n as isize, 1),
            &other.data,
            (n as isize, 1),
            T::zero(),
            &mut data,
            (n as isize, 1),
        );
        SquareMatrix { n, data }
    }
}

/// Averaging matrix: `1/|H(m)|` where `m` and `n` share a cluster, else 0.
/// Right-multiplying a weight matrix by it replaces each column with its cluster mean.
pub fn build_gamma<T: Scalar>(cs: &ClusterSet) -> SquareMatrix<T> {
    let n = cs.filters();
    let mut data = vec![T::zero(); n * n];
    for c in cs.clusters() {
        let v = T::one() / T::of(c.len() as f64);
        for &a in c {
            for &b in c {
                data[a * n + b] = v;
            }
        }
    }
    SquareMatrix { n, data }
}

/// Decaying matrix `(eta + eps) I - eps * Gamma`.
///
/// Its diagonal is `eta + (1 - 1/|H(m)|) eps`; within a cluster the
/// off-diagonal entries are `-eps/|H(m)|`, which supplies the pull toward the
/// cluster mean. A purely diagonal matrix would not reproduce the direct update.
pub fn build_lambda<T: Scalar>(cs: &ClusterSet, eta: f64, eps: f64) -> Result<SquareMatrix<T>> {
    if !(eta >= 0.0 && eps >= 0.0) {
        return Err(Error::Input(format!(
            "weight decay ({eta}) and centripetal strength ({eps}) must be non-negative"
        )));
    }
    let n = cs.filters();
    let mut data = vec![T::zero(); n * n];
    for c in cs.clusters() {
        let size = c.len() as f64;
        for &a in c {
            for &b in c {
                data[a * n + b] = if a == b {
                    T::of(eta + (1.0 - 1.0 / size) * eps)
                } else {
                    T::of(-eps / size)
                };
            }
        }
    }
    Ok(SquareMatrix { n, data })
}

/// Text form: `layer_id: [i,j,...];[k,...];...`.
impl fmt::Display for ClusterSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.layer)?;
        for (i, c) in self.clusters.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            let items: Vec<String> = c.iter().map(|x| x.to_string()).collect();
            write!(f, "[{}]", items.join(","))?;
        }
        Ok(())
    }
}

/// Parsed cluster manifest line. The filter count is taken as `max index + 1`;
/// callers check it against the layer width.
impl FromStr for ClusterSet {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("cluster manifest line `{line}`: {m}"));
        let (id, rest) = line.split_once(':').ok_or_else(|| bad("missing `:`"))?;
        let layer: usize = id.trim().parse().map_err(|_| bad("bad layer id"))?;
        let mut clusters = Vec::new();
        for part in rest.split(';') {
            let part = part.trim();
            let inner = part
                .strip_prefix('[')
                .and_then(|p| p.strip_suffix(']'))
                .ok_or_else(|| bad("clusters must be bracketed"))?;
            let members: std::result::Result<Vec<usize>, _> = inner
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<usize>())
                .collect();
            clusters.push(members.map_err(|_| bad("bad filter index"))?);
        }
        let filters = clusters.iter().flatten().max().map_or(0, |m| m + 1);
        ClusterSet::new(layer, filters, clusters)
    }
}

pub fn write_manifest(sets: &ClusterMap) -> String {
    let mut s = String::new();
    for cs in sets.values() {
        s.push_str(&cs.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<ClusterMap> {
    let mut out = ClusterMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cs: ClusterSet = line.parse()?;
        if out.insert(cs.layer(), cs).is_some() {
            return Err(Error::Input(format!("duplicate manifest entry in `{line}`")));
        }
    }
    Ok(out)
}
