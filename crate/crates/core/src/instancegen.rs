//! Instance subsampling from base maps.
//!
//! An instance is produced in three steps: pick an index vector into the
//! base map, gather the distance and duration sub-matrices, and draw the
//! task-specific node features (demands, time windows).

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{angle_matrix, normalize_unit_square, BaseMap};
use crate::matrix::Matrix;

/// Service horizon of ACVRPTW instances, in normalised time units.
pub const TW_HORIZON: f64 = 4.6;

const MAX_FEATURE_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("cannot sample {n_sub} of {n_tot} locations")]
    SubsetTooLarge { n_sub: usize, n_tot: usize },
    #[error("an instance needs at least 2 nodes, got {0}")]
    TooSmall(usize),
    #[error("need 1 <= clusters <= n_sub, got {0} clusters")]
    BadClusterCount(usize),
    #[error("index {index} out of range for a base map of {n_tot} locations")]
    IndexOutOfRange { index: usize, n_tot: usize },
    #[error("duplicate index {0} in index vector")]
    DuplicateIndex(usize),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("no time-window draw admitted a feasible route after {0} attempts")]
    Infeasible(usize),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("dataset line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    #[serde(alias = "atsp")]
    Atsp,
    #[serde(alias = "acvrp")]
    Acvrp,
    #[serde(alias = "acvrptw")]
    Acvrptw,
}

impl Task {
    pub fn has_demands(self) -> bool {
        matches!(self, Task::Acvrp | Task::Acvrptw)
    }

    pub fn has_time_windows(self) -> bool {
        self == Task::Acvrptw
    }

    /// Number of per-node input features consumed by the policy.
    pub fn node_feature_dim(self) -> usize {
        match self {
            Task::Atsp => 0,
            Task::Acvrp => 1,
            Task::Acvrptw => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Atsp => "atsp",
            Task::Acvrp => "acvrp",
            Task::Acvrptw => "acvrptw",
        })
    }
}

impl FromStr for Task {
    type Err = InstanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "atsp" => Ok(Task::Atsp),
            "acvrp" => Ok(Task::Acvrp),
            "acvrptw" => Ok(Task::Acvrptw),
            _ => Err(InstanceError::UnknownTask(s.to_string())),
        }
    }
}

/// Distinct indices into a base map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexVector(Vec<usize>);

impl IndexVector {
    pub fn new(indices: Vec<usize>, n_tot: usize) -> Result<Self, InstanceError> {
        if indices.len() < 2 {
            return Err(InstanceError::TooSmall(indices.len()));
        }
        let mut seen = vec![false; n_tot];
        for &i in &indices {
            if i >= n_tot {
                return Err(InstanceError::IndexOutOfRange { index: i, n_tot });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(InstanceError::DuplicateIndex(i));
            }
        }
        Ok(Self(indices))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    Uniform,
    Cluster { n_clusters: usize },
}

pub fn sample_indices_uniform<R: Rng + ?Sized>(
    n_tot: usize,
    n_sub: usize,
    rng: &mut R,
) -> Result<IndexVector, InstanceError> {
    if n_sub > n_tot {
        return Err(InstanceError::SubsetTooLarge { n_sub, n_tot });
    }
    if n_sub < 2 {
        return Err(InstanceError::TooSmall(n_sub));
    }
    Ok(IndexVector(index::sample(rng, n_tot, n_sub).into_vec()))
}

/// Clustered draw: `n_clusters` uniform seeds, then the remaining picks
/// round-robin over seeds, each taking the nearest unchosen location to its
/// seed (ties to the lowest index).
pub fn sample_indices_cluster<R: Rng + ?Sized>(
    n_tot: usize,
    n_sub: usize,
    n_clusters: usize,
    coords_norm: &[[f64; 2]],
    rng: &mut R,
) -> Result<IndexVector, InstanceError> {
    if n_sub > n_tot {
        return Err(InstanceError::SubsetTooLarge { n_sub, n_tot });
    }
    if n_sub < 2 {
        return Err(InstanceError::TooSmall(n_sub));
    }
    if n_clusters == 0 || n_clusters > n_sub {
        return Err(InstanceError::BadClusterCount(n_clusters));
    }
    if coords_norm.len() != n_tot {
        return Err(InstanceError::Invalid("coordinate count differs from n_tot".into()));
    }
    let seeds = index::sample(rng, n_tot, n_clusters).into_vec();
    let mut chosen = vec![false; n_tot];
    for &s in &seeds {
        chosen[s] = true;
    }
    let mut out = seeds.clone();
    let mut c = 0;
    while out.len() < n_sub {
        let seed = coords_norm[seeds[c % n_clusters]];
        let mut best: Option<(f64, usize)> = None;
        for (j, p) in coords_norm.iter().enumerate() {
            if chosen[j] {
                continue;
            }
            let d = (p[0] - seed[0]).powi(2) + (p[1] - seed[1]).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        let (_, j) = best.expect("n_sub <= n_tot leaves an unchosen location");
        chosen[j] = true;
        out.push(j);
        c += 1;
    }
    Ok(IndexVector(out))
}

/// Gathers `D[s, s]` and `T[s, s]`.
pub fn subsample_matrices(map: &BaseMap, s: &IndexVector) -> Result<(Matrix<f64>, Matrix<f64>), InstanceError> {
    let n_tot = map.n_tot();
    if let Some(&bad) = s.as_slice().iter().find(|&&i| i >= n_tot) {
        return Err(InstanceError::IndexOutOfRange { index: bad, n_tot });
    }
    let dist = map.dist.gather(s.as_slice()).map(f64::from);
    let dur = map.dur.gather(s.as_slice()).map(f64::from);
    Ok((dist, dur))
}

/// Vehicle capacity in demand units for an instance of `n` nodes.
pub fn capacity_for(n: usize) -> f64 {
    if n == 100 {
        50.0
    } else {
        n.div_ceil(2).max(20) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Features {
    /// Demands already divided by the vehicle capacity.
    pub demands: Option<Vec<f64>>,
    /// Normalised capacity (1 when demands are present).
    pub capacity: Option<f64>,
    pub tw: Option<Vec<[f64; 2]>>,
}

pub fn gen_features<R: Rng + ?Sized>(task: Task, n: usize, rng: &mut R) -> Result<Features, InstanceError> {
    if n < 2 {
        return Err(InstanceError::TooSmall(n));
    }
    if !task.has_demands() {
        return Ok(Features::default());
    }
    let cap = capacity_for(n);
    let mut demands = vec![0.0; n];
    for d in demands.iter_mut().skip(1) {
        *d = f64::from(rng.gen_range(1u32..=9)) / cap;
    }
    let tw = task.has_time_windows().then(|| {
        let h = TW_HORIZON;
        let mut tw = vec![[0.0, h]; n];
        for w in tw.iter_mut().skip(1) {
            let start = rng.gen_range(0.0..=0.75 * h);
            let width = rng.gen_range(0.15 * h..=0.3 * h);
            *w = [start, (start + width).min(h)];
        }
        tw
    });
    Ok(Features {
        demands: Some(demands),
        capacity: Some(1.0),
        tw,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingInstance {
    pub task: Task,
    /// Per-instance normalised `[x, y]`.
    pub coords: Vec<[f64; 2]>,
    pub dist: Matrix<f64>,
    pub dur: Matrix<f64>,
    pub angle: Matrix<f64>,
    pub demands: Option<Vec<f64>>,
    pub capacity: Option<f64>,
    pub tw: Option<Vec<[f64; 2]>>,
    pub source_city: String,
    pub seed: u64,
    /// Base-map indices this instance was gathered from, when known.
    pub indices: Option<Vec<usize>>,
}

impl RoutingInstance {
    pub const DEPOT: usize = 0;

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn demand(&self, i: usize) -> f64 {
        self.demands.as_ref().map_or(0.0, |d| d[i])
    }

    /// Builds an instance from raw parts, deriving the angle matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        task: Task,
        coords: Vec<[f64; 2]>,
        dist: Matrix<f64>,
        dur: Matrix<f64>,
        features: Features,
        source_city: impl Into<String>,
        seed: u64,
    ) -> Result<Self, InstanceError> {
        let inst = Self {
            task,
            angle: angle_matrix(&coords),
            coords,
            dist,
            dur,
            demands: features.demands,
            capacity: features.capacity,
            tw: features.tw,
            source_city: source_city.into(),
            seed,
            indices: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Copy with replaced coordinates and recomputed angles; matrices untouched.
    pub fn with_coords(&self, coords: Vec<[f64; 2]>) -> Self {
        Self {
            angle: angle_matrix(&coords),
            coords,
            ..self.clone()
        }
    }

    /// Per-node input features for the policy (`n x task.node_feature_dim()`).
    pub fn node_features(&self) -> Vec<Vec<f64>> {
        (0..self.n())
            .map(|i| match self.task {
                Task::Atsp => vec![],
                Task::Acvrp => vec![self.demand(i)],
                Task::Acvrptw => {
                    let w = self.tw.as_ref().map_or([0.0, 0.0], |tw| tw[i]);
                    vec![self.demand(i), w[0] / TW_HORIZON, w[1] / TW_HORIZON]
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        let n = self.n();
        let bad = |m: String| Err(InstanceError::Invalid(m));
        if n < 2 {
            return Err(InstanceError::TooSmall(n));
        }
        if self.dist.n() != n || self.dur.n() != n {
            return bad(format!("matrix size differs from n = {n}"));
        }
        for m in [&self.dist, &self.dur] {
            if m.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad("matrix entries must be finite and non-negative".into());
            }
            if (0..n).any(|i| m.get(i, i) != 0.0) {
                return bad("matrix diagonal must be 0".into());
            }
        }
        if self.task.has_demands() != self.demands.is_some()
            || self.task.has_demands() != self.capacity.is_some()
        {
            return bad(format!("demands/capacity presence does not match {}", self.task));
        }
        if self.task.has_time_windows() != self.tw.is_some() {
            return bad(format!("time-window presence does not match {}", self.task));
        }
        if let (Some(d), Some(c)) = (&self.demands, self.capacity) {
            if d.len() != n || d[0] != 0.0 || d.iter().any(|&x| !(0.0..=c).contains(&x)) || !(c > 0.0) {
                return bad("demands must be in [0, capacity] with depot demand 0".into());
            }
        }
        if let Some(tw) = &self.tw {
            if tw.len() != n || tw.iter().any(|w| !(w[0] <= w[1])) {
                return bad("time windows must satisfy start <= end".into());
            }
        }
        Ok(())
    }

    /// Every customer can be served by a dedicated depot round trip.
    ///
    /// Under the per-trip clock reset this is exactly the condition for a
    /// greedy earliest-due-date completion to exist.
    pub fn time_windows_feasible(&self) -> bool {
        let Some(tw) = &self.tw else { return true };
        let close = tw[Self::DEPOT][1];
        (1..self.n()).all(|i| {
            let arrive = self.dur.get(Self::DEPOT, i).max(tw[i][0]);
            arrive <= tw[i][1] && arrive + self.dur.get(i, Self::DEPOT) <= close
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&InstanceRecord::from(self)).expect("instance serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, InstanceError> {
        let rec: InstanceRecord = serde_json::from_str(s).map_err(|source| InstanceError::Json { line: 1, source })?;
        rec.try_into()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    task: Task,
    n: usize,
    coords: Vec<[f64; 2]>,
    dist: Vec<Vec<f64>>,
    dur: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    demands: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    capacity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tw: Option<Vec<[f64; 2]>>,
    source_city: String,
    seed: u64,
}

impl From<&RoutingInstance> for InstanceRecord {
    fn from(i: &RoutingInstance) -> Self {
        Self {
            task: i.task,
            n: i.n(),
            coords: i.coords.clone(),
            dist: i.dist.to_rows(),
            dur: i.dur.to_rows(),
            demands: i.demands.clone(),
            capacity: i.capacity,
            tw: i.tw.clone(),
            source_city: i.source_city.clone(),
            seed: i.seed,
        }
    }
}

impl TryFrom<InstanceRecord> for RoutingInstance {
    type Error = InstanceError;

    fn try_from(r: InstanceRecord) -> Result<Self, InstanceError> {
        let bad = |m: &str| InstanceError::Invalid(m.to_string());
        if r.coords.len() != r.n {
            return Err(bad("coords length differs from n"));
        }
        let dist = Matrix::from_rows(&r.dist).ok_or_else(|| bad("dist is not square"))?;
        let dur = Matrix::from_rows(&r.dur).ok_or_else(|| bad("dur is not square"))?;
        let features = Features {
            demands: r.demands,
            capacity: r.capacity,
            tw: r.tw,
        };
        RoutingInstance::from_parts(r.task, r.coords, dist, dur, features, r.source_city, r.seed)
    }
}

/// Subsamples one instance. The result is a pure function of
/// `(map, task, n_sub, sampler, seed)`.
pub fn make_instance(
    map: &BaseMap,
    task: Task,
    n_sub: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<RoutingInstance, InstanceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tot = map.n_tot();
    let s = match sampler {
        Sampler::Uniform => sample_indices_uniform(n_tot, n_sub, &mut rng)?,
        Sampler::Cluster { n_clusters } => {
            sample_indices_cluster(n_tot, n_sub, n_clusters, &map.coords_norm_f64(), &mut rng)?
        }
    };
    let (dist, dur) = subsample_matrices(map, &s)?;
    let sub: Vec<[f64; 2]> = s
        .as_slice()
        .iter()
        .map(|&i| [f64::from(map.coords_norm[i][0]), f64::from(map.coords_norm[i][1])])
        .collect();
    let coords = normalize_unit_square(&sub);

    let mut inst = RoutingInstance {
        task,
        angle: angle_matrix(&coords),
        coords,
        dist,
        dur,
        demands: None,
        capacity: None,
        tw: None,
        source_city: map.name.clone(),
        seed,
        indices: Some(s.as_slice().to_vec()),
    };
    for _ in 0..MAX_FEATURE_ATTEMPTS {
        let f = gen_features(task, n_sub, &mut rng)?;
        inst.demands = f.demands;
        inst.capacity = f.capacity;
        inst.tw = f.tw;
        if inst.time_windows_feasible() {
            return Ok(inst);
        }
    }
    Err(InstanceError::Infeasible(MAX_FEATURE_ATTEMPTS))
}

/// `count` instances with seeds derived from `seed`, cycling over `maps`.
pub fn make_dataset(
    maps: &[BaseMap],
    task: Task,
    n_sub: usize,
    sampler: Sampler,
    count: usize,
    seed: u64,
) -> Result<Vec<RoutingInstance>, InstanceError> {
    (0..count)
        .map(|k| {
            let s = crate::derive_seed(seed, k as u64);
            make_instance(&maps[k % maps.len()], task, n_sub, sampler, s)
        })
        .collect()
}

pub fn write_dataset(path: impl AsRef<Path>, instances: &[RoutingInstance]) -> Result<(), InstanceError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        writeln!(w, "{}", inst.to_json())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<RoutingInstance>, InstanceError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|source| InstanceError::Json { line: k + 1, source })?;
        out.push(rec.try_into()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_basemap, SynthConfig};

    fn map(n: usize) -> BaseMap {
        synth_basemap(&SynthConfig::new(n, 11)).unwrap()
    }

    #[test]
    fn uniform_full_subset_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = sample_indices_uniform(5, 5, &mut rng).unwrap().as_slice().to_vec();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
        assert!(sample_indices_uniform(4, 5, &mut rng).is_err());
    }

    #[test]
    fn uniform_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 10];
        let draws = 20_000;
        for _ in 0..draws {
            for &i in sample_indices_uniform(10, 3, &mut rng).unwrap().as_slice() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.3).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn single_cluster_is_seed_plus_nearest() {
        let m = map(60);
        let coords = m.coords_norm_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_indices_cluster(60, 5, 1, &coords, &mut rng).unwrap();
        let seed = s.as_slice()[0];
        // brute force: sort all other points by squared distance to the seed
        let mut others: Vec<(f64, usize)> = (0..60)
            .filter(|&j| j != seed)
            .map(|j| {
                let d = (coords[j][0] - coords[seed][0]).powi(2) + (coords[j][1] - coords[seed][1]).powi(2);
                (d, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = others[..4].iter().map(|x| x.1).collect();
        assert_eq!(&s.as_slice()[1..], expect.as_slice());
    }

    #[test]
    fn cluster_count_equal_to_subset_is_uniform_draw() {
        let m = map(40);
        let coords = m.coords_norm_f64();
        let a = sample_indices_cluster(40, 6, 6, &coords, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = sample_indices_uniform(40, 6, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cluster_rejects_bad_counts() {
        let coords = vec![[0.0, 0.0]; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_indices_cluster(10, 4, 0, &coords, &mut rng).is_err());
        assert!(sample_indices_cluster(10, 4, 5, &coords, &mut rng).is_err());
    }

    #[test]
    fn gather_pairs() {
        let m = map(4);
        let id = IndexVector::new(vec![0, 1, 2, 3], 4).unwrap();
        let (d, _) = subsample_matrices(&m, &id).unwrap();
        assert_eq!(d, m.dist.map(f64::from));
        let s = IndexVector::new(vec![2, 0], 4).unwrap();
        let (d, _) = subsample_matrices(&m, &s).unwrap();
        assert_eq!(d.get(0, 1), f64::from(m.dist.get(2, 0)));
        assert!(IndexVector::new(vec![0, 4], 4).is_err());
        assert!(IndexVector::new(vec![1, 1], 4).is_err());
    }

    #[test]
    fn feature_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(gen_features(Task::Atsp, 10, &mut rng).unwrap(), Features::default());
        let f = gen_features(Task::Acvrp, 100, &mut rng).unwrap();
        let d = f.demands.unwrap();
        assert_eq!(d[0], 0.0);
        for &x in &d[1..] {
            let k = x * 50.0;
            assert!((k - k.round()).abs() < 1e-9 && (1.0..=9.0).contains(&k.round()));
        }
        for _ in 0..1000 {
            let f = gen_features(Task::Acvrptw, 20, &mut rng).unwrap();
            for w in f.tw.unwrap() {
                assert!(0.0 <= w[0] && w[0] <= w[1] && w[1] <= TW_HORIZON);
            }
        }
    }

    #[test]
    fn capacity_rule() {
        assert_eq!(capacity_for(100), 50.0);
        assert_eq!(capacity_for(10), 20.0);
        assert_eq!(capacity_for(61), 31.0);
    }

    #[test]
    fn instance_is_deterministic_and_compositional() {
        let m = map(200);
        for task in [Task::Atsp, Task::Acvrp, Task::Acvrptw] {
            let a = make_instance(&m, task, 20, Sampler::Uniform, 77).unwrap();
            assert_eq!(a, make_instance(&m, task, 20, Sampler::Uniform, 77).unwrap());
            let s = a.indices.clone().unwrap();
            for i in 0..20 {
                for j in 0..20 {
                    assert_eq!(a.dist.get(i, j), f64::from(m.dist.get(s[i], s[j])));
                }
            }
            a.validate().unwrap();
            assert!(a.time_windows_feasible());
        }
    }

    #[test]
    fn json_round_trip_preserves_instance() {
        let m = map(50);
        let mut a = make_instance(&m, Task::Acvrptw, 8, Sampler::Cluster { n_clusters: 2 }, 3).unwrap();
        let back = RoutingInstance::from_json(&a.to_json()).unwrap();
        a.indices = None;
        assert_eq!(back, a);
    }
}
