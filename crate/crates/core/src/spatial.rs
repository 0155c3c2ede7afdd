//! Queen-contiguity spatial weights and the spectral machinery behind the
//! spatial-lag likelihood.
//!
//! Weights are kept as neighbor lists (the binary structure) and expanded to
//! dense matrices on demand. Row standardization is applied on top of the
//! binary structure; islands keep an all-zero row.
//!
//! [`SpectralWeights`] diagonalizes the row-standardized matrix through its
//! symmetric similarity transform `S = D^{-1/2} A D^{-1/2}`, so that
//! `W = D^{-1/2} S D^{1/2}` has real eigenvalues and every quantity the
//! lag-model likelihood and information matrix need (log-determinants,
//! `(I - ρW)^{-1} v`, the traces) is available in O(n) or O(n²) per ρ.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Default snap tolerance for shared boundary points, in coordinate units.
pub const DEFAULT_SNAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum SpatialError {
    #[error("invalid geometry for `{id}`: {reason}")]
    InvalidGeometry { id: String, reason: String },
    #[error("dimension mismatch: weights have {expected} rows, vector has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown id `{0}` in weights")]
    UnknownId(String),
    #[error("weights are malformed: {0}")]
    Malformed(String),
    #[error("weights have no edges; the lag parameter is unidentified")]
    NoEdges,
    #[error("geojson: {0}")]
    GeoJson(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A polygon with an exterior ring and optional holes. Rings are stored open
/// (the closing vertex is not repeated).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<Point>,
    pub holes: Vec<Vec<Point>>,
}

/// A polygon or multipolygon in planar coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub polygons: Vec<Polygon>,
}

fn open_ring(mut ring: Vec<Point>) -> Vec<Point> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

impl Polygon {
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Self {
        Polygon {
            exterior: open_ring(exterior),
            holes: holes.into_iter().map(open_ring).collect(),
        }
    }

    fn rings(&self) -> impl Iterator<Item = &Vec<Point>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }
}

impl Geometry {
    pub fn polygon(exterior: Vec<Point>) -> Self {
        Geometry {
            polygons: vec![Polygon::new(exterior, Vec::new())],
        }
    }

    /// Axis-aligned square with lower-left corner `(x, y)` and side `side`.
    pub fn square(x: f64, y: f64, side: f64) -> Self {
        Geometry::polygon(vec![[x, y], [x + side, y], [x + side, y + side], [x, y + side]])
    }

    fn rings(&self) -> impl Iterator<Item = &Vec<Point>> {
        self.polygons.iter().flat_map(|p| p.rings())
    }

    fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.rings()
            .flat_map(|r| (0..r.len()).map(move |i| (r[i], r[(i + 1) % r.len()])))
    }

    fn vertices(&self) -> impl Iterator<Item = Point> + '_ {
        self.rings().flat_map(|r| r.iter().copied())
    }

    pub fn bbox(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for [x, y] in self.vertices() {
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
        b
    }

    /// Checks finiteness, ring length, non-zero area and ring simplicity.
    pub fn validate(&self) -> Result<(), String> {
        if self.polygons.is_empty() {
            return Err("no polygons".into());
        }
        for ring in self.rings() {
            if ring.len() < 3 {
                return Err(format!("ring has {} distinct vertices", ring.len()));
            }
            if ring.iter().flatten().any(|c| !c.is_finite()) {
                return Err("non-finite coordinate".into());
            }
            if ring_area(ring).abs() == 0.0 {
                return Err("ring has zero area".into());
            }
            if !ring_is_simple(ring) {
                return Err("ring self-intersects".into());
            }
        }
        Ok(())
    }

    /// True when the two geometries share at least one boundary point within
    /// `tol` (a common vertex, a vertex on an edge, or crossing edges).
    pub fn touches(&self, other: &Geometry, tol: f64) -> bool {
        let a = self.bbox();
        let b = other.bbox();
        if a[0] > b[2] + tol || b[0] > a[2] + tol || a[1] > b[3] + tol || b[1] > a[3] + tol {
            return false;
        }
        let tol2 = tol * tol;
        let near = |p: Point, g: &Geometry| g.segments().any(|(s, e)| seg_dist2(p, s, e) <= tol2);
        if self.vertices().any(|p| near(p, other)) || other.vertices().any(|p| near(p, self)) {
            return true;
        }
        self.segments()
            .any(|(p1, p2)| other.segments().any(|(q1, q2)| segments_cross(p1, p2, q1, q2)))
    }
}

fn ring_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let [x1, y1] = ring[i];
            let [x2, y2] = ring[(i + 1) % n];
            x1 * y2 - x2 * y1
        })
        .sum::<f64>()
        * 0.5
}

fn ring_is_simple(ring: &[Point]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share an endpoint by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (ring[j], ring[(j + 1) % n]);
            if segments_cross(a1, a2, b1, b2)
                || seg_dist2(a1, b1, b2) == 0.0
                || seg_dist2(b1, a1, a2) == 0.0
            {
                return false;
            }
        }
    }
    true
}

fn seg_dist2(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    cx * cx + cy * cy
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Proper crossing of two segments (interiors intersect at a single point).
fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Binary contiguity structure with ordered ids. Row standardization is
/// derived, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsMatrix {
    ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
}

impl WeightsMatrix {
    /// Builds weights from neighbor index lists, checking symmetry and the
    /// zero diagonal. Lists are sorted; repeated entries are allowed and
    /// count as parallel links (bootstrap copies).
    pub fn from_neighbors(
        ids: Vec<String>,
        mut neighbors: Vec<Vec<usize>>,
    ) -> Result<Self, SpatialError> {
        let n = ids.len();
        if neighbors.len() != n {
            return Err(SpatialError::Malformed(format!(
                "{} ids but {} neighbor lists",
                n,
                neighbors.len()
            )));
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            if list.iter().any(|&j| j >= n || j == i) {
                return Err(SpatialError::Malformed(format!(
                    "bad neighbor index in row `{}`",
                    ids[i]
                )));
            }
        }
        for i in 0..n {
            for &j in &neighbors[i] {
                let forward = neighbors[i].iter().filter(|&&x| x == j).count();
                let back = neighbors[j].iter().filter(|&&x| x == i).count();
                if forward != back {
                    return Err(SpatialError::Malformed(format!(
                        "asymmetric link `{}`–`{}`",
                        ids[i], ids[j]
                    )));
                }
            }
        }
        Ok(WeightsMatrix { ids, neighbors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn islands(&self) -> Vec<&str> {
        (0..self.len())
            .filter(|&i| self.neighbors[i].is_empty())
            .map(|i| self.ids[i].as_str())
            .collect()
    }

    pub fn binary(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                m[(i, j)] += 1.0;
            }
        }
        m
    }

    /// Row-standardized dense matrix. The last nonzero entry of each row
    /// absorbs the rounding residue, so a left-to-right sum is exactly one.
    pub fn row_standardized(&self) -> DMatrix<f64> {
        let mut m = self.binary();
        for i in 0..self.len() {
            let s: f64 = m.row(i).sum();
            if s > 0.0 {
                m.row_mut(i).scale_mut(1.0 / s);
                let last = (0..m.ncols()).rev().find(|&j| m[(i, j)] != 0.0).expect("row has a neighbor");
                let head: f64 = (0..last).fold(0.0, |acc, j| acc + m[(i, j)]);
                m[(i, last)] = 1.0 - head;
            }
        }
        m
    }

    /// Spatial lag `W y` under row standardization.
    pub fn lag(&self, y: &[f64]) -> Result<Vec<f64>, SpatialError> {
        if y.len() != self.len() {
            return Err(SpatialError::DimensionMismatch {
                expected: self.len(),
                got: y.len(),
            });
        }
        Ok(self
            .neighbors
            .iter()
            .map(|list| {
                if list.is_empty() {
                    0.0
                } else {
                    list.iter().map(|&j| y[j]).sum::<f64>() / list.len() as f64
                }
            })
            .collect())
    }

    /// Sub-structure over `ids` (in the given order). Links to units outside
    /// the subset are dropped, which can create new islands.
    pub fn restrict<S: AsRef<str>>(&self, ids: &[S]) -> Result<WeightsMatrix, SpatialError> {
        let index: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let picks = ids
            .iter()
            .map(|s| {
                index
                    .get(s.as_ref())
                    .copied()
                    .ok_or_else(|| SpatialError::UnknownId(s.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = picks.iter().find(|p| !seen.insert(**p)) {
            return Err(SpatialError::Malformed(format!(
                "duplicate id `{}` in restriction",
                self.ids[*dup]
            )));
        }
        Ok(self.resample(
            &picks,
            ids.iter().map(|s| s.as_ref().to_string()).collect(),
        ))
    }

    /// Weights over a resampled index map: position `a` is a copy of unit
    /// `picks[a]`; copies inherit the original adjacency, so a unit drawn
    /// twice appears twice in each neighbor's list.
    pub fn resample(&self, picks: &[usize], new_ids: Vec<String>) -> WeightsMatrix {
        let mut positions: HashMap<usize, Vec<usize>> = HashMap::new();
        for (a, &orig) in picks.iter().enumerate() {
            positions.entry(orig).or_default().push(a);
        }
        let neighbors = picks
            .iter()
            .map(|&orig| {
                let mut list: Vec<usize> = self.neighbors[orig]
                    .iter()
                    .filter_map(|j| positions.get(j))
                    .flatten()
                    .copied()
                    .collect();
                list.sort_unstable();
                list
            })
            .collect();
        WeightsMatrix {
            ids: new_ids,
            neighbors,
        }
    }

    pub fn to_file(&self) -> WeightsFile {
        WeightsFile {
            ids: self.ids.clone(),
            neighbors: self
                .ids
                .iter()
                .zip(&self.neighbors)
                .map(|(id, list)| (id.clone(), list.iter().map(|&j| self.ids[j].clone()).collect()))
                .collect(),
            islands: self.islands().into_iter().map(String::from).collect(),
            row_standardized: true,
            note: "queen contiguity; rows standardized to sum to one, islands kept as zero rows"
                .into(),
        }
    }

    pub fn from_file(file: &WeightsFile) -> Result<WeightsMatrix, SpatialError> {
        let index: HashMap<&str, usize> = file
            .ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let neighbors = file
            .ids
            .iter()
            .map(|id| {
                file.neighbors
                    .get(id)
                    .map(|list| {
                        list.iter()
                            .map(|n| {
                                index
                                    .get(n.as_str())
                                    .copied()
                                    .ok_or_else(|| SpatialError::UnknownId(n.clone()))
                            })
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .unwrap_or_else(|| Ok(Vec::new()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        WeightsMatrix::from_neighbors(file.ids.clone(), neighbors)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), SpatialError> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<WeightsMatrix, SpatialError> {
        let file: WeightsFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        WeightsMatrix::from_file(&file)
    }
}

/// Audit form of the weights: ids plus neighbor id lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub ids: Vec<String>,
    pub neighbors: BTreeMap<String, Vec<String>>,
    pub islands: Vec<String>,
    pub row_standardized: bool,
    pub note: String,
}

/// Queen contiguity over the given geometries, in map (id) order.
pub fn queen_weights(
    geometries: &BTreeMap<String, Geometry>,
    tol: f64,
) -> Result<WeightsMatrix, SpatialError> {
    let ids: Vec<String> = geometries.keys().cloned().collect();
    let geoms: Vec<&Geometry> = geometries.values().collect();
    queen_weights_ordered(&ids, &geoms, tol)
}

/// Queen contiguity with an explicit id order.
pub fn queen_weights_ordered(
    ids: &[String],
    geoms: &[&Geometry],
    tol: f64,
) -> Result<WeightsMatrix, SpatialError> {
    for (id, g) in ids.iter().zip(geoms) {
        g.validate().map_err(|reason| SpatialError::InvalidGeometry {
            id: id.clone(),
            reason,
        })?;
    }
    let n = geoms.len();
    let boxes: Vec<[f64; 4]> = geoms.iter().map(|g| g.bbox()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| boxes[a][0].total_cmp(&boxes[b][0]));

    let mut neighbors = vec![Vec::new(); n];
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if boxes[j][0] > boxes[i][2] + tol {
                break;
            }
            if geoms[i].touches(geoms[j], tol) {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    let islands = neighbors.iter().filter(|l| l.is_empty()).count();
    if islands > 0 {
        log::warn!("queen weights: {islands} island(s) retained with zero rows");
    }
    WeightsMatrix::from_neighbors(ids.to_vec(), neighbors)
}

/// Operations the spatial-lag estimator needs from a weights structure.
pub trait LagOperator: Sync {
    fn len(&self) -> usize;
    /// Eigenvalues of the row-standardized matrix (real, any order).
    fn eigenvalues(&self) -> &[f64];
    /// `W v`.
    fn lag(&self, v: &DVector<f64>) -> DVector<f64>;
    /// `(I - ρW)^{-1} v`.
    fn inverse_apply(&self, rho: f64, v: &DVector<f64>) -> DVector<f64>;
    /// `W (I - ρW)^{-1} v`.
    fn wa_apply(&self, rho: f64, v: &DVector<f64>) -> DVector<f64>;
    /// `tr(A'A)` with `A = W (I - ρW)^{-1}`.
    fn trace_wa_t_wa(&self, rho: f64) -> f64;

    fn log_det(&self, rho: f64) -> f64 {
        self.eigenvalues().iter().map(|l| (1.0 - rho * l).ln()).sum()
    }

    fn trace_wa(&self, rho: f64) -> f64 {
        self.eigenvalues().iter().map(|l| l / (1.0 - rho * l)).sum()
    }

    fn trace_wa_sq(&self, rho: f64) -> f64 {
        self.eigenvalues()
            .iter()
            .map(|l| (l / (1.0 - rho * l)).powi(2))
            .sum()
    }

    /// Open feasible interval `(1/λ_min, 1/λ_max)` for ρ.
    fn rho_bounds(&self) -> Result<(f64, f64), SpatialError> {
        let ev = self.eigenvalues();
        let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 1e-12 || min >= -1e-12 {
            return Err(SpatialError::NoEdges);
        }
        Ok((1.0 / min, 1.0 / max))
    }
}

/// Eigendecomposition of a row-standardized weights matrix.
pub struct SpectralWeights {
    weights: WeightsMatrix,
    eigenvalues: Vec<f64>,
    vectors: DMatrix<f64>,
    sqrt_deg: Vec<f64>,
    trace_kernel: OnceLock<DMatrix<f64>>,
}

impl SpectralWeights {
    pub fn new(weights: WeightsMatrix) -> Self {
        let n = weights.len();
        // islands get unit "degree": their rows and columns of S are zero anyway
        let deg: Vec<f64> = (0..n).map(|i| weights.degree(i).max(1) as f64).collect();
        let sqrt_deg: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
        let mut s = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for &j in weights.neighbors(i) {
                s[(i, j)] += 1.0 / (sqrt_deg[i] * sqrt_deg[j]);
            }
        }
        let eig = SymmetricEigen::new(s);
        SpectralWeights {
            weights,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            vectors: eig.eigenvectors,
            sqrt_deg,
            trace_kernel: OnceLock::new(),
        }
    }

    pub fn weights(&self) -> &WeightsMatrix {
        &self.weights
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.abs()).fold(0.0, f64::max)
    }

    fn apply_filter(&self, v: &DVector<f64>, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let scaled = DVector::from_iterator(
            v.len(),
            v.iter().zip(&self.sqrt_deg).map(|(x, s)| x * s),
        );
        let mut u = self.vectors.tr_mul(&scaled);
        for (k, l) in self.eigenvalues.iter().enumerate() {
            u[k] *= f(*l);
        }
        let mut r = &self.vectors * u;
        for (i, s) in self.sqrt_deg.iter().enumerate() {
            r[i] /= s;
        }
        r
    }

    // K = (Q' D^{-1} Q) ∘ (Q' D Q); then tr(A'A) = f' K f with f_k = λ_k / (1 - ρλ_k).
    fn kernel(&self) -> &DMatrix<f64> {
        self.trace_kernel.get_or_init(|| {
            let q = &self.vectors;
            let n = q.nrows();
            let q_inv_d = DMatrix::from_fn(n, n, |i, k| q[(i, k)] / (self.sqrt_deg[i].powi(2)));
            let q_d = DMatrix::from_fn(n, n, |i, k| q[(i, k)] * self.sqrt_deg[i].powi(2));
            let c = q.tr_mul(&q_inv_d);
            let e = q.tr_mul(&q_d);
            c.component_mul(&e)
        })
    }
}

impl LagOperator for SpectralWeights {
    fn len(&self) -> usize {
        self.weights.len()
    }

    fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    fn lag(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.weights.lag(v.as_slice()).expect("dimension checked by caller"))
    }

    fn inverse_apply(&self, rho: f64, v: &DVector<f64>) -> DVector<f64> {
        self.apply_filter(v, |l| 1.0 / (1.0 - rho * l))
    }

    fn wa_apply(&self, rho: f64, v: &DVector<f64>) -> DVector<f64> {
        self.apply_filter(v, |l| l / (1.0 - rho * l))
    }

    fn trace_wa_t_wa(&self, rho: f64) -> f64 {
        let f = DVector::from_iterator(
            self.eigenvalues.len(),
            self.eigenvalues.iter().map(|l| l / (1.0 - rho * l)),
        );
        (f.transpose() * self.kernel() * &f)[(0, 0)]
    }
}

/// Block-diagonal `I_L ⊗ W`: the same weights applied independently within
/// each of `layers` stacked copies of the sample.
pub struct Layered<'a> {
    inner: &'a SpectralWeights,
    layers: usize,
    eigenvalues: Vec<f64>,
}

impl<'a> Layered<'a> {
    pub fn new(inner: &'a SpectralWeights, layers: usize) -> Self {
        let eigenvalues = (0..layers)
            .flat_map(|_| inner.eigenvalues.iter().copied())
            .collect();
        Layered {
            inner,
            layers,
            eigenvalues,
        }
    }

    fn per_layer(&self, v: &DVector<f64>, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DVector<f64> {
        let n = self.inner.len();
        let mut out = DVector::zeros(v.len());
        for l in 0..self.layers {
            let block = v.rows(l * n, n).into_owned();
            out.rows_mut(l * n, n).copy_from(&f(&block));
        }
        out
    }
}

impl LagOperator for Layered<'_> {
    fn len(&self) -> usize {
        self.inner.len() * self.layers
    }

    fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    fn lag(&self, v: &DVector<f64>) -> DVector<f64> {
        self.per_layer(v, |b| self.inner.lag(b))
    }

    fn inverse_apply(&self, rho: f64, v: &DVector<f64>) -> DVector<f64> {
        self.per_layer(v, |b| self.inner.inverse_apply(rho, b))
    }

    fn wa_apply(&self, rho: f64, v: &DVector<f64>) -> DVector<f64> {
        self.per_layer(v, |b| self.inner.wa_apply(rho, b))
    }

    fn trace_wa_t_wa(&self, rho: f64) -> f64 {
        self.layers as f64 * self.inner.trace_wa_t_wa(rho)
    }
}

/// Regular lattice of unit squares; ids are `r{row}c{col}` zero-padded.
pub fn lattice(rows: usize, cols: usize) -> BTreeMap<String, Geometry> {
    let mut map = BTreeMap::new();
    for r in 0..rows {
        for c in 0..cols {
            map.insert(lattice_id(r, c), Geometry::square(c as f64, r as f64, 1.0));
        }
    }
    map
}

pub fn lattice_id(row: usize, col: usize) -> String {
    format!("r{row:03}c{col:03}")
}

// GeoJSON FeatureCollection I/O (Polygon and MultiPolygon only).

fn parse_ring(v: &serde_json::Value) -> Result<Vec<Point>, String> {
    v.as_array()
        .ok_or("ring is not an array")?
        .iter()
        .map(|p| {
            let a = p.as_array().ok_or("position is not an array")?;
            match (a.first().and_then(|x| x.as_f64()), a.get(1).and_then(|x| x.as_f64())) {
                (Some(x), Some(y)) => Ok([x, y]),
                _ => Err("position needs two numbers".to_string()),
            }
        })
        .collect()
}

fn parse_polygon(v: &serde_json::Value) -> Result<Polygon, String> {
    let rings = v.as_array().ok_or("polygon is not an array of rings")?;
    let mut parsed = rings.iter().map(parse_ring).collect::<Result<Vec<_>, _>>()?;
    if parsed.is_empty() {
        return Err("polygon has no rings".into());
    }
    let exterior = parsed.remove(0);
    Ok(Polygon::new(exterior, parsed))
}

/// Parses a FeatureCollection whose features carry a `cbg_id` property.
pub fn parse_geojson(text: &str) -> Result<BTreeMap<String, Geometry>, SpatialError> {
    let root: serde_json::Value = serde_json::from_str(text)?;
    let features = root
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| SpatialError::GeoJson("missing `features` array".into()))?;
    let mut out = BTreeMap::new();
    for (k, feat) in features.iter().enumerate() {
        let id = feat
            .pointer("/properties/cbg_id")
            .and_then(|v| v.as_str().map(String::from).or_else(|| v.as_i64().map(|i| i.to_string())))
            .ok_or_else(|| SpatialError::GeoJson(format!("feature {k} lacks properties.cbg_id")))?;
        let geom = feat
            .get("geometry")
            .ok_or_else(|| SpatialError::GeoJson(format!("feature `{id}` lacks geometry")))?;
        let kind = geom.get("type").and_then(|t| t.as_str()).unwrap_or_default();
        let coords = geom.get("coordinates").cloned().unwrap_or_default();
        let parsed = match kind {
            "Polygon" => parse_polygon(&coords).map(|p| Geometry { polygons: vec![p] }),
            "MultiPolygon" => coords
                .as_array()
                .ok_or_else(|| "multipolygon is not an array".to_string())
                .and_then(|ps| {
                    ps.iter()
                        .map(parse_polygon)
                        .collect::<Result<Vec<_>, _>>()
                        .map(|polygons| Geometry { polygons })
                }),
            other => Err(format!("unsupported geometry type `{other}`")),
        }
        .map_err(|reason| SpatialError::InvalidGeometry {
            id: id.clone(),
            reason,
        })?;
        if out.insert(id.clone(), parsed).is_some() {
            return Err(SpatialError::GeoJson(format!("duplicate cbg_id `{id}`")));
        }
    }
    Ok(out)
}

pub fn read_geojson(path: &Path) -> Result<BTreeMap<String, Geometry>, SpatialError> {
    parse_geojson(&std::fs::read_to_string(path)?)
}

fn ring_json(ring: &[Point]) -> serde_json::Value {
    let mut pts: Vec<serde_json::Value> = ring.iter().map(|p| serde_json::json!([p[0], p[1]])).collect();
    if let Some(first) = ring.first() {
        pts.push(serde_json::json!([first[0], first[1]]));
    }
    serde_json::Value::Array(pts)
}

pub fn to_geojson(geoms: &BTreeMap<String, Geometry>) -> serde_json::Value {
    let features: Vec<serde_json::Value> = geoms
        .iter()
        .map(|(id, g)| {
            let polys: Vec<serde_json::Value> = g
                .polygons
                .iter()
                .map(|p| {
                    serde_json::Value::Array(
                        std::iter::once(&p.exterior)
                            .chain(&p.holes)
                            .map(|r| ring_json(r))
                            .collect(),
                    )
                })
                .collect();
            let geometry = if polys.len() == 1 {
                serde_json::json!({"type": "Polygon", "coordinates": polys[0]})
            } else {
                serde_json::json!({"type": "MultiPolygon", "coordinates": polys})
            };
            serde_json::json!({
                "type": "Feature",
                "properties": {"cbg_id": id},
                "geometry": geometry,
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}

pub fn write_geojson(path: &Path, geoms: &BTreeMap<String, Geometry>) -> Result<(), SpatialError> {
    std::fs::write(path, serde_json::to_string(&to_geojson(geoms))? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid3() -> WeightsMatrix {
        queen_weights(&lattice(3, 3), DEFAULT_SNAP_TOLERANCE).unwrap()
    }

    #[test]
    fn grid_degrees() {
        let w = grid3();
        let center = w.ids().iter().position(|s| s == &lattice_id(1, 1)).unwrap();
        let corner = w.ids().iter().position(|s| s == &lattice_id(0, 0)).unwrap();
        let edge = w.ids().iter().position(|s| s == &lattice_id(0, 1)).unwrap();
        assert_eq!(w.degree(center), 8);
        assert_eq!(w.degree(corner), 3);
        assert_eq!(w.degree(edge), 5);
        assert_eq!(w.binary(), w.binary().transpose());
    }

    #[test]
    fn disjoint_squares_are_islands() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Geometry::square(0.0, 0.0, 1.0));
        g.insert("b".to_string(), Geometry::square(2.0, 0.0, 1.0));
        let w = queen_weights(&g, DEFAULT_SNAP_TOLERANCE).unwrap();
        assert_eq!(w.islands(), vec!["a", "b"]);
        assert_eq!(w.lag(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn t_junction_and_snap_tolerance() {
        let mut g = BTreeMap::new();
        // a's right-hand vertices lie inside b's left edge (no shared vertex)
        g.insert("a".to_string(), Geometry::square(0.0, 0.0, 1.0));
        g.insert(
            "b".to_string(),
            Geometry::polygon(vec![[1.0, -1.0], [3.0, -1.0], [3.0, 3.0], [1.0, 3.0]]),
        );
        g.insert("c".to_string(), Geometry::square(1.0 + 1e-11, 5.0, 1.0));
        g.insert("d".to_string(), Geometry::square(0.0, 4.0 - 1e-10, 1.0));
        let w = queen_weights(&g, DEFAULT_SNAP_TOLERANCE).unwrap();
        assert_eq!(w.neighbors(0), &[1]);
        // d's top edge ends at y = 5 - 1e-10; c starts 1e-11 right of x = 1
        assert_eq!(w.neighbors(2), &[3]);
    }

    #[test]
    fn invalid_geometry_is_reported() {
        let mut g = BTreeMap::new();
        g.insert(
            "bowtie".to_string(),
            Geometry::polygon(vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]),
        );
        let err = queen_weights(&g, DEFAULT_SNAP_TOLERANCE).unwrap_err();
        assert!(matches!(err, SpatialError::InvalidGeometry { ref id, .. } if id == "bowtie"));
    }

    #[test]
    fn lag_examples() {
        let w = WeightsMatrix::from_neighbors(vec!["a".into(), "b".into()], vec![vec![1], vec![0]])
            .unwrap();
        assert_eq!(w.lag(&[1.0, 3.0]).unwrap(), vec![3.0, 1.0]);
        let g = grid3();
        let lag = g.lag(&[2.5; 9]).unwrap();
        assert!(lag.iter().all(|v| (v - 2.5).abs() < 1e-15));
        assert!(matches!(
            g.lag(&[1.0; 4]),
            Err(SpatialError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn spectral_routines_match_dense() {
        let w = queen_weights(&lattice(4, 5), DEFAULT_SNAP_TOLERANCE).unwrap();
        let dense = w.row_standardized();
        let sw = SpectralWeights::new(w);
        let n = dense.nrows();
        let rho = 0.37;
        let v = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin());
        let a = DMatrix::identity(n, n) - &dense * rho;
        let a_inv = a.clone().try_inverse().unwrap();
        let wa = &dense * &a_inv;
        assert!((sw.inverse_apply(rho, &v) - &a_inv * &v).amax() < 1e-12);
        assert!((sw.wa_apply(rho, &v) - &wa * &v).amax() < 1e-12);
        assert!((sw.trace_wa(rho) - wa.trace()).abs() < 1e-10);
        assert!((sw.trace_wa_sq(rho) - (&wa * &wa).trace()).abs() < 1e-10);
        assert!((sw.trace_wa_t_wa(rho) - (wa.transpose() * &wa).trace()).abs() < 1e-10);
        assert!((sw.log_det(rho) - a.determinant().ln()).abs() < 1e-10);
        assert!((sw.spectral_radius() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn restrict_and_resample() {
        let w = grid3();
        let sub = w.restrict(&[lattice_id(0, 0), lattice_id(2, 2)]).unwrap();
        assert_eq!(sub.islands().len(), 2);
        let boot = w.resample(&[0, 0, 1], vec!["x".into(), "y".into(), "z".into()]);
        // both copies of unit 0 link to the copy of unit 1, not to each other
        assert_eq!(boot.neighbors(2), &[0, 1]);
        assert_eq!(boot.neighbors(0), &[2]);
    }

    #[test]
    fn geojson_roundtrip() {
        let g = lattice(2, 2);
        let text = serde_json::to_string(&to_geojson(&g)).unwrap();
        assert_eq!(parse_geojson(&text).unwrap(), g);
    }

    #[test]
    fn log_det_matches_dense_across_feasible_rho() {
        let w = queen_weights(&lattice(5, 6), DEFAULT_SNAP_TOLERANCE).unwrap();
        let dense = w.row_standardized();
        let sw = SpectralWeights::new(w);
        let (lo, hi) = sw.rho_bounds().unwrap();
        let n = dense.nrows();
        for i in 0..20 {
            let rho = lo + (hi - lo) * (i as f64 + 0.5) / 20.0;
            let direct = (DMatrix::identity(n, n) - &dense * rho).determinant().ln();
            assert!((sw.log_det(rho) - direct).abs() < 1e-8, "rho {rho}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]

            #[test]
            fn relabeling_permutes_weights(rows in 2usize..6, cols in 2usize..6, key in any::<u64>()) {
                let geoms = lattice(rows, cols);
                let w = queen_weights(&geoms, DEFAULT_SNAP_TOLERANCE).unwrap();
                let mut order: Vec<usize> = (0..w.len()).collect();
                order.sort_by_key(|&i| (i as u64).wrapping_mul(key | 1).rotate_left(17));
                let ids: Vec<String> = order.iter().map(|&i| w.ids()[i].clone()).collect();
                let gs: Vec<&Geometry> = ids.iter().map(|id| &geoms[id]).collect();
                let p = queen_weights_ordered(&ids, &gs, DEFAULT_SNAP_TOLERANCE).unwrap();
                let (a, b) = (w.binary(), p.binary());
                for i in 0..order.len() {
                    for j in 0..order.len() {
                        prop_assert_eq!(b[(i, j)], a[(order[i], order[j])]);
                    }
                }
            }

            #[test]
            fn row_sums_are_zero_or_one(mask in proptest::collection::vec(any::<bool>(), 25)) {
                let geoms: BTreeMap<String, Geometry> = lattice(5, 5)
                    .into_iter()
                    .zip(&mask)
                    .filter(|(_, keep)| **keep)
                    .map(|(kv, _)| kv)
                    .collect();
                prop_assume!(!geoms.is_empty());
                let w = queen_weights(&geoms, DEFAULT_SNAP_TOLERANCE).unwrap();
                let dense = w.row_standardized();
                for (i, row) in dense.row_iter().enumerate() {
                    let s = row.sum();
                    prop_assert!(s == 1.0 || (s == 0.0 && w.degree(i) == 0), "row {} sums to {}", i, s);
                }
                if w.n_edges() > 0 {
                    prop_assert!((SpectralWeights::new(w).spectral_radius() - 1.0).abs() < 1e-8);
                }
            }
        }
    }
}
