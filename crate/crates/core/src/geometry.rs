//! Source-space geometry: triangulated meshes, graph-geodesic cost
//! matrices, Gibbs kernels and label partitions.
//!
//! All distances are in centimeters. Geodesics are shortest paths on the
//! mesh edge graph with Euclidean edge lengths, which is exact on the graph
//! and an upper bound on the true surface geodesic.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;

use crate::error::{param, Error, Result};
use crate::rng::{seeded, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let p = vertices.len();
        if p == 0 {
            return param("mesh has no vertices");
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= p) {
                return Err(Error::Format(format!(
                    "triangle {t} references vertex {bad} but the mesh has {p} vertices"
                )));
            }
        }
        if let Some(v) = vertices.iter().find(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::Format(format!("non-finite vertex coordinate {v:?}")));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    /// Flat `nx x ny` grid in the z = 0 plane, each cell split into two
    /// triangles along its lower-left to upper-right diagonal.
    pub fn grid(nx: usize, ny: usize, spacing_cm: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return param("grid dimensions must be positive");
        }
        if !(spacing_cm > 0.0) {
            return param(format!("grid spacing must be positive, got {spacing_cm}"));
        }
        let idx = |i: usize, j: usize| j * nx + i;
        let mut vertices = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                vertices.push([i as f64 * spacing_cm, j as f64 * spacing_cm, 0.0]);
            }
        }
        let mut triangles = Vec::new();
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        // Degenerate strips have no triangles; connect them with segments
        // encoded as flat triangles so the edge graph stays connected.
        if nx == 1 || ny == 1 {
            let len = nx.max(ny);
            for k in 0..len.saturating_sub(1) {
                triangles.push([k, k + 1, k + 1]);
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Unique undirected edges `(i, j, length)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut pairs: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
            .into_iter()
            .map(|(a, b)| (a, b, euclidean(&self.vertices[a], &self.vertices[b])))
            .collect()
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_vertices()];
        for (a, b, w) in self.edges() {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        adj
    }

    /// Connected components of the edge graph, each sorted, ordered by their
    /// smallest vertex.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; adj.len()];
        let mut out = Vec::new();
        for start in 0..adj.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                for &(j, _) in &adj[i] {
                    if !seen[j] {
                        seen[j] = true;
                        comp.push(j);
                        queue.push_back(j);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Parses the OFF text format: an optional `OFF` keyword, a line with
    /// vertex, face and (ignored) edge counts, then coordinates and faces.
    /// Faces with more than three vertices are fan-triangulated.
    pub fn read_off<R: BufRead>(reader: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        let mut it = tokens.into_iter().peekable();
        if it.peek().map(String::as_str) == Some("OFF") {
            it.next();
        }
        let mut next_num = |what: &str| -> Result<String> {
            it.next()
                .ok_or_else(|| Error::Format(format!("OFF: unexpected end of input reading {what}")))
        };
        let parse_usize = |s: String, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("OFF: bad {what} `{s}`")))
        };
        let n_vert = parse_usize(next_num("vertex count")?, "vertex count")?;
        let n_face = parse_usize(next_num("face count")?, "face count")?;
        let _ = next_num("edge count")?;
        let mut vertices = Vec::with_capacity(n_vert);
        for _ in 0..n_vert {
            let mut v = [0.0; 3];
            for c in &mut v {
                let s = next_num("coordinate")?;
                *c = s
                    .parse()
                    .map_err(|_| Error::Format(format!("OFF: bad coordinate `{s}`")))?;
            }
            vertices.push(v);
        }
        let mut triangles = Vec::with_capacity(n_face);
        for _ in 0..n_face {
            let k = parse_usize(next_num("face arity")?, "face arity")?;
            if k < 2 {
                return Err(Error::Format(format!("OFF: face with {k} vertices")));
            }
            let mut face = Vec::with_capacity(k);
            for _ in 0..k {
                face.push(parse_usize(next_num("face index")?, "face index")?);
            }
            if k == 2 {
                triangles.push([face[0], face[1], face[1]]);
            }
            for w in 1..k.saturating_sub(1) {
                triangles.push([face[0], face[w], face[w + 1]]);
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn load_off(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_off(std::io::BufReader::new(f))
    }

    pub fn write_off<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "OFF")?;
        writeln!(w, "{} {} 0", self.vertices.len(), self.triangles.len())?;
        for v in &self.vertices {
            writeln!(w, "{} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Symmetric, zero-diagonal matrix of pairwise geodesic distances (cm).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    /// Wraps a user-supplied matrix after checking shape, sign, symmetry and
    /// the zero diagonal.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return param(format!("cost matrix must be square, got {r}x{c}"));
        }
        for i in 0..r {
            if m[[i, i]] != 0.0 {
                return Err(Error::Domain(format!("cost matrix diagonal entry {i} is non-zero")));
            }
            for j in 0..r {
                let x = m[[i, j]];
                if !(x >= 0.0) || !x.is_finite() {
                    return Err(Error::Domain(format!("cost entry ({i},{j}) = {x}")));
                }
                if x != m[[j, i]] {
                    return Err(Error::Domain(format!("cost matrix asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Median over the strictly upper triangle; zero for a single point.
    pub fn median_off_diagonal(&self) -> f64 {
        let p = self.dim();
        let mut vals: Vec<f64> = (0..p)
            .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
            .map(|(i, j)| self.0[[i, j]])
            .collect();
        if vals.is_empty() {
            return 0.0;
        }
        vals.sort_by(f64::total_cmp);
        let k = vals.len();
        if k % 2 == 1 {
            vals[k / 2]
        } else {
            0.5 * (vals[k / 2 - 1] + vals[k / 2])
        }
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::save_matrix(path, self.view())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(crate::io::load_matrix(path)?)
    }
}

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then vertex for determinism
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize, dist: &mut [f64]) {
    dist.fill(f64::INFINITY);
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry {
        dist: 0.0,
        vertex: source,
    });
    while let Some(HeapEntry { dist: d, vertex: i }) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        for &(j, w) in &adj[i] {
            let nd = d + w;
            if nd < dist[j] {
                dist[j] = nd;
                heap.push(HeapEntry { dist: nd, vertex: j });
            }
        }
    }
}

/// All-pairs shortest-path distances on the mesh edge graph.
pub fn build_geodesic_costs(mesh: &Mesh) -> Result<CostMatrix> {
    let comps = mesh.components();
    if comps.len() > 1 {
        let isolated = &comps[1];
        return Err(Error::DisconnectedMesh {
            vertex: isolated[0],
            size: isolated.len(),
        });
    }
    let adj = mesh.adjacency();
    let p = mesh.n_vertices();
    let mut m = Array2::zeros((p, p));
    let mut dist = vec![0.0; p];
    for i in 0..p {
        dijkstra(&adj, i, &mut dist);
        // keep the row computed from the lower index so M is exactly symmetric
        for j in i..p {
            m[[i, j]] = dist[j];
            m[[j, i]] = dist[j];
        }
    }
    Ok(CostMatrix(m))
}

/// Elementwise `exp(-M / epsilon)`, together with the cost it came from.
///
/// The cost is kept so that solvers can rebuild rescaled kernels in the log
/// domain without going through underflowed entries.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    epsilon: f64,
    kernel: Array2<f64>,
    cost: Array2<f64>,
    sum: f64,
}

impl GibbsKernel {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.kernel.view()
    }

    pub fn cost(&self) -> ArrayView2<'_, f64> {
        self.cost.view()
    }

    /// Sum of all kernel entries, the constant in `kl(P | K)`.
    pub fn sum(&self) -> f64 {
        self.sum
    }
}

pub fn gibbs_kernel(cost: &CostMatrix, epsilon: f64) -> Result<GibbsKernel> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return param(format!("epsilon must be positive, got {epsilon}"));
    }
    let p = cost.dim();
    let kernel = cost.0.mapv(|c| (-c / epsilon).exp());
    if p > 1 {
        for i in 0..p {
            let row_ok = (0..p).any(|j| j != i && kernel[[i, j]] >= f64::MIN_POSITIVE);
            if !row_ok {
                let min_cost = (0..p)
                    .filter(|&j| j != i)
                    .map(|j| cost.0[[i, j]])
                    .fold(f64::INFINITY, f64::min);
                return Err(Error::KernelUnderflow {
                    row: i,
                    min_cost,
                    epsilon,
                });
            }
        }
    }
    let sum = kernel.sum();
    Ok(GibbsKernel {
        epsilon,
        kernel,
        cost: cost.0.clone(),
        sum,
    })
}

/// Assignment of every vertex to one of `n_labels` edge-connected regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPartition {
    labels: Vec<usize>,
    n_labels: usize,
}

impl LabelPartition {
    pub fn new(labels: Vec<usize>, n_labels: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_labels) {
            return param(format!("label {bad} out of range for {n_labels} labels"));
        }
        Ok(Self { labels, n_labels })
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn label_of(&self, vertex: usize) -> usize {
        self.labels[vertex]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Vertices carrying `label`, ascending.
    pub fn members(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(v, _)| v)
            .collect()
    }
}

/// Grows `q_labels` regions by level-synchronous breadth-first expansion
/// from randomly drawn seed vertices. A vertex reached by several regions
/// in the same level goes to the one with the smallest seed index.
pub fn make_label_partition(mesh: &Mesh, q_labels: usize, seed: u64) -> Result<LabelPartition> {
    let p = mesh.n_vertices();
    if q_labels == 0 || q_labels > p {
        return param(format!("q_labels must be in 1..={p}, got {q_labels}"));
    }
    if mesh.components().len() > 1 {
        return Err(build_geodesic_costs(mesh).unwrap_err());
    }
    let adj = mesh.adjacency();
    let mut rng = seeded(seed, stream::LABELS);
    let seeds = sample(&mut rng, p, q_labels).into_vec();

    const UNSET: usize = usize::MAX;
    let mut labels = vec![UNSET; p];
    let mut frontiers: Vec<Vec<usize>> = Vec::with_capacity(q_labels);
    for (l, &s) in seeds.iter().enumerate() {
        labels[s] = l;
        frontiers.push(vec![s]);
    }
    loop {
        let mut grew = false;
        let mut next: Vec<Vec<usize>> = vec![Vec::new(); q_labels];
        for l in 0..q_labels {
            let mut frontier = std::mem::take(&mut frontiers[l]);
            frontier.sort_unstable();
            for &i in &frontier {
                for &(j, _) in &adj[i] {
                    if labels[j] == UNSET {
                        labels[j] = l;
                        next[l].push(j);
                        grew = true;
                    }
                }
            }
        }
        frontiers = next;
        if !grew {
            break;
        }
    }
    debug_assert!(labels.iter().all(|&l| l != UNSET));
    LabelPartition::new(labels, q_labels)
}

/// Mesh, cost matrix and label partition describing one source space.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub mesh: Mesh,
    pub cost: CostMatrix,
    pub labels: LabelPartition,
}

impl Geometry {
    pub fn new(mesh: Mesh, n_labels: usize, seed: u64) -> Result<Self> {
        let cost = build_geodesic_costs(&mesh)?;
        let labels = make_label_partition(&mesh, n_labels, seed)?;
        Ok(Self { mesh, cost, labels })
    }

    pub fn n_sources(&self) -> usize {
        self.mesh.n_vertices()
    }
}
