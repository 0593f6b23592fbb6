//! Tetrahedral grids, differentiable marching tetrahedra and triangle-mesh utilities.
//!
//! Sign convention: `s > 0` is outside, `s <= 0` inside. Extracted faces are counter-clockwise
//! seen from outside, so `(b − a) × (c − a)` points toward positive `s`.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Tensor, Var};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Regular lattice over `[-1, 1]³` with `res` cells per axis, each cube split into 6 tets.
#[derive(Clone, Debug)]
pub struct TetGrid {
    pub res: usize,
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[u32; 4]>,
}

impl TetGrid {
    /// Kuhn subdivision: one tet per axis permutation, each walking from the cube's minimum
    /// corner to its maximum corner along unit steps. All cubes share the main diagonal
    /// direction, so neighbouring cubes meet in conforming faces.
    pub fn build(res: usize) -> Result<Self> {
        if res < 1 {
            return invalid("tet grid needs at least one cell per axis");
        }
        let n = res + 1;
        let h = 2.0 / res as f64;
        let mut vertices = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    vertices.push([-1.0 + h * i as f64, -1.0 + h * j as f64, -1.0 + h * k as f64]);
                }
            }
        }
        let idx = |i: usize, j: usize, k: usize| (i + n * (j + n * k)) as u32;
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut tets = Vec::with_capacity(6 * res * res * res);
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    for perm in PERMS {
                        let mut c = [i, j, k];
                        let mut t = [idx(c[0], c[1], c[2]); 4];
                        for (step, &axis) in perm.iter().enumerate() {
                            c[axis] += 1;
                            t[step + 1] = idx(c[0], c[1], c[2]);
                        }
                        if signed_volume(&vertices, t) < 0.0 {
                            t.swap(2, 3);
                        }
                        tets.push(t);
                    }
                }
            }
        }
        Ok(Self { res, vertices, tets })
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.res as f64
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.res + 1;
        i + n * (j + n * k)
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        signed_volume(&self.vertices, self.tets[t])
    }

    /// Grid vertex positions as an `[V, 3]` tensor.
    pub fn vertex_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.vertices.len(), 3],
            self.vertices.iter().flatten().copied().collect(),
        )
    }
}

fn signed_volume(v: &[Vec3], t: [u32; 4]) -> f64 {
    let p0 = v[t[0] as usize];
    let a = sub(v[t[1] as usize], p0);
    let b = sub(v[t[2] as usize], p0);
    let c = sub(v[t[3] as usize], p0);
    dot(a, cross(b, c)) / 6.0
}

/// Bounded deformation `0.99·(h/2)·tanh(raw)` per axis, `h = 2/res`.
pub fn bound_deform(raw: f64, res: usize) -> f64 {
    deform_scale(res) * raw.tanh()
}

pub fn deform_scale(res: usize) -> f64 {
    0.99 / res as f64
}

pub fn bound_deform_var(raw: Var<'_>, res: usize) -> Result<Var<'_>> {
    raw.tanh()?.mul_scalar(deform_scale(res))
}

/// Triangles of the 16 inside/outside patterns of a positively oriented tet. Bit `i` of the
/// index is set when local vertex `i` is inside. Each triangle lists three crossing edges as
/// (inside vertex, outside vertex) pairs, ordered counter-clockwise seen from outside.
pub fn case_table() -> &'static [Vec<[[u8; 2]; 3]>; 16] {
    static TABLE: OnceLock<[Vec<[[u8; 2]; 3]>; 16]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(build_case))
}

fn build_case(mask: usize) -> Vec<[[u8; 2]; 3]> {
    let ref_tet: [Vec3; 4] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let s: Vec<f64> = (0..4).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
    let ins: Vec<u8> = (0..4).filter(|i| mask >> i & 1 == 1).collect();
    let outs: Vec<u8> = (0..4).filter(|i| mask >> i & 1 == 0).collect();
    let tris: Vec<[[u8; 2]; 3]> = match (ins.as_slice(), outs.as_slice()) {
        ([a], [o0, o1, o2]) => vec![[[*a, *o0], [*a, *o1], [*a, *o2]]],
        ([i0, i1, i2], [o]) => vec![[[*i0, *o], [*i1, *o], [*i2, *o]]],
        ([a, b], [c, d]) => vec![
            [[*a, *c], [*a, *d], [*b, *d]],
            [[*a, *c], [*b, *d], [*b, *c]],
        ],
        _ => Vec::new(),
    };
    // gradient of the linear interpolant on the reference tet
    let grad = [s[1] - s[0], s[2] - s[0], s[3] - s[0]];
    let mid = |e: [u8; 2]| {
        let (p, q) = (ref_tet[e[0] as usize], ref_tet[e[1] as usize]);
        [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]
    };
    tris.into_iter()
        .map(|mut t| {
            let n = cross(sub(mid(t[1]), mid(t[0])), sub(mid(t[2]), mid(t[0])));
            if dot(n, grad) < 0.0 {
                t.swap(1, 2);
            }
            t
        })
        .collect()
}

/// Inside/outside pattern of a tet under the `s <= 0` inside convention.
#[inline]
pub fn tet_case(s: [f64; 4]) -> usize {
    (0..4).filter(|&i| s[i] <= 0.0).map(|i| 1 << i).sum()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<Vec3>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return invalid(format!("face {f:?} indexes past {n} vertices"));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return invalid("non-finite mesh vertex");
        }
        Ok(Self {
            vertices,
            faces,
            colors: None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        cross(sub(b, a), sub(c, a))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Vertex positions as an `[M, 3]` tensor.
    pub fn vertex_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.vertices.len(), 3],
            self.vertices.iter().flatten().copied().collect(),
        )
    }

    /// Regular tetrahedron with unit edges, outward-oriented.
    pub fn regular_tetrahedron() -> Self {
        let a = 1.0 / 8f64.sqrt();
        let vertices = vec![[a, a, a], [a, -a, -a], [-a, a, -a], [-a, -a, a]];
        let mut faces: Vec<[u32; 3]> = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        for f in &mut faces {
            let [p, q, r] = f.map(|i| vertices[i as usize]);
            let c = [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0, (p[2] + q[2] + r[2]) / 3.0];
            if dot(cross(sub(q, p), sub(r, p)), c) < 0.0 {
                f.swap(1, 2);
            }
        }
        Self {
            vertices,
            faces,
            colors: None,
        }
    }
}

/// Combinatorial part of a marching-tets extraction: which grid edges carry surface vertices
/// and how they are connected. Case selection is piecewise constant, so this part carries no
/// gradient; positions come from [`crossing_points`].
#[derive(Clone, Debug, Default)]
pub struct SurfaceTopology {
    /// Grid vertices touched by a crossing edge, ascending.
    pub used: Vec<u32>,
    /// Per surface vertex: (inside, outside) endpoints as indices into `used`.
    pub edges: Vec<[u32; 2]>,
    pub faces: Vec<[u32; 3]>,
}

impl SurfaceTopology {
    pub fn num_vertices(&self) -> usize {
        self.edges.len()
    }
}

/// Select surface topology from per-vertex SDF values. Tets are scanned in index order, so
/// vertex numbering is deterministic.
pub fn extract_topology(grid: &TetGrid, sdf: &[f64]) -> Result<SurfaceTopology> {
    if sdf.len() != grid.num_vertices() {
        return shape_err(
            "marching_tets",
            format!("{} sdf values for {} grid vertices", sdf.len(), grid.num_vertices()),
        );
    }
    let table = case_table();
    let mut edge_ids: HashMap<(u32, u32), u32> = HashMap::new();
    let mut global_edges: Vec<[u32; 2]> = Vec::new();
    let mut faces = Vec::new();
    for t in &grid.tets {
        let s = t.map(|i| sdf[i as usize]);
        let case = tet_case(s);
        if case == 0 || case == 15 {
            continue;
        }
        for tri in &table[case] {
            let mut f = [0u32; 3];
            for (slot, e) in f.iter_mut().zip(tri) {
                let (a, b) = (t[e[0] as usize], t[e[1] as usize]);
                let key = (a.min(b), a.max(b));
                *slot = *edge_ids.entry(key).or_insert_with(|| {
                    global_edges.push([a, b]);
                    (global_edges.len() - 1) as u32
                });
            }
            faces.push(f);
        }
    }
    let mut used: Vec<u32> = global_edges.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let local = |g: u32| used.binary_search(&g).expect("vertex recorded") as u32;
    let edges = global_edges.iter().map(|&[a, b]| [local(a), local(b)]).collect();
    Ok(SurfaceTopology { used, edges, faces })
}

fn crossing_values(base: &[Vec3], topo: &SurfaceTopology, s: &[f64], dv: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(topo.edges.len() * 3);
    for &[a, b] in &topo.edges {
        let (a, b) = (a as usize, b as usize);
        let (sa, sb) = (s[a], s[b]);
        let d = sb - sa;
        for k in 0..3 {
            let va = base[a][k] + dv[a * 3 + k];
            let vb = base[b][k] + dv[b * 3 + k];
            out.push((sb * va - sa * vb) / d);
        }
    }
    out
}

/// Surface vertex positions `[M, 3]` at the linear zero crossing of each topology edge,
/// between deformed endpoints `v′ = v + Δv`. `s_used` `[U]` and `deform_used` `[U, 3]` hold
/// SDF values and bounded deformations of `topo.used`, in that order.
pub fn crossing_points<'t>(
    grid: &TetGrid,
    topo: &SurfaceTopology,
    s_used: Var<'t>,
    deform_used: Var<'t>,
) -> Result<Var<'t>> {
    let u = topo.used.len();
    let (sv, dv) = (s_used.value(), deform_used.value());
    if sv.shape() != [u] || dv.shape() != [u, 3] {
        return shape_err(
            "crossing_points",
            format!("s {:?}, deform {:?} for {u} vertices", sv.shape(), dv.shape()),
        );
    }
    let base: Rc<Vec<Vec3>> = Rc::new(topo.used.iter().map(|&g| grid.vertices[g as usize]).collect());
    let edges = Rc::new(topo.edges.clone());
    let m = edges.len();
    let value = crossing_values(&base, topo, sv.data(), dv.data());
    s_used.tape().custom(
        "crossing_points",
        Tensor::from_parts(vec![m, 3], value),
        &[s_used, deform_used],
        move |g, _| {
            let (s, d) = (sv.data(), dv.data());
            let mut gs = vec![0.0; u];
            let mut gd = vec![0.0; u * 3];
            for (e, &[a, b]) in edges.iter().enumerate() {
                let (a, b) = (a as usize, b as usize);
                let (sa, sb) = (s[a], s[b]);
                let den = sb - sa;
                let gp = &g.data()[e * 3..e * 3 + 3];
                let mut proj = 0.0;
                for k in 0..3 {
                    let va = base[a][k] + d[a * 3 + k];
                    let vb = base[b][k] + d[b * 3 + k];
                    proj += gp[k] * (va - vb);
                    gd[a * 3 + k] += gp[k] * sb / den;
                    gd[b * 3 + k] -= gp[k] * sa / den;
                }
                gs[a] += proj * sb / (den * den);
                gs[b] -= proj * sa / (den * den);
            }
            vec![
                Some(Tensor::from_parts(vec![u], gs)),
                Some(Tensor::from_parts(vec![u, 3], gd)),
            ]
        },
    )
}

/// Non-differentiable extraction from per-vertex SDF values and bounded deformations.
pub fn marching_tets(grid: &TetGrid, sdf: &[f64], deform: &[Vec3]) -> Result<TriMesh> {
    if deform.len() != grid.num_vertices() {
        return shape_err(
            "marching_tets",
            format!("{} deformations for {} grid vertices", deform.len(), grid.num_vertices()),
        );
    }
    let topo = extract_topology(grid, sdf)?;
    Ok(mesh_from_topology(grid, &topo, sdf, deform))
}

pub fn mesh_from_topology(grid: &TetGrid, topo: &SurfaceTopology, sdf: &[f64], deform: &[Vec3]) -> TriMesh {
    let base: Vec<Vec3> = topo.used.iter().map(|&g| grid.vertices[g as usize]).collect();
    let s: Vec<f64> = topo.used.iter().map(|&g| sdf[g as usize]).collect();
    let dv: Vec<f64> = topo.used.iter().flat_map(|&g| deform[g as usize]).collect();
    let flat = crossing_values(&base, topo, &s, &dv);
    TriMesh {
        vertices: flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        faces: topo.faces.clone(),
        colors: None,
    }
}

/// Sorted unique 1-ring neighbours of each vertex.
pub fn neighbours(num_vertices: usize, faces: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut nb: Vec<Vec<u32>> = vec![Vec::new(); num_vertices];
    for f in faces {
        for i in 0..3 {
            let (a, b) = (f[i], f[(i + 1) % 3]);
            nb[a as usize].push(b);
            nb[b as usize].push(a);
        }
    }
    for n in &mut nb {
        n.sort_unstable();
        n.dedup();
    }
    nb
}

/// 1-rings used for smoothing: empty for isolated vertices and for vertices on an open
/// boundary (an edge with a single incident face).
pub fn smoothing_rings(num_vertices: usize, faces: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut nb = neighbours(num_vertices, faces);
    let mut count: HashMap<(u32, u32), u32> = HashMap::new();
    for f in faces {
        for i in 0..3 {
            let (a, b) = (f[i], f[(i + 1) % 3]);
            *count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    for (&(a, b), &c) in &count {
        if c == 1 {
            nb[a as usize].clear();
            nb[b as usize].clear();
        }
    }
    nb
}

fn umbrella(v: &[f64], nb: &[Vec<u32>]) -> Vec<f64> {
    let mut delta = vec![0.0; v.len()];
    for (i, n) in nb.iter().enumerate() {
        if n.is_empty() {
            continue;
        }
        let k = n.len() as f64;
        for c in 0..3 {
            let m = n.iter().map(|&j| v[j as usize * 3 + c]).sum::<f64>() / k;
            delta[i * 3 + c] = v[i * 3 + c] - m;
        }
    }
    delta
}

/// Mean over vertices of `‖v − mean(1-ring)‖²`; isolated and open-boundary vertices
/// contribute 0.
pub fn laplacian_loss(mesh: &TriMesh) -> f64 {
    if mesh.vertices.is_empty() {
        return 0.0;
    }
    let nb = smoothing_rings(mesh.vertices.len(), &mesh.faces);
    let v: Vec<f64> = mesh.vertices.iter().flatten().copied().collect();
    umbrella(&v, &nb).iter().map(|d| d * d).sum::<f64>() / mesh.vertices.len() as f64
}

/// Differentiable uniform Laplacian loss of `[M, 3]` positions with fixed connectivity.
pub fn laplacian_loss_var<'t>(positions: Var<'t>, faces: &[[u32; 3]]) -> Result<Var<'t>> {
    let pv = positions.value();
    let s = pv.shape().to_vec();
    if s.len() != 2 || s[1] != 3 {
        return shape_err("laplacian_loss", format!("positions {s:?}"));
    }
    let m = s[0];
    if m == 0 {
        return positions.tape().custom("laplacian_loss", Tensor::scalar(0.0), &[positions], move |_, _| {
            vec![Some(Tensor::zeros(&[0, 3]))]
        });
    }
    if faces.iter().flatten().any(|&i| i as usize >= m) {
        return shape_err("laplacian_loss", "face index out of range");
    }
    let nb = smoothing_rings(m, faces);
    let delta = umbrella(pv.data(), &nb);
    let loss = delta.iter().map(|d| d * d).sum::<f64>() / m as f64;
    positions.tape().custom(
        "laplacian_loss",
        Tensor::scalar(loss),
        &[positions],
        move |g, _| {
            let k = 2.0 * g.item() / m as f64;
            let mut gv = vec![0.0; m * 3];
            for (i, n) in nb.iter().enumerate() {
                if n.is_empty() {
                    continue;
                }
                let w = 1.0 / n.len() as f64;
                for c in 0..3 {
                    let d = delta[i * 3 + c];
                    gv[i * 3 + c] += k * d;
                    for &j in n {
                        gv[j as usize * 3 + c] -= k * d * w;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![m, 3], gv))]
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<Vec3>,
    pub faces: Vec<usize>,
    pub bary: Vec<Vec3>,
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<SurfaceSamples> {
    if mesh.faces.is_empty() {
        return invalid("cannot sample an empty mesh");
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return invalid("mesh has zero surface area");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SurfaceSamples {
        points: Vec::with_capacity(n),
        faces: Vec::with_capacity(n),
        bary: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let r = rng.gen::<f64>() * acc;
        let f = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let sq = r1.sqrt();
        let b = [1.0 - sq, sq * (1.0 - r2), sq * r2];
        let [p, q, w] = mesh.faces[f].map(|i| mesh.vertices[i as usize]);
        out.points.push(std::array::from_fn(|k| b[0] * p[k] + b[1] * q[k] + b[2] * w[k]));
        out.faces.push(f);
        out.bary.push(b);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WatertightReport {
    pub is_closed: bool,
    pub boundary_edges: usize,
    pub non_manifold_edges: usize,
    /// Edges shared by two faces traversing it in the same direction.
    pub misoriented_edges: usize,
}

/// Closed iff every undirected edge has exactly two incident faces traversing it in
/// opposite directions.
pub fn watertight_report(mesh: &TriMesh) -> WatertightReport {
    let mut edges: HashMap<(u32, u32), (usize, i64)> = HashMap::new();
    for f in &mesh.faces {
        for i in 0..3 {
            let (a, b) = (f[i], f[(i + 1) % 3]);
            let e = edges.entry((a.min(b), a.max(b))).or_insert((0, 0));
            e.0 += 1;
            e.1 += if a < b { 1 } else { -1 };
        }
    }
    let boundary_edges = edges.values().filter(|e| e.0 == 1).count();
    let non_manifold_edges = edges.values().filter(|e| e.0 > 2).count();
    let misoriented_edges = edges.values().filter(|e| e.0 == 2 && e.1 != 0).count();
    WatertightReport {
        is_closed: !mesh.faces.is_empty()
            && boundary_edges == 0
            && non_manifold_edges == 0
            && misoriented_edges == 0,
        boundary_edges,
        non_manifold_edges,
        misoriented_edges,
    }
}
