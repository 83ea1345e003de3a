//! Structured triangulations of the unit square and linear finite-element
//! assembly.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{BandedCholesky, CsrMatrix};
use crate::transport::VelocityField;

/// Axis-aligned rectangular obstacle removed from the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hole {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Hole {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains_interior(&self, x: f64, y: f64) -> bool {
        x > self.x0 && x < self.x1 && y > self.y0 && y < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nx: usize,
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<bool>,
    pub holes: Vec<Hole>,
}

fn grid_index(value: f64, nx: usize) -> Option<usize> {
    let scaled = value * nx as f64;
    let rounded = scaled.round();
    ((scaled - rounded).abs() < 1e-9).then_some(rounded as usize)
}

/// Structured right-angle triangulation of `[0,1]²` with `nx` cells per side
/// and two triangles per retained cell. Cells covered by a hole are dropped,
/// together with any node that no longer touches a triangle.
pub fn build_mesh(nx: usize, holes: &[Hole]) -> Result<Mesh> {
    if nx < 2 {
        return Err(Error::Mesh(format!("nx must be at least 2, got {nx}")));
    }
    let mut hole_cells = Vec::with_capacity(holes.len());
    for h in holes {
        if !(0.0 < h.x0 && h.x0 < h.x1 && h.x1 < 1.0 && 0.0 < h.y0 && h.y0 < h.y1 && h.y1 < 1.0) {
            return Err(Error::Mesh(format!("hole {h:?} is not strictly inside (0,1)²")));
        }
        let idx = [h.x0, h.y0, h.x1, h.y1].map(|v| grid_index(v, nx));
        match idx {
            [Some(a), Some(b), Some(c), Some(d)] => hole_cells.push((a, b, c, d)),
            _ => {
                return Err(Error::Mesh(format!(
                    "hole {h:?} is not aligned to the {nx}x{nx} grid (spacing {})",
                    1.0 / nx as f64
                )))
            }
        }
    }
    let cell_removed = |ci: usize, cj: usize| {
        hole_cells
            .iter()
            .any(|&(i0, j0, i1, j1)| ci >= i0 && ci < i1 && cj >= j0 && cj < j1)
    };

    let stride = nx + 1;
    let mut used = vec![false; stride * stride];
    let mut cells = Vec::new();
    for cj in 0..nx {
        for ci in 0..nx {
            if cell_removed(ci, cj) {
                continue;
            }
            cells.push((ci, cj));
            for (di, dj) in [(0, 0), (1, 0), (1, 1), (0, 1)] {
                used[(cj + dj) * stride + ci + di] = true;
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Mesh("holes cover the whole domain".into()));
    }

    // Row-major numbering of retained nodes keeps the bandwidth near nx.
    let mut number = vec![usize::MAX; stride * stride];
    let mut nodes = Vec::new();
    let h = 1.0 / nx as f64;
    for gj in 0..stride {
        for gi in 0..stride {
            let g = gj * stride + gi;
            if used[g] {
                number[g] = nodes.len();
                nodes.push([gi as f64 * h, gj as f64 * h]);
            }
        }
    }

    let mut triangles = Vec::with_capacity(2 * cells.len());
    for (ci, cj) in cells {
        let a = number[cj * stride + ci];
        let b = number[cj * stride + ci + 1];
        let c = number[(cj + 1) * stride + ci + 1];
        let d = number[(cj + 1) * stride + ci];
        triangles.push([a, b, c]);
        triangles.push([a, c, d]);
    }

    let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &triangles {
        for (p, q) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *edge_count.entry((p.min(q), p.max(q))).or_default() += 1;
        }
    }
    let mut boundary = vec![false; nodes.len()];
    for (&(p, q), &count) in &edge_count {
        if count == 1 {
            boundary[p] = true;
            boundary[q] = true;
        }
    }

    Ok(Mesh {
        nx,
        nodes,
        triangles,
        boundary,
        holes: holes.to_vec(),
    })
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Index of the node closest to `p`.
    pub fn nearest_node(&self, p: [f64; 2]) -> usize {
        let d2 = |q: &[f64; 2]| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        (0..self.nodes.len())
            .min_by(|&i, &j| d2(&self.nodes[i]).total_cmp(&d2(&self.nodes[j])))
            .expect("mesh has nodes")
    }

    pub fn in_hole(&self, x: f64, y: f64) -> bool {
        self.holes.iter().any(|h| h.contains_interior(x, y))
    }
}

/// Mass, stiffness and advection matrices of linear triangular elements.
#[derive(Debug, Clone)]
pub struct AssembledOperators {
    /// Consistent mass matrix.
    pub mass: CsrMatrix,
    /// Stiffness matrix of `-Δ` with natural boundary conditions.
    pub stiffness: CsrMatrix,
    /// `N_ij = ∫ (v·∇φ_j) φ_i`, one-point centroid quadrature.
    pub advection: CsrMatrix,
}

impl AssembledOperators {
    pub fn n(&self) -> usize {
        self.mass.nrows()
    }

    /// Row-sum lumped mass matrix.
    pub fn lumped_mass(&self) -> CsrMatrix {
        CsrMatrix::from_diagonal(&self.mass.row_sums())
    }

    /// The mass matrix used everywhere else for the given mode.
    pub fn mass_for(&self, mode: MassMode) -> CsrMatrix {
        match mode {
            MassMode::Lumped => self.lumped_mass(),
            MassMode::Cholesky => self.mass.clone(),
        }
    }
}

pub fn assemble(mesh: &Mesh, velocity: &dyn VelocityField) -> Result<AssembledOperators> {
    let n = mesh.n_nodes();
    let mut m = Vec::with_capacity(9 * mesh.triangles.len());
    let mut k = Vec::with_capacity(9 * mesh.triangles.len());
    let mut adv = Vec::with_capacity(9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.signed_area(t);
        if !(area > 1e-14) {
            return Err(Error::DegenerateTriangle(t));
        }
        let p = tri.map(|i| mesh.nodes[i]);
        // ∇φ_i = (y_j - y_k, x_k - x_j) / 2A over cyclic (i, j, k)
        let grads: [[f64; 2]; 3] = std::array::from_fn(|i| {
            let (j, l) = ((i + 1) % 3, (i + 2) % 3);
            [(p[j][1] - p[l][1]) / (2.0 * area), (p[l][0] - p[j][0]) / (2.0 * area)]
        });
        let c = mesh.centroid(t);
        let v = velocity.velocity(c[0], c[1]);
        for a in 0..3 {
            for b in 0..3 {
                let (i, j) = (tri[a], tri[b]);
                let mass = if a == b { area / 6.0 } else { area / 12.0 };
                m.push((i, j, mass));
                k.push((i, j, area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1])));
                let vg = v[0] * grads[b][0] + v[1] * grads[b][1];
                if vg != 0.0 {
                    adv.push((i, j, area * vg / 3.0));
                }
            }
        }
    }
    Ok(AssembledOperators {
        mass: CsrMatrix::from_triplets(n, n, &m),
        stiffness: CsrMatrix::from_triplets(n, n, &k),
        advection: CsrMatrix::from_triplets(n, n, &adv),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MassMode {
    #[default]
    Lumped,
    Cholesky,
}

/// Factor `R` with `M = R Rᵀ`.
#[derive(Debug, Clone)]
pub enum MassFactor {
    Lumped { sqrt_diag: Vec<f64> },
    Cholesky(BandedCholesky),
}

impl MassFactor {
    /// Factors `mass`. In lumped mode `mass` must already be the lumped
    /// (diagonal) matrix, see [`AssembledOperators::mass_for`].
    pub fn new(mass: &CsrMatrix, mode: MassMode) -> Result<Self> {
        match mode {
            MassMode::Lumped => {
                if !mass.is_diagonal() {
                    return Err(Error::InvalidArgument(
                        "lumped mass factor requires a diagonal mass matrix".into(),
                    ));
                }
                let sqrt_diag = mass
                    .diagonal()
                    .into_iter()
                    .enumerate()
                    .map(|(i, d)| {
                        if d > 0.0 {
                            Ok(d.sqrt())
                        } else {
                            Err(Error::NotPositiveDefinite { pivot: i, value: d })
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self::Lumped { sqrt_diag })
            }
            MassMode::Cholesky => Ok(Self::Cholesky(BandedCholesky::factor(mass)?)),
        }
    }

    pub fn mode(&self) -> MassMode {
        match self {
            Self::Lumped { .. } => MassMode::Lumped,
            Self::Cholesky(_) => MassMode::Cholesky,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Lumped { sqrt_diag } => sqrt_diag.len(),
            Self::Cholesky(c) => c.dim(),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Self::Lumped { sqrt_diag } => sqrt_diag.clone(),
            Self::Cholesky(c) => c.diagonal(),
        }
    }

    /// `R x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Lumped { sqrt_diag } => x.iter().zip(sqrt_diag).map(|(a, b)| a * b).collect(),
            Self::Cholesky(c) => c.mul_lower(x),
        }
    }

    /// `Rᵀ x`
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Lumped { .. } => self.apply(x),
            Self::Cholesky(c) => c.mul_lower_transpose(x),
        }
    }

    /// `R⁻¹ x`
    pub fn solve(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Lumped { sqrt_diag } => x.iter().zip(sqrt_diag).map(|(a, b)| a / b).collect(),
            Self::Cholesky(c) => {
                let mut y = x.to_vec();
                c.solve_lower_in_place(&mut y);
                y
            }
        }
    }

    /// `R⁻ᵀ x`
    pub fn solve_transpose(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Lumped { .. } => self.solve(x),
            Self::Cholesky(c) => {
                let mut y = x.to_vec();
                c.solve_lower_transpose_in_place(&mut y);
                y
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::DoubleGyre;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ops(nx: usize, holes: &[Hole], amplitude: f64) -> (Mesh, AssembledOperators) {
        let mesh = build_mesh(nx, holes).unwrap();
        let v = DoubleGyre::new(amplitude, holes.to_vec());
        let a = assemble(&mesh, &v).unwrap();
        (mesh, a)
    }

    #[test]
    fn structured_counts() {
        let mesh = build_mesh(2, &[]).unwrap();
        assert_eq!(mesh.n_nodes(), 9);
        assert_eq!(mesh.triangles.len(), 8);
        assert_eq!(mesh.boundary.iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn nx_below_two_is_rejected() {
        assert!(matches!(build_mesh(1, &[]), Err(Error::Mesh(_))));
    }

    #[test]
    fn misaligned_hole_is_rejected() {
        let err = build_mesh(4, &[Hole::new(0.3, 0.25, 0.5, 0.5)]).unwrap_err();
        assert!(err.to_string().contains("not aligned"));
        assert!(build_mesh(4, &[Hole::new(0.0, 0.25, 0.5, 0.5)]).is_err());
    }

    #[test]
    fn single_cell_hole_matches_enumeration() {
        let hole = Hole::new(0.25, 0.25, 0.5, 0.5);
        let mesh = build_mesh(4, &[hole]).unwrap();

        // Brute force: enumerate cells by their centre, keep those outside the hole.
        let kept: Vec<(usize, usize)> = (0..4)
            .flat_map(|j| (0..4).map(move |i| (i, j)))
            .filter(|&(i, j)| !hole.contains_interior((i as f64 + 0.5) / 4.0, (j as f64 + 0.5) / 4.0))
            .collect();
        assert_eq!(kept.len(), 15);
        assert_eq!(mesh.triangles.len(), 2 * kept.len());
        assert_eq!(mesh.triangles.len(), 30);
        // A single-cell hole has no interior nodes; its four corners join the boundary.
        assert_eq!(mesh.n_nodes(), 25);
        let boundary: usize = mesh.boundary.iter().filter(|&&b| b).count();
        assert_eq!(boundary, 16 + 4);
        assert!((mesh.area() - (1.0 - hole.area())).abs() < 1e-14);
    }

    #[test]
    fn larger_hole_drops_interior_nodes() {
        let hole = Hole::new(0.25, 0.25, 0.75, 0.5);
        let mesh = build_mesh(4, &[hole]).unwrap();
        // A 2x1 hole has no strictly interior grid node.
        assert_eq!(mesh.n_nodes(), 25);
        let hole = Hole::new(0.25, 0.25, 0.75, 0.75);
        let mesh = build_mesh(4, &[hole]).unwrap();
        assert_eq!(mesh.n_nodes(), 24);
        for t in 0..mesh.triangles.len() {
            assert!(mesh.signed_area(t) > 0.0);
            let c = mesh.centroid(t);
            assert!(!hole.contains_interior(c[0], c[1]));
        }
    }

    #[test]
    fn mass_sums_to_area_and_stiffness_kills_constants() {
        for (nx, holes) in [(4, vec![]), (8, vec![Hole::new(0.25, 0.5, 0.5, 0.75)]), (6, vec![])] {
            let (mesh, a) = ops(nx, &holes, 1.0);
            assert!((a.mass.sum() - mesh.area()).abs() < 1e-12);
            let k1 = a.stiffness.mul_vec(&vec![1.0; mesh.n_nodes()]);
            let scale = a.stiffness.max_abs();
            assert!(k1.iter().all(|v| v.abs() <= 1e-12 * scale));
            assert!(a.stiffness.row_sums().iter().all(|v| v.abs() <= 1e-12 * scale));
        }
    }

    #[test]
    fn refinement_keeps_area() {
        let holes = [Hole::new(0.25, 0.25, 0.5, 0.5)];
        let (_, a4) = ops(4, &holes, 0.0);
        let (_, a8) = ops(8, &holes, 0.0);
        let (_, a16) = ops(16, &holes, 0.0);
        assert!(a8.n() > a4.n() && a16.n() > a8.n());
        assert!((a4.mass.sum() - 0.9375).abs() < 1e-10);
        assert!((a8.mass.sum() - 0.9375).abs() < 1e-10);
        assert!((a16.mass.sum() - 0.9375).abs() < 1e-10);
    }

    #[test]
    fn zero_velocity_gives_empty_advection() {
        let (_, a) = ops(4, &[], 0.0);
        assert_eq!(a.advection.nnz(), 0);
        assert_eq!(a.advection.max_abs(), 0.0);
    }

    #[test]
    fn advection_annihilates_constants() {
        let (mesh, a) = ops(6, &[], 1.0);
        let v = a.advection.mul_vec(&vec![1.0; mesh.n_nodes()]);
        assert!(v.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn mass_positive_stiffness_semidefinite() {
        let (mesh, a) = ops(5, &[], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x: Vec<f64> = (0..mesh.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mx = a.mass.mul_vec(&x);
            let kx = a.stiffness.mul_vec(&x);
            let xmx: f64 = x.iter().zip(&mx).map(|(a, b)| a * b).sum();
            let xkx: f64 = x.iter().zip(&kx).map(|(a, b)| a * b).sum();
            assert!(xmx > 0.0);
            assert!(xkx >= -1e-14);
        }
    }

    #[test]
    fn lumped_factor_of_diagonal() {
        let m = CsrMatrix::from_diagonal(&[4.0, 9.0]);
        let r = MassFactor::new(&m, MassMode::Lumped).unwrap();
        assert_eq!(r.diagonal(), vec![2.0, 3.0]);
    }

    #[test]
    fn cholesky_factor_of_two_by_two() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]);
        let r = MassFactor::new(&m, MassMode::Cholesky).unwrap();
        let rd = DMatrix::from_fn(2, 2, |i, j| {
            let mut e = vec![0.0; 2];
            e[j] = 1.0;
            r.apply(&e)[i]
        });
        let diff = &rd * rd.transpose() - m.to_dense();
        assert!(diff.norm() < 1e-14);
    }

    #[test]
    fn lumped_factor_squares_to_row_sums() {
        let (_, a) = ops(4, &[], 1.0);
        let r = MassFactor::new(&a.mass_for(MassMode::Lumped), MassMode::Lumped).unwrap();
        let sums = a.mass.row_sums();
        for (d, s) in r.diagonal().iter().zip(&sums) {
            assert!((d * d - s).abs() < 1e-15);
        }
    }

    #[test]
    fn factor_roundtrip_both_modes() {
        let (_, a) = ops(6, &[Hole::new(1.0 / 3.0, 1.0 / 3.0, 0.5, 2.0 / 3.0)], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [MassMode::Lumped, MassMode::Cholesky] {
            let m = a.mass_for(mode);
            let r = MassFactor::new(&m, mode).unwrap();
            let dense_r = DMatrix::from_fn(a.n(), a.n(), |i, j| {
                let mut e = vec![0.0; a.n()];
                e[j] = 1.0;
                r.apply(&e)[i]
            });
            let md = m.to_dense();
            assert!((&dense_r * dense_r.transpose() - &md).norm() / md.norm() <= 1e-12);
            assert!(r.diagonal().iter().all(|&d| d > 0.0));
            for _ in 0..100 {
                let x: Vec<f64> = (0..a.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let rrx = r.apply(&r.apply_transpose(&x));
                let mx = m.mul_vec(&x);
                let err: f64 = rrx.iter().zip(&mx).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                let nrm: f64 = mx.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(err <= 1e-10 * nrm);
                let back = r.solve_transpose(&r.solve(&rrx));
                let e2: f64 = back.iter().zip(&x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(e2 < 1e-10);
            }
        }
    }

    #[test]
    fn lumped_mode_rejects_consistent_mass() {
        let (_, a) = ops(3, &[], 0.0);
        assert!(MassFactor::new(&a.mass, MassMode::Lumped).is_err());
    }
}
