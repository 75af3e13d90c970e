//! Macroscale linear elasticity on a regular grid of unit quads.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::homogenize::Mat8;
use crate::sparse::{EnvelopeCholesky, SymmetricAssembler};

/// Value of `x_e` marking a void macro element.
pub const X_MIN: f64 = 1e-9;

/// `nx` by `ny` unit elements. Node `(i, j)` has id `i * (ny + 1) + j` and
/// element `(i, j)` has id `j * nx + i`, with `j = 0` at the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroMesh {
    pub nx: usize,
    pub ny: usize,
}

impl MacroMesh {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return invalid("mesh needs at least one element in each direction");
        }
        Ok(Self { nx, ny })
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.n_nodes()
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        i * (self.ny + 1) + j
    }

    /// Element index to `(i, j)`.
    #[inline]
    pub fn element_ij(&self, e: usize) -> (usize, usize) {
        (e % self.nx, e / self.nx)
    }

    /// Degrees of freedom of element `e`, nodes counter-clockwise from lower-left.
    pub fn edofs(&self, e: usize) -> [usize; 8] {
        let (i, j) = self.element_ij(e);
        let n = [
            self.node(i, j),
            self.node(i + 1, j),
            self.node(i + 1, j + 1),
            self.node(i, j + 1),
        ];
        std::array::from_fn(|a| 2 * n[a / 2] + a % 2)
    }

    /// Element centers in element units.
    pub fn center(&self, e: usize) -> (f64, f64) {
        let (i, j) = self.element_ij(e);
        (i as f64 + 0.5, j as f64 + 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConditions {
    pub fixed: Vec<usize>,
    pub loads: Vec<(usize, f64)>,
    pub prescribed: Vec<(usize, f64)>,
}

impl BoundaryConditions {
    /// Half MBB beam: rollers on the left symmetry edge, vertical support at
    /// the bottom-right corner, downward unit load at the top-left corner.
    pub fn mbb_half(mesh: &MacroMesh, load: f64) -> Self {
        let fixed = (0..=mesh.ny)
            .map(|j| 2 * mesh.node(0, j))
            .chain([2 * mesh.node(mesh.nx, 0) + 1])
            .collect();
        Self {
            fixed,
            loads: vec![(2 * mesh.node(0, mesh.ny) + 1, -load)],
            prescribed: Vec::new(),
        }
    }

    /// Left edge clamped, unit downward load at the middle of the right edge.
    pub fn cantilever(mesh: &MacroMesh, load: f64) -> Self {
        let fixed = (0..=mesh.ny)
            .flat_map(|j| [2 * mesh.node(0, j), 2 * mesh.node(0, j) + 1])
            .collect();
        Self {
            fixed,
            loads: vec![(2 * mesh.node(mesh.nx, mesh.ny / 2) + 1, -load)],
            prescribed: Vec::new(),
        }
    }

    /// Left edge clamped; the right edge is pulled by `stretch` in x with zero
    /// vertical displacement.
    pub fn clamped_stretch(mesh: &MacroMesh, stretch: f64) -> Self {
        let fixed = (0..=mesh.ny)
            .flat_map(|j| [2 * mesh.node(0, j), 2 * mesh.node(0, j) + 1])
            .collect();
        let prescribed = (0..=mesh.ny)
            .flat_map(|j| {
                [
                    (2 * mesh.node(mesh.nx, j), stretch),
                    (2 * mesh.node(mesh.nx, j) + 1, 0.0),
                ]
            })
            .collect();
        Self {
            fixed,
            loads: Vec::new(),
            prescribed,
        }
    }

    fn validate(&self, mesh: &MacroMesh) -> Result<()> {
        let n = mesh.n_dofs();
        let mut kind = vec![0u8; n];
        for &d in &self.fixed {
            if d >= n {
                return invalid(format!("fixed dof {d} out of range"));
            }
            kind[d] |= 1;
        }
        for &(d, v) in &self.prescribed {
            if d >= n || !v.is_finite() {
                return invalid(format!("bad prescribed displacement at dof {d}"));
            }
            if kind[d] & 1 != 0 {
                return invalid(format!("dof {d} is both fixed and prescribed"));
            }
            kind[d] |= 2;
        }
        for &(d, v) in &self.loads {
            if d >= n || !v.is_finite() {
                return invalid(format!("bad load at dof {d}"));
            }
            if kind[d] != 0 {
                return invalid(format!("dof {d} is both loaded and constrained"));
            }
        }
        Ok(())
    }
}

/// Factorized free-dof system, kept for adjoint solves.
#[derive(Debug, Clone)]
pub struct MacroSystem {
    free_index: Vec<Option<usize>>,
    factor: EnvelopeCholesky,
}

impl MacroSystem {
    /// Solves `K_ff lambda_f = g_f`; constrained entries of the result are zero.
    pub fn solve_free(&self, g: &[f64]) -> Vec<f64> {
        let mut rhs = vec![0.0; self.factor.dim()];
        for (d, fi) in self.free_index.iter().enumerate() {
            if let Some(f) = fi {
                rhs[*f] = g[d];
            }
        }
        let sol = self.factor.solve(&rhs);
        self.free_index
            .iter()
            .map(|fi| fi.map_or(0.0, |f| sol[f]))
            .collect()
    }

    pub fn is_free(&self, dof: usize) -> bool {
        self.free_index[dof].is_some()
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub u: Vec<f64>,
    /// `sum_e u_e^T (x_e k_e) u_e`.
    pub compliance: f64,
    /// Every element is void.
    pub degenerate: bool,
    pub system: MacroSystem,
}

impl SolveResult {
    pub fn element_u(&self, mesh: &MacroMesh, e: usize) -> [f64; 8] {
        mesh.edofs(e).map(|d| self.u[d])
    }
}

pub fn quad_form(k: &Mat8, a: &[f64; 8], b: &[f64; 8]) -> f64 {
    let mut s = 0.0;
    for i in 0..8 {
        let mut r = 0.0;
        for j in 0..8 {
            r += k[i][j] * b[j];
        }
        s += a[i] * r;
    }
    s
}

/// Assembles `K = sum_e x_e k_e`, applies the boundary conditions and solves.
pub fn assemble_solve(
    mesh: &MacroMesh,
    ke: &[Mat8],
    x: &[f64],
    bcs: &BoundaryConditions,
) -> Result<SolveResult> {
    let ne = mesh.n_elements();
    if ke.len() != ne || x.len() != ne {
        return invalid(format!(
            "need {ne} element matrices and scalings, got {} and {}",
            ke.len(),
            x.len()
        ));
    }
    bcs.validate(mesh)?;
    let n = mesh.n_dofs();
    let mut known = vec![None; n];
    for &d in &bcs.fixed {
        known[d] = Some(0.0);
    }
    for &(d, v) in &bcs.prescribed {
        known[d] = Some(v);
    }
    let mut free_index = vec![None; n];
    let mut nf = 0;
    for d in 0..n {
        if known[d].is_none() {
            free_index[d] = Some(nf);
            nf += 1;
        }
    }
    let mut f = vec![0.0; nf];
    for &(d, v) in &bcs.loads {
        f[free_index[d].expect("validated")] += v;
    }
    let mut asm = SymmetricAssembler::with_capacity(nf, ne * 36);
    for e in 0..ne {
        let d = mesh.edofs(e);
        for a in 0..8 {
            let Some(fa) = free_index[d[a]] else { continue };
            for b in 0..8 {
                let kab = x[e] * ke[e][a][b];
                match (free_index[d[b]], known[d[b]]) {
                    (Some(fb), _) => asm.add(fa, fb, kab),
                    (None, Some(ub)) => f[fa] -= kab * ub,
                    (None, None) => unreachable!(),
                }
            }
        }
    }
    let factor = EnvelopeCholesky::factor(&asm).map_err(|p| {
        let dof = free_index.iter().position(|&fi| fi == Some(p.dof)).unwrap_or(0);
        let node = dof / 2;
        let (i, j) = (node / (mesh.ny + 1), node % (mesh.ny + 1));
        Error::Singular(format!(
            "stiffness matrix is singular at node ({i}, {j}) {} dof: the node belongs to an unsupported (floating) component",
            if dof % 2 == 0 { "x" } else { "y" }
        ))
    })?;
    let sol = factor.solve(&f);
    let u: Vec<f64> = (0..n)
        .map(|d| match free_index[d] {
            Some(fi) => sol[fi],
            None => known[d].unwrap_or(0.0),
        })
        .collect();
    let mut compliance = 0.0;
    for e in 0..ne {
        let ue = mesh.edofs(e).map(|d| u[d]);
        compliance += x[e] * quad_form(&ke[e], &ue, &ue);
    }
    if !compliance.is_finite() {
        return Err(Error::Numerical("non-finite compliance".into()));
    }
    Ok(SolveResult {
        u,
        compliance,
        degenerate: x.iter().all(|&v| v <= X_MIN),
        system: MacroSystem { free_index, factor },
    })
}

/// `(u_x, u_y)` of the mid-height node row, left to right.
pub fn centerline_displacements(u: &[f64], mesh: &MacroMesh) -> Result<Vec<[f64; 2]>> {
    if !mesh.ny.is_multiple_of(2) {
        return invalid(format!(
            "mesh with {} element rows has no node row at mid-height",
            mesh.ny
        ));
    }
    let j = mesh.ny / 2;
    Ok((0..=mesh.nx)
        .map(|i| {
            let n = mesh.node(i, j);
            [u[2 * n], u[2 * n + 1]]
        })
        .collect())
}

/// Global dof indices of the centerline vertical displacements.
pub fn centerline_dofs(mesh: &MacroMesh) -> Result<Vec<usize>> {
    if !mesh.ny.is_multiple_of(2) {
        return invalid(format!(
            "mesh with {} element rows has no node row at mid-height",
            mesh.ny
        ));
    }
    Ok((0..=mesh.nx)
        .map(|i| 2 * mesh.node(i, mesh.ny / 2) + 1)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homogenize::{element_stiffness_from_c, MaterialModel};
    use nalgebra::{DMatrix, DVector};

    fn iso() -> Mat8 {
        element_stiffness_from_c(&MaterialModel::default().isotropic(1.0))
    }

    #[test]
    fn single_element_matches_hand_assembly() {
        let mesh = MacroMesh::new(1, 1).unwrap();
        // left edge clamped, unit tension split over the right nodes
        let bcs = BoundaryConditions {
            fixed: vec![0, 1, 2, 3],
            loads: vec![(4, 0.5), (6, 0.5)],
            prescribed: vec![],
        };
        let k = iso();
        let r = assemble_solve(&mesh, &[k], &[1.0], &bcs).unwrap();
        // nodes: 0 = (0,0), 1 = (0,1), 2 = (1,0), 3 = (1,1); element order (0,0),(1,0),(1,1),(0,1)
        let ed = mesh.edofs(0);
        assert_eq!(ed, [0, 1, 4, 5, 6, 7, 2, 3]);
        let free_local = [2, 3, 4, 5];
        let kff = DMatrix::from_fn(4, 4, |a, b| k[free_local[a]][free_local[b]]);
        let fl = DVector::from_vec(vec![0.5, 0.0, 0.5, 0.0]);
        let uf = kff.lu().solve(&fl).unwrap();
        for (a, &l) in free_local.iter().enumerate() {
            assert!((r.u[ed[l]] - uf[a]).abs() < 1e-12);
        }
        assert!((r.compliance - fl.dot(&uf)).abs() < 1e-12);
    }

    #[test]
    fn compliance_is_quadratic_in_load_and_equals_work() {
        let mesh = MacroMesh::new(8, 4).unwrap();
        let ke = vec![iso(); 32];
        let x: Vec<f64> = (0..32)
            .map(|e| if e % 5 == 0 { X_MIN } else { 1.0 })
            .collect();
        let r1 = assemble_solve(&mesh, &ke, &x, &BoundaryConditions::mbb_half(&mesh, 1.0)).unwrap();
        let r2 = assemble_solve(&mesh, &ke, &x, &BoundaryConditions::mbb_half(&mesh, 2.0)).unwrap();
        assert!((r2.compliance / r1.compliance - 4.0).abs() < 1e-10);
        let load_dof = 2 * mesh.node(0, 4) + 1;
        let work = -r1.u[load_dof];
        assert!((work - r1.compliance).abs() <= 1e-8 * r1.compliance);
        assert!(!r1.degenerate);
    }

    #[test]
    fn residual_on_free_dofs() {
        let mesh = MacroMesh::new(6, 4).unwrap();
        let ke = vec![iso(); 24];
        let x = vec![1.0; 24];
        let bcs = BoundaryConditions::clamped_stretch(&mesh, 0.1);
        let r = assemble_solve(&mesh, &ke, &x, &bcs).unwrap();
        let mut ku = vec![0.0; mesh.n_dofs()];
        for e in 0..24 {
            let d = mesh.edofs(e);
            for a in 0..8 {
                for b in 0..8 {
                    ku[d[a]] += ke[e][a][b] * r.u[d[b]];
                }
            }
        }
        for d in 0..mesh.n_dofs() {
            if r.system.is_free(d) {
                assert!(ku[d].abs() < 1e-10);
            }
        }
        // uniform strip under uniaxial stretch: right edge reaction carries the energy
        assert!(r.compliance > 0.0);
    }

    #[test]
    fn void_design_is_degenerate() {
        let mesh = MacroMesh::new(4, 2).unwrap();
        let ke = vec![iso(); 8];
        let bcs = BoundaryConditions::mbb_half(&mesh, 1.0);
        let solid = assemble_solve(&mesh, &ke, &[1.0; 8], &bcs).unwrap();
        let void = assemble_solve(&mesh, &ke, &[X_MIN; 8], &bcs).unwrap();
        assert!(void.degenerate);
        assert!((void.compliance * X_MIN / solid.compliance - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unsupported_structure_names_a_node() {
        let mesh = MacroMesh::new(3, 2).unwrap();
        let bcs = BoundaryConditions {
            fixed: vec![],
            loads: vec![(3, 1.0)],
            prescribed: vec![],
        };
        let err = assemble_solve(&mesh, &vec![iso(); 6], &[1.0; 6], &bcs).unwrap_err();
        assert!(
            matches!(err, Error::Singular(ref m) if m.contains("node")),
            "{err}"
        );
    }

    #[test]
    fn assembly_is_linear_in_each_element_matrix() {
        let mesh = MacroMesh::new(4, 2).unwrap();
        let bcs = BoundaryConditions::cantilever(&mesh, 1.0);
        let mut ke = vec![iso(); 8];
        let base = assemble_solve(&mesh, &ke, &[1.0; 8], &bcs).unwrap();
        ke[5] = element_stiffness_from_c(&MaterialModel::default().isotropic(2.0));
        let doubled = assemble_solve(&mesh, &ke, &[1.0; 8], &bcs).unwrap();
        let mut x = [1.0; 8];
        x[5] = 2.0;
        let scaled = assemble_solve(&mesh, &vec![iso(); 8], &x, &bcs).unwrap();
        assert!((doubled.compliance - scaled.compliance).abs() < 1e-12 * base.compliance);
        assert!(doubled.compliance < base.compliance);
    }

    #[test]
    fn centerline_profiles() {
        let mesh = MacroMesh::new(10, 4).unwrap();
        let ke = vec![iso(); 40];
        let r = assemble_solve(
            &mesh,
            &ke,
            &[1.0; 40],
            &BoundaryConditions::cantilever(&mesh, 1.0),
        )
        .unwrap();
        let c = centerline_displacements(&r.u, &mesh).unwrap();
        assert_eq!(c.len(), 11);
        for w in c.windows(2) {
            assert!(w[1][1].abs() >= w[0][1].abs());
        }
        let zero = assemble_solve(
            &mesh,
            &ke,
            &[1.0; 40],
            &BoundaryConditions::cantilever(&mesh, 0.0),
        )
        .unwrap();
        assert!(centerline_displacements(&zero.u, &mesh)
            .unwrap()
            .iter()
            .all(|p| p == &[0.0, 0.0]));
        assert!(centerline_displacements(&r.u, &MacroMesh::new(10, 3).unwrap()).is_err());

        // symmetric beam on two supports with a central load
        let mesh = MacroMesh::new(8, 2).unwrap();
        let bcs = BoundaryConditions {
            fixed: vec![0, 1, 2 * mesh.node(8, 0) + 1],
            loads: vec![(2 * mesh.node(4, 2) + 1, -1.0)],
            prescribed: vec![],
        };
        let r = assemble_solve(&mesh, &vec![iso(); 16], &[1.0; 16], &bcs).unwrap();
        let c = centerline_displacements(&r.u, &mesh).unwrap();
        for i in 0..=8 {
            assert!((c[i][1] - c[8 - i][1]).abs() < 1e-8 * c[4][1].abs());
        }
    }

    #[test]
    fn adjoint_solve_is_symmetric() {
        let mesh = MacroMesh::new(5, 2).unwrap();
        let ke = vec![iso(); 10];
        let bcs = BoundaryConditions::cantilever(&mesh, 1.0);
        let r = assemble_solve(&mesh, &ke, &[1.0; 10], &bcs).unwrap();
        let mut g = vec![0.0; mesh.n_dofs()];
        let load_dof = bcs.loads[0].0;
        g[load_dof] = -1.0;
        let lam = r.system.solve_free(&g);
        for d in 0..mesh.n_dofs() {
            assert!((lam[d] - r.u[d]).abs() < 1e-12);
        }
    }
}
