//! Energy-based homogenization of periodic unit cells on a bilinear quad mesh.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::ScalarField2D;
use crate::sparse::{EnvelopeCholesky, SymmetricAssembler};

pub type Mat8 = [[f64; 8]; 8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialModel {
    pub e_solid: f64,
    pub nu: f64,
    pub e_void: f64,
    pub plane_stress: bool,
}

impl Default for MaterialModel {
    fn default() -> Self {
        Self {
            e_solid: 1.0,
            nu: 0.3,
            e_void: 1e-9,
            plane_stress: true,
        }
    }
}

impl MaterialModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_solid > 0.0 && self.e_void > 0.0 && self.e_void < self.e_solid) {
            return invalid("need 0 < e_void < e_solid");
        }
        if !(0.0..0.5).contains(&self.nu) {
            return invalid("nu must be in [0, 0.5)");
        }
        Ok(())
    }

    /// Constitutive matrix of an isotropic material with modulus `e`.
    pub fn isotropic(&self, e: f64) -> EffectiveStiffness {
        let nu = self.nu;
        let c = if self.plane_stress {
            let f = e / (1.0 - nu * nu);
            [
                [f, f * nu, 0.0],
                [f * nu, f, 0.0],
                [0.0, 0.0, f * (1.0 - nu) / 2.0],
            ]
        } else {
            let f = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
            [
                [f * (1.0 - nu), f * nu, 0.0],
                [f * nu, f * (1.0 - nu), 0.0],
                [0.0, 0.0, f * (1.0 - 2.0 * nu) / 2.0],
            ]
        };
        EffectiveStiffness { c }
    }

    pub fn solid(&self) -> EffectiveStiffness {
        self.isotropic(self.e_solid)
    }
}

/// Symmetric 3x3 Voigt elasticity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveStiffness {
    pub c: [[f64; 3]; 3],
}

/// Number of independent components stored for a response vector.
pub fn response_names(n: usize) -> &'static [&'static str] {
    match n {
        4 => &["C11", "C12", "C22", "C33"],
        _ => &["C11", "C12", "C13", "C22", "C23", "C33"],
    }
}

impl EffectiveStiffness {
    pub const ZERO: Self = Self { c: [[0.0; 3]; 3] };

    /// `(C11, C12, C13, C22, C23, C33)`.
    pub fn components6(&self) -> [f64; 6] {
        let c = &self.c;
        [c[0][0], c[0][1], c[0][2], c[1][1], c[1][2], c[2][2]]
    }

    /// `(C11, C12, C22, C33)`.
    pub fn components4(&self) -> [f64; 4] {
        let c = &self.c;
        [c[0][0], c[0][1], c[1][1], c[2][2]]
    }

    pub fn components(&self, n: usize) -> Vec<f64> {
        if n == 4 {
            self.components4().to_vec()
        } else {
            self.components6().to_vec()
        }
    }

    /// Inverse of [`components`](Self::components) for 4 or 6 entries.
    pub fn from_components(v: &[f64]) -> Result<Self> {
        let c = match v.len() {
            4 => [[v[0], v[1], 0.0], [v[1], v[2], 0.0], [0.0, 0.0, v[3]]],
            6 => [[v[0], v[1], v[2]], [v[1], v[3], v[4]], [v[2], v[4], v[5]]],
            n => return invalid(format!("expected 4 or 6 stiffness components, got {n}")),
        };
        Ok(Self { c })
    }

    /// `d C / d component[k]` as a Voigt matrix.
    pub fn component_basis(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self::from_components(&v).expect("4 or 6")
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut c = self.c;
        c.iter_mut().flatten().for_each(|x| *x *= s);
        Self { c }
    }

    /// Shear-normal coupling small relative to the largest entry.
    pub fn is_orthotropic(&self, rtol: f64) -> bool {
        let m = self.c.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
        self.c[0][2].abs() <= rtol * m && self.c[1][2].abs() <= rtol * m
    }

    pub fn eigenvalues(&self) -> [f64; 3] {
        let m = nalgebra::Matrix3::from_fn(|i, j| self.c[i][j]);
        let e = m.symmetric_eigen().eigenvalues;
        let mut v = [e[0], e[1], e[2]];
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }
}

const GAUSS: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

/// Strain-displacement matrix of the unit square at reference point `(xi, eta)`,
/// nodes counter-clockwise from the lower-left corner.
fn b_matrix(xi: f64, eta: f64) -> [[f64; 8]; 3] {
    // shape function derivatives w.r.t. x, y (dx/dxi = 1/2)
    let dx = [
        -(1.0 - eta) / 2.0,
        (1.0 - eta) / 2.0,
        (1.0 + eta) / 2.0,
        -(1.0 + eta) / 2.0,
    ];
    let dy = [
        -(1.0 - xi) / 2.0,
        -(1.0 + xi) / 2.0,
        (1.0 + xi) / 2.0,
        (1.0 - xi) / 2.0,
    ];
    let mut b = [[0.0; 8]; 3];
    for a in 0..4 {
        b[0][2 * a] = dx[a];
        b[1][2 * a + 1] = dy[a];
        b[2][2 * a] = dy[a];
        b[2][2 * a + 1] = dx[a];
    }
    b
}

/// `k = int_[0,1]^2 B^T C B dA` with 2x2 Gauss quadrature.
pub fn element_stiffness_from_c(c: &EffectiveStiffness) -> Mat8 {
    let mut k = [[0.0; 8]; 8];
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            let b = b_matrix(xi, eta);
            let mut cb = [[0.0; 8]; 3];
            for i in 0..3 {
                for j in 0..8 {
                    cb[i][j] = (0..3).map(|l| c.c[i][l] * b[l][j]).sum();
                }
            }
            for i in 0..8 {
                for j in 0..8 {
                    k[i][j] += 0.25 * (0..3).map(|l| b[l][i] * cb[l][j]).sum::<f64>();
                }
            }
        }
    }
    k
}

/// Nodal displacements of the unit square under unit Voigt strains
/// `(eps_xx, eps_yy, gamma_xy)`.
pub const UNIT_STRAIN_MODES: [[f64; 8]; 3] = [
    [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0],
    [0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homogenized {
    pub stiffness: EffectiveStiffness,
    /// No solid material: the ersatz tensor was returned directly.
    pub all_void: bool,
}

/// Effective stiffness of a periodic cell with per-cell densities in `[0, 1]`.
pub fn homogenize_cell(density: &ScalarField2D, mat: &MaterialModel) -> Result<Homogenized> {
    mat.validate()?;
    let (nx, ny) = (density.nx(), density.ny());
    if density.values().iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return invalid("densities must lie in [0, 1]");
    }
    if density.values().iter().all(|&r| r == 0.0) {
        return Ok(Homogenized {
            stiffness: mat.isotropic(mat.e_void),
            all_void: true,
        });
    }
    let k0 = element_stiffness_from_c(&mat.isotropic(1.0));
    let moduli: Vec<f64> = density
        .values()
        .iter()
        .map(|&r| mat.e_void + r * (mat.e_solid - mat.e_void))
        .collect();

    // periodic node (i, j) -> j * nx + i; node 0 is held fixed
    let node = |i: usize, j: usize| (j % ny) * nx + (i % nx);
    let edofs = |i: usize, j: usize| -> [usize; 8] {
        let n = [
            node(i, j),
            node(i + 1, j),
            node(i + 1, j + 1),
            node(i, j + 1),
        ];
        let mut d = [0; 8];
        for a in 0..4 {
            d[2 * a] = 2 * n[a];
            d[2 * a + 1] = 2 * n[a] + 1;
        }
        d
    };
    let ndof = 2 * nx * ny;
    let free = |d: usize| d.checked_sub(2);
    let mut asm = SymmetricAssembler::with_capacity(ndof - 2, nx * ny * 36);
    let mut rhs = vec![vec![0.0; ndof - 2]; 3];
    for j in 0..ny {
        for i in 0..nx {
            let e = moduli[j * nx + i];
            let d = edofs(i, j);
            for a in 0..8 {
                let Some(fa) = free(d[a]) else { continue };
                for b in 0..8 {
                    if let Some(fb) = free(d[b]) {
                        asm.add(fa, fb, e * k0[a][b]);
                    }
                }
                for (r, mode) in rhs.iter_mut().zip(&UNIT_STRAIN_MODES) {
                    r[fa] += e * (0..8).map(|b| k0[a][b] * mode[b]).sum::<f64>();
                }
            }
        }
    }
    let chol = EnvelopeCholesky::factor(&asm)?;
    let chi: Vec<Vec<f64>> = rhs
        .iter()
        .map(|r| {
            let mut full = vec![0.0; 2];
            full.extend(chol.solve(r));
            full
        })
        .collect();

    let area = (nx * ny) as f64;
    let mut c = [[0.0; 3]; 3];
    for j in 0..ny {
        for i in 0..nx {
            let e = moduli[j * nx + i];
            let d = edofs(i, j);
            let w: Vec<[f64; 8]> = (0..3)
                .map(|m| std::array::from_fn(|a| UNIT_STRAIN_MODES[m][a] - chi[m][d[a]]))
                .collect();
            for p in 0..3 {
                for q in p..3 {
                    let mut s = 0.0;
                    for a in 0..8 {
                        let kw: f64 = (0..8).map(|b| k0[a][b] * w[q][b]).sum();
                        s += w[p][a] * kw;
                    }
                    c[p][q] += e * s / area;
                }
            }
        }
    }
    for p in 0..3 {
        for q in 0..p {
            c[p][q] = c[q][p];
        }
    }
    Ok(Homogenized {
        stiffness: EffectiveStiffness { c },
        all_void: false,
    })
}

/// Homogenizes the sharp solid (`phi >= 0`) of a field.
pub fn homogenize_binary(phi: &ScalarField2D, mat: &MaterialModel) -> Result<Homogenized> {
    homogenize_cell(&phi.threshold(0.0).to_density(), mat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::truss_basis;
    use crate::field::BinaryGrid;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    fn solid(nx: usize, ny: usize) -> ScalarField2D {
        ScalarField2D::filled(nx, ny, 1.0).unwrap()
    }

    #[test]
    fn homogeneous_cell_is_base_material() {
        let h = homogenize_cell(&solid(6, 5), &MaterialModel::default()).unwrap();
        let f = 1.0 / 0.91;
        let want = [[f, 0.3 * f, 0.0], [0.3 * f, f, 0.0], [0.0, 0.0, 0.35 * f]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.stiffness.c[i][j] - want[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn element_matrix_closed_form() {
        let nu: f64 = 0.3;
        let a11 = [
            [12.0, 3.0, -6.0, -3.0],
            [3.0, 12.0, 3.0, 0.0],
            [-6.0, 3.0, 12.0, -3.0],
            [-3.0, 0.0, -3.0, 12.0],
        ];
        let a12 = [
            [-6.0, -3.0, 0.0, 3.0],
            [-3.0, -6.0, -3.0, -6.0],
            [0.0, -3.0, -6.0, 3.0],
            [3.0, -6.0, 3.0, -6.0],
        ];
        let b11 = [
            [-4.0, 3.0, -2.0, 9.0],
            [3.0, -4.0, -9.0, 4.0],
            [-2.0, -9.0, -4.0, -3.0],
            [9.0, 4.0, -3.0, -4.0],
        ];
        let b12 = [
            [2.0, -3.0, 4.0, -9.0],
            [-3.0, 2.0, 9.0, -2.0],
            [4.0, 9.0, 2.0, 3.0],
            [-9.0, -2.0, 3.0, 2.0],
        ];
        let block =
            |m11: &[[f64; 4]; 4], m12: &[[f64; 4]; 4], i: usize, j: usize| match (i / 4, j / 4) {
                (0, 0) | (1, 1) => m11[i % 4][j % 4],
                (0, 1) => m12[i % 4][j % 4],
                _ => m12[j % 4][i % 4],
            };
        let k = element_stiffness_from_c(&MaterialModel::default().isotropic(1.0));
        for i in 0..8 {
            for j in 0..8 {
                let want = (block(&a11, &a12, i, j) + nu * block(&b11, &b12, i, j))
                    / (1.0 - nu * nu)
                    / 24.0;
                assert!(
                    (k[i][j] - want).abs() < 1e-14,
                    "({i},{j}) {} vs {want}",
                    k[i][j]
                );
            }
        }
    }

    #[test]
    fn element_matrix_linear_and_rigid() {
        assert_eq!(
            element_stiffness_from_c(&EffectiveStiffness::ZERO),
            [[0.0; 8]; 8]
        );
        let c = EffectiveStiffness::from_components(&[0.7, 0.2, 0.05, 0.5, -0.03, 0.2]).unwrap();
        let k1 = element_stiffness_from_c(&c);
        let k3 = element_stiffness_from_c(&c.scaled(3.0));
        let rigid = [
            [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 1.0, -1.0, 1.0, -1.0, 0.0],
        ];
        for i in 0..8 {
            for j in 0..8 {
                assert!((k3[i][j] - 3.0 * k1[i][j]).abs() < 1e-14);
                assert!((k1[i][j] - k1[j][i]).abs() < 1e-15);
            }
            for r in &rigid {
                let s: f64 = (0..8).map(|j| k1[i][j] * r[j]).sum();
                assert!(s.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_symmetric_shape_is_square_symmetric() {
        let b = truss_basis("star", 20, 0.08).unwrap();
        let h = homogenize_binary(b.phi_b.field(), &MaterialModel::default()).unwrap();
        let c = h.stiffness.c;
        assert!((c[0][0] - c[1][1]).abs() < 1e-8);
        assert!(h.stiffness.is_orthotropic(1e-8));
    }

    #[test]
    fn all_void_is_flagged() {
        let mat = MaterialModel::default();
        let h = homogenize_cell(&ScalarField2D::filled(4, 4, 0.0).unwrap(), &mat).unwrap();
        assert!(h.all_void);
        assert_eq!(h.stiffness, mat.isotropic(1e-9));
    }

    #[test]
    fn adding_solid_never_softens_the_diagonal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mat = MaterialModel::default();
        let mut img = BinaryGrid::filled(12, 12, false).unwrap();
        let mut prev = [0.0; 3];
        for _ in 0..6 {
            for _ in 0..20 {
                img.set(rng.gen_range(0..12), rng.gen_range(0..12), true);
            }
            let h = homogenize_cell(&img.to_density(), &mat).unwrap().stiffness;
            for k in 0..3 {
                assert!(h.c[k][k] >= prev[k] * (1.0 - 1e-9));
                prev[k] = h.c[k][k];
            }
            assert!(h.eigenvalues()[0] > -1e-10);
        }
    }

    /// Independent oracle: full (non-periodic) node grid, displacement
    /// `u = eps x + periodic fluctuation` imposed through Lagrange multipliers
    /// on opposite boundary nodes, solved densely.
    fn oracle(density: &ScalarField2D, mat: &MaterialModel) -> [[f64; 3]; 3] {
        let (nx, ny) = (density.nx(), density.ny());
        let nn = (nx + 1) * (ny + 1);
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let k0 = element_stiffness_from_c(&mat.isotropic(1.0));
        let mut k = DMatrix::<f64>::zeros(2 * nn, 2 * nn);
        for j in 0..ny {
            for i in 0..nx {
                let e = mat.e_void + density.get(i, j) * (mat.e_solid - mat.e_void);
                let n = [id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)];
                for a in 0..8 {
                    for b in 0..8 {
                        k[(2 * n[a / 2] + a % 2, 2 * n[b / 2] + b % 2)] += e * k0[a][b];
                    }
                }
            }
        }
        let energy = |eps: [f64; 3]| -> f64 {
            // constraints: u(right) - u(left) = eps * (nx, 0), u(top) - u(bottom) = eps * (0, ny)
            let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
            let jump = |dx: f64, dy: f64| {
                [
                    eps[0] * dx + 0.5 * eps[2] * dy,
                    0.5 * eps[2] * dx + eps[1] * dy,
                ]
            };
            for j in 0..=ny {
                let g = jump(nx as f64, 0.0);
                for c in 0..2 {
                    rows.push((
                        vec![(2 * id(nx, j) + c, 1.0), (2 * id(0, j) + c, -1.0)],
                        g[c],
                    ));
                }
            }
            for i in 0..nx {
                let g = jump(0.0, ny as f64);
                for c in 0..2 {
                    rows.push((
                        vec![(2 * id(i, ny) + c, 1.0), (2 * id(i, 0) + c, -1.0)],
                        g[c],
                    ));
                }
            }
            rows.push((vec![(0, 1.0)], 0.0));
            rows.push((vec![(1, 1.0)], 0.0));
            let m = rows.len();
            let n = 2 * nn;
            let mut a = DMatrix::<f64>::zeros(n + m, n + m);
            a.view_mut((0, 0), (n, n)).copy_from(&k);
            let mut rhs = DVector::<f64>::zeros(n + m);
            for (r, (terms, g)) in rows.iter().enumerate() {
                for &(d, v) in terms {
                    a[(n + r, d)] = v;
                    a[(d, n + r)] = v;
                }
                rhs[n + r] = *g;
            }
            let sol = a.lu().solve(&rhs).unwrap();
            let u = sol.rows(0, n);
            0.5 * (u.transpose() * &k * u)[(0, 0)]
        };
        let area = (nx * ny) as f64;
        let unit = |k: usize| {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            e
        };
        let w: Vec<f64> = (0..3).map(|k| energy(unit(k))).collect();
        let mut c = [[0.0; 3]; 3];
        for p in 0..3 {
            c[p][p] = 2.0 * w[p] / area;
            for q in p + 1..3 {
                let mut e = unit(p);
                e[q] = 1.0;
                c[p][q] = (energy(e) - w[p] - w[q]) / area;
                c[q][p] = c[p][q];
            }
        }
        c
    }

    #[test]
    fn matches_dense_periodic_oracle() {
        let mat = MaterialModel::default();
        // asymmetric shape so that all six components are exercised
        let img = BinaryGrid::from_fn(8, 6, |i, j| (i + 2 * j) % 5 != 0 || i == 3).unwrap();
        let rho = img.to_density();
        let got = homogenize_cell(&rho, &mat).unwrap().stiffness.c;
        let want = oracle(&rho, &mat);
        for p in 0..3 {
            for q in 0..3 {
                assert!(
                    (got[p][q] - want[p][q]).abs() <= 1e-8 * want[0][0],
                    "C{p}{q}: {} vs {}",
                    got[p][q],
                    want[p][q]
                );
            }
        }
    }
}
