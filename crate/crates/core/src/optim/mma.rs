//! Method of moving asymptotes, one subproblem per call.
//!
//! Problem form: minimize f0(x) subject to f_i(x) <= 0, xmin <= x <= xmax,
//! with the usual artificial variables a0 = 1, a_i = 0, c_i = 1000, d_i = 1.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmaParams {
    pub asyinit: f64,
    pub asyincr: f64,
    pub asydecr: f64,
    pub albefa: f64,
    /// Move limit as a fraction of the variable range.
    pub move_limit: f64,
    pub raa0: f64,
    pub epsimin: f64,
    pub c: f64,
    /// Closest an asymptote may get to the iterate, as a fraction of range.
    pub asymin: f64,
}

impl Default for MmaParams {
    fn default() -> Self {
        Self {
            asyinit: 0.5,
            asyincr: 1.2,
            asydecr: 0.7,
            albefa: 0.1,
            move_limit: 0.5,
            raa0: 1e-5,
            epsimin: 1e-7,
            c: 1000.0,
            asymin: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MmaState {
    pub params: MmaParams,
    n: usize,
    m: usize,
    iter: usize,
    low: Vec<f64>,
    upp: Vec<f64>,
    xold1: Vec<f64>,
    xold2: Vec<f64>,
}

/// Constraint values and their gradients (one row per constraint).
#[derive(Debug, Clone, Copy)]
pub struct Constraints<'a> {
    pub values: &'a [f64],
    pub grads: &'a [Vec<f64>],
}

impl Constraints<'_> {
    pub const NONE: Constraints<'static> = Constraints {
        values: &[],
        grads: &[],
    };
}

impl MmaState {
    pub fn new(n: usize, m: usize, params: MmaParams) -> Self {
        Self {
            params,
            n,
            m,
            iter: 0,
            low: vec![0.0; n],
            upp: vec![0.0; n],
            xold1: Vec::new(),
            xold2: Vec::new(),
        }
    }

    pub fn iterations(&self) -> usize {
        self.iter
    }

    pub fn asymptotes(&self) -> (&[f64], &[f64]) {
        (&self.low, &self.upp)
    }

    /// Solves one MMA subproblem and returns the next iterate.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        x: &[f64],
        xmin: &[f64],
        xmax: &[f64],
        df0: &[f64],
        cons: Constraints<'_>,
    ) -> Result<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        if x.len() != n || xmin.len() != n || xmax.len() != n || df0.len() != n {
            return Err(Error::Invalid(format!("mma expects {n} variables")));
        }
        if cons.values.len() != m
            || cons.grads.len() != m
            || cons.grads.iter().any(|g| g.len() != n)
        {
            return Err(Error::Invalid(format!(
                "mma expects {m} constraints over {n} variables"
            )));
        }
        let finite = df0
            .iter()
            .chain(cons.values)
            .chain(cons.grads.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical(
                "non-finite sensitivities passed to mma".into(),
            ));
        }
        if (0..n).any(|j| !(xmin[j] <= xmax[j]) || x[j] < xmin[j] - 1e-12 || x[j] > xmax[j] + 1e-12)
        {
            return Err(Error::Invalid("mma iterate outside its bounds".into()));
        }

        self.iter += 1;
        let p = self.params;
        let range: Vec<f64> = (0..n).map(|j| xmax[j] - xmin[j]).collect();
        if self.iter <= 2 {
            for j in 0..n {
                self.low[j] = x[j] - p.asyinit * range[j];
                self.upp[j] = x[j] + p.asyinit * range[j];
            }
        } else {
            for j in 0..n {
                let zzz = (x[j] - self.xold1[j]) * (self.xold1[j] - self.xold2[j]);
                let factor = if zzz > 0.0 {
                    p.asyincr
                } else if zzz < 0.0 {
                    p.asydecr
                } else {
                    1.0
                };
                let low = x[j] - factor * (self.xold1[j] - self.low[j]);
                let upp = x[j] + factor * (self.upp[j] - self.xold1[j]);
                let r = range[j].max(1e-12);
                self.low[j] = low.clamp(x[j] - 10.0 * r, x[j] - p.asymin * r);
                self.upp[j] = upp.clamp(x[j] + p.asymin * r, x[j] + 10.0 * r);
            }
        }
        for j in 0..n {
            // degenerate ranges still need the asymptotes to bracket x
            if !(self.low[j] < x[j]) {
                self.low[j] = x[j] - 1e-6;
            }
            if !(self.upp[j] > x[j]) {
                self.upp[j] = x[j] + 1e-6;
            }
        }

        let next = match self.subproblem(x, xmin, xmax, df0, cons, p.move_limit) {
            Ok(v) => v,
            Err(_) => self.subproblem(x, xmin, xmax, df0, cons, 0.5 * p.move_limit)?,
        };
        self.xold2 = std::mem::replace(&mut self.xold1, x.to_vec());
        if self.xold2.is_empty() {
            self.xold2 = x.to_vec();
        }
        Ok(next)
    }

    fn subproblem(
        &self,
        x: &[f64],
        xmin: &[f64],
        xmax: &[f64],
        df0: &[f64],
        cons: Constraints<'_>,
        move_limit: f64,
    ) -> Result<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        let p = &self.params;
        let mut sub = Subproblem {
            n,
            m,
            low: self.low.clone(),
            upp: self.upp.clone(),
            alpha: vec![0.0; n],
            beta: vec![0.0; n],
            p0: vec![0.0; n],
            q0: vec![0.0; n],
            pm: DMatrix::zeros(m, n),
            qm: DMatrix::zeros(m, n),
            b: vec![0.0; m],
            c: vec![p.c; m],
            d: vec![1.0; m],
            a0: 1.0,
            a: vec![0.0; m],
            fixed: vec![false; n],
        };
        for j in 0..n {
            let r = xmax[j] - xmin[j];
            sub.alpha[j] = (self.low[j] + p.albefa * (x[j] - self.low[j]))
                .max(x[j] - move_limit * r)
                .max(xmin[j]);
            sub.beta[j] = (self.upp[j] - p.albefa * (self.upp[j] - x[j]))
                .min(x[j] + move_limit * r)
                .min(xmax[j]);
            if sub.alpha[j] > sub.beta[j] - 1e-14 {
                sub.alpha[j] = sub.beta[j];
                sub.fixed[j] = true;
            }
            let xmami = r.max(1e-5);
            let ux2 = (self.upp[j] - x[j]).powi(2);
            let xl2 = (x[j] - self.low[j]).powi(2);
            let (pp, qq) = (df0[j].max(0.0), (-df0[j]).max(0.0));
            let pq = 0.001 * (pp + qq) + p.raa0 / xmami;
            sub.p0[j] = (pp + pq) * ux2;
            sub.q0[j] = (qq + pq) * xl2;
            for i in 0..m {
                let g = cons.grads[i][j];
                let (pp, qq) = (g.max(0.0), (-g).max(0.0));
                let pq = 0.001 * (pp + qq) + p.raa0 / xmami;
                sub.pm[(i, j)] = (pp + pq) * ux2;
                sub.qm[(i, j)] = (qq + pq) * xl2;
            }
        }
        let g = sub.gvec(x);
        for i in 0..m {
            sub.b[i] = g[i] - cons.values[i];
        }
        let out = sub.solve(p.epsimin)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "mma subproblem produced non-finite values".into(),
            ));
        }
        Ok((0..n).map(|j| out[j].clamp(xmin[j], xmax[j])).collect())
    }
}

struct Subproblem {
    n: usize,
    m: usize,
    low: Vec<f64>,
    upp: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    p0: Vec<f64>,
    q0: Vec<f64>,
    pm: DMatrix<f64>,
    qm: DMatrix<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    a0: f64,
    a: Vec<f64>,
    /// Variables with alpha == beta; they take no part in the solve.
    fixed: Vec<bool>,
}

#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    y: Vec<f64>,
    z: f64,
    lam: Vec<f64>,
    xsi: Vec<f64>,
    eta: Vec<f64>,
    mu: Vec<f64>,
    zet: f64,
    s: Vec<f64>,
}

impl Point {
    fn axpy(&self, t: f64, d: &Point) -> Point {
        let f = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u + t * v).collect();
        Point {
            x: f(&self.x, &d.x),
            y: f(&self.y, &d.y),
            z: self.z + t * d.z,
            lam: f(&self.lam, &d.lam),
            xsi: f(&self.xsi, &d.xsi),
            eta: f(&self.eta, &d.eta),
            mu: f(&self.mu, &d.mu),
            zet: self.zet + t * d.zet,
            s: f(&self.s, &d.s),
        }
    }
}

impl Subproblem {
    /// `(plam, qlam)` = p0 + Pᵀλ, q0 + Qᵀλ.
    fn lagrange_terms(&self, lam: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let lam = DVector::from_column_slice(lam);
        let mut plam = DVector::from_column_slice(&self.p0);
        let mut qlam = DVector::from_column_slice(&self.q0);
        plam.gemv_tr(1.0, &self.pm, &lam, 1.0);
        qlam.gemv_tr(1.0, &self.qm, &lam, 1.0);
        (plam.data.into(), qlam.data.into())
    }

    fn gvec(&self, x: &[f64]) -> Vec<f64> {
        let ux = DVector::from_iterator(self.n, (0..self.n).map(|j| 1.0 / (self.upp[j] - x[j])));
        let xl = DVector::from_iterator(self.n, (0..self.n).map(|j| 1.0 / (x[j] - self.low[j])));
        let mut g = &self.pm * ux;
        g.gemv(1.0, &self.qm, &xl, 1.0);
        g.data.into()
    }

    fn residual(&self, pt: &Point, epsi: f64) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let (plam, qlam) = self.lagrange_terms(&pt.lam);
        let gvec = self.gvec(&pt.x);
        let mut r = Vec::with_capacity(3 * n + 4 * m + 2);
        for j in 0..n {
            let ux = self.upp[j] - pt.x[j];
            let xl = pt.x[j] - self.low[j];
            if self.fixed[j] {
                r.push(0.0);
                continue;
            }
            r.push(plam[j] / (ux * ux) - qlam[j] / (xl * xl) - pt.xsi[j] + pt.eta[j]);
        }
        for i in 0..m {
            r.push(self.c[i] + self.d[i] * pt.y[i] - pt.mu[i] - pt.lam[i]);
        }
        r.push(self.a0 - pt.zet - self.a.iter().zip(&pt.lam).map(|(a, l)| a * l).sum::<f64>());
        for i in 0..m {
            r.push(gvec[i] - self.a[i] * pt.z - pt.y[i] + pt.s[i] - self.b[i]);
        }
        for j in (0..n).filter(|&j| !self.fixed[j]) {
            r.push(pt.xsi[j] * (pt.x[j] - self.alpha[j]) - epsi);
            r.push(pt.eta[j] * (self.beta[j] - pt.x[j]) - epsi);
        }
        for i in 0..m {
            r.push(pt.mu[i] * pt.y[i] - epsi);
        }
        r.push(pt.zet * pt.z - epsi);
        for i in 0..m {
            r.push(pt.lam[i] * pt.s[i] - epsi);
        }
        r
    }

    /// Primal-dual interior point method on the convex subproblem.
    fn solve(&self, epsimin: f64) -> Result<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        let mut pt = Point {
            x: (0..n)
                .map(|j| 0.5 * (self.alpha[j] + self.beta[j]))
                .collect(),
            y: vec![1.0; m],
            z: 1.0,
            lam: vec![1.0; m],
            xsi: (0..n)
                .map(|j| (1.0 / (0.5 * (self.beta[j] - self.alpha[j]))).max(1.0))
                .collect(),
            eta: (0..n)
                .map(|j| (1.0 / (0.5 * (self.beta[j] - self.alpha[j]))).max(1.0))
                .collect(),
            mu: self.c.iter().map(|c| (0.5 * c).max(1.0)).collect(),
            zet: 1.0,
            s: vec![1.0; m],
        };
        let fixed = &self.fixed;
        if fixed.iter().all(|&f| f) {
            return Ok(self.alpha.clone());
        }
        let mut epsi = 1.0;
        while epsi > epsimin {
            let mut res = self.residual(&pt, epsi);
            let mut resnorm = norm(&res);
            let mut resmax = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut ittt = 0;
            while resmax > 0.9 * epsi && ittt < 200 {
                ittt += 1;
                let dir = self.newton_direction(&pt, epsi)?;
                // step to the boundary with a 1% safety factor
                let mut stm: f64 = 1.0;
                let ratio = |v: &[f64], dv: &[f64], stm: &mut f64| {
                    for (a, b) in v.iter().zip(dv) {
                        *stm = stm.max(-1.01 * b / a);
                    }
                };
                ratio(&pt.y, &dir.y, &mut stm);
                ratio(&[pt.z], &[dir.z], &mut stm);
                ratio(&pt.lam, &dir.lam, &mut stm);
                ratio(&pt.xsi, &dir.xsi, &mut stm);
                ratio(&pt.eta, &dir.eta, &mut stm);
                ratio(&pt.mu, &dir.mu, &mut stm);
                ratio(&[pt.zet], &[dir.zet], &mut stm);
                ratio(&pt.s, &dir.s, &mut stm);
                for j in 0..n {
                    if fixed[j] {
                        continue;
                    }
                    stm = stm.max(-1.01 * dir.x[j] / (pt.x[j] - self.alpha[j]));
                    stm = stm.max(1.01 * dir.x[j] / (self.beta[j] - pt.x[j]));
                }
                let mut steg = 1.0 / stm;
                let mut itto = 0;
                loop {
                    itto += 1;
                    let trial = pt.axpy(steg, &dir);
                    let r = self.residual(&trial, epsi);
                    let rn = norm(&r);
                    if rn <= resnorm || itto >= 50 {
                        pt = trial;
                        res = r;
                        resnorm = rn;
                        break;
                    }
                    steg *= 0.5;
                }
                resmax = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if !resnorm.is_finite() {
                    return Err(Error::Numerical("mma subproblem diverged".into()));
                }
            }
            epsi *= 0.1;
        }
        Ok(pt.x)
    }

    fn newton_direction(&self, pt: &Point, epsi: f64) -> Result<Point> {
        let (n, m) = (self.n, self.m);
        let fixed = &self.fixed;
        let (plam, qlam) = self.lagrange_terms(&pt.lam);
        let gvec = self.gvec(&pt.x);
        let mut delx = vec![0.0; n];
        let mut diagx = vec![0.0; n];
        // constraint Jacobian on the free variables, columns scaled by diagx^-1/2
        let free: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
        let mut gs = DMatrix::zeros(m, free.len());
        let mut dxs = DVector::zeros(free.len());
        for j in 0..n {
            let ux = self.upp[j] - pt.x[j];
            let xl = pt.x[j] - self.low[j];
            let dpsidx = plam[j] / (ux * ux) - qlam[j] / (xl * xl);
            let xa = pt.x[j] - self.alpha[j];
            let bx = self.beta[j] - pt.x[j];
            if fixed[j] {
                delx[j] = 0.0;
                diagx[j] = 1.0;
            } else {
                delx[j] = dpsidx - epsi / xa + epsi / bx;
                diagx[j] = 2.0 * (plam[j] / (ux * ux * ux) + qlam[j] / (xl * xl * xl))
                    + pt.xsi[j] / xa
                    + pt.eta[j] / bx;
            }
        }
        for (col, &j) in free.iter().enumerate() {
            let ux = self.upp[j] - pt.x[j];
            let xl = pt.x[j] - self.low[j];
            let w = diagx[j].sqrt().recip();
            for i in 0..m {
                gs[(i, col)] = (self.pm[(i, j)] / (ux * ux) - self.qm[(i, j)] / (xl * xl)) * w;
            }
            dxs[col] = delx[j] * w;
        }
        let dely: Vec<f64> = (0..m)
            .map(|i| self.c[i] + self.d[i] * pt.y[i] - pt.lam[i] - epsi / pt.y[i])
            .collect();
        let delz =
            self.a0 - self.a.iter().zip(&pt.lam).map(|(a, l)| a * l).sum::<f64>() - epsi / pt.z;
        let dellam: Vec<f64> = (0..m)
            .map(|i| gvec[i] - self.a[i] * pt.z - pt.y[i] - self.b[i] + epsi / pt.lam[i])
            .collect();
        let diagy: Vec<f64> = (0..m).map(|i| self.d[i] + pt.mu[i] / pt.y[i]).collect();

        let ggd = &gs * gs.transpose();
        let gdx = &gs * &dxs;
        let mut aa = DMatrix::zeros(m + 1, m + 1);
        let mut bb = DVector::zeros(m + 1);
        aa.view_mut((0, 0), (m, m)).copy_from(&ggd);
        for i in 0..m {
            bb[i] = dellam[i] + dely[i] / diagy[i] - gdx[i];
            aa[(i, i)] += pt.s[i] / pt.lam[i] + 1.0 / diagy[i];
            aa[(i, m)] = self.a[i];
            aa[(m, i)] = self.a[i];
        }
        bb[m] = delz;
        aa[(m, m)] = -pt.zet / pt.z;
        let sol = aa
            .lu()
            .solve(&bb)
            .ok_or_else(|| Error::Numerical("singular mma newton system".into()))?;
        let dlam = DVector::from_iterator(m, (0..m).map(|i| sol[i]));
        let dz = sol[m];
        let gl = gs.transpose() * &dlam;
        let mut dx = vec![0.0; n];
        for (col, &j) in free.iter().enumerate() {
            dx[j] = -delx[j] / diagx[j] - gl[col] / diagx[j].sqrt();
        }
        let dlam: Vec<f64> = dlam.iter().copied().collect();
        let dy: Vec<f64> = (0..m)
            .map(|i| -dely[i] / diagy[i] + dlam[i] / diagy[i])
            .collect();
        let dxsi: Vec<f64> = (0..n)
            .map(|j| {
                let xa = pt.x[j] - self.alpha[j];
                if fixed[j] {
                    0.0
                } else {
                    -pt.xsi[j] + epsi / xa - pt.xsi[j] * dx[j] / xa
                }
            })
            .collect();
        let deta: Vec<f64> = (0..n)
            .map(|j| {
                let bx = self.beta[j] - pt.x[j];
                if fixed[j] {
                    0.0
                } else {
                    -pt.eta[j] + epsi / bx + pt.eta[j] * dx[j] / bx
                }
            })
            .collect();
        let dmu: Vec<f64> = (0..m)
            .map(|i| -pt.mu[i] + epsi / pt.y[i] - pt.mu[i] * dy[i] / pt.y[i])
            .collect();
        let dzet = -pt.zet + epsi / pt.z - pt.zet * dz / pt.z;
        let ds: Vec<f64> = (0..m)
            .map(|i| -pt.s[i] + epsi / pt.lam[i] - pt.s[i] * dlam[i] / pt.lam[i])
            .collect();
        Ok(Point {
            x: dx,
            y: dy,
            z: dz,
            lam: dlam,
            xsi: dxsi,
            eta: deta,
            mu: dmu,
            zet: dzet,
            s: ds,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unconstrained_quadratic() {
        let n = 5;
        let mut x = vec![0.9, 0.1, 0.5, 0.0, 1.0];
        let mut st = MmaState::new(n, 0, MmaParams::default());
        let (lo, hi) = (vec![0.0; n], vec![1.0; n]);
        let mut its = 0;
        while its < 30 {
            its += 1;
            let g: Vec<f64> = x.iter().map(|v| 2.0 * (v - 0.3)).collect();
            x = st.update(&x, &lo, &hi, &g, Constraints::NONE).unwrap();
            if x.iter().all(|v| (v - 0.3).abs() < 1e-4) {
                break;
            }
        }
        assert!(
            x.iter().all(|v| (v - 0.3).abs() < 1e-4),
            "{x:?} after {its}"
        );
    }

    #[test]
    fn binding_linear_constraint() {
        let n = 4;
        let w = [1.0, 2.0, 3.0, 4.0];
        let mut x = vec![0.1; n];
        let mut st = MmaState::new(n, 1, MmaParams::default());
        let (lo, hi) = (vec![0.0; n], vec![1.0; n]);
        for _ in 0..100 {
            // minimize Σ w_j (x_j - 1)^2 subject to Σx <= 1
            let g: Vec<f64> = (0..n).map(|j| 2.0 * w[j] * (x[j] - 1.0)).collect();
            let val = [x.iter().sum::<f64>() - 1.0];
            let grads = [vec![1.0; n]];
            x = st
                .update(
                    &x,
                    &lo,
                    &hi,
                    &g,
                    Constraints {
                        values: &val,
                        grads: &grads,
                    },
                )
                .unwrap();
        }
        let s: f64 = x.iter().sum();
        assert!((s - 1.0).abs() < 1e-3, "{x:?}");
        // KKT: x_0 at its lower bound, w_j (1 - x_j) equal for the rest
        assert!(x[0] < 1e-6, "{x:?}");
        let lam: Vec<f64> = (1..n).map(|j| w[j] * (1.0 - x[j])).collect();
        assert!(lam.iter().all(|l| (l - lam[0]).abs() < 1e-2), "{lam:?}");
        assert!(lam[0] > w[0]);
    }

    #[test]
    fn zero_gradient_keeps_iterate() {
        let x = vec![0.2, 0.7, 0.45];
        let mut st = MmaState::new(3, 0, MmaParams::default());
        let y = st
            .update(&x, &[0.0; 3], &[1.0; 3], &[0.0; 3], Constraints::NONE)
            .unwrap();
        // only the barrier terms of the flat subproblem move it
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 0.02, "{y:?}");
        }
    }

    #[test]
    fn fixed_variable_is_respected() {
        let mut st = MmaState::new(2, 0, MmaParams::default());
        let y = st
            .update(
                &[0.5, 0.5],
                &[0.0, 0.5],
                &[1.0, 0.5],
                &[1.0, 1.0],
                Constraints::NONE,
            )
            .unwrap();
        assert_eq!(y[1], 0.5);
        assert!(y[0] < 0.5);
    }

    #[test]
    fn rejects_non_finite() {
        let mut st = MmaState::new(1, 0, MmaParams::default());
        assert!(st
            .update(&[0.5], &[0.0], &[1.0], &[f64::NAN], Constraints::NONE)
            .is_err());
    }

    proptest! {
        #[test]
        fn stays_in_bounds_and_makes_progress(
            target in proptest::collection::vec(-0.5f64..1.5, 6),
            x0 in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let f = |x: &[f64]| x.iter().zip(&target).map(|(a, t)| (a - t).powi(2)).sum::<f64>();
            let mut st = MmaState::new(6, 0, MmaParams::default());
            let mut x = x0;
            let start = f(&x);
            let best = (0..6).map(|j| (target[j].clamp(0.0, 1.0) - target[j]).powi(2)).sum::<f64>();
            for _ in 0..40 {
                let g: Vec<f64> = x.iter().zip(&target).map(|(a, t)| 2.0 * (a - t)).collect();
                x = st.update(&x, &[0.0; 6], &[1.0; 6], &g, Constraints::NONE).unwrap();
                prop_assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert!(f(&x) - best <= 1e-6 + 1e-3 * (start - best));
        }
    }
}
