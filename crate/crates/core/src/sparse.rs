//! Symmetric positive definite sparse solver: reverse Cuthill-McKee ordering
//! followed by an envelope (skyline) Cholesky factorization.

use std::collections::VecDeque;

use crate::error::Error;

/// Pivots below this fraction of the original diagonal count as zero.
const PIVOT_RTOL: f64 = 1e-13;

/// Accumulates the lower triangle of a symmetric matrix from triplets.
///
/// Entries above the diagonal are ignored, so full element matrices can be
/// scattered directly.
#[derive(Debug, Clone, Default)]
pub struct SymmetricAssembler {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymmetricAssembler {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        Self {
            n,
            entries: Vec::with_capacity(cap),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        if i >= j && v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    /// Sorted, duplicate-free lower-triangle entries.
    fn compressed(&self) -> Vec<(usize, usize, f64)> {
        let mut e = self.entries.clone();
        e.sort_unstable_by_key(|a| (a.0, a.1));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (i, j, v) in e {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out
    }

    /// `y = A x` using the stored lower triangle.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }
}

/// Zero or negative pivot met during factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularPivot {
    /// Original (unpermuted) index of the offending unknown.
    pub dof: usize,
    pub pivot: f64,
}

impl From<SingularPivot> for Error {
    fn from(p: SingularPivot) -> Self {
        Error::Singular(format!("zero pivot {:.3e} at unknown {}", p.pivot, p.dof))
    }
}

fn bfs_levels(
    adj: &[Vec<usize>],
    root: usize,
    mark: &mut [usize],
    stamp: usize,
) -> Vec<Vec<usize>> {
    let mut levels = vec![vec![root]];
    mark[root] = stamp;
    loop {
        let mut next = Vec::new();
        for &u in levels.last().unwrap() {
            for &w in &adj[u] {
                if mark[w] != stamp {
                    mark[w] = stamp;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return levels;
        }
        levels.push(next);
    }
}

/// Reverse Cuthill-McKee ordering; `perm[new] = old`.
pub fn rcm_order(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut placed = vec![false; n];
    let mut mark = vec![usize::MAX; n];
    let mut stamp = 0;
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&u| (deg[u], u));

    for &seed in &by_degree {
        if placed[seed] {
            continue;
        }
        // pseudo-peripheral start node
        let mut root = seed;
        let mut depth = 0;
        for _ in 0..8 {
            stamp += 1;
            let levels = bfs_levels(adj, root, &mut mark, stamp);
            if levels.len() <= depth {
                break;
            }
            depth = levels.len();
            let last = levels.last().unwrap();
            root = *last.iter().min_by_key(|&&u| (deg[u], u)).unwrap();
        }
        let mut queue = VecDeque::from([root]);
        placed[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nb: Vec<usize> = adj[u].iter().copied().filter(|&w| !placed[w]).collect();
            nb.sort_by_key(|&w| (deg[w], w));
            for w in nb {
                placed[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope Cholesky factor `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &SymmetricAssembler) -> Result<Self, SingularPivot> {
        let n = a.n;
        let entries = a.compressed();
        let mut adj = vec![Vec::new(); n];
        for &(i, j, _) in &entries {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        let perm = rcm_order(&adj);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for &(i, j, _) in &entries {
            let (r, c) = (iperm[i].max(iperm[j]), iperm[i].min(iperm[j]));
            first[r] = first[r].min(c);
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            start.push(total);
            total += i - f + 1;
        }
        start.push(total);
        let mut data = vec![0.0; total];
        let mut diag = vec![0.0; n];
        for &(i, j, v) in &entries {
            let (r, c) = (iperm[i].max(iperm[j]), iperm[i].min(iperm[j]));
            data[start[r] + c - first[r]] += v;
            if r == c {
                diag[r] += v;
            }
        }

        for i in 0..n {
            let fi = first[i];
            let si = start[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let len = j - k0;
                let (head, tail) = data.split_at_mut(si);
                let ri = &tail[k0 - fi..k0 - fi + len];
                let rj = &head[start[j] + k0 - fj..start[j] + k0 - fj + len];
                let dot: f64 = ri.iter().zip(rj).map(|(x, y)| x * y).sum();
                let ljj = head[start[j] + j - fj];
                tail[j - fi] = (tail[j - fi] - dot) / ljj;
            }
            let row = &data[si..si + i - fi];
            let d = data[si + i - fi] - row.iter().map(|x| x * x).sum::<f64>();
            if !(d > PIVOT_RTOL * diag[i].abs()) || !d.is_finite() {
                return Err(SingularPivot {
                    dof: perm[i],
                    pivot: d,
                });
            }
            data[si + i - fi] = d.sqrt();
        }
        Ok(Self {
            n,
            perm,
            iperm,
            first,
            start,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "right-hand side length");
        let mut y: Vec<f64> = (0..self.n).map(|i| b[self.perm[i]]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i] + i - fi + 1];
            let dot: f64 = row[..i - fi]
                .iter()
                .zip(&y[fi..i])
                .map(|(l, v)| l * v)
                .sum();
            y[i] = (y[i] - dot) / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i] + i - fi + 1];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, l) in (fi..i).zip(row) {
                y[k] -= l * yi;
            }
        }
        (0..self.n).map(|old| y[self.iperm[old]]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    fn grid_laplacian(nx: usize, ny: usize, shift: f64) -> SymmetricAssembler {
        let id = |i: usize, j: usize| j * nx + i;
        let mut a = SymmetricAssembler::new(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                a.add(id(i, j), id(i, j), shift);
                let mut link = |p: usize, q: usize| {
                    a.add(p, p, 1.0);
                    a.add(q, q, 1.0);
                    a.add(p.max(q), p.min(q), -1.0);
                };
                if i + 1 < nx {
                    link(id(i, j), id(i + 1, j));
                }
                if j + 1 < ny {
                    link(id(i, j), id(i, j + 1));
                }
            }
        }
        a
    }

    fn dense(a: &SymmetricAssembler) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(a.n, a.n);
        for &(i, j, v) in &a.entries {
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        m
    }

    #[test]
    fn matches_dense_solution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 60;
        let mut a = SymmetricAssembler::new(n);
        for i in 0..n {
            a.add(i, i, 4.0 + rng.gen::<f64>());
            for _ in 0..3 {
                let j = rng.gen_range(0..n);
                if j < i {
                    a.add(i, j, rng.gen_range(-1.0..1.0));
                }
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = EnvelopeCholesky::factor(&a).unwrap().solve(&b);
        let xd = dense(&a)
            .cholesky()
            .unwrap()
            .solve(&nalgebra::DVector::from_vec(b.clone()));
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-12);
        }
        let r: f64 = a.mul(&x).iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum();
        assert!(r.sqrt() < 1e-12);
    }

    #[test]
    fn duplicates_and_upper_entries() {
        let mut a = SymmetricAssembler::new(2);
        a.add(0, 0, 1.0);
        a.add(0, 0, 1.0);
        a.add(1, 1, 3.0);
        a.add(1, 0, 1.0);
        a.add(0, 1, 1.0);
        let x = EnvelopeCholesky::factor(&a).unwrap().solve(&[3.0, 4.0]);
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rcm_is_a_permutation_and_shrinks_profile() {
        let a = grid_laplacian(30, 6, 0.1);
        let f = EnvelopeCholesky::factor(&a).unwrap();
        let mut p = f.perm.clone();
        p.sort();
        assert_eq!(p, (0..180).collect::<Vec<_>>());
        // natural row-major ordering of a 30 x 6 grid has an envelope of ~30 per row
        assert!(f.envelope_size() < 180 * 10, "{}", f.envelope_size());
    }

    #[test]
    fn disconnected_blocks() {
        let mut a = grid_laplacian(4, 4, 1.0);
        a.n = 20;
        for k in 16..20 {
            a.add(k, k, 2.0);
        }
        let b = vec![1.0; 20];
        let x = EnvelopeCholesky::factor(&a).unwrap().solve(&b);
        assert!((x[18] - 0.5).abs() < 1e-14);
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_reports_unknown() {
        let a = grid_laplacian(5, 5, 0.0);
        let err = EnvelopeCholesky::factor(&a).unwrap_err();
        assert!(err.dof < 25);
        assert!(Error::from(err).to_string().contains("unknown"));
    }
}
