//! Signed distance fields on cell-centered grids.
//!
//! Values are measured in cells: positive inside the solid, negative in the
//! void, and the zero level sits half a cell outside the outermost solid
//! cell centers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{BinaryGrid, ScalarField2D};

/// How distances treat the grid edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// The cell tiles the plane; distances wrap around.
    #[default]
    Periodic,
    Open,
}

/// Signed distance field: a scalar field whose sign marks solid (`> 0`) and void (`< 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedDistanceField(ScalarField2D);

impl SignedDistanceField {
    pub fn from_field(field: ScalarField2D) -> Self {
        Self(field)
    }

    pub fn field(&self) -> &ScalarField2D {
        &self.0
    }

    pub fn into_field(self) -> ScalarField2D {
        self.0
    }

    pub fn nx(&self) -> usize {
        self.0.nx()
    }

    pub fn ny(&self) -> usize {
        self.0.ny()
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn offset(&self, t: f64) -> Self {
        Self(self.0.offset(t))
    }

    pub fn threshold(&self, t: f64) -> BinaryGrid {
        self.0.threshold(t)
    }
}

const FAR: f64 = f64::INFINITY;

/// One-dimensional squared distance transform (lower envelope of parabolas).
/// `f[q]` is zero at sites and infinite elsewhere.
fn distance_transform_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + (p * p) as f64;
                    let s = (fq - fp) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in cells) from every cell to the
/// nearest cell where `site` is true.
fn squared_distance_to(site: &[bool], nx: usize, ny: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = site.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());

    let mut col_in = vec![0.0; ny];
    let mut col_out = vec![0.0; ny];
    for i in 0..nx {
        for j in 0..ny {
            col_in[j] = grid[j * nx + i];
        }
        distance_transform_1d(&col_in, &mut col_out, &mut v, &mut z);
        for j in 0..ny {
            grid[j * nx + i] = col_out[j];
        }
    }
    let mut row_out = vec![0.0; nx];
    for j in 0..ny {
        let row = &grid[j * nx..(j + 1) * nx];
        distance_transform_1d(row, &mut row_out, &mut v, &mut z);
        grid[j * nx..(j + 1) * nx].copy_from_slice(&row_out);
    }
    grid
}

/// Signed Euclidean distance transform of a binary image.
///
/// Each cell gets the distance (in cells) from its center to the nearest
/// opposite-phase cell center, minus half a cell; solid cells are positive.
pub fn sdf_from_binary(img: &BinaryGrid, boundary: Boundary) -> Result<SignedDistanceField> {
    let (nx, ny) = (img.nx(), img.ny());
    let solid = img.solid_count();
    if solid == 0 || solid == nx * ny {
        return invalid("binary image has no solid/void interface");
    }

    let (sx, sy, tiled): (usize, usize, Vec<bool>) = match boundary {
        Boundary::Open => (nx, ny, img.cells().to_vec()),
        Boundary::Periodic => {
            // Nearest periodic images of any cell lie within the 3x3 tiling.
            let (sx, sy) = (3 * nx, 3 * ny);
            let mut t = Vec::with_capacity(sx * sy);
            for j in 0..sy {
                for i in 0..sx {
                    t.push(img.get(i % nx, j % ny));
                }
            }
            (sx, sy, t)
        }
    };
    let void: Vec<bool> = tiled.iter().map(|c| !c).collect();
    let to_void = squared_distance_to(&void, sx, sy);
    let to_solid = squared_distance_to(&tiled, sx, sy);

    let (ox, oy) = match boundary {
        Boundary::Open => (0, 0),
        Boundary::Periodic => (nx, ny),
    };
    let field = ScalarField2D::from_fn(nx, ny, |i, j| {
        let k = (j + oy) * sx + (i + ox);
        if img.get(i, j) {
            to_void[k].sqrt() - 0.5
        } else {
            -(to_solid[k].sqrt() - 0.5)
        }
    })?;
    Ok(SignedDistanceField(field))
}

/// A straight strut between two points of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    /// Half the strut width, in unit-cell lengths.
    pub halfwidth: f64,
}

impl Segment {
    pub fn new(p1: [f64; 2], p2: [f64; 2], halfwidth: f64) -> Self {
        Self { p1, p2, halfwidth }
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let s = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (apx - s * abx, apy - s * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Union of capsule fields `halfwidth - distance` over all segments and their
/// eight periodic neighbor images, sampled at cell centers of a square grid.
pub fn truss_sdf(segments: &[Segment], n: usize) -> Result<SignedDistanceField> {
    if segments.is_empty() {
        return invalid("truss needs at least one segment");
    }
    for (k, s) in segments.iter().enumerate() {
        let inside = |p: [f64; 2]| p.iter().all(|c| (0.0..=1.0).contains(c));
        if !inside(s.p1) || !inside(s.p2) {
            return invalid(format!(
                "segment {k} has an endpoint outside the unit square"
            ));
        }
        if s.p1 == s.p2 && s.halfwidth == 0.0 {
            return invalid(format!("segment {k} is degenerate (zero length and width)"));
        }
        if !(s.halfwidth.is_finite() && s.halfwidth >= 0.0) {
            return invalid(format!("segment {k} has an invalid halfwidth"));
        }
    }
    let cell = n as f64;
    let field = ScalarField2D::from_fn(n, n, |i, j| {
        let p = [(i as f64 + 0.5) / cell, (j as f64 + 0.5) / cell];
        let mut best = f64::NEG_INFINITY;
        for s in segments {
            for dx in [-1.0, 0.0, 1.0] {
                for dy in [-1.0, 0.0, 1.0] {
                    let a = [s.p1[0] + dx, s.p1[1] + dy];
                    let b = [s.p2[0] + dx, s.p2[1] + dy];
                    best = best.max(s.halfwidth - point_segment_distance(p, a, b));
                }
            }
        }
        best * cell
    })?;
    Ok(SignedDistanceField(field))
}

/// Fraction of cells with `phi + t >= 0`.
pub fn volume_fraction(phi: &ScalarField2D, t: f64) -> f64 {
    let solid = phi.values().iter().filter(|&&v| v + t >= 0.0).count();
    solid as f64 / phi.len() as f64
}

/// Result of an isovalue search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsovalueFit {
    pub t: f64,
    pub volume: f64,
    /// The requested volume was outside `[0, 1]` and got clamped.
    pub clamped: bool,
}

pub const MAX_BISECTION_ITERS: usize = 100;

/// Bisection on a monotone `volume(t)` over `[lo, hi]`.
///
/// Stops when the volume is within `tol`; otherwise returns whichever bracket
/// end is closer after [`MAX_BISECTION_ITERS`] halvings. Cell counting makes
/// the volume a step function, so exact hits are not always possible.
pub fn bisect_monotone(
    mut volume: impl FnMut(f64) -> f64,
    target: f64,
    tol: f64,
    mut lo: f64,
    mut hi: f64,
) -> (f64, f64) {
    let mut v_lo = volume(lo);
    let mut v_hi = volume(hi);
    if (v_lo - target).abs() <= tol {
        return (lo, v_lo);
    }
    if v_hi <= target || (v_hi - target).abs() <= tol {
        return (hi, v_hi);
    }
    if v_lo > target {
        return (lo, v_lo);
    }
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let vm = volume(mid);
        if (vm - target).abs() <= tol {
            return (mid, vm);
        }
        if vm < target {
            lo = mid;
            v_lo = vm;
        } else {
            hi = mid;
            v_hi = vm;
        }
    }
    if (v_lo - target).abs() < (v_hi - target).abs() {
        (lo, v_lo)
    } else {
        (hi, v_hi)
    }
}

/// Isovalue `t` such that `volume_fraction(phi, t)` matches `v_target`.
pub fn bisect_isovalue(phi: &ScalarField2D, v_target: f64, tol: f64) -> IsovalueFit {
    let clamped = !(0.0..=1.0).contains(&v_target);
    let target = v_target.clamp(0.0, 1.0);
    let range = phi.max_abs() + 1.0;
    let (t, volume) = bisect_monotone(|t| volume_fraction(phi, t), target, tol, -range, range);
    IsovalueFit { t, volume, clamped }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_sdf(img: &BinaryGrid, boundary: Boundary) -> Vec<f64> {
        let (nx, ny) = (img.nx() as i64, img.ny() as i64);
        let mut out = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let me = img.get(i as usize, j as usize);
                let mut best = f64::INFINITY;
                for jj in 0..ny {
                    for ii in 0..nx {
                        if img.get(ii as usize, jj as usize) == me {
                            continue;
                        }
                        let (mut dx, mut dy) = ((ii - i).abs(), (jj - j).abs());
                        if boundary == Boundary::Periodic {
                            dx = dx.min(nx - dx);
                            dy = dy.min(ny - dy);
                        }
                        best = best.min(((dx * dx + dy * dy) as f64).sqrt());
                    }
                }
                out.push(if me { best - 0.5 } else { 0.5 - best });
            }
        }
        out
    }

    #[test]
    fn single_cell() {
        let img = BinaryGrid::from_fn(5, 5, |i, j| i == 2 && j == 2).unwrap();
        let sdf = sdf_from_binary(&img, Boundary::Periodic).unwrap();
        assert_eq!(sdf.field().get(2, 2), 0.5);
        for (k, &v) in sdf.values().iter().enumerate() {
            if k != 12 {
                assert!(v < 0.0);
            }
        }
        assert_eq!(sdf.field().get(1, 2), -0.5);
    }

    #[test]
    fn left_half_ramp() {
        let img = BinaryGrid::from_fn(10, 10, |i, _| i < 5).unwrap();
        let open = sdf_from_binary(&img, Boundary::Open).unwrap();
        let expect = brute_force_sdf(&img, Boundary::Open);
        assert_eq!(open.values(), expect.as_slice());
        // zero crossing between the 5th and 6th columns, unit slope
        for i in 0..10 {
            assert_eq!(open.field().get(i, 3), 4.5 - i as f64);
        }
        let per = sdf_from_binary(&img, Boundary::Periodic).unwrap();
        assert_eq!(
            per.values(),
            brute_force_sdf(&img, Boundary::Periodic).as_slice()
        );
        assert!(per.field().get(4, 0) > 0.0 && per.field().get(5, 0) < 0.0);
    }

    #[test]
    fn complement_negates() {
        let img = BinaryGrid::from_fn(9, 7, |i, j| (i * 3 + j * 5) % 7 < 3).unwrap();
        for b in [Boundary::Open, Boundary::Periodic] {
            let a = sdf_from_binary(&img, b).unwrap();
            let c = sdf_from_binary(&img.complement(), b).unwrap();
            for (x, y) in a.values().iter().zip(c.values()) {
                assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn matches_brute_force_on_irregular_shape() {
        let img = BinaryGrid::from_fn(13, 11, |i, j| {
            let (x, y) = (i as f64 - 6.0, j as f64 - 5.0);
            x * x + 2.0 * y * y < 20.0 || (i + j) % 9 == 0
        })
        .unwrap();
        for b in [Boundary::Open, Boundary::Periodic] {
            let fast = sdf_from_binary(&img, b).unwrap();
            let slow = brute_force_sdf(&img, b);
            for (x, y) in fast.values().iter().zip(&slow) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn uniform_images_rejected() {
        let img = BinaryGrid::filled(4, 4, true).unwrap();
        assert!(sdf_from_binary(&img, Boundary::Periodic).is_err());
        assert!(sdf_from_binary(&img.complement(), Boundary::Open).is_err());
    }

    #[test]
    fn horizontal_band() {
        let n = 50;
        let sdf = truss_sdf(&[Segment::new([0.0, 0.5], [1.0, 0.5], 0.1)], n).unwrap();
        let solid = sdf.threshold(0.0);
        for j in 0..n {
            let y = (j as f64 + 0.5) / n as f64;
            let expect = (y - 0.5).abs() <= 0.1 + 1e-12;
            for i in 0..n {
                assert_eq!(solid.get(i, j), expect, "cell {i},{j}");
            }
        }
        assert!((solid.volume_fraction() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn union_of_band_and_rotation_is_rotation_symmetric() {
        let n = 20;
        let sdf = truss_sdf(
            &[
                Segment::new([0.0, 0.5], [1.0, 0.5], 0.08),
                Segment::new([0.5, 0.0], [0.5, 1.0], 0.08),
            ],
            n,
        )
        .unwrap();
        let f = sdf.field();
        for j in 0..n {
            for i in 0..n {
                // 90 degree rotation of cell centers about the square center
                let (ri, rj) = (n - 1 - j, i);
                assert!((f.get(i, j) - f.get(ri, rj)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truss_errors() {
        assert!(truss_sdf(&[], 10).is_err());
        assert!(truss_sdf(&[Segment::new([0.3, 0.3], [0.3, 0.3], 0.0)], 10).is_err());
        assert!(truss_sdf(&[Segment::new([0.3, 0.3], [1.3, 0.3], 0.1)], 10).is_err());
        assert!(truss_sdf(&[Segment::new([0.3, 0.3], [0.3, 0.3], 0.1)], 10).is_ok());
    }

    #[test]
    fn volume_fraction_extremes() {
        let ones = ScalarField2D::filled(4, 4, 1.0).unwrap();
        assert_eq!(volume_fraction(&ones, 0.0), 1.0);
        let neg = ScalarField2D::filled(4, 4, -1.0).unwrap();
        assert_eq!(volume_fraction(&neg, 0.5), 0.0);
    }

    fn ramp(nx: usize, ny: usize, c: f64) -> ScalarField2D {
        // linear in the flat cell index, spanning [-c, c]
        let n = (nx * ny) as f64;
        ScalarField2D::from_fn(nx, ny, |i, j| {
            let k = (j * nx + i) as f64;
            -c + 2.0 * c * (k + 0.5) / n
        })
        .unwrap()
    }

    #[test]
    fn ramp_half_volume() {
        let f = ramp(10, 10, 3.0);
        let count = f.values().iter().filter(|&&v| v >= 0.0).count();
        assert_eq!(count, 50);
        assert!((volume_fraction(&f, 0.0) - 0.5).abs() <= 1.0 / 100.0);
    }

    #[test]
    fn bisect_fixed_point_and_saturation() {
        let img = BinaryGrid::from_fn(12, 12, |i, j| {
            (i as i64 - 6).pow(2) + (j as i64 - 5).pow(2) < 16
        })
        .unwrap();
        let sdf = sdf_from_binary(&img, Boundary::Periodic).unwrap();
        let v0 = volume_fraction(sdf.field(), 0.0);
        let fit = bisect_isovalue(sdf.field(), v0, 1e-9);
        assert_eq!(fit.volume, v0);
        // any t in the open gap between the two neighboring levels keeps v0
        assert!(fit.t.abs() < 1.0);

        let full = bisect_isovalue(sdf.field(), 1.0, 0.0);
        let max_neg = sdf
            .values()
            .iter()
            .map(|v| -v)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(full.t >= max_neg);
        assert_eq!(full.volume, 1.0);

        let over = bisect_isovalue(sdf.field(), 1.3, 1e-6);
        assert!(over.clamped);
        assert_eq!(over.volume, 1.0);
    }

    #[test]
    fn bisect_quarter_on_ramp_matches_scan() {
        let f = ramp(20, 20, 5.0);
        let fit = bisect_isovalue(&f, 0.25, 1e-9);
        assert_eq!(fit.volume, 0.25);
        // exhaustive scan over a fine t grid: the admissible t form an interval
        let mut admissible = Vec::new();
        for k in 0..=20_000 {
            let t = -6.0 + 12.0 * k as f64 / 20_000.0;
            if volume_fraction(&f, t) == 0.25 {
                admissible.push(t);
            }
        }
        let (lo, hi) = (admissible[0], *admissible.last().unwrap());
        assert!(
            fit.t >= lo - 1e-3 && fit.t <= hi + 1e-3,
            "{} not in [{lo}, {hi}]",
            fit.t
        );
    }

    proptest::proptest! {
        #[test]
        fn volume_monotone_in_t(seed in 0u64..1000, a in -8.0f64..8.0, b in -8.0f64..8.0) {
            let f = ScalarField2D::from_fn(9, 8, |i, j| {
                let h = (i as u64 * 31 + j as u64 * 17 + seed * 7) % 97;
                h as f64 / 97.0 * 10.0 - 5.0
            }).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assert!(volume_fraction(&f, lo) <= volume_fraction(&f, hi));
        }

        #[test]
        fn threshold_recovers_binary(bits in proptest::collection::vec(proptest::bool::ANY, 64)) {
            let solid = bits.iter().filter(|&&b| b).count();
            proptest::prop_assume!(solid > 0 && solid < 64);
            let img = BinaryGrid::new(8, 8, bits).unwrap();
            for b in [Boundary::Open, Boundary::Periodic] {
                let sdf = sdf_from_binary(&img, b).unwrap();
                proptest::prop_assert_eq!(&sdf.threshold(0.0), &img);
            }
        }

        #[test]
        fn truss_union_dominates_capsules(x1 in 0.0f64..1.0, y1 in 0.0f64..1.0, x2 in 0.0f64..1.0, y2 in 0.0f64..1.0) {
            let a = Segment::new([x1, y1], [x2, y2], 0.05);
            let b = Segment::new([0.0, 0.3], [1.0, 0.7], 0.03);
            let u = truss_sdf(&[a, b], 12).unwrap();
            let fa = truss_sdf(&[a], 12).unwrap();
            let fb = truss_sdf(&[b], 12).unwrap();
            for k in 0..u.values().len() {
                proptest::prop_assert!(u.values()[k] >= fa.values()[k]);
                proptest::prop_assert!(u.values()[k] >= fb.values()[k]);
            }
        }
    }
}
