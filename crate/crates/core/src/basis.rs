//! Basis microstructure classes and their one-time preprocessing.

use std::f64::consts::SQRT_2;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::ScalarField2D;
use crate::morphology::is_feasible;
use crate::sdf::{bisect_isovalue, truss_sdf, volume_fraction, Segment, SignedDistanceField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisClass {
    pub name: String,
    pub phi_b: SignedDistanceField,
}

impl BasisClass {
    pub fn new(name: impl Into<String>, phi_b: SignedDistanceField) -> Result<Self> {
        let name = name.into();
        let f = phi_b.field();
        let range = f.nx().max(f.ny()) as f64;
        if volume_fraction(f, range) == 0.0 {
            return invalid(format!("basis '{name}' has no solid for any isovalue"));
        }
        Ok(Self { name, phi_b })
    }
}

/// Named truss layouts used as the built-in basis library.
pub const TRUSS_PRESETS: [&str; 5] = ["x", "star", "cross", "horizontal", "vertical"];

pub fn truss_segments(preset: &str, halfwidth: f64) -> Result<Vec<Segment>> {
    let s = |a: [f64; 2], b: [f64; 2]| Segment::new(a, b, halfwidth);
    let diag = [s([0.0, 0.0], [1.0, 1.0]), s([0.0, 1.0], [1.0, 0.0])];
    let axes = [s([0.0, 0.5], [1.0, 0.5]), s([0.5, 0.0], [0.5, 1.0])];
    Ok(match preset {
        "x" => diag.to_vec(),
        "cross" => axes.to_vec(),
        "star" => diag.iter().chain(axes.iter()).copied().collect(),
        // bars that stop short of the cell edges, so these classes are broken
        // when tiled and rely on blending for connectivity
        "horizontal" => vec![s([0.2, 0.5], [0.8, 0.5])],
        "vertical" => vec![s([0.5, 0.2], [0.5, 0.8])],
        other => return invalid(format!("unknown truss preset '{other}'")),
    })
}

pub fn truss_basis(preset: &str, n: usize, halfwidth: f64) -> Result<BasisClass> {
    BasisClass::new(preset, truss_sdf(&truss_segments(preset, halfwidth)?, n)?)
}

/// Options for [`prepare_basis_set`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareOptions {
    pub v_star: f64,
    pub min_feature_px: usize,
    /// Largest volume a lower feasible bound may have.
    pub v_max: f64,
    /// Step of the coarse upward isovalue scan, in cells.
    pub scan_step: f64,
    /// Final bracket width of the feasibility bisection, in cells.
    pub t_tol: f64,
    pub volume_tol: f64,
    /// Added to the feasibility boundary so that a partially activated
    /// bound, shifted inward by `ln(1/a) / beta2`, stays feasible.
    pub lower_margin: f64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            v_star: 0.5,
            min_feature_px: 4,
            v_max: 0.95,
            scan_step: 0.25,
            t_tol: 1e-2,
            volume_tol: 1e-3,
            lower_margin: 1.0,
        }
    }
}

/// Preprocessed basis classes ready for blending.
///
/// All fields and isovalues are in cells.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub bases: Vec<BasisClass>,
    pub v_star: f64,
    pub t_star: Vec<f64>,
    pub t_lower: Vec<f64>,
    pub v_lower: Vec<f64>,
    pub v_min: f64,
    pub min_feature_px: usize,
    phi_star: Vec<ScalarField2D>,
    phi_lower: Vec<ScalarField2D>,
}

fn lower_feasible_isovalue(phi: &ScalarField2D, opts: &PrepareOptions) -> Option<f64> {
    let feasible = |t: f64| is_feasible(&phi.threshold(t), opts.min_feature_px);
    let mut t_bad = -phi.max() - opts.scan_step;
    let mut t = t_bad;
    loop {
        t += opts.scan_step;
        if volume_fraction(phi, t) > opts.v_max {
            return None;
        }
        if feasible(t) {
            break;
        }
        t_bad = t;
    }
    let mut t_good = t;
    while t_good - t_bad > opts.t_tol {
        let mid = 0.5 * (t_bad + t_good);
        if feasible(mid) {
            t_good = mid;
        } else {
            t_bad = mid;
        }
    }
    // feasibility is not monotone in t, so step up to the next feasible level
    let mut t = t_good + opts.lower_margin;
    while volume_fraction(phi, t) <= opts.v_max {
        if feasible(t) {
            return Some(t);
        }
        t += opts.t_tol;
    }
    None
}

/// Magnitude (cells) of the per-cell offset used to split equal field values.
pub const TIE_BREAK: f64 = 1e-4;

/// Symmetric geometry gives large groups of cells with identical distance
/// values, so the volume jumps in big steps as the isovalue moves. A fixed
/// sub-cell offset makes every cell count reachable. The offset grows
/// linearly across the cell, so a partially filled row or diagonal is one
/// contiguous run rather than scattered pixels.
fn break_ties(phi: &SignedDistanceField) -> SignedDistanceField {
    let f = phi.field();
    let n = f.nx().max(f.ny()) as f64;
    let vals = f
        .values()
        .iter()
        .enumerate()
        .map(|(u, v)| {
            let (i, j) = ((u % f.nx()) as f64, (u / f.nx()) as f64);
            v + TIE_BREAK * (i + j * SQRT_2) / (3.0 * n)
        })
        .collect();
    SignedDistanceField::from_field(ScalarField2D::new(f.nx(), f.ny(), vals).expect("same shape"))
}

/// Normalizes every basis to the common volume `v_star` and finds its lower
/// feasible bound (smallest isovalue that passes the minimum-feature and
/// self-connectedness checks).
pub fn prepare_basis_set(bases: Vec<BasisClass>, opts: &PrepareOptions) -> Result<BasisSet> {
    if bases.is_empty() {
        return invalid("basis set is empty");
    }
    if !(opts.v_star > 0.0 && opts.v_star < 1.0) {
        return invalid(format!("v_star must be in (0, 1), got {}", opts.v_star));
    }
    if opts.min_feature_px == 0 {
        return invalid("min_feature_px must be at least 1");
    }
    let (nx, ny) = (bases[0].phi_b.nx(), bases[0].phi_b.ny());
    if let Some(b) = bases
        .iter()
        .find(|b| b.phi_b.nx() != nx || b.phi_b.ny() != ny)
    {
        return invalid(format!(
            "basis '{}' has a different grid than '{}'",
            b.name, bases[0].name
        ));
    }

    let bases: Vec<BasisClass> = bases
        .into_iter()
        .map(|b| BasisClass {
            name: b.name,
            phi_b: break_ties(&b.phi_b),
        })
        .collect();
    let mut t_star = Vec::new();
    let mut t_lower = Vec::new();
    for b in &bases {
        let f = b.phi_b.field();
        let fit = bisect_isovalue(f, opts.v_star, opts.volume_tol);
        t_star.push(fit.t);
        let tl = lower_feasible_isovalue(f, opts).ok_or_else(|| {
            Error::Invalid(format!(
                "basis '{}' has no feasible isovalue with volume <= {} (min feature {} px)",
                b.name, opts.v_max, opts.min_feature_px
            ))
        })?;
        t_lower.push(tl);
    }
    let set = BasisSet::from_parts(bases, opts.v_star, t_star, t_lower, opts.min_feature_px)?;
    for (d, v) in set.v_lower.iter().enumerate() {
        if *v > set.v_star {
            log::warn!(
                "lower bound of basis '{}' has volume {v:.3} > v_star {}; its normalized shape is not attainable",
                set.bases[d].name,
                set.v_star
            );
        }
    }
    Ok(set)
}

impl BasisSet {
    /// Rebuilds derived fields from stored isovalues.
    pub fn from_parts(
        bases: Vec<BasisClass>,
        v_star: f64,
        t_star: Vec<f64>,
        t_lower: Vec<f64>,
        min_feature_px: usize,
    ) -> Result<Self> {
        if t_star.len() != bases.len() || t_lower.len() != bases.len() || bases.is_empty() {
            return invalid("isovalue lists do not match the basis count");
        }
        let mut phi_star = Vec::new();
        let mut phi_lower = Vec::new();
        let mut v_lower = Vec::new();
        for (d, b) in bases.iter().enumerate() {
            let f = b.phi_b.field();
            phi_star.push(f.offset(t_star[d]));
            let lower = f.offset(t_lower[d]);
            v_lower.push(volume_fraction(&lower, 0.0));
            phi_lower.push(lower.clone());
        }
        let v_min = v_lower.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            bases,
            v_star,
            t_star,
            t_lower,
            v_lower,
            v_min,
            min_feature_px,
            phi_star,
            phi_lower,
        })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn nx(&self) -> usize {
        self.bases[0].phi_b.nx()
    }

    pub fn ny(&self) -> usize {
        self.bases[0].phi_b.ny()
    }

    pub fn cells(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn names(&self) -> Vec<String> {
        self.bases.iter().map(|b| b.name.clone()).collect()
    }

    pub fn phi_star(&self, d: usize) -> &ScalarField2D {
        &self.phi_star[d]
    }

    pub fn phi_lower(&self, d: usize) -> &ScalarField2D {
        &self.phi_lower[d]
    }

    /// Keeps only the listed bases, in the given order.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&d| d >= self.len()) {
            return invalid("basis subset index out of range");
        }
        Self::from_parts(
            keep.iter().map(|&d| self.bases[d].clone()).collect(),
            self.v_star,
            keep.iter().map(|&d| self.t_star[d]).collect(),
            keep.iter().map(|&d| self.t_lower[d]).collect(),
            self.min_feature_px,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for b in &self.bases {
            let file = format!("{}.field", b.name);
            write_field(&dir.join(&file), b.phi_b.field())?;
            files.push(file);
        }
        let manifest = BasisManifest {
            names: self.names(),
            files,
            v_star: self.v_star,
            t_star: self.t_star.clone(),
            t_lower: self.t_lower.clone(),
            v_lower: self.v_lower.clone(),
            v_min: self.v_min,
            min_feature_px: self.min_feature_px,
            nx: self.nx(),
            ny: self.ny(),
        };
        let path = dir.join(BASIS_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BASIS_MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: BasisManifest = serde_json::from_str(&text)?;
        if m.names.len() != m.files.len() {
            return invalid("basis manifest names/files length mismatch");
        }
        let mut bases = Vec::new();
        for (name, file) in m.names.iter().zip(&m.files) {
            let field = read_field(&dir.join(file))?;
            bases.push(BasisClass::new(
                name.clone(),
                SignedDistanceField::from_field(field),
            )?);
        }
        Self::from_parts(bases, m.v_star, m.t_star, m.t_lower, m.min_feature_px)
    }
}

pub const BASIS_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisManifest {
    names: Vec<String>,
    files: Vec<String>,
    v_star: f64,
    t_star: Vec<f64>,
    t_lower: Vec<f64>,
    v_lower: Vec<f64>,
    v_min: f64,
    min_feature_px: usize,
    nx: usize,
    ny: usize,
}

/// Plain-text field: header line `nx ny`, then one line of `nx` values per row.
pub fn write_field(path: &Path, f: &ScalarField2D) -> Result<()> {
    let mut s = format!("{} {}\n", f.nx(), f.ny());
    for j in 0..f.ny() {
        let row: Vec<String> = (0..f.nx()).map(|i| format!("{}", f.get(i, j))).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<ScalarField2D> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty field file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| perr(1, format!("bad header: {e}")))?;
    if dims.len() != 2 {
        return Err(perr(1, "header must be 'nx ny'".into()));
    }
    let mut values = Vec::with_capacity(dims[0] * dims[1]);
    for (k, line) in lines {
        for tok in line.split_whitespace() {
            values.push(
                tok.parse::<f64>()
                    .map_err(|e| perr(k + 1, format!("bad value '{tok}': {e}")))?,
            );
        }
    }
    ScalarField2D::new(dims[0], dims[1], values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_truss_hits_common_volume() {
        let b = truss_basis("x", 50, 0.1).unwrap();
        let set = prepare_basis_set(vec![b], &PrepareOptions::default()).unwrap();
        let v = volume_fraction(set.phi_star(0), 0.0);
        assert!((v - 0.5).abs() <= 1e-3, "{v}");
    }

    #[test]
    fn lower_bound_is_smallest_feasible_volume() {
        // a band whose feasibility only depends on its thickness
        let n = 30;
        let b = BasisClass::new(
            "band",
            truss_sdf(&[Segment::new([0.0, 0.5], [1.0, 0.5], 0.1)], n).unwrap(),
        )
        .unwrap();
        let opts = PrepareOptions {
            min_feature_px: 4,
            lower_margin: 0.0,
            ..Default::default()
        };
        let set = prepare_basis_set(vec![b.clone()], &opts).unwrap();
        // exhaustive scan: smallest feasible volume over a fine isovalue grid
        let f = b.phi_b.field();
        let mut v0 = None;
        for k in 0..4000 {
            let t = -10.0 + k as f64 * 0.005;
            if is_feasible(&f.threshold(t), 4) {
                v0 = Some(volume_fraction(f, t));
                break;
            }
        }
        assert_eq!(set.v_lower[0], v0.unwrap());
        assert!((set.v_lower[0] - 4.0 / n as f64).abs() < 1e-12);
        assert!(is_feasible(&set.phi_lower(0).threshold(0.0), 4));
    }

    #[test]
    fn margin_keeps_shifted_bound_feasible() {
        let b = truss_basis("star", 50, 0.1).unwrap();
        let set = prepare_basis_set(vec![b], &PrepareOptions::default()).unwrap();
        let lower = set.phi_lower(0);
        // an activation of e^-32 at beta2 = 32 moves the bound inward by one cell
        for shift in [0.0, 0.25, 0.5, 0.99] {
            assert!(is_feasible(&lower.threshold(-shift), 4), "shift {shift}");
        }
    }

    #[test]
    fn infeasible_basis_rejected() {
        // a 2x2 checkerboard of isolated dots never gets a 6 px feature before filling the cell
        let f = ScalarField2D::from_fn(
            12,
            12,
            |i, j| if (i / 2 + j / 2) % 2 == 0 { 1.0 } else { -1.0 },
        )
        .unwrap();
        let b = BasisClass::new("dots", SignedDistanceField::from_field(f)).unwrap();
        let opts = PrepareOptions {
            min_feature_px: 6,
            v_max: 0.6,
            ..Default::default()
        };
        let err = prepare_basis_set(vec![b], &opts).unwrap_err();
        assert!(err.to_string().contains("dots"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bases = vec![
            truss_basis("x", 20, 0.1).unwrap(),
            truss_basis("cross", 20, 0.1).unwrap(),
        ];
        let opts = PrepareOptions {
            min_feature_px: 2,
            ..Default::default()
        };
        let set = prepare_basis_set(bases, &opts).unwrap();
        set.save(dir.path()).unwrap();
        let back = BasisSet::load(dir.path()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn malformed_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.field");
        fs::write(&p, "2 2\n0.0 1.0\n0.5 oops\n").unwrap();
        match read_field(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
