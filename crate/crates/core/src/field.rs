//! Cell-centered 2D grids on the unit square.
//!
//! Storage is row-major with row `j = 0` at `y = 0`; cell `(i, j)` has its
//! center at `((i + 0.5) / nx, (j + 0.5) / ny)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField2D {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl ScalarField2D {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return invalid(format!("field must be at least 2x2, got {nx}x{ny}"));
        }
        if values.len() != nx * ny {
            return invalid(format!(
                "field {nx}x{ny} needs {} values, got {}",
                nx * ny,
                values.len()
            ));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite field value at index {k}"));
        }
        Ok(Self { nx, ny, values })
    }

    pub fn filled(nx: usize, ny: usize, value: f64) -> Result<Self> {
        Self::new(nx, ny, vec![value; nx * ny])
    }

    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                values.push(f(i, j));
            }
        }
        Self::new(nx, ny, values)
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.nx
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.ny
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Applies `f` cell-wise; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.nx,
            self.ny,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn offset(&self, t: f64) -> Self {
        Self {
            nx: self.nx,
            ny: self.ny,
            values: self.values.iter().map(|v| v + t).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            nx: self.nx,
            ny: self.ny,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Solid mask of `{value + t >= 0}`.
    pub fn threshold(&self, t: f64) -> BinaryGrid {
        BinaryGrid {
            nx: self.nx,
            ny: self.ny,
            cells: self.values.iter().map(|&v| v + t >= 0.0).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }
}

/// Binary solid/void image, `true` = solid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryGrid {
    nx: usize,
    ny: usize,
    cells: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(nx: usize, ny: usize, cells: Vec<bool>) -> Result<Self> {
        if nx == 0 || ny == 0 || cells.len() != nx * ny {
            return invalid(format!(
                "binary grid {nx}x{ny} with {} cells is malformed",
                cells.len()
            ));
        }
        Ok(Self { nx, ny, cells })
    }

    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut cells = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                cells.push(f(i, j));
            }
        }
        Self::new(nx, ny, cells)
    }

    pub fn filled(nx: usize, ny: usize, solid: bool) -> Result<Self> {
        Self::new(nx, ny, vec![solid; nx * ny])
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.nx
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.ny
    }

    #[inline]
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.nx + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, solid: bool) {
        self.cells[j * self.nx + i] = solid;
    }

    pub fn solid_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn volume_fraction(&self) -> f64 {
        self.solid_count() as f64 / self.cells.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            nx: self.nx,
            ny: self.ny,
            cells: self.cells.iter().map(|c| !c).collect(),
        }
    }

    /// Density grid with 1.0 for solid and 0.0 for void.
    pub fn to_density(&self) -> ScalarField2D {
        ScalarField2D {
            nx: self.nx,
            ny: self.ny,
            values: self
                .cells
                .iter()
                .map(|&c| if c { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_nonfinite() {
        assert!(ScalarField2D::new(1, 4, vec![0.0; 4]).is_err());
        assert!(ScalarField2D::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(ScalarField2D::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn threshold_includes_zero_level() {
        let f = ScalarField2D::new(2, 2, vec![-1.0, 0.0, 0.5, -0.25]).unwrap();
        let b = f.threshold(0.0);
        assert_eq!(b.cells(), &[false, true, true, false]);
        assert_eq!(f.threshold(0.25).solid_count(), 3);
    }
}
