//! Scene-plane discretization and the real/complex grids living on it.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

use super::default_wavelength;

/// Discretization of the scene plane. The plane is centered on the axis
/// midway between the two antennas, at `plane_distance` along +z; pixel
/// (0, 0) is the top-left corner, rows increase downward (-y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGrid {
    pub n_rows: usize,
    pub n_cols: usize,
    pub pixel_pitch: f64,
    pub plane_distance: f64,
}

impl SceneGrid {
    pub fn new(n_rows: usize, n_cols: usize, pixel_pitch: f64, plane_distance: f64) -> Result<Self> {
        let grid = Self {
            n_rows,
            n_cols,
            pixel_pitch,
            plane_distance,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// 28x28 grid at half-wavelength pitch, 20 wavelengths from the antennas.
    pub fn default_28() -> Self {
        let lambda = default_wavelength();
        Self {
            n_rows: 28,
            n_cols: 28,
            pixel_pitch: lambda / 2.0,
            plane_distance: 20.0 * lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::InvalidArgument(
                "scene grid needs at least one row and column".into(),
            ));
        }
        if !(self.pixel_pitch.is_finite() && self.pixel_pitch > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel_pitch must be positive, got {}",
                self.pixel_pitch
            )));
        }
        if !(self.plane_distance.is_finite() && self.plane_distance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "plane_distance must be positive, got {}",
                self.plane_distance
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integration cell area, pixel_pitch squared.
    pub fn cell_area(&self) -> f64 {
        self.pixel_pitch * self.pixel_pitch
    }

    /// World position of the center of pixel (row, col).
    pub fn pixel_position(&self, row: usize, col: usize) -> Vec3 {
        let x = (col as f64 - (self.n_cols as f64 - 1.0) / 2.0) * self.pixel_pitch;
        let y = ((self.n_rows as f64 - 1.0) / 2.0 - row as f64) * self.pixel_pitch;
        [x, y, self.plane_distance]
    }
}

/// Real-valued reflectivity sigma(r) on a scene grid, entries in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReflectivity {
    pub grid: SceneGrid,
    /// Row-major, n_rows x n_cols.
    pub values: Array2<f64>,
}

impl SceneReflectivity {
    pub fn new(grid: SceneGrid, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (grid.n_rows, grid.n_cols) {
            return Err(Error::ShapeMismatch(format!(
                "reflectivity shape {:?} does not match grid {}x{}",
                values.dim(),
                grid.n_rows,
                grid.n_cols
            )));
        }
        for &v in values.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "reflectivity entry {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: SceneGrid) -> Self {
        let values = Array2::zeros((grid.n_rows, grid.n_cols));
        Self { grid, values }
    }
}

/// Complex scalar field sampled on a scene grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub grid: SceneGrid,
    pub values: Array2<Complex64>,
}

impl FieldMap {
    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Pointwise product of the TX and RX scene fields (no conjugation); the
/// sensing kernel of one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationPattern {
    pub grid: SceneGrid,
    pub values: Array2<Complex64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_positions_are_centered() {
        let g = SceneGrid::new(3, 3, 0.5, 2.0).unwrap();
        assert_eq!(g.pixel_position(1, 1), [0.0, 0.0, 2.0]);
        assert_eq!(g.pixel_position(0, 0), [-0.5, 0.5, 2.0]);
        assert_eq!(g.pixel_position(2, 2), [0.5, -0.5, 2.0]);
    }

    #[test]
    fn cell_area_is_pitch_squared() {
        let g = SceneGrid::new(2, 2, 0.25, 1.0).unwrap();
        assert_eq!(g.cell_area(), 0.0625);
    }

    #[test]
    fn reflectivity_rejects_out_of_range() {
        let g = SceneGrid::new(2, 2, 0.1, 1.0).unwrap();
        let mut v = Array2::zeros((2, 2));
        v[[0, 1]] = 1.5;
        assert!(SceneReflectivity::new(g, v).is_err());
    }

    #[test]
    fn reflectivity_rejects_shape_mismatch() {
        let g = SceneGrid::new(2, 2, 0.1, 1.0).unwrap();
        let v = Array2::zeros((2, 3));
        assert!(matches!(
            SceneReflectivity::new(g, v),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
