//! Analytical coupled-dipole forward model for a pair of waveguide-fed
//! programmable antennas probing a reflective scene plane.
//!
//! The model is scalar: a cylindrical in-guide feed wave
//! `exp(i k_g d) / sqrt(d)` excites the meta-atoms, inter-atom multiple
//! scattering uses the same in-guide kernel, and each atom radiates to the
//! scene through the free-space kernel `exp(i k0 R) / (4 pi R)`. A single
//! measurement integrates the product of the TX and RX scene fields against
//! the scene reflectivity.

mod forward;
mod grid;
mod layout;

pub use forward::{
    illumination, incident_waveguide_field, measure, measurement_pattern_cogradient,
    pattern_states_gradient, radiate_to_scene, solve_dipole_moments, trace_measurement,
    DmaAssembly, KahanSum, MeasurementTrace, MomentSolve,
};
pub use grid::{FieldMap, IlluminationPattern, SceneGrid, SceneReflectivity};
pub use layout::{random_layout, AtomStates, DmaLayout};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default operating frequency, 10 GHz.
pub const DEFAULT_FREQUENCY: f64 = 10.0e9;

/// Number of programmable meta-atoms per antenna.
pub const DEFAULT_ATOM_COUNT: usize = 16;

/// Free-space wavelength at the default frequency (~3 cm).
pub fn default_wavelength() -> f64 {
    SPEED_OF_LIGHT / DEFAULT_FREQUENCY
}

/// Scalar electromagnetic constants of the coupled-dipole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmModel {
    /// Operating frequency in Hz.
    pub frequency: f64,
    /// Relative permittivity of the guide filling; sets k_g = k0 * sqrt(eps_r).
    pub eps_r: f64,
    /// Dimensionless gain multiplying the ON polarizability i * 4 pi / k0.
    pub alpha_gain: f64,
    /// Include in-guide multiple scattering between atoms.
    pub coupling_enabled: bool,
}

impl Default for EmModel {
    fn default() -> Self {
        Self {
            frequency: DEFAULT_FREQUENCY,
            eps_r: 3.0,
            alpha_gain: 0.1,
            coupling_enabled: true,
        }
    }
}

impl EmModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency.is_finite() && self.frequency > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frequency must be positive, got {}",
                self.frequency
            )));
        }
        if !(self.eps_r.is_finite() && self.eps_r >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eps_r must be >= 1, got {}",
                self.eps_r
            )));
        }
        if !(self.alpha_gain.is_finite() && self.alpha_gain > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha_gain must be positive, got {}",
                self.alpha_gain
            )));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency
    }

    /// Free-space wavenumber 2 pi f / c.
    pub fn k0(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.frequency / SPEED_OF_LIGHT
    }

    /// Guided wavenumber k0 * sqrt(eps_r); >= k0 since eps_r >= 1.
    pub fn k_guide(&self) -> f64 {
        self.k0() * self.eps_r.sqrt()
    }

    /// Polarizability of a fully ON atom: i * 4 pi / k0, scaled by the gain.
    /// Positive imaginary part keeps the response passive under the
    /// exp(+ikr) phase convention. OFF atoms have exactly zero moment.
    pub fn alpha_on(&self) -> Complex64 {
        Complex64::new(0.0, 4.0 * std::f64::consts::PI / self.k0() * self.alpha_gain)
    }
}

/// In-guide propagation kernel exp(i k_g d) / sqrt(d).
pub(crate) fn guide_kernel(dist: f64, k_guide: f64) -> Complex64 {
    Complex64::from_polar(1.0 / dist.sqrt(), k_guide * dist)
}

/// Free-space scalar kernel exp(i k0 R) / (4 pi R).
pub(crate) fn freespace_kernel(dist: f64, k0: f64) -> Complex64 {
    Complex64::from_polar(1.0 / (4.0 * std::f64::consts::PI * dist), k0 * dist)
}
