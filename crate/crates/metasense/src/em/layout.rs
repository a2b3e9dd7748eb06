//! Antenna geometry: feed and meta-atom placement on the aperture, plus
//! seeded random layout generation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PlanePose, Vec3};

/// Geometry of one antenna: feed position, meta-atom positions (both in
/// local 2D aperture coordinates, meters) and the aperture's world pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmaLayout {
    pub feed: [f64; 2],
    pub atoms: Vec<[f64; 2]>,
    pub aperture_half_width: f64,
    pub min_spacing: f64,
    pub pose: PlanePose,
}

fn dist2d(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl DmaLayout {
    pub fn new(
        feed: [f64; 2],
        atoms: Vec<[f64; 2]>,
        aperture_half_width: f64,
        min_spacing: f64,
        pose: PlanePose,
    ) -> Result<Self> {
        let layout = Self {
            feed,
            atoms,
            aperture_half_width,
            min_spacing,
            pose,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.aperture_half_width.is_finite() && self.aperture_half_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "aperture_half_width must be positive, got {}",
                self.aperture_half_width
            )));
        }
        if self.atoms.is_empty() {
            return Err(Error::InvalidArgument("layout needs at least one atom".into()));
        }
        let hw = self.aperture_half_width;
        let in_bounds = |p: [f64; 2]| p[0].abs() <= hw && p[1].abs() <= hw;
        if !in_bounds(self.feed) {
            return Err(Error::InvalidArgument("feed outside aperture bounds".into()));
        }
        for (n, &a) in self.atoms.iter().enumerate() {
            if !in_bounds(a) {
                return Err(Error::InvalidArgument(format!(
                    "atom {n} at ({}, {}) outside aperture bounds",
                    a[0], a[1]
                )));
            }
            if dist2d(a, self.feed) == 0.0 {
                return Err(Error::DegenerateGeometry(format!(
                    "atom {n} coincides with the feed"
                )));
            }
        }
        for i in 0..self.atoms.len() {
            for j in (i + 1)..self.atoms.len() {
                let d = dist2d(self.atoms[i], self.atoms[j]);
                if d < self.min_spacing {
                    return Err(Error::InvalidArgument(format!(
                        "atoms {i} and {j} spaced {d:.4e} m, below min_spacing {:.4e} m",
                        self.min_spacing
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// In-guide distance from the feed to atom n.
    pub fn feed_distance(&self, n: usize) -> f64 {
        dist2d(self.atoms[n], self.feed)
    }

    /// In-guide distance between atoms n and m.
    pub fn atom_distance(&self, n: usize, m: usize) -> f64 {
        dist2d(self.atoms[n], self.atoms[m])
    }

    /// World position of atom n on the aperture plane.
    pub fn atom_world_position(&self, n: usize) -> Vec3 {
        self.pose.lift(self.atoms[n])
    }

    /// Same layout placed under a different world pose.
    pub fn with_pose(mut self, pose: PlanePose) -> Self {
        self.pose = pose;
        self
    }
}

/// Per-atom activation in [0, 1]. Binary 0/1 values encode hard OFF/ON
/// configurations; fractional values arise during training relaxation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomStates(pub Vec<f64>);

impl AtomStates {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (n, &s) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "atom state {n} = {s} outside [0, 1]"
                )));
            }
        }
        Ok(Self(values))
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        Self(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn all_off(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn all_on(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

const MAX_REJECTED_DRAWS: usize = 10_000;

/// Rejection-sample `n_atoms` uniform positions on the aperture, honoring
/// `min_spacing` pairwise and against the feed (placed at the aperture
/// center). Deterministic given the seed; the pose defaults to facing +z at
/// the world origin and is re-placed by the caller.
pub fn random_layout(
    rng_seed: u64,
    n_atoms: usize,
    aperture_half_width: f64,
    min_spacing: f64,
) -> Result<DmaLayout> {
    if n_atoms == 0 {
        return Err(Error::InvalidArgument("n_atoms must be >= 1".into()));
    }
    if !(aperture_half_width.is_finite() && aperture_half_width > 0.0) {
        return Err(Error::InvalidArgument(
            "aperture_half_width must be positive".into(),
        ));
    }
    if !(min_spacing.is_finite() && min_spacing >= 0.0) {
        return Err(Error::InvalidArgument("min_spacing must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let feed = [0.0, 0.0];
    let mut atoms: Vec<[f64; 2]> = Vec::with_capacity(n_atoms);
    let mut rejected = 0usize;
    while atoms.len() < n_atoms {
        let candidate = [
            rng.random_range(-aperture_half_width..=aperture_half_width),
            rng.random_range(-aperture_half_width..=aperture_half_width),
        ];
        let clear_of_feed = dist2d(candidate, feed) >= min_spacing.max(f64::MIN_POSITIVE);
        let clear_of_atoms = atoms.iter().all(|&a| dist2d(candidate, a) >= min_spacing);
        if clear_of_feed && clear_of_atoms {
            atoms.push(candidate);
        } else {
            rejected += 1;
            if rejected > MAX_REJECTED_DRAWS {
                return Err(Error::PackingInfeasible {
                    rejected,
                    atom_index: atoms.len(),
                    n_atoms,
                });
            }
        }
    }
    DmaLayout::new(
        feed,
        atoms,
        aperture_half_width,
        min_spacing,
        PlanePose::facing_plus_z([0.0; 3]),
    )
}
