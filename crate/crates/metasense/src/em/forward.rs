//! Incident feed fields, the coupled dipole-moment solve, radiation to the
//! scene plane, illumination composition and the discretized measurement,
//! together with the adjoints needed for end-to-end training.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geom::distance;

use super::grid::{FieldMap, IlluminationPattern, SceneGrid, SceneReflectivity};
use super::layout::{AtomStates, DmaLayout};
use super::{freespace_kernel, guide_kernel, EmModel};

/// Condition-estimate ceiling for the coupled solve.
const COND_LIMIT: f64 = 1e12;

/// Compensated (Kahan) accumulator; keeps long reductions near eps accuracy.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// In-guide feed wave at every atom: h_n = exp(i k_g d_n) / sqrt(d_n) with
/// d_n the in-plane distance from the feed. Unit drive amplitude.
pub fn incident_waveguide_field(layout: &DmaLayout, model: &EmModel) -> Result<Vec<Complex64>> {
    layout.validate()?;
    model.validate()?;
    let k_g = model.k_guide();
    let mut field = Vec::with_capacity(layout.atom_count());
    for n in 0..layout.atom_count() {
        let d = layout.feed_distance(n);
        if d == 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "atom {n} coincides with the feed"
            )));
        }
        field.push(guide_kernel(d, k_g));
    }
    Ok(field)
}

/// One-norm of a complex matrix (max column modulus sum).
fn one_norm(m: &DMatrix<Complex64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Result of a dipole-moment solve: the moments and the 1-norm condition
/// estimate of the scattering system (1.0 when coupling is disabled).
#[derive(Debug, Clone)]
pub struct MomentSolve {
    pub moments: Vec<Complex64>,
    pub cond: f64,
}

/// Shared core of the coupled solve: given effective polarizabilities `a`
/// and the incident field, solve (I - diag(a) G) p = a .* h.
fn solve_moments_impl(
    a: &[Complex64],
    incident: &[Complex64],
    coupling: Option<&DMatrix<Complex64>>,
) -> Result<MomentSolve> {
    let n = a.len();
    let b: Vec<Complex64> = a.iter().zip(incident).map(|(an, hn)| an * hn).collect();
    let coupling = match coupling {
        None => {
            return Ok(MomentSolve {
                moments: b,
                cond: 1.0,
            })
        }
        Some(g) => g,
    };
    let mut system = DMatrix::<Complex64>::identity(n, n);
    for r in 0..n {
        for c in 0..n {
            system[(r, c)] -= a[r] * coupling[(r, c)];
        }
    }
    let rhs = DVector::from_column_slice(&b);
    let lu = system.clone().lu();
    let inverse = lu.try_inverse().ok_or(Error::ResonanceSingularity {
        cond: f64::INFINITY,
        limit: COND_LIMIT,
    })?;
    let cond = one_norm(&system) * one_norm(&inverse);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::ResonanceSingularity {
            cond,
            limit: COND_LIMIT,
        });
    }
    let mut p = lu.solve(&rhs).ok_or(Error::ResonanceSingularity {
        cond,
        limit: COND_LIMIT,
    })?;
    // A couple of refinement sweeps pin the residual at the contract bound
    // even when the system is noticeably conditioned.
    let rhs_norm = rhs.norm();
    if rhs_norm > 0.0 {
        for _ in 0..2 {
            let residual = &rhs - &system * &p;
            if residual.norm() <= 1e-13 * rhs_norm {
                break;
            }
            if let Some(correction) = lu.solve(&residual) {
                p += correction;
            } else {
                break;
            }
        }
    }
    Ok(MomentSolve {
        moments: p.iter().copied().collect(),
        cond,
    })
}

fn effective_polarizabilities(states: &AtomStates, model: &EmModel) -> Vec<Complex64> {
    let alpha = model.alpha_on();
    states.values().iter().map(|&s| s * alpha).collect()
}

/// In-guide coupling matrix G_{nm} = exp(i k_g r_{nm}) / sqrt(r_{nm}) for
/// n != m, zero diagonal.
fn guide_coupling_matrix(layout: &DmaLayout, model: &EmModel) -> DMatrix<Complex64> {
    let n = layout.atom_count();
    let k_g = model.k_guide();
    DMatrix::from_fn(n, n, |r, c| {
        if r == c {
            Complex64::new(0.0, 0.0)
        } else {
            guide_kernel(layout.atom_distance(r, c), k_g)
        }
    })
}

/// Solve the coupled dipole system for the per-atom moments. With coupling
/// disabled this reduces to p_n = s_n * alpha_on * h_n.
pub fn solve_dipole_moments(
    layout: &DmaLayout,
    states: &AtomStates,
    incident: &[Complex64],
    model: &EmModel,
) -> Result<Vec<Complex64>> {
    if states.len() != layout.atom_count() || incident.len() != layout.atom_count() {
        return Err(Error::ShapeMismatch(format!(
            "states ({}), incident ({}) and layout ({}) lengths disagree",
            states.len(),
            incident.len(),
            layout.atom_count()
        )));
    }
    AtomStates::new(states.values().to_vec())?;
    let a = effective_polarizabilities(states, model);
    let coupling = model
        .coupling_enabled
        .then(|| guide_coupling_matrix(layout, model));
    Ok(solve_moments_impl(&a, incident, coupling.as_ref())?.moments)
}

/// Free-space radiation kernel from every atom to every scene pixel,
/// flattened row-major over pixels: K[p, n] = exp(i k0 R_pn) / (4 pi R_pn).
fn radiation_matrix(
    layout: &DmaLayout,
    grid: &SceneGrid,
    model: &EmModel,
) -> Result<Array2<Complex64>> {
    let n_atoms = layout.atom_count();
    let k0 = model.k0();
    let atom_positions: Vec<_> = (0..n_atoms).map(|n| layout.atom_world_position(n)).collect();
    let mut kernel = Array2::zeros((grid.len(), n_atoms));
    for row in 0..grid.n_rows {
        for col in 0..grid.n_cols {
            let pixel = grid.pixel_position(row, col);
            let flat = row * grid.n_cols + col;
            for (n, &pos) in atom_positions.iter().enumerate() {
                let r = distance(pixel, pos);
                if r == 0.0 {
                    return Err(Error::DegenerateGeometry(format!(
                        "atom {n} coincides with scene pixel ({row}, {col})"
                    )));
                }
                kernel[[flat, n]] = freespace_kernel(r, k0);
            }
        }
    }
    Ok(kernel)
}

/// Radiate dipole moments to the scene plane:
/// E(r_p) = sum_n p_n exp(i k0 R_pn) / (4 pi R_pn).
pub fn radiate_to_scene(
    layout: &DmaLayout,
    moments: &[Complex64],
    grid: &SceneGrid,
    model: &EmModel,
) -> Result<FieldMap> {
    if moments.len() != layout.atom_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} moments for {} atoms",
            moments.len(),
            layout.atom_count()
        )));
    }
    grid.validate()?;
    let kernel = radiation_matrix(layout, grid, model)?;
    Ok(apply_radiation(&kernel, moments, grid))
}

fn apply_radiation(kernel: &Array2<Complex64>, moments: &[Complex64], grid: &SceneGrid) -> FieldMap {
    let mut flat = Array1::<Complex64>::zeros(grid.len());
    for (pixel, out) in flat.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (n, &p) in moments.iter().enumerate() {
            acc += kernel[[pixel, n]] * p;
        }
        *out = acc;
    }
    let values = flat
        .into_shape_with_order((grid.n_rows, grid.n_cols))
        .expect("grid length");
    FieldMap {
        grid: grid.clone(),
        values,
    }
}

/// Full forward composition for one antenna pair: feed -> moments ->
/// radiated fields, then the pointwise product of the TX and RX fields
/// (no conjugation).
pub fn illumination(
    layout_tx: &DmaLayout,
    states_tx: &AtomStates,
    layout_rx: &DmaLayout,
    states_rx: &AtomStates,
    grid: &SceneGrid,
    model: &EmModel,
) -> Result<IlluminationPattern> {
    let tx = DmaAssembly::new(layout_tx.clone(), model.clone(), grid.clone())?;
    let rx = DmaAssembly::new(layout_rx.clone(), model.clone(), grid.clone())?;
    let field_tx = tx.radiate(&tx.solve_moments(states_tx)?.moments);
    let field_rx = rx.radiate(&rx.solve_moments(states_rx)?.moments);
    Ok(compose_illumination(&field_tx, &field_rx))
}

pub(crate) fn compose_illumination(tx: &FieldMap, rx: &FieldMap) -> IlluminationPattern {
    debug_assert_eq!(tx.grid, rx.grid);
    IlluminationPattern {
        grid: tx.grid.clone(),
        values: &tx.values * &rx.values,
    }
}

/// Discretized measurement m = cell_area * sum_p J[p] sigma[p], compensated
/// summation per component.
pub fn measure(pattern: &IlluminationPattern, sigma: &SceneReflectivity) -> Result<Complex64> {
    if pattern.grid != sigma.grid {
        return Err(Error::ShapeMismatch(
            "illumination pattern and reflectivity grids differ".into(),
        ));
    }
    let mut re = KahanSum::default();
    let mut im = KahanSum::default();
    for (j, &s) in pattern.values.iter().zip(sigma.values.iter()) {
        re.add(j.re * s);
        im.add(j.im * s);
    }
    let cell = pattern.grid.cell_area();
    Ok(Complex64::new(cell * re.value(), cell * im.value()))
}

/// Precomputed, configuration-independent pieces of one antenna's forward
/// model: feed field, in-guide coupling and the radiation kernel to a fixed
/// scene grid. Shared across measurements and training steps.
#[derive(Debug, Clone)]
pub struct DmaAssembly {
    pub layout: DmaLayout,
    pub model: EmModel,
    pub grid: SceneGrid,
    incident: Vec<Complex64>,
    coupling: Option<DMatrix<Complex64>>,
    radiation: Array2<Complex64>,
}

impl DmaAssembly {
    pub fn new(layout: DmaLayout, model: EmModel, grid: SceneGrid) -> Result<Self> {
        let incident = incident_waveguide_field(&layout, &model)?;
        let coupling = model
            .coupling_enabled
            .then(|| guide_coupling_matrix(&layout, &model));
        let radiation = radiation_matrix(&layout, &grid, &model)?;
        Ok(Self {
            layout,
            model,
            grid,
            incident,
            coupling,
            radiation,
        })
    }

    pub fn atom_count(&self) -> usize {
        self.layout.atom_count()
    }

    pub fn incident(&self) -> &[Complex64] {
        &self.incident
    }

    pub fn solve_moments(&self, states: &AtomStates) -> Result<MomentSolve> {
        if states.len() != self.atom_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} states for {} atoms",
                states.len(),
                self.atom_count()
            )));
        }
        let a = effective_polarizabilities(states, &self.model);
        solve_moments_impl(&a, &self.incident, self.coupling.as_ref())
    }

    pub fn radiate(&self, moments: &[Complex64]) -> FieldMap {
        apply_radiation(&self.radiation, moments, &self.grid)
    }

    /// Adjoint of `radiate`: moments cogradient from a field cogradient,
    /// p_bar = K^H e_bar.
    pub fn radiate_adjoint(&self, field_bar: &Array2<Complex64>) -> Vec<Complex64> {
        let flat: Vec<Complex64> = field_bar.iter().copied().collect();
        (0..self.atom_count())
            .map(|n| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (pixel, &fb) in flat.iter().enumerate() {
                    acc += self.radiation[[pixel, n]].conj() * fb;
                }
                acc
            })
            .collect()
    }

    /// Adjoint of `solve_moments`: gradient of a real loss with respect to
    /// the real atom states, given the moments cogradient `p_bar`
    /// (dL/dRe(p) + i dL/dIm(p)). Solves the adjoint system M^H lambda =
    /// p_bar of the forward system M p = a .* h, then contracts with
    /// w = h + G p.
    pub fn states_gradient(
        &self,
        states: &AtomStates,
        solve: &MomentSolve,
        p_bar: &[Complex64],
    ) -> Result<Vec<f64>> {
        let n = self.atom_count();
        if p_bar.len() != n || states.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} cogradient entries / {} states for {} atoms",
                p_bar.len(),
                states.len(),
                n
            )));
        }
        let alpha = self.model.alpha_on();
        let g = match &self.coupling {
            None => {
                // p_k = s_k alpha h_k, so dL/ds_k = Re(conj(p_bar_k) alpha h_k).
                return Ok((0..n)
                    .map(|k| (p_bar[k].conj() * self.incident[k] * alpha).re)
                    .collect());
            }
            Some(g) => g,
        };
        let a = effective_polarizabilities(states, &self.model);
        let mut adjoint_system = DMatrix::<Complex64>::identity(n, n);
        for r in 0..n {
            for c in 0..n {
                adjoint_system[(r, c)] -= (a[c] * g[(c, r)]).conj();
            }
        }
        let rhs = DVector::from_column_slice(p_bar);
        let lambda = adjoint_system
            .lu()
            .solve(&rhs)
            .ok_or(Error::ResonanceSingularity {
                cond: f64::INFINITY,
                limit: COND_LIMIT,
            })?;
        let p = DVector::from_column_slice(&solve.moments);
        let gp = g * p;
        Ok((0..n)
            .map(|k| {
                let w = self.incident[k] + gp[k];
                (lambda[k].conj() * w * alpha).re
            })
            .collect())
    }
}

/// Everything one measurement computes through a TX/RX antenna pair,
/// cached for the backward pass.
#[derive(Debug, Clone)]
pub struct MeasurementTrace {
    pub states_tx: AtomStates,
    pub states_rx: AtomStates,
    pub solve_tx: MomentSolve,
    pub solve_rx: MomentSolve,
    pub field_tx: FieldMap,
    pub field_rx: FieldMap,
    pub pattern: IlluminationPattern,
}

/// Forward trace of one measurement through both antennas.
pub fn trace_measurement(
    tx: &DmaAssembly,
    rx: &DmaAssembly,
    states_tx: &AtomStates,
    states_rx: &AtomStates,
) -> Result<MeasurementTrace> {
    let solve_tx = tx.solve_moments(states_tx)?;
    let solve_rx = rx.solve_moments(states_rx)?;
    let field_tx = tx.radiate(&solve_tx.moments);
    let field_rx = rx.radiate(&solve_rx.moments);
    let pattern = compose_illumination(&field_tx, &field_rx);
    Ok(MeasurementTrace {
        states_tx: states_tx.clone(),
        states_rx: states_rx.clone(),
        solve_tx,
        solve_rx,
        field_tx,
        field_rx,
        pattern,
    })
}

/// Backpropagate a cogradient on the illumination pattern to gradients on
/// the two antennas' atom states. `pattern_bar[p]` is
/// dL/dRe(J[p]) + i dL/dIm(J[p]).
pub fn pattern_states_gradient(
    tx: &DmaAssembly,
    rx: &DmaAssembly,
    trace: &MeasurementTrace,
    pattern_bar: &Array2<Complex64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    // J = E_tx .* E_rx, so E_tx_bar = conj(E_rx) .* J_bar and vice versa.
    let field_tx_bar = pattern_bar * &trace.field_rx.values.mapv(|z| z.conj());
    let field_rx_bar = pattern_bar * &trace.field_tx.values.mapv(|z| z.conj());
    let p_bar_tx = tx.radiate_adjoint(&field_tx_bar);
    let p_bar_rx = rx.radiate_adjoint(&field_rx_bar);
    let grad_tx = tx.states_gradient(&trace.states_tx, &trace.solve_tx, &p_bar_tx)?;
    let grad_rx = rx.states_gradient(&trace.states_rx, &trace.solve_rx, &p_bar_rx)?;
    Ok((grad_tx, grad_rx))
}

/// Cogradient on the pattern induced by a measurement cogradient:
/// m = cell_area * sum_p J[p] sigma[p] gives J_bar[p] = cell_area *
/// sigma[p] * m_bar.
pub fn measurement_pattern_cogradient(
    sigma: &SceneReflectivity,
    m_bar: Complex64,
) -> Array2<Complex64> {
    let cell = sigma.grid.cell_area();
    sigma.values.mapv(|s| m_bar * (cell * s))
}
