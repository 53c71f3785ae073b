//! Categorical signed measures on a fixed, uniformly spaced atom grid.
//!
//! Every measure here is a mass vector over the atoms `z_1 < ... < z_m`.
//! Masses may be negative; the only invariant carried by [`SignedMeasure`]
//! and [`ReturnFunction`] is unit total mass. The categorical projection
//! maps arbitrary weighted particles onto the grid by two-hop linear
//! interpolation, which is the Cramér (l2) optimal projection.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

/// Tolerance on total mass for members of the unit-mass signed space.
pub const MASS_TOL: f64 = 1e-9;
/// Masses above this (negative) threshold still count as a distribution.
pub const NONNEG_TOL: f64 = 1e-12;
const SPACING_RTOL: f64 = 1e-12;
// Positions within this fraction of a cell of an atom snap onto it.
const SNAP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AtomGrid {
    atoms: Vec<f64>,
    dz: f64,
}

impl AtomGrid {
    /// Uniform grid `v_min + i (v_max - v_min) / (m - 1)`.
    pub fn uniform(v_min: f64, v_max: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 atoms, got {m}")));
        }
        if !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::NonFinite("grid bounds"));
        }
        if v_min >= v_max {
            return Err(Error::InvalidGrid(format!(
                "v_min ({v_min}) must be below v_max ({v_max})"
            )));
        }
        let step = (v_max - v_min) / (m - 1) as f64;
        let mut atoms: Vec<f64> = (0..m).map(|i| v_min + i as f64 * step).collect();
        atoms[m - 1] = v_max;
        Ok(Self { atoms, dz: step })
    }

    /// Builds a grid from explicit atoms, rejecting non-uniform spacing.
    pub fn from_atoms(atoms: Vec<f64>) -> Result<Self> {
        let m = atoms.len();
        if m < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 atoms, got {m}")));
        }
        if atoms.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("atoms"));
        }
        let dz = (atoms[m - 1] - atoms[0]) / (m - 1) as f64;
        if dz <= 0.0 {
            return Err(Error::InvalidGrid("atoms must be strictly increasing".into()));
        }
        let scale = atoms[0].abs().max(atoms[m - 1].abs()).max(dz);
        for w in atoms.windows(2) {
            let gap = w[1] - w[0];
            if gap <= 0.0 {
                return Err(Error::InvalidGrid("atoms must be strictly increasing".into()));
            }
            if (gap - dz).abs() > SPACING_RTOL * scale.max(1.0) * 16.0 {
                return Err(Error::InvalidGrid(format!(
                    "non-uniform spacing: gap {gap} vs mean {dz}"
                )));
            }
        }
        Ok(Self { atoms, dz })
    }

    /// Grid with `refine` cells per cell of `self`; the atoms of `self` are
    /// every `refine`-th atom of the result.
    pub fn refined(&self, refine: usize) -> Self {
        assert!(refine >= 1);
        if refine == 1 {
            return self.clone();
        }
        let m = (self.len() - 1) * refine + 1;
        let step = self.dz / refine as f64;
        let mut atoms = Vec::with_capacity(m);
        for (c, z) in self.atoms.iter().enumerate() {
            atoms.push(*z);
            if c + 1 < self.len() {
                for s in 1..refine {
                    atoms.push(z + s as f64 * step);
                }
            }
        }
        Self { atoms, dz: step }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.dz
    }

    pub fn v_min(&self) -> f64 {
        self.atoms[0]
    }

    pub fn v_max(&self) -> f64 {
        self.atoms[self.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.v_max() - self.v_min()
    }

    /// True when `[r_min, r_max] / (1 - gamma)` fits inside the grid.
    pub fn covers_returns(&self, r_min: f64, r_max: f64, gamma: f64) -> bool {
        let lo = r_min.min(0.0) / (1.0 - gamma);
        let hi = r_max.max(0.0) / (1.0 - gamma);
        self.v_min() <= lo + 1e-12 && self.v_max() >= hi - 1e-12
    }

    /// Lower bracketing atom and interpolation weight of the upper atom.
    ///
    /// The lower index is always in `0..=m-2`; out-of-range positions clip
    /// to the boundary atoms.
    #[inline]
    pub(crate) fn locate(&self, y: f64) -> (usize, f64) {
        let m = self.atoms.len();
        let t = (y - self.atoms[0]) / self.dz;
        if t <= 0.0 {
            return (0, 0.0);
        }
        let last = (m - 1) as f64;
        if t >= last {
            return (m - 2, 1.0);
        }
        let r = t.round();
        if (t - r).abs() <= SNAP_TOL {
            let j = r as usize;
            return if j >= m - 1 { (m - 2, 1.0) } else { (j, 0.0) };
        }
        let j = (t.floor() as usize).min(m - 2);
        (j, t - j as f64)
    }
}

impl fmt::Display for AtomGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}] x {} atoms", self.v_min(), self.v_max(), self.len())
    }
}

/// Uniform grid `v_min + i (v_max - v_min)/(m - 1)`.
pub fn make_uniform_grid(v_min: f64, v_max: f64, m: usize) -> Result<AtomGrid> {
    AtomGrid::uniform(v_min, v_max, m)
}

/// A finite weighted set of real positions, the intermediate form of a
/// back-up target before categorical projection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedParticleSet {
    particles: Vec<(f64, f64)>,
}

impl WeightedParticleSet {
    /// Unit-mass particle set.
    pub fn new(particles: Vec<(f64, f64)>) -> Result<Self> {
        let set = Self::with_any_mass(particles)?;
        let total = set.total_mass();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(invalid("particles", format!("weights sum to {total}, expected 1")));
        }
        Ok(set)
    }

    /// Particle set without the unit-mass requirement (used for linear
    /// combinations and zero-mass differences).
    pub fn with_any_mass(particles: Vec<(f64, f64)>) -> Result<Self> {
        if particles
            .iter()
            .any(|(y, w)| !y.is_finite() || !w.is_finite())
        {
            return Err(Error::NonFinite("particle"));
        }
        Ok(Self { particles })
    }

    pub fn particles(&self) -> &[(f64, f64)] {
        &self.particles
    }

    pub fn total_mass(&self) -> f64 {
        self.particles.iter().map(|(_, w)| w).sum()
    }

    pub fn mean(&self) -> f64 {
        self.particles.iter().map(|(y, w)| y * w).sum()
    }

    /// `alpha * self + beta * other` as a particle set.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        let mut particles = Vec::with_capacity(self.particles.len() + other.particles.len());
        particles.extend(self.particles.iter().map(|&(y, w)| (y, alpha * w)));
        particles.extend(other.particles.iter().map(|&(y, w)| (y, beta * w)));
        Self { particles }
    }
}

/// Categorical projection of a particle set onto the grid.
///
/// Linear in the weights and mass preserving; positions outside the grid
/// range clip to the nearest boundary atom.
pub fn project(grid: &Arc<AtomGrid>, particles: &WeightedParticleSet) -> SignedMeasure {
    let mut masses = vec![0.0; grid.len()];
    project_into(grid, particles.particles(), &mut masses);
    SignedMeasure {
        grid: Arc::clone(grid),
        masses,
    }
}

pub(crate) fn project_into(grid: &AtomGrid, particles: &[(f64, f64)], masses: &mut [f64]) {
    for &(y, w) in particles {
        let (lo, hi_w) = grid.locate(y);
        masses[lo] += w * (1.0 - hi_w);
        masses[lo + 1] += w * hi_w;
    }
}

/// Projected pushforward `Pi_c (b_{shift,slope})_#` restricted to grid
/// measures, stored sparsely: each source atom feeds at most two targets.
#[derive(Debug, Clone)]
pub struct ProjectedPushforward {
    pub(crate) lo: Vec<usize>,
    pub(crate) hi_w: Vec<f64>,
    // source atoms whose image falls outside the grid range
    clipped: Vec<usize>,
}

impl ProjectedPushforward {
    pub fn new(grid: &AtomGrid, shift: f64, slope: f64) -> Self {
        let (lo, hi_w) = grid
            .atoms()
            .iter()
            .map(|&z| grid.locate(shift + slope * z))
            .unzip();
        let tol = SNAP_TOL * grid.spacing();
        let clipped = grid
            .atoms()
            .iter()
            .enumerate()
            .filter(|(_, &z)| {
                let y = shift + slope * z;
                y < grid.v_min() - tol || y > grid.v_max() + tol
            })
            .map(|(i, _)| i)
            .collect();
        Self { lo, hi_w, clipped }
    }

    /// Absolute mass of `src` sent past the grid boundary before clipping.
    pub fn clipped_mass(&self, src: &[f64]) -> f64 {
        self.clipped.iter().map(|&i| src[i].abs()).sum()
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    /// `dst += scale * M src`.
    #[inline]
    pub fn apply_add(&self, src: &[f64], scale: f64, dst: &mut [f64]) {
        for ((&lo, &hw), &s) in self.lo.iter().zip(&self.hi_w).zip(src) {
            let v = scale * s;
            dst[lo] += v * (1.0 - hw);
            dst[lo + 1] += v * hw;
        }
    }

    /// Dense `m x m` matrix; column `i` is the projection of the image of atom `i`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = self.len();
        let mut mat = DMatrix::zeros(m, m);
        for (i, (&lo, &hw)) in self.lo.iter().zip(&self.hi_w).enumerate() {
            mat[(lo, i)] += 1.0 - hw;
            mat[(lo + 1, i)] += hw;
        }
        mat
    }
}

/// Dense matrix of the projected pushforward through `z -> shift + slope z`.
pub fn pushforward_matrix(grid: &AtomGrid, shift: f64, slope: f64) -> Result<DMatrix<f64>> {
    if !(slope > 0.0 && slope <= 1.0) {
        return Err(invalid("slope", format!("must lie in (0, 1], got {slope}")));
    }
    if !shift.is_finite() {
        return Err(Error::NonFinite("shift"));
    }
    Ok(ProjectedPushforward::new(grid, shift, slope).to_matrix())
}

/// A unit-mass signed measure on an atom grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMeasure {
    grid: Arc<AtomGrid>,
    masses: Vec<f64>,
}

impl SignedMeasure {
    pub fn new(grid: Arc<AtomGrid>, masses: Vec<f64>) -> Result<Self> {
        if masses.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} masses for {} atoms",
                masses.len(),
                grid.len()
            )));
        }
        if masses.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("masses"));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(invalid("masses", format!("total mass {total}, expected 1")));
        }
        Ok(Self { grid, masses })
    }

    pub fn dirac(grid: Arc<AtomGrid>, atom: usize) -> Self {
        let mut masses = vec![0.0; grid.len()];
        masses[atom] = 1.0;
        Self { grid, masses }
    }

    pub fn uniform(grid: Arc<AtomGrid>) -> Self {
        let m = grid.len();
        Self {
            masses: vec![1.0 / m as f64; m],
            grid,
        }
    }

    pub fn grid(&self) -> &Arc<AtomGrid> {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn into_masses(self) -> Vec<f64> {
        self.masses
    }

    pub fn mean(&self) -> f64 {
        mean(&self.grid, &self.masses)
    }

    pub fn min_mass(&self) -> f64 {
        min_mass(&self.masses)
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Membership in the nonnegative categorical family.
    pub fn is_distribution(&self) -> bool {
        self.masses.iter().all(|&p| p >= -NONNEG_TOL)
    }

    pub fn to_particles(&self) -> WeightedParticleSet {
        WeightedParticleSet {
            particles: self
                .grid
                .atoms()
                .iter()
                .copied()
                .zip(self.masses.iter().copied())
                .collect(),
        }
    }
}

pub(crate) fn mean(grid: &AtomGrid, masses: &[f64]) -> f64 {
    grid.atoms().iter().zip(masses).map(|(z, p)| z * p).sum()
}

pub(crate) fn min_mass(masses: &[f64]) -> f64 {
    masses.iter().copied().fold(f64::INFINITY, f64::min)
}

fn same_grid(a: &Arc<AtomGrid>, b: &Arc<AtomGrid>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// l_p distance between the cumulative mass functions of two grid measures.
pub fn lp_distance(a: &SignedMeasure, b: &SignedMeasure, p: f64) -> Result<f64> {
    if !same_grid(&a.grid, &b.grid) {
        return Err(Error::GridMismatch);
    }
    check_p(p)?;
    Ok(lp_slices(&a.masses, &b.masses, a.grid.spacing(), p))
}

fn check_p(p: f64) -> Result<()> {
    if p.is_nan() || p < 1.0 {
        return Err(invalid("p", format!("must be >= 1, got {p}")));
    }
    Ok(())
}

/// l_p between step CDFs of two mass vectors on a uniform grid with spacing `dz`.
pub(crate) fn lp_slices(a: &[f64], b: &[f64], dz: f64, p: f64) -> f64 {
    let m = a.len();
    let mut fa = 0.0;
    let mut fb = 0.0;
    let mut acc = 0.0;
    if p == 2.0 {
        for i in 0..m - 1 {
            fa += a[i];
            fb += b[i];
            let d = fa - fb;
            acc += d * d;
        }
        (acc * dz).sqrt()
    } else if p == 1.0 {
        for i in 0..m - 1 {
            fa += a[i];
            fb += b[i];
            acc += (fa - fb).abs();
        }
        acc * dz
    } else {
        for i in 0..m - 1 {
            fa += a[i];
            fb += b[i];
            acc += (fa - fb).abs().powf(p);
        }
        (acc * dz).powf(1.0 / p)
    }
}

/// l_p distance between the CDFs of two arbitrary finite signed measures.
///
/// Both sets are treated as step CDFs on the real line; the integral runs
/// over the union of their supports. Total masses should agree, otherwise
/// the tail difference is unbounded and the result is infinite.
pub fn lp_distance_particles(a: &WeightedParticleSet, b: &WeightedParticleSet, p: f64) -> Result<f64> {
    check_p(p)?;
    if (a.total_mass() - b.total_mass()).abs() > MASS_TOL {
        return Ok(f64::INFINITY);
    }
    let mut events: Vec<(f64, f64)> = a
        .particles
        .iter()
        .copied()
        .chain(b.particles.iter().map(|&(y, w)| (y, -w)))
        .collect();
    events.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut diff = 0.0;
    let mut acc = 0.0;
    for w in events.windows(2) {
        diff += w[0].1;
        let width = w[1].0 - w[0].0;
        if width > 0.0 {
            acc += diff.abs().powf(p) * width;
        }
    }
    Ok(acc.powf(1.0 / p))
}

/// Table of grid measures indexed by `(state, action)`, with no mass constraint.
///
/// Holds temporal-difference measures (zero total mass) and serves as the
/// storage behind [`ReturnFunction`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureTable {
    grid: Arc<AtomGrid>,
    n_states: usize,
    n_actions: usize,
    masses: Vec<f64>,
}

impl MeasureTable {
    pub fn new(grid: Arc<AtomGrid>, n_states: usize, n_actions: usize, masses: Vec<f64>) -> Result<Self> {
        let want = n_states * n_actions * grid.len();
        if masses.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "{} masses, expected {n_states}x{n_actions}x{}",
                masses.len(),
                grid.len()
            )));
        }
        if masses.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("measure table"));
        }
        Ok(Self {
            grid,
            n_states,
            n_actions,
            masses,
        })
    }

    pub fn grid(&self) -> &Arc<AtomGrid> {
        &self.grid
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_atoms(&self) -> usize {
        self.grid.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn entry(&self, x: usize, a: usize) -> &[f64] {
        let m = self.grid.len();
        let start = (x * self.n_actions + a) * m;
        &self.masses[start..start + m]
    }

    pub fn total_mass(&self, x: usize, a: usize) -> f64 {
        self.entry(x, a).iter().sum()
    }

    /// Largest absolute atom mass anywhere in the table.
    pub fn max_abs_mass(&self) -> f64 {
        self.masses.iter().fold(0.0, |acc, p| acc.max(p.abs()))
    }

    pub fn min_mass(&self) -> f64 {
        min_mass(&self.masses)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if !same_grid(&self.grid, &other.grid) {
            return Err(Error::GridMismatch);
        }
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.n_states, self.n_actions, other.n_states, other.n_actions
            )));
        }
        Ok(())
    }
}

/// Unit-mass signed measure per `(state, action)` on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnFunction(MeasureTable);

impl Deref for ReturnFunction {
    type Target = MeasureTable;

    fn deref(&self) -> &MeasureTable {
        &self.0
    }
}

impl ReturnFunction {
    pub fn new(grid: Arc<AtomGrid>, n_states: usize, n_actions: usize, masses: Vec<f64>) -> Result<Self> {
        let table = MeasureTable::new(grid, n_states, n_actions, masses)?;
        let rf = Self(table);
        let err = rf.total_mass_error();
        if err > MASS_TOL {
            return Err(invalid("masses", format!("entry total mass off by {err:e}")));
        }
        Ok(rf)
    }

    pub(crate) fn from_table_unchecked(table: MeasureTable) -> Self {
        Self(table)
    }

    /// Uniform weights over all atoms at every entry.
    pub fn uniform(grid: Arc<AtomGrid>, n_states: usize, n_actions: usize) -> Self {
        let m = grid.len();
        Self(MeasureTable {
            masses: vec![1.0 / m as f64; n_states * n_actions * m],
            grid,
            n_states,
            n_actions,
        })
    }

    pub fn from_measures(
        grid: Arc<AtomGrid>,
        n_states: usize,
        n_actions: usize,
        mut f: impl FnMut(usize, usize) -> SignedMeasure,
    ) -> Result<Self> {
        let mut masses = Vec::with_capacity(n_states * n_actions * grid.len());
        for x in 0..n_states {
            for a in 0..n_actions {
                let mu = f(x, a);
                if !same_grid(&grid, &mu.grid) {
                    return Err(Error::GridMismatch);
                }
                masses.extend_from_slice(&mu.masses);
            }
        }
        Self::new(grid, n_states, n_actions, masses)
    }

    pub fn table(&self) -> &MeasureTable {
        &self.0
    }

    pub fn into_masses(self) -> Vec<f64> {
        self.0.masses
    }

    pub fn measure(&self, x: usize, a: usize) -> SignedMeasure {
        SignedMeasure {
            grid: Arc::clone(&self.0.grid),
            masses: self.entry(x, a).to_vec(),
        }
    }

    /// Largest deviation of an entry's total mass from 1.
    pub fn total_mass_error(&self) -> f64 {
        let m = self.n_atoms();
        self.0
            .masses
            .chunks(m)
            .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Induced Q-values, `Q(x, a) = sum_i p_i z_i`, row-major.
    pub fn means(&self) -> Vec<f64> {
        let m = self.n_atoms();
        self.0
            .masses
            .chunks(m)
            .map(|c| mean(&self.0.grid, c))
            .collect()
    }
}

/// `max_{x,a} l_p(H1(x,a), H2(x,a))`.
pub fn sup_lp_distance(h1: &ReturnFunction, h2: &ReturnFunction, p: f64) -> Result<f64> {
    h1.same_shape(h2)?;
    check_p(p)?;
    Ok(sup_lp_tables(h1.table(), h2.table(), p))
}

pub(crate) fn sup_lp_tables(h1: &MeasureTable, h2: &MeasureTable, p: f64) -> f64 {
    let m = h1.n_atoms();
    let dz = h1.grid.spacing();
    h1.masses
        .chunks(m)
        .zip(h2.masses.chunks(m))
        .map(|(a, b)| lp_slices(a, b, dz, p))
        .fold(0.0, f64::max)
}
