//! Discrete collision operators on the velocity lattice.
//!
//! Off-grid values are reconstructed from the ratio `F / mu_i` to the species
//! Maxwellian, so the Gaussian factor of every post-collision product is
//! carried exactly by energy conservation:
//! `mu_i(v') mu_j(v'_*) = mu_i(v) mu_j(v_*)`.

pub mod carleman;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{vec3, KernelSpec, ModelError, Species, Vec3};
use crate::quadrature::{orthonormal_frame, QuadratureError, SphereRule, VelocityGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollisionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("kernel is sized for {kernel} species but {species} were given")]
    SpeciesCount { kernel: usize, species: usize },
    #[error("state holds {got} values per species, grid has {expected} nodes")]
    NodeCount { expected: usize, got: usize },
    #[error("state holds {got} species, operator expects {expected}")]
    StateSpecies { expected: usize, got: usize },
    #[error("state has no spatial cells")]
    NoCells,
    #[error("cell {index} out of range for {count} cells")]
    CellIndex { index: usize, count: usize },
    #[error("physical state has invalid value {value} for species {species} at node {node}")]
    InvalidPhysicalValue { species: usize, node: usize, value: f64 },
    #[error("non-finite value for species {species} at node {node}")]
    NonFinite { species: usize, node: usize },
    #[error("operation needs a {expected:?} state")]
    Mode { expected: StateMode },
    #[error("grid too wide for mass {mass}: the Maxwellian underflows at the box corner")]
    GridTooWide { mass: f64 },
    #[error("energy cutoff must be positive, got {0}")]
    Cutoff(f64),
}

/// Whether a state holds distributions F or signed perturbations f.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateMode {
    Physical,
    Perturbation,
}

/// Per-cell, per-species, per-node values. Cells index a 1D torus; a
/// homogeneous state has one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    mode: StateMode,
    cells: Vec<Vec<Vec<f64>>>,
}

impl MixtureState {
    pub fn new(mode: StateMode, cells: Vec<Vec<Vec<f64>>>) -> Result<Self, CollisionError> {
        let first = cells.first().ok_or(CollisionError::NoCells)?;
        let species = first.len();
        let nodes = first.first().map(|v| v.len()).unwrap_or(0);
        for cell in &cells {
            if cell.len() != species {
                return Err(CollisionError::StateSpecies {
                    expected: species,
                    got: cell.len(),
                });
            }
            for (s, values) in cell.iter().enumerate() {
                if values.len() != nodes {
                    return Err(CollisionError::NodeCount {
                        expected: nodes,
                        got: values.len(),
                    });
                }
                for (node, &value) in values.iter().enumerate() {
                    if !value.is_finite() {
                        return Err(CollisionError::NonFinite { species: s, node });
                    }
                    if mode == StateMode::Physical && value < 0.0 {
                        return Err(CollisionError::InvalidPhysicalValue {
                            species: s,
                            node,
                            value,
                        });
                    }
                }
            }
        }
        Ok(Self { mode, cells })
    }

    pub fn homogeneous(mode: StateMode, values: Vec<Vec<f64>>) -> Result<Self, CollisionError> {
        Self::new(mode, vec![values])
    }

    pub fn mode(&self) -> StateMode {
        self.mode
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn species_count(&self) -> usize {
        self.cells[0].len()
    }

    pub fn cell(&self, c: usize) -> &[Vec<f64>] {
        &self.cells[c]
    }

    pub fn cells(&self) -> &[Vec<Vec<f64>>] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<Vec<Vec<f64>>> {
        self.cells
    }

    /// Smallest value over all cells, species and nodes.
    pub fn min_value(&self) -> f64 {
        self.cells
            .iter()
            .flatten()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gain and loss parts of the collision operator, per species and node.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionTally {
    pub gain: Vec<Vec<f64>>,
    pub loss: Vec<Vec<f64>>,
}

impl CollisionTally {
    pub fn net(&self) -> Vec<Vec<f64>> {
        self.gain
            .iter()
            .zip(&self.loss)
            .map(|(g, l)| g.iter().zip(l).map(|(a, b)| a - b).collect())
            .collect()
    }
}

/// Reconstruction of the Maxwellian ratio at post-collision points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Trilinear, constant extension outside the box.
    Linear,
    /// 27-point tensor Lagrange, quadratic extension outside the box.
    #[default]
    Quadratic,
}

/// Which (v, v_*) pairs enter the collision sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pruning {
    None,
    /// m_j |v_*|^2 <= cutoff
    Partner(f64),
    /// m_i |v|^2 + m_j |v_*|^2 <= cutoff; invariant under collisions.
    Pair(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionSettings {
    pub interpolation: Interpolation,
    /// Pruning for gain, loss and entropy production.
    pub pruning: Pruning,
    /// Pruning for weak-form residuals.
    pub weak_pruning: Pruning,
}

impl Default for CollisionSettings {
    fn default() -> Self {
        Self {
            interpolation: Interpolation::Quadratic,
            pruning: Pruning::Pair(50.0),
            weak_pruning: Pruning::Pair(50.0),
        }
    }
}

/// Collision invariant psi selected for a weak-form residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invariant {
    SpeciesMass(usize),
    Momentum(usize),
    Energy,
}

impl Invariant {
    /// All N + 4 invariants in basis order.
    pub fn all(species_count: usize) -> Vec<Invariant> {
        let mut out: Vec<Invariant> = (0..species_count).map(Invariant::SpeciesMass).collect();
        out.extend((0..3).map(Invariant::Momentum));
        out.push(Invariant::Energy);
        out
    }

    pub fn eval(&self, species: usize, mass: f64, v: Vec3) -> f64 {
        match *self {
            Invariant::SpeciesMass(k) => {
                if k == species {
                    1.0
                } else {
                    0.0
                }
            }
            Invariant::Momentum(d) => mass * v[d],
            Invariant::Energy => 0.5 * mass * vec3::norm_sq(v),
        }
    }
}

/// Weak-form residuals and their absolute scales, one entry per invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakFormReport {
    pub invariants: Vec<Invariant>,
    pub residual: Vec<f64>,
    /// Integral of |psi Q| summed over species.
    pub scale: Vec<f64>,
    /// Sum over species of the L1 norm of Q_i.
    pub q_l1: f64,
}

/// Maxwellian ratio on a lattice padded by `halo` nodes per side.
#[derive(Debug, Clone)]
struct Padded {
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct AxisTaps {
    start: isize,
    w: [f64; 3],
}

#[derive(Debug, Clone, Copy, Default)]
struct SigmaStencil {
    coef: f64,
    v: [AxisTaps; 3],
    w: [AxisTaps; 3],
}

/// Precomputed per-species row data for pruning.
#[derive(Debug, Clone)]
struct RowIntervals {
    /// allowed x-index interval for every (y, z) row, by species
    rows: Vec<Vec<Option<(usize, usize)>>>,
}

#[derive(Debug, Clone)]
pub struct CollisionOperator {
    species: Vec<Species>,
    kernel: KernelSpec,
    grid: VelocityGrid,
    rule: SphereRule,
    settings: CollisionSettings,
    mu: Vec<Vec<f64>>,
    sqrt_mu: Vec<Vec<f64>>,
    halo: usize,
    np: usize,
    taps: usize,
    beta: f64,
    speed_pow: Vec<f64>,
    partner_rows: Option<RowIntervals>,
}

/// Largest exponent m |v|^2 / 2 at the box corner that keeps mu well above underflow.
const MAX_CORNER_EXPONENT: f64 = 600.0;

impl CollisionOperator {
    pub fn new(
        species: Vec<Species>,
        kernel: KernelSpec,
        grid: VelocityGrid,
        rule: SphereRule,
        settings: CollisionSettings,
    ) -> Result<Self, CollisionError> {
        if kernel.species_count() != species.len() {
            return Err(CollisionError::SpeciesCount {
                kernel: kernel.species_count(),
                species: species.len(),
            });
        }
        let l = grid.half_width();
        for s in &species {
            if 1.5 * s.mass() * l * l > MAX_CORNER_EXPONENT {
                return Err(CollisionError::GridTooWide { mass: s.mass() });
            }
        }
        for p in [settings.pruning, settings.weak_pruning] {
            if let Pruning::Partner(c) | Pruning::Pair(c) = p {
                if !(c > 0.0) {
                    return Err(CollisionError::Cutoff(c));
                }
            }
        }
        let mu: Vec<Vec<f64>> = species.iter().map(|s| grid.sample(|v| s.maxwellian(v))).collect();
        let sqrt_mu = mu.iter().map(|m| m.iter().map(|x| x.sqrt()).collect()).collect();
        let n = grid.points_per_axis();
        let h = grid.spacing();

        // farthest reachable post-collision speed under the loosest pruning in use
        let corner = 3.0 * l * l;
        let mut reach: f64 = l * 3f64.sqrt();
        for si in &species {
            for sj in &species {
                let e_j = [settings.pruning, settings.weak_pruning]
                    .iter()
                    .map(|p| match p {
                        Pruning::None => corner * sj.mass(),
                        Pruning::Partner(c) | Pruning::Pair(c) => c.min(corner * sj.mass()),
                    })
                    .fold(0.0, f64::max);
                let total = si.mass() * corner + e_j;
                reach = reach.max((total / si.mass()).sqrt()).max((total / sj.mass()).sqrt());
            }
        }
        let halo = ((reach - l) / h).ceil().max(0.0) as usize + 3;
        let np = n + 2 * halo;

        let beta: f64 = rule
            .polar()
            .iter()
            .map(|&(t, w)| w * kernel.angular().value(t))
            .sum::<f64>()
            * 2.0
            * std::f64::consts::PI;

        let side = 2 * n - 1;
        let mut speed_pow = vec![0.0; side * side * side];
        for dz in 0..side {
            for dy in 0..side {
                for dx in 0..side {
                    let d = [
                        dx as f64 - (n - 1) as f64,
                        dy as f64 - (n - 1) as f64,
                        dz as f64 - (n - 1) as f64,
                    ];
                    speed_pow[(dz * side + dy) * side + dx] = kernel.speed_factor(h * vec3::norm(d));
                }
            }
        }

        let partner_rows = match settings.pruning {
            Pruning::Partner(cut) => Some(RowIntervals {
                rows: species
                    .iter()
                    .map(|s| {
                        let mut rows = Vec::with_capacity(n * n);
                        for wz in 0..n {
                            for wy in 0..n {
                                let mut lo = None;
                                let mut hi = None;
                                for wx in 0..n {
                                    let e = s.mass()
                                        * vec3::norm_sq(grid.node(grid.index(wx, wy, wz)));
                                    if e <= cut {
                                        lo.get_or_insert(wx);
                                        hi = Some(wx);
                                    }
                                }
                                rows.push(lo.zip(hi));
                            }
                        }
                        rows
                    })
                    .collect(),
            }),
            _ => None,
        };

        let taps = match settings.interpolation {
            Interpolation::Linear => 2,
            Interpolation::Quadratic => 3,
        };
        Ok(Self {
            species,
            kernel,
            grid,
            rule,
            settings,
            mu,
            sqrt_mu,
            halo,
            np,
            taps,
            beta,
            speed_pow,
            partner_rows,
        })
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn species_count(&self) -> usize {
        self.species.len()
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn rule(&self) -> &SphereRule {
        &self.rule
    }

    pub fn settings(&self) -> &CollisionSettings {
        &self.settings
    }

    /// Maxwellian of species i at every node.
    pub fn maxwellian(&self, i: usize) -> &[f64] {
        &self.mu[i]
    }

    pub fn sqrt_maxwellian(&self, i: usize) -> &[f64] {
        &self.sqrt_mu[i]
    }

    /// Quadrature value of the integral of b over the sphere.
    pub fn angular_integral(&self) -> f64 {
        self.beta
    }

    /// The equilibrium state mu.
    pub fn equilibrium(&self) -> MixtureState {
        MixtureState {
            mode: StateMode::Physical,
            cells: vec![self.mu.clone()],
        }
    }

    fn check_state(&self, state: &MixtureState, cell: usize) -> Result<(), CollisionError> {
        if cell >= state.cell_count() {
            return Err(CollisionError::CellIndex {
                index: cell,
                count: state.cell_count(),
            });
        }
        if state.species_count() != self.species.len() {
            return Err(CollisionError::StateSpecies {
                expected: self.species.len(),
                got: state.species_count(),
            });
        }
        let got = state.cell(cell)[0].len();
        if got != self.grid.node_count() {
            return Err(CollisionError::NodeCount {
                expected: self.grid.node_count(),
                got,
            });
        }
        Ok(())
    }

    fn require_mode(&self, state: &MixtureState, mode: StateMode) -> Result<(), CollisionError> {
        if state.mode() != mode {
            return Err(CollisionError::Mode { expected: mode });
        }
        Ok(())
    }

    /// Ratio values / reference at every node.
    fn ratio(values: &[f64], reference: &[f64]) -> Vec<f64> {
        values.iter().zip(reference).map(|(f, m)| f / m).collect()
    }

    fn pad(&self, a: &[f64]) -> Padded {
        let n = self.grid.points_per_axis();
        let hl = self.halo;
        let np = self.np;
        let mut data = vec![0.0; np * np * np];
        let at = |x: usize, y: usize, z: usize| (z * np + y) * np + x;
        for z in 0..n {
            for y in 0..n {
                let src = &a[(z * n + y) * n..(z * n + y + 1) * n];
                let dst = at(hl, y + hl, z + hl);
                data[dst..dst + n].copy_from_slice(src);
            }
        }
        let quadratic = self.settings.interpolation == Interpolation::Quadratic;
        // value at offset s (in nodes) from f0, with f0, f1, f2 at 0, 1, 2
        let extend = |f0: f64, f1: f64, f2: f64, s: f64| {
            if quadratic {
                f0 * (s - 1.0) * (s - 2.0) * 0.5 - f1 * s * (s - 2.0) + f2 * s * (s - 1.0) * 0.5
            } else {
                f0
            }
        };
        let fill = |data: &mut Vec<f64>, idx: &dyn Fn(usize) -> usize| {
            let f = [data[idx(hl)], data[idx(hl + 1)], data[idx(hl + 2)]];
            let g = [data[idx(hl + n - 1)], data[idx(hl + n - 2)], data[idx(hl + n - 3)]];
            for k in 0..hl {
                let s = -((hl - k) as f64);
                data[idx(k)] = extend(f[0], f[1], f[2], s);
                data[idx(hl + n + k)] = extend(g[0], g[1], g[2], -((k + 1) as f64));
            }
        };
        for z in hl..hl + n {
            for y in hl..hl + n {
                fill(&mut data, &|x| at(x, y, z));
            }
        }
        for z in hl..hl + n {
            for x in 0..np {
                fill(&mut data, &|y| at(x, y, z));
            }
        }
        for y in 0..np {
            for x in 0..np {
                fill(&mut data, &|z| at(x, y, z));
            }
        }
        Padded { data }
    }

    fn axis_taps(&self, pos: f64) -> AxisTaps {
        match self.settings.interpolation {
            Interpolation::Linear => {
                let o = pos.floor();
                let t = pos - o;
                AxisTaps {
                    start: o as isize,
                    w: [1.0 - t, t, 0.0],
                }
            }
            Interpolation::Quadratic => {
                let o = pos.round();
                let t = pos - o;
                AxisTaps {
                    start: o as isize - 1,
                    w: [0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)],
                }
            }
        }
    }

    /// Interpolated ratio at a physical velocity.
    fn interpolate_at(&self, pad: &Padded, v: Vec3) -> f64 {
        let h = self.grid.spacing();
        let l = self.grid.half_width();
        let t: Vec<AxisTaps> = (0..3)
            .map(|k| self.axis_taps((v[k] + l) / h + self.halo as f64))
            .collect();
        let np = self.np as isize;
        let mut acc = 0.0;
        for c in 0..self.taps {
            for b in 0..self.taps {
                for a in 0..self.taps {
                    let idx = ((t[2].start + c as isize) * np + t[1].start + b as isize) * np
                        + t[0].start
                        + a as isize;
                    acc += t[0].w[a] * t[1].w[b] * t[2].w[c] * pad.data[idx as usize];
                }
            }
        }
        acc
    }

    #[inline]
    fn energy(&self, s: usize, x: f64, y: f64, z: f64) -> f64 {
        self.species[s].mass() * (x * x + y * y + z * z)
    }

    #[inline]
    fn pair_allowed(&self, pruning: Pruning, i: usize, j: usize, v: Vec3, w: Vec3) -> bool {
        match pruning {
            Pruning::None => true,
            Pruning::Partner(cut) => self.energy(j, w[0], w[1], w[2]) <= cut,
            Pruning::Pair(cut) => {
                self.energy(i, v[0], v[1], v[2]) + self.energy(j, w[0], w[1], w[2]) <= cut
            }
        }
    }

    /// Allowed vx range for output row (vy, vz), partner row (wy, wz) and
    /// x-offset dx = vx - wx.
    #[allow(clippy::too_many_arguments)]
    fn vx_range(
        &self,
        pruning: Pruning,
        i: usize,
        j: usize,
        vy: usize,
        vz: usize,
        wy: usize,
        wz: usize,
        dx: isize,
    ) -> Option<(usize, usize)> {
        let n = self.grid.points_per_axis() as isize;
        let mut lo = dx.max(0);
        let mut hi = (n - 1).min(n - 1 + dx);
        match pruning {
            Pruning::None => {}
            Pruning::Partner(_) => {
                let rows = &self.partner_rows.as_ref().expect("partner rows").rows[j];
                let (a, b) = rows[wz * n as usize + wy]?;
                lo = lo.max(a as isize + dx);
                hi = hi.min(b as isize + dx);
            }
            Pruning::Pair(cut) => {
                let g = &self.grid;
                let (yv, zv, yw, zw) = (g.coord(vy), g.coord(vz), g.coord(wy), g.coord(wz));
                let mi = self.species[i].mass();
                let mj = self.species[j].mass();
                let rem = cut - mi * (yv * yv + zv * zv) - mj * (yw * yw + zw * zw);
                if rem < 0.0 {
                    return None;
                }
                let s = dx as f64 * g.spacing();
                let m = mi + mj;
                let disc = mj * mj * s * s - m * (mj * s * s - rem);
                if disc < 0.0 {
                    return None;
                }
                let root = disc.sqrt();
                let (x_lo, x_hi) = ((mj * s - root) / m, (mj * s + root) / m);
                let to_index = |x: f64| (x + g.half_width()) / g.spacing();
                let pred = |vx: isize| {
                    let xv = g.coord(vx as usize);
                    let xw = g.coord((vx - dx) as usize);
                    mi * (xv * xv + yv * yv + zv * zv) + mj * (xw * xw + yw * yw + zw * zw) <= cut
                };
                let base_lo = lo;
                let base_hi = hi;
                lo = lo.max(to_index(x_lo).ceil() as isize);
                hi = hi.min(to_index(x_hi).floor() as isize);
                if lo > hi {
                    // rounding near a tangent: probe the clamped neighbourhood
                    lo = lo.min(base_hi);
                    hi = hi.max(base_lo);
                    if lo > hi {
                        return None;
                    }
                }
                while lo > base_lo && pred(lo - 1) {
                    lo -= 1;
                }
                while hi < base_hi && pred(hi + 1) {
                    hi += 1;
                }
                while lo <= hi && !pred(lo) {
                    lo += 1;
                }
                while hi >= lo && !pred(hi) {
                    hi -= 1;
                }
            }
        }
        if lo > hi {
            None
        } else {
            Some((lo as usize, hi as usize))
        }
    }

    #[inline]
    fn speed_pow_at(&self, dx: isize, dy: isize, dz: isize) -> f64 {
        let n = self.grid.points_per_axis() as isize;
        let side = 2 * n - 1;
        self.speed_pow[(((dz + n - 1) * side + dy + n - 1) * side + dx + n - 1) as usize]
    }

    fn build_stencils(&self, i: usize, j: usize, d: [isize; 3], out: &mut Vec<SigmaStencil>) {
        out.clear();
        let mi = self.species[i].mass();
        let mj = self.species[j].mass();
        let m = mi + mj;
        let df = [d[0] as f64, d[1] as f64, d[2] as f64];
        let dn = vec3::norm(df);
        let (e1, e2, e3) = orthonormal_frame(df);
        let dphi = self.rule.azimuth_weight();
        let angular = self.kernel.angular();
        for &(t, wt) in self.rule.polar() {
            let s = (1.0 - t * t).max(0.0).sqrt();
            let coef = wt * dphi * angular.value(t);
            for &(c, sn) in self.rule.azimuth() {
                let mut taps_v = [AxisTaps::default(); 3];
                let mut taps_w = [AxisTaps::default(); 3];
                for k in 0..3 {
                    let sigma = t * e3[k] + s * (c * e1[k] + sn * e2[k]);
                    let y = dn * sigma - df[k];
                    taps_v[k] = self.axis_taps(mj / m * y);
                    taps_w[k] = self.axis_taps(-mi / m * y);
                }
                out.push(SigmaStencil {
                    coef,
                    v: taps_v,
                    w: taps_w,
                });
            }
        }
    }

    /// out[t] = sum over taps of pad[base + offsets + t], for t in 0..out.len()
    #[inline]
    fn gather(&self, pad: &Padded, base: isize, taps: &[AxisTaps; 3], out: &mut [f64]) {
        let np = self.np as isize;
        let len = out.len();
        out.iter_mut().for_each(|x| *x = 0.0);
        for c in 0..self.taps {
            for b in 0..self.taps {
                let wyz = taps[1].w[b] * taps[2].w[c];
                let row = base + (taps[2].start + c as isize) * np * np + (taps[1].start + b as isize) * np + taps[0].start;
                let row = row as usize;
                if self.taps == 3 {
                    let (w0, w1, w2) = (wyz * taps[0].w[0], wyz * taps[0].w[1], wyz * taps[0].w[2]);
                    let src = &pad.data[row..row + len + 2];
                    for (t, o) in out.iter_mut().enumerate() {
                        *o += w0 * src[t] + w1 * src[t + 1] + w2 * src[t + 2];
                    }
                } else {
                    let (w0, w1) = (wyz * taps[0].w[0], wyz * taps[0].w[1]);
                    let src = &pad.data[row..row + len + 1];
                    for (t, o) in out.iter_mut().enumerate() {
                        *o += w0 * src[t] + w1 * src[t + 1];
                    }
                }
            }
        }
    }

    /// For every output node v:
    /// `sum_{v_*} mu_j(v_*) C_ij |u|^gamma h^3 sum_sigma w b term(I_i(v'), I_j(v'_*), a_i(v), a_j(v_*))`.
    #[allow(clippy::too_many_arguments)]
    fn sweep<T>(
        &self,
        i: usize,
        j: usize,
        ai: &[f64],
        aj: &[f64],
        pi: &Padded,
        pj: &Padded,
        pruning: Pruning,
        clamp: bool,
        term: T,
    ) -> Vec<f64>
    where
        T: Fn(f64, f64, f64, f64) -> f64 + Sync,
    {
        let n = self.grid.points_per_axis();
        let ni = n as isize;
        let hl = self.halo as isize;
        let np = self.np as isize;
        let scale = self.kernel.c_phi(i, j) * self.grid.cell_volume();
        let mu_j = &self.mu[j];
        let mut out = vec![0.0; n * n * n];
        out.par_chunks_mut(n * n).enumerate().for_each(|(vz, plane)| {
            let mut stencils = Vec::with_capacity(self.rule.len());
            let mut bi = vec![0.0; n];
            let mut bj = vec![0.0; n];
            let mut acc = vec![0.0; n];
            for wz in 0..n {
                let dz = vz as isize - wz as isize;
                for dy in -(ni - 1)..ni {
                    let vy_lo = dy.max(0) as usize;
                    let vy_hi = (ni - 1).min(ni - 1 + dy) as usize;
                    for dx in -(ni - 1)..ni {
                        let mut ready = false;
                        let mut sp = 0.0;
                        for vy in vy_lo..=vy_hi {
                            let wy = (vy as isize - dy) as usize;
                            let Some((lo, hi)) = self.vx_range(pruning, i, j, vy, vz, wy, wz, dx) else {
                                continue;
                            };
                            if !ready {
                                sp = self.speed_pow_at(dx, dy, dz);
                                if sp == 0.0 {
                                    break;
                                }
                                self.build_stencils(i, j, [dx, dy, dz], &mut stencils);
                                ready = true;
                            }
                            let len = hi - lo + 1;
                            let acc = &mut acc[..len];
                            acc.iter_mut().for_each(|x| *x = 0.0);
                            let base_v = ((vz as isize + hl) * np + vy as isize + hl) * np + hl + lo as isize;
                            let base_w = ((wz as isize + hl) * np + wy as isize + hl) * np + hl + lo as isize - dx;
                            let row_v = (vz * n + vy) * n;
                            let row_w = (wz * n + wy) * n;
                            let av = &ai[row_v + lo..row_v + lo + len];
                            let wx0 = (lo as isize - dx) as usize;
                            let aw = &aj[row_w + wx0..row_w + wx0 + len];
                            for st in &stencils {
                                if st.coef == 0.0 {
                                    continue;
                                }
                                self.gather(pi, base_v, &st.v, &mut bi[..len]);
                                self.gather(pj, base_w, &st.w, &mut bj[..len]);
                                for t in 0..len {
                                    let (x, y) = if clamp {
                                        (bi[t].max(0.0), bj[t].max(0.0))
                                    } else {
                                        (bi[t], bj[t])
                                    };
                                    acc[t] += st.coef * term(x, y, av[t], aw[t]);
                                }
                            }
                            let mw = &mu_j[row_w + wx0..row_w + wx0 + len];
                            let dst = &mut plane[vy * n + lo..vy * n + lo + len];
                            for t in 0..len {
                                dst[t] += scale * sp * mw[t] * acc[t];
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// `rate_ij(g)(v) = sum_{v_*} C_ij |u|^gamma beta h^3 g(v_*)` over allowed partners.
    pub fn rate_with_pruning(&self, i: usize, j: usize, g: &[f64], pruning: Pruning) -> Vec<f64> {
        let n = self.grid.points_per_axis();
        let ni = n as isize;
        let scale = self.kernel.c_phi(i, j) * self.beta * self.grid.cell_volume();
        if self.kernel.gamma() == 0.0 && !matches!(pruning, Pruning::Pair(_)) {
            let total = crate::quadrature::pairwise_sum_by(n * n * n, &|k| {
                let w = self.grid.node(k);
                if self.pair_allowed(pruning, i, j, [0.0; 3], w) {
                    g[k]
                } else {
                    0.0
                }
            });
            return vec![scale * total; n * n * n];
        }
        let mut out = vec![0.0; n * n * n];
        out.par_chunks_mut(n * n).enumerate().for_each(|(vz, plane)| {
            for wz in 0..n {
                let dz = vz as isize - wz as isize;
                for vy in 0..n {
                    for wy in 0..n {
                        let dy = vy as isize - wy as isize;
                        let row_w = (wz * n + wy) * n;
                        for dx in -(ni - 1)..ni {
                            let Some((lo, hi)) = self.vx_range(pruning, i, j, vy, vz, wy, wz, dx) else {
                                continue;
                            };
                            let c = scale * self.speed_pow_at(dx, dy, dz);
                            if c == 0.0 {
                                continue;
                            }
                            let wx0 = (lo as isize - dx) as usize;
                            let src = &g[row_w + wx0..row_w + wx0 + hi - lo + 1];
                            let dst = &mut plane[vy * n + lo..vy * n + hi + 1];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += c * s;
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Loss rate of species i against a partner profile g of species j.
    pub fn rate(&self, i: usize, j: usize, g: &[f64]) -> Vec<f64> {
        self.rate_with_pruning(i, j, g, self.settings.pruning)
    }

    /// Q^+_ij(f, g) at every node; f is a species-i profile and g a species-j profile.
    pub fn bilinear_gain(&self, i: usize, j: usize, f: &[f64], g: &[f64], clamp: bool) -> Vec<f64> {
        let ai = Self::ratio(f, &self.mu[i]);
        let aj = Self::ratio(g, &self.mu[j]);
        let pi = self.pad(&ai);
        let pj = self.pad(&aj);
        let s = self.sweep(i, j, &ai, &aj, &pi, &pj, self.settings.pruning, clamp, |x, y, _, _| x * y);
        s.iter().zip(&self.mu[i]).map(|(a, m)| a * m).collect()
    }

    /// Q^-_ij(f, g) = f(v) rate_ij(g)(v).
    pub fn bilinear_loss(&self, i: usize, j: usize, f: &[f64], g: &[f64]) -> Vec<f64> {
        let r = self.rate(i, j, g);
        f.iter().zip(&r).map(|(a, b)| a * b).collect()
    }

    /// Gain and loss of every species against every partner, for one cell.
    pub fn tally(&self, state: &MixtureState, cell: usize) -> Result<CollisionTally, CollisionError> {
        self.check_state(state, cell)?;
        let physical = state.mode() == StateMode::Physical;
        let f = state.cell(cell);
        let ns = self.species.len();
        let ratios: Vec<Vec<f64>> = (0..ns).map(|k| Self::ratio(&f[k], &self.mu[k])).collect();
        let pads: Vec<Padded> = ratios.iter().map(|a| self.pad(a)).collect();
        let nodes = self.grid.node_count();
        let mut gain = vec![vec![0.0; nodes]; ns];
        let mut loss = vec![vec![0.0; nodes]; ns];
        for i in 0..ns {
            let mut freq = vec![0.0; nodes];
            for j in 0..ns {
                let s = self.sweep(
                    i,
                    j,
                    &ratios[i],
                    &ratios[j],
                    &pads[i],
                    &pads[j],
                    self.settings.pruning,
                    physical,
                    |x, y, _, _| x * y,
                );
                for (g, v) in gain[i].iter_mut().zip(&s) {
                    *g += v;
                }
                for (r, v) in freq.iter_mut().zip(self.rate(i, j, &f[j])) {
                    *r += v;
                }
            }
            for k in 0..nodes {
                gain[i][k] *= self.mu[i][k];
                loss[i][k] = f[i][k] * freq[k];
            }
        }
        Ok(CollisionTally { gain, loss })
    }

    /// Q^+_ij(F_i, F_j) at every node.
    pub fn q_gain(
        &self,
        state: &MixtureState,
        cell: usize,
        i: usize,
        j: usize,
    ) -> Result<Vec<f64>, CollisionError> {
        self.check_state(state, cell)?;
        self.require_mode(state, StateMode::Physical)?;
        let f = state.cell(cell);
        Ok(self.bilinear_gain(i, j, &f[i], &f[j], true))
    }

    /// Q^-_ij(F_i, F_j) at every node.
    pub fn q_loss(
        &self,
        state: &MixtureState,
        cell: usize,
        i: usize,
        j: usize,
    ) -> Result<Vec<f64>, CollisionError> {
        self.check_state(state, cell)?;
        self.require_mode(state, StateMode::Physical)?;
        let f = state.cell(cell);
        Ok(self.bilinear_loss(i, j, &f[i], &f[j]))
    }

    /// Q^+_ij at one node by a direct loop over partners and the sphere rule.
    pub fn q_gain_node(
        &self,
        state: &MixtureState,
        cell: usize,
        i: usize,
        j: usize,
        node: usize,
    ) -> Result<f64, CollisionError> {
        self.check_state(state, cell)?;
        self.require_mode(state, StateMode::Physical)?;
        let f = state.cell(cell);
        let pi = self.pad(&Self::ratio(&f[i], &self.mu[i]));
        let pj = self.pad(&Self::ratio(&f[j], &self.mu[j]));
        let mi = self.species[i].mass();
        let mj = self.species[j].mass();
        let v = self.grid.node(node);
        let mut total = 0.0;
        for w_idx in 0..self.grid.node_count() {
            let w = self.grid.node(w_idx);
            if !self.pair_allowed(self.settings.pruning, i, j, v, w) {
                continue;
            }
            let u = vec3::sub(v, w);
            let speed = self.kernel.speed_factor(vec3::norm(u));
            if speed == 0.0 {
                continue;
            }
            let angular = self.kernel.angular();
            let inner = self.rule.integrate_about(u, |sigma| {
                let (vp, wp) = crate::model::sigma_map(mi, mj, v, w, sigma);
                let cos = if vec3::norm(u) > 0.0 {
                    vec3::dot(sigma, u) / vec3::norm(u)
                } else {
                    sigma[2]
                };
                let x = self.interpolate_at(&pi, vp).max(0.0);
                let y = self.interpolate_at(&pj, wp).max(0.0);
                angular.value(cos) * x * y
            });
            total += self.mu[j][w_idx] * speed * inner;
        }
        Ok(self.kernel.c_phi(i, j) * self.grid.cell_volume() * self.mu[i][node] * total)
    }

    /// Q^-_ij at one node by a direct loop over partners.
    pub fn q_loss_node(
        &self,
        state: &MixtureState,
        cell: usize,
        i: usize,
        j: usize,
        node: usize,
    ) -> Result<f64, CollisionError> {
        self.check_state(state, cell)?;
        self.require_mode(state, StateMode::Physical)?;
        let f = state.cell(cell);
        let v = self.grid.node(node);
        let mut total = 0.0;
        for w_idx in 0..self.grid.node_count() {
            let w = self.grid.node(w_idx);
            if !self.pair_allowed(self.settings.pruning, i, j, v, w) {
                continue;
            }
            total += self.kernel.speed_factor(vec3::norm(vec3::sub(v, w))) * f[j][w_idx];
        }
        Ok(f[i][node] * self.kernel.c_phi(i, j) * self.beta * self.grid.cell_volume() * total)
    }

    /// Nonlinear collision frequency R_i = sum_j rate_ij(F_j), per species.
    pub fn nonlinear_frequency(
        &self,
        state: &MixtureState,
        cell: usize,
    ) -> Result<Vec<Vec<f64>>, CollisionError> {
        self.check_state(state, cell)?;
        self.require_mode(state, StateMode::Physical)?;
        Ok(self.frequency_of(state.cell(cell), self.settings.pruning))
    }

    /// sum_j rate_ij(g_j) for each species i.
    pub(crate) fn frequency_of(&self, g: &[Vec<f64>], pruning: Pruning) -> Vec<Vec<f64>> {
        let ns = self.species.len();
        (0..ns)
            .map(|i| {
                let mut acc = vec![0.0; self.grid.node_count()];
                for (j, gj) in g.iter().enumerate() {
                    for (a, r) in acc.iter_mut().zip(self.rate_with_pruning(i, j, gj, pruning)) {
                        *a += r;
                    }
                }
                acc
            })
            .collect()
    }

    /// Pointwise Q_i with weak-form pruning, then integrals against every invariant.
    pub fn weak_form(&self, state: &MixtureState, cell: usize) -> Result<WeakFormReport, CollisionError> {
        self.check_state(state, cell)?;
        self.require_mode(state, StateMode::Physical)?;
        let f = state.cell(cell);
        let ns = self.species.len();
        let ratios: Vec<Vec<f64>> = (0..ns).map(|k| Self::ratio(&f[k], &self.mu[k])).collect();
        let pads: Vec<Padded> = ratios.iter().map(|a| self.pad(a)).collect();
        let nodes = self.grid.node_count();
        let mut q = vec![vec![0.0; nodes]; ns];
        for i in 0..ns {
            for j in 0..ns {
                let s = self.sweep(
                    i,
                    j,
                    &ratios[i],
                    &ratios[j],
                    &pads[i],
                    &pads[j],
                    self.settings.weak_pruning,
                    true,
                    |x, y, a, b| x * y - a * b,
                );
                for (k, v) in s.iter().enumerate() {
                    q[i][k] += self.mu[i][k] * v;
                }
            }
        }
        let invariants = Invariant::all(ns);
        let dv = self.grid.cell_volume();
        let mut residual = Vec::with_capacity(invariants.len());
        let mut scale = Vec::with_capacity(invariants.len());
        for inv in &invariants {
            let mut r = 0.0;
            let mut s = 0.0;
            for (i, qi) in q.iter().enumerate() {
                let m = self.species[i].mass();
                r += crate::quadrature::pairwise_sum_by(nodes, &|k| inv.eval(i, m, self.grid.node(k)) * qi[k]);
                s += crate::quadrature::pairwise_sum_by(nodes, &|k| (inv.eval(i, m, self.grid.node(k)) * qi[k]).abs());
            }
            residual.push(r * dv);
            scale.push(s * dv);
        }
        let q_l1 = q
            .iter()
            .map(|qi| crate::quadrature::pairwise_sum_by(nodes, &|k| qi[k].abs()))
            .sum::<f64>()
            * dv;
        Ok(WeakFormReport {
            invariants,
            residual,
            scale,
            q_l1,
        })
    }

    /// Entropy production D(F) <= 0 in the symmetric quadruple form.
    pub fn entropy_production(&self, state: &MixtureState, cell: usize) -> Result<f64, CollisionError> {
        self.check_state(state, cell)?;
        self.require_mode(state, StateMode::Physical)?;
        let f = state.cell(cell);
        let ns = self.species.len();
        let ratios: Vec<Vec<f64>> = (0..ns).map(|k| Self::ratio(&f[k], &self.mu[k])).collect();
        let pads: Vec<Padded> = ratios.iter().map(|a| self.pad(a)).collect();
        let nodes = self.grid.node_count();
        let mut total = 0.0;
        for i in 0..ns {
            for j in 0..ns {
                let s = self.sweep(
                    i,
                    j,
                    &ratios[i],
                    &ratios[j],
                    &pads[i],
                    &pads[j],
                    self.settings.pruning,
                    true,
                    |x, y, a, b| {
                        let p = a * b;
                        let q = x * y;
                        (q - p) * (p.max(LOG_FLOOR).ln() - q.max(LOG_FLOOR).ln())
                    },
                );
                total += crate::quadrature::pairwise_sum_by(nodes, &|k| self.mu[i][k] * s[k]);
            }
        }
        Ok(0.25 * total * self.grid.cell_volume())
    }

    /// Gamma^+ and Gamma^- of a perturbation f.
    pub fn gamma_ops(&self, pert: &MixtureState, cell: usize) -> Result<CollisionTally, CollisionError> {
        self.check_state(pert, cell)?;
        self.require_mode(pert, StateMode::Perturbation)?;
        let f = pert.cell(cell);
        let ns = self.species.len();
        let ratios: Vec<Vec<f64>> = (0..ns).map(|k| Self::ratio(&f[k], &self.sqrt_mu[k])).collect();
        let pads: Vec<Padded> = ratios.iter().map(|a| self.pad(a)).collect();
        let nodes = self.grid.node_count();
        let weighted: Vec<Vec<f64>> = (0..ns)
            .map(|k| f[k].iter().zip(&self.sqrt_mu[k]).map(|(a, b)| a * b).collect())
            .collect();
        let mut gain = vec![vec![0.0; nodes]; ns];
        let mut loss = vec![vec![0.0; nodes]; ns];
        for i in 0..ns {
            for j in 0..ns {
                let s = self.sweep(
                    i,
                    j,
                    &ratios[i],
                    &ratios[j],
                    &pads[i],
                    &pads[j],
                    self.settings.pruning,
                    false,
                    |x, y, _, _| x * y,
                );
                let r = self.rate(i, j, &weighted[j]);
                for k in 0..nodes {
                    gain[i][k] += self.sqrt_mu[i][k] * s[k];
                    loss[i][k] += f[i][k] * r[k];
                }
            }
        }
        Ok(CollisionTally { gain, loss })
    }

    /// sqrt(mu_i) times the sweep of (I_i + I_j) on ratios f / sqrt(mu):
    /// the gain part of the linearized operator, summed over partners.
    pub(crate) fn linear_gain(&self, f: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let ns = self.species.len();
        let ratios: Vec<Vec<f64>> = (0..ns).map(|k| Self::ratio(&f[k], &self.sqrt_mu[k])).collect();
        let pads: Vec<Padded> = ratios.iter().map(|a| self.pad(a)).collect();
        (0..ns)
            .map(|i| {
                let mut acc = vec![0.0; self.grid.node_count()];
                for j in 0..ns {
                    let s = self.sweep(
                        i,
                        j,
                        &ratios[i],
                        &ratios[j],
                        &pads[i],
                        &pads[j],
                        self.settings.pruning,
                        false,
                        |x, y, _, _| x + y,
                    );
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a += self.sqrt_mu[i][k] * s[k];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Values below this are clamped before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AngularProfile, KernelSpec};
    use crate::quadrature::make_sphere_rule;

    fn operator(gamma: f64, n: usize, l: f64, settings: CollisionSettings) -> CollisionOperator {
        let species = vec![Species::new(1.0, 1.0).unwrap(), Species::new(2.0, 0.5).unwrap()];
        CollisionOperator::new(
            species,
            KernelSpec::uniform(2, gamma).unwrap(),
            VelocityGrid::new(l, n).unwrap(),
            make_sphere_rule(4, 8).unwrap(),
            settings,
        )
        .unwrap()
    }

    fn bumpy_state(op: &CollisionOperator) -> MixtureState {
        let g = op.grid();
        let values = op
            .species()
            .iter()
            .enumerate()
            .map(|(s, sp)| {
                g.sample(|v| {
                    let shift = [0.4 - 0.3 * s as f64, 0.2, -0.1];
                    let mut q = *sp;
                    q = Species::new(q.mass(), q.density() * (1.0 + 0.2 * s as f64)).unwrap();
                    q.maxwellian(vec3::sub(v, shift)) * (1.0 + 0.3 * (v[0] * 0.7).sin())
                })
            })
            .collect();
        MixtureState::homogeneous(StateMode::Physical, values).unwrap()
    }

    #[test]
    fn rejects_bad_states() {
        assert!(MixtureState::homogeneous(StateMode::Physical, vec![vec![1.0, -1.0]]).is_err());
        assert!(MixtureState::homogeneous(StateMode::Perturbation, vec![vec![1.0, -1.0]]).is_ok());
        assert!(MixtureState::homogeneous(StateMode::Physical, vec![vec![f64::NAN]]).is_err());
        assert!(MixtureState::new(StateMode::Physical, vec![]).is_err());
    }

    #[test]
    fn padded_quadratic_extension_is_exact_for_quadratics() {
        let op = operator(0.0, 8, 4.0, CollisionSettings::default());
        let g = op.grid();
        let poly = |v: Vec3| 1.0 + 0.5 * v[0] - 0.25 * v[1] * v[2] + 0.1 * v[2] * v[2];
        let pad = op.pad(&g.sample(poly));
        for p in [[0.3, -4.7, 3.9], [-7.5, 6.0, 5.5], [4.4, 4.4, -4.4], [0.0, 0.0, 0.0]] {
            let got = op.interpolate_at(&pad, p);
            assert!((got - poly(p)).abs() < 1e-10, "{p:?}: {got} vs {}", poly(p));
        }
    }

    #[test]
    fn equilibrium_gain_matches_loss() {
        for gamma in [0.0, 1.0] {
            let op = operator(gamma, 8, 4.0, CollisionSettings::default());
            let eq = op.equilibrium();
            for i in 0..2 {
                for j in 0..2 {
                    let g = op.q_gain(&eq, 0, i, j).unwrap();
                    let l = op.q_loss(&eq, 0, i, j).unwrap();
                    for k in 0..g.len() {
                        assert!((g[k] - l[k]).abs() <= 1e-13 * l[k].abs().max(1e-300), "{gamma} {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn sweep_matches_direct_node_loop() {
        for (gamma, interpolation, pruning) in [
            (1.0, Interpolation::Quadratic, Pruning::Partner(20.0)),
            (0.5, Interpolation::Linear, Pruning::None),
            (0.0, Interpolation::Quadratic, Pruning::Pair(20.0)),
        ] {
            let settings = CollisionSettings {
                interpolation,
                pruning,
                weak_pruning: Pruning::Pair(20.0),
            };
            let op = operator(gamma, 8, 4.0, settings);
            let st = bumpy_state(&op);
            for (i, j) in [(0, 1), (1, 0), (1, 1)] {
                let gain = op.q_gain(&st, 0, i, j).unwrap();
                let loss = op.q_loss(&st, 0, i, j).unwrap();
                for node in [0, 73, 200, 292, 511] {
                    let g = op.q_gain_node(&st, 0, i, j, node).unwrap();
                    let l = op.q_loss_node(&st, 0, i, j, node).unwrap();
                    assert!((g - gain[node]).abs() <= 1e-12 * g.abs().max(1e-300), "gain {gamma} {node}: {g} {}", gain[node]);
                    assert!((l - loss[node]).abs() <= 1e-12 * l.abs().max(1e-300), "loss {gamma} {node}");
                }
            }
        }
    }

    #[test]
    fn maxwell_kernel_loss_factorizes() {
        let settings = CollisionSettings {
            pruning: Pruning::None,
            ..Default::default()
        };
        let species = vec![Species::new(1.0, 1.0).unwrap(), Species::new(2.0, 0.5).unwrap()];
        let op = CollisionOperator::new(
            species,
            KernelSpec::new(0.0, vec![vec![1.0; 2]; 2], AngularProfile::AbsCos, 1.0).unwrap(),
            VelocityGrid::new(8.0, 24).unwrap(),
            make_sphere_rule(4, 8).unwrap(),
            settings,
        )
        .unwrap();
        let eq = op.equilibrium();
        let l = op.q_loss(&eq, 0, 0, 1).unwrap();
        let k = op.grid().index(12, 12, 12);
        let expected = eq.cell(0)[0][k] * 2.0 * std::f64::consts::PI * 0.5;
        assert!(((l[k] - expected) / expected).abs() < 1e-6);
    }

    #[test]
    fn empty_partner_gives_nothing() {
        let op = operator(1.0, 8, 4.0, CollisionSettings::default());
        let nodes = op.grid().node_count();
        let st = MixtureState::homogeneous(
            StateMode::Physical,
            vec![op.maxwellian(0).to_vec(), vec![0.0; nodes]],
        )
        .unwrap();
        assert!(op.q_gain(&st, 0, 0, 1).unwrap().iter().all(|&x| x == 0.0));
        assert!(op.q_loss(&st, 0, 0, 1).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn entropy_production_sign() {
        let op = operator(0.0, 8, 4.0, CollisionSettings::default());
        let d_eq = op.entropy_production(&op.equilibrium(), 0).unwrap();
        let d = op.entropy_production(&bumpy_state(&op), 0).unwrap();
        assert!(d < 0.0);
        assert!(d_eq.abs() < 1e-6 * d.abs());
    }

    #[test]
    fn mode_is_enforced() {
        let op = operator(0.0, 8, 4.0, CollisionSettings::default());
        let nodes = op.grid().node_count();
        let pert = MixtureState::homogeneous(StateMode::Perturbation, vec![vec![0.0; nodes]; 2]).unwrap();
        assert!(matches!(op.q_gain(&pert, 0, 0, 0), Err(CollisionError::Mode { .. })));
        assert!(op.gamma_ops(&op.equilibrium(), 0).is_err());
        assert!(op.gamma_ops(&pert, 0).is_ok());
    }
}
