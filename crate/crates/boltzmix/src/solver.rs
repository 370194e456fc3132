//! Loss-implicit time stepping for the homogeneous mixture, Strang splitting
//! on a 1D torus, and initial-data scenarios.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::collision::{CollisionError, CollisionOperator, Invariant, MixtureState, StateMode};
use crate::diagnostics::{DiagnosticsError, DiagnosticsRecord, Recorder};
use crate::linearized::CollisionFrequencyTable;
use crate::model::{vec3, Species};
use crate::quadrature::{pairwise_sum_by, VelocityGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("time step must be positive and finite, got {0}")]
    TimeStep(f64),
    #[error("end time must be nonnegative and finite, got {0}")]
    EndTime(f64),
    #[error("sampling interval must be at least one step")]
    SampleEvery,
    #[error("physical state has negative value {value} (species {species}, node {node})")]
    NegativeInput { species: usize, node: usize, value: f64 },
    #[error("expected a physical state")]
    Mode,
    #[error("torus needs at least 8 cells, got {0}")]
    TorusCells(usize),
    #[error("state has {got} cells, torus has {expected}")]
    CellMismatch { expected: usize, got: usize },
    #[error("moment correction did not converge (residual {0:e})")]
    MomentFix(f64),
    #[error("scenario parameter {name} out of range: {value}")]
    Scenario { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// (F + dt gain) / (1 + dt R(F)), nonnegative for any dt.
    #[default]
    SemiImplicitLoss,
    ExplicitEuler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    dt: f64,
    pub scheme: Scheme,
    pub conservation_fix: bool,
}

impl StepConfig {
    pub fn new(dt: f64) -> Result<Self, SolverError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SolverError::TimeStep(dt));
        }
        Ok(Self {
            dt,
            scheme: Scheme::default(),
            conservation_fix: true,
        })
    }

    /// 0.2 / max nu.
    pub fn from_frequency(nu: &CollisionFrequencyTable) -> Result<Self, SolverError> {
        Self::new(0.2 / nu.max_value())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self, SolverError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SolverError::TimeStep(dt));
        }
        self.dt = dt;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusConfig {
    cells: usize,
    /// Skip the collision stage (zero collision constant).
    pub transport_only: bool,
}

impl TorusConfig {
    pub fn new(cells: usize) -> Result<Self, SolverError> {
        if cells < 8 {
            return Err(SolverError::TorusCells(cells));
        }
        Ok(Self {
            cells,
            transport_only: false,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }
}

/// psi_k at every node, indexed [species][invariant][node].
fn invariant_table(species: &[Species], grid: &VelocityGrid) -> Vec<Vec<Vec<f64>>> {
    let invariants = Invariant::all(species.len());
    species
        .iter()
        .enumerate()
        .map(|(i, s)| {
            invariants
                .iter()
                .map(|inv| grid.sample(|v| inv.eval(i, s.mass(), v)))
                .collect()
        })
        .collect()
}

fn cell_moments(psi: &[Vec<Vec<f64>>], cell: &[Vec<f64>], dv: f64) -> Vec<f64> {
    let k = psi[0].len();
    (0..k)
        .map(|a| {
            cell.iter()
                .enumerate()
                .map(|(i, f)| pairwise_sum_by(f.len(), &|n| psi[i][a][n] * f[n]))
                .sum::<f64>()
                * dv
        })
        .collect()
}

/// Per-moment scale for relative comparisons: species masses and energy by
/// their own size, momentum by sum n_i sqrt(3 m_i).
fn moment_scales(species: &[Species], target: &[f64]) -> Vec<f64> {
    let ns = species.len();
    let p_scale: f64 = species.iter().map(|s| s.density() * (3.0 * s.mass()).sqrt()).sum();
    let e_scale: f64 = species.iter().map(|s| 1.5 * s.density()).sum();
    let mut out: Vec<f64> = target[..ns].iter().zip(species).map(|(t, s)| t.abs().max(1e-3 * s.density())).collect();
    out.extend([p_scale; 3]);
    out.push(target[ns + 3].abs().max(1e-3 * e_scale));
    out
}

fn worst_residual(current: &[f64], target: &[f64], scales: &[f64]) -> f64 {
    current
        .iter()
        .zip(target)
        .zip(scales)
        .map(|((c, t), s)| (c - t).abs() / s)
        .fold(0.0, f64::max)
}

const FIX_TOL: f64 = 1e-14;

/// Matches the N + 4 moments of one cell to `target` by F <- F (1 + chi sum
/// lambda_k psi_k), falling back to F <- F (1 + chi (exp(sum lambda_k psi_k) - 1))
/// when the linear correction would turn a node negative. chi must lie in [0, 1].
pub fn match_moments(
    species: &[Species],
    grid: &VelocityGrid,
    cell: &mut [Vec<f64>],
    target: &[f64],
    chi: Option<&[f64]>,
) -> Result<(), SolverError> {
    let psi = invariant_table(species, grid);
    match_moments_with(species, &psi, grid.cell_volume(), cell, target, chi)
}

fn match_moments_with(
    species: &[Species],
    psi: &[Vec<Vec<f64>>],
    dv: f64,
    cell: &mut [Vec<f64>],
    target: &[f64],
    chi: Option<&[f64]>,
) -> Result<(), SolverError> {
    let k = target.len();
    let nodes = cell[0].len();
    let scales = moment_scales(species, target);
    let chi_at = |n: usize| chi.map_or(1.0, |c| c[n]);
    let original: Vec<Vec<f64>> = cell.to_vec();
    let gram = |weights: &(dyn Fn(usize, usize) -> f64 + Sync)| {
        DMatrix::from_fn(k, k, |a, b| {
            (0..species.len())
                .map(|i| pairwise_sum_by(nodes, &|n| weights(i, n) * psi[i][a][n] * psi[i][b][n]))
                .sum::<f64>()
                * dv
        })
    };
    let solve = |g: DMatrix<f64>, r: DVector<f64>| -> Option<DVector<f64>> {
        g.clone().cholesky().map(|c| c.solve(&r)).or_else(|| g.lu().solve(&r))
    };

    // Linear correction, refined a few times against rounding.
    let g = gram(&|i, n| original[i][n] * chi_at(n));
    let mut lambda = DVector::zeros(k);
    let mut linear_ok = true;
    for _ in 0..4 {
        let current = cell_moments(psi, cell, dv);
        if worst_residual(&current, target, &scales) <= FIX_TOL {
            return Ok(());
        }
        let r = DVector::from_iterator(k, target.iter().zip(&current).map(|(t, c)| t - c));
        let Some(step) = solve(g.clone(), r) else {
            linear_ok = false;
            break;
        };
        lambda += step;
        for (i, fi) in cell.iter_mut().enumerate() {
            for n in 0..nodes {
                let s: f64 = (0..k).map(|a| lambda[a] * psi[i][a][n]).sum();
                fi[n] = original[i][n] * (1.0 + chi_at(n) * s);
            }
        }
        if cell.iter().flatten().any(|x| *x < 0.0) {
            linear_ok = false;
            break;
        }
    }
    if linear_ok {
        let current = cell_moments(psi, cell, dv);
        let res = worst_residual(&current, target, &scales);
        if res <= 1e-13 {
            return Ok(());
        }
    }

    // Exponential tilt, Newton on lambda.
    let mut lambda = DVector::<f64>::zeros(k);
    let mut res = f64::INFINITY;
    for _ in 0..60 {
        let tilt: Vec<Vec<f64>> = (0..species.len())
            .map(|i| {
                (0..nodes)
                    .map(|n| {
                        let s: f64 = (0..k).map(|a| lambda[a] * psi[i][a][n]).sum();
                        s.min(700.0).exp()
                    })
                    .collect()
            })
            .collect();
        for (i, fi) in cell.iter_mut().enumerate() {
            for n in 0..nodes {
                fi[n] = original[i][n] * (1.0 + chi_at(n) * (tilt[i][n] - 1.0));
            }
        }
        let current = cell_moments(psi, cell, dv);
        res = worst_residual(&current, target, &scales);
        if res <= FIX_TOL {
            return Ok(());
        }
        let jac = gram(&|i, n| original[i][n] * chi_at(n) * tilt[i][n]);
        let r = DVector::from_iterator(k, target.iter().zip(&current).map(|(t, c)| t - c));
        let Some(mut step) = solve(jac, r) else {
            break;
        };
        let norm = step.amax();
        if norm > 1.0 {
            step /= norm;
        }
        lambda += step;
    }
    if res <= 1e-12 {
        return Ok(());
    }
    Err(SolverError::MomentFix(res))
}

fn check_physical(state: &MixtureState) -> Result<(), SolverError> {
    if state.mode() != StateMode::Physical {
        return Err(SolverError::Mode);
    }
    for cell in state.cells() {
        for (i, fi) in cell.iter().enumerate() {
            if let Some((n, &v)) = fi.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                return Err(SolverError::NegativeInput {
                    species: i,
                    node: n,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// One collision step of one cell.
fn collide_cell(
    op: &CollisionOperator,
    psi: &[Vec<Vec<f64>>],
    cell: &[Vec<f64>],
    cfg: &StepConfig,
) -> Result<Vec<Vec<f64>>, SolverError> {
    let state = MixtureState::homogeneous(StateMode::Physical, cell.to_vec())?;
    let tally = op.tally(&state, 0)?;
    let dt = cfg.dt;
    let mut next: Vec<Vec<f64>> = match cfg.scheme {
        Scheme::SemiImplicitLoss => {
            let freq = op.nonlinear_frequency(&state, 0)?;
            cell.iter()
                .zip(&tally.gain)
                .zip(&freq)
                .map(|((f, g), r)| {
                    f.iter()
                        .zip(g)
                        .zip(r)
                        .map(|((f, g), r)| (f + dt * g) / (1.0 + dt * r))
                        .collect()
                })
                .collect()
        }
        Scheme::ExplicitEuler => cell
            .iter()
            .zip(&tally.gain)
            .zip(&tally.loss)
            .map(|((f, g), l)| f.iter().zip(g).zip(l).map(|((f, g), l)| f + dt * (g - l)).collect())
            .collect(),
    };
    if cfg.conservation_fix {
        let target = cell_moments(psi, cell, op.grid().cell_volume());
        match_moments_with(op.species(), psi, op.grid().cell_volume(), &mut next, &target, None)?;
    }
    Ok(next)
}

/// One step of the space-homogeneous equation for every cell of `state`.
pub fn step_homogeneous(op: &CollisionOperator, state: &MixtureState, cfg: &StepConfig) -> Result<MixtureState, SolverError> {
    check_physical(state)?;
    let psi = invariant_table(op.species(), op.grid());
    step_cells(op, &psi, state, cfg)
}

fn step_cells(
    op: &CollisionOperator,
    psi: &[Vec<Vec<f64>>],
    state: &MixtureState,
    cfg: &StepConfig,
) -> Result<MixtureState, SolverError> {
    let cells = state
        .cells()
        .iter()
        .map(|c| collide_cell(op, psi, c, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MixtureState::new(StateMode::Physical, cells)?)
}

/// Records plus the final state of a run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<DiagnosticsRecord>,
    pub state: MixtureState,
}

/// Marches to t_end, recording every `sample_every` steps and at the end.
pub fn run_homogeneous(
    op: &CollisionOperator,
    recorder: &Recorder,
    initial: &MixtureState,
    cfg: &StepConfig,
    t_end: f64,
    sample_every: usize,
) -> Result<Trajectory, SolverError> {
    run_observed(op, recorder, initial, cfg, None, t_end, sample_every, |_, _, _| Ok(()))
}

/// As `run_homogeneous` on a torus.
pub fn run_torus(
    op: &CollisionOperator,
    recorder: &Recorder,
    initial: &MixtureState,
    cfg: &StepConfig,
    torus: &TorusConfig,
    t_end: f64,
    sample_every: usize,
) -> Result<Trajectory, SolverError> {
    run_observed(op, recorder, initial, cfg, Some(torus), t_end, sample_every, |_, _, _| Ok(()))
}

/// General driver; `observe(step, time, state)` sees the initial state and
/// every stepped state.
#[allow(clippy::too_many_arguments)]
pub fn run_observed<O>(
    op: &CollisionOperator,
    recorder: &Recorder,
    initial: &MixtureState,
    cfg: &StepConfig,
    torus: Option<&TorusConfig>,
    t_end: f64,
    sample_every: usize,
    mut observe: O,
) -> Result<Trajectory, SolverError>
where
    O: FnMut(usize, f64, &MixtureState) -> Result<(), SolverError>,
{
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(SolverError::EndTime(t_end));
    }
    if sample_every == 0 {
        return Err(SolverError::SampleEvery);
    }
    check_physical(initial)?;
    let psi = invariant_table(op.species(), op.grid());
    let steps = (t_end / cfg.dt - 1e-9).ceil().max(0.0) as usize;
    let mut state = initial.clone();
    let mut records = vec![recorder.record(0.0, &state)?];
    observe(0, 0.0, &state)?;
    let mut t = 0.0;
    for s in 1..=steps {
        let dt = if s == steps { t_end - t } else { cfg.dt };
        let step_cfg = cfg.with_dt(dt.max(f64::MIN_POSITIVE))?;
        state = match torus {
            None => step_cells(op, &psi, &state, &step_cfg)?,
            Some(tc) => torus_step(op, &psi, &state, &step_cfg, tc)?,
        };
        t = if s == steps { t_end } else { s as f64 * cfg.dt };
        observe(s, t, &state)?;
        if s % sample_every == 0 || s == steps {
            records.push(recorder.record(t, &state)?);
        }
    }
    Ok(Trajectory { records, state })
}

/// Semi-Lagrangian shift of every velocity slice by v_x dt on the unit torus.
fn transport(grid: &VelocityGrid, cells: &[Vec<Vec<f64>>], dt: f64) -> Vec<Vec<Vec<f64>>> {
    let nc = cells.len();
    let ns = cells[0].len();
    let nodes = grid.node_count();
    let mut out = vec![vec![vec![0.0; nodes]; ns]; nc];
    for k in 0..nodes {
        let shift = grid.node(k)[0] * dt * nc as f64;
        let whole = shift.floor();
        let frac = shift - whole;
        let base = whole as i64;
        for c in 0..nc {
            // value at x_c - shift: between cells c - base - 1 and c - base
            let hi = (c as i64 - base).rem_euclid(nc as i64) as usize;
            let lo = (c as i64 - base - 1).rem_euclid(nc as i64) as usize;
            for i in 0..ns {
                let a = cells[hi][i][k];
                let b = cells[lo][i][k];
                out[c][i][k] = if frac == 0.0 { a } else { (1.0 - frac) * a + frac * b };
            }
        }
    }
    out
}

fn torus_step(
    op: &CollisionOperator,
    psi: &[Vec<Vec<f64>>],
    state: &MixtureState,
    cfg: &StepConfig,
    torus: &TorusConfig,
) -> Result<MixtureState, SolverError> {
    if state.cell_count() != torus.cells {
        return Err(SolverError::CellMismatch {
            expected: torus.cells,
            got: state.cell_count(),
        });
    }
    let grid = op.grid();
    let half = transport(grid, state.cells(), 0.5 * cfg.dt);
    let collided = if torus.transport_only {
        half
    } else {
        half.iter()
            .map(|c| collide_cell(op, psi, c, cfg))
            .collect::<Result<Vec<_>, _>>()?
    };
    let out = transport(grid, &collided, 0.5 * cfg.dt);
    Ok(MixtureState::new(StateMode::Physical, out)?)
}

/// Strang step: half transport, collisions per cell, half transport.
pub fn step_torus(
    op: &CollisionOperator,
    state: &MixtureState,
    cfg: &StepConfig,
    torus: &TorusConfig,
) -> Result<MixtureState, SolverError> {
    check_physical(state)?;
    let psi = invariant_table(op.species(), op.grid());
    torus_step(op, &psi, state, cfg, torus)
}

/// Initial data generators. Every non-equilibrium scenario is moment matched
/// to the global Maxwellian so that relative entropies are comparable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Equilibrium,
    /// Small anisotropic temperature and counter-drift between species.
    TwoSpeciesRelax { amplitude: f64 },
    /// F = mu (1 +- amplitude) on a velocity shell with a node-alternating sign.
    LargeAmplitude { amplitude: f64, shell_radius: f64, shell_width: f64 },
    /// Species drifting at +-drift, not moment matched.
    BiMaxwellian { drift: f64 },
    /// mu exp(amplitude s) with s a random sum of damped plane waves.
    RandomSmooth { amplitude: f64 },
}

impl Scenario {
    pub fn two_species_relax() -> Self {
        Scenario::TwoSpeciesRelax { amplitude: 0.1 }
    }

    pub fn large_amplitude() -> Self {
        Scenario::LargeAmplitude {
            amplitude: 0.9,
            shell_radius: 4.0,
            shell_width: 0.5,
        }
    }

    /// Per-species node values for a homogeneous cell.
    pub fn build(&self, species: &[Species], grid: &VelocityGrid, seed: u64) -> Result<Vec<Vec<f64>>, SolverError> {
        let mu: Vec<Vec<f64>> = species.iter().map(|s| grid.sample(|v| s.maxwellian(v))).collect();
        let mut cell: Vec<Vec<f64>> = match *self {
            Scenario::Equilibrium => return Ok(mu),
            Scenario::TwoSpeciesRelax { amplitude } => {
                if !(amplitude > 0.0 && amplitude < 1.0) {
                    return Err(SolverError::Scenario {
                        name: "amplitude",
                        value: amplitude,
                    });
                }
                species
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                        let m = s.mass();
                        grid.sample(|v| {
                            let aniso = 0.5 * m * (v[0] * v[0] - 0.5 * (v[1] * v[1] + v[2] * v[2]));
                            let p = sign * amplitude * (aniso + m * v[0]) * (-vec3::norm_sq(v) * m / 16.0).exp();
                            s.maxwellian(v) * p.exp()
                        })
                    })
                    .collect()
            }
            Scenario::LargeAmplitude {
                amplitude,
                shell_radius,
                shell_width,
            } => {
                if !(amplitude > 0.0 && amplitude < 1.0) {
                    return Err(SolverError::Scenario {
                        name: "amplitude",
                        value: amplitude,
                    });
                }
                if !(shell_radius > 0.0 && shell_width > 0.0) {
                    return Err(SolverError::Scenario {
                        name: "shell",
                        value: shell_radius.min(shell_width),
                    });
                }
                species
                    .iter()
                    .map(|s| {
                        let r0 = shell_radius / s.mass().sqrt();
                        let w0 = shell_width / s.mass().sqrt();
                        (0..grid.node_count())
                            .map(|k| {
                                let v = grid.node(k);
                                let (ix, iy, iz) = grid.split(k);
                                let sign = if (ix + iy + iz) % 2 == 0 { 1.0 } else { -1.0 };
                                let d = (vec3::norm(v) - r0) / w0;
                                s.maxwellian(v) * (1.0 + sign * amplitude * (-0.5 * d * d).exp())
                            })
                            .collect()
                    })
                    .collect()
            }
            Scenario::BiMaxwellian { drift } => {
                return Ok(species
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let u = if i % 2 == 0 { drift } else { -drift };
                        grid.sample(|v| s.maxwellian(vec3::sub(v, [u, 0.0, 0.0])))
                    })
                    .collect());
            }
            Scenario::RandomSmooth { amplitude } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                species
                    .iter()
                    .map(|s| {
                        let waves: Vec<(f64, [f64; 3], f64)> = (0..4)
                            .map(|_| {
                                (
                                    rng.gen_range(-0.5..0.5),
                                    [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)],
                                    rng.gen_range(0.0..std::f64::consts::TAU),
                                )
                            })
                            .collect();
                        grid.sample(|v| {
                            let damp = (-vec3::norm_sq(v) / 18.0).exp();
                            let p: f64 = waves.iter().map(|(c, k, ph)| c * (vec3::dot(*k, v) + ph).cos()).sum();
                            s.maxwellian(v) * (amplitude * p * damp).exp()
                        })
                    })
                    .collect()
            }
        };
        let psi = invariant_table(species, grid);
        let target = cell_moments(&psi, &mu, grid.cell_volume());
        let chi = grid.sample(|v| (-vec3::norm_sq(v) / 8.0).exp());
        match_moments_with(species, &psi, grid.cell_volume(), &mut cell, &target, Some(&chi))?;
        Ok(cell)
    }

    pub fn homogeneous(&self, species: &[Species], grid: &VelocityGrid, seed: u64) -> Result<MixtureState, SolverError> {
        Ok(MixtureState::homogeneous(StateMode::Physical, self.build(species, grid, seed)?)?)
    }
}

/// F(x, v) = (1 + amplitude cos(2 pi x)) mu(v) on the torus cell centres.
pub fn standing_wave(species: &[Species], grid: &VelocityGrid, torus: &TorusConfig, amplitude: f64) -> Result<MixtureState, SolverError> {
    if !(amplitude.abs() < 1.0) {
        return Err(SolverError::Scenario {
            name: "amplitude",
            value: amplitude,
        });
    }
    let mu: Vec<Vec<f64>> = species.iter().map(|s| grid.sample(|v| s.maxwellian(v))).collect();
    let nc = torus.cells;
    let cells = (0..nc)
        .map(|c| {
            let x = (c as f64 + 0.5) / nc as f64;
            let factor = 1.0 + amplitude * (std::f64::consts::TAU * x).cos();
            mu.iter().map(|m| m.iter().map(|y| factor * y).collect()).collect()
        })
        .collect();
    Ok(MixtureState::new(StateMode::Physical, cells)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::CollisionSettings;
    use crate::diagnostics::{conserved_moments, entropy};
    use crate::model::{KernelSpec, WeightSpec};
    use crate::quadrature::make_sphere_rule;

    fn species() -> Vec<Species> {
        vec![Species::new(1.0, 1.0).unwrap(), Species::new(2.0, 0.5).unwrap()]
    }

    fn operator(n: usize) -> CollisionOperator {
        CollisionOperator::new(
            species(),
            KernelSpec::uniform(2, 0.0).unwrap(),
            VelocityGrid::new(5.0, n).unwrap(),
            make_sphere_rule(4, 8).unwrap(),
            CollisionSettings::default(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(matches!(StepConfig::new(0.0), Err(SolverError::TimeStep(_))));
        assert!(matches!(StepConfig::new(f64::NAN), Err(SolverError::TimeStep(_))));
        assert!(matches!(TorusConfig::new(7), Err(SolverError::TorusCells(7))));
    }

    #[test]
    fn equilibrium_is_fixed() {
        let op = operator(8);
        let cfg = StepConfig::new(0.1).unwrap();
        let mu = op.equilibrium();
        let next = step_homogeneous(&op, &mu, &cfg).unwrap();
        let scale = mu.cells()[0].iter().flatten().fold(0.0f64, |m, x| m.max(*x));
        for (a, b) in next.cells().iter().flatten().flatten().zip(mu.cells().iter().flatten().flatten()) {
            assert!((a - b).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn negative_input_rejected() {
        let op = operator(8);
        let mut cells = op.equilibrium().into_cells();
        cells[0][1][5] = -1e-3;
        let err = MixtureState::new(StateMode::Physical, cells.clone()).unwrap_err();
        assert!(matches!(err, CollisionError::InvalidPhysicalValue { species: 1, node: 5, .. }));
        let p = MixtureState::new(StateMode::Perturbation, cells).unwrap();
        assert!(matches!(step_homogeneous(&op, &p, &StepConfig::new(0.1).unwrap()), Err(SolverError::Mode)));
    }

    #[test]
    fn bi_maxwellian_conserves_and_dissipates() {
        let op = operator(8);
        let sp = species();
        let cfg = StepConfig::new(0.1).unwrap();
        let mut s = Scenario::BiMaxwellian { drift: 0.7 }.homogeneous(&sp, op.grid(), 0).unwrap();
        let m0 = conserved_moments(&sp, op.grid(), &s).unwrap();
        let mut e = entropy(&sp, op.grid(), &s).unwrap();
        for _ in 0..5 {
            let prev = conserved_moments(&sp, op.grid(), &s).unwrap();
            s = step_homogeneous(&op, &s, &cfg).unwrap();
            let m = conserved_moments(&sp, op.grid(), &s).unwrap();
            assert!(m.relative_drift(&prev, &sp) <= 1e-12, "{}", m.relative_drift(&prev, &sp));
            let e2 = entropy(&sp, op.grid(), &s).unwrap();
            assert!(e2 <= e + 1e-12);
            e = e2;
        }
        assert!(conserved_moments(&sp, op.grid(), &s).unwrap().relative_drift(&m0, &sp) <= 1e-11);
    }

    #[test]
    fn large_steps_stay_nonnegative() {
        let op = operator(8);
        let sp = species();
        let s = Scenario::large_amplitude().homogeneous(&sp, op.grid(), 0).unwrap();
        for dt in [1e-3, 1.0, 10.0] {
            let next = step_homogeneous(&op, &s, &StepConfig::new(dt).unwrap()).unwrap();
            assert!(next.min_value() >= 0.0);
        }
    }

    #[test]
    fn scenarios_are_moment_matched() {
        let sp = species();
        let grid = VelocityGrid::new(6.0, 12).unwrap();
        let mu = Scenario::Equilibrium.homogeneous(&sp, &grid, 0).unwrap();
        let target = conserved_moments(&sp, &grid, &mu).unwrap();
        for sc in [
            Scenario::two_species_relax(),
            Scenario::large_amplitude(),
            Scenario::RandomSmooth { amplitude: 1.0 },
        ] {
            let s = sc.homogeneous(&sp, &grid, 9).unwrap();
            assert!(s.min_value() >= 0.0);
            let m = conserved_moments(&sp, &grid, &s).unwrap();
            assert!(m.relative_drift(&target, &sp) <= 1e-13, "{sc:?}");
        }
        let a = Scenario::RandomSmooth { amplitude: 1.0 }.build(&sp, &grid, 4).unwrap();
        let b = Scenario::RandomSmooth { amplitude: 1.0 }.build(&sp, &grid, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn torus_matches_homogeneous_on_uniform_data() {
        let op = operator(8);
        let sp = species();
        let torus = TorusConfig::new(8).unwrap();
        let cell = Scenario::BiMaxwellian { drift: 0.5 }.build(&sp, op.grid(), 0).unwrap();
        let cfg = StepConfig::new(0.05).unwrap();
        let uniform = MixtureState::new(StateMode::Physical, vec![cell.clone(); 8]).unwrap();
        let t = step_torus(&op, &uniform, &cfg, &torus).unwrap();
        let h = step_homogeneous(&op, &MixtureState::homogeneous(StateMode::Physical, cell).unwrap(), &cfg).unwrap();
        for c in t.cells() {
            for (a, b) in c.iter().flatten().zip(h.cells()[0].iter().flatten()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn pure_transport_with_integer_shift_is_exact() {
        let op = operator(8);
        let sp = species();
        let mut torus = TorusConfig::new(10).unwrap();
        torus.transport_only = true;
        let s = standing_wave(&sp, op.grid(), &torus, 0.4).unwrap();
        // each half step moves v_x * 0.04 * 10 cells, an integer at v_x in {-5, -2.5, 0, 2.5}
        let cfg = StepConfig::new(0.08).unwrap();
        let next = step_torus(&op, &s, &cfg, &torus).unwrap();
        let g = op.grid();
        for k in 0..g.node_count() {
            let half = g.node(k)[0] * 0.4;
            if (half - half.round()).abs() < 1e-12 {
                let sh = 2 * half.round() as i64;
                for c in 0..10 {
                    let src = (c as i64 - sh).rem_euclid(10) as usize;
                    for i in 0..2 {
                        assert!((next.cells()[c][i][k] - s.cells()[src][i][k]).abs() < 1e-15);
                    }
                }
            }
        }
        for k in 0..g.node_count() {
            for i in 0..2 {
                let mass = |st: &MixtureState| st.cells().iter().map(|c| c[i][k]).sum::<f64>();
                let max = |st: &MixtureState| st.cells().iter().map(|c| c[i][k]).fold(0.0f64, f64::max);
                assert!((mass(&next) - mass(&s)).abs() <= 1e-13 * mass(&s).max(1e-300));
                assert!(max(&next) <= max(&s) * (1.0 + 1e-14));
            }
        }
    }

    #[test]
    fn run_samples_and_end_time() {
        let op = operator(8);
        let sp = species();
        let rec = Recorder::new(&op, WeightSpec::default());
        let s = Scenario::two_species_relax().homogeneous(&sp, op.grid(), 0).unwrap();
        let cfg = StepConfig::new(0.25).unwrap();
        let zero = run_homogeneous(&op, &rec, &s, &cfg, 0.0, 1).unwrap();
        assert_eq!(zero.records.len(), 1);
        let run = run_homogeneous(&op, &rec, &s, &cfg, 1.1, 2).unwrap();
        let times: Vec<f64> = run.records.iter().map(|r| r.time).collect();
        assert_eq!(times.len(), 4);
        assert_eq!(times[0], 0.0);
        assert!((times[3] - 1.1).abs() < 1e-15);
        for w in run.records.windows(2) {
            assert!(w[1].rel_entropy <= w[0].rel_entropy + 1e-12);
        }
        let again = run_homogeneous(&op, &rec, &s, &cfg, 1.1, 2).unwrap();
        assert_eq!(run.records, again.records);
    }
}
