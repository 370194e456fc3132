//! Conserved moments, entropies, weighted norms, monitors and decay fits.

use thiserror::Error;

use crate::collision::{CollisionError, CollisionOperator, MixtureState, StateMode};
use crate::linearized::CollisionFrequencyTable;
use crate::model::{vec3, Species, Vec3, WeightSpec};
use crate::quadrature::{pairwise_sum_by, VelocityGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error("expected a {expected:?} state")]
    Mode { expected: StateMode },
    #[error("state holds {got} species, expected {expected}")]
    SpeciesCount { expected: usize, got: usize },
    #[error("decay fit needs at least 10 samples in the window, got {0}")]
    InsufficientSamples(usize),
    #[error("decay fit needs positive values, got {value} at t = {time}")]
    NonPositiveSample { time: f64, value: f64 },
    #[error("field refers to species {index} but records hold {count}")]
    FieldSpecies { index: usize, count: usize },
}

fn require(state: &MixtureState, mode: StateMode, species: usize) -> Result<(), DiagnosticsError> {
    if state.mode() != mode {
        return Err(DiagnosticsError::Mode { expected: mode });
    }
    if state.species_count() != species {
        return Err(DiagnosticsError::SpeciesCount {
            expected: species,
            got: state.species_count(),
        });
    }
    Ok(())
}

/// Cell average of a per-cell functional, i.e. the integral over the unit torus.
fn cell_mean(state: &MixtureState, f: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let n = state.cell_count();
    (0..n).map(|c| f(state.cell(c))).sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservedMoments {
    /// Number density of each species.
    pub mass: Vec<f64>,
    pub momentum: Vec3,
    pub energy: f64,
}

impl ConservedMoments {
    /// The N + 4 values in invariant order.
    pub fn as_vec(&self) -> Vec<f64> {
        let mut out = self.mass.clone();
        out.extend(self.momentum);
        out.push(self.energy);
        out
    }

    /// Largest moment deviation, each scaled by its own magnitude with
    /// momentum scaled by sum m_i n_i sqrt(3 / m_i).
    pub fn relative_drift(&self, reference: &ConservedMoments, species: &[Species]) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.mass.iter().zip(&reference.mass) {
            worst = worst.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
        }
        let p_scale: f64 = species.iter().map(|s| s.density() * (3.0 * s.mass()).sqrt()).sum();
        for d in 0..3 {
            worst = worst.max((self.momentum[d] - reference.momentum[d]).abs() / p_scale);
        }
        worst.max((self.energy - reference.energy).abs() / reference.energy.abs().max(f64::MIN_POSITIVE))
    }
}

/// Number densities, total momentum and total kinetic energy, averaged over cells.
pub fn conserved_moments(
    species: &[Species],
    grid: &VelocityGrid,
    state: &MixtureState,
) -> Result<ConservedMoments, DiagnosticsError> {
    require(state, StateMode::Physical, species.len())?;
    let dv = grid.cell_volume();
    let nodes = grid.node_count();
    let mass = (0..species.len())
        .map(|i| cell_mean(state, |f| pairwise_sum_by(nodes, &|k| f[i][k])) * dv)
        .collect();
    let mut momentum = [0.0; 3];
    for (d, p) in momentum.iter_mut().enumerate() {
        *p = species
            .iter()
            .enumerate()
            .map(|(i, s)| s.mass() * cell_mean(state, |f| pairwise_sum_by(nodes, &|k| grid.node(k)[d] * f[i][k])))
            .sum::<f64>()
            * dv;
    }
    let energy = species
        .iter()
        .enumerate()
        .map(|(i, s)| 0.5 * s.mass() * cell_mean(state, |f| pairwise_sum_by(nodes, &|k| vec3::norm_sq(grid.node(k)) * f[i][k])))
        .sum::<f64>()
        * dv;
    Ok(ConservedMoments { mass, momentum, energy })
}

fn x_log_x(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// E(F) = sum_i int F_i log F_i.
pub fn entropy(species: &[Species], grid: &VelocityGrid, state: &MixtureState) -> Result<f64, DiagnosticsError> {
    require(state, StateMode::Physical, species.len())?;
    let nodes = grid.node_count();
    Ok(cell_mean(state, |f| f.iter().map(|fi| pairwise_sum_by(nodes, &|k| x_log_x(fi[k]))).sum()) * grid.cell_volume())
}

/// sum_i int (F_i log F_i - mu_i log mu_i).
pub fn relative_entropy(species: &[Species], grid: &VelocityGrid, state: &MixtureState) -> Result<f64, DiagnosticsError> {
    require(state, StateMode::Physical, species.len())?;
    let nodes = grid.node_count();
    let mu_log_mu: Vec<Vec<f64>> = species
        .iter()
        .map(|s| grid.sample(|v| {
            let v2 = vec3::norm_sq(v);
            s.maxwellian_sq(v2) * s.log_maxwellian_sq(v2)
        }))
        .collect();
    Ok(cell_mean(state, |f| {
        f.iter()
            .zip(&mu_log_mu)
            .map(|(fi, m)| pairwise_sum_by(nodes, &|k| x_log_x(fi[k]) - m[k]))
            .sum()
    }) * grid.cell_volume())
}

/// sum_i int mu_i psi(F_i / mu_i) with psi(x) = x log x - x + 1. Agrees with
/// the relative entropy whenever species masses and total energy match mu.
pub fn relative_entropy_psi(species: &[Species], grid: &VelocityGrid, state: &MixtureState) -> Result<f64, DiagnosticsError> {
    require(state, StateMode::Physical, species.len())?;
    let nodes = grid.node_count();
    let mu: Vec<Vec<f64>> = species.iter().map(|s| grid.sample(|v| s.maxwellian(v))).collect();
    Ok(cell_mean(state, |f| {
        f.iter()
            .zip(&mu)
            .map(|(fi, m)| {
                pairwise_sum_by(nodes, &|k| {
                    let (x, y) = (fi[k], m[k]);
                    if y <= 0.0 {
                        return 0.0;
                    }
                    x_log_x(x) - x * y.ln() - x + y
                })
            })
            .sum()
    }) * grid.cell_volume())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplittingCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl SplittingCheck {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.lhs <= self.rhs + tolerance
    }
}

/// lhs: quadratic part where |F - mu| <= mu plus linear part elsewhere;
/// rhs: the psi form of the relative entropy.
pub fn entropy_splitting_check(
    species: &[Species],
    grid: &VelocityGrid,
    state: &MixtureState,
) -> Result<SplittingCheck, DiagnosticsError> {
    let rhs = relative_entropy_psi(species, grid, state)?;
    let nodes = grid.node_count();
    let mu: Vec<Vec<f64>> = species.iter().map(|s| grid.sample(|v| s.maxwellian(v))).collect();
    let lhs = cell_mean(state, |f| {
        f.iter()
            .zip(&mu)
            .map(|(fi, m)| {
                pairwise_sum_by(nodes, &|k| {
                    let d = (fi[k] - m[k]).abs();
                    if d <= m[k] {
                        if m[k] > 0.0 {
                            d * d / (4.0 * m[k])
                        } else {
                            0.0
                        }
                    } else {
                        0.25 * d
                    }
                })
            })
            .sum()
    }) * grid.cell_volume();
    Ok(SplittingCheck { lhs, rhs })
}

/// f = (F - mu) / sqrt(mu), nodewise.
pub fn to_perturbation(species: &[Species], grid: &VelocityGrid, state: &MixtureState) -> Result<MixtureState, DiagnosticsError> {
    require(state, StateMode::Physical, species.len())?;
    let mu: Vec<Vec<f64>> = species.iter().map(|s| grid.sample(|v| s.maxwellian(v))).collect();
    let cells = state
        .cells()
        .iter()
        .map(|cell| {
            cell.iter()
                .zip(&mu)
                .map(|(fi, m)| fi.iter().zip(m).map(|(x, y)| (x - y) / y.sqrt()).collect())
                .collect()
        })
        .collect();
    Ok(MixtureState::new(StateMode::Perturbation, cells)?)
}

/// F = mu + sqrt(mu) f, nodewise; negative results are kept as is.
pub fn to_physical(species: &[Species], grid: &VelocityGrid, pert: &MixtureState) -> Result<Vec<Vec<Vec<f64>>>, DiagnosticsError> {
    require(pert, StateMode::Perturbation, species.len())?;
    let mu: Vec<Vec<f64>> = species.iter().map(|s| grid.sample(|v| s.maxwellian(v))).collect();
    Ok(pert
        .cells()
        .iter()
        .map(|cell| {
            cell.iter()
                .zip(&mu)
                .map(|(fi, m)| fi.iter().zip(m).map(|(x, y)| y + y.sqrt() * x).collect())
                .collect()
        })
        .collect())
}

/// h = w f, nodewise.
pub fn weighted_perturbation(grid: &VelocityGrid, pert: &MixtureState, weight: &WeightSpec) -> Result<MixtureState, DiagnosticsError> {
    if pert.mode() != StateMode::Perturbation {
        return Err(DiagnosticsError::Mode {
            expected: StateMode::Perturbation,
        });
    }
    let w = grid.sample(|v| weight.eval(v));
    let cells = pert
        .cells()
        .iter()
        .map(|cell| cell.iter().map(|fi| fi.iter().zip(&w).map(|(x, y)| x * y).collect()).collect())
        .collect();
    Ok(MixtureState::new(StateMode::Perturbation, cells)?)
}

/// max over cells and nodes of w |f_i|, per species.
pub fn weighted_sup_norm(grid: &VelocityGrid, pert: &MixtureState, weight: &WeightSpec) -> Result<Vec<f64>, DiagnosticsError> {
    if pert.mode() != StateMode::Perturbation {
        return Err(DiagnosticsError::Mode {
            expected: StateMode::Perturbation,
        });
    }
    let w = grid.sample(|v| weight.eval(v));
    Ok((0..pert.species_count())
        .map(|i| {
            pert.cells()
                .iter()
                .flat_map(|cell| cell[i].iter().zip(&w).map(|(x, y)| (x * y).abs()))
                .fold(0.0, f64::max)
        })
        .collect())
}

/// max over cells of int e^{-|v|^2/4} |w f_i| dv, per species.
pub fn gauss_monitor(grid: &VelocityGrid, pert: &MixtureState, weight: &WeightSpec) -> Result<Vec<f64>, DiagnosticsError> {
    if pert.mode() != StateMode::Perturbation {
        return Err(DiagnosticsError::Mode {
            expected: StateMode::Perturbation,
        });
    }
    let g = grid.sample(|v| (-0.25 * vec3::norm_sq(v)).exp() * weight.eval(v));
    let nodes = grid.node_count();
    Ok((0..pert.species_count())
        .map(|i| {
            pert.cells()
                .iter()
                .map(|cell| pairwise_sum_by(nodes, &|k| g[k] * cell[i][k].abs()) * grid.cell_volume())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Quadrature tolerance for sign checks on one operator: the larger of the
/// equilibrium entropy production and a rounding bound on the tally sum.
pub fn quadrature_tolerance(op: &CollisionOperator, nu: &CollisionFrequencyTable) -> Result<f64, DiagnosticsError> {
    let d_mu = op.entropy_production(&op.equilibrium(), 0)?.abs();
    let nodes = op.grid().node_count();
    let scale: f64 = (0..op.species_count())
        .map(|i| pairwise_sum_by(nodes, &|k| nu.total[i][k] * op.maxwellian(i)[k]))
        .sum::<f64>()
        * op.grid().cell_volume();
    let terms = (nodes * nodes * op.rule().len() * op.species_count().pow(2)) as f64;
    Ok(d_mu.max(terms.log2().ceil() * f64::EPSILON * scale))
}

/// One time sample of every tracked functional.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub mass: Vec<f64>,
    pub momentum: Vec3,
    pub energy: f64,
    pub entropy: f64,
    pub rel_entropy: f64,
    pub entropy_production: f64,
    pub winf_norm: Vec<f64>,
    pub gauss_monitor: Vec<f64>,
    pub rfreq_ratio: Vec<f64>,
}

impl DiagnosticsRecord {
    pub fn csv_header(species: usize) -> Vec<String> {
        let mut h = vec!["time".to_string()];
        h.extend((1..=species).map(|i| format!("mass_{i}")));
        h.extend(["px", "py", "pz", "energy", "entropy", "rel_entropy", "entropy_production"].map(String::from));
        for prefix in ["winf", "gauss", "rfreq"] {
            h.extend((1..=species).map(|i| format!("{prefix}_{i}")));
        }
        h
    }

    /// Values in header order, formatted with full round-trip precision.
    pub fn csv_row(&self) -> Vec<String> {
        let mut v = vec![self.time];
        v.extend(&self.mass);
        v.extend(self.momentum);
        v.extend([self.energy, self.entropy, self.rel_entropy, self.entropy_production]);
        v.extend(&self.winf_norm);
        v.extend(&self.gauss_monitor);
        v.extend(&self.rfreq_ratio);
        v.iter().map(|x| format!("{x:e}")).collect()
    }

    pub fn moments(&self) -> ConservedMoments {
        ConservedMoments {
            mass: self.mass.clone(),
            momentum: self.momentum,
            energy: self.energy,
        }
    }
}

/// Builds records against a fixed operator, weight and linearized frequency.
pub struct Recorder<'a> {
    op: &'a CollisionOperator,
    weight: WeightSpec,
    nu: CollisionFrequencyTable,
}

impl<'a> Recorder<'a> {
    pub fn new(op: &'a CollisionOperator, weight: WeightSpec) -> Self {
        Self {
            op,
            weight,
            nu: crate::linearized::build_nu(op),
        }
    }

    pub fn frequency(&self) -> &CollisionFrequencyTable {
        &self.nu
    }

    pub fn record(&self, time: f64, state: &MixtureState) -> Result<DiagnosticsRecord, DiagnosticsError> {
        let species = self.op.species();
        let grid = self.op.grid();
        let moments = conserved_moments(species, grid, state)?;
        let pert = to_perturbation(species, grid, state)?;
        let cells = state.cell_count();
        let mut production = 0.0;
        let mut rfreq = vec![f64::INFINITY; species.len()];
        for c in 0..cells {
            production += self.op.entropy_production(state, c)?;
            let r = self.op.nonlinear_frequency(state, c)?;
            for (i, ri) in r.iter().enumerate() {
                for (x, nu) in ri.iter().zip(&self.nu.total[i]) {
                    if *nu > 0.0 {
                        rfreq[i] = rfreq[i].min(x / nu);
                    }
                }
            }
        }
        Ok(DiagnosticsRecord {
            time,
            mass: moments.mass,
            momentum: moments.momentum,
            energy: moments.energy,
            entropy: entropy(species, grid, state)?,
            rel_entropy: relative_entropy(species, grid, state)?,
            entropy_production: production / cells as f64,
            winf_norm: weighted_sup_norm(grid, &pert, &self.weight)?,
            gauss_monitor: gauss_monitor(grid, &pert, &self.weight)?,
            rfreq_ratio: rfreq,
        })
    }
}

/// Record column used by a decay fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayField {
    /// Largest weighted sup norm over species.
    WinfMax,
    Winf(usize),
    Gauss(usize),
    RelEntropy,
}

impl DecayField {
    fn value(&self, r: &DiagnosticsRecord) -> Result<f64, DiagnosticsError> {
        let pick = |v: &[f64], i: usize| {
            v.get(i).copied().ok_or(DiagnosticsError::FieldSpecies {
                index: i,
                count: v.len(),
            })
        };
        match *self {
            DecayField::WinfMax => Ok(r.winf_norm.iter().copied().fold(0.0, f64::max)),
            DecayField::Winf(i) => pick(&r.winf_norm, i),
            DecayField::Gauss(i) => pick(&r.gauss_monitor, i),
            DecayField::RelEntropy => Ok(r.rel_entropy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub rate: f64,
    pub r_squared: f64,
}

/// Least-squares slope of log(field) against time over records with
/// t in [window.0, window.1]; rate is the negated slope.
pub fn fit_decay_rate(records: &[DiagnosticsRecord], field: DecayField, window: (f64, f64)) -> Result<DecayFit, DiagnosticsError> {
    let mut t = Vec::new();
    let mut y = Vec::new();
    for r in records.iter().filter(|r| r.time >= window.0 && r.time <= window.1) {
        let v = field.value(r)?;
        if v <= 0.0 || !v.is_finite() {
            return Err(DiagnosticsError::NonPositiveSample { time: r.time, value: v });
        }
        t.push(r.time);
        y.push(v.ln());
    }
    fit_log_linear(&t, &y)
}

/// Ordinary least squares of y on t; y is already logarithmic.
pub fn fit_log_linear(t: &[f64], y: &[f64]) -> Result<DecayFit, DiagnosticsError> {
    let n = t.len();
    if n < 10 {
        return Err(DiagnosticsError::InsufficientSamples(n));
    }
    let tm = t.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let stt: f64 = t.iter().map(|a| (a - tm) * (a - tm)).sum();
    let sty: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let syy: f64 = y.iter().map(|b| (b - ym) * (b - ym)).sum();
    let slope = sty / stt;
    let r_squared = if syy == 0.0 { 1.0 } else { sty * sty / (stt * syy) };
    Ok(DecayFit {
        rate: -slope,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn species() -> Vec<Species> {
        vec![Species::new(1.0, 1.0).unwrap(), Species::new(2.0, 0.5).unwrap()]
    }

    fn state_of(grid: &VelocityGrid, f: impl Fn(usize, Vec3) -> f64 + Sync) -> MixtureState {
        MixtureState::homogeneous(StateMode::Physical, (0..2).map(|i| grid.sample(|v| f(i, v))).collect()).unwrap()
    }

    #[test]
    fn maxwellian_moments() {
        let grid = VelocityGrid::new(8.0, 48).unwrap();
        let sp = species();
        let mu = state_of(&grid, |i, v| sp[i].maxwellian(v));
        let m = conserved_moments(&sp, &grid, &mu).unwrap();
        assert!((m.mass[0] - 1.0).abs() < 1e-6 && (m.mass[1] - 0.5).abs() < 1e-6);
        assert!(m.momentum.iter().all(|p| p.abs() < 1e-12));
        assert!((m.energy - 2.25).abs() < 1e-6);
        assert!(relative_entropy(&sp, &grid, &mu).unwrap().abs() < 1e-8);
        let s = entropy_splitting_check(&sp, &grid, &mu).unwrap();
        assert!(s.lhs.abs() < 1e-15 && s.rhs.abs() < 1e-8);
        let zero = state_of(&grid, |_, _| 0.0);
        let z = conserved_moments(&sp, &grid, &zero).unwrap();
        assert_eq!(z.as_vec(), vec![0.0; 6]);
    }

    #[test]
    fn shifted_maxwellian_momentum() {
        let grid = VelocityGrid::new(8.0, 48).unwrap();
        let sp = species();
        let u = [0.3, -0.2, 0.1];
        let f = state_of(&grid, |i, v| sp[i].maxwellian(vec3::sub(v, u)));
        let m = conserved_moments(&sp, &grid, &f).unwrap();
        let mn: f64 = sp.iter().map(|s| s.mass() * s.density()).sum();
        for d in 0..3 {
            assert!((m.momentum[d] - mn * u[d]).abs() < 1e-6);
        }
    }

    fn radial(f: impl Fn(f64) -> f64) -> f64 {
        crate::quadrature::gauss_legendre(200, 0.0, 12.0)
            .iter()
            .map(|(r, w)| w * 4.0 * std::f64::consts::PI * r * r * f(*r))
            .sum()
    }

    #[test]
    fn entropies_of_scaled_maxwellian_match_radial_quadrature() {
        let grid = VelocityGrid::new(8.0, 48).unwrap();
        let sp = species();
        for c in [2.0, 1.5] {
            let f = state_of(&grid, |i, v| c * sp[i].maxwellian(v));
            let mut re = 0.0;
            let mut lhs = 0.0;
            let mut psi = 0.0;
            for s in &sp {
                let mu = |r: f64| s.maxwellian([r, 0.0, 0.0]);
                re += radial(|r| c * mu(r) * (c * mu(r)).ln() - mu(r) * mu(r).ln());
                psi += radial(|r| mu(r) * (c * c.ln() - c + 1.0));
                let d = (c - 1.0) * s.density();
                lhs += if c - 1.0 <= 1.0 { 0.25 * (c - 1.0) * d } else { 0.25 * d };
            }
            assert!((relative_entropy(&sp, &grid, &f).unwrap() - re).abs() < 1e-8);
            let s = entropy_splitting_check(&sp, &grid, &f).unwrap();
            assert!((s.lhs - lhs).abs() < 1e-8);
            assert!((s.rhs - psi).abs() < 1e-8);
            if c == 1.5 {
                assert!(s.lhs > 0.0 && s.rhs > 0.0 && s.holds(0.0));
            }
        }
    }

    #[test]
    fn weighted_norms() {
        let grid = VelocityGrid::new(6.0, 12).unwrap();
        let w = WeightSpec::default();
        let inv = MixtureState::homogeneous(StateMode::Perturbation, vec![grid.sample(|v| 1.0 / w.eval(v)); 2]).unwrap();
        assert_eq!(weighted_sup_norm(&grid, &inv, &w).unwrap(), vec![1.0, 1.0]);
        let zero = MixtureState::homogeneous(StateMode::Perturbation, vec![vec![0.0; grid.node_count()]; 2]).unwrap();
        assert_eq!(weighted_sup_norm(&grid, &zero, &w).unwrap(), vec![0.0, 0.0]);
        assert_eq!(gauss_monitor(&grid, &zero, &w).unwrap(), vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<Vec<f64>> = (0..2).map(|_| (0..grid.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let base = weighted_sup_norm(&grid, &MixtureState::homogeneous(StateMode::Perturbation, f.clone()).unwrap(), &w).unwrap();
        let c = -2.75;
        let scaled: Vec<Vec<f64>> = f.iter().map(|x| x.iter().map(|y| c * y).collect()).collect();
        let s = weighted_sup_norm(&grid, &MixtureState::homogeneous(StateMode::Perturbation, scaled).unwrap(), &w).unwrap();
        for (a, b) in base.iter().zip(&s) {
            assert!((c.abs() * a - b).abs() <= 1e-15 * b);
        }
    }

    #[test]
    fn gauss_monitor_of_unit_h() {
        let grid = VelocityGrid::new(10.0, 40).unwrap();
        let w = WeightSpec::default();
        let f = MixtureState::homogeneous(StateMode::Perturbation, vec![grid.sample(|v| 1.0 / w.eval(v))]).unwrap();
        let g = gauss_monitor(&grid, &f, &w).unwrap();
        let exact = (2.0 * std::f64::consts::PI.sqrt()).powi(3);
        assert!((g[0] - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn conversions_round_trip() {
        let grid = VelocityGrid::new(6.0, 8).unwrap();
        let sp = species();
        let f = state_of(&grid, |i, v| sp[i].maxwellian(v) * (1.0 + 0.3 * (v[0] + i as f64).sin()));
        let p = to_perturbation(&sp, &grid, &f).unwrap();
        let back = to_physical(&sp, &grid, &p).unwrap();
        for (a, b) in back.iter().flatten().flatten().zip(f.cells().iter().flatten().flatten()) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1e-300));
        }
        assert!(matches!(to_perturbation(&sp, &grid, &p), Err(DiagnosticsError::Mode { .. })));
    }

    fn records(values: &[(f64, f64)]) -> Vec<DiagnosticsRecord> {
        values
            .iter()
            .map(|&(t, y)| DiagnosticsRecord {
                time: t,
                mass: vec![1.0],
                momentum: [0.0; 3],
                energy: 1.5,
                entropy: 0.0,
                rel_entropy: y,
                entropy_production: 0.0,
                winf_norm: vec![y],
                gauss_monitor: vec![y],
                rfreq_ratio: vec![1.0],
            })
            .collect()
    }

    #[test]
    fn decay_fit_exact_and_noisy() {
        let exact: Vec<(f64, f64)> = (0..40).map(|k| (0.25 * k as f64, 3.0 * (-0.7 * 0.25 * k as f64).exp())).collect();
        let fit = fit_decay_rate(&records(&exact), DecayField::Winf(0), (0.0, 100.0)).unwrap();
        assert!((fit.rate - 0.7).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy: Vec<(f64, f64)> = exact.iter().map(|&(t, y)| (t, y * (1.0 + 0.01 * rng.gen_range(-1.0..1.0)))).collect();
        let fit = fit_decay_rate(&records(&noisy), DecayField::WinfMax, (0.0, 100.0)).unwrap();
        assert!((fit.rate - 0.7).abs() < 0.05);
        assert!(matches!(
            fit_decay_rate(&records(&exact[..5]), DecayField::RelEntropy, (0.0, 100.0)),
            Err(DiagnosticsError::InsufficientSamples(5))
        ));
        let mut bad = exact.clone();
        bad[3].1 = 0.0;
        assert!(matches!(
            fit_decay_rate(&records(&bad), DecayField::Gauss(0), (0.0, 100.0)),
            Err(DiagnosticsError::NonPositiveSample { .. })
        ));
        assert!(matches!(
            fit_decay_rate(&records(&exact), DecayField::Winf(3), (0.0, 100.0)),
            Err(DiagnosticsError::FieldSpecies { index: 3, count: 1 })
        ));
    }

    #[test]
    fn csv_layout() {
        let h = DiagnosticsRecord::csv_header(2);
        assert_eq!(h.len(), 1 + 2 + 3 + 4 + 6);
        assert_eq!(h[0], "time");
        assert_eq!(h[3], "px");
        assert_eq!(h[h.len() - 1], "rfreq_2");
    }
}
