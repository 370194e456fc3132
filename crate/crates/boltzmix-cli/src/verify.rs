//! Property suites: reusable measurements plus the `verify` report.

use std::fmt::Write as _;

use boltzmix::collision::carleman::{compare_carleman, CarlemanReport, GainQuadrature, PairKernel};
use boltzmix::collision::{CollisionOperator, MixtureState, StateMode};
use boltzmix::diagnostics::{conserved_moments, entropy_splitting_check, quadrature_tolerance};
use boltzmix::linearized::{build_basis, l2_norm, project_pl, LinearizedOperator, Perturbation};
use boltzmix::model::{exponent_cancellation, sigma_map, vec3, KernelSpec, Species, Vec3};
use boltzmix::quadrature::{make_sphere_rule, sphere_average_exp, sphere_exp_closed_form, VelocityGrid};
use boltzmix::solver::{step_homogeneous, Scenario, StepConfig};
use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{PruningChoice, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Identities,
    Conservation,
    Spectral,
    Entropy,
    Carleman,
}

impl Suite {
    pub fn name(&self) -> &'static str {
        match self {
            Suite::Identities => "identities",
            Suite::Conservation => "conservation",
            Suite::Spectral => "spectral",
            Suite::Entropy => "entropy",
            Suite::Carleman => "carleman",
        }
    }

    pub fn parse(name: &str) -> Result<Self, CliError> {
        <Suite as ValueEnum>::from_str(name, true).map_err(|_| CliError::UnknownSuite(name.to_string()))
    }
}

/// One measured quantity against its limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    pub upper: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            limit,
            upper: true,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            limit,
            upper: false,
        }
    }

    pub fn passed(&self) -> bool {
        if self.upper {
            self.measured <= self.limit
        } else {
            self.measured >= self.limit
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Report {
    fn new(suite: Suite) -> Self {
        Self {
            suite,
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "suite {}", self.suite.name());
        for c in &self.checks {
            let rel = if c.upper { "<=" } else { ">=" };
            let _ = writeln!(
                s,
                "{} {:<44} {:>14.6e} {} {:.6e}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                rel,
                c.limit
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "note {n}");
        }
        let _ = writeln!(s, "result {}", if self.passed() { "pass" } else { "fail" });
        s
    }
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = vec3::norm(a);
        if n > 1e-3 && n <= 1.0 {
            return vec3::scale(1.0 / n, a);
        }
    }
}

fn cube(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    [rng.gen_range(-half..half), rng.gen_range(-half..half), rng.gen_range(-half..half)]
}

/// Largest |lhs - rhs| / max(|rhs|, 1) and largest rhs of the exponent identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CancellationStats {
    pub max_relative_error: f64,
    pub max_rhs: f64,
}

/// Draws v, v'_* in [-10, 10]^3 and masses in [0.2, 5]^2 with |m_i - m_j| >= 0.1.
pub fn cancellation_sweep(draws: usize, seed: u64) -> CancellationStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = CancellationStats {
        max_relative_error: 0.0,
        max_rhs: f64::NEG_INFINITY,
    };
    let mut done = 0;
    while done < draws {
        let mi: f64 = rng.gen_range(0.2..5.0);
        let mj = rng.gen_range(0.2..5.0);
        if (mi - mj).abs() < 0.1 {
            continue;
        }
        let v = cube(&mut rng, 10.0);
        let w = cube(&mut rng, 10.0);
        let (lhs, rhs) = exponent_cancellation(v, w, mi, mj).expect("distinct masses");
        stats.max_relative_error = stats.max_relative_error.max((lhs - rhs).abs() / rhs.abs().max(1.0));
        stats.max_rhs = stats.max_rhs.max(rhs);
        done += 1;
    }
    stats
}

/// Largest relative error of the sphere rule against 4 pi sinh(k|x|)/(k|x|),
/// over draws with k |x| <= 6.
pub fn sphere_rule_sweep(draws: usize, n_polar: usize, n_azimuth: usize, seed: u64) -> Result<f64, CliError> {
    let rule = make_sphere_rule(n_polar, n_azimuth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let k = rng.gen_range(0.01..3.0);
        let r = rng.gen_range(0.0..6.0 / k);
        let x = vec3::scale(r, unit(&mut rng));
        let q = sphere_average_exp(&rule, k, x)?;
        let e = sphere_exp_closed_form(k, x);
        worst = worst.max(((q - e) / e).abs());
    }
    Ok(worst)
}

/// Largest relative momentum and energy defect of the sigma map.
pub fn collision_map_sweep(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let mi: f64 = rng.gen_range(0.2..5.0);
        let mj = rng.gen_range(0.2..5.0);
        let v = cube(&mut rng, 10.0);
        let w = cube(&mut rng, 10.0);
        let (vp, wp) = sigma_map(mi, mj, v, w, unit(&mut rng));
        let e0 = mi * vec3::norm_sq(v) + mj * vec3::norm_sq(w);
        let e1 = mi * vec3::norm_sq(vp) + mj * vec3::norm_sq(wp);
        worst = worst.max((e0 - e1).abs() / e0);
        let p_scale = mi * vec3::norm(v) + mj * vec3::norm(w);
        for d in 0..3 {
            worst = worst.max(((mi * v[d] + mj * w[d]) - (mi * vp[d] + mj * wp[d])).abs() / p_scale);
        }
    }
    worst
}

/// Gaussian test functions for the gain comparison.
pub fn carleman_test_functions() -> (impl Fn(Vec3) -> f64 + Sync, impl Fn(Vec3) -> f64 + Sync) {
    let fi = |x: Vec3| (-vec3::norm_sq(vec3::sub(x, [0.3, -0.2, 0.1]))).exp();
    let fj = |x: Vec3| (-0.8 * vec3::norm_sq(vec3::sub(x, [-0.4, 0.5, 0.2]))).exp();
    (fi, fj)
}

/// Calibrates at v = 0 and compares at `points` random v with |v| <= 2.
pub fn carleman_sweep(
    species: &[Species],
    gamma: f64,
    points: usize,
    seed: u64,
    quad: &GainQuadrature,
) -> Result<CarlemanReport, CliError> {
    let n = species.len();
    let kernel = KernelSpec::uniform(n, gamma)?;
    let pair = PairKernel::new(species, &kernel, 0, 1.min(n - 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec3> = (0..points)
        .map(|_| vec3::scale(rng.gen_range(0.0..2.0), unit(&mut rng)))
        .collect();
    let (fi, fj) = carleman_test_functions();
    Ok(compare_carleman(&pair, &fi, &fj, [0.0; 3], &pts, quad, 8.0)?)
}

/// Species drifting at +-u with u off every axis, so every invariant is active.
pub fn drifting_state(species: &[Species], grid: &VelocityGrid, u: Vec3) -> MixtureState {
    let cells = species
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            grid.sample(|v| s.maxwellian(vec3::lin(1.0, v, -sign, u)))
        })
        .collect();
    MixtureState::homogeneous(StateMode::Physical, cells).expect("nonnegative")
}

/// Relative weak-form residual |int psi Q| / int |psi Q| per invariant.
pub fn weak_form_relative(op: &CollisionOperator, state: &MixtureState) -> Result<Vec<f64>, CliError> {
    let w = op.weak_form(state, 0)?;
    Ok(w.residual.iter().zip(&w.scale).map(|(r, s)| r.abs() / s).collect())
}

/// Largest per-step relative moment drift over `steps` solver steps.
pub fn solver_drift(op: &CollisionOperator, initial: &MixtureState, cfg: &StepConfig, steps: usize) -> Result<f64, CliError> {
    let sp = op.species();
    let grid = op.grid();
    let mut state = initial.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let before = conserved_moments(sp, grid, &state)?;
        state = step_homogeneous(op, &state, cfg)?;
        let after = conserved_moments(sp, grid, &state)?;
        worst = worst.max(after.relative_drift(&before, sp));
    }
    Ok(worst)
}

/// Smooth perturbation sqrt(mu_i) times a random quadratic plus damped waves.
pub fn random_perturbation(op: &CollisionOperator, rng: &mut ChaCha8Rng) -> Perturbation {
    let grid = op.grid();
    (0..op.species_count())
        .map(|i| {
            let c: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = cube(rng, 1.2);
            let ph = rng.gen_range(0.0..std::f64::consts::TAU);
            let s = op.sqrt_maxwellian(i);
            let vals = grid.sample(|v| {
                let quad = c[0]
                    + c[1] * v[0]
                    + c[2] * v[1]
                    + c[3] * v[2]
                    + c[4] * v[0] * v[1]
                    + c[5] * v[1] * v[2]
                    + c[6] * (v[0] * v[0] - v[2] * v[2]);
                quad + c[7] * (vec3::dot(k, v) + ph).cos() * (-vec3::norm_sq(v) / 8.0).exp()
            });
            vals.iter().zip(s).map(|(a, b)| a * b).collect()
        })
        .collect()
}

/// Grid size of the basis Gram check.
pub const GRAM_POINTS: usize = 32;
/// Smallest half-width of that grid; narrower boxes cut off the energy moments.
pub const GRAM_HALF_WIDTH: f64 = 8.0;

/// Pair pruning drops whole energy shells and so zeroes the frequency far
/// out; the linearized checks keep every partner up to the cutoff instead.
pub fn unpruned_pairs(config: &RunConfig) -> RunConfig {
    let mut c = config.clone();
    if c.collision.pruning == PruningChoice::Pair {
        c.collision.pruning = PruningChoice::Partner;
    }
    c
}

fn with_config_operator(config: &RunConfig) -> Result<CollisionOperator, CliError> {
    let r = config.resolve()?;
    r.operator(config)
}

/// Runs one suite against the configuration.
pub fn run_suite(suite: Suite, config: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new(suite);
    let seed = config.run.seed;
    match suite {
        Suite::Identities => {
            let c = cancellation_sweep(100_000, seed);
            report.checks.push(Check::at_most("cancellation max relative error", c.max_relative_error, 1e-12));
            report.checks.push(Check::at_most("cancellation max rhs", c.max_rhs, 0.0));
            let s = sphere_rule_sweep(100, 32, 32, seed)?;
            report.checks.push(Check::at_most("sphere rule max relative error", s, 1e-8));
            let m = collision_map_sweep(10_000, seed);
            report.checks.push(Check::at_most("collision map conservation defect", m, 1e-13));
        }
        Suite::Conservation => {
            let coarse = with_config_operator(config)?;
            let mut fine_cfg = config.clone();
            fine_cfg.grid.points *= 2;
            let fine = with_config_operator(&fine_cfg)?;
            let u = [0.4, -0.25, 0.15];
            let rc = weak_form_relative(&coarse, &drifting_state(coarse.species(), coarse.grid(), u))?;
            let rf = weak_form_relative(&fine, &drifting_state(fine.species(), fine.grid(), u))?;
            let n = config.grid.points;
            for (k, (a, b)) in rc.iter().zip(&rf).enumerate() {
                report.notes.push(format!("invariant {k}: residual {a:.3e} at {n}^3, {b:.3e} at {}^3", 2 * n));
                report.checks.push(Check::at_least(format!("weak-form shrink, invariant {k}"), a / b, 4.0));
            }
            let nu = boltzmix::linearized::build_nu(&coarse);
            let cfg = config.step_config(nu.max_value())?;
            let state = drifting_state(coarse.species(), coarse.grid(), u);
            let d = solver_drift(&coarse, &state, &cfg, 20)?;
            report.checks.push(Check::at_most("per-step moment drift with fix", d, 1e-12));
        }
        Suite::Spectral => {
            let op = with_config_operator(&unpruned_pairs(config))?;
            let lin = LinearizedOperator::new(&op);
            let eps = quadrature_tolerance(&op, lin.frequency())?;
            report.notes.push(format!("quadrature tolerance {eps:.3e}"));
            let fine = VelocityGrid::new(config.grid.half_width.max(GRAM_HALF_WIDTH), GRAM_POINTS)?;
            let gram = build_basis(op.species(), &fine)?.orthonormality_defect();
            report.checks.push(Check::at_most(format!("Gram defect at {GRAM_POINTS}^3"), gram, 1e-6));
            let basis = build_basis(op.species(), op.grid())?;
            let worst = basis
                .vectors
                .iter()
                .map(|phi| lin.apply_l(phi).map(|l| l2_norm(op.grid(), &l)))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .fold(0.0, f64::max);
            report.checks.push(Check::at_most("max ||L phi_k||", worst, 10.0 * eps));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dirichlet: f64 = f64::NEG_INFINITY;
            let mut micro: f64 = f64::NEG_INFINITY;
            for _ in 0..10 {
                let f = random_perturbation(&op, &mut rng);
                dirichlet = dirichlet.max(lin.coercivity_probe(&f, &basis)?.dirichlet);
                let (_, m) = project_pl(op.grid(), &f, &basis);
                micro = micro.max(lin.coercivity_probe(&m, &basis)?.dirichlet);
            }
            report.checks.push(Check::at_most("max <f, L f>", dirichlet, eps));
            report.checks.push(Check::at_most("max <f, L f>, micro part", micro, -eps));
            let env = lin.frequency().envelope(op.grid(), op.kernel().gamma());
            for (i, (lo, hi)) in env.iter().enumerate() {
                report.notes.push(format!("species {i}: nu / (1 + |v|)^gamma in [{lo:.4e}, {hi:.4e}]"));
                report.checks.push(Check::at_least(format!("nu envelope lower bound, species {i}"), *lo, f64::MIN_POSITIVE));
            }
        }
        Suite::Entropy => {
            let op = with_config_operator(config)?;
            let nu = boltzmix::linearized::build_nu(&op);
            let eps = quadrature_tolerance(&op, &nu)?;
            report.notes.push(format!("quadrature tolerance {eps:.3e}"));
            let sp = op.species();
            let grid = op.grid();
            let mut d_max: f64 = f64::NEG_INFINITY;
            let mut split: f64 = f64::NEG_INFINITY;
            for k in 0..10 {
                let s = Scenario::RandomSmooth { amplitude: 1.0 }.homogeneous(sp, grid, seed + k)?;
                d_max = d_max.max(op.entropy_production(&s, 0)?);
                let c = entropy_splitting_check(sp, grid, &s)?;
                split = split.max(c.lhs - c.rhs);
            }
            report.checks.push(Check::at_most("max D on random states", d_max, eps));
            report.checks.push(Check::at_most("max splitting lhs - rhs", split, eps));
            let bi = drifting_state(sp, grid, [0.8, 0.0, 0.0]);
            let d_bi = op.entropy_production(&bi, 0)?;
            report.checks.push(Check::at_most("D on bi-Maxwellian / tolerance", d_bi / eps, -10.0));
        }
        Suite::Carleman => {
            let r = config.resolve()?;
            let rep = carleman_sweep(&r.species, r.kernel.gamma(), 5, seed, &GainQuadrature::default())?;
            report.notes.push(format!(
                "calibrated constant {:.8e}, derived {:.8e}",
                rep.calibrated_constant, rep.derived_constant
            ));
            report.checks.push(Check::at_most("Carleman vs direct max relative error", rep.max_relative_error, 1e-3));
        }
    }
    Ok(report)
}
