//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use boltzmix::collision::carleman::GainQuadrature;
use boltzmix::collision::{CollisionOperator, MixtureState, Pruning};
use boltzmix::diagnostics::{
    conserved_moments, entropy_splitting_check, fit_decay_rate, quadrature_tolerance, DecayField, DiagnosticsRecord, Recorder,
};
use boltzmix::linearized::{build_basis, build_nu_with, l2_norm, project_pl, LinearizedOperator};
use boltzmix::model::Species;
use boltzmix::quadrature::VelocityGrid;
use boltzmix::solver::{run_observed, step_homogeneous, Scenario, StepConfig};
use boltzmix_cli::config::{PruningChoice, RunConfig};
use boltzmix_cli::verify::{
    cancellation_sweep, carleman_sweep, drifting_state, random_perturbation, solver_drift, sphere_rule_sweep, weak_form_relative,
    GRAM_HALF_WIDTH, GRAM_POINTS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_611;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn small_config(half_width: f64, points: usize, gamma: f64, pruning: PruningChoice) -> RunConfig {
    let mut c = RunConfig::default();
    c.grid.half_width = half_width;
    c.grid.points = points;
    c.kernel.gamma = gamma;
    c.collision.pruning = pruning;
    c
}

fn operator(c: &RunConfig) -> CollisionOperator {
    let r = c.resolve().expect("valid config");
    r.operator(c).expect("operator")
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let s = cancellation_sweep(100_000, SEED);
    let e = t.elapsed();
    outcome(
        s.max_relative_error <= 1e-12 && s.max_rhs <= 0.0 && within(e, 1.0),
        format!("max rel err {:.2e}, max rhs {:.2e}, {:.2}s", s.max_relative_error, s.max_rhs, e.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let err = sphere_rule_sweep(100, 32, 32, SEED).expect("sphere rule");
    let e = t.elapsed();
    outcome(err <= 1e-8 && within(e, 1.0), format!("max rel err {err:.2e}, {:.3}s", e.as_secs_f64()))
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let species = vec![Species::new(1.0, 1.0).unwrap(), Species::new(2.0, 0.5).unwrap()];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for gamma in [0.0, 1.0] {
        let r = carleman_sweep(&species, gamma, 20, SEED, &GainQuadrature::default()).expect("carleman");
        worst = worst.max(r.max_relative_error);
        parts.push(format!(
            "gamma {gamma}: {:.2e} (C {:.5} vs {:.5})",
            r.max_relative_error, r.calibrated_constant, r.derived_constant
        ));
    }
    let e = t.elapsed();
    outcome(worst <= 1e-3 && within(e, 60.0), format!("{}, {:.1}s", parts.join("; "), e.as_secs_f64()))
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let u = [0.4, -0.25, 0.15];
    let coarse = operator(&small_config(8.0, 16, 0.0, PruningChoice::Pair));
    let fine = operator(&small_config(8.0, 32, 0.0, PruningChoice::Pair));
    let rc = weak_form_relative(&coarse, &drifting_state(coarse.species(), coarse.grid(), u)).unwrap();
    let rf = weak_form_relative(&fine, &drifting_state(fine.species(), fine.grid(), u)).unwrap();
    let shrink: Vec<f64> = rc.iter().zip(&rf).map(|(a, b)| a / b).collect();
    let min_shrink = shrink.iter().copied().fold(f64::INFINITY, f64::min);
    let state = drifting_state(coarse.species(), coarse.grid(), u);
    let cfg = StepConfig::new(0.05).unwrap();
    let drift = solver_drift(&coarse, &state, &cfg, 200).unwrap();
    let e = t.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1e}")).collect::<Vec<_>>().join(" ");
    outcome(
        min_shrink >= 4.0 && drift <= 1e-12 && within(e, 600.0),
        format!(
            "residuals 16^3 [{}] 32^3 [{}], min shrink {min_shrink:.1}x; max per-step drift {drift:.1e} over 200 steps; {:.0}s",
            fmt(&rc),
            fmt(&rf),
            e.as_secs_f64()
        ),
    )
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let op = operator(&small_config(5.0, 8, 0.0, PruningChoice::Pair));
    let nu = build_nu_with(&op, op.settings().pruning);
    let eps = quadrature_tolerance(&op, &nu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut d_max = f64::NEG_INFINITY;
    for k in 0..100 {
        let amplitude = rng.gen_range(0.1..2.0);
        let s = Scenario::RandomSmooth { amplitude }.homogeneous(op.species(), op.grid(), SEED + k).unwrap();
        d_max = d_max.max(op.entropy_production(&s, 0).unwrap());
    }
    let bi = drifting_state(op.species(), op.grid(), [0.8, 0.0, 0.0]);
    let d_bi = op.entropy_production(&bi, 0).unwrap();
    let eq_op = operator(&small_config(8.0, 24, 0.0, PruningChoice::Pair));
    let tally = eq_op.tally(&eq_op.equilibrium(), 0).unwrap();
    let mut q_rel: f64 = 0.0;
    for (g, l) in tally.gain.iter().zip(&tally.loss) {
        for (a, b) in g.iter().zip(l) {
            if *b > 0.0 {
                q_rel = q_rel.max((a - b).abs() / b);
            }
        }
    }
    let e = t.elapsed();
    outcome(
        d_max <= eps && d_bi < -10.0 * eps && q_rel <= 1e-3 && within(e, 300.0),
        format!(
            "eps_quad {eps:.2e}; max D(F) {d_max:.2e}; D(bi-Maxwellian) {d_bi:.2e}; max |Q(mu,mu)|/loss at 24^3 {q_rel:.1e}; {:.0}s",
            e.as_secs_f64()
        ),
    )
}

/// Splitting slack max(lhs - rhs - eps) over random states and preset trajectories.
fn criterion_6(presets: &[PresetRun]) -> Outcome {
    let t = Instant::now();
    let c = small_config(5.0, 8, 0.0, PruningChoice::Pair);
    let op = operator(&c);
    let nu = build_nu_with(&op, op.settings().pruning);
    let eps = quadrature_tolerance(&op, &nu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    let mut random_slack = f64::NEG_INFINITY;
    for k in 0..1000 {
        let scenario = match k % 3 {
            0 => Scenario::RandomSmooth { amplitude: rng.gen_range(0.1..2.0) },
            1 => Scenario::LargeAmplitude {
                amplitude: rng.gen_range(0.1..0.99),
                shell_radius: rng.gen_range(1.0..4.0),
                shell_width: rng.gen_range(0.3..1.5),
            },
            _ => Scenario::TwoSpeciesRelax { amplitude: rng.gen_range(0.01..0.5) },
        };
        let s = scenario.homogeneous(op.species(), op.grid(), SEED + k).unwrap();
        let check = entropy_splitting_check(op.species(), op.grid(), &s).unwrap();
        random_slack = random_slack.max(check.lhs - check.rhs - eps);
    }
    let e = t.elapsed() + presets.iter().map(|p| p.splitting_time).sum::<Duration>();
    let preset_slack = presets.iter().map(|p| p.splitting_slack).fold(f64::NEG_INFINITY, f64::max);
    let steps: usize = presets.iter().map(|p| p.steps).sum();
    outcome(
        random_slack <= 0.0 && preset_slack <= 0.0 && within(e, 300.0),
        format!(
            "max lhs - rhs - eps: {random_slack:.2e} on 1000 random states, {preset_slack:.2e} over {steps} preset states; {:.1}s",
            e.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for gamma in [0.0, 0.5, 1.0] {
        let op = operator(&small_config(6.0, 16, gamma, PruningChoice::Partner));
        let nu = build_nu_with(&op, Pruning::Partner(50.0));
        for (i, (lo, hi)) in nu.envelope(op.grid(), gamma).iter().enumerate() {
            pass &= *lo > 0.0 && hi.is_finite();
            parts.push(format!("g{gamma} s{}: [{lo:.3}, {hi:.3}]", i + 1));
        }
    }
    let op = operator(&small_config(6.0, 24, 0.0, PruningChoice::Partner));
    let nu = build_nu_with(&op, Pruning::Partner(50.0));
    let mut maxwell_err: f64 = 0.0;
    for rows in &nu.pair {
        for (j, row) in rows.iter().enumerate() {
            let exact = 2.0 * std::f64::consts::PI * op.species()[j].density();
            maxwell_err = row.iter().map(|x| ((x - exact) / exact).abs()).fold(maxwell_err, f64::max);
        }
    }
    pass &= maxwell_err <= 1e-6;
    outcome(
        pass,
        format!(
            "nu/(1+|v|)^gamma bands {}; Maxwell nu_ij vs 2 pi n_j max rel err {maxwell_err:.1e}; {:.0}s",
            parts.join(", "),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let op = operator(&small_config(5.0, 8, 0.0, PruningChoice::Partner));
    let lin = LinearizedOperator::new(&op);
    let eps = quadrature_tolerance(&op, lin.frequency()).unwrap();
    let basis = build_basis(op.species(), op.grid()).unwrap();
    let kernel = basis
        .vectors
        .iter()
        .map(|phi| l2_norm(op.grid(), &lin.apply_l(phi).unwrap()))
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 8);
    let mut full = f64::NEG_INFINITY;
    let mut micro = f64::NEG_INFINITY;
    for _ in 0..100 {
        let f = random_perturbation(&op, &mut rng);
        full = full.max(lin.coercivity_probe(&f, &basis).unwrap().dirichlet);
        let (_, m) = project_pl(op.grid(), &f, &basis);
        micro = micro.max(lin.coercivity_probe(&m, &basis).unwrap().dirichlet);
    }
    let fine = VelocityGrid::new(GRAM_HALF_WIDTH, GRAM_POINTS).unwrap();
    let gram = build_basis(op.species(), &fine).unwrap().orthonormality_defect();
    outcome(
        kernel <= 10.0 * eps && full <= eps && micro < -eps && gram <= 1e-6,
        format!(
            "eps_quad {eps:.2e}; max ||L phi_k|| {kernel:.2e}; max <f,Lf> {full:.2e}; max micro <f,Lf> {micro:.2e}; Gram defect {gram:.1e} at {GRAM_POINTS}^3; {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

struct PresetRun {
    name: &'static str,
    records: Vec<DiagnosticsRecord>,
    fit_window: (f64, f64),
    eps: f64,
    min_value: f64,
    steps: usize,
    splitting_slack: f64,
    splitting_time: Duration,
    elapsed: Duration,
}

fn run_preset(name: &'static str) -> PresetRun {
    let t = Instant::now();
    let config = RunConfig::preset(name).unwrap();
    let r = config.resolve().unwrap();
    let op = r.operator(&config).unwrap();
    let recorder = Recorder::new(&op, r.weight.clone());
    let eps = quadrature_tolerance(&op, recorder.frequency()).unwrap();
    let cfg = config.step_config(recorder.frequency().max_value()).unwrap();
    let initial = r.scenario.homogeneous(&r.species, &r.grid, config.run.seed).unwrap();
    let mut min_value = f64::INFINITY;
    let mut steps = 0;
    let mut slack = f64::NEG_INFINITY;
    let mut splitting_time = Duration::ZERO;
    let traj = run_observed(&op, &recorder, &initial, &cfg, None, config.run.t_end, config.run.sample_every, |_, _, s| {
        min_value = min_value.min(s.min_value());
        steps += 1;
        let ts = Instant::now();
        let c = entropy_splitting_check(op.species(), op.grid(), s)?;
        splitting_time += ts.elapsed();
        slack = slack.max(c.lhs - c.rhs - eps);
        Ok(())
    })
    .unwrap();
    PresetRun {
        name,
        records: traj.records,
        fit_window: config.fit_window(),
        eps,
        min_value,
        steps,
        splitting_slack: slack,
        splitting_time,
        elapsed: t.elapsed(),
    }
}

fn monotone_entropy(p: &PresetRun) -> (bool, f64) {
    let worst = p
        .records
        .windows(2)
        .map(|w| w[1].rel_entropy - w[0].rel_entropy)
        .fold(f64::NEG_INFINITY, f64::max);
    (worst <= p.eps, worst)
}

fn criterion_9(small: &PresetRun, large: &PresetRun) -> Outcome {
    let (mono_s, inc_s) = monotone_entropy(small);
    let fit = fit_decay_rate(&small.records, DecayField::WinfMax, small.fit_window).unwrap();
    let (mono_l, inc_l) = monotone_entropy(large);
    let transient = large.fit_window.0;
    let monitor = large
        .records
        .iter()
        .filter(|r| r.time >= transient)
        .flat_map(|r| r.rfreq_ratio.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let first = &large.records[0];
    let winf0 = first.winf_norm.iter().copied().fold(0.0, f64::max);
    let monitor0 = first.rfreq_ratio.iter().copied().fold(f64::INFINITY, f64::min);
    let elapsed = small.elapsed + large.elapsed;
    outcome(
        mono_s && fit.r_squared >= 0.99 && mono_l && large.min_value >= 0.0 && monitor > 0.5 && within(elapsed, 1200.0),
        format!(
            "{}: max rel-entropy increase {inc_s:.1e}, |wf| rate {:.3} r2 {:.5} on [{}, {}]; {}: |wf0| {winf0:.2}, E0 {:.2e}, min F {:.2e}, max rel-entropy increase {inc_l:.1e}, R/nu {monitor0:.4} at t=0 and >= {monitor:.4} after t={transient}; {:.0}s",
            small.name,
            fit.rate,
            fit.r_squared,
            small.fit_window.0,
            small.fit_window.1,
            large.name,
            first.rel_entropy,
            large.min_value,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_10(presets: &[PresetRun]) -> Outcome {
    let t = Instant::now();
    let op = operator(&small_config(5.0, 8, 0.0, PruningChoice::Pair));
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 10);
    let mut min_value = f64::INFINITY;
    let mut drift: f64 = 0.0;
    for k in 0..50 {
        let dt = 10f64.powf(rng.gen_range(-3.0..1.0));
        let scenario = match k % 3 {
            0 => Scenario::LargeAmplitude {
                amplitude: rng.gen_range(0.5..0.999),
                shell_radius: rng.gen_range(1.0..4.0),
                shell_width: rng.gen_range(0.3..1.0),
            },
            1 => Scenario::RandomSmooth { amplitude: rng.gen_range(0.5..3.0) },
            _ => Scenario::BiMaxwellian { drift: rng.gen_range(0.0..2.5) },
        };
        let mut s: MixtureState = scenario.homogeneous(op.species(), op.grid(), SEED + k).unwrap();
        let m0 = conserved_moments(op.species(), op.grid(), &s).unwrap();
        let cfg = StepConfig::new(dt).unwrap();
        for _ in 0..3 {
            s = step_homogeneous(&op, &s, &cfg).unwrap();
            min_value = min_value.min(s.min_value());
        }
        let m1 = conserved_moments(op.species(), op.grid(), &s).unwrap();
        drift = drift.max(m1.relative_drift(&m0, op.species()));
    }
    let preset_min = presets.iter().map(|p| p.min_value).fold(f64::INFINITY, f64::min);
    outcome(
        min_value >= 0.0 && preset_min >= 0.0,
        format!(
            "min F {min_value:.2e} over 50 fuzz runs (dt log-uniform in [1e-3, 10], drift {drift:.1e}); min F {preset_min:.2e} over presets; {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string() || f == "acceptance");
    let needs_presets = wanted(6) || wanted(9) || wanted(10);
    let presets = if needs_presets {
        vec![run_preset("two_species_relax"), run_preset("large_amplitude")]
    } else {
        Vec::new()
    };
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "cancellation identity", Box::new(criterion_1)),
        (2, "sphere integral", Box::new(criterion_2)),
        (3, "Carleman vs direct gain", Box::new(criterion_3)),
        (4, "conservation and refinement", Box::new(criterion_4)),
        (5, "H-theorem and equilibrium", Box::new(criterion_5)),
        (6, "relative-entropy splitting", Box::new(|| criterion_6(&presets))),
        (7, "collision frequency envelope", Box::new(criterion_7)),
        (8, "kernel of L and coercivity sign", Box::new(criterion_8)),
        (9, "relaxation dynamics", Box::new(|| criterion_9(&presets[0], &presets[1]))),
        (10, "positivity", Box::new(|| criterion_10(&presets))),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted(n) {
            continue;
        }
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
