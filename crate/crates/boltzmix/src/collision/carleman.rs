//! Gain integrals of analytic test functions, in the sigma form and in the
//! Carleman form over the sphere `E(v, v'_*)`, plus the decay probe
//! `I(v) = int |m_i v - m_j y|^{-5/2} (1 + |y|)^{-1} dy`.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::CollisionError;
use crate::model::{carleman_sphere, sigma_map, vec3, AngularProfile, CarlemanSphere, KernelSpec, ModelError, Species, Vec3};
use crate::quadrature::{gauss_legendre, make_sphere_rule, pairwise_sum, SphereRule};

/// Kernel data of one ordered species pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairKernel {
    pub m_i: f64,
    pub m_j: f64,
    pub c_phi: f64,
    pub gamma: f64,
    pub angular: AngularProfile,
}

impl PairKernel {
    pub fn new(species: &[Species], kernel: &KernelSpec, i: usize, j: usize) -> Result<Self, ModelError> {
        let count = species.len();
        for index in [i, j] {
            if index >= count || index >= kernel.species_count() {
                return Err(ModelError::SpeciesIndex { index, count });
            }
        }
        Ok(Self {
            m_i: species[i].mass(),
            m_j: species[j].mass(),
            c_phi: kernel.c_phi(i, j),
            gamma: kernel.gamma(),
            angular: kernel.angular(),
        })
    }

    #[inline]
    fn speed(&self, s: f64) -> f64 {
        if self.gamma == 0.0 {
            1.0
        } else {
            s.powf(self.gamma)
        }
    }
}

/// Node counts for the analytic gain integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GainQuadrature {
    pub radial: usize,
    pub outer_polar: usize,
    pub outer_azimuth: usize,
    pub inner_polar: usize,
    pub inner_azimuth: usize,
}

impl Default for GainQuadrature {
    fn default() -> Self {
        Self {
            radial: 40,
            outer_polar: 12,
            outer_azimuth: 24,
            inner_polar: 24,
            inner_azimuth: 32,
        }
    }
}

/// Constant of the Carleman form for masses (m_i, m_j): ((m_i + m_j) / m_j)^2.
pub fn carleman_constant(m_i: f64, m_j: f64) -> f64 {
    ((m_i + m_j) / m_j).powi(2)
}

/// Polar value s.a at which cos(theta) vanishes on the Carleman sphere, with
/// `a` the unit vector from v'_* to v.
pub fn kink_polar(m_i: f64, m_j: f64) -> f64 {
    -(m_i - m_j).signum() * 2.0 * m_i * m_j / (m_i * m_i + m_j * m_j)
}

/// sigma-form gain `int dv_* int dsigma B f_i(v') f_j(v'_*)` with v_* = v - r omega, r <= r_max.
pub fn direct_gain<F, G>(pair: &PairKernel, f_i: &F, f_j: &G, v: Vec3, quad: &GainQuadrature, r_max: f64) -> Result<f64, CollisionError>
where
    F: Fn(Vec3) -> f64 + Sync,
    G: Fn(Vec3) -> f64 + Sync,
{
    let outer = make_sphere_rule(quad.outer_polar, quad.outer_azimuth)?;
    let inner = make_sphere_rule(quad.inner_polar, quad.inner_azimuth)?;
    let radial = gauss_legendre(quad.radial, 0.0, r_max);
    let terms: Vec<f64> = radial
        .par_iter()
        .map(|&(r, wr)| {
            let mut shell = 0.0;
            for (omega, wo) in outer.nodes().iter().zip(outer.weights()) {
                let v_star = vec3::lin(1.0, v, -r, *omega);
                let s = inner.integrate_about(*omega, |sigma| {
                    let (vp, vsp) = sigma_map(pair.m_i, pair.m_j, v, v_star, sigma);
                    pair.angular.value(vec3::dot(sigma, *omega)) * f_i(vp) * f_j(vsp)
                });
                shell += wo * s;
            }
            wr * r * r * pair.speed(r) * shell
        })
        .collect();
    Ok(pair.c_phi * pairwise_sum(&terms))
}

/// Carleman-form gain with constant `constant`:
/// `C int dv'_* |v - v'_*|^{-1} f_j(v'_*) int_E B / |u'| f_i(v') dE`,
/// with v'_* = v - rho omega, rho <= rho_max.
#[allow(clippy::too_many_arguments)]
pub fn carleman_gain<F, G>(
    pair: &PairKernel,
    f_i: &F,
    f_j: &G,
    v: Vec3,
    quad: &GainQuadrature,
    rho_max: f64,
    constant: f64,
) -> Result<f64, CollisionError>
where
    F: Fn(Vec3) -> f64 + Sync,
    G: Fn(Vec3) -> f64 + Sync,
{
    let (m_i, m_j) = (pair.m_i, pair.m_j);
    if crate::model::masses_coincide(m_i, m_j) {
        return Err(ModelError::DegenerateMasses(m_i, m_j).into());
    }
    let outer = make_sphere_rule(quad.outer_polar, quad.outer_azimuth)?;
    let inner = SphereRule::with_polar_angle_split(quad.inner_polar, quad.inner_azimuth, kink_polar(m_i, m_j))?;
    let radial = gauss_legendre(quad.radial, 0.0, rho_max);
    let ratio = m_i / m_j;
    let terms: Vec<f64> = radial
        .par_iter()
        .map(|&(rho, wr)| {
            let mut shell = 0.0;
            for (omega, wo) in outer.nodes().iter().zip(outer.weights()) {
                let vsp = vec3::lin(1.0, v, -rho, *omega);
                let fj = f_j(vsp);
                if fj == 0.0 {
                    continue;
                }
                let (center, radius) = match carleman_sphere(v, vsp, m_i, m_j) {
                    CarlemanSphere::Sphere { center, radius } => (center, radius),
                    CarlemanSphere::Hyperplane => unreachable!("masses checked above"),
                };
                let s = inner.integrate_about(*omega, |dir| {
                    let vp = vec3::lin(1.0, center, radius, dir);
                    let big_v = vec3::lin(1.0, vsp, ratio, vec3::sub(vp, v));
                    let u = vec3::sub(v, big_v);
                    let z = vec3::sub(vp, vsp);
                    let (nu, nz) = (vec3::norm(u), vec3::norm(z));
                    if nz == 0.0 || nu == 0.0 {
                        return 0.0;
                    }
                    let cos = vec3::dot(u, z) / (nu * nz);
                    pair.speed(nu) * pair.angular.value(cos) / nz * f_i(vp)
                });
                shell += wo * fj * radius * radius * s;
            }
            wr * rho * shell
        })
        .collect();
    Ok(constant * pair.c_phi * pairwise_sum(&terms))
}

/// Outcome of the Carleman-versus-direct comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanReport {
    pub calibration_point: Vec3,
    pub calibrated_constant: f64,
    pub derived_constant: f64,
    /// (point, direct value, calibrated Carleman value)
    pub samples: Vec<(Vec3, f64, f64)>,
    pub max_relative_error: f64,
}

/// Calibrates the Carleman constant at one point and compares both forms at
/// the others. Integration radii are `radius_pad` beyond |v|.
pub fn compare_carleman<F, G>(
    pair: &PairKernel,
    f_i: &F,
    f_j: &G,
    calibration_point: Vec3,
    points: &[Vec3],
    quad: &GainQuadrature,
    radius_pad: f64,
) -> Result<CarlemanReport, CollisionError>
where
    F: Fn(Vec3) -> f64 + Sync,
    G: Fn(Vec3) -> f64 + Sync,
{
    let reach = |v: Vec3| vec3::norm(v) + radius_pad;
    let d0 = direct_gain(pair, f_i, f_j, calibration_point, quad, reach(calibration_point))?;
    let c0 = carleman_gain(pair, f_i, f_j, calibration_point, quad, reach(calibration_point), 1.0)?;
    let calibrated = d0 / c0;
    let mut samples = Vec::with_capacity(points.len());
    let mut worst: f64 = 0.0;
    for &p in points {
        let d = direct_gain(pair, f_i, f_j, p, quad, reach(p))?;
        let c = calibrated * carleman_gain(pair, f_i, f_j, p, quad, reach(p), 1.0)?;
        worst = worst.max(((c - d) / d).abs());
        samples.push((p, d, c));
    }
    Ok(CarlemanReport {
        calibration_point,
        calibrated_constant: calibrated,
        derived_constant: carleman_constant(pair.m_i, pair.m_j),
        samples,
        max_relative_error: worst,
    })
}

/// Closed form of `int_{S^2} dw / (1 + |c + rho w|)` with |c| = c.
fn shell_average(c: f64, rho: f64) -> f64 {
    if c * rho < 1e-300 || rho < 1e-9 * c || c < 1e-9 * rho {
        let q = c.max(rho);
        return 4.0 * PI / (1.0 + q);
    }
    // (2 pi / (c rho)) [F(c + rho) - F(|c - rho|)], F(q) = q - ln(1 + q)
    let hi = c + rho;
    let lo = (c - rho).abs();
    let diff = (hi - lo) - ((1.0 + hi) / (1.0 + lo)).ln();
    2.0 * PI / (c * rho) * diff
}

/// `I(v) = int |m_i v - m_j y|^{-5/2} (1 + |y|)^{-1} dy`.
///
/// With y = (m_i/m_j) v + s^2 w the singularity disappears:
/// `I = 2 m_j^{-5/2} int_0^inf ds int dw 1 / (1 + |c + s^2 w|)`; then
/// s = t / (1 - t) maps the half line to [0, 1).
pub fn decay_integral(m_i: f64, m_j: f64, v: Vec3, nodes: usize) -> f64 {
    let c = m_i / m_j * vec3::norm(v);
    let integrand = |t: f64| {
        let s = t / (1.0 - t);
        shell_average(c, s * s) / ((1.0 - t) * (1.0 - t))
    };
    // split where s^2 = c (cusp of |c + s^2 w|)
    let sk = c.sqrt();
    let tk = sk / (1.0 + sk);
    let mut total = 0.0;
    let pieces: Vec<(f64, f64)> = if tk > 1e-12 {
        vec![(0.0, tk), (tk, 1.0)]
    } else {
        vec![(0.0, 1.0)]
    };
    for (a, b) in pieces {
        total += gauss_legendre(nodes, a, b)
            .iter()
            .map(|&(t, w)| w * integrand(t))
            .sum::<f64>();
    }
    2.0 * m_j.powf(-2.5) * total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(center: Vec3, alpha: f64) -> impl Fn(Vec3) -> f64 + Sync {
        move |x| (-alpha * vec3::norm_sq(vec3::sub(x, center))).exp()
    }

    fn pair(gamma: f64) -> PairKernel {
        PairKernel {
            m_i: 1.0,
            m_j: 2.0,
            c_phi: 1.0,
            gamma,
            angular: AngularProfile::AbsCos,
        }
    }

    #[test]
    fn kink_position_for_mass_ratio_two() {
        assert!((kink_polar(1.0, 2.0) - 0.8).abs() < 1e-15);
        assert!((kink_polar(2.0, 1.0) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn derived_constant_reproduces_direct_form() {
        let fi = gaussian([0.3, -0.2, 0.1], 1.0);
        let fj = gaussian([-0.4, 0.5, 0.2], 1.0);
        let quad = GainQuadrature::default();
        for gamma in [0.0, 1.0] {
            let p = pair(gamma);
            let v = [0.5, 0.2, -0.3];
            let d = direct_gain(&p, &fi, &fj, v, &quad, 9.0).unwrap();
            let c = carleman_gain(&p, &fi, &fj, v, &quad, 9.0, carleman_constant(1.0, 2.0)).unwrap();
            assert!(((c - d) / d).abs() < 1e-4, "gamma {gamma}: {d} {c}");
        }
    }

    #[test]
    fn far_support_gives_zero() {
        let fi = |x: Vec3| if vec3::norm(vec3::sub(x, [40.0, 0.0, 0.0])) < 1.0 { 1.0 } else { 0.0 };
        let fj = |x: Vec3| if vec3::norm(vec3::sub(x, [-40.0, 0.0, 0.0])) < 1.0 { 1.0 } else { 0.0 };
        let quad = GainQuadrature { radial: 8, ..Default::default() };
        let g = carleman_gain(&pair(0.0), &fi, &fj, [0.0; 3], &quad, 8.0, 1.0).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn degenerate_masses_rejected() {
        let p = PairKernel { m_j: 1.0, ..pair(0.0) };
        let f = gaussian([0.0; 3], 1.0);
        assert!(matches!(
            carleman_gain(&p, &f, &f, [0.0; 3], &GainQuadrature::default(), 5.0, 1.0),
            Err(CollisionError::Model(ModelError::DegenerateMasses(..)))
        ));
    }

    #[test]
    fn shell_average_matches_sphere_rule() {
        // polar axis along -c puts the cusp of |c + rho w| at a pole
        let rule = SphereRule::with_polar_angle_split(64, 16, 0.0).unwrap();
        for (c, rho) in [(0.0, 1.0), (1.0, 0.3), (2.0, 2.0), (0.5, 4.0), (3.0, 1e-12)] {
            let x = [0.0, 0.0, -c];
            let q: f64 = rule
                .nodes()
                .iter()
                .zip(rule.weights())
                .map(|(w, wt)| wt / (1.0 + vec3::norm(vec3::lin(1.0, x, rho, *w))))
                .sum();
            assert!((q - shell_average(c, rho)).abs() < 1e-6 * q, "{c} {rho}");
        }
    }

    #[test]
    fn decay_integral_converges_and_decays() {
        let a = decay_integral(1.0, 2.0, [2.0, 0.0, 0.0], 64);
        let b = decay_integral(1.0, 2.0, [2.0, 0.0, 0.0], 128);
        assert!(((a - b) / b).abs() < 1e-6);
        let near = decay_integral(1.0, 2.0, [1.0, 0.0, 0.0], 96);
        let far = decay_integral(1.0, 2.0, [16.0, 0.0, 0.0], 96);
        assert!(far < near);
    }
}
