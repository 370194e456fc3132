//! Species and kernel parameters, Maxwellians, velocity weights, the two
//! post-collision parameterizations and the Carleman sphere geometry.

use std::f64::consts::PI;

use thiserror::Error;
use twofloat::TwoFloat;

/// A velocity in R^3.
pub type Vec3 = [f64; 3];

/// Relative tolerance under which two masses are routed to the hyperplane branch.
pub const MASS_EQUALITY_TOL: f64 = 1e-9;

/// Tolerance on |sigma| - 1 and |omega| - 1 for direction arguments.
pub const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("species mass must be positive and finite, got {0}")]
    NonPositiveMass(f64),
    #[error("species density must be positive and finite, got {0}")]
    NonPositiveDensity(f64),
    #[error("kernel exponent gamma must lie in [0, 1], got {0}")]
    GammaOutOfRange(f64),
    #[error("kernel constant matrix must be {0}x{0}")]
    KernelShape(usize),
    #[error("kernel constant c_phi[{i}][{j}] = {value} must be positive and finite")]
    NonPositiveKernelConstant { i: usize, j: usize, value: f64 },
    #[error("kernel constants are not symmetric at ({i}, {j})")]
    AsymmetricKernel { i: usize, j: usize },
    #[error("angular cap c_b = {c_b} is below the profile maximum {needed}")]
    AngularCap { c_b: f64, needed: f64 },
    #[error("weight exponent q must exceed 4, got {0}")]
    WeightExponent(f64),
    #[error("direction must be a unit vector, got norm {0}")]
    NotUnit(f64),
    #[error("species index {index} out of range for {count} species")]
    SpeciesIndex { index: usize, count: usize },
    #[error("masses {0} and {1} coincide: the Carleman surface degenerates to a hyperplane")]
    DegenerateMasses(f64, f64),
}

/// Small vector helpers on `[f64; 3]`.
pub mod vec3 {
    use super::Vec3;

    #[inline]
    pub fn dot(a: Vec3, b: Vec3) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[inline]
    pub fn norm_sq(a: Vec3) -> f64 {
        dot(a, a)
    }

    #[inline]
    pub fn norm(a: Vec3) -> f64 {
        norm_sq(a).sqrt()
    }

    #[inline]
    pub fn add(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    #[inline]
    pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    #[inline]
    pub fn scale(s: f64, a: Vec3) -> Vec3 {
        [s * a[0], s * a[1], s * a[2]]
    }

    /// `a * x + b * y`
    #[inline]
    pub fn lin(a: f64, x: Vec3, b: f64, y: Vec3) -> Vec3 {
        [a * x[0] + b * y[0], a * x[1] + b * y[1], a * x[2] + b * y[2]]
    }

    #[inline]
    pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }
}

use vec3::{dot, norm, norm_sq};

/// Mass and equilibrium number density of one species.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Species {
    mass: f64,
    density: f64,
}

impl Species {
    pub fn new(mass: f64, density: f64) -> Result<Self, ModelError> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(ModelError::NonPositiveMass(mass));
        }
        if !(density.is_finite() && density > 0.0) {
            return Err(ModelError::NonPositiveDensity(density));
        }
        Ok(Self { mass, density })
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    /// Global Maxwellian n (m/2pi)^{3/2} exp(-m|v|^2/2).
    pub fn maxwellian(&self, v: Vec3) -> f64 {
        self.maxwellian_sq(norm_sq(v))
    }

    /// Maxwellian as a function of |v|^2.
    #[inline]
    pub fn maxwellian_sq(&self, v2: f64) -> f64 {
        self.density * (self.mass / (2.0 * PI)).powf(1.5) * (-0.5 * self.mass * v2).exp()
    }

    /// log of the Maxwellian as a function of |v|^2; finite where the value underflows.
    #[inline]
    pub fn log_maxwellian_sq(&self, v2: f64) -> f64 {
        self.density.ln() + 1.5 * (self.mass / (2.0 * PI)).ln() - 0.5 * self.mass * v2
    }
}

/// Global Maxwellian of one species.
pub fn maxwellian(species: &Species, v: Vec3) -> f64 {
    species.maxwellian(v)
}

/// Angular part b(cos theta) of the collision kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngularProfile {
    /// b(t) = |t|
    #[default]
    AbsCos,
    /// b(t) = t^2
    CosSquared,
}

impl AngularProfile {
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        match self {
            AngularProfile::AbsCos => t.abs(),
            AngularProfile::CosSquared => t * t,
        }
    }

    /// Smallest c with value(t) <= c |t| on [-1, 1].
    pub fn cap(&self) -> f64 {
        1.0
    }

    /// Exact integral of b(sigma . e) over the unit sphere.
    pub fn sphere_integral(&self) -> f64 {
        match self {
            AngularProfile::AbsCos => 2.0 * PI,
            AngularProfile::CosSquared => 4.0 * PI / 3.0,
        }
    }
}

/// Pairwise kernel B_ij(z, sigma) = c_phi[i][j] |z|^gamma b(cos theta).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    gamma: f64,
    c_phi: Vec<Vec<f64>>,
    angular: AngularProfile,
    c_b: f64,
}

impl KernelSpec {
    pub fn new(
        gamma: f64,
        c_phi: Vec<Vec<f64>>,
        angular: AngularProfile,
        c_b: f64,
    ) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(ModelError::GammaOutOfRange(gamma));
        }
        let n = c_phi.len();
        if n == 0 || c_phi.iter().any(|row| row.len() != n) {
            return Err(ModelError::KernelShape(n.max(1)));
        }
        for i in 0..n {
            for j in 0..n {
                let value = c_phi[i][j];
                if !(value.is_finite() && value > 0.0) {
                    return Err(ModelError::NonPositiveKernelConstant { i, j, value });
                }
                if (value - c_phi[j][i]).abs() > 1e-14 * value.abs() {
                    return Err(ModelError::AsymmetricKernel { i, j });
                }
            }
        }
        if !(c_b >= angular.cap()) {
            return Err(ModelError::AngularCap {
                c_b,
                needed: angular.cap(),
            });
        }
        Ok(Self {
            gamma,
            c_phi,
            angular,
            c_b,
        })
    }

    /// All constants one, b = |cos theta|, c_b = 1.
    pub fn uniform(species_count: usize, gamma: f64) -> Result<Self, ModelError> {
        Self::new(
            gamma,
            vec![vec![1.0; species_count]; species_count],
            AngularProfile::AbsCos,
            1.0,
        )
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn species_count(&self) -> usize {
        self.c_phi.len()
    }

    pub fn c_phi(&self, i: usize, j: usize) -> f64 {
        self.c_phi[i][j]
    }

    pub fn angular(&self) -> AngularProfile {
        self.angular
    }

    pub fn c_b(&self) -> f64 {
        self.c_b
    }

    /// |z|^gamma with 0^0 = 1.
    #[inline]
    pub fn speed_factor(&self, speed: f64) -> f64 {
        if self.gamma == 0.0 {
            1.0
        } else {
            speed.powf(self.gamma)
        }
    }

    /// B_ij(z, sigma). At z = 0 the angle is taken as zero.
    pub fn eval(&self, i: usize, j: usize, z: Vec3, sigma: Vec3) -> f64 {
        let s = norm(z);
        let cos = if s > 0.0 { dot(z, sigma) / s } else { 1.0 };
        self.c_phi[i][j] * self.speed_factor(s) * self.angular.value(cos)
    }
}

/// Polynomial velocity weight w(v) = (1 + |v|^2)^{q/2}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    q: f64,
}

impl WeightSpec {
    pub fn new(q: f64) -> Result<Self, ModelError> {
        if !(q.is_finite() && q > 4.0) {
            return Err(ModelError::WeightExponent(q));
        }
        Ok(Self { q })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn eval(&self, v: Vec3) -> f64 {
        self.eval_sq(norm_sq(v))
    }

    #[inline]
    pub fn eval_sq(&self, v2: f64) -> f64 {
        (1.0 + v2).powf(0.5 * self.q)
    }
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self { q: 5.0 }
    }
}

pub fn velocity_weight(weight: &WeightSpec, v: Vec3) -> f64 {
    weight.eval(v)
}

/// Species indices and pre-collision velocities of one binary encounter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionPair {
    pub i: usize,
    pub j: usize,
    pub v: Vec3,
    pub v_star: Vec3,
}

impl CollisionPair {
    fn masses(&self, species: &[Species]) -> Result<(f64, f64), ModelError> {
        let count = species.len();
        for index in [self.i, self.j] {
            if index >= count {
                return Err(ModelError::SpeciesIndex { index, count });
            }
        }
        Ok((species[self.i].mass, species[self.j].mass))
    }
}

fn check_unit(d: Vec3) -> Result<(), ModelError> {
    let n = norm(d);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(ModelError::NotUnit(n));
    }
    Ok(())
}

/// Post-collision velocities in the sigma parameterization, unchecked.
#[inline]
pub fn sigma_map(m_i: f64, m_j: f64, v: Vec3, v_star: Vec3, sigma: Vec3) -> (Vec3, Vec3) {
    let total = m_i + m_j;
    let speed = norm(vec3::sub(v, v_star));
    let mut vp = [0.0; 3];
    let mut vsp = [0.0; 3];
    for k in 0..3 {
        let com = m_i * v[k] + m_j * v_star[k];
        vp[k] = (com + m_j * speed * sigma[k]) / total;
        vsp[k] = (com - m_i * speed * sigma[k]) / total;
    }
    (vp, vsp)
}

/// Post-collision velocities in the omega (deflection) parameterization, unchecked.
#[inline]
pub fn omega_map(m_i: f64, m_j: f64, v: Vec3, v_star: Vec3, omega: Vec3) -> (Vec3, Vec3) {
    let total = m_i + m_j;
    let along = dot(vec3::sub(v_star, v), omega);
    let vp = vec3::lin(1.0, v, 2.0 * m_j / total * along, omega);
    let vsp = vec3::lin(1.0, v_star, -2.0 * m_i / total * along, omega);
    (vp, vsp)
}

pub fn post_collision_sigma(
    pair: &CollisionPair,
    species: &[Species],
    sigma: Vec3,
) -> Result<(Vec3, Vec3), ModelError> {
    let (m_i, m_j) = pair.masses(species)?;
    check_unit(sigma)?;
    Ok(sigma_map(m_i, m_j, pair.v, pair.v_star, sigma))
}

pub fn post_collision_omega(
    pair: &CollisionPair,
    species: &[Species],
    omega: Vec3,
) -> Result<(Vec3, Vec3), ModelError> {
    let (m_i, m_j) = pair.masses(species)?;
    check_unit(omega)?;
    Ok(omega_map(m_i, m_j, pair.v, pair.v_star, omega))
}

/// sigma = u_hat - 2 (u_hat . omega) omega, the sigma that reproduces the omega map.
pub fn sigma_from_omega(v: Vec3, v_star: Vec3, omega: Vec3) -> Vec3 {
    let u = vec3::sub(v, v_star);
    let s = norm(u);
    if s == 0.0 {
        return omega;
    }
    let u_hat = vec3::scale(1.0 / s, u);
    vec3::lin(1.0, u_hat, -2.0 * dot(u_hat, omega), omega)
}

pub fn masses_coincide(m_i: f64, m_j: f64) -> bool {
    (m_i - m_j).abs() <= MASS_EQUALITY_TOL * m_i.max(m_j)
}

/// Integration surface of the Carleman representation for fixed v and v'_*.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CarlemanSphere {
    Sphere { center: Vec3, radius: f64 },
    /// Equal masses: the surface is a hyperplane.
    Hyperplane,
}

impl CarlemanSphere {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, CarlemanSphere::Hyperplane)
    }
}

pub fn carleman_sphere(v: Vec3, v_star_prime: Vec3, m_i: f64, m_j: f64) -> CarlemanSphere {
    if masses_coincide(m_i, m_j) {
        return CarlemanSphere::Hyperplane;
    }
    let d = m_i - m_j;
    let radius = m_j * norm(vec3::sub(v, v_star_prime)) / d.abs();
    let center = vec3::lin(m_i / d, v, -m_j / d, v_star_prime);
    CarlemanSphere::Sphere { center, radius }
}

fn tf(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

fn tf_norm(a: [TwoFloat; 3]) -> TwoFloat {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Both sides of the exponent identity behind the pointwise gain estimate.
///
/// lhs is the raw five-term exponent, rhs the collapsed negative square.
/// Evaluated in double-double arithmetic and rounded once.
pub fn exponent_cancellation(
    v: Vec3,
    v_star_prime: Vec3,
    m_i: f64,
    m_j: f64,
) -> Result<(f64, f64), ModelError> {
    if masses_coincide(m_i, m_j) {
        return Err(ModelError::DegenerateMasses(m_i, m_j));
    }
    let mi = tf(m_i);
    let mj = tf(m_j);
    let d = TwoFloat::new_add(m_i, -m_j);
    let d_abs = d.abs();
    let mut a = [TwoFloat::from(0.0); 3];
    let mut b = [TwoFloat::from(0.0); 3];
    for k in 0..3 {
        a[k] = TwoFloat::new_mul(m_i, v[k]) - TwoFloat::new_mul(m_j, v_star_prime[k]);
        b[k] = TwoFloat::new_add(v[k], -v_star_prime[k]);
    }
    let a_norm = tf_norm(a);
    let b_norm = tf_norm(b);
    let radius = mj * b_norm / d_abs;
    let center_norm = a_norm / d_abs;
    let vsp2 = tf_norm([tf(v_star_prime[0]), tf(v_star_prime[1]), tf(v_star_prime[2])]);
    let vsp2 = vsp2 * vsp2;
    let v2 = tf_norm([tf(v[0]), tf(v[1]), tf(v[2])]);
    let v2 = v2 * v2;
    let quarter = tf(0.25);
    let lhs = -(mj * quarter) * vsp2 + (mi * quarter) * v2
        - (mi * quarter) * radius * radius
        - (mi * quarter) * center_norm * center_norm
        + (mi * tf(0.5)) * radius * center_norm;
    let gap = a_norm - mi * b_norm;
    let rhs = -(mj * quarter) / (d * d) * gap * gap;
    Ok((f64::from(lhs), f64::from(rhs)))
}
