//! Velocity lattice, product sphere rules and deterministic reductions.

use std::f64::consts::PI;

use gauss_quad::legendre::GaussLegendre;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{vec3, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("points per axis must be even and at least 8, got {0}")]
    GridPoints(usize),
    #[error("velocity half width must be positive and finite, got {0}")]
    HalfWidth(f64),
    #[error("sphere rule needs n_polar >= 4, got {0}")]
    PolarNodes(usize),
    #[error("sphere rule needs n_azimuth >= 8, got {0}")]
    AzimuthNodes(usize),
    #[error("polar split point must lie strictly inside (-1, 1), got {0}")]
    PolarSplit(f64),
    #[error("exponential rate k must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Gauss-Legendre nodes and weights mapped to [a, b].
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(n.max(2)).expect("degree >= 2 is always valid");
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut out: Vec<(f64, f64)> = rule
        .as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (mid + half * x, half * w))
        .collect();
    out.sort_by(|p, q| p.0.total_cmp(&q.0));
    out
}

/// Uniform lattice v = -L + k h, k = 0..n-1, h = 2L/n, in each axis.
///
/// Flat index is `(iz * n + iy) * n + ix`, so x runs fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    half_width: f64,
    points: usize,
    spacing: f64,
}

impl VelocityGrid {
    pub fn new(half_width: f64, points_per_axis: usize) -> Result<Self, QuadratureError> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(QuadratureError::HalfWidth(half_width));
        }
        if points_per_axis < 8 || points_per_axis % 2 != 0 {
            return Err(QuadratureError::GridPoints(points_per_axis));
        }
        Ok(Self {
            half_width,
            points: points_per_axis,
            spacing: 2.0 * half_width / points_per_axis as f64,
        })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.points * self.points * self.points
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    /// Coordinate of axis index k.
    #[inline]
    pub fn coord(&self, k: usize) -> f64 {
        -self.half_width + k as f64 * self.spacing
    }

    /// Axis coordinates in index order.
    pub fn axis(&self) -> Vec<f64> {
        (0..self.points).map(|k| self.coord(k)).collect()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.points + iy) * self.points + ix
    }

    #[inline]
    pub fn split(&self, flat: usize) -> (usize, usize, usize) {
        let n = self.points;
        (flat % n, (flat / n) % n, flat / (n * n))
    }

    #[inline]
    pub fn node(&self, flat: usize) -> Vec3 {
        let (ix, iy, iz) = self.split(flat);
        [self.coord(ix), self.coord(iy), self.coord(iz)]
    }

    /// Index of -v, when -v is on the lattice (it is unless some axis index is 0).
    pub fn mirror(&self, flat: usize) -> Option<usize> {
        let n = self.points;
        let (ix, iy, iz) = self.split(flat);
        if ix == 0 || iy == 0 || iz == 0 {
            return None;
        }
        Some(self.index(n - ix, n - iy, n - iz))
    }

    /// Evaluates `f` at every node, in flat order.
    pub fn sample<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(Vec3) -> f64 + Sync,
    {
        (0..self.node_count())
            .into_par_iter()
            .map(|k| f(self.node(k)))
            .collect()
    }
}

/// Product rule on the unit sphere: Gauss-Legendre in cos(theta), split at one
/// polar value, times the uniform trapezoid in azimuth.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRule {
    polar: Vec<(f64, f64)>,
    azimuth: Vec<(f64, f64)>,
    nodes: Vec<Vec3>,
    weights: Vec<f64>,
}

/// Product rule with polar split at t = 0.
pub fn make_sphere_rule(n_polar: usize, n_azimuth: usize) -> Result<SphereRule, QuadratureError> {
    SphereRule::with_polar_split(n_polar, n_azimuth, 0.0)
}

impl SphereRule {
    /// Polar nodes are shared between [-1, split] and [split, 1] in proportion
    /// to the interval lengths, with at least two per side.
    pub fn with_polar_split(
        n_polar: usize,
        n_azimuth: usize,
        split: f64,
    ) -> Result<Self, QuadratureError> {
        if n_polar < 4 {
            return Err(QuadratureError::PolarNodes(n_polar));
        }
        if n_azimuth < 8 {
            return Err(QuadratureError::AzimuthNodes(n_azimuth));
        }
        if !(split > -1.0 && split < 1.0) {
            return Err(QuadratureError::PolarSplit(split));
        }
        let lower = (((split + 1.0) / 2.0 * n_polar as f64).round() as usize).clamp(2, n_polar - 2);
        let mut polar = gauss_legendre(lower, -1.0, split);
        polar.extend(gauss_legendre(n_polar - lower, split, 1.0));
        Ok(Self::from_polar(polar, n_azimuth))
    }

    /// Gauss-Legendre in the polar angle instead of its cosine, split at
    /// cos(theta) = split. Resolves integrands concentrated near the poles.
    pub fn with_polar_angle_split(
        n_polar: usize,
        n_azimuth: usize,
        split: f64,
    ) -> Result<Self, QuadratureError> {
        if n_polar < 4 {
            return Err(QuadratureError::PolarNodes(n_polar));
        }
        if n_azimuth < 8 {
            return Err(QuadratureError::AzimuthNodes(n_azimuth));
        }
        if !(split > -1.0 && split < 1.0) {
            return Err(QuadratureError::PolarSplit(split));
        }
        let theta_k = split.acos();
        let upper = ((theta_k / PI * n_polar as f64).round() as usize).clamp(2, n_polar - 2);
        let mut polar: Vec<(f64, f64)> = gauss_legendre(n_polar - upper, theta_k, PI)
            .into_iter()
            .chain(gauss_legendre(upper, 0.0, theta_k))
            .map(|(theta, w)| (theta.cos(), w * theta.sin()))
            .collect();
        polar.sort_by(|p, q| p.0.total_cmp(&q.0));
        Ok(Self::from_polar(polar, n_azimuth))
    }

    fn from_polar(polar: Vec<(f64, f64)>, n_azimuth: usize) -> Self {
        let dphi = 2.0 * PI / n_azimuth as f64;
        let azimuth: Vec<(f64, f64)> = (0..n_azimuth)
            .map(|l| {
                let phi = dphi * l as f64;
                (phi.cos(), phi.sin())
            })
            .collect();
        let mut nodes = Vec::with_capacity(polar.len() * n_azimuth);
        let mut weights = Vec::with_capacity(polar.len() * n_azimuth);
        for &(t, w) in &polar {
            let s = (1.0 - t * t).max(0.0).sqrt();
            for &(c, sn) in &azimuth {
                nodes.push([s * c, s * sn, t]);
                weights.push(w * dphi);
            }
        }
        Self {
            polar,
            azimuth,
            nodes,
            weights,
        }
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Polar (cos theta, weight) pairs, ascending.
    pub fn polar(&self) -> &[(f64, f64)] {
        &self.polar
    }

    /// Azimuth (cos phi, sin phi) pairs; each carries weight 2 pi / n_azimuth.
    pub fn azimuth(&self) -> &[(f64, f64)] {
        &self.azimuth
    }

    pub fn azimuth_weight(&self) -> f64 {
        2.0 * PI / self.azimuth.len() as f64
    }

    /// Sum of f(sigma) w over the rule with the polar axis rotated onto `axis`.
    pub fn integrate_about<F>(&self, axis: Vec3, mut f: F) -> f64
    where
        F: FnMut(Vec3) -> f64,
    {
        let (e1, e2, e3) = orthonormal_frame(axis);
        let dphi = self.azimuth_weight();
        let mut total = 0.0;
        for &(t, w) in &self.polar {
            let s = (1.0 - t * t).max(0.0).sqrt();
            let mut ring = 0.0;
            for &(c, sn) in &self.azimuth {
                let sigma = [
                    t * e3[0] + s * (c * e1[0] + sn * e2[0]),
                    t * e3[1] + s * (c * e1[1] + sn * e2[1]),
                    t * e3[2] + s * (c * e1[2] + sn * e2[2]),
                ];
                ring += f(sigma);
            }
            total += w * dphi * ring;
        }
        total
    }
}

/// Right-handed orthonormal frame (e1, e2, e3) with e3 along `axis`.
/// A zero axis gives the canonical frame.
pub fn orthonormal_frame(axis: Vec3) -> (Vec3, Vec3, Vec3) {
    let n = vec3::norm(axis);
    if n == 0.0 {
        return ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
    }
    let e3 = vec3::scale(1.0 / n, axis);
    let helper = if e3[0].abs() < 0.6 {
        [1.0, 0.0, 0.0]
    } else if e3[1].abs() < 0.6 {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let e1 = vec3::cross(helper, e3);
    let e1 = vec3::scale(1.0 / vec3::norm(e1), e1);
    let e2 = vec3::cross(e3, e1);
    (e1, e2, e3)
}

/// sinh(z)/z, by series near zero.
pub fn sinhc(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + z * z / 6.0
    } else {
        z.sinh() / z
    }
}

/// Closed form of the integral of exp(-k sigma.x) over the unit sphere.
pub fn sphere_exp_closed_form(k: f64, x: Vec3) -> f64 {
    4.0 * PI * sinhc(k * vec3::norm(x))
}

/// Quadrature of the integral of exp(-k sigma.x) over the unit sphere.
pub fn sphere_average_exp(rule: &SphereRule, k: f64, x: Vec3) -> Result<f64, QuadratureError> {
    if !(k > 0.0) {
        return Err(QuadratureError::NonPositiveRate(k));
    }
    if k * vec3::norm(x) < 1e-8 {
        return Ok(sphere_exp_closed_form(k, x));
    }
    let terms: Vec<f64> = rule
        .nodes()
        .iter()
        .zip(rule.weights())
        .map(|(s, w)| w * (-k * vec3::dot(*s, x)).exp())
        .collect();
    Ok(pairwise_sum(&terms))
}

const PAIRWISE_BLOCK: usize = 16;
const PARALLEL_BLOCK: usize = 1 << 14;

/// Pairwise summation over a fixed binary tree. The tree depends only on the
/// length, so the result is bitwise identical for any worker count.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    let n = values.len();
    if n <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let (a, b) = values.split_at(n / 2);
    if n >= PARALLEL_BLOCK {
        let (x, y) = rayon::join(|| pairwise_sum(a), || pairwise_sum(b));
        x + y
    } else {
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Pairwise sum of `f(k)` for k in 0..n without materializing the terms.
pub fn pairwise_sum_by<F>(n: usize, f: &F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    fn rec<F: Fn(usize) -> f64 + Sync>(lo: usize, hi: usize, f: &F) -> f64 {
        let n = hi - lo;
        if n <= PAIRWISE_BLOCK {
            return (lo..hi).map(f).sum();
        }
        let mid = lo + n / 2;
        if n >= PARALLEL_BLOCK {
            let (x, y) = rayon::join(|| rec(lo, mid, f), || rec(mid, hi, f));
            x + y
        } else {
            rec(lo, mid, f) + rec(mid, hi, f)
        }
    }
    rec(0, n, f)
}

/// Sum of values times the cell volume.
pub fn grid_integral(grid: &VelocityGrid, values: &[f64]) -> Result<f64, QuadratureError> {
    if values.len() != grid.node_count() {
        return Err(QuadratureError::LengthMismatch {
            expected: grid.node_count(),
            got: values.len(),
        });
    }
    Ok(pairwise_sum(values) * grid.cell_volume())
}
