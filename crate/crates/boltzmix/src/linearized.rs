//! Linearized operator L = -nu + K around the global Maxwellian, its kernel
//! basis and the macroscopic projection.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::collision::{CollisionOperator, Pruning};
use crate::model::{vec3, Species};
use crate::quadrature::{pairwise_sum_by, VelocityGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearizedError {
    #[error("perturbation holds {got} species, expected {expected}")]
    SpeciesCount { expected: usize, got: usize },
    #[error("perturbation holds {got} values per species, expected {expected}")]
    NodeCount { expected: usize, got: usize },
    #[error("kernel basis Gram matrix is singular")]
    SingularGram,
}

/// Per-species values of a perturbation on the lattice.
pub type Perturbation = Vec<Vec<f64>>;

/// nu_ij(v) = int int B_ij mu_j(v_*) and nu_i = sum_j nu_ij.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionFrequencyTable {
    pub pair: Vec<Vec<Vec<f64>>>,
    pub total: Vec<Vec<f64>>,
}

impl CollisionFrequencyTable {
    pub fn species_count(&self) -> usize {
        self.total.len()
    }

    /// max over nodes of nu_i / nu_ii, per species.
    pub fn self_dominance(&self) -> Vec<f64> {
        (0..self.total.len())
            .map(|i| {
                self.total[i]
                    .iter()
                    .zip(&self.pair[i][i])
                    .map(|(a, b)| a / b)
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Smallest and largest nu_i(v) / (1 + |v|)^gamma over the grid, per species.
    pub fn envelope(&self, grid: &VelocityGrid, gamma: f64) -> Vec<(f64, f64)> {
        self.total
            .iter()
            .map(|nu| {
                nu.iter().enumerate().fold((f64::INFINITY, 0.0f64), |(lo, hi), (k, &x)| {
                    let r = x / (1.0 + vec3::norm(grid.node(k))).powf(gamma);
                    (lo.min(r), hi.max(r))
                })
            })
            .collect()
    }

    pub fn max_value(&self) -> f64 {
        self.total.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Builds nu with the operator's pruning.
pub fn build_nu(op: &CollisionOperator) -> CollisionFrequencyTable {
    build_nu_with(op, op.settings().pruning)
}

pub fn build_nu_with(op: &CollisionOperator, pruning: Pruning) -> CollisionFrequencyTable {
    let ns = op.species_count();
    let pair: Vec<Vec<Vec<f64>>> = (0..ns)
        .map(|i| (0..ns).map(|j| op.rate_with_pruning(i, j, op.maxwellian(j), pruning)).collect())
        .collect();
    let total = pair
        .iter()
        .map(|rows| {
            let mut acc = vec![0.0; op.grid().node_count()];
            for r in rows {
                for (a, b) in acc.iter_mut().zip(r) {
                    *a += b;
                }
            }
            acc
        })
        .collect();
    CollisionFrequencyTable { pair, total }
}

/// Velocity inner product sum_i int f_i g_i dv.
pub fn inner(grid: &VelocityGrid, f: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    f.iter()
        .zip(g)
        .map(|(a, b)| pairwise_sum_by(a.len(), &|k| a[k] * b[k]))
        .sum::<f64>()
        * grid.cell_volume()
}

/// The N + 4 kernel directions and their Gram matrix.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    pub vectors: Vec<Perturbation>,
    pub gram: DMatrix<f64>,
    gram_inverse: DMatrix<f64>,
}

impl KernelBasis {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Largest entry of |Gram - I|.
    pub fn orthonormality_defect(&self) -> f64 {
        let n = self.gram.nrows();
        (self.gram.clone() - DMatrix::<f64>::identity(n, n)).amax()
    }
}

/// phi_i = sqrt(mu_i) e_i / sqrt(n_i); momentum and energy directions
/// weighted by m_j sqrt(mu_j).
pub fn build_basis(species: &[Species], grid: &VelocityGrid) -> Result<KernelBasis, LinearizedError> {
    let ns = species.len();
    let nodes = grid.node_count();
    let sqrt_mu: Vec<Vec<f64>> = species.iter().map(|s| grid.sample(|v| s.maxwellian(v).sqrt())).collect();
    let total_mass_density: f64 = species.iter().map(|s| s.mass() * s.density()).sum();
    let total_density: f64 = species.iter().map(|s| s.density()).sum();
    let mut vectors = Vec::with_capacity(ns + 4);
    for i in 0..ns {
        let mut phi = vec![vec![0.0; nodes]; ns];
        let norm = species[i].density().sqrt();
        phi[i] = sqrt_mu[i].iter().map(|x| x / norm).collect();
        vectors.push(phi);
    }
    for d in 0..3 {
        let phi = (0..ns)
            .map(|j| {
                let m = species[j].mass();
                (0..nodes)
                    .map(|k| grid.node(k)[d] * m * sqrt_mu[j][k] / total_mass_density.sqrt())
                    .collect()
            })
            .collect();
        vectors.push(phi);
    }
    let phi = (0..ns)
        .map(|j| {
            let m = species[j].mass();
            (0..nodes)
                .map(|k| {
                    let v2 = vec3::norm_sq(grid.node(k));
                    (v2 - 3.0 / m) / 6f64.sqrt() * m * sqrt_mu[j][k] / total_density.sqrt()
                })
                .collect()
        })
        .collect();
    vectors.push(phi);
    let dim = vectors.len();
    let gram = DMatrix::from_fn(dim, dim, |a, b| inner(grid, &vectors[a], &vectors[b]));
    let gram_inverse = gram.clone().try_inverse().ok_or(LinearizedError::SingularGram)?;
    Ok(KernelBasis {
        vectors,
        gram,
        gram_inverse,
    })
}

/// Orthogonal projection onto span(phi) in the discrete inner product,
/// returned as (macro, micro).
pub fn project_pl(grid: &VelocityGrid, f: &[Vec<f64>], basis: &KernelBasis) -> (Perturbation, Perturbation) {
    let moments = DVector::from_iterator(basis.len(), basis.vectors.iter().map(|phi| inner(grid, f, phi)));
    let coef = &basis.gram_inverse * moments;
    let mut macro_part: Perturbation = f.iter().map(|fi| vec![0.0; fi.len()]).collect();
    for (c, phi) in coef.iter().zip(&basis.vectors) {
        for (m, p) in macro_part.iter_mut().zip(phi) {
            for (a, b) in m.iter_mut().zip(p) {
                *a += c * b;
            }
        }
    }
    let micro = f
        .iter()
        .zip(&macro_part)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    (macro_part, micro)
}

/// Dirichlet form <f, L f> and the weighted micro norm of f.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityProbe {
    pub dirichlet: f64,
    pub micro_norm: f64,
}

impl CoercivityProbe {
    /// -dirichlet / micro_norm.
    pub fn ratio(&self) -> f64 {
        -self.dirichlet / self.micro_norm
    }
}

/// L together with its precomputed collision frequency.
pub struct LinearizedOperator<'a> {
    op: &'a CollisionOperator,
    nu: CollisionFrequencyTable,
}

impl<'a> LinearizedOperator<'a> {
    pub fn new(op: &'a CollisionOperator) -> Self {
        Self { op, nu: build_nu(op) }
    }

    pub fn frequency(&self) -> &CollisionFrequencyTable {
        &self.nu
    }

    pub fn collision(&self) -> &CollisionOperator {
        self.op
    }

    fn check(&self, f: &[Vec<f64>]) -> Result<(), LinearizedError> {
        let ns = self.op.species_count();
        if f.len() != ns {
            return Err(LinearizedError::SpeciesCount {
                expected: ns,
                got: f.len(),
            });
        }
        let nodes = self.op.grid().node_count();
        for fi in f {
            if fi.len() != nodes {
                return Err(LinearizedError::NodeCount {
                    expected: nodes,
                    got: fi.len(),
                });
            }
        }
        Ok(())
    }

    /// K_i(f): gain of f against sqrt(mu) in both slots, minus the
    /// sqrt(mu_i) loss against sqrt(mu_j) f_j.
    pub fn apply_k(&self, f: &[Vec<f64>]) -> Result<Perturbation, LinearizedError> {
        self.check(f)?;
        let op = self.op;
        let ns = op.species_count();
        let gain = op.linear_gain(f);
        let weighted: Vec<Vec<f64>> = (0..ns)
            .map(|j| f[j].iter().zip(op.sqrt_maxwellian(j)).map(|(a, b)| a * b).collect())
            .collect();
        Ok((0..ns)
            .map(|i| {
                let mut k = gain[i].clone();
                for (j, wj) in weighted.iter().enumerate() {
                    let r = op.rate(i, j, wj);
                    for (n, x) in k.iter_mut().enumerate() {
                        *x -= op.sqrt_maxwellian(i)[n] * r[n];
                    }
                }
                k
            })
            .collect())
    }

    /// L_i(f) = -nu_i f_i + K_i(f).
    pub fn apply_l(&self, f: &[Vec<f64>]) -> Result<Perturbation, LinearizedError> {
        let mut k = self.apply_k(f)?;
        for (i, ki) in k.iter_mut().enumerate() {
            for (n, x) in ki.iter_mut().enumerate() {
                *x -= self.nu.total[i][n] * f[i][n];
            }
        }
        Ok(k)
    }

    /// L through the full bilinear collision operator:
    /// (1/sqrt(mu_i)) sum_j [Q_ij(mu_i, sqrt(mu_j) f_j) + Q_ij(sqrt(mu_i) f_i, mu_j)].
    pub fn apply_l_via_collision(&self, f: &[Vec<f64>]) -> Result<Perturbation, LinearizedError> {
        self.check(f)?;
        let op = self.op;
        let ns = op.species_count();
        let weighted: Vec<Vec<f64>> = (0..ns)
            .map(|j| f[j].iter().zip(op.sqrt_maxwellian(j)).map(|(a, b)| a * b).collect())
            .collect();
        Ok((0..ns)
            .map(|i| {
                let mu_i = op.maxwellian(i);
                let mut acc = vec![0.0; mu_i.len()];
                for j in 0..ns {
                    let mu_j = op.maxwellian(j);
                    let first_gain = op.bilinear_gain(i, j, mu_i, &weighted[j], false);
                    let first_loss = op.bilinear_loss(i, j, mu_i, &weighted[j]);
                    let second_gain = op.bilinear_gain(i, j, &weighted[i], mu_j, false);
                    let second_loss = op.bilinear_loss(i, j, &weighted[i], mu_j);
                    for n in 0..acc.len() {
                        acc[n] += first_gain[n] - first_loss[n] + second_gain[n] - second_loss[n];
                    }
                }
                acc.iter()
                    .zip(op.sqrt_maxwellian(i))
                    .map(|(a, s)| a / s)
                    .collect()
            })
            .collect())
    }

    pub fn coercivity_probe(&self, f: &[Vec<f64>], basis: &KernelBasis) -> Result<CoercivityProbe, LinearizedError> {
        let grid = self.op.grid();
        let lf = self.apply_l(f)?;
        let dirichlet = inner(grid, f, &lf);
        let (_, micro) = project_pl(grid, f, basis);
        let gamma = self.op.kernel().gamma();
        let weighted: Perturbation = micro
            .iter()
            .map(|m| {
                m.iter()
                    .enumerate()
                    .map(|(k, x)| (1.0 + vec3::norm_sq(grid.node(k))).sqrt().powf(gamma) * x)
                    .collect()
            })
            .collect();
        let micro_norm = inner(grid, &weighted, &micro);
        Ok(CoercivityProbe { dirichlet, micro_norm })
    }
}

/// L2 norm sqrt(<f, f>).
pub fn l2_norm(grid: &VelocityGrid, f: &[Vec<f64>]) -> f64 {
    inner(grid, f, f).sqrt()
}
