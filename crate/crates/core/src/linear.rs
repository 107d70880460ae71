//! Linearized angular and frequency droop, the LQR correspondence, and the
//! angle-coherence performance metric.
//!
//! States are deviations from the nominal operating point. The coherence
//! output is `y = n^{-1/2} (I - 11^T / n) theta`; its squared H2 norm under
//! unit-intensity white noise is the steady-state angle variance about the
//! network average.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Schur};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::netgraph::NetworkGraph;
use crate::scalar::{from_usize, lit, to_f64, Scalar};
use crate::sim::format_float;

/// Which linear closed loop a [`LinearizedSystem`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroopKind {
    Angular,
    Frequency,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearGains<T: Scalar> {
    /// `theta' = -1/2 R^-1 (Gamma + L) theta + eta`.
    Angular {
        alpha: DVector<T>,
        gamma: DVector<T>,
    },
    /// `theta' = omega`, `M omega' = -L theta - D omega + eta`.
    Frequency {
        inertia: DVector<T>,
        damping: DVector<T>,
    },
}

/// Linear closed loop over a network graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem<T: Scalar> {
    graph: NetworkGraph<T>,
    gains: LinearGains<T>,
}

/// Squared H2 norm split into per-mode contributions (modes `2..=n`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceResult<T> {
    pub value: T,
    pub per_mode: Vec<T>,
}

fn positive_entries<T: Scalar>(name: &str, v: &DVector<T>) -> Result<()> {
    match v.iter().position(|&x| !(x > T::zero()) || !x.is_finite()) {
        Some(i) => Err(invalid(
            &format!("{name}[{i}]"),
            format!("must be finite and positive, got {}", v[i]),
        )),
        None => Ok(()),
    }
}

fn uniform_value<T: Scalar>(name: &str, v: &DVector<T>) -> Result<T> {
    let first = v[0];
    let spread = v.iter().fold(T::zero(), |a, &x| a.max((x - first).abs()));
    if spread <= first.abs() * T::eps() * lit(4.0) {
        Ok(first)
    } else {
        Err(Error::HeterogeneousGains { name: name.into() })
    }
}

impl<T: Scalar> LinearizedSystem<T> {
    pub fn angular(graph: NetworkGraph<T>, alpha: DVector<T>, gamma: DVector<T>) -> Result<Self> {
        graph.check_vector("alpha", &alpha)?;
        graph.check_vector("gamma", &gamma)?;
        positive_entries("alpha", &alpha)?;
        positive_entries("gamma", &gamma)?;
        Ok(Self {
            graph,
            gains: LinearGains::Angular { alpha, gamma },
        })
    }

    pub fn frequency(
        graph: NetworkGraph<T>,
        inertia: DVector<T>,
        damping: DVector<T>,
    ) -> Result<Self> {
        graph.check_vector("inertia", &inertia)?;
        graph.check_vector("damping", &damping)?;
        positive_entries("inertia", &inertia)?;
        positive_entries("damping", &damping)?;
        Ok(Self {
            graph,
            gains: LinearGains::Frequency { inertia, damping },
        })
    }

    pub fn uniform_angular(graph: NetworkGraph<T>, alpha: T, gamma: T) -> Result<Self> {
        let n = graph.node_count();
        Self::angular(
            graph,
            DVector::from_element(n, alpha),
            DVector::from_element(n, gamma),
        )
    }

    pub fn uniform_frequency(graph: NetworkGraph<T>, inertia: T, damping: T) -> Result<Self> {
        let n = graph.node_count();
        Self::frequency(
            graph,
            DVector::from_element(n, inertia),
            DVector::from_element(n, damping),
        )
    }

    pub fn graph(&self) -> &NetworkGraph<T> {
        &self.graph
    }

    pub fn gains(&self) -> &LinearGains<T> {
        &self.gains
    }

    pub fn kind(&self) -> DroopKind {
        match self.gains {
            LinearGains::Angular { .. } => DroopKind::Angular,
            LinearGains::Frequency { .. } => DroopKind::Frequency,
        }
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    /// `n` for angular droop, `2n` (angles then frequencies) for frequency droop.
    pub fn state_dim(&self) -> usize {
        match self.kind() {
            DroopKind::Angular => self.node_count(),
            DroopKind::Frequency => 2 * self.node_count(),
        }
    }

    /// Deterministic part of the linear dynamics at deviation state `x`.
    pub fn linear_rhs(&self, x: &DVector<T>) -> DVector<T> {
        assert_eq!(x.len(), self.state_dim(), "state dimension");
        let n = self.node_count();
        let mut dx = DVector::zeros(self.state_dim());
        let lap = self.graph.weighted_laplacian();
        match &self.gains {
            LinearGains::Angular { alpha, gamma } => {
                let coupled = &lap * x;
                for k in 0..n {
                    dx[k] = -(gamma[k] * x[k] + coupled[k]) / (lit::<T>(2.0) * alpha[k]);
                }
            }
            LinearGains::Frequency { inertia, damping } => {
                let theta = x.rows(0, n);
                let omega = x.rows(n, n);
                let coupled = &lap * theta;
                for k in 0..n {
                    dx[k] = omega[k];
                    dx[n + k] = -(coupled[k] + damping[k] * omega[k]) / inertia[k];
                }
            }
        }
        dx
    }

    /// State matrix `A`.
    pub fn state_matrix(&self) -> DMatrix<T> {
        let n = self.node_count();
        let lap = self.graph.weighted_laplacian();
        match &self.gains {
            LinearGains::Angular { alpha, gamma } => {
                let mut a = lap;
                for k in 0..n {
                    a[(k, k)] += gamma[k];
                }
                for k in 0..n {
                    let scale = -T::one() / (lit::<T>(2.0) * alpha[k]);
                    a.row_mut(k).scale_mut(scale);
                }
                a
            }
            LinearGains::Frequency { inertia, damping } => {
                let mut a = DMatrix::zeros(2 * n, 2 * n);
                for k in 0..n {
                    a[(k, n + k)] = T::one();
                    for j in 0..n {
                        a[(n + k, j)] = -lap[(k, j)] / inertia[k];
                    }
                    a[(n + k, n + k)] = -damping[k] / inertia[k];
                }
                a
            }
        }
    }

    /// Disturbance input matrix `B` (`state_dim x n`).
    pub fn noise_input(&self) -> DMatrix<T> {
        let n = self.node_count();
        match &self.gains {
            LinearGains::Angular { .. } => DMatrix::identity(n, n),
            LinearGains::Frequency { inertia, .. } => {
                let mut b = DMatrix::zeros(2 * n, n);
                for k in 0..n {
                    b[(n + k, k)] = T::one() / inertia[k];
                }
                b
            }
        }
    }

    /// Coherence output matrix `C` (`n x state_dim`).
    pub fn coherence_output(&self) -> DMatrix<T> {
        let n = self.node_count();
        let nf: T = from_usize(n);
        let scale = T::one() / nf.sqrt();
        let mut c = DMatrix::zeros(n, self.state_dim());
        for i in 0..n {
            for j in 0..n {
                let centering = if i == j { T::one() } else { T::zero() } - T::one() / nf;
                c[(i, j)] = scale * centering;
            }
        }
        c
    }

    /// Whether the angular closed loop is Hurwitz. `A` is similar to the
    /// symmetric matrix `-1/2 R^{-1/2} (Gamma + L) R^{-1/2}`.
    /// The frequency loop always has a marginal average-angle mode.
    pub fn is_hurwitz(&self) -> Result<bool> {
        match &self.gains {
            LinearGains::Angular { alpha, gamma } => {
                let n = self.node_count();
                let mut sym = self.graph.weighted_laplacian();
                for k in 0..n {
                    sym[(k, k)] += gamma[k];
                }
                for k in 0..n {
                    for j in 0..n {
                        sym[(k, j)] *= -lit::<T>(0.5) / (alpha[k] * alpha[j]).sqrt();
                    }
                }
                let eig = nalgebra::SymmetricEigen::try_new(sym, T::eps(), 10_000)
                    .ok_or_else(|| Error::Numerical("symmetric eigensolver failed".into()))?;
                Ok(eig.eigenvalues.max() < T::zero())
            }
            LinearGains::Frequency { .. } => Ok(false),
        }
    }

    /// Closed-form coherence under uniform gains.
    pub fn coherence(&self) -> Result<CoherenceResult<T>> {
        let eigenvalues = self.graph.laplacian_eigenvalues()?;
        let n = self.node_count();
        match &self.gains {
            LinearGains::Angular { alpha, gamma } => coherence_angular(
                uniform_value("alpha", alpha)?,
                uniform_value("gamma", gamma)?,
                eigenvalues.as_slice(),
                n,
            ),
            LinearGains::Frequency { inertia, damping } => {
                uniform_value("inertia", inertia)?;
                coherence_frequency(uniform_value("damping", damping)?, eigenvalues.as_slice(), n)
            }
        }
    }

    /// H2 oracle applied to this system's `(A, B, C)`.
    pub fn coherence_oracle(&self) -> Result<T> {
        h2_norm_oracle(
            &self.state_matrix(),
            &self.noise_input(),
            &self.coherence_output(),
        )
    }
}

fn check_spectrum<T: Scalar>(eigenvalues: &[T], n: usize) -> Result<()> {
    if eigenvalues.len() != n {
        return Err(Error::DimensionMismatch {
            name: "eigenvalues".into(),
            expected: n,
            got: eigenvalues.len(),
        });
    }
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    Ok(())
}

/// Angle coherence of angular droop, `(alpha/n) sum_{i>=2} 1/(gamma + lambda_i)`.
/// `eigenvalues` must be ascending with `lambda_1 = 0`.
pub fn coherence_angular<T: Scalar>(
    alpha: T,
    gamma: T,
    eigenvalues: &[T],
    n: usize,
) -> Result<CoherenceResult<T>> {
    check_spectrum(eigenvalues, n)?;
    if !(alpha > T::zero()) || !(gamma > T::zero()) {
        return Err(invalid("alpha/gamma", "gains must be positive"));
    }
    let nf: T = from_usize(n);
    let per_mode: Vec<T> = eigenvalues[1..]
        .iter()
        .map(|&lambda| alpha / (nf * (gamma + lambda)))
        .collect();
    let value = per_mode.iter().fold(T::zero(), |a, &b| a + b);
    Ok(CoherenceResult { value, per_mode })
}

/// Angle coherence of frequency droop, `(1/(2 d n)) sum_{i>=2} 1/lambda_i`.
/// Independent of the inertia.
pub fn coherence_frequency<T: Scalar>(
    damping: T,
    eigenvalues: &[T],
    n: usize,
) -> Result<CoherenceResult<T>> {
    check_spectrum(eigenvalues, n)?;
    if !(damping > T::zero()) {
        return Err(invalid("damping", "must be positive"));
    }
    let scale = eigenvalues
        .iter()
        .fold(T::one(), |a, &b| a.max(b.abs()));
    let floor = scale * lit::<T>(1e-10).max(T::eps() * lit(64.0));
    if let Some(i) = eigenvalues[1..].iter().position(|&l| !(l > floor)) {
        return Err(Error::ZeroEigenvalueBeyondFirst {
            index: i + 2,
            value: to_f64(eigenvalues[i + 1]),
        });
    }
    let nf: T = from_usize(n);
    let two: T = lit(2.0);
    let per_mode: Vec<T> = eigenvalues[1..]
        .iter()
        .map(|&lambda| T::one() / (two * damping * nf * lambda))
        .collect();
    let value = per_mode.iter().fold(T::zero(), |a, &b| a + b);
    Ok(CoherenceResult { value, per_mode })
}

/// Orthonormal basis (columns) of the null space of `m`.
fn null_space<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    // Pad to at least square so the SVD returns a full right basis.
    let mut padded = DMatrix::zeros(rows.max(cols), cols);
    padded.view_mut((0, 0), (rows, cols)).copy_from(m);
    let svd = nalgebra::SVD::try_new(padded, false, true, T::eps(), 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sigma_max = svd.singular_values.max();
    let tol = sigma_max.max(T::one()) * lit::<T>(1e-8).max(T::eps() * lit(100.0));
    let null: Vec<_> = (0..cols)
        .filter(|&i| svd.singular_values[i] <= tol)
        .map(|i| v_t.row(i).transpose())
        .collect();
    if null.is_empty() {
        Ok(DMatrix::zeros(cols, 0))
    } else {
        Ok(DMatrix::from_columns(&null))
    }
}

/// Orthonormal basis of the unobservable subspace of `(C, A)`: the largest
/// `A`-invariant subspace contained in `ker C`.
fn unobservable_subspace<T: Scalar>(a: &DMatrix<T>, c: &DMatrix<T>) -> Result<DMatrix<T>> {
    let dim = a.nrows();
    let mut basis = null_space(c)?;
    loop {
        let r = basis.ncols();
        if r == 0 {
            return Ok(basis);
        }
        let projector = DMatrix::identity(dim, dim) - &basis * basis.transpose();
        let leak = projector * a * &basis;
        let keep = null_space(&leak)?;
        if keep.ncols() == r {
            return Ok(basis);
        }
        basis = &basis * keep;
    }
}

/// Squared H2 norm `trace(C X C^T)` of `x' = A x + B eta`, `y = C x`.
///
/// The unobservable subspace is split off first (Kalman decomposition), so
/// marginal modes invisible at the output are allowed. The observable part
/// must be Hurwitz; its Lyapunov equation `A X + X A^T + B B^T = 0` is solved
/// by Kronecker vectorization.
pub fn h2_norm_oracle<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, c: &DMatrix<T>) -> Result<T> {
    let dim = a.nrows();
    if a.ncols() != dim || b.nrows() != dim || c.ncols() != dim {
        return Err(invalid("A/B/C", "inconsistent state dimensions"));
    }
    let unobservable = unobservable_subspace(a, c)?;
    let observable = if unobservable.ncols() == 0 {
        DMatrix::identity(dim, dim)
    } else {
        null_space(&unobservable.transpose())?
    };
    let r = observable.ncols();
    if r == 0 {
        return Ok(T::zero());
    }
    let a_o = observable.transpose() * a * &observable;
    let b_o = observable.transpose() * b;
    let c_o = c * &observable;

    let schur = Schur::try_new(a_o.clone(), T::eps(), 10_000)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    let worst = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(T::min_value().unwrap_or(-T::max_value().unwrap()), |acc, re| acc.max(re));
    if !(worst < T::zero()) {
        return Err(Error::InstabilityDetected {
            real_part: to_f64(worst),
        });
    }

    let eye = DMatrix::identity(r, r);
    let lyap = eye.kronecker(&a_o) + a_o.kronecker(&eye);
    let forcing = -(&b_o * b_o.transpose());
    let rhs = DVector::from_column_slice(forcing.as_slice());
    let sol = lyap
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(r, r, sol.as_slice());
    let x = (&x + x.transpose()) * lit::<T>(0.5);
    Ok((&c_o * x * c_o.transpose()).trace())
}

/// LQR state weight `Q = 1/4 (Gamma + L)^T R^-1 (Gamma + L)`.
pub fn lqr_weight_matrix<T: Scalar>(
    alpha: &DVector<T>,
    gamma: &DVector<T>,
    graph: &NetworkGraph<T>,
) -> DMatrix<T> {
    let shifted = shifted_laplacian(gamma, graph);
    let mut scaled = shifted.clone();
    for k in 0..graph.node_count() {
        scaled.row_mut(k).scale_mut(T::one() / alpha[k]);
    }
    shifted.transpose() * scaled * lit::<T>(0.25)
}

fn shifted_laplacian<T: Scalar>(gamma: &DVector<T>, graph: &NetworkGraph<T>) -> DMatrix<T> {
    assert_eq!(gamma.len(), graph.node_count(), "gamma length");
    let mut m = graph.weighted_laplacian();
    for k in 0..graph.node_count() {
        m[(k, k)] += gamma[k];
    }
    m
}

/// Linear feedback `u = -1/2 R^-1 (Gamma + L) (theta - theta*)`.
pub fn lqr_gain_control<T: Scalar>(
    alpha: &DVector<T>,
    gamma: &DVector<T>,
    graph: &NetworkGraph<T>,
    deviation: &DVector<T>,
) -> DVector<T> {
    let mut u = shifted_laplacian(gamma, graph) * deviation;
    for k in 0..graph.node_count() {
        u[k] *= -lit::<T>(0.5) / alpha[k];
    }
    u
}

/// Quadratic value matrix `P = 1/2 (Gamma + L)`.
pub fn lqr_value_matrix<T: Scalar>(gamma: &DVector<T>, graph: &NetworkGraph<T>) -> DMatrix<T> {
    shifted_laplacian(gamma, graph) * lit::<T>(0.5)
}

/// Max-abs residual of the algebraic Riccati equation
/// `A^T P + P A - P B R^-1 B^T P + Q = 0` for the integrator plant
/// (`A = 0`, `B = I`) with `P = 1/2 (Gamma + L)` and the given weight `q`.
pub fn riccati_residual_for<T: Scalar>(
    q: &DMatrix<T>,
    alpha: &DVector<T>,
    gamma: &DVector<T>,
    graph: &NetworkGraph<T>,
) -> T {
    let p = lqr_value_matrix(gamma, graph);
    let r_inv = DMatrix::from_diagonal(&alpha.map(|a| T::one() / a));
    let residual = q - &p * r_inv * &p;
    residual.amax()
}

/// Riccati residual with the weight from [`lqr_weight_matrix`].
pub fn riccati_residual<T: Scalar>(
    alpha: &DVector<T>,
    gamma: &DVector<T>,
    graph: &NetworkGraph<T>,
) -> T {
    riccati_residual_for(&lqr_weight_matrix(alpha, gamma, graph), alpha, gamma, graph)
}

/// Graph whose Laplacian is the Jacobian of the line flows at `theta_star`:
/// susceptances `b_kj cos(theta*_k - theta*_j)`.
pub fn linearization_graph<T: Scalar>(
    graph: &NetworkGraph<T>,
    theta_star: &DVector<T>,
) -> Result<NetworkGraph<T>> {
    graph.check_vector("theta_star", theta_star)?;
    if let Some((k, j, diff)) = graph.security_violation(theta_star) {
        return Err(Error::SecurityViolation {
            k,
            j,
            difference: to_f64(diff),
        });
    }
    graph.reweighted(|_, k, j, b| b * (theta_star[k] - theta_star[j]).cos())
}

/// Euler-Maruyama estimate of the stationary centered variance of the
/// first `n_angles` states of `dx = A x dt + B dW`, started from rest.
///
/// The variance `(1/n) sum (x_i - mean)^2` is time-averaged over the second
/// half of `[0, horizon]`.
pub fn empirical_output_variance<T: Scalar>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    n_angles: usize,
    seed: u64,
    horizon: T,
    dt: T,
) -> Result<T> {
    let dim = a.nrows();
    if a.ncols() != dim || b.nrows() != dim || n_angles == 0 || n_angles > dim {
        return Err(invalid("A/B", "inconsistent dimensions"));
    }
    if !(dt > T::zero()) || !(horizon > dt) {
        return Err(invalid("dt/horizon", "need 0 < dt < horizon"));
    }
    let steps = (horizon / dt)
        .round()
        .to_usize()
        .ok_or_else(|| invalid("horizon", "out of range"))?;
    let burn_in = steps / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sqrt_dt = dt.sqrt();
    let nf: T = from_usize(n_angles);
    let mut x = DVector::<T>::zeros(dim);
    let mut next = DVector::<T>::zeros(dim);
    let mut noise = DVector::<T>::zeros(b.ncols());
    let mut sum = T::zero();
    for k in 0..steps {
        for w in noise.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = lit::<T>(z) * sqrt_dt;
        }
        next.copy_from(&x);
        next.gemv(dt, a, &x, T::one());
        next.gemv(T::one(), b, &noise, T::one());
        std::mem::swap(&mut x, &mut next);
        if k + 1 > burn_in {
            let angles = x.rows(0, n_angles);
            let mean = angles.sum() / nf;
            let var = angles.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / nf;
            sum += var;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState {
            t: to_f64(horizon),
            last_finite_t: f64::NAN,
        });
    }
    Ok(sum / from_usize(steps - burn_in))
}

/// Monte-Carlo angle coherence of a linearized system.
pub fn empirical_coherence<T: Scalar>(
    sys: &LinearizedSystem<T>,
    seed: u64,
    horizon: T,
    dt: T,
) -> Result<T> {
    empirical_output_variance(
        &sys.state_matrix(),
        &sys.noise_input(),
        sys.node_count(),
        seed,
        horizon,
        dt,
    )
}

/// One row of a coherence scaling study.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceRow {
    pub n: usize,
    pub lambda2: f64,
    pub coherence_angular: f64,
    pub coherence_frequency: f64,
    pub bound_alpha_over_gamma: f64,
}

pub const COHERENCE_CSV_HEADER: &str =
    "n,lambda2,coherence_angular,coherence_frequency,bound_alpha_over_gamma";

/// Closed-form coherence of both controllers on `graph` with uniform gains.
pub fn coherence_row<T: Scalar>(
    graph: &NetworkGraph<T>,
    alpha: T,
    gamma: T,
    damping: T,
) -> Result<CoherenceRow> {
    let n = graph.node_count();
    let ev = graph.laplacian_eigenvalues()?;
    let angular = coherence_angular(alpha, gamma, ev.as_slice(), n)?;
    let frequency = coherence_frequency(damping, ev.as_slice(), n)?;
    Ok(CoherenceRow {
        n,
        lambda2: if n > 1 { to_f64(ev[1]) } else { 0.0 },
        coherence_angular: to_f64(angular.value),
        coherence_frequency: to_f64(frequency.value),
        bound_alpha_over_gamma: to_f64(alpha / gamma),
    })
}

pub fn write_coherence_csv<W: Write>(mut out: W, rows: &[CoherenceRow]) -> io::Result<()> {
    writeln!(out, "{COHERENCE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.n,
            format_float(r.lambda2),
            format_float(r.coherence_angular),
            format_float(r.coherence_frequency),
            format_float(r.bound_alpha_over_gamma)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn lqr_weight_examples() {
        let g = NetworkGraph::new(1, []).unwrap();
        let q = lqr_weight_matrix(&dvector![1.0], &dvector![2.0], &g);
        assert_abs_diff_eq!(q[(0, 0)], 1.0, epsilon = 1e-15);

        let g = NetworkGraph::path(2, 1.0).unwrap();
        let q = lqr_weight_matrix(&dvector![1.0, 1.0], &dvector![1.0, 1.0], &g);
        let expected = dmatrix![5.0, -4.0; -4.0, 5.0] * 0.25;
        assert_abs_diff_eq!(q, expected, epsilon = 1e-15);
        assert_eq!(riccati_residual(&dvector![1.0, 1.0], &dvector![1.0, 1.0], &g), 0.0);
    }

    #[test]
    fn riccati_negative_control() {
        let g = NetworkGraph::ring(4, 1.3).unwrap();
        let alpha = dvector![0.5, 1.0, 2.0, 0.7];
        let gamma = dvector![1.0, 0.3, 2.0, 1.1];
        assert!(riccati_residual(&alpha, &gamma, &g) < 1e-12);
        let mut q = lqr_weight_matrix(&alpha, &gamma, &g);
        for k in 0..4 {
            q[(k, k)] += 0.01;
        }
        assert_abs_diff_eq!(riccati_residual_for(&q, &alpha, &gamma, &g), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn lqr_control_examples() {
        let g = NetworkGraph::new(1, []).unwrap();
        let u = lqr_gain_control(&dvector![0.5], &dvector![2.0], &g, &dvector![0.1]);
        assert_abs_diff_eq!(u[0], -0.2, epsilon = 1e-15);
        let g = NetworkGraph::path(3, 1.0).unwrap();
        let u = lqr_gain_control(&dvector![1.0, 1.0, 1.0], &dvector![1.0, 1.0, 1.0], &g, &DVector::zeros(3));
        assert_eq!(u, DVector::zeros(3));
    }

    #[test]
    fn coherence_two_node_examples() {
        let ang = coherence_angular(1.0, 2.0, &[0.0, 2.0], 2).unwrap();
        assert_abs_diff_eq!(ang.value, 0.125, epsilon = 1e-15);
        let freq = coherence_frequency(1.0, &[0.0, 2.0], 2).unwrap();
        assert_abs_diff_eq!(freq.value, 0.125, epsilon = 1e-15);
        assert_eq!(ang.per_mode.len(), 1);
    }

    #[test]
    fn coherence_frequency_rejects_disconnected_spectrum() {
        let err = coherence_frequency(1.0, &[0.0, 1e-14, 2.0], 3).unwrap_err();
        assert!(matches!(err, Error::ZeroEigenvalueBeyondFirst { index: 2, .. }));
        assert!(coherence_frequency(1.0, &[0.0, 2.0], 3).is_err());
    }

    #[test]
    fn angular_mode_contributions_decrease() {
        let r = coherence_angular(1.0, 1.0, &[0.0, 1.0, 10.0, 1e6], 4).unwrap();
        assert!(r.per_mode.windows(2).all(|w| w[1] < w[0]));
        assert!(r.per_mode[2] < 1e-6);
    }

    #[test]
    fn oracle_scalar_system() {
        let a = dmatrix![-3.0];
        let v = h2_norm_oracle(&a, &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        assert_abs_diff_eq!(v, 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn oracle_second_order_mode() {
        // m x'' = -lambda x - d x' + eta, output x: variance 1/(2 d lambda).
        for &(lambda, m, d) in &[(2.0, 1.0, 1.0), (0.5, 10.0, 3.0), (4.0, 0.1, 0.2)] {
            let a = dmatrix![0.0, 1.0; -lambda / m, -d / m];
            let b = dmatrix![0.0; 1.0 / m];
            let c = dmatrix![1.0, 0.0];
            let v = h2_norm_oracle(&a, &b, &c).unwrap();
            assert_abs_diff_eq!(v, 1.0 / (2.0 * d * lambda), epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_rejects_unstable_observable_mode() {
        let err = h2_norm_oracle(&dmatrix![0.5], &dmatrix![1.0], &dmatrix![1.0]).unwrap_err();
        assert!(matches!(err, Error::InstabilityDetected { .. }));
        let err = h2_norm_oracle(&dmatrix![0.0], &dmatrix![1.0], &dmatrix![1.0]).unwrap_err();
        assert!(matches!(err, Error::InstabilityDetected { .. }));
    }

    #[test]
    fn oracle_ignores_unobservable_marginal_mode() {
        let sys = LinearizedSystem::uniform_frequency(NetworkGraph::path(4, 1.0).unwrap(), 2.0, 0.5)
            .unwrap();
        let oracle = sys.coherence_oracle().unwrap();
        assert_abs_diff_eq!(oracle, sys.coherence().unwrap().value, epsilon = 1e-10);
    }

    #[test]
    fn angular_path_five_matches_oracle() {
        let sys = LinearizedSystem::uniform_angular(NetworkGraph::path(5, 1.0).unwrap(), 1.0, 1.0)
            .unwrap();
        assert_abs_diff_eq!(
            sys.coherence_oracle().unwrap(),
            sys.coherence().unwrap().value,
            epsilon = 1e-10
        );
        assert!(sys.is_hurwitz().unwrap());
    }

    #[test]
    fn linear_rhs_examples() {
        let g = NetworkGraph::path(3, 1.0).unwrap();
        let ang = LinearizedSystem::uniform_angular(g.clone(), 1.0, 1.0).unwrap();
        assert_eq!(ang.linear_rhs(&DVector::zeros(3)), DVector::zeros(3));
        let freq = LinearizedSystem::uniform_frequency(g, 1.0, 1.0).unwrap();
        assert_eq!(freq.linear_rhs(&DVector::zeros(6)), DVector::zeros(6));
        let x = dvector![0.1, -0.2, 0.3, 1.0, 2.0, 3.0];
        let dx = freq.linear_rhs(&x);
        assert_eq!(dx.rows(0, 3), x.rows(3, 3));
        assert_abs_diff_eq!(dx, freq.state_matrix() * &x, epsilon = 1e-15);
        let y = dvector![0.1, -0.2, 0.3];
        assert_abs_diff_eq!(ang.linear_rhs(&y), ang.state_matrix() * &y, epsilon = 1e-15);
    }

    #[test]
    fn heterogeneous_gains_rejected_by_closed_form() {
        let g = NetworkGraph::path(3, 1.0).unwrap();
        let sys = LinearizedSystem::angular(g.clone(), dvector![1.0, 2.0, 1.0], dvector![1.0, 1.0, 1.0])
            .unwrap();
        assert!(matches!(sys.coherence(), Err(Error::HeterogeneousGains { .. })));
        assert!(sys.is_hurwitz().unwrap());
        // The oracle itself handles any gains.
        assert!(sys.coherence_oracle().unwrap() > 0.0);
        assert!(LinearizedSystem::uniform_angular(g, -1.0, 1.0).is_err());
    }

    #[test]
    fn empirical_replay_and_zero_noise() {
        let sys = LinearizedSystem::uniform_angular(NetworkGraph::path(2, 1.0).unwrap(), 1.0, 2.0)
            .unwrap();
        let a: f64 = empirical_coherence(&sys, 7, 20.0, 1e-3).unwrap();
        let b = empirical_coherence(&sys, 7, 20.0, 1e-3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let zero = empirical_output_variance(
            &sys.state_matrix(),
            &DMatrix::zeros(2, 2),
            2,
            7,
            20.0,
            1e-3,
        )
        .unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn csv_rows() {
        let g = NetworkGraph::path(2, 1.0).unwrap();
        let row = coherence_row(&g, 1.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(row.coherence_angular, 0.125, epsilon = 1e-15);
        let mut buf = Vec::new();
        write_coherence_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(COHERENCE_CSV_HEADER));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn single_precision_coherence() {
        let sys = LinearizedSystem::<f32>::uniform_angular(NetworkGraph::path(5, 1.0).unwrap(), 1.0, 1.0)
            .unwrap();
        let closed = sys.coherence().unwrap().value;
        let oracle = sys.coherence_oracle().unwrap();
        assert!((closed - oracle).abs() < 1e-5);
    }
}
