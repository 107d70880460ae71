//! Reduced integrator angle model with angular droop feedback.
//!
//! Every angle here is a rotating-frame angle, i.e. a deviation from
//! `omega_star * t`; the nominal angles are the constant `theta_star0`. In this
//! frame the closed loop reads `theta' = u(theta)` and the frequency of
//! converter `k` in the stationary frame is `u_k + omega_star`.
//!
//! The value function used throughout is
//!
//! ```text
//! V(theta) = 1/2 |theta - theta_s|_Gamma^2
//!          + sum over lines (k, j) of
//!            b_kj (cos(ts_kj) - cos(t_kj) - (t_kj - ts_kj) sin(ts_kj))
//! ```
//!
//! with `t_kj = theta_k - theta_j` and `ts_kj` the same difference at the
//! induced steady state. Its gradient is
//! `Gamma (theta - theta_s) + P(theta) - P(theta_s)`, so the angular droop law
//! is the scaled gradient flow `u = -1/2 R^-1 grad V`.

use std::ops::ControlFlow;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::netgraph::NetworkGraph;
use crate::scalar::{lit, to_f64, Scalar};
use crate::sim::{integrate, Dynamics};

/// Newton iteration cap for the steady-state solve.
pub const NEWTON_MAX_ITERATIONS: usize = 100;
/// Residual (max-norm) accepted as converged. Single precision cannot reach
/// it, so the effective tolerance is never below `16 eps`.
pub const NEWTON_TOLERANCE: f64 = 1e-10;

/// Integrator angle dynamics of `n` converters with controller gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSystem<T: Scalar> {
    graph: NetworkGraph<T>,
    alpha: DVector<T>,
    gamma: DVector<T>,
    theta_star0: DVector<T>,
    omega_star: T,
    p_dist: DVector<T>,
}

/// Induced steady state solving the droop power balance.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState<T: Scalar> {
    pub theta_s: DVector<T>,
    /// Max-norm of the power-balance residual at `theta_s`.
    pub residual: T,
    pub iterations: usize,
}

/// Feedback law driving the reduced model.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller<T: Scalar> {
    Angular,
    /// First-order frequency droop with per-node coefficients `d_k > 0`.
    Frequency(DVector<T>),
}

/// The three terms of the HJB identity `q + |u*|_R^2 + grad V . u* = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbTerms<T> {
    pub state_cost: T,
    pub control_cost: T,
    pub cross: T,
    /// `|grad V|^2`, the natural scale of the other terms.
    pub gradient_sq: T,
}

impl<T: Scalar> HjbTerms<T> {
    pub fn residual(&self) -> T {
        self.state_cost + self.control_cost + self.cross
    }
}

fn check_positive<T: Scalar>(name: &str, v: &DVector<T>) -> Result<()> {
    match v.iter().position(|&x| !(x > T::zero()) || !x.is_finite()) {
        Some(i) => Err(invalid(
            &format!("{name}[{i}]"),
            format!("must be finite and positive, got {}", v[i]),
        )),
        None => Ok(()),
    }
}

fn check_finite<T: Scalar>(name: &str, v: &DVector<T>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(invalid(&format!("{name}[{i}]"), "must be finite")),
        None => Ok(()),
    }
}

fn max_abs<T: Scalar>(v: &DVector<T>) -> T {
    v.iter()
        .fold(T::zero(), |a, &x| if x.abs() > a || !x.is_finite() { x.abs() } else { a })
}

impl<T: Scalar> ReducedSystem<T> {
    pub fn new(
        graph: NetworkGraph<T>,
        alpha: DVector<T>,
        gamma: DVector<T>,
        theta_star0: DVector<T>,
        omega_star: T,
        p_dist: DVector<T>,
    ) -> Result<Self> {
        graph.check_vector("alpha", &alpha)?;
        graph.check_vector("gamma", &gamma)?;
        graph.check_vector("theta_star0", &theta_star0)?;
        graph.check_vector("p_dist", &p_dist)?;
        check_positive("alpha", &alpha)?;
        check_positive("gamma", &gamma)?;
        check_finite("theta_star0", &theta_star0)?;
        check_finite("p_dist", &p_dist)?;
        if !omega_star.is_finite() {
            return Err(invalid("omega_star", "must be finite"));
        }
        Ok(Self {
            graph,
            alpha,
            gamma,
            theta_star0,
            omega_star,
            p_dist,
        })
    }

    /// Uniform gains, zero nominal angles, no disturbance.
    pub fn uniform(graph: NetworkGraph<T>, alpha: T, gamma: T) -> Result<Self> {
        let n = graph.node_count();
        Self::new(
            graph,
            DVector::from_element(n, alpha),
            DVector::from_element(n, gamma),
            DVector::zeros(n),
            T::zero(),
            DVector::zeros(n),
        )
    }

    pub fn with_nominal_angles(self, theta_star0: DVector<T>) -> Result<Self> {
        Self::new(
            self.graph,
            self.alpha,
            self.gamma,
            theta_star0,
            self.omega_star,
            self.p_dist,
        )
    }

    pub fn with_disturbance(self, p_dist: DVector<T>) -> Result<Self> {
        Self::new(
            self.graph,
            self.alpha,
            self.gamma,
            self.theta_star0,
            self.omega_star,
            p_dist,
        )
    }

    pub fn with_omega_star(self, omega_star: T) -> Result<Self> {
        Self::new(
            self.graph,
            self.alpha,
            self.gamma,
            self.theta_star0,
            omega_star,
            self.p_dist,
        )
    }

    pub fn graph(&self) -> &NetworkGraph<T> {
        &self.graph
    }
    pub fn alpha(&self) -> &DVector<T> {
        &self.alpha
    }
    pub fn gamma(&self) -> &DVector<T> {
        &self.gamma
    }
    pub fn theta_star0(&self) -> &DVector<T> {
        &self.theta_star0
    }
    pub fn omega_star(&self) -> T {
        self.omega_star
    }
    pub fn p_dist(&self) -> &DVector<T> {
        &self.p_dist
    }
    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    /// Nodal active power deviation `P_e(theta) - P_e*` plus the constant
    /// disturbance injection.
    pub fn power_deviation(&self, theta: &DVector<T>) -> DVector<T> {
        assert_eq!(theta.len(), self.node_count(), "angle vector length");
        let mut p = self.p_dist.clone();
        for (_, k, j, b) in self.graph.lines() {
            let star = self.theta_star0[k] - self.theta_star0[j];
            let flow = b * ((theta[k] - theta[j]).sin() - star.sin());
            p[k] += flow;
            p[j] -= flow;
        }
        p
    }

    /// Droop bracket `Gamma (theta - theta*) + P_e(theta) - P_e*`; zero exactly
    /// at the induced steady state.
    pub fn droop_bracket(&self, theta: &DVector<T>) -> DVector<T> {
        let mut r = self.power_deviation(theta);
        for k in 0..self.node_count() {
            r[k] += self.gamma[k] * (theta[k] - self.theta_star0[k]);
        }
        r
    }

    /// Jacobian of the line flows, `B Xi diag(cos(B^T theta)) B^T`.
    pub fn flow_jacobian(&self, theta: &DVector<T>) -> DMatrix<T> {
        let n = self.node_count();
        let mut jac = DMatrix::zeros(n, n);
        for (_, k, j, b) in self.graph.lines() {
            let w = b * (theta[k] - theta[j]).cos();
            jac[(k, k)] += w;
            jac[(j, j)] += w;
            jac[(k, j)] -= w;
            jac[(j, k)] -= w;
        }
        jac
    }

    /// Solves `Gamma (theta_s - theta*) + P(theta_s) = 0` by damped Newton
    /// iteration from `theta*`.
    pub fn induced_steady_state(&self) -> Result<SteadyState<T>> {
        let floor = T::eps() * lit(16.0);
        let tol: T = lit::<T>(NEWTON_TOLERANCE).max(floor);
        let mut theta = self.theta_star0.clone();
        let mut f = self.droop_bracket(&theta);
        let mut res = max_abs(&f);
        let mut iterations = 0;
        while !(res <= tol) {
            if iterations == NEWTON_MAX_ITERATIONS {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: to_f64(res),
                });
            }
            iterations += 1;
            let mut jac = self.flow_jacobian(&theta);
            for k in 0..self.node_count() {
                jac[(k, k)] += self.gamma[k];
            }
            let step = jac
                .lu()
                .solve(&(-&f))
                .ok_or_else(|| Error::Numerical("singular Newton Jacobian".into()))?;
            let mut scale = T::one();
            loop {
                let trial = &theta + &step * scale;
                let f_trial = self.droop_bracket(&trial);
                let res_trial = max_abs(&f_trial);
                if res_trial < res || scale < lit(1e-6) {
                    theta = trial;
                    f = f_trial;
                    res = res_trial;
                    break;
                }
                scale *= lit(0.5);
            }
        }
        // Polish to rounding level: identities pairing the droop bracket with
        // grad V inherit this residual.
        for _ in 0..3 {
            let mut jac = self.flow_jacobian(&theta);
            for k in 0..self.node_count() {
                jac[(k, k)] += self.gamma[k];
            }
            let Some(step) = jac.lu().solve(&(-&f)) else {
                break;
            };
            let trial = &theta + step;
            let f_trial = self.droop_bracket(&trial);
            let res_trial = max_abs(&f_trial);
            if !(res_trial < res) {
                break;
            }
            theta = trial;
            f = f_trial;
            res = res_trial;
        }
        if let Some((k, j, diff)) = self.graph.security_violation(&theta) {
            return Err(Error::SecurityViolation {
                k,
                j,
                difference: to_f64(diff),
            });
        }
        Ok(SteadyState {
            theta_s: theta,
            residual: res,
            iterations,
        })
    }

    /// Value function `V(theta)`, zero at the induced steady state.
    pub fn lyapunov_value(&self, ss: &SteadyState<T>, theta: &DVector<T>) -> T {
        let half: T = lit(0.5);
        let mut v = T::zero();
        for k in 0..self.node_count() {
            let d = theta[k] - ss.theta_s[k];
            v += half * self.gamma[k] * d * d;
        }
        for (_, k, j, b) in self.graph.lines() {
            let t = theta[k] - theta[j];
            let ts = ss.theta_s[k] - ss.theta_s[j];
            v += b * (ts.cos() - t.cos() - (t - ts) * ts.sin());
        }
        v
    }

    /// `grad V = Gamma (theta - theta_s) + P(theta) - P(theta_s)`.
    pub fn lyapunov_gradient(&self, ss: &SteadyState<T>, theta: &DVector<T>) -> DVector<T> {
        let mut g = self.power_deviation(theta) - self.power_deviation(&ss.theta_s);
        for k in 0..self.node_count() {
            g[k] += self.gamma[k] * (theta[k] - ss.theta_s[k]);
        }
        g
    }

    /// Angular droop law
    /// `u_k = -(gamma_k (theta_k - theta*_k) + P_k - P*_k) / (2 alpha_k)`.
    pub fn angular_droop_control(&self, theta: &DVector<T>) -> DVector<T> {
        let half: T = lit(0.5);
        let mut u = self.droop_bracket(theta);
        for k in 0..self.node_count() {
            u[k] = -half * u[k] / self.alpha[k];
        }
        u
    }

    /// First-order frequency droop `u_k = -(P_k - P*_k) / d_k`.
    pub fn frequency_droop_control(&self, theta: &DVector<T>, d: &DVector<T>) -> DVector<T> {
        assert_eq!(d.len(), self.node_count(), "damping vector length");
        let mut u = self.power_deviation(theta);
        for k in 0..self.node_count() {
            u[k] = -u[k] / d[k];
        }
        u
    }

    /// State part of the running cost,
    /// `sum_k (gamma_k (theta_k - theta*_k) + P_k - P*_k)^2 / (4 alpha_k)`.
    pub fn state_cost(&self, theta: &DVector<T>) -> T {
        let quarter: T = lit(0.25);
        let bracket = self.droop_bracket(theta);
        (0..self.node_count()).fold(T::zero(), |acc, k| {
            acc + quarter * bracket[k] * bracket[k] / self.alpha[k]
        })
    }

    /// Control effort `|u|_R^2 = sum_k alpha_k u_k^2`.
    pub fn control_cost(&self, u: &DVector<T>) -> T {
        assert_eq!(u.len(), self.node_count(), "input vector length");
        u.iter()
            .zip(self.alpha.iter())
            .fold(T::zero(), |acc, (&uk, &a)| acc + a * uk * uk)
    }

    /// Integrand of the optimal control problem.
    pub fn running_cost(&self, theta: &DVector<T>, u: &DVector<T>) -> T {
        self.control_cost(u) + self.state_cost(theta)
    }

    pub fn hjb_terms(&self, ss: &SteadyState<T>, theta: &DVector<T>) -> HjbTerms<T> {
        let grad = self.lyapunov_gradient(ss, theta);
        let u = self.angular_droop_control(theta);
        HjbTerms {
            state_cost: self.state_cost(theta),
            control_cost: self.control_cost(&u),
            cross: grad.dot(&u),
            gradient_sq: grad.norm_squared(),
        }
    }

    /// Pointwise HJB residual `q + |u*|_R^2 + grad V . u*`.
    pub fn hjb_residual(&self, ss: &SteadyState<T>, theta: &DVector<T>) -> T {
        self.hjb_terms(ss, theta).residual()
    }

    /// Rotating-frame closed-loop vector field.
    pub fn closed_loop_rhs(&self, theta: &DVector<T>, controller: &Controller<T>) -> DVector<T> {
        match controller {
            Controller::Angular => self.angular_droop_control(theta),
            Controller::Frequency(d) => self.frequency_droop_control(theta, d),
        }
    }

    /// Closed loop as an integrable system.
    pub fn closed_loop<'a>(&'a self, controller: &'a Controller<T>) -> ClosedLoop<'a, T> {
        ClosedLoop {
            sys: self,
            controller,
        }
    }

    /// Accumulates the running cost along the angular-droop trajectory from
    /// `theta0` (RK4 with step `dt`, trapezoidal quadrature) until
    /// `|theta - theta_s|_inf < tol`.
    pub fn cost_to_go_numeric(
        &self,
        ss: &SteadyState<T>,
        theta0: &DVector<T>,
        dt: T,
        tol: T,
        max_horizon: T,
    ) -> Result<T> {
        self.graph.check_vector("theta0", theta0)?;
        if !(dt > T::zero()) {
            return Err(invalid("dt", "step size must be positive"));
        }
        let distance = |theta: &DVector<T>| max_abs(&(theta - &ss.theta_s));
        if distance(theta0) < tol {
            return Ok(T::zero());
        }
        let cost_at = |theta: &DVector<T>| {
            let u = self.angular_droop_control(theta);
            self.running_cost(theta, &u)
        };
        let controller = Controller::Angular;
        let system = self.closed_loop(&controller);
        let steps = (max_horizon / dt)
            .ceil()
            .to_usize()
            .ok_or_else(|| invalid("max_horizon", "out of range"))?;
        let half: T = lit(0.5);
        let mut previous = cost_at(theta0);
        let mut total = T::zero();
        let mut last_distance = distance(theta0);
        let mut settled = false;
        let mut x: Vec<T> = theta0.iter().copied().collect();
        integrate(&system, &mut x, dt, steps, &[], |_, _, state| {
            let theta = DVector::from_column_slice(state);
            let current = cost_at(&theta);
            total += half * dt * (previous + current);
            previous = current;
            last_distance = distance(&theta);
            if last_distance < tol {
                settled = true;
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })?;
        if settled {
            Ok(total)
        } else {
            Err(Error::NotSettled {
                horizon: to_f64(max_horizon),
                error: to_f64(last_distance),
            })
        }
    }
}

/// Reduced closed loop `theta' = u(theta)` in the rotating frame.
pub struct ClosedLoop<'a, T: Scalar> {
    sys: &'a ReducedSystem<T>,
    controller: &'a Controller<T>,
}

impl<T: Scalar> Dynamics<T> for ClosedLoop<'_, T> {
    fn dim(&self) -> usize {
        self.sys.node_count()
    }

    fn eval(&self, _t: T, x: &[T], _active: &[bool], dx: &mut [T]) {
        let theta = DVector::from_column_slice(x);
        let u = self.sys.closed_loop_rhs(&theta, self.controller);
        dx.copy_from_slice(u.as_slice());
    }
}
