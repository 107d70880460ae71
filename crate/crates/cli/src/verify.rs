//! Invariant suites behind `angdroop verify`. Each check prints its measured
//! value next to the tolerance.

use anyhow::{bail, Result};
use angdroop::linear::{linearization_graph, riccati_residual, LinearizedSystem};
use angdroop::netgraph::{GraphFamily, NetworkGraph};
use angdroop::reduced::{Controller, ReducedSystem, SteadyState};
use angdroop::sim::simulate;
use clap::ValueEnum;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Hjb,
    Gradient,
    Riccati,
    Coherence,
    Stability,
    All,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.measured.is_finite() && self.measured < self.tolerance
    }
}

/// Reduced system the nonlinear suites run on, with its steady state.
pub struct Subject {
    pub system: ReducedSystem<f64>,
    pub steady: SteadyState<f64>,
}

impl Subject {
    pub fn new(system: ReducedSystem<f64>) -> Result<Self> {
        let steady = system.induced_steady_state()?;
        Ok(Self { system, steady })
    }
}

fn secure_point(rng: &mut ChaCha8Rng, s: &Subject, radius: f64) -> DVector<f64> {
    loop {
        let theta = s.steady.theta_s.map(|c| c + rng.random_range(-radius..radius));
        if s.system.graph().security_check(&theta) {
            return theta;
        }
    }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<NetworkGraph<f64>> {
    let mut lines = Vec::new();
    for j in 1..n {
        lines.push((rng.random_range(0..j), j, rng.random_range(0.5..2.0)));
    }
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let (k, j) = (a.min(b), a.max(b));
        if k != j && !lines.iter().any(|&(x, y, _)| (x, y) == (k, j)) {
            lines.push((k, j, rng.random_range(0.5..2.0)));
        }
    }
    Ok(NetworkGraph::new(n, lines)?)
}

fn hjb(s: &Subject, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..50)
        .map(|_| {
            let theta = secure_point(&mut rng, s, 0.6);
            let terms = s.system.hjb_terms(&s.steady, &theta);
            terms.residual().abs() / (1.0 + terms.gradient_sq)
        })
        .fold(0.0f64, f64::max);
    vec![Check {
        suite: "hjb",
        name: "max scaled HJB residual over 50 random secure points".into(),
        measured: worst,
        tolerance: 1e-12,
    }]
}

fn gradient(s: &Subject, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = s.system.node_count();
    let h = 1e-5;
    let (mut fd_err, mut flow_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let theta = secure_point(&mut rng, s, 0.6);
        let grad = s.system.lyapunov_gradient(&s.steady, &theta);
        let fd = DVector::from_fn(n, |k, _| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += h;
            minus[k] -= h;
            (s.system.lyapunov_value(&s.steady, &plus) - s.system.lyapunov_value(&s.steady, &minus)) / (2.0 * h)
        });
        if grad.norm() > 0.0 {
            fd_err = fd_err.max((&fd - &grad).norm() / grad.norm());
        }
        let u = s.system.angular_droop_control(&theta);
        let expected: f64 = -0.5 * (0..n).map(|k| grad[k] * grad[k] / s.system.alpha()[k]).sum::<f64>();
        flow_err = flow_err.max((grad.dot(&u) - expected).abs() / (1.0 + expected.abs()));
    }
    vec![
        Check {
            suite: "gradient",
            name: "central-difference vs analytic gradient, max relative error".into(),
            measured: fd_err,
            tolerance: 1e-6,
        },
        Check {
            suite: "gradient",
            name: "dV/dt along droop flow vs -1/2 grad' R^-1 grad".into(),
            measured: flow_err,
            tolerance: 1e-12,
        },
    ]
}

fn riccati(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..12);
        let g = random_graph(&mut rng, n)?;
        let alpha = DVector::from_fn(n, |_, _| rng.random_range(0.2..2.0));
        let gamma = DVector::from_fn(n, |_, _| rng.random_range(0.2..2.0));
        worst = worst.max(riccati_residual(&alpha, &gamma, &g));
    }
    Ok(vec![Check {
        suite: "riccati",
        name: "max Riccati residual over 20 random networks".into(),
        measured: worst,
        tolerance: 1e-12,
    }])
}

fn coherence(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::new();
    for family in [GraphFamily::Path, GraphFamily::Ring, GraphFamily::Complete] {
        for n in [2, 5, 8] {
            graphs.push(family.build(n, 1.0)?);
        }
    }
    for _ in 0..6 {
        let n = rng.random_range(2..9);
        graphs.push(random_graph(&mut rng, n)?);
    }
    let (mut angular, mut frequency) = (0.0f64, 0.0f64);
    for g in graphs {
        let (a, gm, m, d) = (
            rng.random_range(0.2..3.0),
            rng.random_range(0.2..3.0),
            rng.random_range(0.2..3.0),
            rng.random_range(0.2..3.0),
        );
        let sys = LinearizedSystem::uniform_angular(g.clone(), a, gm)?;
        angular = angular.max((sys.coherence()?.value - sys.coherence_oracle()?).abs());
        let sys = LinearizedSystem::uniform_frequency(g, m, d)?;
        frequency = frequency.max((sys.coherence()?.value - sys.coherence_oracle()?).abs());
    }
    Ok(vec![
        Check {
            suite: "coherence",
            name: "angular droop: closed form vs H2 oracle, max deviation".into(),
            measured: angular,
            tolerance: 1e-10,
        },
        Check {
            suite: "coherence",
            name: "frequency droop: closed form vs H2 oracle, max deviation".into(),
            measured: frequency,
            tolerance: 1e-10,
        },
    ])
}

fn stability(s: &Subject, seed: u64) -> Result<Vec<Check>> {
    let sys = &s.system;
    let jac_graph = linearization_graph(sys.graph(), &s.steady.theta_s)?;
    let linear = LinearizedSystem::angular(jac_graph, sys.alpha().clone(), sys.gamma().clone())?;
    // Spectral abscissa of the closed-loop Jacobian (symmetrizable, so real).
    let a = linear.state_matrix();
    let abscissa = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let controller = Controller::Angular;
    let closed = sys.closed_loop(&controller);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let theta0 = s.steady.theta_s.map(|c| c + rng.random_range(-0.1..0.1));
        let traj = simulate("reduced", &closed, theta0.as_slice(), 1e-3, 25.0, &[], 1000)?;
        let end = DVector::from_column_slice(&traj.final_state);
        worst = worst.max((&end - &s.steady.theta_s).amax());
    }
    Ok(vec![
        Check {
            suite: "stability",
            name: "spectral abscissa of the Jacobian at theta_s (must be < 0)".into(),
            measured: abscissa,
            tolerance: 0.0,
        },
        Check {
            suite: "stability",
            name: "max |theta(25) - theta_s| from 10 perturbed starts".into(),
            measured: worst,
            tolerance: 1e-6,
        },
    ])
}

/// Runs `suite` with seeds derived from `seed`.
pub fn run(suite: Suite, subject: &Subject, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Hjb {
        checks.extend(hjb(subject, seed.wrapping_add(1)));
    }
    if all || suite == Suite::Gradient {
        checks.extend(gradient(subject, seed.wrapping_add(2)));
    }
    if all || suite == Suite::Riccati {
        checks.extend(riccati(seed.wrapping_add(3))?);
    }
    if all || suite == Suite::Coherence {
        checks.extend(coherence(seed.wrapping_add(4))?);
    }
    if all || suite == Suite::Stability {
        checks.extend(stability(subject, seed.wrapping_add(5))?);
    }
    if checks.is_empty() {
        bail!("no checks selected");
    }
    Ok(checks)
}
