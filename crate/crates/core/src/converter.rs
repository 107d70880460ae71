//! Averaged, balanced three-phase DC/AC converter network in the alpha-beta
//! frame, closed with the practical angular droop controller.
//!
//! State layout (flat vector, per-converter alpha-beta pairs):
//! `[v_dc (n), i (2n), v (2n), i_line (2m), theta (n)]`. Line `e = (k, j)`
//! carries `i_line[2e..2e+2]` from `k` to `j` and is driven by `v_k - v_j`,
//! so each axis sees the plain incidence matrix.

use nalgebra::DVector;

use crate::error::{check_len, invalid, Error, Result};
use crate::netgraph::NetworkGraph;
use crate::scalar::{lit, Scalar};
use crate::sim::{simulate, Dynamics, EventWindow, Trajectory};

/// Physical and controller parameters of a converter network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConverterNetworkParams<T: Scalar> {
    pub graph: NetworkGraph<T>,
    pub c_dc: T,
    pub k_p: T,
    pub v_dc_star: T,
    pub i_dc_star: DVector<T>,
    pub r_ac: T,
    pub l_ac: T,
    pub c_ac: T,
    pub g_ac: T,
    pub r_line: T,
    pub l_line: T,
    /// Modulation amplitude, `0 < A < 1`.
    pub amplitude: T,
    pub alpha: DVector<T>,
    pub gamma: DVector<T>,
    pub omega_star: T,
    pub theta_star0: DVector<T>,
}

/// Nominal angles of the three-converter test network.
pub const TESTCASE_THETA_STAR0: [f64; 3] = [0.951, 0.92, 0.967];
/// Initial controller angles of the three-converter test network.
pub const TESTCASE_THETA0: [f64; 3] = [0.92, 0.90, 0.93];

impl<T: Scalar> ConverterNetworkParams<T> {
    /// Reference parameter set on an arbitrary graph; nominal angles default
    /// to zero.
    pub fn defaults(graph: NetworkGraph<T>) -> Self {
        let n = graph.node_count();
        Self {
            graph,
            c_dc: lit(1e-3),
            k_p: lit(0.5),
            v_dc_star: lit(1000.0),
            i_dc_star: DVector::from_element(n, lit(500.0)),
            r_ac: lit(0.2),
            l_ac: lit(5e-4),
            c_ac: lit(1e-5),
            g_ac: lit(0.1),
            r_line: lit(0.03),
            l_line: lit(5e-5),
            amplitude: lit(0.33),
            alpha: DVector::from_element(n, lit(0.5)),
            gamma: DVector::from_element(n, lit(1e6)),
            omega_star: lit(2.0 * std::f64::consts::PI * 50.0),
            theta_star0: DVector::zeros(n),
        }
    }

    /// Three converters on a ring with the test-case nominal angles.
    pub fn testcase() -> Self {
        let graph = NetworkGraph::ring(3, T::one()).expect("3-ring is valid");
        Self {
            theta_star0: DVector::from_iterator(3, TESTCASE_THETA_STAR0.iter().map(|&x| lit(x))),
            ..Self::defaults(graph)
        }
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn line_count(&self) -> usize {
        self.graph.edge_count()
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.node_count(), self.line_count())
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("c_dc", self.c_dc),
            ("k_p", self.k_p),
            ("v_dc_star", self.v_dc_star),
            ("r_ac", self.r_ac),
            ("l_ac", self.l_ac),
            ("c_ac", self.c_ac),
            ("g_ac", self.g_ac),
            ("r_line", self.r_line),
            ("l_line", self.l_line),
            ("omega_star", self.omega_star),
        ];
        for (name, v) in scalars {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(invalid(name, format!("must be finite and positive, got {v}")));
            }
        }
        if !(self.amplitude > T::zero() && self.amplitude < T::one()) {
            return Err(invalid(
                "amplitude",
                format!("must lie in (0, 1), got {}", self.amplitude),
            ));
        }
        let n = self.node_count();
        for (name, v) in [
            ("i_dc_star", &self.i_dc_star),
            ("alpha", &self.alpha),
            ("gamma", &self.gamma),
            ("theta_star0", &self.theta_star0),
        ] {
            check_len(name, n, v.len())?;
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(invalid(&format!("{name}[{i}]"), "must be finite"));
            }
        }
        for (name, v) in [("alpha", &self.alpha), ("gamma", &self.gamma)] {
            if let Some(i) = v.iter().position(|&x| !(x > T::zero())) {
                return Err(invalid(
                    &format!("{name}[{i}]"),
                    format!("must be positive, got {}", v[i]),
                ));
            }
        }
        Ok(())
    }

    /// `theta*(t) = omega* t + theta*_0`.
    pub fn nominal_angle(&self, k: usize, t: T) -> T {
        self.omega_star * t + self.theta_star0[k]
    }
}

/// Offsets of the state blocks in the flat state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
    pub m: usize,
}

impl StateLayout {
    pub fn new(n: usize, m: usize) -> Self {
        Self { n, m }
    }
    pub fn v_dc(&self) -> usize {
        0
    }
    pub fn i(&self) -> usize {
        self.n
    }
    pub fn v(&self) -> usize {
        3 * self.n
    }
    pub fn i_line(&self) -> usize {
        5 * self.n
    }
    pub fn theta(&self) -> usize {
        5 * self.n + 2 * self.m
    }
    pub fn dim(&self) -> usize {
        6 * self.n + 2 * self.m
    }
}

/// Structured view of the converter network state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConverterNetworkState<T: Scalar> {
    pub v_dc: DVector<T>,
    /// Inductor currents, alpha-beta pair per converter.
    pub i: DVector<T>,
    /// Capacitor voltages, alpha-beta pair per converter.
    pub v: DVector<T>,
    /// Line currents, alpha-beta pair per line.
    pub i_line: DVector<T>,
    pub theta: DVector<T>,
}

impl<T: Scalar> ConverterNetworkState<T> {
    pub fn zeros(layout: StateLayout) -> Self {
        let StateLayout { n, m } = layout;
        Self {
            v_dc: DVector::zeros(n),
            i: DVector::zeros(2 * n),
            v: DVector::zeros(2 * n),
            i_line: DVector::zeros(2 * m),
            theta: DVector::zeros(n),
        }
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.v_dc.len(), self.i_line.len() / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let lay = self.layout();
        check_len("i", 2 * lay.n, self.i.len())?;
        check_len("v", 2 * lay.n, self.v.len())?;
        check_len("theta", lay.n, self.theta.len())?;
        if self.i_line.len() % 2 != 0 {
            return Err(invalid("i_line", "length must be even"));
        }
        if self.to_vec().iter().any(|x| !x.is_finite()) {
            return Err(invalid("state", "all entries must be finite"));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.layout().dim());
        for block in [&self.v_dc, &self.i, &self.v, &self.i_line, &self.theta] {
            out.extend(block.iter().copied());
        }
        out
    }

    pub fn from_slice(layout: StateLayout, x: &[T]) -> Result<Self> {
        check_len("state", layout.dim(), x.len())?;
        let StateLayout { n, m } = layout;
        let block = |at: usize, len: usize| DVector::from_column_slice(&x[at..at + len]);
        Ok(Self {
            v_dc: block(layout.v_dc(), n),
            i: block(layout.i(), 2 * n),
            v: block(layout.v(), 2 * n),
            i_line: block(layout.i_line(), 2 * m),
            theta: block(layout.theta(), n),
        })
    }

    /// Rotates every alpha-beta pair by `angle`; DC voltages and controller
    /// angles are left unchanged.
    pub fn rotated(&self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let rot = |v: &DVector<T>| {
            let mut out = v.clone();
            for p in 0..v.len() / 2 {
                let (a, b) = (v[2 * p], v[2 * p + 1]);
                out[2 * p] = c * a - s * b;
                out[2 * p + 1] = s * a + c * b;
            }
            out
        };
        Self {
            v_dc: self.v_dc.clone(),
            i: rot(&self.i),
            v: rot(&self.v),
            i_line: rot(&self.i_line),
            theta: self.theta.clone(),
        }
    }
}

/// Shunt conductance step at one converter during `[t_on, t_off)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadEvent<T> {
    pub node: usize,
    pub delta_g: T,
    pub t_on: T,
    pub t_off: T,
}

/// Default load step in siemens; raises the loaded converter's conductance
/// by 10 %.
pub const DEFAULT_LOAD_STEP: f64 = 0.01;

impl<T: Scalar> LoadEvent<T> {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.node >= n {
            return Err(invalid(
                "event.node",
                format!("node {} out of range for {n} converters", self.node),
            ));
        }
        if !(self.delta_g >= T::zero()) || !self.delta_g.is_finite() {
            return Err(invalid("event.delta_G", "must be finite and non-negative"));
        }
        if !(self.t_on < self.t_off) || !self.t_on.is_finite() || !self.t_off.is_finite() {
            return Err(invalid("event", "requires finite t_on < t_off"));
        }
        Ok(())
    }

    pub fn window(&self) -> EventWindow<T> {
        EventWindow {
            label: format!("load step at converter {}", self.node),
            t_on: self.t_on,
            t_off: self.t_off,
        }
    }
}

/// Block-diagonal modulation matrix `U` (`2n x n`) with blocks
/// `A (cos theta_k, sin theta_k)`.
pub fn modulation_matrix<T: Scalar>(theta: &DVector<T>, amplitude: T) -> nalgebra::DMatrix<T> {
    let n = theta.len();
    let mut u = nalgebra::DMatrix::zeros(2 * n, n);
    for (k, &th) in theta.iter().enumerate() {
        let (s, c) = th.sin_cos();
        u[(2 * k, k)] = amplitude * c;
        u[(2 * k + 1, k)] = amplitude * s;
    }
    u
}

/// Net line current leaving each converter, alpha-beta pair per converter.
pub fn net_line_current<T: Scalar>(graph: &NetworkGraph<T>, i_line: &DVector<T>) -> DVector<T> {
    let mut net = DVector::zeros(2 * graph.node_count());
    for (e, &(k, j)) in graph.edges().iter().enumerate() {
        for axis in 0..2 {
            net[2 * k + axis] += i_line[2 * e + axis];
            net[2 * j + axis] -= i_line[2 * e + axis];
        }
    }
    net
}

/// Measured active power `v_k . i_net,k` at every converter.
pub fn measured_power<T: Scalar>(
    graph: &NetworkGraph<T>,
    state: &ConverterNetworkState<T>,
) -> DVector<T> {
    let net = net_line_current(graph, &state.i_line);
    DVector::from_fn(graph.node_count(), |k, _| {
        state.v[2 * k] * net[2 * k] + state.v[2 * k + 1] * net[2 * k + 1]
    })
}

/// Practical angular droop
/// `theta_k' = -(gamma_k (theta_k - theta*_k(t)) + P_k - P*_k) / (2 alpha_k) + omega*`.
pub fn practical_droop_rhs<T: Scalar>(
    t: T,
    theta: &DVector<T>,
    p_hat: &DVector<T>,
    p_hat_star: &DVector<T>,
    params: &ConverterNetworkParams<T>,
) -> DVector<T> {
    DVector::from_fn(theta.len(), |k, _| {
        droop_rate(params, k, t, theta[k], p_hat[k], p_hat_star[k])
    })
}

#[inline]
fn droop_rate<T: Scalar>(
    params: &ConverterNetworkParams<T>,
    k: usize,
    t: T,
    theta: T,
    p_hat: T,
    p_hat_star: T,
) -> T {
    let bracket = params.gamma[k] * (theta - params.nominal_angle(k, t)) + p_hat - p_hat_star;
    -bracket / (lit::<T>(2.0) * params.alpha[k]) + params.omega_star
}

/// How the controller angles evolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleMode {
    /// Practical angular droop feedback.
    Droop,
    /// Angles run open loop at `omega*`, i.e. stay on `theta*(t)` when
    /// started there. Used to settle the electrical network for `P*`.
    Nominal,
}

/// Closed-loop converter network, ready for integration.
#[derive(Debug, Clone)]
pub struct ConverterNetwork<T: Scalar> {
    params: ConverterNetworkParams<T>,
    events: Vec<LoadEvent<T>>,
    p_hat_star: DVector<T>,
    mode: AngleMode,
    layout: StateLayout,
}

impl<T: Scalar> ConverterNetwork<T> {
    pub fn new(
        params: ConverterNetworkParams<T>,
        events: Vec<LoadEvent<T>>,
        p_hat_star: DVector<T>,
    ) -> Result<Self> {
        params.validate()?;
        check_len("p_hat_star", params.node_count(), p_hat_star.len())?;
        for ev in &events {
            ev.validate(params.node_count())?;
        }
        let layout = params.layout();
        Ok(Self {
            params,
            events,
            p_hat_star,
            mode: AngleMode::Droop,
            layout,
        })
    }

    pub fn with_mode(mut self, mode: AngleMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn params(&self) -> &ConverterNetworkParams<T> {
        &self.params
    }

    pub fn events(&self) -> &[LoadEvent<T>] {
        &self.events
    }

    pub fn p_hat_star(&self) -> &DVector<T> {
        &self.p_hat_star
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn event_windows(&self) -> Vec<EventWindow<T>> {
        self.events.iter().map(LoadEvent::window).collect()
    }

    /// Conductance at converter `k` given which events are active.
    fn conductance(&self, k: usize, active: &[bool]) -> T {
        self.events
            .iter()
            .zip(active)
            .filter(|(ev, &on)| on && ev.node == k)
            .fold(self.params.g_ac, |g, (ev, _)| g + ev.delta_g)
    }

    /// Every event flag derived from `t` (for post-processing, not
    /// integration, where flags come from the step grid).
    pub fn active_at(&self, t: T) -> Vec<bool> {
        self.events
            .iter()
            .map(|ev| ev.t_on <= t && t < ev.t_off)
            .collect()
    }

    /// Measured power from a flat state vector.
    pub fn measured_power_flat(&self, x: &[T]) -> DVector<T> {
        let lay = self.layout;
        let mut p = DVector::zeros(lay.n);
        for (e, &(k, j)) in self.params.graph.edges().iter().enumerate() {
            for axis in 0..2 {
                let il = x[lay.i_line() + 2 * e + axis];
                p[k] += x[lay.v() + 2 * k + axis] * il;
                p[j] -= x[lay.v() + 2 * j + axis] * il;
            }
        }
        p
    }

    /// Controller frequencies `theta'` at `(t, x)`.
    pub fn frequencies(&self, t: T, x: &[T]) -> DVector<T> {
        let lay = self.layout;
        let p = self.measured_power_flat(x);
        DVector::from_fn(lay.n, |k, _| match self.mode {
            AngleMode::Droop => droop_rate(
                &self.params,
                k,
                t,
                x[lay.theta() + k],
                p[k],
                self.p_hat_star[k],
            ),
            AngleMode::Nominal => self.params.omega_star,
        })
    }

    /// Recorded outputs `[theta_k.., freq_k.., v_dc_k.., P_hat_k..]`.
    pub fn observables(&self, t: T, x: &[T]) -> Vec<T> {
        let lay = self.layout;
        let mut out = Vec::with_capacity(4 * lay.n);
        out.extend_from_slice(&x[lay.theta()..lay.theta() + lay.n]);
        out.extend(self.frequencies(t, x).iter().copied());
        out.extend_from_slice(&x[lay.v_dc()..lay.v_dc() + lay.n]);
        out.extend(self.measured_power_flat(x).iter().copied());
        out
    }

    pub fn observable_columns(&self) -> Vec<String> {
        let n = self.layout.n;
        let mut cols = Vec::with_capacity(4 * n);
        for name in ["theta", "freq", "v_dc", "P_hat"] {
            cols.extend((1..=n).map(|k| format!("{name}_{k}")));
        }
        cols
    }

    /// `1/2 C_dc |v_dc|^2 + 1/2 L |i|^2 + 1/2 C |v|^2 + 1/2 L_line |i_line|^2`.
    pub fn stored_energy(&self, x: &[T]) -> T {
        let lay = self.layout;
        let p = &self.params;
        let sq = |from: usize, len: usize| x[from..from + len].iter().fold(T::zero(), |a, &v| a + v * v);
        lit::<T>(0.5)
            * (p.c_dc * sq(lay.v_dc(), lay.n)
                + p.l_ac * sq(lay.i(), 2 * lay.n)
                + p.c_ac * sq(lay.v(), 2 * lay.n)
                + p.l_line * sq(lay.i_line(), 2 * lay.m))
    }

    /// `(injected, dissipated)` power; their difference is the rate of
    /// change of [`stored_energy`](Self::stored_energy).
    pub fn power_balance(&self, x: &[T], active: &[bool]) -> (T, T) {
        let lay = self.layout;
        let p = &self.params;
        let mut injected = T::zero();
        let mut dissipated = T::zero();
        for k in 0..lay.n {
            let vdc = x[lay.v_dc() + k];
            injected += vdc * (p.k_p * p.v_dc_star + p.i_dc_star[k]);
            dissipated += p.k_p * vdc * vdc;
            let g = self.conductance(k, active);
            for axis in 0..2 {
                let i = x[lay.i() + 2 * k + axis];
                let v = x[lay.v() + 2 * k + axis];
                dissipated += p.r_ac * i * i + g * v * v;
            }
        }
        for e in 0..2 * lay.m {
            let il = x[lay.i_line() + e];
            dissipated += p.r_line * il * il;
        }
        (injected, dissipated)
    }

    /// Integrates from `x0` on `[0, horizon]`, recording every `stride` steps.
    pub fn simulate(&self, x0: &[T], dt: T, horizon: T, stride: usize) -> Result<Trajectory<T>> {
        simulate(
            "converter",
            self,
            x0,
            dt,
            horizon,
            &self.event_windows(),
            stride,
        )
    }
}

impl<T: Scalar> Dynamics<T> for ConverterNetwork<T> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn eval(&self, t: T, x: &[T], active: &[bool], dx: &mut [T]) {
        let lay = self.layout;
        let p = &self.params;
        let half: T = lit(0.5);
        let (iv, ii, ivv, il, ith) = (lay.v_dc(), lay.i(), lay.v(), lay.i_line(), lay.theta());

        // Lines, and the net injection accumulated as -i_net into the v slots.
        for k in 0..2 * lay.n {
            dx[ivv + k] = T::zero();
        }
        for (e, &(k, j)) in p.graph.edges().iter().enumerate() {
            for axis in 0..2 {
                let cur = x[il + 2 * e + axis];
                dx[il + 2 * e + axis] =
                    (-p.r_line * cur + x[ivv + 2 * k + axis] - x[ivv + 2 * j + axis]) / p.l_line;
                dx[ivv + 2 * k + axis] -= cur;
                dx[ivv + 2 * j + axis] += cur;
            }
        }

        for k in 0..lay.n {
            let (s, c) = x[ith + k].sin_cos();
            let (ua, ub) = (p.amplitude * c, p.amplitude * s);
            let vdc = x[iv + k];
            let (ia, ib) = (x[ii + 2 * k], x[ii + 2 * k + 1]);
            let (va, vb) = (x[ivv + 2 * k], x[ivv + 2 * k + 1]);
            let (neg_net_a, neg_net_b) = (dx[ivv + 2 * k], dx[ivv + 2 * k + 1]);
            let p_hat = -(va * neg_net_a + vb * neg_net_b);
            let g = self.conductance(k, active);

            dx[iv + k] = (-p.k_p * (vdc - p.v_dc_star) - half * (ua * ia + ub * ib)
                + p.i_dc_star[k])
                / p.c_dc;
            dx[ii + 2 * k] = (-p.r_ac * ia + half * ua * vdc - va) / p.l_ac;
            dx[ii + 2 * k + 1] = (-p.r_ac * ib + half * ub * vdc - vb) / p.l_ac;
            dx[ivv + 2 * k] = (-g * va + ia + neg_net_a) / p.c_ac;
            dx[ivv + 2 * k + 1] = (-g * vb + ib + neg_net_b) / p.c_ac;
            dx[ith + k] = match self.mode {
                AngleMode::Droop => droop_rate(p, k, t, x[ith + k], p_hat, self.p_hat_star[k]),
                AngleMode::Nominal => p.omega_star,
            };
        }
    }
}

/// Result of the nominal settling run.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalOperatingPoint<T: Scalar> {
    /// Controller power reference `P*`.
    pub p_hat_star: DVector<T>,
    /// Settled state re-expressed at `t = 0` (angles on `theta*_0`).
    pub state: ConverterNetworkState<T>,
    /// Largest change of measured power over the final tenth of the run.
    pub drift: T,
}

/// Settles the network with the angles held on `theta*(t)` and no events,
/// then evaluates the measured power there.
///
/// Starts from `v_dc = v*_dc` with zero AC quantities. The final alpha-beta
/// vectors are rotated back by `omega* horizon` so the returned state is
/// consistent with `theta = theta*_0` at `t = 0`.
pub fn nominal_power_reference<T: Scalar>(
    params: &ConverterNetworkParams<T>,
    dt: T,
    horizon: T,
) -> Result<NominalOperatingPoint<T>> {
    let n = params.node_count();
    let net = ConverterNetwork::new(params.clone(), Vec::new(), DVector::zeros(n))?
        .with_mode(AngleMode::Nominal);
    let mut x0 = ConverterNetworkState::zeros(params.layout());
    x0.v_dc.fill(params.v_dc_star);
    x0.theta.copy_from(&params.theta_star0);
    let steps = (horizon / dt)
        .round()
        .to_usize()
        .ok_or_else(|| invalid("pre-run horizon", "out of range"))?;
    let stride = (steps / 10).max(1);
    let traj = net.simulate(&x0.to_vec(), dt, horizon, stride)?;
    let end = ConverterNetworkState::from_slice(net.layout(), &traj.final_state)?;
    let p_hat_star = measured_power(&params.graph, &end);
    let drift = match traj.states.len() {
        0 | 1 => T::zero(),
        len => (net.measured_power_flat(&traj.states[len - 2]) - &p_hat_star).amax(),
    };
    if p_hat_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("nominal power reference is not finite".into()));
    }
    let mut state = end.rotated(-params.omega_star * traj.final_time);
    state.theta.copy_from(&params.theta_star0);
    Ok(NominalOperatingPoint {
        p_hat_star,
        state,
        drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn two_node() -> ConverterNetworkParams<f64> {
        ConverterNetworkParams::defaults(NetworkGraph::path(2, 1.0).unwrap())
    }

    #[test]
    fn modulation_blocks() {
        let u = modulation_matrix(&dvector![0.0, 1.3, -2.0], 0.33);
        assert_eq!(u[(0, 0)], 0.33);
        assert_eq!(u[(1, 0)], 0.0);
        let gram = u.transpose() * &u;
        assert_abs_diff_eq!(gram, nalgebra::DMatrix::identity(3, 3) * 0.33 * 0.33, epsilon = 1e-15);
    }

    #[test]
    fn measured_power_examples() {
        let p = two_node();
        let mut s = ConverterNetworkState::zeros(p.layout());
        assert_eq!(measured_power(&p.graph, &s), DVector::zeros(2));
        s.v[0] = 1.0;
        s.i_line[0] = 2.0;
        assert_eq!(net_line_current(&p.graph, &s.i_line), dvector![2.0, 0.0, -2.0, 0.0]);
        assert_eq!(measured_power(&p.graph, &s)[0], 2.0);
    }

    #[test]
    fn network_power_identity() {
        let p = ConverterNetworkParams::<f64>::testcase();
        let mut s = ConverterNetworkState::zeros(p.layout());
        for (i, v) in s.v.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).sin() * 300.0;
        }
        for (i, c) in s.i_line.iter_mut().enumerate() {
            *c = (i as f64 * 1.9).cos() * 40.0;
        }
        let total = measured_power(&p.graph, &s).sum();
        let mut expected = 0.0;
        for (e, &(k, j)) in p.graph.edges().iter().enumerate() {
            for a in 0..2 {
                expected += (s.v[2 * k + a] - s.v[2 * j + a]) * s.i_line[2 * e + a];
            }
        }
        assert_abs_diff_eq!(total, expected, epsilon = 1e-9);
    }

    #[test]
    fn droop_rate_examples() {
        let p = two_node();
        let theta = DVector::from_fn(2, |k, _| p.nominal_angle(k, 0.3));
        let rate = practical_droop_rhs(0.3, &theta, &dvector![5.0, 7.0], &dvector![5.0, 7.0], &p);
        assert_abs_diff_eq!(rate, DVector::from_element(2, p.omega_star), epsilon = 1e-9);
        let shifted = theta.add_scalar(1e-6);
        let rate = practical_droop_rhs(0.3, &shifted, &dvector![0.0, 0.0], &dvector![0.0, 0.0], &p);
        assert_abs_diff_eq!(rate[0] - p.omega_star, -1.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_electrical_state_rhs() {
        let p = ConverterNetworkParams::<f64>::testcase();
        let net = ConverterNetwork::new(p.clone(), vec![], DVector::zeros(3)).unwrap();
        let mut s = ConverterNetworkState::zeros(p.layout());
        s.theta = dvector![0.3, -1.0, 2.0];
        let mut dx = vec![0.0; net.dim()];
        net.eval(0.0, &s.to_vec(), &[], &mut dx);
        for k in 0..3 {
            assert_abs_diff_eq!(dx[k], (p.k_p * p.v_dc_star + 500.0) / p.c_dc, epsilon = 1e-6);
        }
        assert!(dx[3..p.layout().theta()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pack_roundtrip_and_rotation() {
        let p = ConverterNetworkParams::<f64>::testcase();
        let lay = p.layout();
        assert_eq!(lay.dim(), 6 * 3 + 2 * 3);
        let x: Vec<f64> = (0..lay.dim()).map(|i| i as f64 * 0.5 - 3.0).collect();
        let s = ConverterNetworkState::from_slice(lay, &x).unwrap();
        assert_eq!(s.to_vec(), x);
        let back = s.rotated(0.7).rotated(-0.7);
        for (a, b) in back.to_vec().iter().zip(&x) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // Rotation preserves measured power.
        let p0 = measured_power(&p.graph, &s);
        let p1 = measured_power(&p.graph, &s.rotated(2.1));
        assert_abs_diff_eq!(p0, p1, epsilon = 1e-9);
    }

    #[test]
    fn events_switch_conductance() {
        let p = two_node();
        let ev = LoadEvent {
            node: 1,
            delta_g: 0.05,
            t_on: 0.1,
            t_off: 0.2,
        };
        let net = ConverterNetwork::new(p, vec![ev], DVector::zeros(2)).unwrap();
        assert_abs_diff_eq!(net.conductance(1, &[true]), 0.15, epsilon = 1e-15);
        assert_eq!(net.conductance(0, &[true]), 0.1);
        assert_eq!(net.active_at(0.2), vec![false]);
        assert_eq!(net.active_at(0.1), vec![true]);
    }

    #[test]
    fn parameter_validation() {
        let mut p = two_node();
        p.amplitude = 1.0;
        assert!(p.validate().is_err());
        let mut p = two_node();
        p.alpha[1] = -0.5;
        let msg = p.validate().unwrap_err().to_string();
        assert!(msg.contains("alpha[1]"), "{msg}");
        let p = two_node();
        let bad = LoadEvent {
            node: 0,
            delta_g: 0.1,
            t_on: 0.5,
            t_off: 0.5,
        };
        assert!(ConverterNetwork::new(p, vec![bad], DVector::zeros(2)).is_err());
    }

    #[test]
    fn symmetric_network_has_equal_reference() {
        let mut p = two_node();
        p.theta_star0 = dvector![0.4, 0.4];
        let op = nominal_power_reference(&p, 1e-6, 0.02).unwrap();
        assert_abs_diff_eq!(op.p_hat_star[0], op.p_hat_star[1], epsilon = 1e-6);
        // Identical voltages drive no line current.
        assert!(op.p_hat_star.amax() < 1e-6);
    }
}
