//! Fixed-step RK4 integration with grid-aligned switching events.
//!
//! Right-hand sides write into caller-owned buffers so the inner loop does not
//! allocate; the detailed converter model relies on this to run ~10^7 steps.

use std::io::{self, Write};
use std::ops::ControlFlow;

use crate::error::{invalid, Error, Result};
use crate::scalar::{from_usize, lit, to_f64, Scalar};

/// Autonomous-between-events dynamics `dx = f(t, x; active)`.
///
/// `active[e]` tells whether event window `e` is switched on during the
/// current step. Implementations must be pure.
pub trait Dynamics<T: Scalar> {
    fn dim(&self) -> usize;
    fn eval(&self, t: T, x: &[T], active: &[bool], dx: &mut [T]);
}

impl<T: Scalar, D: Dynamics<T> + ?Sized> Dynamics<T> for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: T, x: &[T], active: &[bool], dx: &mut [T]) {
        (**self).eval(t, x, active, dx)
    }
}

/// Adapts a closure `f(t, x, dx)` that ignores events.
pub struct FnDynamics<F> {
    dim: usize,
    f: F,
}

impl<F> FnDynamics<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T: Scalar, F: Fn(T, &[T], &mut [T])> Dynamics<T> for FnDynamics<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: T, x: &[T], _active: &[bool], dx: &mut [T]) {
        (self.f)(t, x, dx)
    }
}

/// Reusable stage storage for the classical four-stage Runge-Kutta scheme.
#[derive(Debug, Clone)]
pub struct Rk4<T> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    stage: Vec<T>,
}

impl<T: Scalar> Rk4<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![T::zero(); dim],
            k2: vec![T::zero(); dim],
            k3: vec![T::zero(); dim],
            k4: vec![T::zero(); dim],
            stage: vec![T::zero(); dim],
        }
    }

    /// Advances `x` in place from `t` to `t + dt`.
    pub fn step<D: Dynamics<T> + ?Sized>(
        &mut self,
        sys: &D,
        t: T,
        x: &mut [T],
        dt: T,
        active: &[bool],
    ) {
        let half = dt * lit(0.5);
        let sixth = dt / lit(6.0);
        sys.eval(t, x, active, &mut self.k1);
        for ((s, &xi), &k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k1) {
            *s = xi + half * k;
        }
        sys.eval(t + half, &self.stage, active, &mut self.k2);
        for ((s, &xi), &k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k2) {
            *s = xi + half * k;
        }
        sys.eval(t + half, &self.stage, active, &mut self.k3);
        for ((s, &xi), &k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k3) {
            *s = xi + dt * k;
        }
        sys.eval(t + dt, &self.stage, active, &mut self.k4);
        let two: T = lit(2.0);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += sixth * (self.k1[i] + two * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

/// Single RK4 step for a plain right-hand side `f(t, x, dx)`.
pub fn rk4_step<T: Scalar>(
    rhs: impl Fn(T, &[T], &mut [T]),
    t: T,
    x: &[T],
    dt: T,
) -> Result<Vec<T>> {
    if !(dt > T::zero()) {
        return Err(invalid("dt", "step size must be positive"));
    }
    let sys = FnDynamics::new(x.len(), rhs);
    let mut out = x.to_vec();
    Rk4::new(x.len()).step(&sys, t, &mut out, dt, &[]);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFiniteState {
            t: to_f64(t + dt),
            last_finite_t: to_f64(t),
        })
    }
}

/// A time window during which the dynamics switch to alternative parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow<T> {
    pub label: String,
    pub t_on: T,
    pub t_off: T,
}

/// Event window snapped onto the integration grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepWindow {
    pub step_on: usize,
    pub step_off: usize,
}

impl StepWindow {
    /// Active for the step starting at grid index `k`.
    pub fn is_active(&self, k: usize) -> bool {
        self.step_on <= k && k < self.step_off
    }
}

fn snap<T: Scalar>(what: &str, t: T, dt: T, log: &mut Vec<String>) -> Result<usize> {
    if !(t >= T::zero()) || !t.is_finite() {
        return Err(invalid(what, format!("time must be finite and non-negative, got {t}")));
    }
    let steps = (t / dt).round();
    let snapped = steps * dt;
    if (snapped - t).abs() > dt * lit(1e-6) {
        log.push(format!(
            "warning: {what} = {t} s is not a multiple of dt = {dt} s; snapped to {snapped} s"
        ));
    }
    steps
        .to_usize()
        .ok_or_else(|| invalid(what, "step count out of range"))
}

/// Grid description shared by [`integrate`] and [`simulate`].
#[derive(Debug, Clone)]
pub struct Grid {
    pub steps: usize,
    pub windows: Vec<StepWindow>,
    pub log: Vec<String>,
}

impl Grid {
    pub fn new<T: Scalar>(dt: T, horizon: T, events: &[EventWindow<T>]) -> Result<Self> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(invalid("dt", "step size must be positive"));
        }
        let mut log = Vec::new();
        let steps = snap("horizon", horizon, dt, &mut log)?;
        let mut windows = Vec::with_capacity(events.len());
        for ev in events {
            if !(ev.t_on < ev.t_off) {
                return Err(invalid(
                    &format!("event `{}`", ev.label),
                    "t_on must precede t_off",
                ));
            }
            let step_on = snap(&format!("event `{}` t_on", ev.label), ev.t_on, dt, &mut log)?;
            let step_off = snap(&format!("event `{}` t_off", ev.label), ev.t_off, dt, &mut log)?;
            log.push(format!(
                "event `{}` active on [{}, {}) s",
                ev.label,
                from_usize::<T>(step_on) * dt,
                from_usize::<T>(step_off) * dt
            ));
            windows.push(StepWindow { step_on, step_off });
        }
        Ok(Self {
            steps,
            windows,
            log,
        })
    }
}

/// Integrates `steps` fixed steps, calling `observe(k, t_k, x_k)` after
/// every completed step (`k >= 1`). Stops early when the observer breaks.
///
/// Returns the number of steps taken. Aborts on the first non-finite state.
pub fn integrate<T: Scalar, D: Dynamics<T> + ?Sized>(
    sys: &D,
    x: &mut [T],
    dt: T,
    steps: usize,
    windows: &[StepWindow],
    mut observe: impl FnMut(usize, T, &[T]) -> ControlFlow<()>,
) -> Result<usize> {
    assert_eq!(x.len(), sys.dim(), "state dimension");
    let mut rk = Rk4::new(sys.dim());
    let mut active = vec![false; windows.len()];
    for k in 0..steps {
        for (flag, w) in active.iter_mut().zip(windows) {
            *flag = w.is_active(k);
        }
        let t = from_usize::<T>(k) * dt;
        rk.step(sys, t, x, dt, &active);
        let t_next = from_usize::<T>(k + 1) * dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                t: to_f64(t_next),
                last_finite_t: to_f64(t),
            });
        }
        if observe(k + 1, t_next, x).is_break() {
            return Ok(k + 1);
        }
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta<T> {
    pub model: String,
    pub dt: T,
    pub record_stride: usize,
    pub event_log: Vec<String>,
}

/// States recorded every `record_stride` steps, plus the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    pub final_time: T,
    pub final_state: Vec<T>,
    pub meta: TrajectoryMeta<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Recorded samples as `(t, x)` pairs.
    pub fn samples(&self) -> impl Iterator<Item = (T, &[T])> + '_ {
        self.times
            .iter()
            .copied()
            .zip(self.states.iter().map(Vec::as_slice))
    }

    /// Derived trajectory with every recorded state replaced by `f(t, x)`.
    pub fn map(&self, mut f: impl FnMut(T, &[T]) -> Vec<T>) -> Trajectory<T> {
        Trajectory {
            times: self.times.clone(),
            states: self.samples().map(|(t, x)| f(t, x)).collect(),
            final_time: self.final_time,
            final_state: f(self.final_time, &self.final_state),
            meta: self.meta.clone(),
        }
    }

    /// Writes a header row and one row per recorded sample, floats in
    /// 17-significant-digit scientific notation.
    pub fn write_csv<W: Write>(&self, mut out: W, columns: &[String]) -> io::Result<()> {
        writeln!(out, "t,{}", columns.join(","))?;
        for (t, x) in self.samples() {
            write!(out, "{}", format_float(to_f64(t)))?;
            for v in x {
                write!(out, ",{}", format_float(to_f64(*v)))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// 17 significant digits, round-trip exact for `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Integrates on `[0, horizon]` and records every `record_stride`-th state.
pub fn simulate<T: Scalar, D: Dynamics<T> + ?Sized>(
    model: &str,
    sys: &D,
    x0: &[T],
    dt: T,
    horizon: T,
    events: &[EventWindow<T>],
    record_stride: usize,
) -> Result<Trajectory<T>> {
    if record_stride == 0 {
        return Err(invalid("record_stride", "must be at least 1"));
    }
    if x0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            name: "x0".into(),
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("x0", "initial state must be finite"));
    }
    let grid = Grid::new(dt, horizon, events)?;
    let mut times = vec![T::zero()];
    let mut states = vec![x0.to_vec()];
    let mut x = x0.to_vec();
    integrate(sys, &mut x, dt, grid.steps, &grid.windows, |k, t, state| {
        if k % record_stride == 0 {
            times.push(t);
            states.push(state.to_vec());
        }
        ControlFlow::Continue(())
    })?;
    Ok(Trajectory {
        times,
        states,
        final_time: from_usize::<T>(grid.steps) * dt,
        final_state: x,
        meta: TrajectoryMeta {
            model: model.to_string(),
            dt,
            record_stride,
            event_log: grid.log,
        },
    })
}

/// Reference value a tracked quantity is compared against.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference<T> {
    Scalar(T),
    Vector(Vec<T>),
}

impl<T: Scalar> Reference<T> {
    fn at(&self, i: usize) -> T {
        match self {
            Reference::Scalar(v) => *v,
            Reference::Vector(v) => v[i],
        }
    }
}

/// Quantity extracted from each recorded state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tracked {
    /// `max_i |x_i - ref_i|`.
    MaxAbsError,
    /// `|x_i - ref_i|` for one component.
    Component(usize),
    /// `|var(x) - ref|` with `var(x) = (1/n) sum (x_i - mean)^2`.
    Variance,
}

impl Tracked {
    fn error<T: Scalar>(self, x: &[T], reference: &Reference<T>) -> T {
        match self {
            Tracked::MaxAbsError => x
                .iter()
                .enumerate()
                .map(|(i, &v)| (v - reference.at(i)).abs())
                .fold(T::zero(), |a, b| if b > a || !b.is_finite() { b } else { a }),
            Tracked::Component(i) => (x[i] - reference.at(i)).abs(),
            Tracked::Variance => {
                let n: T = from_usize(x.len());
                let mean = x.iter().fold(T::zero(), |a, &b| a + b) / n;
                let var = x.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
                (var - reference.at(0)).abs()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettleMetrics<T> {
    /// First recorded time after which the error stays within tolerance;
    /// `None` when the tolerance is violated at the final sample.
    pub settling_time: Option<T>,
    pub final_error: T,
    pub peak_deviation: T,
}

impl<T> SettleMetrics<T> {
    pub fn settled(&self) -> bool {
        self.settling_time.is_some()
    }
}

/// Settling metrics of `tracked` against `reference` over the recorded samples.
///
/// The final state is included as the last sample when it was not recorded.
pub fn settle_metrics<T: Scalar>(
    traj: &Trajectory<T>,
    reference: &Reference<T>,
    tracked: Tracked,
    tolerance: T,
) -> SettleMetrics<T> {
    let mut samples: Vec<(T, T)> = traj
        .samples()
        .map(|(t, x)| (t, tracked.error(x, reference)))
        .collect();
    if samples.last().map_or(true, |&(t, _)| t < traj.final_time) {
        samples.push((traj.final_time, tracked.error(&traj.final_state, reference)));
    }
    let peak_deviation = samples
        .iter()
        .fold(T::zero(), |a, &(_, e)| if e > a { e } else { a });
    let final_error = samples.last().map(|&(_, e)| e).unwrap_or_else(T::zero);
    let mut settling_time = None;
    for &(t, e) in samples.iter().rev() {
        if e <= tolerance {
            settling_time = Some(t);
        } else {
            break;
        }
    }
    SettleMetrics {
        settling_time,
        final_error,
        peak_deviation,
    }
}
