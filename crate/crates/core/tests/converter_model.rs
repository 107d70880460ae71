use angdroop::converter::{
    nominal_power_reference, AngleMode, ConverterNetwork, ConverterNetworkParams,
    ConverterNetworkState, LoadEvent, DEFAULT_LOAD_STEP, TESTCASE_THETA0,
};
use angdroop::netgraph::NetworkGraph;
use angdroop::sim::{Dynamics, Rk4};
use nalgebra::{DMatrix, DVector};

/// Residual of the single-converter algebraic equilibrium with the
/// modulation vector frozen, unknowns `(v_dc, i_a, i_b, v_a, v_b)`.
fn single_converter_residual(p: &ConverterNetworkParams<f64>, u: [f64; 2], z: &[f64]) -> DVector<f64> {
    let (vdc, i, v) = (z[0], [z[1], z[2]], [z[3], z[4]]);
    DVector::from_vec(vec![
        p.k_p * (vdc - p.v_dc_star) + 0.5 * (u[0] * i[0] + u[1] * i[1]) - p.i_dc_star[0],
        p.r_ac * i[0] - 0.5 * u[0] * vdc + v[0],
        p.r_ac * i[1] - 0.5 * u[1] * vdc + v[1],
        p.g_ac * v[0] - i[0],
        p.g_ac * v[1] - i[1],
    ])
}

/// Damped Newton with a central-difference Jacobian.
fn newton(f: impl Fn(&[f64]) -> DVector<f64>, mut z: Vec<f64>) -> Vec<f64> {
    for _ in 0..50 {
        let r = f(&z);
        if r.amax() < 1e-11 {
            break;
        }
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for c in 0..n {
            let h = 1e-6 * (1.0 + z[c].abs());
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus[c] += h;
            minus[c] -= h;
            jac.set_column(c, &((f(&plus) - f(&minus)) / (2.0 * h)));
        }
        let step = jac.lu().solve(&r).expect("nonsingular Jacobian");
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a - scale * s).collect();
            if f(&trial).amax() < r.amax() || scale < 1e-6 {
                z = trial;
                break;
            }
            scale *= 0.5;
        }
    }
    z
}

#[test]
fn single_converter_equilibrium_matches_network_rhs() {
    let graph = NetworkGraph::new(1, []).unwrap();
    let mut params = ConverterNetworkParams::defaults(graph);
    params.theta_star0[0] = 0.4;
    let u = [params.amplitude * 0.4f64.cos(), params.amplitude * 0.4f64.sin()];
    let z = newton(|z| single_converter_residual(&params, u, z), vec![1000.0, 0.0, 0.0, 0.0, 0.0]);
    let residual = single_converter_residual(&params, u, &z);
    assert!(residual.amax() < 1e-9, "residual {}", residual.amax());

    let net = ConverterNetwork::new(params.clone(), vec![], DVector::zeros(1)).unwrap();
    let mut state = ConverterNetworkState::zeros(params.layout());
    state.v_dc[0] = z[0];
    state.i.copy_from_slice(&z[1..3]);
    state.v.copy_from_slice(&z[3..5]);
    state.theta[0] = 0.4;
    let mut dx = vec![0.0; net.dim()];
    net.eval(0.0, &state.to_vec(), &[], &mut dx);
    let electrical = &dx[..net.layout().theta()];
    // Derivatives are residuals divided by small storage constants.
    assert!(electrical.iter().all(|d| d.abs() < 1e-3), "{electrical:?}");
}

/// Steady state of the network with all angles on `theta*(t)`, solved in the
/// frame rotating at `omega*` where it is a linear algebraic system.
fn rotating_frame_steady_state(p: &ConverterNetworkParams<f64>) -> ConverterNetworkState<f64> {
    let lay = p.layout();
    let (n, m) = (lay.n, lay.m);
    let dim = 5 * n + 2 * m;
    let w = p.omega_star;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    let vdc = |k: usize| k;
    let cur = |k: usize, ax: usize| n + 2 * k + ax;
    let volt = |k: usize, ax: usize| 3 * n + 2 * k + ax;
    let line = |e: usize, ax: usize| 5 * n + 2 * e + ax;
    // Rotation generator J = [[0, -1], [1, 0]] couples the two axes.
    let j_entry = |row: usize, col: usize| -> f64 {
        match (row, col) {
            (0, 1) => -1.0,
            (1, 0) => 1.0,
            _ => 0.0,
        }
    };
    for k in 0..n {
        let u = [
            p.amplitude * p.theta_star0[k].cos(),
            p.amplitude * p.theta_star0[k].sin(),
        ];
        a[(vdc(k), vdc(k))] = -p.k_p;
        for ax in 0..2 {
            a[(vdc(k), cur(k, ax))] = -0.5 * u[ax];
        }
        b[vdc(k)] = -(p.k_p * p.v_dc_star + p.i_dc_star[k]);
        for ax in 0..2 {
            let r = cur(k, ax);
            a[(r, cur(k, ax))] -= p.r_ac;
            for bx in 0..2 {
                a[(r, cur(k, bx))] -= w * p.l_ac * j_entry(ax, bx);
            }
            a[(r, vdc(k))] += 0.5 * u[ax];
            a[(r, volt(k, ax))] -= 1.0;

            let r = volt(k, ax);
            a[(r, volt(k, ax))] -= p.g_ac;
            for bx in 0..2 {
                a[(r, volt(k, bx))] -= w * p.c_ac * j_entry(ax, bx);
            }
            a[(r, cur(k, ax))] += 1.0;
        }
    }
    for (e, &(k, j)) in p.graph.edges().iter().enumerate() {
        for ax in 0..2 {
            let r = line(e, ax);
            a[(r, line(e, ax))] -= p.r_line;
            for bx in 0..2 {
                a[(r, line(e, bx))] -= w * p.l_line * j_entry(ax, bx);
            }
            a[(r, volt(k, ax))] += 1.0;
            a[(r, volt(j, ax))] -= 1.0;
            a[(volt(k, ax), line(e, ax))] -= 1.0;
            a[(volt(j, ax), line(e, ax))] += 1.0;
        }
    }
    let z = a.lu().solve(&b).expect("nonsingular steady-state system");
    let mut state = ConverterNetworkState::zeros(lay);
    state.v_dc.copy_from(&z.rows(0, n));
    state.i.copy_from(&z.rows(n, 2 * n));
    state.v.copy_from(&z.rows(3 * n, 2 * n));
    state.i_line.copy_from(&z.rows(5 * n, 2 * m));
    state.theta.copy_from(&p.theta_star0);
    state
}

#[test]
fn settling_prerun_matches_rotating_frame_solution() {
    let params = ConverterNetworkParams::<f64>::testcase();
    let op = nominal_power_reference(&params, 1e-7, 0.05).unwrap();
    let oracle = rotating_frame_steady_state(&params);
    let got = op.state.to_vec();
    let want = oracle.to_vec();
    for (idx, (g, w)) in got.iter().zip(&want).enumerate() {
        assert!((g - w).abs() <= 1e-5 * (1.0 + w.abs()), "entry {idx}: {g} vs {w}");
    }
    let p_oracle = angdroop::converter::measured_power(&params.graph, &oracle);
    for k in 0..3 {
        assert!((op.p_hat_star[k] - p_oracle[k]).abs() < 1e-3 * (1.0 + p_oracle[k].abs()));
    }
    assert!(op.drift < 1e-2, "drift {}", op.drift);
}

#[test]
fn energy_balance_over_one_step() {
    let params = ConverterNetworkParams::<f64>::testcase();
    let event = LoadEvent {
        node: 0,
        delta_g: DEFAULT_LOAD_STEP,
        t_on: 0.0,
        t_off: 1.0,
    };
    let net = ConverterNetwork::new(params.clone(), vec![event], DVector::zeros(3)).unwrap();
    let mut state = rotating_frame_steady_state(&params);
    state.theta = DVector::from_column_slice(&TESTCASE_THETA0);
    // Move off equilibrium so stored energy actually changes.
    state.i_line.iter_mut().enumerate().for_each(|(i, c)| *c += 5.0 * (i as f64).sin());
    state.v_dc[1] += 20.0;
    let mut x = state.to_vec();
    let dt = 1e-7;
    let active = [true];
    let e0 = net.stored_energy(&x);
    let (in0, out0) = net.power_balance(&x, &active);
    Rk4::new(net.dim()).step(&net, 0.0, &mut x, dt, &active);
    let e1 = net.stored_energy(&x);
    let (in1, out1) = net.power_balance(&x, &active);
    let rate = (e1 - e0) / dt;
    let balance = 0.5 * ((in0 - out0) + (in1 - out1));
    assert!(
        (rate - balance).abs() < 1e-6 * (in0.abs() + out0.abs()),
        "dE/dt {rate} vs net power {balance}"
    );
}

#[test]
fn reruns_are_bit_identical() {
    let params = ConverterNetworkParams::<f64>::testcase();
    let x0 = rotating_frame_steady_state(&params);
    let mut x0 = x0;
    x0.theta = DVector::from_column_slice(&TESTCASE_THETA0);
    let event = LoadEvent {
        node: 0,
        delta_g: DEFAULT_LOAD_STEP,
        t_on: 0.001,
        t_off: 0.002,
    };
    let net = ConverterNetwork::new(params, vec![event], DVector::from_element(3, 10.0)).unwrap();
    let a = net.simulate(&x0.to_vec(), 1e-7, 0.003, 100).unwrap();
    let b = net.simulate(&x0.to_vec(), 1e-7, 0.003, 100).unwrap();
    assert_eq!(a, b);
}

#[test]
fn nominal_mode_keeps_angles_on_schedule() {
    let params = ConverterNetworkParams::<f64>::testcase();
    let net = ConverterNetwork::new(params.clone(), vec![], DVector::zeros(3))
        .unwrap()
        .with_mode(AngleMode::Nominal);
    let x0 = rotating_frame_steady_state(&params);
    let traj = net.simulate(&x0.to_vec(), 1e-7, 1e-3, 1000).unwrap();
    let lay = net.layout();
    for k in 0..3 {
        let th = traj.final_state[lay.theta() + k];
        assert!((th - params.nominal_angle(k, traj.final_time)).abs() < 1e-12);
    }
    // Started on the steady state, the electrical state just rotates.
    let end = ConverterNetworkState::from_slice(lay, &traj.final_state)
        .unwrap()
        .rotated(-params.omega_star * traj.final_time);
    let electrical = lay.theta();
    for (g, w) in end.to_vec()[..electrical].iter().zip(&x0.to_vec()[..electrical]) {
        assert!((g - w).abs() <= 1e-6 * (1.0 + w.abs()));
    }
}

#[test]
fn dc_voltage_equilibrium_follows_dc_side_balance() {
    // Per converter at steady state: K_p (v_dc - v*) + 1/2 u.i = i*_dc.
    let params = ConverterNetworkParams::<f64>::testcase();
    let s = rotating_frame_steady_state(&params);
    for k in 0..3 {
        let th = params.theta_star0[k];
        let ui = params.amplitude * (th.cos() * s.i[2 * k] + th.sin() * s.i[2 * k + 1]);
        let lhs = params.k_p * (s.v_dc[k] - params.v_dc_star) + 0.5 * ui;
        assert!((lhs - params.i_dc_star[k]).abs() < 1e-8);
    }
}

#[test]
#[ignore = "with the reference parameters v_dc settles near 2 v*_dc, outside the (0.5, 1.5) v*_dc envelope"]
fn dc_voltage_stays_in_sanity_envelope() {
    let params = ConverterNetworkParams::<f64>::testcase();
    let op = nominal_power_reference(&params, 1e-7, 0.05).unwrap();
    for &v in op.state.v_dc.iter() {
        assert!(v > 0.5 * params.v_dc_star && v < 1.5 * params.v_dc_star, "v_dc = {v}");
    }
}
