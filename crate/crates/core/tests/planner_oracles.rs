mod common;

use common::{exact_translation, random_estimate, random_state, relative_error};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shplan::freespace::{FreeSpaceEstimate, SolveDiagnostics};
use shplan::planner::{
    dynamics_step, solve_mpc, AgentState, Bounds, ControlInput, DynamicsParams, PlannerParams,
    ShootingProblem,
};
use shplan::sh_basis::RealShExpansion;

#[test]
fn rk4_matches_matrix_exponential() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dp = DynamicsParams::new(0.3, 1.0, 0.3, 1.0, 0.5);
    for _ in 0..50 {
        let mut x = random_state(&mut rng);
        x.psi_dot = 0.0;
        let u = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let next = dynamics_step(&x, &ControlInput::new(u, 0.0), &dp);
        let (p, v) = exact_translation(&x, &u, 0.3, 1.0, 0.5);
        assert!((next.p - p).amax() < 1e-6, "{:e}", (next.p - p).amax());
        assert!((next.v - v).amax() < 1e-6);
        assert!((next.psi - x.psi).abs() < 1e-12);
    }
}

#[test]
fn heading_channel_matches_closed_form() {
    let dp = DynamicsParams::new(0.3, 1.0, 0.4, 2.0, 0.5);
    let x = AgentState {
        psi: 0.2,
        psi_dot: -0.3,
        ..AgentState::at_rest(Vector3::zeros())
    };
    let u = 0.7;
    let next = dynamics_step(&x, &ControlInput::new(Vector3::zeros(), u), &dp);
    let target = 2.0 * u;
    let decay = (-0.5f64 / 0.4).exp();
    let rate = target + (x.psi_dot - target) * decay;
    let angle = x.psi + target * 0.5 + (x.psi_dot - target) * 0.4 * (1.0 - decay);
    assert!((next.psi_dot - rate).abs() < 1e-8);
    assert!((next.psi - angle).abs() < 1e-8);
}

#[test]
fn shooting_derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dp = DynamicsParams::new(0.3, 1.0, 0.3, 1.0, 0.5);
    let params = PlannerParams::new(4, Bounds::symmetric(Vector3::repeat(1.0), 1.0));
    for _ in 0..20 {
        let est = random_estimate(&mut rng, 4);
        let prob = ShootingProblem {
            est: &est,
            x0: random_state(&mut rng),
            goal: Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                0.0,
            ),
            params: &params,
            dynamics: &dp,
        };
        let u = DVector::from_fn(prob.num_vars(), |_, _| rng.random_range(-1.0..1.0));
        let eval = prob.evaluate(&u);
        let h = 1e-6;
        let mut fd_grad = DVector::zeros(u.len());
        let mut fd_jac = DMatrix::zeros(eval.constraints.len(), u.len());
        for i in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += h;
            dn[i] -= h;
            fd_grad[i] = (prob.cost(&up) - prob.cost(&dn)) / (2.0 * h);
            fd_jac.set_column(
                i,
                &((prob.constraints(&up) - prob.constraints(&dn)) / (2.0 * h)),
            );
        }
        assert!(relative_error(&eval.gradient, &fd_grad) < 1e-5);
        assert!((&eval.constraints - prob.constraints(&u)).amax() < 1e-12);
        assert!((prob.cost(&u) - eval.cost).abs() < 1e-12 * eval.cost.max(1.0));
        for r in 0..fd_jac.nrows() {
            let a = eval.jacobian.row(r).transpose();
            let n = fd_jac.row(r).transpose();
            assert!(relative_error(&a, &n) < 1e-5, "row {r}");
        }
    }
}

#[test]
fn merit_never_increases_and_inputs_respect_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dp = DynamicsParams::new(0.3, 1.0, 0.3, 1.0, 0.5);
    let params = PlannerParams::new(4, Bounds::symmetric(Vector3::repeat(1.0), 1.0));
    for _ in 0..20 {
        let est = random_estimate(&mut rng, 3);
        let x0 = AgentState::at_rest(est.center());
        let goal = Vector3::new(
            rng.random_range(-6.0..6.0),
            rng.random_range(-6.0..6.0),
            0.0,
        );
        let plan = solve_mpc(&est, &x0, &goal, &params, &dp, None).unwrap();
        for step in &plan.diagnostics.merit_history {
            assert!(step.after <= step.before + 1e-12);
        }
        for u in &plan.inputs {
            assert!(u.u_v.amax() <= 1.0 && u.u_psi.abs() <= 1.0);
        }
        assert!(plan.diagnostics.max_violation <= params.collision_tol);
    }
}

#[test]
fn warm_start_uses_fewer_iterations_than_cold_start() {
    let dp = DynamicsParams::new(0.3, 1.0, 0.3, 1.0, 0.5);
    let params = PlannerParams::new(4, Bounds::symmetric(Vector3::repeat(1.0), 1.0));
    let est = FreeSpaceEstimate {
        expansion: RealShExpansion::sphere(2.5, 4, Vector3::zeros()),
        roi_radius: 3.0,
        diagnostics: SolveDiagnostics::default(),
    };
    let goal = Vector3::new(8.0, 3.0, 0.0);
    let x0 = AgentState::at_rest(Vector3::zeros());
    let cold = solve_mpc(&est, &x0, &goal, &params, &dp, None).unwrap();
    let x1 = cold.states[1];
    let shifted = FreeSpaceEstimate {
        expansion: RealShExpansion::sphere(2.5, 4, x1.p),
        ..est.clone()
    };
    let warm = solve_mpc(&shifted, &x1, &goal, &params, &dp, Some(&cold)).unwrap();
    assert!(warm.diagnostics.warm_started);
    assert!(warm.diagnostics.iterations < cold.diagnostics.iterations);
}
