//! Discrete adjoint (costate) of the RK4 forward map.
//!
//! The functionals are evaluated on the discrete trajectory, so their exact
//! gradients are obtained by running the RK4 recursion in reverse. The
//! reverse sweep is an RK-type scheme for `z' = -dH/dx`; the stage costates
//! `z_s` weighted by `h b_s` give the interval integral of `dH/du`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{rhs_into, state_jacobian_into, GridState, NetworkParameters};
use crate::metrics::{add_running_loss_gradient, running_loss_flat, trapezoid_weights, ConstraintSpec};
use crate::simulate::StepRecord;

/// Cost `J` or constraint loss `C_eta` (`eta` one-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Functional {
    Cost,
    Constraint(usize),
}

impl Functional {
    /// The cost followed by every constraint.
    pub fn all(n_constraints: usize) -> Vec<Functional> {
        std::iter::once(Functional::Cost)
            .chain((1..=n_constraints).map(Functional::Constraint))
            .collect()
    }

    pub fn label(&self) -> String {
        match self {
            Functional::Cost => "J".to_string(),
            Functional::Constraint(eta) => format!("C_{eta}"),
        }
    }
}

/// Hamiltonian `H = L(x, u) + z . f(x, u, xi)` with `L = |u|^2` for the cost
/// and `L = min(0, psi_eta(x))^2` for a constraint.
pub fn hamiltonian(
    functional: Functional,
    params: &NetworkParameters,
    spec: &ConstraintSpec,
    state: &GridState,
    control: &[f64],
    disturbance: &[f64],
    costate: &[f64],
) -> f64 {
    let x = state.to_flat();
    let mut f = vec![0.0; x.len()];
    rhs_into(params, &x, control, disturbance, &mut f);
    let running = match functional {
        Functional::Cost => control.iter().map(|u| u * u).sum(),
        Functional::Constraint(eta) => running_loss_flat(&x, spec, eta),
    };
    running + costate.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>()
}

/// `dH/du_i = 2 u_i + z_{N+i} / M_i` for the cost; constraint rates do not
/// depend on `u`, so the first term is dropped for them.
pub fn hamiltonian_gradient(
    functional: Functional,
    params: &NetworkParameters,
    control: &[f64],
    costate: &[f64],
) -> Result<Vec<f64>> {
    let n = params.n();
    if control.len() != n {
        return Err(Error::dimension("control", n, control.len()));
    }
    if costate.len() != 3 * n {
        return Err(Error::dimension("costate", 3 * n, costate.len()));
    }
    let direct = matches!(functional, Functional::Cost);
    Ok((0..n)
        .map(|i| {
            let g = costate[n + i] / params.inertia[i];
            if direct {
                g + 2.0 * control[i]
            } else {
                g
            }
        })
        .collect())
}

/// Costate of one functional on the RK step grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrajectory {
    pub functional: Functional,
    pub times: Vec<f64>,
    /// Flat `3N` costate per grid time.
    pub values: Vec<Vec<f64>>,
}

impl CostateTrajectory {
    pub fn terminal(&self) -> &[f64] {
        self.values.last().expect("non-empty costate")
    }
}

pub(crate) struct SweepOutput {
    /// Gradient per functional with respect to the held control on every
    /// macro interval (`macro_steps x N`).
    pub macro_gradients: Vec<Vec<Vec<f64>>>,
    pub costates: Option<Vec<CostateTrajectory>>,
}

/// Reverse sweep for all `functionals` at once, sharing stage Jacobians.
pub(crate) fn adjoint_sweep(
    params: &NetworkParameters,
    spec: &ConstraintSpec,
    macro_times: &[f64],
    controls: &[Vec<f64>],
    record: &StepRecord,
    functionals: &[Functional],
    keep_costates: bool,
) -> Result<SweepOutput> {
    let n = params.n();
    let dim = 3 * n;
    let sub = record.substeps;
    let n_steps = record.disturbances.len();
    let n_macro = macro_times.len() - 1;
    debug_assert_eq!(n_steps, n_macro * sub);
    let h = record.step_dt;
    let weights = trapezoid_weights(macro_times);

    let etas: Vec<Option<usize>> = functionals
        .iter()
        .map(|f| match f {
            Functional::Cost => None,
            Functional::Constraint(eta) => Some(*eta),
        })
        .collect();
    for eta in etas.iter().flatten() {
        if *eta == 0 || *eta > spec.n_constraints() {
            return Err(Error::ConstraintIndex {
                eta: *eta,
                max: spec.n_constraints(),
            });
        }
    }

    let nf = functionals.len();
    let mut lambda: Vec<DVector<f64>> = vec![DVector::zeros(dim); nf];
    let mut grads: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; n]; n_macro]; nf];
    let mut history: Vec<Vec<Vec<f64>>> = if keep_costates {
        vec![Vec::with_capacity(n_steps + 1); nf]
    } else {
        Vec::new()
    };

    let inject = |lambda: &mut [DVector<f64>], x: &[f64], scale: f64| {
        for (l, eta) in lambda.iter_mut().zip(&etas) {
            if let Some(eta) = eta {
                add_running_loss_gradient(x, spec, *eta, scale, l.as_mut_slice());
            }
        }
    };

    // terminal: trapezoid end weight plus the terminal penalty
    {
        let x_end = &record.states[n_steps];
        for (l, eta) in lambda.iter_mut().zip(&etas) {
            if let Some(eta) = eta {
                let scale = weights[n_macro] + spec.terminal_weights[eta - 1];
                add_running_loss_gradient(x_end, spec, *eta, scale, l.as_mut_slice());
            }
        }
    }
    if keep_costates {
        for (hst, l) in history.iter_mut().zip(&lambda) {
            hst.push(l.as_slice().to_vec());
        }
    }

    let mut jac = [
        DMatrix::zeros(dim, dim),
        DMatrix::zeros(dim, dim),
        DMatrix::zeros(dim, dim),
        DMatrix::zeros(dim, dim),
    ];
    let mut k = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    let stage_w = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];

    let mut kb = [
        DVector::zeros(dim),
        DVector::zeros(dim),
        DVector::zeros(dim),
        DVector::zeros(dim),
    ];
    let mut yb = [
        DVector::zeros(dim),
        DVector::zeros(dim),
        DVector::zeros(dim),
        DVector::zeros(dim),
    ];

    for s in (0..n_steps).rev() {
        let m = s / sub;
        let x = &record.states[s];
        // a costate that is still zero stays zero until the next injection
        let live: Vec<bool> = lambda.iter().map(|l| l.iter().any(|v| *v != 0.0)).collect();

        if live.iter().any(|v| *v) {
            let u = &controls[m];
            let xi = &record.disturbances[s];
            // rebuild stages Y1..Y4 and their Jacobians
            y.copy_from_slice(x);
            state_jacobian_into(params, &y, &mut jac[0]);
            rhs_into(params, &y, u, xi, &mut k);
            for i in 0..dim {
                y[i] = x[i] + 0.5 * h * k[i];
            }
            state_jacobian_into(params, &y, &mut jac[1]);
            rhs_into(params, &y, u, xi, &mut k);
            for i in 0..dim {
                y[i] = x[i] + 0.5 * h * k[i];
            }
            state_jacobian_into(params, &y, &mut jac[2]);
            rhs_into(params, &y, u, xi, &mut k);
            for i in 0..dim {
                y[i] = x[i] + h * k[i];
            }
            state_jacobian_into(params, &y, &mut jac[3]);
        }

        for f in 0..nf {
            if etas[f].is_none() || !live[f] {
                continue;
            }
            let l = &mut lambda[f];
            // reverse of the stage recursion; kb_s = h b_s l + h a_{s+1,s} Ybar_{s+1}
            kb[3].copy_from(l);
            kb[3] *= stage_w[3];
            jac[3].tr_mul_to(&kb[3], &mut yb[3]);
            kb[2].copy_from(l);
            kb[2] *= stage_w[2];
            kb[2].axpy(h, &yb[3], 1.0);
            jac[2].tr_mul_to(&kb[2], &mut yb[2]);
            kb[1].copy_from(l);
            kb[1] *= stage_w[1];
            kb[1].axpy(0.5 * h, &yb[2], 1.0);
            jac[1].tr_mul_to(&kb[1], &mut yb[1]);
            kb[0].copy_from(l);
            kb[0] *= stage_w[0];
            kb[0].axpy(0.5 * h, &yb[1], 1.0);
            jac[0].tr_mul_to(&kb[0], &mut yb[0]);

            let g = &mut grads[f][m];
            // w_s * dH/du at the stage costate z_s = kb_s / w_s
            for kbs in &kb {
                for i in 0..n {
                    g[i] += kbs[n + i] / params.inertia[i];
                }
            }
            for ybs in &yb {
                *l += ybs;
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("costate of {}", functionals[f].label())));
            }
        }

        if s % sub == 0 {
            inject(&mut lambda, x, weights[m]);
        }
        if keep_costates {
            for (hst, l) in history.iter_mut().zip(&lambda) {
                hst.push(l.as_slice().to_vec());
            }
        }
    }

    // cost: L = |u|^2 only, integrated exactly over each interval
    for (f, eta) in etas.iter().enumerate() {
        if eta.is_none() {
            for m in 0..n_macro {
                let dt = macro_times[m + 1] - macro_times[m];
                for i in 0..n {
                    grads[f][m][i] = 2.0 * controls[m][i] * dt;
                }
            }
        }
    }

    let costates = keep_costates.then(|| {
        let times: Vec<f64> = (0..=n_steps)
            .map(|s| {
                if s % sub == 0 {
                    macro_times[s / sub]
                } else {
                    macro_times[s / sub] + (s % sub) as f64 * h
                }
            })
            .collect();
        functionals
            .iter()
            .zip(history)
            .map(|(f, mut values)| {
                values.reverse();
                if values.is_empty() {
                    values = vec![vec![0.0; dim]; n_steps + 1];
                }
                CostateTrajectory {
                    functional: *f,
                    times: times.clone(),
                    values,
                }
            })
            .collect()
    });

    Ok(SweepOutput {
        macro_gradients: grads,
        costates,
    })
}
