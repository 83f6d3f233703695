//! Synchronous equilibrium by damped Newton iteration.

use nalgebra::{DMatrix, DVector};

use super::{rhs_into, state_jacobian_into, GridState, NetworkParameters};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-11;

/// Finds a state with `omega = 0` and vanishing right-hand side (zero control
/// and disturbance).
///
/// Unknowns are `theta_1..theta_{N-1}` and all voltages; `theta_0` stays at
/// the guess value because the dynamics are invariant under a common angle
/// shift. Equations are the power balance at nodes `1..N` and the voltage
/// balance at every node; the power balance at node 0 then holds whenever the
/// injections sum to zero and is checked on the full residual. A singular
/// Newton matrix (for instance an isolated node) falls back to a minimum-norm
/// SVD step.
pub fn find_steady_state(params: &NetworkParameters, initial_guess: &GridState) -> Result<GridState> {
    params.validate()?;
    initial_guess.validate(params.n())?;
    let n = params.n();
    let mut x = initial_guess.to_flat();
    x[n..2 * n].fill(0.0);

    let zeros = vec![0.0; n];
    let mut f = vec![0.0; 3 * n];
    let mut jac = DMatrix::zeros(3 * n, 3 * n);
    // reduced rows/cols: omega-dot rows for nodes 1..n, V-dot rows for all;
    // theta cols 1..n, V cols
    let rows: Vec<usize> = (n + 1..2 * n).chain(2 * n..3 * n).collect();
    let cols: Vec<usize> = (1..n).chain(2 * n..3 * n).collect();
    let m = rows.len();

    let full_residual = |x: &[f64], f: &mut [f64]| {
        rhs_into(params, x, &zeros, &zeros, f);
        f.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    };
    let reduced_norm = |f: &[f64]| rows.iter().map(|&r| f[r] * f[r]).sum::<f64>().sqrt();

    let mut res = full_residual(&x, &mut f);
    for _ in 0..MAX_ITERATIONS {
        if res <= TOLERANCE {
            return Ok(GridState::from_flat(&x));
        }
        state_jacobian_into(params, &x, &mut jac);
        let a = DMatrix::from_fn(m, m, |r, c| jac[(rows[r], cols[c])]);
        let b = DVector::from_iterator(m, rows.iter().map(|&r| -f[r]));
        let step = match a.clone().lu().solve(&b) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => a
                .svd(true, true)
                .solve(&b, 1e-12)
                .map_err(|_| Error::SteadyStateNotConverged {
                    iterations: 0,
                    residual: res,
                })?,
        };

        let base = reduced_norm(&f);
        let mut alpha = 1.0;
        let mut trial = x.clone();
        let mut f_trial = vec![0.0; 3 * n];
        loop {
            for (c, s) in cols.iter().zip(step.iter()) {
                trial[*c] = x[*c] + alpha * s;
            }
            full_residual(&trial, &mut f_trial);
            if reduced_norm(&f_trial) < base || alpha < 1e-6 {
                break;
            }
            alpha *= 0.5;
        }
        if reduced_norm(&f_trial) >= base && base > 0.0 {
            // no progress on the reduced system: either converged to
            // round-off or the node-0 balance cannot be met
            break;
        }
        x = trial;
        f.copy_from_slice(&f_trial);
        res = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    }
    if res <= TOLERANCE {
        return Ok(GridState::from_flat(&x));
    }
    Err(Error::SteadyStateNotConverged {
        iterations: MAX_ITERATIONS,
        residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::dynamics_rhs;

    #[test]
    fn four_node_ring_angles_match_tabulated_state() {
        let p = NetworkParameters::four_node_ring();
        let guess = NetworkParameters::four_node_tabulated_state();
        let s = find_steady_state(&p, &guess).unwrap();
        assert_eq!(s.angle[0], guess.angle[0]);
        for i in 0..4 {
            assert!((s.angle[i] - guess.angle[i]).abs() < 2e-3, "theta {i}: {}", s.angle[i]);
            assert_eq!(s.angular_velocity[i], 0.0);
        }
        let d = dynamics_rhs(&p, &s, &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(d.to_flat().iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn flat_start_converges_to_same_point() {
        let p = NetworkParameters::four_node_ring();
        let guess = NetworkParameters::four_node_tabulated_state();
        let a = find_steady_state(&p, &guess).unwrap();
        let mut flat = GridState::new(vec![0.0; 4], vec![0.0; 4], vec![1.0; 4]).unwrap();
        flat.angle[0] = guess.angle[0];
        let b = find_steady_state(&p, &flat).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn isolated_nodes_settle_at_exciter_voltage() {
        let mut p = NetworkParameters::four_node_ring();
        p.susceptance = vec![vec![0.0; 4]; 4];
        p.net_injection = vec![0.0; 4];
        let guess = GridState::new(vec![0.3, -1.0, 2.0, 0.0], vec![0.0; 4], vec![1.0; 4]).unwrap();
        let s = find_steady_state(&p, &guess).unwrap();
        for i in 0..4 {
            assert!((s.voltage[i] - p.exciter_voltage[i]).abs() < 1e-10);
            assert_eq!(s.angular_velocity[i], 0.0);
        }
    }

    #[test]
    fn unbalanced_injection_has_no_fixed_point() {
        let mut p = NetworkParameters::four_node_ring();
        p.net_injection[0] += 0.5;
        let guess = NetworkParameters::four_node_tabulated_state();
        assert!(matches!(
            find_steady_state(&p, &guess),
            Err(Error::SteadyStateNotConverged { .. })
        ));
    }
}
