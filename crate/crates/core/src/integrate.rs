//! Thin wrapper over the DOP853 integrator from `ode_solvers`.
//!
//! Right-hand sides are plain closures over slices so the same driver serves
//! the 6-state, 42-state (state + STM) and 258-state (state + STM + STT)
//! systems.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DVector;
use ode_solvers::dop853::Dop853;
use ode_solvers::System;

use crate::error::{Error, Result};

/// Step-size control tolerances.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-12,
        }
    }
}

const MAX_STEPS: u32 = 200_000;

struct Rhs<F> {
    f: F,
    failure: Rc<RefCell<Option<Error>>>,
}

impl<F> System<f64, DVector<f64>> for Rhs<F>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()>,
{
    fn system(&self, t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        if let Err(e) = (self.f)(t, y.as_slice(), dy.as_mut_slice()) {
            dy.fill(0.0);
            let mut slot = self.failure.borrow_mut();
            if slot.is_none() {
                *slot = Some(e);
            }
        }
    }

    fn solout(&mut self, _t: f64, _y: &DVector<f64>, _dy: &DVector<f64>) -> bool {
        self.failure.borrow().is_some()
    }
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` and returns the final state.
///
/// `t1 == t0` returns `y0` untouched; `t1 < t0` integrates backwards.
pub fn integrate<F>(f: F, t0: f64, t1: f64, y0: DVector<f64>, tol: Tolerances) -> Result<DVector<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if t1 == t0 {
        return Ok(y0);
    }
    if !y0.iter().all(|v| v.is_finite()) {
        return Err(Error::Integration("non-finite initial state".into()));
    }
    let failure = Rc::new(RefCell::new(None));
    let rhs = Rhs {
        f,
        failure: Rc::clone(&failure),
    };
    let span = t1 - t0;
    let mut stepper = Dop853::from_param(
        rhs,
        t0,
        t1,
        0.0,
        y0,
        tol.rtol,
        tol.atol,
        0.9,
        0.0,
        0.333,
        6.0,
        span.abs(),
        0.0,
        MAX_STEPS,
        u32::MAX,
        ode_solvers::OutputType::Sparse,
    );
    let outcome = stepper.integrate();
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    outcome.map_err(|e| Error::Integration(e.to_string()))?;
    let (times, states) = stepper.results().get();
    let (Some(&t_last), Some(y_last)) = (times.last(), states.last()) else {
        return Err(Error::Integration("no steps taken".into()));
    };
    if (t_last - t1).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(Error::Integration(format!(
            "stopped at t = {t_last} before reaching {t1}"
        )));
    }
    if !y_last.iter().all(|v| v.is_finite()) {
        return Err(Error::Integration("non-finite state".into()));
    }
    Ok(y_last.clone())
}
