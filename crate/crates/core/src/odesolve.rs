//! Classical fixed-step fourth-order Runge-Kutta over a differentiable
//! vector field. All stage evaluations are recorded on the tape, so
//! gradients flow through the solver (discretise, then differentiate).

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub dt: f64,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { dt: 0.01, steps: 1 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("solver needs at least one step".into()));
        }
        Ok(())
    }
}

/// One RK4 step of the autonomous system `dH/dt = field(H)`.
pub fn rk4_step<F>(tape: &mut Tape, field: &mut F, state: Var, dt: f64) -> Result<Var>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let shape = tape.value(state).shape().to_vec();
    let mut eval = |tape: &mut Tape, at: Var| -> Result<Var> {
        let k = field(tape, at)?;
        if tape.value(k).shape() != shape.as_slice() {
            return Err(Error::shape("rk4_step field", &shape, tape.value(k).shape()));
        }
        Ok(k)
    };

    let k1 = eval(tape, state)?;
    let s2 = tape.axpy(state, 0.5 * dt, k1)?;
    let k2 = eval(tape, s2)?;
    let s3 = tape.axpy(state, 0.5 * dt, k2)?;
    let k3 = eval(tape, s3)?;
    let s4 = tape.axpy(state, dt, k3)?;
    let k4 = eval(tape, s4)?;

    let acc = tape.axpy(k1, 2.0, k2)?;
    let acc = tape.axpy(acc, 2.0, k3)?;
    let acc = tape.add(acc, k4)?;
    tape.axpy(state, dt / 6.0, acc)
}

/// Applies `config.steps` RK4 steps of size `config.dt`.
pub fn integrate<F>(tape: &mut Tape, field: &mut F, state: Var, config: &SolverConfig) -> Result<Var>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    config.validate()?;
    let mut h = state;
    for _ in 0..config.steps {
        h = rk4_step(tape, field, h, config.dt)?;
    }
    Ok(h)
}
