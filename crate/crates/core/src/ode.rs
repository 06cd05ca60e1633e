//! Classical RK4 over point clouds, with the matching discrete adjoint.
//!
//! The backward sweep differentiates the exact sequence of floating-point
//! stages taken by [`rk4_forward`], so gradients agree with finite
//! differences of the discretised flow rather than of the continuous ODE.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mesh::Vec3;

/// Position of an RK4 stage inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    Start,
    Mid,
    End,
}

pub(crate) trait PointSystem {
    type Grad;

    fn rhs(&self, step: usize, stage: Stage, state: &[Vec3], out: &mut [Vec3]);

    /// Accumulates `adj_outᵀ ∂rhs/∂state` into `adj_state` and the
    /// parameter part into `grad`.
    fn vjp(
        &self,
        step: usize,
        stage: Stage,
        state: &[Vec3],
        adj_out: &[Vec3],
        adj_state: &mut [Vec3],
        grad: &mut Self::Grad,
    );
}

fn axpy(out: &mut [Vec3], base: &[Vec3], h: f64, k: &[Vec3]) {
    for i in 0..out.len() {
        out[i] = base[i] + k[i] * h;
    }
}

/// States at every grid time plus the inputs of stages 2 to 4 of every
/// step, kept for the backward sweep.
#[derive(Debug, Clone)]
pub(crate) struct Rk4Run {
    pub states: Vec<Vec<Vec3>>,
    stages: Vec<[Vec<Vec3>; 3]>,
}

impl Rk4Run {
    pub fn last(&self) -> &[Vec3] {
        self.states.last().expect("non-empty run")
    }
}

/// Integrates over `times` (length `steps + 1`, monotone in either
/// direction).
pub(crate) fn rk4_forward<S: PointSystem>(sys: &S, times: &[f64], init: Vec<Vec3>) -> Result<Rk4Run> {
    let n = init.len();
    let steps = times.len().saturating_sub(1);
    let mut states = Vec::with_capacity(times.len());
    let mut stages = Vec::with_capacity(steps);
    states.push(init);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![Vec3::zeros(); n], vec![Vec3::zeros(); n], vec![Vec3::zeros(); n], vec![Vec3::zeros(); n]);
    for step in 0..steps {
        let h = times[step + 1] - times[step];
        let s = states.last().expect("non-empty");
        let (mut s2, mut s3, mut s4) = (vec![Vec3::zeros(); n], vec![Vec3::zeros(); n], vec![Vec3::zeros(); n]);
        sys.rhs(step, Stage::Start, s, &mut k1);
        axpy(&mut s2, s, 0.5 * h, &k1);
        sys.rhs(step, Stage::Mid, &s2, &mut k2);
        axpy(&mut s3, s, 0.5 * h, &k2);
        sys.rhs(step, Stage::Mid, &s3, &mut k3);
        axpy(&mut s4, s, h, &k3);
        sys.rhs(step, Stage::End, &s4, &mut k4);
        let next: Vec<Vec3> = (0..n)
            .map(|i| s[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0))
            .collect();
        if next.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
            return Err(Error::FlowBlowUp { step });
        }
        states.push(next);
        stages.push([s2, s3, s4]);
    }
    Ok(Rk4Run { states, stages })
}

/// Pulls the adjoint of the final state back through every step of `run`;
/// returns the adjoint of the initial state.
pub(crate) fn rk4_backward<S: PointSystem>(
    sys: &S,
    times: &[f64],
    run: &Rk4Run,
    adj_final: Vec<Vec3>,
    grad: &mut S::Grad,
) -> Vec<Vec3> {
    let n = adj_final.len();
    let mut adj = adj_final;
    let mut adj_k = vec![Vec3::zeros(); n];
    let mut adj_s = vec![Vec3::zeros(); n];
    for step in (0..times.len() - 1).rev() {
        let h = times[step + 1] - times[step];
        let s = &run.states[step];
        let [s2, s3, s4] = &run.stages[step];

        let adj_next = adj.clone();
        // stage 4
        for i in 0..n {
            adj_k[i] = adj_next[i] * (h / 6.0);
            adj_s[i] = Vec3::zeros();
        }
        sys.vjp(step, Stage::End, s4, &adj_k, &mut adj_s, grad);
        // adj_s now holds ∂/∂s4; s4 = s + h k3
        let mut adj_k3: Vec<Vec3> = (0..n).map(|i| adj_next[i] * (h / 3.0) + adj_s[i] * h).collect();
        for i in 0..n {
            adj[i] += adj_s[i];
            adj_s[i] = Vec3::zeros();
        }
        // stage 3
        sys.vjp(step, Stage::Mid, s3, &adj_k3, &mut adj_s, grad);
        let adj_k2: Vec<Vec3> = (0..n).map(|i| adj_next[i] * (h / 3.0) + adj_s[i] * (0.5 * h)).collect();
        for i in 0..n {
            adj[i] += adj_s[i];
            adj_s[i] = Vec3::zeros();
        }
        // stage 2
        sys.vjp(step, Stage::Mid, s2, &adj_k2, &mut adj_s, grad);
        for i in 0..n {
            adj_k3[i] = adj_next[i] * (h / 6.0) + adj_s[i] * (0.5 * h);
            adj[i] += adj_s[i];
            adj_s[i] = Vec3::zeros();
        }
        // stage 1 (adj_k3 reused as the stage-1 weight)
        sys.vjp(step, Stage::Start, s, &adj_k3, &mut adj_s, grad);
        for i in 0..n {
            adj[i] += adj_s[i];
        }
    }
    adj
}
