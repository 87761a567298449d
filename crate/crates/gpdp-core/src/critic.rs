//! Implicit Q-learning policy evaluation.
//!
//! `V` regresses onto an expectile of the target network's Q values, `Q`
//! regresses onto the one-step TD target `r + gamma * V(s')`, and the target
//! network trails `Q` through a soft blend. Everything trains on dataset
//! batches only; no action ever comes from a policy network, which is what
//! keeps the evaluation free of out-of-distribution bootstrapping.

use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::Mat;
use crate::nn::{adam_step, blend_into, AdamState, MlpNet};
use crate::{Error, Result};

/// Asymmetric squared loss `|tau - 1(u < 0)| u^2`.
#[inline]
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

#[inline]
fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Q network, its slow target copy, the value network, and their optimizers.
#[derive(Debug, Clone)]
pub struct CriticSet {
    q_net: MlpNet,
    q_target: MlpNet,
    v_net: MlpNet,
    q_adam: AdamState,
    v_adam: AdamState,
    tau: f64,
    eta: f64,
    gamma: f64,
}

impl CriticSet {
    /// Fresh critics with three-hidden-layer networks.
    ///
    /// `tau` must lie in `(0, 1)`, `eta` in `(0, 1]`, `gamma` in `[0, 1]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        tau: f64,
        eta: f64,
        gamma: f64,
        learning_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let q_net = MlpNet::three_hidden(state_dim + action_dim, hidden, 1, rng)?;
        let v_net = MlpNet::three_hidden(state_dim, hidden, 1, rng)?;
        let q_target = q_net.clone();
        Self::from_parts(q_net, q_target, v_net, tau, eta, gamma, learning_rate)
    }

    /// Assembles critics from existing networks (checkpoint restore).
    pub fn from_parts(
        q_net: MlpNet,
        q_target: MlpNet,
        v_net: MlpNet,
        tau: f64,
        eta: f64,
        gamma: f64,
        learning_rate: f64,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidParam(alloc::format!(
                "expectile tau must be in (0, 1), got {tau}"
            )));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidParam(alloc::format!(
                "soft-update eta must be in (0, 1], got {eta}"
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidParam(alloc::format!(
                "discount gamma must be in [0, 1], got {gamma}"
            )));
        }
        for (t, s) in q_target.layers().iter().zip(q_net.layers()) {
            if t.weights.rows() != s.weights.rows() || t.weights.cols() != s.weights.cols() {
                return Err(Error::ShapeMismatch {
                    context: "q_target layer shape",
                    expected: s.weights.rows(),
                    got: t.weights.rows(),
                });
            }
        }
        let q_adam = AdamState::new(&q_net, learning_rate)?;
        let v_adam = AdamState::new(&v_net, learning_rate)?;
        Ok(CriticSet {
            q_net,
            q_target,
            v_net,
            q_adam,
            v_adam,
            tau,
            eta,
            gamma,
        })
    }

    pub fn q_net(&self) -> &MlpNet {
        &self.q_net
    }

    pub fn q_target(&self) -> &MlpNet {
        &self.q_target
    }

    pub fn v_net(&self) -> &MlpNet {
        &self.v_net
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `Q(s, a)` for one pair.
    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mut input = Vec::with_capacity(state.len() + action.len());
        input.extend_from_slice(state);
        input.extend_from_slice(action);
        Ok(self.q_net.forward_one(&input)?[0])
    }

    /// `V(s)` for one state.
    pub fn v_value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.v_net.forward_one(state)?[0])
    }

    /// Expectile regression of `V` onto explicit target values.
    ///
    /// This is the inner step of [`CriticSet::v_update`], kept separate so the
    /// regression can be driven by synthetic target samples.
    pub fn v_update_with_targets(&mut self, states: &Mat, q_values: &[f64]) -> Result<f64> {
        let batch = states.rows();
        if batch == 0 {
            return Err(Error::EmptyDataset);
        }
        if q_values.len() != batch {
            return Err(Error::ShapeMismatch {
                context: "v_update target count",
                expected: batch,
                got: q_values.len(),
            });
        }
        let (v, trace) = self.v_net.forward_traced(states)?;
        let mut loss = 0.0;
        let mut upstream = Mat::zeros(batch, 1);
        let inv_batch = 1.0 / batch as f64;
        for b in 0..batch {
            let u = q_values[b] - v[(b, 0)];
            let w = expectile_weight(u, self.tau);
            loss += w * u * u;
            // d/dv of |tau - 1(u<0)| u^2 with u = q - v.
            upstream[(b, 0)] = -2.0 * w * u * inv_batch;
        }
        loss *= inv_batch;
        let grads = self.v_net.backward(&trace, &upstream)?;
        adam_step(&mut self.v_net, &grads, &mut self.v_adam)?;
        Ok(loss)
    }

    /// One value-network step on a dataset batch: expectile regression of
    /// `V(s)` toward `Q_target(s, a)`, with no gradient into the target.
    pub fn v_update(&mut self, states: &Mat, actions: &Mat) -> Result<f64> {
        let q_hat = self.target_q_values(states, actions)?;
        self.v_update_with_targets(states, &q_hat)
    }

    /// `Q_target(s, a)` over a batch, detached from any gradient path.
    pub fn target_q_values(&self, states: &Mat, actions: &Mat) -> Result<Vec<f64>> {
        let inputs = concat_columns(states, actions)?;
        let out = self.q_target.forward(&inputs)?;
        Ok(out.as_slice().to_vec())
    }

    /// One Q-network step on a dataset batch: squared error against
    /// `r + gamma * V(s')`, with the value term zeroed on terminal rows.
    pub fn q_update(
        &mut self,
        states: &Mat,
        actions: &Mat,
        rewards: &[f64],
        next_states: &Mat,
        dones: &[bool],
    ) -> Result<f64> {
        let batch = states.rows();
        if batch == 0 {
            return Err(Error::EmptyDataset);
        }
        if rewards.len() != batch || dones.len() != batch || next_states.rows() != batch {
            return Err(Error::ShapeMismatch {
                context: "q_update batch rows",
                expected: batch,
                got: rewards.len().min(dones.len()).min(next_states.rows()),
            });
        }
        let next_v = self.v_net.forward(next_states)?;
        let inputs = concat_columns(states, actions)?;
        let (q, trace) = self.q_net.forward_traced(&inputs)?;
        let mut loss = 0.0;
        let mut upstream = Mat::zeros(batch, 1);
        let inv_batch = 1.0 / batch as f64;
        for b in 0..batch {
            let bootstrap = if dones[b] { 0.0 } else { self.gamma * next_v[(b, 0)] };
            let target = rewards[b] + bootstrap;
            let diff = q[(b, 0)] - target;
            loss += diff * diff;
            upstream[(b, 0)] = 2.0 * diff * inv_batch;
        }
        loss *= inv_batch;
        let grads = self.q_net.backward(&trace, &upstream)?;
        adam_step(&mut self.q_net, &grads, &mut self.q_adam)?;
        Ok(loss)
    }

    /// Soft target update `q_target <- eta * q_net + (1 - eta) * q_target`.
    pub fn soft_update(&mut self) -> Result<()> {
        let source = self.q_net.clone();
        blend_into(&mut self.q_target, &source, self.eta)
    }
}

/// `[states | actions]` as one batch matrix.
pub fn concat_columns(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            context: "concat_columns row counts",
            expected: a.rows(),
            got: b.rows(),
        });
    }
    let mut out = Mat::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    Ok(out)
}
