//! Policy assembly: pick the best dataset trajectory, relabel its states
//! with greedy actions, fit the guidance GP on the result, and sample guided
//! actions at interaction time.
//!
//! The relabeling draws `M` candidate actions per state from the unguided
//! diffusion sampler and keeps the argmax under the learned Q function. The
//! original dataset action can be appended as an extra candidate, which makes
//! the relabeled action provably no worse than the original under Q.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{self, DiffusionSchedule, EpsNet};
use crate::env::Transition;
use crate::gpr::{self, FitConfig, GprModel, KernelHyperparams};
use crate::linalg::Mat;
use crate::nn::MlpNet;
use crate::{Error, Result};

/// States and actions of the highest-return episode in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BestTrajectory {
    pub states: Mat,
    pub actions: Mat,
    pub episode: u64,
    pub ret: f64,
}

impl BestTrajectory {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Scans the dataset for the episode with maximal non-discounted return.
///
/// Ties break toward the lower episode id; episodes longer than `cap` are
/// truncated from their start.
pub fn select_best_trajectory(transitions: &[Transition], cap: usize) -> Result<BestTrajectory> {
    if transitions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_episode: BTreeMap<u64, (f64, Vec<&Transition>)> = BTreeMap::new();
    for t in transitions {
        let entry = by_episode.entry(t.episode).or_insert((0.0, Vec::new()));
        entry.0 += t.reward;
        entry.1.push(t);
    }
    let mut best: Option<(u64, f64)> = None;
    for (&id, &(ret, _)) in &by_episode {
        match best {
            Some((_, best_ret)) if ret <= best_ret => {}
            _ => best = Some((id, ret)),
        }
    }
    let (best_id, ret) = best.expect("non-empty dataset has episodes");
    let (_, mut rows) = by_episode.remove(&best_id).expect("selected episode exists");
    rows.sort_by_key(|t| t.step);
    rows.truncate(cap);
    let states = Mat::from_rows(&rows.iter().map(|t| t.state.clone()).collect::<Vec<_>>())?;
    let actions = Mat::from_rows(&rows.iter().map(|t| t.action.clone()).collect::<Vec<_>>())?;
    Ok(BestTrajectory {
        states,
        actions,
        episode: best_id,
        ret,
    })
}

/// Greedy actions chosen per trajectory step, with their Q values.
#[derive(Debug, Clone, PartialEq)]
pub struct AlteredActionSet {
    pub actions: Mat,
    pub q_values: Vec<f64>,
    /// Number of diffusion-sampled candidates per step (excluding an appended
    /// original action).
    pub candidates: usize,
}

/// Index and score of the maximum-score candidate; ties break toward the
/// lowest index.
pub fn greedy_pick<F: FnMut(&[f64]) -> f64>(
    candidates: &[Vec<f64>],
    mut score: F,
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut best_idx = 0;
    let mut best_score = score(&candidates[0]);
    for (idx, cand) in candidates.iter().enumerate().skip(1) {
        let s = score(cand);
        if s > best_score {
            best_idx = idx;
            best_score = s;
        }
    }
    Ok((best_idx, best_score))
}

/// Relabels every trajectory state with the Q-argmax over `m_candidates`
/// unguided diffusion samples (plus, optionally, the original action).
///
/// Deterministic for a fixed RNG seed.
pub fn relabel<R: Rng + ?Sized>(
    traj: &BestTrajectory,
    eps_net: &EpsNet,
    sched: &DiffusionSchedule,
    q_net: &MlpNet,
    m_candidates: usize,
    include_original: bool,
    rng: &mut R,
) -> Result<AlteredActionSet> {
    if m_candidates == 0 {
        return Err(Error::InvalidParam(
            "relabeling needs at least one candidate".into(),
        ));
    }
    let steps = traj.len();
    if steps == 0 {
        return Err(Error::EmptyDataset);
    }
    let m = eps_net.action_dim();
    let mut actions = Mat::zeros(steps, m);
    let mut q_values = Vec::with_capacity(steps);
    for t in 0..steps {
        let state = traj.states.row(t);
        let mut candidates = Vec::with_capacity(m_candidates + 1);
        for _ in 0..m_candidates {
            candidates.push(diffusion::sample_action(eps_net, state, sched, None, rng)?);
        }
        if include_original {
            candidates.push(traj.actions.row(t).to_vec());
        }
        let mut q_err = None;
        let (idx, q) = greedy_pick(&candidates, |a| {
            match q_of(q_net, state, a) {
                Ok(v) => v,
                Err(e) => {
                    q_err = Some(e);
                    f64::NEG_INFINITY
                }
            }
        })?;
        if let Some(e) = q_err {
            return Err(e);
        }
        actions.row_mut(t).copy_from_slice(&candidates[idx]);
        q_values.push(q);
    }
    Ok(AlteredActionSet {
        actions,
        q_values,
        candidates: m_candidates,
    })
}

fn q_of(q_net: &MlpNet, state: &[f64], action: &[f64]) -> Result<f64> {
    let mut input = Vec::with_capacity(state.len() + action.len());
    input.extend_from_slice(state);
    input.extend_from_slice(action);
    Ok(q_net.forward_one(&input)?[0])
}

/// Fits the guidance GP on `(trajectory states, relabeled actions)`.
pub fn build_guidance<R: Rng + ?Sized>(
    traj: &BestTrajectory,
    altered: &AlteredActionSet,
    init: &KernelHyperparams,
    config: &FitConfig,
    rng: &mut R,
) -> Result<GprModel> {
    if altered.actions.rows() != traj.len() {
        return Err(Error::ShapeMismatch {
            context: "build_guidance row counts",
            expected: traj.len(),
            got: altered.actions.rows(),
        });
    }
    gpr::fit(&traj.states, &altered.actions, init, config, rng)
}

/// Relative variance deficit below which a posterior carries no information:
/// the guided chain then reverts exactly to the unguided one.
pub const REVERSION_DEFICIT: f64 = 1e-6;

/// Decides how a raw posterior is used for sampling.
///
/// An uninformative posterior (variance within `REVERSION_DEFICIT * sigma_p^2`
/// of the prior) drops guidance entirely. Otherwise the variance is floored
/// at the schedule's largest step rate, which keeps every per-step shift
/// ratio `beta_i / var` at or below one; the first-order mean perturbation is
/// only meaningful for guidance at least this smooth.
pub fn effective_guidance(
    posterior: &gpr::GprPosterior,
    prior_variance: f64,
    sched: &DiffusionSchedule,
) -> Option<gpr::GprPosterior> {
    if prior_variance - posterior.variance <= REVERSION_DEFICIT * prior_variance {
        return None;
    }
    let floor = sched.betas().iter().cloned().fold(0.0, f64::max);
    Some(gpr::GprPosterior {
        mean: posterior.mean.clone(),
        variance: posterior.variance.max(floor),
    })
}

/// Guided action at interaction time: query the GP posterior once at the
/// current observation, then run the guided reverse chain. Uninformative
/// posteriors (far-field states) sample unguided.
pub fn act<R: Rng + ?Sized>(
    state: &[f64],
    eps_net: &EpsNet,
    sched: &DiffusionSchedule,
    guidance: &GprModel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let posterior = guidance.posterior(state)?;
    let sigma_p = guidance.hyperparams().sigma_p();
    let effective = effective_guidance(&posterior, sigma_p * sigma_p, sched);
    diffusion::sample_action(eps_net, state, sched, effective.as_ref(), rng)
}

/// Greedy-diffusion ablation: the Q-argmax over `m_candidates` unguided
/// samples is used directly as the action.
pub fn act_greedy<R: Rng + ?Sized>(
    state: &[f64],
    eps_net: &EpsNet,
    sched: &DiffusionSchedule,
    q_net: &MlpNet,
    m_candidates: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if m_candidates == 0 {
        return Err(Error::InvalidParam(
            "greedy action selection needs at least one candidate".into(),
        ));
    }
    let mut candidates = Vec::with_capacity(m_candidates);
    for _ in 0..m_candidates {
        candidates.push(diffusion::sample_action(eps_net, state, sched, None, rng)?);
    }
    let mut q_err = None;
    let (idx, _) = greedy_pick(&candidates, |a| match q_of(q_net, state, a) {
        Ok(v) => v,
        Err(e) => {
            q_err = Some(e);
            f64::NEG_INFINITY
        }
    })?;
    if let Some(e) = q_err {
        return Err(e);
    }
    Ok(candidates.swap_remove(idx))
}
