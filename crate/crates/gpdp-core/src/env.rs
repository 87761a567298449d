//! Desk-scale episodic continuous-control environment: a point mass on a
//! plane accelerating toward a goal, with an injectable actuator fault.
//!
//! The observation is `[pos, vel, goal - pos]` (6 dims), the action a 2-d
//! acceleration in `[-1, 1]^2`. Dynamics are semi-implicit Euler with linear
//! drag. Each step pays the negative distance to the goal; reaching the goal
//! radius ends the episode with a bonus. Scripted PD controllers of two
//! grades generate offline data, with a configurable share of episodes rolled
//! under an active actuator fault so that fault-phase states appear in the
//! dataset.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::math;
use crate::{Error, Result};

pub const STATE_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;

/// Point-mass dynamics and reward parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub mass: f64,
    pub drag: f64,
    pub dt: f64,
    pub horizon: usize,
    pub goal_radius: f64,
    pub goal_bonus: f64,
    /// Half-width of the uniform box start positions are drawn from.
    pub start_half_width: f64,
    /// Half-width of the uniform box goals are drawn from.
    pub goal_half_width: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            mass: 1.0,
            drag: 0.1,
            dt: 0.1,
            horizon: 200,
            goal_radius: 0.1,
            goal_bonus: 10.0,
            start_half_width: 2.0,
            goal_half_width: 1.0,
        }
    }
}

/// How an actuator misbehaves while a shift is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    /// The actuator output is forced to zero.
    Zeroed,
    /// The actuator output is sign-flipped.
    Inverted,
}

/// A dynamics shift: one actuator misbehaves from `trigger_step` on, for
/// `duration` steps (`None` = permanent).
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub trigger_step: usize,
    pub actuator: usize,
    pub mode: ShiftMode,
    pub duration: Option<usize>,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.actuator >= ACTION_DIM {
            return Err(Error::InvalidParam(alloc::format!(
                "shift actuator index {} out of range (m = {ACTION_DIM})",
                self.actuator
            )));
        }
        Ok(())
    }

    pub fn active_at(&self, step: usize) -> bool {
        if step < self.trigger_step {
            return false;
        }
        match self.duration {
            Some(d) => step < self.trigger_step + d,
            None => true,
        }
    }
}

/// Provenance tag carried by each transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Expert,
    Medium,
    Shifted,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Expert => "expert",
            Tag::Medium => "medium",
            Tag::Shifted => "shifted",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Tag::Expert),
            "medium" => Ok(Tag::Medium),
            "shifted" => Ok(Tag::Shifted),
            _ => Err(Error::Decode("unknown transition tag")),
        }
    }
}

/// One MDP tuple, the dataset atom.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub episode: u64,
    pub step: u32,
    pub tag: Tag,
}

/// The point-reacher with its current episode state.
#[derive(Debug, Clone)]
pub struct PointReacherEnv {
    config: EnvConfig,
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    step_idx: usize,
}

impl PointReacherEnv {
    pub fn new(config: EnvConfig) -> Self {
        PointReacherEnv {
            config,
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            step_idx: 0,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.step_idx
    }

    /// Samples a fresh start position and goal; velocity starts at zero.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let sw = self.config.start_half_width;
        let gw = self.config.goal_half_width;
        self.pos = [rng.gen_range(-sw..=sw), rng.gen_range(-sw..=sw)];
        self.goal = [rng.gen_range(-gw..=gw), rng.gen_range(-gw..=gw)];
        self.vel = [0.0; 2];
        self.step_idx = 0;
        self.observation()
    }

    /// Places the environment in an explicit state (evaluation replays).
    pub fn reset_to(&mut self, pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) -> Vec<f64> {
        self.pos = pos;
        self.vel = vel;
        self.goal = goal;
        self.step_idx = 0;
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        alloc::vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.goal[0] - self.pos[0],
            self.goal[1] - self.pos[1],
        ]
    }

    /// Advances one step. The shift spec, when given, masks the faulty
    /// actuator while active at the current step index.
    ///
    /// Returns `(next observation, reward, done)`.
    pub fn step(
        &mut self,
        action: &[f64],
        shift: Option<&ShiftSpec>,
    ) -> Result<(Vec<f64>, f64, bool)> {
        if action.len() != ACTION_DIM {
            return Err(Error::ShapeMismatch {
                context: "env action width",
                expected: ACTION_DIM,
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite() || math::abs(*a) > 1.0 + 1e-9) {
            return Err(Error::InvalidParam(
                "action outside the [-1, 1] box".into(),
            ));
        }
        let mut effective = [action[0], action[1]];
        if let Some(spec) = shift {
            spec.validate()?;
            if spec.active_at(self.step_idx) {
                match spec.mode {
                    ShiftMode::Zeroed => effective[spec.actuator] = 0.0,
                    ShiftMode::Inverted => effective[spec.actuator] = -effective[spec.actuator],
                }
            }
        }
        let c = &self.config;
        for k in 0..2 {
            self.vel[k] = self.vel[k] * (1.0 - c.drag * c.dt) + (effective[k] / c.mass) * c.dt;
            self.pos[k] += self.vel[k] * c.dt;
        }
        self.step_idx += 1;
        let dist = math::sqrt(
            (self.pos[0] - self.goal[0]) * (self.pos[0] - self.goal[0])
                + (self.pos[1] - self.goal[1]) * (self.pos[1] - self.goal[1]),
        );
        let mut reward = -dist;
        let reached = dist < c.goal_radius;
        if reached {
            reward += c.goal_bonus;
        }
        let done = reached || self.step_idx >= c.horizon;
        let obs = self.observation();
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("environment state"));
        }
        Ok((obs, reward, done))
    }
}

/// Scripted controller grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grade {
    Expert,
    Medium,
}

impl Grade {
    fn gains(self) -> (f64, f64) {
        match self {
            Grade::Expert => (1.2, 0.8),
            Grade::Medium => (0.6, 0.4),
        }
    }

    fn noise_std(self) -> f64 {
        match self {
            Grade::Expert => 0.05,
            Grade::Medium => 0.4,
        }
    }

    pub fn tag(self) -> Tag {
        match self {
            Grade::Expert => Tag::Expert,
            Grade::Medium => Tag::Medium,
        }
    }
}

/// Deterministic PD part of the behavior controller:
/// `k_p * (goal - pos) - k_d * vel`, clipped to the action box.
pub fn pd_action(observation: &[f64], grade: Grade) -> Vec<f64> {
    let (kp, kd) = grade.gains();
    (0..ACTION_DIM)
        .map(|k| {
            let raw = kp * observation[4 + k] - kd * observation[2 + k];
            math::clamp(raw, -1.0, 1.0)
        })
        .collect()
}

/// PD controller with grade-dependent Gaussian exploration noise.
pub fn behavior_policy<R: Rng + ?Sized>(
    observation: &[f64],
    grade: Grade,
    rng: &mut R,
) -> Vec<f64> {
    let base = pd_action(observation, grade);
    let std = grade.noise_std();
    base.iter()
        .map(|a| math::clamp(a + std * rng.sample::<f64, _>(StandardNormal), -1.0, 1.0))
        .collect()
}

/// A rolled-out episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub ret: f64,
}

/// Rolls one behavior episode with its own derived RNG stream.
pub fn rollout_behavior(
    config: &EnvConfig,
    grade: Grade,
    shift: Option<&ShiftSpec>,
    tag: Tag,
    episode_id: u64,
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ episode_id);
    let mut env = PointReacherEnv::new(config.clone());
    let mut obs = env.reset(&mut rng);
    let mut transitions = Vec::new();
    let mut ret = 0.0;
    for step in 0..config.horizon {
        let action = behavior_policy(&obs, grade, &mut rng);
        let (next_obs, reward, done) = env.step(&action, shift)?;
        ret += reward;
        transitions.push(Transition {
            state: obs,
            action,
            reward,
            next_state: next_obs.clone(),
            done,
            episode: episode_id,
            step: step as u32,
            tag,
        });
        obs = next_obs;
        if done {
            break;
        }
    }
    Ok(Episode { transitions, ret })
}

/// Dataset generation parameters.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub env: EnvConfig,
    /// Stop once at least this many transitions exist (last episode kept whole).
    pub min_transitions: usize,
    pub expert_fraction: f64,
    pub medium_fraction: f64,
    /// Fault rolled into the `shifted` share of episodes.
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            env: EnvConfig::default(),
            min_transitions: 100_000,
            expert_fraction: 0.45,
            medium_fraction: 0.45,
            shift: ShiftSpec {
                trigger_step: 40,
                actuator: 0,
                mode: ShiftMode::Zeroed,
                duration: Some(30),
            },
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn shifted_fraction(&self) -> f64 {
        1.0 - self.expert_fraction - self.medium_fraction
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_transitions == 0 {
            return Err(Error::InvalidParam("dataset size must be positive".into()));
        }
        for (name, f) in [
            ("expert_fraction", self.expert_fraction),
            ("medium_fraction", self.medium_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidParam(alloc::format!(
                    "{name} must lie in [0, 1], got {f}"
                )));
            }
        }
        if self.shifted_fraction() < -1e-12 {
            return Err(Error::InvalidParam(
                "expert and medium fractions exceed 1".into(),
            ));
        }
        self.shift.validate()
    }
}

/// Generates episodes until the transition budget is met, interleaving tags
/// by largest deficit against their target shares. Deterministic in
/// `(seed, config)`: every episode derives its RNG as `seed ^ episode_id`.
pub fn generate_transitions(config: &DatasetConfig) -> Result<Vec<Transition>> {
    config.validate()?;
    let mut transitions: Vec<Transition> = Vec::with_capacity(config.min_transitions);
    let mut counts = [0usize; 3]; // expert, medium, shifted
    let targets = [
        config.expert_fraction,
        config.medium_fraction,
        config.shifted_fraction(),
    ];
    let mut episode_id: u64 = 0;
    while transitions.len() < config.min_transitions {
        let total = transitions.len().max(1) as f64;
        // Pick the tag lagging furthest behind its target share.
        let mut pick = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for k in 0..3 {
            let deficit = targets[k] - counts[k] as f64 / total;
            if targets[k] > 0.0 && deficit > best_deficit {
                best_deficit = deficit;
                pick = k;
            }
        }
        let (grade, shift, tag) = match pick {
            0 => (Grade::Expert, None, Tag::Expert),
            1 => (Grade::Medium, None, Tag::Medium),
            _ => (Grade::Expert, Some(&config.shift), Tag::Shifted),
        };
        let episode = rollout_behavior(&config.env, grade, shift, tag, episode_id, config.seed)?;
        counts[pick] += episode.transitions.len();
        transitions.extend(episode.transitions);
        episode_id += 1;
    }
    Ok(transitions)
}

/// Column statistics of a transition set, used for normalization metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
}

pub fn compute_stats(transitions: &[Transition]) -> Result<DatasetStats> {
    if transitions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = transitions.len() as f64;
    let d = transitions[0].state.len();
    let mut state_mean = alloc::vec![0.0; d];
    let mut reward_mean = 0.0;
    for t in transitions {
        for (m, v) in state_mean.iter_mut().zip(&t.state) {
            *m += v;
        }
        reward_mean += t.reward;
    }
    for m in &mut state_mean {
        *m /= n;
    }
    reward_mean /= n;
    let mut state_var = alloc::vec![0.0; d];
    let mut reward_var = 0.0;
    for t in transitions {
        for (c, (v, m)) in t.state.iter().zip(&state_mean).enumerate() {
            let dv = v - m;
            state_var[c] += dv * dv;
        }
        let dr = t.reward - reward_mean;
        reward_var += dr * dr;
    }
    let state_std = state_var.iter().map(|v| math::sqrt(v / n)).collect();
    Ok(DatasetStats {
        state_mean,
        state_std,
        reward_mean,
        reward_std: math::sqrt(reward_var / n),
    })
}
