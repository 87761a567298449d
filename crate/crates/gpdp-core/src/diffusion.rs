//! Denoising diffusion over actions: noise schedule, training loss, and the
//! guided/unguided reverse sampler.
//!
//! The schedule discretizes a variance-preserving SDE into `N` steps with
//! `beta_i = 1 - exp(-beta_min/N - (beta_max - beta_min)(2i - 1)/(2 N^2))`,
//! which keeps every rate inside `(0, 1)` for the default `(0.1, 10, N=5)`.
//!
//! Sampling runs the reverse chain from `a^N ~ N(0, I)`. Each step computes
//! the denoised mean from the epsilon estimator; an optional Gaussian
//! posterior `(mean_g, var_g)` shifts it to
//! `mean - beta_i / var_g * (mean - mean_g)` before noise is added. The final
//! step adds no noise and clips into the action box.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::gpr::GprPosterior;
use crate::linalg::Mat;
use crate::math;
use crate::nn::{Gradients, MlpNet};
use crate::{Error, Result};

/// Actions live in `[-ACTION_BOUND, ACTION_BOUND]^m`.
pub const ACTION_BOUND: f64 = 1.0;

/// Width of the sinusoidal timestep embedding fed to the noise estimator.
pub const TIMESTEP_EMBED_DIM: usize = 16;

/// Per-step diffusion rates and their cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Discretized VP-SDE schedule with `n` steps.
    pub fn new(n: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParam("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0) || !(beta_max >= beta_min) || !beta_max.is_finite() {
            return Err(Error::InvalidParam(alloc::format!(
                "schedule rates must satisfy 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        let nf = n as f64;
        let betas = (1..=n)
            .map(|i| {
                let exponent =
                    -beta_min / nf - (beta_max - beta_min) * (2 * i - 1) as f64 / (2.0 * nf * nf);
                1.0 - math::exp(exponent)
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds from explicit rates, validating every invariant.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParam("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidParam(
                "every diffusion rate must lie in (0, 1)".into(),
            ));
        }
        Ok(Self::from_betas_unchecked(betas))
    }

    pub(crate) fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        DiffusionSchedule { betas, alpha_bars }
    }

    /// Number of diffusion steps `N`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `beta_i` for a 1-based step index.
    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i - 1]
    }

    /// Cumulative `alpha_bar_i` for a 1-based step index.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bars[i - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.len() {
            return Err(Error::StepOutOfRange { step: i, n: self.len() });
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion step index.
pub fn timestep_embedding(step: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let t = step as f64;
    for k in 0..half {
        let freq = math::exp(-math::ln(10000.0) * k as f64 / (half.max(2) - 1) as f64);
        out[2 * k] = math::sin(t * freq);
        out[2 * k + 1] = math::cos(t * freq);
    }
    out
}

/// The learned residual-noise estimator: an MLP over
/// `concat(state, noised action, timestep embedding)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsNet {
    net: MlpNet,
    state_dim: usize,
    action_dim: usize,
}

impl EpsNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let net = MlpNet::three_hidden(
            state_dim + action_dim + TIMESTEP_EMBED_DIM,
            hidden,
            action_dim,
            rng,
        )?;
        Ok(EpsNet { net, state_dim, action_dim })
    }

    /// Wraps an existing network, validating its widths.
    pub fn from_net(net: MlpNet, state_dim: usize, action_dim: usize) -> Result<Self> {
        if net.input_dim() != state_dim + action_dim + TIMESTEP_EMBED_DIM {
            return Err(Error::ShapeMismatch {
                context: "EpsNet input width",
                expected: state_dim + action_dim + TIMESTEP_EMBED_DIM,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != action_dim {
            return Err(Error::ShapeMismatch {
                context: "EpsNet output width",
                expected: action_dim,
                got: net.output_dim(),
            });
        }
        Ok(EpsNet { net, state_dim, action_dim })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpNet {
        &mut self.net
    }

    fn input_row(&self, state: &[f64], action: &[f64], step: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.net.input_dim());
        row.extend_from_slice(state);
        row.extend_from_slice(action);
        row.extend_from_slice(&timestep_embedding(step, TIMESTEP_EMBED_DIM));
        row
    }

    /// Estimated residual noise for one `(state, noised action, step)`.
    pub fn predict(&self, state: &[f64], action: &[f64], step: usize) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::ShapeMismatch {
                context: "EpsNet state width",
                expected: self.state_dim,
                got: state.len(),
            });
        }
        if action.len() != self.action_dim {
            return Err(Error::ShapeMismatch {
                context: "EpsNet action width",
                expected: self.action_dim,
                got: action.len(),
            });
        }
        self.net.forward_one(&self.input_row(state, action, step))
    }
}

/// Forward noising of a clean action: `sqrt(ab_i) a0 + sqrt(1 - ab_i) eps`.
pub fn forward_noise(
    a0: &[f64],
    step: usize,
    eps: &[f64],
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(step)?;
    if a0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            context: "forward_noise noise width",
            expected: a0.len(),
            got: eps.len(),
        });
    }
    let ab = sched.alpha_bar(step);
    let scale_a = math::sqrt(ab);
    let scale_e = math::sqrt(1.0 - ab);
    Ok(a0
        .iter()
        .zip(eps)
        .map(|(a, e)| scale_a * a + scale_e * e)
        .collect())
}

/// Epsilon-prediction loss and gradients for explicitly given noise draws and
/// step indices: `mean_b ||eps_b - eps_hat_b||^2`.
pub fn eps_loss_given(
    net: &EpsNet,
    states: &Mat,
    actions: &Mat,
    steps: &[usize],
    noise: &Mat,
    sched: &DiffusionSchedule,
) -> Result<(f64, Gradients)> {
    let batch = states.rows();
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    if actions.rows() != batch || steps.len() != batch || noise.rows() != batch {
        return Err(Error::ShapeMismatch {
            context: "eps_loss batch rows",
            expected: batch,
            got: actions.rows().min(steps.len()).min(noise.rows()),
        });
    }
    let m = net.action_dim();
    let mut inputs = Mat::zeros(batch, net.net().input_dim());
    for b in 0..batch {
        let noised = forward_noise(actions.row(b), steps[b], noise.row(b), sched)?;
        let row = net.input_row(states.row(b), &noised, steps[b]);
        inputs.row_mut(b).copy_from_slice(&row);
    }
    let (pred, trace) = net.net().forward_traced(&inputs)?;
    let mut loss = 0.0;
    let mut upstream = Mat::zeros(batch, m);
    let inv_batch = 1.0 / batch as f64;
    for b in 0..batch {
        for c in 0..m {
            let diff = pred[(b, c)] - noise[(b, c)];
            loss += diff * diff;
            upstream[(b, c)] = 2.0 * diff * inv_batch;
        }
    }
    loss *= inv_batch;
    let grads = net.net().backward(&trace, &upstream)?;
    Ok((loss, grads))
}

/// Epsilon-prediction loss over a batch with sampled steps and noise.
pub fn eps_loss<R: Rng + ?Sized>(
    net: &EpsNet,
    states: &Mat,
    actions: &Mat,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let batch = states.rows();
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    let steps: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=sched.len())).collect();
    let mut noise = Mat::zeros(batch, net.action_dim());
    for v in noise.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    eps_loss_given(net, states, actions, &steps, &noise, sched)
}

/// One reverse-step Gaussian before and after guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedGaussian {
    /// Denoised mean from the epsilon estimator.
    pub mean: Vec<f64>,
    /// Shared per-coordinate variance (`beta_i`).
    pub variance: f64,
    /// Mean after the guidance perturbation (equals `mean` without guidance).
    pub guided_mean: Vec<f64>,
}

impl GuidedGaussian {
    /// Applies the closed-form mean shift
    /// `mean - variance / var_g * (mean - mean_g)` when guidance is present.
    pub fn new(mean: Vec<f64>, variance: f64, guidance: Option<&GprPosterior>) -> Result<Self> {
        let guided_mean = match guidance {
            Some(post) => guided_mean(&mean, variance, post)?,
            None => mean.clone(),
        };
        Ok(GuidedGaussian { mean, variance, guided_mean })
    }
}

/// The guidance mean shift in its direct algebraic form.
pub fn guided_mean(mean: &[f64], variance: f64, posterior: &GprPosterior) -> Result<Vec<f64>> {
    if posterior.mean.len() != mean.len() {
        return Err(Error::ShapeMismatch {
            context: "guided_mean posterior width",
            expected: mean.len(),
            got: posterior.mean.len(),
        });
    }
    if !(posterior.variance > 0.0) {
        return Err(Error::InvalidParam(alloc::format!(
            "guidance requires positive posterior variance, got {}",
            posterior.variance
        )));
    }
    let ratio = variance / posterior.variance;
    Ok(mean
        .iter()
        .zip(&posterior.mean)
        .map(|(mu, mg)| mu - ratio * (mu - mg))
        .collect())
}

/// Gradient of `log N(y | mean, var I)` with respect to `y`.
pub fn gaussian_score(y: &[f64], mean: &[f64], variance: f64) -> Vec<f64> {
    y.iter().zip(mean).map(|(yv, mv)| -(yv - mv) / variance).collect()
}

/// The same guidance shift derived through the score form:
/// `mean + variance * d/dy log N(y | mean_g, var_g) at y = mean`.
pub fn guided_mean_score_form(
    mean: &[f64],
    variance: f64,
    posterior: &GprPosterior,
) -> Result<Vec<f64>> {
    if posterior.mean.len() != mean.len() {
        return Err(Error::ShapeMismatch {
            context: "guided_mean_score_form posterior width",
            expected: mean.len(),
            got: posterior.mean.len(),
        });
    }
    if !(posterior.variance > 0.0) {
        return Err(Error::InvalidParam(
            "guidance requires positive posterior variance".into(),
        ));
    }
    let score = gaussian_score(mean, &posterior.mean, posterior.variance);
    Ok(mean.iter().zip(&score).map(|(mu, s)| mu + variance * s).collect())
}

/// Denoised mean of the reverse step:
/// `(a_i - beta_i / sqrt(1 - ab_i) * eps_hat) / sqrt(1 - beta_i)`.
pub fn denoised_mean(
    net: &EpsNet,
    state: &[f64],
    a_i: &[f64],
    step: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(step)?;
    let eps_hat = net.predict(state, a_i, step)?;
    let beta = sched.beta(step);
    let ab = sched.alpha_bar(step);
    let noise_coeff = beta / math::sqrt(1.0 - ab);
    let inv_sqrt = 1.0 / math::sqrt(1.0 - beta);
    Ok(a_i
        .iter()
        .zip(&eps_hat)
        .map(|(a, e)| inv_sqrt * (a - noise_coeff * e))
        .collect())
}

/// One reverse transition `a_i -> a_{i-1}`.
///
/// With guidance the mean is shifted per the closed form before sampling.
/// The final step (`step == 1`) draws no noise and clips into the action box;
/// intermediate latents stay unclipped.
pub fn reverse_step<R: Rng + ?Sized>(
    net: &EpsNet,
    state: &[f64],
    a_i: &[f64],
    step: usize,
    sched: &DiffusionSchedule,
    guidance: Option<&GprPosterior>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mean = denoised_mean(net, state, a_i, step, sched)?;
    let beta = sched.beta(step);
    let gg = GuidedGaussian::new(mean, beta, guidance)?;
    if step == 1 {
        return Ok(gg
            .guided_mean
            .iter()
            .map(|&v| math::clamp(v, -ACTION_BOUND, ACTION_BOUND))
            .collect());
    }
    let std = math::sqrt(beta);
    Ok(gg
        .guided_mean
        .iter()
        .map(|&v| v + std * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Full reverse chain from `a^N ~ N(0, I)` down to the emitted action.
///
/// The same posterior (queried once per environment state by the caller) is
/// applied at every step when present.
pub fn sample_action<R: Rng + ?Sized>(
    net: &EpsNet,
    state: &[f64],
    sched: &DiffusionSchedule,
    guidance: Option<&GprPosterior>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let m = net.action_dim();
    let mut a: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for step in (1..=sched.len()).rev() {
        a = reverse_step(net, state, &a, step, sched, guidance, rng)?;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adam_step, AdamState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Golden rates for the headline schedule (n = 5, 0.1, 10), pinned as the
    /// schedule contract.
    const GOLDEN_BETAS: [f64; 5] = [
        0.19587455833344034,
        0.45881819338479711,
        0.63578102042847668,
        0.75487818796088264,
        0.83503137917736855,
    ];

    fn zero_eps_net(state_dim: usize, action_dim: usize) -> EpsNet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = crate::nn::MlpNet::three_hidden(
            state_dim + action_dim + TIMESTEP_EMBED_DIM,
            8,
            action_dim,
            &mut rng,
        )
        .unwrap();
        for layer in net.layers_mut() {
            for w in layer.weights.as_mut_slice() {
                *w = 0.0;
            }
        }
        EpsNet::from_net(net, state_dim, action_dim).unwrap()
    }

    #[test]
    fn schedule_matches_golden_rates() {
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        assert_eq!(sched.len(), 5);
        for (i, expected) in GOLDEN_BETAS.iter().enumerate() {
            let rel = (sched.beta(i + 1) - expected).abs() / expected;
            assert!(rel < 1e-15, "beta_{} drifted: {}", i + 1, sched.beta(i + 1));
        }
        // alpha_bar_N = exp(-(beta_min + (beta_max - beta_min)/2)) for this
        // discretization.
        let expected_ab = crate::math::exp(-5.05);
        assert!((sched.alpha_bar(5) - expected_ab).abs() / expected_ab < 1e-12);
    }

    #[test]
    fn schedule_single_step() {
        let sched = DiffusionSchedule::new(1, 0.1, 0.1).unwrap();
        let beta = 1.0 - crate::math::exp(-0.1);
        assert!((sched.beta(1) - beta).abs() < 1e-16);
        assert!((sched.alpha_bar(1) - (1.0 - beta)).abs() < 1e-16);
    }

    #[test]
    fn alpha_bar_recheck_by_direct_product() {
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        let mut prod = 1.0;
        for i in 1..=5 {
            prod *= 1.0 - sched.beta(i);
            assert!((sched.alpha_bar(i) - prod).abs() <= 1e-15 * prod.abs());
        }
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let sched = DiffusionSchedule::new(7, 0.05, 8.0).unwrap();
        for i in 2..=7 {
            assert!(sched.alpha_bar(i) < sched.alpha_bar(i - 1));
            assert!(sched.alpha_bar(i) > 0.0 && sched.alpha_bar(i) < 1.0);
        }
    }

    #[test]
    fn schedule_construction_errors() {
        assert!(DiffusionSchedule::new(0, 0.1, 10.0).is_err());
        assert!(DiffusionSchedule::new(5, 0.0, 10.0).is_err());
        assert!(DiffusionSchedule::new(5, 2.0, 1.0).is_err());
        assert!(DiffusionSchedule::from_betas(alloc::vec![0.5, 1.0]).is_err());
        assert!(DiffusionSchedule::from_betas(alloc::vec![]).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        // Out-of-range steps.
        assert!(matches!(
            forward_noise(&[0.1], 0, &[0.0], &sched),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            forward_noise(&[0.1], 6, &[0.0], &sched),
            Err(Error::StepOutOfRange { .. })
        ));
        // Zero noise keeps the scaled clean action.
        let a0 = [0.4, -0.8];
        let out = forward_noise(&a0, 3, &[0.0, 0.0], &sched).unwrap();
        let s = crate::math::sqrt(sched.alpha_bar(3));
        assert_eq!(out, alloc::vec![s * a0[0], s * a0[1]]);
        // Hypothetical no-noise limit (beta -> 0): returns a0 exactly.
        let degenerate = DiffusionSchedule::from_betas_unchecked(alloc::vec![0.0]);
        let out = forward_noise(&a0, 1, &[5.0, -3.0], &degenerate).unwrap();
        assert_eq!(out, a0.to_vec());
    }

    #[test]
    fn forward_noise_monte_carlo_variance() {
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let v = forward_noise(&[0.0], 3, &[eps], &sched).unwrap()[0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let expected = 1.0 - sched.alpha_bar(3);
        assert!(
            (var - expected).abs() / expected < 0.02,
            "variance {var} vs {expected}"
        );
    }

    #[test]
    fn eps_loss_zero_when_net_predicts_injected_noise() {
        // The zero net predicts zero; inject zero noise so prediction == eps.
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        let net = zero_eps_net(2, 2);
        let states = Mat::zeros(4, 2);
        let actions = Mat::zeros(4, 2);
        let noise = Mat::zeros(4, 2);
        let (loss, grads) =
            eps_loss_given(&net, &states, &actions, &[1, 2, 3, 4], &noise, &sched).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.layers.iter().all(|l| l.dw.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn eps_loss_of_zero_net_approaches_action_dim() {
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        let net = zero_eps_net(2, 2);
        let n = 10_000;
        let states = Mat::zeros(n, 2);
        let actions = Mat::zeros(n, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (loss, _) = eps_loss(&net, &states, &actions, &sched, &mut rng).unwrap();
        assert!((loss - 2.0).abs() / 2.0 < 0.05, "chi-square mean off: {loss}");
    }

    #[test]
    fn guidance_with_matching_means_is_identity() {
        let mu = alloc::vec![0.3, -0.7];
        let post = GprPosterior { mean: mu.clone(), variance: 0.4 };
        let g = guided_mean(&mu, 0.25, &post).unwrap();
        assert_eq!(g, mu);
    }

    #[test]
    fn guidance_scalar_arithmetic() {
        let post = GprPosterior { mean: alloc::vec![0.0], variance: 0.5 };
        let g = guided_mean(&[1.0], 0.1, &post).unwrap();
        assert!((g[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn guidance_rejects_nonpositive_variance() {
        let post = GprPosterior { mean: alloc::vec![0.0], variance: 0.0 };
        assert!(guided_mean(&[1.0], 0.1, &post).is_err());
        let gg = GuidedGaussian::new(alloc::vec![1.0], 0.1, Some(&post));
        assert!(gg.is_err());
    }

    #[test]
    fn closed_form_equals_score_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let m = rng.gen_range(1..=3);
            let mu: alloc::vec::Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let post = GprPosterior {
                mean: (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                variance: rng.gen_range(0.05..10.0),
            };
            let beta = rng.gen_range(0.01..0.99);
            let a = guided_mean(&mu, beta, &post).unwrap();
            let b = guided_mean_score_form(&mu, beta, &post).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn guidance_contracts_toward_posterior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let mu = rng.gen_range(-2.0..2.0);
            let mu_g = rng.gen_range(-2.0..2.0);
            let variance: f64 = rng.gen_range(0.2..5.0);
            let beta = rng.gen_range(0.01..1.0) * variance.min(1.0) * 0.99;
            if beta / variance >= 1.0 || mu == mu_g {
                continue;
            }
            let post = GprPosterior { mean: alloc::vec![mu_g], variance };
            let g = guided_mean(&[mu], beta, &post).unwrap();
            assert!(
                (g[0] - mu_g).abs() < (mu - mu_g).abs(),
                "no contraction: {g:?} vs mu {mu}, target {mu_g}"
            );
        }
    }

    #[test]
    fn reverse_step_far_field_matches_unguided() {
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut eps_rng = ChaCha8Rng::seed_from_u64(50);
        let net = {
            let mut n = crate::nn::MlpNet::three_hidden(
                2 + 2 + TIMESTEP_EMBED_DIM,
                16,
                2,
                &mut eps_rng,
            )
            .unwrap();
            for layer in n.layers_mut() {
                for w in layer.weights.as_mut_slice() {
                    *w *= 0.5;
                }
            }
            EpsNet::from_net(n, 2, 2).unwrap()
        };
        // Smooth far-field posterior: mean ~ 0, variance = sigma_p^2 >> beta.
        let sigma_p = 5e3;
        let post = GprPosterior {
            mean: alloc::vec![1e-90, -1e-90],
            variance: sigma_p * sigma_p,
        };
        for _ in 0..200 {
            let state: alloc::vec::Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a_i: alloc::vec::Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let step = rng.gen_range(1..=5);
            let seed = rng.gen::<u64>();
            let guided = reverse_step(
                &net,
                &state,
                &a_i,
                step,
                &sched,
                Some(&post),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            let unguided = reverse_step(
                &net,
                &state,
                &a_i,
                step,
                &sched,
                None,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            for (g, u) in guided.iter().zip(&unguided) {
                assert!((g - u).abs() < 1e-6, "far-field divergence: {g} vs {u}");
            }
        }
    }

    #[test]
    fn single_step_sampling_closed_form() {
        let sched = DiffusionSchedule::new(1, 0.1, 0.1).unwrap();
        let net = zero_eps_net(2, 2);
        let state = [0.2, -0.2];
        let seed = 1234;
        let action =
            sample_action(&net, &state, &sched, None, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
        // Reproduce the prior draw with the same stream.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_n: alloc::vec::Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let scale = 1.0 / crate::math::sqrt(1.0 - sched.beta(1));
        for (got, prior) in action.iter().zip(&a_n) {
            let expected = crate::math::clamp(prior * scale, -1.0, 1.0);
            assert_eq!(*got, expected);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(3);
        let net = EpsNet::new(2, 2, 16, &mut init_rng).unwrap();
        let state = [0.5, 0.5];
        let a = sample_action(&net, &state, &sched, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_action(&net, &state, &sched, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trained_net_covers_both_mixture_modes() {
        // Fixed two-mode action distribution at a constant state; training
        // must halve the loss and sampling must visit both modes.
        let sched = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut net = EpsNet::new(2, 2, 32, &mut rng).unwrap();
        let mut adam = AdamState::new(net.net(), 1e-3).unwrap();
        let modes = [[-0.5, -0.5], [0.5, 0.5]];
        let batch = 64;
        let mut first_window = 0.0;
        let mut last_window = 0.0;
        let steps = 2000;
        for step in 0..steps {
            let mut states = Mat::zeros(batch, 2);
            let mut actions = Mat::zeros(batch, 2);
            for b in 0..batch {
                let mode = modes[rng.gen_range(0..2)];
                for c in 0..2 {
                    states[(b, c)] = 0.0;
                    actions[(b, c)] =
                        mode[c] + 0.05 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let (loss, grads) = eps_loss(&net, &states, &actions, &sched, &mut rng).unwrap();
            adam_step(net.net_mut(), &grads, &mut adam).unwrap();
            if step < 50 {
                first_window += loss / 50.0;
            }
            if step >= steps - 50 {
                last_window += loss / 50.0;
            }
        }
        assert!(
            last_window <= 0.5 * first_window,
            "loss did not halve: {first_window} -> {last_window}"
        );

        let mut counts = [0usize; 2];
        let n = 10_000;
        for _ in 0..n {
            let a = sample_action(&net, &[0.0, 0.0], &sched, None, &mut rng).unwrap();
            let d0 = crate::math::sq_dist(&a, &modes[0]);
            let d1 = crate::math::sq_dist(&a, &modes[1]);
            counts[usize::from(d1 < d0)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            assert!(
                *c >= n / 5,
                "mode {i} starved: {c} of {n} samples ({counts:?})"
            );
        }
    }

    #[test]
    fn timestep_embedding_shape_and_determinism() {
        let e1 = timestep_embedding(3, TIMESTEP_EMBED_DIM);
        assert_eq!(e1.len(), TIMESTEP_EMBED_DIM);
        assert_eq!(e1, timestep_embedding(3, TIMESTEP_EMBED_DIM));
        assert_ne!(e1, timestep_embedding(4, TIMESTEP_EMBED_DIM));
        assert!(e1.iter().all(|v| v.abs() <= 1.0));
    }
}
