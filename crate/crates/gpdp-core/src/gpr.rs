//! Exact Gaussian process regression over states, predicting actions.
//!
//! The model is a zero-mean GP with a squared-exponential kernel shared by
//! all action dimensions: one set of hyperparameters, one Cholesky factor,
//! `m` independent output columns. Fitting minimizes the negative marginal
//! log-likelihood (summed over output columns) by monotone gradient descent
//! on the log hyperparameters, with seeded multi-start.
//!
//! The posterior at a query state is the usual pair
//!
//! - `mean = K_*S (K_SS + sigma_n^2 I)^-1 A`
//! - `var  = k(s*, s*) - K_*S (K_SS + sigma_n^2 I)^-1 K_S*`
//!
//! computed through the cached Cholesky factor. Far from the training states
//! the mean decays to zero and the variance saturates at `sigma_p^2`, which
//! is what lets the guided sampler fall back to the plain reverse process.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::{dot, Mat};
use crate::math;
use crate::{Error, Result};

/// `ln(1e4)`: log-hyperparameters are clamped to `[-LN_PARAM_BOUND, LN_PARAM_BOUND]`
/// during optimization.
pub const LN_PARAM_BOUND: f64 = 9.210340371976184;

/// Default cap on the number of training rows (exact inference is `O(H^3)`).
pub const DEFAULT_TRAINING_CAP: usize = 2048;

/// Kernel and noise hyperparameters, stored as logs for unconstrained search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelHyperparams {
    ln_sigma_n: f64,
    ln_sigma_p: f64,
    ln_length: f64,
}

impl KernelHyperparams {
    /// Builds from linear-scale values; all must be strictly positive.
    pub fn new(sigma_n: f64, sigma_p: f64, length: f64) -> Result<Self> {
        for (name, v) in [("sigma_n", sigma_n), ("sigma_p", sigma_p), ("length", length)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(alloc::format!(
                    "kernel hyperparameter {name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(KernelHyperparams {
            ln_sigma_n: math::ln(sigma_n),
            ln_sigma_p: math::ln(sigma_p),
            ln_length: math::ln(length),
        })
    }

    pub fn sigma_n(&self) -> f64 {
        math::exp(self.ln_sigma_n)
    }

    pub fn sigma_p(&self) -> f64 {
        math::exp(self.ln_sigma_p)
    }

    pub fn length(&self) -> f64 {
        math::exp(self.ln_length)
    }

    fn to_ln_array(self) -> [f64; 3] {
        [self.ln_sigma_n, self.ln_sigma_p, self.ln_length]
    }

    fn from_ln_array(v: [f64; 3]) -> Self {
        KernelHyperparams {
            ln_sigma_n: v[0],
            ln_sigma_p: v[1],
            ln_length: v[2],
        }
    }

    fn clamped(self) -> Self {
        let c = |x: f64| math::clamp(x, -LN_PARAM_BOUND, LN_PARAM_BOUND);
        KernelHyperparams {
            ln_sigma_n: c(self.ln_sigma_n),
            ln_sigma_p: c(self.ln_sigma_p),
            ln_length: c(self.ln_length),
        }
    }
}

/// Squared-exponential kernel `sigma_p^2 * exp(-||s1 - s2||^2 / (2 l^2))`.
pub fn se_kernel(s1: &[f64], s2: &[f64], hp: &KernelHyperparams) -> Result<f64> {
    if s1.len() != s2.len() {
        return Err(Error::ShapeMismatch {
            context: "se_kernel input dimensions",
            expected: s1.len(),
            got: s2.len(),
        });
    }
    Ok(se_kernel_sq_dist(math::sq_dist(s1, s2), hp))
}

#[inline]
fn se_kernel_sq_dist(sq_dist: f64, hp: &KernelHyperparams) -> f64 {
    let sigma_p = hp.sigma_p();
    let l = hp.length();
    sigma_p * sigma_p * math::exp(-sq_dist / (2.0 * l * l))
}

/// Per-column affine map making each state column zero-mean, unit-std.
///
/// Constant columns keep std 1 so they pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(states: &Mat) -> Self {
        let (h, d) = (states.rows(), states.cols());
        let mut mean = vec![0.0; d];
        for r in 0..h {
            for (m, v) in mean.iter_mut().zip(states.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= h as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..h {
            for c in 0..d {
                let dv = states[(r, c)] - mean[c];
                var[c] += dv * dv;
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = math::sqrt(v / h as f64);
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_mat(&self, states: &Mat) -> Mat {
        Mat::from_fn(states.rows(), states.cols(), |r, c| {
            (states[(r, c)] - self.mean[c]) / self.std[c]
        })
    }
}

/// Posterior of the guidance distribution at one query state: mean over the
/// `m` action dimensions plus one shared scalar variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GprPosterior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Fitting knobs; the defaults are the crate-wide contract.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Extra random starts beyond the caller's initial point.
    pub restarts: usize,
    /// Maximum number of training rows accepted.
    pub cap: usize,
    /// Gradient-descent iterations per start.
    pub iterations: usize,
    /// Base step size in log-hyperparameter space.
    pub step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 4,
            cap: DEFAULT_TRAINING_CAP,
            iterations: 200,
            step: 0.05,
        }
    }
}

/// A fitted GP: training matrices, hyperparameters, cached factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct GprModel {
    states_norm: Mat,
    actions: Mat,
    hyperparams: KernelHyperparams,
    standardizer: Standardizer,
    chol: Mat,
    alpha: Mat,
    jitter: f64,
}

impl GprModel {
    pub fn train_len(&self) -> usize {
        self.states_norm.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.states_norm.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.cols()
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hyperparams
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn states_norm(&self) -> &Mat {
        &self.states_norm
    }

    pub fn actions(&self) -> &Mat {
        &self.actions
    }

    pub fn chol(&self) -> &Mat {
        &self.chol
    }

    pub fn alpha(&self) -> &Mat {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior mean and variance at a raw (unstandardized) query state.
    pub fn posterior(&self, state: &[f64]) -> Result<GprPosterior> {
        if state.len() != self.state_dim() {
            return Err(Error::ShapeMismatch {
                context: "GprModel::posterior query dimension",
                expected: self.state_dim(),
                got: state.len(),
            });
        }
        let q = self.standardizer.apply(state);
        let h = self.train_len();
        let mut k_star = vec![0.0; h];
        for (r, k) in k_star.iter_mut().enumerate() {
            *k = se_kernel_sq_dist(math::sq_dist(self.states_norm.row(r), &q), &self.hyperparams);
        }
        let m = self.action_dim();
        let mut mean = vec![0.0; m];
        for r in 0..h {
            let a_row = self.alpha.row(r);
            for (mu, a) in mean.iter_mut().zip(a_row) {
                *mu += k_star[r] * a;
            }
        }
        let v = self.chol.solve_lower(&k_star);
        let sigma_p = self.hyperparams.sigma_p();
        let prior_var = sigma_p * sigma_p;
        let mut variance = prior_var - dot(&v, &v);
        if variance < 0.0 {
            let tol = 1e-12 * prior_var.max(1.0);
            if variance >= -tol {
                variance = 0.0;
            } else {
                return Err(Error::NonFinite("posterior variance went negative"));
            }
        }
        Ok(GprPosterior { mean, variance })
    }

    /// Minimum squared distance from a query to the training states, in
    /// standardized units. Used by callers probing the far-field regime.
    pub fn min_sq_dist(&self, state: &[f64]) -> Result<f64> {
        if state.len() != self.state_dim() {
            return Err(Error::ShapeMismatch {
                context: "GprModel::min_sq_dist query dimension",
                expected: self.state_dim(),
                got: state.len(),
            });
        }
        let q = self.standardizer.apply(state);
        let mut best = f64::INFINITY;
        for r in 0..self.train_len() {
            let d = math::sq_dist(self.states_norm.row(r), &q);
            if d < best {
                best = d;
            }
        }
        Ok(best)
    }

    /// Builds the ready-to-query model for fixed hyperparameters: states are
    /// standardized, the noisy kernel matrix factorized (with jitter rescue),
    /// and the mean weights precomputed.
    pub fn from_training(states: &Mat, actions: &Mat, hp: &KernelHyperparams) -> Result<Self> {
        if states.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if actions.rows() != states.rows() {
            return Err(Error::ShapeMismatch {
                context: "gpr training row counts",
                expected: states.rows(),
                got: actions.rows(),
            });
        }
        let standardizer = Standardizer::fit(states);
        let states_norm = standardizer.apply_mat(states);
        let k_se = kernel_matrix(&states_norm, hp);
        let (chol, jitter) = factorize_with_jitter(&k_se, hp)?;
        let alpha = chol.cholesky_solve_mat(actions);
        Ok(GprModel {
            states_norm,
            actions: actions.clone(),
            hyperparams: *hp,
            standardizer,
            chol,
            alpha,
            jitter,
        })
    }

    /// Rebuilds a model from stored parts, revalidating the factorization.
    pub fn from_parts(
        states_norm: Mat,
        actions: Mat,
        hyperparams: KernelHyperparams,
        standardizer: Standardizer,
        chol: Mat,
        alpha: Mat,
        jitter: f64,
    ) -> Result<Self> {
        let h = states_norm.rows();
        if actions.rows() != h || chol.rows() != h || chol.cols() != h || alpha.rows() != h {
            return Err(Error::ShapeMismatch {
                context: "GprModel::from_parts row counts",
                expected: h,
                got: actions.rows().min(chol.rows()).min(alpha.rows()),
            });
        }
        if alpha.cols() != actions.cols() {
            return Err(Error::ShapeMismatch {
                context: "GprModel::from_parts alpha columns",
                expected: actions.cols(),
                got: alpha.cols(),
            });
        }
        if standardizer.mean.len() != states_norm.cols() {
            return Err(Error::ShapeMismatch {
                context: "GprModel::from_parts standardizer width",
                expected: states_norm.cols(),
                got: standardizer.mean.len(),
            });
        }
        let model = GprModel {
            states_norm,
            actions,
            hyperparams,
            standardizer,
            chol,
            alpha,
            jitter,
        };
        let k = model.noisy_kernel_matrix();
        let recon = model.chol.matmul(&model.chol.transpose());
        let mut diff = 0.0;
        for (a, b) in recon.as_slice().iter().zip(k.as_slice()) {
            let d = a - b;
            diff += d * d;
        }
        let rel = math::sqrt(diff) / k.frobenius_norm();
        if !(rel < 1e-8) {
            return Err(Error::Decode("Cholesky factor does not match kernel matrix"));
        }
        Ok(model)
    }

    fn noisy_kernel_matrix(&self) -> Mat {
        let mut k = kernel_matrix(&self.states_norm, &self.hyperparams);
        let diag = self.hyperparams.sigma_n() * self.hyperparams.sigma_n() + self.jitter;
        for i in 0..k.rows() {
            k[(i, i)] += diag;
        }
        k
    }
}

fn kernel_matrix(states: &Mat, hp: &KernelHyperparams) -> Mat {
    let h = states.rows();
    let mut k = Mat::zeros(h, h);
    for i in 0..h {
        k[(i, i)] = se_kernel_sq_dist(0.0, hp);
        for j in 0..i {
            let v = se_kernel_sq_dist(math::sq_dist(states.row(i), states.row(j)), hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorizes `K + sigma_n^2 I`, escalating jitter from `1e-10 sigma_p^2`
/// by factors of 10 up to `1e-4 sigma_p^2` before giving up.
fn factorize_with_jitter(k_se: &Mat, hp: &KernelHyperparams) -> Result<(Mat, f64)> {
    let h = k_se.rows();
    let noise = hp.sigma_n() * hp.sigma_n();
    let prior = hp.sigma_p() * hp.sigma_p();
    let with_diag = |extra: f64| -> Mat {
        let mut k = k_se.clone();
        for i in 0..h {
            k[(i, i)] += noise + extra;
        }
        k
    };
    if let Ok(c) = with_diag(0.0).cholesky() {
        return Ok((c, 0.0));
    }
    let mut jitter = 1e-10 * prior;
    let max_jitter = 1e-4 * prior;
    loop {
        match with_diag(jitter).cholesky() {
            Ok(c) => return Ok((c, jitter)),
            Err(e) => {
                jitter *= 10.0;
                if jitter > max_jitter {
                    return Err(e);
                }
            }
        }
    }
}

/// Negative marginal log-likelihood of `(states, actions)` under `hp`,
/// summed over the action columns. States are used exactly as given.
pub fn marginal_nll(states: &Mat, actions: &Mat, hp: &KernelHyperparams) -> Result<f64> {
    let (nll, _) = nll_and_grad(states, actions, hp, false)?;
    Ok(nll)
}

const LN_2PI: f64 = 1.8378770664093453;

/// NLL plus (optionally) its gradient w.r.t. the log hyperparameters.
fn nll_and_grad(
    states: &Mat,
    actions: &Mat,
    hp: &KernelHyperparams,
    want_grad: bool,
) -> Result<(f64, [f64; 3])> {
    let h = states.rows();
    if actions.rows() != h {
        return Err(Error::ShapeMismatch {
            context: "gpr nll row counts",
            expected: h,
            got: actions.rows(),
        });
    }
    let m = actions.cols() as f64;
    let k_se = kernel_matrix(states, hp);
    let (chol, _jitter) = factorize_with_jitter(&k_se, hp)?;
    let alpha = chol.cholesky_solve_mat(actions);
    let mut data_term = 0.0;
    for r in 0..h {
        data_term += dot(actions.row(r), alpha.row(r));
    }
    let logdet = chol.logdet_from_cholesky();
    let nll = 0.5 * data_term + 0.5 * m * logdet + 0.5 * m * h as f64 * LN_2PI;
    if !want_grad {
        return Ok((nll, [0.0; 3]));
    }

    // P = m K^-1 - alpha alpha^T; dNLL/dtheta = tr(P dK/dtheta) / 2.
    let k_inv = chol.cholesky_solve_mat(&Mat::identity(h));
    let noise = hp.sigma_n() * hp.sigma_n();
    let ell = hp.length();
    let ell2 = ell * ell;
    let mut trace_p = 0.0;
    let mut trace_p_kse = 0.0;
    let mut trace_p_kse_r2 = 0.0;
    for i in 0..h {
        for j in 0..h {
            let p = m * k_inv[(i, j)] - dot(alpha.row(i), alpha.row(j));
            if i == j {
                trace_p += p;
                trace_p_kse += p * k_se[(i, j)];
            } else {
                let pk = p * k_se[(i, j)];
                trace_p_kse += pk;
                trace_p_kse_r2 += pk * math::sq_dist(states.row(i), states.row(j));
            }
        }
    }
    let grad = [
        noise * trace_p,             // d/d ln sigma_n
        trace_p_kse,                 // d/d ln sigma_p
        0.5 * trace_p_kse_r2 / ell2, // d/d ln length
    ];
    Ok((nll, grad))
}

/// Fits hyperparameters by monotone gradient descent with multi-start and
/// returns the ready-to-query model.
pub fn fit<R: Rng + ?Sized>(
    states: &Mat,
    actions: &Mat,
    init: &KernelHyperparams,
    config: &FitConfig,
    rng: &mut R,
) -> Result<GprModel> {
    let h = states.rows();
    if h < 2 {
        return Err(Error::InvalidParam(alloc::format!(
            "gpr fit needs at least 2 rows, got {h}"
        )));
    }
    if h > config.cap {
        return Err(Error::InvalidParam(alloc::format!(
            "gpr training size {h} exceeds cap {}",
            config.cap
        )));
    }
    if actions.rows() != h {
        return Err(Error::ShapeMismatch {
            context: "gpr fit row counts",
            expected: h,
            got: actions.rows(),
        });
    }
    let standardizer = Standardizer::fit(states);
    let states_norm = standardizer.apply_mat(states);

    let mut starts = Vec::with_capacity(config.restarts + 1);
    starts.push(init.clamped());
    for _ in 0..config.restarts {
        // Log-uniform draws over a moderate region of the bounded box.
        let ln_n = rng.gen_range(math::ln(1e-3)..0.0);
        let ln_p = rng.gen_range(math::ln(1e-2)..math::ln(1e2));
        let ln_l = rng.gen_range(math::ln(1e-2)..math::ln(1e2));
        starts.push(KernelHyperparams::from_ln_array([ln_n, ln_p, ln_l]));
    }

    let mut best: Option<([f64; 3], f64)> = None;
    for start in &starts {
        if let Ok((params, nll)) = descend(&states_norm, actions, *start, config) {
            if best.map_or(true, |(_, b)| nll < b) {
                best = Some((params, nll));
            }
        }
    }
    let (params, _) = best.ok_or(Error::CholeskyFailure { size: h, pivot: 0 })?;
    let hyperparams = KernelHyperparams::from_ln_array(params);
    GprModel::from_training(states, actions, &hyperparams)
}

/// Gradient descent on the log hyperparameters with per-step backtracking:
/// a step is only taken if it lowers the NLL, so the result never ends above
/// the NLL of its start point.
fn descend(
    states_norm: &Mat,
    actions: &Mat,
    start: KernelHyperparams,
    config: &FitConfig,
) -> Result<([f64; 3], f64)> {
    let mut params = start.clamped().to_ln_array();
    let (mut nll, mut grad) = nll_and_grad(
        states_norm,
        actions,
        &KernelHyperparams::from_ln_array(params),
        true,
    )?;
    for _ in 0..config.iterations {
        let mut step = config.step;
        let mut accepted = false;
        for _ in 0..8 {
            let mut trial = [0.0; 3];
            for i in 0..3 {
                trial[i] = math::clamp(params[i] - step * grad[i], -LN_PARAM_BOUND, LN_PARAM_BOUND);
            }
            if trial == params {
                break;
            }
            let hp = KernelHyperparams::from_ln_array(trial);
            match nll_and_grad(states_norm, actions, &hp, true) {
                Ok((trial_nll, trial_grad)) if trial_nll < nll => {
                    params = trial;
                    nll = trial_nll;
                    grad = trial_grad;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Ok((params, nll))
}
