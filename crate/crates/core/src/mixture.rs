//! Two-component Weibull mixture fitted by EM.
//!
//! Scores are translated onto positive support, the mixture is fitted with
//! a weighted-MLE M-step, and the component with the larger mean is taken
//! to model falsely-labeled instances. The selection threshold is that
//! component's scale parameter, mapped back to raw score units.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

/// Shape parameters are confined to this bracket during fitting.
pub const BETA_BRACKET: (f64, f64) = (0.02, 50.0);
/// Mixing weight below which a component is considered collapsed.
pub const MIN_COMPONENT_WEIGHT: f64 = 1e-4;
/// Minimum summed responsibility (effective sample size) per component.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 2.0;
/// Minimum number of samples accepted by [`em_fit`].
pub const MIN_FIT_SAMPLES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("Weibull parameters must be positive and finite (alpha={alpha}, beta={beta})")]
    InvalidParams { alpha: f64, beta: f64 },
    #[error("x={0} is outside the Weibull support (x > 0)")]
    OutsideSupport(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("samples and weights differ in length ({samples} vs {weights})")]
    LengthMismatch { samples: usize, weights: usize },
    #[error("sample {index} is {value}; all samples must be positive and finite")]
    NonPositiveSample { index: usize, value: f64 },
    #[error("weights must be finite, nonnegative and sum to a positive value")]
    InvalidWeights,
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("shape solver did not converge after {iterations} iterations (last beta={last_beta})")]
    NewtonNonConvergence { iterations: usize, last_beta: f64 },
    #[error("{component} component collapsed: {reason}")]
    Collapse { component: Component, reason: String },
}

/// Component label used before roles are assigned; `Lower` is the one
/// initialized from the lower half of the sorted scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Lower,
    Upper,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::Lower => "lower",
            Component::Upper => "upper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    /// Scale.
    pub alpha: f64,
    /// Shape.
    pub beta: f64,
}

impl WeibullParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, MixtureError> {
        if alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite() {
            Ok(Self { alpha, beta })
        } else {
            Err(MixtureError::InvalidParams { alpha, beta })
        }
    }

    /// Log density; `-inf` outside the support.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let z = x / self.alpha;
        let ln_z = z.ln();
        (self.beta / self.alpha).ln() + (self.beta - 1.0) * ln_z - (self.beta * ln_z).exp()
    }

    pub fn mean(&self) -> f64 {
        self.alpha * gamma(1.0 + 1.0 / self.beta)
    }
}

pub fn weibull_pdf(x: f64, p: &WeibullParams) -> Result<f64, MixtureError> {
    if !(x > 0.0) {
        return Err(MixtureError::OutsideSupport(x));
    }
    let z = x / p.alpha;
    Ok((p.beta / p.alpha) * z.powf(p.beta - 1.0) * (-z.powf(p.beta)).exp())
}

pub fn weibull_mean(p: &WeibullParams) -> f64 {
    p.mean()
}

/// Which threshold to derive from a fitted mixture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Scale parameter of the noisy component.
    #[default]
    NoisyScale,
    /// Point between the component means where both weighted densities agree.
    Crossover,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Relative log-likelihood change that ends EM.
    pub tol: f64,
    pub max_iters: usize,
    pub shift_epsilon: f64,
    /// Breaks ties when the median split lands inside a block of equal scores.
    pub seed: u64,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub threshold_rule: ThresholdRule,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 500,
            shift_epsilon: 1e-3,
            seed: 0,
            newton_tol: 1e-10,
            newton_max_iters: 100,
            threshold_rule: ThresholdRule::NoisyScale,
        }
    }
}

/// Weighted maximum-likelihood Weibull fit.
///
/// The shape solves the weighted profile score equation
///
/// ```text
/// g(b) = 1/b + sum(w ln x)/W - sum(w x^b ln x) / sum(w x^b) = 0
/// ```
///
/// by damped Newton steps inside a sign bracket, falling back to bisection
/// whenever a step leaves the bracket. `g` is strictly decreasing, so the
/// root is unique; if it lies outside [`BETA_BRACKET`] the nearest bracket
/// end is returned. The scale then follows in closed form,
/// `a = (sum(w x^b) / W)^(1/b)`.
pub fn weighted_weibull_mle(
    samples: &[f64],
    weights: &[f64],
    newton_tol: f64,
    newton_max_iters: usize,
) -> Result<WeibullParams, MixtureError> {
    weighted_weibull_mle_from(samples, weights, newton_tol, newton_max_iters, 1.0)
}

fn weighted_weibull_mle_from(
    samples: &[f64],
    weights: &[f64],
    newton_tol: f64,
    newton_max_iters: usize,
    beta_start: f64,
) -> Result<WeibullParams, MixtureError> {
    if samples.len() != weights.len() {
        return Err(MixtureError::LengthMismatch { samples: samples.len(), weights: weights.len() });
    }
    if samples.len() < 2 {
        return Err(MixtureError::TooFewSamples { needed: 2, got: samples.len() });
    }
    if let Some((index, &value)) = samples.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x.is_finite())) {
        return Err(MixtureError::NonPositiveSample { index, value });
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(MixtureError::InvalidWeights);
    }
    let total_w: f64 = weights.iter().sum();
    if !(total_w > 0.0) {
        return Err(MixtureError::InvalidWeights);
    }

    let ln_x: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
    let mean_ln = weights.iter().zip(&ln_x).map(|(w, l)| w * l).sum::<f64>() / total_w;
    let var_ln = weights.iter().zip(&ln_x).map(|(w, l)| w * (l - mean_ln).powi(2)).sum::<f64>() / total_w;
    let max_ln =
        weights.iter().zip(&ln_x).filter(|(w, _)| **w > 0.0).map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    if !(var_ln > 1e-14 * (1.0 + mean_ln * mean_ln)) {
        return Err(MixtureError::Degenerate("all weighted samples are identical; the shape is unbounded".into()));
    }

    // Returns (g, g') at beta and the log of sum(w x^b) for the scale.
    let score = |beta: f64| -> (f64, f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (w, l) in weights.iter().zip(&ln_x) {
            if *w == 0.0 {
                continue;
            }
            let e = w * (beta * (l - max_ln)).exp();
            s0 += e;
            s1 += e * l;
            s2 += e * l * l;
        }
        let m1 = s1 / s0;
        let var = (s2 / s0 - m1 * m1).max(0.0);
        let g = 1.0 / beta + mean_ln - m1;
        let dg = -1.0 / (beta * beta) - var;
        (g, dg, s0.ln() + beta * max_ln)
    };

    let (mut lo, mut hi) = BETA_BRACKET;
    let beta = if score(hi).0 >= 0.0 {
        hi
    } else if score(lo).0 <= 0.0 {
        lo
    } else {
        let mut beta = beta_start.clamp(lo, hi);
        let mut converged = false;
        for _ in 0..newton_max_iters {
            let (g, dg, _) = score(beta);
            if g > 0.0 {
                lo = beta;
            } else {
                hi = beta;
            }
            let mut next = beta - g / dg;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - beta).abs();
            beta = next;
            if step <= newton_tol * beta.max(1.0) || g == 0.0 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(MixtureError::NewtonNonConvergence { iterations: newton_max_iters, last_beta: beta });
        }
        beta
    };

    let ln_s0 = score(beta).2;
    let alpha = ((ln_s0 - total_w.ln()) / beta).exp();
    WeibullParams::new(alpha, beta)
}

/// Weighted Weibull log-likelihood.
pub fn weighted_log_likelihood(samples: &[f64], weights: &[f64], p: &WeibullParams) -> f64 {
    samples.iter().zip(weights).map(|(x, w)| w * p.ln_pdf(*x)).sum()
}

/// Translates scores so the minimum lands on `epsilon`.
///
/// Returns the shifted scores and the offset `shift = min - epsilon`, so
/// `raw = shifted + shift`.
pub fn shift_to_support(scores: &[f64], epsilon: f64) -> (Vec<f64>, f64) {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = min - epsilon;
    (scores.iter().map(|s| s - shift).collect(), shift)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    /// Which of the two fitted components models the noisy data.
    pub noisy: Component,
    /// Set when both means were exactly equal and the tie went to the
    /// larger scale.
    pub tie: bool,
}

/// The component with the larger mean is the noisy one.
pub fn identify_components(lower: &WeibullParams, upper: &WeibullParams) -> RoleAssignment {
    let (ml, mu) = (lower.mean(), upper.mean());
    if ml > mu {
        RoleAssignment { noisy: Component::Lower, tie: false }
    } else if mu > ml {
        RoleAssignment { noisy: Component::Upper, tie: false }
    } else {
        let noisy = if lower.alpha > upper.alpha { Component::Lower } else { Component::Upper };
        RoleAssignment { noisy, tie: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub k_clean: f64,
    pub k_noisy: f64,
    pub clean: WeibullParams,
    pub noisy: WeibullParams,
    /// `raw score = fitted-space value + shift`.
    pub shift: f64,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub roles: RoleAssignment,
}

impl MixtureFit {
    /// Weighted component densities `(k_c phi_c(x), k_n phi_n(x))` at a
    /// point in fitted (shifted) units.
    pub fn component_densities(&self, x: f64) -> (f64, f64) {
        if x <= 0.0 {
            return (0.0, 0.0);
        }
        (self.k_clean * self.clean.ln_pdf(x).exp(), self.k_noisy * self.noisy.ln_pdf(x).exp())
    }

    pub fn density(&self, x: f64) -> f64 {
        let (c, n) = self.component_densities(x);
        c + n
    }

    /// Posterior `(P(clean | x), P(noisy | x))` in fitted units.
    pub fn responsibilities(&self, x: f64) -> (f64, f64) {
        let lc = self.k_clean.ln() + self.clean.ln_pdf(x);
        let ln = self.k_noisy.ln() + self.noisy.ln_pdf(x);
        let norm = log_sum_exp(lc, ln);
        ((lc - norm).exp(), (ln - norm).exp())
    }

    /// True when the two components are practically indistinguishable.
    pub fn is_degenerate(&self) -> bool {
        let (mc, mn) = (self.clean.mean(), self.noisy.mean());
        self.roles.tie || (mn - mc).abs() <= 0.15 * mc.max(mn)
    }

    pub fn to_report(&self, rule: ThresholdRule) -> MixtureReport {
        MixtureReport {
            k_clean: self.k_clean,
            k_noisy: self.k_noisy,
            clean: self.clean,
            noisy: self.noisy,
            shift: self.shift,
            threshold: threshold_with(self, rule),
            loglik_trace: self.loglik_trace.clone(),
            converged: self.converged,
        }
    }
}

/// Serialized form of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub k_clean: f64,
    pub k_noisy: f64,
    pub clean: WeibullParams,
    pub noisy: WeibullParams,
    pub shift: f64,
    pub threshold: f64,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Method-of-moments Weibull estimate, shape clamped to [`BETA_BRACKET`].
fn moments_estimate(xs: &[f64]) -> WeibullParams {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let cv2 = var / (mean * mean);
    // Squared coefficient of variation is decreasing in the shape.
    let cv2_of = |b: f64| {
        let g1 = gamma(1.0 + 1.0 / b);
        gamma(1.0 + 2.0 / b) / (g1 * g1) - 1.0
    };
    let (mut lo, mut hi) = BETA_BRACKET;
    let beta = if cv2 >= cv2_of(lo) {
        lo
    } else if cv2 <= cv2_of(hi) {
        hi
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cv2_of(mid) > cv2 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    WeibullParams { alpha: mean / gamma(1.0 + 1.0 / beta), beta }
}

/// Index splitting sorted scores into two initialization halves. When the
/// median falls inside a run of equal values the split moves to the
/// nearer end of that run; an exact tie goes to the side picked by `seed`.
fn split_index(sorted: &[f64], seed: u64) -> Option<usize> {
    let n = sorted.len();
    let mid = n / 2;
    if sorted[mid - 1] < sorted[mid] {
        return Some(mid);
    }
    let v = sorted[mid];
    let start = sorted.partition_point(|&x| x < v);
    let end = sorted.partition_point(|&x| x <= v);
    let down = (start > 0).then_some(start);
    let up = (end < n).then_some(end);
    match (down, up) {
        (Some(d), Some(u)) => {
            let (dd, du) = (mid - d, u - mid);
            Some(if dd < du || (dd == du && seed.is_multiple_of(2)) { d } else { u })
        }
        (d, u) => d.or(u),
    }
}

/// Fits the two-component mixture to positive scores.
///
/// Fails with [`MixtureError::Degenerate`] when the scores take fewer than
/// three distinct values, when BIC prefers a single Weibull, or when the
/// larger-mean component does not also have the larger scale, and with
/// [`MixtureError::Collapse`] when a component loses its support during EM.
/// Hitting `max_iters` is not an error; the fit comes back with
/// `converged = false`.
pub fn em_fit(scores: &[f64], config: &FitConfig) -> Result<MixtureFit, MixtureError> {
    let n = scores.len();
    if n < MIN_FIT_SAMPLES {
        return Err(MixtureError::TooFewSamples { needed: MIN_FIT_SAMPLES, got: n });
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x.is_finite())) {
        return Err(MixtureError::NonPositiveSample { index, value });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = 1 + sorted.windows(2).filter(|w| w[0] != w[1]).count();
    if distinct < 3 {
        // Each component can sit on one atom with unbounded likelihood.
        return Err(MixtureError::Degenerate(format!(
            "scores take only {distinct} distinct value(s); a two-component fit is unbounded"
        )));
    }
    let split = split_index(&sorted, config.seed).expect("at least three distinct values");

    let mut comps = [moments_estimate(&sorted[..split]), moments_estimate(&sorted[split..])];
    let mut weights = [0.5, 0.5];
    let mut resp = [vec![0.0; n], vec![0.0; n]];

    let e_step = |comps: &[WeibullParams; 2], weights: &[f64; 2], resp: &mut [Vec<f64>; 2]| {
        let (lw0, lw1) = (weights[0].ln(), weights[1].ln());
        compensated_sum(scores.iter().enumerate().map(|(i, &x)| {
            let l0 = lw0 + comps[0].ln_pdf(x);
            let l1 = lw1 + comps[1].ln_pdf(x);
            let norm = log_sum_exp(l0, l1);
            resp[0][i] = (l0 - norm).exp();
            resp[1][i] = (l1 - norm).exp();
            norm
        }))
    };

    let mut trace = vec![e_step(&comps, &weights, &mut resp)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        for (j, component) in [Component::Lower, Component::Upper].into_iter().enumerate() {
            let mass: f64 = resp[j].iter().sum();
            let k = mass / n as f64;
            if k < MIN_COMPONENT_WEIGHT {
                return Err(MixtureError::Collapse {
                    component,
                    reason: format!("mixing weight {k:.3e} below {MIN_COMPONENT_WEIGHT:e}"),
                });
            }
            if mass < MIN_EFFECTIVE_SAMPLES {
                return Err(MixtureError::Collapse {
                    component,
                    reason: format!("effective sample size {mass:.3} below {MIN_EFFECTIVE_SAMPLES}"),
                });
            }
            weights[j] = k;
            comps[j] =
                weighted_weibull_mle_from(scores, &resp[j], config.newton_tol, config.newton_max_iters, comps[j].beta)
                    .map_err(|e| match e {
                        MixtureError::Degenerate(reason) => MixtureError::Collapse { component, reason },
                        other => other,
                    })?;
        }
        // Keep the weights summing to one exactly.
        weights[1] = 1.0 - weights[0];

        let ll = e_step(&comps, &weights, &mut resp);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.tol {
            converged = true;
            break;
        }
    }

    let ll_mix = *trace.last().unwrap();
    let single = weighted_weibull_mle(scores, &vec![1.0; n], config.newton_tol, config.newton_max_iters)?;
    let ll_single = compensated_sum(scores.iter().map(|&x| single.ln_pdf(x)));
    // BIC with 5 free parameters against 2 for a single Weibull.
    let ln_n = (n as f64).ln();
    if -2.0 * ll_single + 2.0 * ln_n <= -2.0 * ll_mix + 5.0 * ln_n {
        return Err(MixtureError::Degenerate(format!(
            "a single Weibull explains the scores as well as two components \
             (log-likelihood {ll_single:.3} vs {ll_mix:.3} over {n} samples)"
        )));
    }

    let roles = identify_components(&comps[0], &comps[1]);
    let (clean_idx, noisy_idx) = match roles.noisy {
        Component::Lower => (1, 0),
        Component::Upper => (0, 1),
    };
    if !roles.tie && comps[noisy_idx].alpha <= comps[clean_idx].alpha {
        // A heavy-tailed component can have the larger mean but the smaller
        // scale; its scale then cuts below the clean bulk.
        return Err(MixtureError::Degenerate(format!(
            "the larger-mean component has the smaller scale ({:.4} vs {:.4}, shapes {:.3} vs {:.3})",
            comps[noisy_idx].alpha, comps[clean_idx].alpha, comps[noisy_idx].beta, comps[clean_idx].beta
        )));
    }
    Ok(MixtureFit {
        k_clean: weights[clean_idx],
        k_noisy: weights[noisy_idx],
        clean: comps[clean_idx],
        noisy: comps[noisy_idx],
        shift: 0.0,
        loglik_trace: trace,
        iterations,
        converged,
        roles,
    })
}

/// Shifts raw scores onto positive support and fits; the returned fit
/// records the shift so thresholds come back in raw units.
pub fn fit_raw_scores(raw: &[f64], config: &FitConfig) -> Result<MixtureFit, MixtureError> {
    if raw.is_empty() {
        return Err(MixtureError::TooFewSamples { needed: MIN_FIT_SAMPLES, got: 0 });
    }
    let (shifted, shift) = shift_to_support(raw, config.shift_epsilon);
    let mut fit = em_fit(&shifted, config)?;
    fit.shift = shift;
    Ok(fit)
}

/// Noisy component's scale, in raw score units.
pub fn threshold(fit: &MixtureFit) -> f64 {
    fit.noisy.alpha + fit.shift
}

/// Raw-unit point between the component means where the weighted densities
/// are equal. Falls back to [`threshold`] when no crossing exists there.
pub fn crossover_threshold(fit: &MixtureFit) -> f64 {
    let diff = |x: f64| {
        let (c, n) = fit.component_densities(x);
        c - n
    };
    let (mut lo, mut hi) = (fit.clean.mean(), fit.noisy.mean());
    if !(lo < hi) || diff(lo) * diff(hi) > 0.0 {
        return threshold(fit);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (diff(mid) > 0.0) == (diff(lo) > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) + fit.shift
}

pub fn threshold_with(fit: &MixtureFit, rule: ThresholdRule) -> f64 {
    match rule {
        ThresholdRule::NoisyScale => threshold(fit),
        ThresholdRule::Crossover => crossover_threshold(fit),
    }
}
