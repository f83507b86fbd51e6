//! Noise schedules, forward noising, and deterministic denoise/invert steps.
//!
//! Timesteps are 1-based: `t` ranges over `1..=t_total`, and `alpha_bar(0)`
//! is defined as 1 so the zero-noise boundary falls out of the formulas.
//! Trajectory math is generic over the element type; tests run it in f64.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{Grid, Scalar};
use crate::mat::Mat;

/// Per-timestep diffusion coefficients.
///
/// `variance[t-1]` holds the posterior variance
/// `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`, the reverse-step Gaussian
/// variance for a point data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_total: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    variance: Vec<f64>,
}

/// Linear beta ramp from `beta_min` to `beta_max` over `t_total` steps.
pub fn build_schedule(t_total: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_total < 2 {
        return Err(CoreError::InvalidParameter(format!(
            "schedule needs at least 2 timesteps, got {t_total}"
        )));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CoreError::InvalidParameter(format!(
            "betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut betas = Vec::with_capacity(t_total);
    let mut alphas = Vec::with_capacity(t_total);
    let mut alpha_bars = Vec::with_capacity(t_total);
    let mut variance = Vec::with_capacity(t_total);
    let mut abar = 1.0f64;
    for i in 0..t_total {
        let frac = i as f64 / (t_total - 1) as f64;
        let beta = beta_min + (beta_max - beta_min) * frac;
        let alpha = 1.0 - beta;
        let abar_prev = abar;
        abar *= alpha;
        betas.push(beta);
        alphas.push(alpha);
        alpha_bars.push(abar);
        variance.push((1.0 - abar_prev) / (1.0 - abar) * beta);
    }
    let s = NoiseSchedule { t_total, betas, alphas, alpha_bars, variance };
    s.validate()?;
    Ok(s)
}

impl NoiseSchedule {
    /// The stock configuration: 1000 steps, betas in [1e-4, 0.02].
    pub fn default_linear() -> Self {
        build_schedule(1000, 1e-4, 0.02).expect("default schedule parameters are valid")
    }

    fn validate(&self) -> Result<()> {
        for (i, &a) in self.alphas.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) {
                return Err(CoreError::InvalidParameter(format!(
                    "alpha_{} = {a} outside (0, 1)",
                    i + 1
                )));
            }
        }
        for w in self.alpha_bars.windows(2) {
            if w[1] >= w[0] {
                return Err(CoreError::InvalidParameter(
                    "alpha_bar must be strictly decreasing".to_string(),
                ));
            }
        }
        Ok(())
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_total {
            return Err(CoreError::TimestepOutOfRange { t, t_total: self.t_total });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_total, "beta({t}) out of range");
        self.betas[t - 1]
    }

    /// `alpha(0)` is 1 by convention.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        assert!(t <= self.t_total, "alpha({t}) out of range");
        self.alphas[t - 1]
    }

    /// `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        assert!(t <= self.t_total, "alpha_bar({t}) out of range");
        self.alpha_bars[t - 1]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_total, "variance({t}) out of range");
        self.variance[t - 1]
    }
}

/// Forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn add_noise<T: Scalar>(
    x0: &Grid<T>,
    t: usize,
    eps: &Grid<T>,
    s: &NoiseSchedule,
) -> Result<Grid<T>> {
    // t = 0 is the identity embedding (abar = 1), valid for noising only.
    if t > s.t_total() {
        return Err(CoreError::TimestepOutOfRange { t, t_total: s.t_total() });
    }
    let abar = s.alpha_bar(t);
    let ca = T::from_f64(abar.sqrt()).unwrap();
    let ce = T::from_f64((1.0 - abar).sqrt()).unwrap();
    x0.zip_map(eps, |a, e| ca * a + ce * e)
}

/// One reverse step:
/// `x_{t-1} = (x_t - (1 - alpha_t)/sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)
///            + sqrt(1 - alpha_{t-1}) z`.
///
/// Omitting `z` gives the deterministic step used for inversion.
pub fn ddim_denoise_step<T: Scalar>(
    x_t: &Grid<T>,
    eps_hat: &Grid<T>,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Grid<T>>,
) -> Result<Grid<T>> {
    s.check_t(t)?;
    let alpha = s.alpha(t);
    let abar = s.alpha_bar(t);
    let c_eps = T::from_f64((1.0 - alpha) / (1.0 - abar).sqrt()).unwrap();
    let inv_sqrt_alpha = T::from_f64(1.0 / alpha.sqrt()).unwrap();
    let mean = x_t.zip_map(eps_hat, |x, e| inv_sqrt_alpha * (x - c_eps * e))?;
    match z {
        None => Ok(mean),
        Some(z) => {
            let sigma = T::from_f64((1.0 - s.alpha(t - 1)).sqrt()).unwrap();
            mean.zip_map(z, |m, n| m + sigma * n)
        }
    }
}

/// Algebraic inverse of the deterministic reverse step:
/// `x_t = sqrt(alpha_t) x_{t-1} + (1 - alpha_t)/sqrt(1 - abar_t) eps_hat`.
///
/// Feeding the result back through [`ddim_denoise_step`] with the same
/// `eps_hat` recovers `x_{t-1}` exactly up to floating error.
pub fn ddim_invert_step<T: Scalar>(
    x_prev: &Grid<T>,
    eps_hat: &Grid<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Grid<T>> {
    s.check_t(t)?;
    let alpha = s.alpha(t);
    if alpha == 0.0 {
        return Err(CoreError::InvalidParameter("alpha_t = 0 is not invertible".to_string()));
    }
    let abar = s.alpha_bar(t);
    let c_eps = T::from_f64((1.0 - alpha) / (1.0 - abar).sqrt()).unwrap();
    let sqrt_alpha = T::from_f64(alpha.sqrt()).unwrap();
    x_prev.zip_map(eps_hat, |x, e| sqrt_alpha * x + c_eps * e)
}

/// Noise predictor interface. Implementations must be deterministic given
/// their weights and inputs, and must preserve the input shape.
pub trait Denoiser<T: Scalar> {
    fn predict_noise(
        &self,
        x: &Grid<T>,
        t: usize,
        conditioning: Option<&Mat>,
        control: Option<&Grid<T>>,
    ) -> Result<Grid<T>>;

    /// True when the model has live cross-attention slots, in which case the
    /// clip denoiser refuses to run unconditioned.
    fn requires_conditioning(&self) -> bool {
        false
    }

    /// Content hash of the weights for run manifests; `None` for closed-form
    /// oracles that have no weights.
    fn weight_fingerprint(&self) -> Option<String> {
        None
    }

    /// Whether the edit pipeline may use this model. Oracles always may;
    /// learned models must have been trained first.
    fn edit_ready(&self) -> bool {
        true
    }
}

/// Bayes-optimal noise predictor for data drawn from `N(mean, var I)`.
///
/// With `x_t = sqrt(abar) x0 + sqrt(1-abar) eps`, conditioning on `x_t`
/// gives `E[eps | x_t] = (x_t - sqrt(abar) mean) sqrt(1-abar)
/// / (abar var + 1 - abar)`. The regression test suite re-fits this
/// expectation by Monte-Carlo least squares before trusting it.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianDenoiser {
    mean: f64,
    var: f64,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mean: f64, var: f64, schedule: NoiseSchedule) -> Result<Self> {
        if var < 0.0 || !var.is_finite() {
            return Err(CoreError::InvalidParameter(format!(
                "data variance must be non-negative, got {var}"
            )));
        }
        Ok(Self { mean, var, schedule })
    }

    pub fn data_mean(&self) -> f64 {
        self.mean
    }

    pub fn data_var(&self) -> f64 {
        self.var
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Closed-form `E[eps | x_t]` for a scalar value.
    pub fn eps_star(&self, x: f64, t: usize) -> f64 {
        let abar = self.schedule.alpha_bar(t);
        (x - abar.sqrt() * self.mean) * (1.0 - abar).sqrt() / (abar * self.var + 1.0 - abar)
    }

    /// Standard deviation of the exact reverse kernel `p(x_{t-1} | x_t)`.
    ///
    /// The deterministic step mean is already the exact reverse mean; the
    /// exact variance adds the spread of the data posterior propagated
    /// through the posterior-mean coefficient:
    /// `var* = beta_tilde + (sqrt(abar_{t-1}) beta_t / (1-abar_t))^2
    ///         * var (1-abar_t) / (abar_t var + 1-abar_t)`.
    /// Sampling with this sigma reproduces the data marginals exactly, which
    /// the stochastic-loop distribution test relies on.
    pub fn reverse_std(&self, t: usize) -> f64 {
        let s = &self.schedule;
        let beta = s.beta(t);
        let abar = s.alpha_bar(t);
        let abar_prev = s.alpha_bar(t - 1);
        let beta_tilde = (1.0 - abar_prev) / (1.0 - abar) * beta;
        let coef = abar_prev.sqrt() * beta / (1.0 - abar);
        let posterior_var = self.var * (1.0 - abar) / (abar * self.var + 1.0 - abar);
        (beta_tilde + coef * coef * posterior_var).sqrt()
    }
}

impl<T: Scalar> Denoiser<T> for AnalyticGaussianDenoiser {
    fn predict_noise(
        &self,
        x: &Grid<T>,
        t: usize,
        _conditioning: Option<&Mat>,
        _control: Option<&Grid<T>>,
    ) -> Result<Grid<T>> {
        self.schedule.check_t(t)?;
        Ok(x.map(|v| T::from_f64(self.eps_star(v.to_f64().unwrap(), t)).unwrap()))
    }
}

/// Chained deterministic inversion from a clean latent. Returns the whole
/// trajectory `[x_0, x_1, ..., x_steps]`; each step predicts noise at the
/// current latent, the usual inversion approximation.
pub fn invert_loop<T: Scalar>(
    x0: &Grid<T>,
    steps: usize,
    s: &NoiseSchedule,
    d: &dyn Denoiser<T>,
) -> Result<Vec<Grid<T>>> {
    if steps == 0 || steps > s.t_total() {
        return Err(CoreError::InvalidParameter(format!(
            "inversion steps must be in [1, {}], got {steps}",
            s.t_total()
        )));
    }
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.clone());
    for t in 1..=steps {
        let cur = traj.last().unwrap();
        let eps = d.predict_noise(cur, t, None, None)?;
        traj.push(ddim_invert_step(cur, &eps, t, s)?);
    }
    Ok(traj)
}

/// Chained deterministic sampling from `x_steps` down to `x_0`.
pub fn sample_loop<T: Scalar>(
    x_top: &Grid<T>,
    steps: usize,
    s: &NoiseSchedule,
    d: &dyn Denoiser<T>,
) -> Result<Grid<T>> {
    if steps == 0 || steps > s.t_total() {
        return Err(CoreError::InvalidParameter(format!(
            "sampling steps must be in [1, {}], got {steps}",
            s.t_total()
        )));
    }
    let mut x = x_top.clone();
    for t in (1..=steps).rev() {
        let eps = d.predict_noise(&x, t, None, None)?;
        x = ddim_denoise_step(&x, &eps, t, s, None)?;
    }
    Ok(x)
}
