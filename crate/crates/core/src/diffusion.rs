//! Discrete-time diffusion: noise schedule, forward noising, the
//! epsilon-prediction loss, and classifier-free guidance combination.

use crate::embedder::ConditionGrid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Serialized schedule description, echoed into run configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    #[serde(rename = "type")]
    pub kind: String,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(rename = "T")]
    pub t_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: "linear".into(),
            beta_min: 1e-4,
            beta_max: 0.02,
            t_steps: 1000,
        }
    }
}

/// Discrete schedule over t = 1..=T with ᾱ_0 := 1, plus continuous
/// log-linear interpolation of ᾱ for ODE samplers that step off-grid.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_steps: usize,
    betas: Vec<f64>,
    /// log ᾱ at integer t = 0..=T.
    log_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.kind != "linear" {
            return Err(Error::Config(format!("unknown schedule type `{}`", cfg.kind)));
        }
        Self::linear(cfg.beta_min, cfg.beta_max, cfg.t_steps)
    }

    pub fn linear(beta_min: f64, beta_max: f64, t_steps: usize) -> Result<Self> {
        if t_steps == 0 || beta_min <= 0.0 || beta_max >= 1.0 || beta_min > beta_max {
            return Err(Error::Config(format!(
                "invalid linear schedule: beta in [{beta_min}, {beta_max}], T={t_steps}"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        let mut log_alpha_bars = Vec::with_capacity(t_steps + 1);
        log_alpha_bars.push(0.0);
        let mut log_ab = 0.0f64;
        for i in 0..t_steps {
            let frac = if t_steps == 1 {
                0.0
            } else {
                i as f64 / (t_steps - 1) as f64
            };
            let beta = beta_min + (beta_max - beta_min) * frac;
            betas.push(beta);
            log_ab += (1.0 - beta).ln();
            log_alpha_bars.push(log_ab);
        }
        Ok(Self {
            t_steps,
            betas,
            log_alpha_bars,
        })
    }

    pub fn default_linear() -> Self {
        Self::from_config(&ScheduleConfig::default()).expect("default schedule is valid")
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.t_steps {
            return Err(Error::TimestepOutOfRange {
                t: t as f64,
                max: self.t_steps,
            });
        }
        Ok(self.betas[t - 1])
    }

    /// ᾱ at real-valued t in [0, T], log-linear between grid points.
    pub fn alpha_bar(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.t_steps as f64);
        let lo = t.floor() as usize;
        let hi = t.ceil() as usize;
        if lo == hi {
            return self.log_alpha_bars[lo].exp();
        }
        let w = t - lo as f64;
        ((1.0 - w) * self.log_alpha_bars[lo] + w * self.log_alpha_bars[hi]).exp()
    }

    /// (α_t, σ_t) = (√ᾱ_t, √(1−ᾱ_t)).
    pub fn alpha_sigma(&self, t: f64) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Log-SNR λ_t = ln(α_t/σ_t); strictly decreasing in t, defined for t > 0.
    pub fn lambda(&self, t: f64) -> f64 {
        let (a, s) = self.alpha_sigma(t);
        (a / s.max(1e-300)).ln()
    }

    /// Inverse of `lambda` by bisection on [t_lo, T].
    pub fn t_of_lambda(&self, lam: f64) -> f64 {
        let mut lo = 1e-6;
        let mut hi = self.t_steps as f64;
        if lam >= self.lambda(lo) {
            return lo;
        }
        if lam <= self.lambda(hi) {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.lambda(mid) > lam {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// x_t = √ᾱ_t · x₀ + √(1−ᾱ_t) · ε for an integer timestep.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        x0.check_same_shape(eps, "add_noise")?;
        if t < 1 || t > self.t_steps {
            return Err(Error::TimestepOutOfRange {
                t: t as f64,
                max: self.t_steps,
            });
        }
        let (a, s) = self.alpha_sigma(t as f64);
        x0.scale(a as f32).add(&eps.scale(s as f32))
    }
}

/// Classifier-free guidance scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GuidanceConfig {
    pub w: f64,
}

impl GuidanceConfig {
    pub fn new(w: f64) -> Result<Self> {
        if w < 0.0 || !w.is_finite() {
            return Err(Error::Config(format!("guidance scale w must be >= 0, got {w}")));
        }
        Ok(Self { w })
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w: 1.0 }
    }
}

/// ε_u + w·(ε_c − ε_u), with w=0 and w=1 returned exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f64) -> Result<Tensor> {
    eps_uncond.check_same_shape(eps_cond, "cfg_combine")?;
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let wf = w as f32;
    eps_uncond.zip(eps_cond, |u, c| u + wf * (c - u))
}

/// A noise predictor evaluated without gradient tracking. `t` is continuous
/// so ODE samplers can query off-grid timesteps.
pub trait EpsModel {
    fn eps(&self, x_t: &Tensor, t: f64, cond: Option<&ConditionGrid>) -> Result<Tensor>;
}

/// One training batch element for the epsilon loss.
pub struct NoisedSample {
    pub x0: Tensor,
    pub cond: Option<ConditionGrid>,
    pub t: usize,
    pub eps: Tensor,
}

/// Mean squared error between predicted and true noise, averaged over the
/// batch and all elements.
pub fn epsilon_loss(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    batch: &[NoisedSample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("epsilon_loss batch".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, sample) in batch.iter().enumerate() {
        let x_t = schedule.add_noise(&sample.x0, &sample.eps, sample.t)?;
        let pred = model.eps(&x_t, sample.t as f64, sample.cond.as_ref())?;
        pred.check_same_shape(&sample.eps, "epsilon_loss prediction")?;
        let mut acc = 0.0f64;
        for (p, e) in pred.data().iter().zip(sample.eps.data()) {
            let d = (*p as f64) - (*e as f64);
            acc += d * d;
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite(format!("epsilon_loss at batch index {i}")));
        }
        total += acc;
        count += pred.numel();
    }
    Ok(total / count as f64)
}
