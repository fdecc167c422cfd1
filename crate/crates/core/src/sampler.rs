//! Reverse-process samplers.
//!
//! `ddim` and `dpm2` integrate the probability-flow ODE written as an
//! exponential integrator in log-SNR λ: for a step from s to t with
//! h = λ_t − λ_s,
//!
//!   x_t = (α_t/α_s)·x_s − σ_t·(e^h − 1)·ε̂
//!
//! which is exact whenever ε̂ is constant over the step. `ddim` evaluates ε̂
//! once at s (first order); `dpm2` re-evaluates at the λ-midpoint (second
//! order). `ddpm` is the stochastic ancestral chain. DDIM/DDPM step
//! uniformly in t, dpm2 uniformly in λ. The last step lands exactly on t=1
//! and a final posterior-mean estimate maps to t=0, so no σ→0 division
//! ever happens.

use crate::diffusion::{cfg_combine, EpsModel, GuidanceConfig, NoiseSchedule};
use crate::embedder::ConditionGrid;
use crate::error::{Error, Result};
use crate::rng::derive_rng_indexed;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    Dpm2,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Dpm2,
            steps: 50,
            guidance: GuidanceConfig::default(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least 1 step".into()));
        }
        if self.kind == SamplerKind::Dpm2 && self.steps < 2 {
            return Err(Error::Config("dpm2 needs at least 2 steps".into()));
        }
        Ok(())
    }
}

/// One guided model evaluation. `w == 1` and `w == 0` skip the branch they
/// do not use, so those guidance scales reproduce single-branch sampling
/// bit-for-bit.
pub fn guided_eps(
    model: &dyn EpsModel,
    x: &Tensor,
    t: f64,
    cond: Option<&ConditionGrid>,
    w: f64,
) -> Result<Tensor> {
    match cond {
        None => model.eps(x, t, None),
        Some(g) => {
            if w == 1.0 {
                model.eps(x, t, Some(g))
            } else if w == 0.0 {
                model.eps(x, t, None)
            } else {
                let uncond = model.eps(x, t, None)?;
                let cond = model.eps(x, t, Some(g))?;
                cfg_combine(&uncond, &cond, w)
            }
        }
    }
}

/// First-order exponential-integrator step from t_hi down to t_lo given ε̂
/// evaluated anywhere in the interval.
fn exp_step(schedule: &NoiseSchedule, x: &Tensor, t_hi: f64, t_lo: f64, eps: &Tensor) -> Result<Tensor> {
    let (a_s, _) = schedule.alpha_sigma(t_hi);
    let (a_t, s_t) = schedule.alpha_sigma(t_lo);
    let h = schedule.lambda(t_lo) - schedule.lambda(t_hi);
    let c_x = (a_t / a_s) as f32;
    let c_e = (-s_t * (h.exp() - 1.0)) as f32;
    x.scale(c_x).add(&eps.scale(c_e))
}

/// Second-order step from t_hi down to t_lo: first model call at t_hi,
/// second at the λ-midpoint reached by a half-length first-order step.
pub fn dpm2_step(
    schedule: &NoiseSchedule,
    x: &Tensor,
    t_hi: f64,
    t_lo: f64,
    model: &dyn EpsModel,
    cond: Option<&ConditionGrid>,
    w: f64,
) -> Result<Tensor> {
    let lam_hi = schedule.lambda(t_hi);
    let lam_lo = schedule.lambda(t_lo);
    if lam_lo <= lam_hi {
        return Err(Error::Config(format!(
            "degenerate dpm2 interval: λ({t_lo}) = {lam_lo} must exceed λ({t_hi}) = {lam_hi}"
        )));
    }
    let t_mid = schedule.t_of_lambda(0.5 * (lam_hi + lam_lo));
    let eps_hi = guided_eps(model, x, t_hi, cond, w)?;
    let x_mid = exp_step(schedule, x, t_hi, t_mid, &eps_hi)?;
    let eps_mid = guided_eps(model, &x_mid, t_mid, cond, w)?;
    exp_step(schedule, x, t_hi, t_lo, &eps_mid)
}

/// Timestep grid from T down to 1 inclusive, `steps + 1` points.
fn time_grid(schedule: &NoiseSchedule, kind: SamplerKind, steps: usize) -> Vec<f64> {
    let t_max = schedule.t_steps() as f64;
    match kind {
        SamplerKind::Dpm2 => {
            let lam_a = schedule.lambda(t_max);
            let lam_b = schedule.lambda(1.0);
            (0..=steps)
                .map(|i| {
                    if i == 0 {
                        t_max
                    } else if i == steps {
                        1.0
                    } else {
                        let lam = lam_a + (lam_b - lam_a) * i as f64 / steps as f64;
                        schedule.t_of_lambda(lam)
                    }
                })
                .collect()
        }
        _ => (0..=steps)
            .map(|i| t_max - (t_max - 1.0) * i as f64 / steps as f64)
            .collect(),
    }
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::SamplerDiverged {
            step,
            detail: "non-finite state".into(),
        })
    }
}

/// Integrate from pure noise `x_init` at t = T down to t = 1 (no final
/// denoise). Exposed separately so convergence studies can compare the ODE
/// terminal state against a fine reference.
pub fn integrate(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    cond: Option<&ConditionGrid>,
    x_init: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let w = cfg.guidance.w;
    let grid = time_grid(schedule, cfg.kind, cfg.steps);
    let mut x = x_init.clone();
    check_finite(&x, 0)?;
    for i in 0..cfg.steps {
        let (t_hi, t_lo) = (grid[i], grid[i + 1]);
        x = match cfg.kind {
            SamplerKind::Ddim => {
                let eps = guided_eps(model, &x, t_hi, cond, w)?;
                exp_step(schedule, &x, t_hi, t_lo, &eps)?
            }
            SamplerKind::Dpm2 => dpm2_step(schedule, &x, t_hi, t_lo, model, cond, w)?,
            SamplerKind::Ddpm => {
                let eps = guided_eps(model, &x, t_hi, cond, w)?;
                let (a_s, s_s) = schedule.alpha_sigma(t_hi);
                let (a_t, s_t) = schedule.alpha_sigma(t_lo);
                // posterior of the strided chain: x0 estimate plus a split
                // of σ_t between the predicted direction and fresh noise
                let x0_hat = x
                    .add(&eps.scale(-s_s as f32))?
                    .scale((1.0 / a_s) as f32);
                let ab_s = a_s * a_s;
                let ab_t = a_t * a_t;
                let var = (s_t * s_t / (s_s * s_s)) * (1.0 - ab_s / ab_t);
                let sigma_tilde = var.max(0.0).sqrt();
                let dir = (s_t * s_t - var).max(0.0).sqrt();
                let mut rng = derive_rng_indexed(cfg.seed, "ddpm-noise", &[i as u64]);
                let z = Tensor::randn(x.shape(), &mut rng);
                x0_hat
                    .scale(a_t as f32)
                    .add(&eps.scale(dir as f32))?
                    .add(&z.scale(sigma_tilde as f32))?
            }
        };
        check_finite(&x, i + 1)?;
    }
    Ok(x)
}

/// Draw noise, integrate to t = 1, then take the posterior mean to t = 0.
pub fn sample(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    cond: Option<&ConditionGrid>,
    shape: &[usize],
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let mut rng = derive_rng_indexed(cfg.seed, "sampler-init", &[]);
    let x_init = Tensor::randn(shape, &mut rng);
    let x1 = integrate(model, schedule, cond, &x_init, cfg)?;
    let eps = guided_eps(model, &x1, 1.0, cond, cfg.guidance.w)?;
    let (a1, s1) = schedule.alpha_sigma(1.0);
    let x0 = x1.add(&eps.scale(-s1 as f32))?.scale((1.0 / a1) as f32);
    check_finite(&x0, cfg.steps + 1)?;
    Ok(x0)
}

/// One (guidance scale, metric value) row of a sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub w: f64,
    pub value: f64,
}

/// Argmin over the table; ties break toward the smaller w.
pub fn argmin_w(rows: &[SweepRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("guidance sweep table".into()));
    }
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.w.total_cmp(&b.w));
    let mut best = sorted[0];
    for row in &sorted[1..] {
        if row.value < best.value {
            best = row;
        }
    }
    Ok(best.w)
}

/// Score every w with the supplied metric (shared seeds are the caller's
/// responsibility) and return the table with its argmin.
pub fn guidance_sweep(
    ws: &[f64],
    mut score: impl FnMut(f64) -> Result<f64>,
) -> Result<(Vec<SweepRow>, f64)> {
    if ws.is_empty() {
        return Err(Error::EmptyInput("guidance sweep w list".into()));
    }
    let mut rows = Vec::with_capacity(ws.len());
    for &w in ws {
        let value = score(w)
            .map_err(|e| Error::Config(format!("sweep metric failed at w={w}: {e}")))?;
        rows.push(SweepRow { w, value });
    }
    let best = argmin_w(&rows)?;
    Ok((rows, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    struct ZeroModel;
    impl EpsModel for ZeroModel {
        fn eps(&self, x: &Tensor, _t: f64, _c: Option<&ConditionGrid>) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    struct ConstModel(f32);
    impl EpsModel for ConstModel {
        fn eps(&self, x: &Tensor, _t: f64, _c: Option<&ConditionGrid>) -> Result<Tensor> {
            Ok(Tensor::full(x.shape(), self.0))
        }
    }

    /// Smooth nonlinear 1-D field for the convergence study.
    struct WavyModel(NoiseSchedule);
    impl WavyModel {
        fn f(x: f64, lam: f64) -> f64 {
            (1.3 * x).sin() + 0.5 * (0.7 * lam).cos()
        }
    }
    impl EpsModel for WavyModel {
        fn eps(&self, x: &Tensor, t: f64, _c: Option<&ConditionGrid>) -> Result<Tensor> {
            let lam = self.0.lambda(t);
            Ok(x.map(|v| Self::f(v as f64, lam) as f32))
        }
    }

    /// Schedule with a mild terminal SNR so the 1-D problem is non-stiff
    /// and the coarse grids sit in the asymptotic convergence regime.
    fn gentle_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1e-4, 2e-3, 1000).unwrap()
    }

    fn cfg(kind: SamplerKind, steps: usize) -> SamplerConfig {
        SamplerConfig {
            kind,
            steps,
            guidance: GuidanceConfig::default(),
            seed: 7,
        }
    }

    /// f64 reference solution of dz/dλ = −e^{−λ}·ε̂(α·z, t(λ)) with z = x/α,
    /// classic fourth-order Runge-Kutta at very fine resolution.
    fn reference_terminal(schedule: &NoiseSchedule, x_init: f64, fine_steps: usize) -> f64 {
        let t_max = schedule.t_steps() as f64;
        let lam0 = schedule.lambda(t_max);
        let lam1 = schedule.lambda(1.0);
        let h = (lam1 - lam0) / fine_steps as f64;
        let alpha_of = |lam: f64| {
            // α = e^λ·σ and α² + σ² = 1 → α = e^λ / sqrt(1 + e^{2λ})
            let e = lam.exp();
            e / (1.0 + e * e).sqrt()
        };
        let deriv = |lam: f64, z: f64| -(-lam).exp() * WavyModel::f(alpha_of(lam) * z, lam);
        let mut z = x_init / alpha_of(lam0);
        let mut lam = lam0;
        for _ in 0..fine_steps {
            let k1 = deriv(lam, z);
            let k2 = deriv(lam + 0.5 * h, z + 0.5 * h * k1);
            let k3 = deriv(lam + 0.5 * h, z + 0.5 * h * k2);
            let k4 = deriv(lam + h, z + h * k3);
            z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            lam += h;
        }
        z * alpha_of(lam1)
    }

    #[test]
    fn zero_model_ddim_telescopes() {
        // ε̂ ≡ 0 collapses every step to x ← (α_t/α_s)·x, so the terminal
        // state is x_T · α(1)/α(T) regardless of step count.
        let s = NoiseSchedule::default_linear();
        let x_init = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        for steps in [1usize, 7, 50] {
            let out = integrate(&ZeroModel, &s, None, &x_init, &cfg(SamplerKind::Ddim, steps)).unwrap();
            let ratio = (s.alpha_sigma(1.0).0 / s.alpha_sigma(1000.0).0) as f32;
            for (o, i) in out.data().iter().zip(x_init.data()) {
                assert!((o - i * ratio).abs() < 1e-2 * ratio.abs(), "steps={steps}");
            }
        }
    }

    #[test]
    fn dpm2_exact_for_constant_eps() {
        let s = NoiseSchedule::default_linear();
        let x = Tensor::new(&[2], vec![0.3, -1.1]).unwrap();
        let (t_hi, t_lo) = (800.0, 300.0);
        let out = dpm2_step(&s, &x, t_hi, t_lo, &ConstModel(0.7), None, 1.0).unwrap();
        let (a_s, _) = s.alpha_sigma(t_hi);
        let (a_t, s_t) = s.alpha_sigma(t_lo);
        let h = s.lambda(t_lo) - s.lambda(t_hi);
        for (o, xi) in out.data().iter().zip(x.data()) {
            let exact = (a_t / a_s) * *xi as f64 - s_t * (h.exp() - 1.0) * 0.7;
            let rel = (*o as f64 - exact).abs() / exact.abs().max(1.0);
            assert!(rel < 1e-5, "got {o}, exact {exact}");
        }
    }

    #[test]
    fn dpm2_rejects_degenerate_interval() {
        let s = NoiseSchedule::default_linear();
        let x = Tensor::zeros(&[1]);
        assert!(dpm2_step(&s, &x, 300.0, 800.0, &ZeroModel, None, 1.0).is_err());
    }

    #[test]
    fn lambda_midpoint_is_monotone_between_endpoints() {
        let s = NoiseSchedule::default_linear();
        for (t_hi, t_lo) in [(1000.0, 500.0), (500.0, 100.0), (80.0, 1.0)] {
            let mid = s.t_of_lambda(0.5 * (s.lambda(t_hi) + s.lambda(t_lo)));
            assert!(mid < t_hi && mid > t_lo, "{t_hi}->{t_lo} gave {mid}");
        }
    }

    fn slope_fit(errors: &[(f64, f64)]) -> f64 {
        // least-squares slope of ln(err) vs ln(steps), returned positive
        let n = errors.len() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for &(steps, err) in errors {
            let x = steps.ln();
            let y = err.ln();
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        -(n * sxy - sx * sy) / (n * sxx - sx * sx)
    }

    #[test]
    fn convergence_orders_on_analytic_problem() {
        let s = gentle_schedule();
        let model = WavyModel(s.clone());
        let x0 = 0.9f64;
        let x_init = Tensor::new(&[1], vec![x0 as f32]).unwrap();
        let reference = reference_terminal(&s, x0, 20_000);
        let mut errs_ddim = Vec::new();
        let mut errs_dpm2 = Vec::new();
        for steps in [10usize, 20, 40, 80] {
            let c2 = cfg(SamplerKind::Dpm2, steps);
            let out2 = integrate(&model, &s, None, &x_init, &c2).unwrap();
            errs_dpm2.push((steps as f64, (out2.data()[0] as f64 - reference).abs()));

            let c1 = cfg(SamplerKind::Ddim, steps);
            let out1 = integrate(&model, &s, None, &x_init, &c1).unwrap();
            errs_ddim.push((steps as f64, (out1.data()[0] as f64 - reference).abs()));
        }
        let s2 = slope_fit(&errs_dpm2);
        let s1 = slope_fit(&errs_ddim);
        assert!((1.7..=2.3).contains(&s2), "dpm2 slope {s2}: {errs_dpm2:?}");
        assert!((0.8..=1.2).contains(&s1), "ddim slope {s1}: {errs_ddim:?}");
    }

    #[test]
    fn ddim_and_dpm2_agree_at_high_step_counts() {
        let s = gentle_schedule();
        let model = WavyModel(s.clone());
        let x_init = Tensor::new(&[1], vec![-0.4]).unwrap();
        let a = integrate(&model, &s, None, &x_init, &cfg(SamplerKind::Ddim, 1000)).unwrap();
        let b = integrate(&model, &s, None, &x_init, &cfg(SamplerKind::Dpm2, 200)).unwrap();
        assert!((a.data()[0] - b.data()[0]).abs() < 1e-2);
    }

    #[test]
    fn same_seed_same_sample() {
        let s = NoiseSchedule::default_linear();
        let model = WavyModel(s.clone());
        for kind in [SamplerKind::Ddpm, SamplerKind::Ddim, SamplerKind::Dpm2] {
            let c = cfg(kind, 8);
            let a = sample(&model, &s, None, &[2, 2, 3], &c).unwrap();
            let b = sample(&model, &s, None, &[2, 2, 3], &c).unwrap();
            assert_eq!(a, b);
            let mut c2 = c;
            c2.seed = 8;
            let d = sample(&model, &s, None, &[2, 2, 3], &c2).unwrap();
            assert_ne!(a, d);
        }
    }

    #[test]
    fn diverging_model_reports_step() {
        struct NanModel;
        impl EpsModel for NanModel {
            fn eps(&self, x: &Tensor, _t: f64, _c: Option<&ConditionGrid>) -> Result<Tensor> {
                Ok(Tensor::full(x.shape(), f32::NAN))
            }
        }
        let s = NoiseSchedule::default_linear();
        let err = sample(&NanModel, &s, None, &[2], &cfg(SamplerKind::Ddim, 4));
        assert!(matches!(err, Err(Error::SamplerDiverged { step: 1, .. })));
    }

    #[test]
    fn sweep_table_and_tie_rule() {
        let rows = [
            SweepRow { w: 2.0, value: 5.0 },
            SweepRow { w: 0.5, value: 5.0 },
            SweepRow { w: 1.0, value: 6.0 },
        ];
        assert_eq!(argmin_w(&rows).unwrap(), 0.5);
        let (table, best) = guidance_sweep(&[0.5, 1.0, 2.0], |w| Ok(w * w - 2.0 * w)).unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(best, 1.0);
        assert!(guidance_sweep(&[], |_| Ok(0.0)).is_err());
        let fail = guidance_sweep(&[1.5], |_| Err(Error::EmptyInput("x".into())));
        let msg = format!("{}", fail.unwrap_err());
        assert!(msg.contains("w=1.5"), "{msg}");
    }

    #[test]
    fn ddpm_sample_finite_and_reasonable() {
        let s = NoiseSchedule::default_linear();
        let mut rng = derive_rng(1, &["ddpm-smoke"]);
        let _ = &mut rng;
        let x = sample(&ZeroModel, &s, None, &[4, 4, 3], &cfg(SamplerKind::Ddpm, 25)).unwrap();
        assert!(x.is_finite());
    }
}
