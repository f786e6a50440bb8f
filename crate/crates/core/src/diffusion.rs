//! Noise schedule, v-parameterisation, DDIM sampling and classifier-free
//! guidance.
//!
//! Tensors here carry a leading batch axis. Per-sample timesteps are given
//! as one grid index per batch element.

use perco_tensor::{Elem, Rng, Tensor};

use crate::error::{invalid, mismatch, Result};

pub const COSINE_OFFSET: f64 = 0.008;
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

/// Squared-cosine cumulative signal level on a `T`-step grid, normalised so
/// that index 0 is exactly 1 and floored away from zero at the far end.
pub fn cosine_alpha_bar(t: usize, steps: usize) -> f64 {
    let f = |t: f64| {
        let a = ((t / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        a.cos().powi(2)
    };
    (f(t as f64) / f(0.0)).clamp(ALPHA_BAR_FLOOR, 1.0)
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    sqrt_ab: Vec<f64>,
    sqrt_1m: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return invalid(format!("schedule needs at least 2 steps, got {steps}"));
        }
        let alpha_bar: Vec<f64> = (0..=steps).map(|t| cosine_alpha_bar(t, steps)).collect();
        let sqrt_ab = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_1m = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(NoiseSchedule {
            alpha_bar,
            sqrt_ab,
            sqrt_1m,
        })
    }

    /// Schedule from an explicit ᾱ sequence (used by tests with hand values).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return invalid("alpha_bar must have ≥ 2 entries in [0, 1]");
        }
        let sqrt_ab = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_1m = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(NoiseSchedule {
            alpha_bar,
            sqrt_ab,
            sqrt_1m,
        })
    }

    /// Number of grid steps `T` (the sequence has `T + 1` entries).
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_ab[t]
    }

    pub fn sqrt_one_minus(&self, t: usize) -> f64 {
        self.sqrt_1m[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return invalid(format!("timestep {t} outside 0..={}", self.steps()));
        }
        Ok(())
    }
}

/// `a_b · x + c_b · y` with per-batch-element coefficients.
fn per_sample_affine<T: Elem>(x: &Tensor<T>, y: &Tensor<T>, coef: impl Fn(usize) -> (f64, f64)) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return mismatch(format!("shapes {:?} and {:?}", x.shape(), y.shape()));
    }
    let b = x.shape().first().copied().unwrap_or(1).max(1);
    let per = x.numel() / b;
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..b {
        let (a, c) = coef(i);
        let (a, c) = (T::from_f64_lossy(a), T::from_f64_lossy(c));
        let xs = &x.data()[i * per..(i + 1) * per];
        let ys = &y.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(ys).map(|(&u, &v)| a * u + c * v));
    }
    Ok(Tensor::new(x.shape(), out)?)
}

fn timesteps_for(x: &Tensor<impl Elem>, ts: &[usize], sched: &NoiseSchedule) -> Result<()> {
    let b = x.shape().first().copied().unwrap_or(1);
    if ts.len() != b {
        return mismatch(format!("{} timesteps for batch of {b}", ts.len()));
    }
    ts.iter().try_for_each(|&t| sched.check_t(t))
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` at one timestep for the whole tensor.
pub fn add_noise<T: Elem>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    per_sample_affine(x0, eps, |_| (sched.sqrt_ab[t], sched.sqrt_1m[t]))
}

pub fn add_noise_per_sample<T: Elem>(x0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    timesteps_for(x0, ts, sched)?;
    per_sample_affine(x0, eps, |i| (sched.sqrt_ab[ts[i]], sched.sqrt_1m[ts[i]]))
}

/// `v = √ᾱ_t·ε − √(1−ᾱ_t)·x0`.
pub fn v_target<T: Elem>(x0: &Tensor<T>, eps: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    per_sample_affine(eps, x0, |_| (sched.sqrt_ab[t], -sched.sqrt_1m[t]))
}

pub fn v_target_per_sample<T: Elem>(x0: &Tensor<T>, eps: &Tensor<T>, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor<T>> {
    timesteps_for(x0, ts, sched)?;
    per_sample_affine(eps, x0, |i| (sched.sqrt_ab[ts[i]], -sched.sqrt_1m[ts[i]]))
}

/// `x̂0 = √ᾱ_t·x_t − √(1−ᾱ_t)·v`.
pub fn x0_from_v<T: Elem>(x_t: &Tensor<T>, v: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    per_sample_affine(x_t, v, |_| (sched.sqrt_ab[t], -sched.sqrt_1m[t]))
}

/// `ε̂ = √(1−ᾱ_t)·x_t + √ᾱ_t·v`.
pub fn eps_from_v<T: Elem>(x_t: &Tensor<T>, v: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    per_sample_affine(x_t, v, |_| (sched.sqrt_1m[t], sched.sqrt_ab[t]))
}

/// Result of one stochastic evaluation of the training objective.
pub struct LossSample<T: Elem> {
    pub loss: Tensor<T>,
    pub text_dropped: bool,
    pub timesteps: Vec<usize>,
}

/// Mean squared error between the predicted and the true `v`, with `t`
/// drawn uniformly from `1..=T` per sample and the text condition dropped
/// for the whole batch with probability `text_drop_p`.
///
/// `predict(x_t, t, drop_text)` must return the v-prediction for the batch.
pub fn diffusion_loss<T: Elem, F>(x0: &Tensor<T>, sched: &NoiseSchedule, rng: &mut Rng, text_drop_p: f64, predict: F) -> Result<LossSample<T>>
where
    F: FnOnce(&Tensor<T>, &[usize], bool) -> Result<Tensor<T>>,
{
    if !(0.0..=1.0).contains(&text_drop_p) {
        return invalid(format!("text drop probability {text_drop_p} outside [0, 1]"));
    }
    let b = x0.shape().first().copied().unwrap_or(1);
    let text_dropped = rng.bernoulli(text_drop_p);
    let timesteps: Vec<usize> = (0..b).map(|_| 1 + rng.below(sched.steps())).collect();
    let eps = Tensor::new(x0.shape(), rng.normal_vec(x0.numel(), 1.0))?;
    let x_t = add_noise_per_sample(x0, &timesteps, &eps, sched)?;
    let target = v_target_per_sample(x0, &eps, &timesteps, sched)?;
    let pred = predict(&x_t, &timesteps, text_dropped)?;
    if pred.shape() != target.shape() {
        return mismatch(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()));
    }
    Ok(LossSample {
        loss: pred.mse(&target)?,
        text_dropped,
        timesteps,
    })
}

/// `u + λ·(c − u)`, evaluated as `(1 − λ)·u + λ·c` so both endpoints are exact.
pub fn cfg_combine<T: Elem>(uncond: &Tensor<T>, cond: &Tensor<T>, lambda_s: f64) -> Result<Tensor<T>> {
    if uncond.shape() != cond.shape() {
        return mismatch(format!("guidance branches {:?} vs {:?}", uncond.shape(), cond.shape()));
    }
    let (l, k) = (T::from_f64_lossy(lambda_s), T::from_f64_lossy(1.0 - lambda_s));
    let out = uncond.data().iter().zip(cond.data()).map(|(&u, &c)| k * u + l * c).collect();
    Ok(Tensor::new(cond.shape(), out)?)
}

/// One deterministic DDIM update from `t` down to `t_prev` given a
/// v-prediction at `t`.
pub fn ddim_step<T: Elem>(x_t: &Tensor<T>, v: &Tensor<T>, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if t_prev >= t {
        return invalid(format!("ddim step must go backwards, got {t} -> {t_prev}"));
    }
    let x0 = x0_from_v(x_t, v, t, sched)?;
    let eps = eps_from_v(x_t, v, t, sched)?;
    per_sample_affine(&x0, &eps, |_| (sched.sqrt_ab[t_prev], sched.sqrt_1m[t_prev]))
}

/// Inference sub-grid `round(i·T/n)` for `i = 0..=n`, ascending.
pub fn sub_grid(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return invalid(format!("{n} sampling steps on a {steps}-step grid"));
    }
    Ok((0..=n).map(|i| (i * steps + n / 2) / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    None,
    TextAndSpatial,
    TextOnly,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 3] = [GuidanceMode::None, GuidanceMode::TextAndSpatial, GuidanceMode::TextOnly];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::TextAndSpatial => "text_and_spatial",
            GuidanceMode::TextOnly => "text_only",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = crate::error::CodecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "text_and_spatial" => Ok(GuidanceMode::TextAndSpatial),
            "text_only" => Ok(GuidanceMode::TextOnly),
            other => invalid(format!("unknown guidance mode `{other}`")),
        }
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub lambda_s: f64,
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda_s: 3.0,
            mode: GuidanceMode::TextOnly,
        }
    }
}

/// Which conditions a denoiser call sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    /// Null text, spatial features kept.
    NoText,
    /// Null text and all-zeros spatial features.
    Unconditional,
}

pub trait Denoise<T: Elem> {
    fn predict_v(&self, x_t: &Tensor<T>, t: usize, branch: Branch) -> Result<Tensor<T>>;
}

/// Deterministic DDIM from pure noise. The only random draw is `x_T`.
pub fn ddim_sample<T: Elem, M: Denoise<T>>(
    model: &M,
    shape: &[usize],
    n_steps: usize,
    guidance: GuidanceConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let x_t = Tensor::new(shape, rng.normal_vec(n, 1.0))?;
    ddim_sample_from(model, x_t, n_steps, guidance, sched)
}

/// DDIM from a given starting point `x_T`; fully deterministic.
pub fn ddim_sample_from<T: Elem, M: Denoise<T>>(
    model: &M,
    x_t: Tensor<T>,
    n_steps: usize,
    guidance: GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if guidance.lambda_s < 0.0 || !guidance.lambda_s.is_finite() {
        return invalid(format!("guidance scale {} must be finite and ≥ 0", guidance.lambda_s));
    }
    let grid = sub_grid(sched.steps(), n_steps)?;
    let mut x = x_t;
    for w in grid.windows(2).rev() {
        let (t_prev, t) = (w[0], w[1]);
        let v = match guidance.mode {
            GuidanceMode::None => model.predict_v(&x, t, Branch::Conditional)?,
            mode => {
                let uncond_branch = if mode == GuidanceMode::TextOnly {
                    Branch::NoText
                } else {
                    Branch::Unconditional
                };
                let cond = model.predict_v(&x, t, Branch::Conditional)?;
                let uncond = model.predict_v(&x, t, uncond_branch)?;
                cfg_combine(&uncond, &cond, guidance.lambda_s)?
            }
        };
        x = ddim_step(&x, &v, t, t_prev, sched)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    fn hand(ab: f64) -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![1.0, ab, 0.0]).unwrap()
    }

    #[test]
    fn scalar_hand_values() {
        let s = hand(0.25);
        let xt = add_noise(&scalar(1.0), 1, &scalar(2.0), &s).unwrap();
        assert!((xt.item() - 2.2320508).abs() < 1e-7);
        let v = v_target(&scalar(1.0), &scalar(2.0), 1, &s).unwrap();
        assert!((v.item() - 0.1339746).abs() < 1e-7);
        assert_eq!(add_noise(&scalar(1.0), 0, &scalar(2.0), &s).unwrap().item(), 1.0);
        assert_eq!(add_noise(&scalar(1.0), 2, &scalar(2.0), &s).unwrap().item(), 2.0);
        assert_eq!(v_target(&scalar(1.0), &scalar(2.0), 0, &s).unwrap().item(), 2.0);
        assert_eq!(v_target(&scalar(1.0), &scalar(2.0), 2, &s).unwrap().item(), -1.0);
    }

    #[test]
    fn ddim_scalar_case() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.81, 0.25]).unwrap();
        let (x0, eps) = (scalar(1.0), scalar(2.0));
        let xt = add_noise(&x0, 2, &eps, &s).unwrap();
        let v = v_target(&x0, &eps, 2, &s).unwrap();
        let prev = ddim_step(&xt, &v, 2, 1, &s).unwrap();
        assert!((prev.item() - 1.7717798).abs() < 1e-7);
        let last = ddim_step(&xt, &v, 2, 0, &s).unwrap();
        assert!((last.item() - 1.0).abs() < 1e-12);
        assert!(ddim_step(&xt, &v, 1, 1, &s).is_err());
    }

    #[test]
    fn cfg_hand_values() {
        assert_eq!(cfg_combine(&scalar(1.0), &scalar(3.0), 3.0).unwrap().item(), 7.0);
        assert_eq!(cfg_combine(&scalar(1.0), &scalar(3.0), 1.0).unwrap().item(), 3.0);
        assert_eq!(cfg_combine(&scalar(1.0), &scalar(3.0), 0.0).unwrap().item(), 1.0);
    }

    #[test]
    fn sub_grid_contains_endpoints() {
        assert_eq!(sub_grid(50, 1).unwrap(), vec![0, 50]);
        assert_eq!(sub_grid(50, 5).unwrap(), vec![0, 10, 20, 30, 40, 50]);
        let g = sub_grid(50, 20).unwrap();
        assert_eq!((g[0], g[20], g.len()), (0, 50, 21));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(sub_grid(50, 51).is_err());
        assert!(sub_grid(50, 0).is_err());
    }
}
