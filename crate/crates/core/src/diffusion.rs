//! Linear flow-matching path, velocity regression loss, time schedules, and
//! the Euler ODE sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_t(op: &'static str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("t = {t} outside [0, 1]")))
    }
}

/// `x_t = (1 - t) x + t eps`.
pub fn forward_path<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_t("forward_path", t)?;
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    x.zip_map(eps, |xv, ev| a * xv + b * ev)
}

/// [`forward_path`] applied to `ts.len()` equal-size frames stacked along the
/// leading axis, each with its own `t`.
pub fn forward_path_frames<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, ts: &[f64]) -> Result<Tensor<T>> {
    if x.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "forward_path",
            lhs: x.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let n = x.numel();
    if ts.is_empty() || !n.is_multiple_of(ts.len()) {
        return Err(Error::invalid(
            "forward_path",
            format!("{n} values cannot split into {} frames", ts.len()),
        ));
    }
    let per = n / ts.len();
    let mut out = Vec::with_capacity(n);
    for (f, &t) in ts.iter().enumerate() {
        check_t("forward_path", t)?;
        let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
        let r = f * per..(f + 1) * per;
        out.extend(
            x.data()[r.clone()]
                .iter()
                .zip(&eps.data()[r])
                .map(|(&xv, &ev)| a * xv + b * ev),
        );
    }
    Tensor::new(x.shape(), out)
}

/// `u = eps - x`, the time derivative of [`forward_path`].
pub fn target_velocity<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.sub(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampler {
    #[default]
    Uniform,
    Shifted,
}

/// Loss weighting and training-time distribution of `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub weight: WeightKind,
    pub time_sampler: TimeSampler,
    pub shift_k: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            weight: WeightKind::Uniform,
            time_sampler: TimeSampler::Uniform,
            shift_k: 1.0,
        }
    }
}

impl DiffusionSchedule {
    pub fn weight(&self, _t: f64) -> f64 {
        match self.weight {
            WeightKind::Uniform => 1.0,
        }
    }

    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let u: f64 = rng.random();
        match self.time_sampler {
            TimeSampler::Uniform => Ok(u),
            TimeSampler::Shifted => shift_time(self.shift_k, u),
        }
    }
}

/// `t' = k t / (1 + (k - 1) t)`, a monotone bijection of `[0, 1]`.
pub fn shift_time(k: f64, t: f64) -> Result<f64> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::invalid("shift_time", format!("k must be > 0, got {k}")));
    }
    check_t("shift_time", t)?;
    Ok((k * t / (1.0 + (k - 1.0) * t)).clamp(0.0, 1.0))
}

/// Weighted velocity regression for a single shared `t`.
pub fn fm_loss<T: Scalar>(
    pred_v: &Var<T>,
    x: &Tensor<T>,
    eps: &Tensor<T>,
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<Var<T>> {
    check_t("fm_loss", t)?;
    let u = Var::constant(target_velocity(x, eps)?);
    pred_v.mse(&u)?.scale(schedule.weight(t))
}

/// Mean over frames of `w(t_f) * mse_f`, where `pred_v`, `x`, `eps` hold
/// `ts.len()` equal-size frames stacked along the leading axis.
pub fn fm_loss_frames<T: Scalar>(
    pred_v: &Var<T>,
    x: &Tensor<T>,
    eps: &Tensor<T>,
    ts: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Var<T>> {
    let n = pred_v.value().numel();
    if ts.is_empty() || !n.is_multiple_of(ts.len()) {
        return Err(Error::invalid(
            "fm_loss",
            format!("{n} values cannot split into {} frames", ts.len()),
        ));
    }
    let u = Var::constant(target_velocity(x, eps)?);
    let diff = pred_v.sub(&u)?;
    let per = n / ts.len();
    if ts.iter().all(|&t| schedule.weight(t) == 1.0) {
        return diff.sum_sq()?.scale(1.0 / n as f64);
    }
    let w: Vec<T> = ts
        .iter()
        .flat_map(|&t| std::iter::repeat_n(T::from_f64(schedule.weight(t) / n as f64), per))
        .collect();
    let w = Var::constant(Tensor::new(pred_v.shape(), w)?);
    diff.mul(&diff)?.mul(&w)?.sum()
}

/// Inference time grid, strictly decreasing from 1 to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    times: Vec<f64>,
}

impl SamplerConfig {
    /// Evenly spaced steps, optionally warped by [`shift_time`].
    pub fn linear(num_steps: usize, shift_k: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("sampler", "num_steps must be >= 1"));
        }
        let times = (0..=num_steps)
            .map(|j| shift_time(shift_k, 1.0 - j as f64 / num_steps as f64))
            .collect::<Result<Vec<_>>>()?;
        Self::from_times(times)
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        let ok = times.len() >= 2
            && times[0] == 1.0
            && *times.last().unwrap() == 0.0
            && times.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::invalid(
                "sampler",
                "schedule must run strictly decreasing from 1 to 0",
            ));
        }
        Ok(SamplerConfig { times })
    }

    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Integrate `dx/dt = v(x, t)` from `t = 1` to `t = 0` with forward Euler.
/// The callback also receives the 0-based step index.
pub fn euler_sample<T: Scalar>(
    mut v_fn: impl FnMut(&Tensor<T>, f64, usize) -> Result<Tensor<T>>,
    x_init: &Tensor<T>,
    sampler: &SamplerConfig,
) -> Result<Tensor<T>> {
    if !x_init.is_finite() {
        return Err(Error::SamplerDiverged { step: 0 });
    }
    let mut x = x_init.clone();
    for (step, w) in sampler.times.windows(2).enumerate() {
        let (t_cur, t_next) = (w[0], w[1]);
        let v = v_fn(&x, t_cur, step)?;
        let dt = T::from_f64(t_next - t_cur);
        x = x.zip_map(&v, |xv, vv| xv + dt * vv)?;
        if !x.is_finite() {
            return Err(Error::SamplerDiverged { step });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn path_endpoints_and_midpoint() {
        let (x, e) = (t1(&[2.0, -1.0]), t1(&[0.0, 3.0]));
        assert!(forward_path(&x, &e, 0.0).unwrap().bitwise_eq(&x));
        assert!(forward_path(&x, &e, 1.0).unwrap().bitwise_eq(&e));
        assert_eq!(forward_path(&x, &e, 0.25).unwrap().data()[0], 1.5);
        assert!(forward_path(&x, &e, 1.5).is_err());
    }

    #[test]
    fn velocity_hand_values() {
        let u = target_velocity(&t1(&[1.0, 1.0]), &t1(&[0.0, 2.0])).unwrap();
        assert_eq!(u.to_f64_vec(), vec![-1.0, 1.0]);
    }

    #[test]
    fn loss_hand_values() {
        let s = DiffusionSchedule::default();
        let zero = Var::constant(t1(&[0.0]));
        let l = fm_loss(&zero, &t1(&[1.0]), &t1(&[0.0]), 0.3, &s).unwrap();
        assert_eq!(l.value().item(), 1.0);
        let perfect = Var::constant(t1(&[-1.0]));
        let l = fm_loss(&perfect, &t1(&[1.0]), &t1(&[0.0]), 0.3, &s).unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn shift_hand_values() {
        assert!((shift_time(5.0, 0.5).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(shift_time(3.0, 0.0).unwrap(), 0.0);
        assert_eq!(shift_time(3.0, 1.0).unwrap(), 1.0);
        assert!(shift_time(0.0, 0.5).is_err());
        assert!(shift_time(-1.0, 0.5).is_err());
    }

    #[test]
    fn sampler_schedule_validation() {
        let s = SamplerConfig::linear(4, 1.0).unwrap();
        assert_eq!(s.times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(SamplerConfig::linear(0, 1.0).is_err());
        assert!(SamplerConfig::from_times(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(SamplerConfig::from_times(vec![0.9, 0.0]).is_err());
    }

    #[test]
    fn euler_constant_and_zero_field() {
        let x0 = t1(&[0.5, -2.0]);
        let c = t1(&[1.0, 3.0]);
        for s in [1, 3, 7] {
            let sampler = SamplerConfig::linear(s, 2.0).unwrap();
            let out = euler_sample(|_, _, _| Ok(c.clone()), &x0, &sampler).unwrap();
            let want = x0.sub(&c).unwrap();
            assert!(out.max_abs_diff(&want) < 1e-12);
            let same = euler_sample(|x, _, _| Ok(x.scale(0.0)), &x0, &sampler).unwrap();
            assert!(same.bitwise_eq(&x0));
        }
    }

    #[test]
    fn euler_divergence_reports_step() {
        let sampler = SamplerConfig::linear(4, 1.0).unwrap();
        let e = euler_sample(
            |x, _, step| Ok(if step == 2 { x.map(|_| f64::INFINITY) } else { x.clone() }),
            &t1(&[1.0]),
            &sampler,
        )
        .unwrap_err();
        assert!(matches!(e, Error::SamplerDiverged { step: 2 }));
    }
}
