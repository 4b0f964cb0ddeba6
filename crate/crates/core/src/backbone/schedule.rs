//! DDPM forward-process schedule: linear betas, cumulative alpha products,
//! and the closed-form q(x_t | x_0) sampler.

use crate::{Error, Result};
use candle_core::Tensor;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule from 1e-4 to 0.02 over `t_steps` steps.
    pub fn new(t_steps: usize) -> Self {
        let (b0, b1) = (1e-4, 0.02);
        let betas: Vec<f64> = (0..t_steps)
            .map(|t| b0 + (b1 - b0) * t as f64 / (t_steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        NoiseSchedule {
            t_steps,
            betas,
            alpha_bars,
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per-sample t.
    pub fn q_sample(&self, x0: &Tensor, t: &Tensor, eps: &Tensor) -> Result<Tensor> {
        if x0.dims() != eps.dims() {
            return Err(Error::Contract(format!(
                "q_sample shape mismatch: x0 {:?} vs eps {:?}",
                x0.dims(),
                eps.dims()
            )));
        }
        let b = x0.dim(0)?;
        if t.dims() != [b] {
            return Err(Error::Contract(format!(
                "q_sample t must be ({b},), got {:?}",
                t.dims()
            )));
        }
        let ts = t.to_vec1::<u32>()?;
        let mut sa = Vec::with_capacity(b);
        let mut sb = Vec::with_capacity(b);
        for &ti in &ts {
            if ti as usize >= self.t_steps {
                return Err(Error::Contract(format!(
                    "timestep {ti} out of range 0..{}",
                    self.t_steps
                )));
            }
            let ab = self.alpha_bars[ti as usize];
            sa.push(ab.sqrt());
            sb.push((1.0 - ab).sqrt());
        }
        let shape = (b, 1, 1, 1);
        let dev = x0.device();
        let sa = Tensor::from_vec(sa, shape, dev)?.to_dtype(x0.dtype())?;
        let sb = Tensor::from_vec(sb, shape, dev)?.to_dtype(x0.dtype())?;
        Ok(x0.broadcast_mul(&sa)?.add(&eps.broadcast_mul(&sb)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::new(200);
        assert_eq!(s.betas.len(), 200);
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bars[0] > 0.99, "abar_0 = {}", s.alpha_bars[0]);
        assert!(s
            .alpha_bars
            .windows(2)
            .all(|w| w[1] < w[0]));
    }

    #[test]
    fn q_sample_zero_noise_is_pure_scaling() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::new(200);
        let x0 = Tensor::randn(0.0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let eps = Tensor::zeros((2, 3, 8, 8), DType::F64, &dev).unwrap();
        let t = Tensor::from_vec(vec![50u32, 50], 2, &dev).unwrap();
        let xt = s.q_sample(&x0, &t, &eps).unwrap();
        let expect = (x0 * s.alpha_bar(50).sqrt()).unwrap();
        let diff: f64 = (xt - expect)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        // 10k draws at a fixed t: empirical mean and variance of x_t match
        // sqrt(abar) x0 and (1 - abar) within 3 sigma
        let dev = Device::Cpu;
        let s = NoiseSchedule::new(200);
        let n = 10_000usize;
        let x0v = 0.7f64;
        for &t in &[0usize, 50, 100, 199] {
            let x0 = Tensor::full(x0v, (n, 1, 1, 1), &dev).unwrap();
            let eps = Tensor::randn(0.0f64, 1.0, (n, 1, 1, 1), &dev).unwrap();
            let ts = Tensor::from_vec(vec![t as u32; n], n, &dev).unwrap();
            let xt = s.q_sample(&x0, &ts, &eps).unwrap().flatten_all().unwrap();
            let vals = xt.to_vec1::<f64>().unwrap();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let ab = s.alpha_bar(t);
            let exp_mean = ab.sqrt() * x0v;
            let exp_var = 1.0 - ab;
            // mean of n normal draws has sd sqrt(var/n); var estimate has sd ~ var*sqrt(2/n)
            let mean_tol = 3.0 * (exp_var / n as f64).sqrt();
            let var_tol = 3.0 * exp_var * (2.0 / n as f64).sqrt();
            assert!(
                (mean - exp_mean).abs() <= mean_tol.max(1e-9),
                "t={t} mean {mean} vs {exp_mean}"
            );
            assert!(
                (var - exp_var).abs() <= var_tol.max(1e-9),
                "t={t} var {var} vs {exp_var}"
            );
        }
    }
}
