use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction for one parameter group.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    /// Appends zero moments for newly created parameters.
    pub fn grow(&mut self, n: usize) {
        assert!(n >= self.m.len(), "Adam state cannot shrink");
        self.m.resize(n, T::zero());
        self.v.resize(n, T::zero());
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "Adam: parameter count");
        assert_eq!(grads.len(), self.m.len(), "Adam: gradient count");
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
}

/// Learning-rate schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// `base * factor^max(0, (t - start) / every)`, continuous exponent.
    Exp2d { start: f64, every: f64, factor: f64 },
    /// Cosine annealing from `base` to `final_factor * base` over `total` steps.
    Cosine { total: f64, final_factor: f64 },
    /// `base * final_factor^(t / total)`.
    Exp3d { total: f64, final_factor: f64 },
}

impl Schedule {
    pub fn exp2d() -> Self {
        Schedule::Exp2d {
            start: 20_000.0,
            every: 10_000.0,
            factor: 0.33,
        }
    }

    pub fn cosine(total: usize) -> Self {
        Schedule::Cosine {
            total: total as f64,
            final_factor: 0.1,
        }
    }

    pub fn exp3d(total: usize) -> Self {
        Schedule::Exp3d {
            total: total as f64,
            final_factor: 0.01,
        }
    }

    /// Builds the default instance of a named schedule for a run of `total` steps.
    pub fn from_id(id: &str, total: usize) -> Result<Self> {
        match id.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(Schedule::Constant),
            "exp2d" => Ok(Schedule::exp2d()),
            "cosine" => Ok(Schedule::cosine(total)),
            "exp3d" => Ok(Schedule::exp3d(total)),
            _ => Err(Error::Unknown {
                kind: "schedule",
                name: id.to_string(),
            }),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Exp2d { .. } => "exp2d",
            Schedule::Cosine { .. } => "cosine",
            Schedule::Exp3d { .. } => "exp3d",
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// Parses a schedule id with its defaults; cosine and exp3d get a
    /// placeholder horizon of one step and are rebound by the trainer.
    fn from_str(s: &str) -> Result<Self> {
        Schedule::from_id(s, 1)
    }
}

pub fn lr_at(schedule: &Schedule, t: usize, base: f64) -> f64 {
    let t = t as f64;
    match *schedule {
        Schedule::Constant => base,
        Schedule::Exp2d {
            start,
            every,
            factor,
        } => base * factor.powf(((t - start) / every).max(0.0)),
        Schedule::Cosine {
            total,
            final_factor,
        } => {
            let u = (t / total.max(1.0)).min(1.0);
            let c = 0.5 * (1.0 + (std::f64::consts::PI * u).cos());
            base * (final_factor + (1.0 - final_factor) * c)
        }
        Schedule::Exp3d {
            total,
            final_factor,
        } => base * final_factor.powf((t / total.max(1.0)).min(1.0)),
    }
}

/// Exponential moving average of a parameter vector, seeded with `θ_0`.
#[derive(Debug, Clone)]
pub struct Ema<T> {
    pub gamma: f64,
    shadow: Vec<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(initial: &[T], gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::OutOfRange {
                value: gamma,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(Ema {
            gamma,
            shadow: initial.to_vec(),
        })
    }

    pub fn update(&mut self, theta: &[T]) {
        assert_eq!(theta.len(), self.shadow.len(), "EMA: parameter count");
        let g = T::of(self.gamma);
        let h = T::one() - g;
        for (s, &p) in self.shadow.iter_mut().zip(theta) {
            *s = g * *s + h * p;
        }
    }

    pub fn shadow(&self) -> &[T] {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::<f64>::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step(&mut p, &[0.0; 3], 0.1);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut adam = Adam::<f64>::new(1);
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0], 0.1);
        // m_hat = 1, v_hat = 1
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn first_step_direction_scale_covariant() {
        let g = [0.3, -2.0, 1e-3, 5.0];
        let mut a = Adam::<f64>::new(4);
        let mut b = Adam::<f64>::new(4);
        let mut pa = vec![0.0; 4];
        let mut pb = vec![0.0; 4];
        a.step(&mut pa, &g, 0.01);
        let scaled: Vec<f64> = g.iter().map(|v| v * 1000.0).collect();
        b.step(&mut pb, &scaled, 0.01);
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.signum(), y.signum());
            assert!((x - y).abs() < 1e-4 * x.abs());
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let centre = [3.0, -1.0, 0.5];
        let loss = |p: &[f64]| -> f64 { p.iter().zip(&centre).map(|(a, c)| (a - c) * (a - c)).sum() };
        let mut adam = Adam::<f64>::new(3);
        let mut p = vec![0.0; 3];
        let mut losses = vec![loss(&p)];
        for _ in 0..100 {
            let g: Vec<f64> = p.iter().zip(&centre).map(|(a, c)| 2.0 * (a - c)).collect();
            adam.step(&mut p, &g, 0.05);
            losses.push(loss(&p));
        }
        for w in losses[..60].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(*losses.last().unwrap() < 0.05 * losses[0]);
    }

    #[test]
    fn grow_keeps_moments() {
        let mut adam = Adam::<f32>::new(2);
        let mut p = vec![0.0f32; 2];
        adam.step(&mut p, &[1.0, 2.0], 0.1);
        let m0 = adam.moments().0.to_vec();
        adam.grow(4);
        assert_eq!(&adam.moments().0[..2], &m0[..]);
        assert_eq!(&adam.moments().0[2..], &[0.0, 0.0]);
    }

    #[test]
    fn schedule_values() {
        let s = Schedule::exp2d();
        assert_eq!(lr_at(&s, 0, 2.0), 2.0);
        assert_eq!(lr_at(&s, 20_000, 2.0), 2.0);
        assert!((lr_at(&s, 30_000, 2.0) - 0.66).abs() < 1e-12);
        assert!((lr_at(&s, 25_000, 1.0) - 0.33f64.sqrt()).abs() < 1e-12);
        let c = Schedule::cosine(1000);
        assert!((lr_at(&c, 0, 1.0) - 1.0).abs() < 1e-15);
        assert!((lr_at(&c, 1000, 1.0) - 0.1).abs() < 1e-15);
        assert!((lr_at(&c, 500, 1.0) - 0.55).abs() < 1e-12);
        let e = Schedule::exp3d(100);
        assert!((lr_at(&e, 100, 1.0) - 0.01).abs() < 1e-15);
        assert!((lr_at(&e, 50, 1.0) - 0.1).abs() < 1e-12);
        assert!(Schedule::from_id("linear", 10).is_err());
        assert_eq!("cosine".parse::<Schedule>().unwrap().id(), "cosine");
    }

    #[test]
    fn ema_gamma_zero_tracks() {
        let mut ema = Ema::new(&[5.0f64], 0.0).unwrap();
        ema.update(&[2.0]);
        assert_eq!(ema.shadow(), &[2.0]);
        assert!(Ema::new(&[0.0f64], 1.0).is_err());
    }

    #[test]
    fn ema_constant_target_closed_form() {
        let gamma = 0.95;
        let mut ema = Ema::new(&[0.0f64], gamma).unwrap();
        for t in 1..=50 {
            ema.update(&[1.0]);
            let expected = gamma.powi(t);
            assert!(((ema.shadow()[0] - 1.0).abs() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_matches_scalar_recurrence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let seq: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ema = Ema::new(&[seq[0]], 0.95).unwrap();
        let mut s = seq[0];
        for &x in &seq[1..] {
            ema.update(&[x]);
            s = 0.95 * s + 0.05 * x;
            assert!((ema.shadow()[0] - s).abs() < 1e-15);
        }
    }
}
