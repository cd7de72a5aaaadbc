use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Shallow fully connected decoder: ReLU on hidden layers, identity output.
///
/// All parameters live in one flat buffer so optimizers, EMA and
/// quantization can treat them uniformly. Layer `l` stores its weight matrix
/// (`out x in`, row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    dims: Vec<usize>,
    params: Vec<T>,
    revision: u64,
}

/// Activations kept by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    batch: usize,
    revision: u64,
    /// `acts[0]` is the input, `acts[l]` the output of layer `l - 1`.
    acts: Vec<Vec<T>>,
}

impl<T: Real> MlpCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("cache holds at least the input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl<T: Real> Mlp<T> {
    /// Zero-initialized network with layer widths `dims` (input first).
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer dims {dims:?}")));
        }
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            dims: dims.to_vec(),
            params: vec![T::zero(); n],
            revision: 0,
        })
    }

    /// He-uniform hidden weights, smaller uniform output weights, zero biases.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        let layers = mlp.num_layers();
        for l in 0..layers {
            let (n_in, _) = mlp.layer_shape(l);
            let bound = if l + 1 == layers {
                (1.0 / n_in as f64).sqrt()
            } else {
                (6.0 / n_in as f64).sqrt()
            };
            let (w, _) = mlp.layer_mut(l);
            for v in w {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        mlp.revision = 0;
        Ok(mlp)
    }

    pub fn from_params(dims: &[usize], params: Vec<T>) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        if params.len() != mlp.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters for dims {dims:?}, expected {}",
                params.len(),
                mlp.params.len()
            )));
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable access bumps the revision, invalidating outstanding caches.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.revision += 1;
        &mut self.params
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.dims[l], self.dims[l + 1])
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.dims[..=l]
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let (n_in, n_out) = self.layer_shape(l);
        let off = self.layer_offset(l);
        let (w, rest) = self.params[off..].split_at(n_in * n_out);
        (w, &rest[..n_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let (n_in, n_out) = self.layer_shape(l);
        let off = self.layer_offset(l);
        self.revision += 1;
        let (w, rest) = self.params[off..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            dims: self.dims.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
            revision: 0,
        }
    }

    fn check_input(&self, x: &[T]) -> Result<usize> {
        let n_in = self.input_dim();
        if !x.len().is_multiple_of(n_in) {
            return Err(Error::Shape(format!(
                "input of length {} is not a multiple of {n_in}",
                x.len()
            )));
        }
        Ok(x.len() / n_in)
    }

    fn layer_forward(&self, l: usize, x: &[T], batch: usize, out: &mut Vec<T>) {
        let (n_in, n_out) = self.layer_shape(l);
        let (w, b) = self.layer(l);
        out.clear();
        out.reserve(batch * n_out);
        for _ in 0..batch {
            out.extend_from_slice(b);
        }
        T::gemm(
            batch,
            n_in,
            n_out,
            T::one(),
            x,
            n_in as isize,
            1,
            w,
            1,
            n_in as isize,
            T::one(),
            out,
            n_out as isize,
            1,
        );
        if l + 1 < self.num_layers() {
            for v in out.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    }

    /// Batched forward pass (`x` is `batch x input_dim`, row-major).
    pub fn forward(&self, x: &[T]) -> Result<MlpCache<T>> {
        let batch = self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.to_vec());
        for l in 0..self.num_layers() {
            let mut out = Vec::new();
            self.layer_forward(l, &acts[l], batch, &mut out);
            acts.push(out);
        }
        Ok(MlpCache {
            batch,
            revision: self.revision,
            acts,
        })
    }

    /// Forward pass without keeping activations.
    pub fn infer(&self, x: &[T]) -> Result<Vec<T>> {
        let batch = self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in 0..self.num_layers() {
            self.layer_forward(l, &cur, batch, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Accumulates `dL/dθ` into `grad_params` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache<T>, grad_out: &[T], grad_params: &mut [T]) -> Result<Vec<T>> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache {
                cache: cache.revision,
                params: self.revision,
            });
        }
        if grad_params.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer size".into()));
        }
        let batch = cache.batch;
        if grad_out.len() != batch * self.output_dim() {
            return Err(Error::Shape(format!(
                "dL/dy has {} entries, expected {}",
                grad_out.len(),
                batch * self.output_dim()
            )));
        }
        let mut dz = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = self.layer_shape(l);
            let off = self.layer_offset(l);
            let a = &cache.acts[l];
            {
                let (gw, gb) = grad_params[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                // dW += dZ^T A
                T::gemm(
                    n_out,
                    batch,
                    n_in,
                    T::one(),
                    &dz,
                    1,
                    n_out as isize,
                    a,
                    n_in as isize,
                    1,
                    T::one(),
                    gw,
                    n_in as isize,
                    1,
                );
                for row in dz.chunks_exact(n_out) {
                    for (g, &d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            // dA = dZ W
            let (w, _) = self.layer(l);
            let mut da = vec![T::zero(); batch * n_in];
            T::gemm(
                batch,
                n_out,
                n_in,
                T::one(),
                &dz,
                n_out as isize,
                1,
                w,
                n_in as isize,
                1,
                T::zero(),
                &mut da,
                n_in as isize,
                1,
            );
            if l > 0 {
                for (d, &act) in da.iter_mut().zip(a.iter()) {
                    if act <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            dz = da;
        }
        Ok(dz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn reference_forward(mlp: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in 0..mlp.num_layers() {
            let (n_in, n_out) = mlp.layer_shape(l);
            let (w, b) = mlp.layer(l);
            let batch = cur.len() / n_in;
            let mut next = vec![0.0; batch * n_out];
            for s in 0..batch {
                for o in 0..n_out {
                    let mut acc = b[o];
                    for i in 0..n_in {
                        acc += w[o * n_in + i] * cur[s * n_in + i];
                    }
                    if l + 1 < mlp.num_layers() {
                        acc = acc.max(0.0);
                    }
                    next[s * n_out + o] = acc;
                }
            }
            cur = next;
        }
        cur
    }

    fn random_net(seed: u64) -> (Mlp<f64>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Mlp::<f64>::init(&[5, 16, 12, 3], &mut rng).unwrap();
        for v in mlp.params_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..7 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        (mlp, x)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mlp = Mlp::<f64>::zeros(&[4, 8, 2]).unwrap();
        let y = mlp.infer(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut mlp = Mlp::<f64>::zeros(&[3, 3]).unwrap();
        let (w, _) = mlp.layer_mut(0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = vec![0.5, -2.0, 7.0, 1.0, 2.0, 3.0];
        assert_eq!(mlp.infer(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_reference() {
        let (mlp, x) = random_net(1);
        let fast = mlp.forward(&x).unwrap();
        let slow = reference_forward(&mlp, &x);
        for (a, b) in fast.output().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(mlp.infer(&x).unwrap(), fast.output().to_vec());
        assert!(mlp.forward(&x[..4]).is_err());
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let (mlp, x) = random_net(2);
        let cache = mlp.forward(&x).unwrap();
        let mut g = vec![0.0; mlp.num_params()];
        let dx = mlp.backward(&cache, &[0.0; 7 * 3], &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_net_matches_symbolic() {
        // y = w2 * relu(w1 x + b1) + b2 with w1 x + b1 > 0.
        let mlp = Mlp::from_params(&[1, 1, 1], vec![2.0, 0.5, 3.0, -1.0]).unwrap();
        let cache = mlp.forward(&[1.5]).unwrap();
        assert_eq!(cache.output(), &[3.0 * 3.5 - 1.0]);
        let mut g = vec![0.0; 4];
        let dx = mlp.backward(&cache, &[1.0], &mut g).unwrap();
        assert_eq!(g, vec![3.0 * 1.5, 3.0, 3.5, 1.0]);
        assert_eq!(dx, vec![6.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mlp, x) = random_net(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let gy: Vec<f64> = (0..7 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp<f64>, x: &[f64]| -> f64 {
            m.infer(x).unwrap().iter().zip(&gy).map(|(a, b)| a * b).sum()
        };
        let cache = mlp.forward(&x).unwrap();
        let mut g = vec![0.0; mlp.num_params()];
        let dx = mlp.backward(&cache, &gy, &mut g).unwrap();
        let h = 1e-5;
        for i in 0..mlp.num_params() {
            let mut p = mlp.clone();
            p.params_mut()[i] += h;
            let mut m = mlp.clone();
            m.params_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(1e-4);
            assert!(err < 1e-4, "param {i}: fd {fd} analytic {}", g[i]);
        }
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (loss(&mlp, &p) - loss(&mlp, &m)) / (2.0 * h);
            assert!((fd - dx[i]).abs() / fd.abs().max(1e-4) < 1e-4);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut mlp, x) = random_net(4);
        let cache = mlp.forward(&x).unwrap();
        mlp.params_mut()[0] += 1.0;
        let mut g = vec![0.0; mlp.num_params()];
        assert!(matches!(
            mlp.backward(&cache, &[1.0; 21], &mut g),
            Err(Error::StaleCache { .. })
        ));
    }
}
