use super::params::ParamStore;
use super::tensor::{Float, Tensor};

/// Adam with decoupled weight decay. Decay applies to tensors of rank >= 2
/// only; biases and normalization affines are left alone.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient list does not match the parameter store");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            let decay = if p.shape().len() >= 2 { T::of(1.0 - lr * self.weight_decay) } else { T::one() };
            let step = T::of(lr / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            let eps = T::of(self.eps);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                *w = *w * decay - step * m[j] / denom;
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Linear warmup followed by cosine decay to `min_ratio * base`.
pub fn cosine_lr(base: f64, step: u64, total: u64, warmup: u64, min_ratio: f64) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (min_ratio + (1.0 - min_ratio) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new([2], vec![3.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(id).data().iter().map(|v| 2.0 * v).collect();
            opt.step(&mut store, &[Some(Tensor::new([2], g))], 0.01);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 100, 10, 0.0) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 100, 10, 0.0) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100, 10, 0.1) - 0.1 < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::<f32>::new([2], vec![3.0, 4.0])), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        let after = g[0].as_ref().unwrap().sum_sq().sqrt();
        assert!((after - 1.0).abs() < 1e-6);
    }
}
