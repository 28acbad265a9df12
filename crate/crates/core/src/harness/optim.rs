use crate::tensor::Tensor;

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self { lr, betas, eps, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w -= self.lr * (step + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new([2], vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::new([2], vec![0.3, -2.0]).unwrap()];
        let mut opt = Adam::new(0.1, (0.9, 0.999), 1e-12, 0.0);
        opt.update(&mut p, &g);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-9);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::new([1], vec![5.0]).unwrap()];
        let mut opt = Adam::new(0.1, (0.9, 0.999), 1e-8, 0.0);
        for _ in 0..500 {
            let g = vec![p[0].map(|x| 2.0 * (x - 1.5))];
            opt.update(&mut p, &g);
        }
        assert!((p[0].data()[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn zero_lr_is_bit_exact() {
        let orig = Tensor::new([3], vec![0.1, 1e-300, -7.25]).unwrap();
        let mut p = vec![orig.clone()];
        let mut opt = Adam::new(0.0, (0.9, 0.999), 1e-8, 0.01);
        opt.update(&mut p, &[Tensor::new([3], vec![1.0, -3.0, 1e10]).unwrap()]);
        assert_eq!(p[0], orig);
    }
}
