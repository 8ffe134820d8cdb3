//! Minimal first-order optimizers over matrix-shaped parameters.

use nalgebra::DMatrix;

/// Adam with bias correction over a fixed list of matrix parameters.
pub struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Adam {
        Adam {
            m: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[&DMatrix<f64>]) -> Adam {
        Adam::new(&params.iter().map(|p| p.shape()).collect::<Vec<_>>())
    }

    /// One update step; `params` and `grads` must match the construction
    /// shapes and order.
    pub fn step(&mut self, lr: f64, params: &mut [&mut DMatrix<f64>], grads: &[&DMatrix<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..params.len() {
            let g = grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, gi) in g.iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[idx][i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
