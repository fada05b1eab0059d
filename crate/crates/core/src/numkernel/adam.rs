use super::{Matrix, NumError, ParamSet};

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step so that they take the exact shapes of the tracked tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts before any
    /// parameter or moment is touched.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<(), NumError> {
        if let Some((name, index)) = grads.first_non_finite() {
            return Err(NumError::NonFiniteGradient { name, index });
        }
        let g = grads.tensors();
        if self.m.is_empty() {
            self.m = g.iter().map(|(_, t)| Matrix::zeros(t.rows(), t.cols())).collect();
            self.v = self.m.clone();
        }
        let mut p = params.tensors_mut();
        if p.len() != g.len() || self.m.len() != g.len() {
            return Err(NumError::Invalid(format!(
                "adam: {} parameter tensors, {} gradient tensors, {} moment buffers",
                p.len(),
                g.len(),
                self.m.len()
            )));
        }
        for (((pn, pt), (gn, gt)), m) in p.iter().zip(&g).zip(&self.m) {
            if pt.shape() != gt.shape() || pt.shape() != m.shape() {
                return Err(NumError::Shape {
                    op: "adam_step",
                    expected: format!("{pn}: {:?}", pt.shape()),
                    found: format!("{gn}: {:?}", gt.shape()),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((_, pt), (_, gt)), (m, v)) in p.iter_mut().zip(&g).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let ps = pt.as_mut_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for (i, &gi) in gt.as_slice().iter().enumerate() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gi;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                ps[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
