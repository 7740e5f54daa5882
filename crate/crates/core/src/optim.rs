//! Adam optimizer over a fixed list of parameter slices.

use num_traits::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    /// Fresh state (zero moments) for parameter groups of the given sizes.
    pub fn new(learning_rate: T, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: T::from(0.9).unwrap(),
            beta2: T::from(0.999).unwrap(),
            epsilon: T::from(1e-8).unwrap(),
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient group count mismatch");
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        for (g_idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[g_idx];
            let v = &mut self.v[g_idx];
            assert_eq!(p.len(), m.len());
            assert_eq!(g.len(), m.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
