use super::{Gradients, Network, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Gradients<T>,
    v: Gradients<T>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(net: &Network<T>) -> Self {
        Self { m: net.zero_grads(), v: net.zero_grads(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, hyper: &AdamHyper) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - hyper.beta1.powi(t);
        let c2 = 1.0 - hyper.beta2.powi(t);
        let b1 = T::from(hyper.beta1).unwrap();
        let b2 = T::from(hyper.beta2).unwrap();
        let one = T::one();
        let lr = T::from(hyper.lr).unwrap();
        let eps = T::from(hyper.eps).unwrap();
        let (c1, c2) = (T::from(c1).unwrap(), T::from(c2).unwrap());
        for (((p, g), m), v) in net.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pairs = [
                (&mut p.weight.data, &g.weight.data, &mut m.weight.data, &mut v.weight.data),
                (&mut p.bias.data, &g.bias.data, &mut m.bias.data, &mut v.bias.data),
            ];
            for (pd, gd, md, vd) in pairs {
                for (((w, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(md.iter_mut()).zip(vd.iter_mut()) {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}
