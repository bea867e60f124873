use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are indexed like the parameter
/// store; non-trainable entries keep `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub(crate) m: Vec<Option<Tensor<f32>>>,
    pub(crate) v: Vec<Option<Tensor<f32>>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, lr: f64, (beta1, beta2): (f64, f64)) -> Self {
        let buffers: Vec<Option<Tensor<f32>>> = store
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| Tensor::zeros(e.value.shape())))
            .collect();
        Adam { lr, beta1, beta2, eps: 1e-8, step: 0, m: buffers.clone(), v: buffers }
    }

    /// Apply one update; `grads` is indexed like the store, and entries
    /// without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match the optimizer");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (&grads[i], &mut self.m[i], &mut self.v[i]) else {
                continue;
            };
            let p = store.get_mut(id);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

