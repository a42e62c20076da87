#![allow(dead_code)]

pub mod oracle;

use ego3rt::numerics::{Checkable, Tensor};
use ego3rt::params::{is_frozen, Params};
use ego3rt::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub type Forward<P> = Box<dyn Fn(&P, &[Tensor]) -> Result<Tensor>>;
pub type Backward<P> = Box<dyn Fn(&P, &[Tensor], &Tensor) -> Result<(P, Vec<Tensor>)>>;

/// Objective `<weights, f(params, inputs)>` over every input tensor and every
/// trainable parameter.
pub struct Probe<P> {
    pub params: P,
    pub inputs: Vec<Tensor>,
    pub weights: Tensor,
    pub forward: Forward<P>,
    pub backward: Backward<P>,
}

impl<P: Params + Clone> Probe<P> {
    pub fn new(params: P, inputs: Vec<Tensor>, seed: u64, forward: Forward<P>, backward: Backward<P>) -> Self {
        let out = forward(&params, &inputs).expect("probe forward");
        let weights = Tensor::uniform(out.shape(), 1.0, &mut rng(seed));
        Probe { params, inputs, weights, forward, backward }
    }

    fn trainable(&self) -> Vec<String> {
        self.params.named().into_iter().map(|(n, _)| n).filter(|n| !is_frozen(n)).collect()
    }

    /// Parameter gradients from one backward pass, for inspection.
    pub fn param_grads(&self) -> P {
        (self.backward)(&self.params, &self.inputs, &self.weights).expect("probe backward").0
    }
}

impl<P: Params + Clone> Checkable for Probe<P> {
    fn blocks(&self) -> usize {
        self.inputs.len() + self.trainable().len()
    }

    fn block_name(&self, k: usize) -> String {
        if k < self.inputs.len() {
            format!("input{k}")
        } else {
            self.trainable()[k - self.inputs.len()].clone()
        }
    }

    fn block_mut(&mut self, k: usize) -> &mut [f64] {
        if k < self.inputs.len() {
            return self.inputs[k].data_mut();
        }
        let name = self.trainable()[k - self.inputs.len()].clone();
        self.params.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.data_mut()
    }

    fn objective(&self) -> f64 {
        let out = (self.forward)(&self.params, &self.inputs).expect("probe forward");
        out.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum()
    }

    fn gradients(&self) -> Result<Vec<Vec<f64>>> {
        let (pg, ig) = (self.backward)(&self.params, &self.inputs, &self.weights)?;
        let mut out: Vec<Vec<f64>> = ig.into_iter().map(Tensor::into_data).collect();
        let names = self.trainable();
        for (n, t) in pg.named() {
            if names.contains(&n) {
                out.push(t.data().to_vec());
            }
        }
        Ok(out)
    }
}

pub fn randomize<P: Params>(p: &mut P, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in p.named_mut() {
        if !is_frozen(&name) {
            *t = Tensor::uniform(t.shape(), scale, &mut r);
        }
    }
}
