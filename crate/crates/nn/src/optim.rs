use serde::{Deserialize, Serialize};

use crate::network::{Gradients, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum { momentum: f32 },
    /// Adam with decoupled weight decay (applied to weights, not biases).
    AdamW { weight_decay: f32 },
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

/// Optimizer state lives outside the network so that a checkpoint only
/// needs the weights.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u32,
    first: Option<Gradients>,
    second: Option<Gradients>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, step: 0, first: None, second: None }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update with already batch-averaged gradients.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let first = self.first.get_or_insert_with(|| net.zero_grads());
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((w, b), ((vw, vb), (gw, gb))) in net
                    .param_blocks_mut()
                    .into_iter()
                    .zip(first.blocks.iter_mut().zip(&grads.blocks))
                {
                    for ((p, v), g) in w.iter_mut().zip(vw.iter_mut()).zip(gw) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                    for ((p, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(gb) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW { .. } => {
                let decay = match self.kind {
                    OptimizerKind::AdamW { weight_decay } => weight_decay,
                    _ => 0.0,
                };
                let second = self.second.get_or_insert_with(|| net.zero_grads());
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let blocks = net.param_blocks_mut();
                for (bi, (w, b)) in blocks.into_iter().enumerate() {
                    let (mw, mb) = &mut first.blocks[bi];
                    let (vw, vb) = &mut second.blocks[bi];
                    let (gw, gb) = &grads.blocks[bi];
                    adam_update(w, mw, vw, gw, lr, c1, c2, decay);
                    adam_update(b, mb, vb, gb, lr, c1, c2, 0.0);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], lr: f32, c1: f32, c2: f32, decay: f32) {
    for i in 0..p.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        if decay > 0.0 {
            p[i] -= lr * decay * p[i];
        }
        p[i] -= lr * mhat / (vhat.sqrt() + EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ArchSpec, LayerSpec, Tensor};

    fn fit(kind: OptimizerKind, lr: f32) -> f32 {
        // Least squares on a single dense layer: y = 2x0 - x1 + 0.5.
        let arch = ArchSpec { input: (2, 1, 1), trunk: vec![LayerSpec::Dense { out: 1 }], heads: vec![] };
        let mut net = Network::new(arch, 0).unwrap();
        let mut opt = Optimizer::new(kind);
        let data: Vec<([f32; 2], f32)> = (0..16)
            .map(|i| {
                let a = (i % 4) as f32 / 3.0 - 0.5;
                let b = (i / 4) as f32 / 3.0 - 0.5;
                ([a, b], 2.0 * a - b + 0.5)
            })
            .collect();
        let mut loss = 0.0;
        for _ in 0..400 {
            let mut grads = net.zero_grads();
            loss = 0.0;
            for (x, y) in &data {
                let (out, trace) = net.forward_train(&Tensor::vector(x.to_vec()), &mut rand::thread_rng());
                let d = out[0].data[0] - y;
                loss += d * d / data.len() as f32;
                net.backward(&trace, &[Tensor::vector(vec![2.0 * d])], &mut grads);
            }
            grads.scale(1.0 / data.len() as f32);
            opt.step(&mut net, &grads, lr);
        }
        loss
    }

    #[test]
    fn all_optimizers_fit_a_linear_model() {
        assert!(fit(OptimizerKind::Adam, 0.05) < 1e-4);
        assert!(fit(OptimizerKind::SgdMomentum { momentum: 0.9 }, 0.05) < 1e-4);
        assert!(fit(OptimizerKind::AdamW { weight_decay: 0.0 }, 0.05) < 1e-4);
    }

    #[test]
    fn adamw_decay_shrinks_weights_without_gradient() {
        let arch = ArchSpec { input: (3, 1, 1), trunk: vec![LayerSpec::Dense { out: 2 }], heads: vec![] };
        let mut net = Network::new(arch, 1).unwrap();
        let before: f32 = net.params().iter().map(|v| v.abs()).sum();
        let mut opt = Optimizer::new(OptimizerKind::AdamW { weight_decay: 0.1 });
        let zero = net.zero_grads();
        opt.step(&mut net, &zero, 0.1);
        let after: f32 = net.params().iter().map(|v| v.abs()).sum();
        assert!((after - before * 0.99).abs() < 1e-4);
    }
}
