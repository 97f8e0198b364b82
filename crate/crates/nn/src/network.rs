use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layer::{Aux, Layer, LayerSpec};
use crate::tensor::Tensor;

/// A shared trunk followed by zero or more heads. With no heads the trunk
/// output is the single network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: (usize, usize, usize),
    pub trunk: Vec<LayerSpec>,
    #[serde(default)]
    pub heads: Vec<Vec<LayerSpec>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    arch: ArchSpec,
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
}

/// Parameter gradients, one `(weight, bias)` pair per parameterized layer in
/// network order (trunk first, then heads).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.blocks.iter_mut().zip(&other.blocks) {
            w.iter_mut().zip(ow).for_each(|(a, o)| *a += o);
            b.iter_mut().zip(ob).for_each(|(a, o)| *a += o);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for (w, b) in self.blocks.iter_mut() {
            w.iter_mut().for_each(|v| *v *= s);
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn l2_norm(&self) -> f32 {
        self.blocks
            .iter()
            .map(|(w, b)| w.iter().chain(b).map(|v| v * v).sum::<f32>())
            .sum::<f32>()
            .sqrt()
    }
}

struct LayerTrace {
    input: Tensor,
    output: Tensor,
    aux: Aux,
}

/// Forward activations retained for one backward pass.
pub struct Trace {
    trunk: Vec<LayerTrace>,
    heads: Vec<Vec<LayerTrace>>,
}

fn build_chain(specs: &[LayerSpec], mut shape: (usize, usize, usize)) -> Result<(Vec<Layer>, (usize, usize, usize))> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let layer = Layer::build(spec, shape)?;
        shape = layer.out_shape;
        layers.push(layer);
    }
    Ok((layers, shape))
}

fn run_chain<R: Rng>(layers: &[Layer], x: &Tensor, mut rng: Option<&mut R>, keep: bool) -> (Tensor, Vec<LayerTrace>) {
    let mut traces = Vec::new();
    let mut cur = x.clone();
    for layer in layers {
        let (out, aux) = layer.forward(&cur, rng.as_deref_mut());
        if keep {
            traces.push(LayerTrace { input: cur, output: out.clone(), aux });
        }
        cur = out;
    }
    (cur, traces)
}

impl Network {
    /// Builds the network and draws He-normal initial weights from `seed`.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        let mut net = Self::uninit(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.layers_mut() {
            layer.init(&mut rng);
        }
        Ok(net)
    }

    fn uninit(arch: ArchSpec) -> Result<Self> {
        let (trunk, trunk_out) = build_chain(&arch.trunk, arch.input)?;
        let mut heads = Vec::new();
        for h in &arch.heads {
            heads.push(build_chain(h, trunk_out)?.0);
        }
        Ok(Network { arch, trunk, heads })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn num_outputs(&self) -> usize {
        self.heads.len().max(1)
    }

    pub fn output_shapes(&self) -> Vec<(usize, usize, usize)> {
        let trunk_out = self.trunk.last().map(|l| l.out_shape).unwrap_or(self.arch.input);
        if self.heads.is_empty() {
            vec![trunk_out]
        } else {
            self.heads.iter().map(|h| h.last().map(|l| l.out_shape).unwrap_or(trunk_out)).collect()
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(self.heads.iter().flatten())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk.iter_mut().chain(self.heads.iter_mut().flatten())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flattened parameters in network order, weights before biases per layer.
    pub fn params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(NnError::Integrity(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let (wn, bn) = (l.weight.len(), l.bias.len());
            l.weight.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            l.bias.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    pub fn from_params(arch: ArchSpec, flat: &[f32]) -> Result<Self> {
        let mut net = Self::uninit(arch)?;
        net.set_params(flat)?;
        Ok(net)
    }

    /// Overwrites the bias of the last parameterized layer of `head`.
    pub fn set_head_bias(&mut self, head: usize, values: &[f32]) -> Result<()> {
        let chain = if self.heads.is_empty() { &mut self.trunk } else { &mut self.heads[head] };
        let layer = chain
            .iter_mut()
            .rev()
            .find(|l| l.has_params())
            .ok_or_else(|| NnError::Usage("head has no parameterized layer".into()))?;
        if layer.bias.len() != values.len() {
            return Err(NnError::Shape(format!("bias length {} vs {}", layer.bias.len(), values.len())));
        }
        layer.bias.copy_from_slice(values);
        Ok(())
    }

    /// Multiplies the weights of the last parameterized layer of `head`.
    pub fn scale_head_weights(&mut self, head: usize, factor: f32) -> Result<()> {
        let chain = if self.heads.is_empty() { &mut self.trunk } else { &mut self.heads[head] };
        let layer = chain
            .iter_mut()
            .rev()
            .find(|l| l.has_params())
            .ok_or_else(|| NnError::Usage("head has no parameterized layer".into()))?;
        layer.weight.iter_mut().for_each(|w| *w *= factor);
        Ok(())
    }

    pub(crate) fn param_blocks_mut(&mut self) -> Vec<(&mut Vec<f32>, &mut Vec<f32>)> {
        self.layers_mut().filter(|l| l.has_params()).map(|l| (&mut l.weight, &mut l.bias)).collect()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            blocks: self
                .layers()
                .filter(|l| l.has_params())
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor) {
        assert_eq!(x.shape(), self.arch.input, "network input shape mismatch");
    }

    /// Inference pass (dropout disabled).
    pub fn forward(&self, x: &Tensor) -> Vec<Tensor> {
        self.check_input(x);
        let (t, _) = run_chain::<ChaCha8Rng>(&self.trunk, x, None, false);
        if self.heads.is_empty() {
            return vec![t];
        }
        self.heads.iter().map(|h| run_chain::<ChaCha8Rng>(h, &t, None, false).0).collect()
    }

    /// Training pass: dropout active, activations retained for [`Network::backward`].
    pub fn forward_train<R: Rng>(&self, x: &Tensor, rng: &mut R) -> (Vec<Tensor>, Trace) {
        self.check_input(x);
        let (t, trunk) = run_chain(&self.trunk, x, Some(&mut *rng), true);
        if self.heads.is_empty() {
            return (vec![t], Trace { trunk, heads: Vec::new() });
        }
        let mut outs = Vec::new();
        let mut heads = Vec::new();
        for h in &self.heads {
            let (o, tr) = run_chain(h, &t, Some(&mut *rng), true);
            outs.push(o);
            heads.push(tr);
        }
        (outs, Trace { trunk, heads })
    }

    /// Accumulates parameter gradients for one sample. `grad_outputs` must
    /// have one entry per network output, shaped like the outputs.
    pub fn backward(&self, trace: &Trace, grad_outputs: &[Tensor], grads: &mut Gradients) {
        assert_eq!(grad_outputs.len(), self.num_outputs(), "one gradient per output required");
        let trunk_params = self.trunk.iter().filter(|l| l.has_params()).count();
        let mut head_block = trunk_params;
        let mut trunk_grad: Option<Tensor> = None;
        if self.heads.is_empty() {
            trunk_grad = Some(grad_outputs[0].clone());
        } else {
            for (hi, head) in self.heads.iter().enumerate() {
                let nparams = head.iter().filter(|l| l.has_params()).count();
                let g = backprop_chain(head, &trace.heads[hi], &grad_outputs[hi], &mut grads.blocks[head_block..head_block + nparams]);
                head_block += nparams;
                match trunk_grad.as_mut() {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, v)| *a += v),
                    None => trunk_grad = Some(g),
                }
            }
        }
        let g = trunk_grad.expect("at least one output");
        backprop_chain(&self.trunk, &trace.trunk, &g, &mut grads.blocks[..trunk_params]);
    }
}

fn backprop_chain(layers: &[Layer], traces: &[LayerTrace], grad_out: &Tensor, blocks: &mut [(Vec<f32>, Vec<f32>)]) -> Tensor {
    let mut g = grad_out.clone();
    let mut bi = blocks.len();
    for (layer, tr) in layers.iter().zip(traces).rev() {
        if layer.has_params() {
            bi -= 1;
            let (gw, gb) = &mut blocks[bi];
            g = layer.backward(&tr.input, &tr.output, &tr.aux, &g, gw, gb);
        } else {
            g = layer.backward(&tr.input, &tr.output, &tr.aux, &g, &mut [], &mut []);
        }
    }
    g
}
