use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ckpt::{Checkpoint, ModuleMeta};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Tensor2D};
use crate::rng;

use super::data::TaskDataset;

pub const GROUP_IN: &str = "mlp-in";
pub const GROUP_OUT: &str = "mlp-out";

/// One affine layer; `weight` is `d_out × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

/// Multilayer perceptron with tanh hidden activations and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    layers: Vec<Layer>,
}

/// Logits plus the input activations of every 2D module. Each activation
/// matrix is `d_in × n`: one column per sample.
#[derive(Clone, Debug)]
pub struct Capture {
    pub logits: Tensor2D,
    pub activations: BTreeMap<String, Tensor2D>,
}

pub fn module_name(layer: usize) -> String {
    format!("fc{layer}")
}

pub fn bias_name(layer: usize) -> String {
    format!("fc{layer}.bias")
}

impl ToyNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias length {} vs {} outputs",
                    layer.bias.len(),
                    layer.weight.rows()
                )));
            }
            if k > 0 && layer.weight.cols() != layers[k - 1].weight.rows() {
                return Err(Error::Shape(format!(
                    "layer {k} expects {} inputs, previous layer emits {}",
                    layer.weight.cols(),
                    layers[k - 1].weight.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Random initialization with `N(0, 1/fan_in)` weights and zero biases.
    /// `widths` lists input, hidden and output sizes.
    pub fn init(widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut r = rng::rng(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (1.0 / w[0] as f64).sqrt()).expect("valid std");
                let data = (0..w[0] * w[1]).map(|_| normal.sample(&mut r)).collect();
                Layer {
                    weight: Tensor2D::new(w[1], w[0], data).expect("finite init"),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    /// Block/group labels for layer `k` when the layers are split into
    /// `blocks` consecutive blocks; groups alternate `mlp-in`/`mlp-out`
    /// within a block.
    pub fn layer_meta(&self, k: usize, blocks: usize) -> ModuleMeta {
        let depth = self.layers.len();
        let blocks = blocks.clamp(1, depth);
        let block = k * blocks / depth;
        let first = (0..depth).find(|&j| j * blocks / depth == block).unwrap_or(0);
        let group = if (k - first) % 2 == 0 { GROUP_IN } else { GROUP_OUT };
        let w = &self.layers[k].weight;
        ModuleMeta {
            name: module_name(k),
            rows: w.rows(),
            cols: w.cols(),
            block,
            group: group.to_string(),
        }
    }

    pub fn to_checkpoint(&self, blocks: usize) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (k, layer) in self.layers.iter().enumerate() {
            ckpt.insert_module(self.layer_meta(k, blocks), layer.weight.clone())
                .expect("meta built from tensor");
            ckpt.insert_aux(bias_name(k), layer.bias.clone());
        }
        ckpt
    }

    /// Rebuild from a checkpoint holding modules `fc0..fcL` and their biases.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let depth = ckpt.modules().len();
        let layers = (0..depth)
            .map(|k| {
                let weight = ckpt.module(&module_name(k))?.clone();
                let bias = ckpt.aux_vec(&bias_name(k))?.to_vec();
                Ok(Layer { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    fn check_input(&self, inputs: &Tensor2D) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have {} features, network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(layer: &Layer, a: &Tensor2D) -> Tensor2D {
        let mut z = Tensor2D::zeros(a.rows(), layer.weight.rows());
        for i in 0..z.rows() {
            z.row_mut(i).copy_from_slice(&layer.bias);
        }
        gemm(1.0, a, false, &layer.weight, true, 1.0, &mut z).expect("shapes chained");
        z
    }

    /// Forward pass returning the per-layer inputs (`n × d` each) and logits.
    fn forward_trace(&self, inputs: &Tensor2D) -> (Vec<Tensor2D>, Tensor2D) {
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut a = inputs.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &a);
            if k < last {
                z.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            }
            trace.push(a);
            a = z;
        }
        (trace, a)
    }

    /// Class logits for `n × d_in` inputs.
    pub fn logits(&self, inputs: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(inputs)?;
        let mut a = inputs.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            a = Self::affine(layer, &a);
            if k < last {
                a.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(a)
    }

    pub fn forward_capture(&self, inputs: &Tensor2D) -> Result<Capture> {
        self.check_input(inputs)?;
        let (trace, logits) = self.forward_trace(inputs);
        let activations = trace
            .into_iter()
            .enumerate()
            .map(|(k, a)| (module_name(k), a.transpose()))
            .collect();
        Ok(Capture { logits, activations })
    }

    /// Mean cross-entropy over the batch and its gradients `(dW, db)` per layer.
    pub fn loss_and_grads(&self, inputs: &Tensor2D, labels: &[usize]) -> Result<(f64, Vec<(Tensor2D, Vec<f64>)>)> {
        self.check_input(inputs)?;
        if labels.len() != inputs.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.rows()
            )));
        }
        let n = inputs.rows();
        let classes = self.output_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::OutOfRange(format!("label {bad} with {classes} classes")));
        }
        let (trace, logits) = self.forward_trace(inputs);
        let loss = cross_entropy(&logits, labels);
        // dL/dz = (softmax − onehot) / n
        let mut delta = logits;
        for (i, &y) in labels.iter().enumerate() {
            let row = delta.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }

        let mut grads = vec![None; self.layers.len()];
        for k in (0..self.layers.len()).rev() {
            let a_in = &trace[k];
            let w = &self.layers[k].weight;
            let mut dw = Tensor2D::zeros(w.rows(), w.cols());
            gemm(1.0, &delta, true, a_in, false, 0.0, &mut dw)?;
            let mut db = vec![0.0; w.rows()];
            for i in 0..delta.rows() {
                for (b, d) in db.iter_mut().zip(delta.row(i)) {
                    *b += d;
                }
            }
            if k > 0 {
                let mut da = Tensor2D::zeros(n, w.cols());
                gemm(1.0, &delta, false, w, false, 0.0, &mut da)?;
                for (g, a) in da.data_mut().iter_mut().zip(a_in.data()) {
                    *g *= 1.0 - a * a;
                }
                delta = da;
            }
            grads[k] = Some((dw, db));
        }
        Ok((loss, grads.into_iter().map(|g| g.expect("filled")).collect()))
    }
}

/// Mean softmax cross-entropy of `logits` (`n × C`) against `labels`.
pub fn cross_entropy(logits: &Tensor2D, labels: &[usize]) -> f64 {
    let n = logits.rows();
    let total: f64 = (0..n)
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            lse - row[labels[i]]
        })
        .sum();
    total / n as f64
}

/// Plain minibatch SGD with decoupled L2 on weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub eta: f64,
    pub rho: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Stop once the relative change of the epoch loss over `window` epochs
    /// falls below `tol`.
    pub plateau: Option<Plateau>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub window: usize,
    pub tol: f64,
}

impl Default for Plateau {
    fn default() -> Self {
        Self {
            window: 10,
            tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: ToyNet,
    /// Mean minibatch loss per completed epoch.
    pub losses: Vec<f64>,
}

/// Train with updates `W ← W − η(∇W + ρW)` and `b ← b − η∇b`.
pub fn sgd_finetune(net: &ToyNet, data: &TaskDataset, params: &SgdParams) -> Result<TrainOutcome> {
    if data.inputs.cols() != net.input_dim() {
        return Err(Error::Shape(format!(
            "dataset has {} features, network expects {}",
            data.inputs.cols(),
            net.input_dim()
        )));
    }
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptySplit);
    }
    let batch = params.batch.max(1);
    let mut net = net.clone();
    let mut losses = Vec::with_capacity(params.epochs);
    let mut r = rng::rng(params.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let d = data.inputs.cols();
    for epoch in 0..params.epochs {
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let mut xb = Tensor2D::zeros(chunk.len(), d);
            let mut yb = Vec::with_capacity(chunk.len());
            for (row, &idx) in chunk.iter().enumerate() {
                xb.row_mut(row).copy_from_slice(data.inputs.row(idx));
                yb.push(data.labels[idx]);
            }
            let (loss, grads) = net.loss_and_grads(&xb, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_loss += loss;
            batches += 1;
            if params.eta != 0.0 {
                for (layer, (dw, db)) in net.layers.iter_mut().zip(grads) {
                    let decay = 1.0 - params.eta * params.rho;
                    layer.weight.scale_mut(decay);
                    layer.weight.axpy(-params.eta, &dw)?;
                    for (b, g) in layer.bias.iter_mut().zip(db) {
                        *b -= params.eta * g;
                    }
                }
            }
        }
        let mean = epoch_loss / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        losses.push(mean);
        if let Some(p) = params.plateau {
            if losses.len() > p.window {
                let then = losses[losses.len() - 1 - p.window];
                if ((then - mean) / then).abs() < p.tol {
                    break;
                }
            }
        }
        if net.layers.iter().any(|l| !l.weight.is_finite()) {
            return Err(Error::Divergence { epoch, loss: mean });
        }
    }
    Ok(TrainOutcome { net, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::data::Split;

    #[test]
    fn identity_network_capture() {
        let net = ToyNet::new(vec![Layer {
            weight: Tensor2D::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = Tensor2D::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]).unwrap();
        let cap = net.forward_capture(&x).unwrap();
        assert_eq!(cap.activations["fc0"], x.transpose());
        assert_eq!(cap.logits, x);
    }

    #[test]
    fn capture_chains_through_tanh() {
        let net = ToyNet::init(&[4, 6, 5, 3], 1);
        let mut r = rng::rng(2);
        let x = Tensor2D::standard_normal(7, 4, &mut r);
        let cap = net.forward_capture(&x).unwrap();
        assert_eq!(cap.activations.len(), 3);
        for a in cap.activations.values() {
            assert_eq!(a.cols(), 7);
        }
        // recompute layer-1 input independently
        let l0 = &net.layers()[0];
        let manual = Tensor2D::from_fn(6, 7, |o, i| {
            let z: f64 = (0..4).map(|j| l0.weight[(o, j)] * x[(i, j)]).sum::<f64>() + l0.bias[o];
            z.tanh()
        });
        assert!(cap.activations["fc1"].max_abs_diff(&manual) < 1e-14);
        assert!(net.forward_capture(&Tensor2D::zeros(2, 5)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = ToyNet::init(&[5, 7, 6, 3], 3);
        for (k, l) in net.layers_mut().iter_mut().enumerate() {
            for (i, b) in l.bias.iter_mut().enumerate() {
                *b = 0.1 * ((k + i) as f64).sin();
            }
        }
        let mut r = rng::rng(4);
        let x = Tensor2D::standard_normal(9, 5, &mut r);
        let y = vec![0, 1, 2, 2, 1, 0, 0, 1, 2];
        let (_, grads) = net.loss_and_grads(&x, &y).unwrap();
        let h = 1e-5;
        let picks = [(0, 3, 2), (1, 5, 6), (2, 1, 4), (0, 6, 0), (2, 2, 5)];
        for (k, i, j) in picks {
            let mut plus = net.clone();
            plus.layers_mut()[k].weight[(i, j)] += h;
            let mut minus = net.clone();
            minus.layers_mut()[k].weight[(i, j)] -= h;
            let fd = (cross_entropy(&plus.logits(&x).unwrap(), &y)
                - cross_entropy(&minus.logits(&x).unwrap(), &y))
                / (2.0 * h);
            let an = grads[k].0[(i, j)];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "layer {k} ({i},{j}): fd {fd} vs {an}");
        }
        let mut plus = net.clone();
        plus.layers_mut()[1].bias[2] += h;
        let mut minus = net.clone();
        minus.layers_mut()[1].bias[2] -= h;
        let fd = (cross_entropy(&plus.logits(&x).unwrap(), &y) - cross_entropy(&minus.logits(&x).unwrap(), &y)) / (2.0 * h);
        assert!((fd - grads[1].1[2]).abs() <= 1e-4 * fd.abs().max(1e-3));
    }

    fn separable(n: usize, seed: u64) -> TaskDataset {
        let mut r = rng::rng(seed);
        let raw = Tensor2D::standard_normal(n, 2, &mut r);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let inputs = Tensor2D::from_fn(n, 2, |i, j| {
            let shift = if labels[i] == 1 { 3.0 } else { -3.0 };
            raw[(i, j)] * 0.5 + if j == 0 { shift } else { 0.0 }
        });
        TaskDataset {
            inputs,
            labels,
            split: Split::Train,
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let net = ToyNet::init(&[2, 4, 2], 5);
        let data = separable(32, 6);
        let out = sgd_finetune(
            &net,
            &data,
            &SgdParams {
                eta: 0.0,
                rho: 1e-4,
                epochs: 3,
                batch: 8,
                seed: 1,
                plateau: None,
            },
        )
        .unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.losses.len(), 3);
    }

    #[test]
    fn linear_layer_learns_separable_data() {
        let net = ToyNet::init(&[2, 2], 7);
        let data = separable(200, 8);
        let out = sgd_finetune(
            &net,
            &data,
            &SgdParams {
                eta: 0.1,
                rho: 0.0,
                epochs: 200,
                batch: 16,
                seed: 2,
                plateau: None,
            },
        )
        .unwrap();
        let acc = crate::toynet::metrics::accuracy(&out.net.logits(&data.inputs).unwrap(), &data.labels);
        assert!(acc >= 0.99, "accuracy {acc}");
        assert!(out.losses.last().unwrap() < &out.losses[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let net = ToyNet::init(&[2, 2], 9);
        let mut data = separable(64, 10);
        data.inputs = Tensor2D::standard_normal(64, 2, &mut rng::rng(1));
        let err = sgd_finetune(
            &net,
            &data,
            &SgdParams {
                eta: 1e308,
                rho: 0.0,
                epochs: 5,
                batch: 64,
                seed: 3,
                plateau: None,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::NonFinite(_)), "{err:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = ToyNet::init(&[3, 4, 4, 4, 2], 11);
        let ckpt = net.to_checkpoint(2);
        let metas: Vec<_> = ckpt.meta().values().map(|m| (m.block, m.group.clone())).collect();
        assert_eq!(
            metas,
            vec![
                (0, GROUP_IN.to_string()),
                (0, GROUP_OUT.to_string()),
                (1, GROUP_IN.to_string()),
                (1, GROUP_OUT.to_string())
            ]
        );
        assert_eq!(ToyNet::from_checkpoint(&ckpt).unwrap(), net);
    }
}
