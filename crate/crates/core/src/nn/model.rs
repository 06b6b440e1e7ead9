//! Runtime model: graph -> layer instances, Xavier init, forward/backward.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{LayerSpec, ModelGraph};
use super::layers::{
    AdaptiveAvgPool2d, AdaptiveMaxPool2d, AvgPool2d, BatchNorm2d, Conv2d, Ctx, Dropout, Layer,
    Linear, Mode, Relu, Residual, Softmax,
};
use super::loss::softmax;
use super::tensor::{Param, Tensor};
use crate::error::Result;

fn build_layer(spec: &LayerSpec) -> Result<Box<dyn Layer>> {
    Ok(match spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => Box::new(Conv2d::new(*in_channels, *out_channels, *kernel, *stride, *padding)),
        LayerSpec::AvgPool2d { kernel, stride } => Box::new(AvgPool2d::new(*kernel, *stride)),
        LayerSpec::AdaptiveAvgPool2d { output } => Box::new(AdaptiveAvgPool2d::new(*output)),
        LayerSpec::AdaptiveMaxPool2d { output } => Box::new(AdaptiveMaxPool2d::new(*output)),
        LayerSpec::BatchNorm2d { features } => Box::new(BatchNorm2d::new(*features)),
        LayerSpec::Relu => Box::new(Relu::new()),
        LayerSpec::Dropout { p } => Box::new(Dropout::new(*p)?),
        LayerSpec::Linear {
            in_features,
            out_features,
        } => Box::new(Linear::new(*in_features, *out_features)),
        LayerSpec::Softmax => Box::new(Softmax::new()),
        LayerSpec::Residual { body, projection } => {
            let body = body.iter().map(build_layer).collect::<Result<Vec<_>>>()?;
            let projection = projection
                .iter()
                .map(build_layer)
                .collect::<Result<Vec<_>>>()?;
            Box::new(Residual::new(body, projection))
        }
    })
}

fn xavier_fill(param: &mut Param, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in param.value.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

fn xavier_init_spec(spec: &LayerSpec, layer: &mut dyn Layer, rng: &mut ChaCha8Rng) {
    match spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let receptive = kernel.0 * kernel.1;
            if let Some((_, weight)) = layer.params().into_iter().next() {
                xavier_fill(weight, in_channels * receptive, out_channels * receptive, rng);
            }
        }
        LayerSpec::Linear {
            in_features,
            out_features,
        } => {
            if let Some((_, weight)) = layer.params().into_iter().next() {
                xavier_fill(weight, *in_features, *out_features, rng);
            }
        }
        _ => {}
    }
}

// Residual blocks need the recursion to pair inner specs with inner layers.
fn init_layer(spec: &LayerSpec, layer: &mut Box<dyn Layer>, rng: &mut ChaCha8Rng) {
    if let LayerSpec::Residual { body, projection } = spec {
        let residual = layer
            .as_residual_mut()
            .expect("Residual spec builds a Residual layer");
        for (s, l) in body.iter().zip(residual.body.iter_mut()) {
            init_layer(s, l, rng);
        }
        for (s, l) in projection.iter().zip(residual.projection.iter_mut()) {
            init_layer(s, l, rng);
        }
    } else {
        xavier_init_spec(spec, layer.as_mut(), rng);
    }
}

/// A built model: the graph, its layer instances, and the generator feeding
/// stochastic layers.
pub struct Model {
    pub graph: ModelGraph,
    pub seed: u64,
    layers: Vec<Box<dyn Layer>>,
    rng: ChaCha8Rng,
    mode: Mode,
}

impl Model {
    /// Build and Xavier-initialize (uniform, gain 1) from a graph.
    pub fn from_graph(graph: ModelGraph, seed: u64) -> Result<Model> {
        graph.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(graph.layers.len());
        for spec in &graph.layers {
            let mut layer = build_layer(spec)?;
            init_layer(spec, &mut layer, &mut rng);
            layers.push(layer);
        }
        Ok(Model {
            graph,
            seed,
            layers,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d80f),
            mode: Mode::Eval,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Forward through every layer; input is (N, C, H, W), output (N, classes).
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        let mut ctx = Ctx {
            mode: self.mode,
            rng: &mut self.rng,
        };
        for layer in &mut self.layers {
            x = layer.forward(&x, &mut ctx)?;
        }
        x.assert_finite("forward pass")?;
        Ok(x)
    }

    /// Backpropagate a logit gradient; parameter gradients accumulate.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, layer)| {
                layer
                    .params()
                    .into_iter()
                    .map(move |(name, p)| (format!("layers.{i}.{name}"), p))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    pub fn named_buffers(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, layer)| {
                layer
                    .buffers()
                    .into_iter()
                    .map(move |(name, b)| (format!("layers.{i}.{name}"), b))
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.numel()).sum()
    }

    /// Class probabilities per example (eval mode, softmax head).
    pub fn predict_proba(&mut self, input: &Tensor) -> Result<Vec<Vec<f64>>> {
        let saved = self.mode;
        self.mode = Mode::Eval;
        let logits = self.forward(input);
        self.mode = saved;
        let logits = logits?;
        let (n, k) = logits.dims2_flat()?;
        Ok((0..n)
            .map(|b| softmax(&logits.data()[b * k..(b + 1) * k]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::build_model;

    fn input(n: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * hw * hw).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(&[n, 1, hw, hw], data).unwrap()
    }

    #[test]
    fn m_produces_two_class_logits_from_300x300() {
        let mut model = Model::from_graph(build_model("M").unwrap(), 7).unwrap();
        let logits = model.forward(&input(1, 300, 1)).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
    }

    #[test]
    fn r_produces_two_class_logits_from_300x300() {
        let mut model = Model::from_graph(build_model("R").unwrap(), 7).unwrap();
        let logits = model.forward(&input(1, 300, 2)).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut model = Model::from_graph(ModelGraph::tiny(16, 4, 0.2), 3).unwrap();
        let x = input(2, 16, 3);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = Model::from_graph(ModelGraph::tiny(16, 4, 0.0), 11).unwrap();
        let mut b = Model::from_graph(ModelGraph::tiny(16, 4, 0.0), 11).unwrap();
        for (pa, pb) in a.params_mut().into_iter().zip(b.params_mut()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn xavier_variance_matches_formula() {
        // linear 200 -> 100 has 20k weights, enough for a variance estimate
        let graph = ModelGraph {
            name: "lin".into(),
            layers: vec![LayerSpec::Linear {
                in_features: 200,
                out_features: 100,
            }],
            input_shape: (1, 10, 20),
            output_classes: 100,
        };
        let mut model = Model::from_graph(graph, 5).unwrap();
        let params = model.params_mut();
        let w = params[0].value.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / (200.0 + 100.0);
        assert!(
            (var - expect).abs() / expect < 0.10,
            "var {var} vs expected {expect}"
        );
    }

    #[test]
    fn zeroed_model_predicts_uniform() {
        let mut model = Model::from_graph(ModelGraph::tiny(16, 4, 0.2), 3).unwrap();
        for p in model.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let proba = model.predict_proba(&input(1, 16, 9)).unwrap();
        assert!((proba[0][0] - 0.5).abs() < 1e-12);
        assert!((proba[0][1] - 0.5).abs() < 1e-12);
    }
}
