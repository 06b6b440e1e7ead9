//! Architecture descriptions: layer specs, shape inference, and the two
//! custom classifier graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a model graph. Specs are data; the runtime layers are built
/// from them by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    AvgPool2d {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    AdaptiveAvgPool2d {
        output: (usize, usize),
    },
    AdaptiveMaxPool2d {
        output: (usize, usize),
    },
    BatchNorm2d {
        features: usize,
    },
    Relu,
    Dropout {
        p: f64,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
    Residual {
        body: Vec<LayerSpec>,
        projection: Vec<LayerSpec>,
    },
}

/// Activation shape while walking a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(f) => f,
        }
    }

    pub fn spatial(&self) -> Option<(usize, usize)> {
        match *self {
            Shape::Map { h, w, .. } => Some((h, w)),
            Shape::Flat(_) => None,
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    (size + 2 * padding)
        .checked_sub(kernel)
        .map(|v| v / stride + 1)
        .ok_or_else(|| {
            Error::Shape(format!("kernel {kernel} does not fit extent {size} (padding {padding})"))
        })
}

fn infer_one(spec: &LayerSpec, shape: Shape) -> Result<Shape> {
    match spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => match shape {
            Shape::Map { c, h, w } if c == *in_channels => Ok(Shape::Map {
                c: *out_channels,
                h: conv_out(h, kernel.0, stride.0, padding.0)?,
                w: conv_out(w, kernel.1, stride.1, padding.1)?,
            }),
            other => Err(Error::Shape(format!(
                "conv({in_channels} -> {out_channels}) cannot take {other:?}"
            ))),
        },
        LayerSpec::AvgPool2d { kernel, stride } => match shape {
            Shape::Map { c, h, w } if kernel.0 <= h && kernel.1 <= w => Ok(Shape::Map {
                c,
                h: (h - kernel.0) / stride.0 + 1,
                w: (w - kernel.1) / stride.1 + 1,
            }),
            other => Err(Error::Shape(format!("avgpool{kernel:?} cannot take {other:?}"))),
        },
        LayerSpec::AdaptiveAvgPool2d { output } | LayerSpec::AdaptiveMaxPool2d { output } => {
            match shape {
                Shape::Map { c, .. } => Ok(Shape::Map {
                    c,
                    h: output.0,
                    w: output.1,
                }),
                other => Err(Error::Shape(format!("adaptive pool cannot take {other:?}"))),
            }
        }
        LayerSpec::BatchNorm2d { features } => match shape {
            Shape::Map { c, .. } if c == *features => Ok(shape),
            other => Err(Error::Shape(format!(
                "batchnorm({features}) cannot take {other:?}"
            ))),
        },
        LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax => Ok(shape),
        LayerSpec::Linear {
            in_features,
            out_features,
        } => {
            if shape.numel() != *in_features {
                return Err(Error::Shape(format!(
                    "linear({in_features}) cannot take {shape:?} ({} values)",
                    shape.numel()
                )));
            }
            Ok(Shape::Flat(*out_features))
        }
        LayerSpec::Residual { body, projection } => {
            let mut main = shape;
            for spec in body {
                main = infer_one(spec, main)?;
            }
            let mut skip = shape;
            for spec in projection {
                skip = infer_one(spec, skip)?;
            }
            if main != skip {
                return Err(Error::Shape(format!(
                    "residual paths disagree: {main:?} vs {skip:?}"
                )));
            }
            Ok(main)
        }
    }
}

/// An architecture: named, ordered layer specs with the expected input shape
/// and class count. `validate` walks the whole shape chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// (channels, height, width) of one example.
    pub input_shape: (usize, usize, usize),
    pub output_classes: usize,
}

impl ModelGraph {
    /// Shape after every layer, in order.
    pub fn output_shapes(&self) -> Result<Vec<Shape>> {
        let (c, h, w) = self.input_shape;
        let mut shape = Shape::Map { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            shape = infer_one(spec, shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Check that the chain is consistent and ends at the class count.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.output_shapes()?;
        match shapes.last() {
            Some(Shape::Flat(f)) if *f == self.output_classes => Ok(()),
            other => Err(Error::Shape(format!(
                "graph {} ends at {other:?}, wanted Flat({})",
                self.name, self.output_classes
            ))),
        }
    }

    fn conv_block(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: (kernel, kernel),
                stride: (stride, stride),
                padding: (padding, padding),
            },
            LayerSpec::BatchNorm2d {
                features: out_channels,
            },
            LayerSpec::Relu,
        ]
    }

    /// The "M" classifier: three conv/norm/relu/avg-pool stages, a global
    /// max pool, a 1x1 conv and the 2-way linear head. Pool strides equal
    /// their kernels, which is what makes the stage output sizes
    /// 294 -> 58 -> 56 -> 18 -> 16 -> 1 chain consistently.
    pub fn m() -> ModelGraph {
        let mut layers = Vec::new();
        layers.extend(Self::conv_block(1, 128, 7, 1, 0));
        layers.push(LayerSpec::AvgPool2d {
            kernel: (5, 5),
            stride: (5, 5),
        });
        layers.extend(Self::conv_block(128, 256, 3, 1, 0));
        layers.push(LayerSpec::AvgPool2d {
            kernel: (3, 3),
            stride: (3, 3),
        });
        layers.extend(Self::conv_block(256, 512, 3, 1, 0));
        layers.push(LayerSpec::AdaptiveMaxPool2d { output: (1, 1) });
        layers.push(LayerSpec::Conv2d {
            in_channels: 512,
            out_channels: 512,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { p: 0.2 });
        layers.push(LayerSpec::Linear {
            in_features: 512,
            out_features: 2,
        });
        ModelGraph {
            name: "M".into(),
            layers,
            input_shape: (1, 300, 300),
            output_classes: 2,
        }
    }

    fn residual_block(in_channels: usize, out_channels: usize) -> LayerSpec {
        let mid = out_channels;
        LayerSpec::Residual {
            body: vec![
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels: mid,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (1, 1),
                },
                LayerSpec::BatchNorm2d { features: mid },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: mid,
                    out_channels,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (1, 1),
                },
                LayerSpec::BatchNorm2d {
                    features: out_channels,
                },
            ],
            projection: vec![LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: (1, 1),
                stride: (1, 1),
                padding: (0, 0),
            }],
        }
    }

    /// The "R" classifier: a strided stem then three residual blocks, each
    /// followed by average pooling, a global average pool and two linear
    /// layers with dropout before the head.
    pub fn r() -> ModelGraph {
        let mut layers = vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 64,
                kernel: (7, 7),
                stride: (2, 2),
                padding: (3, 3),
            },
            LayerSpec::BatchNorm2d { features: 64 },
            LayerSpec::Relu,
        ];
        for (cin, cout) in [(64, 128), (128, 256), (256, 512)] {
            layers.push(Self::residual_block(cin, cout));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::AvgPool2d {
                kernel: (2, 2),
                stride: (2, 2),
            });
        }
        layers.push(LayerSpec::AdaptiveAvgPool2d { output: (1, 1) });
        layers.push(LayerSpec::Linear {
            in_features: 512,
            out_features: 256,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { p: 0.2 });
        layers.push(LayerSpec::Linear {
            in_features: 256,
            out_features: 2,
        });
        ModelGraph {
            name: "R".into(),
            layers,
            input_shape: (1, 300, 300),
            output_classes: 2,
        }
    }

    /// Scaled-down M-style graph for fast experiments: `hw` x `hw` inputs,
    /// `base` channels. `dropout_p = 0` makes every forward pass
    /// deterministic, which finite-difference checks rely on.
    pub fn tiny(hw: usize, base: usize, dropout_p: f64) -> ModelGraph {
        let mut layers = Vec::new();
        layers.extend(Self::conv_block(1, base, 3, 1, 0));
        layers.push(LayerSpec::AvgPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        });
        layers.extend(Self::conv_block(base, 2 * base, 3, 1, 0));
        layers.push(LayerSpec::AdaptiveMaxPool2d { output: (1, 1) });
        layers.push(LayerSpec::Conv2d {
            in_channels: 2 * base,
            out_channels: 2 * base,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { p: dropout_p });
        layers.push(LayerSpec::Linear {
            in_features: 2 * base,
            out_features: 2,
        });
        ModelGraph {
            name: format!("tiny{hw}x{base}"),
            layers,
            input_shape: (1, hw, hw),
            output_classes: 2,
        }
    }
}

/// Look up one of the named architectures.
pub fn build_model(name: &str) -> Result<ModelGraph> {
    match name {
        "M" | "m" => Ok(ModelGraph::m()),
        "R" | "r" => Ok(ModelGraph::r()),
        "tiny" => Ok(ModelGraph::tiny(32, 8, 0.2)),
        other => Err(Error::Domain(format!("unknown model name: {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m_shape_chain_matches_declared_sizes() {
        let graph = ModelGraph::m();
        graph.validate().unwrap();
        let shapes = graph.output_shapes().unwrap();
        // first conv stage: 7x7 over 300 -> 294
        assert_eq!(shapes[0], Shape::Map { c: 128, h: 294, w: 294 });
        // second stage input is 58x58
        assert_eq!(shapes[3], Shape::Map { c: 128, h: 58, w: 58 });
        // third stage input is 18x18 after the 56 -> 18 pool
        assert_eq!(shapes[4].spatial(), Some((56, 56)));
        assert_eq!(shapes[7].spatial(), Some((18, 18)));
        assert_eq!(shapes[8].spatial(), Some((16, 16)));
        // global max pool to 1x1, then the head
        let n = shapes.len();
        assert_eq!(shapes[n - 1], Shape::Flat(2));
    }

    #[test]
    fn r_shape_chain_ends_in_two_classes() {
        let graph = ModelGraph::r();
        graph.validate().unwrap();
        let shapes = graph.output_shapes().unwrap();
        assert_eq!(shapes[0], Shape::Map { c: 64, h: 150, w: 150 });
        assert_eq!(*shapes.last().unwrap(), Shape::Flat(2));
    }

    #[test]
    fn tiny_validates() {
        ModelGraph::tiny(16, 4, 0.0).validate().unwrap();
        ModelGraph::tiny(32, 8, 0.2).validate().unwrap();
    }

    #[test]
    fn unknown_name_is_a_domain_error() {
        assert!(matches!(build_model("Z"), Err(Error::Domain(_))));
    }

    #[test]
    fn inconsistent_chain_is_rejected() {
        let graph = ModelGraph {
            name: "bad".into(),
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 3, // input has 1 channel
                    out_channels: 8,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (0, 0),
                },
            ],
            input_shape: (1, 16, 16),
            output_classes: 2,
        };
        assert!(matches!(graph.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn graph_serde_round_trip() {
        let graph = ModelGraph::r();
        let json = serde_json::to_string(&graph).unwrap();
        let back: ModelGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(graph, back);
    }
}
