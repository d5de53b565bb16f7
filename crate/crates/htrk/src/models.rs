//! The model zoo: a two-conv classifier, a reduced MobileNet-style
//! depthwise-separable classifier, and the three HTR networks (SimpleHTR,
//! Bluche, Puigcerver) plus a desk-scale SimpleHTR variant for fast runs.
//!
//! Every architecture is a declarative layer list, so building parameters,
//! running the forward pass and asserting the layer-by-layer shape table
//! all walk the same description.

use crate::ctc::ProbMatrix;
use crate::imaging::{standardize, GrayImage};
use crate::layers::{self, Conv2DSpec, Direction, LSTMSpec, LstmDirParams, LstmParams, Mode};
use crate::numerics::{softmax_rows, Graph, NodeId, Padding, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SimpleCnn,
    MobilenetMini,
    SimpleHtr,
    SimpleHtrSmall,
    Bluche,
    Puigcerver,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::SimpleCnn,
        ModelKind::MobilenetMini,
        ModelKind::SimpleHtr,
        ModelKind::SimpleHtrSmall,
        ModelKind::Bluche,
        ModelKind::Puigcerver,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::SimpleCnn => "simple_cnn",
            ModelKind::MobilenetMini => "mobilenet_mini",
            ModelKind::SimpleHtr => "simple_htr",
            ModelKind::SimpleHtrSmall => "simple_htr_small",
            ModelKind::Bluche => "bluche",
            ModelKind::Puigcerver => "puigcerver",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = ModelKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!(
                    "unknown model kind {s:?}; valid kinds: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn is_htr(&self) -> bool {
        matches!(
            self,
            ModelKind::SimpleHtr | ModelKind::SimpleHtrSmall | ModelKind::Bluche | ModelKind::Puigcerver
        )
    }

    /// The input size this architecture is laid out for.
    pub fn default_input(&self) -> (usize, usize) {
        match self {
            ModelKind::SimpleCnn => (512, 61),
            ModelKind::MobilenetMini => (512, 61),
            ModelKind::SimpleHtrSmall => (64, 32),
            _ => (128, 32),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What to build: HTR kinds use `charset_size` (blank added on top),
/// classifier kinds use `num_classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub charset_size: usize,
    pub num_classes: usize,
    pub input_w: usize,
    pub input_h: usize,
}

impl ModelSpec {
    pub fn htr(kind: ModelKind, charset_size: usize) -> Self {
        let (input_w, input_h) = kind.default_input();
        ModelSpec {
            kind,
            charset_size,
            num_classes: 0,
            input_w,
            input_h,
        }
    }

    pub fn classifier(kind: ModelKind, num_classes: usize, input_w: usize, input_h: usize) -> Self {
        ModelSpec {
            kind,
            charset_size: 0,
            num_classes,
            input_w,
            input_h,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kind.is_htr() {
            if self.charset_size == 0 {
                return Err(Error::Config("HTR models need charset_size >= 1".into()));
            }
            let (w, h) = self.kind.default_input();
            if (self.input_w, self.input_h) != (w, h) {
                return Err(Error::Config(format!(
                    "{} requires a {w}x{h} input, got {}x{}",
                    self.kind, self.input_w, self.input_h
                )));
            }
        } else {
            if self.num_classes == 0 {
                return Err(Error::Config("classifiers need num_classes >= 1".into()));
            }
            if self.input_w < 32 || self.input_h < 32 {
                return Err(Error::Config(format!(
                    "{} needs at least a 32x32 input, got {}x{}",
                    self.kind, self.input_w, self.input_h
                )));
            }
        }
        Ok(())
    }
}

// ── layer description ───────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Act {
    None,
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
enum LayerDef {
    Conv {
        name: String,
        spec: Conv2DSpec,
        act: Act,
    },
    GatedConv {
        name: String,
        spec: Conv2DSpec,
    },
    /// Depthwise 3×3 + BN + ReLU, then pointwise 1×1 + BN + ReLU.
    DwSepBlock {
        name: String,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    MaxPool {
        pool_h: usize,
        pool_w: usize,
    },
    Dropout {
        p: f64,
    },
    ColumnsToSeq,
    Blstm {
        name: String,
        input: usize,
        hidden: usize,
    },
    /// Per-row dense projection on a sequence or flattened vector.
    Dense {
        name: String,
        input: usize,
        output: usize,
        act: Act,
    },
    Flatten,
    AvgPoolGlobal,
}

fn architecture(spec: &ModelSpec) -> Vec<LayerDef> {
    let conv = |name: &str, k: usize, cin: usize, cout: usize, act: Act| LayerDef::Conv {
        name: name.into(),
        spec: Conv2DSpec::same(k, cin, cout),
        act,
    };
    match spec.kind {
        ModelKind::SimpleHtr => {
            let classes = spec.charset_size + 1;
            vec![
                conv("c1", 5, 1, 32, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 2 },
                conv("c2", 5, 32, 64, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 2 },
                conv("c3", 3, 64, 128, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 1 },
                conv("c4", 3, 128, 128, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 1 },
                conv("c5", 3, 128, 256, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 1 },
                LayerDef::ColumnsToSeq,
                LayerDef::Blstm {
                    name: "r1".into(),
                    input: 256,
                    hidden: 256,
                },
                LayerDef::Blstm {
                    name: "r2".into(),
                    input: 512,
                    hidden: 256,
                },
                LayerDef::Dense {
                    name: "proj".into(),
                    input: 512,
                    output: classes,
                    act: Act::None,
                },
            ]
        }
        ModelKind::SimpleHtrSmall => {
            let classes = spec.charset_size + 1;
            vec![
                conv("c1", 5, 1, 4, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 2 },
                conv("c2", 5, 4, 8, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 2 },
                conv("c3", 3, 8, 16, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 1 },
                conv("c4", 3, 16, 16, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 1 },
                conv("c5", 3, 16, 32, Act::Relu),
                LayerDef::MaxPool { pool_h: 2, pool_w: 1 },
                LayerDef::ColumnsToSeq,
                LayerDef::Blstm {
                    name: "r1".into(),
                    input: 32,
                    hidden: 32,
                },
                LayerDef::Blstm {
                    name: "r2".into(),
                    input: 64,
                    hidden: 32,
                },
                LayerDef::Dense {
                    name: "proj".into(),
                    input: 64,
                    output: classes,
                    act: Act::None,
                },
            ]
        }
        ModelKind::Bluche => {
            let classes = spec.charset_size + 1;
            let down = |name: &str, cin: usize, cout: usize| LayerDef::Conv {
                name: name.into(),
                spec: Conv2DSpec {
                    kernel_h: 2,
                    kernel_w: 4,
                    in_channels: cin,
                    out_channels: cout,
                    stride_h: 2,
                    stride_w: 4,
                    padding: Padding::Same,
                },
                act: Act::Tanh,
            };
            vec![
                conv("e1", 3, 1, 8, Act::Tanh),
                down("e2", 8, 16),
                LayerDef::GatedConv {
                    name: "g1".into(),
                    spec: Conv2DSpec::same(3, 16, 16),
                },
                conv("e3", 3, 16, 32, Act::Tanh),
                LayerDef::GatedConv {
                    name: "g2".into(),
                    spec: Conv2DSpec::same(3, 32, 32),
                },
                down("e4", 32, 64),
                conv("e5", 3, 64, 128, Act::Tanh),
                LayerDef::ColumnsToSeq,
                LayerDef::Blstm {
                    name: "d1".into(),
                    input: 1024,
                    hidden: 128,
                },
                LayerDef::Dense {
                    name: "d2".into(),
                    input: 256,
                    output: 128,
                    act: Act::Tanh,
                },
                LayerDef::Blstm {
                    name: "d3".into(),
                    input: 128,
                    hidden: 128,
                },
                LayerDef::Dense {
                    name: "proj".into(),
                    input: 256,
                    output: classes,
                    act: Act::None,
                },
            ]
        }
        ModelKind::Puigcerver => {
            let classes = spec.charset_size + 1;
            let mut defs = Vec::new();
            let mut cin = 1;
            for n in 1..=5usize {
                let cout = 16 * n;
                defs.push(conv(&format!("c{n}"), 3, cin, cout, Act::None));
                defs.push(LayerDef::BatchNorm {
                    name: format!("bn{n}"),
                    channels: cout,
                });
                defs.push(LayerDef::Relu);
                if n <= 3 {
                    defs.push(LayerDef::MaxPool { pool_h: 2, pool_w: 2 });
                }
                cin = cout;
            }
            defs.push(LayerDef::ColumnsToSeq);
            let mut input = 4 * 80;
            for n in 1..=5usize {
                defs.push(LayerDef::Blstm {
                    name: format!("r{n}"),
                    input,
                    hidden: 256,
                });
                input = 512;
            }
            defs.push(LayerDef::Dropout { p: 0.5 });
            defs.push(LayerDef::Dense {
                name: "proj".into(),
                input: 512,
                output: classes,
                act: Act::None,
            });
            defs
        }
        ModelKind::SimpleCnn => vec![
            conv("c1", 3, 1, 8, Act::Relu),
            LayerDef::MaxPool { pool_h: 2, pool_w: 2 },
            conv("c2", 3, 8, 16, Act::Relu),
            LayerDef::MaxPool { pool_h: 2, pool_w: 2 },
            LayerDef::Flatten,
            LayerDef::Dense {
                name: "fc".into(),
                input: (spec.input_h / 4) * (spec.input_w / 4) * 16,
                output: spec.num_classes,
                act: Act::None,
            },
        ],
        ModelKind::MobilenetMini => {
            let mut defs = vec![
                LayerDef::Conv {
                    name: "stem".into(),
                    spec: Conv2DSpec {
                        kernel_h: 3,
                        kernel_w: 3,
                        in_channels: 1,
                        out_channels: 8,
                        stride_h: 2,
                        stride_w: 2,
                        padding: Padding::Same,
                    },
                    act: Act::None,
                },
                LayerDef::BatchNorm {
                    name: "stem_bn".into(),
                    channels: 8,
                },
                LayerDef::Relu,
            ];
            let blocks: [(usize, usize); 13] = [
                (16, 1),
                (32, 2),
                (32, 1),
                (64, 2),
                (64, 1),
                (128, 2),
                (128, 1),
                (128, 1),
                (128, 1),
                (128, 1),
                (128, 1),
                (256, 2),
                (256, 1),
            ];
            let mut cin = 8;
            for (i, (cout, stride)) in blocks.into_iter().enumerate() {
                defs.push(LayerDef::DwSepBlock {
                    name: format!("b{}", i + 1),
                    in_ch: cin,
                    out_ch: cout,
                    stride,
                });
                cin = cout;
            }
            defs.push(LayerDef::AvgPoolGlobal);
            defs.push(LayerDef::Dense {
                name: "fc".into(),
                input: 256,
                output: spec.num_classes,
                act: Act::None,
            });
            defs
        }
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// A built network: the layer list plus named parameter tensors. Immutable
/// during inference; training owns mutation.
pub struct Model {
    spec: ModelSpec,
    layers: Vec<LayerDef>,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// One forward construction: the graph, the output node, the graph node of
/// every trainable parameter, and pending batch-norm statistics updates.
pub struct ForwardPass {
    pub graph: Graph,
    pub output: NodeId,
    pub param_nodes: Vec<(String, NodeId)>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Batch statistics observed by one training forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_param: String,
    pub var_param: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

impl Model {
    /// Allocates and Glorot-initializes all parameters for `spec`,
    /// deterministically from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let layers = architecture(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut add = |name: String, value: Tensor, trainable: bool| {
            params.push(Param {
                name,
                value,
                trainable,
            });
        };
        for def in &layers {
            match def {
                LayerDef::Conv { name, spec: cs, .. } => {
                    add_conv_params(&mut add, name, cs, &mut rng);
                }
                LayerDef::GatedConv { name, spec: cs } => {
                    add_conv_params(&mut add, &format!("{name}.f"), cs, &mut rng);
                    add_conv_params(&mut add, &format!("{name}.g"), cs, &mut rng);
                }
                LayerDef::DwSepBlock {
                    name,
                    in_ch,
                    out_ch,
                    ..
                } => {
                    let fan = 9 * in_ch;
                    add(
                        format!("{name}.dw.w"),
                        layers::glorot_uniform(vec![3, 3, *in_ch], fan, fan, &mut rng),
                        true,
                    );
                    add(format!("{name}.dw.b"), Tensor::zeros(vec![*in_ch]), true);
                    add_bn_params(&mut add, &format!("{name}.dwbn"), *in_ch);
                    add(
                        format!("{name}.pw.w"),
                        layers::glorot_uniform(
                            vec![1, 1, *in_ch, *out_ch],
                            *in_ch,
                            *out_ch,
                            &mut rng,
                        ),
                        true,
                    );
                    add(format!("{name}.pw.b"), Tensor::zeros(vec![*out_ch]), true);
                    add_bn_params(&mut add, &format!("{name}.pwbn"), *out_ch);
                }
                LayerDef::BatchNorm { name, channels } => {
                    add_bn_params(&mut add, name, *channels);
                }
                LayerDef::Blstm {
                    name,
                    input,
                    hidden,
                } => {
                    for dir in ["fwd", "bwd"] {
                        add(
                            format!("{name}.{dir}.wx"),
                            layers::glorot_uniform(
                                vec![*input, 4 * hidden],
                                *input + hidden,
                                4 * hidden,
                                &mut rng,
                            ),
                            true,
                        );
                        add(
                            format!("{name}.{dir}.wh"),
                            layers::glorot_uniform(
                                vec![*hidden, 4 * hidden],
                                *input + hidden,
                                4 * hidden,
                                &mut rng,
                            ),
                            true,
                        );
                        // forget gate bias starts open so early gradients flow
                        let mut bias = Tensor::zeros(vec![4 * hidden]);
                        for j in *hidden..2 * hidden {
                            bias.data_mut()[j] = 1.0;
                        }
                        add(format!("{name}.{dir}.b"), bias, true);
                    }
                }
                LayerDef::Dense {
                    name,
                    input,
                    output,
                    ..
                } => {
                    add(
                        format!("{name}.w"),
                        layers::glorot_uniform(vec![*input, *output], *input, *output, &mut rng),
                        true,
                    );
                    add(format!("{name}.b"), Tensor::zeros(vec![*output]), true);
                }
                _ => {}
            }
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model {
            spec,
            layers,
            params,
            index,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.params[i].trainable)
            .unwrap_or(false)
    }

    /// Total number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// All parameters as (name, tensor, trainable) for serialization.
    pub fn export_params(&self) -> Vec<(String, Tensor, bool)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone(), p.trainable))
            .collect()
    }

    /// Rebuilds a model from stored parameters, validating names and shapes
    /// against a fresh build of the same spec.
    pub fn from_params(spec: ModelSpec, stored: &[(String, Tensor)]) -> Result<Model> {
        let mut model = Model::build(spec, 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model needs {}",
                stored.len(),
                model.params.len()
            )));
        }
        for (name, value) in stored {
            let Some(&i) = model.index.get(name) else {
                return Err(Error::Config(format!("unexpected parameter {name:?}")));
            };
            if model.params[i].value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    left: model.params[i].value.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            model.params[i].value = value.clone();
        }
        Ok(model)
    }

    /// Folds observed batch statistics into the running BN statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (param, batch) in [(&u.mean_param, &u.mean), (&u.var_param, &u.var)] {
                if let Some(&i) = self.index.get(param.as_str()) {
                    for (r, &b) in self.params[i].value.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }

    fn node(&self, g: &mut Graph, nodes: &mut Vec<(String, NodeId)>, name: &str) -> NodeId {
        let i = self.index[name];
        let id = g.leaf(self.params[i].value.clone());
        if self.params[i].trainable {
            nodes.push((name.to_string(), id));
        }
        id
    }

    /// Builds the forward graph over a prepared input image. The image must
    /// already have the model's input size; standardization happens here.
    pub fn forward_graph(
        &self,
        img: &GrayImage,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        if img.width() != self.spec.input_w || img.height() != self.spec.input_h {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: vec![img.height(), img.width()],
                right: vec![self.spec.input_h, self.spec.input_w],
            });
        }
        let mut g = Graph::new();
        let mut param_nodes = Vec::new();
        let mut bn_updates = Vec::new();
        let input = standardize(img);
        let (h, w) = (img.height(), img.width());
        let mut x = g.leaf(input.reshape(vec![h, w, 1])?);

        for def in &self.layers {
            x = self.apply_layer(
                &mut g,
                x,
                def,
                mode,
                rng,
                &mut param_nodes,
                &mut bn_updates,
            )?;
        }
        Ok(ForwardPass {
            graph: g,
            output: x,
            param_nodes,
            bn_updates,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_layer(
        &self,
        g: &mut Graph,
        x: NodeId,
        def: &LayerDef,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        nodes: &mut Vec<(String, NodeId)>,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<NodeId> {
        match def {
            LayerDef::Conv { name, spec, act } => {
                let w = self.node(g, nodes, &format!("{name}.w"));
                let b = self.node(g, nodes, &format!("{name}.b"));
                let y = layers::conv2d(g, x, spec, w, b)?;
                Ok(apply_act(g, y, act))
            }
            LayerDef::GatedConv { name, spec } => {
                let wf = self.node(g, nodes, &format!("{name}.f.w"));
                let bf = self.node(g, nodes, &format!("{name}.f.b"));
                let wg = self.node(g, nodes, &format!("{name}.g.w"));
                let bg = self.node(g, nodes, &format!("{name}.g.b"));
                layers::gated_conv2d(g, x, spec, wf, bf, wg, bg)
            }
            LayerDef::DwSepBlock { name, stride, .. } => {
                let dww = self.node(g, nodes, &format!("{name}.dw.w"));
                let dwb = self.node(g, nodes, &format!("{name}.dw.b"));
                let mut y = g.depthwise_conv2d(x, dww, dwb, (*stride, *stride), Padding::Same)?;
                y = self.apply_bn(g, y, &format!("{name}.dwbn"), mode, nodes, bn_updates)?;
                y = g.relu(y);
                let pww = self.node(g, nodes, &format!("{name}.pw.w"));
                let pwb = self.node(g, nodes, &format!("{name}.pw.b"));
                y = g.conv2d(y, pww, pwb, (1, 1), Padding::Same)?;
                y = self.apply_bn(g, y, &format!("{name}.pwbn"), mode, nodes, bn_updates)?;
                Ok(g.relu(y))
            }
            LayerDef::BatchNorm { name, .. } => {
                self.apply_bn(g, x, name, mode, nodes, bn_updates)
            }
            LayerDef::Relu => Ok(g.relu(x)),
            LayerDef::MaxPool { pool_h, pool_w } => g.maxpool(x, *pool_h, *pool_w),
            LayerDef::Dropout { p } => layers::dropout(g, x, *p, mode, rng),
            LayerDef::ColumnsToSeq => g.columns_to_seq(x),
            LayerDef::Blstm {
                name,
                input,
                hidden,
            } => {
                let spec = LSTMSpec {
                    input_size: *input,
                    hidden_size: *hidden,
                    direction: Direction::Bidirectional,
                };
                let params = LstmParams {
                    forward: LstmDirParams {
                        wx: self.node(g, nodes, &format!("{name}.fwd.wx")),
                        wh: self.node(g, nodes, &format!("{name}.fwd.wh")),
                        bias: self.node(g, nodes, &format!("{name}.fwd.b")),
                    },
                    backward: Some(LstmDirParams {
                        wx: self.node(g, nodes, &format!("{name}.bwd.wx")),
                        wh: self.node(g, nodes, &format!("{name}.bwd.wh")),
                        bias: self.node(g, nodes, &format!("{name}.bwd.b")),
                    }),
                };
                layers::lstm_forward(g, x, &spec, &params)
            }
            LayerDef::Dense { name, act, .. } => {
                let w = self.node(g, nodes, &format!("{name}.w"));
                let b = self.node(g, nodes, &format!("{name}.b"));
                let y = layers::dense(g, x, w, b)?;
                Ok(apply_act(g, y, act))
            }
            LayerDef::Flatten => {
                let n = g.value(x).len();
                g.reshape(x, vec![1, n])
            }
            LayerDef::AvgPoolGlobal => g.avgpool_global(x),
        }
    }

    fn apply_bn(
        &self,
        g: &mut Graph,
        x: NodeId,
        name: &str,
        mode: Mode,
        nodes: &mut Vec<(String, NodeId)>,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<NodeId> {
        let gamma = self.node(g, nodes, &format!("{name}.gamma"));
        let beta = self.node(g, nodes, &format!("{name}.beta"));
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                bn_updates.push(BnUpdate {
                    mean_param: format!("{name}.running_mean"),
                    var_param: format!("{name}.running_var"),
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.param(&format!("{name}.running_mean")).unwrap().data().to_vec();
                let var = self.param(&format!("{name}.running_var")).unwrap().data().to_vec();
                layers::batchnorm_infer(g, x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }

    /// Inference for HTR kinds: softmax-normalized per-frame posteriors.
    pub fn forward_htr(&self, img: &GrayImage) -> Result<ProbMatrix> {
        if !self.spec.kind.is_htr() {
            return Err(Error::Config(format!(
                "{} is not an HTR model",
                self.spec.kind
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward_graph(img, Mode::Eval, &mut rng)?;
        ProbMatrix::new(softmax_rows(pass.graph.value(pass.output)))
    }

    /// Inference for classifier kinds: a probability vector over classes.
    pub fn forward_classifier(&self, img: &GrayImage) -> Result<Vec<f64>> {
        if self.spec.kind.is_htr() {
            return Err(Error::Config(format!(
                "{} is not a classifier",
                self.spec.kind
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward_graph(img, Mode::Eval, &mut rng)?;
        Ok(softmax_rows(pass.graph.value(pass.output)).data().to_vec())
    }

    /// Time steps of the HTR output sequence.
    pub fn output_steps(&self) -> Result<usize> {
        let table = shape_table(&self.spec)?;
        Ok(table.last().map(|(_, s)| s[0]).unwrap_or(0))
    }
}

fn apply_act(g: &mut Graph, x: NodeId, act: &Act) -> NodeId {
    match act {
        Act::None => x,
        Act::Relu => g.relu(x),
        Act::Tanh => g.tanh(x),
    }
}

fn add_conv_params(
    add: &mut impl FnMut(String, Tensor, bool),
    name: &str,
    spec: &Conv2DSpec,
    rng: &mut ChaCha8Rng,
) {
    let fan_in = spec.kernel_h * spec.kernel_w * spec.in_channels;
    let fan_out = spec.kernel_h * spec.kernel_w * spec.out_channels;
    add(
        format!("{name}.w"),
        layers::glorot_uniform(spec.weight_shape(), fan_in, fan_out, rng),
        true,
    );
    add(
        format!("{name}.b"),
        Tensor::zeros(vec![spec.out_channels]),
        true,
    );
}

fn add_bn_params(add: &mut impl FnMut(String, Tensor, bool), name: &str, channels: usize) {
    add(format!("{name}.gamma"), Tensor::filled(vec![channels], 1.0), true);
    add(format!("{name}.beta"), Tensor::zeros(vec![channels]), true);
    add(
        format!("{name}.running_mean"),
        Tensor::zeros(vec![channels]),
        false,
    );
    add(
        format!("{name}.running_var"),
        Tensor::filled(vec![channels], 1.0),
        false,
    );
}

/// Walks the architecture computing each layer's output shape, without
/// allocating parameters. The table starts at the input and ends at the
/// model output.
pub fn shape_table(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>)>> {
    spec.validate()?;
    let layers = architecture(spec);
    let mut shape = vec![spec.input_h, spec.input_w, 1];
    let mut table = vec![("input".to_string(), shape.clone())];
    for def in &layers {
        let (name, next) = match def {
            LayerDef::Conv { name, spec: cs, .. } => {
                let (h, w) = cs.output_hw(shape[0], shape[1]);
                (name.clone(), vec![h, w, cs.out_channels])
            }
            LayerDef::GatedConv { name, spec: cs } => {
                let (h, w) = cs.output_hw(shape[0], shape[1]);
                (name.clone(), vec![h, w, cs.out_channels])
            }
            LayerDef::DwSepBlock {
                name,
                out_ch,
                stride,
                ..
            } => (
                name.clone(),
                vec![
                    shape[0].div_ceil(*stride),
                    shape[1].div_ceil(*stride),
                    *out_ch,
                ],
            ),
            LayerDef::BatchNorm { name, .. } => (name.clone(), shape.clone()),
            LayerDef::Relu => ("relu".to_string(), shape.clone()),
            LayerDef::MaxPool { pool_h, pool_w } => (
                format!("maxpool{pool_h}x{pool_w}"),
                vec![shape[0] / pool_h, shape[1] / pool_w, shape[2]],
            ),
            LayerDef::Dropout { p } => (format!("dropout{p}"), shape.clone()),
            LayerDef::ColumnsToSeq => (
                "columns_to_seq".to_string(),
                vec![shape[1], shape[0] * shape[2]],
            ),
            LayerDef::Blstm { name, input, hidden } => {
                if shape[1] != *input {
                    return Err(Error::ShapeMismatch {
                        op: "blstm input",
                        left: shape.clone(),
                        right: vec![*input],
                    });
                }
                (name.clone(), vec![shape[0], 2 * hidden])
            }
            LayerDef::Dense { name, input, output, .. } => {
                if shape[1] != *input {
                    return Err(Error::ShapeMismatch {
                        op: "dense input",
                        left: shape.clone(),
                        right: vec![*input],
                    });
                }
                (name.clone(), vec![shape[0], *output])
            }
            LayerDef::Flatten => (
                "flatten".to_string(),
                vec![1, shape.iter().product()],
            ),
            LayerDef::AvgPoolGlobal => ("avgpool_global".to_string(), vec![1, shape[2]]),
        };
        shape = next;
        table.push((name, shape.clone()));
    }
    Ok(table)
}
