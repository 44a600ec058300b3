//! Layer graphs for the DCSNet student and the teacher archetypes.

mod checkpoint;

use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Mode, Padding, Tape, Tensor, Var};

/// Fan multiplier for the second convolution of a residual block (bound
/// shrinks by its square root, 10x here).
const RESIDUAL_BRANCH_DAMPING: f64 = 100.0;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Nonlinearity used inside residual blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Silu,
}

/// One entry of a model's ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    MaxPool2d {
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Silu,
    Relu,
    Dropout {
        rate: f64,
    },
    Flatten,
    Softmax,
    /// `x + conv(act(conv(x)))` with same padding and unit stride.
    ResidualBlock {
        filters: usize,
        kernel: (usize, usize),
        activation: Activation,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::MaxPool2d { .. } => "maxpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Silu => "silu",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
            LayerSpec::ResidualBlock { .. } => "res",
            LayerSpec::GlobalAvgPool => "gap",
        }
    }
}

/// Serializable description from which a [`ModelGraph`] can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    /// Channels, height, width.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Layer whose output Grad-CAM uses unless told otherwise.
    pub default_capture: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

#[derive(Debug, Clone)]
struct BuiltLayer {
    name: String,
    spec: LayerSpec,
    /// Indices into the parameter list, in the order the op consumes them.
    params: Vec<usize>,
    out: Shape,
}

/// A named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S: Element = f32> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Output of [`ModelGraph::forward`].
pub struct ForwardPass {
    /// Pre-softmax scores, `[N, num_classes]`.
    pub logits: Var,
    /// Tape handles of the parameters, aligned with [`ModelGraph::params`].
    pub params: Vec<Var>,
    /// Outputs of every capture point, by layer name.
    pub captures: Vec<(String, Var)>,
}

impl ForwardPass {
    pub fn capture(&self, name: &str) -> Option<Var> {
        self.captures.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Ordered layers plus their parameters.
#[derive(Debug, Clone)]
pub struct ModelGraph<S: Element = f32> {
    arch: Architecture,
    layers: Vec<BuiltLayer>,
    params: Vec<Param<S>>,
}

fn validate_pair(p: (usize, usize), what: &str) -> Result<()> {
    if p.0 == 0 || p.1 == 0 {
        return Err(Error::contract(format!("{what} {p:?} must be >= 1")));
    }
    Ok(())
}

fn conv_out(shape: Shape, k: (usize, usize), s: (usize, usize), pad: Padding, layer: &str) -> Result<(usize, usize, usize)> {
    match shape {
        Shape::Spatial { c, h, w } => {
            let g = crate::tensor::ConvGeometry::new((h, w), k, s, pad)
                .map_err(|e| Error::contract(format!("layer {layer}: {e}")))?;
            Ok((c, g.out_h, g.out_w))
        }
        Shape::Flat(_) => Err(Error::contract(format!("layer {layer} needs a spatial input"))),
    }
}

impl<S: Element> ModelGraph<S> {
    /// Check shapes layer by layer and create uniform weights with zero
    /// biases: bound `sqrt(6 / fan_in)` for convolutions, `sqrt(6 / (fan_in +
    /// fan_out))` for dense layers, and a damped bound for the second
    /// convolution of residual blocks.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        let [c0, h0, w0] = arch.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::contract(format!("input shape {:?} has a zero dimension", arch.input_shape)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = Shape::Spatial { c: c0, h: h0, w: w0 };
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut params: Vec<Param<S>> = Vec::new();
        let mut counters = std::collections::HashMap::<&'static str, usize>::new();

        let mut add_param = |params: &mut Vec<Param<S>>, name: String, shape: &[usize], fan: Option<f64>| {
            let value = match fan {
                Some(fan) => {
                    let bound = (6.0 / fan).sqrt();
                    Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..bound)))
                }
                None => Tensor::zeros(shape),
            };
            params.push(Param { name, value });
            params.len() - 1
        };

        let n_layers = arch.layers.len();
        for (li, spec) in arch.layers.iter().enumerate() {
            let count = counters.entry(spec.kind()).or_insert(0);
            *count += 1;
            let name = format!("{}{}", spec.kind(), count);
            let mut pidx = Vec::new();
            let out = match spec {
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if *filters == 0 {
                        return Err(Error::contract(format!("layer {name}: filters must be >= 1")));
                    }
                    validate_pair(*kernel, "kernel")?;
                    validate_pair(*stride, "stride")?;
                    let (c, h, w) = conv_out(shape, *kernel, *stride, *padding, &name)?;
                    let fan_in = (c * kernel.0 * kernel.1) as f64;
                    pidx.push(add_param(&mut params, format!("{name}.weight"), &[*filters, c, kernel.0, kernel.1], Some(fan_in)));
                    pidx.push(add_param(&mut params, format!("{name}.bias"), &[*filters], None));
                    Shape::Spatial { c: *filters, h, w }
                }
                LayerSpec::MaxPool2d { pool, stride, padding } => {
                    validate_pair(*pool, "pool")?;
                    validate_pair(*stride, "stride")?;
                    let (c, h, w) = conv_out(shape, *pool, *stride, *padding, &name)?;
                    Shape::Spatial { c, h, w }
                }
                LayerSpec::ResidualBlock {
                    filters,
                    kernel,
                    activation,
                } => {
                    validate_pair(*kernel, "kernel")?;
                    if let Activation::LeakyRelu { slope } = activation {
                        if *slope < 0.0 {
                            return Err(Error::contract(format!("layer {name}: slope must be >= 0")));
                        }
                    }
                    match shape {
                        Shape::Spatial { c, .. } if c == *filters => {}
                        _ => {
                            return Err(Error::contract(format!(
                                "layer {name}: identity skip needs {filters} input channels, got {shape:?}"
                            )))
                        }
                    }
                    let fan_in = (filters * kernel.0 * kernel.1) as f64;
                    let w_shape = [*filters, *filters, kernel.0, kernel.1];
                    pidx.push(add_param(&mut params, format!("{name}.conv_a.weight"), &w_shape, Some(fan_in)));
                    pidx.push(add_param(&mut params, format!("{name}.conv_a.bias"), &[*filters], None));
                    // The second branch conv starts small so a deep stack stays
                    // close to the identity at initialisation.
                    let fan_b = fan_in * RESIDUAL_BRANCH_DAMPING;
                    pidx.push(add_param(&mut params, format!("{name}.conv_b.weight"), &w_shape, Some(fan_b)));
                    pidx.push(add_param(&mut params, format!("{name}.conv_b.bias"), &[*filters], None));
                    shape
                }
                LayerSpec::Dense { units } => {
                    if *units == 0 {
                        return Err(Error::contract(format!("layer {name}: units must be >= 1")));
                    }
                    let Shape::Flat(f) = shape else {
                        return Err(Error::contract(format!("layer {name}: dense needs a flat input, got {shape:?}")));
                    };
                    let fan = (f + units) as f64;
                    pidx.push(add_param(&mut params, format!("{name}.weight"), &[f, *units], Some(fan)));
                    pidx.push(add_param(&mut params, format!("{name}.bias"), &[*units], None));
                    Shape::Flat(*units)
                }
                LayerSpec::LeakyRelu { slope } => {
                    if !(*slope >= 0.0) {
                        return Err(Error::contract(format!("layer {name}: slope must be >= 0")));
                    }
                    shape
                }
                LayerSpec::Silu | LayerSpec::Relu => shape,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::contract(format!("layer {name}: dropout rate {rate} outside [0, 1)")));
                    }
                    shape
                }
                LayerSpec::Flatten => match shape {
                    Shape::Spatial { c, h, w } => Shape::Flat(c * h * w),
                    flat => flat,
                },
                LayerSpec::GlobalAvgPool => match shape {
                    Shape::Spatial { c, .. } => Shape::Flat(c),
                    Shape::Flat(_) => return Err(Error::contract(format!("layer {name} needs a spatial input"))),
                },
                LayerSpec::Softmax => {
                    if li + 1 != n_layers {
                        return Err(Error::contract("softmax is only supported as the final layer"));
                    }
                    shape
                }
            };
            shape = out;
            layers.push(BuiltLayer {
                name,
                spec: spec.clone(),
                params: pidx,
                out,
            });
        }

        if shape != Shape::Flat(arch.num_classes) {
            return Err(Error::contract(format!(
                "model output {shape:?} does not match {} classes",
                arch.num_classes
            )));
        }
        let graph = Self { arch, layers, params };
        if !graph.capture_points().contains(&graph.arch.default_capture.as_str()) {
            return Err(Error::contract(format!(
                "default capture {:?} is not a spatial layer",
                graph.arch.default_capture
            )));
        }
        Ok(graph)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn name(&self) -> &str {
        &self.arch.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Names of layers whose outputs are spatial feature maps and may be
    /// used for Grad-CAM.
    pub fn capture_points(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| matches!(l.out, Shape::Spatial { .. }))
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn default_capture(&self) -> &str {
        &self.arch.default_capture
    }

    /// Layer names paired with their output shapes, `[C, H, W]` or `[F]`.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .map(|l| {
                let s = match l.out {
                    Shape::Spatial { c, h, w } => vec![c, h, w],
                    Shape::Flat(f) => vec![f],
                };
                (l.name.clone(), s)
            })
            .collect()
    }

    pub fn cast<T: Element>(&self) -> ModelGraph<T> {
        ModelGraph {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replace parameter values; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor<S>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim(format!(
                    "parameter {}: shape {:?} vs {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Record the network on `tape`. A trailing softmax layer is not
    /// applied, so the result is logits. `rng` drives dropout in
    /// [`Mode::Train`] and is untouched in [`Mode::Infer`].
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<S>, input: Var, mode: Mode, rng: &mut R) -> Result<ForwardPass> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        self.forward_with(tape, input, params, mode, rng)
    }

    /// [`forward`](Self::forward) with caller-recorded parameter variables,
    /// one per entry of [`params`](Self::params) and in that order.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        input: Var,
        params: Vec<Var>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        if params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "{} expects {} parameter variables, got {}",
                self.name(),
                self.params.len(),
                params.len()
            )));
        }
        for (v, p) in params.iter().zip(&self.params) {
            if tape.shape(*v) != p.value.shape() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, variable has {:?}",
                    p.name,
                    p.value.shape(),
                    tape.shape(*v)
                )));
            }
        }
        let xs = tape.shape(input);
        let [c, h, w] = self.arch.input_shape;
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::dim(format!(
                "batch shape {xs:?} does not match model input [N, {c}, {h}, {w}]"
            )));
        }
        let mut captures = Vec::new();
        let mut x = input;
        for layer in &self.layers {
            let p = |i: usize| params[layer.params[i]];
            x = match &layer.spec {
                LayerSpec::Conv2d { stride, padding, .. } => tape.conv2d(x, p(0), p(1), *stride, *padding)?,
                LayerSpec::MaxPool2d { pool, stride, padding } => tape.maxpool2d(x, *pool, *stride, *padding)?,
                LayerSpec::Dense { .. } => tape.dense(x, p(0), p(1))?,
                LayerSpec::LeakyRelu { slope } => tape.leaky_relu(x, S::of(*slope))?,
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::Silu => tape.silu(x),
                LayerSpec::Dropout { rate } => tape.dropout(x, *rate, mode, rng)?,
                LayerSpec::Flatten => tape.flatten(x)?,
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerSpec::Softmax => x,
                LayerSpec::ResidualBlock { activation, .. } => {
                    let a = tape.conv2d(x, p(0), p(1), (1, 1), Padding::Same)?;
                    let a = match activation {
                        Activation::Relu => tape.relu(a)?,
                        Activation::LeakyRelu { slope } => tape.leaky_relu(a, S::of(*slope))?,
                        Activation::Silu => tape.silu(a),
                    };
                    let b = tape.conv2d(a, p(2), p(3), (1, 1), Padding::Same)?;
                    tape.add(x, b)?
                }
            };
            if matches!(layer.out, Shape::Spatial { .. }) {
                captures.push((layer.name.clone(), x));
            }
        }
        Ok(ForwardPass {
            logits: x,
            params,
            captures,
        })
    }

    /// Inference-mode logits for an NCHW batch.
    pub fn logits(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone());
        // Infer mode never draws from the generator.
        let pass = self.forward(&mut tape, x, Mode::Infer, &mut StepRng::new(0, 0))?;
        Ok(tape.value(pass.logits).clone())
    }
}

/// DCSNet: four stride-2 convolutions (64, 128, 128, 256 filters), each
/// followed by LeakyReLU(0.2) and a 2x2 stride-1 max pool, then dropout
/// 0.25, flatten, dense and softmax. All padding is "same".
pub fn dcsnet_architecture(input_shape: [usize; 3], num_classes: usize) -> Result<Architecture> {
    let [_, h, w] = input_shape;
    if h < 16 || w < 16 {
        return Err(Error::contract(format!(
            "DCSNet needs spatial input >= 16x16 for four stride-2 stages, got {h}x{w}"
        )));
    }
    if num_classes < 2 {
        return Err(Error::contract("DCSNet needs at least 2 classes"));
    }
    let mut layers = Vec::new();
    for filters in [64, 128, 128, 256] {
        layers.push(LayerSpec::Conv2d {
            filters,
            kernel: (3, 3),
            stride: (2, 2),
            padding: Padding::Same,
        });
        layers.push(LayerSpec::LeakyRelu { slope: 0.2 });
        layers.push(LayerSpec::MaxPool2d {
            pool: (2, 2),
            stride: (1, 1),
            padding: Padding::Same,
        });
    }
    layers.extend([
        LayerSpec::Dropout { rate: 0.25 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: num_classes },
        LayerSpec::Softmax,
    ]);
    let name = if h == 224 && w == 224 { "DCSNet" } else { "DCSNet-mini" };
    Ok(Architecture {
        name: name.into(),
        input_shape,
        num_classes,
        layers,
        default_capture: "conv4".into(),
    })
}

pub fn build_dcsnet<S: Element>(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<ModelGraph<S>> {
    ModelGraph::build(dcsnet_architecture(input_shape, num_classes)?, seed)
}

/// Teacher stand-ins for the large pretrained networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherArchetype {
    /// Identity-skip residual blocks, in the spirit of ResNet.
    Residual,
    /// Plain convolution stack with SiLU activations, as in EfficientNet.
    SiluNet,
}

impl TeacherArchetype {
    pub fn id(self) -> &'static str {
        match self {
            TeacherArchetype::Residual => "residual",
            TeacherArchetype::SiluNet => "silu_net",
        }
    }
}

impl std::str::FromStr for TeacherArchetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Self::Residual),
            "silu_net" | "silu-net" => Ok(Self::SiluNet),
            other => Err(Error::Config(format!("unknown teacher archetype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Channels of the stem and of every block.
    pub width: usize,
    /// Residual blocks, or extra convolutions for the SiLU archetype.
    pub depth: usize,
}

impl TeacherConfig {
    /// Desk-scale defaults; both exceed DCSNet-mini's parameter count.
    pub fn default_for(archetype: TeacherArchetype) -> Self {
        match archetype {
            TeacherArchetype::Residual => Self { width: 96, depth: 4 },
            TeacherArchetype::SiluNet => Self { width: 96, depth: 7 },
        }
    }
}

/// Stem (3x3 stride-2 conv, activation, 2x2 stride-2 max pool), a body of
/// `depth` residual blocks or SiLU convolutions, global average pooling,
/// dense head and softmax.
pub fn teacher_architecture(
    archetype: TeacherArchetype,
    cfg: TeacherConfig,
    input_shape: [usize; 3],
    num_classes: usize,
) -> Result<Architecture> {
    if cfg.depth == 0 || cfg.width == 0 {
        return Err(Error::contract(format!("teacher depth and width must be >= 1, got {cfg:?}")));
    }
    if num_classes < 2 {
        return Err(Error::contract("teacher needs at least 2 classes"));
    }
    let act = match archetype {
        TeacherArchetype::Residual => LayerSpec::Relu,
        TeacherArchetype::SiluNet => LayerSpec::Silu,
    };
    let mut layers = vec![
        LayerSpec::Conv2d {
            filters: cfg.width,
            kernel: (3, 3),
            stride: (2, 2),
            padding: Padding::Same,
        },
        act.clone(),
        LayerSpec::MaxPool2d {
            pool: (2, 2),
            stride: (2, 2),
            padding: Padding::Same,
        },
    ];
    let default_capture = match archetype {
        TeacherArchetype::Residual => {
            for _ in 0..cfg.depth {
                layers.push(LayerSpec::ResidualBlock {
                    filters: cfg.width,
                    kernel: (3, 3),
                    activation: Activation::Relu,
                });
            }
            format!("res{}", cfg.depth)
        }
        TeacherArchetype::SiluNet => {
            for _ in 0..cfg.depth {
                layers.push(LayerSpec::Conv2d {
                    filters: cfg.width,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: Padding::Same,
                });
                layers.push(LayerSpec::Silu);
            }
            format!("conv{}", cfg.depth + 1)
        }
    };
    layers.extend([
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { units: num_classes },
        LayerSpec::Softmax,
    ]);
    Ok(Architecture {
        name: archetype.id().into(),
        input_shape,
        num_classes,
        layers,
        default_capture,
    })
}

pub fn build_teacher<S: Element>(
    archetype: TeacherArchetype,
    cfg: TeacherConfig,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph<S>> {
    ModelGraph::build(teacher_architecture(archetype, cfg, input_shape, num_classes)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + cout
    }

    #[test]
    fn dcsnet_224_parameter_count() {
        let m = build_dcsnet::<f32>([3, 224, 224], 3, 0).unwrap();
        assert_eq!(m.param_count(), 668_931);
        assert_eq!(m.name(), "DCSNet");
    }

    #[test]
    fn dcsnet_shape_progression() {
        let m = build_dcsnet::<f32>([3, 224, 224], 3, 0).unwrap();
        let spatial: Vec<usize> = m
            .layer_shapes()
            .iter()
            .filter(|(n, _)| n.starts_with("conv") || n.starts_with("maxpool"))
            .map(|(_, s)| s[1])
            .collect();
        assert_eq!(spatial, vec![112, 112, 56, 56, 28, 28, 14, 14]);
        let shapes = m.layer_shapes();
        let conv4 = shapes.iter().find(|(n, _)| n == "conv4").unwrap();
        assert_eq!(conv4.1, vec![256, 14, 14]);
        let flat = shapes.iter().find(|(n, _)| n == "flatten1").unwrap();
        assert_eq!(flat.1, vec![50_176]);
        assert_eq!(m.default_capture(), "conv4");
    }

    #[test]
    fn dcsnet_mini_closed_form_count() {
        let m = build_dcsnet::<f32>([3, 32, 32], 3, 0).unwrap();
        let convs = conv_params(3, 64, 3) + conv_params(64, 128, 3) + conv_params(128, 128, 3) + conv_params(128, 256, 3);
        assert_eq!(convs, 518_400);
        assert_eq!(m.param_count(), convs + 2 * 2 * 256 * 3 + 3);
        assert_eq!(m.param_count(), 521_475);
    }

    #[test]
    fn dcsnet_rejects_small_inputs() {
        assert!(matches!(build_dcsnet::<f32>([3, 15, 32], 3, 0), Err(Error::Contract(_))));
        assert!(matches!(build_dcsnet::<f32>([3, 32, 32], 1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn residual_closed_form_count() {
        let m = build_teacher::<f32>(TeacherArchetype::Residual, TeacherConfig { width: 32, depth: 3 }, [3, 32, 32], 3, 0).unwrap();
        let expected = conv_params(3, 32, 3) + 3 * 2 * conv_params(32, 32, 3) + 32 * 3 + 3;
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn default_teachers_exceed_student() {
        let student = build_dcsnet::<f32>([3, 32, 32], 3, 0).unwrap().param_count();
        for arch in [TeacherArchetype::Residual, TeacherArchetype::SiluNet] {
            let t = build_teacher::<f32>(arch, TeacherConfig::default_for(arch), [3, 32, 32], 3, 0).unwrap();
            assert!(t.param_count() > student, "{arch:?}: {} <= {student}", t.param_count());
        }
    }

    #[test]
    fn dense_only_count() {
        let arch = Architecture {
            name: "dense".into(),
            input_shape: [10, 1, 1],
            num_classes: 3,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 3 }],
            default_capture: String::new(),
        };
        // No conv layer means no valid capture point.
        assert!(ModelGraph::<f32>::build(arch.clone(), 0).is_err());
        let mut arch = arch;
        arch.layers.insert(
            0,
            LayerSpec::Conv2d {
                filters: 1,
                kernel: (1, 1),
                stride: (1, 1),
                padding: Padding::Valid,
            },
        );
        arch.input_shape = [1, 10, 1];
        arch.default_capture = "conv1".into();
        let m = ModelGraph::<f32>::build(arch, 0).unwrap();
        assert_eq!(m.param_count(), 2 + 10 * 3 + 3);
    }

    #[test]
    fn recount_by_walking_shapes() {
        let m = build_teacher::<f32>(TeacherArchetype::SiluNet, TeacherConfig { width: 8, depth: 2 }, [3, 20, 20], 4, 1).unwrap();
        let recount: usize = m.params().iter().map(|p| p.value.shape().iter().product::<usize>()).sum();
        assert_eq!(m.param_count(), recount);
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let arch = Architecture {
            name: "block".into(),
            input_shape: [4, 6, 6],
            num_classes: 4,
            layers: vec![
                LayerSpec::ResidualBlock {
                    filters: 4,
                    kernel: (3, 3),
                    activation: Activation::Relu,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { units: 4 },
            ],
            default_capture: "res1".into(),
        };
        let mut m = ModelGraph::<f64>::build(arch, 3).unwrap();
        for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("res1")) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::<f64>::from_fn(&[2, 4, 6, 6], |i| ((i * 37) % 17) as f64 / 17.0 - 0.4);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pass = m.forward(&mut tape, xv, Mode::Infer, &mut StepRng::new(0, 0)).unwrap();
        assert_eq!(tape.value(pass.capture("res1").unwrap()), &x);
    }

    #[test]
    fn zero_head_gives_zero_logits_and_determinism() {
        let mut m = build_dcsnet::<f32>([3, 16, 16], 3, 5).unwrap();
        let x = Tensor::<f32>::from_fn(&[2, 3, 16, 16], |i| (i % 7) as f32 / 7.0);
        let a = m.logits(&x).unwrap();
        let b = m.logits(&x).unwrap();
        assert_eq!(a.data(), b.data());
        for name in ["dense1.weight", "dense1.bias"] {
            let p = m.param_mut(name).unwrap();
            *p = Tensor::zeros(p.shape());
        }
        let z = m.logits(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let m = build_dcsnet::<f32>([3, 16, 16], 3, 5).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 17, 16]);
        assert!(matches!(m.logits(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_teacher_config() {
        assert!(build_teacher::<f32>(TeacherArchetype::Residual, TeacherConfig { width: 8, depth: 0 }, [3, 32, 32], 3, 0).is_err());
    }
}
