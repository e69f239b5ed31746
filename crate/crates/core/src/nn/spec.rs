//! Network topology: layer kinds, training variants and architecture strings.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which components of the method are switched on. `B` is scaled-sign
/// binarization with a straight-through gradient; `T` swaps sign for the
/// scheduled approximation; `R` rotates binarized weights each epoch; `A`
/// learns the interpolation coefficient between raw and rotated weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    B,
    BR,
    BT,
    BTR,
    BTRA,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::B, Variant::BR, Variant::BT, Variant::BTR, Variant::BTRA];

    pub fn uses_approx(self) -> bool {
        matches!(self, Variant::BT | Variant::BTR | Variant::BTRA)
    }

    pub fn uses_rotation(self) -> bool {
        matches!(self, Variant::BR | Variant::BTR | Variant::BTRA)
    }

    pub fn uses_adjust(self) -> bool {
        matches!(self, Variant::BTRA)
    }

    /// The per-tensor `λ = mean|w|` scale rides along with the hard sign.
    pub fn uses_scaling(self) -> bool {
        !self.uses_approx()
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::B => "B",
            Variant::BR => "B+R",
            Variant::BT => "B+T",
            Variant::BTR => "B+T+R",
            Variant::BTRA => "rbnn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        match compact.to_ascii_uppercase().as_str() {
            "B" | "BASELINE-XNOR" | "XNOR" => Ok(Variant::B),
            "B+R" => Ok(Variant::BR),
            "B+T" => Ok(Variant::BT),
            "B+T+R" => Ok(Variant::BTR),
            "B+T+R+A" | "RBNN" => Ok(Variant::BTRA),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected rbnn, B, B+R, B+T, B+T+R or B+T+R+A)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Per-sample tensor shape, `channels × height × width`. Dense features use
/// `features × 1 × 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn flat(features: usize) -> Self {
        Self::new(features, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for Shape3 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad shape {s:?}, expected CxHxW")))?;
        match parts.as_slice() {
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok(Shape3::new(*c, *h, *w)),
            _ => Err(Error::Config(format!("bad shape {s:?}, expected CxHxW"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `y = x·Wᵀ + b` with `W` laid out `(outputs, inputs)`.
    Dense {
        inputs: usize,
        outputs: usize,
        binarized: bool,
        binary_input: bool,
    },
    /// Weights laid out `(out_channels, in_channels, kernel, kernel)`.
    Conv2d {
        input: Shape3,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        binarized: bool,
        binary_input: bool,
    },
    /// Normalizes each channel over the batch and spatial positions.
    BatchNorm { channels: usize, spatial: usize },
    /// Non-overlapping `size × size` window.
    Pool { kind: PoolKind, input: Shape3, size: usize },
    /// Adds activation `source` (0 is the network input, `i` the output of
    /// layer `i − 1`) to the incoming activation.
    ShortcutAdd { source: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::ShortcutAdd { .. } => "shortcut-add",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn is_binarized(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { binarized: true, .. } | LayerSpec::Conv2d { binarized: true, .. }
        )
    }

    /// Whether the layer's input activations pass through sign (or `F`).
    pub fn binarizes_input(&self) -> bool {
        match self {
            LayerSpec::Dense {
                binarized,
                binary_input,
                ..
            }
            | LayerSpec::Conv2d {
                binarized,
                binary_input,
                ..
            } => *binarized || *binary_input,
            _ => false,
        }
    }

    /// Tensor shape of the weights, `(fan_out, fan_in)` or `(c_out, c_in, k, k)`.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => Some(vec![*outputs, *inputs]),
            LayerSpec::Conv2d {
                input,
                out_channels,
                kernel,
                ..
            } => Some(vec![*out_channels, input.channels, *kernel, *kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self {
            LayerSpec::Dense { outputs, .. } => *outputs,
            LayerSpec::Conv2d { out_channels, .. } => *out_channels,
            _ => 0,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv2d { input, kernel, .. } => input.channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Output shape for a given per-sample input length, or an error when the
    /// layer cannot accept it.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if input.len() != *inputs {
                    return Err(Error::Shape(format!(
                        "dense layer expects {inputs} inputs, got {}",
                        input.len()
                    )));
                }
                Ok(Shape3::flat(*outputs))
            }
            LayerSpec::Conv2d {
                input: expected,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input != *expected {
                    return Err(Error::Shape(format!("conv expects {expected}, got {input}")));
                }
                if *stride == 0 || *kernel == 0 || expected.height + 2 * padding < *kernel || expected.width + 2 * padding < *kernel {
                    return Err(Error::Shape("conv kernel does not fit its input".into()));
                }
                Ok(Shape3::new(
                    *out_channels,
                    (expected.height + 2 * padding - kernel) / stride + 1,
                    (expected.width + 2 * padding - kernel) / stride + 1,
                ))
            }
            LayerSpec::BatchNorm { channels, spatial } => {
                if input.channels != *channels || input.spatial() != *spatial {
                    return Err(Error::Shape(format!(
                        "batchnorm over {channels} channels × {spatial} positions got {input}"
                    )));
                }
                Ok(input)
            }
            LayerSpec::Pool {
                input: expected,
                size,
                ..
            } => {
                if input != *expected || *size == 0 || expected.height % size != 0 || expected.width % size != 0 {
                    return Err(Error::Shape(format!("pool {size} cannot tile {input}")));
                }
                Ok(Shape3::new(expected.channels, expected.height / size, expected.width / size))
            }
            LayerSpec::ShortcutAdd { .. } => Ok(input),
        }
    }
}

/// A validated layer sequence together with its input shape and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub name: String,
    pub input: Shape3,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Shape of every activation: `shapes[0]` is the input, `shapes[i + 1]`
    /// the output of layer `i`.
    pub shapes: Vec<Shape3>,
}

impl Architecture {
    pub fn new(name: impl Into<String>, input: Shape3, classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut shapes = vec![input];
        for (i, layer) in layers.iter().enumerate() {
            let current = *shapes.last().expect("non-empty");
            let out = layer
                .output_shape(current)
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", layer.kind())))?;
            if let LayerSpec::ShortcutAdd { source } = layer {
                if *source > i || shapes[*source] != current {
                    return Err(Error::Shape(format!(
                        "layer {i}: shortcut source {source} does not match shape {current}"
                    )));
                }
            }
            shapes.push(out);
        }
        let weighted: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_weights())
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (weighted.first(), weighted.last()) else {
            return Err(Error::InvalidInput("architecture has no weight layers".into()));
        };
        if layers[first].is_binarized() || layers[last].is_binarized() {
            return Err(Error::InvalidInput(
                "the first and last weight layers keep full-precision weights".into(),
            ));
        }
        if shapes.last().map(|s| s.len()) != Some(classes) {
            return Err(Error::Shape(format!(
                "network emits {} values for {classes} classes",
                shapes.last().map_or(0, |s| s.len())
            )));
        }
        Ok(Self {
            name: name.into(),
            input,
            classes,
            layers,
            shapes,
        })
    }

    /// Parses `mlp:784-256-256-10`, `cnn-small` or `resnet-toy`.
    pub fn parse(name: &str, input: Shape3, classes: usize) -> Result<Self> {
        if let Some(dims) = name.strip_prefix("mlp:") {
            let dims: Vec<usize> = dims
                .split('-')
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad mlp dimensions in {name:?}")))?;
            if dims.len() < 2 || dims.contains(&0) {
                return Err(Error::Config(format!("mlp needs at least two positive sizes: {name:?}")));
            }
            if dims[0] != input.len() {
                return Err(Error::Config(format!(
                    "{name:?} starts at {} inputs but samples have {}",
                    dims[0],
                    input.len()
                )));
            }
            return Self::new(name, input, classes, mlp_layers(&dims));
        }
        match name {
            "cnn-small" => Self::new(name, input, classes, cnn_small(input, classes)),
            "resnet-toy" => Self::new(name, input, classes, resnet_toy(input, classes)),
            _ => Err(Error::Config(format!(
                "unknown architecture {name:?} (expected mlp:D0-...-Dk, cnn-small or resnet-toy)"
            ))),
        }
    }

    pub fn binarized_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_binarized())
            .map(|(i, _)| i)
    }

    pub fn layer_id(&self, index: usize) -> String {
        format!("{}{}", self.layers[index].kind(), index)
    }
}

/// Dense stack: full-precision first and last layers, binarized hidden layers,
/// batch norm after every non-final dense layer.
pub fn mlp_layers(dims: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let count = dims.len() - 1;
    for i in 0..count {
        let first = i == 0;
        let last = i + 1 == count;
        layers.push(LayerSpec::Dense {
            inputs: dims[i],
            outputs: dims[i + 1],
            binarized: !first && !last,
            binary_input: !first,
        });
        if !last {
            layers.push(LayerSpec::BatchNorm {
                channels: dims[i + 1],
                spatial: 1,
            });
        }
    }
    layers
}

fn conv(input: Shape3, out_channels: usize, binarized: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        input,
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
        binarized,
        binary_input: binarized,
    }
}

fn cnn_small(input: Shape3, classes: usize) -> Vec<LayerSpec> {
    let (h, w) = (input.height, input.width);
    let s1 = Shape3::new(16, h, w);
    let s2 = Shape3::new(32, h, w);
    let s3 = Shape3::new(32, h / 2, w / 2);
    let s4 = Shape3::new(64, h / 2, w / 2);
    let s5 = Shape3::new(64, h / 4, w / 4);
    vec![
        conv(input, 16, false),
        LayerSpec::BatchNorm { channels: 16, spatial: s1.spatial() },
        conv(s1, 32, true),
        LayerSpec::BatchNorm { channels: 32, spatial: s2.spatial() },
        LayerSpec::Pool { kind: PoolKind::Max, input: s2, size: 2 },
        conv(s3, 64, true),
        LayerSpec::BatchNorm { channels: 64, spatial: s4.spatial() },
        LayerSpec::Pool { kind: PoolKind::Max, input: s4, size: 2 },
        LayerSpec::Dense {
            inputs: s5.len(),
            outputs: classes,
            binarized: false,
            binary_input: true,
        },
    ]
}

fn resnet_toy(input: Shape3, classes: usize) -> Vec<LayerSpec> {
    let s = Shape3::new(16, input.height, input.width);
    let mut layers = vec![conv(input, 16, false), LayerSpec::BatchNorm { channels: 16, spatial: s.spatial() }];
    for _ in 0..2 {
        // Real-valued shortcut around each binarized convolution.
        let block_input = layers.len();
        layers.push(conv(s, 16, true));
        layers.push(LayerSpec::BatchNorm { channels: 16, spatial: s.spatial() });
        layers.push(LayerSpec::ShortcutAdd { source: block_input });
    }
    layers.push(LayerSpec::Pool {
        kind: PoolKind::Avg,
        input: s,
        size: input.height.min(input.width),
    });
    let pooled = Shape3::new(16, input.height / input.height.min(input.width), input.width / input.height.min(input.width));
    layers.push(LayerSpec::Dense {
        inputs: pooled.len(),
        outputs: classes,
        binarized: false,
        binary_input: false,
    });
    layers
}
