//! The six classifier architectures, parameter accounting and summaries.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Model;
use crate::layers::{ActivationKind, Layer, NodeId, Padding, PoolKind};
use crate::tensor::Real;

pub const NUM_CLASSES: usize = 2;
/// Dropout after each custom-CNN convolutional block.
pub const CUSTOM_CNN_BLOCK_DROPOUT: f64 = 0.25;
pub const ALEXNET_DROPOUT: f64 = 0.5;
pub const ALEXNET_MIN_INPUT: usize = 63;
pub const DENSENET_BLOCKS: [usize; 4] = [6, 12, 24, 16];
pub const XCEPTION_HEAD_DROPOUT: [f64; 3] = [0.3, 0.3, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    DenseNet121,
    Vgg19,
    AlexNet,
    CustomCnn,
    ResAttention,
    Xception,
}

impl Architecture {
    /// Report order.
    pub const ALL: [Architecture; 6] = [
        Architecture::DenseNet121,
        Architecture::Vgg19,
        Architecture::AlexNet,
        Architecture::CustomCnn,
        Architecture::ResAttention,
        Architecture::Xception,
    ];

    /// Config identifier.
    pub fn id(self) -> &'static str {
        match self {
            Architecture::DenseNet121 => "densenet121",
            Architecture::Vgg19 => "vgg19",
            Architecture::AlexNet => "alexnet",
            Architecture::CustomCnn => "custom_cnn",
            Architecture::ResAttention => "res_attention",
            Architecture::Xception => "xception",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::DenseNet121 => "DenseNet-121",
            Architecture::Vgg19 => "VGG-19",
            Architecture::AlexNet => "AlexNet",
            Architecture::CustomCnn => "CNN [Custom]",
            Architecture::ResAttention => "Res_Attention_Net",
            Architecture::Xception => "XceptionNet",
        }
    }

    /// Whether the base is frozen unless configured otherwise.
    pub fn default_freeze_base(self) -> bool {
        matches!(self, Architecture::DenseNet121 | Architecture::Vgg19)
    }

    /// Output activation named in the architecture description.
    pub fn stated_output_activation(self) -> &'static str {
        match self {
            Architecture::Xception => "softmax",
            _ => "sigmoid",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Architecture::ALL.iter().map(|a| a.id()).collect();
                Error::config(format!(
                    "unknown architecture {s:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Width multiplier; 1 is full size.
    pub scale: f64,
    /// `None` uses the architecture default.
    pub freeze_base: Option<bool>,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            scale: 1.0,
            freeze_base: None,
            seed: 42,
        }
    }
}

pub fn build<T: Real>(
    arch: Architecture,
    input_shape: &[usize],
    opts: &BuildOptions,
) -> Result<Model<T>> {
    if !(opts.scale > 0.0 && opts.scale.is_finite()) {
        return Err(Error::config(format!(
            "scale {} must be positive",
            opts.scale
        )));
    }
    let &[h, w, c] = input_shape else {
        return Err(Error::config(format!(
            "input shape must be [H, W, C], got {input_shape:?}"
        )));
    };
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::config(format!(
            "input shape {input_shape:?} has a zero extent"
        )));
    }
    let freeze = opts.freeze_base.unwrap_or(arch.default_freeze_base());
    let mut b = Builder::new(arch, input_shape, opts)?;
    let head_start = match arch {
        Architecture::CustomCnn => custom_cnn(&mut b)?,
        Architecture::AlexNet => alexnet(&mut b)?,
        Architecture::Vgg19 => vgg19(&mut b)?,
        Architecture::DenseNet121 => densenet121(&mut b)?,
        Architecture::ResAttention => res_attention(&mut b)?,
        Architecture::Xception => xception(&mut b)?,
    };
    let mut model = b.model;
    model.scale = opts.scale;
    model.stated_output_activation = arch.stated_output_activation().to_string();
    if freeze {
        model.freeze_before(head_start);
        model.head_only_trainable = true;
    }
    Ok(model)
}

pub fn build_custom_cnn<T: Real>(input_shape: &[usize], scale: f64, seed: u64) -> Result<Model<T>> {
    build(
        Architecture::CustomCnn,
        input_shape,
        &BuildOptions {
            scale,
            freeze_base: None,
            seed,
        },
    )
}

pub fn build_alexnet<T: Real>(input_shape: &[usize], scale: f64, seed: u64) -> Result<Model<T>> {
    build(
        Architecture::AlexNet,
        input_shape,
        &BuildOptions {
            scale,
            freeze_base: None,
            seed,
        },
    )
}

pub fn build_vgg19<T: Real>(input_shape: &[usize], scale: f64, seed: u64) -> Result<Model<T>> {
    build(
        Architecture::Vgg19,
        input_shape,
        &BuildOptions {
            scale,
            freeze_base: None,
            seed,
        },
    )
}

pub fn build_densenet121<T: Real>(
    input_shape: &[usize],
    scale: f64,
    seed: u64,
) -> Result<Model<T>> {
    build(
        Architecture::DenseNet121,
        input_shape,
        &BuildOptions {
            scale,
            freeze_base: None,
            seed,
        },
    )
}

pub fn build_residual_attention_net<T: Real>(
    input_shape: &[usize],
    scale: f64,
    seed: u64,
) -> Result<Model<T>> {
    build(
        Architecture::ResAttention,
        input_shape,
        &BuildOptions {
            scale,
            freeze_base: None,
            seed,
        },
    )
}

pub fn build_xceptionnet<T: Real>(
    input_shape: &[usize],
    scale: f64,
    freeze_base: bool,
    seed: u64,
) -> Result<Model<T>> {
    build(
        Architecture::Xception,
        input_shape,
        &BuildOptions {
            scale,
            freeze_base: Some(freeze_base),
            seed,
        },
    )
}

struct Builder<T: Real> {
    model: Model<T>,
    rng: ChaCha8Rng,
    scale: f64,
}

impl<T: Real> Builder<T> {
    fn new(arch: Architecture, input_shape: &[usize], opts: &BuildOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let model = Model::new(arch.id(), input_shape, &mut rng)?;
        Ok(Builder {
            model,
            rng,
            scale: opts.scale,
        })
    }

    /// `round(n * scale)`, at least 1.
    fn width(&self, n: usize) -> usize {
        ((n as f64 * self.scale).round() as usize).max(1)
    }

    fn add(&mut self, name: impl Into<String>, layer: Layer, inputs: &[NodeId]) -> Result<NodeId> {
        self.model.add(name, layer, inputs, &mut self.rng)
    }

    fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.add(
            name,
            Layer::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            },
            &[x],
        )
    }

    fn sep(&mut self, name: &str, x: NodeId, filters: usize) -> Result<NodeId> {
        self.add(
            name,
            Layer::SeparableConv2d {
                filters,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            &[x],
        )
    }

    fn bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.add(name, Layer::batchnorm(), &[x])
    }

    fn act(&mut self, name: &str, x: NodeId, kind: ActivationKind) -> Result<NodeId> {
        self.add(name, Layer::Activation { kind }, &[x])
    }

    fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.act(name, x, ActivationKind::Relu)
    }

    fn pool(
        &mut self,
        name: &str,
        x: NodeId,
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.add(
            name,
            Layer::Pool2d {
                kind,
                window,
                stride,
                padding,
            },
            &[x],
        )
    }

    fn dense(&mut self, name: &str, x: NodeId, units: usize) -> Result<NodeId> {
        self.add(name, Layer::Dense { units }, &[x])
    }

    fn dropout(&mut self, name: &str, x: NodeId, rate: f64) -> Result<NodeId> {
        self.add(name, Layer::Dropout { rate }, &[x])
    }

    /// Final 2-way dense layer and softmax.
    fn output(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.dense("predictions", x, NUM_CLASSES)?;
        self.act("softmax", d, ActivationKind::Softmax)
    }

    fn next_id(&self) -> NodeId {
        self.model.nodes().len()
    }

    fn require_divisible(&self, by: usize) -> Result<()> {
        let s = &self.model.input_shape;
        if !s[0].is_multiple_of(by) || !s[1].is_multiple_of(by) {
            return Err(Error::config(format!(
                "{} needs input height and width divisible by {by}, got {}x{}",
                self.model.name, s[0], s[1]
            )));
        }
        Ok(())
    }
}

/// Three conv/batchnorm/relu/pool/dropout blocks, then dense 128 and the output.
fn custom_cnn<T: Real>(b: &mut Builder<T>) -> Result<NodeId> {
    b.require_divisible(8)?;
    let mut x = 0;
    for (i, filters) in [32, 64, 128].into_iter().enumerate() {
        let block = i + 1;
        let f = b.width(filters);
        x = b.conv(&format!("block{block}_conv"), x, f, 3, 1, Padding::Same)?;
        x = b.bn(&format!("block{block}_bn"), x)?;
        x = b.relu(&format!("block{block}_relu"), x)?;
        x = b.pool(
            &format!("block{block}_pool"),
            x,
            PoolKind::Max,
            2,
            2,
            Padding::Valid,
        )?;
        x = b.dropout(
            &format!("block{block}_dropout"),
            x,
            CUSTOM_CNN_BLOCK_DROPOUT,
        )?;
    }
    x = b.add("flatten", Layer::Flatten, &[x])?;
    x = b.dense("fc1", x, 128)?;
    x = b.relu("fc1_relu", x)?;
    b.output(x)?;
    Ok(0)
}

fn alexnet<T: Real>(b: &mut Builder<T>) -> Result<NodeId> {
    let s = &b.model.input_shape;
    if s[0] < ALEXNET_MIN_INPUT || s[1] < ALEXNET_MIN_INPUT {
        return Err(Error::config(format!(
            "alexnet needs at least {ALEXNET_MIN_INPUT}x{ALEXNET_MIN_INPUT} input, got {}x{}",
            s[0], s[1]
        )));
    }
    let mut x = b.conv("conv1", 0, b.width(96), 11, 4, Padding::Valid)?;
    x = b.relu("conv1_relu", x)?;
    x = b.pool("pool1", x, PoolKind::Max, 3, 2, Padding::Same)?;
    x = b.conv("conv2", x, b.width(256), 5, 1, Padding::Same)?;
    x = b.relu("conv2_relu", x)?;
    x = b.pool("pool2", x, PoolKind::Max, 3, 2, Padding::Same)?;
    for (name, filters) in [("conv3", 384), ("conv4", 384), ("conv5", 256)] {
        x = b.conv(name, x, b.width(filters), 3, 1, Padding::Same)?;
        x = b.relu(&format!("{name}_relu"), x)?;
    }
    x = b.pool("pool5", x, PoolKind::Max, 3, 2, Padding::Same)?;
    x = b.add("flatten", Layer::Flatten, &[x])?;
    for i in 1..=2 {
        x = b.dense(&format!("fc{i}"), x, b.width(4096))?;
        x = b.relu(&format!("fc{i}_relu"), x)?;
        x = b.dropout(&format!("fc{i}_dropout"), x, ALEXNET_DROPOUT)?;
    }
    b.output(x)?;
    Ok(0)
}

fn vgg19<T: Real>(b: &mut Builder<T>) -> Result<NodeId> {
    b.require_divisible(32)?;
    let mut x = 0;
    for (block, (convs, filters)) in [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)]
        .into_iter()
        .enumerate()
    {
        let block = block + 1;
        for i in 1..=convs {
            x = b.conv(
                &format!("block{block}_conv{i}"),
                x,
                b.width(filters),
                3,
                1,
                Padding::Same,
            )?;
            x = b.relu(&format!("block{block}_conv{i}_relu"), x)?;
        }
        x = b.pool(
            &format!("block{block}_pool"),
            x,
            PoolKind::Max,
            2,
            2,
            Padding::Valid,
        )?;
    }
    let head = b.next_id();
    x = b.add("flatten", Layer::Flatten, &[x])?;
    x = b.dense("fc1", x, 512)?;
    x = b.relu("fc1_relu", x)?;
    b.output(x)?;
    Ok(head)
}

fn densenet121<T: Real>(b: &mut Builder<T>) -> Result<NodeId> {
    b.require_divisible(32)?;
    let growth = b.width(32);
    let mut x = b.conv("stem_conv", 0, 2 * growth, 7, 2, Padding::Same)?;
    x = b.bn("stem_bn", x)?;
    x = b.relu("stem_relu", x)?;
    x = b.pool("stem_pool", x, PoolKind::Max, 3, 2, Padding::Same)?;
    let mut channels = 2 * growth;
    for (bi, depth) in DENSENET_BLOCKS.into_iter().enumerate() {
        let block = bi + 1;
        for layer in 1..=depth {
            let p = format!("dense{block}_layer{layer}");
            let mut y = b.bn(&format!("{p}_bn1"), x)?;
            y = b.relu(&format!("{p}_relu1"), y)?;
            y = b.conv(&format!("{p}_conv1"), y, 4 * growth, 1, 1, Padding::Same)?;
            y = b.bn(&format!("{p}_bn2"), y)?;
            y = b.relu(&format!("{p}_relu2"), y)?;
            y = b.conv(&format!("{p}_conv2"), y, growth, 3, 1, Padding::Same)?;
            x = b.add(format!("{p}_concat"), Layer::Concat, &[x, y])?;
            channels += growth;
        }
        if block < DENSENET_BLOCKS.len() {
            let p = format!("transition{block}");
            channels /= 2;
            x = b.bn(&format!("{p}_bn"), x)?;
            x = b.relu(&format!("{p}_relu"), x)?;
            x = b.conv(&format!("{p}_conv"), x, channels, 1, 1, Padding::Same)?;
            x = b.pool(&format!("{p}_pool"), x, PoolKind::Avg, 2, 2, Padding::Valid)?;
        }
    }
    x = b.bn("final_bn", x)?;
    x = b.relu("final_relu", x)?;
    let head = b.next_id();
    x = b.add(
        "gap",
        Layer::GlobalPool {
            kind: PoolKind::Avg,
        },
        &[x],
    )?;
    x = b.dense("fc1", x, 512)?;
    x = b.relu("fc1_relu", x)?;
    x = b.dropout("fc1_dropout", x, 0.5)?;
    b.output(x)?;
    Ok(head)
}

/// Trunk of three conv/batchnorm/relu layers; a pooled dense gate rescales the
/// trunk channels and the result is added back to the trunk.
fn res_attention<T: Real>(b: &mut Builder<T>) -> Result<NodeId> {
    let filters = b.width(64);
    let mut x = 0;
    for i in 1..=3 {
        x = b.conv(&format!("trunk_conv{i}"), x, filters, 3, 1, Padding::Same)?;
        x = b.bn(&format!("trunk_bn{i}"), x)?;
        x = b.relu(&format!("trunk_relu{i}"), x)?;
    }
    let trunk = x;
    let mut g = b.add(
        "attention_gap",
        Layer::GlobalPool {
            kind: PoolKind::Avg,
        },
        &[trunk],
    )?;
    g = b.dense("attention_fc1", g, b.width(32))?;
    g = b.relu("attention_fc1_relu", g)?;
    g = b.dense("attention_fc2", g, filters)?;
    let gate = b.act("attention_gate", g, ActivationKind::Sigmoid)?;
    let scaled = b.add("attention_scale", Layer::ChannelScale, &[trunk, gate])?;
    let out = b.add("attention_residual", Layer::ResidualAdd, &[trunk, scaled])?;
    let pooled = b.add(
        "gap",
        Layer::GlobalPool {
            kind: PoolKind::Avg,
        },
        &[out],
    )?;
    b.output(pooled)?;
    Ok(0)
}

/// Number of middle-flow blocks: `round(8 * scale)`, at least 1.
pub fn xception_middle_repeats(scale: f64) -> usize {
    ((8.0 * scale).round() as usize).max(1)
}

fn xception<T: Real>(b: &mut Builder<T>) -> Result<NodeId> {
    b.require_divisible(32)?;
    let mut x = b.conv("entry_conv1", 0, b.width(32), 3, 2, Padding::Same)?;
    x = b.bn("entry_conv1_bn", x)?;
    x = b.relu("entry_conv1_relu", x)?;
    x = b.conv("entry_conv2", x, b.width(64), 3, 1, Padding::Same)?;
    x = b.bn("entry_conv2_bn", x)?;
    x = b.relu("entry_conv2_relu", x)?;

    // Downsampling blocks: separable pair + pool, projected 1x1 stride-2 skip.
    let down_block = |b: &mut Builder<T>,
                      x: NodeId,
                      p: &str,
                      f1: usize,
                      f2: usize,
                      pre_relu: bool|
     -> Result<NodeId> {
        let skip = b.conv(&format!("{p}_skip"), x, f2, 1, 2, Padding::Same)?;
        let skip = b.bn(&format!("{p}_skip_bn"), skip)?;
        let mut y = x;
        if pre_relu {
            y = b.relu(&format!("{p}_relu1"), y)?;
        }
        y = b.sep(&format!("{p}_sep1"), y, f1)?;
        y = b.bn(&format!("{p}_sep1_bn"), y)?;
        y = b.relu(&format!("{p}_relu2"), y)?;
        y = b.sep(&format!("{p}_sep2"), y, f2)?;
        y = b.bn(&format!("{p}_sep2_bn"), y)?;
        y = b.pool(&format!("{p}_pool"), y, PoolKind::Max, 3, 2, Padding::Same)?;
        b.add(format!("{p}_add"), Layer::ResidualAdd, &[y, skip])
    };
    let (f128, f256, f728) = (b.width(128), b.width(256), b.width(728));
    x = down_block(b, x, "entry_block1", f128, f128, false)?;
    x = down_block(b, x, "entry_block2", f256, f256, true)?;
    x = down_block(b, x, "entry_block3", f728, f728, true)?;

    for m in 1..=xception_middle_repeats(b.scale) {
        let p = format!("middle_block{m}");
        let mut y = x;
        for i in 1..=3 {
            y = b.relu(&format!("{p}_relu{i}"), y)?;
            y = b.sep(&format!("{p}_sep{i}"), y, f728)?;
            y = b.bn(&format!("{p}_sep{i}_bn"), y)?;
        }
        x = b.add(format!("{p}_add"), Layer::ResidualAdd, &[y, x])?;
    }

    x = down_block(b, x, "exit_block1", f728, b.width(1024), true)?;
    x = b.sep("exit_sep1", x, b.width(1536))?;
    x = b.bn("exit_sep1_bn", x)?;
    x = b.relu("exit_sep1_relu", x)?;
    x = b.sep("exit_sep2", x, b.width(2048))?;
    x = b.bn("exit_sep2_bn", x)?;
    x = b.relu("exit_sep2_relu", x)?;

    let head = b.next_id();
    x = b.add(
        "gmp",
        Layer::GlobalPool {
            kind: PoolKind::Max,
        },
        &[x],
    )?;
    x = b.add("flatten", Layer::Flatten, &[x])?;
    let [d1, d2, d3] = XCEPTION_HEAD_DROPOUT;
    x = b.dropout("head_dropout1", x, d1)?;
    x = b.dense("head_fc1", x, 128)?;
    x = b.relu("head_fc1_relu", x)?;
    x = b.bn("head_bn", x)?;
    x = b.dropout("head_dropout2", x, d2)?;
    x = b.dense("head_fc2", x, 64)?;
    x = b.relu("head_fc2_relu", x)?;
    x = b.dropout("head_dropout3", x, d3)?;
    b.output(x)?;
    Ok(head)
}

/// Exact parameter counts. Frozen weights and batchnorm moving statistics are
/// non-trainable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    /// `(node name, trainable, non_trainable)` in graph order.
    pub per_node: Vec<(String, usize, usize)>,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }

    /// Total (trainable + non-trainable) over nodes whose name starts with `prefix`.
    pub fn prefix_total(&self, prefix: &str) -> usize {
        self.per_node
            .iter()
            .filter(|(n, _, _)| n.starts_with(prefix))
            .map(|(_, t, nt)| t + nt)
            .sum()
    }

    pub fn node(&self, name: &str) -> Option<(usize, usize)> {
        self.per_node
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|&(_, t, nt)| (t, nt))
    }
}

pub fn count_params<T: Real>(model: &Model<T>) -> ParamCount {
    let per_node: Vec<(String, usize, usize)> = model
        .nodes()
        .iter()
        .map(|n| {
            let params = n.param_count();
            let state = n.state_count();
            if n.trainable {
                (n.name.clone(), params, state)
            } else {
                (n.name.clone(), 0, params + state)
            }
        })
        .collect();
    ParamCount {
        trainable: per_node.iter().map(|p| p.1).sum(),
        non_trainable: per_node.iter().map(|p| p.2).sum(),
        per_node,
    }
}

/// One row per node: name, kind, output shape, trainable flag, parameters.
pub fn model_summary<T: Real>(model: &Model<T>) -> String {
    let counts = count_params(model);
    let rows: Vec<[String; 5]> = model
        .nodes()
        .iter()
        .zip(&counts.per_node)
        .map(|(n, (_, t, nt))| {
            [
                n.name.clone(),
                n.layer.kind_name().to_string(),
                format!("{:?}", n.output_shape),
                if n.trainable { "trainable" } else { "frozen" }.to_string(),
                (t + nt).to_string(),
            ]
        })
        .collect();
    let header = ["node", "kind", "output", "status", "params"];
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "model {} (scale {}, input {:?}, stated output activation {})",
        model.name, model.scale, model.input_shape, model.stated_output_activation
    );
    let line = |s: &mut String, cells: [&str; 5]| {
        let _ = writeln!(
            s,
            "{:<w0$}  {:<w1$}  {:<w2$}  {:<w3$}  {:>w4$}",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            cells[4],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3],
            w4 = widths[4]
        );
    };
    line(&mut s, header);
    for r in &rows {
        line(&mut s, [&r[0], &r[1], &r[2], &r[3], &r[4]]);
    }
    let _ = writeln!(
        s,
        "total {}  trainable {}  non-trainable {}",
        counts.total(),
        counts.trainable,
        counts.non_trainable
    );
    s
}
