//! Residual block genres and named architectures.
//!
//! Block builders append nodes to a [`GraphBuilder`] and return the block's
//! output node. [`assemble_network`] composes them into a full network from
//! an [`ArchitectureSpec`].

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, Layer, NodeId, Role};
use crate::ops::PoolParams;
use crate::tensor::{Element, Tensor};

/// Spatial kernel/stride/padding triple helpers.
const K1: [usize; 3] = [1, 1, 1];
const K3: [usize; 3] = [3, 3, 3];
const P0: [usize; 3] = [0, 0, 0];
const P1: [usize; 3] = [1, 1, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Genre {
    ResnetBasic,
    ResnetBottleneck,
    Preact,
    Wide,
    Resnext,
    Densenet,
}

impl Genre {
    pub fn as_str(self) -> &'static str {
        match self {
            Genre::ResnetBasic => "resnet-basic",
            Genre::ResnetBottleneck => "resnet-bottleneck",
            Genre::Preact => "preact",
            Genre::Wide => "wide",
            Genre::Resnext => "resnext",
            Genre::Densenet => "densenet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown genre {s:?}")))
    }

    pub const ALL: [Genre; 6] = [
        Genre::ResnetBasic,
        Genre::ResnetBottleneck,
        Genre::Preact,
        Genre::Wide,
        Genre::Resnext,
        Genre::Densenet,
    ];
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Declarative description of a network.
///
/// `base_width` is the stem width and the stage-1 block width for every
/// genre except `resnext`, where it is the stage-1 grouped-convolution width
/// and the stem gets half of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    pub genre: Genre,
    pub stage_depths: Vec<usize>,
    pub base_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widen_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_rate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression: Option<f64>,
    pub num_classes: usize,
    pub clip_shape: [usize; 4],
}

/// Names accepted by [`ArchitectureSpec::preset`].
pub const PRESET_NAMES: [&str; 11] = [
    "resnet-18",
    "resnet-34",
    "resnet-50",
    "resnet-101",
    "resnet-152",
    "preact-resnet-200",
    "wide-resnet-50",
    "resnext-101",
    "densenet-121",
    "densenet-201",
    "miniature",
];

/// The ten full-size architectures (everything but `miniature`).
pub const NAMED_ARCHITECTURES: [&str; 10] = [
    "resnet-18",
    "resnet-34",
    "resnet-50",
    "resnet-101",
    "resnet-152",
    "preact-resnet-200",
    "wide-resnet-50",
    "resnext-101",
    "densenet-121",
    "densenet-201",
];

pub const DEFAULT_CLIP: [usize; 4] = [3, 16, 112, 112];
pub const MINIATURE_CLIP: [usize; 4] = [3, 8, 32, 32];

impl ArchitectureSpec {
    fn plain(name: &str, genre: Genre, depths: [usize; 4], num_classes: usize) -> Self {
        ArchitectureSpec {
            name: name.into(),
            genre,
            stage_depths: depths.to_vec(),
            base_width: 64,
            widen_factor: None,
            cardinality: None,
            growth_rate: None,
            compression: None,
            num_classes,
            clip_shape: DEFAULT_CLIP,
        }
    }

    /// A named architecture with the given number of classes.
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        use Genre::*;
        let spec = match name {
            "resnet-18" => Self::plain(name, ResnetBasic, [2, 2, 2, 2], num_classes),
            "resnet-34" => Self::plain(name, ResnetBasic, [3, 4, 6, 3], num_classes),
            "resnet-50" => Self::plain(name, ResnetBottleneck, [3, 4, 6, 3], num_classes),
            "resnet-101" => Self::plain(name, ResnetBottleneck, [3, 4, 23, 3], num_classes),
            "resnet-152" => Self::plain(name, ResnetBottleneck, [3, 8, 36, 3], num_classes),
            "preact-resnet-200" => Self::plain(name, Preact, [3, 24, 36, 3], num_classes),
            "wide-resnet-50" => Self { widen_factor: Some(2.0), ..Self::plain(name, Wide, [3, 4, 6, 3], num_classes) },
            "resnext-101" => Self {
                base_width: 128,
                cardinality: Some(32),
                ..Self::plain(name, Resnext, [3, 4, 23, 3], num_classes)
            },
            "densenet-121" => Self {
                growth_rate: Some(32),
                compression: Some(0.5),
                ..Self::plain(name, Densenet, [6, 12, 24, 16], num_classes)
            },
            "densenet-201" => Self {
                growth_rate: Some(32),
                compression: Some(0.5),
                ..Self::plain(name, Densenet, [6, 12, 48, 32], num_classes)
            },
            "miniature" => Self {
                base_width: 8,
                clip_shape: MINIATURE_CLIP,
                ..Self::plain(name, ResnetBasic, [1, 1, 1, 1], num_classes)
            },
            other => {
                return Err(Error::config(format!(
                    "unknown architecture {other:?} (known: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("architecture {:?}: {msg}", self.name)));
        if self.stage_depths.len() != 4 || self.stage_depths.contains(&0) {
            return bad(format!("stage_depths must be 4 positive integers, got {:?}", self.stage_depths));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.clip_shape.contains(&0) {
            return bad(format!("clip_shape extents must be positive, got {:?}", self.clip_shape));
        }
        let g = self.genre;
        let fields: [(&str, bool, Genre); 4] = [
            ("widen_factor", self.widen_factor.is_some(), Genre::Wide),
            ("cardinality", self.cardinality.is_some(), Genre::Resnext),
            ("growth_rate", self.growth_rate.is_some(), Genre::Densenet),
            ("compression", self.compression.is_some(), Genre::Densenet),
        ];
        for (field, present, owner) in fields {
            if present && g != owner {
                return bad(format!("field {field} is only valid for genre {owner}, not {g}"));
            }
            if !present && g == owner {
                return bad(format!("genre {g} requires field {field}"));
            }
        }
        if let Some(k) = self.widen_factor {
            if !(k.is_finite() && k > 0.0) || (self.base_width as f64 * k).round() < 1.0 {
                return bad(format!("widen_factor must be positive, got {k}"));
            }
        }
        if let Some(c) = self.cardinality {
            if c == 0 || self.base_width % c != 0 {
                return bad(format!("cardinality {c} must be positive and divide base_width {}", self.base_width));
            }
            if self.base_width < 2 || self.base_width % 2 != 0 {
                return bad(format!("resnext base_width must be even, got {}", self.base_width));
            }
        }
        if self.growth_rate == Some(0) {
            return bad("growth_rate must be positive".into());
        }
        if let Some(c) = self.compression {
            if !(c > 0.0 && c <= 1.0) {
                return bad(format!("compression must lie in (0, 1], got {c}"));
            }
        }
        Ok(())
    }

    /// Stem output channels.
    pub fn stem_width(&self) -> usize {
        match self.genre {
            Genre::Resnext => self.base_width / 2,
            _ => self.base_width,
        }
    }
}

fn check_stride(stride: usize) -> Result<[usize; 3]> {
    match stride {
        1 | 2 => Ok([stride; 3]),
        s => Err(Error::config(format!("block stride must be 1 or 2, got {s}"))),
    }
}

/// Identity when the shapes already agree, otherwise 1×1×1 conv + BN.
fn shortcut<T: Element>(g: &mut GraphBuilder<T>, prefix: &str, input: NodeId, out_ch: usize, stride: [usize; 3]) -> Result<NodeId> {
    if g.channels(input) == out_ch && stride == [1; 3] {
        return Ok(input);
    }
    let c = g.conv(format!("{prefix}.downsample.conv"), input, out_ch, K1, stride, P0, 1, Role::Shortcut)?;
    Ok(g.batch_norm(format!("{prefix}.downsample.bn"), c, Role::Shortcut))
}

/// conv3 → BN → ReLU → conv3 → BN, added to the shortcut, then ReLU.
pub fn build_basic_block<T: Element>(
    g: &mut GraphBuilder<T>,
    prefix: &str,
    input: NodeId,
    out_ch: usize,
    stride: usize,
) -> Result<NodeId> {
    let s = check_stride(stride)?;
    let b = Role::Branch;
    let x = g.conv(format!("{prefix}.conv1"), input, out_ch, K3, s, P1, 1, b)?;
    let x = g.batch_norm(format!("{prefix}.bn1"), x, b);
    let x = g.relu(format!("{prefix}.relu1"), x, b);
    let x = g.conv(format!("{prefix}.conv2"), x, out_ch, K3, [1; 3], P1, 1, b)?;
    let x = g.batch_norm(format!("{prefix}.bn2"), x, b);
    let sc = shortcut(g, prefix, input, out_ch, s)?;
    let sum = g.add(format!("{prefix}.add"), x, sc, Role::Merge)?;
    Ok(g.relu(format!("{prefix}.relu"), sum, Role::Merge))
}

fn check_bottleneck(mid_ch: usize, out_ch: usize, groups: usize) -> Result<()> {
    if mid_ch == 0 || out_ch == 0 || groups == 0 || mid_ch % groups != 0 {
        return Err(Error::config(format!(
            "invalid bottleneck channel ratio: mid {mid_ch}, out {out_ch}, groups {groups}"
        )));
    }
    Ok(())
}

/// conv1 → BN → ReLU → conv3 (stride, groups) → BN → ReLU → conv1 → BN,
/// added to the shortcut, then ReLU.
pub fn build_bottleneck_block<T: Element>(
    g: &mut GraphBuilder<T>,
    prefix: &str,
    input: NodeId,
    mid_ch: usize,
    out_ch: usize,
    stride: usize,
    groups: usize,
) -> Result<NodeId> {
    let s = check_stride(stride)?;
    check_bottleneck(mid_ch, out_ch, groups)?;
    let b = Role::Branch;
    let x = g.conv(format!("{prefix}.conv1"), input, mid_ch, K1, [1; 3], P0, 1, b)?;
    let x = g.batch_norm(format!("{prefix}.bn1"), x, b);
    let x = g.relu(format!("{prefix}.relu1"), x, b);
    let x = g.conv(format!("{prefix}.conv2"), x, mid_ch, K3, s, P1, groups, b)?;
    let x = g.batch_norm(format!("{prefix}.bn2"), x, b);
    let x = g.relu(format!("{prefix}.relu2"), x, b);
    let x = g.conv(format!("{prefix}.conv3"), x, out_ch, K1, [1; 3], P0, 1, b)?;
    let x = g.batch_norm(format!("{prefix}.bn3"), x, b);
    let sc = shortcut(g, prefix, input, out_ch, s)?;
    let sum = g.add(format!("{prefix}.add"), x, sc, Role::Merge)?;
    Ok(g.relu(format!("{prefix}.relu"), sum, Role::Merge))
}

/// (BN → ReLU → conv) three times, added to the shortcut. No trailing ReLU.
pub fn build_preact_block<T: Element>(
    g: &mut GraphBuilder<T>,
    prefix: &str,
    input: NodeId,
    mid_ch: usize,
    out_ch: usize,
    stride: usize,
) -> Result<NodeId> {
    let s = check_stride(stride)?;
    check_bottleneck(mid_ch, out_ch, 1)?;
    let b = Role::Branch;
    let x = g.batch_norm(format!("{prefix}.bn1"), input, b);
    let x = g.relu(format!("{prefix}.relu1"), x, b);
    let x = g.conv(format!("{prefix}.conv1"), x, mid_ch, K1, [1; 3], P0, 1, b)?;
    let x = g.batch_norm(format!("{prefix}.bn2"), x, b);
    let x = g.relu(format!("{prefix}.relu2"), x, b);
    let x = g.conv(format!("{prefix}.conv2"), x, mid_ch, K3, s, P1, 1, b)?;
    let x = g.batch_norm(format!("{prefix}.bn3"), x, b);
    let x = g.relu(format!("{prefix}.relu3"), x, b);
    let x = g.conv(format!("{prefix}.conv3"), x, out_ch, K1, [1; 3], P0, 1, b)?;
    let sc = shortcut(g, prefix, input, out_ch, s)?;
    g.add(format!("{prefix}.add"), x, sc, Role::Merge)
}

/// `num_layers` dense layers, each concatenating `growth_rate` new channels
/// onto its input.
pub fn build_dense_block<T: Element>(
    g: &mut GraphBuilder<T>,
    prefix: &str,
    input: NodeId,
    num_layers: usize,
    growth_rate: usize,
) -> Result<NodeId> {
    if growth_rate == 0 {
        return Err(Error::config("dense block growth rate must be positive"));
    }
    if num_layers == 0 {
        return Err(Error::config("dense block needs at least one layer"));
    }
    let b = Role::Branch;
    let mut x = input;
    for i in 1..=num_layers {
        let p = format!("{prefix}.layer{i}");
        let y = g.batch_norm(format!("{p}.bn1"), x, b);
        let y = g.relu(format!("{p}.relu1"), y, b);
        let y = g.conv(format!("{p}.conv1"), y, 4 * growth_rate, K1, [1; 3], P0, 1, b)?;
        let y = g.batch_norm(format!("{p}.bn2"), y, b);
        let y = g.relu(format!("{p}.relu2"), y, b);
        let y = g.conv(format!("{p}.conv2"), y, growth_rate, K3, [1; 3], P1, 1, b)?;
        x = g.concat(format!("{p}.concat"), &[x, y], Role::Merge)?;
    }
    Ok(x)
}

/// BN → ReLU → conv1 to `floor(compression · in)` channels → avg-pool 2/2.
pub fn build_transition<T: Element>(g: &mut GraphBuilder<T>, prefix: &str, input: NodeId, compression: f64) -> Result<NodeId> {
    if !(compression > 0.0 && compression <= 1.0) {
        return Err(Error::config(format!("compression must lie in (0, 1], got {compression}")));
    }
    let out_ch = (compression * g.channels(input) as f64).floor() as usize;
    if out_ch == 0 {
        return Err(Error::config(format!("transition would leave no channels from {}", g.channels(input))));
    }
    let r = Role::Transition;
    let x = g.batch_norm(format!("{prefix}.bn"), input, r);
    let x = g.relu(format!("{prefix}.relu"), x, r);
    let x = g.conv(format!("{prefix}.conv"), x, out_ch, K1, [1; 3], P0, 1, r)?;
    g.avg_pool(format!("{prefix}.pool"), x, [2; 3], [2; 3], r)
}

/// A network assembled from an [`ArchitectureSpec`].
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    spec: ArchitectureSpec,
    seed: u64,
    graph: Graph<T>,
}

impl<T: Element> Network<T> {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    /// Replaces the zero-initialised classifier with small normal weights.
    pub fn randomize_head(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..self.graph.params().len() {
            let node = self.graph.params()[i].node;
            if matches!(self.graph.node(node).layer, Layer::Linear(_)) {
                let shape = self.graph.param(i).shape().to_vec();
                *self.graph.param_mut(i) = Tensor::randn(&shape, std, &mut rng);
            }
        }
    }

    /// Channels entering the global pool.
    pub fn feature_channels(&self) -> usize {
        let head = self.graph.nodes().iter().find(|n| matches!(n.layer, Layer::GlobalAvgPool)).expect("network has a head");
        head.shape[1]
    }
}

impl<T> Deref for Network<T> {
    type Target = Graph<T>;

    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T> DerefMut for Network<T> {
    fn deref_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }
}

/// Stem (conv 7×7×7 stride (1,2,2) → BN → ReLU → max-pool 3/2/1).
pub fn build_stem<T: Element>(g: &mut GraphBuilder<T>, input: NodeId, width: usize) -> Result<NodeId> {
    let r = Role::Stem;
    let x = g.conv("stem.conv", input, width, [7; 3], [1, 2, 2], [3; 3], 1, r)?;
    let x = g.batch_norm("stem.bn", x, r);
    let x = g.relu("stem.relu", x, r);
    g.max_pool("stem.pool", x, PoolParams::cubic(3, 2, 1), r)
}

/// Builds the network described by `spec`, He-initialising convolutions
/// from `seed`.
pub fn assemble_network<T: Element>(spec: &ArchitectureSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let (mut g, input) = GraphBuilder::<T>::new(spec.clip_shape, seed);
    let mut x = build_stem(&mut g, input, spec.stem_width())?;
    let w = spec.base_width;

    if spec.genre == Genre::Densenet {
        let growth = spec.growth_rate.expect("validated");
        let compression = spec.compression.expect("validated");
        for (i, &layers) in spec.stage_depths.iter().enumerate() {
            x = build_dense_block(&mut g, &format!("dense{}", i + 1), x, layers, growth)?;
            if i + 1 < spec.stage_depths.len() {
                x = build_transition(&mut g, &format!("transition{}", i + 1), x, compression)?;
            }
        }
    } else {
        for (s, &depth) in spec.stage_depths.iter().enumerate() {
            let planes = w << s;
            for b in 0..depth {
                let prefix = format!("layer{}.{b}", s + 1);
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                x = match spec.genre {
                    Genre::ResnetBasic => build_basic_block(&mut g, &prefix, x, planes, stride)?,
                    Genre::ResnetBottleneck => build_bottleneck_block(&mut g, &prefix, x, planes, 4 * planes, stride, 1)?,
                    Genre::Preact => build_preact_block(&mut g, &prefix, x, planes, 4 * planes, stride)?,
                    Genre::Wide => {
                        let mid = (planes as f64 * spec.widen_factor.expect("validated")).round() as usize;
                        build_bottleneck_block(&mut g, &prefix, x, mid, 4 * planes, stride, 1)?
                    }
                    Genre::Resnext => {
                        let groups = spec.cardinality.expect("validated");
                        build_bottleneck_block(&mut g, &prefix, x, planes, 2 * planes, stride, groups)?
                    }
                    Genre::Densenet => unreachable!(),
                };
            }
        }
    }

    if matches!(spec.genre, Genre::Preact | Genre::Densenet) {
        x = g.batch_norm("final.bn", x, Role::Head);
        x = g.relu("final.relu", x, Role::Head);
    }
    let x = g.global_avg_pool("head.pool", x, Role::Head);
    let logits = g.linear("head.fc", x, spec.num_classes, Role::Head)?;
    Ok(Network { spec: spec.clone(), seed, graph: g.finish(logits) })
}
