//! Declarative network specifications and the generic engine that runs them.
//!
//! A network is an ordered list of [`LayerSpec`]s (the trunk) plus optional
//! side heads that branch off a tagged trunk activation. Tagged activations
//! double as feature taps and as skip-connection sources for `concat`.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, BN_MOMENTUM};
use crate::rng;
use crate::tensor::{Scalar, Shape, Tensor};

pub const TEACHER_WIDTHS: [usize; 4] = [32, 64, 128, 256];
pub const STUDENT_WIDTHS: [usize; 4] = [2, 4, 8, 16];
pub const MU_MID_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const TAP_TAGS: [&str; 4] = ["b1", "b2", "b3", "b4"];
/// Spatial size of the pooled grid feeding the classifier head.
pub const CLASSIFIER_POOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    AdaptivePool,
    FullyConnected,
    Softmax,
    Sigmoid,
    BatchNorm,
    UpsampleNearest,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Conv kernel size, 0 when not applicable.
    pub kernel: usize,
    pub out_channels: usize,
    pub padding: usize,
    /// Window for max pooling / upsampling; output grid size for adaptive pooling.
    pub pool_size: usize,
    pub tag: Option<String>,
    /// Tag of the skip activation appended by `concat`.
    pub source: Option<String>,
}

impl LayerSpec {
    fn bare(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            kernel: 0,
            out_channels: 0,
            padding: 0,
            pool_size: 0,
            tag: None,
            source: None,
        }
    }

    pub fn conv(kernel: usize, out_channels: usize, padding: usize) -> Self {
        LayerSpec {
            kernel,
            out_channels,
            padding,
            ..Self::bare(LayerKind::Conv)
        }
    }

    pub fn relu() -> Self {
        Self::bare(LayerKind::Relu)
    }

    pub fn maxpool() -> Self {
        LayerSpec {
            pool_size: 2,
            ..Self::bare(LayerKind::Maxpool)
        }
    }

    pub fn adaptive_pool(size: usize) -> Self {
        LayerSpec {
            pool_size: size,
            ..Self::bare(LayerKind::AdaptivePool)
        }
    }

    pub fn fully_connected(out: usize) -> Self {
        LayerSpec {
            out_channels: out,
            ..Self::bare(LayerKind::FullyConnected)
        }
    }

    pub fn softmax() -> Self {
        Self::bare(LayerKind::Softmax)
    }

    pub fn sigmoid() -> Self {
        Self::bare(LayerKind::Sigmoid)
    }

    pub fn batch_norm() -> Self {
        Self::bare(LayerKind::BatchNorm)
    }

    pub fn upsample() -> Self {
        LayerSpec {
            pool_size: 2,
            ..Self::bare(LayerKind::UpsampleNearest)
        }
    }

    pub fn concat(source: &str) -> Self {
        LayerSpec {
            source: Some(source.to_string()),
            ..Self::bare(LayerKind::Concat)
        }
    }

    pub fn tagged(mut self, tag: &str) -> Self {
        self.tag = Some(tag.to_string());
        self
    }
}

/// A side branch computed from a tagged trunk activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub name: String,
    pub source: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Teacher,
    Student,
    Explainer,
    Mu,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Teacher => "teacher",
            Family::Student => "student",
            Family::Explainer => "explainer",
            Family::Mu => "mu",
        };
        f.write_str(s)
    }
}

/// Channel widths of the explainer encoder (e0..e5) and decoder (d4..d0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExplainerWidths {
    pub encoder: [usize; 6],
    pub decoder: [usize; 5],
}

impl Default for ExplainerWidths {
    fn default() -> Self {
        ExplainerWidths {
            encoder: [32, 64, 128, 256, 512, 512],
            decoder: [512, 256, 128, 128, 64],
        }
    }
}

impl ExplainerWidths {
    /// Every width divided by `divisor` (at least one channel each).
    pub fn scaled(divisor: usize) -> Self {
        let d = divisor.max(1);
        let full = Self::default();
        ExplainerWidths {
            encoder: full.encoder.map(|w| (w / d).max(1)),
            decoder: full.decoder.map(|w| (w / d).max(1)),
        }
    }

    fn flat(&self) -> Vec<usize> {
        self.encoder.iter().chain(&self.decoder).copied().collect()
    }
}

/// Human-readable identity of an architecture; embedded in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub family: Family,
    /// `[channels, height, width]`; zero spatial dims accept any size.
    pub input_shape: [usize; 3],
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl ArchConfig {
    pub fn to_block(&self) -> String {
        toml::to_string(self).expect("arch config serializes")
    }

    pub fn from_block(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("arch config: {e}")))
    }

    /// Line diff of two config blocks (`-` expected, `+` found).
    pub fn diff(&self, other: &ArchConfig) -> String {
        let a = self.to_block();
        let b = other.to_block();
        let mut out = String::new();
        for (la, lb) in a.lines().zip(b.lines()) {
            if la != lb {
                out.push_str(&format!("- {la}\n+ {lb}\n"));
            }
        }
        out
    }

    pub fn build_spec(&self) -> Result<ArchitectureSpec> {
        let [c, h, w] = self.input_shape;
        match self.family {
            Family::Teacher | Family::Student => {
                let widths: [usize; 4] = self.widths.as_slice().try_into().map_err(|_| {
                    Error::InvalidArgument(format!("{}: expected 4 widths", self.name))
                })?;
                let mut spec = classifier_spec(self.family, (c, h, w), self.num_classes, widths)?;
                spec.name = self.name.clone();
                Ok(spec)
            }
            Family::Explainer => {
                if self.widths.len() != 11 {
                    return Err(Error::InvalidArgument(format!(
                        "{}: expected 11 explainer widths",
                        self.name
                    )));
                }
                let mut widths = ExplainerWidths::default();
                widths.encoder.copy_from_slice(&self.widths[..6]);
                widths.decoder.copy_from_slice(&self.widths[6..]);
                explainer_spec((c, h, w), widths)
            }
            Family::Mu => {
                let [cin, mid, out]: [usize; 3] = self.widths.as_slice().try_into().map_err(|_| {
                    Error::InvalidArgument(format!("{}: expected 3 mu widths", self.name))
                })?;
                let mut spec = mu_spec(cin, mid, out);
                spec.name = self.name.clone();
                Ok(spec)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub family: Family,
    /// `(C, H, W)`; `H = W = 0` means any spatial size.
    pub input_shape: (usize, usize, usize),
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub tap_tags: Vec<String>,
    pub heads: Vec<HeadSpec>,
}

type Dims = (usize, usize, usize);

impl ArchitectureSpec {
    pub fn config(&self) -> ArchConfig {
        let (c, h, w) = self.input_shape;
        ArchConfig {
            name: self.name.clone(),
            family: self.family,
            input_shape: [c, h, w],
            widths: self.widths.clone(),
            num_classes: self.num_classes,
        }
    }

    fn tag_index(&self) -> HashMap<&str, usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.tag.as_deref().map(|t| (t, i)))
            .collect()
    }

    /// Per-layer output dims for an input of the given spatial size, checking
    /// every structural invariant on the way.
    pub fn infer_dims(&self, h: usize, w: usize) -> Result<(Vec<Dims>, Vec<Vec<Dims>>)> {
        let mut seen = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(t) = &l.tag {
                if seen.insert(t.as_str(), i).is_some() {
                    return Err(self.invalid(format!("duplicate tag `{t}`")));
                }
            }
        }
        for t in &self.tap_tags {
            if !seen.contains_key(t.as_str()) {
                return Err(self.invalid(format!("tap `{t}` is not a layer tag")));
            }
        }
        let trunk = self.walk(&self.layers, (self.input_shape.0, h, w), &[], &seen)?;
        let mut heads = Vec::new();
        for head in &self.heads {
            let src = *seen
                .get(head.source.as_str())
                .ok_or_else(|| self.invalid(format!("head source `{}` is not a tag", head.source)))?;
            heads.push(self.walk(&head.layers, trunk[src], &trunk, &seen)?);
        }
        Ok((trunk, heads))
    }

    fn invalid(&self, msg: String) -> Error {
        Error::InvalidArgument(format!("{}: {msg}", self.name))
    }

    fn walk(
        &self,
        layers: &[LayerSpec],
        input: Dims,
        earlier: &[Dims],
        tags: &HashMap<&str, usize>,
    ) -> Result<Vec<Dims>> {
        let mut dims = Vec::with_capacity(layers.len());
        let mut cur = input;
        for (i, l) in layers.iter().enumerate() {
            let (c, h, w) = cur;
            cur = match l.kind {
                LayerKind::Conv => {
                    if l.kernel != 1 && l.kernel != 3 {
                        return Err(self.invalid(format!("layer {i}: conv kernel must be 1 or 3")));
                    }
                    if h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel {
                        return Err(self.invalid(format!("layer {i}: input smaller than kernel")));
                    }
                    (
                        l.out_channels,
                        ops::conv_out_dim(h, l.kernel, l.padding),
                        ops::conv_out_dim(w, l.kernel, l.padding),
                    )
                }
                LayerKind::Maxpool | LayerKind::UpsampleNearest if l.pool_size != 2 => {
                    return Err(self.invalid(format!("layer {i}: pool size must be 2")));
                }
                LayerKind::Maxpool => {
                    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                        return Err(self.invalid(format!("layer {i}: max pool needs even dims, got {h}x{w}")));
                    }
                    (c, h / 2, w / 2)
                }
                LayerKind::UpsampleNearest => (c, h * 2, w * 2),
                LayerKind::AdaptivePool => {
                    let s = l.pool_size;
                    if s == 0 || h % s != 0 || w % s != 0 || h == 0 {
                        return Err(self.invalid(format!(
                            "layer {i}: adaptive pool to {s}x{s} needs dims divisible by {s}, got {h}x{w}"
                        )));
                    }
                    (c, s, s)
                }
                LayerKind::FullyConnected => (l.out_channels, 1, 1),
                LayerKind::Relu | LayerKind::Sigmoid | LayerKind::BatchNorm => cur,
                LayerKind::Softmax => {
                    if h != 1 || w != 1 {
                        return Err(self.invalid(format!("layer {i}: softmax expects a vector")));
                    }
                    cur
                }
                LayerKind::Concat => {
                    let src = l
                        .source
                        .as_deref()
                        .and_then(|s| tags.get(s))
                        .copied()
                        .ok_or_else(|| self.invalid(format!("layer {i}: concat source missing")))?;
                    if !earlier.is_empty() {
                        return Err(self.invalid(format!("layer {i}: concat is not supported in heads")));
                    }
                    if src >= i {
                        return Err(self.invalid(format!("layer {i}: concat source must precede it")));
                    }
                    let skip = dims[src];
                    let (sc, sh, sw): Dims = skip;
                    if sh != h || sw != w {
                        return Err(self.invalid(format!(
                            "layer {i}: concat spatial mismatch {h}x{w} vs {sh}x{sw}"
                        )));
                    }
                    (c + sc, h, w)
                }
            };
            dims.push(cur);
        }
        Ok(dims)
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }
    Ok(())
}

fn check_divisible(what: &str, h: usize, w: usize, by: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(by) || !w.is_multiple_of(by) {
        return Err(Error::InvalidArgument(format!(
            "{what} input height and width must be positive multiples of {by}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Four conv+ReLU blocks (`b1..b4`) with 2x2 max pooling between them, a
/// 2x2 adaptive average pool, a fully connected layer, and softmax.
pub fn classifier_spec(
    family: Family,
    input_shape: Dims,
    num_classes: usize,
    widths: [usize; 4],
) -> Result<ArchitectureSpec> {
    check_classes(num_classes)?;
    check_divisible(&family.to_string(), input_shape.1, input_shape.2, 16)?;
    if widths.contains(&0) {
        return Err(Error::InvalidArgument("widths must be positive".into()));
    }
    let mut layers = Vec::new();
    for (i, &width) in widths.iter().enumerate() {
        if i > 0 {
            layers.push(LayerSpec::maxpool());
        }
        layers.push(LayerSpec::conv(3, width, 1));
        layers.push(LayerSpec::relu().tagged(TAP_TAGS[i]));
    }
    layers.push(LayerSpec::adaptive_pool(CLASSIFIER_POOL));
    layers.push(LayerSpec::fully_connected(num_classes));
    layers.push(LayerSpec::softmax());
    Ok(ArchitectureSpec {
        name: family.to_string(),
        family,
        input_shape,
        widths: widths.to_vec(),
        num_classes,
        layers,
        tap_tags: TAP_TAGS.iter().map(|t| t.to_string()).collect(),
        heads: Vec::new(),
    })
}

fn double_conv(layers: &mut Vec<LayerSpec>, width: usize, tag: &str) {
    for j in 0..2 {
        layers.push(LayerSpec::conv(3, width, 1));
        layers.push(LayerSpec::batch_norm());
        let relu = LayerSpec::relu();
        layers.push(if j == 1 { relu.tagged(tag) } else { relu });
    }
}

/// U-Net style explainer. The trunk ends in the spatial head (1 channel,
/// sigmoid); the `channel` head pools `e5` globally and maps it to one
/// sigmoid score per input channel.
pub fn explainer_spec(input_shape: Dims, widths: ExplainerWidths) -> Result<ArchitectureSpec> {
    check_divisible("explainer", input_shape.1, input_shape.2, 32)?;
    if widths.flat().contains(&0) {
        return Err(Error::InvalidArgument("widths must be positive".into()));
    }
    let mut layers = Vec::new();
    for (i, &width) in widths.encoder.iter().enumerate() {
        if i > 0 {
            layers.push(LayerSpec::maxpool());
        }
        double_conv(&mut layers, width, &format!("e{i}"));
    }
    for (j, &width) in widths.decoder.iter().enumerate() {
        let level = 4 - j;
        if j > 0 {
            layers.push(LayerSpec::concat(&format!("e{}", level + 1)));
        }
        layers.push(LayerSpec::upsample());
        double_conv(&mut layers, width, &format!("d{level}"));
    }
    layers.push(LayerSpec::conv(1, 1, 0));
    layers.push(LayerSpec::sigmoid().tagged("spatial"));
    let heads = vec![HeadSpec {
        name: "channel".into(),
        source: "e5".into(),
        layers: vec![
            LayerSpec::adaptive_pool(1),
            LayerSpec::fully_connected(input_shape.0),
            LayerSpec::sigmoid(),
        ],
    }];
    Ok(ArchitectureSpec {
        name: "explainer".into(),
        family: Family::Explainer,
        input_shape,
        widths: widths.flat(),
        num_classes: 0,
        layers,
        tap_tags: vec!["e5".into()],
        heads,
    })
}

/// 1x1 conv, ReLU, 1x1 conv.
pub fn mu_spec(in_channels: usize, mid: usize, out: usize) -> ArchitectureSpec {
    ArchitectureSpec {
        name: "mu".into(),
        family: Family::Mu,
        input_shape: (in_channels, 0, 0),
        widths: vec![in_channels, mid, out],
        num_classes: 0,
        layers: vec![LayerSpec::conv(1, mid, 0), LayerSpec::relu(), LayerSpec::conv(1, out, 0)],
        tap_tags: Vec::new(),
        heads: Vec::new(),
    }
}

/// Named parameter or buffer array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Conv { w: usize, b: usize, k: usize, pad: usize, out: usize },
    Relu,
    MaxPool,
    Pool { size: usize },
    Linear { w: usize, b: usize, out: usize },
    Softmax,
    Sigmoid,
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    Upsample,
    Concat { src: usize },
}

/// Batch-norm behavior: batch statistics while training, running
/// estimates otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    MaxPool(Vec<u32>),
    BatchNorm(BatchNormCache<T>),
}

/// Activations recorded by a forward pass; consumed by backward.
/// Activations and auxiliaries recorded along one head.
type HeadTrace<T> = (Vec<Tensor<T>>, Vec<Aux<T>>);

#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of trunk layer `i`.
    acts: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    heads: Vec<HeadTrace<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("non-empty trace")
    }

    /// Input of the final layer, e.g. the logits under a softmax.
    pub fn pre_output(&self) -> &Tensor<T> {
        &self.acts[self.acts.len() - 2]
    }

    pub fn head_output(&self, head: usize) -> &Tensor<T> {
        self.heads[head].0.last().expect("non-empty head")
    }
}

/// Gradient seeds for a backward pass.
#[derive(Clone, Debug)]
pub struct Seeds<T> {
    pub output: Option<Tensor<T>>,
    /// The output seed is with respect to the input of a final softmax.
    pub output_is_logits: bool,
    pub heads: Vec<Option<Tensor<T>>>,
    pub taps: Vec<(String, Tensor<T>)>,
}

impl<T> Default for Seeds<T> {
    fn default() -> Self {
        Seeds {
            output: None,
            output_is_logits: false,
            heads: Vec::new(),
            taps: Vec::new(),
        }
    }
}

pub type Grads<T> = Vec<Vec<T>>;

/// Per-layer activations exposed by a classifier, plus its class probabilities.
#[derive(Clone, Debug)]
pub struct FeatureTaps<T> {
    pub taps: Vec<(String, Tensor<T>)>,
    pub probs: Tensor<T>,
}

impl<T> FeatureTaps<T> {
    pub fn tap(&self, tag: &str) -> Option<&Tensor<T>> {
        self.taps.iter().find(|(t, _)| t == tag).map(|(_, v)| v)
    }
}

#[derive(Clone, Debug)]
pub struct ParameterizedModel<T = f32> {
    spec: ArchitectureSpec,
    params: Vec<Param<T>>,
    buffers: Vec<Param<T>>,
    pub trainable: bool,
    trunk: Vec<Step>,
    heads: Vec<(usize, Vec<Step>)>,
    tags: HashMap<String, usize>,
}

fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect()
}

impl<T: Scalar> ParameterizedModel<T> {
    /// Allocate and initialize parameters for `spec`, drawing from the
    /// stream `(seed, spec.name)`.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let (c, h, w) = spec.input_shape;
        // Spatially agnostic specs are validated against a nominal size.
        let (h, w) = if h == 0 { (4, 4) } else { (h, w) };
        let (trunk_dims, head_dims) = spec.infer_dims(h, w)?;
        let mut rng = rng::stream(seed, &spec.name);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let tags: HashMap<String, usize> = spec
            .tag_index()
            .into_iter()
            .map(|(t, i)| (t.to_string(), i))
            .collect();

        let mut compile = |prefix: &str, layers: &[LayerSpec], input: Dims, dims: &[Dims]| -> Vec<Step> {
            let mut steps = Vec::new();
            let mut cur = input;
            for (i, l) in layers.iter().enumerate() {
                let name = format!("{prefix}{i}");
                let step = match l.kind {
                    LayerKind::Conv => {
                        let fan_in = cur.0 * l.kernel * l.kernel;
                        let n = l.out_channels * fan_in;
                        params.push(Param {
                            name: format!("{name}.conv.weight"),
                            shape: vec![l.out_channels, cur.0, l.kernel, l.kernel],
                            data: fan_in_uniform(&mut rng, n, fan_in),
                        });
                        params.push(Param {
                            name: format!("{name}.conv.bias"),
                            shape: vec![l.out_channels],
                            data: vec![T::zero(); l.out_channels],
                        });
                        Step::Conv {
                            w: params.len() - 2,
                            b: params.len() - 1,
                            k: l.kernel,
                            pad: l.padding,
                            out: l.out_channels,
                        }
                    }
                    LayerKind::FullyConnected => {
                        let fan_in = cur.0 * cur.1 * cur.2;
                        params.push(Param {
                            name: format!("{name}.fc.weight"),
                            shape: vec![l.out_channels, fan_in],
                            data: fan_in_uniform(&mut rng, l.out_channels * fan_in, fan_in),
                        });
                        params.push(Param {
                            name: format!("{name}.fc.bias"),
                            shape: vec![l.out_channels],
                            data: vec![T::zero(); l.out_channels],
                        });
                        Step::Linear {
                            w: params.len() - 2,
                            b: params.len() - 1,
                            out: l.out_channels,
                        }
                    }
                    LayerKind::BatchNorm => {
                        let ch = cur.0;
                        params.push(Param {
                            name: format!("{name}.bn.weight"),
                            shape: vec![ch],
                            data: vec![T::one(); ch],
                        });
                        params.push(Param {
                            name: format!("{name}.bn.bias"),
                            shape: vec![ch],
                            data: vec![T::zero(); ch],
                        });
                        buffers.push(Param {
                            name: format!("{name}.bn.running_mean"),
                            shape: vec![ch],
                            data: vec![T::zero(); ch],
                        });
                        buffers.push(Param {
                            name: format!("{name}.bn.running_var"),
                            shape: vec![ch],
                            data: vec![T::one(); ch],
                        });
                        Step::BatchNorm {
                            gamma: params.len() - 2,
                            beta: params.len() - 1,
                            mean: buffers.len() - 2,
                            var: buffers.len() - 1,
                        }
                    }
                    LayerKind::Relu => Step::Relu,
                    LayerKind::Maxpool => Step::MaxPool,
                    LayerKind::AdaptivePool => Step::Pool { size: l.pool_size },
                    LayerKind::Softmax => Step::Softmax,
                    LayerKind::Sigmoid => Step::Sigmoid,
                    LayerKind::UpsampleNearest => Step::Upsample,
                    LayerKind::Concat => Step::Concat {
                        src: tags[l.source.as_deref().expect("validated")],
                    },
                };
                steps.push(step);
                cur = dims[i];
            }
            steps
        };

        let trunk = compile("trunk.", &spec.layers, (c, h, w), &trunk_dims);
        let mut heads = Vec::new();
        for (hs, dims) in spec.heads.iter().zip(&head_dims) {
            let src = tags[&hs.source];
            let steps = compile(&format!("{}.", hs.name), &hs.layers, trunk_dims[src], dims);
            heads.push((src, steps));
        }
        Ok(ParameterizedModel {
            spec,
            params,
            buffers,
            trainable: true,
            trunk,
            heads,
            tags,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Param<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param<T>] {
        &mut self.buffers
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterizedModel<U> {
        let conv = |ps: &[Param<T>]| -> Vec<Param<U>> {
            ps.iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect()
        };
        ParameterizedModel {
            spec: self.spec.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            trainable: self.trainable,
            trunk: self.trunk.clone(),
            heads: self.heads.clone(),
            tags: self.tags.clone(),
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let (c, h, w) = self.spec.input_shape;
        let ok = s.c == c && (h == 0 || (s.h == h && s.w == w)) && s.n > 0;
        if !ok {
            return Err(Error::ShapeMismatch {
                context: "model input",
                expected: format!("(N>0, {c}, {h}, {w}) for `{}`", self.spec.name),
                got: s.to_string(),
            });
        }
        Ok(())
    }

    fn run_steps(
        &self,
        steps: &[Step],
        input: Tensor<T>,
        mode: Mode,
        trunk_acts: Option<&[Tensor<T>]>,
    ) -> (Vec<Tensor<T>>, Vec<Aux<T>>) {
        let mut acts = Vec::with_capacity(steps.len() + 1);
        let mut aux = Vec::with_capacity(steps.len());
        acts.push(input);
        for step in steps {
            let x = acts.last().expect("input present");
            let (y, a) = match *step {
                Step::Conv { w, b, k, pad, out } => (
                    ops::conv_forward(x, &self.params[w].data, &self.params[b].data, out, k, pad),
                    Aux::None,
                ),
                Step::Relu => (ops::relu_forward(x), Aux::None),
                Step::MaxPool => {
                    let (y, arg) = ops::maxpool2_forward(x);
                    (y, Aux::MaxPool(arg))
                }
                Step::Pool { size } => (ops::adaptive_avg_pool_forward(x, size), Aux::None),
                Step::Linear { w, b, out } => (
                    ops::linear_forward(x, &self.params[w].data, &self.params[b].data, out),
                    Aux::None,
                ),
                Step::Softmax => (ops::softmax_forward(x), Aux::None),
                Step::Sigmoid => (ops::sigmoid_forward(x), Aux::None),
                Step::BatchNorm { gamma, beta, mean, var } => match mode {
                    Mode::Train => {
                        let (y, cache) =
                            ops::batchnorm_train_forward(x, &self.params[gamma].data, &self.params[beta].data);
                        (y, Aux::BatchNorm(cache))
                    }
                    Mode::Eval => (
                        ops::batchnorm_eval_forward(
                            x,
                            &self.params[gamma].data,
                            &self.params[beta].data,
                            &self.buffers[mean].data,
                            &self.buffers[var].data,
                        ),
                        Aux::None,
                    ),
                },
                Step::Upsample => (ops::upsample2_forward(x), Aux::None),
                Step::Concat { src } => {
                    let skip = match trunk_acts {
                        Some(t) => &t[src + 1],
                        None => &acts[src + 1],
                    };
                    (ops::concat_forward(x, skip), Aux::None)
                }
            };
            acts.push(y);
            aux.push(a);
        }
        (acts, aux)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.check_input(x)?;
        let (acts, aux) = self.run_steps(&self.trunk, x.clone(), mode, None);
        let heads = self
            .heads
            .iter()
            .map(|(src, steps)| self.run_steps(steps, acts[src + 1].clone(), mode, Some(&acts)))
            .collect();
        Ok(Trace { acts, aux, heads })
    }

    /// Activation of a tagged trunk layer.
    pub fn tap<'a>(&self, trace: &'a Trace<T>, tag: &str) -> Option<&'a Tensor<T>> {
        self.tags.get(tag).map(|&i| &trace.acts[i + 1])
    }

    /// Fold the batch statistics of a training-mode pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        let pairs = self
            .trunk
            .iter()
            .zip(&trace.aux)
            .chain(self.heads.iter().zip(&trace.heads).flat_map(|((_, s), (_, a))| s.iter().zip(a)));
        let mut updates = Vec::new();
        for (step, aux) in pairs {
            if let (Step::BatchNorm { mean, var, .. }, Aux::BatchNorm(cache)) = (step, aux) {
                updates.push((*mean, *var, cache));
            }
        }
        for (mean, var, cache) in updates {
            for (r, &b) in self.buffers[mean].data.iter_mut().zip(&cache.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.buffers[var].data.iter_mut().zip(&cache.batch_var_unbiased) {
                *r = keep * *r + m * b;
            }
        }
    }

    fn backward_steps(
        &self,
        steps: &[Step],
        acts: &[Tensor<T>],
        aux: &[Aux<T>],
        pending: &mut [Option<Tensor<T>>],
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) {
        for i in (0..steps.len()).rev() {
            let Some(g) = pending[i + 1].take() else {
                continue;
            };
            let x = &acts[i];
            let y = &acts[i + 1];
            let want_dx = i > 0 || need_input_grad;
            let dx = match steps[i] {
                Step::Conv { w, b, k, pad, .. } => {
                    let (gw, gb) = two_mut(grads, w, b);
                    ops::conv_backward(x, &self.params[w].data, &g, k, pad, gw, gb, want_dx)
                }
                Step::Linear { w, b, .. } => {
                    let (gw, gb) = two_mut(grads, w, b);
                    ops::linear_backward(x, &self.params[w].data, &g, gw, gb, want_dx)
                }
                Step::BatchNorm { gamma, beta, .. } => {
                    let Aux::BatchNorm(cache) = &aux[i] else {
                        panic!("backward through batch norm requires a training-mode trace");
                    };
                    let (gg, gb) = two_mut(grads, gamma, beta);
                    Some(ops::batchnorm_backward(cache, &self.params[gamma].data, &g, gg, gb))
                }
                Step::Relu => Some(ops::relu_backward(y, &g)),
                Step::MaxPool => {
                    let Aux::MaxPool(arg) = &aux[i] else { unreachable!() };
                    Some(ops::maxpool2_backward(x.shape(), arg, &g))
                }
                Step::Pool { size } => Some(ops::adaptive_avg_pool_backward(x.shape(), size, &g)),
                Step::Softmax => Some(ops::softmax_backward(y, &g)),
                Step::Sigmoid => Some(ops::sigmoid_backward(y, &g)),
                Step::Upsample => Some(ops::upsample2_backward(x.shape(), &g)),
                Step::Concat { src } => {
                    let skip_shape = Shape::new(x.shape().n, y.shape().c - x.shape().c, x.shape().h, x.shape().w);
                    let (ga, gb) = ops::concat_backward(x.shape(), skip_shape, &g);
                    // Skip sources precede this layer, so their slot is still pending.
                    accumulate(&mut pending[src + 1], gb);
                    Some(ga)
                }
            };
            if let Some(dx) = dx {
                accumulate(&mut pending[i], dx);
            }
        }
    }

    /// Backpropagate the seeds through the recorded trace. Returns the input
    /// gradient (when requested) and parameter gradients.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        seeds: Seeds<T>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Grads<T>)> {
        let n_layers = self.trunk.len();
        let mut grads = self.zero_grads();
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; n_layers + 1];
        if let Some(out) = seeds.output {
            if seeds.output_is_logits {
                if !matches!(self.trunk.last(), Some(Step::Softmax)) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: logit seed requires a final softmax",
                        self.spec.name
                    )));
                }
                check_grad_shape(&out, trace.pre_output())?;
                pending[n_layers - 1] = Some(out);
            } else {
                check_grad_shape(&out, trace.output())?;
                pending[n_layers] = Some(out);
            }
        }
        for (tag, g) in seeds.taps {
            let &i = self
                .tags
                .get(&tag)
                .ok_or_else(|| Error::InvalidArgument(format!("{}: no tap `{tag}`", self.spec.name)))?;
            check_grad_shape(&g, &trace.acts[i + 1])?;
            accumulate(&mut pending[i + 1], g);
        }
        for (h, seed) in seeds.heads.into_iter().enumerate() {
            let Some(seed) = seed else { continue };
            let (src, steps) = &self.heads[h];
            let (acts, aux) = &trace.heads[h];
            check_grad_shape(&seed, acts.last().expect("head output"))?;
            let mut head_pending: Vec<Option<Tensor<T>>> = vec![None; steps.len() + 1];
            head_pending[steps.len()] = Some(seed);
            self.backward_steps(steps, acts, aux, &mut head_pending, &mut grads, true);
            if let Some(g) = head_pending[0].take() {
                accumulate(&mut pending[src + 1], g);
            }
        }
        self.backward_steps(&self.trunk, &trace.acts, &trace.aux, &mut pending, &mut grads, need_input_grad);
        Ok((pending[0].take(), grads))
    }

}

fn check_grad_shape<T: Scalar>(g: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if g.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "gradient seed",
            expected: target.shape().to_string(),
            got: g.shape().to_string(),
        });
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

pub fn count_parameters<T: Scalar>(model: &ParameterizedModel<T>) -> usize {
    model.params.iter().map(|p| p.data.len()).sum()
}

pub fn build_teacher<T: Scalar>(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    widths: [usize; 4],
    seed: u64,
) -> Result<ParameterizedModel<T>> {
    ParameterizedModel::new(classifier_spec(Family::Teacher, input_shape, num_classes, widths)?, seed)
}

pub fn build_student<T: Scalar>(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    widths: [usize; 4],
    seed: u64,
) -> Result<ParameterizedModel<T>> {
    ParameterizedModel::new(classifier_spec(Family::Student, input_shape, num_classes, widths)?, seed)
}

pub fn build_explainer<T: Scalar>(
    input_shape: (usize, usize, usize),
    widths: ExplainerWidths,
    seed: u64,
) -> Result<ParameterizedModel<T>> {
    ParameterizedModel::new(explainer_spec(input_shape, widths)?, seed)
}

/// Adapter from student block `index` (1-based) to the default teacher's width.
pub fn build_mu_subnetwork<T: Scalar>(
    index: usize,
    student_widths: [usize; 4],
    seed: u64,
) -> Result<ParameterizedModel<T>> {
    build_mu_between(index, student_widths, TEACHER_WIDTHS, seed)
}

/// Adapter for arbitrary teacher widths; the hidden width is half the
/// teacher's, which reproduces the default mid widths.
pub fn build_mu_between<T: Scalar>(
    index: usize,
    student_widths: [usize; 4],
    teacher_widths: [usize; 4],
    seed: u64,
) -> Result<ParameterizedModel<T>> {
    if !(1..=4).contains(&index) {
        return Err(Error::InvalidArgument(format!(
            "mu subnetwork index must be in 1..=4, got {index}"
        )));
    }
    let i = index - 1;
    let mid = if teacher_widths == TEACHER_WIDTHS {
        MU_MID_WIDTHS[i]
    } else {
        (teacher_widths[i] / 2).max(1)
    };
    let mut spec = mu_spec(student_widths[i], mid, teacher_widths[i]);
    spec.name = format!("mu{index}");
    ParameterizedModel::new(spec, seed)
}

/// Inference-mode pass returning every declared tap and the final output.
pub fn forward_with_taps<T: Scalar>(model: &ParameterizedModel<T>, input: &Tensor<T>) -> Result<FeatureTaps<T>> {
    let trace = model.forward(input, Mode::Eval)?;
    let taps = model
        .spec
        .tap_tags
        .iter()
        .map(|t| (t.clone(), model.tap(&trace, t).expect("validated tap").clone()))
        .collect();
    let probs = trace.acts.into_iter().last().expect("output");
    Ok(FeatureTaps { taps, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_parameter_counts() {
        let t = build_teacher::<f32>((3, 256, 256), 2, TEACHER_WIDTHS, 0).unwrap();
        let s = build_student::<f32>((3, 256, 256), 2, STUDENT_WIDTHS, 0).unwrap();
        assert_eq!(count_parameters(&t), 390_466);
        assert_eq!(count_parameters(&s), 1_726);
        let small = build_teacher::<f32>((3, 64, 64), 2, TEACHER_WIDTHS, 0).unwrap();
        assert_eq!(count_parameters(&small), 390_466);
        let ones = build_teacher::<f32>((3, 64, 64), 2, [1, 1, 1, 1], 0).unwrap();
        assert_eq!(count_parameters(&ones), 68);
        let same = build_student::<f32>((3, 64, 64), 2, TEACHER_WIDTHS, 0).unwrap();
        assert_eq!(count_parameters(&same), 390_466);
    }

    #[test]
    fn mu_parameter_count_and_shape() {
        let mu = build_mu_subnetwork::<f32>(4, STUDENT_WIDTHS, 0).unwrap();
        assert_eq!(count_parameters(&mu), 35_200);
        let mu1 = build_mu_subnetwork::<f32>(1, STUDENT_WIDTHS, 0).unwrap();
        let x = Tensor::full(Shape::new(1, 2, 8, 8), 0.5f32);
        let y = mu1.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.output().shape(), Shape::new(1, 32, 8, 8));
        assert!(build_mu_subnetwork::<f32>(0, STUDENT_WIDTHS, 0).is_err());
        assert!(build_mu_subnetwork::<f32>(5, STUDENT_WIDTHS, 0).is_err());
    }

    #[test]
    fn identity_mu_reproduces_nonnegative_input() {
        let mut mu = ParameterizedModel::<f64>::new(mu_spec(3, 3, 3), 1).unwrap();
        for p in mu.params_mut() {
            if p.name.ends_with("weight") {
                p.data = vec![0.0; 9];
                for c in 0..3 {
                    p.data[c * 3 + c] = 1.0;
                }
            }
        }
        let data: Vec<f64> = (0..3 * 16).map(|i| (i % 7) as f64 * 0.3).collect();
        let x = Tensor::from_vec(Shape::new(1, 3, 4, 4), data).unwrap();
        let y = mu.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.output(), &x);
    }

    #[test]
    fn tap_shapes_follow_pooling() {
        let x = Tensor::full(Shape::new(1, 3, 64, 64), 0.3f32);
        let t = build_teacher::<f32>((3, 64, 64), 2, TEACHER_WIDTHS, 0).unwrap();
        let s = build_student::<f32>((3, 64, 64), 2, STUDENT_WIDTHS, 0).unwrap();
        let tt = forward_with_taps(&t, &x).unwrap();
        let st = forward_with_taps(&s, &x).unwrap();
        let expect_t = [(32, 64), (64, 32), (128, 16), (256, 8)];
        let expect_s = [(2, 64), (4, 32), (8, 16), (16, 8)];
        for (i, tag) in TAP_TAGS.iter().enumerate() {
            let a = tt.tap(tag).unwrap().shape();
            let b = st.tap(tag).unwrap().shape();
            assert_eq!((a.c, a.h), expect_t[i]);
            assert_eq!((b.c, b.h), expect_s[i]);
            assert_eq!((a.h, a.w), (b.h, b.w));
        }
        let sum: f32 = tt.probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn classifier_rejects_bad_inputs() {
        assert!(build_teacher::<f32>((3, 60, 64), 2, TEACHER_WIDTHS, 0).is_err());
        assert!(build_teacher::<f32>((3, 64, 64), 1, TEACHER_WIDTHS, 0).is_err());
        let t = build_teacher::<f32>((3, 32, 32), 2, TEACHER_WIDTHS, 0).unwrap();
        let wrong = Tensor::zeros(Shape::new(1, 3, 64, 64));
        assert!(matches!(t.forward(&wrong, Mode::Eval), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn explainer_head_shapes() {
        let e = build_explainer::<f32>((3, 64, 64), ExplainerWidths::scaled(16), 0).unwrap();
        let x = Tensor::full(Shape::new(2, 3, 64, 64), 0.5f32);
        let tr = e.forward(&x, Mode::Eval).unwrap();
        assert_eq!(tr.output().shape(), Shape::new(2, 1, 64, 64));
        assert_eq!(tr.head_output(0).shape(), Shape::new(2, 3, 1, 1));
        assert!(build_explainer::<f32>((3, 60, 60), ExplainerWidths::default(), 0).is_err());
        let full = explainer_spec((3, 256, 256), ExplainerWidths::default()).unwrap();
        let (dims, _) = full.infer_dims(256, 256).unwrap();
        assert_eq!(*dims.last().unwrap(), (1, 256, 256));
    }

    #[test]
    fn layer_validation_catches_structural_errors() {
        let mut spec = classifier_spec(Family::Student, (3, 32, 32), 2, STUDENT_WIDTHS).unwrap();
        spec.layers[1].tag = Some("b2".into());
        assert!(spec.infer_dims(32, 32).is_err());
        let mut spec = classifier_spec(Family::Student, (3, 32, 32), 2, STUDENT_WIDTHS).unwrap();
        spec.layers[0].kernel = 5;
        assert!(spec.infer_dims(32, 32).is_err());
        let mut spec = classifier_spec(Family::Student, (3, 32, 32), 2, STUDENT_WIDTHS).unwrap();
        spec.tap_tags.push("zz".into());
        assert!(spec.infer_dims(32, 32).is_err());
    }

    #[test]
    fn config_block_round_trips_and_diffs() {
        let spec = classifier_spec(Family::Teacher, (3, 64, 64), 2, TEACHER_WIDTHS).unwrap();
        let block = spec.config().to_block();
        let back = ArchConfig::from_block(&block).unwrap();
        assert_eq!(back.build_spec().unwrap(), spec);
        let other = classifier_spec(Family::Student, (3, 64, 64), 2, STUDENT_WIDTHS).unwrap();
        let diff = spec.config().diff(&other.config());
        assert!(diff.contains("teacher") && diff.contains("student"));
    }

    fn loss_of(model: &ParameterizedModel<f64>, x: &Tensor<f64>, w_out: &Tensor<f64>, w_head: Option<&Tensor<f64>>) -> f64 {
        let tr = model.forward(x, Mode::Train).unwrap();
        let mut l: f64 = tr.output().data().iter().zip(w_out.data()).map(|(a, b)| a * b).sum();
        if let Some(wh) = w_head {
            l += tr.head_output(0).data().iter().zip(wh.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        l
    }

    fn weights(shape: Shape, salt: f64) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..shape.numel()).map(|i| ((i as f64 + salt) * 1.37).sin()).collect()).unwrap()
    }

    /// Central differences against the engine's backward pass for every
    /// parameter of a small network containing every layer kind.
    #[allow(clippy::needless_range_loop)]
    fn check_engine(model: &mut ParameterizedModel<f64>, x: &Tensor<f64>, with_head: bool) {
        let tr = model.forward(x, Mode::Train).unwrap();
        let w_out = weights(tr.output().shape(), 0.5);
        let w_head = with_head.then(|| weights(tr.head_output(0).shape(), 2.5));
        let seeds = Seeds {
            output: Some(w_out.clone()),
            heads: vec![w_head.clone()],
            ..Seeds::default()
        };
        let (dx, grads) = model.backward(&tr, seeds, true).unwrap();
        let h = 1e-5;
        for pi in 0..model.params().len() {
            for j in 0..model.params()[pi].data.len() {
                let orig = model.params()[pi].data[j];
                model.params_mut()[pi].data[j] = orig + h;
                let lp = loss_of(model, x, &w_out, w_head.as_ref());
                model.params_mut()[pi].data[j] = orig - h;
                let lm = loss_of(model, x, &w_out, w_head.as_ref());
                model.params_mut()[pi].data[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[pi][j];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-7,
                    "{}[{j}]: fd {fd} vs analytic {an}",
                    model.params()[pi].name
                );
            }
        }
        let dx = dx.unwrap();
        let mut xp = x.clone();
        for j in 0..x.data().len() {
            let orig = x.data()[j];
            xp.data_mut()[j] = orig + h;
            let lp = loss_of(model, &xp, &w_out, w_head.as_ref());
            xp.data_mut()[j] = orig - h;
            let lm = loss_of(model, &xp, &w_out, w_head.as_ref());
            xp.data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = dx.data()[j];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-7, "input[{j}]: {fd} vs {an}");
        }
    }

    #[test]
    fn engine_gradients_match_finite_differences_for_classifier() {
        let mut m = build_student::<f64>((2, 16, 16), 3, [2, 3, 2, 2], 3).unwrap();
        let x = weights(Shape::new(2, 2, 16, 16), 0.1).map(|v| v.abs());
        check_engine(&mut m, &x, false);
    }

    #[test]
    fn engine_gradients_match_finite_differences_for_explainer() {
        let widths = ExplainerWidths {
            encoder: [2, 2, 3, 2, 2, 2],
            decoder: [2, 2, 2, 2, 2],
        };
        let mut m = build_explainer::<f64>((2, 32, 32), widths, 5).unwrap();
        let x = weights(Shape::new(2, 2, 32, 32), 0.7).map(|v| v.abs());
        check_engine(&mut m, &x, true);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn parameter_count_matches_closed_form(
            widths in prop::array::uniform4(1usize..24),
            c_in in 1usize..5,
            classes in 2usize..6,
        ) {
            let mut prev = c_in;
            let mut expected = 0;
            for w in widths {
                expected += 9 * prev * w + w;
                prev = w;
            }
            expected += prev * CLASSIFIER_POOL * CLASSIFIER_POOL * classes + classes;
            let m = build_student::<f32>((c_in, 32, 32), classes, widths, 0).unwrap();
            prop_assert_eq!(count_parameters(&m), expected);
        }
    }
}
