//! U-Net and skip-less (SegNet-style) encoder-decoder networks.
//!
//! A [`Model`] is an ordered list of [`Layer`]s plus a named parameter store.
//! The contracting path applies `convs_per_level` same-padded convolutions
//! with ReLU per level followed by 2x2 max pooling; the bottleneck doubles the
//! last filter count; the expanding path mirrors it. Each decoder level
//! upsamples, halves channels, optionally crop-concatenates the matching
//! encoder feature, and runs `convs_per_level` convolutions. A 1x1
//! convolution and a sigmoid produce one foreground probability per pixel.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::Pad2d;
use crate::tensor::Tensor;

/// How the expanding path increases resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    /// Nearest-neighbour 2x upsampling followed by a same-padded convolution.
    NearestConv,
    /// Stride-2 transposed convolution.
    TransposedConv,
}

impl UpsampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpsampleMode::NearestConv => "nearest-conv",
            UpsampleMode::TransposedConv => "transposed-conv",
        }
    }
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest-conv" => Ok(UpsampleMode::NearestConv),
            "transposed-conv" => Ok(UpsampleMode::TransposedConv),
            other => Err(Error::invalid(format!(
                "unknown upsample mode {other:?} (expected nearest-conv or transposed-conv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub encoder_filters: Vec<usize>,
    pub skip_connections: bool,
    pub input_channels: usize,
    pub upsample_mode: UpsampleMode,
    pub convs_per_level: usize,
    pub kernel_size: usize,
    /// Kernel of the channel-halving convolution in each decoder level.
    pub up_kernel: usize,
    /// Seed of the weight initializer.
    pub seed: u64,
}

impl ModelConfig {
    /// U-Net with nearest-neighbour upsampling and skip connections.
    pub fn unet(filters: &[usize]) -> Self {
        Self {
            encoder_filters: filters.to_vec(),
            skip_connections: true,
            input_channels: 4,
            upsample_mode: UpsampleMode::NearestConv,
            convs_per_level: 2,
            kernel_size: 3,
            up_kernel: 2,
            seed: 0,
        }
    }

    /// Same encoder, transposed-convolution decoder, no skip connections.
    pub fn segnet(filters: &[usize]) -> Self {
        Self {
            skip_connections: false,
            upsample_mode: UpsampleMode::TransposedConv,
            ..Self::unet(filters)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn depth(&self) -> usize {
        self.encoder_filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.encoder_filters;
        if f.is_empty() {
            return Err(Error::invalid("encoder_filters must not be empty"));
        }
        if f.contains(&0) || f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "encoder_filters must be positive and strictly increasing, got {f:?}"
            )));
        }
        if self.input_channels == 0 || self.convs_per_level == 0 || self.kernel_size == 0 || self.up_kernel == 0 {
            return Err(Error::invalid(
                "input_channels, convs_per_level, kernel_size and up_kernel must be positive",
            ));
        }
        if self.upsample_mode == UpsampleMode::TransposedConv && self.up_kernel < 2 {
            return Err(Error::invalid("transposed-conv upsampling needs up_kernel >= 2"));
        }
        Ok(())
    }

    /// Checks that `height x width` survives every pooling level.
    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let (mut h, mut w) = (height, width);
        for level in 0..self.depth() {
            if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                return Err(Error::invalid(format!(
                    "input {height}x{width} is not divisible at pooling level {level} (feature map {h}x{w})"
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// `key=value` lines, the on-disk form inside checkpoints.
    pub fn to_kv(&self) -> String {
        let filters: Vec<String> = self.encoder_filters.iter().map(|f| f.to_string()).collect();
        format!(
            "encoder_filters={}\nskip_connections={}\ninput_channels={}\nupsample_mode={}\nconvs_per_level={}\nkernel_size={}\nup_kernel={}\nseed={}\n",
            filters.join(","),
            self.skip_connections,
            self.input_channels,
            self.upsample_mode.as_str(),
            self.convs_per_level,
            self.kernel_size,
            self.up_kernel,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line without '=': {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::invalid(format!("config is missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("config value {k} is not an integer")))
        };
        let cfg = Self {
            encoder_filters: parse_filters(get("encoder_filters")?)?,
            skip_connections: get("skip_connections")?
                .parse()
                .map_err(|_| Error::invalid("skip_connections must be true or false"))?,
            input_channels: num("input_channels")?,
            upsample_mode: get("upsample_mode")?.parse()?,
            convs_per_level: num("convs_per_level")?,
            kernel_size: num("kernel_size")?,
            up_kernel: num("up_kernel")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::invalid("seed must be an unsigned integer"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `64,128,256,512`.
pub fn parse_filters(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad filter count {p:?} in {s:?}")))
        })
        .collect()
}

/// One step of the layer graph. Parameter fields index into the model's store.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        weight: usize,
        bias: usize,
        pad: Pad2d,
        relu: bool,
    },
    MaxPool,
    /// Remember the current feature map for a later [`Layer::CropConcat`].
    SaveSkip,
    Upsample,
    TransposedConv {
        weight: usize,
        bias: usize,
    },
    CropConcat,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<NamedParam>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("layers", &self.layers.len())
            .field("params", &self.param_count())
            .finish()
    }
}

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
    params: Vec<NamedParam>,
}

impl Builder {
    fn push_param(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(NamedParam { name, tensor });
        self.params.len() - 1
    }

    /// He-normal weights `[cout, cin, k, k]` and zero bias.
    fn conv_params(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> (usize, usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::randn(&[cout, cin, k, k], std, &mut self.rng);
        let weight = self.push_param(format!("{name}.weight"), w);
        let bias = self.push_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
        (weight, bias)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, relu: bool) {
        let (weight, bias) = self.conv_params(name, cin, cout, k);
        self.layers.push(Layer::Conv {
            weight,
            bias,
            pad: Pad2d::same(k, k),
            relu,
        });
    }
}

/// Builds a network from `config`; [`build_segnet_variant`] and
/// [`build_unet`] are thin wrappers that pin the decoder style.
pub fn build(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let k = config.kernel_size;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        layers: Vec::new(),
        params: Vec::new(),
    };
    let mut ch = config.input_channels;
    for (level, &f) in config.encoder_filters.iter().enumerate() {
        for i in 0..config.convs_per_level {
            b.conv(&format!("enc{level}.conv{i}"), ch, f, k, true);
            ch = f;
        }
        if config.skip_connections {
            b.layers.push(Layer::SaveSkip);
        }
        b.layers.push(Layer::MaxPool);
    }
    let bottleneck = 2 * config.encoder_filters[config.depth() - 1];
    for i in 0..config.convs_per_level {
        b.conv(&format!("bottleneck.conv{i}"), ch, bottleneck, k, true);
        ch = bottleneck;
    }
    for (level, &f) in config.encoder_filters.iter().enumerate().rev() {
        let name = format!("dec{level}.up");
        match config.upsample_mode {
            UpsampleMode::NearestConv => {
                b.layers.push(Layer::Upsample);
                b.conv(&name, ch, f, config.up_kernel, true);
            }
            UpsampleMode::TransposedConv => {
                // Weight is [Cin, Cout, k, k] for transposed convolutions.
                let std = (2.0 / (ch * config.up_kernel * config.up_kernel) as f64).sqrt();
                let w = Tensor::randn(&[ch, f, config.up_kernel, config.up_kernel], std, &mut b.rng);
                let weight = b.push_param(format!("{name}.weight"), w);
                let bias = b.push_param(format!("{name}.bias"), Tensor::zeros(&[f]));
                b.layers.push(Layer::TransposedConv { weight, bias });
            }
        }
        ch = f;
        if config.skip_connections {
            b.layers.push(Layer::CropConcat);
            ch = 2 * f;
        }
        for i in 0..config.convs_per_level {
            b.conv(&format!("dec{level}.conv{i}"), ch, f, k, true);
            ch = f;
        }
    }
    b.conv("head", ch, 1, 1, false);
    b.layers.push(Layer::Sigmoid);
    Ok(Model {
        config: config.clone(),
        layers: b.layers,
        params: b.params,
    })
}

/// U-Net: requires skip connections.
pub fn build_unet(config: &ModelConfig) -> Result<Model> {
    if !config.skip_connections {
        return Err(Error::invalid("build_unet needs skip_connections = true"));
    }
    build(config)
}

/// Skip-less decoder built from stride-2 transposed convolutions.
pub fn build_segnet_variant(config: &ModelConfig) -> Result<Model> {
    if config.skip_connections || config.upsample_mode != UpsampleMode::TransposedConv {
        return Err(Error::invalid(
            "build_segnet_variant needs skip_connections = false and transposed-conv upsampling",
        ));
    }
    build(config)
}

/// Output of a graph forward pass.
pub struct GraphOutput {
    /// `[N, 1, H, W]` probabilities.
    pub probs: Var,
    /// One node per parameter, in store order.
    pub params: Vec<Var>,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let [_, c, h, w] = input.dims4("forward")?;
        if c != self.config.input_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {c} channels, model expects {}", self.config.input_channels),
            ));
        }
        self.config.check_input_size(h, w)
    }

    /// Records the forward pass of `input` on `graph`. Parameters become
    /// trainable leaves when `trainable`, constants otherwise.
    pub fn forward_graph(&self, graph: &mut Graph, input: Var, trainable: bool) -> Result<GraphOutput> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.tensor.clone())
                } else {
                    graph.input(p.tensor.clone())
                }
            })
            .collect();
        self.forward_graph_with(graph, input, params)
    }

    /// Like [`Model::forward_graph`] with caller-supplied parameter nodes,
    /// one per stored parameter in store order and of matching shape.
    pub fn forward_graph_with(&self, graph: &mut Graph, input: Var, params: Vec<Var>) -> Result<GraphOutput> {
        self.check_input(graph.value(input))?;
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!("{} parameter nodes for {} parameters", params.len(), self.params.len()),
            ));
        }
        for (v, p) in params.iter().zip(&self.params) {
            if graph.value(*v).shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "{} expects {:?}, node has {:?}",
                        p.name,
                        p.tensor.shape(),
                        graph.value(*v).shape()
                    ),
                ));
            }
        }
        let mut x = input;
        let mut skips = Vec::new();
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv {
                    weight,
                    bias,
                    pad,
                    relu,
                } => {
                    let y = graph.conv2d_padded(x, params[weight], params[bias], 1, pad)?;
                    if relu {
                        graph.relu(y)
                    } else {
                        y
                    }
                }
                Layer::MaxPool => graph.maxpool2d(x, 2, 2)?,
                Layer::SaveSkip => {
                    skips.push(x);
                    x
                }
                Layer::Upsample => graph.upsample_nearest(x, 2)?,
                Layer::TransposedConv { weight, bias } => {
                    let y = graph.transposed_conv2d(x, params[weight], params[bias], 2)?;
                    graph.relu(y)
                }
                Layer::CropConcat => {
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::invalid("layer graph has an unmatched crop-concat"))?;
                    graph.crop_concat(skip, x)?
                }
                Layer::Sigmoid => graph.sigmoid(x),
            };
        }
        Ok(GraphOutput { probs: x, params })
    }

    /// Inference: `[N, C, H, W]` -> `[N, 1, H, W]` probabilities.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let out = self.forward_graph(&mut g, x, false)?;
        Ok(g.take_value(out.probs))
    }

    /// Raw little-endian parameter bytes, in store order.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint::encode(self);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        checkpoint::decode(&bytes)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&checkpoint::encode(self))
    }
}

pub fn param_count(model: &Model) -> usize {
    model.param_count()
}

/// Binary checkpoint container.
///
/// ```text
/// magic   "UVOSCKPT"            8 bytes
/// version u32 LE                (1)
/// config  u32 LE length + UTF-8 key=value text
/// count   u32 LE                number of parameter records
/// record  u32 LE name length, name bytes,
///         u32 LE rank, rank x u64 LE dims,
///         prod(dims) x f64 LE values
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"UVOSCKPT";
    pub const VERSION: u32 = 1;

    pub fn encode(model: &Model) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + model.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = model.config.to_kv();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
        for p in &model.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
            if self.bytes.len() - self.pos < n {
                return Err(Error::Format {
                    what: "checkpoint",
                    offset: self.pos,
                    detail: format!(
                        "truncated {what}: need {n} bytes, {} remain",
                        self.bytes.len() - self.pos
                    ),
                });
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u32(&mut self, what: &str) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
        }

        fn u64(&mut self, what: &str) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
        }

        fn fail(&self, offset: usize, detail: String) -> Error {
            Error::Format {
                what: "checkpoint",
                offset,
                detail,
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Model> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8, "magic")? != MAGIC {
            return Err(c.fail(0, "bad magic".into()));
        }
        let at = c.pos;
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(c.fail(at, format!("unsupported version {version}")));
        }
        let len = c.u32("config length")? as usize;
        let at = c.pos;
        let text = std::str::from_utf8(c.take(len, "config")?).map_err(|e| c.fail(at, e.to_string()))?;
        let config = ModelConfig::from_kv(text).map_err(|e| c.fail(at, e.to_string()))?;
        let mut model = build(&config)?;
        let at = c.pos;
        let count = c.u32("parameter count")? as usize;
        if count != model.params.len() {
            return Err(c.fail(
                at,
                format!("{count} parameter records, config implies {}", model.params.len()),
            ));
        }
        for p in &mut model.params {
            let at = c.pos;
            let name_len = c.u32("name length")? as usize;
            let name = c.take(name_len, "name")?;
            if name != p.name.as_bytes() {
                return Err(c.fail(
                    at,
                    format!("expected parameter {}, found {}", p.name, String::from_utf8_lossy(name)),
                ));
            }
            let rank = c.u32("rank")? as usize;
            let at = c.pos;
            let dims = (0..rank)
                .map(|_| c.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != p.tensor.shape() {
                return Err(c.fail(
                    at,
                    format!("{} has shape {dims:?}, config implies {:?}", p.name, p.tensor.shape()),
                ));
            }
            let payload = c.take(p.tensor.len() * 8, "payload")?;
            for (v, chunk) in p.tensor.data_mut().iter_mut().zip(payload.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if c.pos != bytes.len() {
            return Err(c.fail(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(model)
    }
}
