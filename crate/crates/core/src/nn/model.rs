use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv1d_backward, conv1d_forward, leaky_relu_backward, leaky_relu_forward, linear_backward, linear_forward,
    maxpool1d_backward, maxpool1d_forward, Conv1dCache, MaxPoolCache,
};
use super::optim::{adam_step, sgd_step, AdamState};
use super::tensor::Tensor;
use super::NnError;

pub const DEFAULT_LRELU_ALPHA: f64 = 0.01;
pub const DEFAULT_CONV_CHANNELS: usize = 16;
/// Seed-derivation index of the server layer, distinct from client layer indices.
const SERVER_LAYER_TAG: usize = 0x5e12_7e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    LeakyRelu {
        alpha: f64,
    },
    MaxPool1d {
        window: usize,
    },
    /// Flattens a rank-3 input before the affine map.
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv1d { .. } | LayerSpec::Linear { .. })
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv1d { in_ch, kernel, .. } => in_ch * kernel,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 0,
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv1d { in_ch, out_ch, kernel, .. } => Some((vec![out_ch, in_ch, kernel], vec![out_ch])),
            LayerSpec::Linear { in_features, out_features } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv1d { in_ch, out_ch, kernel, stride } => {
                write!(f, "conv1d in={in_ch} out={out_ch} kernel={kernel} stride={stride}")
            }
            LayerSpec::LeakyRelu { alpha } => write!(f, "leaky_relu alpha={alpha}"),
            LayerSpec::MaxPool1d { window } => write!(f, "maxpool1d window={window}"),
            LayerSpec::Linear { in_features, out_features } => write!(f, "linear in={in_features} out={out_features}"),
            LayerSpec::Softmax => write!(f, "softmax"),
        }
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(|| NnError::Config("empty layer description".into()))?;
        let mut get = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| NnError::Config(format!("expected key=value, got '{p}'")))?;
            get.insert(k, v);
        }
        let num = |k: &str| -> Result<usize, NnError> {
            get.get(k)
                .ok_or_else(|| NnError::Config(format!("{kind}: missing '{k}'")))?
                .parse()
                .map_err(|_| NnError::Config(format!("{kind}: bad value for '{k}'")))
        };
        Ok(match kind {
            "conv1d" => {
                LayerSpec::Conv1d { in_ch: num("in")?, out_ch: num("out")?, kernel: num("kernel")?, stride: num("stride")? }
            }
            "leaky_relu" => LayerSpec::LeakyRelu {
                alpha: get
                    .get("alpha")
                    .ok_or_else(|| NnError::Config("leaky_relu: missing 'alpha'".into()))?
                    .parse()
                    .map_err(|_| NnError::Config("leaky_relu: bad alpha".into()))?,
            },
            "maxpool1d" => LayerSpec::MaxPool1d { window: num("window")? },
            "linear" => LayerSpec::Linear { in_features: num("in")?, out_features: num("out")? },
            "softmax" => LayerSpec::Softmax,
            other => return Err(NnError::Config(format!("unknown layer kind '{other}'"))),
        })
    }
}

/// Layer list of the U-shaped model. The client owns `layers[..split_index]`
/// and the final softmax; the server owns the single linear layer at
/// `layers[split_index]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_length: usize,
    pub layers: Vec<LayerSpec>,
    pub split_index: usize,
}

impl ModelSpec {
    /// Conv(7) → LReLU → Pool(2) → Conv(5) → LReLU → Pool(2) → Linear → Softmax.
    pub fn default_cnn(
        input_channels: usize,
        input_length: usize,
        conv_channels: usize,
        classes: usize,
    ) -> Result<Self, NnError> {
        let after1 =
            (input_length.checked_sub(7).ok_or_else(|| NnError::Shape("input shorter than kernel 7".into()))?).div_ceil(2);
        let after2 = (after1.checked_sub(5).ok_or_else(|| NnError::Shape("input too short for kernel 5".into()))?).div_ceil(2);
        let spec = Self {
            input_channels,
            input_length,
            layers: vec![
                LayerSpec::Conv1d { in_ch: input_channels, out_ch: conv_channels, kernel: 7, stride: 1 },
                LayerSpec::LeakyRelu { alpha: DEFAULT_LRELU_ALPHA },
                LayerSpec::MaxPool1d { window: 2 },
                LayerSpec::Conv1d { in_ch: conv_channels, out_ch: conv_channels, kernel: 5, stride: 1 },
                LayerSpec::LeakyRelu { alpha: DEFAULT_LRELU_ALPHA },
                LayerSpec::MaxPool1d { window: 2 },
                LayerSpec::Linear { in_features: conv_channels * after2, out_features: classes },
                LayerSpec::Softmax,
            ],
            split_index: 6,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default model for single-lead 128-sample beats with 5 classes.
    pub fn mitbih() -> Self {
        Self::default_cnn(1, 128, DEFAULT_CONV_CHANNELS, 5).expect("default model is valid")
    }

    /// Output shape (without batch) after each layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut cur = vec![self.input_channels, self.input_length];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| NnError::Shape(format!("layer {i} ({layer}): {msg}"));
            cur = match *layer {
                LayerSpec::Conv1d { in_ch, out_ch, kernel, stride } => {
                    if cur.len() != 2 || cur[0] != in_ch {
                        return Err(bad(format!("input {cur:?}")));
                    }
                    if kernel == 0 || stride == 0 || kernel > cur[1] {
                        return Err(bad(format!("kernel {kernel}, stride {stride}, length {}", cur[1])));
                    }
                    vec![out_ch, (cur[1] - kernel) / stride + 1]
                }
                LayerSpec::LeakyRelu { .. } | LayerSpec::Softmax => cur,
                LayerSpec::MaxPool1d { window } => {
                    if cur.len() != 2 || window == 0 || window > cur[1] {
                        return Err(bad(format!("window {window} on {cur:?}")));
                    }
                    vec![cur[0], cur[1] / window]
                }
                LayerSpec::Linear { in_features, out_features } => {
                    let flat: usize = cur.iter().product();
                    if flat != in_features {
                        return Err(bad(format!("expects {in_features} features, input has {flat}")));
                    }
                    vec![out_features]
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let l = self.layers.len();
        if l < 2 || self.split_index + 2 != l {
            return Err(NnError::Config(format!(
                "split index {} must be followed by exactly the server linear layer and softmax ({l} layers)",
                self.split_index
            )));
        }
        if !matches!(self.layers[self.split_index], LayerSpec::Linear { .. }) {
            return Err(NnError::Config("the server layer must be Linear".into()));
        }
        if self.layers[l - 1] != LayerSpec::Softmax {
            return Err(NnError::Config("the last layer must be Softmax".into()));
        }
        if self.layers[..self.split_index].contains(&LayerSpec::Softmax) {
            return Err(NnError::Config("softmax may only appear last".into()));
        }
        self.shapes()?;
        Ok(())
    }

    pub fn client_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.split_index]
    }

    /// `(F, K)`: input features and classes of the server linear layer.
    pub fn server_dims(&self) -> (usize, usize) {
        match self.layers[self.split_index] {
            LayerSpec::Linear { in_features, out_features } => (in_features, out_features),
            _ => unreachable!("validated"),
        }
    }

    pub fn split_features(&self) -> usize {
        self.server_dims().0
    }

    pub fn classes(&self) -> usize {
        self.server_dims().1
    }

    /// `key = value` rendering; see [`ModelSpec::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "input_channels = {}\ninput_length = {}\nsplit_index = {}\nlayer_count = {}\n",
            self.input_channels,
            self.input_length,
            self.split_index,
            self.layers.len()
        );
        for (i, l) in self.layers.iter().enumerate() {
            s.push_str(&format!("layer.{i} = {l}\n"));
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self, NnError> {
        let map = parse_kv(text)?;
        let num = |k: &str| -> Result<usize, NnError> {
            map.get(k)
                .ok_or_else(|| NnError::Config(format!("missing key '{k}'")))?
                .parse()
                .map_err(|_| NnError::Config(format!("bad value for '{k}'")))
        };
        let count = num("layer_count")?;
        let layers = (0..count)
            .map(|i| {
                map.get(format!("layer.{i}").as_str()).ok_or_else(|| NnError::Config(format!("missing key 'layer.{i}'")))?.parse()
            })
            .collect::<Result<Vec<LayerSpec>, _>>()?;
        let spec = Self {
            input_channels: num("input_channels")?,
            input_length: num("input_length")?,
            layers,
            split_index: num("split_index")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<std::collections::BTreeMap<String, String>, NnError> {
    let mut map = std::collections::BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| NnError::Config(format!("line {}: expected key = value", no + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Training schedule shared by both parties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Batches per epoch, `floor(|D| / n)`.
    pub batches: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 {
            return Err(NnError::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(NnError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batches == 0 {
            return Err(NnError::Config("batch count must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "epochs = {}\nlr = {}\nbatch_size = {}\nbatches = {}\nseed = {}\n",
            self.epochs, self.lr, self.batch_size, self.batches, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, NnError> {
        let map = parse_kv(text)?;
        fn get<T: std::str::FromStr>(map: &std::collections::BTreeMap<String, String>, k: &str) -> Result<T, NnError> {
            map.get(k)
                .ok_or_else(|| NnError::Config(format!("missing key '{k}'")))?
                .parse()
                .map_err(|_| NnError::Config(format!("bad value for '{k}'")))
        }
        Ok(Self {
            epochs: get(&map, "epochs")?,
            lr: get(&map, "lr")?,
            batch_size: get(&map, "batch_size")?,
            batches: get(&map, "batches")?,
            seed: get(&map, "seed")?,
        })
    }
}

/// Seed for layer `index` derived from a run seed (splitmix64 finalizer).
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Weight and bias of one parametrized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LayerParams {
    /// Uniform in `[-k, k]` with `k = 1/sqrt(fan_in)`, from the layer's own seed.
    pub fn init(spec: &LayerSpec, seed: u64, index: usize) -> Option<Self> {
        let (ws, bs) = spec.param_shapes()?;
        let k = 1.0 / (spec.fan_in() as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(layer_seed(seed, index));
        let mut draw = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::from_raw(shape, (0..n).map(|_| rng.random_range(-k..=k)).collect())
        };
        let w = draw(ws);
        let b = draw(bs);
        Some(Self { w, b })
    }
}

/// The server's linear layer `y = x Wᵀ + b`, trained with plain SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearLayer {
    /// Initial weights for the model's server layer.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let (f, k) = spec.server_dims();
        Self::init_dims(f, k, seed)
    }

    /// Same draw as [`LinearLayer::init`] from the dimensions alone, which is
    /// all the server learns during the handshake.
    pub fn init_dims(in_features: usize, out_features: usize, seed: u64) -> Self {
        let spec = LayerSpec::Linear { in_features, out_features };
        let p = LayerParams::init(&spec, seed, SERVER_LAYER_TAG).expect("linear has params");
        Self { w: p.w, b: p.b }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        linear_forward(x, &self.w, &self.b)
    }

    /// Returns `(grad_x, grad_W, grad_b)`; `grad_x` uses the current weights.
    pub fn backward(&self, grad_out: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor, Tensor), NnError> {
        linear_backward(grad_out, x, &self.w)
    }

    pub fn sgd(&mut self, grad_w: &Tensor, grad_b: &Tensor, lr: f64) -> Result<(), NnError> {
        sgd_step(&mut self.w, grad_w, lr)?;
        sgd_step(&mut self.b, grad_b, lr)
    }
}

#[derive(Clone, Debug)]
enum Cache {
    Conv(Conv1dCache),
    Lrelu(Tensor, f64),
    Pool(MaxPoolCache),
    Linear(Tensor, Vec<usize>),
}

/// Intermediate values of one client forward pass.
#[derive(Clone, Debug)]
pub struct ClientCache {
    caches: Vec<Cache>,
}

/// Gradients of every parametrized client layer, in layer order.
#[derive(Clone, Debug)]
pub struct ClientGrads {
    pub layers: Vec<Option<LayerParams>>,
}

/// Client-side layers with their Adam state.
#[derive(Clone, Debug)]
pub struct ClientModel {
    spec: ModelSpec,
    params: Vec<Option<LayerParams>>,
    adam: Vec<Option<(AdamState, AdamState)>>,
    step: u64,
}

impl ClientModel {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let params: Vec<Option<LayerParams>> =
            spec.client_layers().iter().enumerate().map(|(i, l)| LayerParams::init(l, seed, i)).collect();
        let adam = params.iter().map(|p| p.as_ref().map(|p| (AdamState::new(p.w.len()), AdamState::new(p.b.len())))).collect();
        Ok(Self { spec: spec.clone(), params, adam, step: 0 })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    /// Client layers up to the split; returns `a^(l)` as `[n, F]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ClientCache), NnError> {
        let (_, c, len) = x.dims3()?;
        if c != self.spec.input_channels || len != self.spec.input_length {
            return Err(NnError::Shape(format!(
                "input {:?} does not match model input [{}, {}]",
                x.shape(),
                self.spec.input_channels,
                self.spec.input_length
            )));
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.params.len());
        for (layer, p) in self.spec.client_layers().iter().zip(&self.params) {
            cur = match *layer {
                LayerSpec::Conv1d { stride, .. } => {
                    let p = p.as_ref().expect("conv params");
                    let (y, cache) = conv1d_forward(&cur, &p.w, &p.b, stride)?;
                    caches.push(Cache::Conv(cache));
                    y
                }
                LayerSpec::LeakyRelu { alpha } => {
                    let y = leaky_relu_forward(&cur, alpha);
                    caches.push(Cache::Lrelu(cur, alpha));
                    y
                }
                LayerSpec::MaxPool1d { window } => {
                    let (y, cache) = maxpool1d_forward(&cur, window)?;
                    caches.push(Cache::Pool(cache));
                    y
                }
                LayerSpec::Linear { .. } => {
                    let p = p.as_ref().expect("linear params");
                    let shape = cur.shape().to_vec();
                    let flat = flatten(cur)?;
                    let y = linear_forward(&flat, &p.w, &p.b)?;
                    caches.push(Cache::Linear(flat, shape));
                    y
                }
                LayerSpec::Softmax => unreachable!("validated"),
            };
        }
        Ok((flatten(cur)?, ClientCache { caches }))
    }

    /// Backpropagates `∂J/∂a^(l)` through the client layers.
    pub fn backward(&self, grad: &Tensor, cache: &ClientCache) -> Result<ClientGrads, NnError> {
        let mut layers: Vec<Option<LayerParams>> = vec![None; self.params.len()];
        let mut g = grad.clone();
        for (i, c) in cache.caches.iter().enumerate().rev() {
            g = match c {
                Cache::Conv(cc) => {
                    let (n, _, len) = cc.x.dims3()?;
                    let out_len = (len - cc.w.shape()[2]) / cc.stride + 1;
                    let g3 = g.reshape(vec![n, cc.w.shape()[0], out_len])?;
                    let (gx, gw, gb) = conv1d_backward(&g3, cc)?;
                    layers[i] = Some(LayerParams { w: gw, b: gb });
                    gx
                }
                Cache::Lrelu(x, alpha) => {
                    let g3 = g.reshape(x.shape().to_vec())?;
                    leaky_relu_backward(&g3, x, *alpha)?
                }
                Cache::Pool(pc) => maxpool1d_backward(&g, pc)?,
                Cache::Linear(x, shape) => {
                    let p = self.params[i].as_ref().expect("linear params");
                    let (gx, gw, gb) = linear_backward(&g, x, &p.w)?;
                    layers[i] = Some(LayerParams { w: gw, b: gb });
                    gx.reshape(shape.clone())?
                }
            };
        }
        Ok(ClientGrads { layers })
    }

    /// One Adam step on every parametrized layer.
    pub fn adam_update(&mut self, grads: &ClientGrads, lr: f64) -> Result<(), NnError> {
        self.step += 1;
        for ((p, st), g) in self.params.iter_mut().zip(&mut self.adam).zip(&grads.layers) {
            if let (Some(p), Some((sw, sb)), Some(g)) = (p.as_mut(), st.as_mut(), g.as_ref()) {
                adam_step(&mut p.w, &g.w, sw, lr, self.step)?;
                adam_step(&mut p.b, &g.b, sb, lr, self.step)?;
            }
        }
        Ok(())
    }

    /// All parameter tensors in layer order (weight then bias).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.params.iter().flatten().flat_map(|p| [&p.w, &p.b]).collect()
    }

    /// Largest absolute difference over all parameters of two models.
    pub fn max_abs_diff(&self, other: &ClientModel) -> Result<f64, NnError> {
        let mut m = 0.0f64;
        for (a, b) in self.tensors().into_iter().zip(other.tensors()) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }
}

fn flatten(t: Tensor) -> Result<Tensor, NnError> {
    let n = t.shape()[0];
    let rest = t.len() / n.max(1);
    t.reshape(vec![n, rest])
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HSW1";

/// `"HSW1" | tensor count u32 | per tensor: ndim u32, dims u32[], f64 data`.
pub fn save_checkpoint(tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Vec<Tensor>, NnError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], NnError> {
        let end =
            pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| NnError::Config("truncated checkpoint".into()))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(NnError::Config("not a weight checkpoint".into()));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = u32_of(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nd = u32_of(take(4)?);
        let shape = (0..nd).map(|_| take(4).map(u32_of)).collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let data = take(len.checked_mul(8).ok_or_else(|| NnError::Config("checkpoint too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(shape, data)?);
    }
    if pos != bytes.len() {
        return Err(NnError::Config("trailing bytes in checkpoint".into()));
    }
    Ok(out)
}
