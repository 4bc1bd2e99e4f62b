//! Convolutional stem, token encoder with multi-level taps, reassemble
//! blocks, fusion decoder and keypoint heads.

pub mod layers;

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
pub use layers::ParamVars;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IMPF0001";

/// Initial heatmap-head bias, `-ln((1 - 0.1) / 0.1)`.
pub const HEATMAP_BIAS_INIT: f64 = -2.19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadMode {
    Ignore,
    Add,
    Project,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// 1-based encoder layers whose outputs feed the decoder.
    pub taps: Vec<usize>,
    /// Output stride of each tap's reassembled map.
    pub ratios: Vec<usize>,
    pub reassemble_dim: usize,
    pub decoder_dim: usize,
    pub stem_width: usize,
    pub head_width: usize,
    pub use_stem: bool,
    pub fusion: FusionMode,
    pub read: ReadMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 2,
            taps: vec![1, 2, 3, 4],
            ratios: vec![4, 8, 16, 32],
            reassemble_dim: 16,
            decoder_dim: 16,
            stem_width: 8,
            head_width: 16,
            use_stem: true,
            fusion: FusionMode::Concat,
            read: ReadMode::Ignore,
        }
    }
}

impl NetConfig {
    /// The full-size layout: 512 input, 16-pixel patches, 12 layers.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 512,
            patch_size: 16,
            embed_dim: 768,
            heads: 12,
            layers: 12,
            mlp_ratio: 4,
            taps: vec![3, 6, 9, 12],
            ratios: vec![4, 8, 16, 32],
            reassemble_dim: 256,
            decoder_dim: 256,
            stem_width: 64,
            head_width: 64,
            ..Self::default()
        }
    }

    /// The ablation variant: no stem, element-wise-add fusion.
    pub fn ablated(&self) -> Self {
        Self {
            use_stem: false,
            fusion: FusionMode::Add,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (h, m) = (self.image_size, self.patch_size);
        if h == 0 || m == 0 || h % m != 0 {
            return bad(format!("patch size {} must divide image size {}", m, h));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return bad("layers and mlp ratio must be positive".into());
        }
        if self.taps.is_empty() || self.taps.len() != self.ratios.len() {
            return bad(format!("{} taps but {} ratios", self.taps.len(), self.ratios.len()));
        }
        if self.taps[0] == 0 || self.taps.windows(2).any(|w| w[0] >= w[1]) || *self.taps.last().unwrap() > self.layers {
            return bad(format!("taps {:?} must be strictly increasing within 1..={}", self.taps, self.layers));
        }
        for w in self.ratios.windows(2) {
            if w[1] != 2 * w[0] {
                return bad(format!("ratios {:?} must double from one tap to the next", self.ratios));
            }
        }
        for &s in &self.ratios {
            if s == 0 || h % s != 0 || !(m % s == 0 || s % m == 0) {
                return bad(format!("ratio {} incompatible with image {} and patch {}", s, h, m));
            }
        }
        if [self.reassemble_dim, self.decoder_dim, self.head_width].contains(&0) || (self.use_stem && self.stem_width == 0) {
            return bad("channel widths must be positive".into());
        }
        if self.fusion == FusionMode::Add && self.reassemble_dim != self.decoder_dim {
            return bad("add fusion needs reassemble_dim == decoder_dim".into());
        }
        Ok(())
    }

    /// Heatmap stride `g`.
    pub fn stride(&self) -> usize {
        self.ratios[0]
    }

    pub fn heatmap_size(&self) -> usize {
        self.image_size / self.stride()
    }

    /// Token count including the readout token.
    pub fn token_count(&self) -> usize {
        (self.image_size / self.patch_size).pow(2) + 1
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    TruncNormal,
    FanIn(usize),
    Zeros,
    Ones,
    Const(f64),
}

fn param_layout(cfg: &NetConfig) -> BTreeMap<String, (Vec<usize>, Init)> {
    let mut out = BTreeMap::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        out.insert(name, (shape, init));
    };
    let conv = |add: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, o: usize, c: usize, k: usize| {
        add(format!("{}.w", name), vec![o, c, k, k], Init::FanIn(c * k * k));
        add(format!("{}.b", name), vec![o], Init::Zeros);
    };
    let lin = |add: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, i: usize, o: usize| {
        add(format!("{}.w", name), vec![i, o], Init::TruncNormal);
        add(format!("{}.b", name), vec![o], Init::Zeros);
    };
    let (d, m) = (cfg.embed_dim, cfg.patch_size);
    if cfg.use_stem {
        for block in 0..2 {
            conv(&mut add, &format!("stem.{}.conv1", block), cfg.stem_width, 3, 3);
            conv(&mut add, &format!("stem.{}.conv2", block), 3, cfg.stem_width, 3);
        }
    }
    add("embed.proj.w".into(), vec![d, 3, m, m], Init::TruncNormal);
    add("embed.proj.b".into(), vec![d], Init::Zeros);
    add("embed.readout".into(), vec![d], Init::TruncNormal);
    add("embed.pos".into(), vec![cfg.token_count(), d], Init::TruncNormal);
    for l in 0..cfg.layers {
        let pre = format!("enc.{}", l);
        for ln in ["ln1", "ln2"] {
            add(format!("{}.{}.g", pre, ln), vec![d], Init::Ones);
            add(format!("{}.{}.b", pre, ln), vec![d], Init::Zeros);
        }
        lin(&mut add, &format!("{}.attn.qkv", pre), d, 3 * d);
        lin(&mut add, &format!("{}.attn.proj", pre), d, d);
        lin(&mut add, &format!("{}.mlp.fc1", pre), d, cfg.mlp_ratio * d);
        lin(&mut add, &format!("{}.mlp.fc2", pre), cfg.mlp_ratio * d, d);
    }
    let dh = cfg.reassemble_dim;
    for (i, &s) in cfg.ratios.iter().enumerate() {
        let pre = format!("reassemble.{}", i);
        if cfg.read == ReadMode::Project {
            lin(&mut add, &format!("{}.read", pre), 2 * d, d);
        }
        conv(&mut add, &format!("{}.proj", pre), dh, d, 1);
        if s < m {
            let (k, _, _) = layers::upsample_geometry(m / s);
            add(format!("{}.resample.w", pre), vec![dh, dh, k, k], Init::FanIn(dh * k * k));
            add(format!("{}.resample.b", pre), vec![dh], Init::Zeros);
        } else if s > m {
            conv(&mut add, &format!("{}.resample", pre), dh, dh, 3);
        }
    }
    let dec = cfg.decoder_dim;
    conv(&mut add, "fuse.0", dec, dh, 3);
    for i in 1..cfg.ratios.len() {
        let cin = match cfg.fusion {
            FusionMode::Concat => dec + dh,
            FusionMode::Add => dec,
        };
        conv(&mut add, &format!("fuse.{}", i), dec, cin, 3);
    }
    let hw = cfg.head_width;
    conv(&mut add, "head.hm.conv1", hw, dec, 3);
    conv(&mut add, "head.hm.conv2", 1, hw, 1);
    conv(&mut add, "head.off.conv1", hw, dec, 3);
    conv(&mut add, "head.off.conv2", 2, hw, 1);
    out.get_mut("head.hm.conv2.b").expect("heatmap bias").1 = Init::Const(HEATMAP_BIAS_INIT);
    out
}

/// Named parameter tensors, kept in sorted-name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialisation: truncated normal (std 0.02) for projections
    /// and embeddings, fan-in scaled normal for convolutions.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunc = Normal::new(0.0, 0.02).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (name, (shape, init)) in param_layout(cfg) {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::ONE),
                Init::Const(v) => Tensor::full(&shape, T::from_f64(v)),
                Init::TruncNormal => Tensor::from_fn(&shape, |_| loop {
                    let v: f64 = trunc.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break T::from_f64(v);
                    }
                }),
                Init::FanIn(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(&mut rng)))
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// All-zero tensors with this layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Element-wise `self += other`; layouts must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn check_layout<U: Real>(&self, other: &ModelParams<U>) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|((na, a), (nb, b))| na != nb || a.shape() != b.shape())
        {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn register(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars::new(self.tensors.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect())
    }
}

/// Network outputs for a batch.
#[derive(Clone, Debug)]
pub struct NetOutput<T: Real> {
    /// `[N, 1, H/g, W/g]`, in `(0, 1)`.
    pub heatmap: Tensor<T>,
    /// `[N, 2, H/g, W/g]`.
    pub offsets: Tensor<T>,
    /// Per encoder layer, `[N, heads, T, T]`.
    pub attention: Vec<Tensor<T>>,
}

/// A recorded forward pass that can be differentiated.
pub struct ForwardPass<T: Real> {
    cache: Option<(Graph<T>, ParamVars, Var, Var)>,
    pub output: NetOutput<T>,
}

impl<T: Real> ForwardPass<T> {
    /// Drops the recorded activations; later `backward` calls fail.
    pub fn release_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Parameter gradients given the loss gradients with respect to the
    /// heatmap and offset outputs. Parameters the loss does not reach get
    /// zero gradients.
    pub fn backward(&self, d_heatmap: &Tensor<T>, d_offsets: &Tensor<T>) -> Result<ModelParams<T>> {
        let (graph, vars, heat, off) = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let mut grads = graph.backward(&[(*heat, d_heatmap.clone()), (*off, d_offsets.clone())])?;
        let tensors = vars
            .iter()
            .map(|(name, &v)| {
                let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
                (name.clone(), t)
            })
            .collect();
        Ok(ModelParams { tensors })
    }
}

/// Records the full network on a graph: `[N, 3, H, W] → (heatmap, offsets)`.
pub fn build<T: Real>(g: &mut Graph<T>, p: &ParamVars, images: Var, cfg: &NetConfig) -> Result<(Var, Var, Vec<Tensor<T>>)> {
    let shape = g.shape(images);
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.image_size || shape[3] != cfg.image_size {
        return Err(Error::Shape(format!(
            "network expects [N, 3, {s}, {s}], got {:?}",
            shape,
            s = cfg.image_size
        )));
    }
    let x = if cfg.use_stem {
        layers::conv_stem_forward(g, p, images)?
    } else {
        images
    };
    let tokens = layers::patch_embed(g, p, x, cfg)?;
    let (taps, attention) = layers::encoder_forward(g, p, tokens, cfg)?;
    let mut maps = Vec::with_capacity(taps.len());
    for (i, &t) in taps.iter().enumerate() {
        maps.push(layers::reassemble(g, p, i, t, cfg)?);
    }
    maps.reverse();
    let fused = layers::decoder_fuse(g, p, &maps, cfg)?;
    let (heat, off) = layers::heads(g, p, fused)?;
    Ok((heat, off, attention))
}

/// Forward pass keeping the activations for [`ForwardPass::backward`].
pub fn forward<T: Real>(cfg: &NetConfig, params: &ModelParams<T>, images: &Tensor<T>) -> Result<ForwardPass<T>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.input(images.clone());
    let (heat, off, attention) = build(&mut g, &vars, x, cfg)?;
    let output = NetOutput {
        heatmap: g.value(heat).clone(),
        offsets: g.value(off).clone(),
        attention,
    };
    Ok(ForwardPass {
        cache: Some((g, vars, heat, off)),
        output,
    })
}

/// Forward pass without keeping activations.
pub fn predict<T: Real>(cfg: &NetConfig, params: &ModelParams<T>, images: &Tensor<T>) -> Result<NetOutput<T>> {
    let mut pass = forward(cfg, params, images)?;
    pass.release_cache();
    Ok(pass.output)
}

/// A trained network: configuration plus single-precision weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ModelParams<f32>,
}

impl Model {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<NetOutput<f32>> {
        predict(&self.config, &self.params, images)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let malformed = |m: &str| Error::MalformedHeader(format!("checkpoint: {}", m));
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| malformed("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(malformed("bad magic"));
        }
        let read_u32 = |b: &mut &[u8]| -> Result<usize> {
            let mut w = [0u8; 4];
            b.read_exact(&mut w).map_err(|_| malformed("truncated record"))?;
            Ok(u32::from_le_bytes(w) as usize)
        };
        let json_len = read_u32(&mut bytes)?;
        if bytes.len() < json_len {
            return Err(malformed("truncated config"));
        }
        let config: NetConfig = serde_json::from_slice(&bytes[..json_len])?;
        config.validate()?;
        bytes = &bytes[json_len..];
        let layout = param_layout(&config);
        let mut tensors = BTreeMap::new();
        while !bytes.is_empty() {
            let name_len = read_u32(&mut bytes)?;
            if bytes.len() < name_len {
                return Err(malformed("truncated name"));
            }
            let name = String::from_utf8(bytes[..name_len].to_vec()).map_err(|_| malformed("name is not utf-8"))?;
            bytes = &bytes[name_len..];
            let rank = read_u32(&mut bytes)?;
            let shape = (0..rank).map(|_| read_u32(&mut bytes)).collect::<Result<Vec<_>>>()?;
            let expected = layout
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("unexpected parameter {}", name)))?;
            if expected.0 != shape {
                return Err(Error::Shape(format!("{}: expected {:?}, found {:?}", name, expected.0, shape)));
            }
            let n: usize = shape.iter().product();
            if bytes.len() < 4 * n {
                return Err(Error::SizeMismatch {
                    expected: 4 * n,
                    found: bytes.len(),
                });
            }
            let data = bytes[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            bytes = &bytes[4 * n..];
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if let Some(missing) = layout.keys().find(|k| !tensors.contains_key(*k)) {
            return Err(Error::Shape(format!("checkpoint lacks parameter {}", missing)));
        }
        let params = ModelParams { tensors };
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
