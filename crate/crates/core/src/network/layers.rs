//! Network components, each recorded onto a [`Graph`].

use std::collections::BTreeMap;

use super::{FusionMode, NetConfig, ReadMode};
use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Graph handles of every registered parameter, by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn new(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter {}", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn conv<T: Real>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{}.w", name))?;
    let b = p.get(&format!("{}.b", name))?;
    g.conv2d(x, w, b, stride, pad)
}

fn linear<T: Real>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{}.w", name))?;
    let b = p.get(&format!("{}.b", name))?;
    g.linear(x, w, b)
}

fn layer_norm<T: Real>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{}.g", name))?;
    let beta = p.get(&format!("{}.b", name))?;
    g.layer_norm(x, gamma, beta)
}

/// Two residual blocks `x + conv(relu(conv(x)))`; size and channels kept.
pub fn conv_stem_forward<T: Real>(g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!("stem expects [N, 3, H, W], got {:?}", shape)));
    }
    let mut h = x;
    for block in 0..2 {
        let inner = conv(g, p, &format!("stem.{}.conv1", block), h, 1, 1)?;
        let inner = g.relu(inner);
        let inner = conv(g, p, &format!("stem.{}.conv2", block), inner, 1, 1)?;
        h = g.add(h, inner)?;
    }
    Ok(h)
}

/// Non-overlapping `m×m` patch projection, readout token and positional
/// embeddings: `[N, 3, H, W] → [N, H·W/m² + 1, D]`.
pub fn patch_embed<T: Real>(g: &mut Graph<T>, p: &ParamVars, x: Var, cfg: &NetConfig) -> Result<Var> {
    let tokens = patch_tokens(g, p, x, cfg)?;
    let readout = p.get("embed.readout")?;
    let tokens = g.prepend_token(tokens, readout)?;
    let pos = p.get("embed.pos")?;
    g.add_broadcast(tokens, pos)
}

/// Patch projection alone, before readout token and positional embeddings.
pub fn patch_tokens<T: Real>(g: &mut Graph<T>, p: &ParamVars, x: Var, cfg: &NetConfig) -> Result<Var> {
    let shape = g.shape(x);
    let m = cfg.patch_size;
    if shape.len() != 4 || shape[2] % m != 0 || shape[3] % m != 0 {
        return Err(Error::Shape(format!(
            "patch size {} does not divide input {:?}",
            m, shape
        )));
    }
    let map = conv(g, p, "embed.proj", x, m, 0)?;
    g.tokens_from_map(map)
}

/// Pre-norm transformer block. Returns the new tokens and the attention
/// probabilities `[N, heads, T, T]`.
pub fn mhsa_block<T: Real>(g: &mut Graph<T>, p: &ParamVars, layer: usize, x: Var, heads: usize) -> Result<(Var, Tensor<T>)> {
    let pre = format!("enc.{}", layer);
    let h = layer_norm(g, p, &format!("{}.ln1", pre), x)?;
    let qkv = linear(g, p, &format!("{}.attn.qkv", pre), h)?;
    let (ctx, probs) = g.attention(qkv, heads)?;
    let a = linear(g, p, &format!("{}.attn.proj", pre), ctx)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{}.ln2", pre), x)?;
    let h = linear(g, p, &format!("{}.mlp.fc1", pre), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{}.mlp.fc2", pre), h)?;
    Ok((g.add(x, h)?, probs))
}

/// Runs the encoder, returning the tapped token sets in tap order and the
/// attention maps of every layer.
pub fn encoder_forward<T: Real>(g: &mut Graph<T>, p: &ParamVars, tokens: Var, cfg: &NetConfig) -> Result<(Vec<Var>, Vec<Tensor<T>>)> {
    let last = cfg.taps.last().copied().unwrap_or(0);
    let mut taps = Vec::with_capacity(cfg.taps.len());
    let mut maps = Vec::with_capacity(last);
    let mut x = tokens;
    for layer in 0..cfg.layers {
        let (next, probs) = mhsa_block(g, p, layer, x, cfg.heads)?;
        x = next;
        maps.push(probs);
        if cfg.taps.contains(&(layer + 1)) {
            taps.push(x);
        }
    }
    Ok((taps, maps))
}

/// Kernel, padding and output padding of the transposed convolution that
/// upsamples by `factor`.
pub fn upsample_geometry(factor: usize) -> (usize, usize, usize) {
    if factor == 2 {
        (3, 1, 1)
    } else {
        (factor, 0, 0)
    }
}

/// Read, Concat and Resample for tap `index`: `[N, T+1, D]` tokens to a
/// `[N, D̂, H/s, W/s]` map.
pub fn reassemble<T: Real>(g: &mut Graph<T>, p: &ParamVars, index: usize, tokens: Var, cfg: &NetConfig) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] < 2 {
        return Err(Error::Shape(format!("reassemble expects [N, T+1, D], got {:?}", shape)));
    }
    let patches = shape[1] - 1;
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches {
        return Err(Error::Shape(format!("{} patch tokens do not form a square grid", patches)));
    }
    let pre = format!("reassemble.{}", index);
    let read = match cfg.read {
        ReadMode::Ignore => g.drop_first_token(tokens)?,
        ReadMode::Add => g.read_add(tokens)?,
        ReadMode::Project => {
            let cat = g.read_concat(tokens)?;
            let proj = linear(g, p, &format!("{}.read", pre), cat)?;
            g.gelu(proj)
        }
    };
    let map = g.map_from_tokens(read, side, side)?;
    let map = conv(g, p, &format!("{}.proj", pre), map, 1, 0)?;
    let (m, s) = (cfg.patch_size, cfg.ratios[index]);
    if s < m {
        let (_, pad, out_pad) = upsample_geometry(m / s);
        let w = p.get(&format!("{}.resample.w", pre))?;
        let b = p.get(&format!("{}.resample.b", pre))?;
        g.conv_transpose2d(map, w, b, m / s, pad, out_pad)
    } else if s > m {
        conv(g, p, &format!("{}.resample", pre), map, s / m, 1)
    } else {
        Ok(map)
    }
}

/// Fuses maps ordered coarse to fine into one map at the finest stride.
pub fn decoder_fuse<T: Real>(g: &mut Graph<T>, p: &ParamVars, maps: &[Var], cfg: &NetConfig) -> Result<Var> {
    let Some((&first, rest)) = maps.split_first() else {
        return Err(Error::Empty("decoder needs at least one map".into()));
    };
    let x = conv(g, p, "fuse.0", first, 1, 1)?;
    let mut x = g.relu(x);
    for (i, &next) in rest.iter().enumerate() {
        let up = g.upsample2x(x)?;
        let (su, sn) = (g.shape(up), g.shape(next));
        if su[2..] != sn[2..] {
            return Err(Error::Shape(format!(
                "fusion resolution mismatch: upsampled {:?} vs next {:?}",
                su, sn
            )));
        }
        let joined = match cfg.fusion {
            FusionMode::Concat => g.concat_channels(up, next)?,
            FusionMode::Add => g.add(up, next)?,
        };
        let y = conv(g, p, &format!("fuse.{}", i + 1), joined, 1, 1)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// Heatmap (after sigmoid) and offset heads.
pub fn heads<T: Real>(g: &mut Graph<T>, p: &ParamVars, fused: Var) -> Result<(Var, Var)> {
    let h = conv(g, p, "head.hm.conv1", fused, 1, 1)?;
    let h = g.relu(h);
    let h = conv(g, p, "head.hm.conv2", h, 1, 0)?;
    let heat = g.sigmoid(h);
    let o = conv(g, p, "head.off.conv1", fused, 1, 1)?;
    let o = g.relu(o);
    let off = conv(g, p, "head.off.conv2", o, 1, 0)?;
    Ok((heat, off))
}
