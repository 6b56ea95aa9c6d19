//! A small pre-norm vision transformer that exposes its per-block token
//! grids.
//!
//! Patches are embedded by a shared affine map, optionally offset by a
//! learned absolute position embedding, passed through `blocks` transformer
//! blocks (multi-head self-attention and a two-layer ReLU feed-forward, both
//! residual) and a final layer norm. The classifier reads the global average
//! of the final tokens.

use serde::{Deserialize, Serialize};

use crate::drloc::head::{affine, linear};
use crate::error::{Error, Result};
use crate::grid::{pool_to_target, sequence_to_grid, BlockGridSet};
use crate::numcore::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::SeededRng;

pub const IMAGE_CHANNELS: usize = 3;
const POS_EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub use_abs_pos_embed: bool,
    /// Pool the grids handed to the pretext task 2x2 before use.
    pub pool_final_grid: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_side: 28,
            patch_side: 4,
            embed_dim: 32,
            blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            classes: 10,
            use_abs_pos_embed: true,
            pool_final_grid: false,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!(
                "image_side {} is not divisible by patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 {
            return bad("blocks and mlp_ratio must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.native_side() < 2 {
            return bad("token grid must be at least 2x2".into());
        }
        if self.pool_final_grid && (!self.native_side().is_multiple_of(2) || self.native_side() < 4) {
            return bad(format!(
                "pool_final_grid needs an even native grid of side >= 4, got {}",
                self.native_side()
            ));
        }
        Ok(())
    }

    /// Side of the backbone's token grid.
    pub fn native_side(&self) -> usize {
        self.image_side / self.patch_side.max(1)
    }

    /// Side of the grid the pretext task runs on.
    pub fn pretext_side(&self) -> usize {
        if self.pool_final_grid {
            self.native_side() / 2
        } else {
            self.native_side()
        }
    }

    pub fn tokens(&self) -> usize {
        self.native_side() * self.native_side()
    }

    pub fn patch_dim(&self) -> usize {
        IMAGE_CHANNELS * self.patch_side * self.patch_side
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    norm1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct VitModel {
    pub config: VitConfig,
    pub params: ParamSet,
    patch_embed: (ParamId, ParamId),
    pos_embed: Option<ParamId>,
    blocks: Vec<BlockParams>,
    norm: (ParamId, ParamId),
    classifier: (ParamId, ParamId),
}

/// Forward outputs.
#[derive(Clone, Debug)]
pub struct VitOutput {
    /// `[n, classes]`
    pub logits: Var,
    /// One grid per block as seen by the pretext task (pooled when
    /// configured). The last entry is the post-norm final grid.
    pub grids: BlockGridSet,
}

fn layer_norm_params(params: &mut ParamSet, prefix: &str, d: usize) -> (ParamId, ParamId) {
    (
        params.add(format!("{prefix}.gamma"), Tensor::filled(&[d], 1.0), false),
        params.add(format!("{prefix}.beta"), Tensor::zeros(&[d]), false),
    )
}

/// Rearranges `[n, 3, H, W]` images into `[n, tokens, 3 * p * p]` patch
/// vectors. Token `gy * K + gx` covers rows `gy*p..` and columns `gx*p..`;
/// each vector is ordered channel, then row, then column.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != IMAGE_CHANNELS || s[2] != s[3] || !s[2].is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "patchify: expected [n, 3, H, H] with H divisible by {patch}, got {s:?}"
        )));
    }
    let (n, h) = (s[0], s[2]);
    let kside = h / patch;
    let pd = IMAGE_CHANNELS * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for gy in 0..kside {
            for gx in 0..kside {
                for c in 0..IMAGE_CHANNELS {
                    for py in 0..patch {
                        let row = gy * patch + py;
                        let base = ((b * IMAGE_CHANNELS + c) * h + row) * h + gx * patch;
                        out.extend_from_slice(&src[base..base + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, kside * kside, pd], out)
}

impl VitModel {
    pub fn new(config: VitConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamSet::new();
        let patch_embed = affine(&mut params, "patch_embed", config.patch_dim(), d, rng);
        let pos_embed = config.use_abs_pos_embed.then(|| {
            let t = Tensor::from_fn(&[config.tokens(), d], |_| POS_EMBED_STD * rng.normal());
            params.add("pos_embed", t, false)
        });
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.blocks)
            .map(|l| {
                let p = format!("blocks.{l}");
                BlockParams {
                    norm1: layer_norm_params(&mut params, &format!("{p}.norm1"), d),
                    qkv: affine(&mut params, &format!("{p}.attn.qkv"), d, 3 * d, rng),
                    proj: affine(&mut params, &format!("{p}.attn.proj"), d, d, rng),
                    norm2: layer_norm_params(&mut params, &format!("{p}.norm2"), d),
                    fc1: affine(&mut params, &format!("{p}.mlp.fc1"), d, hidden, rng),
                    fc2: affine(&mut params, &format!("{p}.mlp.fc2"), hidden, d, rng),
                }
            })
            .collect();
        let norm = layer_norm_params(&mut params, "norm", d);
        let classifier = affine(&mut params, "classifier", d, config.classes, rng);
        Ok(VitModel {
            config,
            params,
            patch_embed,
            pos_embed,
            blocks,
            norm,
            classifier,
        })
    }

    /// Number of scalar parameters implied by a configuration.
    pub fn expected_param_count(c: &VitConfig) -> usize {
        let d = c.embed_dim;
        let h = d * c.mlp_ratio;
        let pos = if c.use_abs_pos_embed { c.tokens() * d } else { 0 };
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        (c.patch_dim() * d + d) + pos + c.blocks * block + 2 * d + (d * c.classes + c.classes)
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, blk: &BlockParams, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.heads;
        let dh = d / h;
        let qkv = linear(tape, x, bound.get(blk.qkv.0), bound.get(blk.qkv.1))?;
        let mut split = |offset: usize| -> Result<Var> {
            let part = tape.slice(qkv, 2, offset, d)?;
            let part = tape.reshape(part, &[n, t, h, dh])?;
            let part = tape.transpose(part, 1, 2)?;
            tape.reshape(part, &[n * h, t, dh])
        };
        let q = split(0)?;
        let k = split(d)?;
        let v = split(2 * d)?;
        let kt = tape.transpose(k, 1, 2)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_lastdim(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.reshape(ctx, &[n, h, t, dh])?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &[n, t, d])?;
        linear(tape, ctx, bound.get(blk.proj.0), bound.get(blk.proj.1))
    }

    fn block(&self, tape: &mut Tape, bound: &Bound, blk: &BlockParams, x: Var) -> Result<Var> {
        let h = tape.layernorm_lastdim(x, bound.get(blk.norm1.0), bound.get(blk.norm1.1))?;
        let a = self.attention(tape, bound, blk, h)?;
        let x = tape.add(x, a)?;
        let h = tape.layernorm_lastdim(x, bound.get(blk.norm2.0), bound.get(blk.norm2.1))?;
        let f = linear(tape, h, bound.get(blk.fc1.0), bound.get(blk.fc1.1))?;
        let f = tape.relu(f);
        let f = linear(tape, f, bound.get(blk.fc2.0), bound.get(blk.fc2.1))?;
        tape.add(x, f)
    }

    /// Runs the backbone on `[n, 3, H, W]` images.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: &Tensor) -> Result<VitOutput> {
        let side = self.config.image_side;
        let s = images.shape();
        if s.len() != 4 || s[1] != IMAGE_CHANNELS || s[2] != side || s[3] != side {
            return Err(Error::Config(format!(
                "model expects [n, 3, {side}, {side}] images, got {s:?}"
            )));
        }
        let patches = tape.constant(patchify(images, self.config.patch_side)?);
        let mut x = linear(
            tape,
            patches,
            bound.get(self.patch_embed.0),
            bound.get(self.patch_embed.1),
        )?;
        if let Some(pos) = self.pos_embed {
            x = tape.add_bias(x, bound.get(pos))?;
        }
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = self.block(tape, bound, blk, x)?;
            block_outputs.push(x);
        }
        let last = tape.layernorm_lastdim(x, bound.get(self.norm.0), bound.get(self.norm.1))?;
        *block_outputs.last_mut().expect("at least one block") = last;

        let pooled = tape.mean_axis(last, 1)?;
        let logits = linear(tape, pooled, bound.get(self.classifier.0), bound.get(self.classifier.1))?;

        let target = self.config.pretext_side();
        let grids = block_outputs
            .into_iter()
            .map(|tokens| {
                let g = sequence_to_grid(tape, tokens)?;
                pool_to_target(tape, &g, target)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VitOutput {
            logits,
            grids: BlockGridSet(grids),
        })
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Config(format!(
            "classification_loss: logits {shape:?} for {} labels",
            labels.len()
        )));
    }
    let classes = shape[1];
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Data(format!("record {i}: label {l} outside 0..{classes}")));
    }
    let logp = tape.log_softmax_lastdim(logits)?;
    let flat = tape.reshape(logp, &[labels.len() * classes, 1])?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect();
    let picked = tape.gather_rows(flat, &idx)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}
