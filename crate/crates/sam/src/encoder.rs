//! Windowed ViT image encoder with facet and block-output taps.

use candle_core::{DType, IndexOp, Module, Result, Tensor, D};
use candle_nn::{conv2d, conv2d_no_bias, layer_norm, linear, Conv2d, Conv2dConfig, LayerNorm, Linear, VarBuilder};
use candle_transformers::models::segment_anything::LayerNorm2d;

use crate::EncoderConfig;

struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
    rel_pos: Option<(Tensor, Tensor)>,
}

/// `(q, k, c)` table of relative position embeddings for equal query/key
/// extents.
fn rel_pos_table(size: usize, table: &Tensor) -> Result<Tensor> {
    let idx: Vec<u32> = (0..size)
        .flat_map(|q| (0..size).map(move |k| (q + size - 1 - k) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, size * size, table.device())?;
    table.index_select(&idx, 0)?.reshape((size, size, ()))
}

impl Attention {
    fn new(dim: usize, heads: usize, rel_size: Option<usize>, vb: VarBuilder) -> Result<Self> {
        let head_dim = dim / heads;
        let rel_pos = match rel_size {
            Some(s) => Some((
                vb.get((2 * s - 1, head_dim), "rel_pos_h")?,
                vb.get((2 * s - 1, head_dim), "rel_pos_w")?,
            )),
            None => None,
        };
        Ok(Self {
            qkv: linear(dim, dim * 3, vb.pp("qkv"))?,
            proj: linear(dim, dim, vb.pp("proj"))?,
            heads,
            scale: 1.0 / (head_dim as f64).sqrt(),
            rel_pos,
        })
    }

    /// Decomposed relative position bias for one head: `q` is `(b, h, w, c)`,
    /// the result `(b, h*w, h*w)`.
    fn rel_bias(&self, q: &Tensor, h: usize, w: usize) -> Result<Option<Tensor>> {
        let Some((rh, rw)) = &self.rel_pos else {
            return Ok(None);
        };
        let (b, _, _, c) = q.dims4()?;
        let th = rel_pos_table(h, rh)?; // (h, kh, c)
        let tw = rel_pos_table(w, rw)?; // (w, kw, c)
        let by_row = q.permute((1, 0, 2, 3))?.reshape((h, b * w, c))?;
        let rel_h = by_row
            .matmul(&th.transpose(1, 2)?.contiguous()?)?
            .reshape((h, b, w, h))?
            .permute((1, 0, 2, 3))?; // (b, h, w, kh)
        let by_col = q.permute((2, 0, 1, 3))?.reshape((w, b * h, c))?;
        let rel_w = by_col
            .matmul(&tw.transpose(1, 2)?.contiguous()?)?
            .reshape((w, b, h, w))?
            .permute((1, 2, 0, 3))?; // (b, h, w, kw)
        let bias = rel_h
            .unsqueeze(4)?
            .broadcast_add(&rel_w.unsqueeze(3)?)?
            .reshape((b, h * w, h * w))?;
        Ok(Some(bias))
    }

    /// Attention over `qkv` of shape `(b, h, w, 3*dim)`; heads are processed
    /// one at a time to bound memory on the global layers.
    fn attend(&self, qkv: &Tensor) -> Result<Tensor> {
        let (b, h, w, c3) = qkv.dims4()?;
        let dim = c3 / 3;
        let hd = dim / self.heads;
        let qkv = qkv.reshape((b, h * w, 3, self.heads, hd))?;
        let mut outs = Vec::with_capacity(self.heads);
        for n in 0..self.heads {
            let q = qkv.i((.., .., 0, n))?.contiguous()?;
            let k = qkv.i((.., .., 1, n))?.contiguous()?;
            let v = qkv.i((.., .., 2, n))?.contiguous()?;
            let mut attn = (&q * self.scale)?.matmul(&k.t()?)?;
            if let Some(bias) = self.rel_bias(&q.reshape((b, h, w, hd))?, h, w)? {
                attn = (attn + bias)?;
            }
            let attn = candle_nn::ops::softmax_last_dim(&attn)?;
            outs.push(attn.matmul(&v)?);
        }
        let out = Tensor::stack(&outs, 2)?.reshape((b, h * w, dim))?;
        self.proj.forward(&out)?.reshape((b, h, w, dim))
    }
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    window: usize,
}

fn pad_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, xh, xw, _) = x.dims4()?;
    let x = if h > xh { x.pad_with_zeros(1, 0, h - xh)? } else { x.clone() };
    if w > xw {
        x.pad_with_zeros(2, 0, w - xw)
    } else {
        Ok(x)
    }
}

fn partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h / ws, ws, w / ws, ws, c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * (h / ws) * (w / ws), ws, ws, c))
}

fn unpartition(x: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    x.reshape((b, h / ws, w / ws, ws, ws, c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b, h, w, c))
}

impl Block {
    fn new(cfg: &EncoderConfig, index: usize, vb: VarBuilder) -> Result<Self> {
        let dim = cfg.embed_dim;
        let grid = cfg.grid();
        let window = if cfg.global_attn_indexes.contains(&index) {
            0
        } else {
            cfg.window_size
        };
        let rel = if window == 0 { grid } else { window };
        Ok(Self {
            norm1: layer_norm(dim, 1e-6, vb.pp("norm1"))?,
            attn: Attention::new(dim, cfg.num_heads, cfg.use_rel_pos.then_some(rel), vb.pp("attn"))?,
            norm2: layer_norm(dim, 1e-6, vb.pp("norm2"))?,
            lin1: linear(dim, dim * 4, vb.pp("mlp.lin1"))?,
            lin2: linear(dim * 4, dim, vb.pp("mlp.lin2"))?,
            window,
        })
    }

    /// Returns `(qkv, output)`; `qkv` is `(b, h, w, 3*dim)` on the unpadded
    /// token grid.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, w, _) = x.dims4()?;
        let normed = self.norm1.forward(x)?;
        let attn = if self.window == 0 {
            let qkv = self.attn.qkv.forward(&normed)?;
            let out = self.attn.attend(&qkv)?;
            (qkv, out)
        } else {
            let ws = self.window;
            let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
            // padded tokens are zero before the projection, as in the reference encoder
            let qkv = self.attn.qkv.forward(&pad_to(&normed, hp, wp)?)?;
            let out = self.attn.attend(&partition(&qkv, ws)?)?;
            let out = unpartition(&out, ws, b, hp, wp)?.narrow(1, 0, h)?.narrow(2, 0, w)?;
            (qkv.narrow(1, 0, h)?.narrow(2, 0, w)?, out)
        };
        let (qkv, out) = attn;
        let x = (x + out)?;
        let mlp = self.norm2.forward(&x)?.apply(&self.lin1)?.gelu_erf()?.apply(&self.lin2)?;
        Ok((qkv, (x + mlp)?))
    }
}

/// Which intermediate tensors one encoder pass should keep.
#[derive(Debug, Clone, Copy, Default)]
pub struct Taps {
    pub qkv_layer: Option<usize>,
    pub output_layer: Option<usize>,
    pub neck: bool,
}

#[derive(Debug, Default)]
pub struct Tapped {
    /// `(1, g, g, 3*dim)`.
    pub qkv: Option<Tensor>,
    /// `(1, g, g, dim)`.
    pub output: Option<Tensor>,
    /// `(1, out_chans, g, g)`.
    pub neck: Option<Tensor>,
}

pub struct Encoder {
    patch_embed: Conv2d,
    pos_embed: Option<Tensor>,
    blocks: Vec<Block>,
    neck_conv1: Conv2d,
    neck_ln1: LayerNorm2d,
    neck_conv2: Conv2d,
    neck_ln2: LayerNorm2d,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, vb: VarBuilder) -> Result<Self> {
        let patch = Conv2dConfig {
            stride: cfg.patch_size,
            ..Default::default()
        };
        let grid = cfg.grid();
        let pos_embed = if cfg.use_abs_pos {
            Some(vb.get((1, grid, grid, cfg.embed_dim), "pos_embed")?)
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(cfg, i, vb.pp("blocks").pp(i)))
            .collect::<Result<Vec<_>>>()?;
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            patch_embed: conv2d(3, cfg.embed_dim, cfg.patch_size, patch, vb.pp("patch_embed.proj"))?,
            pos_embed,
            blocks,
            neck_conv1: conv2d_no_bias(cfg.embed_dim, cfg.out_chans, 1, Default::default(), vb.pp("neck.0"))?,
            neck_ln1: LayerNorm2d::new(cfg.out_chans, 1e-6, vb.pp("neck.1"))?,
            neck_conv2: conv2d_no_bias(cfg.out_chans, cfg.out_chans, 3, pad1, vb.pp("neck.2"))?,
            neck_ln2: LayerNorm2d::new(cfg.out_chans, 1e-6, vb.pp("neck.3"))?,
        })
    }

    /// Runs only as many blocks as the taps require. `pixels` is
    /// `(1, 3, S, S)`, already normalized.
    pub fn run(&self, pixels: &Tensor, taps: Taps) -> Result<Tapped> {
        let last = if taps.neck {
            self.blocks.len()
        } else {
            taps.qkv_layer.max(taps.output_layer).map_or(0, |l| l + 1)
        };
        let mut x = self.patch_embed.forward(pixels)?.permute((0, 2, 3, 1))?;
        if let Some(p) = &self.pos_embed {
            x = x.broadcast_add(p)?;
        }
        let mut out = Tapped::default();
        for (i, block) in self.blocks.iter().take(last).enumerate() {
            let (qkv, y) = block.forward(&x)?;
            if taps.qkv_layer == Some(i) {
                out.qkv = Some(qkv);
            }
            if taps.output_layer == Some(i) {
                out.output = Some(y.clone());
            }
            x = y;
        }
        if taps.neck {
            out.neck = Some(
                x.permute((0, 3, 1, 2))?
                    .apply(&self.neck_conv1)?
                    .apply(&self.neck_ln1)?
                    .apply(&self.neck_conv2)?
                    .apply(&self.neck_ln2)?,
            );
        }
        Ok(out)
    }
}

/// Converts a `(1, h, w, c)` tensor to a row-major `Vec<f32>` over the top-left
/// `gh x gw` cells.
pub fn crop_to_vec(t: &Tensor, gh: usize, gw: usize) -> Result<Vec<f32>> {
    t.i(0)?
        .narrow(0, 0, gh)?
        .narrow(1, 0, gw)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1()
}
