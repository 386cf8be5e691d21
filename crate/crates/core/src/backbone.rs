//! Pre-LN vision transformer encoder.
//!
//! Token layout is `[class, 4 registers, N patches]`, so `T = N + 5`. The
//! positional encoding is a learnable `T0 x d` table initialised from 2-D
//! sin-cos values (prefix rows zero) for the configured input resolution; the
//! patch rows are bicubically resampled for other grid sizes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowMix, Var};
use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::par::Exec;
use crate::rng::CounterRng;
use crate::tensor::{ParamId, ParamStore, Parameterized, Tensor};

pub const NUM_REGISTERS: usize = 4;
/// Class token plus registers.
pub const PREFIX_TOKENS: usize = 1 + NUM_REGISTERS;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnKind {
    #[serde(rename = "swiglu")]
    SwiGlu,
    #[serde(rename = "relu")]
    ReluMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Base,
    Large,
    Giant,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Preset::Tiny),
            "base" | "vit-b" => Ok(Preset::Base),
            "large" | "vit-l" => Ok(Preset::Large),
            "giant" | "vit-g" => Ok(Preset::Giant),
            _ => Err(Error::Config(format!("unknown model preset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ffn_kind: FfnKind,
    pub patch_size: usize,
    pub drop_rate: f64,
    /// Side length the positional table is built for.
    pub image_size: usize,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (embed_dim, num_heads, num_blocks) = match p {
            Preset::Tiny => {
                return Self {
                    embed_dim: 32,
                    num_heads: 4,
                    num_blocks: 2,
                    ffn_kind: FfnKind::SwiGlu,
                    patch_size: 8,
                    drop_rate: 0.0,
                    image_size: 32,
                }
            }
            Preset::Base => (768, 12, 18),
            Preset::Large => (1024, 16, 24),
            Preset::Giant => (1536, 24, 40),
        };
        Self {
            embed_dim,
            num_heads,
            num_blocks,
            ffn_kind: FfnKind::SwiGlu,
            patch_size: 14,
            drop_rate: 0.1,
            image_size: 224,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return bad("embed_dim, num_heads and patch_size must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return bad(format!("embed_dim {} must be a multiple of 4 for 2-D sin-cos encoding", self.embed_dim));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad(format!("drop_rate {} outside [0, 1)", self.drop_rate));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Hidden width: `4d` for the ReLU MLP, `8d/3` rounded up to a multiple
    /// of 8 for SwiGLU (same parameter count with three matrices).
    pub fn ffn_hidden(&self) -> usize {
        match self.ffn_kind {
            FfnKind::ReluMlp => 4 * self.embed_dim,
            FfnKind::SwiGlu => (8 * self.embed_dim / 3).div_ceil(8) * 8,
        }
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::Config(format!("resolution {height}x{width} not divisible by patch size {p}")));
        }
        Ok((height / p, width / p))
    }

    pub fn num_tokens(&self, height: usize, width: usize) -> Result<usize> {
        let (gh, gw) = self.grid(height, width)?;
        Ok(gh * gw + PREFIX_TOKENS)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let g = self.image_size / self.patch_size;
        let h = self.ffn_hidden();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("registers".to_string(), vec![NUM_REGISTERS, d]),
            ("mask_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![g * g + PREFIX_TOKENS, d]),
        ];
        for b in 0..self.num_blocks {
            let p = |n: &str| format!("blocks.{b}.{n}");
            out.push((p("norm1.weight"), vec![d]));
            out.push((p("norm1.bias"), vec![d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                out.push((p(w), vec![d, d]));
            }
            out.push((p("norm2.weight"), vec![d]));
            out.push((p("norm2.bias"), vec![d]));
            match self.ffn_kind {
                FfnKind::SwiGlu => {
                    out.push((p("ffn.w1"), vec![d, h]));
                    out.push((p("ffn.v"), vec![d, h]));
                    out.push((p("ffn.w2"), vec![h, d]));
                }
                FfnKind::ReluMlp => {
                    out.push((p("ffn.w1"), vec![d, h]));
                    out.push((p("ffn.b1"), vec![h]));
                    out.push((p("ffn.w2"), vec![h, d]));
                    out.push((p("ffn.b2"), vec![d]));
                }
            }
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Fixed 2-D sin-cos table for a `gh x gw` grid; first half of the columns
/// encode the row index, second half the column index.
pub fn sincos_2d(gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let quarter = d / 4;
    let mut out = vec![0.0; gh * gw * d];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut out[(y * gw + x) * d..(y * gw + x + 1) * d];
            for (half, pos) in [(0, y as f64), (1, x as f64)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    row[half * 2 * quarter + k] = (pos * omega).sin();
                    row[half * 2 * quarter + quarter + k] = (pos * omega).cos();
                }
            }
        }
    }
    out
}

fn cubic(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

fn cubic_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_out)
        .map(|o| {
            if n_in == n_out {
                return vec![(o, 1.0)];
            }
            let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let i0 = src.floor();
            let w = cubic(src - i0);
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (k, wk) in w.iter().enumerate() {
                let i = (i0 as i64 - 1 + k as i64).clamp(0, n_in as i64 - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == i) {
                    Some(t) => t.1 += wk,
                    None => taps.push((i, *wk)),
                }
            }
            taps
        })
        .collect()
}

/// Bicubic (a = -0.75, half-pixel centers, clamped borders) resampling of a
/// row-major `gh_in x gw_in` grid of rows to `gh x gw`.
pub fn bicubic_mix(gh_in: usize, gw_in: usize, gh: usize, gw: usize) -> RowMix {
    let ty = cubic_taps(gh_in, gh);
    let tx = cubic_taps(gw_in, gw);
    let mut weights = Vec::with_capacity(gh * gw);
    for wy in &ty {
        for wx in &tx {
            let mut row = Vec::with_capacity(wy.len() * wx.len());
            for &(iy, a) in wy {
                for &(ix, b) in wx {
                    row.push((iy * gw_in + ix, a * b));
                }
            }
            weights.push(row);
        }
    }
    RowMix {
        rows_in: gh_in * gw_in,
        weights,
    }
}

/// Bilinear resampling map, half-pixel centers and clamped borders.
pub fn bilinear_mix(gh_in: usize, gw_in: usize, gh: usize, gw: usize) -> RowMix {
    let taps = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        (0..n_out)
            .map(|o| {
                if n_in == n_out {
                    return vec![(o, 1.0)];
                }
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let f = s - i0 as f64;
                if i0 == i1 || f == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - f), (i1, f)]
                }
            })
            .collect()
    };
    let ty = taps(gh_in, gh);
    let tx = taps(gw_in, gw);
    let mut weights = Vec::with_capacity(gh * gw);
    for wy in &ty {
        for wx in &tx {
            weights.push(
                wy.iter()
                    .flat_map(|&(iy, a)| wx.iter().map(move |&(ix, b)| (iy * gw_in + ix, a * b)))
                    .collect(),
            );
        }
    }
    RowMix {
        rows_in: gh_in * gw_in,
        weights,
    }
}

/// `softmax(x Wq (x Wk)^T / sqrt(d_k)) x Wv`.
pub fn attention(g: &mut Graph, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let dk = g.shape(wq)[1];
    if g.shape(wk)[1] != dk {
        return Err(dim_err!("attention: W_q has {dk} columns, W_k has {}", g.shape(wk)[1]));
    }
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt());
    let a = g.softmax(s, 1)?;
    g.matmul(a, v)
}

/// Multi-head attention with per-head column slices of the full `d x d`
/// projections; heads are concatenated in index order before `W_o`.
pub fn multi_head_attention(g: &mut Graph, x: Var, heads: usize, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
    let d = g.shape(wq)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let q = g.slice_cols(wq, a, b)?;
        let k = g.slice_cols(wk, a, b)?;
        let v = g.slice_cols(wv, a, b)?;
        outs.push(attention(g, x, q, k, v)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, wo)
}

#[derive(Clone, Copy, Debug)]
pub enum FfnVars {
    SwiGlu { w1: Var, v: Var, w2: Var },
    ReluMlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

pub fn ffn(g: &mut Graph, x: Var, p: FfnVars) -> Result<Var> {
    match p {
        FfnVars::SwiGlu { w1, v, w2 } => {
            let a = g.matmul(x, w1)?;
            let b = g.matmul(x, v)?;
            let b = g.silu(b);
            let h = g.mul(a, b)?;
            g.matmul(h, w2)
        }
        FfnVars::ReluMlp { w1, b1, w2, b2 } => {
            let h = g.matmul(x, w1)?;
            let h = g.add_row(h, b1)?;
            let h = g.relu(h);
            let o = g.matmul(h, w2)?;
            g.add_row(o, b2)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub heads: usize,
    pub norm1: (Var, Var),
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub norm2: (Var, Var),
    pub ffn: FfnVars,
}

/// `X^ = X + MHA(LN(X))`, `out = X^ + FFN(LN(X^))`. `keep` carries the
/// stochastic-depth decisions for the two residual branches; a dropped
/// branch contributes nothing and a kept one is scaled by `scale`.
pub fn transformer_block(g: &mut Graph, x: Var, p: &BlockVars, keep: Option<([bool; 2], f64)>) -> Result<Var> {
    let branch = |g: &mut Graph, i: usize, y: Var| -> Option<Var> {
        match keep {
            None => Some(y),
            Some((k, _)) if !k[i] => None,
            Some((_, s)) => Some(g.scale(y, s)),
        }
    };
    let h = g.layer_norm(x, p.norm1.0, p.norm1.1, LN_EPS)?;
    let a = multi_head_attention(g, h, p.heads, p.wq, p.wk, p.wv, p.wo)?;
    let xh = match branch(g, 0, a) {
        Some(a) => g.add(x, a)?,
        None => x,
    };
    let h = g.layer_norm(xh, p.norm2.0, p.norm2.1, LN_EPS)?;
    let f = ffn(g, h, p.ffn)?;
    match branch(g, 1, f) {
        Some(f) => g.add(xh, f),
        None => Ok(xh),
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm2: (ParamId, ParamId),
    ffn: Vec<ParamId>,
}

#[derive(Clone, Debug)]
struct Ids {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    registers: ParamId,
    mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    norm: (ParamId, ParamId),
}

/// Per-call switches for [`Backbone::forward`].
#[derive(Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Patch positions replaced by the mask token.
    pub mask: Option<&'a [bool]>,
    /// Enables stochastic depth (ignored when `drop_rate` is 0).
    pub drop_path: Option<&'a mut CounterRng>,
    /// Keep the token sequence after every block.
    pub collect_blocks: bool,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Final-normalised sequence, `T x d`.
    pub tokens: Var,
    pub cls: Var,
    pub registers: Var,
    pub patches: Var,
    /// Block outputs before the final norm, when requested.
    pub per_block: Vec<Var>,
    pub grid: (usize, usize),
}

/// Detached encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub cls: Vec<f64>,
    pub registers: Tensor,
    pub patches: Tensor,
    pub grid: (usize, usize),
}

impl Features {
    pub fn mean_patch(&self) -> Vec<f64> {
        let (n, d) = self.patches.rows_cols();
        let mut m = vec![0.0; d];
        for i in 0..n {
            for (a, b) in m.iter_mut().zip(self.patches.row(i)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= n as f64);
        m
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl Parameterized for Backbone {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Backbone {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::new(seed).fork(0xB0B0);
        let d = config.embed_dim;
        let out_scale = 1.0 / (2.0 * config.num_blocks.max(1) as f64).sqrt();
        let mut store = ParamStore::new();
        for (name, shape) in config.layout() {
            let t = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
                Tensor::full(shape, 1.0)
            } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(shape)
            } else if name == "pos_embed" {
                let g = config.image_size / config.patch_size;
                let mut v = vec![0.0; PREFIX_TOKENS * d];
                v.extend(sincos_2d(g, g, d));
                Tensor::new(shape, v)?
            } else if matches!(name.as_str(), "cls_token" | "registers" | "mask_token") {
                Tensor::randn(shape, 0.02, &mut rng)
            } else {
                let fan_in = shape[0] as f64;
                let mut std = 1.0 / fan_in.sqrt();
                if name.ends_with("attn.wo") || name.ends_with("ffn.w2") {
                    std *= out_scale;
                }
                Tensor::randn(shape, std, &mut rng)
            };
            store.add(name, t);
        }
        Self::from_params(config, store)
    }

    pub fn preset(p: Preset, seed: u64) -> Result<Self> {
        Self::new(ModelConfig::preset(p), seed)
    }

    /// Wrap an existing store; names and shapes must match the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter store has {} tensors, model needs {}",
                params.len(),
                layout.len()
            )));
        }
        for ((name, shape), (_, pname, t)) in layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{pname}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("layout checked");
        let blocks = (0..config.num_blocks)
            .map(|b| {
                let p = |n: &str| id(&format!("blocks.{b}.{n}"));
                let ffn = match config.ffn_kind {
                    FfnKind::SwiGlu => vec![p("ffn.w1"), p("ffn.v"), p("ffn.w2")],
                    FfnKind::ReluMlp => vec![p("ffn.w1"), p("ffn.b1"), p("ffn.w2"), p("ffn.b2")],
                };
                BlockIds {
                    norm1: (p("norm1.weight"), p("norm1.bias")),
                    wq: p("attn.wq"),
                    wk: p("attn.wk"),
                    wv: p("attn.wv"),
                    wo: p("attn.wo"),
                    norm2: (p("norm2.weight"), p("norm2.bias")),
                    ffn,
                }
            })
            .collect();
        let ids = Ids {
            patch_w: id("patch_embed.weight"),
            patch_b: id("patch_embed.bias"),
            cls: id("cls_token"),
            registers: id("registers"),
            mask_token: id("mask_token"),
            pos: id("pos_embed"),
            blocks,
            norm: (id("norm.weight"), id("norm.bias")),
        };
        Ok(Self { config, params, ids })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn block_vars(&self, g: &mut Graph, b: usize) -> BlockVars {
        let ids = &self.ids.blocks[b];
        let p = |g: &mut Graph, id: ParamId| g.param(&self.params, id);
        let f: Vec<Var> = ids.ffn.iter().map(|&i| p(g, i)).collect();
        BlockVars {
            heads: self.config.num_heads,
            norm1: (p(g, ids.norm1.0), p(g, ids.norm1.1)),
            wq: p(g, ids.wq),
            wk: p(g, ids.wk),
            wv: p(g, ids.wv),
            wo: p(g, ids.wo),
            norm2: (p(g, ids.norm2.0), p(g, ids.norm2.1)),
            ffn: match self.config.ffn_kind {
                FfnKind::SwiGlu => FfnVars::SwiGlu {
                    w1: f[0],
                    v: f[1],
                    w2: f[2],
                },
                FfnKind::ReluMlp => FfnVars::ReluMlp {
                    w1: f[0],
                    b1: f[1],
                    w2: f[2],
                    b2: f[3],
                },
            },
        }
    }

    /// Positional table for a `gh x gw` grid, `(gh*gw + 5) x d`.
    pub fn positional(&self, g: &mut Graph, gh: usize, gw: usize) -> Result<Var> {
        let pos = g.param(&self.params, self.ids.pos);
        let g0 = self.config.image_size / self.config.patch_size;
        if (gh, gw) == (g0, g0) {
            return Ok(pos);
        }
        let prefix = g.slice_rows(pos, 0, PREFIX_TOKENS)?;
        let grid = g.slice_rows(pos, PREFIX_TOKENS, PREFIX_TOKENS + g0 * g0)?;
        let grid = g.row_mix(grid, Arc::new(bicubic_mix(g0, g0, gh, gw)))?;
        g.concat_rows(&[prefix, grid])
    }

    /// Patch embedding plus class/register tokens and positional encoding.
    pub fn embed(&self, g: &mut Graph, image: &Image, mask: Option<&[bool]>) -> Result<(Var, (usize, usize))> {
        let (gh, gw) = self.config.grid(image.height(), image.width())?;
        let (_, _, flat) = image.patches(self.config.patch_size)?;
        let n = gh * gw;
        let x = g.constant_from(vec![n, self.config.patch_dim()], flat)?;
        let w = g.param(&self.params, self.ids.patch_w);
        let b = g.param(&self.params, self.ids.patch_b);
        let e = g.matmul(x, w)?;
        let mut e = g.add_row(e, b)?;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(dim_err!("mask has {} entries for {n} patches", m.len()));
            }
            if m.iter().any(|&v| v) {
                let d = self.config.embed_dim;
                let keep: Vec<f64> = m.iter().flat_map(|&v| std::iter::repeat_n(if v { 0.0 } else { 1.0 }, d)).collect();
                let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                let keep = g.constant_from(vec![n, d], keep)?;
                let drop = g.constant_from(vec![n, d], drop)?;
                let mt = g.param(&self.params, self.ids.mask_token);
                let mt = g.gather_rows(mt, &vec![0; n])?;
                let a = g.mul(e, keep)?;
                let c = g.mul(mt, drop)?;
                e = g.add(a, c)?;
            }
        }
        let cls = g.param(&self.params, self.ids.cls);
        let reg = g.param(&self.params, self.ids.registers);
        let x = g.concat_rows(&[cls, reg, e])?;
        let pos = self.positional(g, gh, gw)?;
        Ok((g.add(x, pos)?, (gh, gw)))
    }

    /// Block `b`, with stochastic depth when `rng` is given.
    pub fn block(&self, g: &mut Graph, b: usize, x: Var, rng: Option<&mut CounterRng>) -> Result<Var> {
        let vars = self.block_vars(g, b);
        let keep = match rng {
            Some(r) if self.config.drop_rate > 0.0 => {
                let p = self.config.drop_rate;
                Some(([!r.bernoulli(p), !r.bernoulli(p)], 1.0 / (1.0 - p)))
            }
            _ => None,
        };
        transformer_block(g, x, &vars, keep)
    }

    pub fn final_norm(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gm = g.param(&self.params, self.ids.norm.0);
        let bt = g.param(&self.params, self.ids.norm.1);
        g.layer_norm(x, gm, bt, LN_EPS)
    }

    pub fn split(&self, g: &mut Graph, tokens: Var) -> Result<(Var, Var, Var)> {
        let t = g.shape(tokens)[0];
        Ok((
            g.slice_rows(tokens, 0, 1)?,
            g.slice_rows(tokens, 1, PREFIX_TOKENS)?,
            g.slice_rows(tokens, PREFIX_TOKENS, t)?,
        ))
    }

    pub fn forward(&self, g: &mut Graph, image: &Image, mut opts: ForwardOptions<'_>) -> Result<BackboneOutput> {
        let (mut x, grid) = self.embed(g, image, opts.mask)?;
        let mut per_block = Vec::new();
        for b in 0..self.config.num_blocks {
            x = self.block(g, b, x, opts.drop_path.as_deref_mut())?;
            if opts.collect_blocks {
                per_block.push(x);
            }
        }
        let tokens = self.final_norm(g, x)?;
        let (cls, registers, patches) = self.split(g, tokens)?;
        Ok(BackboneOutput {
            tokens,
            cls,
            registers,
            patches,
            per_block,
            grid,
        })
    }

    /// Inference-mode encoding without gradient bookkeeping.
    pub fn encode(&self, image: &Image) -> Result<Features> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, ForwardOptions::default())?;
        Ok(Features {
            cls: g.value(out.cls).to_vec(),
            registers: g.tensor(out.registers),
            patches: g.tensor(out.patches),
            grid: out.grid,
        })
    }

    /// Encode many images; each worker builds its own graph.
    pub fn encode_batch(&self, images: &[Image], exec: Exec) -> Result<Vec<Features>> {
        exec.try_map(images, |img| self.encode(img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{gradient_error, param_gradient_error, weighted_sum};

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            num_blocks: 2,
            ffn_kind: FfnKind::SwiGlu,
            patch_size: 4,
            drop_rate: 0.0,
            image_size: 8,
        }
    }

    fn img(h: usize, w: usize, seed: u64) -> Image {
        let mut r = CounterRng::new(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| r.uniform()).collect()).unwrap()
    }

    #[test]
    fn presets_and_tokens() {
        let b = ModelConfig::preset(Preset::Base);
        assert_eq!((b.embed_dim, b.num_heads, b.num_blocks), (768, 12, 18));
        assert_eq!(b.ffn_hidden(), 2048);
        assert_eq!(b.num_tokens(224, 224).unwrap(), 261);
        assert_eq!(b.num_tokens(28, 28).unwrap(), 9);
        assert!(b.num_tokens(30, 28).is_err());
        let l = ModelConfig::preset(Preset::Large);
        assert_eq!((l.embed_dim, l.num_heads, l.num_blocks), (1024, 16, 24));
        let gi = ModelConfig::preset(Preset::Giant);
        assert_eq!((gi.embed_dim, gi.num_heads, gi.num_blocks), (1536, 24, 40));
    }

    #[test]
    fn bicubic_identity_and_partition_of_unity() {
        let m = bicubic_mix(3, 3, 3, 3);
        for (i, w) in m.weights.iter().enumerate() {
            assert_eq!(w, &vec![(i, 1.0)]);
        }
        let m = bicubic_mix(3, 4, 7, 5);
        for w in &m.weights {
            let s: f64 = w.iter().map(|(_, v)| v).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut r = CounterRng::new(1);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::randn([1, 4], 1.0, &mut r));
        let wq = g.constant(&Tensor::randn([4, 3], 1.0, &mut r));
        let wk = g.constant(&Tensor::randn([4, 3], 1.0, &mut r));
        let wv = g.constant(&Tensor::randn([4, 2], 1.0, &mut r));
        let out = attention(&mut g, x, wq, wk, wv).unwrap();
        let xv = g.matmul(x, wv).unwrap();
        assert_eq!(g.value(out), g.value(xv));
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let mut bb = Backbone::new(tiny(), 0).unwrap();
        for b in 0..2 {
            for n in ["attn.wo", "ffn.w2"] {
                let id = bb.params.id(&format!("blocks.{b}.{n}")).unwrap();
                bb.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let (x, _) = bb.embed(&mut g, &img(8, 8, 2), None).unwrap();
        let y = bb.block(&mut g, 0, x, None).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn resolution_change_resamples_positions() {
        let bb = Backbone::new(tiny(), 3).unwrap();
        let a = bb.encode(&img(8, 8, 4)).unwrap();
        assert_eq!(a.patches.shape(), &[4, 16]);
        let b = bb.encode(&img(16, 16, 4)).unwrap();
        assert_eq!(b.patches.shape(), &[16, 16]);
        assert_eq!(bb.encode(&img(8, 8, 4)).unwrap(), a);
    }

    #[test]
    fn ffn_gradients() {
        let mut r = CounterRng::new(5);
        for kind in [FfnKind::SwiGlu, FfnKind::ReluMlp] {
            let x = Tensor::randn([3, 4], 1.0, &mut r);
            let mut inputs = vec![x, Tensor::randn([4, 6], 0.7, &mut r), Tensor::randn([4, 6], 0.7, &mut r), Tensor::randn([6, 4], 0.7, &mut r)];
            if kind == FfnKind::ReluMlp {
                inputs[2] = Tensor::randn([6], 0.5, &mut r);
                inputs.push(Tensor::randn([4], 0.5, &mut r));
            }
            let w = Tensor::randn([3, 4], 1.0, &mut r);
            let err = gradient_error(&inputs, 1e-5, |g, v| {
                let p = match kind {
                    FfnKind::SwiGlu => FfnVars::SwiGlu { w1: v[1], v: v[2], w2: v[3] },
                    FfnKind::ReluMlp => FfnVars::ReluMlp { w1: v[1], b1: v[2], w2: v[3], b2: v[4] },
                };
                let o = ffn(g, v[0], p)?;
                weighted_sum(g, o, &w)
            })
            .unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    #[test]
    fn full_backbone_gradient() {
        let bb = Backbone::new(tiny(), 7).unwrap();
        let im = img(8, 8, 8);
        let mask = [false, true, false, false];
        let mut r = CounterRng::new(9);
        let w = Tensor::randn([9, 16], 1.0, &mut r);
        let err = param_gradient_error(&bb, 1e-5, 6, |g, m| {
            let opts = ForwardOptions {
                mask: Some(&mask),
                ..Default::default()
            };
            let out = m.forward(g, &im, opts)?;
            weighted_sum(g, out.tokens, &w)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
