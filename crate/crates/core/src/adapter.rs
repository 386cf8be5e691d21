//! Feature-pyramid adapter around a frozen backbone.
//!
//! A convolution-free stem turns the image into three token grids at 1/8,
//! 1/16 and 1/32 resolution. At each interaction block the backbone's patch
//! tokens read from the pyramid (injector, gated by a zero-initialised
//! per-channel `gamma`) and, after the block, the pyramid reads back from the
//! backbone (extractor). Both directions use cross-attention over a strided
//! subsample of the keys.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneOutput, LN_EPS, PREFIX_TOKENS};
use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::rng::CounterRng;
use crate::tensor::{ParamId, ParamStore, Parameterized, Tensor};

/// Downsampling factors of the three pyramid levels.
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Blocks followed by an interaction; `None` means every block.
    pub blocks: Option<Vec<usize>>,
    /// Keep every `key_stride`-th key row; 1 is dense cross-attention.
    pub key_stride: usize,
    /// Hidden width of the extractor FFN as a multiple of `d`.
    pub ffn_ratio: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            blocks: None,
            key_stride: 2,
            ffn_ratio: 0.25,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.key_stride == 0 {
            return Err(Error::Config("key_stride must be at least 1".into()));
        }
        if !(self.ffn_ratio > 0.0) {
            return Err(Error::Config("ffn_ratio must be positive".into()));
        }
        if let Some(b) = &self.blocks {
            if b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("interaction blocks must be strictly increasing".into()));
            }
            if let Some(&last) = b.last() {
                if last >= num_blocks {
                    return Err(Error::Config(format!("interaction block {last} but backbone has {num_blocks}")));
                }
            }
        }
        Ok(())
    }

    pub fn interaction_blocks(&self, num_blocks: usize) -> Vec<usize> {
        self.blocks.clone().unwrap_or_else(|| (0..num_blocks).collect())
    }

    fn ffn_hidden(&self, d: usize) -> usize {
        ((d as f64 * self.ffn_ratio).round() as usize).max(1)
    }
}

/// Flattened pyramid: level 1, then 2, then 3, row-major within a level.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub tokens: Var,
    pub shapes: [(usize, usize); 3],
}

impl Pyramid {
    pub fn shapes_for(height: usize, width: usize) -> Result<[(usize, usize); 3]> {
        if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
            return Err(Error::Config(format!("adapter input {height}x{width} not a positive multiple of 32")));
        }
        Ok(LEVEL_STRIDES.map(|s| (height / s, width / s)))
    }

    /// Start row of each level plus the total.
    pub fn offsets(&self) -> [usize; 4] {
        let mut o = [0; 4];
        for (i, (h, w)) in self.shapes.iter().enumerate() {
            o[i + 1] = o[i] + h * w;
        }
        o
    }

    pub fn len(&self) -> usize {
        self.offsets()[3]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Level `l` as a `h*w x d` node.
    pub fn level(&self, g: &mut Graph, l: usize) -> Result<Var> {
        let o = self.offsets();
        g.slice_rows(self.tokens, o[l], o[l + 1])
    }
}

/// `softmax(q Wq (k' Wk)^T / sqrt(d)) k' Wv` where `k'` keeps every
/// `stride`-th row of `keys`. No output projection.
pub fn sparse_cross_attention(g: &mut Graph, queries: Var, keys: Var, stride: usize, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    if stride == 0 {
        return Err(Error::Config("key stride must be at least 1".into()));
    }
    if g.shape(queries)[1] != g.shape(keys)[1] {
        return Err(dim_err!(
            "cross-attention: queries have width {}, keys {}",
            g.shape(queries)[1],
            g.shape(keys)[1]
        ));
    }
    let keys = if stride == 1 {
        keys
    } else {
        let idx: Vec<usize> = (0..g.shape(keys)[0]).step_by(stride).collect();
        g.gather_rows(keys, &idx)?
    };
    let dk = g.shape(wq)[1];
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys, wk)?;
    let v = g.matmul(keys, wv)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt());
    let a = g.softmax(s, 1)?;
    g.matmul(a, v)
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    norm_q: (ParamId, ParamId),
    norm_k: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct InteractionIds {
    inject: AttnIds,
    gamma: ParamId,
    extract: AttnIds,
    ffn_norm: (ParamId, ParamId),
    ffn: [ParamId; 4],
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub params: ParamStore,
    embed_dim: usize,
    blocks: Vec<usize>,
    stem: [(ParamId, ParamId); 3],
    inter: Vec<InteractionIds>,
}

impl Parameterized for Adapter {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Adapter-augmented forward result.
#[derive(Clone, Debug)]
pub struct AdaptedOutput {
    pub backbone: BackboneOutput,
    pub pyramid: Pyramid,
    /// Final pyramid levels, each `h*w x d`.
    pub maps: [Var; 3],
}

impl Adapter {
    pub fn layout(config: &AdapterConfig, embed_dim: usize, num_blocks: usize) -> Vec<(String, Vec<usize>)> {
        let d = embed_dim;
        let h = config.ffn_hidden(d);
        let mut out = vec![
            ("stem.0.weight".to_string(), vec![8 * 8 * 3, d]),
            ("stem.0.bias".to_string(), vec![d]),
            ("stem.1.weight".to_string(), vec![4 * d, d]),
            ("stem.1.bias".to_string(), vec![d]),
            ("stem.2.weight".to_string(), vec![4 * d, d]),
            ("stem.2.bias".to_string(), vec![d]),
        ];
        for b in config.interaction_blocks(num_blocks) {
            for part in ["inject", "extract"] {
                let p = format!("interactions.{b}.{part}");
                for n in ["norm_q", "norm_k"] {
                    out.push((format!("{p}.{n}.weight"), vec![d]));
                    out.push((format!("{p}.{n}.bias"), vec![d]));
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push((format!("{p}.{w}"), vec![d, d]));
                }
                if part == "inject" {
                    out.push((format!("{p}.gamma"), vec![d]));
                }
            }
            let p = format!("interactions.{b}.ffn");
            out.push((format!("{p}.norm.weight"), vec![d]));
            out.push((format!("{p}.norm.bias"), vec![d]));
            out.push((format!("{p}.w1"), vec![d, h]));
            out.push((format!("{p}.b1"), vec![h]));
            out.push((format!("{p}.w2"), vec![h, d]));
            out.push((format!("{p}.b2"), vec![d]));
        }
        out
    }

    /// Fresh adapter for `backbone`: norms at identity, `gamma` and biases
    /// zero, other weights `N(0, 1/fan_in)`.
    pub fn new(config: AdapterConfig, backbone: &Backbone, seed: u64) -> Result<Self> {
        let (d, nb) = (backbone.config.embed_dim, backbone.config.num_blocks);
        config.validate(nb)?;
        let mut rng = CounterRng::new(seed).fork(0xada);
        let mut store = ParamStore::new();
        for (name, shape) in Self::layout(&config, d, nb) {
            let t = if name.ends_with("norm_q.weight") || name.ends_with("norm_k.weight") || name.ends_with("norm.weight") {
                Tensor::full(shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                Tensor::randn(shape, std, &mut rng)
            };
            store.add(name, t);
        }
        Self::from_params(config, d, nb, store)
    }

    pub fn from_params(config: AdapterConfig, embed_dim: usize, num_blocks: usize, params: ParamStore) -> Result<Self> {
        config.validate(num_blocks)?;
        let layout = Self::layout(&config, embed_dim, num_blocks);
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s), (_, pn, t))| n == pn && s.as_slice() == t.shape());
        if !matches {
            return Err(Error::Config("adapter parameters do not match the adapter configuration".into()));
        }
        let id = |n: String| params.id(&n).expect("layout checked");
        let stem = [0, 1, 2].map(|i| (id(format!("stem.{i}.weight")), id(format!("stem.{i}.bias"))));
        let blocks = config.interaction_blocks(num_blocks);
        let attn = |p: String| AttnIds {
            norm_q: (id(format!("{p}.norm_q.weight")), id(format!("{p}.norm_q.bias"))),
            norm_k: (id(format!("{p}.norm_k.weight")), id(format!("{p}.norm_k.bias"))),
            wq: id(format!("{p}.wq")),
            wk: id(format!("{p}.wk")),
            wv: id(format!("{p}.wv")),
            wo: id(format!("{p}.wo")),
        };
        let inter = blocks
            .iter()
            .map(|b| InteractionIds {
                inject: attn(format!("interactions.{b}.inject")),
                gamma: id(format!("interactions.{b}.inject.gamma")),
                extract: attn(format!("interactions.{b}.extract")),
                ffn_norm: (
                    id(format!("interactions.{b}.ffn.norm.weight")),
                    id(format!("interactions.{b}.ffn.norm.bias")),
                ),
                ffn: ["w1", "b1", "w2", "b2"].map(|n| id(format!("interactions.{b}.ffn.{n}"))),
            })
            .collect();
        Ok(Self {
            config,
            params,
            embed_dim,
            blocks,
            stem,
            inter,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn interaction_blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Overwrite every injector gate.
    pub fn set_gamma(&mut self, value: f64) {
        for it in &self.inter {
            self.params.get_mut(it.gamma).data_mut().fill(value);
        }
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let w = self.p(g, w);
        let b = self.p(g, b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Stem: 8x8 patchify + linear + GELU for level 1, then 2x2
    /// space-to-depth + linear + GELU for levels 2 and 3.
    pub fn pyramid(&self, g: &mut Graph, image: &Image) -> Result<Pyramid> {
        let shapes = Pyramid::shapes_for(image.height(), image.width())?;
        let (h1, w1) = shapes[0];
        let (_, _, flat) = image.patches(8)?;
        let x = g.constant_from(vec![h1 * w1, 8 * 8 * 3], flat)?;
        let f1 = self.linear(g, x, self.stem[0])?;
        let mut levels = vec![g.gelu(f1)];
        for l in 1..3 {
            let (h, w) = shapes[l - 1];
            let s2d = space_to_depth(g, levels[l - 1], h, w)?;
            let f = self.linear(g, s2d, self.stem[l])?;
            levels.push(g.gelu(f));
        }
        let tokens = g.concat_rows(&levels)?;
        Ok(Pyramid { tokens, shapes })
    }

    fn cross(&self, g: &mut Graph, q: Var, k: Var, ids: &AttnIds) -> Result<Var> {
        let (nqw, nqb) = (self.p(g, ids.norm_q.0), self.p(g, ids.norm_q.1));
        let (nkw, nkb) = (self.p(g, ids.norm_k.0), self.p(g, ids.norm_k.1));
        let q = g.layer_norm(q, nqw, nqb, LN_EPS)?;
        let k = g.layer_norm(k, nkw, nkb, LN_EPS)?;
        let (wq, wk, wv, wo) = (self.p(g, ids.wq), self.p(g, ids.wk), self.p(g, ids.wv), self.p(g, ids.wo));
        let a = sparse_cross_attention(g, q, k, self.config.key_stride, wq, wk, wv)?;
        g.matmul(a, wo)
    }

    /// `X + gamma * Attn(LN(X), LN(F))` on patch tokens; prefix tokens pass
    /// through. `i` indexes the interaction, not the block.
    pub fn inject(&self, g: &mut Graph, i: usize, x: Var, f: Var) -> Result<Var> {
        let it = self.interaction(i)?;
        let t = g.shape(x)[0];
        if t <= PREFIX_TOKENS {
            return Err(dim_err!("inject: {t} tokens leave no patch tokens"));
        }
        let prefix = g.slice_rows(x, 0, PREFIX_TOKENS)?;
        let patches = g.slice_rows(x, PREFIX_TOKENS, t)?;
        let a = self.cross(g, patches, f, &it.inject)?;
        let gamma = self.p(g, it.gamma);
        let a = g.mul_row(a, gamma)?;
        let patches = g.add(patches, a)?;
        g.concat_rows(&[prefix, patches])
    }

    /// `F~ = F + Attn(LN(F), LN(X))`, then `F~ + FFN(LN(F~))`. Keys are the
    /// full token sequence.
    pub fn extract(&self, g: &mut Graph, i: usize, f: Var, x: Var) -> Result<Var> {
        let it = self.interaction(i)?;
        let a = self.cross(g, f, x, &it.extract)?;
        let f = g.add(f, a)?;
        let (nw, nb) = (self.p(g, it.ffn_norm.0), self.p(g, it.ffn_norm.1));
        let h = g.layer_norm(f, nw, nb, LN_EPS)?;
        let h = self.linear(g, h, (it.ffn[0], it.ffn[1]))?;
        let h = g.gelu(h);
        let h = self.linear(g, h, (it.ffn[2], it.ffn[3]))?;
        g.add(f, h)
    }

    fn interaction(&self, i: usize) -> Result<InteractionIds> {
        self.inter
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("interaction {i} out of range ({} configured)", self.inter.len())))
    }

    /// Backbone forward with inject before and extract after each
    /// interaction block. The backbone must be frozen.
    pub fn forward(&self, g: &mut Graph, backbone: &Backbone, image: &Image) -> Result<AdaptedOutput> {
        if let Some((_, name, _)) = backbone.params.iter().find(|(_, _, t)| t.requires_grad()) {
            return Err(Error::Contract(format!("adapter needs a frozen backbone; `{name}` is trainable")));
        }
        if let Some(name) = backbone.params.any_grad() {
            return Err(Error::Contract(format!("frozen backbone parameter `{name}` carries a gradient")));
        }
        if backbone.config.embed_dim != self.embed_dim {
            return Err(Error::Config(format!(
                "adapter width {} does not match backbone width {}",
                self.embed_dim, backbone.config.embed_dim
            )));
        }
        let pyramid = self.pyramid(g, image)?;
        let (mut x, grid) = backbone.embed(g, image, None)?;
        let mut f = pyramid.tokens;
        let mut next = 0;
        for b in 0..backbone.config.num_blocks {
            let hit = self.blocks.get(next) == Some(&b);
            if hit {
                x = self.inject(g, next, x, f)?;
            }
            x = backbone.block(g, b, x, None)?;
            if hit {
                f = self.extract(g, next, f, x)?;
                next += 1;
            }
        }
        let tokens = backbone.final_norm(g, x)?;
        let (cls, registers, patches) = backbone.split(g, tokens)?;
        let pyramid = Pyramid { tokens: f, ..pyramid };
        let maps = [
            pyramid.level(g, 0)?,
            pyramid.level(g, 1)?,
            pyramid.level(g, 2)?,
        ];
        Ok(AdaptedOutput {
            backbone: BackboneOutput {
                tokens,
                cls,
                registers,
                patches,
                per_block: Vec::new(),
                grid,
            },
            pyramid,
            maps,
        })
    }
}

/// `h*w x c` row-major grid to `(h/2)*(w/2) x 4c`, concatenating the 2x2
/// neighbours in (0,0), (0,1), (1,0), (1,1) order.
pub fn space_to_depth(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    if g.shape(x)[0] != h * w || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(dim_err!("space_to_depth: {:?} is not an even {h}x{w} grid", g.shape(x)));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut parts = Vec::with_capacity(4);
    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let idx: Vec<usize> = (0..h2 * w2).map(|k| (2 * (k / w2) + dy) * w + 2 * (k % w2) + dx).collect();
        parts.push(g.gather_rows(x, &idx)?);
    }
    g.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{gradient_error, param_gradient_error, weighted_sum};
    use crate::backbone::{ForwardOptions, ModelConfig, Preset};

    fn backbone() -> Backbone {
        let cfg = ModelConfig {
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            ..ModelConfig::preset(Preset::Tiny)
        };
        let mut b = Backbone::new(cfg, 3).unwrap();
        b.freeze();
        b
    }

    fn image(seed: u64, side: usize) -> Image {
        let mut r = CounterRng::new(seed);
        Image::new(side, side, (0..side * side * 3).map(|_| r.uniform()).collect()).unwrap()
    }

    #[test]
    fn pyramid_token_counts() {
        for (side, n) in [(64, 84), (224, 1029)] {
            let s = Pyramid::shapes_for(side, side).unwrap();
            assert_eq!(s.iter().map(|(h, w)| h * w).sum::<usize>(), n);
        }
        assert!(matches!(Pyramid::shapes_for(48, 64), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let ad = Adapter::new(AdapterConfig::default(), &backbone(), 1).unwrap();
        let mut g = Graph::new();
        let p = ad.pyramid(&mut g, &Image::zeros(64, 64)).unwrap();
        assert_eq!(p.len(), 84);
        assert!(g.value(p.tokens).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn space_to_depth_order() {
        let mut g = Graph::new();
        let x = g.constant_from(vec![16, 1], (0..16).map(f64::from).collect()).unwrap();
        let y = space_to_depth(&mut g, x, 4, 4).unwrap();
        assert_eq!(g.shape(y), &[4, 4]);
        assert_eq!(&g.value(y)[..8], &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn stride_one_is_dense_and_convex() {
        let mut r = CounterRng::new(9);
        let q = Tensor::randn([5, 4], 1.0, &mut r);
        let k = Tensor::randn([7, 4], 1.0, &mut r);
        let wq = Tensor::randn([4, 4], 1.0, &mut r);
        let wk = Tensor::randn([4, 4], 1.0, &mut r);
        let mut g = Graph::new();
        let (qv, kv, wqv, wkv) = (g.constant(&q), g.constant(&k), g.constant(&wq), g.constant(&wk));
        let eye = g.constant(&Tensor::eye(4));
        let sparse = sparse_cross_attention(&mut g, qv, kv, 1, wqv, wkv, eye).unwrap();
        // dense reference
        let qq = g.matmul(qv, wqv).unwrap();
        let kk = g.matmul(kv, wkv).unwrap();
        let kt = g.transpose(kk).unwrap();
        let s = g.matmul(qq, kt).unwrap();
        let s = g.scale(s, 0.5);
        let a = g.softmax(s, 1).unwrap();
        let dense = g.matmul(a, kv).unwrap();
        assert_eq!(g.value(sparse), g.value(dense));
        for stride in [1, 2, 3] {
            let out = sparse_cross_attention(&mut g, qv, kv, stride, wqv, wkv, eye).unwrap();
            let kept: Vec<usize> = (0..7).step_by(stride).collect();
            for row in g.value(out).chunks(4) {
                for c in 0..4 {
                    let col = kept.iter().map(|&i| k.data()[i * 4 + c]);
                    let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                    assert!(row[c] >= lo - 1e-12 && row[c] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_gate_is_bit_identical() {
        let bb = backbone();
        let ad = Adapter::new(AdapterConfig::default(), &bb, 2).unwrap();
        let img = image(4, 64);
        let mut g = Graph::new();
        let plain = bb.forward(&mut g, &img, ForwardOptions::default()).unwrap();
        let adapted = ad.forward(&mut g, &bb, &img).unwrap();
        assert_eq!(g.value(plain.tokens), g.value(adapted.backbone.tokens));
        let shapes: Vec<_> = adapted.maps.iter().map(|&m| g.shape(m)[0]).collect();
        assert_eq!(shapes, vec![64, 16, 4]);
        // a non-zero gate does change the backbone path
        let mut ad2 = ad.clone();
        ad2.set_gamma(0.5);
        let changed = ad2.forward(&mut g, &bb, &img).unwrap();
        assert_ne!(g.value(plain.tokens), g.value(changed.backbone.tokens));
    }

    #[test]
    fn zero_output_paths_leave_pyramid_unchanged() {
        let bb = backbone();
        let mut ad = Adapter::new(AdapterConfig::default(), &bb, 2).unwrap();
        for (_, name, t) in ad.params.iter().map(|(i, n, t)| (i, n.to_string(), t.clone())).collect::<Vec<_>>() {
            if name.ends_with("extract.wo") || name.ends_with("ffn.w2") {
                let id = ad.params.id(&name).unwrap();
                *ad.params.get_mut(id) = Tensor::zeros(t.shape().to_vec());
            }
        }
        let img = image(5, 64);
        let mut g = Graph::new();
        let before = ad.pyramid(&mut g, &img).unwrap();
        let out = ad.forward(&mut g, &bb, &img).unwrap();
        assert_eq!(g.value(before.tokens), g.value(out.pyramid.tokens));
    }

    #[test]
    fn trainable_backbone_is_refused() {
        let mut bb = backbone();
        let ad = Adapter::new(AdapterConfig::default(), &bb, 2).unwrap();
        bb.params.set_trainable(true);
        let mut g = Graph::new();
        assert!(matches!(ad.forward(&mut g, &bb, &image(1, 64)), Err(Error::Contract(_))));
    }

    #[test]
    fn block_subset_validated() {
        let bb = backbone();
        let bad = AdapterConfig {
            blocks: Some(vec![1, 0]),
            ..Default::default()
        };
        assert!(Adapter::new(bad, &bb, 0).is_err());
        let sub = AdapterConfig {
            blocks: Some(vec![1]),
            ..Default::default()
        };
        let ad = Adapter::new(sub, &bb, 0).unwrap();
        assert_eq!(ad.interaction_blocks(), &[1]);
    }

    #[test]
    fn inject_extract_gradients() {
        let bb = backbone();
        let mut ad = Adapter::new(AdapterConfig::default(), &bb, 6).unwrap();
        ad.set_gamma(0.3);
        let mut r = CounterRng::new(7);
        let x = Tensor::randn([PREFIX_TOKENS + 6, 8], 1.0, &mut r);
        let f = Tensor::randn([9, 8], 1.0, &mut r);
        let wx = Tensor::randn([PREFIX_TOKENS + 6, 8], 1.0, &mut r);
        let wf = Tensor::randn([9, 8], 1.0, &mut r);
        let err = param_gradient_error(&ad, 1e-5, 40, |g, a| {
            let (xv, fv) = (g.constant(&x), g.constant(&f));
            let y = a.inject(g, 0, xv, fv)?;
            let z = a.extract(g, 0, fv, y)?;
            let l1 = weighted_sum(g, y, &wx)?;
            let l2 = weighted_sum(g, z, &wf)?;
            g.add(l1, l2)
        })
        .unwrap();
        assert!(err < 1e-6, "param error {err}");
        let err = gradient_error(&[x.clone(), f.clone()], 1e-5, |g, v| {
            let y = ad.inject(g, 0, v[0], v[1])?;
            let z = ad.extract(g, 0, v[1], y)?;
            let l1 = weighted_sum(g, y, &wx)?;
            let l2 = weighted_sum(g, z, &wf)?;
            g.add(l1, l2)
        })
        .unwrap();
        assert!(err < 1e-6, "input error {err}");
    }

    #[test]
    fn backbone_gets_no_gradient() {
        let bb = backbone();
        let mut ad = Adapter::new(AdapterConfig::default(), &bb, 8).unwrap();
        ad.set_gamma(0.1);
        let mut g = Graph::new();
        let out = ad.forward(&mut g, &bb, &image(2, 64)).unwrap();
        let a = g.mean_all(out.maps[0]);
        let b = g.mean_all(out.backbone.patches);
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap();
        assert!(g.param_grads(&bb.params).is_empty());
        assert!(!g.param_grads(&ad.params).is_empty());
    }
}
