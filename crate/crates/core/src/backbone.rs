//! Minimal Vision Transformer: patch embedding, class token, pre-LN blocks
//! with multi-head self-attention and a ReLU feed-forward network.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var, LN_EPS};
use crate::peft::{AdaptScale, BlockModule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_side: usize,
    pub channels: usize,
}

impl BackboneSpec {
    pub fn new(layers: usize, dim: usize, heads: usize, patch: usize, image_side: usize, channels: usize) -> Result<Self> {
        let s = Self { layers, dim, heads, patch, image_side, channels };
        s.validate()?;
        Ok(s)
    }

    /// ViT-B/16 at 224 px.
    pub fn vitb16() -> Self {
        Self { layers: 12, dim: 768, heads: 12, patch: 16, image_side: 224, channels: 3 }
    }

    /// ViT-L/14 at 224 px.
    pub fn vitl14() -> Self {
        Self { layers: 24, dim: 1024, heads: 16, patch: 14, image_side: 224, channels: 3 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vitb16" => Some(Self::vitb16()),
            "vitl14" => Some(Self::vitl14()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.patch == 0 || self.image_side == 0 || self.channels == 0 {
            return Err(Error::shape(format!("degenerate backbone spec {self}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::shape(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.image_side % self.patch != 0 {
            return Err(Error::shape(format!(
                "image side {} is not divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        Ok(())
    }

    /// Number of patch tokens `m = (a/patch)²`.
    pub fn tokens(&self) -> usize {
        let n = self.image_side / self.patch;
        n * n
    }

    /// Flattened patch length `d₀ = patch²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} d={} H={} patch={} a={} C={}",
            self.layers, self.dim, self.heads, self.patch, self.image_side, self.channels
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub class_token: usize,
    pub positional: usize,
    pub per_block: usize,
    pub blocks: usize,
    pub final_norm: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embedding + self.class_token + self.positional + self.blocks + self.final_norm
    }

    pub fn rows(&self) -> [(&'static str, usize); 5] {
        [
            ("embedding", self.embedding),
            ("class_token", self.class_token),
            ("positional", self.positional),
            ("blocks", self.blocks),
            ("final_norm", self.final_norm),
        ]
    }
}

/// Per-component parameter counts from raw architecture sizes.
pub fn param_breakdown(layers: usize, dim: usize, tokens: usize, patch_dim: usize) -> ParamBreakdown {
    let d = dim;
    let per_block = 12 * d * d + 13 * d;
    ParamBreakdown {
        embedding: (patch_dim + 1) * d,
        class_token: d,
        positional: (tokens + 1) * d,
        per_block,
        blocks: layers * per_block,
        final_norm: 2 * d,
    }
}

/// `12Ld² + (13L + m + d₀ + 5)d`.
pub fn closed_form_params(layers: usize, dim: usize, tokens: usize, patch_dim: usize) -> usize {
    12 * layers * dim * dim + (13 * layers + tokens + patch_dim + 5) * dim
}

pub fn count_params(spec: &BackboneSpec) -> ParamBreakdown {
    param_breakdown(spec.layers, spec.dim, spec.tokens(), spec.patch_dim())
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl BlockParams {
    pub fn biases(&self) -> [ParamId; 8] {
        [
            self.ln1.beta,
            self.q.bias,
            self.k.bias,
            self.v.bias,
            self.o.bias,
            self.ln2.beta,
            self.fc1.bias,
            self.fc2.bias,
        ]
    }

    /// The six weight matrices an arbitrary mask may cover.
    pub fn matrices(&self) -> [ParamId; 6] {
        [self.q.weight, self.k.weight, self.v.weight, self.o.weight, self.fc1.weight, self.fc2.weight]
    }

    pub fn all(&self) -> [ParamId; 16] {
        [
            self.ln1.gamma,
            self.ln1.beta,
            self.q.weight,
            self.q.bias,
            self.k.weight,
            self.k.bias,
            self.v.weight,
            self.v.bias,
            self.o.weight,
            self.o.bias,
            self.ln2.gamma,
            self.ln2.beta,
            self.fc1.weight,
            self.fc1.bias,
            self.fc2.weight,
            self.fc2.bias,
        ]
    }
}

/// Parameter handles of a mini-ViT living in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub embed: LinearIds,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: NormIds,
}

pub(crate) fn xavier<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal_tensor(rows, cols, std, rng)
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(vec![rows, cols], |_| T::of(dist.sample(rng)))
}

pub(crate) fn insert_linear<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<LinearIds> {
    Ok(LinearIds {
        weight: store.insert(format!("{name}.weight"), xavier(fan_in, fan_out, rng))?,
        bias: store.insert(format!("{name}.bias"), Tensor::zeros(vec![1, fan_out]))?,
    })
}

pub(crate) fn insert_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<NormIds> {
    Ok(NormIds {
        gamma: store.insert(format!("{name}.gamma"), Tensor::from_fn(vec![1, dim], |_| T::one()))?,
        beta: store.insert(format!("{name}.beta"), Tensor::zeros(vec![1, dim]))?,
    })
}

impl Backbone {
    /// Registers freshly initialized backbone parameters in `store`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, spec: BackboneSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let embed = insert_linear(store, "embed.proj", spec.patch_dim(), d, rng)?;
        let cls = store.insert("embed.cls", normal_tensor(1, d, 0.02, rng))?;
        let pos = store.insert("embed.pos", normal_tensor(spec.tokens() + 1, d, 0.02, rng))?;
        let mut blocks = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let p = format!("blocks.{l}");
            blocks.push(BlockParams {
                ln1: insert_norm(store, &format!("{p}.ln1"), d)?,
                q: insert_linear(store, &format!("{p}.attn.q"), d, d, rng)?,
                k: insert_linear(store, &format!("{p}.attn.k"), d, d, rng)?,
                v: insert_linear(store, &format!("{p}.attn.v"), d, d, rng)?,
                o: insert_linear(store, &format!("{p}.attn.o"), d, d, rng)?,
                ln2: insert_norm(store, &format!("{p}.ln2"), d)?,
                fc1: insert_linear(store, &format!("{p}.ffn.fc1"), d, 4 * d, rng)?,
                fc2: insert_linear(store, &format!("{p}.ffn.fc2"), 4 * d, d, rng)?,
            });
        }
        let norm = insert_norm(store, "norm", d)?;
        Ok(Self { spec, embed, cls, pos, blocks, norm })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed.weight, self.embed.bias, self.cls, self.pos];
        for b in &self.blocks {
            ids.extend(b.all());
        }
        ids.extend([self.norm.gamma, self.norm.beta]);
        ids
    }
}

/// Flattens an `a×a×C` image into `m` patch rows of length `d₀`
/// (row-major over patches, `(y, x, c)` inside each patch).
pub fn patchify<T: Scalar>(image: &Image, spec: &BackboneSpec) -> Result<Vec<T>> {
    if image.height != spec.image_side || image.width != spec.image_side || image.channels != spec.channels {
        return Err(Error::shape(format!(
            "image {}x{}x{} does not match backbone input {}x{}x{}",
            image.height, image.width, image.channels, spec.image_side, spec.image_side, spec.channels
        )));
    }
    if spec.image_side % spec.patch != 0 {
        return Err(Error::shape("image side not divisible by patch size"));
    }
    let (p, n) = (spec.patch, spec.image_side / spec.patch);
    let mut out = Vec::with_capacity(spec.tokens() * spec.patch_dim());
    for py in 0..n {
        for px in 0..n {
            for y in 0..p {
                for x in 0..p {
                    for c in 0..spec.channels {
                        out.push(T::of(image.at(py * p + y, px * p + x, c) as f64));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `[c⁰; patches·E + b] + positions`, shape `(m+1) × d`.
pub fn embed_patches<T: Scalar>(g: &mut Graph<'_, T>, bb: &Backbone, image: &Image) -> Result<Var> {
    let spec = &bb.spec;
    let patches = g.constant(spec.tokens(), spec.patch_dim(), patchify(image, spec)?)?;
    let (w, b) = (g.param(bb.embed.weight), g.param(bb.embed.bias));
    let tokens = g.linear(patches, w, b)?;
    let cls = g.param(bb.cls);
    let seq = g.concat_rows(&[cls, tokens])?;
    let pos = g.param(bb.pos);
    g.add(seq, pos)
}

fn norm<T: Scalar>(g: &mut Graph<'_, T>, ids: NormIds, x: Var) -> Result<Var> {
    let (gamma, beta) = (g.param(ids.gamma), g.param(ids.beta));
    g.layer_norm(x, gamma, beta, T::of(LN_EPS))
}

fn dense<T: Scalar>(g: &mut Graph<'_, T>, ids: LinearIds, x: Var) -> Result<Var> {
    let (w, b) = (g.param(ids.weight), g.param(ids.bias));
    g.linear(x, w, b)
}

/// `x·(W + down·up) + b`.
fn low_rank_dense<T: Scalar>(g: &mut Graph<'_, T>, ids: LinearIds, down: ParamId, up: ParamId, x: Var) -> Result<Var> {
    let (w, b) = (g.param(ids.weight), g.param(ids.bias));
    let (down, up) = (g.param(down), g.param(up));
    let delta = g.matmul(down, up)?;
    let w = g.add(w, delta)?;
    g.linear(x, w, b)
}

/// Multi-head scaled dot-product attention over the rows of `x`.
pub fn attention<T: Scalar>(g: &mut Graph<'_, T>, spec: &BackboneSpec, q: Var, k: Var, v: Var) -> Result<Var> {
    let dh = spec.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat_cols(&heads)
    }
}

fn bottleneck<T: Scalar>(g: &mut Graph<'_, T>, ln: NormIds, down: LinearIds, up: LinearIds, x: Var) -> Result<Var> {
    let h = norm(g, ln, x)?;
    let h = dense(g, down, h)?;
    let h = g.relu(h);
    dense(g, up, h)
}

/// One pre-LN transformer block, with whatever lightweight modules are attached.
pub fn forward_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    spec: &BackboneSpec,
    block: &BlockParams,
    module: &BlockModule,
    x: Var,
) -> Result<Var> {
    if spec.dim % spec.heads != 0 {
        return Err(Error::shape(format!("dim {} not divisible by {} heads", spec.dim, spec.heads)));
    }
    let (rows, cols) = g.shape(x);
    if cols != spec.dim {
        return Err(Error::shape(format!("block input has {cols} columns, expected {}", spec.dim)));
    }
    let x = match module.prompts {
        Some(p) => {
            let prompts = g.param(p);
            let cls = g.slice_rows(x, 0, 1)?;
            if rows > 1 {
                let rest = g.slice_rows(x, 1, rows - 1)?;
                g.concat_rows(&[cls, prompts, rest])?
            } else {
                g.concat_rows(&[cls, prompts])?
            }
        }
        None => x,
    };

    let h = norm(g, block.ln1, x)?;
    let (q, v) = match &module.lora {
        Some(l) => (
            low_rank_dense(g, block.q, l.q_down, l.q_up, h)?,
            low_rank_dense(g, block.v, l.v_down, l.v_up, h)?,
        ),
        None => (dense(g, block.q, h)?, dense(g, block.v, h)?),
    };
    // The key bias adds the same q·b to every score of a row and cancels in
    // the softmax, so it is left out of the product.
    let wk = g.param(block.k.weight);
    let k = g.matmul(h, wk)?;
    let a = attention(g, spec, q, k, v)?;
    let a = dense(g, block.o, a)?;
    let xhat = g.add(a, x)?;

    let h = norm(g, block.ln2, xhat)?;
    let h = dense(g, block.fc1, h)?;
    let h = g.relu(h);
    let mut f = dense(g, block.fc2, h)?;
    if let Some(ad) = &module.adapter {
        let side = bottleneck(g, ad.ln, ad.down, ad.up, f)?;
        f = g.add(f, side)?;
    }
    let mut out = g.add(f, xhat)?;
    if let Some(af) = &module.adaptformer {
        let side = bottleneck(g, af.ln, af.down, af.up, xhat)?;
        let side = match af.scale {
            AdaptScale::Fixed(s) => g.scale(side, T::of(s)),
            AdaptScale::Learnable(id) => {
                let s = g.param(id);
                g.scale_by(side, s)?
            }
        };
        out = g.add(out, side)?;
    }

    match module.prompts {
        Some(p) => {
            let n_prompts = g.store().value(p).rows();
            let cls = g.slice_rows(out, 0, 1)?;
            if rows > 1 {
                let rest = g.slice_rows(out, 1 + n_prompts, rows - 1)?;
                g.concat_rows(&[cls, rest])
            } else {
                Ok(cls)
            }
        }
        None => Ok(out),
    }
}

/// `φ(x) = LN(c^L)`, a `1 × d` row.
pub fn extract_feature<T: Scalar>(g: &mut Graph<'_, T>, bb: &Backbone, modules: &[BlockModule], image: &Image) -> Result<Var> {
    if modules.len() != bb.blocks.len() {
        return Err(Error::shape(format!(
            "{} block modules for {} blocks",
            modules.len(),
            bb.blocks.len()
        )));
    }
    let mut x = embed_patches(g, bb, image)?;
    for (block, module) in bb.blocks.iter().zip(modules) {
        x = forward_block(g, &bb.spec, block, module, x)?;
    }
    let cls = g.slice_rows(x, 0, 1)?;
    norm(g, bb.norm, cls)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{layer_norm, softmax};

    fn tiny(layers: usize, dim: usize, heads: usize) -> BackboneSpec {
        BackboneSpec::new(layers, dim, heads, 2, 4, 1).unwrap()
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in store.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    fn random_image(spec: &BackboneSpec, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.image_side * spec.image_side * spec.channels;
        Image::new(spec.image_side, spec.image_side, spec.channels, (0..n).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn vit_totals() {
        let b = count_params(&BackboneSpec::vitb16());
        assert_eq!(b.total(), 85_798_656);
        assert_eq!(closed_form_params(12, 768, 196, 768), 85_798_656);
        let l = BackboneSpec::vitl14();
        assert_eq!((l.tokens(), l.patch_dim()), (256, 588));
        assert_eq!(count_params(&l).total(), closed_form_params(24, 1024, 256, 588));
        assert_eq!(param_breakdown(0, 7, 0, 0).total(), 5 * 7);
    }

    #[test]
    fn store_matches_count() {
        let spec = BackboneSpec::new(3, 8, 2, 2, 6, 3).unwrap();
        assert_eq!((spec.tokens(), spec.patch_dim()), (9, 12));
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Backbone::init(&mut store, spec, &mut rng).unwrap();
        assert_eq!(store.total_elements(), count_params(&spec).total());
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(BackboneSpec::new(1, 10, 3, 2, 4, 1), Err(Error::Shape(_))));
        assert!(matches!(BackboneSpec::new(1, 8, 2, 3, 4, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn embedding_shapes_and_linearity() {
        let spec = tiny(1, 4, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::init(&mut store, spec, &mut rng).unwrap();
        for id in [bb.embed.weight, bb.pos] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut g = Graph::no_grad(&store);
        let x = embed_patches(&mut g, &bb, &Image::zeros(4, 4, 1)).unwrap();
        assert_eq!(g.shape(x), (5, 4));
        assert_eq!(&g.value(x)[..4], store.value(bb.cls).data());
        assert!(g.value(x)[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_branches_pass_through() {
        let spec = tiny(1, 4, 2);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::init(&mut store, spec, &mut rng).unwrap();
        let b = bb.blocks[0];
        for id in [b.q, b.k, b.v, b.o, b.fc1, b.fc2].iter().flat_map(|l| [l.weight, l.bias]) {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut g = Graph::no_grad(&store);
        let x = g.constant(5, 4, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = forward_block(&mut g, &spec, &b, &BlockModule::default(), x).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    /// Straightforward single-head block written with plain loops.
    fn oracle_block(x: &[Vec<f64>], store: &ParamStore<f64>, b: &BlockParams) -> Vec<Vec<f64>> {
        let v = |id: ParamId| store.value(id).data().to_vec();
        let d = x[0].len();
        let affine = |rows: &[Vec<f64>], w: &[f64], bias: &[f64]| -> Vec<Vec<f64>> {
            let out_dim = bias.len();
            rows.iter()
                .map(|r| (0..out_dim).map(|j| bias[j] + (0..r.len()).map(|i| r[i] * w[i * out_dim + j]).sum::<f64>()).collect())
                .collect()
        };
        let ln = |rows: &[Vec<f64>], ids: NormIds| -> Vec<Vec<f64>> {
            rows.iter().map(|r| layer_norm(r, &v(ids.gamma), &v(ids.beta), 1e-5).unwrap()).collect()
        };
        let h = ln(x, b.ln1);
        let q = affine(&h, &v(b.q.weight), &v(b.q.bias));
        let k = affine(&h, &v(b.k.weight), &v(b.k.bias));
        let val = affine(&h, &v(b.v.weight), &v(b.v.bias));
        let mut att = Vec::new();
        for qi in &q {
            let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let p = softmax(&s).unwrap();
            att.push((0..d).map(|c| p.iter().zip(&val).map(|(pj, vj)| pj * vj[c]).sum()).collect::<Vec<f64>>());
        }
        let o = affine(&att, &v(b.o.weight), &v(b.o.bias));
        let xhat: Vec<Vec<f64>> = o.iter().zip(x).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        let h = ln(&xhat, b.ln2);
        let h: Vec<Vec<f64>> = affine(&h, &v(b.fc1.weight), &v(b.fc1.bias))
            .into_iter()
            .map(|r| r.into_iter().map(|z| z.max(0.0)).collect())
            .collect();
        let f = affine(&h, &v(b.fc2.weight), &v(b.fc2.bias));
        f.iter().zip(&xhat).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
    }

    #[test]
    fn block_matches_loop_oracle() {
        let spec = BackboneSpec::new(1, 4, 1, 1, 1, 1).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::init(&mut store, spec, &mut rng).unwrap();
        randomize(&mut store, 4);
        let rows: Vec<Vec<f64>> = (0..2).map(|r| (0..4).map(|c| ((r * 4 + c) as f64 * 0.91).cos()).collect()).collect();
        let mut g = Graph::no_grad(&store);
        let x = g.constant(2, 4, rows.concat()).unwrap();
        let y = forward_block(&mut g, &spec, &bb.blocks[0], &BlockModule::default(), x).unwrap();
        let expect = oracle_block(&rows, &store, &bb.blocks[0]);
        for (a, b) in g.value(y).iter().zip(expect.concat()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_keys_give_uniform_attention() {
        let spec = BackboneSpec::new(1, 4, 1, 1, 1, 1).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bb = Backbone::init(&mut store, spec, &mut rng).unwrap();
        randomize(&mut store, 6);
        let b = bb.blocks[0];
        store.get_mut(b.k.weight).value.data_mut().fill(0.0);
        store.get_mut(b.k.bias).value.data_mut().fill(0.0);
        let mut g = Graph::no_grad(&store);
        let x = g.constant(3, 4, (0..12).map(|i| (i as f64).sqrt()).collect()).unwrap();
        let gamma = g.param(b.ln1.gamma);
        let beta = g.param(b.ln1.beta);
        let h = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let q = dense(&mut g, b.q, h).unwrap();
        let k = dense(&mut g, b.k, h).unwrap();
        let v = dense(&mut g, b.v, h).unwrap();
        let a = attention(&mut g, &spec, q, k, v).unwrap();
        let vv = g.value(v).to_vec();
        for c in 0..4 {
            let mean = (0..3).map(|r| vv[r * 4 + c]).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((g.value(a)[r * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_stack_feature_is_norm_of_class_token() {
        let spec = tiny(0, 4, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bb = Backbone::init(&mut store, spec, &mut rng).unwrap();
        randomize(&mut store, 8);
        let mut g = Graph::no_grad(&store);
        let f = extract_feature(&mut g, &bb, &[], &random_image(&spec, 9)).unwrap();
        let c0: Vec<f64> = store.value(bb.cls).data().iter().zip(&store.value(bb.pos).data()[..4]).map(|(a, b)| a + b).collect();
        let expect = layer_norm(&c0, store.value(bb.norm.gamma).data(), store.value(bb.norm.beta).data(), 1e-5).unwrap();
        for (a, b) in g.value(f).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = tiny(2, 8, 2);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bb = Backbone::init(&mut store, spec, &mut rng).unwrap();
        let im = random_image(&spec, 11);
        let modules = vec![BlockModule::default(); 2];
        let run = || {
            let mut g = Graph::no_grad(&store);
            let f = extract_feature(&mut g, &bb, &modules, &im).unwrap();
            g.value(f).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn patch_permutation_equivariance_without_positions() {
        let spec = tiny(2, 8, 2);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bb = Backbone::init(&mut store, spec, &mut rng).unwrap();
        randomize(&mut store, 13);
        store.get_mut(bb.pos).value.data_mut().fill(0.0);
        let im = random_image(&spec, 14);
        // swap the top-left and bottom-right 2×2 patches
        let mut sw = im.clone();
        for y in 0..2 {
            for x in 0..2 {
                let (a, b) = ((y * 4 + x), ((y + 2) * 4 + x + 2));
                sw.data.swap(a, b);
            }
        }
        let modules = vec![BlockModule::default(); 2];
        let feat = |image: &Image| {
            let mut g = Graph::no_grad(&store);
            let f = extract_feature(&mut g, &bb, &modules, image).unwrap();
            g.value(f).to_vec()
        };
        for (a, b) in feat(&im).iter().zip(feat(&sw)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn wrong_image_size_is_shape_error() {
        let spec = tiny(1, 4, 1);
        assert!(matches!(patchify::<f64>(&Image::zeros(6, 6, 1), &spec), Err(Error::Shape(_))));
    }
}
