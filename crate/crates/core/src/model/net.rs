use indexmap::IndexMap;
use rand::Rng;

use super::config::{EncoderMode, ModelConfig, LAYER_NORM_EPS, MAX_LEVEL};
use super::layout::{enc, init_params, ldpe, param_specs};
use crate::error::{Error, Result};
use crate::rng::{stream, ForwardRng, Stream};
use crate::tensor::{binary_mask, Gradients, Graph, ParamStore, Scalar, Tensor, Var};

/// Images of a batch, one `[B, 3, H/2^i, W/2^i]` tensor per level.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleBatch<T = f32> {
    pub images: [Option<Tensor<T>>; MAX_LEVEL + 1],
}

impl<T: Scalar> MultiScaleBatch<T> {
    pub fn new() -> Self {
        Self {
            images: [None, None, None],
        }
    }

    pub fn with_level(mut self, level: usize, images: Tensor<T>) -> Self {
        self.images[level] = Some(images);
        self
    }

    pub fn batch_size(&self) -> Option<usize> {
        self.images.iter().flatten().map(|t| t.shape()[0]).next()
    }

    /// Uniform `[0, 1)` images for every active level of `config`.
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, batch: usize, rng: &mut R) -> Self {
        let mut out = Self::new();
        for &level in &config.levels {
            let (h, w) = config.level_extent(level);
            let data = (0..batch * 3 * h * w)
                .map(|_| T::lit(rng.random::<f64>()))
                .collect();
            out.images[level] = Some(Tensor::new([batch, 3, h, w], data).expect("positive extents"));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> MultiScaleBatch<U> {
        MultiScaleBatch {
            images: [0, 1, 2].map(|l| self.images[l].as_ref().map(|t| t.cast())),
        }
    }
}

impl<T: Scalar> Default for MultiScaleBatch<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Rearranges `[B, 3, h, w]` images into `[B, (h/s)·(w/s), s·s·3]` patch
/// rows. Patches are row-major over the patch grid; within a patch the
/// feature index is `(dy·s + dx)·3 + channel`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || side == 0 || !s[2].is_multiple_of(side) || !s[3].is_multiple_of(side) {
        return Err(Error::shape(
            "patchify",
            format!("cannot cut {s:?} into {side}x{side} patches"),
        ));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let (gh, gw) = (h / side, w / side);
    let dim = side * side * 3;
    let src = images.data();
    let mut out = vec![T::zero(); b * gh * gw * dim];
    for bi in 0..b {
        for c in 0..3 {
            let plane = &src[(bi * 3 + c) * h * w..(bi * 3 + c + 1) * h * w];
            for y in 0..h {
                let (py, dy) = (y / side, y % side);
                for x in 0..w {
                    let (px, dx) = (x / side, x % side);
                    let token = py * gw + px;
                    out[(bi * gh * gw + token) * dim + (dy * side + dx) * 3 + c] = plane[y * w + x];
                }
            }
        }
    }
    Tensor::new([b, gh * gw, dim], out)
}

/// Parameters registered on a graph, by name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Per-parameter gradients in binding order.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.take(v)))
            .collect()
    }
}

/// Scaled dot-product attention with a random binary mask on the
/// post-softmax scores: `(M ⊙ softmax(QKᵀ/√d)) V`.
///
/// `q`, `k`, `v` are `[..., T, d]`. In training mode each score is zeroed
/// independently with probability `mask_prob`; surviving scores are not
/// rescaled. Eval mode (or `mask_prob == 0`) applies no mask.
pub fn rmsa<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask_prob: f64,
    training: bool,
    rng: Option<&mut ForwardRng>,
) -> Result<Var> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let mut attn = g.softmax(scores)?;
    if training && mask_prob > 0.0 {
        let rng = rng.ok_or_else(|| Error::InvalidInput("training-mode attention needs an rng".into()))?;
        let mask = binary_mask(g.shape(attn).to_vec(), mask_prob, &mut rng.mask);
        let mask = g.constant(mask);
        attn = g.mul(attn, mask)?;
    }
    g.matmul(attn, v)
}

/// The multi-magnification regression transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct M2ort<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
}

/// Forward-pass mode and randomness.
pub struct Mode<'a> {
    pub training: bool,
    pub rng: Option<&'a mut ForwardRng>,
}

impl Mode<'_> {
    pub fn eval() -> Mode<'static> {
        Mode {
            training: false,
            rng: None,
        }
    }
}

impl<'a> Mode<'a> {
    pub fn train(rng: &'a mut ForwardRng) -> Self {
        Mode {
            training: true,
            rng: Some(rng),
        }
    }

    fn rng(&mut self) -> Option<&mut ForwardRng> {
        self.rng.as_deref_mut()
    }
}

impl<T: Scalar> M2ort<T> {
    /// Builds a model with parameters drawn from the `Init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let params = init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// layout the config implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "config implies {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name {
                return Err(Error::InvalidInput(format!(
                    "parameter order mismatch: expected {}, found {name}",
                    spec.name
                )));
            }
            if spec.shape != t.shape() {
                return Err(Error::mismatch("parameter", &spec.shape, t.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> M2ort<U> {
        M2ort {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(name, t)| (name.to_string(), g.leaf(t.clone(), trainable)))
                .collect(),
        }
    }

    fn linear(&self, g: &mut Graph<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = b.get(&format!("{prefix}.bias"))?;
        g.linear(x, w, bias)
    }

    fn norm(&self, g: &mut Graph<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let gamma = b.get(&format!("{prefix}.gamma"))?;
        let beta = b.get(&format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    /// Level-dependent patch embedding: `[B, 3, H/2^i, W/2^i]` images to
    /// `[B, L, C]` tokens via norm → linear → GELU → linear → norm.
    pub fn embed_level(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        level: usize,
        images: &Tensor<T>,
    ) -> Result<Var> {
        let (h, w) = self.config.level_extent(level);
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::InvalidInput(format!(
                "level {level} images have shape {s:?}, expected [B, 3, {h}, {w}]"
            )));
        }
        let patches = g.constant(patchify(images, self.config.patch_side(level))?);
        let p = ldpe(level);
        let x = self.norm(g, b, patches, &format!("{p}.norm_in"))?;
        let x = self.linear(g, b, x, &format!("{p}.fc1"))?;
        let x = g.gelu(x);
        let x = self.linear(g, b, x, &format!("{p}.fc2"))?;
        self.norm(g, b, x, &format!("{p}.norm_out"))
    }

    /// Prepends the level's [cls] token and adds its positional table.
    pub fn attach_cls_and_pe(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        level: usize,
        seq: Var,
    ) -> Result<Var> {
        let batch = g.shape(seq)[0];
        let cls = b.get(&format!("level{level}.cls"))?;
        let cls = g.broadcast(cls, &[batch])?;
        let x = g.concat(&[cls, seq], 1)?;
        let pos = b.get(&format!("level{level}.pos"))?;
        g.add(x, pos)
    }

    /// Layer norm over the channel-concatenation of all level sequences,
    /// split back per level.
    pub fn global_norm_sync(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        prefix: &str,
        seqs: &[Var],
    ) -> Result<Vec<Var>> {
        let cat = g.concat_lastdim(seqs)?;
        let normed = self.norm(g, b, cat, prefix)?;
        g.split_lastdim(normed, &vec![self.config.channels; seqs.len()])
    }

    /// Multi-head random-mask self-attention with output projection and
    /// residual. `prefix` names the qkv/proj parameters.
    pub fn itmm(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        prefix: &str,
        seq: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let shape = g.shape(seq).to_vec();
        let (batch, t, width) = (shape[0], shape[1], shape[2]);
        let heads = self.config.heads;
        let d = width / heads;
        let qkv = self.linear(g, b, seq, &format!("{prefix}.qkv"))?;
        let parts = g.split_lastdim(qkv, &[width, width, width])?;
        let mut per_head = Vec::with_capacity(3);
        for p in parts {
            let r = g.reshape(p, [batch, t, heads, d])?;
            per_head.push(g.permute(r, &[0, 2, 1, 3])?);
        }
        let attn = rmsa(
            g,
            per_head[0],
            per_head[1],
            per_head[2],
            self.config.mask_prob,
            mode.training,
            mode.rng(),
        )?;
        let merged = g.permute(attn, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, [batch, t, width])?;
        let out = self.linear(g, b, merged, &format!("{prefix}.proj"))?;
        g.add(out, seq)
    }

    /// Channel mixing across levels: concat → down → GELU → dropout → up →
    /// residual → split. `prefix` ends in `icmm` or `ffn`.
    pub fn icmm(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        prefix: &str,
        seqs: &[Var],
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Var>> {
        let cat = g.concat_lastdim(seqs)?;
        let h = self.linear(g, b, cat, &format!("{prefix}.fc1"))?;
        let h = g.gelu(h);
        let training = mode.training;
        let h = match mode.rng() {
            Some(rng) if training => g.dropout(h, self.config.dropout, true, &mut rng.dropout)?,
            _ if training && self.config.dropout > 0.0 => {
                return Err(Error::InvalidInput("training-mode dropout needs an rng".into()))
            }
            _ => h,
        };
        let out = self.linear(g, b, h, &format!("{prefix}.fc2"))?;
        let out = g.add(out, cat)?;
        g.split_lastdim(out, &vec![self.config.channels; seqs.len()])
    }

    /// One encoder: norm → token mixing → norm → channel mixing.
    pub fn encoder(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        index: usize,
        seqs: Vec<Var>,
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Var>> {
        let e = enc(index);
        let c = &self.config;
        let mut seqs = self.global_norm_sync(g, b, &format!("{e}.norm1"), &seqs)?;
        if !c.disable_itmm {
            if c.is_coupled() {
                let cat = g.concat_lastdim(&seqs)?;
                let mixed = self.itmm(g, b, &format!("{e}.itmm"), cat, mode)?;
                seqs = g.split_lastdim(mixed, &vec![c.channels; seqs.len()])?;
            } else {
                for (seq, &level) in seqs.iter_mut().zip(&c.levels) {
                    *seq = self.itmm(g, b, &format!("{e}.itmm{level}"), *seq, mode)?;
                }
            }
        }
        let mut seqs = self.global_norm_sync(g, b, &format!("{e}.norm2"), &seqs)?;
        if !c.disable_icmm {
            let block = match c.encoder_mode {
                EncoderMode::CoupledFull => "ffn",
                _ => "icmm",
            };
            seqs = self.icmm(g, b, &format!("{e}.{block}"), &seqs, mode)?;
        }
        Ok(seqs)
    }

    /// Level sequences after embedding and [cls]/positional attachment.
    pub fn embed(&self, g: &mut Graph<T>, b: &Bound, batch: &MultiScaleBatch<T>) -> Result<Vec<Var>> {
        let mut seqs = Vec::with_capacity(self.config.num_levels());
        let mut batch_size = None;
        for &level in &self.config.levels {
            let images = batch.images[level]
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("missing images for level {level}")))?;
            let n = images.shape().first().copied();
            if batch_size.is_some() && batch_size != n {
                return Err(Error::InvalidInput("levels disagree on batch size".into()));
            }
            batch_size = n;
            let tokens = self.embed_level(g, b, level, images)?;
            seqs.push(self.attach_cls_and_pe(g, b, level, tokens)?);
        }
        Ok(seqs)
    }

    /// Fused [cls] features `[B, v·C]` after the final norm.
    pub fn features(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        batch: &MultiScaleBatch<T>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let mut seqs = self.embed(g, b, batch)?;
        for n in 0..self.config.depth {
            seqs = self.encoder(g, b, n, seqs, mode)?;
        }
        let cat = g.concat_lastdim(&seqs)?;
        let normed = self.norm(g, b, cat, "final_norm")?;
        let batch_size = g.shape(normed)[0];
        let cls = g.slice(normed, 1, 0, 1)?;
        g.reshape(cls, [batch_size, self.config.mix_width()])
    }

    /// Predicted expression `[B, k]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        batch: &MultiScaleBatch<T>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let cls = self.features(g, b, batch, mode)?;
        self.linear(g, b, cls, "head")
    }

    /// Eval-mode prediction without gradient tracking.
    pub fn predict(&self, batch: &MultiScaleBatch<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.forward(&mut g, &b, batch, &mut Mode::eval())?;
        Ok(g.value(out).clone())
    }
}
