//! Toy pre-norm vision transformer whose MLP hidden widths are set per block.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CaptureHandle, Tape, Var};
use crate::error::{AmpError, Result};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Unpruned MLP hidden width, M₀.
    pub mlp_hidden: usize,
    /// Current hidden width of each block; empty means "all `mlp_hidden`".
    #[serde(default)]
    pub per_block_hidden: Vec<usize>,
    /// Width of the linear classification head; 0 disables the head.
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn default_channels() -> usize {
    3
}

fn default_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    pub fn new(
        image_size: usize,
        patch_size: usize,
        embed_dim: usize,
        num_blocks: usize,
        num_heads: usize,
        mlp_hidden: usize,
    ) -> Self {
        ModelConfig {
            image_size,
            patch_size,
            in_channels: 3,
            embed_dim,
            num_blocks,
            num_heads,
            mlp_hidden,
            per_block_hidden: vec![mlp_hidden; num_blocks],
            num_classes: 0,
            ln_eps: default_eps(),
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    /// Fills an empty `per_block_hidden` and checks every invariant.
    pub fn normalized(mut self) -> Result<Self> {
        if self.per_block_hidden.is_empty() {
            self.per_block_hidden = vec![self.mlp_hidden; self.num_blocks];
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AmpError::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.in_channels == 0 || self.num_blocks == 0 {
            return fail("in_channels and num_blocks must be positive".into());
        }
        if self.per_block_hidden.len() != self.num_blocks {
            return fail(format!(
                "per_block_hidden has {} entries for {} blocks",
                self.per_block_hidden.len(),
                self.num_blocks
            ));
        }
        if let Some(&m) = self.per_block_hidden.iter().find(|&&m| m > self.mlp_hidden) {
            return fail(format!("block hidden size {m} exceeds M0 = {}", self.mlp_hidden));
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// One-line human-readable description, also embedded in checkpoints.
    pub fn summary(&self) -> String {
        format!(
            "vit image={} patch={} ch={} C={} L={} heads={} M0={} hidden={:?} classes={}",
            self.image_size,
            self.patch_size,
            self.in_channels,
            self.embed_dim,
            self.num_blocks,
            self.num_heads,
            self.mlp_hidden,
            self.per_block_hidden,
            self.num_classes
        )
    }
}

/// Weight stored `in × out`, applied as `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNormParams,
    /// `C × M`: column `k` feeds hidden neuron `k`.
    pub fc1: Linear,
    /// `M × C`: row `k` reads hidden neuron `k`.
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitModel {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNormParams,
    pub classifier: Option<Linear>,
}

/// Graph outputs of one forward pass, living on the caller's tape.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    /// `B × C`, final-layernorm class token.
    pub z_cls: Var,
    /// `B × N × C`, final-layernorm patch tokens.
    pub z_patch: Var,
    /// `B × K` when the model has a classifier.
    pub logits: Option<Var>,
    /// Post-GELU fc1 outputs, `B × N_tokens × M^(l)`, for requested blocks.
    pub hidden: BTreeMap<usize, CaptureHandle>,
    /// Parameter leaves in declaration order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub capture: Vec<usize>,
    /// Optional per-block multiplier on hidden activations (0 drops a neuron).
    pub masks: Vec<Option<Tensor>>,
    pub trainable: bool,
}

impl ForwardOptions {
    pub fn capture_all(num_blocks: usize) -> Self {
        ForwardOptions {
            capture: (0..num_blocks).collect(),
            ..Default::default()
        }
    }

    pub fn trainable() -> Self {
        ForwardOptions {
            trainable: true,
            ..Default::default()
        }
    }

    pub fn with_masks(mut self, masks: Vec<Option<Tensor>>) -> Self {
        self.masks = masks;
        self
    }
}

struct Normal02 {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
}

impl Normal02 {
    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| loop {
            let v = self.dist.sample(&mut self.rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.tensor(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

fn layer_norm_params(dim: usize) -> LayerNormParams {
    LayerNormParams {
        gain: Tensor::ones(&[dim]),
        bias: Tensor::zeros(&[dim]),
    }
}

impl VitModel {
    /// Truncated-normal (σ = 0.02, cut at 2σ) weights, zero biases, unit
    /// layernorm gains. Deterministic in `seed`.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        let config = config.normalized()?;
        let c = config.embed_dim;
        let mut init = Normal02 {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: Normal::new(0.0, INIT_STD).expect("valid normal"),
        };
        let patch_embed = init.linear(config.patch_dim(), c);
        let cls_token = init.tensor(&[c]);
        let pos_embed = init.tensor(&[config.num_tokens(), c]);
        let blocks = config
            .per_block_hidden
            .iter()
            .map(|&m| Block {
                ln1: layer_norm_params(c),
                q: init.linear(c, c),
                k: init.linear(c, c),
                v: init.linear(c, c),
                proj: init.linear(c, c),
                ln2: layer_norm_params(c),
                fc1: init.linear(c, m),
                fc2: init.linear(m, c),
            })
            .collect();
        let classifier = (config.num_classes > 0).then(|| init.linear(c, config.num_classes));
        Ok(VitModel {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: layer_norm_params(c),
            classifier,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.config.per_block_hidden.clone()
    }

    /// Every parameter tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.patch_embed.weight,
            &self.patch_embed.bias,
            &self.cls_token,
            &self.pos_embed,
        ];
        for b in &self.blocks {
            out.extend([
                &b.ln1.gain,
                &b.ln1.bias,
                &b.q.weight,
                &b.q.bias,
                &b.k.weight,
                &b.k.bias,
                &b.v.weight,
                &b.v.bias,
                &b.proj.weight,
                &b.proj.bias,
                &b.ln2.gain,
                &b.ln2.bias,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ]);
        }
        out.extend([&self.norm.gain, &self.norm.bias]);
        if let Some(h) = &self.classifier {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1.gain,
                &mut b.ln1.bias,
                &mut b.q.weight,
                &mut b.q.bias,
                &mut b.k.weight,
                &mut b.k.bias,
                &mut b.v.weight,
                &mut b.v.bias,
                &mut b.proj.weight,
                &mut b.proj.bias,
                &mut b.ln2.gain,
                &mut b.ln2.bias,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        out.extend([&mut self.norm.gain, &mut self.norm.bias]);
        if let Some(h) = &mut self.classifier {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out
    }

    /// Shapes every tensor must have under `config`, in declaration order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let c = config.embed_dim;
        let mut out = vec![
            vec![config.patch_dim(), c],
            vec![c],
            vec![c],
            vec![config.num_tokens(), c],
        ];
        for &m in &config.per_block_hidden {
            out.extend([
                vec![c],
                vec![c],
                vec![c, c],
                vec![c],
                vec![c, c],
                vec![c],
                vec![c, c],
                vec![c],
                vec![c, c],
                vec![c],
                vec![c],
                vec![c],
                vec![c, m],
                vec![m],
                vec![m, c],
                vec![c],
            ]);
        }
        out.extend([vec![c], vec![c]]);
        if config.num_classes > 0 {
            out.extend([vec![c, config.num_classes], vec![config.num_classes]]);
        }
        out
    }

    /// Checks that every tensor matches the shapes implied by the config.
    pub fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::expected_shapes(&self.config);
        let actual = self.tensors();
        if expected.len() != actual.len() {
            return Err(AmpError::Shape(format!(
                "model has {} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for (i, (e, a)) in expected.iter().zip(actual).enumerate() {
            if e.as_slice() != a.shape() {
                return Err(AmpError::Shape(format!(
                    "tensor {i} has shape {:?}, config implies {e:?}",
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    /// Runs the encoder on `images` (`B × H × W × channels`, values in
    /// `[0, 1]`), recording everything on `tape`.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, opts: &ForwardOptions) -> Result<ForwardRecord> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.in_channels {
            return Err(AmpError::Shape(format!(
                "images {s:?} do not match B×{0}×{0}×{1}",
                cfg.image_size, cfg.in_channels
            )));
        }
        if let Some(&bad) = opts.capture.iter().find(|&&l| l >= self.blocks.len()) {
            return Err(AmpError::Shape(format!(
                "capture block {bad} out of range for {} blocks",
                self.blocks.len()
            )));
        }
        if !opts.masks.is_empty() && opts.masks.len() != self.blocks.len() {
            return Err(AmpError::Shape(format!(
                "{} masks for {} blocks",
                opts.masks.len(),
                self.blocks.len()
            )));
        }
        let batch = s[0];
        let (c, n, np) = (cfg.embed_dim, cfg.num_tokens(), cfg.num_patches());
        let (heads, hd) = (cfg.num_heads, cfg.head_dim());

        let params: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), opts.trainable))
            .collect();
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count matches declaration");

        let patches = tape.constant(patchify(images, cfg.patch_size)?);
        let patches = tape.reshape(patches, &[batch * np, cfg.patch_dim()])?;
        let (pw, pb) = (next(), next());
        let x = tape.matmul(patches, pw)?;
        let x = tape.add_bias(x, pb)?;
        let x = tape.reshape(x, &[batch, np, c])?;
        let cls = next();
        let cls = tape.reshape(cls, &[1, c])?;
        let cls = tape.repeat_leading(cls, batch)?;
        let x = tape.concat(cls, x, 1)?;
        let pos = next();
        let mut x = tape.add_bias(x, pos)?;

        let mut hidden = BTreeMap::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let m = block.fc1.bias.numel();
            let (g1, b1) = (next(), next());
            let (qw, qb, kw, kb, vw, vb, ow, ob) = (next(), next(), next(), next(), next(), next(), next(), next());
            let (g2, b2) = (next(), next());
            let (f1w, f1b, f2w, f2b) = (next(), next(), next(), next());

            // attention
            let h = tape.layer_norm(x, g1, b1, cfg.ln_eps)?;
            let h = tape.reshape(h, &[batch * n, c])?;
            let mut split = |w: Var, b: Var| -> Result<Var> {
                let y = tape.matmul(h, w)?;
                let y = tape.add_bias(y, b)?;
                let y = tape.reshape(y, &[batch, n, heads, hd])?;
                let y = tape.permute(y, &[0, 2, 1, 3])?;
                tape.reshape(y, &[batch * heads, n, hd])
            };
            let q = split(qw, qb)?;
            let k = split(kw, kb)?;
            let v = split(vw, vb)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let attn = tape.softmax(scores, 1.0)?;
            let o = tape.bmm(attn, v, false)?;
            let o = tape.reshape(o, &[batch, heads, n, hd])?;
            let o = tape.permute(o, &[0, 2, 1, 3])?;
            let o = tape.reshape(o, &[batch * n, c])?;
            let o = tape.matmul(o, ow)?;
            let o = tape.add_bias(o, ob)?;
            let o = tape.reshape(o, &[batch, n, c])?;
            x = tape.add(x, o)?;

            // mlp
            let h = tape.layer_norm(x, g2, b2, cfg.ln_eps)?;
            let h = tape.reshape(h, &[batch * n, c])?;
            let h = tape.matmul(h, f1w)?;
            let h = tape.add_bias(h, f1b)?;
            let h = tape.gelu(h)?;
            let h = tape.reshape(h, &[batch, n, m])?;
            if opts.capture.contains(&l) {
                hidden.insert(l, tape.capture(h)?);
            }
            let h = match opts.masks.get(l).and_then(Option::as_ref) {
                Some(mask) => {
                    if mask.shape() != [m] {
                        return Err(AmpError::Shape(format!(
                            "mask for block {l} has shape {:?}, hidden size is {m}",
                            mask.shape()
                        )));
                    }
                    let mv = tape.constant(mask.clone());
                    tape.mul_trailing(h, mv)?
                }
                None => h,
            };
            let h = tape.reshape(h, &[batch * n, m])?;
            let h = tape.matmul(h, f2w)?;
            let h = tape.add_bias(h, f2b)?;
            let h = tape.reshape(h, &[batch, n, c])?;
            x = tape.add(x, h)?;
        }

        let (ng, nb) = (next(), next());
        let z = tape.layer_norm(x, ng, nb, cfg.ln_eps)?;
        let z_cls = tape.narrow(z, 1, 0, 1)?;
        let z_cls = tape.reshape(z_cls, &[batch, c])?;
        let z_patch = tape.narrow(z, 1, 1, np)?;
        let logits = match self.classifier {
            Some(_) => {
                let (hw, hb) = (next(), next());
                let y = tape.matmul(z_cls, hw)?;
                Some(tape.add_bias(y, hb)?)
            }
            None => None,
        };
        Ok(ForwardRecord {
            z_cls,
            z_patch,
            logits,
            hidden,
            params,
        })
    }

    /// Gradient-free forward returning `(z_cls, z_patch)` values.
    pub fn embed(&self, images: &Tensor, masks: &[Option<Tensor>]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let opts = ForwardOptions::default().with_masks(masks.to_vec());
        let rec = self.forward(&mut tape, images, &opts)?;
        Ok((tape.value(rec.z_cls).clone(), tape.value(rec.z_patch).clone()))
    }

    /// Exact number of parameter elements, classifier included.
    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn count_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Parameters belonging to MLP sublayers (fc1 and fc2, weights and biases).
    pub fn count_mlp_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.fc1.num_params() + b.fc2.num_params())
            .sum()
    }

    /// Forward FLOPs for one image at `image_size`, counted as
    /// 2 × multiply-accumulates of every matrix product:
    ///
    /// ```text
    /// patch embed   P·(p²·ch)·C            P = (image_size / p)², N = P + 1
    /// per block     4·N·C²                 q, k, v, output projections
    ///             + 2·N²·C                 QKᵀ and attention·V over all heads
    ///             + 2·N·C·M⁽ˡ⁾             fc1 and fc2
    /// classifier    C·K                    class token only, when present
    /// ```
    ///
    /// Elementwise work (norms, softmax, GELU, biases) is not counted.
    pub fn count_flops(&self, image_size: usize) -> u64 {
        let cfg = &self.config;
        let side = (image_size / cfg.patch_size) as u64;
        let p = side * side;
        let n = p + 1;
        let c = cfg.embed_dim as u64;
        let mut macs = p * cfg.patch_dim() as u64 * c;
        for b in &self.blocks {
            let m = b.fc1.bias.numel() as u64;
            macs += 4 * n * c * c + 2 * n * n * c + 2 * n * c * m;
        }
        if let Some(h) = &self.classifier {
            macs += h.weight.numel() as u64;
        }
        2 * macs
    }
}

/// `B × H × W × ch` → `B × P × (p·p·ch)`, patches in row-major grid order and
/// pixels within a patch ordered (row, column, channel).
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(AmpError::Shape(format!("cannot patchify {s:?} with patch {patch}")));
    }
    let (b, h, w, ch) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * ch;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let row = ((bi * h + py * patch + dy) * w + px * patch) * ch;
                    out.extend_from_slice(&src[row..row + patch * ch]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}
