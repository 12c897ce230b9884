//! Compact Vision Transformer backbone: patchify, linear embedding, CLS
//! token, learnable positional embeddings, pre-norm encoder blocks, and a
//! CLS-read classification head. Also houses the parameter and MAC
//! accounting used by the overhead comparisons.
//!
//! No projection carries a bias term; the only non-matrix parameters are
//! the layer-norm scale/offset pairs, the CLS token, the positional table,
//! and the per-head sigma. That keeps the SVDA-vs-baseline parameter delta
//! at exactly layers x heads x head_dim.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::attention::{
    multi_head_forward, AttentionOutput, AttentionVariant, HeadVars, SvdaHeadParams, INIT_STD,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Images per inference tape when evaluating batches in parallel. Fixed
/// (not thread-count dependent) so reductions happen in a fixed order.
pub(crate) const INFER_CHUNK: usize = 16;

/// Architecture of a [`VitModel`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub classes: usize,
    pub variant: AttentionVariant,
}

impl VitConfig {
    /// 28x28 grayscale config: d=256, 4 layers, 4 heads, MLP 1024, patch 4.
    pub fn fashion_mnist(variant: AttentionVariant) -> Self {
        VitConfig {
            image_height: 28,
            image_width: 28,
            channels: 1,
            patch_size: 4,
            embed_dim: 256,
            layers: 4,
            heads: 4,
            mlp_dim: 1024,
            classes: 10,
            variant,
        }
    }

    /// 32x32 RGB config sharing the FashionMNIST architecture.
    pub fn cifar10(variant: AttentionVariant) -> Self {
        VitConfig {
            image_height: 32,
            image_width: 32,
            channels: 3,
            classes: 10,
            ..Self::fashion_mnist(variant)
        }
    }

    pub fn cifar100(variant: AttentionVariant) -> Self {
        VitConfig {
            classes: 100,
            ..Self::cifar10(variant)
        }
    }

    /// 224x224 config: d=96, 8 layers, 2 heads, MLP 384, patch 8.
    pub fn imagenet100(variant: AttentionVariant) -> Self {
        VitConfig {
            image_height: 224,
            image_width: 224,
            channels: 3,
            patch_size: 8,
            embed_dim: 96,
            layers: 8,
            heads: 2,
            mlp_dim: 384,
            classes: 100,
            variant,
        }
    }

    /// Small 28x28 config for the synthetic-blob experiments.
    pub fn blobs_compact(variant: AttentionVariant) -> Self {
        VitConfig {
            image_height: 28,
            image_width: 28,
            channels: 1,
            patch_size: 4,
            embed_dim: 64,
            layers: 2,
            heads: 2,
            mlp_dim: 128,
            classes: 10,
            variant,
        }
    }

    /// Miniature gradient-check config: d=8, 1 layer, 1 head, 5 tokens.
    pub fn miniature(variant: AttentionVariant) -> Self {
        VitConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            layers: 1,
            heads: 1,
            mlp_dim: 16,
            classes: 4,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.classes == 0 || self.channels == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("zero-sized config field".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Token count including the CLS token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// One encoder block's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub heads: Vec<SvdaHeadParams>,
    /// d x d output projection.
    pub w_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// d x mlp_dim.
    pub mlp_w1: Tensor,
    /// mlp_dim x d.
    pub mlp_w2: Tensor,
}

/// The full model: embedding pipeline, encoder stack, classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct VitModel {
    pub config: VitConfig,
    /// (P^2 * channels) x d patch projection.
    pub patch_proj: Tensor,
    /// 1 x d learnable CLS token.
    pub cls_token: Tensor,
    /// tokens x d learnable positional table.
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    /// d x classes classifier applied to the final CLS embedding.
    pub classifier: Tensor,
}

/// Tape handles for all model parameters.
pub struct VitVars {
    pub patch_proj: Var,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_ln_gamma: Var,
    pub final_ln_beta: Var,
    pub classifier: Var,
}

pub struct LayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub heads: Vec<HeadVars>,
    pub w_o: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp_w1: Var,
    pub mlp_w2: Var,
}

/// One image's forward pass, still attached to its tape.
pub struct ForwardTrace {
    /// 1 x classes logits.
    pub logits: Var,
    /// Per-layer, per-head attention diagnostics.
    pub attention: Vec<Vec<AttentionOutput>>,
    /// n x d token matrix after the last block, before the final norm.
    pub tokens_out: Var,
}

/// Materialized per-head diagnostics detached from any tape.
#[derive(Clone, Debug)]
pub struct HeadDiagnostics {
    pub attention_map: Tensor,
    pub q_normed: Tensor,
    pub k_normed: Tensor,
}

/// Materialized forward results for one image.
#[derive(Clone, Debug)]
pub struct ImageDiagnostics {
    /// 1 x classes logits.
    pub logits: Tensor,
    /// `heads[layer][head]`.
    pub heads: Vec<Vec<HeadDiagnostics>>,
}

/// Splits an image into non-overlapping P x P patches, one flattened patch
/// per row in row-major patch order. Within a patch the layout is
/// channel-major, then row-major.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return Err(Error::Config(format!(
            "patchify expects channels x H x W, got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let patch_dim = patch_size * patch_size * c;
    let mut out = vec![0.0; gh * gw * patch_dim];
    let data = image.data();
    for pr in 0..gh {
        for pc in 0..gw {
            let row = &mut out[(pr * gw + pc) * patch_dim..(pr * gw + pc + 1) * patch_dim];
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..patch_size {
                    let y = pr * patch_size + dy;
                    let base = ch * h * w + y * w + pc * patch_size;
                    row[k..k + patch_size].copy_from_slice(&data[base..base + patch_size]);
                    k += patch_size;
                }
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, patch_dim], out)
}

impl VitModel {
    /// Fresh model with N(0, 0.02) weights, unit layer-norm scales and
    /// sigma, zero offsets. Draw order is the canonical parameter order, so
    /// a seed fully determines the weights.
    pub fn init(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
        };
        let d = config.embed_dim;
        let patch_proj = draw(&[config.patch_dim(), d]);
        let cls_token = draw(&[1, d]);
        let pos_embed = draw(&[config.tokens(), d]);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                heads: (0..config.heads)
                    .map(|_| SvdaHeadParams::init(d, config.head_dim(), &mut rng))
                    .collect(),
                w_o: draw(&[d, d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                mlp_w1: draw(&[d, config.mlp_dim]),
                mlp_w2: draw(&[config.mlp_dim, d]),
            })
            .collect();
        Ok(VitModel {
            patch_proj,
            cls_token,
            pos_embed,
            layers,
            final_ln_gamma: Tensor::ones(&[d]),
            final_ln_beta: Tensor::zeros(&[d]),
            classifier: draw(&[d, config.classes]),
            config,
        })
    }

    /// Same weights under the other attention variant. Baseline-to-SVDA
    /// conversion keeps the stored sigma (ones unless trained), so baseline
    /// weights reproduce cosine-normalized behavior without shape errors.
    pub fn to_variant(&self, variant: AttentionVariant) -> VitModel {
        let mut m = self.clone();
        m.config.variant = variant;
        m
    }

    /// Parameters in canonical order, paired with their checkpoint names.
    /// Baseline models exclude sigma (it is not trainable there).
    pub fn visit_params(&self) -> Vec<(String, &Tensor)> {
        let svda = self.config.variant == AttentionVariant::Svda;
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1.gamma"), &layer.ln1_gamma));
            out.push((format!("layer{l}.ln1.beta"), &layer.ln1_beta));
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), &head.w_q));
                out.push((format!("layer{l}.head{h}.w_k"), &head.w_k));
                out.push((format!("layer{l}.head{h}.w_v"), &head.w_v));
                if svda {
                    out.push((format!("layer{l}.head{h}.sigma"), &head.sigma));
                }
            }
            out.push((format!("layer{l}.w_o"), &layer.w_o));
            out.push((format!("layer{l}.ln2.gamma"), &layer.ln2_gamma));
            out.push((format!("layer{l}.ln2.beta"), &layer.ln2_beta));
            out.push((format!("layer{l}.mlp.w1"), &layer.mlp_w1));
            out.push((format!("layer{l}.mlp.w2"), &layer.mlp_w2));
        }
        out.push(("final_ln.gamma".into(), &self.final_ln_gamma));
        out.push(("final_ln.beta".into(), &self.final_ln_beta));
        out.push(("classifier".into(), &self.classifier));
        out
    }

    /// Mutable view in the same canonical order as [`VitModel::visit_params`].
    pub fn visit_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let svda = self.config.variant == AttentionVariant::Svda;
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.ln1.gamma"), &mut layer.ln1_gamma));
            out.push((format!("layer{l}.ln1.beta"), &mut layer.ln1_beta));
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), &mut head.w_q));
                out.push((format!("layer{l}.head{h}.w_k"), &mut head.w_k));
                out.push((format!("layer{l}.head{h}.w_v"), &mut head.w_v));
                if svda {
                    out.push((format!("layer{l}.head{h}.sigma"), &mut head.sigma));
                }
            }
            out.push((format!("layer{l}.w_o"), &mut layer.w_o));
            out.push((format!("layer{l}.ln2.gamma"), &mut layer.ln2_gamma));
            out.push((format!("layer{l}.ln2.beta"), &mut layer.ln2_beta));
            out.push((format!("layer{l}.mlp.w1"), &mut layer.mlp_w1));
            out.push((format!("layer{l}.mlp.w2"), &mut layer.mlp_w2));
        }
        out.push(("final_ln.gamma".into(), &mut self.final_ln_gamma));
        out.push(("final_ln.beta".into(), &mut self.final_ln_beta));
        out.push(("classifier".into(), &mut self.classifier));
        out
    }

    /// Registers every parameter on the tape.
    pub fn register(&self, tape: &mut Tape, tracked: bool) -> VitVars {
        let variant = self.config.variant;
        let mut reg = |t: &Tensor| {
            if tracked {
                tape.tracked(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let patch_proj = reg(&self.patch_proj);
        let cls_token = reg(&self.cls_token);
        let pos_embed = reg(&self.pos_embed);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ln1_gamma = reg(&layer.ln1_gamma);
            let ln1_beta = reg(&layer.ln1_beta);
            let heads: Vec<HeadVars> = layer
                .heads
                .iter()
                .map(|h| h.register(tape, tracked, variant))
                .collect();
            let w_o = reg(&layer.w_o);
            let ln2_gamma = reg(&layer.ln2_gamma);
            let ln2_beta = reg(&layer.ln2_beta);
            let mlp_w1 = reg(&layer.mlp_w1);
            let mlp_w2 = reg(&layer.mlp_w2);
            layers.push(LayerVars {
                ln1_gamma,
                ln1_beta,
                heads,
                w_o,
                ln2_gamma,
                ln2_beta,
                mlp_w1,
                mlp_w2,
            });
        }
        let final_ln_gamma = reg(&self.final_ln_gamma);
        let final_ln_beta = reg(&self.final_ln_beta);
        let classifier = reg(&self.classifier);
        VitVars {
            patch_proj,
            cls_token,
            pos_embed,
            layers,
            final_ln_gamma,
            final_ln_beta,
            classifier,
        }
    }

    /// Patchify, project, prepend CLS, add positional embeddings.
    pub fn embed(&self, tape: &mut Tape, vars: &VitVars, image: &Tensor) -> Result<Var> {
        let patches = patchify(image, self.config.patch_size)?;
        if patches.cols() != self.config.patch_dim() {
            return Err(Error::Config(format!(
                "image shape {:?} does not match config patch dim {}",
                image.shape(),
                self.config.patch_dim()
            )));
        }
        let patches = tape.constant(patches);
        let projected = tape.matmul(patches, vars.patch_proj)?;
        let tokens = tape.concat_rows(&[vars.cls_token, projected])?;
        tape.add(tokens, vars.pos_embed)
    }

    /// Pre-norm encoder stack over a token matrix.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &VitVars,
        tokens: Var,
    ) -> Result<(Var, Vec<Vec<AttentionOutput>>)> {
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &vars.layers {
            let normed = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta)?;
            let (attn_out, heads) =
                multi_head_forward(tape, normed, &layer.heads, layer.w_o, self.config.variant)?;
            x = tape.add(x, attn_out)?;
            let normed = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta)?;
            let hidden = tape.matmul(normed, layer.mlp_w1)?;
            let hidden = tape.gelu(hidden);
            let mlp_out = tape.matmul(hidden, layer.mlp_w2)?;
            x = tape.add(x, mlp_out)?;
            attention.push(heads);
        }
        Ok((x, attention))
    }

    /// Full forward pass for one image on the given tape.
    pub fn forward_image(
        &self,
        tape: &mut Tape,
        vars: &VitVars,
        image: &Tensor,
    ) -> Result<ForwardTrace> {
        let tokens = self.embed(tape, vars, image)?;
        let (tokens_out, attention) = self.encode(tape, vars, tokens)?;
        let normed = tape.layer_norm(tokens_out, vars.final_ln_gamma, vars.final_ln_beta)?;
        let cls = tape.row(normed, 0)?;
        let logits = tape.matmul(cls, vars.classifier)?;
        Ok(ForwardTrace {
            logits,
            attention,
            tokens_out,
        })
    }

    /// Batch logits, B x classes. Images are processed in fixed-size chunks
    /// in parallel and reassembled in index order, so the result is
    /// deterministic regardless of thread count.
    pub fn logits_batch(&self, images: &[Tensor]) -> Result<Tensor> {
        let classes = self.config.classes;
        let chunk_logits: Vec<Vec<f64>> = images
            .par_chunks(INFER_CHUNK)
            .map(|chunk| -> Result<Vec<f64>> {
                let mut tape = Tape::new();
                let vars = self.register(&mut tape, false);
                let mut out = Vec::with_capacity(chunk.len() * classes);
                for image in chunk {
                    let trace = self.forward_image(&mut tape, &vars, image)?;
                    out.extend_from_slice(tape.value(trace.logits).data());
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(images.len() * classes);
        for chunk in chunk_logits {
            data.extend(chunk);
        }
        Tensor::from_vec(vec![images.len(), classes], data)
    }

    /// Batch forward keeping per-head diagnostics, detached from any tape.
    pub fn infer_batch(&self, images: &[Tensor]) -> Result<Vec<ImageDiagnostics>> {
        let per_chunk: Vec<Vec<ImageDiagnostics>> = images
            .par_chunks(INFER_CHUNK)
            .map(|chunk| -> Result<Vec<ImageDiagnostics>> {
                let mut tape = Tape::new();
                let vars = self.register(&mut tape, false);
                let mut out = Vec::with_capacity(chunk.len());
                for image in chunk {
                    let trace = self.forward_image(&mut tape, &vars, image)?;
                    let heads = trace
                        .attention
                        .iter()
                        .map(|layer| {
                            layer
                                .iter()
                                .map(|h| HeadDiagnostics {
                                    attention_map: tape.value(h.attention_map).clone(),
                                    q_normed: tape.value(h.q_normed).clone(),
                                    k_normed: tape.value(h.k_normed).clone(),
                                })
                                .collect()
                        })
                        .collect();
                    out.push(ImageDiagnostics {
                        logits: tape.value(trace.logits).clone(),
                        heads,
                    });
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(per_chunk.into_iter().flatten().collect())
    }

    /// Total trainable scalars.
    pub fn parameter_total(&self) -> usize {
        self.visit_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Trainable scalars grouped by component.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = vec![
            ("embedding".into(), 0),
            ("layer_norm".into(), 0),
            ("attention".into(), 0),
            ("sigma".into(), 0),
            ("mlp".into(), 0),
            ("classifier".into(), 0),
        ];
        let mut add = |key: &str, n: usize, groups: &mut Vec<(String, usize)>| {
            let g = groups.iter_mut().find(|(k, _)| k == key).expect("group");
            g.1 += n;
        };
        for (name, t) in self.visit_params() {
            let key = if name == "patch_proj" || name == "cls_token" || name == "pos_embed" {
                "embedding"
            } else if name.contains(".ln") || name.starts_with("final_ln") {
                "layer_norm"
            } else if name.ends_with(".sigma") {
                "sigma"
            } else if name.contains(".head") || name.ends_with(".w_o") {
                "attention"
            } else if name.contains(".mlp") {
                "mlp"
            } else {
                "classifier"
            };
            add(key, t.len(), &mut groups);
        }
        groups
    }
}

/// Analytic multiply-accumulate count per forward image.
///
/// Counts matrix-product MACs term by term; softmax, layer norms, GELU and
/// the ℓ2 normalizations are excluded (they are O(n·d) elementwise work).
/// The SVDA diagonal scaling is counted as one multiply per element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacCount {
    pub terms: Vec<(&'static str, u64)>,
    pub total: u64,
}

pub fn count_macs(config: &VitConfig) -> MacCount {
    let n = config.tokens() as u64;
    let d = config.embed_dim as u64;
    let l = config.layers as u64;
    let mlp = config.mlp_dim as u64;
    let n_p = config.num_patches() as u64;
    let patch_dim = config.patch_dim() as u64;
    let classes = config.classes as u64;

    let mut terms: Vec<(&'static str, u64)> = Vec::new();
    // n_p patches each projected from patch_dim to d
    terms.push(("patch_projection", n_p * patch_dim * d));
    // per layer: three projections of n tokens from d to d (all heads together)
    terms.push(("qkv_projections", l * 3 * n * d * d));
    if config.variant == AttentionVariant::Svda {
        // diagonal sigma scaling of the normalized queries, all heads
        terms.push(("sigma_scaling", l * n * d));
    }
    // per layer: score matrix n x n summed over d_k, per head => n^2 * d
    terms.push(("attention_scores", l * n * n * d));
    // per layer: attention map applied to values
    terms.push(("attention_values", l * n * n * d));
    // per layer: output projection d -> d
    terms.push(("output_projection", l * n * d * d));
    // per layer: two MLP matmuls d -> mlp -> d
    terms.push(("mlp", l * 2 * n * d * mlp));
    // classifier reads the CLS token only
    terms.push(("classifier", d * classes));

    let total = terms.iter().map(|(_, v)| v).sum();
    MacCount { terms, total }
}
