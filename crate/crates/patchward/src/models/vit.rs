//! Tiny Vision Transformer trained from scratch.
//!
//! Architecture: patch embedding → learnable class token and positional
//! encoding → depth × [layer_norm → multi-head attention → residual →
//! layer_norm → GELU MLP → residual] → linear head on the class token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::init::normal_tensor;
use crate::tensor::ops::{
    add_bias, attention, attention_backward, bias_grad, gelu, gelu_backward, layer_norm,
    layer_norm_backward, matmul, matmul_backward, AttentionCache,
};
use crate::tensor::{ImageTensor, Parameter, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyViTConfig {
    /// Input image shape (C, H, W).
    pub image: (usize, usize, usize),
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for TinyViTConfig {
    fn default() -> Self {
        TinyViTConfig {
            image: (3, 16, 16),
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 10,
        }
    }
}

impl TinyViTConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide image {h}×{w}",
                self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "depth, mlp ratio, and class count must be positive (≥2 classes)".into(),
            ));
        }
        Ok(())
    }

    /// Patch tokens per image.
    pub fn num_patches(&self) -> usize {
        let (_, h, w) = self.image;
        (h / self.patch_size) * (w / self.patch_size)
    }

    /// Patch tokens plus the class token.
    pub fn sequence_length(&self) -> usize {
        self.num_patches() + 1
    }

    fn patch_dim(&self) -> usize {
        self.image.0 * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ViTBlock<T> {
    ln1_g: Parameter<T>,
    ln1_b: Parameter<T>,
    wq: Parameter<T>,
    bq: Parameter<T>,
    wk: Parameter<T>,
    bk: Parameter<T>,
    wv: Parameter<T>,
    bv: Parameter<T>,
    wo: Parameter<T>,
    bo: Parameter<T>,
    ln2_g: Parameter<T>,
    ln2_b: Parameter<T>,
    w1: Parameter<T>,
    b1: Parameter<T>,
    w2: Parameter<T>,
    b2: Parameter<T>,
}

#[derive(Debug, Clone)]
pub struct TinyViT<T> {
    pub config: TinyViTConfig,
    embed_w: Parameter<T>,
    embed_b: Parameter<T>,
    cls: Parameter<T>,
    pos: Parameter<T>,
    blocks: Vec<ViTBlock<T>>,
    head_w: Parameter<T>,
    head_b: Parameter<T>,
}

/// Forward-pass intermediates needed by the backward pass, one sample.
pub struct ViTCache<T> {
    patches: Tensor<T>,
    tokens: Tensor<T>,
    block_caches: Vec<BlockCache<T>>,
    final_tokens: Tensor<T>,
}

struct BlockCache<T> {
    x_in: Tensor<T>,
    n1: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: AttentionCache<T>,
    attn_out: Tensor<T>,
    x_mid: Tensor<T>,
    n2: Tensor<T>,
    h1: Tensor<T>,
    g: Tensor<T>,
}

impl<T: Scalar> TinyViT<T> {
    pub fn build(config: TinyViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let pd = config.patch_dim();
        let md = config.mlp_ratio * d;
        let seq = config.sequence_length();
        let mut rng = rand::SeedableRng::seed_from_u64(seed);
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();

        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(ViTBlock {
                ln1_g: Parameter::new(format!("block{i}.ln1.g"), Tensor::full(&[d], T::one())),
                ln1_b: Parameter::new(format!("block{i}.ln1.b"), Tensor::zeros(&[d])),
                wq: Parameter::new(
                    format!("block{i}.attn.wq"),
                    normal_tensor(&mut rng, &[d, d], xavier(d, d)),
                ),
                bq: Parameter::new(format!("block{i}.attn.bq"), Tensor::zeros(&[d])),
                wk: Parameter::new(
                    format!("block{i}.attn.wk"),
                    normal_tensor(&mut rng, &[d, d], xavier(d, d)),
                ),
                bk: Parameter::new(format!("block{i}.attn.bk"), Tensor::zeros(&[d])),
                wv: Parameter::new(
                    format!("block{i}.attn.wv"),
                    normal_tensor(&mut rng, &[d, d], xavier(d, d)),
                ),
                bv: Parameter::new(format!("block{i}.attn.bv"), Tensor::zeros(&[d])),
                wo: Parameter::new(
                    format!("block{i}.attn.wo"),
                    normal_tensor(&mut rng, &[d, d], xavier(d, d)),
                ),
                bo: Parameter::new(format!("block{i}.attn.bo"), Tensor::zeros(&[d])),
                ln2_g: Parameter::new(format!("block{i}.ln2.g"), Tensor::full(&[d], T::one())),
                ln2_b: Parameter::new(format!("block{i}.ln2.b"), Tensor::zeros(&[d])),
                w1: Parameter::new(
                    format!("block{i}.mlp.w1"),
                    normal_tensor(&mut rng, &[d, md], xavier(d, md)),
                ),
                b1: Parameter::new(format!("block{i}.mlp.b1"), Tensor::zeros(&[md])),
                w2: Parameter::new(
                    format!("block{i}.mlp.w2"),
                    normal_tensor(&mut rng, &[md, d], xavier(md, d)),
                ),
                b2: Parameter::new(format!("block{i}.mlp.b2"), Tensor::zeros(&[d])),
            });
        }

        Ok(TinyViT {
            embed_w: Parameter::new("embed.w", normal_tensor(&mut rng, &[pd, d], xavier(pd, d))),
            embed_b: Parameter::new("embed.b", Tensor::zeros(&[d])),
            cls: Parameter::new("cls", normal_tensor(&mut rng, &[d], 0.02)),
            pos: Parameter::new("pos", normal_tensor(&mut rng, &[seq, d], 0.02)),
            blocks,
            head_w: Parameter::new(
                "head.w",
                normal_tensor(
                    &mut rng,
                    &[d, config.num_classes],
                    xavier(d, config.num_classes),
                ),
            ),
            head_b: Parameter::new("head.b", Tensor::zeros(&[config.num_classes])),
            config,
        })
    }

    /// Flatten an image into its L×(C·p²) patch matrix, patches in
    /// row-major grid order, each patch C-major then row-major.
    fn extract_patches(&self, x: &ImageTensor) -> Result<Tensor<T>> {
        let (c, h, w) = self.config.image;
        if x.shape() != [c, h, w] {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match model image {:?}",
                x.shape(),
                self.config.image
            )));
        }
        let p = self.config.patch_size;
        let (gy, gx) = (h / p, w / p);
        let mut patches = Tensor::zeros(&[gy * gx, self.config.patch_dim()]);
        for py in 0..gy {
            for px in 0..gx {
                let row = py * gx + px;
                let mut col = 0usize;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = x.at3(ci, py * p + dy, px * p + dx);
                            patches.row_mut(row)[col] = T::from_f64(v as f64);
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(patches)
    }

    pub fn forward(&self, x: &ImageTensor) -> Result<Vec<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &ImageTensor) -> Result<(Vec<T>, ViTCache<T>)> {
        let eps = T::from_f64(LN_EPS);
        let d = self.config.embed_dim;
        let seq = self.config.sequence_length();
        let patches = self.extract_patches(x)?;
        let embedded = add_bias(&matmul(&patches, &self.embed_w.value)?, &self.embed_b.value)?;

        let mut tokens = Tensor::zeros(&[seq, d]);
        for j in 0..d {
            tokens.row_mut(0)[j] = self.cls.value.data()[j] + self.pos.value.row(0)[j];
        }
        for i in 0..seq - 1 {
            for j in 0..d {
                tokens.row_mut(i + 1)[j] = embedded.row(i)[j] + self.pos.value.row(i + 1)[j];
            }
        }

        let mut block_caches = Vec::with_capacity(self.config.depth);
        let mut x_cur = tokens.clone();
        for block in &self.blocks {
            let n1 = layer_norm(&x_cur, &block.ln1_g.value, &block.ln1_b.value, eps)?;
            let q = add_bias(&matmul(&n1, &block.wq.value)?, &block.bq.value)?;
            let k = add_bias(&matmul(&n1, &block.wk.value)?, &block.bk.value)?;
            let v = add_bias(&matmul(&n1, &block.wv.value)?, &block.bv.value)?;
            let (attn_out, attn) = attention(&q, &k, &v, self.config.heads)?;
            let o = add_bias(&matmul(&attn_out, &block.wo.value)?, &block.bo.value)?;
            let x_mid = x_cur.add(&o)?;
            let n2 = layer_norm(&x_mid, &block.ln2_g.value, &block.ln2_b.value, eps)?;
            let h1 = add_bias(&matmul(&n2, &block.w1.value)?, &block.b1.value)?;
            let g = gelu(&h1);
            let m = add_bias(&matmul(&g, &block.w2.value)?, &block.b2.value)?;
            let x_next = x_mid.add(&m)?;
            block_caches.push(BlockCache {
                x_in: x_cur,
                n1,
                q,
                k,
                v,
                attn,
                attn_out,
                x_mid,
                n2,
                h1,
                g,
            });
            x_cur = x_next;
        }

        let cls_row = Tensor::new(vec![1, d], x_cur.row(0).to_vec())?;
        let logits = add_bias(&matmul(&cls_row, &self.head_w.value)?, &self.head_b.value)?;
        let cache = ViTCache {
            patches,
            tokens,
            block_caches,
            final_tokens: x_cur,
        };
        Ok((logits.into_data(), cache))
    }

    /// Accumulate parameter gradients for one sample given the gradient of
    /// the loss with respect to its logits.
    pub fn backward(&mut self, cache: &ViTCache<T>, dlogits: &[T]) -> Result<()> {
        let eps = T::from_f64(LN_EPS);
        let d = self.config.embed_dim;
        let seq = self.config.sequence_length();
        if dlogits.len() != self.config.num_classes {
            return Err(Error::Dimension(format!(
                "dlogits length {} vs {} classes",
                dlogits.len(),
                self.config.num_classes
            )));
        }
        let dlogits_row = Tensor::new(vec![1, self.config.num_classes], dlogits.to_vec())?;
        let cls_row = Tensor::new(vec![1, d], cache.final_tokens.row(0).to_vec())?;
        let (dcls_row, dhead_w) = matmul_backward(&cls_row, &self.head_w.value, &dlogits_row)?;
        self.head_w.grad.accumulate(&dhead_w)?;
        self.head_b.grad.accumulate(&bias_grad(&dlogits_row)?)?;

        let mut dx = Tensor::zeros(&[seq, d]);
        dx.row_mut(0).copy_from_slice(dcls_row.data());

        for (block, bc) in self.blocks.iter_mut().zip(cache.block_caches.iter()).rev() {
            // x_next = x_mid + mlp(n2)
            let dm = dx.clone();
            let (dg, dw2) = matmul_backward(&bc.g, &block.w2.value, &dm)?;
            block.w2.grad.accumulate(&dw2)?;
            block.b2.grad.accumulate(&bias_grad(&dm)?)?;
            let dh1 = gelu_backward(&bc.h1, &dg)?;
            let (dn2, dw1) = matmul_backward(&bc.n2, &block.w1.value, &dh1)?;
            block.w1.grad.accumulate(&dw1)?;
            block.b1.grad.accumulate(&bias_grad(&dh1)?)?;
            let (dx_mid_ln, dg2, db2) =
                layer_norm_backward(&bc.x_mid, &block.ln2_g.value, eps, &dn2)?;
            block.ln2_g.grad.accumulate(&dg2)?;
            block.ln2_b.grad.accumulate(&db2)?;
            let dx_mid = dx.add(&dx_mid_ln)?;

            // x_mid = x_in + proj(attn(n1))
            let do_ = dx_mid.clone();
            let (dattn_out, dwo) = matmul_backward(&bc.attn_out, &block.wo.value, &do_)?;
            block.wo.grad.accumulate(&dwo)?;
            block.bo.grad.accumulate(&bias_grad(&do_)?)?;
            let (dq, dk, dv) = attention_backward(&bc.attn, &dattn_out)?;
            let (dn1_q, dwq) = matmul_backward(&bc.n1, &block.wq.value, &dq)?;
            block.wq.grad.accumulate(&dwq)?;
            block.bq.grad.accumulate(&bias_grad(&dq)?)?;
            let (dn1_k, dwk) = matmul_backward(&bc.n1, &block.wk.value, &dk)?;
            block.wk.grad.accumulate(&dwk)?;
            block.bk.grad.accumulate(&bias_grad(&dk)?)?;
            let (dn1_v, dwv) = matmul_backward(&bc.n1, &block.wv.value, &dv)?;
            block.wv.grad.accumulate(&dwv)?;
            block.bv.grad.accumulate(&bias_grad(&dv)?)?;
            let dn1 = dn1_q.add(&dn1_k)?.add(&dn1_v)?;
            let (dx_in_ln, dg1, db1) =
                layer_norm_backward(&bc.x_in, &block.ln1_g.value, eps, &dn1)?;
            block.ln1_g.grad.accumulate(&dg1)?;
            block.ln1_b.grad.accumulate(&db1)?;
            dx = dx_mid.add(&dx_in_ln)?;
        }

        // tokens = [cls; embedded] + pos
        self.pos.grad.accumulate(&dx)?;
        let dcls = Tensor::new(vec![d], dx.row(0).to_vec())?;
        self.cls.grad.accumulate(&dcls)?;
        let mut dembedded = Tensor::zeros(&[seq - 1, d]);
        for i in 0..seq - 1 {
            dembedded.row_mut(i).copy_from_slice(dx.row(i + 1));
        }
        let (_, dembed_w) = matmul_backward(&cache.patches, &self.embed_w.value, &dembedded)?;
        self.embed_w.grad.accumulate(&dembed_w)?;
        self.embed_b.grad.accumulate(&bias_grad(&dembedded)?)?;
        let _ = &cache.tokens;
        Ok(())
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut params = vec![&self.embed_w, &self.embed_b, &self.cls, &self.pos];
        for block in &self.blocks {
            params.extend([
                &block.ln1_g, &block.ln1_b, &block.wq, &block.bq, &block.wk, &block.bk,
                &block.wv, &block.bv, &block.wo, &block.bo, &block.ln2_g, &block.ln2_b,
                &block.w1, &block.b1, &block.w2, &block.b2,
            ]);
        }
        params.push(&self.head_w);
        params.push(&self.head_b);
        params
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut params = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for block in &mut self.blocks {
            params.extend([
                &mut block.ln1_g,
                &mut block.ln1_b,
                &mut block.wq,
                &mut block.bq,
                &mut block.wk,
                &mut block.bk,
                &mut block.wv,
                &mut block.bv,
                &mut block.wo,
                &mut block.bo,
                &mut block.ln2_g,
                &mut block.ln2_b,
                &mut block.w1,
                &mut block.b1,
                &mut block.w2,
                &mut block.b2,
            ]);
        }
        params.push(&mut self.head_w);
        params.push(&mut self.head_b);
        params
    }
}
