//! Tiny convolutional baseline: conv → relu → maxpool blocks and a
//! linear head. The experimental contrast to the transformer, not a
//! product goal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::init::normal_tensor;
use crate::tensor::ops::{
    add_channel_bias, channel_bias_grad, conv2d, conv2d_backward, matmul, matmul_backward,
    max_pool2, max_pool2_backward, relu, relu_backward, bias_grad, add_bias,
};
use crate::tensor::{ImageTensor, Parameter, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyCnnConfig {
    /// Input image shape (C, H, W).
    pub image: (usize, usize, usize),
    /// Output channels per conv block; each block ends in 2×2 max pooling.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub num_classes: usize,
}

impl Default for TinyCnnConfig {
    fn default() -> Self {
        TinyCnnConfig {
            image: (3, 16, 16),
            channels: vec![32, 64, 128],
            kernel_size: 3,
            num_classes: 10,
        }
    }
}

impl TinyCnnConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.iter().any(|&f| f == 0) {
            return Err(Error::Config("conv channel widths must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd so padding preserves size",
                self.kernel_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        // Each block halves the spatial size; it must stay ≥1 and even
        // before every pooling step.
        let (mut hh, mut ww) = (h, w);
        for _ in &self.channels {
            if hh % 2 != 0 || ww % 2 != 0 {
                return Err(Error::Config(format!(
                    "spatial size {hh}×{ww} not divisible by 2 for pooling"
                )));
            }
            hh /= 2;
            ww /= 2;
            if hh == 0 || ww == 0 {
                return Err(Error::Config("too many pooling steps for image size".into()));
            }
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let (_, h, w) = self.image;
        let blocks = self.channels.len();
        let last = *self.channels.last().unwrap();
        last * (h >> blocks) * (w >> blocks)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock<T> {
    kernel: Parameter<T>,
    bias: Parameter<T>,
}

#[derive(Debug, Clone)]
pub struct TinyCnn<T> {
    pub config: TinyCnnConfig,
    blocks: Vec<ConvBlock<T>>,
    head_w: Parameter<T>,
    head_b: Parameter<T>,
}

pub struct CnnCache<T> {
    inputs: Vec<Tensor<T>>,
    pre_relu: Vec<Tensor<T>>,
    post_relu: Vec<Tensor<T>>,
    argmax: Vec<Vec<usize>>,
    flat: Tensor<T>,
}

impl<T: Scalar> TinyCnn<T> {
    pub fn build(config: TinyCnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand::SeedableRng::seed_from_u64(seed);
        let k = config.kernel_size;
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut in_ch = config.image.0;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            let fan_in = in_ch * k * k;
            let std = (2.0 / fan_in as f64).sqrt();
            blocks.push(ConvBlock {
                kernel: Parameter::new(
                    format!("conv{i}.w"),
                    normal_tensor(&mut rng, &[out_ch, in_ch, k, k], std),
                ),
                bias: Parameter::new(format!("conv{i}.b"), Tensor::zeros(&[out_ch])),
            });
            in_ch = out_ch;
        }
        let flat = config.flat_dim();
        let std = (2.0 / (flat + config.num_classes) as f64).sqrt();
        Ok(TinyCnn {
            head_w: Parameter::new(
                "head.w",
                normal_tensor(&mut rng, &[flat, config.num_classes], std),
            ),
            head_b: Parameter::new("head.b", Tensor::zeros(&[config.num_classes])),
            blocks,
            config,
        })
    }

    pub fn forward(&self, x: &ImageTensor) -> Result<Vec<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &ImageTensor) -> Result<(Vec<T>, CnnCache<T>)> {
        let (c, h, w) = self.config.image;
        if x.shape() != [c, h, w] {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match model image {:?}",
                x.shape(),
                self.config.image
            )));
        }
        let pad = self.config.kernel_size / 2;
        let mut cur: Tensor<T> = x.cast();
        let mut inputs = Vec::new();
        let mut pre_relu = Vec::new();
        let mut post_relu = Vec::new();
        let mut argmax = Vec::new();
        for block in &self.blocks {
            inputs.push(cur.clone());
            let z = add_channel_bias(&conv2d(&cur, &block.kernel.value, 1, pad)?, &block.bias.value)?;
            let r = relu(&z);
            let (pooled, idx) = max_pool2(&r)?;
            pre_relu.push(z);
            post_relu.push(r);
            argmax.push(idx);
            cur = pooled;
        }
        let flat = cur.reshape(&[1, cur.len()])?;
        let logits = add_bias(&matmul(&flat, &self.head_w.value)?, &self.head_b.value)?;
        Ok((
            logits.into_data(),
            CnnCache {
                inputs,
                pre_relu,
                post_relu,
                argmax,
                flat,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CnnCache<T>, dlogits: &[T]) -> Result<()> {
        if dlogits.len() != self.config.num_classes {
            return Err(Error::Dimension(format!(
                "dlogits length {} vs {} classes",
                dlogits.len(),
                self.config.num_classes
            )));
        }
        let dlogits_row = Tensor::new(vec![1, self.config.num_classes], dlogits.to_vec())?;
        let (dflat, dhead_w) = matmul_backward(&cache.flat, &self.head_w.value, &dlogits_row)?;
        self.head_w.grad.accumulate(&dhead_w)?;
        self.head_b.grad.accumulate(&bias_grad(&dlogits_row)?)?;

        let pad = self.config.kernel_size / 2;
        let blocks = self.blocks.len();
        let last_post = &cache.post_relu[blocks - 1];
        let pooled_shape = [
            last_post.shape()[0],
            last_post.shape()[1] / 2,
            last_post.shape()[2] / 2,
        ];
        let mut dcur = dflat.reshape(&pooled_shape)?;
        for i in (0..blocks).rev() {
            let drelu_out =
                max_pool2_backward(cache.post_relu[i].shape(), &cache.argmax[i], &dcur)?;
            let dz = relu_backward(&cache.pre_relu[i], &drelu_out)?;
            self.blocks[i].bias.grad.accumulate(&channel_bias_grad(&dz)?)?;
            let (dx, dk) = conv2d_backward(
                &cache.inputs[i],
                &self.blocks[i].kernel.value,
                1,
                pad,
                &dz,
            )?;
            self.blocks[i].kernel.grad.accumulate(&dk)?;
            dcur = dx;
        }
        Ok(())
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut params = Vec::new();
        for block in &self.blocks {
            params.push(&block.kernel);
            params.push(&block.bias);
        }
        params.push(&self.head_w);
        params.push(&self.head_b);
        params
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut params = Vec::new();
        for block in &mut self.blocks {
            params.push(&mut block.kernel);
            params.push(&mut block.bias);
        }
        params.push(&mut self.head_w);
        params.push(&mut self.head_b);
        params
    }
}
