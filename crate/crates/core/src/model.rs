//! Compact convolutional encoder with a global-average-pooling linear head.
//!
//! Each block is a 3×3 convolution with stride 2 and padding 1 followed by
//! ReLU, so `B` blocks map an `h × w` image to an `h/2^B × w/2^B` feature grid.
//! The baseline head is `linear(gap(E))`; the masked head inserts the spatial
//! mask: `linear(gap(E ⊙ sigmoid(logits)))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mask::{self, MaskParams};
use crate::rng;
use crate::tensor::{conv_out_len, Tape, Tensor, Var};
use crate::{Error, Result};

pub const CONV_STRIDE: usize = 2;
pub const CONV_PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Masked,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Masked => "masked",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "masked" => Ok(Variant::Masked),
            other => Err(Error::Usage(format!(
                "unknown variant {other:?} (expected baseline or masked)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub block_channels: Vec<usize>,
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            block_channels: vec![8, 16],
            n_classes: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::config(
                "block_channels must be a nonempty list of positive counts",
            ));
        }
        if self.channels == 0 || self.n_classes == 0 {
            return Err(Error::config("channels and n_classes must be positive"));
        }
        let factor = 1usize << self.block_channels.len();
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::config(format!(
                "input {}×{} is not divisible by 2^{} blocks",
                self.height,
                self.width,
                self.block_channels.len()
            )));
        }
        let (rows, cols) = self.feature_grid();
        if rows < 2 || cols < 2 {
            return Err(Error::config(format!(
                "feature grid {rows}×{cols} is smaller than 2×2"
            )));
        }
        Ok(())
    }

    /// Spatial size of the encoder output.
    pub fn feature_grid(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.block_channels {
            h = conv_out_len(h, CONV_STRIDE, CONV_PADDING).unwrap_or(0);
            w = conv_out_len(w, CONV_STRIDE, CONV_PADDING).unwrap_or(0);
        }
        (h, w)
    }

    pub fn feature_channels(&self) -> usize {
        *self
            .block_channels
            .last()
            .expect("validated config has blocks")
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Every trainable tensor of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    pub head_weights: Tensor,
    pub head_bias: Tensor,
    pub mask: Option<MaskParams>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-s..=s)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl ModelParams {
    /// Seeded initialization: weights uniform in `±sqrt(1/fan_in)`, biases
    /// zero, mask logits at [`mask::MASK_INIT_LOGIT`]. The mask draws no random
    /// numbers, so both variants share encoder and head weights for a seed.
    pub fn init(config: &EncoderConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(seed);
        let mut blocks = Vec::with_capacity(config.block_channels.len());
        let mut c_in = config.channels;
        for &c_out in &config.block_channels {
            blocks.push(ConvBlock {
                kernels: uniform(&mut rng, &[c_out, c_in, 3, 3], c_in * 9),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        let head_weights = uniform(&mut rng, &[config.n_classes, c_in], c_in);
        let head_bias = Tensor::zeros(&[config.n_classes]);
        let mask = match variant {
            Variant::Baseline => None,
            Variant::Masked => {
                let (rows, cols) = config.feature_grid();
                Some(MaskParams::init(rows, cols))
            }
        };
        Ok(Self {
            config: config.clone(),
            blocks,
            head_weights,
            head_bias,
            mask,
        })
    }

    pub fn variant(&self) -> Variant {
        if self.mask.is_some() {
            Variant::Masked
        } else {
            Variant::Baseline
        }
    }

    /// Fails if these parameters are not of the requested variant.
    pub fn expect_variant(&self, variant: Variant) -> Result<()> {
        match (variant, self.variant()) {
            (Variant::Baseline, Variant::Masked) => Err(Error::Checkpoint(
                "unexpected tensor \"mask.logits\" for a baseline model".into(),
            )),
            (Variant::Masked, Variant::Baseline) => Err(Error::Checkpoint(
                "missing tensor \"mask.logits\" for a masked model".into(),
            )),
            _ => Ok(()),
        }
    }

    /// `(name, tensor)` pairs in canonical order; gradients and optimizer
    /// state use the same order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.kernels"), &b.kernels));
            out.push((format!("conv{i}.bias"), &b.bias));
        }
        out.push(("head.weights".into(), &self.head_weights));
        out.push(("head.bias".into(), &self.head_bias));
        if let Some(m) = &self.mask {
            out.push(("mask.logits".into(), m.logits()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.kernels);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        if let Some(m) = &mut self.mask {
            out.push(m.logits_mut());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.block_channels.len() {
            return Err(Error::config("block count does not match config"));
        }
        let mut c_in = self.config.channels;
        for (i, (b, &c_out)) in self
            .blocks
            .iter()
            .zip(&self.config.block_channels)
            .enumerate()
        {
            if b.kernels.shape() != [c_out, c_in, 3, 3] || b.bias.shape() != [c_out] {
                return Err(Error::config(format!(
                    "conv{i} tensors do not match config"
                )));
            }
            c_in = c_out;
        }
        if self.head_weights.shape() != [self.config.n_classes, c_in]
            || self.head_bias.shape() != [self.config.n_classes]
        {
            return Err(Error::config("head tensors do not match config"));
        }
        if let Some(m) = &self.mask {
            if m.grid() != self.config.feature_grid() {
                return Err(Error::shape(format!(
                    "mask grid {:?} does not match feature grid {:?}",
                    m.grid(),
                    self.config.feature_grid()
                )));
            }
        }
        Ok(())
    }
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    /// Parameter leaves, in [`ModelParams::named_tensors`] order.
    pub params: Vec<Var>,
    pub image: Var,
    /// Encoder output `E`.
    pub features: Var,
    /// `E ⊙ M` for the masked head, otherwise `E`.
    pub selected: Var,
    pub mask: Option<Var>,
    pub logits: Var,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }
}

fn check_image(config: &EncoderConfig, image: &Tensor) -> Result<()> {
    if image.shape() != config.image_shape() {
        return Err(Error::config(format!(
            "image shape {:?} does not match encoder input {:?}",
            image.shape(),
            config.image_shape()
        )));
    }
    Ok(())
}

/// Records the encoder only.
pub fn encode_on(tape: &mut Tape, params: &ModelParams, image: Var) -> Result<(Var, Vec<Var>)> {
    let mut vars = Vec::new();
    let mut x = image;
    for b in &params.blocks {
        let k = tape.leaf(b.kernels.clone());
        let bias = tape.leaf(b.bias.clone());
        vars.push(k);
        vars.push(bias);
        let z = tape.conv2d(x, k, bias, CONV_STRIDE, CONV_PADDING)?;
        x = tape.relu(z);
    }
    Ok((x, vars))
}

/// `E = encoder(image)`, evaluated eagerly.
pub fn encode(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    check_image(&params.config, image)?;
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let (e, _) = encode_on(&mut tape, params, x)?;
    Ok(tape.value(e).clone())
}

/// Records a full forward pass through the requested head.
pub fn forward(params: &ModelParams, image: &Tensor, head: Variant) -> Result<ForwardPass> {
    check_image(&params.config, image)?;
    let mut tape = Tape::new();
    let image_var = tape.leaf(image.clone());
    let (features, mut vars) = encode_on(&mut tape, params, image_var)?;
    let w = tape.leaf(params.head_weights.clone());
    let b = tape.leaf(params.head_bias.clone());
    vars.push(w);
    vars.push(b);

    let (selected, mask) = match head {
        Variant::Baseline => (features, None),
        Variant::Masked => {
            let m = params
                .mask
                .as_ref()
                .ok_or_else(|| Error::shape("masked prediction needs mask logits"))?;
            let logits = tape.leaf(m.logits().clone());
            vars.push(logits);
            let mask_var = mask::mask_from_logits(&mut tape, logits);
            (
                mask::apply_mask(&mut tape, features, mask_var)?,
                Some(mask_var),
            )
        }
    };
    let pooled = tape.gap(selected)?;
    let logits = tape.linear(pooled, w, b)?;
    Ok(ForwardPass {
        tape,
        params: vars,
        image: image_var,
        features,
        selected,
        mask,
        logits,
    })
}

/// `linear(gap(E))`, ignoring any mask the parameters carry.
pub fn predict_baseline(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    Ok(forward(params, image, Variant::Baseline)?.logits().clone())
}

/// `linear(gap(E ⊙ M))`.
pub fn predict_masked(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    Ok(forward(params, image, Variant::Masked)?.logits().clone())
}

/// Logits through the head matching the parameters' own variant.
pub fn predict(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    Ok(forward(params, image, params.variant())?.logits().clone())
}
