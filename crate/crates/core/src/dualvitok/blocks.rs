use candle_core::Tensor;

use super::TokenizerConfig;
use crate::error::Result;
use crate::nn::{
    channel_norm, channel_to_space, sigmoid, sincos_2d, space_to_channel, upsample_nearest,
    Conv2d, LayerNorm, Linear, Rope2d, Scope, TransformerBlock,
};

const NORM_EPS: f64 = 1e-5;

fn silu_norm(x: &Tensor) -> Result<Tensor> {
    Ok(channel_norm(x, NORM_EPS)?.silu()?)
}

/// Frozen patch transformer standing in for a pretrained vision encoder.
pub struct Backbone {
    patch: usize,
    embed: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    dim: usize,
}

pub struct BackboneOut {
    /// Final features, (B, N, D_sem) in row-major grid order.
    pub features: Tensor,
    /// Output of every block, used by the perceptual loss.
    pub intermediates: Vec<Tensor>,
    pub grid: (usize, usize),
}

impl Backbone {
    pub fn new(scope: Scope<'_>, cfg: &TokenizerConfig) -> Result<Self> {
        let f = cfg.sem_downsample;
        Ok(Self {
            patch: f,
            embed: scope.pp("embed").linear(3 * f * f, cfg.sem_feature_dim, true)?,
            blocks: (0..cfg.backbone_blocks)
                .map(|i| {
                    TransformerBlock::new(
                        scope.pp(format!("block{i}")),
                        cfg.sem_feature_dim,
                        cfg.backbone_heads,
                        2,
                    )
                })
                .collect::<Result<_>>()?,
            norm: scope.pp("norm").layer_norm(cfg.sem_feature_dim)?,
            dim: cfg.sem_feature_dim,
        })
    }

    /// `x`: (B, 3, H, W) in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<BackboneOut> {
        let (b, _, h, w) = x.dims4()?;
        let (gh, gw) = (h / self.patch, w / self.patch);
        let x = ((x * 2.0)? - 1.0)?;
        let patches = space_to_channel(&x, self.patch)?
            .reshape((b, 3 * self.patch * self.patch, gh * gw))?
            .transpose(1, 2)?;
        let pos = sincos_2d(gh, gw, self.dim, x.dtype(), x.device())?;
        let mut t = self.embed.forward(&patches)?.broadcast_add(&pos)?;
        let mut intermediates = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            t = block.forward(&t, None, None, None)?;
            intermediates.push(t.clone());
        }
        Ok(BackboneOut {
            features: self.norm.forward(&t)?,
            intermediates,
            grid: (gh, gw),
        })
    }
}

/// Transformer mapping semantic codes back to backbone feature space.
pub struct SemanticDecoder {
    input: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    output: Linear,
    heads: usize,
    dim: usize,
}

impl SemanticDecoder {
    pub fn new(scope: Scope<'_>, code_dim: usize, cfg: &TokenizerConfig) -> Result<Self> {
        let dim = cfg.sem_decoder_dim;
        let heads = (dim / 16).max(1);
        Ok(Self {
            input: scope.pp("input").linear(code_dim, dim, true)?,
            blocks: (0..cfg.sem_decoder_blocks)
                .map(|i| TransformerBlock::new(scope.pp(format!("block{i}")), dim, heads, 2))
                .collect::<Result<_>>()?,
            norm: scope.pp("norm").layer_norm(dim)?,
            output: scope.pp("output").linear(dim, cfg.sem_feature_dim, true)?,
            heads,
            dim,
        })
    }

    /// `x`: (B, gh·gw, code_dim) -> (B, gh·gw, D_sem).
    pub fn forward(&self, x: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
        let rope = Rope2d::new(gh, gw, self.dim / self.heads, x.dtype(), x.device())?;
        let mut t = self.input.forward(x)?;
        for block in &self.blocks {
            t = block.forward(&t, Some(&rope), None, None)?;
        }
        self.output.forward(&self.norm.forward(&t)?)
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(scope: Scope<'_>, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: scope.pp("conv1").conv2d(ch, ch, 3, 1, 1)?,
            conv2: scope.pp("conv2").conv2d(ch, ch, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu_norm(x)?)?;
        let h = self.conv2.forward(&silu_norm(&h)?)?;
        Ok((x + h)?)
    }
}

/// 2× downsampling: space-to-channel with a channel-averaging shortcut, or a
/// strided convolution.
enum Down {
    Dc(Conv2d),
    Strided(Conv2d),
}

impl Down {
    fn new(scope: Scope<'_>, ch: usize, dc: bool) -> Result<Self> {
        Ok(if dc {
            Down::Dc(scope.pp("proj").conv2d(4 * ch, ch, 1, 1, 0)?)
        } else {
            Down::Strided(scope.pp("conv").conv2d(ch, ch, 3, 2, 1)?)
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Down::Dc(conv) => {
                let (b, c, h, w) = x.dims4()?;
                let folded = space_to_channel(x, 2)?;
                let shortcut = folded.reshape((b, c, 4, h / 2, w / 2))?.mean(2)?;
                Ok((conv.forward(&folded)? + shortcut)?)
            }
            Down::Strided(conv) => conv.forward(x),
        }
    }
}

/// 2× upsampling: channel-to-space with a duplicating shortcut, or nearest
/// interpolation followed by a convolution.
enum Up {
    Dc(Conv2d),
    Interp(Conv2d),
}

impl Up {
    fn new(scope: Scope<'_>, ch: usize, dc: bool) -> Result<Self> {
        Ok(if dc {
            Up::Dc(scope.pp("proj").conv2d(ch, 4 * ch, 1, 1, 0)?)
        } else {
            Up::Interp(scope.pp("conv").conv2d(ch, ch, 3, 1, 1)?)
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Up::Dc(conv) => {
                let spread = channel_to_space(&conv.forward(x)?, 2)?;
                Ok((spread + upsample_nearest(x, 2)?)?)
            }
            Up::Interp(conv) => conv.forward(&upsample_nearest(x, 2)?),
        }
    }
}

pub struct PixelEncoder {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, Down)>,
    mid: ResBlock,
    conv_out: Conv2d,
}

impl PixelEncoder {
    pub fn new(scope: Scope<'_>, cfg: &TokenizerConfig) -> Result<Self> {
        let c = cfg.enc_channels;
        let n = cfg.pix_downsample.trailing_zeros() as usize;
        Ok(Self {
            conv_in: scope.pp("conv_in").conv2d(3, c, 3, 1, 1)?,
            stages: (0..n)
                .map(|i| {
                    let s = scope.pp(format!("stage{i}"));
                    Ok((ResBlock::new(s.pp("res"), c)?, Down::new(s.pp("down"), c, cfg.dc_block)?))
                })
                .collect::<Result<_>>()?,
            mid: ResBlock::new(scope.pp("mid"), c)?,
            conv_out: scope.pp("conv_out").conv2d(c, cfg.code_dim, 1, 1, 0)?,
        })
    }

    /// (B, 3, H, W) -> (B, D, H/f, W/f).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(&((x * 2.0)? - 1.0)?)?;
        for (res, down) in &self.stages {
            h = down.forward(&res.forward(&h)?)?;
        }
        h = self.mid.forward(&h)?;
        self.conv_out.forward(&silu_norm(&h)?)
    }
}

/// Fusion decoder from a code map to an RGB image in `[0, 1]`.
pub struct PixelDecoder {
    conv_in: Conv2d,
    mid: ResBlock,
    stages: Vec<(Up, ResBlock)>,
    conv_out: Conv2d,
}

impl PixelDecoder {
    pub fn new(scope: Scope<'_>, in_ch: usize, cfg: &TokenizerConfig) -> Result<Self> {
        let c = cfg.dec_channels;
        let n = cfg.pix_downsample.trailing_zeros() as usize;
        Ok(Self {
            conv_in: scope.pp("conv_in").conv2d(in_ch, c, 3, 1, 1)?,
            mid: ResBlock::new(scope.pp("mid"), c)?,
            stages: (0..n)
                .map(|i| {
                    let s = scope.pp(format!("stage{i}"));
                    Ok((Up::new(s.pp("up"), c, cfg.dc_block)?, ResBlock::new(s.pp("res"), c)?))
                })
                .collect::<Result<_>>()?,
            conv_out: scope.pp("conv_out").conv2d(c, 3, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.mid.forward(&self.conv_in.forward(x)?)?;
        for (up, res) in &self.stages {
            h = res.forward(&up.forward(&h)?)?;
        }
        sigmoid(&self.conv_out.forward(&silu_norm(&h)?)?)
    }
}

/// Patch discriminator producing one logit per receptive field.
pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.2)?)?)
}

impl Discriminator {
    pub fn new(scope: Scope<'_>, ch: usize) -> Result<Self> {
        Ok(Self {
            c1: scope.pp("c1").conv2d(3, ch, 4, 2, 1)?,
            c2: scope.pp("c2").conv2d(ch, 2 * ch, 4, 2, 1)?,
            c3: scope.pp("c3").conv2d(2 * ch, 1, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky(&self.c1.forward(&((x * 2.0)? - 1.0)?)?)?;
        let h = leaky(&self.c2.forward(&h)?)?;
        self.c3.forward(&h)
    }
}
