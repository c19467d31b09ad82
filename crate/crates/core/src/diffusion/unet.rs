use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::nn::{channel_norm, upsample_nearest, Conv2d, Linear, Scope};

fn silu_norm(x: &Tensor) -> Result<Tensor> {
    Ok(channel_norm(x, 1e-5)?.silu()?)
}

/// Sinusoidal embedding of integer timesteps, (B, dim).
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let a = t as f64 * freq;
            v.push(if i < half { a.sin() } else { a.cos() } as f32);
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time: Linear,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(scope: Scope<'_>, cin: usize, cout: usize, tdim: usize) -> Result<Self> {
        Ok(Self {
            conv1: scope.pp("conv1").conv2d(cin, cout, 3, 1, 1)?,
            conv2: scope.pp("conv2").conv2d(cout, cout, 3, 1, 1)?,
            time: scope.pp("time").linear(tdim, cout, true)?,
            skip: if cin != cout {
                Some(scope.pp("skip").conv2d(cin, cout, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu_norm(x)?)?;
        let t = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&silu_norm(&h)?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

/// Small convolutional UNet with additive timestep conditioning.
pub struct UNet {
    tdim: usize,
    t1: Linear,
    t2: Linear,
    conv_in: Conv2d,
    down: Vec<(ResBlock, Option<Conv2d>)>,
    mid: ResBlock,
    up: Vec<(Option<Conv2d>, ResBlock)>,
    conv_out: Conv2d,
}

impl UNet {
    /// `levels` resolutions; spatial dims must be divisible by `2^(levels-1)`.
    pub fn new(scope: Scope<'_>, in_ch: usize, width: usize, levels: usize) -> Result<Self> {
        let chans: Vec<usize> = (0..levels).map(|i| if i == 0 { width } else { 2 * width }).collect();
        let tdim = 4 * width;
        let mut down = Vec::new();
        for i in 0..levels {
            let s = scope.pp(format!("down{i}"));
            let res = ResBlock::new(s.pp("res"), chans[i], chans[i], tdim)?;
            let pool = if i + 1 < levels {
                Some(s.pp("pool").conv2d(chans[i], chans[i + 1], 3, 2, 1)?)
            } else {
                None
            };
            down.push((res, pool));
        }
        let mid = ResBlock::new(scope.pp("mid"), chans[levels - 1], chans[levels - 1], tdim)?;
        let mut up = Vec::new();
        for i in (0..levels).rev() {
            let s = scope.pp(format!("up{i}"));
            let from = if i + 1 < levels { chans[i + 1] } else { chans[i] };
            let conv = if i + 1 < levels {
                Some(s.pp("conv").conv2d(from, chans[i], 3, 1, 1)?)
            } else {
                None
            };
            let res = ResBlock::new(s.pp("res"), 2 * chans[i], chans[i], tdim)?;
            up.push((conv, res));
        }
        Ok(Self {
            tdim,
            t1: scope.pp("time1").linear(width, tdim, true)?,
            t2: scope.pp("time2").linear(tdim, tdim, true)?,
            conv_in: scope.pp("conv_in").conv2d(in_ch, width, 3, 1, 1)?,
            down,
            mid,
            up,
            conv_out: scope.pp("conv_out").conv2d(width, 3, 3, 1, 1)?,
        })
    }

    /// Predicts noise for `x` (B, in_ch, H, W) at integer timesteps `ts`.
    pub fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let width = self.tdim / 4;
        let temb = timestep_embedding(ts, width, x.dtype(), x.device())?;
        let temb = self.t2.forward(&self.t1.forward(&temb)?.silu()?)?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (res, pool) in &self.down {
            h = res.forward(&h, &temb)?;
            skips.push(h.clone());
            if let Some(p) = pool {
                h = p.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        for (conv, res) in &self.up {
            if let Some(c) = conv {
                h = c.forward(&upsample_nearest(&h, 2)?)?;
            }
            let skip = skips.pop().expect("one skip per level");
            h = res.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
        }
        self.conv_out.forward(&silu_norm(&h)?)
    }
}
