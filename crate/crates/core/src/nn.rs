//! Layer building blocks on top of the graph: fully connected layers,
//! depthwise convolution, and the index maps that move feature maps between
//! channel-major (`C×H×W`) and token-major (`T×C`, T = H·W row-major)
//! layouts.

use std::sync::Arc;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Rng, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `x[T×in] · w[in×out] + b[out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Fully connected layer stored as `{prefix}.w` (`in×out`) and `{prefix}.b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `U(±1/√in)`, zero bias.
    pub fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{prefix}.w"), rng.uniform_tensor(&[fan_in, fan_out], -bound, bound))?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        linear(g, x, p.var(self.w), p.var(self.b))
    }
}

/// Layer norm affine pair, `γ = 1`, `β = 0` at init.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones(&[d]))?;
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

struct DepthwiseConv {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

impl DepthwiseConv {
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        // f(channel, out_pixel, tap, in_pixel) for every in-bounds tap
        let (h, w, k) = (self.height, self.width, self.kernel);
        let pad = (k / 2) as isize;
        for c in 0..self.channels {
            for i in 0..h {
                for j in 0..w {
                    for di in 0..k {
                        let si = i as isize + di as isize - pad;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for dj in 0..k {
                            let sj = j as isize + dj as isize - pad;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            f(c, i * w + j, di * k + dj, si as usize * w + sj as usize);
                        }
                    }
                }
            }
        }
    }
}

impl CustomOp for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise_conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let hw = self.height * self.width;
        let kk = self.kernel * self.kernel;
        let gd = grad.data();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; self.channels];
        self.for_each_tap(|c, out, tap, src| {
            let gv = gd[c * hw + out];
            gx[c * hw + src] += gv * w[c * kk + tap];
            gw[c * kk + tap] += gv * x[c * hw + src];
        });
        for c in 0..self.channels {
            gb[c] = gd[c * hw..(c + 1) * hw].iter().sum();
        }
        vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
            Some(Tensor::from_parts(inputs[2].shape().to_vec(), gb)),
        ]
    }
}

/// Depthwise `k×k` convolution with zero padding `k/2` (odd `k`) on a
/// channel-major map `x[C×(H·W)]`; `w` is `C×k²`, `b` is `C`.
pub fn depthwise_conv2d(g: &mut Graph, x: Var, w: Var, b: Var, height: usize, width: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let channels = shape[0];
    if shape.len() != 2 || shape[1] != height * width {
        return Err(Error::Dimension(format!(
            "conv input {shape:?} is not C×{height}·{width}"
        )));
    }
    let taps = g.value(w).numel() / channels;
    let kernel = (taps as f64).sqrt().round() as usize;
    if kernel * kernel * channels != g.value(w).numel() || kernel % 2 == 0 || g.value(b).numel() != channels {
        return Err(Error::Dimension("depthwise kernel must be C×k² with odd k".into()));
    }
    let op = DepthwiseConv {
        channels,
        height,
        width,
        kernel,
    };
    let (xd, wd, bd) = (g.value(x).data(), g.value(w).data(), g.value(b).data());
    let hw = height * width;
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        out[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = bd[c]);
    }
    op.for_each_tap(|c, o, tap, src| {
        out[c * hw + o] += wd[c * taps + tap] * xd[c * hw + src];
    });
    let value = Tensor::from_parts(vec![channels, hw], out);
    Ok(g.custom(&[x, w, b], value, Box::new(op)))
}

/// Index taking a channel-major `C×H×W` map to token-major `T×(C·r²)`
/// non-overlapping `r×r` patches. Feature order inside a patch is
/// (channel, row, col), matching a flattened conv kernel.
pub fn patchify_index(channels: usize, height: usize, width: usize, r: usize) -> Result<Arc<Vec<usize>>> {
    if r == 0 || height % r != 0 || width % r != 0 {
        return Err(Error::Dimension(format!("{height}×{width} not divisible by patch size {r}")));
    }
    let (ph, pw) = (height / r, width / r);
    let mut idx = Vec::with_capacity(channels * height * width);
    for pi in 0..ph {
        for pj in 0..pw {
            for c in 0..channels {
                for i in 0..r {
                    for j in 0..r {
                        idx.push(c * height * width + (pi * r + i) * width + pj * r + j);
                    }
                }
            }
        }
    }
    Ok(Arc::new(idx))
}

/// Index taking token-major `T×C` (grid `H×W`) to `(T/4)×4C`, concatenating
/// each 2×2 neighbourhood in row-major order: (0,0), (0,1), (1,0), (1,1).
pub fn merge_index(channels: usize, height: usize, width: usize) -> Result<Arc<Vec<usize>>> {
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::Dimension(format!("patch merge needs even dims, got {height}×{width}")));
    }
    let mut idx = Vec::with_capacity(channels * height * width);
    for i in 0..height / 2 {
        for j in 0..width / 2 {
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let t = (2 * i + di) * width + 2 * j + dj;
                idx.extend((0..channels).map(|c| t * channels + c));
            }
        }
    }
    Ok(Arc::new(idx))
}

/// Pixel shuffle from token-major `T×(C·r²)` (grid `H×W`) to token-major
/// `(T·r²)×C` on grid `rH×rW`:
/// `out[c, h·r+i, w·r+j] = in[c·r² + i·r + j, h, w]`.
pub fn pixel_shuffle_index(channels: usize, height: usize, width: usize, r: usize) -> Arc<Vec<usize>> {
    let fin = channels * r * r;
    let (oh, ow) = (height * r, width * r);
    let mut idx = Vec::with_capacity(fin * height * width);
    for y in 0..oh {
        for x in 0..ow {
            let t = (y / r) * width + x / r;
            let (i, j) = (y % r, x % r);
            idx.extend((0..channels).map(|c| t * fin + c * r * r + i * r + j));
        }
    }
    Arc::new(idx)
}

/// Token-major `T×C` to channel-major `C×T` is a transpose; these helpers
/// name the intent.
pub fn to_channel_major(g: &mut Graph, tokens: Var) -> Result<Var> {
    g.transpose(tokens)
}

pub fn to_token_major(g: &mut Graph, channels: Var) -> Result<Var> {
    g.transpose(channels)
}
