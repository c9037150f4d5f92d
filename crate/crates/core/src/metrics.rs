//! Image quality metrics on `3×H×W` tensors with values in `[0, 1]`.
//!
//! MS-SSIM uses an 11-tap Gaussian window (σ = 1.5), valid filtering,
//! `K1 = 0.01`, `K2 = 0.03`, and 2×2 average pooling between scales. Small
//! images use fewer scales with the standard weights renormalized. The score
//! is computed per colour channel and averaged.

use std::sync::Arc;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.numel() as f64)
}

/// `10·log10(max²/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, 1.0))
}

/// `−10·log10(1 − m)`, capped at [`PSNR_CAP_DB`].
pub fn msssim_db(m: f64) -> f64 {
    let loss = 1.0 - m;
    if loss <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * loss.log10()).min(PSNR_CAP_DB)
}

/// 5 scales from 176 px upwards, otherwise the largest count whose coarsest
/// scale still fits the window.
pub fn scale_count(min_dim: usize) -> Result<usize> {
    if min_dim >= 176 {
        return Ok(5);
    }
    let s = (1..=5).rev().find(|&s| WINDOW << (s - 1) <= min_dim);
    s.ok_or_else(|| Error::Dimension(format!("image side {min_dim} is smaller than the {WINDOW}-tap window")))
}

pub fn scale_weights(scales: usize) -> Vec<f64> {
    let w = &MSSSIM_WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

pub fn gaussian_window() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
}

/// Per-channel valid correlation of a `C×H×W` map with a fixed `k×k` kernel
/// at stride `s`.
#[derive(Clone)]
struct FixedFilter {
    kernel: Arc<Vec<f64>>,
    k: usize,
    stride: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl FixedFilter {
    fn out_dims(&self) -> (usize, usize) {
        (
            (self.height - self.k) / self.stride + 1,
            (self.width - self.k) / self.stride + 1,
        )
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_dims();
        let (h, w, k, s) = (self.height, self.width, self.k, self.stride);
        let mut out = vec![0.0; self.channels * oh * ow];
        for c in 0..self.channels {
            let src = &x[c * h * w..(c + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..k {
                        let row = &src[(i * s + di) * w + j * s..(i * s + di) * w + j * s + k];
                        let kr = &self.kernel[di * k..(di + 1) * k];
                        acc += row.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    out[c * oh * ow + i * ow + j] = acc;
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_dims();
        let (h, w, k, s) = (self.height, self.width, self.k, self.stride);
        let mut out = vec![0.0; self.channels * h * w];
        for c in 0..self.channels {
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let gv = g[c * oh * ow + i * ow + j];
                    for di in 0..k {
                        for dj in 0..k {
                            dst[(i * s + di) * w + j * s + dj] += gv * self.kernel[di * k + dj];
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp for FixedFilter {
    fn name(&self) -> &'static str {
        "fixed_filter"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), self.adjoint(grad.data())))]
    }
}

fn filter_op(shape: &[usize], kernel: Arc<Vec<f64>>, k: usize, stride: usize) -> Result<FixedFilter> {
    if shape.len() != 3 || shape[1] < k || shape[2] < k {
        return Err(Error::Dimension(format!("cannot filter {shape:?} with a {k}×{k} kernel")));
    }
    Ok(FixedFilter {
        kernel,
        k,
        stride,
        channels: shape[0],
        height: shape[1],
        width: shape[2],
    })
}

fn filter_plain(x: &Tensor, kernel: Arc<Vec<f64>>, k: usize, stride: usize) -> Result<Tensor> {
    let f = filter_op(x.shape(), kernel, k, stride)?;
    let (oh, ow) = f.out_dims();
    Ok(Tensor::from_parts(vec![f.channels, oh, ow], f.apply(x.data())))
}

fn filter_graph(g: &mut Graph, x: Var, kernel: Arc<Vec<f64>>, k: usize, stride: usize) -> Result<Var> {
    let f = filter_op(g.shape(x), kernel, k, stride)?;
    let (oh, ow) = f.out_dims();
    let value = Tensor::from_parts(vec![f.channels, oh, ow], f.apply(g.value(x).data()));
    Ok(g.custom(&[x], value, Box::new(f)))
}

fn pool_kernel() -> Arc<Vec<f64>> {
    Arc::new(vec![0.25; 4])
}

fn check_image(x: &Tensor) -> Result<usize> {
    if x.shape().len() != 3 {
        return Err(Error::Dimension(format!("expected C×H×W, got {:?}", x.shape())));
    }
    scale_count(x.shape()[1].min(x.shape()[2]))
}

/// Per-channel mean SSIM and contrast-structure terms at one scale.
fn ssim_terms(x: &Tensor, y: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let win = Arc::new(gaussian_window());
    let f = |t: &Tensor| filter_plain(t, win.clone(), WINDOW, 1);
    let mx = f(x)?;
    let my = f(y)?;
    let mxx = f(&Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect()))?;
    let myy = f(&Tensor::from_parts(y.shape().to_vec(), y.data().iter().map(|v| v * v).collect()))?;
    let mxy = f(&Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect(),
    ))?;
    let c = x.shape()[0];
    let per = mx.numel() / c;
    let mut ssim = vec![0.0; c];
    let mut cs = vec![0.0; c];
    for ch in 0..c {
        for i in ch * per..(ch + 1) * per {
            let (ux, uy) = (mx.data()[i], my.data()[i]);
            let sxx = mxx.data()[i] - ux * ux;
            let syy = myy.data()[i] - uy * uy;
            let sxy = mxy.data()[i] - ux * uy;
            let csv = (2.0 * sxy + C2) / (sxx + syy + C2);
            let l = (2.0 * ux * uy + C1) / (ux * ux + uy * uy + C1);
            cs[ch] += csv;
            ssim[ch] += l * csv;
        }
        cs[ch] /= per as f64;
        ssim[ch] /= per as f64;
    }
    Ok((ssim, cs))
}

/// Single-scale SSIM averaged over channels.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    check_image(x)?;
    let (s, _) = ssim_terms(x, y)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

pub fn msssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let scales = check_image(x)?;
    let w = scale_weights(scales);
    let c = x.shape()[0];
    let mut score = vec![1.0; c];
    let (mut x, mut y) = (x.clone(), y.clone());
    for (j, &wj) in w.iter().enumerate() {
        let (s, cs) = ssim_terms(&x, &y)?;
        let term = if j + 1 == scales { s } else { cs };
        for ch in 0..c {
            score[ch] *= term[ch].max(0.0).powf(wj);
        }
        if j + 1 < scales {
            x = filter_plain(&x, pool_kernel(), 2, 2)?;
            y = filter_plain(&y, pool_kernel(), 2, 2)?;
        }
    }
    Ok(score.iter().sum::<f64>() / c as f64)
}

/// Per-channel spatial mean of a `C×H×W` graph value, as `C×1`.
fn channel_mean(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let per = s[1] * s[2];
    let flat = g.reshape(x, &[s[0], per])?;
    let ones = g.constant(Tensor::full(&[per, 1], 1.0 / per as f64));
    g.matmul(flat, ones)
}

/// Per-channel (SSIM, CS) as `C×1` graph values.
fn ssim_terms_graph(g: &mut Graph, x: Var, y: Var) -> Result<(Var, Var)> {
    let win = Arc::new(gaussian_window());
    let mx = filter_graph(g, x, win.clone(), WINDOW, 1)?;
    let my = filter_graph(g, y, win.clone(), WINDOW, 1)?;
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y)?;
    let mxx = filter_graph(g, xx, win.clone(), WINDOW, 1)?;
    let myy = filter_graph(g, yy, win.clone(), WINDOW, 1)?;
    let mxy = filter_graph(g, xy, win, WINDOW, 1)?;
    let ux2 = g.square(mx);
    let uy2 = g.square(my);
    let uxy = g.mul(mx, my)?;
    let sxx = g.sub(mxx, ux2)?;
    let syy = g.sub(myy, uy2)?;
    let sxy = g.sub(mxy, uxy)?;
    // cs = (2σxy + C2)/(σx² + σy² + C2)
    let num = g.scale(sxy, 2.0);
    let num = g.add_scalar(num, C2);
    let den = g.add(sxx, syy)?;
    let den = g.add_scalar(den, C2);
    let cs = g.div(num, den)?;
    // l = (2μxμy + C1)/(μx² + μy² + C1)
    let lnum = g.scale(uxy, 2.0);
    let lnum = g.add_scalar(lnum, C1);
    let lden = g.add(ux2, uy2)?;
    let lden = g.add_scalar(lden, C1);
    let l = g.div(lnum, lden)?;
    let ssim = g.mul(l, cs)?;
    Ok((channel_mean(g, ssim)?, channel_mean(g, cs)?))
}

/// Differentiable MS-SSIM of two `C×H×W` graph values, as a scalar.
pub fn msssim_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::Dimension("MS-SSIM inputs differ in shape".into()));
    }
    let scales = check_image(g.value(x))?;
    let w = scale_weights(scales);
    let (mut x, mut y) = (x, y);
    let mut score: Option<Var> = None;
    for (j, &wj) in w.iter().enumerate() {
        let (s, cs) = ssim_terms_graph(g, x, y)?;
        let term = if j + 1 == scales { s } else { cs };
        let term = g.relu(term);
        let term = g.powf(term, wj);
        score = Some(match score {
            None => term,
            Some(acc) => g.mul(acc, term)?,
        });
        if j + 1 < scales {
            x = filter_graph(g, x, pool_kernel(), 2, 2)?;
            y = filter_graph(g, y, pool_kernel(), 2, 2)?;
        }
    }
    Ok(g.mean(score.expect("at least one scale")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Rng;

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let x = Tensor::full(&[3, 4, 4], 0.3);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&x, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn msssim_db_examples() {
        assert!((msssim_db(0.9) - 10.0).abs() < 1e-12);
        assert_eq!(msssim_db(1.0), PSNR_CAP_DB);
    }

    #[test]
    fn scale_rule() {
        assert_eq!(scale_count(256).unwrap(), 5);
        assert_eq!(scale_count(176).unwrap(), 5);
        assert_eq!(scale_count(175).unwrap(), 4);
        assert_eq!(scale_count(32).unwrap(), 2);
        assert_eq!(scale_count(11).unwrap(), 1);
        assert!(scale_count(10).is_err());
        let w = scale_weights(2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window();
        assert_eq!(w.len(), 121);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(w[60] > w[59]);
    }

    #[test]
    fn constant_patch_ssim_closed_form() {
        let (a, b) = (0.4, 0.7);
        let x = Tensor::full(&[1, 11, 11], a);
        let y = Tensor::full(&[1, 11, 11], b);
        let expect = (2.0 * a * b + C1) / (a * a + b * b + C1);
        assert!((ssim(&x, &y).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn msssim_identity_and_symmetry() {
        let mut rng = Rng::new(3);
        let x = rng.uniform_tensor(&[3, 24, 24], 0., 1.);
        assert!((msssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = rng.uniform_tensor(&[3, 24, 24], 0., 1.);
        let d = msssim(&x, &y).unwrap() - msssim(&y, &x).unwrap();
        assert!(d.abs() <= 1e-12);
    }

    #[test]
    fn graph_msssim_matches_plain() {
        let mut rng = Rng::new(4);
        let x = rng.uniform_tensor(&[3, 32, 32], 0., 1.);
        let y = x.map(|v| (v + 0.1 * (v * 37.0).sin()).clamp(0.0, 1.0));
        let mut g = Graph::inference();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let m = msssim_graph(&mut g, xv, yv).unwrap();
        let d = (g.value(m).item() - msssim(&x, &y).unwrap()).abs();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn graph_msssim_gradients() {
        let mut rng = Rng::new(5);
        let x = rng.uniform_tensor(&[1, 22, 22], 0.2, 0.8);
        let noise = rng.uniform_tensor(&[1, 22, 22], 0.2, 0.8);
        let mix = x.data().iter().zip(noise.data()).map(|(a, b)| 0.6 * a + 0.4 * b).collect();
        let y = Tensor::new(&[1, 22, 22], mix).unwrap();
        let err = grad_check(
            |g, yv| {
                let xv = g.constant(x.clone());
                msssim_graph(g, xv, yv)
            },
            &y,
            // corner pixels only see the window tails, so their gradients
            // are ~1e-8 and need a wider step to rise above rounding noise
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn too_small_is_an_error() {
        let x = Tensor::zeros(&[3, 8, 8]);
        assert!(msssim(&x, &x).is_err());
    }
}
