//! The VSSM-CA block: a gated two-branch structure whose first branch runs
//! the dual GSSM with CSI-ReST over every expanded channel, followed by a
//! pre-norm channel MLP with its own residual.
//!
//! Features are token-major `T×d` with tokens in row-major raster order, so
//! the scan schemes act on the row-major vectorization of each channel.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gssm::{dual_gssm_graph, CsiRestConfig, ScanParamVars};
use crate::nn::{depthwise_conv2d, to_channel_major, to_token_major, Linear, Norm};
use crate::params::{Binding, ParamId, ParamStore};
use crate::ssm::SsmDirectionParams;
use crate::tensor::{Rng, Tensor};

/// Block hyperparameters shared by every block of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub state_dim: usize,
    pub gen_dim: usize,
    pub expand: usize,
    pub mlp_ratio: usize,
    pub conv_kernel: usize,
}

impl BlockConfig {
    /// Defaults for width `d`: `N = 16`, `O = max(⌈d/16⌉, 1)`, `E = 2`,
    /// `ρ = 2`, `k = 3`.
    pub fn for_width(d: usize) -> Self {
        Self {
            state_dim: 16,
            gen_dim: default_gen_dim(d),
            expand: 2,
            mlp_ratio: 2,
            conv_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.gen_dim == 0 || self.expand == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel {} must be odd", self.conv_kernel)));
        }
        Ok(())
    }
}

pub fn default_gen_dim(d: usize) -> usize {
    d.div_ceil(16).max(1)
}

/// Parameter handles for one scan direction across all `C` channels.
/// `Ã = −exp(a_log)` keeps the state matrix strictly negative during training.
#[derive(Clone, Copy, Debug)]
pub struct ScanParamIds {
    pub a_log: ParamId,
    pub g: ParamId,
    pub h_d: ParamId,
    pub delta: ParamId,
    pub h_b: ParamId,
    pub h_c: ParamId,
}

impl ScanParamIds {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, n: usize, o: usize, rng: &mut Rng) -> Result<Self> {
        let per: Vec<SsmDirectionParams> = (0..channels).map(|_| SsmDirectionParams::init(n, o, rng)).collect();
        let cat = |f: &dyn Fn(&SsmDirectionParams) -> Vec<f64>, cols: usize| {
            let data: Vec<f64> = per.iter().flat_map(f).collect();
            Tensor::new(&[channels, cols], data)
        };
        let a_log = cat(&|p| p.a_tilde.iter().map(|a| (-a).ln()).collect(), n)?;
        let g = cat(&|p| p.g.clone(), o)?;
        let h_d = cat(&|p| p.h_d.clone(), o)?;
        let delta = Tensor::vector(&per.iter().map(|p| p.delta).collect::<Vec<_>>());
        let h_b = cat(&|p| p.h_b.clone(), n)?;
        let h_c = cat(&|p| p.h_c.clone(), n)?;
        Ok(Self {
            a_log: store.add(format!("{prefix}.a_log"), a_log)?,
            g: store.add(format!("{prefix}.g"), g)?,
            h_d: store.add(format!("{prefix}.h_d"), h_d)?,
            delta: store.add(format!("{prefix}.delta"), delta)?,
            h_b: store.add(format!("{prefix}.h_b"), h_b)?,
            h_c: store.add(format!("{prefix}.h_c"), h_c)?,
        })
    }

    pub fn vars(&self, g: &mut Graph, p: &Binding) -> ScanParamVars {
        let e = g.exp(p.var(self.a_log));
        ScanParamVars {
            a_tilde: g.neg(e),
            g: p.var(self.g),
            h_d: p.var(self.h_d),
            delta: p.var(self.delta),
            h_b: p.var(self.h_b),
            h_c: p.var(self.h_c),
        }
    }

    /// Plain parameters of channel `c`, for the reference path.
    pub fn channel(&self, store: &ParamStore, c: usize) -> SsmDirectionParams {
        let row = |id: ParamId| {
            let t = store.get(id);
            let cols = t.numel() / t.shape()[0];
            t.data()[c * cols..(c + 1) * cols].to_vec()
        };
        SsmDirectionParams {
            a_tilde: row(self.a_log).iter().map(|v| -v.exp()).collect(),
            g: row(self.g),
            h_d: row(self.h_d),
            delta: store.get(self.delta).data()[c],
            h_b: row(self.h_b),
            h_c: row(self.h_c),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VssmCaBlock {
    pub width: usize,
    pub cfg: BlockConfig,
    pub norm1: Norm,
    pub in_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub gate_proj: Linear,
    pub out_proj: Linear,
    pub d1: ParamId,
    pub d2: ParamId,
    pub forward_scan: ScanParamIds,
    pub backward_scan: ScanParamIds,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VssmCaBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, cfg: BlockConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let ed = cfg.expand * width;
        let k2 = cfg.conv_kernel * cfg.conv_kernel;
        let bound = 1.0 / (k2 as f64).sqrt();
        Ok(Self {
            width,
            cfg,
            norm1: Norm::new(store, &format!("{prefix}.norm1"), width)?,
            in_proj: Linear::new(store, &format!("{prefix}.in_proj"), width, ed, rng)?,
            conv_w: store.add(format!("{prefix}.conv.w"), rng.uniform_tensor(&[ed, k2], -bound, bound))?,
            conv_b: store.add(format!("{prefix}.conv.b"), Tensor::zeros(&[ed]))?,
            gate_proj: Linear::new(store, &format!("{prefix}.gate_proj"), width, ed, rng)?,
            out_proj: Linear::new(store, &format!("{prefix}.out_proj"), ed, width, rng)?,
            d1: store.add(format!("{prefix}.d1"), Tensor::full(&[ed], 0.5))?,
            d2: store.add(format!("{prefix}.d2"), Tensor::full(&[ed], 0.5))?,
            forward_scan: ScanParamIds::new(store, &format!("{prefix}.scan_fwd"), ed, cfg.state_dim, cfg.gen_dim, rng)?,
            backward_scan: ScanParamIds::new(store, &format!("{prefix}.scan_bwd"), ed, cfg.state_dim, cfg.gen_dim, rng)?,
            norm2: Norm::new(store, &format!("{prefix}.norm2"), width)?,
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), width, cfg.mlp_ratio * width, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), cfg.mlp_ratio * width, width, rng)?,
        })
    }

    pub fn expanded(&self) -> usize {
        self.cfg.expand * self.width
    }

    /// `x` is `T×d` on an `height×width` grid; the output has the same shape.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        x: Var,
        grid: (usize, usize),
        csi: &CsiRestConfig,
        snr_db: f64,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.width || shape[0] != grid.0 * grid.1 {
            return Err(Error::Dimension(format!(
                "block of width {} on a {}×{} grid got input {shape:?}",
                self.width, grid.0, grid.1
            )));
        }
        let n1 = self.norm1.forward(g, p, x)?;

        // branch 1: FC → depthwise conv → SiLU → dual GSSM + (D₁+D₂) residual
        let a = self.in_proj.forward(g, p, n1)?;
        let a = to_channel_major(g, a)?;
        let a = depthwise_conv2d(g, a, p.var(self.conv_w), p.var(self.conv_b), grid.0, grid.1)?;
        let z = g.silu(a);
        let fwd = self.forward_scan.vars(g, p);
        let bwd = self.backward_scan.vars(g, p);
        let u = dual_gssm_graph(g, z, &fwd, &bwd, csi, snr_db)?;
        let dsum = g.add(p.var(self.d1), p.var(self.d2))?;
        let skip = g.mul_col(z, dsum)?;
        let b1 = g.add(u, skip)?;
        let b1 = to_token_major(g, b1)?;

        // branch 2: FC → SiLU
        let b2 = self.gate_proj.forward(g, p, n1)?;
        let b2 = g.silu(b2);

        let merged = g.mul(b1, b2)?;
        let proj = self.out_proj.forward(g, p, merged)?;
        let out = g.add(x, proj)?;

        let n2 = self.norm2.forward(g, p, out)?;
        let h = self.fc1.forward(g, p, n2)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(out, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, silu};
    use crate::gssm::dual_gssm_csi;
    use crate::gssm::{GssmModule, ScanScheme};

    fn tiny(width: usize, expand: usize, n: usize, seed: u64) -> (ParamStore, VssmCaBlock) {
        let mut store = ParamStore::new();
        let cfg = BlockConfig {
            state_dim: n,
            gen_dim: 2,
            expand,
            mlp_ratio: 2,
            conv_kernel: 3,
        };
        let mut rng = Rng::new(seed);
        let b = VssmCaBlock::new(&mut store, "blk", width, cfg, &mut rng).unwrap();
        (store, b)
    }

    fn run(store: &ParamStore, b: &VssmCaBlock, x: &Tensor, grid: (usize, usize), csi: &CsiRestConfig, snr: f64) -> Tensor {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = b.forward(&mut g, &p, xv, grid, csi, snr).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn shape_is_preserved() {
        let (store, b) = tiny(4, 2, 3, 1);
        let x = Rng::new(2).uniform_tensor(&[12, 4], -1., 1.);
        let y = run(&store, &b, &x, (3, 4), &CsiRestConfig::default(), 5.0);
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (store, b) = tiny(4, 2, 3, 1);
        let x = Tensor::zeros(&[6, 4]);
        let y = run(&store, &b, &x, (2, 3), &CsiRestConfig::disabled(), 5.0);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn zero_projections_reduce_to_identity() {
        let (mut store, b) = tiny(3, 2, 2, 4);
        for id in [b.out_proj.w, b.fc2.w] {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&s);
        }
        let x = Rng::new(5).uniform_tensor(&[4, 3], -1., 1.);
        let y = run(&store, &b, &x, (2, 2), &CsiRestConfig::default(), 10.0);
        assert_eq!(y, x);
    }

    #[test]
    fn matches_hand_composed_pipeline() {
        // d = 1, E = 1 on a 4×4 grid, composed from the tested primitives.
        let (store, b) = tiny(1, 1, 3, 8);
        let x = Rng::new(9).uniform_tensor(&[16, 1], -1., 1.);
        let csi = CsiRestConfig {
            interval: 5,
            ..CsiRestConfig::default()
        };
        let snr = 7.0;
        let got = run(&store, &b, &x, (4, 4), &csi, snr);

        let v = |id: ParamId| store.get(id).data().to_vec();
        let ln = |row: &[f64], gm: &[f64], bt: &[f64]| -> Vec<f64> {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|r| (r - m).powi(2)).sum::<f64>() / row.len() as f64;
            row.iter()
                .zip(gm.iter().zip(bt))
                .map(|(r, (g, b))| g * (r - m) / (var + 1e-5).sqrt() + b)
                .collect()
        };
        let xs = x.data();
        // width 1: layer norm of a single value is β
        let n1: Vec<f64> = xs.iter().map(|&r| ln(&[r], &v(b.norm1.gamma), &v(b.norm1.beta))[0]).collect();
        let fc = |l: &Linear, s: f64| v(l.w)[0] * s + v(l.b)[0];
        let a: Vec<f64> = n1.iter().map(|&s| fc(&b.in_proj, s)).collect();
        let kw = v(b.conv_w);
        let mut conv = vec![v(b.conv_b)[0]; 16];
        for i in 0..4i32 {
            for j in 0..4i32 {
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (si, sj) = (i + di, j + dj);
                        if (0..4).contains(&si) && (0..4).contains(&sj) {
                            conv[(i * 4 + j) as usize] += kw[((di + 1) * 3 + dj + 1) as usize] * a[(si * 4 + sj) as usize];
                        }
                    }
                }
            }
        }
        let z: Vec<f64> = conv.iter().map(|&c| silu(c)).collect();
        let m1 = GssmModule {
            params: b.forward_scan.channel(&store, 0),
            scheme: ScanScheme::identity(16),
        };
        let m2 = GssmModule {
            params: b.backward_scan.channel(&store, 0),
            scheme: ScanScheme::reversal(16),
        };
        let u = dual_gssm_csi(&m1, &m2, &z, &csi, snr).unwrap();
        let dsum = v(b.d1)[0] + v(b.d2)[0];
        let mut expect = Vec::new();
        for t in 0..16 {
            let b1 = u[t] + dsum * z[t];
            let b2 = silu(fc(&b.gate_proj, n1[t]));
            let out = xs[t] + fc(&b.out_proj, b1 * b2);
            let n2 = ln(&[out], &v(b.norm2.gamma), &v(b.norm2.beta))[0];
            let (w1, b1v, w2) = (v(b.fc1.w), v(b.fc1.b), v(b.fc2.w));
            let hidden: f64 = (0..2).map(|k| silu(w1[k] * n2 + b1v[k]) * w2[k]).sum();
            expect.push(out + hidden + v(b.fc2.b)[0]);
        }
        let diff = got.data().iter().zip(&expect).fold(0.0f64, |m, (a, e)| m.max((a - e).abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn channel_parameter_swap_permutes_outputs() {
        // Swapping the scan parameters and inputs of channels 0 and 1 swaps
        // the corresponding dual GSSM outputs.
        let (store, b) = tiny(2, 1, 2, 11);
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let z = g.constant(Rng::new(13).uniform_tensor(&[2, 4], -1., 1.));
        let (f, bk) = (b.forward_scan.vars(&mut g, &p), b.backward_scan.vars(&mut g, &p));
        let csi = CsiRestConfig::default();
        let u = dual_gssm_graph(&mut g, z, &f, &bk, &csi, 3.0).unwrap();
        let u = g.value(u).clone();

        let mut swapped = store.clone();
        for ids in [b.forward_scan, b.backward_scan] {
            for id in [ids.a_log, ids.g, ids.h_d, ids.delta, ids.h_b, ids.h_c] {
                let t = swapped.get_mut(id);
                let cols = t.numel() / 2;
                let d = t.data_mut();
                for k in 0..cols {
                    d.swap(k, cols + k);
                }
            }
        }
        let mut g = Graph::inference();
        let p = swapped.bind(&mut g);
        let zv = Rng::new(13).uniform_tensor(&[2, 4], -1., 1.);
        let zs = Tensor::matrix(2, 4, [&zv.data()[4..], &zv.data()[..4]].concat()).unwrap();
        let z = g.constant(zs);
        let (f, bk) = (b.forward_scan.vars(&mut g, &p), b.backward_scan.vars(&mut g, &p));
        let us = dual_gssm_graph(&mut g, z, &f, &bk, &csi, 3.0).unwrap();
        let us = g.value(us);
        assert_eq!(&us.data()[..4], &u.data()[4..]);
        assert_eq!(&us.data()[4..], &u.data()[..4]);
    }

    #[test]
    fn block_gradient_check() {
        let (store, b) = tiny(3, 2, 2, 21);
        let x = Rng::new(22).uniform_tensor(&[6, 3], -1., 1.);
        let w = Rng::new(23).uniform_tensor(&[6, 3], 0.5, 1.5);
        let csi = CsiRestConfig {
            interval: 2,
            ..CsiRestConfig::default()
        };
        let err = grad_check(
            |g, xv| {
                let p = store.bind(g);
                let y = b.forward(g, &p, xv, (2, 3), &csi, 4.0)?;
                let c = g.constant(w.clone());
                let y = g.mul(y, c)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn default_gen_dim_rule() {
        assert_eq!(default_gen_dim(1), 1);
        assert_eq!(default_gen_dim(16), 1);
        assert_eq!(default_gen_dim(17), 2);
        assert_eq!(default_gen_dim(320), 20);
    }
}
