//! Encoder and decoder.
//!
//! Encoder: patch embedding (non-overlapping `r×r` patches, FC, layer norm),
//! then per stage an optional 2×2 patch merge (or a channel-only FC when the
//! stage keeps its resolution) followed by VSSM-CA blocks, then a 1×1
//! compression to `c_out` reals per position. Consecutive reals in
//! token-major order form the complex channel symbols, which are normalized
//! to unit average power.
//!
//! The decoder mirrors this with a 1×1 expansion, blocks, and patch division
//! (layer norm, FC, pixel shuffle) back to a `3×H×W` image.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::channel::{to_complex, to_reals, ChannelRealization};
use crate::error::{Error, Result};
use crate::gssm::CsiRestConfig;
use crate::nn::{merge_index, patchify_index, pixel_shuffle_index, Linear, Norm};
use crate::params::{Binding, Checkpoint, ParamStore};
use crate::tensor::{Rng, Tensor};
use crate::vssm::{default_gen_dim, BlockConfig, VssmCaBlock};

/// Channel bandwidth ratio `num/den`, written `"num/den"` in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Cbr {
    pub num: u64,
    pub den: u64,
}

impl Cbr {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("bandwidth ratio {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Cbr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Cbr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bandwidth ratio {s:?} is not of the form a/b"));
        let (a, b) = s.split_once('/').ok_or_else(bad)?;
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        Cbr::new(a, b)
    }
}

impl TryFrom<String> for Cbr {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Cbr> for String {
    fn from(c: Cbr) -> String {
        c.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub embed_downsample: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// One entry per stage after the first: whether it halves the grid.
    pub downsample: Vec<bool>,
    pub state_dim: usize,
    /// `None` picks `max(⌈width/16⌉, 1)` per stage.
    #[serde(default)]
    pub gen_dim: Option<usize>,
    pub expand: usize,
    pub mlp_ratio: usize,
    pub conv_kernel: usize,
    pub csi: CsiRestConfig,
    pub cbr: Cbr,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale configuration: two stages of one block, widths 32/48,
    /// `N = 8`, 32×32 images, CBR 1/12.
    pub fn toy() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            embed_downsample: 4,
            widths: vec![32, 48],
            blocks: vec![1, 1],
            downsample: vec![true],
            state_dim: 8,
            gen_dim: None,
            expand: 2,
            mlp_ratio: 2,
            conv_kernel: 3,
            csi: CsiRestConfig::default(),
            cbr: Cbr { num: 1, den: 12 },
            seed: 0,
        }
    }

    /// Full-size configuration at 128×128: blocks `[2,2,6,2]`, widths
    /// `[128,192,256,320]`, the last stage keeping the 8×8 grid, CBR 1/48.
    pub fn full_scale() -> Self {
        Self {
            image_height: 128,
            image_width: 128,
            embed_downsample: 4,
            widths: vec![128, 192, 256, 320],
            blocks: vec![2, 2, 6, 2],
            downsample: vec![true, true, false],
            state_dim: 16,
            gen_dim: None,
            expand: 2,
            mlp_ratio: 2,
            conv_kernel: 3,
            csi: CsiRestConfig::default(),
            cbr: Cbr { num: 1, den: 48 },
            seed: 0,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            state_dim: self.state_dim,
            gen_dim: self.gen_dim.unwrap_or_else(|| default_gen_dim(self.widths[stage])),
            expand: self.expand,
            mlp_ratio: self.mlp_ratio,
            conv_kernel: self.conv_kernel,
        }
    }

    /// Grid (height, width) at each stage.
    pub fn grids(&self) -> Vec<(usize, usize)> {
        let r = self.embed_downsample.max(1);
        let mut grid = (self.image_height / r, self.image_width / r);
        let mut out = vec![grid];
        for &d in &self.downsample {
            if d {
                grid = (grid.0 / 2, grid.1 / 2);
            }
            out.push(grid);
        }
        out
    }

    pub fn source_dims(&self) -> u64 {
        3 * (self.image_height * self.image_width) as u64
    }

    /// Complex channel uses per image.
    pub fn k_uses(&self) -> u64 {
        self.source_dims() * self.cbr.num / self.cbr.den
    }

    /// Real channels of the compressed feature map.
    pub fn c_out(&self) -> usize {
        let (h, w) = *self.grids().last().expect("at least one stage");
        (2 * self.k_uses() as usize) / (h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let l = self.widths.len();
        if l == 0 {
            return err("at least one stage is required".into());
        }
        if self.blocks.len() != l {
            return err(format!("{} block counts for {l} stages", self.blocks.len()));
        }
        if self.downsample.len() + 1 != l {
            return err(format!("downsample needs {} entries, got {}", l - 1, self.downsample.len()));
        }
        if self.widths.contains(&0) {
            return err("stage widths must be positive".into());
        }
        if self.image_height == 0 || self.image_width == 0 {
            return err("image dimensions must be positive".into());
        }
        let r = self.embed_downsample;
        if r == 0 || self.image_height % r != 0 || self.image_width % r != 0 {
            return err(format!(
                "{}×{} is not divisible by the embed downsample {r}",
                self.image_height, self.image_width
            ));
        }
        let mut grid = (self.image_height / r, self.image_width / r);
        for (k, &d) in self.downsample.iter().enumerate() {
            if d {
                if grid.0 % 2 != 0 || grid.1 % 2 != 0 {
                    return err(format!("stage {} cannot halve a {}×{} grid", k + 2, grid.0, grid.1));
                }
                grid = (grid.0 / 2, grid.1 / 2);
            }
        }
        (0..l).try_for_each(|k| self.block_config(k).validate())?;
        self.csi.validate()?;
        if (self.source_dims() * self.cbr.num) % self.cbr.den != 0 {
            return err(format!("CBR {} does not give an integer number of channel uses", self.cbr));
        }
        let reals = 2 * self.k_uses() as usize;
        let positions = grid.0 * grid.1;
        if reals == 0 || reals % positions != 0 {
            return err(format!(
                "{} channel uses cannot be laid out on the final {}×{} grid",
                self.k_uses(),
                grid.0,
                grid.1
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the analytic shape trace: label and `(channels, height, width)`.
pub type ShapeRow = (String, (usize, usize, usize));

/// Feature shapes through the encoder, then the transmitted symbol layout as
/// `(complex channels, height, width)`.
pub fn shape_trace(cfg: &ModelConfig) -> Result<Vec<ShapeRow>> {
    cfg.validate()?;
    let grids = cfg.grids();
    let mut rows: Vec<ShapeRow> = vec![("input".into(), (3, cfg.image_height, cfg.image_width))];
    for (k, (&w, &(h, gw))) in cfg.widths.iter().zip(&grids).enumerate() {
        rows.push((format!("stage{}", k + 1), (w, h, gw)));
    }
    let &(h, w) = grids.last().unwrap();
    rows.push(("signal".into(), (cfg.c_out() / 2, h, w)));
    Ok(rows)
}

/// How a stage enters from the previous one.
#[derive(Clone, Debug)]
enum Transition {
    Merge { norm: Norm, fc: Linear },
    Channel { norm: Norm, fc: Linear },
}

#[derive(Clone, Debug)]
struct Stage {
    transition: Option<Transition>,
    blocks: Vec<VssmCaBlock>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    blocks: Vec<VssmCaBlock>,
    /// Back to the previous stage's width and grid, or to pixels for stage 1.
    divide_norm: Norm,
    divide_fc: Linear,
    shuffle: Option<usize>,
}

/// The full model: configuration, parameters, and layer handles.
#[derive(Clone, Debug)]
pub struct MambaJscc {
    cfg: ModelConfig,
    store: ParamStore,
    embed: Linear,
    embed_norm: Norm,
    stages: Vec<Stage>,
    compress: Linear,
    expand: Linear,
    dec_stages: Vec<DecoderStage>,
}

impl MambaJscc {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let mut store = ParamStore::new();
        let r = cfg.embed_downsample;
        let l = cfg.stages();
        let embed = Linear::new(&mut store, "enc.embed", 3 * r * r, cfg.widths[0], &mut rng)?;
        let embed_norm = Norm::new(&mut store, "enc.embed_norm", cfg.widths[0])?;
        let mut stages = Vec::with_capacity(l);
        for k in 0..l {
            let w = cfg.widths[k];
            let transition = if k == 0 {
                None
            } else if cfg.downsample[k - 1] {
                let prev = cfg.widths[k - 1];
                Some(Transition::Merge {
                    norm: Norm::new(&mut store, &format!("enc.stage{k}.merge.norm"), 4 * prev)?,
                    fc: Linear::new(&mut store, &format!("enc.stage{k}.merge.fc"), 4 * prev, w, &mut rng)?,
                })
            } else {
                let prev = cfg.widths[k - 1];
                Some(Transition::Channel {
                    norm: Norm::new(&mut store, &format!("enc.stage{k}.proj.norm"), prev)?,
                    fc: Linear::new(&mut store, &format!("enc.stage{k}.proj.fc"), prev, w, &mut rng)?,
                })
            };
            let blocks = (0..cfg.blocks[k])
                .map(|b| VssmCaBlock::new(&mut store, &format!("enc.stage{k}.block{b}"), w, cfg.block_config(k), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { transition, blocks });
        }
        let last = cfg.widths[l - 1];
        let c_out = cfg.c_out();
        let compress = Linear::new(&mut store, "enc.compress", last, c_out, &mut rng)?;
        let expand = Linear::new(&mut store, "dec.expand", c_out, last, &mut rng)?;
        let mut dec_stages = Vec::with_capacity(l);
        for k in (0..l).rev() {
            let w = cfg.widths[k];
            let blocks = (0..cfg.blocks[k])
                .map(|b| VssmCaBlock::new(&mut store, &format!("dec.stage{k}.block{b}"), w, cfg.block_config(k), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (out, shuffle) = if k == 0 {
                (3 * r * r, Some(r))
            } else if cfg.downsample[k - 1] {
                (4 * cfg.widths[k - 1], Some(2))
            } else {
                (cfg.widths[k - 1], None)
            };
            dec_stages.push(DecoderStage {
                blocks,
                divide_norm: Norm::new(&mut store, &format!("dec.stage{k}.divide.norm"), w)?,
                divide_fc: Linear::new(&mut store, &format!("dec.stage{k}.divide.fc"), w, out, &mut rng)?,
                shuffle,
            });
        }
        Ok(Self {
            cfg,
            store,
            embed,
            embed_norm,
            stages,
            compress,
            expand,
            dec_stages,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Same architecture with a different CSI-ReST setting; parameters are
    /// shared unchanged because injection adds none.
    pub fn with_csi(&self, csi: CsiRestConfig) -> Self {
        let mut m = self.clone();
        m.cfg.csi = csi;
        m
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let want = [3, self.cfg.image_height, self.cfg.image_width];
        if shape != want {
            return Err(Error::Dimension(format!("model expects a {want:?} image, got {shape:?}")));
        }
        Ok(())
    }

    /// `img` is `3×H×W`; returns the power-normalized interleaved symbols
    /// `[re, im, …]` of length `2·k_uses`.
    pub fn encode_graph(&self, g: &mut Graph, p: &Binding, img: Var, snr_db: f64) -> Result<Var> {
        self.check_image(g.shape(img))?;
        let cfg = &self.cfg;
        let csi = &cfg.csi;
        let r = cfg.embed_downsample;
        let grids = cfg.grids();
        let (h0, w0) = grids[0];
        let idx = patchify_index(3, cfg.image_height, cfg.image_width, r)?;
        let patches = g.gather(img, idx, &[h0 * w0, 3 * r * r])?;
        let x = self.embed.forward(g, p, patches)?;
        let mut x = self.embed_norm.forward(g, p, x)?;
        for (k, stage) in self.stages.iter().enumerate() {
            if let Some(t) = &stage.transition {
                let prev = cfg.widths[k - 1];
                x = match t {
                    Transition::Merge { norm, fc } => {
                        let (ph, pw) = grids[k - 1];
                        let idx = merge_index(prev, ph, pw)?;
                        let m = g.gather(x, idx, &[ph * pw / 4, 4 * prev])?;
                        let m = norm.forward(g, p, m)?;
                        fc.forward(g, p, m)?
                    }
                    Transition::Channel { norm, fc } => {
                        let m = norm.forward(g, p, x)?;
                        fc.forward(g, p, m)?
                    }
                };
            }
            for b in &stage.blocks {
                x = b.forward(g, p, x, grids[k], csi, snr_db)?;
            }
        }
        let s = self.compress.forward(g, p, x)?;
        let n = g.value(s).numel();
        let s = g.reshape(s, &[n])?;
        power_normalize(g, s)
    }

    /// Interleaved received symbols to a `3×H×W` image (unclamped).
    pub fn decode_graph(&self, g: &mut Graph, p: &Binding, signal: Var, snr_db: f64) -> Result<Var> {
        let cfg = &self.cfg;
        let grids = cfg.grids();
        let l = cfg.stages();
        let c_out = cfg.c_out();
        let (hl, wl) = grids[l - 1];
        if g.value(signal).numel() != hl * wl * c_out {
            return Err(Error::Dimension(format!(
                "decoder expects {} reals, got {}",
                hl * wl * c_out,
                g.value(signal).numel()
            )));
        }
        let s = g.reshape(signal, &[hl * wl, c_out])?;
        let mut x = self.expand.forward(g, p, s)?;
        for (i, stage) in self.dec_stages.iter().enumerate() {
            let k = l - 1 - i;
            let (h, w) = grids[k];
            for b in &stage.blocks {
                x = b.forward(g, p, x, (h, w), &cfg.csi, snr_db)?;
            }
            let n = stage.divide_norm.forward(g, p, x)?;
            let y = stage.divide_fc.forward(g, p, n)?;
            x = match stage.shuffle {
                Some(r) => {
                    let c = stage.divide_fc.fan_out / (r * r);
                    let idx = pixel_shuffle_index(c, h, w, r);
                    g.gather(y, idx, &[h * w * r * r, c])?
                }
                None => y,
            };
        }
        let img = g.transpose(x)?;
        g.reshape(img, &[3, cfg.image_height, cfg.image_width])
    }

    /// Encode → channel → decode in one graph. `inject_snr_db` is the CSI
    /// given to both ends; the channel itself uses the realization.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Binding,
        img: Var,
        channel: &ChannelRealization,
        inject_snr_db: f64,
    ) -> Result<Var> {
        let q = self.encode_graph(g, p, img, inject_snr_db)?;
        let r = channel.apply_graph(g, q)?;
        self.decode_graph(g, p, r, inject_snr_db)
    }

    pub fn encode(&self, img: &Tensor, snr_db: f64) -> Result<Vec<Complex64>> {
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let x = g.constant(img.clone());
        let q = self.encode_graph(&mut g, &p, x, snr_db)?;
        Ok(to_complex(g.value(q).data()))
    }

    /// Decodes equalized symbols and clamps to `[0, 1]`.
    pub fn decode(&self, symbols: &[Complex64], snr_db: f64) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let reals = to_reals(symbols);
        let s = g.constant(Tensor::new(&[reals.len()], reals)?);
        let img = self.decode_graph(&mut g, &p, s, snr_db)?;
        Ok(g.value(img).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Full evaluation pipeline on one image.
    pub fn transmit(&self, img: &Tensor, channel: &ChannelRealization, inject_snr_db: f64) -> Result<Tensor> {
        let q = self.encode(img, inject_snr_db)?;
        let r = channel.receive(&q);
        self.decode(&r, inject_snr_db)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.to_toml(),
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_toml(&ck.config)?;
        let mut m = Self::new(cfg)?;
        m.store.assign_from(&ck.params)?;
        Ok(m)
    }
}

/// `q = x / sqrt(2·mean(x²))`, so the complex symbols formed by consecutive
/// pairs have unit average power.
pub fn power_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let m = g.mean(sq);
    let m = g.scale(m, 2.0);
    let d = g.sqrt(m);
    g.div(x, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{mean_power, ChannelKind};

    #[test]
    fn cbr_parsing() {
        assert_eq!("1/12".parse::<Cbr>().unwrap(), Cbr { num: 1, den: 12 });
        assert!("0/3".parse::<Cbr>().is_err());
        assert!("1:3".parse::<Cbr>().is_err());
    }

    #[test]
    fn full_shape_trace() {
        let rows = shape_trace(&ModelConfig::full_scale()).unwrap();
        let shapes: Vec<_> = rows.iter().map(|r| r.1).collect();
        assert_eq!(
            shapes,
            vec![(3, 128, 128), (128, 32, 32), (192, 16, 16), (256, 8, 8), (320, 8, 8), (16, 8, 8)]
        );
        assert_eq!(ModelConfig::full_scale().k_uses(), 1024);
    }

    #[test]
    fn toy_dimensions() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.k_uses(), 256);
        assert_eq!(c.c_out(), 32);
        assert_eq!(c.grids(), vec![(8, 8), (4, 4)]);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = ModelConfig::toy();
        c.blocks = vec![1];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.image_height = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.cbr = Cbr { num: 1, den: 7 };
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.cbr = Cbr { num: 1, den: 1536 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ModelConfig::toy();
        let text = c.to_toml();
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), c);
        let typo = text.replace("state_dim", "state_dims");
        assert!(ModelConfig::from_toml(&typo).is_err());
    }

    fn small() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            widths: vec![8, 12],
            state_dim: 4,
            cbr: Cbr { num: 1, den: 6 },
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn untrained_round_trip_is_well_formed() {
        let m = MambaJscc::new(small()).unwrap();
        let img = Rng::new(1).uniform_tensor(&[3, 16, 16], 0., 1.);
        let q = m.encode(&img, 10.0).unwrap();
        assert_eq!(q.len() as u64, m.config().k_uses());
        assert!((mean_power(&q) - 1.0).abs() < 1e-9);
        let ch = ChannelRealization::sample(ChannelKind::Awgn, q.len(), 10.0, None, &mut Rng::new(2)).unwrap();
        let out = m.transmit(&img, &ch, 10.0).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_restores_model() {
        let m = MambaJscc::new(small()).unwrap();
        let ck = m.checkpoint();
        let back = MambaJscc::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.checkpoint().to_bytes(), ck.to_bytes());
    }

    #[test]
    fn channel_only_stage_keeps_grid() {
        let cfg = ModelConfig {
            downsample: vec![false],
            cbr: Cbr { num: 1, den: 24 },
            ..small()
        };
        assert_eq!(cfg.grids(), vec![(4, 4), (4, 4)]);
        let m = MambaJscc::new(cfg).unwrap();
        let img = Tensor::full(&[3, 16, 16], 0.5);
        let ch = ChannelRealization::sample(ChannelKind::Identity, 32, 0.0, None, &mut Rng::new(0)).unwrap();
        assert_eq!(m.transmit(&img, &ch, 5.0).unwrap().shape(), &[3, 16, 16]);
    }
}
