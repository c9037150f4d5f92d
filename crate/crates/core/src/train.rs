//! Adam and the training loop.
//!
//! Every step draws its batch, SNR, and channel realization from a
//! generator seeded by `(seed, step)`, so a run resumed from a checkpoint
//! continues exactly as an uninterrupted one would.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::channel::{ChannelKind, ChannelRealization};
use crate::codec::MambaJscc;
use crate::error::{Error, Result};
use crate::metrics::msssim_graph;
use crate::params::{Checkpoint, ParamStore};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Msssim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub loss: LossKind,
    pub channel: ChannelKind,
    /// Training SNR is uniform in `[snr_min, snr_max]` dB; equal bounds fix it.
    pub snr_min: f64,
    pub snr_max: f64,
    /// Rayleigh coherence length in symbols; absent means one coefficient per image.
    #[serde(default)]
    pub block_len: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            batch: 4,
            loss: LossKind::Mse,
            channel: ChannelKind::Awgn,
            snr_min: 10.0,
            snr_max: 10.0,
            block_len: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if !(self.snr_min.is_finite() && self.snr_max.is_finite()) || self.snr_min > self.snr_max {
            return Err(Error::Config(format!("SNR range [{}, {}] is invalid", self.snr_min, self.snr_max)));
        }
        if self.block_len == Some(0) {
            return Err(Error::Config("block_len must be positive".into()));
        }
        Ok(())
    }

    pub fn sample_snr(&self, rng: &mut Rng) -> f64 {
        if self.snr_min == self.snr_max {
            self.snr_min
        } else {
            rng.uniform(self.snr_min, self.snr_max)
        }
    }
}

/// Bias-corrected Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e−8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            if p.shape() != grads[k].shape() {
                return Err(Error::Dimension(format!("gradient shape mismatch for parameter {k}")));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Optimizer state in the checkpoint container: blobs `m.<name>`,
    /// `v.<name>`, and the step count `t`.
    pub fn to_checkpoint(&self, params: &ParamStore) -> Result<Checkpoint> {
        let mut store = ParamStore::new();
        store.add("t", Tensor::scalar(self.t as f64))?;
        for (k, (name, _)) in params.iter().enumerate() {
            store.add(format!("m.{name}"), self.m[k].clone())?;
            store.add(format!("v.{name}"), self.v[k].clone())?;
        }
        Ok(Checkpoint {
            config: format!("lr = {:?}\n", self.lr),
            params: store,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, params: &ParamStore, lr: f64) -> Result<Self> {
        let mut adam = Adam::new(params, lr);
        let get = |name: &str| {
            ck.params
                .id(name)
                .map(|id| ck.params.get(id).clone())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {name}")))
        };
        adam.t = get("t")?.item() as u64;
        for (k, (name, t)) in params.iter().enumerate() {
            let (m, v) = (get(&format!("m.{name}"))?, get(&format!("v.{name}"))?);
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong shape")));
            }
            adam.m[k] = m;
            adam.v[k] = v;
        }
        Ok(adam)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub snr_db: f64,
    pub lr: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {:.9e}, {:.6}, {:e}", self.step, self.loss, self.snr_db, self.lr)
    }
}

/// Per-image loss inside a graph: MSE or `1 − MS-SSIM`.
pub fn image_loss(g: &mut Graph, kind: LossKind, target: Var, recon: Var) -> Result<Var> {
    match kind {
        LossKind::Mse => {
            let d = g.sub(recon, target)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        }
        LossKind::Msssim => {
            let m = msssim_graph(g, target, recon)?;
            let neg = g.neg(m);
            Ok(g.add_scalar(neg, 1.0))
        }
    }
}

/// Everything one training step samples.
#[derive(Clone, Debug)]
pub struct StepDraw {
    pub indices: Vec<usize>,
    pub snr_db: f64,
    pub channels: Vec<ChannelRealization>,
}

pub fn draw_step(model: &MambaJscc, cfg: &TrainConfig, dataset_len: usize, step: usize) -> Result<StepDraw> {
    let mut rng = Rng::new(cfg.seed).fork(step as u64);
    let indices: Vec<usize> = (0..cfg.batch).map(|_| rng.below(dataset_len)).collect();
    let snr_db = cfg.sample_snr(&mut rng);
    let k = model.config().k_uses() as usize;
    let channels = (0..cfg.batch)
        .map(|_| ChannelRealization::sample(cfg.channel, k, snr_db, cfg.block_len, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepDraw {
        indices,
        snr_db,
        channels,
    })
}

/// Mean loss over the batch and the summed gradients (in store order) of
/// that mean.
pub fn batch_gradients(
    model: &MambaJscc,
    data: &[Tensor],
    draw: &StepDraw,
    loss_kind: LossKind,
) -> Result<(f64, Vec<Tensor>)> {
    let scale = 1.0 / draw.indices.len() as f64;
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (&i, channel) in draw.indices.iter().zip(&draw.channels) {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let img = g.constant(data[i].clone());
        let out = model.forward_graph(&mut g, &p, img, channel, draw.snr_db)?;
        let loss = image_loss(&mut g, loss_kind, img, out)?;
        let loss = g.scale(loss, scale);
        total += g.value(loss).item();
        g.backward(loss)?;
        let grads = p.grads(&g, model.params());
        acc = Some(match acc {
            None => grads,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(&grads) {
                    x.data_mut().iter_mut().zip(y.data()).for_each(|(u, v)| *u += v);
                }
                a
            }
        });
    }
    Ok((total, acc.expect("batch is non-empty")))
}

/// Runs steps `start..cfg.steps`, calling `log` after each one.
pub fn train(
    model: &mut MambaJscc,
    data: &[Tensor],
    cfg: &TrainConfig,
    opt: &mut Adam,
    start: usize,
    mut log: impl FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for step in start..cfg.steps {
        let draw = draw_step(model, cfg, data.len(), step)?;
        let (loss, grads) = batch_gradients(model, data, &draw, cfg.loss)?;
        if !loss.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(model.params_mut(), &grads)?;
        log(&StepLog {
            step,
            loss,
            snr_db: draw.snr_db,
            lr: opt.lr,
        })?;
    }
    Ok(())
}
