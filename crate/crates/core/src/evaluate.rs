//! Fixed-parameter evaluation over a test set at chosen SNRs.

use std::fmt::Write as _;

use crate::channel::{ChannelKind, ChannelRealization};
use crate::codec::MambaJscc;
use crate::error::{Error, Result};
use crate::metrics::{mse, msssim, msssim_db, psnr_from_mse};
use crate::tensor::{Rng, Tensor};

/// Means over `images × trials` transmissions at one channel SNR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub snr_db: f64,
    /// SNR given to the model as CSI; differs from `snr_db` only in
    /// mismatch experiments.
    pub inject_snr_db: f64,
    pub mse: f64,
    pub psnr_db: f64,
    pub msssim_db: f64,
    pub transmissions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSetup {
    pub channel: ChannelKind,
    pub trials: usize,
    pub block_len: Option<usize>,
    pub seed: u64,
}

/// Realization stream for one transmission. Independent of the injected
/// SNR, so mismatch experiments see the same noise.
fn realization_rng(seed: u64, snr_db: f64, image: usize, trial: usize) -> Rng {
    Rng::new(seed ^ snr_db.to_bits()).fork(((image as u64) << 32) | trial as u64)
}

pub fn evaluate_at(
    model: &MambaJscc,
    images: &[Tensor],
    setup: &EvalSetup,
    snr_db: f64,
    inject_snr_db: f64,
) -> Result<EvalRow> {
    if images.is_empty() || setup.trials == 0 {
        return Err(Error::Config("evaluation needs at least one image and one trial".into()));
    }
    let k = model.config().k_uses() as usize;
    let (mut sum_mse, mut sum_psnr, mut sum_ms) = (0.0, 0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let q = model.encode(img, inject_snr_db)?;
        for t in 0..setup.trials {
            let mut rng = realization_rng(setup.seed, snr_db, i, t);
            let ch = ChannelRealization::sample(setup.channel, k, snr_db, setup.block_len, &mut rng)?;
            let out = model.decode(&ch.receive(&q), inject_snr_db)?;
            let e = mse(img, &out)?;
            sum_mse += e;
            sum_psnr += psnr_from_mse(e, 1.0);
            sum_ms += msssim_db(msssim(img, &out)?);
        }
    }
    let n = (images.len() * setup.trials) as f64;
    Ok(EvalRow {
        snr_db,
        inject_snr_db,
        mse: sum_mse / n,
        psnr_db: sum_psnr / n,
        msssim_db: sum_ms / n,
        transmissions: images.len() * setup.trials,
    })
}

/// One row per SNR. With `inject` set, every row uses that CSI value.
pub fn sweep(
    model: &MambaJscc,
    images: &[Tensor],
    setup: &EvalSetup,
    snrs: &[f64],
    inject: Option<f64>,
) -> Result<Vec<EvalRow>> {
    snrs.iter()
        .map(|&s| evaluate_at(model, images, setup, s, inject.unwrap_or(s)))
        .collect()
}

pub fn csv_table(rows: &[EvalRow]) -> String {
    let mut out = String::from("snr_db,inject_snr_db,mse,psnr_db,msssim_db,transmissions\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.9e},{:.6},{:.6},{}",
            r.snr_db, r.inject_snr_db, r.mse, r.psnr_db, r.msssim_db, r.transmissions
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::synthetic_dataset;
    use crate::verify::micro_config;

    fn setup(trials: usize) -> EvalSetup {
        EvalSetup {
            channel: ChannelKind::Awgn,
            trials,
            block_len: None,
            seed: 3,
        }
    }

    #[test]
    fn sweep_has_one_row_per_snr() {
        let model = MambaJscc::new(micro_config()).unwrap();
        let imgs = synthetic_dataset(16, 16, 2, 1);
        let snrs = [1.0, 4.0, 7.0, 10.0, 13.0, 16.0, 19.0];
        let rows = sweep(&model, &imgs, &setup(1), &snrs, None).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().zip(&snrs).all(|(r, &s)| r.snr_db == s && r.inject_snr_db == s));
        let table = csv_table(&rows);
        assert_eq!(table.lines().count(), 8);
    }

    #[test]
    fn injected_snr_does_not_change_noise() {
        let model = MambaJscc::new(micro_config()).unwrap().with_csi(crate::CsiRestConfig::disabled());
        let imgs = synthetic_dataset(16, 16, 2, 1);
        let a = evaluate_at(&model, &imgs, &setup(2), 5.0, 0.0).unwrap();
        let b = evaluate_at(&model, &imgs, &setup(2), 5.0, 20.0).unwrap();
        assert_eq!(a.mse, b.mse);
    }

    #[test]
    fn monte_carlo_mean_is_stable_at_high_snr() {
        let model = MambaJscc::new(micro_config()).unwrap();
        let imgs = synthetic_dataset(16, 16, 1, 4);
        let one = evaluate_at(&model, &imgs, &setup(1), 30.0, 30.0).unwrap();
        let many = evaluate_at(&model, &imgs, &setup(100), 30.0, 30.0).unwrap();
        assert_eq!(many.transmissions, 100);
        assert!((one.psnr_db - many.psnr_db).abs() < 0.05, "{} vs {}", one.psnr_db, many.psnr_db);
    }
}
