use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mambajscc::config::RunConfig;
use mambajscc::evaluate::{csv_table, sweep, EvalSetup};
use mambajscc::image::{synthetic_dataset, Ppm};
use mambajscc::macs::count_macs;
use mambajscc::metrics::{msssim, msssim_db, psnr};
use mambajscc::train::{train, Adam, StepLog};
use mambajscc::verify::{Suite, Verifier};
use mambajscc::{Checkpoint, ChannelKind, ChannelRealization, CsiRestConfig, Error, MambaJscc, ModelConfig, Rng};

use crate::{Command, Common, Preset, EXIT_IO, EXIT_USAGE, EXIT_VERIFY};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Image { .. } | Error::Checkpoint(_) => EXIT_IO,
            Error::Diverged { .. } => EXIT_VERIFY,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Checkpointing cadence during training, in steps.
const SAVE_EVERY: usize = 100;

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Verify { suite, seed } => verify(&suite, seed),
        Command::Train {
            common,
            snr,
            channel,
            no_csi_rest,
            out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = snr {
                cfg.train.snr_min = s;
                cfg.train.snr_max = s;
            }
            if let Some(c) = channel {
                cfg.train.channel = c.into();
            }
            if no_csi_rest {
                cfg.model.csi = CsiRestConfig::disabled();
            }
            if let Some(p) = out {
                cfg.paths.checkpoint = p;
            }
            cfg.validate()?;
            run_train(&cfg)
        }
        Command::Eval {
            common,
            checkpoint,
            snr,
            channel,
            inject_snr,
            no_csi_rest,
            trials,
            out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = snr {
                cfg.eval.snrs = vec![s];
            }
            if let Some(c) = channel {
                cfg.eval.channel = c.into();
            }
            if let Some(t) = trials {
                cfg.eval.trials = t;
            }
            cfg.validate()?;
            let model = load_model(&checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone()), no_csi_rest)?;
            let images = cfg.test_set()?;
            let setup = EvalSetup {
                channel: cfg.eval.channel,
                trials: cfg.eval.trials,
                block_len: cfg.eval.block_len,
                seed: cfg.eval.seed,
            };
            let rows = sweep(&model, &images, &setup, &cfg.eval.snrs, inject_snr)?;
            emit(&csv_table(&rows), out.as_deref())?;
            Ok(0)
        }
        Command::Transmit {
            common,
            input,
            out,
            checkpoint,
            snr,
            channel,
            inject_snr,
            no_csi_rest,
        } => {
            let cfg = load(&common)?;
            let model = load_model(&checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone()), no_csi_rest)?;
            transmit(&model, &input, &out, snr, channel.into(), inject_snr.unwrap_or(snr), cfg.eval.seed)
        }
        Command::CountMacs {
            common,
            preset,
            image_size,
            out,
        } => {
            let cfg = load(&common)?;
            let mut model = match preset {
                Some(Preset::Toy) => ModelConfig::toy(),
                Some(Preset::Full) => ModelConfig::full_scale(),
                None => cfg.model,
            };
            if let Some(s) = image_size {
                model.image_height = s;
                model.image_width = s;
            }
            emit(&mac_table(&model)?, out.as_deref())?;
            Ok(0)
        }
        Command::GenData { common, count, out } => {
            let cfg = load(&common)?;
            let count = count.unwrap_or(cfg.paths.synthetic_train);
            fs::create_dir_all(&out)?;
            let images = synthetic_dataset(cfg.model.image_height, cfg.model.image_width, count, cfg.train.seed);
            for (i, img) in images.iter().enumerate() {
                Ppm::from_tensor(img)?.write(&out.join(format!("img_{i:04}.ppm")))?;
            }
            println!("wrote {count} images to {}", out.display());
            Ok(0)
        }
        Command::PrintConfig { common } => {
            print!("{}", load(&common)?.to_toml());
            Ok(0)
        }
    }
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.reseed(s);
    }
    Ok(cfg)
}

fn load_model(path: &Path, no_csi_rest: bool) -> Result<MambaJscc> {
    let model = MambaJscc::from_checkpoint(&Checkpoint::load(path)?)?;
    Ok(if no_csi_rest {
        model.with_csi(CsiRestConfig::disabled())
    } else {
        model
    })
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn verify(suite: &str, seed: u64) -> Result<u8> {
    let suites = Suite::select(suite)?;
    let report = Verifier::new(seed).run(&suites)?;
    println!("{report}");
    Ok(if report.passed() { 0 } else { EXIT_VERIFY })
}

fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

fn save(model: &MambaJscc, opt: &Adam, path: &Path) -> Result<()> {
    model.checkpoint().save(path)?;
    opt.to_checkpoint(model.params())?.save(&optimizer_path(path))?;
    Ok(())
}

/// Trains from scratch, or resumes when a checkpoint and its optimizer
/// state both exist. The step log is appended to on resume.
fn run_train(cfg: &RunConfig) -> Result<u8> {
    // Dataset errors surface before any model is built.
    let data = cfg.train_set()?;
    let ckpt = &cfg.paths.checkpoint;
    let opt_path = optimizer_path(ckpt);
    let (mut model, mut opt) = match (ckpt.exists(), opt_path.exists()) {
        (true, true) => {
            let model = MambaJscc::from_checkpoint(&Checkpoint::load(ckpt)?)?;
            if model.config() != &cfg.model {
                return Err(Error::Config(format!("{} was trained with a different model config", ckpt.display())).into());
            }
            let opt = Adam::from_checkpoint(&Checkpoint::load(&opt_path)?, model.params(), cfg.train.lr)?;
            (model, opt)
        }
        (false, false) => {
            let model = MambaJscc::new(cfg.model.clone())?;
            let opt = Adam::new(model.params(), cfg.train.lr);
            (model, opt)
        }
        _ => {
            return Err(Error::Config(format!(
                "found only one of {} and {}; remove it or restore the other",
                ckpt.display(),
                opt_path.display()
            ))
            .into())
        }
    };
    let start = opt.steps_taken() as usize;
    let log_file = if start == 0 {
        File::create(&cfg.paths.log)?
    } else {
        OpenOptions::new().append(true).create(true).open(&cfg.paths.log)?
    };
    let mut log = BufWriter::new(log_file);
    if start >= cfg.train.steps {
        eprintln!("checkpoint already at step {start}; nothing to do");
        return Ok(0);
    }
    // The training loop borrows the model mutably, so periodic saves run
    // between chunks of SAVE_EVERY steps.
    let mut at = start;
    while at < cfg.train.steps {
        let stop = (at + SAVE_EVERY).min(cfg.train.steps);
        let chunk = mambajscc::train::TrainConfig {
            steps: stop,
            ..cfg.train.clone()
        };
        let result = train(&mut model, &data, &chunk, &mut opt, at, |l: &StepLog| {
            writeln!(log, "{l}")?;
            Ok(())
        });
        log.flush()?;
        result?;
        at = stop;
        save(&model, &opt, ckpt)?;
        eprintln!("step {at}: checkpoint written");
    }
    Ok(0)
}

fn transmit(
    model: &MambaJscc,
    input: &Path,
    out: &Path,
    snr: f64,
    channel: ChannelKind,
    inject: f64,
    seed: u64,
) -> Result<u8> {
    let img = Ppm::read(input)?.to_tensor();
    let cfg = model.config();
    if img.shape() != [3, cfg.image_height, cfg.image_width] {
        return Err(Error::Dimension(format!(
            "image is {}x{}, model expects {}x{}",
            img.shape()[2],
            img.shape()[1],
            cfg.image_width,
            cfg.image_height
        ))
        .into());
    }
    let mut rng = Rng::new(seed);
    let ch = ChannelRealization::sample(channel, cfg.k_uses() as usize, snr, None, &mut rng)?;
    let recon = model.transmit(&img, &ch, inject)?;
    Ppm::from_tensor(&recon)?.write(out)?;
    println!("psnr_db,msssim_db");
    println!("{:.6},{:.6}", psnr(&img, &recon)?, msssim_db(msssim(&img, &recon)?));
    Ok(0)
}

fn mac_table(cfg: &ModelConfig) -> Result<String> {
    let mut on_cfg = cfg.clone();
    on_cfg.csi = CsiRestConfig::default();
    let mut off_cfg = cfg.clone();
    off_cfg.csi = CsiRestConfig::disabled();
    let on = count_macs(&on_cfg)?;
    let off = count_macs(&off_cfg)?;
    let mut s = String::from("module,macs_csi_on,macs_csi_off,params_csi_on,params_csi_off\n");
    for (a, b) in on.modules.iter().zip(&off.modules) {
        s.push_str(&format!("{},{},{},{},{}\n", a.0, a.1, b.1, a.2, b.2));
    }
    s.push_str(&format!(
        "total,{},{},{},{}\n",
        on.total_macs(),
        off.total_macs(),
        on.total_params(),
        off.total_params()
    ));
    let built = MambaJscc::new(cfg.clone())?.checkpoint();
    let blobs: usize = built.params.iter().map(|(_, t)| t.numel()).sum();
    if blobs as u64 != on.total_params() {
        return Err(Error::Contract(format!(
            "analytic parameter count {} disagrees with checkpoint blobs {blobs}",
            on.total_params()
        ))
        .into());
    }
    s.push_str(&format!(
        "# {:.4} GMACs, {:.4} M parameters ({} checkpoint scalars)\n",
        on.total_macs() as f64 / 1e9,
        on.total_params() as f64 / 1e6,
        blobs
    ));
    Ok(s)
}
