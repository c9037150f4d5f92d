//! Executable property suites: oracle equivalence, GSSM similarity,
//! superposition, receptive field, round trips, channel statistics, and
//! gradients.
//!
//! Every case draws from its own seed, derived from the run seed, so a
//! failure report carries enough to replay exactly that case. The scan
//! recovery used by the `gssm` and `roundtrip` suites is a parameter, which
//! lets tests confirm the suites catch a broken recovery.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::autodiff::{grad_check, Graph};
use crate::channel::{complex_normal, mean_power, mmse_equalize, noise_var, ChannelKind, ChannelRealization};
use crate::codec::{MambaJscc, ModelConfig};
use crate::error::{Error, Result};
use crate::gssm::{
    dual_gssm_csi, dual_gssm_graph, gssm_apply_csi, receptive_field_map, scan_exchange, scan_recover,
    CsiRestConfig, GssmModule, ScanScheme,
};
use crate::image::{synthetic_image, Ppm};
use crate::params::{Binding, ParamStore};
use crate::ssm::{
    generate_step_params, ssm_matrix_oracle, ssm_scan, zero_input_oracle, HiddenState, SsmDirectionParams, StepParams,
};
use crate::tensor::{Rng, Tensor};
use crate::vssm::{BlockConfig, ScanParamIds, VssmCaBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Gssm,
    Superposition,
    Receptive,
    Roundtrip,
    Channel,
    Gradient,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Oracle,
        Suite::Gssm,
        Suite::Superposition,
        Suite::Receptive,
        Suite::Roundtrip,
        Suite::Channel,
        Suite::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Gssm => "gssm",
            Suite::Superposition => "superposition",
            Suite::Receptive => "receptive",
            Suite::Roundtrip => "roundtrip",
            Suite::Channel => "channel",
            Suite::Gradient => "gradient",
        }
    }

    /// A suite name, or `all`.
    pub fn select(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .iter()
            .find(|s| s.name() == name)
            .map(|&s| vec![s])
            .ok_or_else(|| Error::Config(format!("unknown suite {name:?}")))
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&s| s == self).unwrap() as u64
    }
}

/// The first failing case of a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub case: usize,
    pub case_seed: u64,
    pub inputs: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    /// Largest error seen against this suite's tolerance.
    pub worst: f64,
    pub failure: Option<Failure>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            match &s.failure {
                None => writeln!(f, "{}: PASS ({} cases, worst {:.3e})", s.suite.name(), s.cases, s.worst)?,
                Some(e) => {
                    writeln!(
                        f,
                        "{}: FAIL case {} (seed {}, case seed {}): {}",
                        s.suite.name(),
                        e.case,
                        self.seed,
                        e.case_seed,
                        e.detail
                    )?;
                    writeln!(f, "  inputs: {}", e.inputs)?;
                }
            }
        }
        write!(f, "{}", if self.passed() { "all suites passed" } else { "verification FAILED" })
    }
}

pub type RecoverFn = dyn Fn(&[f64], &ScanScheme) -> Result<Vec<f64>>;

/// Outcome of one case: the error measure, and on failure a description.
struct Case {
    err: f64,
    ok: bool,
    inputs: String,
    detail: String,
}

impl Case {
    fn check(err: f64, tol: f64, inputs: impl FnOnce() -> String, what: &str) -> Self {
        let ok = err <= tol;
        Self {
            err,
            ok,
            inputs: if ok { String::new() } else { inputs() },
            detail: if ok { String::new() } else { format!("{what}: {err:.3e} > {tol:.1e}") },
        }
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// `max|a − b| / max(1, max|b|)`.
pub fn rel_dev(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub struct Verifier<'a> {
    seed: u64,
    recover: &'a RecoverFn,
}

static RECOVER: fn(&[f64], &ScanScheme) -> Result<Vec<f64>> = scan_recover;

impl Verifier<'static> {
    pub fn new(seed: u64) -> Self {
        Self { seed, recover: &RECOVER }
    }
}

impl<'a> Verifier<'a> {
    /// Same suites with a substitute scan recovery.
    pub fn with_recover(seed: u64, recover: &'a RecoverFn) -> Self {
        Self { seed, recover }
    }

    pub fn case_seed(&self, suite: Suite, case: usize) -> u64 {
        Rng::new(self.seed).fork((suite.index() << 32) | case as u64).seed()
    }

    pub fn run(&self, suites: &[Suite]) -> Result<Report> {
        let mut out = Vec::new();
        for &s in suites {
            out.push(self.run_suite(s)?);
        }
        Ok(Report {
            seed: self.seed,
            suites: out,
        })
    }

    pub fn run_suite(&self, suite: Suite) -> Result<SuiteReport> {
        let cases = match suite {
            Suite::Oracle => 100,
            Suite::Gssm => 30,
            Suite::Superposition => 50,
            Suite::Receptive => 3,
            Suite::Roundtrip => 40,
            Suite::Channel => 1,
            Suite::Gradient => 3,
        };
        let mut report = SuiteReport {
            suite,
            cases,
            worst: 0.0,
            failure: None,
        };
        for case in 0..cases {
            let case_seed = self.case_seed(suite, case);
            let mut rng = Rng::new(case_seed);
            let c = match suite {
                Suite::Oracle => oracle_case(&mut rng)?,
                Suite::Gssm => self.gssm_case(case, &mut rng)?,
                Suite::Superposition => superposition_case(&mut rng)?,
                Suite::Receptive => receptive_case(&mut rng)?,
                Suite::Roundtrip => self.roundtrip_case(case, &mut rng)?,
                Suite::Channel => channel_case(&mut rng)?,
                Suite::Gradient => gradient_case(case, &mut rng)?,
            };
            report.worst = report.worst.max(c.err);
            if !c.ok {
                report.failure = Some(Failure {
                    case,
                    case_seed,
                    inputs: c.inputs,
                    detail: c.detail,
                });
                break;
            }
        }
        Ok(report)
    }

    fn gssm_apply_with(&self, m: &GssmModule, z: &[f64]) -> Result<Vec<f64>> {
        let x = scan_exchange(z, &m.scheme)?;
        let sp = generate_step_params(&m.params, &x);
        let (y, _) = ssm_scan(&sp, &x, &HiddenState::zeros(m.params.state_dim()))?;
        (self.recover)(&y, &m.scheme)
    }

    /// Similarity: `R⁻¹·SSM(R z) = (R⁻¹ M R) z` with M from the oracle on the
    /// exchanged sequence, cycling through κ₁, κ₂, and a general scheme.
    fn gssm_case(&self, case: usize, rng: &mut Rng) -> Result<Case> {
        let len = 2 + rng.below(23);
        let n = 1 + rng.below(6);
        let scheme = match case % 3 {
            0 => ScanScheme::identity(len),
            1 => ScanScheme::reversal(len),
            _ => random_general(len, rng)?,
        };
        let m = GssmModule {
            params: SsmDirectionParams::init(n, 2, rng),
            scheme,
        };
        let z: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        let got = self.gssm_apply_with(&m, &z)?;
        let sp = m.step_params(&z)?;
        let want = similarity_oracle(&sp, &m.scheme, &z)?;
        let kind = ["identity", "reversal", "general"][case % 3];
        Ok(Case::check(
            rel_dev(&got, &want),
            1e-9,
            || format!("scheme={kind} T={len} N={n} z={}", fmt_vec(&z)),
            "GSSM output deviates from R⁻¹MR·z",
        ))
    }

    fn roundtrip_case(&self, case: usize, rng: &mut Rng) -> Result<Case> {
        let len = 1 + rng.below(40);
        let (scheme, kind, tol) = match case % 4 {
            0 => (ScanScheme::identity(len), "identity", 0.0),
            1 => (ScanScheme::reversal(len), "reversal", 0.0),
            2 => (ScanScheme::permutation(random_permutation(len, rng))?, "permutation", 0.0),
            _ => (random_general(len, rng)?, "general", 1e-10),
        };
        let z: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        let back = (self.recover)(&scan_exchange(&z, &scheme)?, &scheme)?;
        let mut err = rel_dev(&back, &z);
        if case == 0 {
            err = err.max(ppm_round_trip(rng)?);
        }
        Ok(Case::check(
            err,
            tol,
            || format!("scheme={kind} T={len} z={}", fmt_vec(&z)),
            "recover(exchange(z)) differs from z",
        ))
    }
}

fn random_permutation(len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

/// A well-conditioned dense invertible matrix: 2I plus a small perturbation.
pub fn random_general(len: usize, rng: &mut Rng) -> Result<ScanScheme> {
    let scale = 0.5 / len as f64;
    let r = DMatrix::from_fn(len, len, |i, j| if i == j { 2.0 } else { 0.0 } + scale * rng.normal());
    ScanScheme::general(r)
}

/// `(R⁻¹ M R) z` with dense matrices.
pub fn similarity_oracle(sp: &StepParams, scheme: &ScanScheme, z: &[f64]) -> Result<Vec<f64>> {
    let m = ssm_matrix_oracle(sp)?;
    let len = z.len();
    let m = DMatrix::from_row_slice(len, len, m.data());
    let u = scheme.inverse_matrix() * m * scheme.matrix();
    Ok((u * DVector::from_column_slice(z)).as_slice().to_vec())
}

fn random_step_params(len: usize, n: usize, rng: &mut Rng) -> Result<(SsmDirectionParams, StepParams, Vec<f64>)> {
    let p = SsmDirectionParams::init(n, 1 + rng.below(3), rng);
    let x: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
    let sp = generate_step_params(&p, &x);
    Ok((p, sp, x))
}

/// Recurrence against `M·x + [V_t·h₀]_t` on random instances.
fn oracle_case(rng: &mut Rng) -> Result<Case> {
    let len = 1 + rng.below(64);
    let n = 1 + rng.below(8);
    let (_, sp, x) = random_step_params(len, n, rng)?;
    let h0: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let (y, _) = ssm_scan(&sp, &x, &HiddenState::from_vec(h0.clone()))?;
    let want = crate::ssm::oracle_response(&sp, &x, &h0)?;
    Ok(Case::check(
        rel_dev(&y, &want),
        1e-9,
        || format!("T={len} N={n} x={} h0={}", fmt_vec(&x), fmt_vec(&h0)),
        "recurrence deviates from matrix form",
    ))
}

/// With frozen step parameters the response splits into zero-state and
/// zero-input parts, and the latter matches the oracle rows.
fn superposition_case(rng: &mut Rng) -> Result<Case> {
    let len = 1 + rng.below(64);
    let n = 1 + rng.below(8);
    let (_, sp, x) = random_step_params(len, n, rng)?;
    let h0: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let (full, _) = ssm_scan(&sp, &x, &HiddenState::from_vec(h0.clone()))?;
    let (zs, _) = ssm_scan(&sp, &x, &HiddenState::zeros(n))?;
    let (zi, _) = ssm_scan(&sp, &vec![0.0; len], &HiddenState::from_vec(h0.clone()))?;
    let sum: Vec<f64> = zs.iter().zip(&zi).map(|(a, b)| a + b).collect();
    let v = zero_input_oracle(&sp)?;
    let zi_oracle: Vec<f64> = v.iter().map(|row| row.iter().zip(&h0).map(|(a, b)| a * b).sum()).collect();
    let err = rel_dev(&full, &sum).max(rel_dev(&zi, &zi_oracle));
    Ok(Case::check(
        err,
        1e-9,
        || format!("T={len} N={n} x={} h0={}", fmt_vec(&x), fmt_vec(&h0)),
        "superposition broken",
    ))
}

/// Support pattern of `|∂u/∂z|` for forward-only, backward-only, and dual.
pub struct SupportPattern {
    pub forward_lower: bool,
    pub backward_upper: bool,
    pub dual_full: bool,
    /// Smallest entry of the dual map.
    pub dual_min: f64,
}

pub fn support_pattern(len: usize, n: usize, rng: &mut Rng, threshold: f64) -> Result<SupportPattern> {
    let m1 = GssmModule {
        params: SsmDirectionParams::init(n, 2, rng),
        scheme: ScanScheme::identity(len),
    };
    let m2 = GssmModule {
        params: SsmDirectionParams::init(n, 2, rng),
        scheme: ScanScheme::reversal(len),
    };
    let z0: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
    let csi = CsiRestConfig::default();
    let eps = 1e-5;
    let f = receptive_field_map(|z| gssm_apply_csi(&m1, z, csi.injection(10.0)), &z0, eps)?;
    let b = receptive_field_map(|z| gssm_apply_csi(&m2, z, csi.injection(10.0)), &z0, eps)?;
    let d = receptive_field_map(|z| dual_gssm_csi(&m1, &m2, z, &csi, 10.0), &z0, eps)?;
    let mut forward_lower = true;
    let mut backward_upper = true;
    for i in 0..len {
        for j in 0..len {
            let (fv, bv) = (f.at2(i, j), b.at2(i, j));
            forward_lower &= if j <= i { fv > threshold } else { fv == 0.0 };
            backward_upper &= if j >= i { bv > threshold } else { bv == 0.0 };
        }
    }
    let dual_min = d.data().iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(SupportPattern {
        forward_lower,
        backward_upper,
        dual_full: dual_min > threshold,
        dual_min,
    })
}

fn receptive_case(rng: &mut Rng) -> Result<Case> {
    let sp = support_pattern(16, 4, rng, 1e-12)?;
    let ok = sp.forward_lower && sp.backward_upper && sp.dual_full;
    Ok(Case {
        err: 0.0,
        ok,
        inputs: if ok { String::new() } else { "T=16 N=4".into() },
        detail: format!(
            "forward lower-triangular {}, backward upper-triangular {}, dual full {} (min {:.3e})",
            sp.forward_lower, sp.backward_upper, sp.dual_full, sp.dual_min
        ),
    })
}

fn ppm_round_trip(rng: &mut Rng) -> Result<f64> {
    let img = synthetic_image(8, 6, rng.below(3), rng);
    let ppm = Ppm::from_tensor(&img)?;
    let bytes = ppm.encode();
    let again = Ppm::parse(&bytes)?.encode();
    Ok(if again == bytes { 0.0 } else { f64::INFINITY })
}

/// Channel statistics at one million symbols.
pub struct ChannelStats {
    pub awgn_snr_db: f64,
    pub rayleigh_power: f64,
    pub rayleigh_amplitude: f64,
    pub mmse_mse: f64,
    pub best_alternative_mse: f64,
    /// Same comparison on a single fixed `h` against a grid of gains.
    pub fixed_mmse_mse: f64,
    pub fixed_best_grid: f64,
}

/// Unit-power QPSK symbols.
fn qpsk(len: usize, rng: &mut Rng) -> Vec<Complex64> {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    (0..len)
        .map(|_| Complex64::new(if rng.below(2) == 0 { a } else { -a }, if rng.below(2) == 0 { a } else { -a }))
        .collect()
}

pub fn channel_stats(symbols: usize, snr_db: f64, rng: &mut Rng) -> Result<ChannelStats> {
    let q = qpsk(symbols, rng);
    let r = crate::channel::awgn(&q, snr_db, rng)?;
    let noise: Vec<Complex64> = r.iter().zip(&q).map(|(a, b)| a - b).collect();
    let awgn_snr_db = 10.0 * (mean_power(&q) / mean_power(&noise)).log10();

    let h: Vec<Complex64> = (0..symbols).map(|_| complex_normal(rng, 1.0)).collect();
    let rayleigh_power = h.iter().map(|v| v.norm_sqr()).sum::<f64>() / symbols as f64;
    let rayleigh_amplitude = h.iter().map(|v| v.norm()).sum::<f64>() / symbols as f64;

    let var = noise_var(snr_db);
    let rx: Vec<Complex64> = q
        .iter()
        .zip(&h)
        .map(|(&s, &hv)| hv * s + complex_normal(rng, var))
        .collect();
    let mse_of = |est: &[Complex64]| est.iter().zip(&q).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / symbols as f64;
    let mmse_mse = mse_of(&mmse_equalize(&rx, &h, var));
    // Alternatives: regularizer λ off its optimum σ², and scalar rescalings
    // of the MMSE output.
    let mut best_alternative_mse = f64::INFINITY;
    for lambda in [0.0, 0.25, 0.5, 2.0, 4.0, 10.0] {
        best_alternative_mse = best_alternative_mse.min(mse_of(&mmse_equalize(&rx, &h, lambda * var)));
    }
    let base = mmse_equalize(&rx, &h, var);
    for w in [0.8, 0.9, 0.95, 1.05, 1.1, 1.25] {
        let scaled: Vec<Complex64> = base.iter().map(|v| v * w).collect();
        best_alternative_mse = best_alternative_mse.min(mse_of(&scaled));
    }
    // Fixed fading coefficient: grid over scalar gains g around the MMSE gain.
    let hf = complex_normal(rng, 1.0);
    let rf: Vec<Complex64> = q.iter().map(|&s| hf * s + complex_normal(rng, var)).collect();
    let g_star = hf.conj() / (hf.norm_sqr() + var);
    let mse_gain = |g: Complex64| rf.iter().zip(&q).map(|(r, s)| (g * r - s).norm_sqr()).sum::<f64>() / symbols as f64;
    let fixed_mmse_mse = mse_gain(g_star);
    let mut fixed_best_grid = f64::INFINITY;
    for mag in [0.7, 0.8, 0.9, 0.95, 1.05, 1.1, 1.2, 1.3] {
        for phase in [-0.2, -0.1, 0.0, 0.1, 0.2] {
            fixed_best_grid = fixed_best_grid.min(mse_gain(g_star * Complex64::from_polar(mag, phase)));
        }
    }
    for phase in [-0.2, -0.1, 0.1, 0.2] {
        fixed_best_grid = fixed_best_grid.min(mse_gain(g_star * Complex64::from_polar(1.0, phase)));
    }
    Ok(ChannelStats {
        awgn_snr_db,
        fixed_mmse_mse,
        fixed_best_grid,
        rayleigh_power,
        rayleigh_amplitude,
        mmse_mse,
        best_alternative_mse,
    })
}

fn channel_case(rng: &mut Rng) -> Result<Case> {
    let s = channel_stats(1_000_000, 10.0, rng)?;
    let mut worst = (s.awgn_snr_db - 10.0).abs() / 0.05;
    worst = worst.max((s.rayleigh_power - 1.0).abs() / 0.01);
    worst = worst.max((s.rayleigh_amplitude / 0.886_226_925_452_758 - 1.0).abs() / 0.01);
    let mmse_wins = s.mmse_mse <= s.best_alternative_mse && s.fixed_mmse_mse <= s.fixed_best_grid;
    let ok = worst <= 1.0 && mmse_wins;
    Ok(Case {
        err: worst,
        ok,
        inputs: if ok { String::new() } else { "1e6 QPSK symbols at 10 dB".into() },
        detail: format!(
            "AWGN SNR {:.4} dB, E|h|² {:.4}, E|h| {:.4}, MMSE MSE {:.5e} vs best alternative {:.5e}",
            s.awgn_snr_db, s.rayleigh_power, s.rayleigh_amplitude, s.mmse_mse, s.best_alternative_mse
        ),
    })
}

/// Relative gradient error of the dual GSSM (with CSI refresh) w.r.t. its input.
pub fn dual_gssm_grad_error(rng: &mut Rng) -> Result<f64> {
    let (cn, len, n, o) = (2, 10, 3, 2);
    let mut store = ParamStore::new();
    let f = ScanParamIds::new(&mut store, "f", cn, n, o, rng)?;
    let b = ScanParamIds::new(&mut store, "b", cn, n, o, rng)?;
    let x = rng.uniform_tensor(&[cn, len], -1.0, 1.0);
    let w = rng.uniform_tensor(&[cn, len], 0.5, 1.5);
    let csi = CsiRestConfig {
        interval: 3,
        ..CsiRestConfig::default()
    };
    grad_check(
        |g, xv| {
            let p = store.bind(g);
            let (fv, bv) = (f.vars(g, &p), b.vars(g, &p));
            let u = dual_gssm_graph(g, xv, &fv, &bv, &csi, 0.5)?;
            let c = g.constant(w.clone());
            let u = g.mul(u, c)?;
            Ok(g.sum(u))
        },
        &x,
        1e-5,
    )
}

/// Relative gradient error of a full block w.r.t. its input.
pub fn block_grad_error(rng: &mut Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let cfg = BlockConfig {
        state_dim: 2,
        gen_dim: 2,
        expand: 2,
        mlp_ratio: 2,
        conv_kernel: 3,
    };
    let block = VssmCaBlock::new(&mut store, "blk", 3, cfg, rng)?;
    let x = rng.uniform_tensor(&[6, 3], -1.0, 1.0);
    let w = rng.uniform_tensor(&[6, 3], 0.5, 1.5);
    let csi = CsiRestConfig {
        interval: 2,
        ..CsiRestConfig::default()
    };
    grad_check(
        |g, xv| {
            let p = store.bind(g);
            let y = block.forward(g, &p, xv, (2, 3), &csi, 4.0)?;
            let c = g.constant(w.clone());
            let y = g.mul(y, c)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
}

fn e2e_loss(model: &MambaJscc, img: &Tensor, ch: &ChannelRealization, snr: f64, g: &mut Graph, p: &Binding) -> Result<f64> {
    let x = g.constant(img.clone());
    let y = model.forward_graph(g, p, x, ch, snr)?;
    let d = g.sub(y, x)?;
    let sq = g.square(d);
    let l = g.mean(sq);
    Ok(g.value(l).item())
}

/// Smallest analytic gradient magnitude the end-to-end check samples. The
/// loss carries roundoff near 1e−15, so a central difference with step 1e−3
/// resolves a gradient to about 1e−12; below 1e−8 the relative error would
/// measure that noise rather than the adjoint.
pub const E2E_GRAD_FLOOR: f64 = 1e-8;

/// Relative gradient error of the end-to-end MSE w.r.t. `count` parameter
/// entries drawn uniformly from those with `|∂L/∂θ| ≥ E2E_GRAD_FLOOR`.
pub fn end_to_end_grad_error(model: &MambaJscc, count: usize, eps: f64, rng: &mut Rng) -> Result<f64> {
    let cfg = model.config();
    let img = synthetic_image(cfg.image_height, cfg.image_width, rng.below(3), rng);
    let ch = ChannelRealization::sample(ChannelKind::Awgn, cfg.k_uses() as usize, 10.0, None, rng)?;
    let snr = 10.0;
    let analytic = {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let x = g.constant(img.clone());
        let y = model.forward_graph(&mut g, &p, x, &ch, snr)?;
        let d = g.sub(y, x)?;
        let sq = g.square(d);
        let l = g.mean(sq);
        g.backward(l)?;
        p.grads(&g, model.params())
    };
    let ids: Vec<_> = model.params().ids().collect();
    let candidates: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(w, t)| t.data().iter().enumerate().filter(|(_, v)| v.abs() >= E2E_GRAD_FLOOR).map(move |(k, _)| (w, k)))
        .collect();
    if candidates.len() < count {
        return Err(Error::Contract(format!(
            "only {} parameter entries have gradients above the noise floor",
            candidates.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for _ in 0..count {
        let (which, k) = candidates[rng.below(candidates.len())];
        let id = ids[which];
        let orig = model.params().get(id).data()[k];
        let mut eval = |v: f64| -> Result<f64> {
            probe.params_mut().get_mut(id).data_mut()[k] = v;
            let mut g = Graph::inference();
            let p = probe.params().bind(&mut g);
            e2e_loss(&probe, &img, &ch, snr, &mut g, &p)
        };
        let numeric = (eval(orig + eps)? - eval(orig - eps)?) / (2.0 * eps);
        eval(orig)?;
        let a = analytic[which].data()[k];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
    }
    Ok(worst)
}

/// A reduced model for fast end-to-end checks.
pub fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.image_height = 16;
    cfg.image_width = 16;
    cfg.widths = vec![8, 12];
    cfg.state_dim = 4;
    cfg.csi.interval = 4;
    cfg
}

fn gradient_case(case: usize, rng: &mut Rng) -> Result<Case> {
    let (err, what) = match case {
        0 => (dual_gssm_grad_error(rng)?, "dual GSSM"),
        1 => (block_grad_error(rng)?, "VSSM-CA block"),
        _ => {
            let mut cfg = micro_config();
            cfg.seed = rng.below(1 << 30) as u64;
            let model = MambaJscc::new(cfg)?;
            (end_to_end_grad_error(&model, 32, 1e-3, rng)?, "end-to-end")
        }
    };
    Ok(Case::check(err, 1e-4, || what.to_string(), &format!("{what} gradient error")))
}

/// Closed form of the reversed-scan kernel: for κ₂ the map is upper triangular
/// with `U[i,j] = C_{T−1−i} · Π_{k=T−i}^{T−1−j} A_k · B_{T−1−j}` (0-based,
/// step params in scan order).
pub fn reversed_kernel_entry(sp: &StepParams, i: usize, j: usize) -> f64 {
    let len = sp.len;
    if j < i {
        return 0.0;
    }
    let (ti, tj) = (len - 1 - i, len - 1 - j);
    let (c, b) = (sp.c_t(ti), sp.b_t(tj));
    (0..sp.n)
        .map(|k| {
            let prod: f64 = (tj + 1..=ti).map(|s| sp.a_t(s)[k]).product();
            c[k] * prod * b[k]
        })
        .sum()
}
