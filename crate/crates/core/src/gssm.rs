//! Generalized SSM: an SSM wrapped by an invertible reordering of its input
//! sequence (scan exchange) and the inverse reordering of its output (scan
//! recovery), the two-direction construction, and CSI-ReST injection.
//!
//! The plain functions here operate on one sequence and serve as the
//! reference path. [`dual_gssm_graph`] runs the same computation for many
//! channels inside an autodiff [`Graph`] with a fused backward rule.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::ssm::{generate_step_params, scan_states, HiddenState, SsmDirectionParams, StepParams};
use crate::tensor::Tensor;

/// Invertible sequence transformation `x = R·z`.
#[derive(Clone, Debug, PartialEq)]
pub enum ScanScheme {
    /// `x[i] = z[order[i]]`; `inverse` is the transposed permutation.
    Permutation { order: Vec<usize>, inverse: Vec<usize> },
    /// Dense invertible R with its precomputed inverse.
    General { r: DMatrix<f64>, r_inv: DMatrix<f64> },
}

impl ScanScheme {
    /// κ₁: the identity ordering.
    pub fn identity(len: usize) -> Self {
        Self::permutation((0..len).collect()).expect("identity is a permutation")
    }

    /// κ₂: full reversal, R[i,j] = 1 iff i + j = T + 1 (1-based).
    pub fn reversal(len: usize) -> Self {
        Self::permutation((0..len).rev().collect()).expect("reversal is a permutation")
    }

    pub fn permutation(order: Vec<usize>) -> Result<Self> {
        let len = order.len();
        let mut inverse = vec![usize::MAX; len];
        for (i, &o) in order.iter().enumerate() {
            if o >= len || inverse[o] != usize::MAX {
                return Err(Error::Contract(format!("{order:?} is not a permutation")));
            }
            inverse[o] = i;
        }
        Ok(Self::Permutation { order, inverse })
    }

    /// General invertible scheme; rejects singular or ill-conditioned R.
    pub fn general(r: DMatrix<f64>) -> Result<Self> {
        if !r.is_square() || r.nrows() == 0 {
            return Err(Error::Dimension(format!("R must be square, got {}x{}", r.nrows(), r.ncols())));
        }
        let r_inv = r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Contract("scan matrix is singular".into()))?;
        let residual = (&r * &r_inv - DMatrix::identity(r.nrows(), r.ncols())).amax();
        if residual > 1e-10 {
            return Err(Error::Contract(format!("R·R⁻¹ deviates from I by {residual:e}")));
        }
        Ok(Self::General { r, r_inv })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Permutation { order, .. } => order.len(),
            Self::General { r, .. } => r.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense R (for oracle comparisons).
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            Self::Permutation { order, .. } => {
                let n = order.len();
                DMatrix::from_fn(n, n, |i, j| if order[i] == j { 1.0 } else { 0.0 })
            }
            Self::General { r, .. } => r.clone(),
        }
    }

    /// Dense R⁻¹ (for oracle comparisons).
    pub fn inverse_matrix(&self) -> DMatrix<f64> {
        match self {
            Self::Permutation { .. } => self.matrix().transpose(),
            Self::General { r_inv, .. } => r_inv.clone(),
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::Dimension(format!(
                "sequence of length {n} against scan scheme of length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// `x^κ = R_κ z`.
pub fn scan_exchange(z: &[f64], scheme: &ScanScheme) -> Result<Vec<f64>> {
    scheme.check_len(z.len())?;
    Ok(match scheme {
        ScanScheme::Permutation { order, .. } => order.iter().map(|&i| z[i]).collect(),
        ScanScheme::General { r, .. } => (r * DMatrix::from_column_slice(z.len(), 1, z)).as_slice().to_vec(),
    })
}

/// `y^κ = R_κ⁻¹ y`.
pub fn scan_recover(y: &[f64], scheme: &ScanScheme) -> Result<Vec<f64>> {
    scheme.check_len(y.len())?;
    Ok(match scheme {
        ScanScheme::Permutation { inverse, .. } => inverse.iter().map(|&i| y[i]).collect(),
        ScanScheme::General { r_inv, .. } => {
            (r_inv * DMatrix::from_column_slice(y.len(), 1, y)).as_slice().to_vec()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GssmModule {
    pub params: SsmDirectionParams,
    pub scheme: ScanScheme,
}

impl GssmModule {
    /// Step parameters generated in scan order from the exchanged sequence.
    pub fn step_params(&self, z: &[f64]) -> Result<StepParams> {
        let x = scan_exchange(z, &self.scheme)?;
        Ok(generate_step_params(&self.params, &x))
    }
}

/// Channel-adaptation settings: SNR injection into state coordinate 0 at
/// t = 0 and every `interval` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsiRestConfig {
    pub enabled: bool,
    pub interval: usize,
    /// Multiplier applied to the SNR in dB before injection.
    #[serde(default = "one")]
    pub snr_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for CsiRestConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 64,
            snr_scale: 1.0,
        }
    }
}

impl CsiRestConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("csi refresh interval must be at least 1".into()));
        }
        if !self.snr_scale.is_finite() {
            return Err(Error::Config("snr_scale must be finite".into()));
        }
        Ok(())
    }

    /// The injection, if enabled: (value, interval).
    pub fn injection(&self, snr_db: f64) -> Option<Injection> {
        self.enabled.then_some(Injection {
            value: snr_db * self.snr_scale,
            interval: self.interval,
        })
    }
}

/// A resolved CSI-ReST assignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Injection {
    pub value: f64,
    pub interval: usize,
}

impl Injection {
    pub fn hits(&self, t: usize) -> bool {
        t % self.interval == 0
    }

    pub fn apply(&self, t: usize, h: &mut [f64]) {
        if self.hits(t) {
            h[0] = self.value;
        }
    }
}

/// `y^κ = R⁻¹·SSM(R z)` from initial state `h0`.
pub fn gssm_apply(m: &GssmModule, z: &[f64], h0: &[f64]) -> Result<Vec<f64>> {
    let x = scan_exchange(z, &m.scheme)?;
    let sp = generate_step_params(&m.params, &x);
    let (y, _) = crate::ssm::ssm_scan(&sp, &x, &HiddenState::from_vec(h0.to_vec()))?;
    scan_recover(&y, &m.scheme)
}

/// One direction with optional CSI-ReST edits, recovered to input order.
pub fn gssm_apply_csi(m: &GssmModule, z: &[f64], injection: Option<Injection>) -> Result<Vec<f64>> {
    let x = scan_exchange(z, &m.scheme)?;
    let sp = generate_step_params(&m.params, &x);
    let h0 = vec![0.0; m.params.state_dim()];
    let (y, _) = scan_states(&sp, &x, &h0, |t, h| {
        if let Some(inj) = injection {
            inj.apply(t, h)
        }
    })?;
    scan_recover(&y, &m.scheme)
}

/// Two GSSM directions with CSI-ReST, summed: `u = y^{κ₁} + y^{κ₂}`.
pub fn dual_gssm_csi(
    m1: &GssmModule,
    m2: &GssmModule,
    z: &[f64],
    csi: &CsiRestConfig,
    snr_db: f64,
) -> Result<Vec<f64>> {
    if m1.scheme.len() != m2.scheme.len() {
        return Err(Error::Dimension("directions disagree on sequence length".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Contract("snr must be finite".into()));
    }
    let inj = csi.injection(snr_db);
    let y1 = gssm_apply_csi(m1, z, inj)?;
    let y2 = gssm_apply_csi(m2, z, inj)?;
    Ok(y1.iter().zip(&y2).map(|(a, b)| a + b).collect())
}

/// `S[t,s] = |∂u_t/∂z_s|` by central differences around `z0`.
pub fn receptive_field_map<F>(forward: F, z0: &[f64], eps: f64) -> Result<Tensor>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let len = z0.len();
    let mut s = vec![0.0; len * len];
    for col in 0..len {
        let mut plus = z0.to_vec();
        plus[col] += eps;
        let mut minus = z0.to_vec();
        minus[col] -= eps;
        let (up, um) = (forward(&plus)?, forward(&minus)?);
        if up.len() != len || um.len() != len {
            return Err(Error::Dimension("forward map changed the sequence length".into()));
        }
        for row in 0..len {
            s[row * len + col] = ((up[row] - um[row]) / (2.0 * eps)).abs();
        }
    }
    Tensor::new(&[len, len], s)
}

/// Graph handles for the per-channel parameters of one scan direction.
/// Shapes: `a_tilde`, `h_b`, `h_c` are `C×N`; `g`, `h_d` are `C×O`; `delta` is `C`.
#[derive(Clone, Copy, Debug)]
pub struct ScanParamVars {
    pub a_tilde: Var,
    pub g: Var,
    pub h_d: Var,
    pub delta: Var,
    pub h_b: Var,
    pub h_c: Var,
}

struct ChannelTrace {
    delta: Vec<f64>,
    a: Vec<f64>,
    states: Vec<f64>,
}

struct SelectiveScanOp {
    channels: usize,
    len: usize,
    n: usize,
    o: usize,
    injection: Option<Injection>,
    traces: Vec<ChannelTrace>,
}

fn direction_params(p: &[&Tensor], c: usize, n: usize, o: usize) -> SsmDirectionParams {
    SsmDirectionParams {
        a_tilde: p[0].data()[c * n..(c + 1) * n].to_vec(),
        g: p[1].data()[c * o..(c + 1) * o].to_vec(),
        h_d: p[2].data()[c * o..(c + 1) * o].to_vec(),
        delta: p[3].data()[c],
        h_b: p[4].data()[c * n..(c + 1) * n].to_vec(),
        h_c: p[5].data()[c * n..(c + 1) * n].to_vec(),
    }
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (cn, len, n, o) = (self.channels, self.len, self.n, self.o);
        let x = inputs[0].data();
        let mut gx = vec![0.0; cn * len];
        let mut ga = vec![0.0; cn * n];
        let mut gg = vec![0.0; cn * o];
        let mut ghd = vec![0.0; cn * o];
        let mut gdelta = vec![0.0; cn];
        let mut ghb = vec![0.0; cn * n];
        let mut ghc = vec![0.0; cn * n];
        let gy = grad.data();
        let mut gh = vec![0.0; n];
        for c in 0..cn {
            let p = direction_params(&inputs[1..], c, n, o);
            let gain = p.gate_gain();
            let tr = &self.traces[c];
            let xs = &x[c * len..(c + 1) * len];
            gh.iter_mut().for_each(|v| *v = 0.0);
            let mut g_gain = 0.0;
            for t in (0..len).rev() {
                let xt = xs[t];
                let dt = tr.delta[t];
                let a = &tr.a[t * n..(t + 1) * n];
                let hprev = &tr.states[t * n..(t + 1) * n];
                let hcur = &tr.states[(t + 1) * n..(t + 2) * n];
                let gyt = gy[c * len + t];
                let mut gxt = 0.0;
                // y_t = Σ_k (H_c,k x_t) h_t,k
                for k in 0..n {
                    gh[k] += gyt * p.h_c[k] * xt;
                    ghc[c * n + k] += gyt * hcur[k] * xt;
                    gxt += gyt * p.h_c[k] * hcur[k];
                }
                if self.injection.is_some_and(|inj| inj.hits(t + 1)) {
                    gh[0] = 0.0;
                }
                // h_t = a ⊙ h_{t−1} + Δ_t H_b x_t²
                let mut gdt = 0.0;
                for k in 0..n {
                    let gk = gh[k];
                    let gak = gk * hprev[k];
                    gdt += gak * a[k] * p.a_tilde[k] + gk * p.h_b[k] * xt * xt;
                    ga[c * n + k] += gak * a[k] * dt;
                    ghb[c * n + k] += gk * dt * xt * xt;
                    gxt += gk * dt * p.h_b[k] * 2.0 * xt;
                    gh[k] = gk * a[k];
                }
                // Δ_t = softplus(x_t·gain + δ)
                let ds = gdt * sigmoid(xt * gain + p.delta);
                gxt += ds * gain;
                g_gain += ds * xt;
                gdelta[c] += ds;
                gx[c * len + t] += gxt;
            }
            for j in 0..o {
                gg[c * o + j] += g_gain * p.h_d[j];
                ghd[c * o + j] += g_gain * p.g[j];
            }
        }
        let t = |v: Vec<f64>, like: &Tensor| Some(Tensor::from_parts(like.shape().to_vec(), v));
        vec![
            t(gx, inputs[0]),
            t(ga, inputs[1]),
            t(gg, inputs[2]),
            t(ghd, inputs[3]),
            t(gdelta, inputs[4]),
            t(ghb, inputs[5]),
            t(ghc, inputs[6]),
        ]
    }
}

/// Runs one scan direction over every row of `x` (`C×T`), each row with its
/// own parameters. Rows are already in scan order.
pub fn selective_scan_graph(
    g: &mut Graph,
    x: Var,
    p: &ScanParamVars,
    injection: Option<Injection>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("scan input must be C×T, got {shape:?}")));
    }
    let (cn, len) = (shape[0], shape[1]);
    let n = g.value(p.a_tilde).numel() / cn;
    let o = g.value(p.g).numel() / cn;
    let expect = [
        (p.a_tilde, cn * n),
        (p.g, cn * o),
        (p.h_d, cn * o),
        (p.delta, cn),
        (p.h_b, cn * n),
        (p.h_c, cn * n),
    ];
    if n == 0 || o == 0 || expect.iter().any(|&(v, k)| g.value(v).numel() != k) {
        return Err(Error::Dimension("scan parameter shapes disagree with channel count".into()));
    }
    let params: Vec<&Tensor> = [p.a_tilde, p.g, p.h_d, p.delta, p.h_b, p.h_c]
        .iter()
        .map(|&v| g.value(v))
        .collect();
    let xd = g.value(x).data();
    let keep = g.grad_enabled();
    let mut out = vec![0.0; cn * len];
    let mut traces = Vec::with_capacity(if keep { cn } else { 0 });
    let h0 = vec![0.0; n];
    for c in 0..cn {
        let dp = direction_params(&params, c, n, o);
        let xs = &xd[c * len..(c + 1) * len];
        let sp = generate_step_params(&dp, xs);
        let (y, states) = scan_states(&sp, xs, &h0, |t, h| {
            if let Some(inj) = injection {
                inj.apply(t, h)
            }
        })?;
        out[c * len..(c + 1) * len].copy_from_slice(&y);
        if keep {
            traces.push(ChannelTrace {
                delta: sp.delta,
                a: sp.a,
                states,
            });
        }
    }
    let op = SelectiveScanOp {
        channels: cn,
        len,
        n,
        o,
        injection,
        traces,
    };
    let value = Tensor::from_parts(vec![cn, len], out);
    Ok(g.custom(
        &[x, p.a_tilde, p.g, p.h_d, p.delta, p.h_b, p.h_c],
        value,
        Box::new(op),
    ))
}

/// Row-wise reversal index for a `rows × len` matrix.
pub fn reversal_index(rows: usize, len: usize) -> Arc<Vec<usize>> {
    Arc::new(
        (0..rows)
            .flat_map(|r| (0..len).rev().map(move |t| r * len + t))
            .collect(),
    )
}

/// [`dual_gssm_csi`] over every row of `z` (`C×T`) inside a graph.
pub fn dual_gssm_graph(
    g: &mut Graph,
    z: Var,
    forward: &ScanParamVars,
    backward: &ScanParamVars,
    csi: &CsiRestConfig,
    snr_db: f64,
) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let rev = reversal_index(shape[0], shape[1]);
    let inj = csi.injection(snr_db);
    let y1 = selective_scan_graph(g, z, forward, inj)?;
    let x2 = g.gather(z, rev.clone(), &shape)?;
    let y2 = selective_scan_graph(g, x2, backward, inj)?;
    let y2 = g.gather(y2, rev, &shape)?;
    g.add(y1, y2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::ssm::{ssm_matrix_oracle, ssm_scan};
    use crate::tensor::Rng;

    fn module(scheme: ScanScheme, n: usize, rng: &mut Rng) -> GssmModule {
        GssmModule {
            params: SsmDirectionParams::init(n, 2, rng),
            scheme,
        }
    }

    #[test]
    fn exchange_and_recover_basics() {
        let z = [1.0, 2.0, 3.0];
        assert_eq!(scan_exchange(&z, &ScanScheme::reversal(3)).unwrap(), vec![3.0, 2.0, 1.0]);
        assert_eq!(scan_exchange(&z, &ScanScheme::identity(3)).unwrap(), z.to_vec());
        let two = ScanScheme::general(DMatrix::identity(2, 2) * 2.0).unwrap();
        assert_eq!(scan_exchange(&[1.0, 1.0], &two).unwrap(), vec![2.0, 2.0]);
        assert_eq!(scan_recover(&[1.0, 1.0], &two).unwrap(), vec![0.5, 0.5]);
        let rev = ScanScheme::reversal(3);
        let back = scan_recover(&scan_exchange(&z, &rev).unwrap(), &rev).unwrap();
        assert_eq!(back, z.to_vec());
        assert!(scan_exchange(&z, &ScanScheme::identity(4)).is_err());
    }

    #[test]
    fn reversal_matrix_matches_anti_diagonal() {
        let r = ScanScheme::reversal(4).matrix();
        for i in 0..4 {
            for j in 0..4 {
                let want = if (i + 1) + (j + 1) == 4 + 1 { 1.0 } else { 0.0 };
                assert_eq!(r[(i, j)], want);
            }
        }
    }

    #[test]
    fn rejects_non_permutations_and_singular() {
        assert!(ScanScheme::permutation(vec![0, 0, 1]).is_err());
        assert!(ScanScheme::general(DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn identity_scheme_is_plain_scan() {
        let mut rng = Rng::new(2);
        let m = module(ScanScheme::identity(6), 3, &mut rng);
        let z: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let sp = generate_step_params(&m.params, &z);
        let (y, _) = ssm_scan(&sp, &z, &HiddenState::zeros(3)).unwrap();
        assert_eq!(gssm_apply(&m, &z, &[0.0; 3]).unwrap(), y);
    }

    #[test]
    fn reversal_scheme_conjugates_scan() {
        let mut rng = Rng::new(3);
        let m = module(ScanScheme::reversal(2), 1, &mut rng);
        let z = [0.7, -1.3];
        let rz = [z[1], z[0]];
        let sp = generate_step_params(&m.params, &rz);
        let (y, _) = ssm_scan(&sp, &rz, &HiddenState::zeros(1)).unwrap();
        let got = gssm_apply(&m, &z, &[0.0]).unwrap();
        assert_eq!(got, vec![y[1], y[0]]);
        let u = ssm_matrix_oracle(&sp).unwrap();
        let want = [u.at2(1, 1) * z[0] + u.at2(1, 0) * z[1], u.at2(0, 0) * z[1]];
        assert!((got[0] - want[0]).abs() < 1e-14 && (got[1] - want[1]).abs() < 1e-14);
    }

    #[test]
    fn zero_input_with_unit_state_matches_oracle_column() {
        let mut rng = Rng::new(4);
        for scheme in [ScanScheme::identity(5), ScanScheme::reversal(5)] {
            let m = module(scheme.clone(), 3, &mut rng);
            let z = [0.0; 5];
            let got = gssm_apply(&m, &z, &[1.0, 0.0, 0.0]).unwrap();
            let sp = m.step_params(&z).unwrap();
            let v = crate::ssm::zero_input_oracle(&sp).unwrap();
            let col: Vec<f64> = v.iter().map(|r| r[0]).collect();
            assert_eq!(got, scan_recover(&col, &scheme).unwrap());
        }
    }

    #[test]
    fn dual_trivial_cases() {
        let mut rng = Rng::new(6);
        let m1 = module(ScanScheme::identity(4), 3, &mut rng);
        let m2 = module(ScanScheme::reversal(4), 3, &mut rng);
        let u = dual_gssm_csi(&m1, &m2, &[0.0; 4], &CsiRestConfig::disabled(), 10.0).unwrap();
        assert_eq!(u, vec![0.0; 4]);

        let s1 = module(ScanScheme::identity(1), 2, &mut rng);
        let s2 = module(ScanScheme::reversal(1), 2, &mut rng);
        let u = dual_gssm_csi(&s1, &s2, &[0.4], &CsiRestConfig::disabled(), 0.0).unwrap();
        let a = gssm_apply(&s1, &[0.4], &[0.0; 2]).unwrap()[0];
        let b = gssm_apply(&s2, &[0.4], &[0.0; 2]).unwrap()[0];
        assert_eq!(u, vec![a + b]);
    }

    /// Fully unrolled recurrence with explicit assignments, for T = 4, l_s = 2.
    fn unrolled(m: &GssmModule, z: &[f64], snr: f64) -> Vec<f64> {
        let x = scan_exchange(z, &m.scheme).unwrap();
        let sp = generate_step_params(&m.params, &x);
        let n = sp.n;
        let mut h = vec![0.0; n];
        h[0] = snr;
        let mut y = Vec::new();
        for t in 0..4 {
            for k in 0..n {
                h[k] = sp.a_t(t)[k] * h[k] + sp.b_t(t)[k] * x[t];
            }
            if t == 1 || t == 3 {
                h[0] = snr;
            }
            y.push((0..n).map(|k| sp.c_t(t)[k] * h[k]).sum::<f64>());
        }
        scan_recover(&y, &m.scheme).unwrap()
    }

    #[test]
    fn csi_refresh_matches_unrolled_recurrence() {
        let mut rng = Rng::new(7);
        let m1 = module(ScanScheme::identity(4), 3, &mut rng);
        let m2 = module(ScanScheme::reversal(4), 3, &mut rng);
        let csi = CsiRestConfig {
            enabled: true,
            interval: 2,
            snr_scale: 1.0,
        };
        for z in [vec![0.0; 4], vec![0.3, -0.5, 1.1, 0.9]] {
            let u = dual_gssm_csi(&m1, &m2, &z, &csi, 10.0).unwrap();
            let (a, b) = (unrolled(&m1, &z, 10.0), unrolled(&m2, &z, 10.0));
            for t in 0..4 {
                assert!((u[t] - (a[t] + b[t])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disabled_csi_is_bit_identical_to_plain() {
        let mut rng = Rng::new(8);
        let m1 = module(ScanScheme::identity(7), 4, &mut rng);
        let m2 = module(ScanScheme::reversal(7), 4, &mut rng);
        let z: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let u = dual_gssm_csi(&m1, &m2, &z, &CsiRestConfig::disabled(), 13.0).unwrap();
        let a = gssm_apply(&m1, &z, &[0.0; 4]).unwrap();
        let b = gssm_apply(&m2, &z, &[0.0; 4]).unwrap();
        let plain: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(u, plain);
    }

    fn scan_vars(g: &mut Graph, dirs: &[SsmDirectionParams]) -> ScanParamVars {
        let cat = |f: &dyn Fn(&SsmDirectionParams) -> Vec<f64>| dirs.iter().flat_map(f).collect::<Vec<f64>>();
        let c = dirs.len();
        let n = dirs[0].state_dim();
        let o = dirs[0].gen_dim();
        let mut leaf = |v: Vec<f64>, s: &[usize]| g.param(Tensor::new(s, v).unwrap());
        ScanParamVars {
            a_tilde: leaf(cat(&|p| p.a_tilde.clone()), &[c, n]),
            g: leaf(cat(&|p| p.g.clone()), &[c, o]),
            h_d: leaf(cat(&|p| p.h_d.clone()), &[c, o]),
            delta: leaf(cat(&|p| vec![p.delta]), &[c]),
            h_b: leaf(cat(&|p| p.h_b.clone()), &[c, n]),
            h_c: leaf(cat(&|p| p.h_c.clone()), &[c, n]),
        }
    }

    #[test]
    fn graph_path_matches_reference_path() {
        let mut rng = Rng::new(9);
        let (c, len, n) = (3, 10, 4);
        let fw: Vec<_> = (0..c).map(|_| SsmDirectionParams::init(n, 2, &mut rng)).collect();
        let bw: Vec<_> = (0..c).map(|_| SsmDirectionParams::init(n, 2, &mut rng)).collect();
        let z = rng.normal_tensor(&[c, len], 1.0);
        let csi = CsiRestConfig {
            enabled: true,
            interval: 3,
            snr_scale: 1.0,
        };
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let pf = scan_vars(&mut g, &fw);
        let pb = scan_vars(&mut g, &bw);
        let u = dual_gssm_graph(&mut g, zv, &pf, &pb, &csi, 7.0).unwrap();
        for ch in 0..c {
            let m1 = GssmModule {
                params: fw[ch].clone(),
                scheme: ScanScheme::identity(len),
            };
            let m2 = GssmModule {
                params: bw[ch].clone(),
                scheme: ScanScheme::reversal(len),
            };
            let row = &z.data()[ch * len..(ch + 1) * len];
            let want = dual_gssm_csi(&m1, &m2, row, &csi, 7.0).unwrap();
            assert_eq!(&g.value(u).data()[ch * len..(ch + 1) * len], &want[..]);
        }
    }

    #[test]
    fn fused_scan_gradients_match_finite_differences() {
        let mut rng = Rng::new(10);
        let (c, len, n) = (2, 7, 3);
        let fw: Vec<_> = (0..c).map(|_| SsmDirectionParams::init(n, 2, &mut rng)).collect();
        let bw: Vec<_> = (0..c).map(|_| SsmDirectionParams::init(n, 2, &mut rng)).collect();
        let weights = rng.uniform_tensor(&[c, len], 0.5, 1.5);
        for csi in [CsiRestConfig::disabled(), CsiRestConfig { enabled: true, interval: 3, snr_scale: 0.1 }] {
            let z = rng.normal_tensor(&[c, len], 1.0);
            let err = grad_check(
                |g, zv| {
                    let pf = scan_vars(g, &fw);
                    let pb = scan_vars(g, &bw);
                    let u = dual_gssm_graph(g, zv, &pf, &pb, &csi, 5.0)?;
                    let w = g.constant(weights.clone());
                    let p = g.mul(u, w)?;
                    Ok(g.sum(p))
                },
                &z,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "input grad {err}");
        }
    }

    #[test]
    fn fused_scan_parameter_gradients() {
        let mut rng = Rng::new(11);
        let (c, len, n) = (2, 6, 3);
        let fw: Vec<_> = (0..c).map(|_| SsmDirectionParams::init(n, 2, &mut rng)).collect();
        let z = rng.normal_tensor(&[c, len], 1.0);
        let weights = rng.uniform_tensor(&[c, len], 0.5, 1.5);
        let inj = Some(Injection { value: 0.8, interval: 4 });
        // perturb each parameter tensor in turn through a flat vector
        for which in 0..6 {
            let mut g0 = Graph::new();
            let pv = scan_vars(&mut g0, &fw);
            let all = [pv.a_tilde, pv.g, pv.h_d, pv.delta, pv.h_b, pv.h_c];
            let x0 = g0.value(all[which]).clone();
            let err = grad_check(
                |g, xv| {
                    let mut p = scan_vars(g, &fw);
                    let slot = match which {
                        0 => &mut p.a_tilde,
                        1 => &mut p.g,
                        2 => &mut p.h_d,
                        3 => &mut p.delta,
                        4 => &mut p.h_b,
                        _ => &mut p.h_c,
                    };
                    *slot = xv;
                    let zv = g.constant(z.clone());
                    let y = selective_scan_graph(g, zv, &p, inj)?;
                    let w = g.constant(weights.clone());
                    let m = g.mul(y, w)?;
                    Ok(g.sum(m))
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "param {which}: {err}");
        }
    }
}
