//! Selective state-space operator for one scalar sequence.
//!
//! Parameters are generated from the input itself:
//!
//! ```text
//! Δ_t = softplus(x_t·G·H_d + δ)
//! A_t = exp(Δ_t·Ã)        (Ã diagonal, so A_t is a diagonal gate)
//! B_t = Δ_t·H_b·x_t
//! C_t = (H_c·x_t)ᵀ
//! h_t = A_t h_{t−1} + B_t x_t,   y_t = C_t h_t
//! ```
//!
//! [`ssm_matrix_oracle`] and [`zero_input_oracle`] build the same map as
//! explicit matrices by brute force, independently of the recurrence.

use crate::autodiff::softplus;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Largest sequence length the brute-force oracles accept.
pub const ORACLE_MAX_T: usize = 512;

/// Learnable generators of the per-step parameters for one scan direction
/// of one feature channel. `a_tilde` holds the diagonal of Ã.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmDirectionParams {
    pub a_tilde: Vec<f64>,
    pub g: Vec<f64>,
    pub h_d: Vec<f64>,
    pub delta: f64,
    pub h_b: Vec<f64>,
    pub h_c: Vec<f64>,
}

impl SsmDirectionParams {
    /// Ã_nn = −n, softplus(δ) log-uniform in [1e−3, 1e−1], projections
    /// uniform in ±1/√fan_in.
    pub fn init(state_dim: usize, gen_dim: usize, rng: &mut Rng) -> Self {
        let a_tilde = (1..=state_dim).map(|n| -(n as f64)).collect();
        let g = (0..gen_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bound = 1.0 / (gen_dim as f64).sqrt();
        let h_d = (0..gen_dim).map(|_| rng.uniform(-bound, bound)).collect();
        let dt = (rng.uniform(1e-3f64.ln(), 1e-1f64.ln())).exp();
        let delta = dt.exp_m1().ln();
        let h_b = (0..state_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let h_c = (0..state_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Self {
            a_tilde,
            g,
            h_d,
            delta,
            h_b,
            h_c,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a_tilde.len()
    }

    pub fn gen_dim(&self) -> usize {
        self.g.len()
    }

    /// The scalar G·H_d.
    pub fn gate_gain(&self) -> f64 {
        self.g.iter().zip(&self.h_d).map(|(a, b)| a * b).sum()
    }
}

/// Per-step parameters for a sequence of length `len` with state size `n`.
/// `a` stores only the diagonal of each A_t; `b` and `c` are B_t and C_tᵀ.
/// All three are row-major `len × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepParams {
    pub len: usize,
    pub n: usize,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl StepParams {
    pub fn a_t(&self, t: usize) -> &[f64] {
        &self.a[t * self.n..(t + 1) * self.n]
    }
    pub fn b_t(&self, t: usize) -> &[f64] {
        &self.b[t * self.n..(t + 1) * self.n]
    }
    pub fn c_t(&self, t: usize) -> &[f64] {
        &self.c[t * self.n..(t + 1) * self.n]
    }

    /// Step parameters given directly (used by oracle tests).
    pub fn from_rows(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>>) -> Result<Self> {
        let len = a.len();
        let n = a.first().map_or(0, |r| r.len());
        if len == 0 || n == 0 {
            return Err(Error::Dimension("empty step parameters".into()));
        }
        if b.len() != len || c.len() != len || [&a, &b, &c].iter().any(|m| m.iter().any(|r| r.len() != n)) {
            return Err(Error::Dimension("ragged step parameters".into()));
        }
        Ok(Self {
            len,
            n,
            delta: vec![0.0; len],
            a: a.concat(),
            b: b.concat(),
            c: c.concat(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub t: usize,
}

impl HiddenState {
    pub fn zeros(n: usize) -> Self {
        Self { h: vec![0.0; n], t: 0 }
    }

    pub fn from_vec(h: Vec<f64>) -> Self {
        Self { h, t: 0 }
    }
}

pub fn generate_step_params(p: &SsmDirectionParams, x: &[f64]) -> StepParams {
    let n = p.state_dim();
    let gain = p.gate_gain();
    let len = x.len();
    let mut delta = vec![0.0; len];
    let mut a = vec![0.0; len * n];
    let mut b = vec![0.0; len * n];
    let mut c = vec![0.0; len * n];
    for (t, &xt) in x.iter().enumerate() {
        let dt = softplus(xt * gain + p.delta);
        delta[t] = dt;
        for k in 0..n {
            a[t * n + k] = (dt * p.a_tilde[k]).exp();
            b[t * n + k] = dt * p.h_b[k] * xt;
            c[t * n + k] = p.h_c[k] * xt;
        }
    }
    StepParams {
        len,
        n,
        delta,
        a,
        b,
        c,
    }
}

/// Runs the recurrence and returns outputs plus every post-edit state
/// (`(len + 1) × n`, row 0 is h₀).
///
/// `edit(t, h)` runs after h_t is computed and before y_t is read; it is
/// also called with `t = 0` on the initial state.
pub fn scan_states(
    sp: &StepParams,
    x: &[f64],
    h0: &[f64],
    mut edit: impl FnMut(usize, &mut [f64]),
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = sp.n;
    if x.len() != sp.len {
        return Err(Error::Dimension(format!(
            "sequence of length {} against step params of length {}",
            x.len(),
            sp.len
        )));
    }
    if h0.len() != n {
        return Err(Error::Dimension(format!("initial state has {} entries, want {n}", h0.len())));
    }
    let mut states = vec![0.0; (sp.len + 1) * n];
    states[..n].copy_from_slice(h0);
    edit(0, &mut states[..n]);
    let mut y = vec![0.0; sp.len];
    for t in 0..sp.len {
        let (prev, cur) = states.split_at_mut((t + 1) * n);
        let prev = &prev[t * n..];
        let cur = &mut cur[..n];
        let (a, b, c) = (sp.a_t(t), sp.b_t(t), sp.c_t(t));
        for k in 0..n {
            cur[k] = a[k] * prev[k] + b[k] * x[t];
        }
        edit(t + 1, cur);
        y[t] = c.iter().zip(cur.iter()).map(|(ci, hi)| ci * hi).sum();
    }
    SCAN_MACS.with(|m| m.set(m.get() + (3 * n * sp.len) as u64));
    Ok((y, states))
}

thread_local! {
    static SCAN_MACS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Runs `f` and returns the multiply-accumulates the recurrence performed
/// on this thread meanwhile (3N per step: gate, input, and readout).
/// State edits are assignments and add nothing.
pub fn count_scan_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = SCAN_MACS.with(|m| m.get());
    let r = f();
    (r, SCAN_MACS.with(|m| m.get()) - before)
}

/// Plain recurrence from `h0`.
pub fn ssm_scan(sp: &StepParams, x: &[f64], h0: &HiddenState) -> Result<(Vec<f64>, HiddenState)> {
    ssm_scan_with(sp, x, h0, |_, _| {})
}

/// Recurrence with a per-step state edit (see [`scan_states`]).
pub fn ssm_scan_with(
    sp: &StepParams,
    x: &[f64],
    h0: &HiddenState,
    edit: impl FnMut(usize, &mut [f64]),
) -> Result<(Vec<f64>, HiddenState)> {
    if !h0.h.iter().all(|v| v.is_finite()) {
        return Err(Error::Contract("initial state is not finite".into()));
    }
    let (y, states) = scan_states(sp, x, &h0.h, edit)?;
    let n = sp.n;
    let last = states[sp.len * n..].to_vec();
    Ok((y, HiddenState { h: last, t: sp.len }))
}

fn check_oracle_len(len: usize) -> Result<()> {
    if len > ORACLE_MAX_T {
        return Err(Error::OracleLimit {
            len,
            max: ORACLE_MAX_T,
        });
    }
    Ok(())
}

/// M[i,j] = C_i · A_i⋯A_{j+1} · B_j for i ≥ j, zero above the diagonal.
pub fn ssm_matrix_oracle(sp: &StepParams) -> Result<Tensor> {
    check_oracle_len(sp.len)?;
    let (len, n) = (sp.len, sp.n);
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        // running diagonal product A_i A_{i−1} ⋯ A_{j+1}, starting from I at j = i
        let mut prod = vec![1.0; n];
        for j in (0..=i).rev() {
            let (c, b) = (sp.c_t(i), sp.b_t(j));
            m[i * len + j] = (0..n).map(|k| c[k] * prod[k] * b[k]).sum();
            if j > 0 {
                for (p, a) in prod.iter_mut().zip(sp.a_t(j)) {
                    *p *= a;
                }
            }
        }
    }
    Tensor::new(&[len, len], m)
}

/// Rows C_t·A_t⋯A_1, so that the zero-input response is `[V_t · h₀]_t`.
pub fn zero_input_oracle(sp: &StepParams) -> Result<Vec<Vec<f64>>> {
    check_oracle_len(sp.len)?;
    let n = sp.n;
    let mut rows = Vec::with_capacity(sp.len);
    for t in 0..sp.len {
        let c = sp.c_t(t);
        let row = (0..n)
            .map(|k| {
                let prod: f64 = (0..=t).map(|s| sp.a_t(s)[k]).product();
                c[k] * prod
            })
            .collect();
        rows.push(row);
    }
    Ok(rows)
}

/// Applies the oracle pair: `M·x + [V_t·h₀]_t`.
pub fn oracle_response(sp: &StepParams, x: &[f64], h0: &[f64]) -> Result<Vec<f64>> {
    let m = ssm_matrix_oracle(sp)?;
    let v = zero_input_oracle(sp)?;
    let len = sp.len;
    Ok((0..len)
        .map(|i| {
            let zs: f64 = (0..len).map(|j| m.at2(i, j) * x[j]).sum();
            let zi: f64 = v[i].iter().zip(h0).map(|(a, b)| a * b).sum();
            zs + zi
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> StepParams {
        StepParams::from_rows(
            vec![vec![0.5], vec![0.5]],
            vec![vec![1.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_log2_delta_and_zero_bc() {
        let mut p = SsmDirectionParams::init(1, 2, &mut Rng::new(0));
        p.delta = 0.0;
        p.a_tilde = vec![-1.0];
        let sp = generate_step_params(&p, &[0.0]);
        assert!((sp.delta[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sp.a[0] - 0.5).abs() < 1e-15);
        assert_eq!(sp.b[0], 0.0);
        assert_eq!(sp.c[0], 0.0);
    }

    #[test]
    fn hand_recurrence() {
        let sp = toy();
        let (y, _) = ssm_scan(&sp, &[1.0, 0.0], &HiddenState::zeros(1)).unwrap();
        assert_eq!(y, vec![1.0, 0.5]);
        let (y, _) = ssm_scan(&sp, &[0.0, 0.0], &HiddenState::zeros(1)).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        let (y, end) = ssm_scan(&sp, &[0.0, 0.0], &HiddenState::from_vec(vec![1.0])).unwrap();
        assert_eq!(y, vec![0.5, 0.25]);
        assert_eq!(end.t, 2);
    }

    #[test]
    fn hand_matrix_and_zero_input() {
        let sp = toy();
        let m = ssm_matrix_oracle(&sp).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.5, 1.0]);
        let v = zero_input_oracle(&sp).unwrap();
        assert_eq!(v, vec![vec![0.5], vec![0.25]]);
        assert_eq!(oracle_response(&sp, &[0.0, 0.0], &[0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_gates_collapse_to_cb() {
        let mut rng = Rng::new(5);
        let len = 5;
        let b: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let c: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let sp = StepParams::from_rows(vec![vec![1.0, 1.0]; len], b.clone(), c.clone()).unwrap();
        let m = ssm_matrix_oracle(&sp).unwrap();
        for i in 0..len {
            for j in 0..len {
                let want = if i >= j { c[i][0] * b[j][0] + c[i][1] * b[j][1] } else { 0.0 };
                assert!((m.at2(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn oracle_rejects_long_sequences() {
        let len = ORACLE_MAX_T + 1;
        let sp = StepParams::from_rows(vec![vec![0.9]; len], vec![vec![1.0]; len], vec![vec![1.0]; len]).unwrap();
        assert!(matches!(ssm_matrix_oracle(&sp), Err(Error::OracleLimit { .. })));
        assert!(matches!(zero_input_oracle(&sp), Err(Error::OracleLimit { .. })));
    }

    #[test]
    fn forgetting_gate_constant() {
        // a chosen so that a^500 = 6.37e-11
        let a = 0.95413_f64;
        let len = 500;
        let sp = StepParams::from_rows(vec![vec![a]; len], vec![vec![0.0]; len], vec![vec![1.0]; len]).unwrap();
        let v = zero_input_oracle(&sp).unwrap();
        let last = v[len - 1][0];
        assert!((last - a.powi(500)).abs() <= 1e-12 * a.powi(500));
        assert!(last > 6.37e-11 / 2.0 && last < 6.37e-11 * 2.0, "{last}");
        assert!(v.windows(2).all(|w| w[1][0] < w[0][0]));
    }

    #[test]
    fn initialization_is_in_forgetting_regime() {
        let p = SsmDirectionParams::init(16, 4, &mut Rng::new(1));
        assert!(p.a_tilde.iter().all(|&a| a < 0.0));
        let dt = softplus(p.delta);
        assert!((1e-3..=1e-1).contains(&dt), "{dt}");
        let sp = generate_step_params(&p, &[0.3, -1.2, 2.0]);
        assert!(sp.a.iter().all(|&a| a > 0.0 && a < 1.0));
    }
}
