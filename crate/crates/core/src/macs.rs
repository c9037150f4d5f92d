//! Analytic multiply-accumulate and parameter accounting.
//!
//! Convention: one multiply plus add is one MAC. An FC layer costs
//! `tokens·in·out`, a depthwise `k×k` convolution `out_elems·k²`, and one
//! scan direction `T·(3N + O + 1)` per channel (gate, input, and readout
//! products plus step-size generation). Norms, activations, residual adds,
//! and CSI-ReST assignments are free.

use crate::codec::ModelConfig;
use crate::error::Result;
use crate::vssm::BlockConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    /// `(module, macs, params)` in forward order.
    pub modules: Vec<(String, u64, u64)>,
}

impl MacCounter {
    fn push(&mut self, name: impl Into<String>, macs: u64, params: u64) {
        self.modules.push((name.into(), macs, params));
    }

    pub fn total_macs(&self) -> u64 {
        self.modules.iter().map(|m| m.1).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.modules.iter().map(|m| m.2).sum()
    }
}

fn fc(tokens: u64, fan_in: u64, fan_out: u64) -> (u64, u64) {
    (tokens * fan_in * fan_out, fan_in * fan_out + fan_out)
}

fn norm_params(d: u64) -> u64 {
    2 * d
}

/// MACs per token-sequence scan step and parameters of both directions.
pub fn scan_cost(len: u64, n: u64, o: u64) -> u64 {
    len * (3 * n + o + 1)
}

fn block(tokens: u64, d: u64, b: &BlockConfig) -> (u64, u64) {
    let ed = b.expand as u64 * d;
    let (n, o, k2) = (b.state_dim as u64, b.gen_dim as u64, (b.conv_kernel * b.conv_kernel) as u64);
    let rho = b.mlp_ratio as u64;
    let (in_m, in_p) = fc(tokens, d, ed);
    let (gate_m, gate_p) = fc(tokens, d, ed);
    let (out_m, out_p) = fc(tokens, ed, d);
    let (fc1_m, fc1_p) = fc(tokens, d, rho * d);
    let (fc2_m, fc2_p) = fc(tokens, rho * d, d);
    let conv_m = tokens * ed * k2;
    let conv_p = ed * k2 + ed;
    let scan_m = 2 * ed * scan_cost(tokens, n, o);
    // per direction: Ã, H_b, H_c (N each), G, H_d (O each), δ
    let scan_p = 2 * ed * (3 * n + 2 * o + 1);
    let d_p = 2 * ed;
    let macs = in_m + gate_m + out_m + fc1_m + fc2_m + conv_m + scan_m;
    let params = in_p + gate_p + out_p + fc1_p + fc2_p + conv_p + scan_p + d_p + 2 * norm_params(d);
    (macs, params)
}

/// Per-module totals for one image through encoder and decoder. The CSI
/// setting in `cfg` is deliberately not consulted: injection is assignment
/// only.
pub fn count_macs(cfg: &ModelConfig) -> Result<MacCounter> {
    cfg.validate()?;
    let mut c = MacCounter::default();
    let grids = cfg.grids();
    let tokens: Vec<u64> = grids.iter().map(|&(h, w)| (h * w) as u64).collect();
    let widths: Vec<u64> = cfg.widths.iter().map(|&w| w as u64).collect();
    let r = cfg.embed_downsample as u64;
    let l = widths.len();

    let (m, p) = fc(tokens[0], 3 * r * r, widths[0]);
    c.push("enc.embed", m, p + norm_params(widths[0]));
    for k in 0..l {
        if k > 0 {
            let prev = widths[k - 1];
            let fan_in = if cfg.downsample[k - 1] { 4 * prev } else { prev };
            let (m, p) = fc(tokens[k], fan_in, widths[k]);
            c.push(format!("enc.stage{}.transition", k + 1), m, p + norm_params(fan_in));
        }
        for b in 0..cfg.blocks[k] {
            let (m, p) = block(tokens[k], widths[k], &cfg.block_config(k));
            c.push(format!("enc.stage{}.block{}", k + 1, b + 1), m, p);
        }
    }
    let c_out = cfg.c_out() as u64;
    let (m, p) = fc(tokens[l - 1], widths[l - 1], c_out);
    c.push("enc.compress", m, p);
    let (m, p) = fc(tokens[l - 1], c_out, widths[l - 1]);
    c.push("dec.expand", m, p);
    for k in (0..l).rev() {
        for b in 0..cfg.blocks[k] {
            let (m, p) = block(tokens[k], widths[k], &cfg.block_config(k));
            c.push(format!("dec.stage{}.block{}", k + 1, b + 1), m, p);
        }
        let out = if k == 0 {
            3 * r * r
        } else if cfg.downsample[k - 1] {
            4 * widths[k - 1]
        } else {
            widths[k - 1]
        };
        let (m, p) = fc(tokens[k], widths[k], out);
        c.push(format!("dec.stage{}.divide", k + 1), m, p + norm_params(widths[k]));
    }
    Ok(c)
}
