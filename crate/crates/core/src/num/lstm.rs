//! Bidirectional LSTM encoder built from tape primitives.
//!
//! Each direction runs a standard LSTM with gate order (input, forget, cell,
//! output) packed into one 4h-wide affine map. Token states are the
//! concatenation of the forward and backward hidden states, so the output
//! width must be even. The pooled vector is a learned projection of the
//! concatenated final states of both directions.

use crate::error::NumError;
use crate::num::param::{BoundParams, Init, Registry};
use crate::num::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct BiLstm {
    prefix: String,
    input_dim: usize,
    width: usize,
}

pub struct BiLstmOut {
    /// One row per token, width = fwd half + bwd half.
    pub states: Var,
    /// 1 x width projection of the final forward and backward states.
    pub pooled: Var,
}

impl BiLstm {
    pub fn declare(
        reg: &mut Registry,
        prefix: impl Into<String>,
        input_dim: usize,
        width: usize,
    ) -> Result<Self, NumError> {
        if width == 0 || width % 2 != 0 {
            return Err(NumError::OddWidth {
                what: "bilstm width",
                got: width,
            });
        }
        let prefix = prefix.into();
        let h = width / 2;
        for dir in ["fwd", "bwd"] {
            reg.declare(format!("{prefix}/{dir}.w_ih"), &[input_dim, 4 * h], Init::Glorot);
            reg.declare(format!("{prefix}/{dir}.w_hh"), &[h, 4 * h], Init::Glorot);
            reg.declare(format!("{prefix}/{dir}.bias"), &[1, 4 * h], Init::Zeros);
        }
        reg.declare(format!("{prefix}/pool.w"), &[width, width], Init::Glorot);
        reg.declare(format!("{prefix}/pool.b"), &[1, width], Init::Zeros);
        Ok(BiLstm {
            prefix,
            input_dim,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Run over `seq` (m x input_dim, m >= 1).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        seq: Var,
    ) -> Result<BiLstmOut, NumError> {
        let (m, e) = tape.value(seq)?.dims2()?;
        if m == 0 {
            return Err(NumError::Empty { op: "bilstm" });
        }
        if e != self.input_dim {
            return Err(NumError::BadShape {
                op: "bilstm",
                expected: "sequence width equal to the declared input dim",
                got: vec![m, e],
            });
        }
        let h = self.width / 2;

        let mut run = |dir: &str, order: Vec<usize>| -> Result<(Vec<Var>, Var), NumError> {
            let w_ih = params.var(&format!("{}/{dir}.w_ih", self.prefix))?;
            let w_hh = params.var(&format!("{}/{dir}.w_hh", self.prefix))?;
            let bias = params.var(&format!("{}/{dir}.bias", self.prefix))?;
            let mut hstate = tape.leaf(Tensor::zeros(&[1, h]))?;
            let mut cstate = tape.leaf(Tensor::zeros(&[1, h]))?;
            // States indexed by original token position.
            let mut states = vec![hstate; m];
            for &t in &order {
                let x_t = tape.select_rows(seq, &[t])?;
                let xw = tape.matmul(x_t, w_ih)?;
                let hw = tape.matmul(hstate, w_hh)?;
                let lin = tape.add(xw, hw)?;
                let gates = tape.add(lin, bias)?;
                let i_raw = tape.slice_cols(gates, 0, h)?;
                let f_raw = tape.slice_cols(gates, h, 2 * h)?;
                let g_raw = tape.slice_cols(gates, 2 * h, 3 * h)?;
                let o_raw = tape.slice_cols(gates, 3 * h, 4 * h)?;
                let i_g = tape.sigmoid(i_raw)?;
                let f_g = tape.sigmoid(f_raw)?;
                let g_g = tape.tanh(g_raw)?;
                let o_g = tape.sigmoid(o_raw)?;
                let fc = tape.mul(f_g, cstate)?;
                let ig = tape.mul(i_g, g_g)?;
                cstate = tape.add(fc, ig)?;
                let tc = tape.tanh(cstate)?;
                hstate = tape.mul(o_g, tc)?;
                states[t] = hstate;
            }
            Ok((states, hstate))
        };

        let (fwd_states, fwd_final) = run("fwd", (0..m).collect())?;
        let (bwd_states, bwd_final) = run("bwd", (0..m).rev().collect())?;

        let fwd_stack = tape.concat(&fwd_states, 0)?;
        let bwd_stack = tape.concat(&bwd_states, 0)?;
        let states = tape.concat(&[fwd_stack, bwd_stack], 1)?;

        let finals = tape.concat(&[fwd_final, bwd_final], 1)?;
        let pool_w = params.var(&format!("{}/pool.w", self.prefix))?;
        let pool_b = params.var(&format!("{}/pool.b", self.prefix))?;
        let proj = tape.matmul(finals, pool_w)?;
        let pooled = tape.add(proj, pool_b)?;

        Ok(BiLstmOut { states, pooled })
    }
}
