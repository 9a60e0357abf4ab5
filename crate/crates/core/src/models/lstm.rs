use rand::Rng;

use crate::ndgraph::{GraphError, Tape, Tensor, Var};

/// Single-layer LSTM weights. Gate blocks are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmParams {
            w_input: Tensor::uniform(&[input, 4 * hidden], -bound, bound, rng),
            w_hidden: Tensor::uniform(&[hidden, 4 * hidden], -bound, bound, rng),
            bias: Tensor::uniform(&[4 * hidden], -bound, bound, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn input_size(&self) -> usize {
        self.w_input.shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars<'t> {
    pub w_input: Var<'t>,
    pub w_hidden: Var<'t>,
    pub bias: Var<'t>,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl<'t> LstmVars<'t> {
    pub fn new(w_input: Var<'t>, w_hidden: Var<'t>, bias: Var<'t>) -> Self {
        let hidden = w_hidden.shape()[0];
        LstmVars { w_input, w_hidden, bias, hidden }
    }

    pub fn zero_state(&self, tape: &'t Tape, batch: usize) -> LstmState<'t> {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.hidden])),
            c: tape.constant(Tensor::zeros(&[batch, self.hidden])),
        }
    }

    pub fn step(&self, x: Var<'t>, state: LstmState<'t>) -> Result<LstmState<'t>, GraphError> {
        let h = self.hidden;
        let gates = x
            .matmul(self.w_input)?
            .add(state.h.matmul(self.w_hidden)?)?
            .add_row(self.bias)?;
        let i = gates.slice(1, 0, h)?.sigmoid()?;
        let f = gates.slice(1, h, h)?.sigmoid()?;
        let g = gates.slice(1, 2 * h, h)?.tanh()?;
        let o = gates.slice(1, 3 * h, h)?.sigmoid()?;
        let c = f.mul(state.c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh()?)?;
        Ok(LstmState { h, c })
    }
}
