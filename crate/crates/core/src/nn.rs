//! Dense layers shared by the intention predictor and the decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};

/// `x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.add_glorot(&format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), &[d_out])?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Mlp2 {
            hidden: Linear::new(store, rng, &format!("{name}.0"), d_in, d_hidden)?,
            out: Linear::new(store, rng, &format!("{name}.1"), d_hidden, d_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }
}
