//! Shared feature encoder: two affine layers with a ReLU between, followed
//! by row normalization so that every embedding lies on the unit sphere.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2, Var};

const STREAM_ENCODER: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// Uniform on `[-a, a]` with `a = sqrt(6 / fan_in)`, i.e. standard
/// deviation `sqrt(2 / fan_in)`.
fn he_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor2 {
    let a = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor2::new(fan_in, fan_out, data).expect("sized by construction")
}

impl EncoderParams {
    pub fn init(seed: u64, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "encoder dims must be positive, got {d_in}/{hidden}/{d_out}"
            )));
        }
        let mut rng = rng_for(seed, STREAM_ENCODER);
        Ok(Self {
            w1: he_uniform(&mut rng, d_in, hidden),
            b1: Tensor2::zeros(1, hidden),
            w2: he_uniform(&mut rng, hidden, d_out),
            b2: Tensor2::zeros(1, d_out),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape) -> EncoderVars<'t> {
        EncoderVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    /// Forward pass without recording gradients.
    pub fn encode(&self, x: &Tensor2) -> Result<Tensor2> {
        let tape = Tape::new();
        let vars = EncoderVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        };
        Ok(vars.forward(tape.constant(x.clone()))?.value())
    }

    pub fn tensors(&self) -> [&Tensor2; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

impl<'t> EncoderVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let (_, d_in) = x.shape();
        let expected = self.w1.shape().0;
        if d_in != expected {
            return Err(Error::shape(
                "encode",
                format!("features have dim {d_in}, encoder expects {expected}"),
            ));
        }
        let h = x.matmul(self.w1)?.add_row(self.b1)?.relu();
        h.matmul(self.w2)?.add_row(self.b2)?.l2_normalize_rows()
    }

    pub fn all(&self) -> [Var<'t>; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}
