//! Layer descriptions shared by every network: each knows the parameters it
//! declares and how to run itself on a tape.

use crate::error::Result;
use crate::nn::{Bound, ParamDecl, Tape, Var};

pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// `Some(output_padding)` for a transposed convolution.
    pub transposed: Option<usize>,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
            transposed: None,
        }
    }

    /// Stride-2 transposed convolution that exactly doubles spatial size.
    pub fn up2(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k: 3,
            stride: 2,
            pad: 1,
            transposed: Some(1),
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        let fan_in = self.cin * self.k * self.k;
        let shape = if self.transposed.is_some() {
            vec![self.cin, self.cout, self.k, self.k]
        } else {
            vec![self.cout, self.cin, self.k, self.k]
        };
        out.push(ParamDecl {
            name: self.weight_name(),
            shape,
            fan_in,
        });
        out.push(ParamDecl {
            name: self.bias_name(),
            shape: vec![self.cout],
            fan_in,
        });
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&self.weight_name())?;
        let b = p.var(&self.bias_name())?;
        match self.transposed {
            Some(op) => tape.conv_transpose2d(x, w, b, self.stride, self.pad, op),
            None => tape.conv2d(x, w, b, self.stride, self.pad),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.cin * self.cout * self.k * self.k + self.cout
    }
}

/// `x + conv_b(lrelu(conv_a(x)))` with 3×3 convolutions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            a: Conv::new(format!("{name}.conv_a"), channels, channels, 3, 1, 1),
            b: Conv::new(format!("{name}.conv_b"), channels, channels, 3, 1, 1),
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.a.declare(out);
        self.b.declare(out);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.a.forward(tape, p, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.b.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

pub fn res_stack(prefix: &str, channels: usize, count: usize) -> Vec<ResBlock> {
    (0..count)
        .map(|i| ResBlock::new(&format!("{prefix}.{i}"), channels))
        .collect()
}

pub fn run_stack(blocks: &[ResBlock], tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, p, x)?;
    }
    Ok(x)
}
