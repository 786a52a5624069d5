//! Parameterised layers built on the autograd graph.

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use crate::autograd::{Graph, Var};
use crate::error::{Result, StasError};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.add(format!("{name}.w"), &[outputs, inputs], Init::Uniform { fan_in: inputs }, rng);
        let b = store.add(format!("{name}.b"), &[outputs], Init::Zeros, rng);
        Self { w, b, inputs, outputs }
    }

    /// Same as [`Linear::new`] with zeroed weights.
    pub fn zeroed(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.add(format!("{name}.w"), &[outputs, inputs], Init::Zeros, rng);
        let b = store.add(format!("{name}.b"), &[outputs], Init::Zeros, rng);
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = store.add(format!("{name}.w"), &[c_out, c_in, k, k], Init::HeUniform { fan_in }, rng);
        let b = store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Self { w, b, k, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad_t: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kt: usize,
        k: usize,
        pad_t: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * kt * k * k;
        let w = store.add(
            format!("{name}.w"),
            &[c_out, c_in, kt, k, k],
            Init::HeUniform { fan_in },
            rng,
        );
        let b = store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Self { w, b, pad_t, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv3d(x, w, b, self.pad_t, self.pad)
    }
}

/// Deformable convolution: a regular `k×k` kernel whose sampling grid is
/// displaced by offsets predicted from the input itself.
///
/// The offset predictor starts at zero, so a fresh layer behaves exactly like
/// a standard convolution. With `deformable = false` no offset predictor is
/// built and the layer is a plain convolution with the same kernel.
#[derive(Clone, Debug)]
pub struct DeformConv2d {
    pub offset: Option<Conv2d>,
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub pad: usize,
    pub gamma: f64,
}

impl DeformConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        gamma: f64,
        deformable: bool,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(StasError::Config(format!(
                "deformable kernel size must be odd, got {k}"
            )));
        }
        let pad = k / 2;
        let offset = deformable.then(|| {
            let w = store.add(format!("{name}.offset.w"), &[2 * k * k, c_in, k, k], Init::Zeros, rng);
            let b = store.add(format!("{name}.offset.b"), &[2 * k * k], Init::Zeros, rng);
            Conv2d { w, b, k, pad }
        });
        let fan_in = c_in * k * k;
        let w = store.add(format!("{name}.w"), &[c_out, c_in, k, k], Init::HeUniform { fan_in }, rng);
        let b = store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Ok(Self {
            offset,
            w,
            b,
            k,
            pad,
            gamma,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        match &self.offset {
            Some(pred) => {
                let off = pred.forward(g, store, x);
                g.deform_conv2d(x, off, w, b, self.pad, self.gamma)
            }
            None => g.conv2d(x, w, b, self.pad),
        }
    }
}

/// Hidden and cell maps of a ConvLSTM layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub h: Var,
    pub c: Var,
}

impl ConvLstmState {
    pub fn zeros(g: &mut Graph, hidden: usize, h: usize, w: usize) -> Self {
        let z = crate::tensor::Tensor::zeros(&[hidden, h, w]);
        Self {
            h: g.constant(z.clone()),
            c: g.constant(z),
        }
    }
}

/// Convolutional LSTM cell: input, forget and output gates and the
/// candidate update are all `3×3` convolutions over `[x, h]`.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub input_channels: usize,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input_channels: usize, hidden: usize) -> Self {
        let gates = Conv2d::new(store, rng, &format!("{name}.gates"), input_channels + hidden, 4 * hidden, 3, 1);
        // gate order (i, f, o, g); forget bias starts at 1
        let bias = store.get_mut(gates.b).data_mut();
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            gates,
            input_channels,
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, state: ConvLstmState) -> Result<ConvLstmState> {
        let xs = g.shape(x).to_vec();
        let hs = g.shape(state.h).to_vec();
        if xs.len() != 3 || xs[0] != self.input_channels || xs[1..] != hs[1..] {
            return Err(StasError::Shape(format!(
                "ConvLSTM input {:?} incompatible with {} input channels and state {:?}",
                xs, self.input_channels, hs
            )));
        }
        let xh = g.concat(&[x, state.h]);
        let z = self.gates.forward(g, store, xh);
        let n = self.hidden;
        let zi = g.slice(z, 0, n);
        let zf = g.slice(z, n, n);
        let zo = g.slice(z, 2 * n, n);
        let zg = g.slice(z, 3 * n, n);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let o = g.sigmoid(zo);
        let cand = g.tanh(zg);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        Ok(ConvLstmState { h, c })
    }
}

/// Stack of ConvLSTM layers; each layer feeds its hidden map to the next.
#[derive(Clone, Debug)]
pub struct ConvLstmStack {
    pub cells: Vec<ConvLstmCell>,
}

impl ConvLstmStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input_channels: usize, hidden: usize, depth: usize) -> Self {
        let cells = (0..depth)
            .map(|l| {
                let c_in = if l == 0 { input_channels } else { hidden };
                ConvLstmCell::new(store, rng, &format!("{name}.l{l}"), c_in, hidden)
            })
            .collect();
        Self { cells }
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    /// Consume `frames` oldest to newest from zero state; returns the final
    /// hidden map of the top layer.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, frames: &[Var]) -> Result<Var> {
        let Some(&first) = frames.first() else {
            return Err(StasError::Empty("ConvLSTM sequence".into()));
        };
        let s = g.shape(first).to_vec();
        let mut states: Vec<ConvLstmState> = self
            .cells
            .iter()
            .map(|c| ConvLstmState::zeros(g, c.hidden, s[1], s[2]))
            .collect();
        for &x in frames {
            let mut input = x;
            for (cell, state) in self.cells.iter().zip(states.iter_mut()) {
                *state = cell.step(g, store, input, *state)?;
                input = state.h;
            }
        }
        Ok(states.last().expect("at least one layer").h)
    }
}
