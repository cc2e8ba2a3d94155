//! Pooling transformer block: a normalized 3×3 average-pool token mixer and a
//! normalized two-layer 1×1-conv MLP, each wrapped in a residual connection.

use dpte_autograd::{Binding, Float, ParamStore, Var};

use crate::error::{param_err, Result};
use crate::layers::{check_channels, Activation, BatchNorm, Conv2d, ParamBuilder};

pub const DEFAULT_MLP_RATIO: usize = 4;

#[derive(Clone, Debug)]
pub struct Ptb {
    pub channels: usize,
    pub mlp_ratio: usize,
    pub norm1: BatchNorm,
    pub norm2: BatchNorm,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl Ptb {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, name: &str, channels: usize, mlp_ratio: usize) -> Result<Self> {
        if channels == 0 || mlp_ratio == 0 {
            return param_err(format!("block needs positive channels and ratio, got {channels} and {mlp_ratio}"));
        }
        let hidden = channels * mlp_ratio;
        Ok(b.scoped(name, |b| Self {
            channels,
            mlp_ratio,
            norm1: BatchNorm::new(b, "norm1", channels),
            norm2: BatchNorm::new(b, "norm2", channels),
            fc1: Conv2d::new(b, "fc1", channels, hidden, 1),
            fc2: Conv2d::new(b, "fc2", hidden, channels, 1),
        }))
    }

    /// Token-mixing half: `x + avgpool3(norm1(x))`.
    pub fn mix_tokens<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("pooling block", x, self.channels)?;
        Ok(x.add(&self.norm1.forward(b, x)?.avg_pool_same(3)))
    }

    /// Channel-MLP half: `y + fc2(swish(fc1(norm2(y))))`.
    pub fn mix_channels<T: Float>(&self, b: &Binding<T>, y: &Var<T>) -> Result<Var<T>> {
        let h = self.fc1.forward(b, &self.norm2.forward(b, y)?)?;
        let h = Activation::Swish.apply(&h);
        Ok(y.add(&self.fc2.forward(b, &h)?))
    }

    pub fn forward<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.mix_tokens(b, x)?;
        self.mix_channels(b, &y)
    }

    /// Learnable scalars: two norms plus both convs with biases.
    pub fn params(&self) -> usize {
        self.norm1.params() + self.norm2.params() + self.fc1.params() + self.fc2.params()
    }

    /// MACs of the two 1×1 convs on an `h×w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        2 * (self.channels * self.channels * self.mlp_ratio * h * w) as u64
    }
}

/// A standalone block in its own parameter store.
pub fn ptb_init<T: Float>(channels: usize, mlp_ratio: usize, seed: u64) -> Result<(Ptb, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let block = Ptb::new(&mut ParamBuilder::new(&mut store, seed), "ptb", channels, mlp_ratio)?;
    Ok((block, store))
}
