//! Small reusable layers: parameter registration plus tape-level forward.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::{init_conv, init_small, ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// 2-d convolution layer (square odd kernel).
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), init_conv(rng, &[co, ci, k, k]));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[co]));
        Self { w, b, stride, pad, in_channels: ci, out_channels: co, kernel: k }
    }

    /// Near-zero weights, for output heads that should start neutral.
    pub fn new_small(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        scale: f64,
    ) -> Self {
        let w = store.register(format!("{name}.w"), init_small(rng, &[co, ci, k, k], scale));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[co]));
        Self { w, b, stride, pad, in_channels: ci, out_channels: co, kernel: k }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    /// Multiply-accumulate count for an (h, w) output map.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (out_h * out_w * self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
    }
}

/// Depthwise convolution layer, stride 1, shape preserving.
pub struct DwConv2d {
    pub w: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DwConv2d {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, k: usize) -> Self {
        let w = store.register(format!("{name}.w"), init_conv(rng, &[c, 1, k, k]));
        Self { w, channels: c, kernel: k }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let w = tape.param(store, self.w)?;
        tape.dwconv2d(x, w, (self.kernel - 1) / 2)
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.channels * self.kernel * self.kernel) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn conv_layer_counts() {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "t");
        let c = Conv2d::new(&mut store, &mut rng, "c", 4, 8, 1, 1, 0);
        assert_eq!(c.param_count(), 40); // 4*8 + 8
        assert_eq!(store.count_scalars("c."), 40);
        assert_eq!(c.macs(2, 2), 128); // 2*2*4*8
    }
}
