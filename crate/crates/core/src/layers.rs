//! Building blocks shared by the codec, the discriminators and the ORP head.

use egic_tensor::{Binding, Conv2d, Norm, ParamStore, Var};
use rand::Rng;

/// Negative slope of every leaky ReLU in the crate.
pub const LRELU_SLOPE: f64 = 0.2;

pub fn lrelu(x: Var<'_>) -> Var<'_> {
    x.leaky_relu(LRELU_SLOPE)
}

/// `x + conv2(lrelu(conv1(x)))` with 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize, hidden: usize, norm: Norm) -> Self {
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), channels, hidden, 3).norm(norm),
            conv2: Conv2d::new(format!("{name}.conv2"), hidden, channels, 3).norm(norm),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let h = lrelu(self.conv1.forward(bind, x));
        x + self.conv2.forward(bind, h)
    }
}
