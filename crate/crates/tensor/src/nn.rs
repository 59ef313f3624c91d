//! Named parameter storage and convolution layers.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::array::Array;
use crate::tape::{Gradients, Tape, Var};

/// Parameters keyed by canonical dotted names (`"enc.conv0.w"`).
///
/// Iteration order is the lexicographic order of names, which keeps
/// serialisation and digests independent of insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Parameters whose names start with `prefix`, with the prefix kept.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every parameter of `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Renames parameters by replacing a leading `from` with `to`.
    pub fn with_prefix_replaced(&self, from: &str, to: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    let name = match k.strip_prefix(from) {
                        Some(rest) => format!("{to}{rest}"),
                        None => k.clone(),
                    };
                    (name, v.clone())
                })
                .collect(),
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_structure(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}

impl FromIterator<(String, Array)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Array)>>(iter: I) -> Self {
        Self {
            params: iter.into_iter().collect(),
        }
    }
}

/// Binds a [`ParamStore`] onto a tape, creating one leaf per parameter the
/// first time it is used.
pub struct Binding<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 'p> Binding<'t, 'p> {
    /// Parameters become gradient-receiving leaves.
    pub fn trainable(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Self::new(tape, store, true)
    }

    /// Parameters become constants; no gradient is ever computed for them.
    pub fn frozen(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Self::new(tape, store, false)
    }

    fn new(tape: &'t Tape, store: &'p ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .clone();
        let var = if self.trainable {
            self.tape.var(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_owned(), var);
        var
    }

    /// Gradients for every bound parameter; unused parameters get zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, var)| (name.clone(), grads.get_or_zeros(*var)))
            .collect()
    }
}

/// Kernel reparameterisation applied by a [`Conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    None,
    /// `w = g · v / ‖v‖` per output channel.
    Weight,
    /// `w = W / σ_max(W)` with a few power-iteration steps per call.
    Spectral,
}

/// A 2-D convolution layer whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub norm: Norm,
}

const SPECTRAL_ITERATIONS: usize = 4;

impl Conv2d {
    /// A "same"-padded convolution (for odd kernels and stride 1).
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            norm: Norm::None,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    fn key(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// He-uniform kernel (for leaky-ReLU slope 0.2) and zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let bound = (6.0 / (1.04 * self.fan_in() as f64)).sqrt();
        let kernel = Array::from_fn(self.kernel_shape(), |_| rng.random_range(-bound..bound));
        match self.norm {
            Norm::Weight => {
                let rows = self.out_channels;
                let cols = kernel.len() / rows;
                let gain = Array::from_fn([rows], |r| {
                    kernel.data()[r * cols..(r + 1) * cols]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                });
                store.insert(self.key("v"), kernel);
                store.insert(self.key("g"), gain);
            }
            Norm::None | Norm::Spectral => store.insert(self.key("w"), kernel),
        }
        store.insert(self.key("b"), Array::zeros([self.out_channels]));
    }

    /// Sets every parameter of the layer to zero (the gain too, under weight
    /// normalisation, so the effective kernel is exactly zero).
    pub fn zero(&self, store: &mut ParamStore) {
        for suffix in ["w", "v", "g", "b"] {
            if let Some(p) = store.get_mut(&self.key(suffix)) {
                p.data_mut().fill(0.0);
            }
        }
        if self.norm == Norm::Weight {
            // Keep the direction well defined.
            if let Some(v) = store.get_mut(&self.key("v")) {
                v.data_mut().fill(1.0);
            }
        }
    }

    /// The kernel actually applied to the input.
    pub fn effective_kernel<'t>(&self, bind: &Binding<'t, '_>) -> Var<'t> {
        match self.norm {
            Norm::None => bind.param(&self.key("w")),
            Norm::Weight => Var::weight_norm(bind.param(&self.key("v")), bind.param(&self.key("g"))),
            Norm::Spectral => Var::spectral_norm(bind.param(&self.key("w")), SPECTRAL_ITERATIONS),
        }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let kernel = self.effective_kernel(bind);
        let bias = bind.param(&self.key("b"));
        x.conv2d(kernel, Some(bias), self.stride, self.padding)
    }
}
