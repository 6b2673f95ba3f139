//! Parameter storage, layer primitives and the SGD-with-momentum optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`"img_enc.block0.conv.w"`). A [`Graph`] binds the store to one tape for a
//! single forward pass; requesting the same name twice returns the same leaf,
//! so shared modules (the image encoder reads both the source and the desired
//! image) accumulate gradients correctly.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::kernels::ConvSpec;
use crate::tensor::{Grads, Tape, Var};

/// Named dense parameter arrays. `BTreeMap` keeps iteration order stable,
/// which the determinism contract relies on.
#[derive(Default, Clone)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Gaussian init with the given std.
    pub fn add_normal<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).unwrap();
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng));
        self.insert(name, v);
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn add_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, ArrayD::from_elem(IxDyn(&[]), value));
    }

    /// Linear layer `in -> out`: weight `[in,out]` (He init) + zero bias.
    pub fn add_linear<R: Rng>(&mut self, rng: &mut R, name: &str, inp: usize, out: usize) {
        let std = (2.0 / inp as f64).sqrt();
        self.add_normal(rng, &format!("{name}.w"), &[inp, out], std);
        self.add_zeros(&format!("{name}.b"), &[out]);
    }

    /// Conv layer: weight `[out,in,k,k]` (He init) + zero bias.
    pub fn add_conv<R: Rng>(&mut self, rng: &mut R, name: &str, inp: usize, out: usize, k: usize) {
        let std = (2.0 / (inp * k * k) as f64).sqrt();
        self.add_normal(rng, &format!("{name}.w"), &[out, inp, k, k], std);
        self.add_zeros(&format!("{name}.b"), &[out]);
    }

    /// Per-channel affine for instance norm: unit scale, zero shift.
    pub fn add_norm(&mut self, name: &str, channels: usize) {
        self.insert(
            &format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[1, channels]), 1.0),
        );
        self.add_zeros(&format!("{name}.beta"), &[1, channels]);
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass and remembers
/// which leaf each parameter maps to.
pub struct Graph<'t> {
    pub tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t> Graph<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Graph { tape, store, bound: RefCell::new(BTreeMap::new()) }
    }

    /// Leaf for parameter `name`, created once per pass.
    pub fn p(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let v = self.tape.leaf(self.store.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Collect gradients of the bound parameters from a completed backward pass.
    pub fn param_grads(&self, grads: &mut Grads) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.bound.borrow().iter() {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// `x [B,in] -> [B,out]` through the named linear layer.
pub fn linear<'t>(g: &Graph<'t>, x: Var<'t>, name: &str) -> Var<'t> {
    x.matmul(g.p(&format!("{name}.w")))
        .add_row_vec(g.p(&format!("{name}.b")))
}

/// `x [B,C,H,W] -> [B,O,H',W']` through the named conv layer.
pub fn conv<'t>(g: &Graph<'t>, x: Var<'t>, name: &str, spec: ConvSpec) -> Var<'t> {
    x.conv2d(g.p(&format!("{name}.w")), g.p(&format!("{name}.b")), spec)
}

/// Per-sample, per-channel normalization over the spatial dims, followed by a
/// learnable channel affine.
pub fn instance_norm<'t>(g: &Graph<'t>, x: Var<'t>, name: &str, eps: f64) -> Var<'t> {
    let shape = x.shape();
    let (b, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mean = x.global_avg_pool();
    let centered = x.sub(mean.tile_spatial(h, w));
    let var = centered.square().global_avg_pool();
    let denom = var.sqrt_eps(eps).tile_spatial(h, w);
    let norm = centered.div(denom);
    let rows = vec![0usize; b];
    let gamma = g.p(&format!("{name}.gamma")).gather_rows(&rows).tile_spatial(h, w);
    let beta = g.p(&format!("{name}.beta")).gather_rows(&rows).tile_spatial(h, w);
    norm.mul(gamma).add(beta)
}

/// One gated recurrent step. `x [B,E]`, `h [B,H]`, `mask` constant `[B,H]`
/// (1 where the step is real, 0 where padded; padded steps keep `h`).
pub fn gru_step<'t>(
    g: &Graph<'t>,
    name: &str,
    x: Var<'t>,
    h: Var<'t>,
    mask: &ArrayD<f64>,
) -> Var<'t> {
    let hidden = h.shape()[1];
    let u = linear(g, x, &format!("{name}.x"));
    let v = h.matmul(g.p(&format!("{name}.h.w")));
    let r = u.slice_cols(0, hidden).add(v.slice_cols(0, hidden)).sigmoid();
    let z = u
        .slice_cols(hidden, 2 * hidden)
        .add(v.slice_cols(hidden, 2 * hidden))
        .sigmoid();
    let n = u
        .slice_cols(2 * hidden, 3 * hidden)
        .add(r.mul(v.slice_cols(2 * hidden, 3 * hidden)))
        .tanh();
    let ones = ArrayD::from_elem(IxDyn(&[mask.shape()[0], hidden]), 1.0);
    let h_new = z.mul(h).add(
        n.mul(z.neg().add_const(&ones)), // (1 - z) * n
    );
    let inv_mask = mask.mapv(|m| 1.0 - m);
    h_new.mul_const(mask).add(h.mul_const(&inv_mask))
}

/// Register the GRU parameters: input projection `[E,3H]` + bias and hidden
/// projection `[H,3H]`.
pub fn add_gru<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, emb: usize, hidden: usize) {
    store.add_linear(rng, &format!("{name}.x"), emb, 3 * hidden);
    let std = (1.0 / hidden as f64).sqrt();
    store.add_normal(rng, &format!("{name}.h.w"), &[hidden, 3 * hidden], std);
}

/// SGD with classical momentum. Velocity buffers are created lazily per
/// parameter name.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: BTreeMap::new() }
    }

    /// Apply one update from named gradients. Only parameters for which
    /// `filter` returns true are touched.
    pub fn step<F: Fn(&str) -> bool>(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        filter: F,
    ) {
        for (name, grad) in grads {
            if !filter(name) {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            v.zip_mut_with(grad, |vv, gg| *vv = self.momentum * *vv + gg);
            let p = store.get_mut(name);
            p.zip_mut_with(v, |pp, vv| *pp -= self.lr * vv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shared_parameter_accumulates_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", ndarray::arr2(&[[2.0]]).into_dyn());
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let x = tape.leaf2(ndarray::arr2(&[[3.0]]));
        // loss = w*x + w*x -> dL/dw = 2x
        let y = x.matmul(g.p("w")).add(x.matmul(g.p("w"))).sum_all();
        let mut grads = y.backward();
        let pg = g.param_grads(&mut grads);
        assert_eq!(pg["w"][[0, 0]], 6.0);
    }

    #[test]
    fn gru_pad_steps_keep_state() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        add_gru(&mut store, &mut rng, "gru", 4, 8);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 4]), 0.3));
        let h = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 8]), 0.1));
        let mask = ArrayD::zeros(IxDyn(&[2, 8]));
        let h2 = gru_step(&g, "gru", x, h, &mask);
        assert_eq!(h2.value(), h.value());
    }

    #[test]
    fn sgd_momentum_moves_param() {
        let mut store = ParamStore::new();
        store.add_scalar("a", 1.0);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[]), 1.0));
        opt.step(&mut store, &grads, |_| true);
        assert!((store.get("a").sum() - 0.9).abs() < 1e-12);
        opt.step(&mut store, &grads, |_| true);
        // velocity = 0.9*1 + 1 = 1.9 -> 0.9 - 0.19
        assert!((store.get("a").sum() - 0.71).abs() < 1e-12);
    }
}
