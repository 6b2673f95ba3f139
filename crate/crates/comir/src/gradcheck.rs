//! Central finite-difference verification of analytic gradients.
//!
//! The checker only ever calls the forward pass, so it stays independent of
//! the backward implementation it validates. Large tensors are probed at a
//! random sample of coordinates.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::Rng;

use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Relative error with a small absolute floor so near-zero gradients do not
/// blow up the ratio.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare `analytic` gradients against central differences of `loss`.
/// `coords_per_tensor` random coordinates are probed in each named tensor.
pub fn check_against_fd<F, R>(
    store: &ParamStore,
    analytic: &BTreeMap<String, ArrayD<f64>>,
    names: &[&str],
    loss: F,
    coords_per_tensor: usize,
    h: f64,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
    R: Rng,
{
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut probe = store.clone();
    for name in names {
        let grad = analytic
            .get(*name)
            .unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        let len = grad.len();
        assert!(len > 0);
        let n = coords_per_tensor.min(len);
        let mut picked: Vec<usize> = (0..len).collect();
        if len > n {
            // Partial Fisher-Yates for a deterministic random sample.
            for i in 0..n {
                let j = rng.gen_range(i..len);
                picked.swap(i, j);
            }
        }
        for &flat in picked.iter().take(n) {
            let base = store.get(name).as_slice().unwrap()[flat];
            {
                let p = probe.get_mut(name).as_slice_mut().unwrap();
                p[flat] = base + h;
            }
            let fp = loss(&probe);
            {
                let p = probe.get_mut(name).as_slice_mut().unwrap();
                p[flat] = base - h;
            }
            let fm = loss(&probe);
            {
                let p = probe.get_mut(name).as_slice_mut().unwrap();
                p[flat] = base;
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.as_slice().unwrap()[flat];
            max_rel = max_rel.max(rel_err(fd, an));
            checked += 1;
        }
    }
    GradCheckReport { max_rel_err: max_rel, coords_checked: checked }
}
