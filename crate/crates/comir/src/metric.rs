//! Similarity kernels and the retrieval losses: the general contrast form,
//! its batch-classification specialization (K = B, M = 1) and the soft
//! triplet specialization (K = 2).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{KernelConfig, KernelKind};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore};
use crate::tensor::Var;

/// Runtime kernel descriptor. The dot kernel optionally normalizes rows and
/// scales by a learnable positive temperature (stored as its log).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimilarityKernel {
    pub kind: KernelKind,
    pub normalize: bool,
}

impl From<KernelConfig> for SimilarityKernel {
    fn from(c: KernelConfig) -> Self {
        SimilarityKernel { kind: c.kind, normalize: c.normalize }
    }
}

/// Register the kernel temperature under `kernel.log_temp`.
pub fn register_kernel<R: Rng>(store: &mut ParamStore, _rng: &mut R, cfg: &KernelConfig) {
    assert!(cfg.init_temperature > 0.0, "temperature must be positive");
    store.add_scalar("kernel.log_temp", cfg.init_temperature.ln());
}

/// Pairwise similarities between two embedding batches: `[B,D] x [N,D] -> [B,N]`.
pub fn similarity_matrix<'t>(
    g: &Graph<'t>,
    a: Var<'t>,
    b: Var<'t>,
    kernel: SimilarityKernel,
) -> Var<'t> {
    match kernel.kind {
        KernelKind::Dot => {
            let (a, b) = if kernel.normalize {
                (a.l2_normalize_rows(1e-12), b.l2_normalize_rows(1e-12))
            } else {
                (a, b)
            };
            let temp = g.p("kernel.log_temp").exp();
            a.matmul(b.permute_axes(&[1, 0])).scale_by(temp)
        }
        KernelKind::NegativeL2 => {
            let ab = a.matmul(b.permute_axes(&[1, 0])).scale(2.0);
            let a2 = a.square().sum_cols();
            let b2 = b.square().sum_cols();
            ab.add_col_vec(a2.neg()).add_row_vec(b2.neg())
        }
    }
}

/// One contrast set: a query row into the fusion batch, the candidate row of
/// its desired image and `K - 1` candidate rows of non-similar images.
#[derive(Debug, Clone)]
pub struct ContrastSet {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl ContrastSet {
    pub fn k(&self) -> usize {
        1 + self.negatives.len()
    }
}

fn set_scores<'t>(sims_flat: Var<'t>, n: usize, set: &ContrastSet) -> Var<'t> {
    // Row layout: positive first, then the negatives.
    let mut idx = Vec::with_capacity(set.k());
    idx.push(set.query * n + set.positive);
    idx.extend(set.negatives.iter().map(|&neg| set.query * n + neg));
    let k = idx.len();
    sims_flat.gather_rows(&idx).reshape(&[1, k])
}

/// Eq.-10-style general contrast loss over explicit sets: mean over sets of
/// `-log softmax` of the positive against its set.
pub fn general_contrast_loss<'t>(
    g: &Graph<'t>,
    fusions: Var<'t>,
    candidates: Var<'t>,
    sets: &[ContrastSet],
    kernel: SimilarityKernel,
) -> Result<Var<'t>> {
    if sets.is_empty() {
        return Err(Error::Data("no contrast sets".into()));
    }
    for s in sets {
        if s.k() < 2 && sets.len() > 1 {
            return Err(Error::Data("contrast set needs K >= 2".into()));
        }
    }
    let n = candidates.shape()[0];
    let sims = similarity_matrix(g, fusions, candidates, kernel);
    let b = sims.shape()[0];
    let sims_flat = sims.reshape(&[b * n, 1]);
    let mut total = g.tape.scalar(0.0);
    for set in sets {
        let scores = set_scores(sims_flat, n, set);
        let nll = scores.log_softmax_rows().take_per_row(&[0]).neg().sum_all();
        total = total.add(nll);
    }
    Ok(total.scale(1.0 / sets.len() as f64))
}

/// Batch-classification loss (K = B, M = 1): each fusion is scored against
/// every target in the batch and the matching column is the positive. A
/// single-query batch yields zero loss (`-log 1`).
pub fn batch_classification_loss<'t>(
    g: &Graph<'t>,
    fusions: Var<'t>,
    targets: Var<'t>,
    kernel: SimilarityKernel,
) -> Var<'t> {
    let b = fusions.shape()[0];
    assert_eq!(b, targets.shape()[0], "queries and targets must align");
    let sims = similarity_matrix(g, fusions, targets, kernel);
    let diag: Vec<usize> = (0..b).collect();
    sims.log_softmax_rows().take_per_row(&diag).neg().mean_all()
}

/// Soft triplet loss (K = 2): mean over sets of
/// `log(1 + exp(kappa_neg - kappa_pos))`, computed in softplus form. This is
/// the independent second route for the K = 2 reduction of the general loss.
pub fn soft_triplet_loss<'t>(
    g: &Graph<'t>,
    fusions: Var<'t>,
    candidates: Var<'t>,
    sets: &[ContrastSet],
    kernel: SimilarityKernel,
) -> Result<Var<'t>> {
    if sets.is_empty() {
        return Err(Error::Data("no contrast sets".into()));
    }
    for s in sets {
        if s.k() != 2 {
            return Err(Error::Data(format!(
                "soft triplet loss requires K = 2, got K = {}",
                s.k()
            )));
        }
    }
    let n = candidates.shape()[0];
    let sims = similarity_matrix(g, fusions, candidates, kernel);
    let b = sims.shape()[0];
    let sims_flat = sims.reshape(&[b * n, 1]);
    let mut total = g.tape.scalar(0.0);
    for set in sets {
        let pos_neg = set_scores(sims_flat, n, set);
        let pos = pos_neg.slice_cols(0, 1);
        let neg = pos_neg.slice_cols(1, 2);
        total = total.add(neg.sub(pos).softplus().sum_all());
    }
    Ok(total.scale(1.0 / sets.len() as f64))
}
