//! Retrieval evaluation: R@k against a candidate index, the ablation runner
//! over model-variant x MI-pairing rows, and embedding-alignment diagnostics.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{KernelConfig, KernelKind, ModelConfig, ModelVariant, TrainConfig};
use crate::error::{Error, Result};
use crate::metric::SimilarityKernel;
use crate::nn::Graph;
use crate::synth::{Dataset, Split};
use crate::tensor::Tape;
use crate::train::{
    build_model, forward_taps, prepare_split, train, ImageBank, MetricsRow, Model,
    PreparedTriplet, Trainer,
};

/// Candidate gallery: unique ids plus their `[N, D]` embeddings.
pub struct RetrievalIndex {
    pub ids: Vec<String>,
    pub embeddings: Array2<f64>,
}

impl RetrievalIndex {
    pub fn new(ids: Vec<String>, embeddings: Array2<f64>) -> Result<RetrievalIndex> {
        if ids.len() != embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                embeddings.nrows()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::Data(format!("duplicate candidate id {id}")));
            }
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite candidate embedding".into()));
        }
        Ok(RetrievalIndex { ids, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn l2_normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// Query-candidate score matrix under the kernel's ranking semantics (the
/// learnable temperature is monotone and omitted).
pub fn score_matrix(
    queries: &Array2<f64>,
    candidates: &Array2<f64>,
    kernel: SimilarityKernel,
) -> Array2<f64> {
    match kernel.kind {
        KernelKind::Dot => {
            let (q, c) = if kernel.normalize {
                (l2_normalize_rows(queries), l2_normalize_rows(candidates))
            } else {
                (queries.clone(), candidates.clone())
            };
            q.dot(&c.t())
        }
        KernelKind::NegativeL2 => {
            let mut out = Array2::zeros((queries.nrows(), candidates.nrows()));
            for (i, q) in queries.rows().into_iter().enumerate() {
                for (j, c) in candidates.rows().into_iter().enumerate() {
                    let d: f64 = q
                        .iter()
                        .zip(c.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    out[[i, j]] = -d;
                }
            }
            out
        }
    }
}

/// Fraction of queries whose true candidate ranks in the top `k`. Ties break
/// by stable candidate order (earlier index wins).
pub fn recall_at_k(
    queries: &Array2<f64>,
    truth: &[String],
    index: &RetrievalIndex,
    k: usize,
    kernel: SimilarityKernel,
) -> Result<f64> {
    if queries.nrows() == 0 {
        return Err(Error::Data("empty query set".into()));
    }
    if queries.nrows() != truth.len() {
        return Err(Error::Shape("queries and truth labels must align".into()));
    }
    if k == 0 || k > index.len() {
        return Err(Error::Data(format!(
            "k = {k} outside 1..={} candidates",
            index.len()
        )));
    }
    let scores = score_matrix(queries, &index.embeddings, kernel);
    let mut hits = 0usize;
    for (qi, row) in scores.rows().into_iter().enumerate() {
        let true_pos = index
            .ids
            .iter()
            .position(|id| *id == truth[qi])
            .ok_or_else(|| Error::Data(format!("truth id {} not in index", truth[qi])))?;
        let mut order: Vec<usize> = (0..index.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        if order[..k].contains(&true_pos) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.nrows() as f64)
}

// ---------------------------------------------------------------------------
// Embedding the dataset
// ---------------------------------------------------------------------------

const EMBED_CHUNK: usize = 32;

/// Image embeddings for a list of bank indices, chunked to bound tape size.
pub fn embed_images(model: &Model, bank: &ImageBank, idxs: &[usize]) -> Result<Array2<f64>> {
    let d = model.model_cfg.embed_dim;
    let mut out = Array2::zeros((idxs.len(), d));
    for (chunk_i, chunk) in idxs.chunks(EMBED_CHUNK).enumerate() {
        let tape = Tape::new();
        let g = Graph::new(&tape, &model.store);
        let imgs = tape.leaf(bank.batch(chunk));
        let (_, emb) = crate::encoders::encode_image(&g, &model.model_cfg, imgs);
        let vals = emb.value();
        for r in 0..chunk.len() {
            for c in 0..d {
                out[[chunk_i * EMBED_CHUNK + r, c]] = vals[[r, c]];
            }
        }
    }
    Ok(out)
}

/// Compose (source image, text) queries into fusion embeddings.
pub fn compose_queries(
    model: &Model,
    bank: &ImageBank,
    triplets: &[PreparedTriplet],
) -> Result<Array2<f64>> {
    let d = model.model_cfg.embed_dim;
    let mut out = Array2::zeros((triplets.len(), d));
    for (chunk_i, chunk) in triplets.chunks(EMBED_CHUNK).enumerate() {
        let tape = Tape::new();
        let g = Graph::new(&tape, &model.store);
        let src = tape.leaf(bank.batch(&chunk.iter().map(|t| t.source).collect::<Vec<_>>()));
        let tgt_idxs: Vec<usize> = chunk.iter().map(|t| t.target).collect();
        let tgt = tape.leaf(bank.batch(&tgt_idxs));
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|t| t.tokens.clone()).collect();
        let taps = forward_taps(&g, &model.model_cfg, src, tgt, &tokens);
        let vals = taps.fusion_high.value();
        for r in 0..chunk.len() {
            for c in 0..d {
                out[[chunk_i * EMBED_CHUNK + r, c]] = vals[[r, c]];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub queries: usize,
    pub candidates: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for w in self.recalls.windows(2) {
            if w[1] < w[0] - 1e-12 {
                return Err(Error::Numerical("recall must be nondecreasing in k".into()));
            }
        }
        if self.recalls.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Numerical("recall outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Evaluate a model on the test split. The gallery is every test-split target
/// image, in first-appearance order. `ks` larger than the gallery are
/// clamped to it.
pub fn evaluate(model: &Model, ds: &Dataset, bank: &ImageBank, ks: &[usize]) -> Result<EvalReport> {
    let triplets = prepare_split(ds, bank, Split::Test, &model.model_cfg)?;
    if triplets.is_empty() {
        return Err(Error::Data("no test triplets to evaluate".into()));
    }
    let mut cand_ids = Vec::new();
    let mut cand_idx = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for t in &triplets {
        if seen.insert(t.target_id.clone()) {
            cand_ids.push(t.target_id.clone());
            cand_idx.push(t.target);
        }
    }
    let index = RetrievalIndex::new(cand_ids, embed_images(model, bank, &cand_idx)?)?;
    let queries = compose_queries(model, bank, &triplets)?;
    let truth: Vec<String> = triplets.iter().map(|t| t.target_id.clone()).collect();
    let kernel = SimilarityKernel::from(model.kernel_cfg);
    let mut ks_used = Vec::new();
    let mut recalls = Vec::new();
    for &k in ks {
        let k = k.min(index.len());
        ks_used.push(k);
        recalls.push(recall_at_k(&queries, &truth, &index, k, kernel)?);
    }
    let report = EvalReport {
        ks: ks_used,
        recalls,
        queries: triplets.len(),
        candidates: index.len(),
    };
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRowSpec {
    pub name: String,
    pub variant: ModelVariant,
    pub dim_pairs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub rows: Vec<AblationRowSpec>,
    pub seeds: Vec<u64>,
}

/// The full ablation matrix: baselines, every single pairing on the
/// vector-fusion variant, and the combined configurations. (The source table
/// lists one pairing row twice across blocks; the spatial block here carries
/// the text-to-desired pairing once.)
pub fn full_ablation_rows() -> Vec<AblationRowSpec> {
    let mut rows = vec![
        AblationRowSpec { name: "Image-only".into(), variant: ModelVariant::ImageOnly, dim_pairs: vec![] },
        AblationRowSpec { name: "Text-only".into(), variant: ModelVariant::TextOnly, dim_pairs: vec![] },
        AblationRowSpec { name: "Concatenation".into(), variant: ModelVariant::Concat, dim_pairs: vec![] },
        AblationRowSpec { name: "TIRG_A".into(), variant: ModelVariant::TirgA, dim_pairs: vec![] },
    ];
    for label in crate::mi::PAIR_LABELS {
        rows.push(AblationRowSpec {
            name: format!("TIRG_A + {label}"),
            variant: ModelVariant::TirgA,
            dim_pairs: vec![label.to_string()],
        });
    }
    rows.push(AblationRowSpec {
        name: "TIRG-DIM_A".into(),
        variant: ModelVariant::TirgA,
        dim_pairs: vec!["ITDIM".into(), "IFDIM".into()],
    });
    rows.push(AblationRowSpec { name: "TIRG_C".into(), variant: ModelVariant::TirgC, dim_pairs: vec![] });
    rows.push(AblationRowSpec {
        name: "TIRG_C + ITDIM".into(),
        variant: ModelVariant::TirgC,
        dim_pairs: vec!["ITDIM".into()],
    });
    rows.push(AblationRowSpec {
        name: "TIRG-DIM_C".into(),
        variant: ModelVariant::TirgC,
        dim_pairs: vec!["ITDIM".into(), "IFDIM".into()],
    });
    rows
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub per_seed_r1: Vec<f64>,
    pub r1_mean: f64,
    pub r1_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train and evaluate every row under every seed. All rows share the seed
/// list; the decoupled RNG streams then make every row consume identical
/// batch sequences, so differences are attributable to the row itself.
pub fn run_ablation<F: FnMut(&str, u64, &MetricsRow)>(
    spec: &AblationSpec,
    base_model: &ModelConfig,
    kernel_cfg: &KernelConfig,
    base_train: &TrainConfig,
    ds: &Dataset,
    bank: &ImageBank,
    mut on_log: F,
) -> Result<Vec<AblationResult>> {
    if spec.rows.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("ablation needs rows and seeds".into()));
    }
    let mut results = Vec::with_capacity(spec.rows.len());
    for row in &spec.rows {
        let mut per_seed = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let mcfg = ModelConfig { variant: row.variant, ..base_model.clone() };
            let tcfg = TrainConfig {
                seed,
                dim_pairs: row.dim_pairs.clone(),
                ..base_train.clone()
            };
            let model = build_model(&mcfg, kernel_cfg, &tcfg, seed)?;
            let triplets = prepare_split(ds, bank, Split::Train, &mcfg)?;
            let mut trainer = Trainer::new(model, tcfg)?;
            train(&mut trainer, bank, &triplets, |r| on_log(&row.name, seed, r), |_, _| Ok(()))?;
            let report = evaluate(&trainer.model, ds, bank, &[1])?;
            per_seed.push(report.recalls[0]);
        }
        let (r1_mean, r1_std) = mean_std(&per_seed);
        results.push(AblationResult { name: row.name.clone(), per_seed_r1: per_seed, r1_mean, r1_std });
    }
    Ok(results)
}

/// Render results as an aligned text table.
pub fn format_ablation_table(results: &[AblationResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(10).max(10);
    let mut out = format!("{:width$}  R@1 mean   R@1 std\n", "model");
    for r in results {
        out.push_str(&format!(
            "{:width$}  {:8.4}  {:8.4}\n",
            r.name, r.r1_mean, r.r1_std
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Alignment diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentDiagnostic {
    /// Paired (fusion, target) embeddings; rows align.
    pub fusion: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub mean_paired_cosine_distance: f64,
    pub energy_distance: f64,
}

fn pairwise_mean_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut sum = 0.0;
    for ra in a.rows() {
        for rb in b.rows() {
            let d: f64 = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            sum += d.sqrt();
        }
    }
    sum / (a.nrows() * b.nrows()) as f64
}

/// Two-sample energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` (zero iff the
/// clouds share a distribution).
pub fn energy_distance(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    2.0 * pairwise_mean_distance(x, y) - pairwise_mean_distance(x, x) - pairwise_mean_distance(y, y)
}

pub fn mean_paired_cosine_distance(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let (xn, yn) = (l2_normalize_rows(x), l2_normalize_rows(y));
    let mut sum = 0.0;
    for (rx, ry) in xn.rows().into_iter().zip(yn.rows()) {
        sum += 1.0 - rx.dot(&ry);
    }
    sum / x.nrows() as f64
}

/// Sample `n` test triplets (with replacement) and export the paired fusion /
/// target-embedding clouds plus summary statistics. Both statistics are
/// computed on the unit sphere (rows L2-normalized), matching the cosine
/// geometry the retrieval ranking lives in; the exported clouds stay raw.
pub fn alignment_diagnostic(
    model: &Model,
    ds: &Dataset,
    bank: &ImageBank,
    n: usize,
    seed: u64,
) -> Result<AlignmentDiagnostic> {
    let triplets = prepare_split(ds, bank, Split::Test, &model.model_cfg)?;
    if triplets.is_empty() || n == 0 {
        return Err(Error::Data("alignment diagnostic needs test triplets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample: Vec<PreparedTriplet> =
        (0..n).map(|_| triplets[rng.gen_range(0..triplets.len())].clone()).collect();
    let fusion = compose_queries(model, bank, &sample)?;
    let tgt_idx: Vec<usize> = sample.iter().map(|t| t.target).collect();
    let target = embed_images(model, bank, &tgt_idx)?;
    Ok(AlignmentDiagnostic {
        mean_paired_cosine_distance: mean_paired_cosine_distance(&fusion, &target),
        energy_distance: energy_distance(&l2_normalize_rows(&fusion), &l2_normalize_rows(&target)),
        fusion: fusion.rows().into_iter().map(|r| r.to_vec()).collect(),
        target: target.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Loss curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCurves {
    pub iterations: Vec<usize>,
    pub series: Vec<(String, Vec<f64>)>,
}

/// Align several runs' retrieval-loss logs onto one iteration grid.
pub fn loss_curve_export(runs: &[(String, Vec<MetricsRow>)]) -> Result<LossCurves> {
    let first = runs.first().ok_or_else(|| Error::Data("no runs to export".into()))?;
    let iterations: Vec<usize> = first.1.iter().map(|r| r.iter).collect();
    for w in iterations.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Data("iterations must be strictly increasing".into()));
        }
    }
    let mut series = Vec::with_capacity(runs.len());
    for (name, rows) in runs {
        let its: Vec<usize> = rows.iter().map(|r| r.iter).collect();
        if its != iterations {
            return Err(Error::Data(format!("run {name} logged a different iteration grid")));
        }
        let vals: Vec<f64> = rows.iter().map(|r| r.l_t).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss in run {name}")));
        }
        series.push((name.clone(), vals));
    }
    Ok(LossCurves { iterations, series })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_css_style_dataset, CssDatasetConfig};
    use ndarray::arr2;
    use tempfile::tempdir;

    fn dot_kernel() -> SimilarityKernel {
        SimilarityKernel { kind: KernelKind::Dot, normalize: true }
    }

    fn index_from(rows: Vec<Vec<f64>>) -> RetrievalIndex {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let emb = Array2::from_shape_vec((n, d), flat).unwrap();
        let ids = (0..n).map(|i| format!("c{i}")).collect();
        RetrievalIndex::new(ids, emb).unwrap()
    }

    #[test]
    fn recall_trivial_cases_and_errors() {
        let index = index_from(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]]);
        let q = arr2(&[[0.0, 1.0]]);
        let truth = vec!["c1".to_string()];
        // Exact-match query counted at k = 1; k = N always 1.0.
        assert_eq!(recall_at_k(&q, &truth, &index, 1, dot_kernel()).unwrap(), 1.0);
        assert_eq!(recall_at_k(&q, &truth, &index, 3, dot_kernel()).unwrap(), 1.0);
        assert!(recall_at_k(&q, &truth, &index, 4, dot_kernel()).is_err());
        assert!(recall_at_k(&q, &truth, &index, 0, dot_kernel()).is_err());
        let empty = Array2::zeros((0, 2));
        assert!(recall_at_k(&empty, &[], &index, 1, dot_kernel()).is_err());
    }

    #[test]
    fn ties_break_by_candidate_order() {
        // Two identical candidates: the earlier one occupies rank 1.
        let index = index_from(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let q = arr2(&[[1.0, 0.0]]);
        let r0 = recall_at_k(&q, &["c0".to_string()], &index, 1, dot_kernel()).unwrap();
        let r1 = recall_at_k(&q, &["c1".to_string()], &index, 1, dot_kernel()).unwrap();
        assert_eq!(r0, 1.0);
        assert_eq!(r1, 0.0);
    }

    #[test]
    fn recall_matches_exhaustive_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..100 {
            let n = rng.gen_range(2..=50);
            let d = rng.gen_range(2..=6);
            let kernel = if case % 2 == 0 {
                dot_kernel()
            } else {
                SimilarityKernel { kind: KernelKind::NegativeL2, normalize: false }
            };
            let cand: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
            let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let index = RetrievalIndex::new(ids.clone(), cand.clone()).unwrap();
            let nq = rng.gen_range(1..=8);
            let q: Array2<f64> = Array2::from_shape_fn((nq, d), |_| rng.gen_range(-1.0..1.0));
            let truth: Vec<String> =
                (0..nq).map(|_| ids[rng.gen_range(0..n)].clone()).collect();
            let k = rng.gen_range(1..=n);

            // Independent oracle: brute-force stable sort on freshly computed
            // scores.
            let mut hits = 0;
            for qi in 0..nq {
                let mut scored: Vec<(usize, f64)> = (0..n)
                    .map(|ci| {
                        let s = match kernel.kind {
                            KernelKind::Dot => {
                                let qv = q.row(qi);
                                let cv = cand.row(ci);
                                let qn = qv.dot(&qv).sqrt().max(1e-12);
                                let cn = cv.dot(&cv).sqrt().max(1e-12);
                                qv.dot(&cv) / (qn * cn)
                            }
                            KernelKind::NegativeL2 => -q
                                .row(qi)
                                .iter()
                                .zip(cand.row(ci).iter())
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>(),
                        };
                        (ci, s)
                    })
                    .collect();
                scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                let true_pos = ids.iter().position(|id| *id == truth[qi]).unwrap();
                if scored[..k].iter().any(|&(ci, _)| ci == true_pos) {
                    hits += 1;
                }
            }
            let oracle = hits as f64 / nq as f64;
            let got = recall_at_k(&q, &truth, &index, k, kernel).unwrap();
            assert_eq!(got, oracle, "case {case}: n={n} k={k}");
        }
    }

    #[test]
    fn index_rejects_duplicates_and_nonfinite() {
        let emb = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(RetrievalIndex::new(vec!["a".into(), "a".into()], emb.clone()).is_err());
        let bad = arr2(&[[f64::NAN, 0.0], [0.0, 1.0]]);
        assert!(RetrievalIndex::new(vec!["a".into(), "b".into()], bad).is_err());
        assert!(RetrievalIndex::new(vec!["a".into()], emb).is_err());
    }

    #[test]
    fn energy_distance_zero_for_identical_clouds_and_positive_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((40, 4), |_| rng.gen_range(-1.0..1.0));
        assert!(energy_distance(&x, &x).abs() < 1e-12);
        let y = x.mapv(|v| v + 3.0);
        assert!(energy_distance(&x, &y) > 1.0);
        // Aligned pairs have zero cosine distance.
        assert!(mean_paired_cosine_distance(&x, &x).abs() < 1e-12);
    }

    #[test]
    fn loss_curve_export_checks_alignment() {
        let rows = |l: &[f64]| -> Vec<MetricsRow> {
            l.iter()
                .enumerate()
                .map(|(i, &v)| MetricsRow { iter: i * 10, l_t: v, l_e: 0.0, l_f: 0.0, mu: 0.0, lr: 0.01 })
                .collect()
        };
        let runs = vec![
            ("a".to_string(), rows(&[1.0, 0.8, 0.6])),
            ("b".to_string(), rows(&[1.1, 0.9, 0.7])),
        ];
        let curves = loss_curve_export(&runs).unwrap();
        assert_eq!(curves.iterations, vec![0, 10, 20]);
        assert_eq!(curves.series.len(), 2);
        let mut bad = runs.clone();
        bad[1].1.pop();
        assert!(loss_curve_export(&bad).is_err());
    }

    #[test]
    fn evaluate_all_variants_and_ablation_plumbing() {
        let dir = tempdir().unwrap();
        build_css_style_dataset(
            dir.path(),
            &CssDatasetConfig {
                train_triplets: 20,
                test_triplets: 10,
                image_size: 32,
                seed: 4,
                holdout: true,
            },
        )
        .unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let bank = ImageBank::from_dataset(&ds).unwrap();
        let mcfg = ModelConfig {
            image_size: 32,
            conv_widths: vec![4, 8],
            embed_dim: 12,
            text_embed_dim: 8,
            text_hidden: 10,
            max_tokens: 8,
            vocab_size: ds.vocab.len(),
            variant: ModelVariant::TirgA,
        };
        let tcfg = TrainConfig {
            iterations: 2,
            batch_size: 4,
            mu_update_every: 2,
            log_every: 1,
            ..TrainConfig::default()
        };
        let spec = AblationSpec {
            rows: vec![
                AblationRowSpec { name: "Image-only".into(), variant: ModelVariant::ImageOnly, dim_pairs: vec![] },
                AblationRowSpec { name: "TIRG_A + ITDIM".into(), variant: ModelVariant::TirgA, dim_pairs: vec!["ITDIM".into()] },
            ],
            seeds: vec![0, 1],
        };
        let results = run_ablation(
            &spec,
            &mcfg,
            &KernelConfig::default(),
            &tcfg,
            &ds,
            &bank,
            |_, _, _| {},
        )
        .unwrap();
        assert_eq!(results.len(), spec.rows.len());
        for r in &results {
            assert_eq!(r.per_seed_r1.len(), 2);
            for v in &r.per_seed_r1 {
                assert!((0.0..=1.0).contains(v));
            }
        }
        let table = format_ablation_table(&results);
        assert!(table.contains("Image-only") && table.contains("TIRG_A + ITDIM"));

        // Full-matrix spec sanity: every row buildable, labels resolve.
        let rows = full_ablation_rows();
        assert_eq!(rows.len(), 4 + crate::mi::PAIR_LABELS.len() + 4);

        // Evaluation reports are monotone and deterministic.
        let model = build_model(&mcfg, &KernelConfig::default(), &tcfg, 0).unwrap();
        let r1 = evaluate(&model, &ds, &bank, &[1, 5, 10, 50]).unwrap();
        let r2 = evaluate(&model, &ds, &bank, &[1, 5, 10, 50]).unwrap();
        assert_eq!(r1.recalls, r2.recalls);
        for w in r1.recalls.windows(2) {
            assert!(w[1] >= w[0]);
        }

        // Alignment diagnostic plumbing.
        let diag = alignment_diagnostic(&model, &ds, &bank, 16, 7).unwrap();
        assert_eq!(diag.fusion.len(), 16);
        assert!(diag.energy_distance.is_finite());
    }
}
