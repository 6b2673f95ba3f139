//! Training loop: batch assembly, the combined objective
//! `L = mu * (L_E + L_F) + L_T`, the adaptive `mu` schedule, SGD with the
//! adversarial prior sub-step, and checkpoint I/O.
//!
//! Randomness is split into decoupled ChaCha streams so ablations consume
//! identical batch sequences: stream 0 initializes parameters, stream 1 draws
//! batches, stream 2 draws negative pairings, stream 3 draws prior samples.
//! A run with `mu = 0` therefore reproduces the no-regularizer baseline
//! bit-for-bit on the retrieval loss.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{KernelConfig, LossVariant, ModelConfig, ModelVariant, TrainConfig};
use crate::encoders::{encode_image, encode_text, register_image_encoder, register_text_encoder};
use crate::error::{Error, Result};
use crate::fusion::{fuse, register_fusion};
use crate::metric::{
    batch_classification_loss, register_kernel, soft_triplet_loss, ContrastSet, SimilarityKernel,
};
use crate::mi::{
    dim_loss, is_prior_disc_param, make_negative_pairing, register_discriminators, DimPairConfig,
    NegativePairing, Tap, TapSet,
};
use crate::nn::{Graph, ParamStore, SgdMomentum};
use crate::synth::Dataset;
use crate::tensor::{Tape, Var};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_DATA: u64 = 1;
pub const STREAM_NEGATIVES: u64 = 2;
pub const STREAM_PRIOR: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A model: geometry, kernel, MI pairings, and every parameter.
pub struct Model {
    pub model_cfg: ModelConfig,
    pub kernel_cfg: KernelConfig,
    pub pairs: Vec<DimPairConfig>,
    pub store: ParamStore,
}

/// Register all parameters from the init stream of `seed`.
pub fn build_model(
    model_cfg: &ModelConfig,
    kernel_cfg: &KernelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<Model> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let pairs: Vec<DimPairConfig> = train_cfg
        .dim_pairs
        .iter()
        .map(|l| DimPairConfig::from_label(l, train_cfg.alpha, train_cfg.beta, train_cfg.gamma))
        .collect::<Result<_>>()?;
    for p in &pairs {
        // Map taps that only some variants expose must be checked up front.
        if matches!(p.x_tap, Tap::ResidualMap | Tap::GatingMap)
            && !matches!(model_cfg.variant, ModelVariant::TirgA | ModelVariant::TirgC)
        {
            return Err(Error::Config(format!(
                "pairing {} needs a gated-residual variant",
                p.label
            )));
        }
    }
    let mut rng = stream_rng(seed, STREAM_INIT);
    let mut store = ParamStore::new();
    register_image_encoder(&mut store, &mut rng, model_cfg);
    register_text_encoder(&mut store, &mut rng, model_cfg);
    register_fusion(&mut store, &mut rng, model_cfg);
    register_kernel(&mut store, &mut rng, kernel_cfg);
    for pair in &pairs {
        register_discriminators(&mut store, &mut rng, model_cfg, pair);
    }
    Ok(Model {
        model_cfg: model_cfg.clone(),
        kernel_cfg: *kernel_cfg,
        pairs,
        store,
    })
}

// ---------------------------------------------------------------------------
// Prepared data
// ---------------------------------------------------------------------------

/// Images decoded once and held as 8-bit channel-first buffers.
pub struct ImageBank {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    data: Vec<Vec<u8>>,
    pub size: usize,
}

impl ImageBank {
    pub fn from_dataset(ds: &Dataset) -> Result<ImageBank> {
        let mut bank = ImageBank {
            ids: Vec::new(),
            index: BTreeMap::new(),
            data: Vec::new(),
            size: ds.manifest.image_size,
        };
        for t in &ds.triplets {
            for id in [&t.source_id, &t.target_id] {
                if bank.index.contains_key(id) {
                    continue;
                }
                let img = ds.load_image(id)?;
                let (c, h, w) = img.dim();
                if (c, h, w) != (3, bank.size, bank.size) {
                    return Err(Error::Shape(format!(
                        "image {id} is {h}x{w}, expected {0}x{0}",
                        bank.size
                    )));
                }
                let mut raw = Vec::with_capacity(3 * h * w);
                for ch in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            raw.push((img[[ch, y, x]] * 255.0).round() as u8);
                        }
                    }
                }
                bank.index.insert(id.clone(), bank.data.len());
                bank.ids.push(id.clone());
                bank.data.push(raw);
            }
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Assemble `[B, 3, S, S]` in `[0, 1]` from bank indices.
    pub fn batch(&self, idxs: &[usize]) -> ArrayD<f64> {
        let s = self.size;
        let mut out = ArrayD::zeros(IxDyn(&[idxs.len(), 3, s, s]));
        for (b, &i) in idxs.iter().enumerate() {
            let raw = &self.data[i];
            for ch in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        out[[b, ch, y, x]] = raw[(ch * s + y) * s + x] as f64 / 255.0;
                    }
                }
            }
        }
        out
    }
}

/// One triplet with tokenized text and bank indices resolved.
#[derive(Debug, Clone)]
pub struct PreparedTriplet {
    pub source: usize,
    pub tokens: Vec<usize>,
    pub target: usize,
    /// Stable key identifying the target image, for collision-aware
    /// negative pairing.
    pub target_key: u64,
    pub target_id: String,
}

fn id_key(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Tokenize and index one split of a dataset against a bank.
pub fn prepare_split(
    ds: &Dataset,
    bank: &ImageBank,
    split: crate::synth::Split,
    cfg: &ModelConfig,
) -> Result<Vec<PreparedTriplet>> {
    if ds.vocab.len() > cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocab_size {} smaller than dataset vocabulary {}",
            cfg.vocab_size,
            ds.vocab.len()
        )));
    }
    ds.split(split)
        .into_iter()
        .map(|t| {
            let source = bank
                .lookup(&t.source_id)
                .ok_or_else(|| Error::Data(format!("image {} not in bank", t.source_id)))?;
            let target = bank
                .lookup(&t.target_id)
                .ok_or_else(|| Error::Data(format!("image {} not in bank", t.target_id)))?;
            Ok(PreparedTriplet {
                source,
                tokens: ds.vocab.encode(&t.text, cfg.max_tokens)?,
                target,
                target_key: id_key(&t.target_id),
                target_id: t.target_id.clone(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Forward pass and combined objective
// ---------------------------------------------------------------------------

/// Run both image encodings (shared weights), the text encoding and the
/// fusion network, exposing every tap.
pub fn forward_taps<'t>(
    g: &Graph<'t>,
    cfg: &ModelConfig,
    source: Var<'t>,
    target: Var<'t>,
    tokens: &[Vec<usize>],
) -> TapSet<'t> {
    let (smap, semb) = encode_image(g, cfg, source);
    let (dmap, demb) = encode_image(g, cfg, target);
    let (tmap, temb) = encode_text(g, cfg, tokens);
    let out = fuse(g, cfg, semb, smap, temb);
    TapSet {
        text_low: tmap,
        text_high: temb,
        source_low: smap,
        source_high: semb,
        desired_low: dmap,
        desired_high: demb,
        fusion_high: out.embedding,
        residual_map: out.residual_map,
        gating_map: out.gating_map,
    }
}

/// Pairings involving the fusion network contribute to `L_F`; the rest
/// regularize the encoders (`L_E`).
pub fn pair_is_fusion(pair: &DimPairConfig) -> bool {
    matches!(
        pair.x_tap,
        Tap::FusionHigh | Tap::ResidualMap | Tap::GatingMap
    ) || matches!(pair.y_tap, Tap::FusionHigh)
}

pub struct LossBundle<'t> {
    pub total: Var<'t>,
    pub l_t: Var<'t>,
    pub l_e: Var<'t>,
    pub l_f: Var<'t>,
    /// Summed prior-discriminator losses, when any pairing uses the prior.
    pub disc: Option<Var<'t>>,
}

/// Assemble `total = mu * (L_E + L_F) + L_T` on the tape. `mu = 0` skips the
/// regularizer forward entirely.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses<'t>(
    g: &Graph<'t>,
    model: &Model,
    cfg: &TrainConfig,
    taps: &TapSet<'t>,
    mu: f64,
    pairing: &NegativePairing,
    prior_samples: &ArrayD<f64>,
) -> Result<LossBundle<'t>> {
    let kernel = SimilarityKernel::from(model.kernel_cfg);
    let b = taps.fusion_high.shape()[0];
    let l_t = match cfg.loss_variant {
        LossVariant::BatchClassification => {
            batch_classification_loss(g, taps.fusion_high, taps.desired_high, kernel)
        }
        LossVariant::SoftTriplet => {
            let sets: Vec<ContrastSet> = (0..b)
                .map(|q| ContrastSet {
                    query: q,
                    positive: q,
                    negatives: vec![pairing.perm[q]],
                })
                .collect();
            soft_triplet_loss(g, taps.fusion_high, taps.desired_high, &sets, kernel)?
        }
    };

    let mut l_e = g.tape.scalar(0.0);
    let mut l_f = g.tape.scalar(0.0);
    let mut disc: Option<Var<'t>> = None;
    if mu != 0.0 {
        for pair in &model.pairs {
            let (loss, pair_disc, _parts) =
                dim_loss(g, pair, taps, &pairing.perm, prior_samples)?;
            if pair_is_fusion(pair) {
                l_f = l_f.add(loss);
            } else {
                l_e = l_e.add(loss);
            }
            if let Some(d) = pair_disc {
                disc = Some(match disc {
                    Some(acc) => acc.add(d),
                    None => d,
                });
            }
        }
    }
    let total = l_e.add(l_f).scale(mu).add(l_t);
    Ok(LossBundle { total, l_t, l_e, l_f, disc })
}

// ---------------------------------------------------------------------------
// Steps and the loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepStats {
    pub total: f64,
    pub l_t: f64,
    pub l_e: f64,
    pub l_f: f64,
    pub pairing_flagged: bool,
}

/// One metrics-log row (newline-delimited JSON on disk).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub l_t: f64,
    pub l_e: f64,
    pub l_f: f64,
    pub mu: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub mu: f64,
    opt_main: SgdMomentum,
    opt_prior: SgdMomentum,
    data_rng: ChaCha8Rng,
    neg_rng: ChaCha8Rng,
    prior_rng: ChaCha8Rng,
    // mu window accumulators.
    win_lt: f64,
    win_le: f64,
    win_lf: f64,
    win_n: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let seed = cfg.seed;
        let mu = if model.pairs.is_empty() { 0.0 } else { cfg.mu_init };
        Ok(Trainer {
            opt_main: SgdMomentum::new(cfg.learning_rate, cfg.momentum),
            opt_prior: SgdMomentum::new(cfg.learning_rate, cfg.momentum),
            data_rng: stream_rng(seed, STREAM_DATA),
            neg_rng: stream_rng(seed, STREAM_NEGATIVES),
            prior_rng: stream_rng(seed, STREAM_PRIOR),
            model,
            cfg,
            mu,
            win_lt: 0.0,
            win_le: 0.0,
            win_lf: 0.0,
            win_n: 0,
        })
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let cut = (self.cfg.iterations as f64 * self.cfg.lr_decay_at) as usize;
        if iter >= cut {
            self.cfg.learning_rate * 0.1
        } else {
            self.cfg.learning_rate
        }
    }

    fn draw_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| self.data_rng.gen_range(0..n)).collect()
    }

    /// One SGD step on one batch. The main step updates everything except the
    /// prior discriminators; those follow in an adversarial sub-step on the
    /// same batch.
    pub fn train_step(
        &mut self,
        iter: usize,
        bank: &ImageBank,
        triplets: &[PreparedTriplet],
    ) -> Result<StepStats> {
        let picks = self.draw_batch(triplets.len());
        let batch: Vec<&PreparedTriplet> = picks.iter().map(|&i| &triplets[i]).collect();
        let source = bank.batch(&batch.iter().map(|t| t.source).collect::<Vec<_>>());
        let target = bank.batch(&batch.iter().map(|t| t.target).collect::<Vec<_>>());
        let tokens: Vec<Vec<usize>> = batch.iter().map(|t| t.tokens.clone()).collect();
        let keys: Vec<u64> = batch.iter().map(|t| t.target_key).collect();

        // One pairing draw per step regardless of configuration keeps the
        // negative stream aligned across ablation rows.
        let pairing = make_negative_pairing(&mut self.neg_rng, &keys)?;
        let prior_samples = if self.mu != 0.0 && self.model.pairs.iter().any(|p| p.use_prior) {
            let d = self.model.model_cfg.embed_dim;
            ArrayD::from_shape_fn(IxDyn(&[self.cfg.batch_size, d]), |_| {
                self.prior_rng.gen_range(0.0..1.0)
            })
        } else {
            ArrayD::zeros(IxDyn(&[0, 0]))
        };

        let lr = self.lr_at(iter);
        self.opt_main.lr = lr;
        self.opt_prior.lr = lr;

        let tape = Tape::new();
        let g = Graph::new(&tape, &self.model.store);
        let src = tape.leaf(source);
        let tgt = tape.leaf(target);
        let taps = forward_taps(&g, &self.model.model_cfg, src, tgt, &tokens);
        let bundle =
            compute_losses(&g, &self.model, &self.cfg, &taps, self.mu, &pairing, &prior_samples)?;

        let stats = StepStats {
            total: bundle.total.item(),
            l_t: bundle.l_t.item(),
            l_e: bundle.l_e.item(),
            l_f: bundle.l_f.item(),
            pairing_flagged: pairing.flagged,
        };
        if !stats.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {iter}: total={} L_T={} L_E={} L_F={} mu={}",
                stats.total, stats.l_t, stats.l_e, stats.l_f, self.mu
            )));
        }

        // Extract every named gradient before touching the store mutably: the
        // graph holds it borrowed for the whole tape lifetime.
        let mut grads = bundle.total.backward();
        let named = g.param_grads(&mut grads);
        let dnamed = match bundle.disc {
            Some(disc) => {
                let mut dgrads = disc.backward();
                Some(g.param_grads(&mut dgrads))
            }
            None => None,
        };

        self.opt_main.step(&mut self.model.store, &named, |n| !is_prior_disc_param(n));
        if let Some(dnamed) = dnamed {
            self.opt_prior.step(&mut self.model.store, &dnamed, is_prior_disc_param);
        }

        self.win_lt += stats.l_t;
        self.win_le += stats.l_e;
        self.win_lf += stats.l_f;
        self.win_n += 1;
        Ok(stats)
    }

    /// Recompute `mu` from window means:
    /// `mu = mean(L_T) / (factor * (mean(L_E) + mean(L_F)))`, clamped. A zero
    /// denominator (e.g. no regularizer) leaves `mu` unchanged.
    pub fn update_mu(&mut self) {
        if self.win_n == 0 || self.model.pairs.is_empty() || self.cfg.mu_init == 0.0 {
            self.reset_window();
            return;
        }
        let n = self.win_n as f64;
        let denom = self.cfg.mu_factor * (self.win_le / n + self.win_lf / n);
        if denom.abs() < 1e-300 {
            log::warn!("mu update skipped: zero regularizer magnitude");
        } else {
            self.mu = (self.win_lt / n / denom).clamp(self.cfg.mu_min, self.cfg.mu_max);
        }
        self.reset_window();
    }

    fn reset_window(&mut self) {
        self.win_lt = 0.0;
        self.win_le = 0.0;
        self.win_lf = 0.0;
        self.win_n = 0;
    }
}

/// Run the full schedule. `on_log` receives a row every `log_every`
/// iterations (and always the last); `on_checkpoint` fires every
/// `checkpoint_every` iterations when nonzero.
pub fn train<F, C>(
    trainer: &mut Trainer,
    bank: &ImageBank,
    triplets: &[PreparedTriplet],
    mut on_log: F,
    mut on_checkpoint: C,
) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&MetricsRow),
    C: FnMut(usize, &Model) -> Result<()>,
{
    if triplets.is_empty() {
        return Err(Error::Data("no training triplets".into()));
    }
    let iters = trainer.cfg.iterations;
    let mut rows = Vec::new();
    for iter in 0..iters {
        let stats = trainer.train_step(iter, bank, triplets)?;
        if iter % trainer.cfg.log_every == 0 || iter + 1 == iters {
            let row = MetricsRow {
                iter,
                l_t: stats.l_t,
                l_e: stats.l_e,
                l_f: stats.l_f,
                mu: trainer.mu,
                lr: trainer.lr_at(iter),
            };
            on_log(&row);
            rows.push(row);
        }
        if (iter + 1) % trainer.cfg.mu_update_every == 0 {
            trainer.update_mu();
        }
        if trainer.cfg.checkpoint_every != 0 && (iter + 1) % trainer.cfg.checkpoint_every == 0 {
            on_checkpoint(iter + 1, &trainer.model)?;
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CMIR";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_cfg: ModelConfig,
    kernel_cfg: KernelConfig,
    pair_labels: Vec<String>,
    alpha: f64,
    beta: f64,
    gamma: f64,
}

/// Write a versioned binary checkpoint: JSON header, then each parameter as
/// name, shape, and little-endian f64 data.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let header = CheckpointHeader {
        model_cfg: model.model_cfg.clone(),
        kernel_cfg: model.kernel_cfg,
        pair_labels: model.pairs.iter().map(|p| p.label.clone()).collect(),
        alpha: model.pairs.first().map_or(0.5, |p| p.alpha),
        beta: model.pairs.first().map_or(1.0, |p| p.beta),
        gamma: model.pairs.first().map_or(0.1, |p| p.gamma),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = Vec::new();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(header_json.len() as u64)?;
    w.write_all(&header_json)?;
    let params: Vec<(&str, &ArrayD<f64>)> = model.store.iter().collect();
    w.write_u64::<LittleEndian>(params.len() as u64)?;
    for (name, value) in params {
        w.write_u64::<LittleEndian>(name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LittleEndian>(value.ndim() as u64)?;
        for &d in value.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in value.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    fs::write(path, w)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("not a checkpoint: {}", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.read_u64::<LittleEndian>()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(&r[..hlen])?;
    r = &r[hlen..];
    let pairs = header
        .pair_labels
        .iter()
        .map(|l| DimPairConfig::from_label(l, header.alpha, header.beta, header.gamma))
        .collect::<Result<_>>()?;
    let mut store = ParamStore::new();
    let count = r.read_u64::<LittleEndian>()? as usize;
    for _ in 0..count {
        let nlen = r.read_u64::<LittleEndian>()? as usize;
        let name = String::from_utf8(r[..nlen].to_vec())
            .map_err(|_| Error::Data("malformed parameter name".into()))?;
        r = &r[nlen..];
        let ndim = r.read_u64::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Shape(format!("checkpoint parameter {name}: {e}")))?;
        store.insert(&name, arr);
    }
    Ok(Model {
        model_cfg: header.model_cfg,
        kernel_cfg: header.kernel_cfg,
        pairs,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{KernelKind, LossVariant};
    use crate::synth::{build_css_style_dataset, CssDatasetConfig, Split};
    use tempfile::tempdir;

    fn tiny_model_cfg(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            conv_widths: vec![4, 8],
            embed_dim: 16,
            text_embed_dim: 8,
            text_hidden: 12,
            max_tokens: 8,
            vocab_size,
            variant: ModelVariant::TirgA,
        }
    }

    fn tiny_train_cfg(iters: usize, pairs: Vec<String>) -> TrainConfig {
        TrainConfig {
            iterations: iters,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            mu_update_every: iters.min(5),
            log_every: 1,
            dim_pairs: pairs,
            loss_variant: LossVariant::SoftTriplet,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        build_css_style_dataset(
            dir,
            &CssDatasetConfig {
                train_triplets: 24,
                test_triplets: 8,
                image_size: 32,
                seed: 9,
                holdout: true,
            },
        )
        .unwrap();
        Dataset::load(dir).unwrap()
    }

    fn setup(
        dir: &Path,
        pairs: Vec<String>,
        iters: usize,
    ) -> (Trainer, ImageBank, Vec<PreparedTriplet>) {
        let ds = tiny_dataset(dir);
        let mcfg = tiny_model_cfg(ds.vocab.len());
        let tcfg = tiny_train_cfg(iters, pairs);
        let model = build_model(&mcfg, &KernelConfig::default(), &tcfg, tcfg.seed).unwrap();
        let bank = ImageBank::from_dataset(&ds).unwrap();
        let split = prepare_split(&ds, &bank, Split::Train, &mcfg).unwrap();
        (Trainer::new(model, tcfg).unwrap(), bank, split)
    }

    #[test]
    fn step_updates_parameters_and_is_finite() {
        let dir = tempdir().unwrap();
        let (mut tr, bank, split) = setup(dir.path(), vec!["ITDIM".into(), "IFDIM".into()], 2);
        let before: BTreeMap<String, ArrayD<f64>> =
            tr.model.store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let stats = tr.train_step(0, &bank, &split).unwrap();
        assert!(stats.total.is_finite() && stats.l_t.is_finite());
        assert!(stats.l_e != 0.0 && stats.l_f != 0.0, "regularizers active");
        let moved = tr
            .model
            .store
            .iter()
            .filter(|(n, v)| before[&n.to_string()] != **v)
            .count();
        assert!(moved > 0, "no parameter moved");
        // Prior discriminators move in the sub-step.
        assert!(tr
            .model
            .store
            .iter()
            .any(|(n, v)| is_prior_disc_param(n) && before[&n.to_string()] != *v));
    }

    #[test]
    fn run_is_deterministic_under_seed() {
        let dir = tempdir().unwrap();
        let run = || {
            let (mut tr, bank, split) =
                setup(dir.path(), vec!["ITDIM".into()], 6);
            train(&mut tr, &bank, &split, |_| {}, |_, _| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.l_t.to_bits(), rb.l_t.to_bits());
            assert_eq!(ra.l_e.to_bits(), rb.l_e.to_bits());
        }
    }

    #[test]
    fn mu_zero_run_matches_no_regularizer_baseline() {
        let dir = tempdir().unwrap();
        let (mut base, bank, split) = setup(dir.path(), vec![], 8);
        let base_rows = train(&mut base, &bank, &split, |_| {}, |_, _| Ok(())).unwrap();

        let (mut zeroed, bank2, split2) =
            setup(dir.path(), vec!["ITDIM".into(), "IFDIM".into()], 8);
        zeroed.cfg.mu_init = 0.0;
        zeroed.mu = 0.0;
        let zero_rows = train(&mut zeroed, &bank2, &split2, |_| {}, |_, _| Ok(())).unwrap();

        for (a, b) in base_rows.iter().zip(&zero_rows) {
            assert!(
                (a.l_t - b.l_t).abs() < 1e-12,
                "decoupled streams violated: {} vs {}",
                a.l_t,
                b.l_t
            );
            assert_eq!(b.l_e, 0.0);
        }
    }

    #[test]
    fn mu_updates_exactly_on_schedule_with_window_means() {
        let dir = tempdir().unwrap();
        let (mut tr, bank, split) = setup(dir.path(), vec!["ITDIM".into(), "IFDIM".into()], 12);
        tr.cfg.mu_update_every = 4;
        let mut mus = Vec::new();
        let mut stats_log = Vec::new();
        for iter in 0..12 {
            mus.push(tr.mu);
            let s = tr.train_step(iter, &bank, &split).unwrap();
            stats_log.push(s);
            if (iter + 1) % 4 == 0 {
                tr.update_mu();
            }
        }
        // mu is constant inside windows and changes only at boundaries.
        assert_eq!(mus[0], tr.cfg.mu_init);
        for w in 0..3 {
            for k in 1..4 {
                assert_eq!(mus[4 * w], mus[4 * w + k]);
            }
        }
        assert_ne!(mus[3], mus[4], "mu must move at the first boundary");
        // Recompute the first boundary value from the window means.
        let mean = |f: fn(&StepStats) -> f64| -> f64 {
            stats_log[..4].iter().map(f).sum::<f64>() / 4.0
        };
        let expect = (mean(|s| s.l_t) / (tr.cfg.mu_factor * (mean(|s| s.l_e) + mean(|s| s.l_f))))
            .clamp(tr.cfg.mu_min, tr.cfg.mu_max);
        assert!((mus[4] - expect).abs() < 1e-9, "{} vs {expect}", mus[4]);
    }

    #[test]
    fn nonfinite_loss_is_reported_with_components() {
        let dir = tempdir().unwrap();
        let (mut tr, bank, split) = setup(dir.path(), vec![], 2);
        tr.model.store.get_mut("img_enc.head.w")[[0, 0]] = f64::NAN;
        match tr.train_step(0, &bank, &split) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("L_T")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let (mut tr, bank, split) = setup(dir.path(), vec!["ITDIM".into()], 3);
        train(&mut tr, &bank, &split, |_| {}, |_, _| Ok(())).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &tr.model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model_cfg.embed_dim, tr.model.model_cfg.embed_dim);
        assert_eq!(loaded.pairs.len(), 1);
        assert_eq!(loaded.store.num_scalars(), tr.model.store.num_scalars());
        for (name, value) in tr.model.store.iter() {
            assert_eq!(loaded.store.get(name), value, "{name} differs after reload");
        }
        assert!(matches!(
            load_checkpoint(&dir.path().join("manifest.json")),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn negative_l2_kernel_trains_too() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mcfg = tiny_model_cfg(ds.vocab.len());
        let tcfg = TrainConfig {
            loss_variant: LossVariant::BatchClassification,
            ..tiny_train_cfg(2, vec![])
        };
        let kcfg = KernelConfig {
            kind: KernelKind::NegativeL2,
            normalize: false,
            init_temperature: 10.0,
        };
        let model = build_model(&mcfg, &kcfg, &tcfg, 0).unwrap();
        let bank = ImageBank::from_dataset(&ds).unwrap();
        let split = prepare_split(&ds, &bank, Split::Train, &mcfg).unwrap();
        let mut tr = Trainer::new(model, tcfg).unwrap();
        let s = tr.train_step(0, &bank, &split).unwrap();
        assert!(s.total.is_finite());
    }
}
