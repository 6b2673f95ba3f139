//! Mutual-information machinery: the Jensen-Shannon estimator, global /
//! local / prior objectives, their discriminators, negative pairing, and the
//! declarative pairing configs that drive the ablation matrix.
//!
//! Sign convention: the JSD estimate is a quantity to *maximize*; every loss
//! returned here is its negation (or the adversarial prior objective), so the
//! training loop always descends.

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::nn::{conv, linear, Graph, ParamStore};
use crate::tensor::Var;

/// Named intermediate representations exposed for MI objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tap {
    TextLow,
    TextHigh,
    SourceLow,
    SourceHigh,
    DesiredLow,
    DesiredHigh,
    FusionHigh,
    ResidualMap,
    GatingMap,
}

impl Tap {
    /// Map-level taps carry spatial structure; the rest are vectors.
    pub fn is_map(&self) -> bool {
        matches!(
            self,
            Tap::TextLow | Tap::SourceLow | Tap::DesiredLow | Tap::ResidualMap | Tap::GatingMap
        )
    }
}

/// One Deep-InfoMax pairing: which tap is X (low-level), which is Y
/// (high-level vector), and which objectives apply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimPairConfig {
    pub label: String,
    pub x_tap: Tap,
    pub y_tap: Tap,
    pub use_global: bool,
    pub use_local: bool,
    pub use_prior: bool,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// All pairing labels understood by `DimPairConfig::from_label`, in ablation
/// table order.
pub const PAIR_LABELS: &[&str] = &[
    "DIM_TextSour",
    "DIM_SourText",
    "DIM_SourDes",
    "DIM_DesSour",
    "DIM_DesText",
    "DIM_TextFus",
    "DIM_SourFus",
    "DIM_FusDes",
    "DIM_ResiDes",
    "DIM_GatingDes",
    "ITDIM",
    "IFDIM",
];

impl DimPairConfig {
    /// Resolve a pairing label to its (x, y) taps. `ITDIM` pairs the
    /// text-encoder low level with the desired-image high level; `IFDIM`
    /// pairs the desired-image low level with the fusion output.
    pub fn from_label(label: &str, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let (x_tap, y_tap) = match label {
            "ITDIM" => (Tap::TextLow, Tap::DesiredHigh),
            "IFDIM" => (Tap::DesiredLow, Tap::FusionHigh),
            "DIM_TextSour" => (Tap::TextLow, Tap::SourceHigh),
            "DIM_SourText" => (Tap::SourceLow, Tap::TextHigh),
            "DIM_SourDes" => (Tap::SourceLow, Tap::DesiredHigh),
            "DIM_DesSour" => (Tap::DesiredLow, Tap::SourceHigh),
            "DIM_DesText" => (Tap::DesiredLow, Tap::TextHigh),
            "DIM_TextFus" => (Tap::TextLow, Tap::FusionHigh),
            "DIM_SourFus" => (Tap::SourceLow, Tap::FusionHigh),
            // The fusion output is a vector: no complete fusion feature map
            // exists, so this pairing drops the local objective.
            "DIM_FusDes" => (Tap::FusionHigh, Tap::DesiredHigh),
            "DIM_ResiDes" => (Tap::ResidualMap, Tap::DesiredHigh),
            "DIM_GatingDes" => (Tap::GatingMap, Tap::DesiredHigh),
            other => {
                return Err(Error::Config(format!("unknown DIM pairing label {other:?}")))
            }
        };
        if y_tap.is_map() {
            return Err(Error::Config(format!("{label}: Y tap must be a vector")));
        }
        Ok(DimPairConfig {
            label: label.to_string(),
            x_tap,
            y_tap,
            use_global: true,
            use_local: x_tap.is_map(),
            use_prior: true,
            alpha,
            beta,
            gamma,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_local && !self.x_tap.is_map() {
            return Err(Error::Config(format!(
                "{}: local objective demands a map-level X tap",
                self.label
            )));
        }
        if self.y_tap.is_map() {
            return Err(Error::Config(format!("{}: Y tap must be a vector", self.label)));
        }
        Ok(())
    }
}

/// The tap values of one forward pass.
pub struct TapSet<'t> {
    pub text_low: Var<'t>,
    pub text_high: Var<'t>,
    pub source_low: Var<'t>,
    pub source_high: Var<'t>,
    pub desired_low: Var<'t>,
    pub desired_high: Var<'t>,
    pub fusion_high: Var<'t>,
    pub residual_map: Option<Var<'t>>,
    pub gating_map: Option<Var<'t>>,
}

impl<'t> TapSet<'t> {
    pub fn get(&self, tap: Tap) -> Result<Var<'t>> {
        match tap {
            Tap::TextLow => Ok(self.text_low),
            Tap::TextHigh => Ok(self.text_high),
            Tap::SourceLow => Ok(self.source_low),
            Tap::SourceHigh => Ok(self.source_high),
            Tap::DesiredLow => Ok(self.desired_low),
            Tap::DesiredHigh => Ok(self.desired_high),
            Tap::FusionHigh => Ok(self.fusion_high),
            Tap::ResidualMap => self
                .residual_map
                .ok_or_else(|| Error::Config("residual map tap unavailable for this variant".into())),
            Tap::GatingMap => self
                .gating_map
                .ok_or_else(|| Error::Config("gating map tap unavailable for this variant".into())),
        }
    }
}

/// Channel count of a tap's map form / dimension of its pooled form.
fn tap_channels(cfg: &ModelConfig, tap: Tap) -> usize {
    match tap {
        Tap::TextLow => cfg.text_embed_dim,
        Tap::SourceLow | Tap::DesiredLow => cfg.feature_channels(),
        Tap::ResidualMap | Tap::GatingMap => match cfg.variant {
            crate::config::ModelVariant::TirgC => cfg.feature_channels(),
            _ => cfg.embed_dim,
        },
        Tap::TextHigh | Tap::SourceHigh | Tap::DesiredHigh | Tap::FusionHigh => cfg.embed_dim,
    }
}

/// Register the three discriminator stacks for one pairing under
/// `disc.<label>.*`. Hidden widths follow the encoder output dimension; the
/// prior stack narrows to 300 before the scalar head.
pub fn register_discriminators<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &ModelConfig,
    pair: &DimPairConfig,
) {
    let d = cfg.embed_dim;
    let xc = tap_channels(cfg, pair.x_tap);
    let label = &pair.label;
    if pair.use_global {
        store.add_linear(rng, &format!("disc.{label}.global.l1"), xc + d, d);
        store.add_linear(rng, &format!("disc.{label}.global.l2"), d, d);
        store.add_linear(rng, &format!("disc.{label}.global.l3"), d, 1);
    }
    if pair.use_local {
        store.add_conv(rng, &format!("disc.{label}.local.c1"), xc + d, d, 1);
        store.add_conv(rng, &format!("disc.{label}.local.c2"), d, d, 1);
        store.add_conv(rng, &format!("disc.{label}.local.c3"), d, 1, 1);
    }
    if pair.use_prior {
        store.add_linear(rng, &format!("disc.{label}.prior.l1"), d, d);
        store.add_linear(rng, &format!("disc.{label}.prior.l2"), d, 300.min(d));
        store.add_linear(rng, &format!("disc.{label}.prior.l3"), 300.min(d), 1);
    }
}

/// True for parameters updated in the adversarial discriminator sub-step
/// rather than the main descent step.
pub fn is_prior_disc_param(name: &str) -> bool {
    name.starts_with("disc.") && name.contains(".prior.")
}

/// Jensen-Shannon MI estimate from discriminator scores on real (joint) and
/// fake (product-of-marginals) pairs:
/// `E[-sp(-T_real)] - E[sp(T_fake)]`, expectations as means over all scores.
pub fn jsd_estimate<'t>(real_scores: Var<'t>, fake_scores: Var<'t>) -> Var<'t> {
    let real_term = real_scores.neg().softplus().mean_all().neg();
    let fake_term = fake_scores.softplus().mean_all();
    real_term.sub(fake_term)
}

/// Pool a map tap to a vector (vectors pass through).
pub fn pooled<'t>(x: Var<'t>) -> Var<'t> {
    if x.shape().len() == 4 {
        x.global_avg_pool()
    } else {
        x
    }
}

/// Global discriminator score for each (x, y) pair in the batch: the pooled
/// x and y are concatenated and pushed through the affine stack.
pub fn pair_score_global<'t>(g: &Graph<'t>, label: &str, x2: Var<'t>, y: Var<'t>) -> Var<'t> {
    let cat = x2.concat_axis1(y);
    let h1 = linear(g, cat, &format!("disc.{label}.global.l1")).relu();
    let h2 = linear(g, h1, &format!("disc.{label}.global.l2")).relu();
    let out = linear(g, h2, &format!("disc.{label}.global.l3"));
    let b = out.shape()[0];
    out.reshape(&[b])
}

/// Local discriminator score map: y is tiled over x's grid, concatenated
/// channel-wise and scored per patch with 1x1 convs. Returns `[B,1,h,w]`.
pub fn pair_score_local<'t>(
    g: &Graph<'t>,
    label: &str,
    x_map: Var<'t>,
    y: Var<'t>,
) -> Result<Var<'t>> {
    let shape = x_map.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(
            "local MI objective requires a map-level X tap".into(),
        ));
    }
    let (h, w) = (shape[2], shape[3]);
    let spec = ConvSpec { kernel: 1, stride: 1 };
    let cat = x_map.concat_axis1(y.tile_spatial(h, w));
    let h1 = conv(g, cat, &format!("disc.{label}.local.c1"), spec).relu();
    let h2 = conv(g, h1, &format!("disc.{label}.local.c2"), spec).relu();
    Ok(conv(g, h2, &format!("disc.{label}.local.c3"), spec))
}

/// Global MI objective: negative JSD estimate over complete (pooled) x and y.
pub fn global_mi_objective<'t>(
    g: &Graph<'t>,
    label: &str,
    x: Var<'t>,
    y: Var<'t>,
    fake_perm: &[usize],
) -> Var<'t> {
    let x2 = pooled(x);
    let real = pair_score_global(g, label, x2, y);
    let fake = pair_score_global(g, label, x2.permute_rows(fake_perm), y);
    jsd_estimate(real, fake).neg()
}

/// Local MI objective: negative mean per-patch JSD estimate (Eq.-level the
/// patch scores are averaged uniformly over the grid).
pub fn local_mi_objective<'t>(
    g: &Graph<'t>,
    label: &str,
    x_map: Var<'t>,
    y: Var<'t>,
    fake_perm: &[usize],
) -> Result<Var<'t>> {
    let real = pair_score_local(g, label, x_map, y)?;
    let fake = pair_score_local(g, label, x_map.permute_rows(fake_perm), y)?;
    Ok(jsd_estimate(real, fake).neg())
}

/// Adversarial prior-matching pieces for one batch of high-level vectors.
pub struct PriorMatch<'t> {
    /// `E_prior[log D(y')] + E_data[log(1 - D(y))]` — the adversarial value.
    pub value: Var<'t>,
    /// Loss the discriminator descends (ascends the value).
    pub disc_loss: Var<'t>,
    /// Loss the encoder descends (the data term of the value).
    pub enc_loss: Var<'t>,
}

/// Prior matching objective. The data vectors are squashed through a sigmoid
/// and matched against a uniform prior on `[0,1]^D`; `prior_samples` must be
/// drawn from that prior. The discriminator head is a logit; `log D` and
/// `log (1-D)` are computed in the stable softplus form, which keeps the
/// objective finite for any logit.
pub fn prior_match_objective<'t>(
    g: &Graph<'t>,
    label: &str,
    y_data: Var<'t>,
    prior_samples: &ArrayD<f64>,
) -> PriorMatch<'t> {
    let logit = |v: Var<'t>| -> Var<'t> {
        let h1 = linear(g, v, &format!("disc.{label}.prior.l1")).relu();
        let h2 = linear(g, h1, &format!("disc.{label}.prior.l2")).relu();
        let out = linear(g, h2, &format!("disc.{label}.prior.l3"));
        let b = out.shape()[0];
        out.reshape(&[b])
    };
    let y_prior = g.tape.leaf(prior_samples.clone());
    let s_prior = logit(y_prior);
    let s_data = logit(y_data.sigmoid());
    // log D(y') = -sp(-s'); log(1 - D(y)) = -sp(s).
    let prior_term = s_prior.neg().softplus().mean_all().neg();
    let data_term = s_data.softplus().mean_all().neg();
    let value = prior_term.add(data_term);
    PriorMatch { value, disc_loss: value.neg(), enc_loss: data_term }
}

/// Scalar components of one pairing's loss, for the metrics log.
#[derive(Debug, Clone, Copy, Default)]
pub struct DimLossParts {
    pub global_estimate: f64,
    pub local_estimate: f64,
    pub prior_value: f64,
}

/// Encoder-side loss of one pairing:
/// `alpha * (-JSD_global) + beta * (-JSD_local) + gamma * prior_enc`.
/// Also returns the matching discriminator loss for the prior sub-step.
pub fn dim_loss<'t>(
    g: &Graph<'t>,
    pair: &DimPairConfig,
    taps: &TapSet<'t>,
    fake_perm: &[usize],
    prior_samples: &ArrayD<f64>,
) -> Result<(Var<'t>, Option<Var<'t>>, DimLossParts)> {
    pair.validate()?;
    let x = taps.get(pair.x_tap)?;
    let y = taps.get(pair.y_tap)?;
    let mut parts = DimLossParts::default();
    let mut loss = g.tape.scalar(0.0);
    if pair.use_global && pair.alpha != 0.0 {
        let gl = global_mi_objective(g, &pair.label, x, y, fake_perm);
        parts.global_estimate = -gl.item();
        loss = loss.add(gl.scale(pair.alpha));
    }
    if pair.use_local && pair.beta != 0.0 {
        let ll = local_mi_objective(g, &pair.label, x, y, fake_perm)?;
        parts.local_estimate = -ll.item();
        loss = loss.add(ll.scale(pair.beta));
    }
    let mut disc_loss = None;
    if pair.use_prior && pair.gamma != 0.0 {
        let pm = prior_match_objective(g, &pair.label, y, prior_samples);
        parts.prior_value = pm.value.item();
        loss = loss.add(pm.enc_loss.scale(pair.gamma));
        disc_loss = Some(pm.disc_loss);
    }
    Ok((loss, disc_loss, parts))
}

/// Fixed-point-free permutation pairing each batch item with a mismatched
/// partner whose target differs (when feasible).
#[derive(Debug, Clone)]
pub struct NegativePairing {
    pub perm: Vec<usize>,
    /// Set when target collisions could not be avoided and the pairing fell
    /// back to a plain derangement.
    pub flagged: bool,
}

/// Draw a derangement of `0..targets.len()` such that the fake partner's
/// target differs from the real one. Falls back to a rotation (flagged) when
/// no collision-free derangement is found.
pub fn make_negative_pairing<R: Rng>(rng: &mut R, targets: &[u64]) -> Result<NegativePairing> {
    let b = targets.len();
    if b < 2 {
        return Err(Error::Data("negative pairing needs a batch of at least 2".into()));
    }
    let mut perm: Vec<usize> = (0..b).collect();
    for _ in 0..200 {
        // Fisher-Yates shuffle, then validity check.
        for i in (1..b).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let ok = perm
            .iter()
            .enumerate()
            .all(|(i, &p)| p != i && targets[p] != targets[i]);
        if ok {
            return Ok(NegativePairing { perm, flagged: false });
        }
    }
    // Degenerate batch (e.g. all targets identical): rotation is always a
    // derangement.
    let perm = (0..b).map(|i| (i + 1) % b).collect();
    Ok(NegativePairing { perm, flagged: true })
}
