//! Gated-residual composition of source-image and text features, in a
//! vector variant (fully connected) and a spatial variant (3x3 convs over the
//! text feature broadcast across the grid), plus the trivial reference
//! baselines used by the ablation runner.

use rand::Rng;

use crate::config::{ModelConfig, ModelVariant};
use crate::kernels::ConvSpec;
use crate::nn::{conv, linear, Graph, ParamStore};
use crate::tensor::Var;

/// Fusion forward result. `residual_map` and `gating_map` are the taps used
/// by the MI pairings; in the vector variant they are 1x1 "maps".
pub struct FusionOutput<'t> {
    pub embedding: Var<'t>,
    pub residual_map: Option<Var<'t>>,
    pub gating_map: Option<Var<'t>>,
}

/// Register fusion parameters under `fusion.*` for the given variant.
pub fn register_fusion<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    match cfg.variant {
        ModelVariant::TirgA => {
            store.add_linear(rng, "fusion.fc_g1", 2 * d, d);
            store.add_linear(rng, "fusion.fc_g2", d, d);
            store.add_linear(rng, "fusion.fc_r1", 2 * d, d);
            store.add_linear(rng, "fusion.fc_r2", d, d);
            store.add_scalar("fusion.w_g", 1.0);
            store.add_scalar("fusion.w_r", 0.1);
        }
        ModelVariant::TirgC => {
            let c = cfg.feature_channels();
            store.add_conv(rng, "fusion.conv_g1", c + d, c, 3);
            store.add_conv(rng, "fusion.conv_g2", c, c, 3);
            store.add_conv(rng, "fusion.conv_r1", c + d, c, 3);
            store.add_conv(rng, "fusion.conv_r2", c, c, 3);
            store.add_linear(rng, "fusion.proj", c, d);
            store.add_scalar("fusion.w_g", 1.0);
            store.add_scalar("fusion.w_r", 0.1);
        }
        ModelVariant::Concat => {
            store.add_linear(rng, "fusion.mlp1", 2 * d, d);
            store.add_linear(rng, "fusion.mlp2", d, d);
        }
        ModelVariant::ImageOnly | ModelVariant::TextOnly => {}
    }
}

/// `sigma(FC_g2(ReLU(FC_g1([phi_s, phi_t])))) * phi_s`. Every output
/// coordinate is bounded by the matching `phi_s` coordinate in magnitude.
pub fn gating_feature<'t>(g: &Graph<'t>, phi_s: Var<'t>, phi_t: Var<'t>) -> Var<'t> {
    let cat = phi_s.concat_axis1(phi_t);
    let gate = linear(g, linear(g, cat, "fusion.fc_g1").relu(), "fusion.fc_g2").sigmoid();
    gate.mul(phi_s)
}

/// `FC_r2(ReLU(FC_r1([phi_s, phi_t])))`.
pub fn residual_feature<'t>(g: &Graph<'t>, phi_s: Var<'t>, phi_t: Var<'t>) -> Var<'t> {
    let cat = phi_s.concat_axis1(phi_t);
    linear(g, linear(g, cat, "fusion.fc_r1").relu(), "fusion.fc_r2")
}

/// Vector-level gated residual fusion: `w_g * f_g + w_r * f_r`.
pub fn tirg_fuse<'t>(g: &Graph<'t>, phi_s: Var<'t>, phi_t: Var<'t>) -> FusionOutput<'t> {
    let f_g = gating_feature(g, phi_s, phi_t);
    let f_r = residual_feature(g, phi_s, phi_t);
    let emb = f_g.scale_by(g.p("fusion.w_g")).add(f_r.scale_by(g.p("fusion.w_r")));
    let b = phi_s.shape()[0];
    let d = phi_s.shape()[1];
    FusionOutput {
        embedding: emb,
        residual_map: Some(f_r.reshape(&[b, d, 1, 1])),
        gating_map: Some(f_g.reshape(&[b, d, 1, 1])),
    }
}

/// Spatial gated residual fusion: the text embedding is tiled over the
/// feature-map grid, concatenated channel-wise, and the gating / residual
/// branches use 3x3 convs. The gated map is pooled and projected to the
/// shared embedding dimension.
pub fn tirg_fuse_spatial<'t>(
    g: &Graph<'t>,
    fmap_s: Var<'t>,
    phi_t: Var<'t>,
) -> FusionOutput<'t> {
    let shape = fmap_s.shape();
    let (m_h, m_w) = (shape[2], shape[3]);
    let spec = ConvSpec { kernel: 3, stride: 1 };
    let cat = fmap_s.concat_axis1(phi_t.tile_spatial(m_h, m_w));
    let gate = conv(g, conv(g, cat, "fusion.conv_g1", spec).relu(), "fusion.conv_g2", spec)
        .sigmoid();
    let f_g = gate.mul(fmap_s);
    let f_r = conv(g, conv(g, cat, "fusion.conv_r1", spec).relu(), "fusion.conv_r2", spec);
    let fused = f_g.scale_by(g.p("fusion.w_g")).add(f_r.scale_by(g.p("fusion.w_r")));
    let emb = linear(g, fused.global_avg_pool(), "fusion.proj");
    FusionOutput { embedding: emb, residual_map: Some(f_r), gating_map: Some(f_g) }
}

/// Dispatch on the configured variant. `fmap_s` is only consulted by the
/// spatial variant.
pub fn fuse<'t>(
    g: &Graph<'t>,
    cfg: &ModelConfig,
    phi_s: Var<'t>,
    fmap_s: Var<'t>,
    phi_t: Var<'t>,
) -> FusionOutput<'t> {
    match cfg.variant {
        ModelVariant::TirgA => tirg_fuse(g, phi_s, phi_t),
        ModelVariant::TirgC => tirg_fuse_spatial(g, fmap_s, phi_t),
        ModelVariant::Concat => {
            let cat = phi_s.concat_axis1(phi_t);
            let emb = linear(g, linear(g, cat, "fusion.mlp1").relu(), "fusion.mlp2");
            FusionOutput { embedding: emb, residual_map: None, gating_map: None }
        }
        ModelVariant::ImageOnly => {
            FusionOutput { embedding: phi_s, residual_map: None, gating_map: None }
        }
        ModelVariant::TextOnly => {
            FusionOutput { embedding: phi_t, residual_map: None, gating_map: None }
        }
    }
}
