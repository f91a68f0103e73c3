//! Parameter enumeration, initialization, and the parameter-count formula.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{ModelDims, TokenGeometry, Variant};
use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Named parameter tensors. `BTreeMap` fixes iteration order, which in turn
/// fixes every gradient-reduction and optimizer-update order bit-exactly.
pub type ParamMap = BTreeMap<String, Tensor>;

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    /// Truncated normal, σ = 0.02, resampled beyond ±2σ.
    TruncNormal,
    Zeros,
    /// Layer-norm gains start at identity.
    Ones,
}

/// One parameter tensor: name, shape, init rule.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

fn spec(name: String, shape: Vec<usize>, init: ParamInit) -> ParamSpec {
    ParamSpec { name, shape, init }
}

/// Specs for one transformer layer of width `d`. `ln_sets` lists the naming
/// infixes for layer-norm pairs: `[None]` for ordinary layers, one entry per
/// stream for the shared joint layer (whose MSA/MLP appear exactly once).
fn layer_specs(prefix: &str, d: usize, ln_sets: &[Option<&str>], out: &mut Vec<ParamSpec>) {
    use ParamInit::*;
    for part in ["wq", "wk", "wv", "wo"] {
        out.push(spec(format!("{prefix}.attn.{part}"), vec![d, d], TruncNormal));
        let bias = part.replace('w', "b");
        out.push(spec(format!("{prefix}.attn.{bias}"), vec![d], Zeros));
    }
    out.push(spec(format!("{prefix}.mlp.w1"), vec![d, 4 * d], TruncNormal));
    out.push(spec(format!("{prefix}.mlp.b1"), vec![4 * d], Zeros));
    out.push(spec(format!("{prefix}.mlp.w2"), vec![4 * d, d], TruncNormal));
    out.push(spec(format!("{prefix}.mlp.b2"), vec![d], Zeros));
    for ln_set in ln_sets {
        for ln in ["ln1", "ln2"] {
            let base = match ln_set {
                Some(infix) => format!("{prefix}.{ln}.{infix}"),
                None => format!("{prefix}.{ln}"),
            };
            out.push(spec(format!("{base}.g"), vec![d], Ones));
            out.push(spec(format!("{base}.b"), vec![d], Zeros));
        }
    }
}

fn linear_specs(prefix: &str, d_in: usize, d_out: usize, out: &mut Vec<ParamSpec>) {
    out.push(spec(
        format!("{prefix}.w"),
        vec![d_in, d_out],
        ParamInit::TruncNormal,
    ));
    out.push(spec(format!("{prefix}.b"), vec![d_out], ParamInit::Zeros));
}

/// Every parameter tensor of a variant, in a fixed order (which also fixes
/// the initialization stream).
pub fn param_specs(dims: &ModelDims, geo: &TokenGeometry, variant: Variant) -> Vec<ParamSpec> {
    use ParamInit::*;
    let d = dims.d_enc;
    let dd = dims.d_dec;
    let mut out = Vec::new();

    if variant.uses_audio() {
        linear_specs("proj.a", geo.audio_patch_len(), d, &mut out);
        out.push(spec("type.a".into(), vec![d], TruncNormal));
    }
    if variant.uses_visual() {
        linear_specs("proj.v", geo.visual_patch_len(), d, &mut out);
        out.push(spec("type.v".into(), vec![d], TruncNormal));
    }

    if variant.multi_stream() {
        for l in 0..dims.enc_layers_modal {
            layer_specs(&format!("enc.a.l{l}"), d, &[None], &mut out);
        }
        for l in 0..dims.enc_layers_modal {
            layer_specs(&format!("enc.v.l{l}"), d, &[None], &mut out);
        }
        for l in 0..dims.enc_layers_joint {
            layer_specs(
                &format!("joint.l{l}"),
                d,
                &[Some("a"), Some("v"), Some("av")],
                &mut out,
            );
        }
    } else {
        // single fused stack with the combined depth
        for l in 0..dims.enc_layers_modal + dims.enc_layers_joint {
            layer_specs(&format!("enc.j.l{l}"), d, &[None], &mut out);
        }
    }

    if variant.has_decoder() {
        linear_specs("dec.embed", d, dd, &mut out);
        out.push(spec("mask_token".into(), vec![dd], TruncNormal));
        if variant.uses_audio() {
            out.push(spec("dtype.a".into(), vec![dd], TruncNormal));
        }
        if variant.uses_visual() {
            out.push(spec("dtype.v".into(), vec![dd], TruncNormal));
        }
        for l in 0..dims.dec_layers {
            layer_specs(&format!("dec.l{l}"), dd, &[None], &mut out);
        }
        if variant.uses_audio() {
            linear_specs("dec.out.a", dd, geo.audio_patch_len(), &mut out);
        }
        if variant.uses_visual() {
            linear_specs("dec.out.v", dd, geo.visual_patch_len(), &mut out);
        }
    }
    out
}

/// Classification head specs (appended at fine-tune time).
pub fn head_specs(feature_dim: usize, n_classes: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    linear_specs("head", feature_dim, n_classes, &mut out);
    out
}

/// Materializes specs into tensors with a seeded init stream.
pub fn init_from_specs(specs: &[ParamSpec], seed: u64) -> ParamMap {
    let mut r = rng::rng_from_seed(rng::derive_seed(&[seed, rng::stream::INIT]));
    let mut map = ParamMap::new();
    for s in specs {
        let mut t = Tensor::zeros(s.shape.clone());
        match s.init {
            ParamInit::TruncNormal => rng::fill_truncated_normal(&mut t, 0.02, &mut r),
            ParamInit::Zeros => {}
            ParamInit::Ones => t.data_mut().fill(1.0),
        }
        map.insert(s.name.clone(), t);
    }
    map
}

/// Fresh, seeded parameters for a variant.
pub fn init_params(
    dims: &ModelDims,
    geo: &TokenGeometry,
    variant: Variant,
    seed: u64,
) -> Result<ParamMap> {
    dims.validate()?;
    Ok(init_from_specs(&param_specs(dims, geo, variant), seed))
}

/// Closed-form parameter count.
///
/// A width-`d` transformer layer holds 12d² + 13d parameters
/// (attention 4d²+4d, MLP 8d²+5d, one LN pair 4d); the shared joint layer
/// replaces the single LN pair with three, giving 12d² + 21d. Linear maps
/// hold in·out + out; type embeddings and the mask token are single vectors.
pub fn expected_param_count(dims: &ModelDims, geo: &TokenGeometry, variant: Variant) -> usize {
    let d = dims.d_enc;
    let dd = dims.d_dec;
    let layer = |w: usize| 12 * w * w + 13 * w;
    let linear = |i: usize, o: usize| i * o + o;
    let mut n = 0;
    if variant.uses_audio() {
        n += linear(geo.audio_patch_len(), d) + d;
    }
    if variant.uses_visual() {
        n += linear(geo.visual_patch_len(), d) + d;
    }
    if variant.multi_stream() {
        n += 2 * dims.enc_layers_modal * layer(d);
        n += dims.enc_layers_joint * (12 * d * d + 21 * d);
    } else {
        n += (dims.enc_layers_modal + dims.enc_layers_joint) * layer(d);
    }
    if variant.has_decoder() {
        n += linear(d, dd) + dd; // embed + mask token
        if variant.uses_audio() {
            n += dd + linear(dd, geo.audio_patch_len());
        }
        if variant.uses_visual() {
            n += dd + linear(dd, geo.visual_patch_len());
        }
        n += dims.dec_layers * layer(dd);
    }
    n
}

/// Total elements across a parameter map.
pub fn count_params(params: &ParamMap) -> usize {
    params.values().map(Tensor::numel).sum()
}

/// Confirms every expected tensor exists with its expected shape (e.g. after
/// loading a checkpoint). Extra `head.*` tensors are permitted.
pub fn validate_params(
    params: &ParamMap,
    dims: &ModelDims,
    geo: &TokenGeometry,
    variant: Variant,
) -> Result<()> {
    let specs = param_specs(dims, geo, variant);
    for s in &specs {
        match params.get(&s.name) {
            None => {
                return Err(CoreError::invalid(format!(
                    "missing parameter tensor '{}'",
                    s.name
                )))
            }
            Some(t) if t.shape() != s.shape.as_slice() => {
                return Err(CoreError::ShapeMismatch {
                    op: "validate_params",
                    lhs: s.shape.clone(),
                    rhs: t.shape().to_vec(),
                })
            }
            _ => {}
        }
    }
    let expected: alloc::collections::BTreeSet<&str> =
        specs.iter().map(|s| s.name.as_str()).collect();
    for name in params.keys() {
        if !expected.contains(name.as_str()) && !name.starts_with("head.") {
            return Err(CoreError::invalid(format!(
                "unexpected parameter tensor '{name}'"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_matches_enumeration_for_all_variants() {
        let dims = ModelDims::default();
        let geo = TokenGeometry::default();
        for v in [
            Variant::AudioMae,
            Variant::VisualMae,
            Variant::Cav,
            Variant::VanillaAvMae,
            Variant::AvMae,
            Variant::CavMae,
        ] {
            let specs = param_specs(&dims, &geo, v);
            let enumerated: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
            assert_eq!(
                enumerated,
                expected_param_count(&dims, &geo, v),
                "variant {}",
                v.name()
            );
        }
    }

    #[test]
    fn joint_layer_msa_mlp_appear_exactly_once() {
        let specs = param_specs(&ModelDims::default(), &TokenGeometry::default(), Variant::CavMae);
        let attn_w: Vec<&ParamSpec> = specs
            .iter()
            .filter(|s| s.name.starts_with("joint.l0.attn.wq"))
            .collect();
        assert_eq!(attn_w.len(), 1);
        let ln_gains: Vec<&ParamSpec> = specs
            .iter()
            .filter(|s| s.name.starts_with("joint.l0.ln1") && s.name.ends_with(".g"))
            .collect();
        assert_eq!(ln_gains.len(), 3); // a, v, av
    }

    #[test]
    fn init_is_seed_deterministic_and_respects_rules() {
        let dims = ModelDims::default();
        let geo = TokenGeometry::default();
        let a = init_params(&dims, &geo, Variant::CavMae, 7).unwrap();
        let b = init_params(&dims, &geo, Variant::CavMae, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&dims, &geo, Variant::CavMae, 8).unwrap();
        assert_ne!(a, c);
        assert!(a["proj.a.b"].data().iter().all(|&v| v == 0.0));
        assert!(a["enc.a.l0.ln1.g"].data().iter().all(|&v| v == 1.0));
        assert!(a["proj.a.w"].data().iter().all(|&v| v.abs() <= 0.04));
        assert!(a["proj.a.w"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn validate_params_catches_missing_and_unknown() {
        let dims = ModelDims::default();
        let geo = TokenGeometry::default();
        let mut p = init_params(&dims, &geo, Variant::Cav, 0).unwrap();
        assert!(validate_params(&p, &dims, &geo, Variant::Cav).is_ok());
        p.insert("rogue".into(), Tensor::scalar(0.0));
        assert!(validate_params(&p, &dims, &geo, Variant::Cav).is_err());
        p.remove("rogue");
        p.remove("proj.a.w");
        assert!(validate_params(&p, &dims, &geo, Variant::Cav).is_err());
    }
}
