//! Structural guarantees of the model: exact parameter counts, joint-layer
//! weight sharing, single-modality stream isolation, residual identity under
//! zeroed sublayers, and mask-token placement in the decoder.

use cavmae_core::graph::Graph;
use cavmae_core::mask::{sample_mask, MaskStrategy};
use cavmae_core::model::{
    assemble_feature, count_params, expected_param_count, init_params, ClassifierFeature, Modality,
    ModelBuild, ModelDims, ParamMap, PosTables, TokenGeometry, Variant,
};
use cavmae_core::rng::{fill_truncated_normal, rng_from_seed};
use cavmae_core::tensor::Tensor;

fn desk() -> (ModelDims, TokenGeometry, PosTables) {
    let dims = ModelDims::default();
    let geo = TokenGeometry::default();
    let tables = PosTables::new(&dims, &geo).unwrap();
    (dims, geo, tables)
}

fn random_patches(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    fill_truncated_normal(&mut t, 1.0, &mut rng_from_seed(seed));
    t
}

fn desk_inputs(seed: u64) -> (Tensor, Tensor) {
    (random_patches(64, 64, seed), random_patches(16, 192, seed + 1))
}

/// Zeroes every sublayer output projection so each transformer layer becomes
/// the identity map.
fn zero_sublayer_outputs(params: &mut ParamMap) {
    for (name, t) in params.iter_mut() {
        if name.ends_with(".attn.wo")
            || name.ends_with(".attn.bo")
            || name.ends_with(".mlp.w2")
            || name.ends_with(".mlp.b2")
        {
            t.data_mut().fill(0.0);
        }
    }
}

#[test]
fn parameter_counts_are_frozen_at_desk_scale() {
    let (dims, geo, _) = desk();
    let expected = [
        (Variant::AudioMae, 48_432),
        (Variant::VisualMae, 54_704),
        (Variant::Cav, 72_096),
        (Variant::VanillaAvMae, 57_920),
        (Variant::AvMae, 83_584),
        (Variant::CavMae, 83_584),
    ];
    for (variant, count) in expected {
        assert_eq!(
            expected_param_count(&dims, &geo, variant),
            count,
            "{}",
            variant.name()
        );
        let params = init_params(&dims, &geo, variant, 0).unwrap();
        assert_eq!(count_params(&params), count, "{}", variant.name());
    }
}

#[test]
fn single_modality_streams_are_isolated() {
    let (dims, geo, tables) = desk();
    let params = init_params(&dims, &geo, Variant::CavMae, 3).unwrap();
    let (audio, visual) = desk_inputs(11);
    let a_plan = sample_mask(16, 4, 0.75, MaskStrategy::Uniform, 5).unwrap();
    let v_plan = sample_mask(4, 4, 0.75, MaskStrategy::Uniform, 6).unwrap();

    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, &params, dims, geo, Variant::CavMae).unwrap();
    let out = b
        .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, true)
        .unwrap();
    let loss = b.g.sum_all(out.c_a.unwrap());
    let mut grads = b.g.backward(loss, None).unwrap();
    let map = b.into_grad_map(&mut grads);

    // Audio-only objective: audio path and shared joint weights receive
    // gradient; the visual path and the other streams' layer norms do not.
    for present in [
        "proj.a.w",
        "type.a",
        "enc.a.l0.attn.wq",
        "joint.l0.attn.wq",
        "joint.l0.mlp.w1",
        "joint.l0.ln1.a.g",
    ] {
        assert!(map.contains_key(present), "expected gradient for {present}");
    }
    for absent in [
        "proj.v.w",
        "type.v",
        "enc.v.l0.attn.wq",
        "joint.l0.ln1.v.g",
        "joint.l0.ln1.av.g",
        "dec.embed.w",
        "mask_token",
    ] {
        assert!(!map.contains_key(absent), "unexpected gradient for {absent}");
    }
}

#[test]
fn fused_stream_reaches_both_modalities() {
    let (dims, geo, tables) = desk();
    let params = init_params(&dims, &geo, Variant::CavMae, 3).unwrap();
    let (audio, visual) = desk_inputs(12);
    let a_plan = sample_mask(16, 4, 0.75, MaskStrategy::Uniform, 5).unwrap();
    let v_plan = sample_mask(4, 4, 0.75, MaskStrategy::Uniform, 6).unwrap();

    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, &params, dims, geo, Variant::CavMae).unwrap();
    let out = b
        .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, false)
        .unwrap();
    assert!(out.c_a.is_none() && out.c_v.is_none());
    assert_eq!(out.audio_unmasked, 16);
    assert_eq!(out.visual_unmasked, 4);
    assert_eq!(b.g.value(out.tokens).shape(), &[20, 32]);

    let loss = b.g.sum_all(out.tokens);
    let mut grads = b.g.backward(loss, None).unwrap();
    let map = b.into_grad_map(&mut grads);
    for present in [
        "proj.a.w",
        "proj.v.w",
        "enc.a.l1.mlp.w2",
        "enc.v.l1.mlp.w2",
        "joint.l0.ln2.av.g",
    ] {
        assert!(map.contains_key(present), "expected gradient for {present}");
    }
    for absent in ["joint.l0.ln1.a.g", "joint.l0.ln1.v.g"] {
        assert!(!map.contains_key(absent), "unexpected gradient for {absent}");
    }
}

#[test]
fn joint_weights_accumulate_across_streams() {
    let (dims, geo, tables) = desk();
    let params = init_params(&dims, &geo, Variant::CavMae, 9).unwrap();
    let (audio, visual) = desk_inputs(13);
    let a_plan = sample_mask(16, 4, 0.75, MaskStrategy::Time, 7).unwrap();
    let v_plan = sample_mask(4, 4, 0.75, MaskStrategy::Uniform, 8).unwrap();

    // Gradient of each per-stream objective alone.
    let mut singles: Vec<ParamMap> = Vec::new();
    for pick in 0..3 {
        let mut g = Graph::new();
        let mut b = ModelBuild::new(&mut g, &params, dims, geo, Variant::CavMae).unwrap();
        let out = b
            .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, true)
            .unwrap();
        let root = match pick {
            0 => b.g.sum_all(out.c_a.unwrap()),
            1 => b.g.sum_all(out.c_v.unwrap()),
            _ => b.g.sum_all(out.tokens),
        };
        let mut grads = b.g.backward(root, None).unwrap();
        singles.push(b.into_grad_map(&mut grads));
    }

    // Gradient of the summed objective in one graph.
    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, &params, dims, geo, Variant::CavMae).unwrap();
    let out = b
        .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, true)
        .unwrap();
    let sa = b.g.sum_all(out.c_a.unwrap());
    let sv = b.g.sum_all(out.c_v.unwrap());
    let st = b.g.sum_all(out.tokens);
    let part = b.g.add(sa, sv).unwrap();
    let root = b.g.add(part, st).unwrap();
    let mut grads = b.g.backward(root, None).unwrap();
    let combined = b.into_grad_map(&mut grads);

    // Shared joint tensors must accumulate all three stream contributions.
    for name in ["joint.l0.attn.wq", "joint.l0.attn.wo", "joint.l0.mlp.w2"] {
        let mut total = Tensor::zeros(params[name].shape().to_vec());
        for single in &singles {
            let part = single
                .get(name)
                .unwrap_or_else(|| panic!("{name} missing from a stream gradient"));
            for (acc, v) in total.data_mut().iter_mut().zip(part.data()) {
                *acc += v;
            }
        }
        let diff = combined[name].max_abs_diff(&total).unwrap();
        assert!(diff < 1e-9, "{name}: accumulation mismatch {diff}");
    }
    // Stream-specific layer norms appear in exactly one per-stream gradient.
    for (infix, owner) in [("a", 0usize), ("v", 1), ("av", 2)] {
        let name = format!("joint.l0.ln1.{infix}.g");
        for (i, single) in singles.iter().enumerate() {
            assert_eq!(
                single.contains_key(&name),
                i == owner,
                "{name} in stream {i}"
            );
        }
    }
}

#[test]
fn zeroed_sublayers_make_every_layer_the_identity() {
    let (dims, geo, tables) = desk();
    let mut params = init_params(&dims, &geo, Variant::CavMae, 21).unwrap();
    zero_sublayer_outputs(&mut params);
    let (audio, visual) = desk_inputs(14);
    let a_plan = sample_mask(16, 4, 0.75, MaskStrategy::Uniform, 9).unwrap();
    let v_plan = sample_mask(4, 4, 0.75, MaskStrategy::Uniform, 10).unwrap();

    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, &params, dims, geo, Variant::CavMae).unwrap();
    let out = b
        .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, true)
        .unwrap();

    // With identity layers the fused tokens are exactly the embeddings, and
    // each pooled stream vector is the column mean of its embedding rows.
    let a_emb = manual_embedding(&params, &audio, &a_plan.unmasked_idx, Modality::Audio, &tables);
    let v_emb = manual_embedding(&params, &visual, &v_plan.unmasked_idx, Modality::Visual, &tables);
    let tokens = b.g.value(out.tokens).clone();
    for (i, row) in a_emb.iter().enumerate() {
        assert_eq!(tokens.row(i), row.as_slice(), "audio token {i}");
    }
    for (i, row) in v_emb.iter().enumerate() {
        assert_eq!(tokens.row(a_emb.len() + i), row.as_slice(), "visual token {i}");
    }
    let c_a = b.g.value(out.c_a.unwrap()).clone();
    let pooled = column_mean(&a_emb);
    for (x, y) in c_a.data().iter().zip(&pooled) {
        assert!((x - y).abs() < 1e-15);
    }
}

/// Proj(kept) + type + positional rows, computed with plain tensor ops.
fn manual_embedding(
    params: &ParamMap,
    patches: &Tensor,
    kept: &[usize],
    modality: Modality,
    tables: &PosTables,
) -> Vec<Vec<f64>> {
    let key = modality.key();
    let w = &params[&format!("proj.{key}.w")];
    let bias = &params[&format!("proj.{key}.b")];
    let ty = &params[&format!("type.{key}")];
    let table = match modality {
        Modality::Audio => &tables.audio_enc,
        Modality::Visual => &tables.visual_enc,
    };
    let d = w.shape()[1];
    kept.iter()
        .map(|&tok| {
            (0..d)
                .map(|j| {
                    let proj: f64 = patches
                        .row(tok)
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| p * w.at(k, j))
                        .sum();
                    proj + bias.data()[j] + ty.data()[j] + table.at(tok, j)
                })
                .collect()
        })
        .collect()
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for row in rows {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut out {
        *v /= rows.len() as f64;
    }
    out
}

#[test]
fn decoder_restores_full_length_and_places_mask_token() {
    let (dims, geo, tables) = desk();
    let mut params = init_params(&dims, &geo, Variant::AvMae, 33).unwrap();
    zero_sublayer_outputs(&mut params); // decoder stack becomes the identity
    let (audio, visual) = desk_inputs(15);
    let a_plan = sample_mask(16, 4, 0.75, MaskStrategy::Uniform, 11).unwrap();
    let v_plan = sample_mask(4, 4, 0.75, MaskStrategy::Uniform, 12).unwrap();

    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, &params, dims, geo, Variant::AvMae).unwrap();
    let out = b
        .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, false)
        .unwrap();
    let (pred_a, pred_v) = b
        .decode(out.tokens, Some(&a_plan), Some(&v_plan), &tables)
        .unwrap();
    let (pred_a, pred_v) = (pred_a.unwrap(), pred_v.unwrap());
    assert_eq!(b.g.value(pred_a).shape(), &[64, 64]);
    assert_eq!(b.g.value(pred_v).shape(), &[16, 192]);

    // With an identity decoder stack, a loss over unmasked output rows never
    // touches the mask token, and a loss over masked rows never touches the
    // encoder-side embedding: the scatter put them in disjoint rows.
    let unmasked_rows = b.g.gather_rows(pred_a, &a_plan.unmasked_idx).unwrap();
    let loss_u = b.g.sum_all(unmasked_rows);
    let masked_rows = b.g.gather_rows(pred_a, &a_plan.masked_idx).unwrap();
    let loss_m = b.g.sum_all(masked_rows);

    let mut grads_u = b.g.backward(loss_u, None).unwrap();
    let mt = grads_u.get(b.param("mask_token").unwrap()).unwrap();
    assert!(mt.data().iter().all(|&v| v == 0.0), "mask token leaked");

    let mut grads_m = b.g.backward(loss_m, None).unwrap();
    let mt = grads_m.take(b.param("mask_token").unwrap()).unwrap();
    assert!(mt.data().iter().any(|&v| v != 0.0));
    let emb_w = grads_m.take(b.param("dec.embed.w").unwrap()).unwrap();
    assert!(emb_w.data().iter().all(|&v| v == 0.0), "embedding leaked");
}

#[test]
fn feature_assembly_definitions() {
    let (dims, geo, tables) = desk();
    let params = init_params(&dims, &geo, Variant::CavMae, 5).unwrap();
    let (audio, visual) = desk_inputs(16);
    let a_plan = sample_mask(16, 4, 0.75, MaskStrategy::Uniform, 13).unwrap();
    let v_plan = sample_mask(4, 4, 0.75, MaskStrategy::Uniform, 14).unwrap();

    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, &params, dims, geo, Variant::CavMae).unwrap();
    let out = b
        .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, true)
        .unwrap();
    let mm = assemble_feature(&mut b, ClassifierFeature::Mm, &out).unwrap();
    let sm = assemble_feature(&mut b, ClassifierFeature::Sm, &out).unwrap();
    let mmsm = assemble_feature(&mut b, ClassifierFeature::MmSm, &out).unwrap();

    assert_eq!(b.g.value(mm).shape(), &[32]);
    assert_eq!(b.g.value(sm).numel(), 64);
    let ca = b.g.value(out.c_a.unwrap()).data().to_vec();
    let cv = b.g.value(out.c_v.unwrap()).data().to_vec();
    let sm_v = b.g.value(sm).data().to_vec();
    assert_eq!(&sm_v[..32], ca.as_slice());
    assert_eq!(&sm_v[32..], cv.as_slice());
    // MM+SM is the elementwise sum of the three pooled vectors.
    let mm_v = b.g.value(mm).data().to_vec();
    let mmsm_v = b.g.value(mmsm).data().to_vec();
    for i in 0..32 {
        assert!((mmsm_v[i] - (mm_v[i] + ca[i] + cv[i])).abs() < 1e-12);
    }
}

#[test]
fn single_modality_paths_and_variant_gating() {
    let (dims, geo, tables) = desk();
    let (audio, visual) = desk_inputs(17);
    let a_plan = sample_mask(16, 4, 0.75, MaskStrategy::Uniform, 15).unwrap();
    let v_plan = sample_mask(4, 4, 0.75, MaskStrategy::Uniform, 16).unwrap();

    // audio_mae encodes audio, rejects visual and pairs.
    let params = init_params(&dims, &geo, Variant::AudioMae, 1).unwrap();
    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, &params, dims, geo, Variant::AudioMae).unwrap();
    let (tokens, pooled) = b
        .encode_single(Modality::Audio, &audio, &a_plan, &tables)
        .unwrap();
    assert_eq!(b.g.value(tokens).shape(), &[16, 32]);
    assert_eq!(b.g.value(pooled).shape(), &[32]);
    let mut g2 = Graph::new();
    let mut b2 = ModelBuild::new(&mut g2, &params, dims, geo, Variant::AudioMae).unwrap();
    assert!(b2
        .encode_single(Modality::Visual, &visual, &v_plan, &tables)
        .is_err());
    let mut g3 = Graph::new();
    let mut b3 = ModelBuild::new(&mut g3, &params, dims, geo, Variant::AudioMae).unwrap();
    assert!(b3
        .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, false)
        .is_err());

    // cav has no decoder.
    let params = init_params(&dims, &geo, Variant::Cav, 1).unwrap();
    let mut g4 = Graph::new();
    let mut b4 = ModelBuild::new(&mut g4, &params, dims, geo, Variant::Cav).unwrap();
    let out = b4
        .encode_pair(&audio, &a_plan, &visual, &v_plan, &tables, true)
        .unwrap();
    assert!(b4
        .decode(out.tokens, Some(&a_plan), Some(&v_plan), &tables)
        .is_err());

    // encode_single on a multi-stream variant runs its stream LN set.
    let params = init_params(&dims, &geo, Variant::CavMae, 1).unwrap();
    let mut g5 = Graph::new();
    let mut b5 = ModelBuild::new(&mut g5, &params, dims, geo, Variant::CavMae).unwrap();
    let (_, pooled) = b5
        .encode_single(Modality::Visual, &visual, &v_plan, &tables)
        .unwrap();
    let loss = b5.g.sum_all(pooled);
    let mut grads = b5.g.backward(loss, None).unwrap();
    let map = b5.into_grad_map(&mut grads);
    assert!(map.contains_key("joint.l0.ln1.v.g"));
    assert!(!map.contains_key("joint.l0.ln1.av.g"));
}
