//! End-to-end checks on a tiny randomly initialized model.

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use gescf::backbone::AnalysisRequest;
use gescf::fixtures::inserted_object_pair;
use gescf::{detect_changes, Backend, Error, FacetKind, Image, PipelineConfig, ProposerConfig};
use gescf_sam::{EncoderConfig, VitHBackend, ADAPTER_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        img_size: 64,
        patch_size: 8,
        embed_dim: 32,
        depth: 4,
        num_heads: 4,
        // 8 is not a multiple of 3, so windowed blocks pad
        window_size: 3,
        global_attn_indexes: vec![1, 3],
        out_chans: 32,
        use_abs_pos: true,
        use_rel_pos: true,
        mask_in_chans: 16,
        iou_head_hidden_dim: 32,
        facet_layer: 2,
    }
}

/// Builds the model on a fresh VarMap and overwrites every parameter with
/// seeded values.
fn random_model(cfg: EncoderConfig, seed: u64) -> (VitHBackend, VarMap) {
    let vm = VarMap::new();
    let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
    let model = VitHBackend::from_var_builder(cfg, vb).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vm.data().lock().unwrap();
    let mut names: Vec<_> = data.keys().cloned().collect();
    names.sort();
    for name in names {
        let var = &data[&name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let scale = 1.0 / (*dims.last().unwrap() as f32).sqrt();
        let norm_weight = dims.len() == 1 && name.ends_with("weight");
        let vals: Vec<f32> = (0..n)
            .map(|_| {
                let r: f32 = rng.gen_range(-1.0..1.0);
                if norm_weight {
                    1.0 + 0.1 * r
                } else {
                    r * scale
                }
            })
            .collect();
        var.set(&Tensor::from_vec(vals, dims, &Device::Cpu).unwrap()).unwrap();
    }
    drop(data);
    (model, vm)
}

fn image(w: usize, h: usize, seed: u64) -> Image {
    let p = inserted_object_pair(w.max(h), w.max(h), seed).unwrap();
    p.t1.resized(w, h)
}

fn open_proposer() -> ProposerConfig {
    ProposerConfig {
        points_per_side: 4,
        nms_threshold: 0.7,
        predicted_iou_threshold: 0.0,
        stability_threshold: 0.0,
    }
}

#[test]
fn missing_weights_name_the_adapter() {
    let dir = tempfile::tempdir().unwrap();
    match VitHBackend::load(&dir.path().join("sam_vit_h.safetensors")) {
        Err(Error::BackendUnavailable { adapter, reason }) => {
            assert_eq!(adapter, ADAPTER_ID);
            assert!(reason.contains("sam_vit_h.safetensors"));
        }
        other => panic!("expected unavailable, got {other:?}"),
    }
    let bogus = dir.path().join("bogus.safetensors");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    assert!(matches!(
        VitHBackend::load_with_config(&bogus, tiny()),
        Err(Error::BackendUnavailable { .. })
    ));
}

#[test]
fn checkpoint_round_trip() {
    let (model, vm) = random_model(tiny(), 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.safetensors");
    vm.save(&path).unwrap();
    let loaded = VitHBackend::load_with_config(&path, tiny()).unwrap();
    let img = image(64, 64, 3);
    assert_eq!(
        model.extract_facets(&img, 3, FacetKind::Key).unwrap(),
        loaded.extract_facets(&img, 3, FacetKind::Key).unwrap()
    );
    // wrong shape config: parameters do not fit
    let mut wrong = tiny();
    wrong.embed_dim = 48;
    wrong.num_heads = 4;
    assert!(matches!(
        VitHBackend::load_with_config(&path, wrong),
        Err(Error::BackendUnavailable { .. })
    ));
}

#[test]
fn facet_and_embedding_shapes() {
    let (model, _vm) = random_model(tiny(), 2);
    assert_eq!((model.layer_count(), model.head_count(), model.default_facet_layer()), (4, 4, 2));
    let img = image(64, 64, 0);
    let k = model.extract_facets(&img, 2, FacetKind::Key).unwrap();
    assert_eq!((k.heads(), k.grid(), k.channels(), k.layer), (4, (8, 8), 8, 2));
    let q = model.extract_facets(&img, 2, FacetKind::Query).unwrap();
    assert_ne!(k.data(), q.data());
    let e = model.extract_embedding(&img, 3).unwrap();
    assert_eq!((e.grid(), e.channels(), e.layer), ((8, 8), 32, 3));
    assert!(matches!(
        model.extract_facets(&img, 999, FacetKind::Key),
        Err(Error::LayerOutOfRange { layer: 999, count: 4 })
    ));
    assert!(matches!(model.extract_embedding(&img, 4), Err(Error::LayerOutOfRange { .. })));
}

#[test]
fn non_square_input_crops_the_grid() {
    let (model, _vm) = random_model(tiny(), 2);
    let img = image(64, 28, 5);
    // 28 rows resize to 28 of 64; ceil(28 / 8) = 4 token rows
    let k = model.extract_facets(&img, 0, FacetKind::Value).unwrap();
    assert_eq!(k.grid(), (4, 8));
    let props = model.propose_masks(&img, &open_proposer()).unwrap();
    for p in &props {
        assert_eq!((p.mask().width(), p.mask().height()), (64, 28));
    }
}

#[test]
fn deterministic_and_analyze_matches_parts() {
    let (model, _vm) = random_model(tiny(), 3);
    let img = image(48, 48, 7);
    let prop = open_proposer();
    let req = AnalysisRequest {
        facet_layer: 1,
        facet_kind: FacetKind::Key,
        embedding_layer: 3,
        proposer: &prop,
    };
    let a = model.analyze(&img, &req).unwrap();
    let b = model.analyze(&img, &req).unwrap();
    assert_eq!(a.facets, b.facets);
    assert_eq!(a.embedding, b.embedding);
    assert_eq!(a.proposals, b.proposals);
    assert_eq!(a.facets, model.extract_facets(&img, 1, FacetKind::Key).unwrap());
    assert_eq!(a.embedding, model.extract_embedding(&img, 3).unwrap());
    assert_eq!(a.proposals, model.propose_masks(&img, &prop).unwrap());
}

#[test]
fn proposals_respect_thresholds() {
    let (model, _vm) = random_model(tiny(), 4);
    let img = image(64, 64, 9);
    let open = model.propose_masks(&img, &open_proposer()).unwrap();
    assert!(!open.is_empty());
    for p in &open {
        assert_eq!((p.mask().width(), p.mask().height()), (64, 64));
        assert!(p.area() > 0);
        assert!((0.0..=1.0).contains(&p.predicted_iou) && (0.0..=1.0).contains(&p.stability));
    }
    let strict = ProposerConfig {
        points_per_side: 4,
        ..ProposerConfig::default()
    };
    for p in model.propose_masks(&img, &strict).unwrap() {
        assert!(strict.accepts(p.predicted_iou, p.stability));
    }
    let none = ProposerConfig {
        predicted_iou_threshold: 1.0,
        stability_threshold: 1.0,
        ..open_proposer()
    };
    assert!(model
        .propose_masks(&img, &none)
        .unwrap()
        .iter()
        .all(|p| p.predicted_iou == 1.0 && p.stability == 1.0));
}

#[test]
fn single_window_equals_global_attention() {
    let mut windowed = tiny();
    windowed.window_size = 8;
    windowed.use_rel_pos = false;
    let mut global = windowed.clone();
    global.global_attn_indexes = vec![0, 1, 2, 3];
    let (a, vm) = random_model(windowed.clone(), 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.safetensors");
    vm.save(&path).unwrap();
    let b = VitHBackend::load_with_config(&path, global).unwrap();
    let img = image(64, 64, 1);
    let ea = a.extract_embedding(&img, 3).unwrap();
    let eb = b.extract_embedding(&img, 3).unwrap();
    let worst = ea
        .data()
        .iter()
        .zip(eb.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-4, "max diff {worst}");
}

#[test]
fn pipeline_is_symmetric_with_the_adapter() {
    let (model, _vm) = random_model(tiny(), 8);
    let mut cfg = PipelineConfig::default();
    cfg.proposer = ProposerConfig {
        points_per_side: 3,
        ..open_proposer()
    };
    let pair = inserted_object_pair(64, 64, 11).unwrap();
    let ab = detect_changes(&model, &pair.t0, &pair.t1, &cfg).unwrap();
    let ba = detect_changes(&model, &pair.t1, &pair.t0, &cfg).unwrap();
    assert_eq!(ab.mask, ba.mask);
    let same = detect_changes(&model, &pair.t0, &pair.t0, &cfg).unwrap();
    assert!(same.mask.is_empty());
}

#[test]
fn invalid_config_rejected() {
    let mut cfg = tiny();
    cfg.facet_layer = 4;
    let vm = VarMap::new();
    let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
    assert!(matches!(VitHBackend::from_var_builder(cfg, vb), Err(Error::Config(_))));
    assert_eq!(EncoderConfig::default().grid(), 64);
    assert!(EncoderConfig::vit_h().validate().is_ok());
}
