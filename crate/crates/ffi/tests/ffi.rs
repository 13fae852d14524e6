//! C-ABI calls against a small model written by the core crate.

use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use ovmlr_core::crg::{mine_all, Backend, MiningConfig, ReplayStore};
use ovmlr_core::pipeline::data::synthetic_crg_fixtures;
use ovmlr_core::pipeline::eval::{eval_table, evaluate_images};
use ovmlr_core::pipeline::{gen_synthetic_dataset, Checkpoint, GenConfig, Model, ModelConfig, Split, Synthetic};
use ovmlr_ffi::*;

fn fixture(dir: &Path) -> (Synthetic, Model) {
    let cfg = ModelConfig::micro();
    let b = &cfg.backbone;
    let s = gen_synthetic_dataset(&GenConfig {
        classes: 6,
        unseen: 1,
        images: 12,
        grid_h: b.grid_h,
        grid_w: b.grid_w,
        d_in: b.d_in,
        max_pos: 3,
        seed: 4,
        ..GenConfig::default()
    })
    .unwrap();
    let backend = Backend::Replay(ReplayStore::from_logs(synthetic_crg_fixtures(&s.vocab.names, 3, 4)));
    let graph = mine_all(&s.vocab.names, &s.vocab.seen_mask, &backend, &MiningConfig::default())
        .unwrap()
        .graph;
    let model = Model::new(cfg, s.vocab.clone(), graph).unwrap();
    Checkpoint::from_model(&model, None, 0).save(&dir.join("model.bin")).unwrap();
    s.dataset.save(&dir.join("data.jsonl")).unwrap();
    (s, model)
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe {
        ovmlr_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn predictions_match_the_core_model() {
    let dir = tempfile::tempdir().unwrap();
    let (s, model) = fixture(dir.path());
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(ovmlr_model_load(cpath(&dir.path().join("model.bin")).as_ptr(), &mut h), OvmlrStatus::Ok);
        let c = ovmlr_model_num_classes(h);
        assert_eq!(c, 6);
        let (mut n, mut d) = (0, 0);
        assert_eq!(ovmlr_model_input_shape(h, &mut n, &mut d), OvmlrStatus::Ok);
        let bag = &s.dataset.bags[0];
        assert_eq!(bag.patches.shape(), &[n, d]);

        let mut scores = vec![0.0; c];
        let st = ovmlr_model_predict(h, bag.patches.data().as_ptr(), n, d, scores.as_mut_ptr(), c);
        assert_eq!(st, OvmlrStatus::Ok, "{}", last_error());
        let expect = model.evaluate_image(&model.prepare(bag).unwrap(), false).unwrap();
        assert_eq!(scores, expect.yhat.as_slice());

        let mut map = vec![0.0; n];
        assert_eq!(
            ovmlr_model_patch_scores(h, bag.patches.data().as_ptr(), n, d, 2, map.as_mut_ptr()),
            OvmlrStatus::Ok
        );
        assert_eq!(map, expect.s_tilde.column(2));

        let mut name = [0 as c_char; 64];
        let mut needed = 0;
        assert_eq!(ovmlr_model_class_name(h, 1, name.as_mut_ptr(), 64, &mut needed), OvmlrStatus::Ok);
        assert_eq!(CStr::from_ptr(name.as_ptr()).to_str().unwrap(), s.vocab.names[1]);
        assert_eq!(needed, s.vocab.names[1].len() + 1);
        assert_eq!(ovmlr_model_class_name(h, 1, name.as_mut_ptr(), 1, &mut needed), OvmlrStatus::BufferTooSmall);
        assert_eq!(ovmlr_model_class_name(h, 99, name.as_mut_ptr(), 64, ptr::null_mut()), OvmlrStatus::Lookup);
        ovmlr_model_free(h);
    }
}

#[test]
fn evaluation_matches_the_core_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (s, model) = fixture(dir.path());
    let (mut h, mut data) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(ovmlr_model_load(cpath(&dir.path().join("model.bin")).as_ptr(), &mut h), OvmlrStatus::Ok);
        assert_eq!(ovmlr_dataset_load(cpath(&dir.path().join("data.jsonl")).as_ptr(), &mut data), OvmlrStatus::Ok);
        assert_eq!(ovmlr_dataset_len(data), 12);
        let mut r = OvmlrReport::default();
        assert_eq!(ovmlr_evaluate(h, data, OvmlrMode::Gzsl, 3, &mut r), OvmlrStatus::Ok, "{}", last_error());

        let test = s.dataset.split(Split::Test);
        let table = eval_table(&evaluate_images(&model, &test, false).unwrap(), &test).unwrap();
        let expect = ovmlr_core::metrics::evaluate_table(
            &table,
            ovmlr_core::metrics::EvalMode::Gzsl,
            &s.vocab.seen_mask,
            &[3],
        )
        .unwrap();
        assert_eq!(r.map, expect.map);
        assert_eq!(r.f1, expect.f1[0]);
        assert_eq!((r.k, r.images), (3, test.len()));
        ovmlr_dataset_free(data);
        ovmlr_model_free(h);
    }
}

#[test]
fn bad_arguments_report_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(ovmlr_model_load(ptr::null(), &mut h), OvmlrStatus::NullArgument);
        assert!(last_error().contains("path"));
        assert_eq!(ovmlr_model_load(cpath(&dir.path().join("missing.bin")).as_ptr(), &mut h), OvmlrStatus::Io);
        assert!(h.is_null());
        assert_eq!(
            ovmlr_model_load(cpath(&dir.path().join("data.jsonl")).as_ptr(), &mut h),
            OvmlrStatus::Io
        );
        let bad = [0xffu8 as c_char, 0];
        assert_eq!(ovmlr_model_load(bad.as_ptr(), &mut h), OvmlrStatus::Utf8);

        assert_eq!(ovmlr_model_load(cpath(&dir.path().join("model.bin")).as_ptr(), &mut h), OvmlrStatus::Ok);
        let mut scores = [0.0; 6];
        let patches = vec![0.0; 5];
        assert_eq!(ovmlr_model_predict(h, patches.as_ptr(), 5, 1, scores.as_mut_ptr(), 6), OvmlrStatus::Invalid);
        assert!(last_error().contains("expects"));
        assert_eq!(ovmlr_model_predict(h, ptr::null(), 5, 1, scores.as_mut_ptr(), 6), OvmlrStatus::NullArgument);
        assert_eq!(ovmlr_model_predict(ptr::null(), patches.as_ptr(), 5, 1, scores.as_mut_ptr(), 6), OvmlrStatus::NullArgument);
        assert_eq!(ovmlr_model_num_classes(ptr::null()), 0);
        assert_eq!(ovmlr_dataset_len(ptr::null()), 0);
        ovmlr_model_free(h);
        ovmlr_model_free(ptr::null_mut());
        ovmlr_dataset_free(ptr::null_mut());

        let needed = ovmlr_last_error(ptr::null_mut(), 0);
        assert!(needed > 0);
        let mut tiny = [1 as c_char; 4];
        assert_eq!(ovmlr_last_error(tiny.as_mut_ptr(), 4), needed);
        assert_eq!(tiny[3], 0);
    }
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(ovmlr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ovmlr.h")).unwrap();
    for sym in [
        "ovmlr_model_load",
        "ovmlr_model_predict",
        "ovmlr_model_patch_scores",
        "ovmlr_evaluate",
        "ovmlr_last_error",
        "OVMLR_STATUS_NULL_ARGUMENT",
        "typedef struct OvmlrModel OvmlrModel",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}
