use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use dimodif::checkpoint::Checkpoint;
use dimodif::model::{Model, ModelConfig, Task};
use dimodif::syndata::{Generator, SyntheticConfig};
use dimodif::trainer::predict;
use dimodif_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_checkpoint(dir: &Path, task: Task) -> (CString, Checkpoint) {
    let cfg = ModelConfig { d: 8, heads: 2, mlp_ratio: 1, layers: 2, window: 5, f_max: 32, d0: 4, task, strict_residual: false };
    let (_, params) = Model::new::<f32, _>(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let ck = Checkpoint { config: cfg, params };
    let path = dir.join(format!("{task}.dmck"));
    ck.write(&path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), ck)
}

fn load(path: &CString) -> *mut DmdModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dmd_model_load(path.as_ptr(), &mut m) }, DmdStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dmd_last_error()) }.to_string_lossy().into_owned()
}

fn sample() -> dimodif::syndata::Sample {
    let g = Generator::new(SyntheticConfig { frames: 20, feature_dim: 4, latent_dim: 2, min_len: 3, max_len: 8, ..Default::default() }).unwrap();
    g.generate_sample(3)
}

#[test]
fn detection_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck) = write_checkpoint(dir.path(), Task::Dfd);
    let m = load(&path);
    let mut info = DmdModelInfo::default();
    assert_eq!(unsafe { dmd_model_info(m, &mut info) }, DmdStatus::Ok);
    assert_eq!((info.task, info.d, info.layers, info.window, info.d0), (DmdTask::Dfd as i32, 8, 2, 5, 4));

    let s = sample();
    let mut probs = [0.0f64; 2];
    let st = unsafe { dmd_model_predict_dfd(m, s.visual.data.as_ptr(), s.audio.data.as_ptr(), 20, 4, probs.as_mut_ptr()) };
    assert_eq!(st, DmdStatus::Ok);
    let want = predict(&ck.model().unwrap(), &ck.params, &s).unwrap();
    assert_eq!(probs, want.modality_scores);

    let mut list = ptr::null_mut();
    let st = unsafe { dmd_model_predict_tfl(m, s.visual.data.as_ptr(), s.audio.data.as_ptr(), 20, 4, &mut list) };
    assert_eq!(st, DmdStatus::TaskMismatch);
    assert!(list.is_null());
    assert!(last_error().contains("dfd"), "{}", last_error());
    unsafe { dmd_model_free(m) };
}

#[test]
fn localization_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck) = write_checkpoint(dir.path(), Task::Tfl);
    let m = load(&path);
    let s = sample();
    let mut list = ptr::null_mut();
    let st = unsafe { dmd_model_predict_tfl(m, s.visual.data.as_ptr(), s.audio.data.as_ptr(), 20, 4, &mut list) };
    assert_eq!(st, DmdStatus::Ok);
    let want = predict(&ck.model().unwrap(), &ck.params, &s).unwrap();
    let n = unsafe { dmd_proposals_len(list) };
    assert_eq!(n, want.proposals.len());
    for (i, p) in want.proposals.iter().enumerate() {
        let mut got = DmdProposal { modality: -1, onset: 0.0, offset: 0.0, confidence: 0.0 };
        assert_eq!(unsafe { dmd_proposals_get(list, i, &mut got) }, DmdStatus::Ok);
        assert_eq!((got.onset, got.offset, got.confidence), (p.interval.onset(), p.interval.offset(), p.confidence));
        assert_eq!(got.modality, p.interval.modality().index() as i32);
    }
    let mut got = DmdProposal { modality: -1, onset: 0.0, offset: 0.0, confidence: 0.0 };
    assert_eq!(unsafe { dmd_proposals_get(list, n, &mut got) }, DmdStatus::OutOfRange);
    unsafe { dmd_proposals_free(list) };

    let mut prob = vec![0.0; 40];
    let mut ds = vec![0.0; 40];
    let mut de = vec![0.0; 40];
    let st = unsafe {
        dmd_model_frame_outputs(m, s.visual.data.as_ptr(), s.audio.data.as_ptr(), 20, 4, prob.as_mut_ptr(), ds.as_mut_ptr(), de.as_mut_ptr())
    };
    assert_eq!(st, DmdStatus::Ok);
    assert!(prob.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(ds.iter().all(|&x| x >= 0.0) && de.iter().all(|&x| x <= 0.0));

    let mut probs = [0.0; 2];
    let st = unsafe { dmd_model_predict_dfd(m, s.visual.data.as_ptr(), s.audio.data.as_ptr(), 20, 4, probs.as_mut_ptr()) };
    assert_eq!(st, DmdStatus::TaskMismatch);
    unsafe { dmd_model_free(m) };
}

#[test]
fn bad_inputs_get_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_checkpoint(dir.path(), Task::Dfd);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dmd_model_load(ptr::null(), &mut m) }, DmdStatus::NullPointer);
    let missing = CString::new(dir.path().join("nope.dmck").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dmd_model_load(missing.as_ptr(), &mut m) }, DmdStatus::Io);
    assert!(m.is_null());
    let junk = dir.path().join("junk.dmck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dmd_model_load(junk.as_ptr(), &mut m) }, DmdStatus::Format);

    let m = load(&path);
    let v = vec![0.0f32; 40 * 4];
    let mut probs = [0.0; 2];
    // wrong feature width, then too many frames
    assert_eq!(unsafe { dmd_model_predict_dfd(m, v.as_ptr(), v.as_ptr(), 20, 5, probs.as_mut_ptr()) }, DmdStatus::InvalidArgument);
    assert_eq!(unsafe { dmd_model_predict_dfd(m, v.as_ptr(), v.as_ptr(), 40, 4, probs.as_mut_ptr()) }, DmdStatus::InvalidArgument);
    assert_eq!(unsafe { dmd_model_predict_dfd(m, ptr::null(), v.as_ptr(), 20, 4, probs.as_mut_ptr()) }, DmdStatus::NullPointer);
    let mut nan = v.clone();
    nan[3] = f32::NAN;
    assert_eq!(unsafe { dmd_model_predict_dfd(m, nan.as_ptr(), v.as_ptr(), 20, 4, probs.as_mut_ptr()) }, DmdStatus::NonFinite);
    unsafe { dmd_model_free(m) };
    unsafe { dmd_model_free(ptr::null_mut()) };
    unsafe { dmd_proposals_free(ptr::null_mut()) };
    assert_eq!(unsafe { dmd_proposals_len(ptr::null()) }, 0);
}

#[test]
fn scalar_helpers() {
    let mut x = -1.0;
    assert_eq!(unsafe { dmd_iou(0.0, 10.0, 5.0, 15.0, &mut x) }, DmdStatus::Ok);
    assert!((x - 5.0 / 15.0).abs() < 1e-12);
    assert_eq!(unsafe { dmd_iou(3.0, 1.0, 0.0, 1.0, &mut x) }, DmdStatus::InvalidArgument);
    assert_eq!(unsafe { dmd_iou(0.0, 1.0, 0.0, 1.0, ptr::null_mut()) }, DmdStatus::NullPointer);

    let a = CString::new("the cat sat").unwrap();
    let b = CString::new("the cat sat").unwrap();
    assert_eq!(unsafe { dmd_normalized_divergence(a.as_ptr(), b.as_ptr(), 0, &mut x) }, DmdStatus::Ok);
    assert_eq!(x, 0.0);
    let c = CString::new("the dog sat").unwrap();
    assert_eq!(unsafe { dmd_normalized_divergence(a.as_ptr(), c.as_ptr(), 1, &mut x) }, DmdStatus::Ok);
    assert!((x - 1.0 / 3.0).abs() < 1e-12, "{x}");

    for s in [DmdStatus::Ok, DmdStatus::Format, DmdStatus::Panic] {
        assert!(!unsafe { CStr::from_ptr(dmd_status_name(s)) }.to_bytes().is_empty());
    }
}
