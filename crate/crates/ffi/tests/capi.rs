use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use geoforest::eval::phantom::{generate_phantom, suite_spec, Phantom};
use geoforest::forest::save_forest;
use geoforest::geodesic::{geodesic_transform, normalize_distance, GeodesicParams};
use geoforest::pipeline::{run_training, CaseData, PipelineConfig};
use geoforest::volume::{normalize_ct, ChannelKind, LEFT_KIDNEY, RIGHT_KIDNEY};
use geoforest::annotation::SeedAnnotation;
use geoforest_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn path_cstr(p: &Path) -> CString {
    cstr(p.to_str().unwrap())
}

fn last_error() -> String {
    let p = gf_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_phantom(seed: u64) -> Phantom {
    generate_phantom(&suite_spec(seed).coarsened(2).unwrap()).unwrap()
}

fn case_of(id: &str, p: &Phantom) -> CaseData {
    let g = *p.ct.geometry();
    let seeds = [0, 1].map(|i| SeedAnnotation::from_doc(&p.annotations[i], &g).unwrap().seeds());
    CaseData {
        id: id.into(),
        ct: p.ct.clone(),
        seeds,
        truth: Some(p.truth.clone()),
    }
}

fn small_config() -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.train.n_trees = 3;
    config.train.max_depth = 10;
    config.train.samples_per_class_per_volume = 400;
    config.train.n_candidate_features = 30;
    config
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/geoforest.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "typedef struct GfVolume GfVolume",
        "typedef struct GfForest GfForest",
        "typedef struct GfLabels GfLabels",
        "GF_STATUS_ANNOTATION = 7",
        "gf_segment(",
        "gf_geodesic(",
        "gf_last_error(",
        "gf_dice(",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    match Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99"]).arg(&header).status() {
        Ok(status) => assert!(status.success(), "header does not compile as C"),
        Err(e) => eprintln!("skipping C compile check: {e}"),
    }
}

#[test]
fn null_arguments_are_reported() {
    let mut vol: *mut GfVolume = ptr::null_mut();
    assert_eq!(unsafe { gf_volume_read(ptr::null(), &mut vol) }, GfStatus::Null);
    assert!(last_error().contains("path"));
    let p = cstr("x.mhd");
    assert_eq!(unsafe { gf_volume_read(p.as_ptr(), ptr::null_mut()) }, GfStatus::Null);
    assert!(unsafe { gf_volume_data(ptr::null()) }.is_null());
    assert_eq!(unsafe { gf_volume_len(ptr::null()) }, 0);
    assert_eq!(unsafe { gf_forest_num_trees(ptr::null()) }, 0);
    unsafe {
        gf_volume_free(ptr::null_mut());
        gf_labels_free(ptr::null_mut());
        gf_forest_free(ptr::null_mut());
    }
}

#[test]
fn missing_file_is_an_io_error_and_success_clears_it() {
    let dir = tempfile::tempdir().unwrap();
    let missing = path_cstr(&dir.path().join("absent.mhd"));
    let mut vol: *mut GfVolume = ptr::null_mut();
    assert_eq!(unsafe { gf_volume_read(missing.as_ptr(), &mut vol) }, GfStatus::Io);
    assert!(vol.is_null());
    assert!(last_error().contains("absent.mhd"));

    let dims = [2usize, 2, 1];
    let spacing = [1.0, 1.0, 2.0];
    let data = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(
        unsafe { gf_volume_new(dims.as_ptr(), spacing.as_ptr(), data.as_ptr(), 4, &mut vol) },
        GfStatus::Ok
    );
    assert!(gf_last_error().is_null());
    unsafe { gf_volume_free(vol) };
}

#[test]
fn volume_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [3usize, 2, 2];
    let spacing = [0.5, 0.75, 2.0];
    let data: Vec<f64> = (0..12).map(|i| i as f64 * 10.0 - 40.0).collect();
    let mut vol: *mut GfVolume = ptr::null_mut();
    unsafe {
        assert_eq!(
            gf_volume_new(dims.as_ptr(), spacing.as_ptr(), data.as_ptr(), data.len(), &mut vol),
            GfStatus::Ok
        );
        let path = path_cstr(&dir.path().join("v.mhd"));
        assert_eq!(gf_volume_write(vol, path.as_ptr()), GfStatus::Ok);
        let mut back: *mut GfVolume = ptr::null_mut();
        assert_eq!(gf_volume_read(path.as_ptr(), &mut back), GfStatus::Ok);
        let mut d = [0usize; 3];
        let mut s = [0.0f64; 3];
        assert_eq!(gf_volume_dims(back, d.as_mut_ptr()), GfStatus::Ok);
        assert_eq!(gf_volume_spacing(back, s.as_mut_ptr()), GfStatus::Ok);
        assert_eq!(d, dims);
        assert_eq!(s, spacing);
        let values = std::slice::from_raw_parts(gf_volume_data(back), gf_volume_len(back));
        assert_eq!(values, data.as_slice());
        gf_volume_free(back);
        gf_volume_free(vol);
    }
}

#[test]
fn wrong_data_length_is_a_geometry_error() {
    let dims = [2usize, 2, 2];
    let spacing = [1.0; 3];
    let data = [0.0; 7];
    let mut vol: *mut GfVolume = ptr::null_mut();
    let status = unsafe { gf_volume_new(dims.as_ptr(), spacing.as_ptr(), data.as_ptr(), 7, &mut vol) };
    assert_eq!(status, GfStatus::Geometry);
    assert!(vol.is_null());
}

#[test]
fn geodesic_matches_the_library() {
    let p = small_phantom(4);
    let [nx, ny, nz] = p.ct.dims();
    let dims = [nx, ny, nz];
    let json = cstr(&p.annotations[0].to_json());
    let mut ct: *mut GfVolume = ptr::null_mut();
    let mut out: *mut GfVolume = ptr::null_mut();
    unsafe {
        let spacing = p.ct.geometry().spacing;
        let data = p.ct.data();
        assert_eq!(
            gf_volume_new(dims.as_ptr(), spacing.as_ptr(), data.as_ptr(), data.len(), &mut ct),
            GfStatus::Ok
        );
        assert_eq!(gf_geodesic(ct, json.as_ptr(), ptr::null(), &mut out), GfStatus::Ok);

        let params = GeodesicParams::default();
        let window = PipelineConfig::default().window;
        let seeds = SeedAnnotation::from_doc(&p.annotations[0], p.ct.geometry()).unwrap().seeds();
        let intensity = normalize_ct(&p.ct, window[0], window[1]).unwrap().with_kind(ChannelKind::CtHu);
        let d = geodesic_transform(&intensity, &seeds.linear_indices(p.ct.geometry()), &params).unwrap();
        let expected = normalize_distance(&d, params.d_cap).unwrap();
        let got = std::slice::from_raw_parts(gf_volume_data(out), gf_volume_len(out));
        assert_eq!(got, expected.data());
        gf_volume_free(out);

        let mut bad = gf_geodesic_params_default();
        bad.connectivity = 18;
        assert_eq!(gf_geodesic(ct, json.as_ptr(), &bad, &mut out), GfStatus::Parameter);
        bad = gf_geodesic_params_default();
        bad.gamma = -1.0;
        assert_eq!(gf_geodesic(ct, json.as_ptr(), &bad, &mut out), GfStatus::Parameter);
        assert!(last_error().contains("gamma"));

        let figure_eight = cstr(r#"{"target":"right","slice_z":5,"polygon":[[5,5],[15,15],[15,5],[5,15]]}"#);
        assert_eq!(gf_geodesic(ct, figure_eight.as_ptr(), ptr::null(), &mut out), GfStatus::Annotation);
        let garbage = cstr("{not json");
        assert_eq!(gf_geodesic(ct, garbage.as_ptr(), ptr::null(), &mut out), GfStatus::Annotation);
        gf_volume_free(ct);
    }
}

#[test]
fn segmentation_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let train: Vec<CaseData> = [1, 2, 3].iter().map(|&s| case_of(&format!("t{s}"), &small_phantom(s))).collect();
    let config = small_config();
    let forest = run_training(&train, &config, 11).unwrap();
    let model_path = dir.path().join("model.json");
    save_forest(&forest, &model_path).unwrap();

    let test = small_phantom(7);
    geoforest::mhd::write_mhd(&test.ct, dir.path().join("ct.mhd")).unwrap();
    geoforest::mhd::write_label_mhd(&test.truth, dir.path().join("truth.mhd")).unwrap();
    let right = cstr(&test.annotations[0].to_json());
    let left = cstr(&test.annotations[1].to_json());

    unsafe {
        let mut f: *mut GfForest = ptr::null_mut();
        assert_eq!(gf_forest_load(path_cstr(&model_path).as_ptr(), &mut f), GfStatus::Ok);
        assert_eq!(gf_forest_num_trees(f), 3);
        let mut ct: *mut GfVolume = ptr::null_mut();
        assert_eq!(gf_volume_read(path_cstr(&dir.path().join("ct.mhd")).as_ptr(), &mut ct), GfStatus::Ok);
        let mut truth: *mut GfLabels = ptr::null_mut();
        assert_eq!(gf_labels_read(path_cstr(&dir.path().join("truth.mhd")).as_ptr(), &mut truth), GfStatus::Ok);

        let mut labels: *mut GfLabels = ptr::null_mut();
        assert_eq!(gf_segment(f, ct, right.as_ptr(), left.as_ptr(), ptr::null(), &mut labels), GfStatus::Ok);
        let mut d = [0usize; 3];
        assert_eq!(gf_labels_dims(labels, d.as_mut_ptr()), GfStatus::Ok);
        assert_eq!(d, test.ct.dims());
        let values = std::slice::from_raw_parts(gf_labels_data(labels), gf_labels_len(labels));
        assert!(values.iter().all(|&v| v <= LEFT_KIDNEY));
        for class in [RIGHT_KIDNEY, LEFT_KIDNEY] {
            let mut score = 0.0;
            assert_eq!(gf_dice(labels, truth, class, &mut score), GfStatus::Ok);
            assert!(score > 0.6, "class {class}: dice {score}");
        }

        let out_path = path_cstr(&dir.path().join("pred.mhd"));
        assert_eq!(gf_labels_write(labels, out_path.as_ptr()), GfStatus::Ok);
        let mut back: *mut GfLabels = ptr::null_mut();
        assert_eq!(gf_labels_read(out_path.as_ptr(), &mut back), GfStatus::Ok);
        let mut same = 0.0;
        assert_eq!(gf_dice(back, labels, RIGHT_KIDNEY, &mut same), GfStatus::Ok);
        assert_eq!(same, 1.0);

        // Outlines swapped between the kidneys.
        let mut other: *mut GfLabels = ptr::null_mut();
        assert_eq!(gf_segment(f, ct, left.as_ptr(), right.as_ptr(), ptr::null(), &mut other), GfStatus::Annotation);
        assert!(last_error().contains("right_json"));

        // A config asking for the CT-only layout does not fit this model.
        let baseline = cstr(r#"{"mode": "baseline_ct_only"}"#);
        assert_eq!(gf_segment(f, ct, right.as_ptr(), left.as_ptr(), baseline.as_ptr(), &mut other), GfStatus::Model);
        assert!(last_error().contains("channel layout mismatch"));
        let unknown = cstr(r#"{"trees": 3}"#);
        assert_eq!(gf_segment(f, ct, right.as_ptr(), left.as_ptr(), unknown.as_ptr(), &mut other), GfStatus::Format);
        assert!(other.is_null());

        gf_labels_free(back);
        gf_labels_free(labels);
        gf_labels_free(truth);
        gf_volume_free(ct);
        gf_forest_free(f);
    }
}

#[test]
fn dice_rejects_mismatched_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_phantom(1);
    let b = generate_phantom(&suite_spec(1).coarsened(4).unwrap()).unwrap();
    geoforest::mhd::write_label_mhd(&a.truth, dir.path().join("a.mhd")).unwrap();
    geoforest::mhd::write_label_mhd(&b.truth, dir.path().join("b.mhd")).unwrap();
    unsafe {
        let mut la: *mut GfLabels = ptr::null_mut();
        let mut lb: *mut GfLabels = ptr::null_mut();
        assert_eq!(gf_labels_read(path_cstr(&dir.path().join("a.mhd")).as_ptr(), &mut la), GfStatus::Ok);
        assert_eq!(gf_labels_read(path_cstr(&dir.path().join("b.mhd")).as_ptr(), &mut lb), GfStatus::Ok);
        let mut score = -1.0;
        assert_eq!(gf_dice(la, lb, RIGHT_KIDNEY, &mut score), GfStatus::Parameter);
        assert_eq!(score, -1.0);
        gf_labels_free(la);
        gf_labels_free(lb);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(gf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
