use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use tdnn_forge::config::{preset, Scale};
use tdnn_forge::numerics::Tensor;
use tdnn_forge::tdnn::{build_tdnn, tdnn_forward};
use tdnn_forge_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = tdnn_forge_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny(name: &str, seed: u64) -> *mut TdnnForgeModel {
    let mut m = ptr::null_mut();
    let st = unsafe { tdnn_forge_model_from_preset(cstr(name).as_ptr(), cstr("tiny").as_ptr(), seed, &mut m) };
    assert_eq!(st, TdnnForgeStatus::Ok);
    m
}

fn frames(n: usize, f: usize) -> Vec<f64> {
    (0..n * f).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect()
}

#[test]
fn preset_handle_matches_library() {
    let m = tiny("resnet-tdnn", 7);
    let cfg = preset("resnet-tdnn").unwrap().config.scaled(Scale::Tiny);
    let reference = build_tdnn(&cfg.tdnn_spec(), 7).unwrap();
    unsafe {
        assert_eq!(tdnn_forge_model_param_count(m), reference.param_count());
        assert_eq!(tdnn_forge_model_depth(m), 13);
        assert_eq!(tdnn_forge_model_out_dim(m), cfg.output.n_classes);
        assert_eq!(tdnn_forge_model_feat_dim(m), 40);

        let (n, f, k) = (12, 40, cfg.output.n_classes);
        let x = frames(n, f);
        let mut out = vec![0.0; n * k];
        assert_eq!(tdnn_forge_model_forward(m, x.as_ptr(), n, f, out.as_mut_ptr(), out.len()), TdnnForgeStatus::Ok);
        let seq = Tensor::new(vec![n, f], x).unwrap();
        let (want, _) = tdnn_forward(&reference, &reference.spec().window.windows(&seq).unwrap()).unwrap();
        assert_eq!(out, want.data());
        tdnn_forge_model_free(m);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("m.ckpt").to_str().unwrap());
    let m = tiny("cnn-tdnn", 3);
    unsafe {
        assert_eq!(tdnn_forge_model_save(m, path.as_ptr()), TdnnForgeStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(tdnn_forge_model_load(path.as_ptr(), &mut back), TdnnForgeStatus::Ok);
        assert_eq!(tdnn_forge_model_param_count(back), tdnn_forge_model_param_count(m));

        let (n, f) = (5, 40);
        let k = tdnn_forge_model_out_dim(m);
        let x = frames(n, f);
        let (mut a, mut b) = (vec![0.0; n * k], vec![0.0; n * k]);
        tdnn_forge_model_forward(m, x.as_ptr(), n, f, a.as_mut_ptr(), a.len());
        tdnn_forge_model_forward(back, x.as_ptr(), n, f, b.as_mut_ptr(), b.len());
        assert_eq!(a, b);
        tdnn_forge_model_free(m);
        tdnn_forge_model_free(back);
    }
}

#[test]
fn json_config() {
    let cfg = preset("tdnn-baseline").unwrap().config.scaled(Scale::Tiny);
    let json = cstr(&cfg.to_json());
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(tdnn_forge_model_from_json(json.as_ptr(), 0, &mut m), TdnnForgeStatus::Ok);
        assert_eq!(tdnn_forge_model_depth(m), 5);
        tdnn_forge_model_free(m);

        let bad = cstr(r#"{"tdnn": {"widht": 3}}"#);
        let mut m = ptr::null_mut();
        assert_eq!(tdnn_forge_model_from_json(bad.as_ptr(), 0, &mut m), TdnnForgeStatus::Config);
        assert!(m.is_null());
        assert!(last_error().contains("config error"));
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut m = ptr::null_mut();
        let st = tdnn_forge_model_from_preset(cstr("no-such").as_ptr(), ptr::null(), 0, &mut m);
        assert_eq!(st, TdnnForgeStatus::InvalidArgument);
        assert!(last_error().contains("no-such"));

        let st = tdnn_forge_model_from_preset(cstr("tdnn-baseline").as_ptr(), cstr("huge").as_ptr(), 0, &mut m);
        assert_eq!(st, TdnnForgeStatus::InvalidArgument);

        assert_eq!(
            tdnn_forge_model_from_preset(ptr::null(), ptr::null(), 0, &mut m),
            TdnnForgeStatus::NullPointer
        );
        assert_eq!(
            tdnn_forge_model_load(cstr("/nonexistent/x.ckpt").as_ptr(), &mut m),
            TdnnForgeStatus::Io
        );

        let m = tiny("tdnn-baseline", 0);
        let x = frames(4, 39);
        let mut out = vec![0.0; 1000];
        let st = tdnn_forge_model_forward(m, x.as_ptr(), 4, 39, out.as_mut_ptr(), out.len());
        assert_eq!(st, TdnnForgeStatus::Dimension);
        let x = frames(4, 40);
        let st = tdnn_forge_model_forward(m, x.as_ptr(), 4, 40, out.as_mut_ptr(), 1);
        assert_eq!(st, TdnnForgeStatus::Dimension);
        assert!(last_error().contains("need"));
        let st = tdnn_forge_model_forward(m, x.as_ptr(), 0, 40, out.as_mut_ptr(), out.len());
        assert_eq!(st, TdnnForgeStatus::Dimension);

        let st = tdnn_forge_model_forward(m, x.as_ptr(), 4, 40, out.as_mut_ptr(), out.len());
        assert_eq!(st, TdnnForgeStatus::Ok);
        assert!(tdnn_forge_last_error().is_null());

        assert_eq!(tdnn_forge_model_param_count(ptr::null()), 0);
        tdnn_forge_model_free(ptr::null_mut());
        tdnn_forge_model_free(m);
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include/tdnn_forge.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["tdnn_forge_model_forward", "tdnn_forge_last_error", "TDNN_FORGE_STATUS_NULL_POINTER"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"tdnn_forge.h\"\n\
         int main(void) {\n\
           TdnnForgeModel *m = 0;\n\
           if (tdnn_forge_model_from_preset(\"tdnn-baseline\", \"tiny\", 0, &m) != TDNN_FORGE_STATUS_OK) return 1;\n\
           size_t n = tdnn_forge_model_param_count(m);\n\
           tdnn_forge_model_free(m);\n\
           return n == 0;\n\
         }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected the header"),
        Err(e) => eprintln!("no C compiler, skipping syntax check: {e}"),
    }
}
