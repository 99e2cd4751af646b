use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use latent_vl::config::{DiffusionConfig, ModelConfig, RunConfig};
use latent_vl_ffi::*;

fn tiny_toml() -> CString {
    let mut cfg = RunConfig::toy();
    cfg.model = ModelConfig {
        d_t: 16,
        d_v: 8,
        layers: 1,
        heads: 2,
        grid_h: 4,
        grid_w: 4,
        enc_heads: 2,
        lq_heads: 2,
        d_p: 8,
        ..ModelConfig::default()
    };
    cfg.select.w = 2;
    cfg.reason.k = 2;
    cfg.loss.prefix_len = 4;
    cfg.diffusion = DiffusionConfig {
        channels: vec![4],
        latent_hw: 4,
        attn_dim: 8,
        t_diff: 50,
        max_thoughts: 4,
        ..DiffusionConfig::default()
    };
    cfg.data.max_objects = 3;
    for i in 0..4 {
        cfg.stage_mut(i).epochs = 2;
    }
    CString::new(cfg.to_toml_string().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = lv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn status_codes_and_messages() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(lv_config_preset(c("nope").as_ptr(), &mut cfg), LvStatus::Config);
        assert!(cfg.is_null());
        assert!(last_error().contains("nope"));

        assert_eq!(lv_config_preset(ptr::null(), &mut cfg), LvStatus::NullPointer);
        assert_eq!(lv_config_from_toml(c("seed = [").as_ptr(), &mut cfg), LvStatus::Config);
        let bad = [0xffu8, 0];
        assert_eq!(lv_config_preset(bad.as_ptr().cast(), &mut cfg), LvStatus::InvalidUtf8);

        assert_eq!(lv_config_preset(c("toy").as_ptr(), &mut cfg), LvStatus::Ok);
        assert!(lv_last_error().is_null());
        assert_eq!(lv_config_set_epochs(ptr::null_mut(), 3), LvStatus::NullPointer);
        assert_eq!(lv_config_set_epochs(cfg, 3), LvStatus::Ok);
        lv_config_free(cfg);

        let mut ds = ptr::null_mut();
        assert_eq!(lv_dataset_load(c("/nonexistent/d.json").as_ptr(), &mut ds), LvStatus::Io);
        assert_eq!(lv_dataset_len(ptr::null()), 0);
        lv_dataset_free(ptr::null_mut());
        lv_model_free(ptr::null_mut());
        lv_config_free(ptr::null_mut());

        let v = CStr::from_ptr(lv_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn train_generate_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(lv_config_from_toml(tiny_toml().as_ptr(), &mut cfg), LvStatus::Ok, "{}", last_error());
        let mut ds = ptr::null_mut();
        assert_eq!(lv_dataset_generate(cfg, 4, 7, &mut ds), LvStatus::Ok);
        assert_eq!(lv_dataset_len(ds), 4);

        let archive = c(dir.path().join("d.json").to_str().unwrap());
        assert_eq!(lv_dataset_save(ds, archive.as_ptr()), LvStatus::Ok);
        let mut ds2 = ptr::null_mut();
        assert_eq!(lv_dataset_load(archive.as_ptr(), &mut ds2), LvStatus::Ok);
        assert_eq!(lv_dataset_len(ds2), 4);

        let mut model = ptr::null_mut();
        assert_eq!(lv_model_new(cfg, &mut model), LvStatus::Ok);
        let run = c(dir.path().join("run").to_str().unwrap());
        assert_eq!(lv_model_train(model, ds, run.as_ptr()), LvStatus::Ok, "{}", last_error());
        assert!(dir.path().join("run/stage_4.ccva").is_file());

        let mut acc = -1.0;
        assert_eq!(lv_model_accuracy(model, ds, &mut acc), LvStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));

        let mut len = 0;
        assert_eq!(lv_model_generate(model, ds, 0, ptr::null_mut(), 0, &mut len), LvStatus::BufferTooSmall);
        assert!(len > 0);
        let mut ids = vec![0u32; len];
        assert_eq!(lv_model_generate(model, ds, 0, ids.as_mut_ptr(), len, &mut len), LvStatus::Ok);
        assert_eq!(lv_model_generate(model, ds, 4, ids.as_mut_ptr(), len, &mut len), LvStatus::Argument);

        let (mut k, mut d) = (0, 0);
        assert_eq!(lv_model_thoughts(model, ds, 0, ptr::null_mut(), 0, &mut k, &mut d), LvStatus::BufferTooSmall);
        assert_eq!((k, d), (2, 16));
        let mut z = vec![0.0; k * d];
        assert_eq!(lv_model_thoughts(model, ds, 0, z.as_mut_ptr(), z.len(), &mut k, &mut d), LvStatus::Ok);
        assert!(z.iter().all(|v| v.is_finite()) && z.iter().any(|&v| v != 0.0));

        // a fresh model loaded from the saved weights reproduces the outputs
        let ck = c(dir.path().join("m.ccva").to_str().unwrap());
        assert_eq!(lv_model_save(model, ck.as_ptr()), LvStatus::Ok);
        let mut fresh = ptr::null_mut();
        assert_eq!(lv_model_new(cfg, &mut fresh), LvStatus::Ok);
        assert_eq!(lv_model_load(fresh, ck.as_ptr()), LvStatus::Ok);
        let mut ids2 = vec![0u32; len];
        let mut len2 = 0;
        assert_eq!(lv_model_generate(fresh, ds, 0, ids2.as_mut_ptr(), len, &mut len2), LvStatus::Ok);
        assert_eq!(ids, ids2);

        std::fs::write(dir.path().join("bad.ccva"), b"CCVA garbage").unwrap();
        let bad = c(dir.path().join("bad.ccva").to_str().unwrap());
        assert_eq!(lv_model_load(fresh, bad.as_ptr()), LvStatus::Format);

        lv_model_free(fresh);
        lv_model_free(model);
        lv_dataset_free(ds2);
        lv_dataset_free(ds);
        lv_config_free(cfg);
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "latent_vl.h"

int main(void) {
    LvConfig *cfg = NULL;
    if (lv_config_preset("bogus", &cfg) != LV_STATUS_CONFIG) return 1;
    if (lv_last_error() == NULL || strstr(lv_last_error(), "bogus") == NULL) return 2;
    if (lv_config_preset("toy", &cfg) != LV_STATUS_OK) return 3;
    LvDataset *ds = NULL;
    if (lv_dataset_generate(cfg, 3, 1, &ds) != LV_STATUS_OK) return 4;
    if (lv_dataset_len(ds) != 3) return 5;
    LvModel *m = NULL;
    if (lv_model_new(cfg, &m) != LV_STATUS_OK) return 6;
    size_t len = 0;
    if (lv_model_generate(m, ds, 0, NULL, 0, &len) != LV_STATUS_BUFFER_TOO_SMALL || len == 0) return 7;
    lv_model_free(m);
    lv_dataset_free(ds);
    lv_config_free(cfg);
    printf("ok %s\n", lv_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib_dir = target_dir();
    assert!(lib_dir.join("liblatent_vl_ffi.so").is_file(), "cdylib not built in {}", lib_dir.display());
    let exe = dir.path().join("main");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror"])
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg("-o")
        .arg(&exe)
        .arg(format!("-L{}", lib_dir.display()))
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-llatent_vl_ffi")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
