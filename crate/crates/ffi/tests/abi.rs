use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use voxdiff_ffi::*;

fn last_error() -> String {
    let p = voxdiff_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn schedule_handle_round_trip() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(voxdiff_schedule_linear(1000, 1e-4, 0.02, &mut s), VoxdiffStatus::Ok);
        let mut ab = 0.0;
        assert_eq!(voxdiff_schedule_alpha_bar(s, 1, &mut ab), VoxdiffStatus::Ok);
        assert!((ab - 0.9999).abs() < 1e-15);
        assert_eq!(voxdiff_schedule_alpha_bar(s, 0, &mut ab), VoxdiffStatus::InvalidArgument);
        assert!(last_error().contains("outside"));
        assert_eq!(voxdiff_schedule_alpha_bar(s, 1, ptr::null_mut()), VoxdiffStatus::NullPointer);
        voxdiff_schedule_free(s);
        voxdiff_schedule_free(ptr::null_mut());
        let mut bad = ptr::null_mut();
        assert_ne!(voxdiff_schedule_linear(0, 1e-4, 0.02, &mut bad), VoxdiffStatus::Ok);
        assert!(bad.is_null());
    }
}

#[test]
fn grids_metrics_and_io() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let dims = [4usize, 4, 4];
        let mut cells = [0u8; 64];
        for z in 1..3 {
            for y in 1..3 {
                for x in 1..3 {
                    cells[x + 4 * (y + 4 * z)] = 1;
                }
            }
        }
        let mut g = ptr::null_mut();
        assert_eq!(voxdiff_grid_from_occupancy(dims.as_ptr(), cells.as_ptr(), &mut g), VoxdiffStatus::Ok);
        let mut n = 0;
        assert_eq!(voxdiff_grid_occupied(g, &mut n), VoxdiffStatus::Ok);
        assert_eq!(n, 8);

        let file = cpath(&dir.path().join("g.icvx"));
        assert_eq!(voxdiff_grid_write(g, file.as_ptr()), VoxdiffStatus::Ok);
        let mut h = ptr::null_mut();
        assert_eq!(voxdiff_grid_read(file.as_ptr(), &mut h), VoxdiffStatus::Ok);
        let mut d = [0usize; 3];
        assert_eq!(voxdiff_grid_dims(h, d.as_mut_ptr()), VoxdiffStatus::Ok);
        assert_eq!(d, dims);
        let mut vals = vec![0f32; 64];
        assert_eq!(voxdiff_grid_values(h, vals.as_mut_ptr(), 64), VoxdiffStatus::Ok);
        assert_eq!(vals.iter().filter(|&&v| v == 1.0).count(), 8);
        assert_eq!(voxdiff_grid_values(h, vals.as_mut_ptr(), 63), VoxdiffStatus::DimMismatch);

        let (mut iou, mut f) = (0.0, 0.0);
        assert_eq!(voxdiff_iou_fscore(g, h, 0.01, &mut iou, &mut f), VoxdiffStatus::Ok);
        assert_eq!(iou, 1.0);
        assert_eq!(f, 1.0);
        let mut cd = -1.0;
        assert_eq!(voxdiff_chamfer(g, h, 256, 3, &mut cd), VoxdiffStatus::Ok);
        assert!(cd >= 0.0 && cd < 0.05, "{cd}");

        let missing = cpath(&dir.path().join("missing.icvx"));
        let mut m = ptr::null_mut();
        assert_eq!(voxdiff_grid_read(missing.as_ptr(), &mut m), VoxdiffStatus::Io);
        assert!(last_error().contains("missing.icvx"));
        assert_eq!(voxdiff_grid_read(ptr::null(), &mut m), VoxdiffStatus::NullPointer);

        let empty = [0u8; 64];
        let mut e = ptr::null_mut();
        assert_eq!(voxdiff_grid_from_occupancy(dims.as_ptr(), empty.as_ptr(), &mut e), VoxdiffStatus::Ok);
        assert_eq!(voxdiff_chamfer(e, g, 16, 0, &mut cd), VoxdiffStatus::EmptyShape);
        voxdiff_grid_free(e);
        voxdiff_grid_free(g);
        voxdiff_grid_free(h);
    }
}

#[test]
fn slerp_endpoints_and_norm() {
    let a = [1.0, 0.0, 0.0];
    let b = [0.0, 1.0, 0.0];
    let mut o = [0.0; 3];
    unsafe {
        assert_eq!(voxdiff_slerp(a.as_ptr(), b.as_ptr(), 3, 0.0, o.as_mut_ptr()), VoxdiffStatus::Ok);
        assert_eq!(o, a);
        assert_eq!(voxdiff_slerp(a.as_ptr(), b.as_ptr(), 3, 0.5, o.as_mut_ptr()), VoxdiffStatus::Ok);
        assert!((o.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let c = [-1.0, 0.0, 0.0];
        assert_eq!(voxdiff_slerp(a.as_ptr(), c.as_ptr(), 3, 0.5, o.as_mut_ptr()), VoxdiffStatus::InvalidArgument);
    }
}

#[test]
fn denoiser_sampling_and_tally() {
    use voxdiff::denoiser::{DenoiserConfig, DenoiserNet};
    use voxdiff::humaneval::{synthetic_session, write_jsonl};
    let dir = tempfile::tempdir().unwrap();
    let cfg = DenoiserConfig { grid: 4, width: 4, hidden: 8, time_dim: 8, cond_dim: 6, ec_dim: 5, ..Default::default() };
    let net = DenoiserNet::new(cfg, &mut voxdiff::rng::stream(1, "init")).unwrap();
    let ckpt = dir.path().join("d.ickp");
    net.save(&ckpt).unwrap();
    let side = serde_json::json!({ "config": { "params": { "recipe": voxdiff::pipeline::DdpmRecipe {
        timesteps: 10, denoiser: cfg, ..Default::default() } } } });
    std::fs::write(dir.path().join("d.ickp.json"), side.to_string()).unwrap();
    unsafe {
        let mut d = ptr::null_mut();
        let p = cpath(&ckpt);
        assert_eq!(voxdiff_denoiser_load(p.as_ptr(), &mut d), VoxdiffStatus::Ok);
        let (mut cd, mut ed, mut gd) = (0, 0, 0);
        assert_eq!(voxdiff_denoiser_dims(d, &mut cd, &mut ed, &mut gd), VoxdiffStatus::Ok);
        assert_eq!((cd, ed, gd), (6, 5, 4));
        let draw = |cisp: *const f64, ec: *const f64, w: f64| {
            let mut g = ptr::null_mut();
            assert_eq!(voxdiff_sample(d, cisp, 6, ec, 5, w, 9, &mut g), VoxdiffStatus::Ok);
            let mut v = vec![0f32; 64];
            assert_eq!(voxdiff_grid_values(g, v.as_mut_ptr(), 64), VoxdiffStatus::Ok);
            voxdiff_grid_free(g);
            v
        };
        let (nc, ne) = (net.null_cisp(), net.null_ec());
        assert_eq!(draw(ptr::null(), ptr::null(), 1.0), draw(nc.as_ptr(), ne.as_ptr(), 1.5));
        let short = [0.0; 2];
        let mut g = ptr::null_mut();
        assert_eq!(voxdiff_sample(d, short.as_ptr(), 2, ptr::null(), 0, 1.5, 0, &mut g), VoxdiffStatus::DimMismatch);
        voxdiff_denoiser_free(d);
    }

    let mut h = std::collections::BTreeMap::new();
    h.insert("box".to_string(), [0, 0, 1, 1, 1, 1]);
    let (pairs, key, votes) = synthetic_session(&h, &h, 0).unwrap();
    let paths: Vec<PathBuf> = ["p.jsonl", "k.jsonl", "v.jsonl"].iter().map(|n| dir.path().join(n)).collect();
    write_jsonl(&paths[0], &pairs).unwrap();
    write_jsonl(&paths[1], &key).unwrap();
    write_jsonl(&paths[2], &votes).unwrap();
    let c: Vec<CString> = paths.iter().map(|p| cpath(p)).collect();
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(voxdiff_tally_json(c[0].as_ptr(), c[1].as_ptr(), c[2].as_ptr(), &mut s), VoxdiffStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        assert_eq!(v["realism"]["overall"]["majority"], 75.0);
        voxdiff_string_free(s);
        write_jsonl(&paths[2], &votes[1..]).unwrap();
        assert_eq!(voxdiff_tally_json(c[0].as_ptr(), c[1].as_ptr(), c[2].as_ptr(), &mut s), VoxdiffStatus::IncompleteSession);
    }
}

fn exported_symbols() -> Vec<String> {
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    src.lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap().to_string())
        .collect()
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/voxdiff.h")).unwrap();
    let syms = exported_symbols();
    assert!(syms.len() >= 18, "{syms:?}");
    for s in &syms {
        assert!(header.contains(&format!("{s}(")), "header lacks {s}");
    }
    assert!(header.contains("VOXDIFF_STATUS_INCOMPLETE_SESSION = 8"));
    assert!(header.contains("typedef struct VoxdiffGrid VoxdiffGrid;"));
}

/// Compiles a C program against the header and the static library.
#[test]
fn c_program_links_against_header() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libvoxdiff_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built (run cargo build first)", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "voxdiff.h"
int main(void) {
    VoxdiffSchedule *s = NULL;
    if (voxdiff_schedule_linear(1000, 1e-4, 0.02, &s) != VOXDIFF_STATUS_OK) return 1;
    double ab = 0.0;
    if (voxdiff_schedule_alpha_bar(s, 1000, &ab) != VOXDIFF_STATUS_OK) return 2;
    if (!(ab > 0.0 && ab < 1e-4)) return 3;
    if (voxdiff_schedule_alpha_bar(s, 1001, &ab) != VOXDIFF_STATUS_INVALID_ARGUMENT) return 4;
    if (voxdiff_last_error() == NULL || strlen(voxdiff_last_error()) == 0) return 5;
    voxdiff_schedule_free(s);
    size_t dims[3] = {2, 2, 2};
    unsigned char cells[8] = {1, 0, 0, 0, 0, 0, 0, 1};
    VoxdiffGrid *g = NULL;
    if (voxdiff_grid_from_occupancy(dims, cells, &g) != VOXDIFF_STATUS_OK) return 6;
    size_t n = 0;
    voxdiff_grid_occupied(g, &n);
    voxdiff_grid_free(g);
    printf("%s %zu\n", voxdiff_version(), n);
    return n == 2 ? 0 : 7;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("t");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status();
    let Ok(status) = status else {
        eprintln!("skipping: no C compiler");
        return;
    };
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), format!("{} 2", env!("CARGO_PKG_VERSION")));
}
