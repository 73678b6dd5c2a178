use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use voxelstrip::metrics;
use voxelstrip::phantom::{generate, PhantomConfig};
use voxelstrip::predictor::{extract_brain, Ensemble, PredictOptions};
use voxelstrip::unet::{build, save_model, NetConfig};
use voxelstrip::volume::{read_nifti, write_mask};
use voxelstrip::{BrainMask, Grid};
use voxelstrip_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = vs_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(vs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn volume_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [4usize, 3, 2];
    let spacing = [1.0, 1.5, 2.0];
    let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.25 - 3.0).collect();
    unsafe {
        let mut vol = ptr::null_mut();
        assert_eq!(vs_volume_new(dims.as_ptr(), spacing.as_ptr(), data.as_ptr(), &mut vol), VsStatus::Ok);
        let path = cpath(&dir.path().join("v.nii.gz"));
        assert_eq!(vs_volume_write(vol, path.as_ptr(), 1), VsStatus::Ok);
        vs_volume_free(vol);

        let mut back = ptr::null_mut();
        assert_eq!(vs_volume_read(path.as_ptr(), &mut back), VsStatus::Ok);
        let mut d = [0usize; 3];
        assert_eq!(vs_volume_dims(back, d.as_mut_ptr()), VsStatus::Ok);
        assert_eq!(d, dims);
        let got = std::slice::from_raw_parts(vs_volume_data(back), 24);
        assert_eq!(got, data.as_slice());
        vs_volume_free(back);
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        let mut vol = ptr::null_mut();
        assert_eq!(vs_volume_read(ptr::null(), &mut vol), VsStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert!(vol.is_null());
        assert!(vs_volume_data(ptr::null()).is_null());
        assert_eq!(vs_mask_count(ptr::null()), 0);
        assert_eq!(vs_ensemble_len(ptr::null()), 0);
        vs_volume_free(ptr::null_mut());
        vs_mask_free(ptr::null_mut());
        vs_ensemble_free(ptr::null_mut());
        let mut out = 0.0;
        assert_eq!(vs_dice(ptr::null(), ptr::null(), &mut out), VsStatus::NullPointer);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cpath(&dir.path().join("absent.nii"));
    let junk_path = dir.path().join("junk.hdbw");
    std::fs::write(&junk_path, b"NOPE0000").unwrap();
    std::fs::write(dir.path().join("junk.cfg"), "depth = 2\nbase_width = 4\n").unwrap();
    let junk = cpath(&junk_path);
    unsafe {
        let mut vol = ptr::null_mut();
        assert_eq!(vs_volume_read(missing.as_ptr(), &mut vol), VsStatus::Io);
        assert!(last_error().contains("absent.nii"));

        let paths = [junk.as_ptr()];
        let mut ens = ptr::null_mut();
        assert_eq!(vs_ensemble_load(paths.as_ptr(), 1, &mut ens), VsStatus::Model);
        assert!(ens.is_null());

        let dims = [2usize, 2, 2];
        let zero = [0.0, 1.0, 1.0];
        let data = [0.0f32; 8];
        assert_eq!(vs_volume_new(dims.as_ptr(), zero.as_ptr(), data.as_ptr(), &mut vol), VsStatus::Format);
    }
}

#[test]
fn metrics_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::with_spacing([6, 6, 6], [1.0, 1.0, 2.0]).unwrap();
    let a = BrainMask::new(grid.clone(), (0..216).map(|i| u8::from(i % 6 < 4 && i / 36 < 5)).collect()).unwrap();
    let b = BrainMask::new(grid.clone(), (0..216).map(|i| u8::from(i % 6 > 0 && i / 36 > 0)).collect()).unwrap();
    let (pa, pb, pe) = (dir.path().join("a.nii"), dir.path().join("b.nii"), dir.path().join("e.nii"));
    write_mask(&a, &pa, false).unwrap();
    write_mask(&b, &pb, false).unwrap();
    write_mask(&BrainMask::empty(grid), &pe, false).unwrap();
    unsafe {
        let (mut ma, mut mb, mut me) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
        assert_eq!(vs_mask_read(cpath(&pa).as_ptr(), &mut ma), VsStatus::Ok);
        assert_eq!(vs_mask_read(cpath(&pb).as_ptr(), &mut mb), VsStatus::Ok);
        assert_eq!(vs_mask_read(cpath(&pe).as_ptr(), &mut me), VsStatus::Ok);
        assert_eq!(vs_mask_count(ma), a.count());

        let mut d = 0.0;
        assert_eq!(vs_dice(ma, mb, &mut d), VsStatus::Ok);
        assert_eq!(d, metrics::dice(&a, &b).unwrap());
        let mut h = 0.0;
        assert_eq!(vs_hd95(ma, mb, &mut h), VsStatus::Ok);
        assert_eq!(h, metrics::hd95(&a, &b, [1.0, 1.0, 2.0]).unwrap());
        assert_eq!(vs_hd95(ma, me, &mut h), VsStatus::EmptyMask);

        for m in [ma, mb, me] {
            vs_mask_free(m);
        }
    }
}

#[test]
fn extraction_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetConfig::new(2, 4);
    let model = dir.path().join("m.hdbw");
    save_model(&model, &net, &build(&net, 5).unwrap()).unwrap();
    let cfg = PhantomConfig::default();
    let ph = generate(&cfg, 0).unwrap();
    let img = dir.path().join("img.nii.gz");
    voxelstrip::volume::write_nifti(&ph.volume, &img, true).unwrap();

    let native = read_nifti(&img).unwrap();
    let ens = Ensemble::load(&[&model]).unwrap();
    let opts = PredictOptions {
        keep_probability: true,
        ..PredictOptions::default()
    };
    let expected = extract_brain(&native, &ens, &opts).unwrap();

    unsafe {
        let m = cpath(&model);
        let paths = [m.as_ptr()];
        let mut e = ptr::null_mut();
        assert_eq!(vs_ensemble_load(paths.as_ptr(), 1, &mut e), VsStatus::Ok);
        assert_eq!(vs_ensemble_len(e), 1);
        let mut v = ptr::null_mut();
        assert_eq!(vs_volume_read(cpath(&img).as_ptr(), &mut v), VsStatus::Ok);
        let (mut mask, mut prob) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(vs_extract(e, v, 1, 0, &mut mask, &mut prob), VsStatus::Ok);

        let mut d = [0usize; 3];
        assert_eq!(vs_mask_dims(mask, d.as_mut_ptr()), VsStatus::Ok);
        assert_eq!(d, cfg.dims);
        let got = std::slice::from_raw_parts(vs_mask_data(mask), expected.mask.data.len());
        assert_eq!(got, expected.mask.data.as_slice());
        let p = expected.probability.unwrap();
        assert_eq!(std::slice::from_raw_parts(vs_volume_data(prob), p.data.len()), p.data.as_slice());

        let out = cpath(&dir.path().join("out_mask.nii.gz"));
        assert_eq!(vs_mask_write(mask, out.as_ptr(), 1), VsStatus::Ok);
        assert_eq!(metrics::load_mask(&dir.path().join("out_mask.nii.gz")).unwrap(), expected.mask);

        let mut only_mask = ptr::null_mut();
        assert_eq!(vs_extract(e, v, 0, 0, &mut only_mask, ptr::null_mut()), VsStatus::Ok);
        assert!(!only_mask.is_null());

        vs_mask_free(only_mask);
        vs_mask_free(mask);
        vs_volume_free(prob);
        vs_volume_free(v);
        vs_ensemble_free(e);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/voxelstrip.h")).unwrap();
    for f in [
        "vs_last_error_message",
        "vs_version",
        "vs_volume_read",
        "vs_volume_new",
        "vs_volume_write",
        "vs_volume_dims",
        "vs_volume_data",
        "vs_volume_free",
        "vs_mask_read",
        "vs_mask_write",
        "vs_mask_dims",
        "vs_mask_data",
        "vs_mask_count",
        "vs_mask_free",
        "vs_ensemble_load",
        "vs_ensemble_len",
        "vs_ensemble_free",
        "vs_extract",
        "vs_dice",
        "vs_hd95",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct VsEnsemble VsEnsemble;"));
    assert!(header.contains("VS_STATUS_EMPTY_MASK = 7"));
}
