use std::ffi::{CStr, CString};
use std::ptr;

use candle_core::{Device, Tensor};
use dva::*;
use dva_core::nets::{Model, ModelConfig};
use dva_core::pipeline;

const SIZE: usize = 16;

fn saved_model(dir: &std::path::Path) -> (Model, CString) {
    let model = Model::new(&ModelConfig::tiny(SIZE), 7).unwrap();
    let path = dir.join("tiny.ckpt");
    model.save(&path, &Default::default()).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn frames(n: usize, seed: u32) -> Vec<f32> {
    (0..n * 3 * SIZE * SIZE)
        .map(|i| {
            (((i as u32).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 2001) as f32 / 1000.0
                - 1.0
        })
        .collect()
}

fn last_error() -> String {
    let need = unsafe { dva_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as std::ffi::c_char; need];
    unsafe { dva_last_error(buf.as_mut_ptr(), need) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn encode_decode_matches_the_rust_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let data = frames(2, 1);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dva_model_load(path.as_ptr(), &mut m), DvaStatus::Ok);
        let mut size = 0;
        assert_eq!(dva_model_image_size(m, &mut size), DvaStatus::Ok);
        assert_eq!(size, SIZE);

        let mut b = ptr::null_mut();
        assert_eq!(dva_encode(m, data.as_ptr(), 2, 4, &mut b), DvaStatus::Ok);
        let mut n = 0;
        assert_eq!(dva_bundle_num_frames(b, &mut n), DvaStatus::Ok);
        assert_eq!(n, 2);

        let mut out = vec![0f32; data.len()];
        assert_eq!(dva_decode(m, b, out.as_mut_ptr(), out.len()), DvaStatus::Ok);

        let t = Tensor::from_slice(&data, (2, 3, SIZE, SIZE), &Device::Cpu).unwrap();
        let reference = pipeline::decode_video(
            &model,
            &pipeline::encode_video(&model, &t, 4).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(
            reference.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            out
        );

        let bundle_dir = CString::new(dir.path().join("bundle").to_str().unwrap()).unwrap();
        assert_eq!(dva_bundle_write(b, bundle_dir.as_ptr()), DvaStatus::Ok);
        let mut b2 = ptr::null_mut();
        assert_eq!(dva_bundle_read(bundle_dir.as_ptr(), &mut b2), DvaStatus::Ok);
        let mut out2 = vec![0f32; data.len()];
        assert_eq!(
            dva_decode(m, b2, out2.as_mut_ptr(), out2.len()),
            DvaStatus::Ok
        );
        assert_eq!(out, out2);

        let mut swapped = vec![0f32; data.len()];
        assert_eq!(
            dva_swap(
                m,
                b,
                b2,
                DvaSwapKind::Motion,
                swapped.as_mut_ptr(),
                swapped.len()
            ),
            DvaStatus::Ok
        );
        assert_eq!(
            dva_decode_random_noise(m, b, 3, swapped.as_mut_ptr(), swapped.len()),
            DvaStatus::Ok
        );
        assert!(swapped.iter().all(|v| v.is_finite()));

        dva_bundle_free(b);
        dva_bundle_free(b2);
        dva_model_free(m);
    }
}

#[test]
fn failures_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_model(dir.path());
    unsafe {
        let mut m = ptr::null_mut();
        let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(dva_model_load(missing.as_ptr(), &mut m), DvaStatus::Io);
        assert!(last_error().contains("none.ckpt"));
        assert!(m.is_null());

        assert_eq!(dva_model_load(ptr::null(), &mut m), DvaStatus::NullPointer);
        assert_eq!(dva_model_load(path.as_ptr(), &mut m), DvaStatus::Ok);
        assert_eq!(last_error(), "");

        let data = frames(1, 2);
        let mut b = ptr::null_mut();
        assert_eq!(
            dva_encode(m, data.as_ptr(), 0, 4, &mut b),
            DvaStatus::InvalidArgument
        );
        assert_eq!(
            dva_encode(m, data.as_ptr(), 1, 0, &mut b),
            DvaStatus::Config
        );
        assert_eq!(dva_encode(m, data.as_ptr(), 1, 4, &mut b), DvaStatus::Ok);

        let mut short = vec![0f32; 10];
        assert_eq!(
            dva_decode(m, b, short.as_mut_ptr(), short.len()),
            DvaStatus::BufferSize
        );
        assert!(last_error().contains("10"));

        let mut buf = [0 as std::ffi::c_char; 4];
        let need = dva_last_error(buf.as_mut_ptr(), buf.len());
        assert!(need > 4);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes().len(), 3);

        dva_bundle_free(b);
        dva_model_free(m);
        dva_model_free(ptr::null_mut());
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(dva_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
