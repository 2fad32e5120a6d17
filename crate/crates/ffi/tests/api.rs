use std::ffi::{CStr, CString};
use std::ptr;

use bkd_ffi::*;

fn last_error() -> String {
    let p = bkd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn grid() -> (Vec<f64>, Vec<u32>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..49 {
        let (a, b) = (f64::from(i % 7) / 6.0, f64::from(i / 7) / 6.0);
        x.extend([a, b]);
        y.push(u32::from(a > b));
    }
    (x, y)
}

unsafe fn mlp(widths: &[usize], act: BkdActivation, seed: u64) -> *mut BkdModel {
    let mut m = ptr::null_mut();
    assert_eq!(bkd_mlp_new(widths.as_ptr(), widths.len(), act, seed, &mut m), BkdStatus::Ok);
    m
}

#[test]
fn train_evaluate_and_round_trip() {
    unsafe {
        let (x, y) = grid();
        let mut ds = ptr::null_mut();
        assert_eq!(bkd_dataset_classification(x.as_ptr(), 49, 2, y.as_ptr(), 2, &mut ds), BkdStatus::Ok);
        assert_eq!(bkd_dataset_len(ds), 49);

        let teacher = mlp(&[2, 12, 2], BkdActivation::Tanh, 3);
        let student = mlp(&[2, 3, 2], BkdActivation::Relu, 4);
        let mut kind = BkdModelKind::Polynomial;
        let mut params = 0;
        assert_eq!(bkd_model_info(student, &mut kind, ptr::null_mut(), ptr::null_mut(), &mut params), BkdStatus::Ok);
        assert_eq!((kind, params), (BkdModelKind::Mlp, 2 * 3 + 3 + 3 * 2 + 2));

        let mut p = bkd_params_default();
        p.train_epochs = 20;
        p.learning_rate = 0.1;
        p.batch_size = 8;
        p.hyper_epochs = 1;
        p.perturb_steps = 2;
        assert_eq!(bkd_train(BkdMode::Scratch, teacher, ptr::null(), ds, ptr::null(), &p, ptr::null_mut(), ptr::null_mut()), BkdStatus::Ok);
        let (mut loss, mut acc) = (0.0, 0.0);
        assert_eq!(bkd_evaluate(teacher, ds, &mut loss, &mut acc), BkdStatus::Ok);
        assert!(acc > 0.9, "teacher accuracy {acc}");

        let (mut l2, mut a2) = (f64::NAN, f64::NAN);
        assert_eq!(bkd_train(BkdMode::BackwardKd, student, teacher, ds, ds, &p, &mut l2, &mut a2), BkdStatus::Ok);
        let (mut l3, mut a3) = (0.0, 0.0);
        assert_eq!(bkd_evaluate(student, ds, &mut l3, &mut a3), BkdStatus::Ok);
        assert_eq!((l2, a2), (l3, a3));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("s.bkd").to_str().unwrap()).unwrap();
        assert_eq!(bkd_model_save(student, path.as_ptr()), BkdStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(bkd_model_load(path.as_ptr(), &mut back), BkdStatus::Ok);
        let (mut ya, mut yb) = (vec![0.0; 98], vec![0.0; 98]);
        assert_eq!(bkd_model_forward(student, x.as_ptr(), 49, ya.as_mut_ptr(), 98), BkdStatus::Ok);
        assert_eq!(bkd_model_forward(back, x.as_ptr(), 49, yb.as_mut_ptr(), 98), BkdStatus::Ok);
        assert_eq!(ya, yb);

        let mut moved = vec![0.0; 98];
        let (mut before, mut after) = (vec![0.0; 49], vec![0.0; 49]);
        p.clip_lo = 0.0;
        p.clip_hi = 1.0;
        assert_eq!(
            bkd_generate_auxiliary(student, teacher, x.as_ptr(), 49, &p, 2.0, moved.as_mut_ptr(), before.as_mut_ptr(), after.as_mut_ptr()),
            BkdStatus::Ok
        );
        assert!(before.iter().zip(&after).all(|(b, a)| a >= b));
        assert!(moved.iter().all(|v| (0.0..=1.0).contains(v)));

        for m in [student, teacher, back] {
            bkd_model_free(m);
        }
        bkd_dataset_free(ds);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(bkd_mlp_new(ptr::null(), 3, BkdActivation::Relu, 0, &mut m), BkdStatus::NullArgument);
        assert!(last_error().contains("widths"));
        let w = [4usize];
        assert_eq!(bkd_mlp_new(w.as_ptr(), 1, BkdActivation::Relu, 0, &mut m), BkdStatus::InvalidArgument);

        let missing = CString::new("/no/such/model.bkd").unwrap();
        assert_eq!(bkd_model_load(missing.as_ptr(), &mut m), BkdStatus::Io);
        assert!(last_error().contains("/no/such/model.bkd"));

        let net = mlp(&[2, 2], BkdActivation::Relu, 0);
        let x = [0.0; 4];
        let mut y = [0.0; 3];
        assert_eq!(bkd_model_forward(net, x.as_ptr(), 2, y.as_mut_ptr(), 3), BkdStatus::Dimension);

        let labels = [0u32, 5];
        let mut ds = ptr::null_mut();
        assert_ne!(bkd_dataset_classification(x.as_ptr(), 2, 2, labels.as_ptr(), 2, &mut ds), BkdStatus::Ok);
        assert!(ds.is_null());

        let empty: [u32; 0] = [];
        assert_eq!(bkd_dataset_classification(x.as_ptr(), 0, 2, empty.as_ptr(), 2, &mut ds), BkdStatus::EmptyDataset);

        let p = bkd_params_default();
        let (x, y) = grid();
        assert_eq!(bkd_dataset_classification(x.as_ptr(), 49, 2, y.as_ptr(), 2, &mut ds), BkdStatus::Ok);
        assert_eq!(
            bkd_train(BkdMode::VanillaKd, net, ptr::null(), ds, ptr::null(), &p, ptr::null_mut(), ptr::null_mut()),
            BkdStatus::NullArgument
        );
        bkd_model_free(net);
        bkd_dataset_free(ds);
        bkd_model_free(ptr::null_mut());
        bkd_dataset_free(ptr::null_mut());
    }
}
