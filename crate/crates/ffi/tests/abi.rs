use std::ffi::{CStr, CString};
use std::ptr;

use gbpstack_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gbp_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn world_lifecycle() {
    let config = CString::new(r#"{"n_r": 3, "t_max": 5.0, "seed": 4}"#).unwrap();
    let mut world = ptr::null_mut();
    unsafe {
        assert_eq!(gbp_world_new(config.as_ptr(), &mut world), GbpStatus::Ok);
        let mut n = 0;
        assert_eq!(gbp_world_robot_count(world, &mut n), GbpStatus::Ok);
        assert_eq!(n, 3);
        assert_eq!(gbp_world_step(world, 20), GbpStatus::Ok);
        let mut t = 0.0;
        gbp_world_time(world, &mut t);
        assert!((t - 2.0).abs() < 1e-9);
        let mut state = GbpRobotState::default();
        assert_eq!(gbp_world_robot(world, 2, &mut state), GbpStatus::Ok);
        assert!(state.vx.hypot(state.vy) <= 5.0 + 1e-9);
        assert_eq!(gbp_world_robot(world, 3, &mut state), GbpStatus::InvalidArgument);
        assert!(last_error().contains("robot 3"));
        let mut m = GbpMetrics::default();
        assert_eq!(gbp_world_metrics(world, &mut m), GbpStatus::Ok);
        assert!(m.coverage > 0.0 && m.coverage <= 1.0);
        assert_eq!(last_error(), "");
        // Stepping past t_max stops there.
        assert_eq!(gbp_world_step(world, 1000), GbpStatus::Ok);
        gbp_world_time(world, &mut t);
        assert!((t - 5.0).abs() < 1e-9);
        gbp_world_free(world);
    }
}

#[test]
fn bad_input_is_reported() {
    let mut world = ptr::null_mut();
    unsafe {
        let bad = CString::new(r#"{"n_r": 0}"#).unwrap();
        assert_eq!(gbp_world_new(bad.as_ptr(), &mut world), GbpStatus::InvalidConfig);
        assert!(world.is_null());
        assert!(last_error().contains("n_r"));
        let unknown = CString::new(r#"{"speed": 3}"#).unwrap();
        assert_eq!(gbp_world_new(unknown.as_ptr(), &mut world), GbpStatus::InvalidConfig);
        let invalid = [0x7bu8, 0xff, 0x7d, 0x00];
        assert_eq!(gbp_world_new(invalid.as_ptr().cast(), &mut world), GbpStatus::Utf8);
        assert_eq!(gbp_world_new(ptr::null(), ptr::null_mut()), GbpStatus::NullPointer);
        assert_eq!(gbp_world_step(ptr::null_mut(), 1), GbpStatus::NullPointer);
        let mut t = 0.0;
        assert_eq!(gbp_world_time(ptr::null(), &mut t), GbpStatus::NullPointer);
        gbp_world_free(ptr::null_mut());
        gbp_field_free(ptr::null_mut());
    }
}

#[test]
fn field_values_match_the_library() {
    let mut field = ptr::null_mut();
    unsafe {
        assert_eq!(gbp_field_generate(3, 50.0, 10.0, &mut field), GbpStatus::Ok);
        let mut n = 0;
        gbp_field_region_count(field, &mut n);
        assert_eq!(n, 25);
        let mut buf = vec![0.0; n];
        assert_eq!(gbp_field_values(field, buf.as_mut_ptr(), n - 1), GbpStatus::InvalidArgument);
        assert_eq!(gbp_field_values(field, buf.as_mut_ptr(), n), GbpStatus::Ok);
        let want = gbpstack::environment::SignalField::generate(3, 50.0, 10.0, &Default::default()).unwrap();
        assert_eq!(buf, want.truth());
        gbp_field_free(field);
        assert_eq!(gbp_field_generate(3, 55.0, 10.0, &mut field), GbpStatus::InvalidArgument);
        assert!(field.is_null());
    }
}

#[test]
fn header_declares_the_api() {
    let header = include_str!("../include/gbpstack.h");
    for name in [
        "GBP_STATUS_OK = 0",
        "GBP_STATUS_PANIC = -6",
        "typedef struct GbpWorld GbpWorld;",
        "gbp_world_new(const char *config_json, GbpWorld **out)",
        "gbp_field_values(const GbpField *field, double *buf, size_t len)",
        "const char *gbp_last_error(void);",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
