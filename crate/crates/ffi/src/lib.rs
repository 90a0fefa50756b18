//! C ABI over the simulator.
//!
//! Every function returns a [`GbpStatus`]; values come back through out
//! pointers. On failure the message is kept per thread and read with
//! [`gbp_last_error`]. Handles are opaque and freed with their `_free`
//! function; freeing NULL is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use gbpstack::environment::{FieldParams, SignalField};
use gbpstack::sim::{SimError, World, WorldConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GbpStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidConfig = -2,
    NumericalAbort = -3,
    InvalidArgument = -4,
    Utf8 = -5,
    Panic = -6,
}

/// A simulated fleet.
pub struct GbpWorld(World);

/// A ground-truth field.
pub struct GbpField(SignalField);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GbpRobotState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub goal_x: f64,
    pub goal_y: f64,
    pub failed: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GbpMetrics {
    pub t: f64,
    pub coverage: f64,
    pub rms_psi: f64,
    pub done_robots: usize,
    pub done: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(GbpStatus, String);

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let status = match e {
            SimError::Config(_) => GbpStatus::InvalidConfig,
            SimError::NumericalAbort { .. } => GbpStatus::NumericalAbort,
            SimError::Layer { .. } => GbpStatus::NumericalAbort,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, recording its error and turning panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GbpStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GbpStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(p) => {
            let message = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(&message);
            GbpStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(GbpStatus::NullPointer, format!("{name} is NULL"))
}

unsafe fn get<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn get_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or "" after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gbp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a world from a JSON object of config keys. NULL means defaults.
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gbp_world_new(config_json: *const c_char, out: *mut *mut GbpWorld) -> GbpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(ptr::null_mut());
        let config = if config_json.is_null() {
            WorldConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|e| Failure(GbpStatus::Utf8, e.to_string()))?;
            serde_json::from_str(text).map_err(|e| Failure(GbpStatus::InvalidConfig, e.to_string()))?
        };
        let world = World::new(config)?;
        out.write(Box::into_raw(Box::new(GbpWorld(world))));
        Ok(())
    })
}

/// # Safety
/// `world` is NULL or came from [`gbp_world_new`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn gbp_world_free(world: *mut GbpWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Advances `steps` timesteps, stopping early at `t_max`.
///
/// # Safety
/// `world` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn gbp_world_step(world: *mut GbpWorld, steps: u64) -> GbpStatus {
    guard(|| {
        let w = &mut get_mut(world, "world")?.0;
        for _ in 0..steps {
            if w.step_count() >= w.config().total_steps() {
                break;
            }
            w.step()?;
        }
        Ok(())
    })
}

/// Runs until every robot knows a source region or `t_max`; `found`
/// receives which.
///
/// # Safety
/// `world` is a live handle; `found` is writable.
#[no_mangle]
pub unsafe extern "C" fn gbp_world_run_until_done(world: *mut GbpWorld, found: *mut bool) -> GbpStatus {
    guard(|| {
        let w = &mut get_mut(world, "world")?.0;
        if found.is_null() {
            return Err(null("found"));
        }
        let done = w.run_until(|m| m.done)?;
        write(found, done, "found")
    })
}

/// # Safety
/// `world` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gbp_world_time(world: *const GbpWorld, out: *mut f64) -> GbpStatus {
    guard(|| write(out, get(world, "world")?.0.time(), "out"))
}

/// # Safety
/// `world` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gbp_world_robot_count(world: *const GbpWorld, out: *mut usize) -> GbpStatus {
    guard(|| write(out, get(world, "world")?.0.robots().len(), "out"))
}

/// # Safety
/// `world` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gbp_world_robot(world: *const GbpWorld, robot: usize, out: *mut GbpRobotState) -> GbpStatus {
    guard(|| {
        let w = &get(world, "world")?.0;
        let r = w
            .robots()
            .get(robot)
            .ok_or_else(|| Failure(GbpStatus::InvalidArgument, format!("no robot {robot}")))?;
        let goal = w.goal(robot);
        let state = GbpRobotState {
            x: r.pose.x,
            y: r.pose.y,
            vx: r.pose.z,
            vy: r.pose.w,
            goal_x: goal.x,
            goal_y: goal.y,
            failed: r.failed,
        };
        write(out, state, "out")
    })
}

/// Metrics of the fleet's current beliefs.
///
/// # Safety
/// `world` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gbp_world_metrics(world: *const GbpWorld, out: *mut GbpMetrics) -> GbpStatus {
    guard(|| {
        let m = get(world, "world")?.0.current_metrics();
        let metrics = GbpMetrics {
            t: m.t,
            coverage: m.coverage,
            rms_psi: m.rms_psi,
            done_robots: m.done_robots,
            done: m.done,
        };
        write(out, metrics, "out")
    })
}

/// Generates a field with the default fractal parameters.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gbp_field_generate(seed: u64, side: f64, region_width: f64, out: *mut *mut GbpField) -> GbpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(ptr::null_mut());
        let field = SignalField::generate(seed, side, region_width, &FieldParams::default())
            .map_err(|e| Failure(GbpStatus::InvalidArgument, e.to_string()))?;
        out.write(Box::into_raw(Box::new(GbpField(field))));
        Ok(())
    })
}

/// # Safety
/// `field` is NULL or came from [`gbp_field_generate`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn gbp_field_free(field: *mut GbpField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// # Safety
/// `field` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gbp_field_region_count(field: *const GbpField, out: *mut usize) -> GbpStatus {
    guard(|| write(out, get(field, "field")?.0.region_count(), "out"))
}

/// Copies region values, row-major from the origin, into `buf` of `len`
/// doubles. `len` must be at least the region count.
///
/// # Safety
/// `field` is a live handle; `buf` has room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gbp_field_values(field: *const GbpField, buf: *mut f64, len: usize) -> GbpStatus {
    guard(|| {
        let truth = get(field, "field")?.0.truth();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < truth.len() {
            return Err(Failure(
                GbpStatus::InvalidArgument,
                format!("buffer holds {len} values, field has {}", truth.len()),
            ));
        }
        ptr::copy_nonoverlapping(truth.as_ptr(), buf, truth.len());
        Ok(())
    })
}
