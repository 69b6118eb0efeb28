//! C ABI over the synthdepth library.
//!
//! Every fallible function returns an [`SdStatus`]; on failure a
//! human-readable message is available from [`sd_last_error_message`] on the
//! same thread until the next failing call. Objects are opaque handles that
//! the caller releases with the matching `*_free` function. Images cross the
//! boundary as row-major buffers; RGB is pixel-interleaved `u8`, depth is one
//! `f32` per pixel in network range [-1, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use synthdepth::checkpoint::{segnet_from_archive, Archive};
use synthdepth::eval::{accumulate_confusion, iou, pixel_accuracy, Class, ConfusionCounts, Segmenter};
use synthdepth::gan::Generator;
use synthdepth::pipeline::{self, ExperimentConfig, OutputLock};
use synthdepth::raster::{scale_rgb, DepthScaling, Raster};
use synthdepth::segnet::SegModel;
use synthdepth::train::Arm;
use synthdepth::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Io = 4,
    Label = 5,
    Config = 6,
    EmptyDataset = 7,
    Init = 8,
    Index = 9,
    Numerical = 10,
    Schedule = 11,
    EmptyEval = 12,
    Diverged = 13,
    Consistency = 14,
    Checkpoint = 15,
    Serialization = 16,
    Locked = 17,
    Panic = 18,
}

impl From<&Error> for SdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => SdStatus::Shape,
            Error::Io { .. } | Error::Raster { .. } => SdStatus::Io,
            Error::Label(_) => SdStatus::Label,
            Error::Config(_) => SdStatus::Config,
            Error::EmptyDataset(_) => SdStatus::EmptyDataset,
            Error::Init(_) => SdStatus::Init,
            Error::Index(_) => SdStatus::Index,
            Error::Numerical(_) => SdStatus::Numerical,
            Error::Schedule(_) => SdStatus::Schedule,
            Error::EmptyEval(_) => SdStatus::EmptyEval,
            Error::Diverged { .. } => SdStatus::Diverged,
            Error::Consistency(_) => SdStatus::Consistency,
            Error::Checkpoint(_) => SdStatus::Checkpoint,
            Error::Serde(_) => SdStatus::Serialization,
            Error::Locked(_) => SdStatus::Locked,
        }
    }
}

/// Experimental arm, in comparison-table order.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdArm {
    RgbOnly = 0,
    PartialDepth = 1,
    RgbSynthDepth = 2,
    RgbDepth = 3,
}

impl From<SdArm> for Arm {
    fn from(a: SdArm) -> Self {
        match a {
            SdArm::RgbOnly => Arm::RgbOnly,
            SdArm::PartialDepth => Arm::PartialDepth,
            SdArm::RgbSynthDepth => Arm::RgbSynthDepth,
            SdArm::RgbDepth => Arm::RgbDepth,
        }
    }
}

/// Binary confusion counts with building as the positive class.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SdConfusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl From<ConfusionCounts> for SdConfusion {
    fn from(c: ConfusionCounts) -> Self {
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        }
    }
}

impl From<SdConfusion> for ConfusionCounts {
    fn from(c: SdConfusion) -> Self {
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        }
    }
}

/// Opaque experiment configuration.
pub struct SdConfig(ExperimentConfig);

/// Opaque trained generator.
pub struct SdGenerator(Generator<f32>);

/// Opaque trained segmentation network.
pub struct SdSegmenter(SegModel<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SdStatus, msg: impl Into<String>) -> SdStatus {
    set_last_error(msg.into());
    status
}

/// Runs `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), SdStatus>) -> SdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SdStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SdStatus::Panic, msg)
        }
    }
}

fn lib(e: Error) -> SdStatus {
    let s = SdStatus::from(&e);
    fail(s, format!("{}: {e}", e.kind()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, SdStatus> {
    if p.is_null() {
        return Err(fail(SdStatus::NullPointer, "path argument is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(SdStatus::InvalidUtf8, "path argument is not UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], SdStatus> {
    if p.is_null() {
        return Err(fail(SdStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], SdStatus> {
    if p.is_null() {
        return Err(fail(SdStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out_handle<T>(out: *mut *mut T, value: T) -> Result<(), SdStatus> {
    if out.is_null() {
        return Err(fail(SdStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(h: *mut T) -> Result<&'a mut T, SdStatus> {
    h.as_mut().ok_or_else(|| fail(SdStatus::NullPointer, "handle is null"))
}

fn interleaved_to_planar(rgb: &[u8], h: usize, w: usize) -> Vec<u8> {
    let n = h * w;
    let mut out = vec![0u8; 3 * n];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c];
        }
    }
    out
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an experiment configuration from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sd_config_load(path: *const c_char, out: *mut *mut SdConfig) -> SdStatus {
    guard(|| {
        let p = path_arg(path)?;
        let cfg = ExperimentConfig::load(&p).map_err(lib)?;
        out_handle(out, SdConfig(cfg))
    })
}

/// Desk-scale preset over the given dataset and output roots.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sd_config_toy(
    dataset_root: *const c_char,
    output_root: *const c_char,
    out: *mut *mut SdConfig,
) -> SdStatus {
    guard(|| {
        let cfg = ExperimentConfig::toy(path_arg(dataset_root)?, path_arg(output_root)?);
        out_handle(out, SdConfig(cfg))
    })
}

/// Overrides the master seed.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_config_set_seed(cfg: *mut SdConfig, seed: u64) -> SdStatus {
    guard(|| {
        handle(cfg)?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sd_config_free(cfg: *mut SdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn with_lock(cfg: &ExperimentConfig, f: impl FnOnce() -> synthdepth::Result<()>) -> Result<(), SdStatus> {
    let _lock = OutputLock::acquire(&cfg.output_root).map_err(lib)?;
    f().map_err(lib)
}

/// Validates the dataset and writes the split manifest.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_prepare(cfg: *mut SdConfig) -> SdStatus {
    guard(|| {
        let c = &handle(cfg)?.0;
        with_lock(c, || pipeline::cmd_prepare(c).map(|_| ()))
    })
}

/// Trains the segmentation model of one arm.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_train_seg(cfg: *mut SdConfig, arm: SdArm) -> SdStatus {
    guard(|| {
        let c = &handle(cfg)?.0;
        with_lock(c, || pipeline::cmd_train_seg(c, arm.into()).map(|_| ()))
    })
}

/// Trains the depth generator.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_train_gan(cfg: *mut SdConfig) -> SdStatus {
    guard(|| {
        let c = &handle(cfg)?.0;
        with_lock(c, || pipeline::cmd_train_gan(c).map(|_| ()))
    })
}

/// Evaluates `n_arms` arms and writes the comparison table under the
/// output root.
///
/// # Safety
/// `cfg` must be a live handle and `arms` must point to `n_arms` values.
#[no_mangle]
pub unsafe extern "C" fn sd_evaluate(cfg: *mut SdConfig, arms: *const SdArm, n_arms: usize) -> SdStatus {
    guard(|| {
        let c = &handle(cfg)?.0;
        let arms: Vec<Arm> = slice_arg(arms, n_arms, "arms")?.iter().map(|&a| a.into()).collect();
        with_lock(c, || pipeline::cmd_evaluate(c, &arms).map(|_| ()))
    })
}

/// Loads a generator checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sd_generator_load(path: *const c_char, out: *mut *mut SdGenerator) -> SdStatus {
    guard(|| {
        let g = pipeline::load_generator(&path_arg(path)?).map_err(lib)?;
        out_handle(out, SdGenerator(g))
    })
}

/// Side length every input dimension must be divisible by.
///
/// # Safety
/// `g` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_generator_size_multiple(g: *const SdGenerator) -> usize {
    g.as_ref().map_or(0, |g| g.0.config().size_multiple())
}

/// Synthetic depth for an `height`x`width` interleaved RGB image, tiled
/// with `patch_size` squares. Writes `height*width` values to `depth_out`.
///
/// # Safety
/// `rgb` must hold `3*height*width` bytes and `depth_out` room for
/// `height*width` floats.
#[no_mangle]
pub unsafe extern "C" fn sd_generator_infer(
    g: *mut SdGenerator,
    rgb: *const u8,
    height: usize,
    width: usize,
    patch_size: usize,
    depth_out: *mut f32,
) -> SdStatus {
    guard(|| {
        let g = handle(g)?;
        let n = height.checked_mul(width).ok_or_else(|| fail(SdStatus::Shape, "image too large"))?;
        let rgb = slice_arg(rgb, 3 * n, "rgb")?;
        let dst = slice_out(depth_out, n, "depth_out")?;
        let raster = Raster::new(3, height, width, interleaved_to_planar(rgb, height, width)).map_err(lib)?;
        let d = pipeline::synthesize_depth(&mut g.0, &raster, patch_size).map_err(lib)?;
        dst.copy_from_slice(&d.data);
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sd_generator_free(g: *mut SdGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Converts network-range depth to meters in place.
///
/// # Safety
/// `depth` must hold `n` floats.
#[no_mangle]
pub unsafe extern "C" fn sd_depth_to_meters(depth: *mut f32, n: usize, clip_max: f32) -> SdStatus {
    guard(|| {
        let s = DepthScaling { clip_max };
        for v in slice_out(depth, n, "depth")? {
            *v = s.to_meters(*v);
        }
        Ok(())
    })
}

/// Loads a segmentation checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sd_segmenter_load(path: *const c_char, out: *mut *mut SdSegmenter) -> SdStatus {
    guard(|| {
        let a = Archive::load(&path_arg(path)?).map_err(lib)?;
        out_handle(out, SdSegmenter(segnet_from_archive(&a).map_err(lib)?))
    })
}

/// 3 for RGB models, 4 for RGB plus depth.
///
/// # Safety
/// `s` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_segmenter_in_channels(s: *const SdSegmenter) -> usize {
    s.as_ref().map_or(0, |s| s.0.config().in_channels)
}

/// # Safety
/// `s` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_segmenter_size_multiple(s: *const SdSegmenter) -> usize {
    s.as_ref().map_or(0, |s| s.0.config().size_multiple())
}

/// Per-pixel classes (1 building, 0 ground) for one image whose sides are
/// multiples of the size multiple. `depth` may be null for RGB models and
/// is required for RGB plus depth models; pass zeros for missing depth.
///
/// # Safety
/// `rgb` must hold `3*height*width` bytes, `depth` (when non-null)
/// `height*width` floats and `classes_out` room for `height*width` bytes.
#[no_mangle]
pub unsafe extern "C" fn sd_segmenter_predict(
    s: *mut SdSegmenter,
    rgb: *const u8,
    depth: *const f32,
    height: usize,
    width: usize,
    classes_out: *mut u8,
) -> SdStatus {
    guard(|| {
        let m = &mut handle(s)?.0;
        let n = height.checked_mul(width).ok_or_else(|| fail(SdStatus::Shape, "image too large"))?;
        let rgb = slice_arg(rgb, 3 * n, "rgb")?;
        let dst = slice_out(classes_out, n, "classes_out")?;
        let c = m.in_channels();
        let mut x: Vec<f32> = interleaved_to_planar(rgb, height, width).iter().map(|&v| scale_rgb(v)).collect();
        if c == 4 {
            x.extend_from_slice(slice_arg(depth, n, "depth")?);
        }
        let t = Tensor::from_vec(&[1, c, height, width], x).map_err(lib)?;
        dst.copy_from_slice(&Segmenter::predict(m, &t).map_err(lib)?);
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sd_segmenter_free(s: *mut SdSegmenter) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Adds the confusion counts of `n` predicted/true label pairs to `counts`.
///
/// # Safety
/// `pred` and `truth` must hold `n` bytes; `counts` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_confusion_accumulate(
    pred: *const u8,
    truth: *const u8,
    n: usize,
    counts: *mut SdConfusion,
) -> SdStatus {
    guard(|| {
        let pred = slice_arg(pred, n, "pred")?;
        let truth = slice_arg(truth, n, "truth")?;
        let c = handle(counts)?;
        *c = accumulate_confusion(pred, truth, (*c).into()).map_err(lib)?.into();
        Ok(())
    })
}

/// Building IoU, ground IoU and pixel accuracy of `counts`. An empty union
/// yields an IoU of 1.
///
/// # Safety
/// All pointers must be valid; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_metrics(
    counts: *const SdConfusion,
    iou_building: *mut f64,
    iou_ground: *mut f64,
    accuracy: *mut f64,
) -> SdStatus {
    guard(|| {
        let c: ConfusionCounts = (*counts.as_ref().ok_or_else(|| fail(SdStatus::NullPointer, "counts is null"))?).into();
        let acc = pixel_accuracy(&c).map_err(lib)?;
        *handle(iou_building)? = iou(&c, Class::Building).value;
        *handle(iou_ground)? = iou(&c, Class::Ground).value;
        *handle(accuracy)? = acc;
        Ok(())
    })
}
