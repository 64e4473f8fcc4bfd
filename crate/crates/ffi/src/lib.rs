//! C ABI over `geoforest`.
//!
//! Every entry point returns a [`GfStatus`]. On failure a description of the
//! error is kept per thread and can be read with [`gf_last_error`]. Objects
//! are handed out as opaque pointers and must be released with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use geoforest::annotation::{AnnotationDoc, SeedAnnotation, Seeds, Target};
use geoforest::eval::dice;
use geoforest::forest::{load_forest, Forest};
use geoforest::geodesic::{geodesic_transform, normalize_distance, Connectivity, GeodesicParams};
use geoforest::mhd::{read_label_mhd, read_mhd, write_label_mhd, write_mhd};
use geoforest::pipeline::{run_prediction, CaseData, Mode, PipelineConfig};
use geoforest::volume::{normalize_ct, ChannelKind, Geometry, LabelVolume, Volume3};
use geoforest::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    Null = 1,
    Io = 2,
    Format = 3,
    Size = 4,
    Parameter = 5,
    Geometry = 6,
    Annotation = 7,
    Model = 8,
    Dataset = 9,
    /// A string argument was not valid UTF-8.
    Utf8 = 10,
    /// The library panicked. This is a bug.
    Panic = 11,
}

impl From<&Error> for GfStatus {
    fn from(e: &Error) -> Self {
        match e.root() {
            Error::Io { .. } => GfStatus::Io,
            Error::Format { .. } | Error::Json(_) => GfStatus::Format,
            Error::Size { .. } => GfStatus::Size,
            Error::Parameter(_) | Error::Spec(_) => GfStatus::Parameter,
            Error::Geometry(_) => GfStatus::Geometry,
            Error::Annotation(_) => GfStatus::Annotation,
            Error::Model(_) => GfStatus::Model,
            Error::Dataset(_) | Error::Case { .. } => GfStatus::Dataset,
        }
    }
}

/// A scalar volume (CT or distance map).
pub struct GfVolume {
    inner: Volume3,
}

/// A label volume: 0 background, 1 right kidney, 2 left kidney.
pub struct GfLabels {
    inner: LabelVolume,
}

/// A trained forest.
pub struct GfForest {
    inner: Forest,
}

/// Parameters for [`gf_geodesic`]. Obtain defaults from
/// [`gf_geodesic_params_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GfGeodesicParams {
    pub gamma: f64,
    /// 6 or 26.
    pub connectivity: u8,
    pub d_cap: f64,
    pub window_lo: f64,
    pub window_hi: f64,
    /// Nonzero to divide by `d_cap` and clamp to 1.
    pub normalized: u8,
}

struct Failure {
    status: GfStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            status: GfStatus::from(&e),
            message: e.to_string(),
        }
    }
}

fn fail(status: GfStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn run(body: impl FnOnce() -> Result<(), Failure>) -> GfStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => GfStatus::Ok,
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {what}"));
            GfStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(GfStatus::Null, format!("`{name}` is null")))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(GfStatus::Null, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(GfStatus::Utf8, format!("`{name}` is not UTF-8: {e}")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(GfStatus::Null, "`out` is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(GfStatus::Null, "`out` is null"));
    }
    Ok(())
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next call into the library on the same
/// thread.
#[no_mangle]
pub extern "C" fn gf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// Volumes

/// Reads a MetaImage volume (`.mhd` with its `.raw` payload).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gf_volume_read(path: *const c_char, out: *mut *mut GfVolume) -> GfStatus {
    run(|| {
        check_out(out)?;
        let vol = read_mhd(text(path, "path")?)?;
        put(out, GfVolume { inner: vol })
    })
}

/// Creates a volume by copying `len` values laid out x fastest.
///
/// # Safety
/// `dims` and `spacing` must point to 3 values, `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn gf_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f64,
    len: usize,
    out: *mut *mut GfVolume,
) -> GfStatus {
    run(|| {
        check_out(out)?;
        let dims: [usize; 3] = std::slice::from_raw_parts(borrow(dims, "dims")?, 3).try_into().unwrap();
        let spacing: [f64; 3] = std::slice::from_raw_parts(borrow(spacing, "spacing")?, 3)
            .try_into()
            .unwrap();
        let data = std::slice::from_raw_parts(borrow(data, "data")?, len).to_vec();
        let geometry = Geometry::new(dims, spacing, [0.0; 3])?;
        let vol = Volume3::new(geometry, data, ChannelKind::CtHu)?;
        put(out, GfVolume { inner: vol })
    })
}

/// Writes `vol` as MetaImage; the payload goes next to the header.
///
/// # Safety
/// `vol` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gf_volume_write(vol: *const GfVolume, path: *const c_char) -> GfStatus {
    run(|| Ok(write_mhd(&borrow(vol, "vol")?.inner, text(path, "path")?)?))
}

/// Copies `[nx, ny, nz]` into `out`.
///
/// # Safety
/// `out` must have room for 3 values.
#[no_mangle]
pub unsafe extern "C" fn gf_volume_dims(vol: *const GfVolume, out: *mut usize) -> GfStatus {
    run(|| {
        check_out(out)?;
        let dims = borrow(vol, "vol")?.inner.dims();
        ptr::copy_nonoverlapping(dims.as_ptr(), out, 3);
        Ok(())
    })
}

/// Copies the voxel spacing in millimeters into `out`.
///
/// # Safety
/// `out` must have room for 3 values.
#[no_mangle]
pub unsafe extern "C" fn gf_volume_spacing(vol: *const GfVolume, out: *mut f64) -> GfStatus {
    run(|| {
        check_out(out)?;
        let spacing = borrow(vol, "vol")?.inner.geometry().spacing;
        ptr::copy_nonoverlapping(spacing.as_ptr(), out, 3);
        Ok(())
    })
}

/// Borrowed pointer to the voxel values, or null if `vol` is null.
///
/// # Safety
/// The pointer is valid while `vol` is alive.
#[no_mangle]
pub unsafe extern "C" fn gf_volume_data(vol: *const GfVolume) -> *const f64 {
    vol.as_ref().map_or(ptr::null(), |v| v.inner.data().as_ptr())
}

/// Number of voxels, or 0 if `vol` is null.
///
/// # Safety
/// `vol` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn gf_volume_len(vol: *const GfVolume) -> usize {
    vol.as_ref().map_or(0, |v| v.inner.data().len())
}

/// # Safety
/// `vol` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gf_volume_free(vol: *mut GfVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

// Geodesic channel

#[no_mangle]
pub extern "C" fn gf_geodesic_params_default() -> GfGeodesicParams {
    let p = GeodesicParams::default();
    let window = PipelineConfig::default().window;
    GfGeodesicParams {
        gamma: p.gamma,
        connectivity: p.connectivity.into(),
        d_cap: p.d_cap,
        window_lo: window[0],
        window_hi: window[1],
        normalized: 1,
    }
}

fn seeds_from_json(json: &str, geometry: &Geometry) -> Result<Seeds, Failure> {
    let doc = AnnotationDoc::from_json(json.as_bytes())?;
    Ok(SeedAnnotation::from_doc(&doc, geometry)?.seeds())
}

/// Geodesic distance from the outline in `annotation_json` over the windowed
/// CT. `params` may be null for defaults.
///
/// # Safety
/// `ct` must come from this library, `annotation_json` must be
/// NUL-terminated, `params` null or valid, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gf_geodesic(
    ct: *const GfVolume,
    annotation_json: *const c_char,
    params: *const GfGeodesicParams,
    out: *mut *mut GfVolume,
) -> GfStatus {
    run(|| {
        check_out(out)?;
        let ct = &borrow(ct, "ct")?.inner;
        let p = params.as_ref().copied().unwrap_or_else(|| gf_geodesic_params_default());
        let connectivity = Connectivity::try_from(p.connectivity).map_err(|m| fail(GfStatus::Parameter, m))?;
        let gp = GeodesicParams {
            gamma: p.gamma,
            connectivity,
            d_cap: p.d_cap,
        };
        gp.validate()?;
        let seeds = seeds_from_json(text(annotation_json, "annotation_json")?, ct.geometry())?;
        let intensity = normalize_ct(ct, p.window_lo, p.window_hi)?.with_kind(ChannelKind::CtHu);
        let d = geodesic_transform(&intensity, &seeds.linear_indices(ct.geometry()), &gp)?;
        let d = if p.normalized != 0 { normalize_distance(&d, gp.d_cap)? } else { d };
        put(out, GfVolume { inner: d })
    })
}

// Forest and segmentation

/// Loads a model written by `geoforest train`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gf_forest_load(path: *const c_char, out: *mut *mut GfForest) -> GfStatus {
    run(|| {
        check_out(out)?;
        let forest = load_forest(text(path, "path")?)?;
        put(out, GfForest { inner: forest })
    })
}

/// Number of trees, or 0 if `forest` is null.
///
/// # Safety
/// `forest` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn gf_forest_num_trees(forest: *const GfForest) -> usize {
    forest.as_ref().map_or(0, |f| f.inner.trees.len())
}

/// # Safety
/// `forest` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gf_forest_free(forest: *mut GfForest) {
    if !forest.is_null() {
        drop(Box::from_raw(forest));
    }
}

/// Segments both kidneys in `ct` from their mid-slice outlines.
///
/// `config_json` may be null, in which case default settings are used with
/// the channel layout the forest was trained on.
///
/// # Safety
/// Handles must come from this library, strings must be NUL-terminated
/// (`config_json` may be null) and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gf_segment(
    forest: *const GfForest,
    ct: *const GfVolume,
    right_json: *const c_char,
    left_json: *const c_char,
    config_json: *const c_char,
    out: *mut *mut GfLabels,
) -> GfStatus {
    run(|| {
        check_out(out)?;
        let forest = &borrow(forest, "forest")?.inner;
        let ct = &borrow(ct, "ct")?.inner;
        let config = if config_json.is_null() {
            let mode = if forest.channel_names == Mode::BaselineCtOnly.channel_names() {
                Mode::BaselineCtOnly
            } else {
                Mode::WithGeodesic
            };
            PipelineConfig::default().with_mode(mode)
        } else {
            PipelineConfig::from_json(text(config_json, "config_json")?)?
        };
        let mut seeds = Vec::with_capacity(2);
        for (json, name, target) in [(right_json, "right_json", Target::Right), (left_json, "left_json", Target::Left)] {
            let s = seeds_from_json(text(json, name)?, ct.geometry())?;
            if s.target != target {
                return Err(fail(
                    GfStatus::Annotation,
                    format!("`{name}` is an outline for the {} kidney", s.target),
                ));
            }
            seeds.push(s);
        }
        let left = seeds.pop().unwrap();
        let right = seeds.pop().unwrap();
        let case = CaseData {
            id: "ffi".into(),
            ct: ct.clone(),
            seeds: [right, left],
            truth: None,
        };
        let labels = run_prediction(&case, forest, &config)?;
        put(out, GfLabels { inner: labels })
    })
}

// Labels

/// Reads a label volume stored as MetaImage.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gf_labels_read(path: *const c_char, out: *mut *mut GfLabels) -> GfStatus {
    run(|| {
        check_out(out)?;
        let labels = read_label_mhd(text(path, "path")?)?;
        put(out, GfLabels { inner: labels })
    })
}

/// # Safety
/// `labels` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gf_labels_write(labels: *const GfLabels, path: *const c_char) -> GfStatus {
    run(|| Ok(write_label_mhd(&borrow(labels, "labels")?.inner, text(path, "path")?)?))
}

/// # Safety
/// `out` must have room for 3 values.
#[no_mangle]
pub unsafe extern "C" fn gf_labels_dims(labels: *const GfLabels, out: *mut usize) -> GfStatus {
    run(|| {
        check_out(out)?;
        let dims = borrow(labels, "labels")?.inner.dims();
        ptr::copy_nonoverlapping(dims.as_ptr(), out, 3);
        Ok(())
    })
}

/// Borrowed pointer to the labels, or null if `labels` is null.
///
/// # Safety
/// The pointer is valid while `labels` is alive.
#[no_mangle]
pub unsafe extern "C" fn gf_labels_data(labels: *const GfLabels) -> *const u8 {
    labels.as_ref().map_or(ptr::null(), |l| l.inner.labels().as_ptr())
}

/// # Safety
/// `labels` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn gf_labels_len(labels: *const GfLabels) -> usize {
    labels.as_ref().map_or(0, |l| l.inner.labels().len())
}

/// # Safety
/// `labels` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gf_labels_free(labels: *mut GfLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Dice overlap of `class_id` between two label volumes of equal size.
///
/// # Safety
/// Handles must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gf_dice(pred: *const GfLabels, truth: *const GfLabels, class_id: u8, out: *mut f64) -> GfStatus {
    run(|| {
        check_out(out)?;
        *out = dice(&borrow(pred, "pred")?.inner, &borrow(truth, "truth")?.inner, class_id)?;
        Ok(())
    })
}
