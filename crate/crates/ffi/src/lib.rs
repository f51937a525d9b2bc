//! C ABI over the bonmf engine.
//!
//! Objects are opaque heap handles created by `*_load`/`*_new` and released
//! with the matching `*_free`. Every fallible call returns a [`BonmfStatus`];
//! on failure, [`bonmf_last_error`] describes the most recent error on the
//! calling thread. Panics never cross the boundary.
//!
//! Handles are immutable after construction except through
//! `bonmf_features_load`, so a loaded model may be shared across threads for
//! prediction.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bonmf::checkpoint::Checkpoint;
use bonmf::data::{parse_feature_file, FeatureSet, InteractionSet, Modality};
use bonmf::experiment::load_ratings;
use bonmf::model::Predictor;
use bonmf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BonmfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    MissingFeature = 5,
    Numeric = 6,
    Panic = 7,
}

/// Which feature store a file fills.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BonmfModality {
    UserProfile = 0,
    ItemText = 1,
    ItemImage = 2,
}

/// Parsed ratings file.
pub struct BonmfRatings {
    inner: InteractionSet,
}

/// Up to one feature store per modality.
pub struct BonmfFeatures {
    inner: FeatureSet,
}

/// A trained BoNMF or SVD checkpoint.
pub struct BonmfPredictor {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BonmfStatus {
    match e {
        Error::Io { .. } => BonmfStatus::Io,
        Error::InvalidArgument(_) | Error::Config { .. } => BonmfStatus::InvalidArgument,
        Error::MissingFeature { .. } => BonmfStatus::MissingFeature,
        Error::NonFinite(_) | Error::Divergence(_) => BonmfStatus::Numeric,
        Error::Row { source, .. } | Error::Fold { source, .. } => status_of(source),
        _ => BonmfStatus::Format,
    }
}

fn fail(status: BonmfStatus, message: impl Into<String>) -> BonmfStatus {
    set_error(message.into());
    status
}

/// Runs `f`, converting engine errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), BonmfStatus>>(f: F) -> BonmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BonmfStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(BonmfStatus::Panic, "internal panic"),
    }
}

fn engine<T>(r: bonmf::Result<T>) -> Result<T, BonmfStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, BonmfStatus> {
    if p.is_null() {
        return Err(fail(BonmfStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(BonmfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, BonmfStatus> {
    p.as_ref()
        .ok_or_else(|| fail(BonmfStatus::NullPointer, format!("{what} is NULL")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), BonmfStatus> {
    if p.is_null() {
        return Err(fail(BonmfStatus::NullPointer, format!("{what} is NULL")));
    }
    Ok(())
}

/// Message for the last failed call on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bonmf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn bonmf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a ratings file. `format` is "csv", "movielens_dat" or NULL to
/// infer from the extension.
///
/// # Safety
/// `path` and a non-NULL `format` must be NUL-terminated strings; `out` must
/// be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn bonmf_ratings_load(
    path: *const c_char,
    format: *const c_char,
    out: *mut *mut BonmfRatings,
) -> BonmfStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let format = if format.is_null() { None } else { Some(str_arg(format, "format")?) };
        let inner = engine(load_ratings(Path::new(path), format))?;
        *out = Box::into_raw(Box::new(BonmfRatings { inner }));
        Ok(())
    })
}

/// Number of rating records; 0 for NULL.
///
/// # Safety
/// `ratings` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bonmf_ratings_len(ratings: *const BonmfRatings) -> usize {
    ratings.as_ref().map_or(0, |r| r.inner.len())
}

/// # Safety
/// `ratings` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bonmf_ratings_free(ratings: *mut BonmfRatings) {
    if !ratings.is_null() {
        drop(Box::from_raw(ratings));
    }
}

/// Creates an empty feature set.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn bonmf_features_new(out: *mut *mut BonmfFeatures) -> BonmfStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(BonmfFeatures {
            inner: FeatureSet::default(),
        }));
        Ok(())
    })
}

/// Parses a feature file (text or binary) into the slot for `modality`,
/// replacing any previous store there. `modality` takes [`BonmfModality`]
/// values.
///
/// # Safety
/// `features` must be a live handle not used concurrently; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bonmf_features_load(
    features: *mut BonmfFeatures,
    modality: u32,
    path: *const c_char,
) -> BonmfStatus {
    guard(|| {
        let features = features
            .as_mut()
            .ok_or_else(|| fail(BonmfStatus::NullPointer, "features is NULL"))?;
        let modality = match modality {
            0 => Modality::UserProfile,
            1 => Modality::ItemText,
            2 => Modality::ItemImage,
            other => return Err(fail(BonmfStatus::InvalidArgument, format!("unknown modality {other}"))),
        };
        let path = str_arg(path, "path")?;
        let file = engine(File::open(path).map_err(|e| Error::io(path, e)))?;
        let store = engine(parse_feature_file(BufReader::new(file), modality))?;
        features.inner.set(store);
        Ok(())
    })
}

/// # Safety
/// `features` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bonmf_features_free(features: *mut BonmfFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Loads a model checkpoint written by `bonmf train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a pointer
/// write.
#[no_mangle]
pub unsafe extern "C" fn bonmf_model_load(path: *const c_char, out: *mut *mut BonmfPredictor) -> BonmfStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let bytes = engine(std::fs::read(path).map_err(|e| Error::io(path, e)))?;
        let inner = engine(Checkpoint::load(&bytes[..]))?;
        *out = Box::into_raw(Box::new(BonmfPredictor { inner }));
        Ok(())
    })
}

/// Predicted rating, clipped to the rating range. Unknown ids fall back to
/// the cold-start path; content features must still be present for every
/// modality the model uses.
///
/// # Safety
/// `model` and `features` must be live handles; the ids must be
/// NUL-terminated strings; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bonmf_model_predict(
    model: *const BonmfPredictor,
    features: *const BonmfFeatures,
    user_id: *const c_char,
    item_id: *const c_char,
    out: *mut f64,
) -> BonmfStatus {
    guard(|| {
        out_arg(out, "out")?;
        let model = ref_arg(model, "model")?;
        let features = ref_arg(features, "features")?;
        let user = str_arg(user_id, "user_id")?;
        let item = str_arg(item_id, "item_id")?;
        *out = engine(model.inner.predict_ids(user, item, &features.inner))?;
        Ok(())
    })
}

/// Mean squared error of the model over every record in `ratings`.
///
/// # Safety
/// All handles must be live; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bonmf_model_mse(
    model: *const BonmfPredictor,
    ratings: *const BonmfRatings,
    features: *const BonmfFeatures,
    out: *mut f64,
) -> BonmfStatus {
    guard(|| {
        out_arg(out, "out")?;
        let model = ref_arg(model, "model")?;
        let ratings = ref_arg(ratings, "ratings")?;
        let features = ref_arg(features, "features")?;
        let records = ratings.inner.records();
        let predictions = records
            .iter()
            .map(|r| model.inner.predict_ids(&r.user_id, &r.item_id, &features.inner))
            .collect::<bonmf::Result<Vec<_>>>();
        let predictions = engine(predictions)?;
        let targets: Vec<f64> = records.iter().map(|r| r.rating).collect();
        *out = engine(bonmf::eval::mse(&predictions, &targets))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bonmf_model_free(model: *mut BonmfPredictor) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
