//! C ABI over `latent_vl`.
//!
//! Every function returns an [`LvStatus`]; on failure the message is kept
//! per thread and read with [`lv_last_error`]. Handles are opaque and owned
//! by the caller once returned, released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use latent_vl::config::RunConfig;
use latent_vl::curriculum::{run_pipeline, Checkpoint, Counters};
use latent_vl::data::{load_archive, save_archive, Generator, SyntheticExample, Template};
use latent_vl::error::Error;
use latent_vl::model::Model;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    /// Bad shape, index or argument.
    Argument = 4,
    Io = 5,
    /// Malformed or corrupt file contents.
    Format = 6,
    Numeric = 7,
    Dataset = 8,
    /// A training stage aborted.
    Training = 9,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for LvStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => LvStatus::Config,
            Error::Dimension(_) | Error::Range(_) | Error::Argument(_) => LvStatus::Argument,
            Error::File { .. } | Error::Io(_) => LvStatus::Io,
            Error::Format(_) | Error::Corrupt(_) => LvStatus::Format,
            Error::NonFinite { .. } | Error::Numeric(_) | Error::Conditioning(_) => LvStatus::Numeric,
            Error::Dataset(_) => LvStatus::Dataset,
            Error::StageAbort { .. } => LvStatus::Training,
        }
    }
}

pub struct LvConfig(RunConfig);

pub struct LvDataset(Vec<SyntheticExample>);

pub struct LvModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(LvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(LvStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LvStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LvStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            LvStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LvStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn lv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn lv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in configuration, `"toy"` or `"paper"`.
///
/// # Safety
/// `name` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lv_config_preset(name: *const c_char, out: *mut *mut LvConfig) -> LvStatus {
    guard(|| {
        let cfg = RunConfig::preset(str_arg(name, "name")?)?;
        put(out, LvConfig(cfg))
    })
}

/// Configuration from TOML text.
///
/// # Safety
/// `toml` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lv_config_from_toml(toml: *const c_char, out: *mut *mut LvConfig) -> LvStatus {
    guard(|| {
        let cfg = RunConfig::from_toml_str(str_arg(toml, "toml")?)?;
        cfg.validate()?;
        put(out, LvConfig(cfg))
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn lv_config_set_seed(cfg: *mut LvConfig, seed: u64) -> LvStatus {
    guard(|| {
        handle_mut(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// Sets the epoch count of all four stages.
///
/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn lv_config_set_epochs(cfg: *mut LvConfig, epochs: usize) -> LvStatus {
    guard(|| {
        let c = &mut handle_mut(cfg, "cfg")?.0;
        for i in 0..4 {
            c.stage_mut(i).epochs = epochs;
        }
        c.validate()?;
        Ok(())
    })
}

/// # Safety
/// `cfg` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lv_config_free(cfg: *mut LvConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// `count` examples of the configured family under `seed`.
///
/// # Safety
/// `cfg` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lv_dataset_generate(cfg: *const LvConfig, count: usize, seed: u64, out: *mut *mut LvDataset) -> LvStatus {
    guard(|| {
        let c = &handle(cfg, "cfg")?.0;
        let gen = Generator::new(&c.model, c.data.max_objects, c.data.newline_every)?;
        let ex = gen.generate(count, c.data.family, seed, Template::Rationale)?;
        put(out, LvDataset(ex))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lv_dataset_load(path: *const c_char, out: *mut *mut LvDataset) -> LvStatus {
    guard(|| {
        let ex = load_archive(Path::new(str_arg(path, "path")?))?;
        put(out, LvDataset(ex))
    })
}

/// # Safety
/// `ds` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lv_dataset_save(ds: *const LvDataset, path: *const c_char) -> LvStatus {
    guard(|| {
        save_archive(Path::new(str_arg(path, "path")?), &handle(ds, "ds")?.0)?;
        Ok(())
    })
}

/// Number of examples; 0 for a null handle.
///
/// # Safety
/// `ds` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lv_dataset_len(ds: *const LvDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lv_dataset_free(ds: *mut LvDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Freshly initialised model. The config is copied.
///
/// # Safety
/// `cfg` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lv_model_new(cfg: *const LvConfig, out: *mut *mut LvModel) -> LvStatus {
    guard(|| {
        let m = Model::new(&handle(cfg, "cfg")?.0)?;
        put(out, LvModel(m))
    })
}

/// Trains stages I to IV on `ds`. When `out_dir` is non-null, checkpoints and
/// metrics are written there.
///
/// # Safety
/// `model` and `ds` are live handles; `out_dir` is null or a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn lv_model_train(model: *mut LvModel, ds: *const LvDataset, out_dir: *const c_char) -> LvStatus {
    guard(|| {
        let m = &mut handle_mut(model, "model")?.0;
        let ex = &handle(ds, "ds")?.0;
        let dir = if out_dir.is_null() { None } else { Some(Path::new(str_arg(out_dir, "out_dir")?)) };
        run_pipeline(m, ex, dir, None)?;
        Ok(())
    })
}

/// Writes the parameters to a checkpoint file.
///
/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lv_model_save(model: *const LvModel, path: *const c_char) -> LvStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let counters = Counters {
            stage: 3,
            step: 0,
            opt_t: 0,
            stage_done: 1,
        };
        Checkpoint::capture(&m.store, None, counters).save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Replaces the parameters with those of a checkpoint file.
///
/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lv_model_load(model: *mut LvModel, path: *const c_char) -> LvStatus {
    guard(|| {
        let m = &mut handle_mut(model, "model")?.0;
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        ck.restore_params(&mut m.store)?;
        Ok(())
    })
}

/// Fraction of examples whose generated answer matches.
///
/// # Safety
/// `model` and `ds` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lv_model_accuracy(model: *const LvModel, ds: *const LvDataset, out: *mut f64) -> LvStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let data = m.prepare_all(&handle(ds, "ds")?.0)?;
        let acc = m.accuracy(&data)?;
        *out.as_mut().ok_or_else(|| null("out"))? = acc;
        Ok(())
    })
}

fn check_index(ds: &LvDataset, index: usize) -> Result<&SyntheticExample, Fail> {
    ds.0.get(index)
        .ok_or_else(|| Fail(LvStatus::Argument, format!("index {index} out of range for {} examples", ds.0.len())))
}

/// Greedy generation for example `index`. The token count goes to `len`;
/// when it exceeds `cap`, nothing is copied and `BufferTooSmall` is returned.
///
/// # Safety
/// `model` and `ds` are live handles; `ids` holds `cap` elements or is null
/// with `cap == 0`; `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn lv_model_generate(
    model: *const LvModel,
    ds: *const LvDataset,
    index: usize,
    ids: *mut u32,
    cap: usize,
    len: *mut usize,
) -> LvStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let ex = check_index(handle(ds, "ds")?, index)?;
        let g = m.generate(&m.prepare(ex)?)?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        *len = g.ids.len();
        if g.ids.len() > cap {
            return Err(Fail(LvStatus::BufferTooSmall, format!("need {} ids, have {cap}", g.ids.len())));
        }
        if !g.ids.is_empty() {
            if ids.is_null() {
                return Err(null("ids"));
            }
            let dst = std::slice::from_raw_parts_mut(ids, g.ids.len());
            for (d, &s) in dst.iter_mut().zip(&g.ids) {
                *d = s as u32;
            }
        }
        Ok(())
    })
}

/// Thought chain for example `index`, row-major `[k x d]`. Same buffer
/// protocol as [`lv_model_generate`] with `k * d` values.
///
/// # Safety
/// `model` and `ds` are live handles; `values` holds `cap` elements or is
/// null with `cap == 0`; `k` and `d` are writable.
#[no_mangle]
pub unsafe extern "C" fn lv_model_thoughts(
    model: *const LvModel,
    ds: *const LvDataset,
    index: usize,
    values: *mut f64,
    cap: usize,
    k: *mut usize,
    d: *mut usize,
) -> LvStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let ex = check_index(handle(ds, "ds")?, index)?;
        let chain = m.generate(&m.prepare(ex)?)?.chain;
        let (k, d) = (k.as_mut().ok_or_else(|| null("k"))?, d.as_mut().ok_or_else(|| null("d"))?);
        *k = chain.k();
        *d = m.cfg.model.d_t;
        let n = *k * *d;
        if n > cap {
            return Err(Fail(LvStatus::BufferTooSmall, format!("need {n} values, have {cap}")));
        }
        if n > 0 {
            if values.is_null() {
                return Err(null("values"));
            }
            let dst = std::slice::from_raw_parts_mut(values, n);
            for (row, z) in dst.chunks_mut(*d).zip(&chain.thoughts) {
                row.copy_from_slice(z);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lv_model_free(model: *mut LvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
