//! C ABI over the `diffaudio` library.
//!
//! Every fallible function returns a [`DaStatus`]. On failure a message is
//! stored per thread and can be read with [`da_last_error`]. Panics are
//! caught at the boundary and reported as [`DaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffaudio::attention::diff_weights_tensor;
use diffaudio::checkpoint::{load_checkpoint, save_checkpoint, split_teacher, Checkpoint};
use diffaudio::frontend::{compute_fbank, FbankConfig, Waveform};
use diffaudio::metrics::{accuracy, mean_average_precision};
use diffaudio::model::{clip_embedding, featurize, head_classes, init_model, predict_logits};
use diffaudio::{Error, ParamStore, Preset, RunConfig, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaPreset {
    Paper = 0,
    Desk = 1,
}

/// Opaque model handle: parameters plus the run configuration.
pub struct DaModel {
    params: ParamStore,
    config: RunConfig,
    step: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => DaStatus::ShapeMismatch,
            Error::InvalidArgument(_) | Error::Config(_) => DaStatus::InvalidArgument,
            Error::Numeric(_) => DaStatus::Numeric,
            Error::Io(_) => DaStatus::Io,
            Error::UnsupportedFormat(_) | Error::Parse(_) | Error::Integrity(_) | Error::Json(_) => DaStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult = Result<(), Failure>;

fn null(what: &str) -> Failure {
    Failure(DaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DaStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> FfiResult) -> DaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            DaStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to a writable `T`.
unsafe fn write_out<T>(ptr: *mut T, v: T, what: &str) -> FfiResult {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(v);
    Ok(())
}

/// # Safety
/// `ptr` must be null or a nul-terminated string.
unsafe fn path<'a>(ptr: *const c_char) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| invalid("path is not valid UTF-8"))
}

/// # Safety
/// `model` must be null or a live handle.
unsafe fn handle<'a>(model: *const DaModel) -> Result<&'a DaModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

fn copy_into(dst: &mut [f32], src: &Tensor, what: &str) -> FfiResult {
    if dst.len() != src.len() {
        return Err(Failure(
            DaStatus::ShapeMismatch,
            format!("{what} buffer holds {} values, need {}", dst.len(), src.len()),
        ));
    }
    for (d, s) in dst.iter_mut().zip(src.data()) {
        *d = *s as f32;
    }
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn da_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn da_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialised model for a [`DaPreset`] value.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_model_new(preset: u32, seed: u64, out: *mut *mut DaModel) -> DaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut config = RunConfig::preset(match preset {
            p if p == DaPreset::Paper as u32 => Preset::Paper,
            p if p == DaPreset::Desk as u32 => Preset::Desk,
            p => return Err(invalid(format!("unknown preset {p}"))),
        });
        config.seed = seed;
        let params = init_model(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        write_out(out, Box::into_raw(Box::new(DaModel { params, config, step: 0 })), "out")
    })
}

/// Loads a checkpoint directory. Teacher tensors, if present, are dropped.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_model_load(dir: *const c_char, out: *mut *mut DaModel) -> DaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(path(dir)?)?;
        let m = DaModel {
            params: split_teacher(&ck.params).0,
            config: ck.config,
            step: ck.step,
        };
        write_out(out, Box::into_raw(Box::new(m)), "out")
    })
}

/// # Safety
/// `model` must be a live handle and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn da_model_save(model: *const DaModel, dir: *const c_char) -> DaStatus {
    guard(|| {
        let m = handle(model)?;
        save_checkpoint(
            path(dir)?,
            &Checkpoint {
                params: m.params.clone(),
                config: m.config.clone(),
                step: m.step,
            },
        )?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn da_model_free(model: *mut DaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width of the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_model_dim(model: *const DaModel, out: *mut usize) -> DaStatus {
    guard(|| write_out(out, handle(model)?.config.encoder.d_model, "out"))
}

/// Number of classifier outputs, or 0 when the model has no head.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_model_num_classes(model: *const DaModel, out: *mut usize) -> DaStatus {
    guard(|| {
        let m = handle(model)?;
        let c = if m.params.contains("head.w") { head_classes(&m.params)? } else { 0 };
        write_out(out, c, "out")
    })
}

unsafe fn features_of(m: &DaModel, samples: *const f32, n: usize, rate: u32) -> Result<diffaudio::model::Features, Failure> {
    let s = slice(samples, n, "samples")?;
    let w = Waveform::new(s.iter().map(|&v| v as f64).collect(), rate)?;
    Ok(featurize(&w, &m.config.frontend)?)
}

/// Clip embedding (the CLS output) of `n` mono samples into `out[dim]`.
///
/// # Safety
/// `samples` must hold `n` values and `out` room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn da_model_embed(
    model: *const DaModel,
    samples: *const f32,
    n: usize,
    sample_rate: u32,
    out: *mut f32,
    out_len: usize,
) -> DaStatus {
    guard(|| {
        let m = handle(model)?;
        let dst = slice_mut(out, out_len, "out")?;
        let f = features_of(m, samples, n, sample_rate)?;
        copy_into(dst, &clip_embedding(&m.params, &f, &m.config)?, "embedding")
    })
}

/// Classifier logits into `out[num_classes]`.
///
/// # Safety
/// `samples` must hold `n` values and `out` room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn da_model_classify(
    model: *const DaModel,
    samples: *const f32,
    n: usize,
    sample_rate: u32,
    out: *mut f32,
    out_len: usize,
) -> DaStatus {
    guard(|| {
        let m = handle(model)?;
        let dst = slice_mut(out, out_len, "out")?;
        let f = features_of(m, samples, n, sample_rate)?;
        copy_into(dst, &predict_logits(&m.params, &f, &m.config)?, "logits")
    })
}

/// Frames produced for `n_samples` samples at the default frontend settings.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_fbank_frames(n_samples: usize, out: *mut usize) -> DaStatus {
    guard(|| {
        let f = FbankConfig::default()
            .frame_count(n_samples)
            .ok_or_else(|| invalid(format!("{n_samples} samples is shorter than one frame")))?;
        write_out(out, f, "out")
    })
}

/// Log-mel fbank with default settings, row-major `frames x mels`.
///
/// # Safety
/// `samples` must hold `n` values, `out` room for `out_len`, and `frames`
/// and `mels` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn da_fbank_compute(
    samples: *const f32,
    n: usize,
    sample_rate: u32,
    out: *mut f32,
    out_len: usize,
    frames: *mut usize,
    mels: *mut usize,
) -> DaStatus {
    guard(|| {
        if frames.is_null() || mels.is_null() {
            return Err(null("frames/mels"));
        }
        let s = slice(samples, n, "samples")?;
        let w = Waveform::new(s.iter().map(|&v| v as f64).collect(), sample_rate)?;
        let spec = compute_fbank(&w, &FbankConfig::default())?;
        copy_into(slice_mut(out, out_len, "out")?, &spec.frames, "fbank")?;
        write_out(frames, spec.num_frames(), "frames")?;
        write_out(mels, spec.num_mels(), "mels")
    })
}

/// Differential attention weights for `n` queries and `m` keys of width `d`.
/// Inputs are row-major; each output is `n x m`.
///
/// # Safety
/// Inputs must hold `n*d` (queries) or `m*d` (keys) values and outputs
/// `n*m` values.
#[no_mangle]
pub unsafe extern "C" fn da_diff_attention_weights(
    q1: *const f64,
    k1: *const f64,
    q2: *const f64,
    k2: *const f64,
    n: usize,
    m: usize,
    d: usize,
    lambda: f64,
    a1: *mut f64,
    a2: *mut f64,
    a: *mut f64,
) -> DaStatus {
    guard(|| {
        if n == 0 || m == 0 || d == 0 {
            return Err(invalid("n, m and d must be positive"));
        }
        let t = |p: *const f64, rows: usize, what: &str| -> Result<Tensor, Failure> {
            Ok(Tensor::new(vec![rows, d], slice(p, rows * d, what)?.to_vec())?)
        };
        let tr = diff_weights_tensor(&t(q1, n, "q1")?, &t(k1, m, "k1")?, &t(q2, n, "q2")?, &t(k2, m, "k2")?, lambda, d)?;
        for (dst, src, what) in [(a1, &tr.a1, "a1"), (a2, &tr.a2, "a2"), (a, &tr.a, "a")] {
            slice_mut(dst, n * m, what)?.copy_from_slice(src.data());
        }
        Ok(())
    })
}

/// Mean average precision over the classes with at least one positive.
/// `labels` entries must be 0 or 1.
///
/// # Safety
/// `scores` and `labels` must hold `n*c` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn da_mean_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    c: usize,
    out: *mut f64,
) -> DaStatus {
    guard(|| {
        if n == 0 || c == 0 {
            return Err(invalid("n and c must be positive"));
        }
        let s = Tensor::new(vec![n, c], slice(scores, n * c, "scores")?.to_vec())?;
        let l = slice(labels, n * c, "labels")?;
        if l.iter().any(|&v| v > 1) {
            return Err(invalid("labels must be 0 or 1"));
        }
        let l = Tensor::new(vec![n, c], l.iter().map(|&v| v as f64).collect())?;
        let r = mean_average_precision(&s, &l)?;
        write_out(out, r.map, "out")
    })
}

/// Fraction of positions where `pred` equals `truth`.
///
/// # Safety
/// `pred` and `truth` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn da_accuracy(pred: *const usize, truth: *const usize, n: usize, out: *mut f64) -> DaStatus {
    guard(|| {
        let a = accuracy(slice(pred, n, "pred")?, slice(truth, n, "truth")?)?;
        write_out(out, a, "out")
    })
}
