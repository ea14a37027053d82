//! C interface to tokenizers, language models and the EWC penalty.
//!
//! Every function returns a [`CplabStatus`]. On failure the message is
//! available from [`cplab_last_error`] on the same thread. Objects are
//! opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cplab::ewc::{self, EwcConfig, FisherSnapshot};
use cplab::model::{LanguageModel, ModelConfig};
use cplab::tokenizer::{BlockDataset, Tokenizer, TrainOptions};
use cplab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CplabStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Usage = 4,
    Numeric = 5,
    Tensor = 6,
    Io = 7,
    Aborted = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

pub struct CplabTokenizer(Tokenizer);

pub struct CplabModel(LanguageModel<f32>);

pub struct CplabFisher(FisherSnapshot);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(CplabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => CplabStatus::Config,
            Error::Usage(_) => CplabStatus::Usage,
            Error::Numeric(_) => CplabStatus::Numeric,
            Error::Tensor(_) => CplabStatus::Tensor,
            Error::Io { .. } => CplabStatus::Io,
            Error::Abort(_) => CplabStatus::Aborted,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CplabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CplabStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            CplabStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(CplabStatus::NullArgument, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(CplabStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Thread-local message of the last failed call; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cplab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cplab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trains a byte-level BPE tokenizer. `vocab_size` counts byte tokens and
/// merges; the two special tokens come on top.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_tokenizer_train(
    text: *const c_char,
    vocab_size: usize,
    min_frequency: u64,
    seed: u64,
    out: *mut *mut CplabTokenizer,
) -> CplabStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let opts = TrainOptions { vocab_size, min_frequency, seed, pre_split: true };
        *out = Box::into_raw(Box::new(CplabTokenizer(Tokenizer::train(text, opts)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_tokenizer_load(path: *const c_char, out: *mut *mut CplabTokenizer) -> CplabStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(CplabTokenizer(Tokenizer::load(Path::new(path))?)));
        Ok(())
    })
}

/// # Safety
/// `tok` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cplab_tokenizer_save(tok: *const CplabTokenizer, path: *const c_char) -> CplabStatus {
    guard(|| {
        let tok = ref_arg(tok, "tok")?;
        tok.0.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Total vocabulary size including the special tokens; 0 for a null handle.
///
/// # Safety
/// `tok` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cplab_tokenizer_vocab_size(tok: *const CplabTokenizer) -> usize {
    tok.as_ref().map_or(0, |t| t.0.vocab_size())
}

/// Encodes `text` into `ids`. The required length is always stored in
/// `out_len`; if it exceeds `capacity` nothing is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `ids` must have room for `capacity` values, or be null when `capacity`
/// is 0.
#[no_mangle]
pub unsafe extern "C" fn cplab_tokenizer_encode(
    tok: *const CplabTokenizer,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> CplabStatus {
    guard(|| {
        let tok = ref_arg(tok, "tok")?;
        let text = str_arg(text, "text")?;
        let out_len = out_arg(out_len, "out_len")?;
        let enc = tok.0.encode(text);
        *out_len = enc.len();
        if enc.len() > capacity {
            return Err(Fail(CplabStatus::BufferTooSmall, format!("{} ids do not fit in {capacity}", enc.len())));
        }
        if !enc.is_empty() {
            if ids.is_null() {
                return Err(null("ids"));
            }
            std::slice::from_raw_parts_mut(ids, enc.len()).copy_from_slice(&enc);
        }
        Ok(())
    })
}

/// # Safety
/// `tok` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cplab_tokenizer_free(tok: *mut CplabTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

/// Fresh model from a named preset such as `mini-causal`, sized to the
/// tokenizer's vocabulary.
///
/// # Safety
/// `preset` must be a NUL-terminated string, `tok` a handle from this
/// library and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_model_init(
    preset: *const c_char,
    tok: *const CplabTokenizer,
    seed: u64,
    out: *mut *mut CplabModel,
) -> CplabStatus {
    guard(|| {
        let mut cfg = ModelConfig::preset(str_arg(preset, "preset")?)?;
        let tok = ref_arg(tok, "tok")?;
        let out = out_arg(out, "out")?;
        cfg.vocab_size = tok.0.vocab_size();
        cfg.seed = seed;
        *out = Box::into_raw(Box::new(CplabModel(LanguageModel::init(cfg, tok.0.fingerprint())?)));
        Ok(())
    })
}

/// Loads a model checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_model_load(dir: *const c_char, out: *mut *mut CplabModel) -> CplabStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(CplabModel(LanguageModel::load(Path::new(dir))?)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `dir` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cplab_model_save(model: *const CplabModel, dir: *const c_char) -> CplabStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        model.0.save(Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Number of scalar parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cplab_model_param_count(model: *const CplabModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.total_dim())
}

/// Context length in tokens; 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cplab_model_context(model: *const CplabModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.n_positions)
}

/// Log-probability of a token sequence in nats: summed next-token
/// log-probabilities for causal models, pseudo-log-likelihood for masked
/// ones.
///
/// # Safety
/// `ids` must point to `len` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_model_sequence_logprob(
    model: *const CplabModel,
    ids: *const u32,
    len: usize,
    out: *mut f64,
) -> CplabStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        if ids.is_null() && len > 0 {
            return Err(null("ids"));
        }
        let ids = if len == 0 { &[][..] } else { std::slice::from_raw_parts(ids, len) };
        *out = model.0.sequence_logprob(ids)?;
        Ok(())
    })
}

/// Encodes `text` and scores it as [`cplab_model_sequence_logprob`] does.
///
/// # Safety
/// Handles must come from this library, `text` be a NUL-terminated string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_model_text_logprob(
    model: *const CplabModel,
    tok: *const CplabTokenizer,
    text: *const c_char,
    out: *mut f64,
) -> CplabStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let tok = ref_arg(tok, "tok")?;
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        if tok.0.fingerprint() != model.0.fingerprint {
            return Err(Fail(CplabStatus::Usage, "tokenizer does not match the model".into()));
        }
        *out = model.0.sequence_logprob(&tok.0.encode(text))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cplab_model_free(model: *mut CplabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Diagonal Fisher and anchor at the model's current parameters, estimated
/// on `text` cut into context-length blocks, with the `desk` EWC settings
/// apart from `subset_blocks` and `seed`.
///
/// # Safety
/// Handles must come from this library, `text` be a NUL-terminated string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_fisher_estimate(
    model: *const CplabModel,
    tok: *const CplabTokenizer,
    text: *const c_char,
    subset_blocks: usize,
    seed: u64,
    out: *mut *mut CplabFisher,
) -> CplabStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let tok = ref_arg(tok, "tok")?;
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let data = BlockDataset::from_text(&tok.0, text, model.0.config.n_positions, "l1")?;
        let cfg = EwcConfig { subset_blocks, seed, ..EwcConfig::preset("desk")? };
        *out = Box::into_raw(Box::new(CplabFisher(ewc::estimate_fisher_diagonal(&model.0, &data, &cfg)?)));
        Ok(())
    })
}

/// Loads a Fisher snapshot saved under `stem`, checking it matches the
/// model's parameter count.
///
/// # Safety
/// `stem` must be a NUL-terminated string, `model` a handle from this
/// library and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_fisher_load(
    stem: *const c_char,
    model: *const CplabModel,
    out: *mut *mut CplabFisher,
) -> CplabStatus {
    guard(|| {
        let stem = str_arg(stem, "stem")?;
        let model = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(CplabFisher(FisherSnapshot::load(Path::new(stem), model.0.params.total_dim())?)));
        Ok(())
    })
}

/// # Safety
/// `fisher` must come from this library and `stem` be a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn cplab_fisher_save(fisher: *const CplabFisher, stem: *const c_char) -> CplabStatus {
    guard(|| {
        let fisher = ref_arg(fisher, "fisher")?;
        fisher.0.save(Path::new(str_arg(stem, "stem")?))?;
        Ok(())
    })
}

/// Copies the Fisher diagonal into `values`, which must hold
/// `cplab_model_param_count` entries.
///
/// # Safety
/// `values` must have room for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn cplab_fisher_values(
    fisher: *const CplabFisher,
    values: *mut f64,
    capacity: usize,
) -> CplabStatus {
    guard(|| {
        let f = ref_arg(fisher, "fisher")?.0.fisher();
        if f.len() > capacity {
            return Err(Fail(CplabStatus::BufferTooSmall, format!("{} values do not fit in {capacity}", f.len())));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        std::slice::from_raw_parts_mut(values, f.len()).copy_from_slice(f);
        Ok(())
    })
}

/// `lambda * sum F (theta - theta*)^2 + mu * sum theta^2` at the model's
/// parameters.
///
/// # Safety
/// Handles must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cplab_ewc_penalty(
    model: *const CplabModel,
    fisher: *const CplabFisher,
    lambda: f64,
    mu: f64,
    out: *mut f64,
) -> CplabStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let fisher = ref_arg(fisher, "fisher")?;
        let out = out_arg(out, "out")?;
        *out = ewc::penalty(&model.0.params, &fisher.0, lambda, mu)?;
        Ok(())
    })
}

/// # Safety
/// `fisher` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cplab_fisher_free(fisher: *mut CplabFisher) {
    if !fisher.is_null() {
        drop(Box::from_raw(fisher));
    }
}
