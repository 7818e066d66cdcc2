//! C ABI over the biss core library.
//!
//! Every fallible function returns a [`BissStatus`]; on failure the message is
//! kept per thread and read back with [`biss_last_error_message`]. Models are
//! opaque handles released with [`biss_model_free`]; strings returned by the
//! library are released with [`biss_string_free`].
//!
//! # Safety
//!
//! Pointer arguments must be non-null and valid for the documented length
//! unless stated otherwise. Handles must come from this library and must not
//! be used after they are freed.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use biss::checkpoint::{read_manifest, Checkpoint};
use biss::corpus::Vocab;
use biss::metrics::{corpus_bleu, distinct_n, sentence_bleu_i};
use biss::model::Seq2Seq;
use biss::sampling::Smooth;
use biss::tensor::DType;
use biss::trainer::{check_vocab, generate, TrainError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BissStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    VocabMismatch = 5,
    Numeric = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Message for the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn biss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

struct Failure(BissStatus, String);

type FfiResult<T> = Result<T, Failure>;

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match &e {
            TrainError::VocabMismatch { .. } => BissStatus::VocabMismatch,
            TrainError::Numeric { .. } => BissStatus::Numeric,
            TrainError::Config(_) | TrainError::Data(_) => BissStatus::InvalidArgument,
            _ => BissStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BissStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> BissStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BissStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside biss");
            BissStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(BissStatus::NullPointer, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BissStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ids<'a>(p: *const u32, len: usize, name: &str) -> FfiResult<Vec<usize>> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Failure(BissStatus::NullPointer, format!("{name} is NULL")));
    }
    Ok(slice::from_raw_parts(p, len).iter().map(|&i| i as usize).collect())
}

/// Array of `count` sequences given as pointer and length arrays.
unsafe fn sequences(seqs: *const *const u32, lens: *const usize, count: usize, name: &str) -> FfiResult<Vec<Vec<usize>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if seqs.is_null() || lens.is_null() {
        return Err(Failure(BissStatus::NullPointer, format!("{name} is NULL")));
    }
    let seqs = slice::from_raw_parts(seqs, count);
    let lens = slice::from_raw_parts(lens, count);
    seqs.iter().zip(lens).map(|(&s, &n)| ids(s, n, name)).collect()
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Failure(BissStatus::NullPointer, format!("{name} is NULL")))
}

enum Weights {
    F32(Seq2Seq<f32>),
    F64(Seq2Seq<f64>),
}

/// Loaded checkpoint and its vocabulary.
pub struct BissModel {
    weights: Weights,
    vocab: Vocab,
}

/// Loads a checkpoint and the vocabulary it was trained with.
#[no_mangle]
pub unsafe extern "C" fn biss_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut BissModel,
) -> BissStatus {
    guard(|| {
        let ckpt = Path::new(str_arg(checkpoint_path, "checkpoint_path")?);
        let vocab_path = Path::new(str_arg(vocab_path, "vocab_path")?);
        let out = out_arg(out, "out")?;
        let manifest = read_manifest(ckpt).map_err(TrainError::from)?;
        let vocab = Vocab::load(vocab_path).map_err(TrainError::from)?;
        check_vocab(&manifest, &vocab)?;
        let weights = match manifest.dtype {
            DType::F32 => Weights::F32(
                Checkpoint::<f32>::load(ckpt)
                    .map_err(TrainError::from)?
                    .model()
                    .map_err(TrainError::from)?,
            ),
            DType::F64 => Weights::F64(
                Checkpoint::<f64>::load(ckpt)
                    .map_err(TrainError::from)?
                    .model()
                    .map_err(TrainError::from)?,
            ),
        };
        *out = Box::into_raw(Box::new(BissModel { weights, vocab }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn biss_model_free(model: *mut BissModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable values in the model, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn biss_model_num_parameters(model: *const BissModel) -> usize {
    match model.as_ref() {
        Some(m) => match &m.weights {
            Weights::F32(w) => w.num_parameters(),
            Weights::F64(w) => w.num_parameters(),
        },
        None => 0,
    }
}

/// Greedy reply to `prompt`. On success `*out` holds a string to release with
/// [`biss_string_free`].
#[no_mangle]
pub unsafe extern "C" fn biss_model_generate(
    model: *const BissModel,
    prompt: *const c_char,
    out: *mut *mut c_char,
) -> BissStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| Failure(BissStatus::NullPointer, "model is NULL".into()))?;
        let prompt = str_arg(prompt, "prompt")?;
        let out = out_arg(out, "out")?;
        let text = match &model.weights {
            Weights::F32(w) => generate(w, &model.vocab, prompt)?,
            Weights::F64(w) => generate(w, &model.vocab, prompt)?,
        };
        *out = CString::new(text)
            .map_err(|_| invalid("generated text contains NUL"))?
            .into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn biss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Unsmoothed sentence BLEU of order `order` (1 to 4).
#[no_mangle]
pub unsafe extern "C" fn biss_sentence_bleu(
    candidate: *const u32,
    candidate_len: usize,
    reference: *const u32,
    reference_len: usize,
    order: u32,
    out: *mut f64,
) -> BissStatus {
    guard(|| {
        let c = ids(candidate, candidate_len, "candidate")?;
        let r = ids(reference, reference_len, "reference")?;
        let out = out_arg(out, "out")?;
        *out = sentence_bleu_i(&c, &r, order as usize).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// Corpus BLEU. Writes cumulative BLEU-1..4 to `bleu_out[0..4]`; when
/// `precision_out` is not NULL the clipped precisions go to `precision_out[0..4]`.
#[no_mangle]
pub unsafe extern "C" fn biss_corpus_bleu(
    candidates: *const *const u32,
    candidate_lens: *const usize,
    references: *const *const u32,
    reference_lens: *const usize,
    count: usize,
    bleu_out: *mut f64,
    precision_out: *mut f64,
) -> BissStatus {
    guard(|| {
        let c = sequences(candidates, candidate_lens, count, "candidates")?;
        let r = sequences(references, reference_lens, count, "references")?;
        if bleu_out.is_null() {
            return Err(Failure(BissStatus::NullPointer, "bleu_out is NULL".into()));
        }
        let report = corpus_bleu(&c, &r).map_err(|e| invalid(e.to_string()))?;
        slice::from_raw_parts_mut(bleu_out, 4).copy_from_slice(&report.bleu);
        if !precision_out.is_null() {
            slice::from_raw_parts_mut(precision_out, 4).copy_from_slice(&report.precision);
        }
        Ok(())
    })
}

/// Corpus-wide Distinct-n.
#[no_mangle]
pub unsafe extern "C" fn biss_distinct(
    candidates: *const *const u32,
    candidate_lens: *const usize,
    count: usize,
    n: u32,
    out: *mut f64,
) -> BissStatus {
    guard(|| {
        let c = sequences(candidates, candidate_lens, count, "candidates")?;
        let out = out_arg(out, "out")?;
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        *out = distinct_n(&c, n as usize);
        Ok(())
    })
}

/// `1 / (1 + exp(-k (x - b)))`
#[no_mangle]
pub extern "C" fn biss_smooth_sigmoid(x: f64, k: f64, b: f64) -> f64 {
    Smooth::Sigmoid { k, b }.apply(x)
}

/// `x` clamped to [0, 1].
#[no_mangle]
pub extern "C" fn biss_smooth_clamp(x: f64) -> f64 {
    Smooth::Clamp.apply(x)
}
