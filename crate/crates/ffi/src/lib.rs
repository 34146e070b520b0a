//! C ABI over the `seqkv` engine.
//!
//! Every fallible function returns a [`SeqkvStatus`]; on failure the message
//! is kept per thread and read back with [`seqkv_last_error`]. Handles are
//! opaque, created by `*_new` functions and released by the matching `*_free`.
//! Passing a handle to its `*_free` twice, or using it afterwards, is
//! undefined behavior. No function unwinds across the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use seqkv::codec::ratio::{theoretical_ratio, RatioInputs};
use seqkv::codec::{decompress_sessions, CodecConfig, CompressedCache};
use seqkv::index::{PrefixIndex, SessionId};
use seqkv::model::{KvTensor, Model, ModelConfig, TokenSeq};
use seqkv::pipeline::{run_compression, ClusterSettings};
use seqkv::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqkvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    OutOfRange = 4,
    NotFound = 5,
    BufferTooSmall = 6,
    Corrupted = 7,
    FingerprintMismatch = 8,
    Unrecoverable = 9,
    Io = 10,
    Panic = 11,
}

impl From<&Error> for SeqkvStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::ConfigParse { .. } => Self::InvalidConfig,
            Error::SequenceTooLong { .. }
            | Error::TokenOutOfRange { .. }
            | Error::BudgetExceeded { .. } => Self::OutOfRange,
            Error::UnknownSession(_) => Self::NotFound,
            Error::MalformedRecord(_)
            | Error::Truncated(_)
            | Error::Corrupted(_)
            | Error::NonFinite { .. } => Self::Corrupted,
            Error::FingerprintMismatch { .. } => Self::FingerprintMismatch,
            Error::Unrecoverable { .. } => Self::Unrecoverable,
            Error::Io(_) => Self::Io,
            Error::AtPosition { source, .. } => Self::from(source.as_ref()),
            _ => Self::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SeqkvStatus, msg: impl Into<String>) -> SeqkvStatus {
    set_error(msg.into());
    status
}

fn from_err(e: Error) -> SeqkvStatus {
    let status = SeqkvStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), SeqkvStatus>) -> SeqkvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SeqkvStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(SeqkvStatus::Panic, "internal panic"),
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), SeqkvStatus> {
    if p.is_null() {
        Err(fail(SeqkvStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `data` must be valid for `len` reads when non-null.
unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], SeqkvStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(data, what)?;
    Ok(std::slice::from_raw_parts(data, len))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn seqkv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Toy decoder configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SeqkvModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub max_context: usize,
}

impl From<SeqkvModelConfig> for ModelConfig {
    fn from(c: SeqkvModelConfig) -> Self {
        ModelConfig {
            vocab_size: c.vocab_size,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            head_dim: c.head_dim,
            seed: c.seed,
            max_context: c.max_context,
        }
    }
}

/// The default toy model configuration.
#[no_mangle]
pub extern "C" fn seqkv_model_config_default() -> SeqkvModelConfig {
    let c = ModelConfig::default();
    SeqkvModelConfig {
        vocab_size: c.vocab_size,
        num_layers: c.num_layers,
        num_heads: c.num_heads,
        head_dim: c.head_dim,
        seed: c.seed,
        max_context: c.max_context,
    }
}

/// A built toy decoder.
pub struct SeqkvModel {
    inner: Arc<Model>,
}

/// Builds a model. `*out` receives the handle on success and is untouched otherwise.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn seqkv_model_new(
    config: SeqkvModelConfig,
    out: *mut *mut SeqkvModel,
) -> SeqkvStatus {
    guard(|| {
        non_null(out, "out")?;
        let model = Model::build(config.into()).map_err(from_err)?;
        *out = Box::into_raw(Box::new(SeqkvModel {
            inner: Arc::new(model),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`seqkv_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqkv_model_free(model: *mut SeqkvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
unsafe fn model_ref<'a>(model: *const SeqkvModel) -> Result<&'a SeqkvModel, SeqkvStatus> {
    non_null(model, "model")?;
    Ok(&*model)
}

/// Weight fingerprint, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqkv_model_fingerprint(model: *const SeqkvModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.fingerprint())
}

/// Scalars per cached position, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqkv_model_kv_stride(model: *const SeqkvModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().kv_stride())
}

/// Runs the decoder over `tokens` and writes `len · kv_stride` values to
/// `kv_out`, position-major. `kv_capacity` is the length of `kv_out`.
///
/// # Safety
/// `tokens` must be valid for `len` reads and `kv_out` for `kv_capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn seqkv_model_forward(
    model: *const SeqkvModel,
    tokens: *const u32,
    len: usize,
    kv_out: *mut f64,
    kv_capacity: usize,
) -> SeqkvStatus {
    guard(|| {
        let m = &model_ref(model)?.inner;
        let tokens = slice(tokens, len, "tokens")?.to_vec();
        let (kv, _) = m.forward(&tokens).map_err(from_err)?;
        write_kv(&kv, kv_out, kv_capacity)
    })
}

unsafe fn write_kv(kv: &KvTensor, out: *mut f64, capacity: usize) -> Result<(), SeqkvStatus> {
    let data = kv.as_slice();
    if data.len() > capacity {
        return Err(fail(
            SeqkvStatus::BufferTooSmall,
            format!("need {} values, buffer holds {capacity}", data.len()),
        ));
    }
    if !data.is_empty() {
        non_null(out, "kv_out")?;
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

/// Trie over stored sessions.
pub struct SeqkvIndex {
    inner: PrefixIndex,
}

/// # Safety
/// `model` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn seqkv_index_new(
    model: *const SeqkvModel,
    out: *mut *mut SeqkvIndex,
) -> SeqkvStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(SeqkvIndex {
            inner: PrefixIndex::new(Arc::clone(&m.inner)),
        }));
        Ok(())
    })
}

/// # Safety
/// `index` must be null or a handle from [`seqkv_index_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqkv_index_free(index: *mut SeqkvIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// # Safety
/// `index` must be a live handle and `tokens` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn seqkv_index_insert(
    index: *mut SeqkvIndex,
    session: u32,
    tokens: *const u32,
    len: usize,
) -> SeqkvStatus {
    guard(|| {
        non_null(index, "index")?;
        let tokens = slice(tokens, len, "tokens")?.to_vec();
        (*index)
            .inner
            .insert(session, TokenSeq(tokens))
            .map_err(from_err)
    })
}

/// # Safety
/// `index` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqkv_index_evict(index: *mut SeqkvIndex, session: u32) -> SeqkvStatus {
    guard(|| {
        non_null(index, "index")?;
        (*index).inner.evict(session).map_err(from_err)
    })
}

/// Result of [`seqkv_index_best_match`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SeqkvMatch {
    pub session: u32,
    pub shared_prefix_len: usize,
    /// `-log2 P(shared prefix)` in bits.
    pub metric: f64,
}

/// Finds the stored session sharing the most informative prefix with the
/// query. Returns `NotFound` on an empty index.
///
/// # Safety
/// `index` must be a live handle, `query` valid for `len` reads, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn seqkv_index_best_match(
    index: *const SeqkvIndex,
    query: *const u32,
    len: usize,
    out: *mut SeqkvMatch,
) -> SeqkvStatus {
    guard(|| {
        non_null(index, "index")?;
        non_null(out, "out")?;
        let query = slice(query, len, "query")?.to_vec();
        let m = (*index)
            .inner
            .best_match(&query)
            .ok_or_else(|| fail(SeqkvStatus::NotFound, "index is empty"))?;
        *out = SeqkvMatch {
            session: m.session,
            shared_prefix_len: m.shared_prefix_len,
            metric: m.metric,
        };
        Ok(())
    })
}

/// An owned byte buffer returned by the library.
pub struct SeqkvBuffer {
    bytes: Vec<u8>,
}

/// # Safety
/// `buffer` must be null or a live buffer handle.
#[no_mangle]
pub unsafe extern "C" fn seqkv_buffer_data(buffer: *const SeqkvBuffer) -> *const u8 {
    buffer.as_ref().map_or(ptr::null(), |b| b.bytes.as_ptr())
}

/// # Safety
/// `buffer` must be null or a live buffer handle.
#[no_mangle]
pub unsafe extern "C" fn seqkv_buffer_len(buffer: *const SeqkvBuffer) -> usize {
    buffer.as_ref().map_or(0, |b| b.bytes.len())
}

/// # Safety
/// `buffer` must be null or a buffer handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqkv_buffer_free(buffer: *mut SeqkvBuffer) {
    if !buffer.is_null() {
        drop(Box::from_raw(buffer));
    }
}

/// Clusters and compresses `count` sessions at a uniform depth of `bits`.
/// Session `i` has id `i` and tokens `tokens[offsets[i]..offsets[i + 1]]`,
/// so `offsets` holds `count + 1` entries. Sessions whose shared prefix
/// carries at least `threshold_bits` of information share a centroid.
///
/// # Safety
/// `tokens` must be valid for `offsets[count]` reads, `offsets` for
/// `count + 1` reads, and `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn seqkv_compress(
    model: *const SeqkvModel,
    tokens: *const u32,
    offsets: *const usize,
    count: usize,
    bits: u8,
    threshold_bits: f64,
    out: *mut *mut SeqkvBuffer,
) -> SeqkvStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        let offsets = slice(offsets, count + 1, "offsets")?;
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(fail(
                SeqkvStatus::InvalidArgument,
                "offsets must be non-decreasing",
            ));
        }
        let all = slice(tokens, offsets[count], "tokens")?.to_vec();
        let sessions: BTreeMap<SessionId, TokenSeq> = offsets
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i as SessionId, TokenSeq(all[w[0]..w[1]].to_vec())))
            .collect();
        let settings = ClusterSettings {
            threshold: threshold_bits,
            ..ClusterSettings::default()
        };
        let run = run_compression(&m.inner, &sessions, &settings, &CodecConfig::uniform(bits))
            .map_err(from_err)?;
        *out = Box::into_raw(Box::new(SeqkvBuffer { bytes: run.bytes }));
        Ok(())
    })
}

/// Decoded contents of a container file.
pub struct SeqkvCache {
    sessions: BTreeMap<SessionId, (TokenSeq, KvTensor)>,
}

/// Parses and decodes a container file produced for `model`.
///
/// # Safety
/// `bytes` must be valid for `len` reads and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn seqkv_decompress(
    model: *const SeqkvModel,
    bytes: *const u8,
    len: usize,
    out: *mut *mut SeqkvCache,
) -> SeqkvStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        let cache = CompressedCache::from_bytes(slice(bytes, len, "bytes")?).map_err(from_err)?;
        let sessions = decompress_sessions(&cache, &m.inner).map_err(from_err)?;
        *out = Box::into_raw(Box::new(SeqkvCache { sessions }));
        Ok(())
    })
}

/// # Safety
/// `cache` must be null or a handle from [`seqkv_decompress`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqkv_cache_free(cache: *mut SeqkvCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Number of decoded sessions, or 0 for a null handle.
///
/// # Safety
/// `cache` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqkv_cache_session_count(cache: *const SeqkvCache) -> usize {
    cache.as_ref().map_or(0, |c| c.sessions.len())
}

/// Token count of `session`, written to `*len`.
///
/// # Safety
/// `cache` must be a live handle and `len` valid.
#[no_mangle]
pub unsafe extern "C" fn seqkv_cache_session_len(
    cache: *const SeqkvCache,
    session: u32,
    len: *mut usize,
) -> SeqkvStatus {
    guard(|| {
        non_null(cache, "cache")?;
        non_null(len, "len")?;
        let (tokens, _) = lookup(&*cache, session)?;
        *len = tokens.len();
        Ok(())
    })
}

fn lookup(cache: &SeqkvCache, session: u32) -> Result<&(TokenSeq, KvTensor), SeqkvStatus> {
    cache.sessions.get(&session).ok_or_else(|| {
        fail(
            SeqkvStatus::NotFound,
            format!("session {session} not in cache"),
        )
    })
}

/// Copies the recovered tokens and KV of `session`. Either output may be
/// null to skip it; capacities are element counts.
///
/// # Safety
/// `cache` must be a live handle; non-null outputs must be valid for their
/// capacities.
#[no_mangle]
pub unsafe extern "C" fn seqkv_cache_session(
    cache: *const SeqkvCache,
    session: u32,
    tokens_out: *mut u32,
    tokens_capacity: usize,
    kv_out: *mut f64,
    kv_capacity: usize,
) -> SeqkvStatus {
    guard(|| {
        non_null(cache, "cache")?;
        let (tokens, kv) = lookup(&*cache, session)?;
        if !tokens_out.is_null() {
            if tokens.len() > tokens_capacity {
                return Err(fail(
                    SeqkvStatus::BufferTooSmall,
                    format!(
                        "need {} tokens, buffer holds {tokens_capacity}",
                        tokens.len()
                    ),
                ));
            }
            for (i, &t) in tokens.iter().enumerate() {
                *tokens_out.add(i) = t;
            }
        }
        if !kv_out.is_null() {
            write_kv(kv, kv_out, kv_capacity)?;
        }
        Ok(())
    })
}

/// Closed-form storage figures for a transformer KV cache.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SeqkvRatio {
    pub bits_per_token: f64,
    pub fp16_bits_per_token: f64,
    pub vs_fp16: f64,
    pub vs_quantized: f64,
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn seqkv_theoretical_ratio(
    layers: f64,
    heads: f64,
    head_dim: f64,
    bits: f64,
    mean_surprisal: f64,
    overhead: f64,
    out: *mut SeqkvRatio,
) -> SeqkvStatus {
    guard(|| {
        non_null(out, "out")?;
        let r = theoretical_ratio(&RatioInputs {
            layers,
            heads,
            head_dim,
            bits,
            mean_surprisal,
            overhead,
        })
        .map_err(from_err)?;
        *out = SeqkvRatio {
            bits_per_token: r.bits_per_token,
            fp16_bits_per_token: r.fp16_bits_per_token,
            vs_fp16: r.vs_fp16,
            vs_quantized: r.vs_quantized,
        };
        Ok(())
    })
}
