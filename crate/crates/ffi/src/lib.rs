//! C interface: load trained checkpoints, generate reranked responses and
//! compute the diversity metrics.
//!
//! Every function returns a [`CtvaeStatus`]; on failure a description is
//! available from [`ctvae_last_error`] on the same thread. Handles are opaque
//! and must be released with their `*_free` function. Strings passed in must
//! be NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ctvae::data::{tokenize, Checkpoint, CheckpointError, Vocab};
use ctvae::decoding::{generate_candidates, GenerationConfig};
use ctvae::metrics::{distinct_n, unique_ratio};
use ctvae::models::Generator;
use ctvae::pipeline::{post_rng, rerank_post, RerankConfig};
use ctvae::rerank::Tcd;
use ctvae::tensor::ParamSet;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtvaeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    /// Unreadable, corrupt or wrong-version checkpoint.
    Checkpoint = 4,
    /// The checkpoint holds a different kind of network.
    KindMismatch = 5,
    InvalidArgument = 6,
    /// Generation or scoring failed for the given input.
    Runtime = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("NULs removed"));
}

type FfiResult<T> = Result<T, (CtvaeStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> CtvaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CtvaeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CtvaeStatus::Panic
        }
    }
}

fn checkpoint_status(e: CheckpointError) -> (CtvaeStatus, String) {
    let status = match e {
        CheckpointError::Io(_) => CtvaeStatus::Io,
        CheckpointError::KindMismatch { .. } => CtvaeStatus::KindMismatch,
        _ => CtvaeStatus::Checkpoint,
    };
    (status, e.to_string())
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> FfiResult<&'a str> {
    if s.is_null() {
        return Err((CtvaeStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (CtvaeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn non_null<T>(p: *const T, what: &str) -> FfiResult<()> {
    if p.is_null() {
        Err((CtvaeStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message describing the last failure on this thread (empty after a
/// success). Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ctvae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn ctvae_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

pub struct CtvaeGenerator {
    gen: Generator,
    params: ParamSet<f32>,
    vocab: Vocab,
    kind: CString,
}

pub struct CtvaeTcd {
    tcd: Tcd,
    params: ParamSet<f32>,
    vocab: Vocab,
}

pub struct CtvaeResponses {
    items: Vec<(CString, f64, f64)>,
}

/// Loads a generator checkpoint (any of the four kinds).
///
/// # Safety
/// `path` must be a valid string; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ctvae_generator_load(path: *const c_char, out: *mut *mut CtvaeGenerator) -> CtvaeStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(checkpoint_status)?;
        if ckpt.kind == "tcd" || ckpt.kind == "lm" {
            return Err((
                CtvaeStatus::KindMismatch,
                format!("checkpoint holds a `{}` network, expected a generator", ckpt.kind),
            ));
        }
        let (gen, params) = Generator::from_checkpoint(&ckpt).map_err(checkpoint_status)?;
        let kind = CString::new(gen.kind().as_str()).expect("no NUL");
        *out = Box::into_raw(Box::new(CtvaeGenerator {
            gen,
            params,
            vocab: ckpt.vocab,
            kind,
        }));
        Ok(())
    })
}

/// Model kind of a loaded generator (`seq2seq`, `cvae`, `cvae-simple` or
/// `ctvae`); owned by the handle.
///
/// # Safety
/// `gen` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctvae_generator_kind(gen: *const CtvaeGenerator) -> *const c_char {
    match gen.as_ref() {
        Some(g) => g.kind.as_ptr(),
        None => ptr::null(),
    }
}

/// # Safety
/// `gen` must be null or a handle from [`ctvae_generator_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctvae_generator_free(gen: *mut CtvaeGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Loads a coherence-discriminator checkpoint.
///
/// # Safety
/// `path` must be a valid string; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ctvae_tcd_load(path: *const c_char, out: *mut *mut CtvaeTcd) -> CtvaeStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(checkpoint_status)?;
        let (tcd, params) = Tcd::from_checkpoint(&ckpt).map_err(checkpoint_status)?;
        *out = Box::into_raw(Box::new(CtvaeTcd {
            tcd,
            params,
            vocab: ckpt.vocab,
        }));
        Ok(())
    })
}

/// # Safety
/// `tcd` must be null or a handle from [`ctvae_tcd_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctvae_tcd_free(tcd: *mut CtvaeTcd) {
    if !tcd.is_null() {
        drop(Box::from_raw(tcd));
    }
}

/// Probability that `response` is a coherent reply to `post`.
///
/// # Safety
/// Handles and strings must be valid; `out_p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctvae_tcd_score(
    tcd: *const CtvaeTcd,
    post: *const c_char,
    response: *const c_char,
    out_p: *mut f64,
) -> CtvaeStatus {
    guard(|| {
        non_null(out_p, "out_p")?;
        let t = tcd.as_ref().ok_or((CtvaeStatus::NullArgument, "tcd is null".into()))?;
        let post = tokenize(read_str(post, "post")?);
        let response = tokenize(read_str(response, "response")?);
        if post.is_empty() || response.is_empty() {
            return Err((CtvaeStatus::InvalidArgument, "post and response must contain a word".into()));
        }
        let s = t
            .tcd
            .score(&t.params, &t.vocab.encode(&post), &t.vocab.encode(&response))
            .map_err(|e| (CtvaeStatus::Runtime, e.to_string()))?;
        *out_p = s.p;
        Ok(())
    })
}

/// Decoding and reranking settings of [`ctvae_respond`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CtvaeRespondOptions {
    /// Latent samples for the variational models.
    pub n_samples: usize,
    /// Beam width per latent sample.
    pub beam: usize,
    /// Beam width of the Seq2Seq search.
    pub seq2seq_beam: usize,
    pub top_k: usize,
    /// Weight of the log coherence probability in the ranking score.
    pub lambda: f64,
    pub seed: u64,
}

/// Defaults: 50 samples, beam 20, Seq2Seq beam 50, top 5, λ = 5, seed 0.
#[no_mangle]
pub extern "C" fn ctvae_respond_options_default() -> CtvaeRespondOptions {
    let g = GenerationConfig::default();
    let r = RerankConfig::default();
    CtvaeRespondOptions {
        n_samples: g.n_samples,
        beam: g.beam,
        seq2seq_beam: g.seq2seq_beam,
        top_k: r.top_k,
        lambda: r.lambda,
        seed: 0,
    }
}

/// Generates candidates for `post`, reranks them with `tcd` and stores the
/// top-k in a new responses handle.
///
/// # Safety
/// Handles and strings must be valid; `opts` may be null for the defaults;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctvae_respond(
    gen: *const CtvaeGenerator,
    tcd: *const CtvaeTcd,
    post: *const c_char,
    opts: *const CtvaeRespondOptions,
    out: *mut *mut CtvaeResponses,
) -> CtvaeStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let g = gen.as_ref().ok_or((CtvaeStatus::NullArgument, "generator is null".into()))?;
        let t = tcd.as_ref().ok_or((CtvaeStatus::NullArgument, "tcd is null".into()))?;
        let opts = opts.as_ref().copied().unwrap_or_else(|| ctvae_respond_options_default());
        if opts.n_samples == 0 || opts.beam == 0 || opts.seq2seq_beam == 0 || opts.top_k == 0 {
            return Err((CtvaeStatus::InvalidArgument, "sample count, beams and top_k must be ≥ 1".into()));
        }
        if !(opts.lambda.is_finite() && opts.lambda >= 0.0) {
            return Err((CtvaeStatus::InvalidArgument, "lambda must be finite and ≥ 0".into()));
        }
        let post = tokenize(read_str(post, "post")?);
        if post.is_empty() {
            return Err((CtvaeStatus::InvalidArgument, "post must contain a word".into()));
        }
        let gen_cfg = GenerationConfig {
            n_samples: opts.n_samples,
            beam: opts.beam,
            seq2seq_beam: opts.seq2seq_beam,
            max_len: g.gen.config.max_decode_len,
        };
        let max_len = g.gen.config.max_seq_len;
        let ids = g.vocab.encode(&post[..post.len().min(max_len)]);
        let mut rng = post_rng(opts.seed, 0);
        let runtime = |e: ctvae::tensor::TensorError| (CtvaeStatus::Runtime, e.to_string());
        let (_, cands) = generate_candidates(&g.gen, &g.params, &ids, &gen_cfg, &mut rng).map_err(runtime)?;
        let decoded: Vec<(Vec<String>, f64)> = cands.iter().map(|c| (g.vocab.decode(&c.tokens), c.loglik)).collect();
        let rr = RerankConfig {
            lambda: opts.lambda,
            top_k: opts.top_k,
        };
        let ranked = rerank_post(
            (&t.tcd, &t.params),
            &t.vocab,
            &post,
            decoded.iter().map(|(w, l)| (w.as_slice(), *l)),
            &rr,
        )
        .map_err(runtime)?;
        let items = ranked
            .into_iter()
            .map(|r| (CString::new(r.tokens.join(" ")).expect("tokens have no NUL"), r.score, r.tcd_prob))
            .collect();
        *out = Box::into_raw(Box::new(CtvaeResponses { items }));
        Ok(())
    })
}

/// Number of responses held; 0 for a null handle.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctvae_responses_len(r: *const CtvaeResponses) -> usize {
    r.as_ref().map_or(0, |r| r.items.len())
}

/// Response `i` (best first). `text` stays valid until the handle is freed;
/// `score` and `tcd_prob` may be null.
///
/// # Safety
/// `r` must be a live handle and `text` writable.
#[no_mangle]
pub unsafe extern "C" fn ctvae_responses_get(
    r: *const CtvaeResponses,
    i: usize,
    text: *mut *const c_char,
    score: *mut f64,
    tcd_prob: *mut f64,
) -> CtvaeStatus {
    guard(|| {
        non_null(text, "text")?;
        let r = r.as_ref().ok_or((CtvaeStatus::NullArgument, "responses is null".into()))?;
        let (s, sc, p) = r.items.get(i).ok_or_else(|| {
            (
                CtvaeStatus::InvalidArgument,
                format!("index {i} out of range (have {})", r.items.len()),
            )
        })?;
        *text = s.as_ptr();
        if !score.is_null() {
            *score = *sc;
        }
        if !tcd_prob.is_null() {
            *tcd_prob = *p;
        }
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle from [`ctvae_respond`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctvae_responses_free(r: *mut CtvaeResponses) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `responses` must hold `n` valid strings.
unsafe fn read_responses(responses: *const *const c_char, n: usize) -> FfiResult<Vec<Vec<String>>> {
    if n == 0 {
        return Err((CtvaeStatus::InvalidArgument, "no responses".into()));
    }
    non_null(responses, "responses")?;
    (0..n)
        .map(|i| read_str(*responses.add(i), "response").map(tokenize))
        .collect()
}

/// Distinct n-gram ratio (in [0, 1]) over `n` whitespace-tokenized responses.
///
/// # Safety
/// `responses` must point to `n` valid strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctvae_distinct_n(
    responses: *const *const c_char,
    n: usize,
    order: usize,
    out: *mut f64,
) -> CtvaeStatus {
    guard(|| {
        non_null(out, "out")?;
        let rs = read_responses(responses, n)?;
        *out = distinct_n(&rs, order).map_err(|e| (CtvaeStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Fraction of distinct responses (in [0, 1]).
///
/// # Safety
/// `responses` must point to `n` valid strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctvae_unique_ratio(responses: *const *const c_char, n: usize, out: *mut f64) -> CtvaeStatus {
    guard(|| {
        non_null(out, "out")?;
        let rs = read_responses(responses, n)?;
        *out = unique_ratio(&rs).map_err(|e| (CtvaeStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}
