//! C ABI over `latte-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` / `*_new`
//! and released with the matching `*_free`. Every fallible function returns a
//! [`LatteStatus`]; on failure the message is kept per thread and can be read
//! with [`latte_last_error_message`]. Outputs are written through caller
//! pointers only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use latte::analysis::{self, cantelli_bound, kendall_tau_b, pearson};
use latte::beam::{beam_search, RankedList};
use latte::model::history_tokens;
use latte::{Aggregation, Catalog, Error, ScorerParams, TrieForest};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatteStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Model = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatteAggregation {
    Sum = 0,
    Max = 1,
}

impl From<LatteAggregation> for Aggregation {
    fn from(a: LatteAggregation) -> Self {
        match a {
            LatteAggregation::Sum => Aggregation::Sum,
            LatteAggregation::Max => Aggregation::Max,
        }
    }
}

/// A tokenized catalog.
pub struct LatteCatalog {
    inner: Catalog,
}

/// One decoding trie, or one per permutation when bound.
pub struct LatteForest {
    inner: TrieForest,
}

/// Trained scorer parameters.
pub struct LatteModel {
    inner: ScorerParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

struct Fail(LatteStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => LatteStatus::Io,
            Error::Json(_) | Error::Malformed { .. } => LatteStatus::Parse,
            Error::InvalidArgument { .. }
            | Error::Config { .. }
            | Error::LengthMismatch { .. }
            | Error::UnknownItem(_)
            | Error::EmptyHistory
            | Error::ZeroVariance
            | Error::AllTied
            | Error::NoLatentVocabulary => LatteStatus::InvalidArgument,
            _ => LatteStatus::Model,
        };
        Fail(status, e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(LatteStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(LatteStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LatteStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LatteStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            LatteStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn read_path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

fn items_in_range(catalog: &Catalog, items: &[usize]) -> Result<(), Fail> {
    match items.iter().find(|&&i| i >= catalog.len()) {
        Some(i) => Err(invalid(format!("item index {i} out of range for {} items", catalog.len()))),
        None => Ok(()),
    }
}

fn forest_matches(forest: &TrieForest, catalog: &Catalog) -> Result<(), Fail> {
    if forest.items() != catalog.len() {
        return Err(invalid(format!(
            "forest has {} items, catalog has {}",
            forest.items(),
            catalog.len()
        )));
    }
    Ok(())
}

/// Version string of the library, NUL-terminated and static.
#[no_mangle]
pub extern "C" fn latte_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, excluding the NUL.
#[no_mangle]
pub extern "C" fn latte_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `cap - 1` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn latte_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Loads a catalog JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn latte_catalog_load(path: *const c_char, out: *mut *mut LatteCatalog) -> LatteStatus {
    guard(|| {
        let dst = out_ref(out, "out")?;
        let inner = Catalog::load(read_path(path)?)?;
        *dst = Box::into_raw(Box::new(LatteCatalog { inner }));
        Ok(())
    })
}

/// # Safety
/// `catalog` must come from [`latte_catalog_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn latte_catalog_free(catalog: *mut LatteCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Number of items, or 0 for a null handle.
///
/// # Safety
/// `catalog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latte_catalog_len(catalog: *const LatteCatalog) -> usize {
    catalog.as_ref().map_or(0, |c| c.inner.len())
}

/// SID length `m`, or 0 for a null handle.
///
/// # Safety
/// `catalog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latte_catalog_depth(catalog: *const LatteCatalog) -> usize {
    catalog.as_ref().map_or(0, |c| c.inner.m)
}

/// Index of the item named `item_id`.
///
/// # Safety
/// `catalog` must be a live handle, `item_id` a NUL-terminated string and
/// `index` writable.
#[no_mangle]
pub unsafe extern "C" fn latte_catalog_index_of(
    catalog: *const LatteCatalog,
    item_id: *const c_char,
    index: *mut usize,
) -> LatteStatus {
    guard(|| {
        let c = deref(catalog, "catalog")?;
        let dst = out_ref(index, "index")?;
        if item_id.is_null() {
            return Err(null("item_id"));
        }
        let id = CStr::from_ptr(item_id).to_str().map_err(|_| invalid("item_id is not valid UTF-8"))?;
        *dst = c.inner.index_of(id).ok_or_else(|| Fail::from(Error::UnknownItem(id.to_string())))?;
        Ok(())
    })
}

/// Writes the `m` codes of item `index` into `codes`.
///
/// # Safety
/// `catalog` must be a live handle and `codes` point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn latte_catalog_sid(
    catalog: *const LatteCatalog,
    index: usize,
    codes: *mut u32,
    cap: usize,
) -> LatteStatus {
    guard(|| {
        let c = deref(catalog, "catalog")?;
        items_in_range(&c.inner, &[index])?;
        if cap < c.inner.m {
            return Err(Fail(LatteStatus::BufferTooSmall, format!("need {} codes, got {cap}", c.inner.m)));
        }
        let dst = slice_mut(codes, cap, "codes")?;
        for (d, &s) in dst.iter_mut().zip(c.inner.sid(index).codes()) {
            *d = s;
        }
        Ok(())
    })
}

/// Builds the decoding forest: a single trie when `bind` is 0, otherwise one
/// trie per permutation of the SID positions (`latent` must equal `m!`).
///
/// # Safety
/// `catalog` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn latte_forest_new(
    catalog: *const LatteCatalog,
    latent: usize,
    bind: bool,
    out: *mut *mut LatteForest,
) -> LatteStatus {
    guard(|| {
        let c = deref(catalog, "catalog")?;
        let dst = out_ref(out, "out")?;
        let inner = latte::pipeline::build_forest(&c.inner, latent, bind)?;
        *dst = Box::into_raw(Box::new(LatteForest { inner }));
        Ok(())
    })
}

/// # Safety
/// `forest` must come from [`latte_forest_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn latte_forest_free(forest: *mut LatteForest) {
    if !forest.is_null() {
        drop(Box::from_raw(forest));
    }
}

/// Number of tries in the forest, or 0 for a null handle.
///
/// # Safety
/// `forest` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latte_forest_len(forest: *const LatteForest) -> usize {
    forest.as_ref().map_or(0, |f| f.inner.len())
}

/// Tree distance `2(m − common prefix)` between items `a` and `b` in the trie
/// decoded after latent token `latent`. A negative `latent`, or any valid one
/// on an unbound forest, selects the shared trie.
///
/// # Safety
/// `forest` must be a live handle and `distance` writable.
#[no_mangle]
pub unsafe extern "C" fn latte_tree_distance(
    forest: *const LatteForest,
    latent: i64,
    a: usize,
    b: usize,
    distance: *mut usize,
) -> LatteStatus {
    guard(|| {
        let f = &deref(forest, "forest")?.inner;
        let dst = out_ref(distance, "distance")?;
        let latent = match usize::try_from(latent) {
            Err(_) => None,
            Ok(l) if l < f.len() => Some(l as u32),
            Ok(_) => return Err(invalid(format!("latent {latent} out of range for {} tries", f.len()))),
        };
        *dst = f.trie(latent).tree_distance(a, b)?;
        Ok(())
    })
}

/// Loads scorer parameters from JSON.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn latte_model_load(path: *const c_char, out: *mut *mut LatteModel) -> LatteStatus {
    guard(|| {
        let dst = out_ref(out, "out")?;
        let inner = ScorerParams::load(read_path(path)?)?;
        *dst = Box::into_raw(Box::new(LatteModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`latte_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn latte_model_free(model: *mut LatteModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Latent vocabulary size of the model (0 for the base model or a null handle).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latte_model_latent(model: *const LatteModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().latent)
}

/// Exhaustive log-scores of every item given a chronological history of item
/// indices. `scores` receives one value per catalog item.
///
/// # Safety
/// Handles must be live; `history` must point to `history_len` values and
/// `scores` to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn latte_score_items(
    model: *const LatteModel,
    forest: *const LatteForest,
    catalog: *const LatteCatalog,
    history: *const usize,
    history_len: usize,
    agg: LatteAggregation,
    scores: *mut f64,
    cap: usize,
) -> LatteStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        let f = &deref(forest, "forest")?.inner;
        let c = &deref(catalog, "catalog")?.inner;
        forest_matches(f, c)?;
        let h = slice(history, history_len, "history")?;
        items_in_range(c, h)?;
        if cap < c.len() {
            return Err(Fail(LatteStatus::BufferTooSmall, format!("need {} scores, got {cap}", c.len())));
        }
        let dst = slice_mut(scores, cap, "scores")?;
        let s = m.score_items(f, &history_tokens(c, h), agg.into())?;
        dst[..s.len()].copy_from_slice(&s);
        Ok(())
    })
}

/// Beam search. Writes up to `cap` item indices and log-scores in rank order
/// and the number written to `written`.
///
/// # Safety
/// Handles must be live; `history` must point to `history_len` values;
/// `items` and `scores` must each point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn latte_beam_search(
    model: *const LatteModel,
    forest: *const LatteForest,
    catalog: *const LatteCatalog,
    history: *const usize,
    history_len: usize,
    beam_size: usize,
    agg: LatteAggregation,
    items: *mut usize,
    scores: *mut f64,
    cap: usize,
    written: *mut usize,
) -> LatteStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        let f = &deref(forest, "forest")?.inner;
        let c = &deref(catalog, "catalog")?.inner;
        forest_matches(f, c)?;
        let n_out = out_ref(written, "written")?;
        let h = slice(history, history_len, "history")?;
        items_in_range(c, h)?;
        let item_out = slice_mut(items, cap, "items")?;
        let score_out = slice_mut(scores, cap, "scores")?;
        let ranked: RankedList = beam_search(m, f, c, &history_tokens(c, h), beam_size, agg.into())?;
        let n = ranked.len().min(cap);
        for (k, r) in ranked.entries.iter().take(n).enumerate() {
            item_out[k] = r.item;
            score_out[k] = r.score;
        }
        *n_out = n;
        Ok(())
    })
}

/// Cantelli bound on the rank-reversal rate of two items with mean gap `mu`,
/// pooled variance `sigma2` and correlation `rho`.
///
/// # Safety
/// `bound` must be writable.
#[no_mangle]
pub unsafe extern "C" fn latte_cantelli_bound(mu: f64, sigma2: f64, rho: f64, bound: *mut f64) -> LatteStatus {
    guard(|| {
        let dst = out_ref(bound, "bound")?;
        *dst = cantelli_bound(mu, sigma2, rho)?;
        Ok(())
    })
}

/// Correlation under a uniform mixture of `latent` tries where only one keeps
/// the pair at `rho` and the rest give `rho_low`.
///
/// # Safety
/// `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn latte_effective_correlation(
    rho: f64,
    rho_low: f64,
    latent: usize,
    value: *mut f64,
) -> LatteStatus {
    guard(|| {
        let dst = out_ref(value, "value")?;
        *dst = analysis::latte_effective_correlation(rho, rho_low, latent)?;
        Ok(())
    })
}

/// Pearson correlation of two equal-length samples.
///
/// # Safety
/// `x` and `y` must point to `n` values; `r` must be writable.
#[no_mangle]
pub unsafe extern "C" fn latte_pearson(x: *const f64, y: *const f64, n: usize, r: *mut f64) -> LatteStatus {
    guard(|| {
        let dst = out_ref(r, "r")?;
        *dst = pearson(slice(x, n, "x")?, slice(y, n, "y")?)?;
        Ok(())
    })
}

/// Kendall tau-b of two equal-length samples.
///
/// # Safety
/// `x` and `y` must point to `n` values; `tau` must be writable.
#[no_mangle]
pub unsafe extern "C" fn latte_kendall_tau_b(x: *const f64, y: *const f64, n: usize, tau: *mut f64) -> LatteStatus {
    guard(|| {
        let dst = out_ref(tau, "tau")?;
        *dst = kendall_tau_b(slice(x, n, "x")?, slice(y, n, "y")?)?;
        Ok(())
    })
}

/// NDCG@k of a single relevant item found at 1-based `rank` (0 = not ranked).
#[no_mangle]
pub extern "C" fn latte_ndcg_at_rank(rank: usize, k: usize) -> f64 {
    latte::eval::ndcg_for_rank((rank > 0).then_some(rank), k)
}
