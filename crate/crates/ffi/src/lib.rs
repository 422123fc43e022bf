//! C ABI over the idpatch core.
//!
//! Every function returns an [`IdpStatus`]; on failure the message is kept
//! per thread and read with `idp_last_error`. Handles are opaque and must be
//! released with their `_free` function. Images cross the boundary as
//! interleaved row-major RGB `float` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use idpatch::condimage::compose_canvas;
use idpatch::evalkit::{association_accuracy, SimilarityMatrix};
use idpatch::projector::IdPatch;
use idpatch::raster::RgbImage;
use idpatch::sampler::{GenerationRequest, Sampler};
use idpatch::synthid::{sample_identity, IdentityFeature, World};
use idpatch::trainer::{load_checkpoint, Stage};
use idpatch::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Precondition = 4,
    Numerical = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

/// Synthetic identity world: sprite renderer and feature oracle.
pub struct IdpWorld {
    inner: World,
}

/// A checkpoint loaded for generation.
pub struct IdpSampler {
    inner: Sampler,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> IdpStatus {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Overlap { .. } | Error::Json(_) => IdpStatus::InvalidArgument,
        Error::Shape(_) => IdpStatus::ShapeMismatch,
        Error::Precondition(_) => IdpStatus::Precondition,
        Error::Numerical(_) => IdpStatus::Numerical,
        Error::CheckpointVersion { .. } | Error::CheckpointCorrupt(_) => IdpStatus::Checkpoint,
        Error::Missing(_) | Error::Io { .. } | Error::Image { .. } => IdpStatus::Io,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (IdpStatus, String)>) -> IdpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IdpStatus::Ok,
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            IdpStatus::Panic
        }
    }
}

fn core(e: Error) -> (IdpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (IdpStatus, String) {
    (IdpStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> (IdpStatus, String) {
    (IdpStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (IdpStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], (IdpStatus, String)> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn copy_out(src: &[f32], dst: &mut [f32]) -> Result<(), (IdpStatus, String)> {
    if src.len() != dst.len() {
        return Err((IdpStatus::ShapeMismatch, format!("output buffer holds {} values, need {}", dst.len(), src.len())));
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn locations(xy: &[u32]) -> Vec<(usize, usize)> {
    xy.chunks_exact(2).map(|c| (c[0] as usize, c[1] as usize)).collect()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn idp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub unsafe extern "C" fn idp_world_new(
    feature_dim: usize,
    sprite_size: usize,
    num_styles: usize,
    out: *mut *mut IdpWorld,
) -> IdpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = World::new(feature_dim, sprite_size, num_styles).map_err(core)?;
        *out = Box::into_raw(Box::new(IdpWorld { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn idp_world_free(world: *mut IdpWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Unit-norm identity feature for `seed`, written to `out[dim]`.
#[no_mangle]
pub unsafe extern "C" fn idp_sample_identity(seed: u64, dim: usize, out: *mut f32) -> IdpStatus {
    guard(|| {
        if dim == 0 {
            return Err(bad("dim must be positive"));
        }
        copy_out(&sample_identity(seed, dim).values, slice_mut(out, dim, "out")?)
    })
}

/// Renders the face sprite of `feature[dim]` into `out[3 * S * S]`, values in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn idp_world_render_face(
    world: *const IdpWorld,
    feature: *const f32,
    dim: usize,
    out: *mut f32,
    out_len: usize,
) -> IdpStatus {
    guard(|| {
        let w = &world.as_ref().ok_or_else(|| null("world"))?.inner;
        let f = IdentityFeature::from_raw(slice(feature, dim, "feature")?.to_vec(), -1);
        if f.dim() != w.codec.dim() {
            return Err((IdpStatus::ShapeMismatch, format!("feature has {dim} dims, world uses {}", w.codec.dim())));
        }
        let sprite = w.render_face(&f).map_err(core)?;
        copy_out(sprite.pixels.data(), slice_mut(out, out_len, "out")?)
    })
}

/// Recovers the unit-norm feature of an `S x S` crop into `out[dim]`.
#[no_mangle]
pub unsafe extern "C" fn idp_world_extract_feature(
    world: *const IdpWorld,
    crop: *const f32,
    crop_len: usize,
    out: *mut f32,
    dim: usize,
) -> IdpStatus {
    guard(|| {
        let w = &world.as_ref().ok_or_else(|| null("world"))?.inner;
        let s = w.sprite_size();
        if crop_len != 3 * s * s {
            return Err((IdpStatus::ShapeMismatch, format!("crop has {crop_len} values, need {}", 3 * s * s)));
        }
        let img = RgbImage::new(s, s, slice(crop, crop_len, "crop")?.to_vec()).map_err(core)?;
        let f = w.extract_feature(&img).map_err(core)?;
        copy_out(&f.values, slice_mut(out, dim, "out")?)
    })
}

/// Pastes `n` square patches (`patches[n * 3 * P * P]`) at anchors
/// `xy[2 * n]` on a black `height x width` canvas written to `out`.
#[no_mangle]
pub unsafe extern "C" fn idp_compose_canvas(
    patches: *const f32,
    n: usize,
    patch_size: usize,
    xy: *const u32,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> IdpStatus {
    guard(|| {
        let per = 3 * patch_size * patch_size;
        let data = slice(patches, n * per, "patches")?;
        let list = data
            .chunks_exact(per.max(1))
            .take(n)
            .map(|c| Ok(IdPatch { pixels: RgbImage::new(patch_size, patch_size, c.to_vec()).map_err(core)?, source_label: -1 }))
            .collect::<Result<Vec<_>, _>>()?;
        let locs = locations(slice(xy, 2 * n, "xy")?);
        let img = compose_canvas(&list, &locs, (height, width), None).map_err(core)?;
        copy_out(img.pixels.data(), slice_mut(out, out_len, "out")?)
    })
}

/// Identity-position association accuracy of a row-major `n x n`
/// similarity matrix (rows: generated faces, columns: input faces).
#[no_mangle]
pub unsafe extern "C" fn idp_association_accuracy(sim: *const f64, n: usize, out: *mut f64) -> IdpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = slice(sim, n * n, "sim")?;
        let rows = data.chunks_exact(n.max(1)).map(<[f64]>::to_vec).collect();
        *out = association_accuracy(&SimilarityMatrix::new(rows).map_err(core)?).map_err(core)?;
        Ok(())
    })
}

/// Loads a checkpoint for generation.
#[no_mangle]
pub unsafe extern "C" fn idp_sampler_load(path: *const c_char, out: *mut *mut IdpSampler) -> IdpStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(null("path or out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| bad("path is not UTF-8"))?;
        let ckpt = load_checkpoint(Path::new(p)).map_err(core)?;
        *out = Box::into_raw(Box::new(IdpSampler { inner: Sampler::new(&ckpt).map_err(core)? }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn idp_sampler_free(s: *mut IdpSampler) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Canvas height, width and identity feature size of a loaded checkpoint.
#[no_mangle]
pub unsafe extern "C" fn idp_sampler_dims(
    s: *const IdpSampler,
    height: *mut usize,
    width: *mut usize,
    feature_dim: *mut usize,
) -> IdpStatus {
    guard(|| {
        let c = &s.as_ref().ok_or_else(|| null("sampler"))?.inner.model.cfg;
        if height.is_null() || width.is_null() || feature_dim.is_null() {
            return Err(null("output"));
        }
        *height = c.height;
        *width = c.width;
        *feature_dim = c.projector.feature_dim;
        Ok(())
    })
}

/// Generates one image for `n` identities (`features[n * dim]`) at anchors
/// `xy[2 * n]` with the default two-phase schedule and guidance. Writes
/// `3 * H * W` values in `[0, 1]` to `out`.
#[no_mangle]
pub unsafe extern "C" fn idp_sampler_generate(
    s: *const IdpSampler,
    features: *const f32,
    n: usize,
    dim: usize,
    xy: *const u32,
    caption_label: usize,
    seed: u64,
    steps: usize,
    out: *mut f32,
    out_len: usize,
) -> IdpStatus {
    guard(|| {
        let s = &s.as_ref().ok_or_else(|| null("sampler"))?.inner;
        let feats = slice(features, n * dim, "features")?;
        let ids = feats.chunks_exact(dim.max(1)).take(n).map(|c| IdentityFeature::from_raw(c.to_vec(), -1)).collect();
        let mut req = GenerationRequest::new(ids, locations(slice(xy, 2 * n, "xy")?), caption_label, seed);
        req.steps = steps;
        req.use_tokens = s.stage != Stage::One;
        let img = s.sample(&req).map_err(core)?;
        copy_out(img.pixels.data(), slice_mut(out, out_len, "out")?)
    })
}
