//! C ABI over the pgga library.
//!
//! Every fallible function returns a [`PggaStatus`]. On failure the message
//! is kept per thread and can be read with [`pgga_last_error`] until the
//! next call on that thread. Arrays are caller-owned, row-major and of
//! type `double` unless noted. Model handles come from [`pgga_model_load`]
//! and are released with [`pgga_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pgga::eval::{cmc, distance_matrix, mean_ap, Meta};
use pgga::network::Model;
use pgga::pose::{coarse_mask, extract_keypoints, fine_masks, Heatmap, MaskParams, NUM_PARTS};
use pgga::train::{load_for_eval, RunConfig};
use pgga::{PggaError, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PggaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    NonFinite = 7,
    TrainMode = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Internal = 11,
}

/// Mask parameters: square half-width ω and weights α, β.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PggaMaskParams {
    pub omega: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// A trained model in eval mode together with its run config.
pub struct PggaModel {
    cfg: RunConfig,
    model: Model,
}

/// Number of keypoint heatmap channels.
pub const PGGA_NUM_PARTS: usize = 13;
/// Graph attention weights per image.
pub const PGGA_NUM_NODES: usize = 5;

const _: () = assert!(PGGA_NUM_PARTS == NUM_PARTS);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(PggaStatus, String);

impl From<PggaError> for Fail {
    fn from(e: PggaError) -> Self {
        let status = match &e {
            PggaError::Shape { .. } => PggaStatus::Shape,
            PggaError::InvalidArgument(_) => PggaStatus::InvalidArgument,
            PggaError::Config(_) | PggaError::BnNotReady(_) => PggaStatus::Config,
            PggaError::TrainMode => PggaStatus::TrainMode,
            PggaError::NonFinite(_) => PggaStatus::NonFinite,
            PggaError::Format { .. } => PggaStatus::Format,
            PggaError::Io(_) => PggaStatus::Io,
            PggaError::CyclicRecord { .. } => PggaStatus::Internal,
        };
        Fail(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PggaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PggaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PggaStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(PggaStatus::NullPointer, format!("`{name}` is null"))
}

/// # Safety
/// `p` must be null or valid for `n` reads.
unsafe fn input<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or valid for `n` writes.
unsafe fn output<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// # Safety
/// `p` must be null or valid for one write.
unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn model_ref<'a>(m: *const PggaModel) -> Result<&'a PggaModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn mask_params(p: PggaMaskParams) -> Result<MaskParams, Fail> {
    Ok(MaskParams::new(p.omega, p.alpha, p.beta)?)
}

fn heatmap(data: &[f64], rows: usize, cols: usize) -> Result<Heatmap, Fail> {
    Ok(Heatmap::new(Tensor::new(&[NUM_PARTS, rows, cols], data.to_vec())?)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pgga_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next pgga call on the same thread.
#[no_mangle]
pub extern "C" fn pgga_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint and the `<ckpt>.cfg` written beside it, ready for
/// descriptor extraction.
///
/// # Safety
/// `ckpt_path` must be a NUL-terminated string; `out` must be valid for
/// one write. On success `*out` owns a handle for [`pgga_model_free`].
#[no_mangle]
pub unsafe extern "C" fn pgga_model_load(ckpt_path: *const c_char, out: *mut *mut PggaModel) -> PggaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if ckpt_path.is_null() {
            return Err(null("ckpt_path"));
        }
        let path = CStr::from_ptr(ckpt_path)
            .to_str()
            .map_err(|_| Fail(PggaStatus::InvalidArgument, "checkpoint path is not UTF-8".into()))?;
        let (cfg, model, _) = load_for_eval(Path::new(path), None)?;
        *out = Box::into_raw(Box::new(PggaModel { cfg, model }));
        Ok(())
    })
}

/// Releases a handle from [`pgga_model_load`]; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pgga_model_free(model: *mut PggaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input image size; heatmaps are `13 × (height/8) × (width/8)`.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pgga_model_input_size(model: *const PggaModel, height: *mut usize, width: *mut usize) -> PggaStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(height, "height")? = m.cfg.backbone.image_h;
        *out_ref(width, "width")? = m.cfg.backbone.image_w;
        Ok(())
    })
}

/// Descriptor length `8·d`.
///
/// # Safety
/// `model` must be a live handle; `len` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn pgga_model_descriptor_len(model: *const PggaModel, len: *mut usize) -> PggaStatus {
    guard(|| {
        *out_ref(len, "len")? = model_ref(model)?.model.descriptor_len();
        Ok(())
    })
}

/// Descriptors of `batch` images.
///
/// `images` holds `batch × 3 × H × W` values in `[0,1]`, `heatmaps`
/// `batch × 13 × H/8 × W/8`. `descriptors` receives `batch × len` values
/// and `descriptors_cap` is its capacity. `thetas` may be null, otherwise
/// it receives `batch × 5` graph attention weights.
///
/// # Safety
/// Every non-null pointer must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn pgga_model_extract(
    model: *const PggaModel,
    images: *const f64,
    heatmaps: *const f64,
    batch: usize,
    descriptors: *mut f64,
    descriptors_cap: usize,
    thetas: *mut f64,
) -> PggaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if batch == 0 {
            return Err(Fail(PggaStatus::InvalidArgument, "batch must be positive".into()));
        }
        let (h, w) = (m.cfg.backbone.image_h, m.cfg.backbone.image_w);
        let (hm, wm) = m.cfg.backbone.shadow_size();
        let len = m.model.descriptor_len();
        if descriptors_cap < batch * len {
            return Err(Fail(
                PggaStatus::BufferTooSmall,
                format!("descriptors need {} values, capacity {descriptors_cap}", batch * len),
            ));
        }
        let img = input(images, batch * 3 * h * w, "images")?;
        let hmaps = input(heatmaps, batch * NUM_PARTS * hm * wm, "heatmaps")?;
        let maps = hmaps
            .chunks(NUM_PARTS * hm * wm)
            .map(|c| heatmap(c, hm, wm))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Heatmap> = maps.iter().collect();
        let masks = m.model.masks_for(&refs, &m.cfg.masks)?;
        let (desc, th) = m.model.extract(&Tensor::new(&[batch, 3, h, w], img.to_vec())?, &masks)?;
        output(descriptors, batch * len, "descriptors")?.copy_from_slice(desc.data());
        if !thetas.is_null() {
            let out = output(thetas, batch * PGGA_NUM_NODES, "thetas")?;
            for (dst, src) in out.chunks_mut(PGGA_NUM_NODES).zip(&th) {
                dst.copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// Coarse body mask (`rows × cols`) of a `13 × rows × cols` heatmap.
///
/// # Safety
/// `heatmap_data` must hold `13·rows·cols` values and `out` `rows·cols`.
#[no_mangle]
pub unsafe extern "C" fn pgga_coarse_mask(
    heatmap_data: *const f64,
    rows: usize,
    cols: usize,
    params: PggaMaskParams,
    out: *mut f64,
) -> PggaStatus {
    guard(|| {
        let p = mask_params(params)?;
        let h = heatmap(input(heatmap_data, NUM_PARTS * rows * cols, "heatmap")?, rows, cols)?;
        let m = coarse_mask(&extract_keypoints(&h), &p);
        output(out, rows * cols, "out")?.copy_from_slice(m.grid.data());
        Ok(())
    })
}

/// The 13 fine keypoint masks (`13 × rows × cols`) of a heatmap.
///
/// # Safety
/// `heatmap_data` and `out` must each hold `13·rows·cols` values.
#[no_mangle]
pub unsafe extern "C" fn pgga_fine_masks(
    heatmap_data: *const f64,
    rows: usize,
    cols: usize,
    params: PggaMaskParams,
    out: *mut f64,
) -> PggaStatus {
    guard(|| {
        let p = mask_params(params)?;
        let n = NUM_PARTS * rows * cols;
        let h = heatmap(input(heatmap_data, n, "heatmap")?, rows, cols)?;
        let out = output(out, n, "out")?;
        for (dst, m) in out.chunks_mut(rows * cols).zip(fine_masks(&extract_keypoints(&h), &p)) {
            dst.copy_from_slice(m.grid.data());
        }
        Ok(())
    })
}

/// Euclidean distances `nq × ng` between the rows of `queries` (`nq × len`)
/// and `gallery` (`ng × len`).
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pgga_distance_matrix(
    queries: *const f64,
    nq: usize,
    gallery: *const f64,
    ng: usize,
    len: usize,
    out: *mut f64,
) -> PggaStatus {
    guard(|| {
        let q = Tensor::new(&[nq, len], input(queries, nq * len, "queries")?.to_vec())?;
        let g = Tensor::new(&[ng, len], input(gallery, ng * len, "gallery")?.to_vec())?;
        output(out, nq * ng, "out")?.copy_from_slice(distance_matrix(&q, &g)?.data());
        Ok(())
    })
}

/// Identity and camera labels of one side of a ranking problem.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PggaLabels {
    pub ids: *const usize,
    pub cameras: *const usize,
    pub count: usize,
}

unsafe fn metas(l: &PggaLabels, name: &str) -> Result<Vec<Meta>, Fail> {
    let ids = input(l.ids, l.count, name)?;
    let cams = input(l.cameras, l.count, name)?;
    Ok(ids.iter().zip(cams).map(|(&id, &camera)| Meta { id, camera }).collect())
}

unsafe fn ranking_inputs(d: *const f64, q: &PggaLabels, g: &PggaLabels) -> Result<(Tensor, Vec<Meta>, Vec<Meta>), Fail> {
    let t = Tensor::new(&[q.count, g.count], input(d, q.count * g.count, "distances")?.to_vec())?;
    Ok((t, metas(q, "query labels")?, metas(g, "gallery labels")?))
}

/// CMC curve up to `max_rank` into `curve`; `skipped` (may be null)
/// receives the number of queries without a valid match.
///
/// # Safety
/// `distances` must hold `q.count × g.count` values, `curve` `max_rank`.
#[no_mangle]
pub unsafe extern "C" fn pgga_cmc(
    distances: *const f64,
    queries: PggaLabels,
    gallery: PggaLabels,
    max_rank: usize,
    curve: *mut f64,
    skipped: *mut usize,
) -> PggaStatus {
    guard(|| {
        let (d, q, g) = ranking_inputs(distances, &queries, &gallery)?;
        let c = cmc(&d, &q, &g, max_rank)?;
        output(curve, max_rank, "curve")?.copy_from_slice(&c.curve);
        if let Some(s) = skipped.as_mut() {
            *s = c.skipped;
        }
        Ok(())
    })
}

/// Mean average precision over queries with a valid match.
///
/// # Safety
/// `distances` must hold `q.count × g.count` values; `map` valid for one
/// write.
#[no_mangle]
pub unsafe extern "C" fn pgga_mean_ap(distances: *const f64, queries: PggaLabels, gallery: PggaLabels, map: *mut f64) -> PggaStatus {
    guard(|| {
        let (d, q, g) = ranking_inputs(distances, &queries, &gallery)?;
        *out_ref(map, "map")? = mean_ap(&d, &q, &g)?;
        Ok(())
    })
}
