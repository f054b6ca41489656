//! C ABI for penseg.
//!
//! Every fallible function returns a [`PensegStatus`]; on failure the message
//! is available from [`penseg_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_read`/producing functions and released
//! with the matching `*_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use penseg::clustering::{cluster_masked_embedding, hdbscan_flat, ClusterParams};
use penseg::embedding::{discriminative_loss, DiscriminativeParams, EmbeddingField};
use penseg::geometry::{ellipse_iou, fit_ellipse, Ellipse, HeadSign, RasterGrid};
use penseg::label::{LabelImage, LabelKind};
use penseg::labelgen::{extract_gt_ellipses, render_instance, Scene};
use penseg::metrics::match_segments;
use penseg::pipeline::{evaluate_dataset, segment_dataset, Mode};
use penseg::{Error, PipelineConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PensegStatus {
    Ok = 0,
    InvalidArgument = 1,
    DataError = 2,
    NumericalError = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PensegLabelKind {
    Binary = 0,
    Categorical3 = 1,
    Instance = 2,
    Bodypart3 = 3,
}

impl From<PensegLabelKind> for LabelKind {
    fn from(k: PensegLabelKind) -> Self {
        match k {
            PensegLabelKind::Binary => LabelKind::Binary,
            PensegLabelKind::Categorical3 => LabelKind::Categorical3,
            PensegLabelKind::Instance => LabelKind::Instance,
            PensegLabelKind::Bodypart3 => LabelKind::Bodypart3,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PensegMode {
    Categorical = 0,
    Combined = 1,
    Bodypart = 2,
}

/// Ellipse parameters. `head_sign` is 1 (forward), -1 (backward) or 0
/// (unknown); `depth` is the occlusion rank, larger is nearer.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PensegEllipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub head_sign: i32,
    pub depth: i32,
}

impl From<Ellipse> for PensegEllipse {
    fn from(e: Ellipse) -> Self {
        PensegEllipse {
            cx: e.cx,
            cy: e.cy,
            a: e.a,
            b: e.b,
            theta: e.theta,
            head_sign: match e.head_sign {
                HeadSign::Forward => 1,
                HeadSign::Backward => -1,
                HeadSign::Unknown => 0,
            },
            depth: e.depth,
        }
    }
}

impl TryFrom<PensegEllipse> for Ellipse {
    type Error = Error;

    fn try_from(e: PensegEllipse) -> Result<Self, Error> {
        let head = match e.head_sign {
            1 => HeadSign::Forward,
            -1 => HeadSign::Backward,
            0 => HeadSign::Unknown,
            other => {
                return Err(Error::InvalidParameter(format!("head_sign {other}")));
            }
        };
        let out = Ellipse {
            cx: e.cx,
            cy: e.cy,
            a: e.a,
            b: e.b,
            theta: e.theta,
            head_sign: head,
            depth: e.depth,
        };
        out.validate()?;
        Ok(out)
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PensegMatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
    /// NaN when there are no segments at all.
    pub pq: f64,
    /// NaN when there are no segments at all.
    pub f1: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PensegLoss {
    pub total: f64,
    pub variance_term: f64,
    pub distance_term: f64,
    pub regularization_term: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PensegLossParams {
    pub delta_v: f64,
    pub delta_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Opaque label image.
pub struct PensegLabelImage(LabelImage);

/// Opaque embedding field.
pub struct PensegEmbedding(EmbeddingField);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PensegStatus {
    match e.exit_code() {
        1 => PensegStatus::InvalidArgument,
        3 => PensegStatus::NumericalError,
        _ => PensegStatus::DataError,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Buffer(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PensegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PensegStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            PensegStatus::NullPointer
        }
        Ok(Err(Failure::Buffer(need))) => {
            set_error(format!("buffer too small, {need} elements required"));
            PensegStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            PensegStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidParameter(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(v);
    Ok(())
}

unsafe fn config(json: *const c_char) -> Result<PipelineConfig, Failure> {
    if json.is_null() {
        return Ok(PipelineConfig::default());
    }
    let s = CStr::from_ptr(json)
        .to_str()
        .map_err(|_| Error::InvalidParameter("config is not UTF-8".into()))?;
    let cfg: PipelineConfig = serde_json::from_str(s)
        .map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn penseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a label image from `width * height` row-major labels.
#[no_mangle]
pub unsafe extern "C" fn penseg_label_image_new(
    width: usize,
    height: usize,
    kind: PensegLabelKind,
    pixels: *const u16,
    len: usize,
    out: *mut *mut PensegLabelImage,
) -> PensegStatus {
    guard(|| {
        let px = slice(pixels, len, "pixels")?.to_vec();
        let li = LabelImage::from_pixels(width, height, kind.into(), px)?;
        put(out, Box::into_raw(Box::new(PensegLabelImage(li))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn penseg_label_image_read_pgm(
    path_: *const c_char,
    kind: PensegLabelKind,
    out: *mut *mut PensegLabelImage,
) -> PensegStatus {
    guard(|| {
        let li = LabelImage::read_pgm(path(path_, "path")?, kind.into())?;
        put(out, Box::into_raw(Box::new(PensegLabelImage(li))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn penseg_label_image_write_pgm(
    img: *const PensegLabelImage,
    path_: *const c_char,
) -> PensegStatus {
    guard(|| {
        deref(img, "img")?.0.write_pgm(path(path_, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn penseg_label_image_free(img: *mut PensegLabelImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Width of the image, 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn penseg_label_image_width(img: *const PensegLabelImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.width())
}

/// Height of the image, 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn penseg_label_image_height(img: *const PensegLabelImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.height())
}

/// Copies the labels into `buf`, which must hold `width * height` values.
#[no_mangle]
pub unsafe extern "C" fn penseg_label_image_pixels(
    img: *const PensegLabelImage,
    buf: *mut u16,
    len: usize,
) -> PensegStatus {
    guard(|| {
        let px = deref(img, "img")?.0.pixels();
        if len < px.len() {
            return Err(Failure::Buffer(px.len()));
        }
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        ptr::copy_nonoverlapping(px.as_ptr(), buf, px.len());
        Ok(())
    })
}

/// Embedding field from `width * height * dim` row-major values.
#[no_mangle]
pub unsafe extern "C" fn penseg_embedding_new(
    width: usize,
    height: usize,
    dim: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut PensegEmbedding,
) -> PensegStatus {
    guard(|| {
        let v = slice(values, len, "values")?.to_vec();
        let f = EmbeddingField::from_vec(width, height, dim, v)?;
        put(out, Box::into_raw(Box::new(PensegEmbedding(f))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn penseg_embedding_free(f: *mut PensegEmbedding) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Direct least-squares ellipse fit to `n` points.
#[no_mangle]
pub unsafe extern "C" fn penseg_fit_ellipse(
    xs: *const f64,
    ys: *const f64,
    n: usize,
    out: *mut PensegEllipse,
) -> PensegStatus {
    guard(|| {
        let xs = slice(xs, n, "xs")?;
        let ys = slice(ys, n, "ys")?;
        let pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
        let e = fit_ellipse(&pts).map_err(Error::from)?;
        put(out, e.into(), "out")
    })
}

/// IoU of two ellipses rasterized on the `width x height` pixel grid.
#[no_mangle]
pub unsafe extern "C" fn penseg_ellipse_iou(
    e1: *const PensegEllipse,
    e2: *const PensegEllipse,
    width: usize,
    height: usize,
    out: *mut f64,
) -> PensegStatus {
    guard(|| {
        let a = Ellipse::try_from(*deref(e1, "e1")?)?;
        let b = Ellipse::try_from(*deref(e2, "e2")?)?;
        let v = ellipse_iou(&a, &b, &RasterGrid::pixels(width, height))?;
        put(out, v, "out")
    })
}

/// Instance image of `n` annotation ellipses (ids follow list order; depth
/// ranks must be unique).
#[no_mangle]
pub unsafe extern "C" fn penseg_render_instance(
    width: usize,
    height: usize,
    ellipses: *const PensegEllipse,
    n: usize,
    out: *mut *mut PensegLabelImage,
) -> PensegStatus {
    guard(|| {
        let es = slice(ellipses, n, "ellipses")?
            .iter()
            .map(|&e| Ellipse::try_from(e))
            .collect::<Result<Vec<_>, _>>()?;
        let li = render_instance(&Scene::new(width, height, es)?);
        put(out, Box::into_raw(Box::new(PensegLabelImage(li))), "out")
    })
}

/// Fits an ellipse to every instance region of at least `min_pixels`
/// pixels. Writes up to `capacity` ellipses and the number found to `count`;
/// returns `BufferTooSmall` (with `count` set) when they do not fit.
#[no_mangle]
pub unsafe extern "C" fn penseg_extract_ellipses(
    img: *const PensegLabelImage,
    min_pixels: usize,
    buf: *mut PensegEllipse,
    capacity: usize,
    count: *mut usize,
) -> PensegStatus {
    guard(|| {
        let ext = extract_gt_ellipses(&deref(img, "img")?.0, min_pixels)?;
        put(count, ext.ellipses.len(), "count")?;
        if ext.ellipses.len() > capacity {
            return Err(Failure::Buffer(ext.ellipses.len()));
        }
        for (i, r) in ext.ellipses.iter().enumerate() {
            put(buf.add(i), r.ellipse.into(), "buf")?;
        }
        Ok(())
    })
}

/// Matches two instance images (IoU > 0.5) and reports PQ and F1.
#[no_mangle]
pub unsafe extern "C" fn penseg_match_segments(
    pred: *const PensegLabelImage,
    gt: *const PensegLabelImage,
    out: *mut PensegMatchCounts,
) -> PensegStatus {
    guard(|| {
        let m = match_segments(&deref(pred, "pred")?.0, &deref(gt, "gt")?.0)?;
        let c = m.counts();
        put(
            out,
            PensegMatchCounts {
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                iou_sum: c.iou_sum,
                pq: c.panoptic_quality().unwrap_or(f64::NAN),
                f1: c.f1().unwrap_or(f64::NAN),
            },
            "out",
        )
    })
}

/// Discriminative loss of an embedding for an instance image. A null
/// `params` uses the defaults.
#[no_mangle]
pub unsafe extern "C" fn penseg_discriminative_loss(
    field: *const PensegEmbedding,
    inst: *const PensegLabelImage,
    params: *const PensegLossParams,
    include_background: bool,
    out: *mut PensegLoss,
) -> PensegStatus {
    guard(|| {
        let p = match params.as_ref() {
            None => DiscriminativeParams::default(),
            Some(p) => DiscriminativeParams {
                delta_v: p.delta_v,
                delta_d: p.delta_d,
                alpha: p.alpha,
                beta: p.beta,
                gamma: p.gamma,
            },
        };
        let l = discriminative_loss(&deref(field, "field")?.0, &deref(inst, "inst")?.0, &p, include_background)?;
        put(
            out,
            PensegLoss {
                total: l.total,
                variance_term: l.variance_term,
                distance_term: l.distance_term,
                regularization_term: l.regularization_term,
            },
            "out",
        )
    })
}

/// HDBSCAN on `n` points of dimension `dim`. Writes one label per point to
/// `labels` (-1 = noise) and the cluster count to `n_clusters`.
#[no_mangle]
pub unsafe extern "C" fn penseg_hdbscan(
    data: *const f64,
    n: usize,
    dim: usize,
    min_cluster_size: usize,
    min_samples: usize,
    labels: *mut i32,
    n_clusters: *mut usize,
) -> PensegStatus {
    guard(|| {
        let d = slice(data, n.saturating_mul(dim), "data")?;
        let a = hdbscan_flat(d, dim, &ClusterParams::new(min_cluster_size, min_samples))?;
        if n > 0 && labels.is_null() {
            return Err(Failure::Null("labels"));
        }
        if n > 0 {
            ptr::copy_nonoverlapping(a.labels.as_ptr(), labels, n);
        }
        put(n_clusters, a.n_clusters, "n_clusters")
    })
}

/// Clusters the embeddings of the mask's foreground pixels into an instance
/// image.
#[no_mangle]
pub unsafe extern "C" fn penseg_cluster_masked(
    field: *const PensegEmbedding,
    mask: *const PensegLabelImage,
    min_cluster_size: usize,
    min_samples: usize,
    out: *mut *mut PensegLabelImage,
) -> PensegStatus {
    guard(|| {
        let li = cluster_masked_embedding(
            &deref(field, "field")?.0,
            &deref(mask, "mask")?.0,
            &ClusterParams::new(min_cluster_size, min_samples),
        )?;
        put(out, Box::into_raw(Box::new(PensegLabelImage(li))), "out")
    })
}

/// Segments every scene of a dataset directory. `config_json` may be null
/// for the defaults. Writes the number of failed scenes to `failures`.
#[no_mangle]
pub unsafe extern "C" fn penseg_segment_dataset(
    dataset: *const c_char,
    output: *const c_char,
    config_json: *const c_char,
    mode: PensegMode,
    failures: *mut usize,
) -> PensegStatus {
    guard(|| {
        let cfg = config(config_json)?;
        let mode = match mode {
            PensegMode::Categorical => Mode::Categorical,
            PensegMode::Combined => Mode::Combined,
            PensegMode::Bodypart => Mode::Bodypart,
        };
        let pm = segment_dataset(path(dataset, "dataset")?, path(output, "output")?, &cfg, mode)?;
        if !failures.is_null() {
            failures.write(pm.failures.len());
        }
        Ok(())
    })
}

/// Evaluates a prediction directory and writes the reports to `output`.
/// Writes the aggregate ellipse-level PQ and F1 (NaN when undefined).
#[no_mangle]
pub unsafe extern "C" fn penseg_evaluate_dataset(
    predictions: *const c_char,
    dataset: *const c_char,
    config_json: *const c_char,
    output: *const c_char,
    pq: *mut f64,
    f1: *mut f64,
) -> PensegStatus {
    guard(|| {
        let cfg = config(config_json)?;
        let ev = evaluate_dataset(path(predictions, "predictions")?, path(dataset, "dataset")?, &cfg)?;
        ev.write(path(output, "output")?)?;
        if !pq.is_null() {
            pq.write(ev.aggregate.ellipse.pq.unwrap_or(f64::NAN));
        }
        if !f1.is_null() {
            f1.write(ev.aggregate.ellipse.f1.unwrap_or(f64::NAN));
        }
        Ok(())
    })
}
