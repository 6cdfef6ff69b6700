//! Image-quality metrics, difference maps, comparison panels, and
//! evaluation reports.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{blend, hex, CascadeModel};
use crate::error::{Error, Result};
use crate::font::{draw_text, ADVANCE, GLYPH_HEIGHT};
use crate::image::{ImageSlice, PairedDataset, Unit, DEFAULT_HU_WINDOW};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Returned by [`psnr`] for identical images. Serialized as the string
/// `"INF"`.
pub const PSNR_INF: f64 = f64::INFINITY;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_geometry(a: &ImageSlice, b: &ImageSlice) -> Result<()> {
    if a.same_geometry(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{} is {}x{}, {} is {}x{}",
            a.id(),
            a.width(),
            a.height(),
            b.id(),
            b.width(),
            b.height()
        )))
    }
}

pub fn mse(a: &ImageSlice, b: &ImageSlice) -> Result<f64> {
    check_geometry(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

pub fn psnr(a: &ImageSlice, b: &ImageSlice, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::Domain(format!("max_val must be > 0, got {max_val}")));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(PSNR_INF);
    }
    Ok(10.0 * (max_val * max_val / err).log10())
}

/// Peak value used for an image unit: 1 on normalized data, the default
/// display window width on HU data.
pub fn default_max_val(unit: Unit) -> f64 {
    match unit {
        Unit::Normalized => 1.0,
        Unit::Hu => f64::from(DEFAULT_HU_WINDOW.1 - DEFAULT_HU_WINDOW.0),
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean structural similarity over every full 11x11 Gaussian window.
pub fn ssim(a: &ImageSlice, b: &ImageSlice, dynamic_range: f64) -> Result<f64> {
    check_geometry(a, b)?;
    if !(dynamic_range > 0.0) {
        return Err(Error::Domain(format!("dynamic_range must be > 0, got {dynamic_range}")));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if a.pixels() == b.pixels() {
        return Ok(1.0);
    }
    let g = gaussian_window();
    let x: Vec<f64> = a.pixels().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.pixels().iter().map(|&v| f64::from(v)).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &g));
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Signed difference plus a display rendering of its magnitude.
#[derive(Debug, Clone)]
pub struct DifferenceMap {
    /// Raw `a - b`. Always tagged [`Unit::Hu`], the only unit that admits
    /// negative values; the numbers stay in the inputs' own scale.
    pub signed: ImageSlice,
    /// `|a - b| / window`, clipped to [0, 1].
    pub magnitude: ImageSlice,
    /// Absolute difference that maps to full white in `magnitude`.
    pub window: f64,
}

pub fn difference_map(a: &ImageSlice, b: &ImageSlice, window: f64) -> Result<DifferenceMap> {
    check_geometry(a, b)?;
    if !(window > 0.0) {
        return Err(Error::Domain(format!("difference window must be > 0, got {window}")));
    }
    let signed: Vec<f32> = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| x - y).collect();
    let magnitude = signed
        .iter()
        .map(|&d| (f64::from(d).abs() / window).min(1.0) as f32)
        .collect();
    let id = format!("{}-minus-{}", a.id(), b.id());
    Ok(DifferenceMap {
        signed: ImageSlice::new(a.width(), a.height(), signed, Unit::Hu, id.clone())?,
        magnitude: ImageSlice::new(a.width(), a.height(), magnitude, Unit::Normalized, id)?,
        window,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelLayout {
    pub zoom: usize,
    pub pad: usize,
}

impl Default for PanelLayout {
    fn default() -> Self {
        PanelLayout { zoom: 2, pad: 8 }
    }
}

/// Height of the caption bands above and below the images.
pub const CAPTION_BAND: usize = GLYPH_HEIGHT + 4;

impl PanelLayout {
    /// Canvas size for `n` columns of `w x h` images: columns are separated
    /// and framed by `pad`, with a caption band above (labels) and below
    /// (display window).
    pub fn canvas_size(&self, n: usize, w: usize, h: usize) -> (usize, usize) {
        let width = n * w * self.zoom + (n + 1) * self.pad;
        let height = 2 * self.pad + 2 * CAPTION_BAND + h * self.zoom;
        (width, height)
    }
}

/// Renders labeled columns side by side into an 8-bit grayscale PNG. Values
/// are mapped linearly from `window` to 0..255.
pub fn emit_panel(
    columns: &[(&str, &ImageSlice)],
    window: (f64, f64),
    layout: PanelLayout,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_panel(columns, window, layout)?;
    let (width, height) = {
        let first = columns[0].1;
        layout.canvas_size(columns.len(), first.width(), first.height())
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Canvas pixels of [`emit_panel`], row-major.
pub fn render_panel(columns: &[(&str, &ImageSlice)], window: (f64, f64), layout: PanelLayout) -> Result<Vec<u8>> {
    let first = columns
        .first()
        .ok_or_else(|| Error::Config("a panel needs at least one column".into()))?
        .1;
    for (_, img) in columns {
        check_geometry(first, img)?;
    }
    if !(window.1 > window.0) || layout.zoom == 0 {
        return Err(Error::Config(format!(
            "invalid panel window {window:?} or zoom {}",
            layout.zoom
        )));
    }
    let (w, h, zoom, pad) = (first.width(), first.height(), layout.zoom, layout.pad);
    let (cw, ch) = layout.canvas_size(columns.len(), w, h);
    let mut canvas = vec![0u8; cw * ch];
    let top = pad + CAPTION_BAND;
    let col_w = w * zoom;
    for (i, (label, img)) in columns.iter().enumerate() {
        let left = pad + i * (col_w + pad);
        draw_text(&mut canvas, cw, left, pad + 2, label, (col_w / ADVANCE).max(1), 255);
        for y in 0..h * zoom {
            let row = &mut canvas[(top + y) * cw + left..(top + y) * cw + left + col_w];
            for (x, px) in row.iter_mut().enumerate() {
                let v = f64::from(img.get(y / zoom, x / zoom));
                let t = ((v - window.0) / (window.1 - window.0)).clamp(0.0, 1.0);
                *px = (t * 255.0).round() as u8;
            }
        }
    }
    let caption = format!("window [{}, {}]", window.0, window.1);
    draw_text(
        &mut canvas,
        cw,
        pad,
        top + h * zoom + 2,
        &caption,
        (cw - pad) / ADVANCE,
        255,
    );
    Ok(canvas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "psnr_serde")]
    pub mean: f64,
    #[serde(with = "psnr_serde")]
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation. Values are summed in sorted
    /// order so the result does not depend on input order. Any infinite
    /// value makes the mean infinite; the spread is then 0 when every value
    /// is infinite and infinite otherwise.
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary { mean: 0.0, std: 0.0 };
        }
        let n_inf = values.iter().filter(|v| v.is_infinite()).count();
        if n_inf > 0 {
            let std = if n_inf == values.len() { 0.0 } else { f64::INFINITY };
            return Summary {
                mean: f64::INFINITY,
                std,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        Summary {
            mean,
            std: (dev.iter().sum::<f64>() / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr_db: Summary,
    pub ssim: Summary,
    pub mse: Summary,
}

impl Aggregates {
    pub fn of(rows: &[ImageMetrics]) -> Aggregates {
        let col = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Aggregates {
            psnr_db: Summary::of(&col(|r| r.psnr_db)),
            ssim: Summary::of(&col(|r| r.ssim)),
            mse: Summary::of(&col(|r| r.mse)),
        }
    }
}

/// Metrics of one family of images (e.g. the final output) against NDCT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMetrics {
    pub name: String,
    pub per_image: Vec<ImageMetrics>,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_manifest_sha256: String,
    pub dataset_manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub max_val: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub outputs: Vec<OutputMetrics>,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn output(&self, name: &str) -> Option<&OutputMetrics> {
        self.outputs.iter().find(|o| o.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    /// `(w_ldct, w_pred)` for an extra blended output.
    pub blend: Option<(f64, f64)>,
    /// Also report every intermediate level's estimate.
    pub intermediate_levels: bool,
    /// Peak value for PSNR and SSIM; defaults per [`default_max_val`].
    pub max_val: Option<f64>,
    /// Digest of the dataset manifest; defaults to a digest of the pixels.
    pub dataset_digest: Option<String>,
}

/// SHA-256 over ids and pixel bits of every pair, in order.
pub fn dataset_digest(data: &PairedDataset) -> String {
    let mut h = Sha256::new();
    for (l, n) in data.pairs() {
        for s in [l, n] {
            h.update(s.id().as_bytes());
            h.update((s.width() as u64).to_le_bytes());
            h.update((s.height() as u64).to_le_bytes());
            for v in s.pixels() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

/// Images produced by [`evaluate`], keyed like the report's outputs.
pub type EvalImages = Vec<(String, Vec<ImageSlice>)>;

/// Runs the model over every LDCT slice and scores each output family
/// against NDCT. Output names: `ldct` (raw input), `level_<k>` for
/// intermediate levels when requested, `final`, and `blended`.
pub fn evaluate(model: &CascadeModel, data: &PairedDataset, opts: &EvalOptions) -> Result<MetricsReport> {
    Ok(evaluate_with_images(model, data, opts)?.0)
}

pub fn evaluate_with_images(
    model: &CascadeModel,
    data: &PairedDataset,
    opts: &EvalOptions,
) -> Result<(MetricsReport, EvalImages)> {
    if data.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let max_val = opts
        .max_val
        .unwrap_or_else(|| default_max_val(data.pairs()[0].0.unit()));
    let n_levels = model.levels.len();
    let mut images: EvalImages = vec![("ldct".into(), Vec::new())];
    if opts.intermediate_levels {
        images.extend((1..n_levels).map(|k| (format!("level_{k}"), Vec::new())));
    }
    images.push(("final".into(), Vec::new()));
    if opts.blend.is_some() {
        images.push(("blended".into(), Vec::new()));
    }
    for (ldct, _) in data.pairs() {
        let levels = model.predict_levels(ldct)?;
        let last = levels.last().expect("at least one level").clone();
        let mut slot = 0;
        images[slot].1.push(ldct.clone());
        if opts.intermediate_levels {
            for lv in &levels[..n_levels - 1] {
                slot += 1;
                images[slot].1.push(lv.clone());
            }
        }
        slot += 1;
        if let Some((wl, wp)) = opts.blend {
            images[slot + 1].1.push(blend(ldct, &last, wl, wp)?);
        }
        images[slot].1.push(last);
    }
    let outputs = images
        .iter()
        .map(|(name, outs)| {
            let per_image = outs
                .iter()
                .zip(data.pairs())
                .map(|(out, (_, ndct))| {
                    Ok(ImageMetrics {
                        id: ndct.id().to_string(),
                        psnr_db: psnr(out, ndct, max_val)?,
                        ssim: ssim(out, ndct, max_val)?,
                        mse: mse(out, ndct)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(OutputMetrics {
                name: name.clone(),
                aggregates: Aggregates::of(&per_image),
                per_image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        max_val,
        ssim_window: SSIM_WINDOW,
        ssim_sigma: SSIM_SIGMA,
        outputs,
        provenance: Provenance {
            model_manifest_sha256: model.manifest()?.digest()?,
            dataset_manifest_sha256: opts.dataset_digest.clone().unwrap_or_else(|| dataset_digest(data)),
        },
    };
    Ok((report, images))
}

mod psnr_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("INF")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "INF" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(de::Error::custom(format!("expected a number or \"INF\", got {s:?}"))),
        }
    }
}
