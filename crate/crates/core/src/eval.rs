//! Rendering whole views, lifting depth to surface points, DSM rasters and
//! image/DSM scores.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, ImageData, Split};
use crate::exec::Execution;
use crate::geodesy::utm::{to_utm, UtmZone};
use crate::geodesy::{ecef_to_geodetic, GeodesyError, GeodeticPoint, SceneFrame};
use crate::math::{self, Vec3};
use crate::network::NetworkParams;
use crate::ray::{sample_points_seeded, Ray, SampledRay};
use crate::render::{render_rays, RenderError};

pub const NODATA_DISK: f64 = -9999.0;
pub const PSNR_CAP_DB: f64 = 99.0;
/// Rays whose weight sum falls below this are treated as empty space.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("rasters do not overlap")]
    NoOverlap,
    #[error("resolution mismatch: {0} vs {1} (resample first)")]
    ResolutionMismatch(f64, f64),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub n_samples: usize,
    pub chunk: usize,
    pub shading_model: bool,
    /// Replaces the view's sun direction (normalized frame).
    pub sun: Option<Vec3>,
    /// Transient embedding row; defaults to the view's own row for training
    /// views and to the first training view otherwise.
    pub embedding: Option<usize>,
    pub exec: Execution,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { n_samples: 64, chunk: 64, shading_model: true, sun: None, embedding: None, exec: Execution::Parallel }
    }
}

/// Per-pixel render of a full view, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub image: ImageData,
    pub depth: Vec<f64>,
    pub weight_sum: Vec<f64>,
    pub beta: Vec<f64>,
    /// Composited shading scalar `sum_i w_i s_i`.
    pub sun_vis: Vec<f64>,
    pub rays: Vec<Ray>,
}

pub fn view_rays(ds: &Dataset, index: usize, opts: &RenderOptions) -> Result<Vec<Ray>, EvalError> {
    let rec = &ds.records[index];
    let embed = opts.embedding.unwrap_or(match rec.split {
        Split::Train => index,
        Split::Test => ds.train_indices()[0],
    });
    let mut rays = ds.image_rays(index)?;
    for r in &mut rays {
        r.image_index = embed;
        if let Some(s) = opts.sun {
            r.sun_dir = s;
        }
    }
    Ok(rays)
}

/// Deterministic (unjittered) render of view `index`.
pub fn render_view(params: &NetworkParams, ds: &Dataset, index: usize, opts: &RenderOptions) -> Result<RenderedView, EvalError> {
    let rec = &ds.records[index];
    let rays = view_rays(ds, index, opts)?;
    let samples: Vec<SampledRay> = rays.iter().map(|r| sample_points_seeded(r, opts.n_samples, false, 0)).collect();
    let out = render_rays(params, &rays, &samples, opts.shading_model, opts.chunk, opts.exec)?;
    let (w, h) = (rec.image.width, rec.image.height);
    let mut image = ImageData::new(w, h);
    for (i, r) in out.iter().enumerate() {
        image.set(i / w, i % w, r.color);
    }
    Ok(RenderedView {
        width: w,
        height: h,
        image,
        depth: out.iter().map(|r| r.depth).collect(),
        weight_sum: out.iter().map(|r| r.weight_sum).collect(),
        beta: out.iter().map(|r| r.beta).collect(),
        sun_vis: out.iter().map(|r| r.sun_vis).collect(),
        rays,
    })
}

/// `o + depth * d` taken back to geodetic coordinates.
pub fn depth_to_surface_points(rays: &[Ray], depths: &[f64], frame: &SceneFrame) -> Result<Vec<GeodeticPoint>, EvalError> {
    rays.iter()
        .zip(depths)
        .map(|(r, &d)| Ok(ecef_to_geodetic(frame.normalization.denormalize(r.at(d)))?))
        .collect()
}

/// Raster placement: lower-left corner, cell size, and size in cells.
/// Row 0 is the northern edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsmGrid {
    pub zone: UtmZone,
    pub xll: f64,
    pub yll: f64,
    pub resolution: f64,
    pub ncols: usize,
    pub nrows: usize,
}

impl DsmGrid {
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.resolution,
            self.yll + ((self.nrows - row) as f64 - 0.5) * self.resolution,
        )
    }

    pub fn cell_of(&self, easting: f64, northing: f64) -> Option<(usize, usize)> {
        let c = ((easting - self.xll) / self.resolution).floor();
        let r_up = ((northing - self.yll) / self.resolution).floor();
        if c < 0.0 || r_up < 0.0 || c >= self.ncols as f64 || r_up >= self.nrows as f64 {
            return None;
        }
        Some((self.nrows - 1 - r_up as usize, c as usize))
    }

    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Altitude raster; `NaN` marks nodata in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dsm {
    pub grid: DsmGrid,
    pub data: Vec<f64>,
}

impl Dsm {
    pub fn empty(grid: DsmGrid) -> Self {
        Self { grid, data: vec![f64::NAN; grid.len()] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.grid.ncols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.grid.ncols + col] = v;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| !v.is_nan()).count()
    }

    /// Value at a UTM position, if inside and not nodata.
    pub fn sample(&self, easting: f64, northing: f64) -> Option<f64> {
        let (r, c) = self.grid.cell_of(easting, northing)?;
        let v = self.get(r, c);
        (!v.is_nan()).then_some(v)
    }

    /// ASCII grid with a `utm_zone` header line.
    pub fn to_ascii(&self) -> String {
        let g = &self.grid;
        let mut s = format!(
            "ncols {}\nnrows {}\nxllcorner {:?}\nyllcorner {:?}\ncellsize {:?}\nNODATA_value {:?}\nutm_zone {}\n",
            g.ncols, g.nrows, g.xll, g.yll, g.resolution, NODATA_DISK, g.zone
        );
        for row in self.data.chunks(g.ncols.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{:?}", if v.is_nan() { NODATA_DISK } else { *v })).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse_ascii(path: &Path, text: &str) -> Result<Self, EvalError> {
        let bad = |line: usize, msg: String| EvalError::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate().peekable();
        let (mut ncols, mut nrows) = (None, None);
        let (mut xll, mut yll, mut res, mut nodata) = (None, None, None, NODATA_DISK);
        let mut zone = None;
        while let Some((i, line)) = lines.peek().copied() {
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else {
                lines.next();
                continue;
            };
            if key.parse::<f64>().is_ok() {
                break;
            }
            let val = it.next().ok_or_else(|| bad(i + 1, format!("missing value for {key}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(i + 1, format!("{key}: {e}")));
            match key.to_ascii_lowercase().as_str() {
                "ncols" => ncols = Some(num(val)? as usize),
                "nrows" => nrows = Some(num(val)? as usize),
                "xllcorner" => xll = Some(num(val)?),
                "yllcorner" => yll = Some(num(val)?),
                "cellsize" => res = Some(num(val)?),
                "nodata_value" => nodata = num(val)?,
                "utm_zone" => zone = Some(parse_zone(val).ok_or_else(|| bad(i + 1, format!("bad zone {val}")))?),
                other => return Err(bad(i + 1, format!("unknown header key {other}"))),
            }
            lines.next();
        }
        let missing = |k: &str| bad(0, format!("missing header {k}"));
        let grid = DsmGrid {
            zone: zone.ok_or_else(|| missing("utm_zone"))?,
            xll: xll.ok_or_else(|| missing("xllcorner"))?,
            yll: yll.ok_or_else(|| missing("yllcorner"))?,
            resolution: res.ok_or_else(|| missing("cellsize"))?,
            ncols: ncols.ok_or_else(|| missing("ncols"))?,
            nrows: nrows.ok_or_else(|| missing("nrows"))?,
        };
        if !(grid.resolution > 0.0) {
            return Err(bad(0, "cellsize must be positive".into()));
        }
        let mut data = Vec::with_capacity(grid.len());
        for (i, line) in lines {
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|e| bad(i + 1, format!("{tok}: {e}")))?;
                data.push(if v == nodata { f64::NAN } else { v });
            }
        }
        if data.len() != grid.len() {
            return Err(bad(0, format!("expected {} values, found {}", grid.len(), data.len())));
        }
        Ok(Self { grid, data })
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let g = &self.grid;
        let mut b = Vec::with_capacity(64 + 8 * self.data.len());
        b.extend_from_slice(DSM_MAGIC);
        b.push(g.zone.number);
        b.push(g.zone.north as u8);
        b.extend_from_slice(&(g.ncols as u64).to_le_bytes());
        b.extend_from_slice(&(g.nrows as u64).to_le_bytes());
        for v in [g.xll, g.yll, g.resolution] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            b.extend_from_slice(&(if v.is_nan() { NODATA_DISK } else { *v }).to_le_bytes());
        }
        b
    }

    pub fn parse_binary(path: &Path, b: &[u8]) -> Result<Self, EvalError> {
        let bad = |msg: &str| EvalError::Parse { path: path.to_path_buf(), line: 0, msg: msg.into() };
        const HEAD: usize = 8 + 2 + 16 + 24;
        if b.len() < HEAD || &b[..8] != DSM_MAGIC {
            return Err(bad("bad magic"));
        }
        let u = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let grid = DsmGrid {
            zone: UtmZone { number: b[8], north: b[9] != 0 },
            ncols: u(10) as usize,
            nrows: u(18) as usize,
            xll: f(26),
            yll: f(34),
            resolution: f(42),
        };
        if b.len() != HEAD + 8 * grid.len() {
            return Err(bad("size does not match header"));
        }
        let data = (0..grid.len())
            .map(|i| {
                let v = f(HEAD + 8 * i);
                if v == NODATA_DISK { f64::NAN } else { v }
            })
            .collect();
        Ok(Self { grid, data })
    }

    /// `.bin` selects the binary form, anything else the ASCII grid.
    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io { path: path.to_path_buf(), source };
        if path.extension().is_some_and(|e| e == "bin") {
            fs::write(path, self.to_binary()).map_err(io)
        } else {
            fs::write(path, self.to_ascii()).map_err(io)
        }
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let io = |source| EvalError::Io { path: path.to_path_buf(), source };
        if path.extension().is_some_and(|e| e == "bin") {
            Self::parse_binary(path, &fs::read(path).map_err(io)?)
        } else {
            Self::parse_ascii(path, &fs::read_to_string(path).map_err(io)?)
        }
    }
}

const DSM_MAGIC: &[u8; 8] = b"SNRFDSM1";

fn parse_zone(s: &str) -> Option<UtmZone> {
    let (num, hemi) = s.split_at(s.len().checked_sub(1)?);
    let north = match hemi {
        "N" | "n" => true,
        "S" | "s" => false,
        _ => return None,
    };
    let number: u8 = num.parse().ok()?;
    (1..=60).contains(&number).then_some(UtmZone { number, north })
}

/// Per-cell median altitude of the points falling in each cell.
pub fn rasterize_dsm(points: &[GeodeticPoint], grid: DsmGrid) -> Dsm {
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for p in points {
        let u = to_utm(*p, grid.zone);
        if let Some((r, c)) = grid.cell_of(u.easting, u.northing) {
            cells[r * grid.ncols + c].push(p.alt);
        }
    }
    let data = cells.iter_mut().map(|v| math::median(v).unwrap_or(f64::NAN)).collect();
    Dsm { grid, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsmScore {
    pub mae: f64,
    /// Scored cells over valid reference cells.
    pub completeness: f64,
    pub shift: f64,
    pub cells: usize,
}

/// Mean absolute altitude error over cells valid in both rasters, after
/// removing the median difference when `align_shift` is set.
pub fn dsm_mae(pred: &Dsm, reference: &Dsm, align_shift: bool) -> Result<DsmScore, EvalError> {
    let (rp, rr) = (pred.grid.resolution, reference.grid.resolution);
    if (rp - rr).abs() > 1e-9 * rr {
        return Err(EvalError::ResolutionMismatch(rp, rr));
    }
    let g = &reference.grid;
    let mut diffs = Vec::new();
    let mut ref_valid = 0usize;
    for r in 0..g.nrows {
        for c in 0..g.ncols {
            let v = reference.get(r, c);
            if v.is_nan() {
                continue;
            }
            ref_valid += 1;
            let (e, n) = g.cell_center(r, c);
            if let Some(p) = pred.sample(e, n) {
                diffs.push(p - v);
            }
        }
    }
    if diffs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let shift = if align_shift { math::median(&mut diffs.clone()).expect("nonempty") } else { 0.0 };
    let mae = diffs.iter().map(|d| (d - shift).abs()).sum::<f64>() / diffs.len() as f64;
    Ok(DsmScore { mae, completeness: diffs.len() as f64 / ref_valid as f64, shift, cells: diffs.len() })
}

fn check_shape(a: &ImageData, b: &ImageData) -> Result<(), EvalError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(EvalError::ShapeMismatch((a.height, a.width), (b.height, b.width)));
    }
    Ok(())
}

pub fn psnr(img: &ImageData, reference: &ImageData) -> Result<f64, EvalError> {
    check_shape(img, reference)?;
    let mse = img.pixels.iter().zip(&reference.pixels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let half = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WIN + 1, h - SSIM_WIN + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..SSIM_WIN).map(|i| k[i] * src[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WIN).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions (11x11 Gaussian,
/// sigma 1.5, unit dynamic range).
pub fn ssim(img: &ImageData, reference: &ImageData) -> Result<f64, EvalError> {
    check_shape(img, reference)?;
    let (w, h) = (img.width, img.height);
    if w < SSIM_WIN || h < SSIM_WIN {
        return Err(EvalError::ShapeMismatch((h, w), (SSIM_WIN, SSIM_WIN)));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x: Vec<f64> = (0..w * h).map(|i| img.pixels[3 * i + ch]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| reference.pixels[3 * i + ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &k));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: Option<f64>,
    pub completeness: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub shift: Option<f64>,
}

/// Surface points of a rendered view, keeping pixels whose weight sum
/// reaches `mask_threshold`.
pub fn view_surface_points(view: &RenderedView, frame: &SceneFrame, mask_threshold: f64) -> Result<Vec<GeodeticPoint>, EvalError> {
    let keep: Vec<usize> = (0..view.depth.len()).filter(|&i| view.weight_sum[i] >= mask_threshold).collect();
    let rays: Vec<Ray> = keep.iter().map(|&i| view.rays[i]).collect();
    let depths: Vec<f64> = keep.iter().map(|&i| view.depth[i]).collect();
    depth_to_surface_points(&rays, &depths, frame)
}

/// DSM from the depth maps of `views`.
pub fn dsm_from_views(
    params: &NetworkParams,
    ds: &Dataset,
    views: &[usize],
    grid: DsmGrid,
    opts: &RenderOptions,
    mask_threshold: f64,
) -> Result<Dsm, EvalError> {
    let mut pts = Vec::new();
    for &v in views {
        let view = render_view(params, ds, v, opts)?;
        pts.extend(view_surface_points(&view, &ds.frame, mask_threshold)?);
    }
    Ok(rasterize_dsm(&pts, grid))
}

/// Test-split PSNR/SSIM against the stored images, plus DSM scores when a
/// reference raster is given. The DSM is lifted from every view's depth.
pub fn evaluate(
    params: &NetworkParams,
    ds: &Dataset,
    reference: Option<&Dsm>,
    opts: &RenderOptions,
    mask_threshold: f64,
) -> Result<(EvalReport, Option<Dsm>), EvalError> {
    let mut report = EvalReport::default();
    let test = ds.test_indices();
    if !test.is_empty() {
        let (mut p, mut s) = (0.0, 0.0);
        for &v in &test {
            let view = render_view(params, ds, v, opts)?;
            p += psnr(&view.image, &ds.records[v].image)?;
            s += ssim(&view.image, &ds.records[v].image)?;
        }
        report.psnr = Some(p / test.len() as f64);
        report.ssim = Some(s / test.len() as f64);
    }
    let Some(reference) = reference else {
        return Ok((report, None));
    };
    let views: Vec<usize> = (0..ds.records.len()).collect();
    let dsm = dsm_from_views(params, ds, &views, reference.grid, opts, mask_threshold)?;
    match dsm_mae(&dsm, reference, false) {
        Ok(score) => {
            report.mae = Some(score.mae);
            report.completeness = Some(score.completeness);
            report.shift = Some(score.shift);
        }
        Err(EvalError::NoOverlap) => report.completeness = Some(0.0),
        Err(e) => return Err(e),
    }
    Ok((report, Some(dsm)))
}
