//! Synthetic scenes with known geometry: box-on-ground heightfields, affine
//! RPC cameras, an exact ray-marched reference renderer with hard shadows,
//! and per-view transient rectangles.
//!
//! The heightfield lives on the UTM grid of the scene center so that the
//! true DSM is the heightfield sampled at cell centers.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    fit_scene_frame, sun_direction_enu, write_depth_points, write_json, DataError, DatasetManifest, DepthPointRecord,
    ImageData, ImageSidecar, Split,
};
use crate::eval::{Dsm, DsmGrid, EvalError};
use crate::exec::{self, Execution};
use crate::geodesy::utm::{to_utm, UtmZone};
use crate::geodesy::{geodetic_to_ecef, GeodeticPoint, WGS84_A, WGS84_E2};
use crate::math::{self, Vec3};
use crate::rpc::{InverseCoeffs, PixelCoord, RpcError, RpcModel};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Axis-aligned box on the UTM grid; `center` and `size` in meters relative
/// to the scene center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub height: f64,
    pub albedo: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    /// Direction from the scene toward the satellite.
    pub azimuth: f64,
    pub elevation: f64,
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransientSpec {
    pub per_view: usize,
    /// Rectangle side lengths as fractions of the image size.
    pub min_frac: f64,
    pub max_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub scene_id: String,
    pub lat: f64,
    pub lon: f64,
    /// Side of the square footprint, meters.
    pub footprint: f64,
    pub base_alt: f64,
    /// Clearance below the ground and above the tallest box.
    pub alt_margin: f64,
    pub image_size: usize,
    pub boxes: Vec<BoxSpec>,
    pub ground_albedo: Vec3,
    /// Relative amplitude and period (meters) of the albedo pattern.
    pub texture_amplitude: f64,
    pub texture_period: f64,
    pub ambient: Vec3,
    pub views: Vec<ViewSpec>,
    pub transients: Option<TransientSpec>,
    pub noise_std: f64,
    pub depth_points_per_view: usize,
    pub dsm_resolution: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let b = |c: [f64; 2], s: [f64; 2], h: f64, a: Vec3| BoxSpec { center: c, size: s, height: h, albedo: a };
        let views = [
            (0.0, 90.0, 150.0, 60.0, Split::Train),
            (30.0, 72.0, 140.0, 45.0, Split::Train),
            (100.0, 68.0, 165.0, 70.0, Split::Train),
            (140.0, 78.0, 155.0, 52.0, Split::Test),
            (200.0, 70.0, 135.0, 38.0, Split::Train),
            (250.0, 75.0, 175.0, 65.0, Split::Train),
            (300.0, 66.0, 145.0, 55.0, Split::Train),
            (330.0, 80.0, 160.0, 42.0, Split::Train),
            (60.0, 82.0, 170.0, 75.0, Split::Train),
            (170.0, 72.0, 150.0, 48.0, Split::Test),
        ];
        Self {
            scene_id: "desk".into(),
            lat: 32.75,
            lon: -116.8,
            footprint: 64.0,
            base_alt: 100.0,
            alt_margin: 4.0,
            image_size: 64,
            boxes: vec![
                b([-14.0, 12.0], [14.0, 12.0], 10.0, [0.85, 0.45, 0.35]),
                b([12.0, 10.0], [10.0, 16.0], 6.0, [0.35, 0.55, 0.85]),
                b([4.0, -14.0], [18.0, 10.0], 14.0, [0.9, 0.85, 0.5]),
            ],
            ground_albedo: [0.55, 0.6, 0.45],
            texture_amplitude: 0.25,
            texture_period: 16.0,
            ambient: [0.35, 0.4, 0.55],
            views: views
                .iter()
                .map(|&(azimuth, elevation, sun_azimuth, sun_elevation, split)| ViewSpec {
                    azimuth,
                    elevation,
                    sun_azimuth,
                    sun_elevation,
                    split,
                })
                .collect(),
            transients: None,
            noise_std: 0.0,
            depth_points_per_view: 64,
            dsm_resolution: 1.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let half = self.footprint / 2.0;
        if !(self.footprint > 0.0 && self.image_size >= 2) {
            return bad("footprint and image size must be positive".into());
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.height < 0.0 || b.size.iter().any(|s| *s <= 0.0) {
                return bad(format!("box {i} has a negative height or empty size"));
            }
            for k in 0..2 {
                if (b.center[k] - b.size[k] / 2.0) < -half || (b.center[k] + b.size[k] / 2.0) > half {
                    return bad(format!("box {i} leaves the footprint"));
                }
            }
        }
        for (i, v) in self.views.iter().enumerate() {
            if !(v.elevation > 30.0 && v.elevation <= 90.0) {
                return bad(format!("view {i}: elevation {} not in (30, 90]", v.elevation));
            }
            if !(v.sun_elevation > 0.0 && v.sun_elevation <= 90.0) {
                return bad(format!("view {i}: sun elevation {} not in (0, 90]", v.sun_elevation));
            }
        }
        if !self.views.iter().any(|v| v.split == Split::Train) {
            return bad("no training view".into());
        }
        if let Some(t) = &self.transients {
            if !(0.0 < t.min_frac && t.min_frac <= t.max_frac && t.max_frac < 1.0) {
                return bad("transient sizes must satisfy 0 < min <= max < 1".into());
            }
        }
        Ok(())
    }

    pub fn h_min(&self) -> f64 {
        self.base_alt - self.alt_margin
    }

    pub fn h_max(&self) -> f64 {
        self.base_alt + self.boxes.iter().map(|b| b.height).fold(0.0, f64::max) + self.alt_margin
    }

    pub fn zone(&self) -> UtmZone {
        UtmZone::containing(self.lat, self.lon)
    }

    /// UTM coordinates of the scene center.
    pub fn center_utm(&self) -> (f64, f64) {
        let u = to_utm(GeodeticPoint::new(self.lat, self.lon, 0.0), self.zone());
        (u.easting, u.northing)
    }

    /// Grid-relative coordinates of a geodetic point.
    pub fn local_xy(&self, g: GeodeticPoint) -> (f64, f64) {
        let (e0, n0) = self.center_utm();
        let u = to_utm(g, self.zone());
        (u.easting - e0, u.northing - n0)
    }

    /// Box index covering `(x, y)`, tallest first.
    fn box_at(&self, x: f64, y: f64) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, b) in self.boxes.iter().enumerate() {
            let inside = (x - b.center[0]).abs() < b.size[0] / 2.0 && (y - b.center[1]).abs() < b.size[1] / 2.0;
            if inside && best.is_none_or(|j| self.boxes[j].height < b.height) {
                best = Some(i);
            }
        }
        best
    }

    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.base_alt + self.box_at(x, y).map_or(0.0, |i| self.boxes[i].height)
    }

    pub fn albedo_at(&self, x: f64, y: f64) -> Vec3 {
        let base = self.box_at(x, y).map_or(self.ground_albedo, |i| self.boxes[i].albedo);
        let w = std::f64::consts::TAU / self.texture_period;
        let t = 1.0 + self.texture_amplitude * (w * x).sin() * (w * y + 0.7).cos();
        base.map(|c| (c * t).clamp(0.0, 1.0))
    }

    pub fn dsm_grid(&self) -> DsmGrid {
        let (e0, n0) = self.center_utm();
        let n = (self.footprint / self.dsm_resolution).round() as usize;
        let side = n as f64 * self.dsm_resolution;
        DsmGrid {
            zone: self.zone(),
            xll: e0 - side / 2.0,
            yll: n0 - side / 2.0,
            resolution: self.dsm_resolution,
            ncols: n,
            nrows: n,
        }
    }

    /// The heightfield sampled at every cell center.
    pub fn true_dsm(&self) -> Dsm {
        let grid = self.dsm_grid();
        let (e0, n0) = self.center_utm();
        let mut dsm = Dsm::empty(grid);
        for r in 0..grid.nrows {
            for c in 0..grid.ncols {
                let (e, n) = grid.cell_center(r, c);
                dsm.set(r, c, self.height_at(e - e0, n - n0));
            }
        }
        dsm
    }

    /// Grid-frame direction toward the sun, per meter of climb.
    fn sun_step(&self, azimuth: f64, elevation: f64) -> Result<[f64; 2], SynthError> {
        let w = sun_direction_enu(azimuth, elevation)?;
        let j = self.enu_to_grid();
        let (e, n) = (-w[0] / -w[2], -w[1] / -w[2]);
        Ok([j[0][0] * e + j[0][1] * n, j[1][0] * e + j[1][1] * n])
    }

    /// Linear map from local east/north meters to grid meters at the center.
    fn enu_to_grid(&self) -> [[f64; 2]; 2] {
        let (m_lat, m_lon) = meters_per_degree(self.lat);
        let d = 1.0;
        let c = self.local_xy(GeodeticPoint::new(self.lat, self.lon, 0.0));
        let e = self.local_xy(GeodeticPoint::new(self.lat, self.lon + d / m_lon, 0.0));
        let n = self.local_xy(GeodeticPoint::new(self.lat + d / m_lat, self.lon, 0.0));
        [[e.0 - c.0, n.0 - c.0], [e.1 - c.1, n.1 - c.1]]
    }

    /// Whether the sun is blocked from the surface point `(x, y, h)`.
    pub fn in_shadow(&self, x: f64, y: f64, h: f64, sun_azimuth: f64, sun_elevation: f64) -> Result<bool, SynthError> {
        let step = self.sun_step(sun_azimuth, sun_elevation)?;
        let top = self.h_max();
        let horiz = math::norm([step[0], step[1], 0.0]);
        let dh = if horiz > 0.0 { (0.05 / horiz).min(0.05) } else { 0.05 };
        let mut z = h + 1e-9;
        while z < top {
            z += dh;
            let (px, py) = (x + step[0] * (z - h), y + step[1] * (z - h));
            if self.height_at(px, py) > z {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Ellipsoidal meters per degree of latitude and of longitude.
pub fn meters_per_degree(lat_deg: f64) -> (f64, f64) {
    let phi = lat_deg.to_radians();
    let w = (1.0 - WGS84_E2 * phi.sin().powi(2)).sqrt();
    let m = WGS84_A * (1.0 - WGS84_E2) / (w * w * w);
    let n = WGS84_A / w;
    (m.to_radians(), (n * phi.cos()).to_radians())
}

/// Affine camera in RPC form. The footprint square at `base_alt` fills the
/// image; a point `h` meters higher lands where the ground point displaced
/// `h cot(elevation)` meters away from the satellite would.
pub fn fabricate_rpc(spec: &SceneSpec, view: &ViewSpec) -> RpcModel {
    let (m_lat, m_lon) = meters_per_degree(spec.lat);
    let f = spec.footprint;
    let s = spec.image_size as f64;
    let alt_scale = 50.0;
    let cot = 1.0 / view.elevation.to_radians().tan();
    let (sa, ca) = (view.azimuth.to_radians().sin(), view.azimuth.to_radians().cos());
    let k_row = 2.0 * alt_scale * cot * ca / f;
    let k_col = -2.0 * alt_scale * cot * sa / f;
    let zero = [0.0; 20];
    let unit = {
        let mut c = zero;
        c[0] = 1.0;
        c
    };
    let mut line_num = zero;
    line_num[2] = -2.0;
    line_num[3] = k_row;
    let mut samp_num = zero;
    samp_num[1] = 2.0;
    samp_num[3] = k_col;
    // Inverse monomials take P = row, L = col.
    let mut lat_num = zero;
    lat_num[2] = -0.5;
    lat_num[3] = k_row / 2.0;
    let mut lon_num = zero;
    lon_num[1] = 0.5;
    lon_num[3] = -k_col / 2.0;
    RpcModel {
        line_num,
        line_den: unit,
        samp_num,
        samp_den: unit,
        lat_off: spec.lat,
        lat_scale: f / m_lat,
        lon_off: spec.lon,
        lon_scale: f / m_lon,
        alt_off: spec.base_alt,
        alt_scale,
        row_off: (s - 1.0) / 2.0,
        row_scale: s / 2.0,
        col_off: (s - 1.0) / 2.0,
        col_scale: s / 2.0,
        inverse: Some(InverseCoeffs { lat_num, lat_den: unit, lon_num, lon_den: unit }),
    }
}

/// What the reference renderer knows about one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTruth {
    pub surface: GeodeticPoint,
    /// Meters from the pixel's `h_max` point to the surface.
    pub depth_m: f64,
    pub shadow: bool,
    pub transient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceView {
    pub image: ImageData,
    pub pixels: Vec<PixelTruth>,
}

impl ReferenceView {
    pub fn shadow_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|p| p.shadow).collect()
    }

    pub fn transient_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|p| p.transient).collect()
    }
}

/// First surface crossing of the camera ray through `px`, marching down
/// from `h_max` and refining by bisection.
pub fn intersect(spec: &SceneSpec, rpc: &RpcModel, px: PixelCoord) -> Result<GeodeticPoint, SynthError> {
    let (h0, h1) = (spec.h_max(), spec.h_min());
    let top = spec.local_xy(rpc.localize(px, h0)?);
    let bot = spec.local_xy(rpc.localize(px, h1)?);
    let xy = |h: f64| {
        let u = (h0 - h) / (h0 - h1);
        (top.0 + u * (bot.0 - top.0), top.1 + u * (bot.1 - top.1))
    };
    let below = |h: f64| {
        let (x, y) = xy(h);
        h <= spec.height_at(x, y)
    };
    let drift = ((bot.0 - top.0).hypot(bot.1 - top.1)) / (h0 - h1);
    let dh = if drift > 0.0 { (0.05 / drift).min(0.05) } else { 0.05 };
    let (mut hi, mut lo) = (h0, h0);
    while !below(lo) && lo > h1 {
        hi = lo;
        lo = (lo - dh).max(h1);
    }
    // `hi` is above the surface, `lo` on or below it.
    for _ in 0..60 {
        let mid = 0.5 * (hi + lo);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let h = hi;
    Ok(rpc.localize(px, h)?)
}

/// Exact render of one view: albedo, darkened by the ambient tint where the
/// sun is blocked, then transient rectangles and pixel noise.
pub fn render_reference(spec: &SceneSpec, view_index: usize, sun: Option<(f64, f64)>) -> Result<ReferenceView, SynthError> {
    let view = &spec.views[view_index];
    let (sun_az, sun_el) = sun.unwrap_or((view.sun_azimuth, view.sun_elevation));
    let rpc = fabricate_rpc(spec, view);
    let n = spec.image_size;
    let mut image = ImageData::new(n, n);
    let mut pixels = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let px = PixelCoord::new(row as f64, col as f64);
            let g = intersect(spec, &rpc, px)?;
            let (x, y) = spec.local_xy(g);
            let shadow = spec.in_shadow(x, y, g.alt, sun_az, sun_el)?;
            let a = spec.albedo_at(x, y);
            let c = if shadow { [a[0] * spec.ambient[0], a[1] * spec.ambient[1], a[2] * spec.ambient[2]] } else { a };
            image.set(row, col, c);
            let start = geodetic_to_ecef(rpc.localize(px, spec.h_max())?).to_array();
            let depth_m = math::norm(math::sub(geodetic_to_ecef(g).to_array(), start));
            pixels.push(PixelTruth { surface: g, depth_m, shadow, transient: false });
        }
    }
    let mut rng = view_rng(spec.seed, view_index, 1);
    if let Some(t) = &spec.transients {
        for _ in 0..t.per_view {
            let w = ((t.min_frac + rng.random::<f64>() * (t.max_frac - t.min_frac)) * n as f64).round().max(1.0) as usize;
            let h = ((t.min_frac + rng.random::<f64>() * (t.max_frac - t.min_frac)) * n as f64).round().max(1.0) as usize;
            let r0 = rng.random_range(0..=n - h);
            let c0 = rng.random_range(0..=n - w);
            let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    image.set(r, c, color);
                    pixels[r * n + c].transient = true;
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("finite std");
        for v in &mut image.pixels {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(ReferenceView { image, pixels })
}

fn view_rng(seed: u64, view: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((view as u64) << 8) | purpose);
    rng
}

/// Paths written by [`make_dataset`] plus the in-memory reference renders.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest_path: PathBuf,
    pub views: Vec<ReferenceView>,
    pub rpcs: Vec<RpcModel>,
}

fn mask_image(mask: &[bool], n: usize) -> ImageData {
    let mut img = ImageData::new(n, n);
    for (i, m) in mask.iter().enumerate() {
        img.set(i / n, i % n, if *m { [1.0; 3] } else { [0.0; 3] });
    }
    img
}

/// Write a loadable dataset: PNG views with JSON sidecars, the manifest,
/// the true DSM, sparse surface points, and truth masks.
pub fn make_dataset(spec: &SceneSpec, out: &Path, exec: Execution) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| SynthError::Io { path: p, source }
    };
    fs::create_dir_all(out.join("truth")).map_err(io(out))?;
    let rpcs: Vec<RpcModel> = spec.views.iter().map(|v| fabricate_rpc(spec, v)).collect();
    let views = exec::map_indexed(exec, spec.views.len(), |i| render_reference(spec, i, None))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let n = spec.image_size;
    let mut sidecars = Vec::new();
    for (i, (view, (v, rpc))) in views.iter().zip(spec.views.iter().zip(&rpcs)).enumerate() {
        let id = format!("view_{i:02}");
        view.image.save_png(&out.join(format!("{id}.png")))?;
        mask_image(&view.shadow_mask(), n).save_png(&out.join(format!("truth/{id}_shadow.png")))?;
        mask_image(&view.transient_mask(), n).save_png(&out.join(format!("truth/{id}_transient.png")))?;
        let side = ImageSidecar {
            id: id.clone(),
            image: format!("{id}.png"),
            rpc: Some(rpc.to_json()),
            rpc_path: None,
            sun_azimuth: v.sun_azimuth,
            sun_elevation: v.sun_elevation,
            split: v.split,
        };
        let name = format!("{id}.json");
        write_json(&out.join(&name), &side)?;
        sidecars.push(name);
    }
    spec.true_dsm().write(&out.join("dsm_truth.asc"))?;

    let cameras: Vec<_> = rpcs.iter().map(|r| (r, n, n)).collect();
    let frame = fit_scene_frame(&cameras, spec.h_min(), spec.h_max())?;
    let mut points = Vec::new();
    for (j, v) in spec.views.iter().enumerate() {
        if v.split != Split::Train {
            continue;
        }
        let mut rng = view_rng(spec.seed, j, 2);
        for _ in 0..spec.depth_points_per_view {
            let px = PixelCoord::new(rng.random::<f64>() * (n - 1) as f64, rng.random::<f64>() * (n - 1) as f64);
            let g = intersect(spec, &rpcs[j], px)?;
            let x = frame.normalization.normalize(geodetic_to_ecef(g));
            points.push(DepthPointRecord { j, row: px.row, col: px.col, x: x[0], y: x[1], z: x[2], err: 0.0 });
        }
    }
    write_depth_points(&out.join("depth_points.txt"), &points)?;

    let manifest = DatasetManifest {
        scene_id: spec.scene_id.clone(),
        images: sidecars,
        h_min: spec.h_min(),
        h_max: spec.h_max(),
        depth_points: Some("depth_points.txt".into()),
        reference_dsm: Some("dsm_truth.asc".into()),
    };
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    write_json(&out.join("truth/scene.json"), spec)?;
    Ok(SynthDataset { manifest_path, views, rpcs })
}
