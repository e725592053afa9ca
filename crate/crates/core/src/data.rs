//! Dataset loading, sun directions, the training ray cache and batch
//! samplers.
//!
//! A dataset is a JSON manifest listing one JSON sidecar per image. Each
//! sidecar names an 8-bit RGB PNG, carries the RPC inline (`rpc`) or by
//! path (`rpc_path`), the sun azimuth (degrees clockwise from north) and
//! elevation, and the split.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::geodesy::{fit_normalization, geodetic_to_ecef, GeodesyError, SceneFrame};
use crate::loss::{compute_ds_weights, DepthPoint};
use crate::math::{self, Vec3};
use crate::ray::{build_ray, Ray, RayError};
use crate::rpc::{PixelCoord, RpcError, RpcModel};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Rpc { path: PathBuf, source: RpcError },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("sun elevation {0} deg is not above the horizon")]
    SunBelowHorizon(f64),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Ray(#[from] RayError),
    #[error("ray cache {path}: {msg}")]
    Cache { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene_id: String,
    /// Sidecar paths, relative to the manifest.
    pub images: Vec<String>,
    pub h_min: f64,
    pub h_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_points: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_dsm: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpc: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpc_path: Option<String>,
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
    #[serde(default)]
    pub split: Split,
}

/// Row-major RGB raster with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ImageData {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height * 3] }
    }

    pub fn get(&self, row: usize, col: usize) -> Vec3 {
        let i = 3 * (row * self.width + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, c: Vec3) {
        let i = 3 * (row * self.width + col);
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn load_png(path: &Path) -> Result<Self, DataError> {
        let img = image::open(path)
            .map_err(|e| DataError::Image { path: path.to_path_buf(), msg: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(DataError::Image { path: path.to_path_buf(), msg: "empty image".into() });
        }
        let pixels = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Ok(Self { width: w as usize, height: h as usize, pixels })
    }

    /// Quantize to 8 bits and write a PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), DataError> {
        let raw: Vec<u8> = self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| DataError::Image { path: path.to_path_buf(), msg: "buffer size mismatch".into() })?;
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| DataError::Image { path: path.to_path_buf(), msg: e.to_string() })
    }

    /// Values after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        let pixels = self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Self { pixels, ..*self }
    }
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// Position in the manifest; doubles as the transient embedding row.
    pub index: usize,
    pub id: String,
    pub image: ImageData,
    pub rpc: RpcModel,
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
    pub split: Split,
}

/// ENU direction of light travelling from the sun toward the scene, for an
/// azimuth measured clockwise from north.
pub fn sun_direction_enu(azimuth_deg: f64, elevation_deg: f64) -> Result<Vec3, DataError> {
    if !(elevation_deg > 0.0 && elevation_deg <= 90.0) {
        return Err(DataError::SunBelowHorizon(elevation_deg));
    }
    let (t, p) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Ok([-t.sin() * p.cos(), -t.cos() * p.cos(), -p.sin()])
}

/// [`sun_direction_enu`] rotated into the normalized scene frame.
pub fn sun_direction(azimuth_deg: f64, elevation_deg: f64, frame: &SceneFrame) -> Result<Vec3, DataError> {
    Ok(frame.enu_dir_to_normalized(sun_direction_enu(azimuth_deg, elevation_deg)?))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<ImageRecord>,
    pub frame: SceneFrame,
    pub depth_points: Vec<DepthPoint>,
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Test)
    }

    fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.index).collect()
    }

    pub fn sun_dir(&self, index: usize) -> Result<Vec3, DataError> {
        let r = &self.records[index];
        sun_direction(r.sun_azimuth, r.sun_elevation, &self.frame)
    }

    pub fn reference_dsm_path(&self) -> Option<PathBuf> {
        self.manifest.reference_dsm.as_ref().map(|p| self.root.join(p))
    }

    /// The ray through `pixel` of image `index`.
    pub fn ray(&self, index: usize, pixel: PixelCoord, color: Vec3) -> Result<Ray, DataError> {
        let r = &self.records[index];
        Ok(build_ray(&r.rpc, pixel, &self.frame, self.sun_dir(index)?, index, color)?)
    }

    /// Every pixel ray of image `index`, in row-major order.
    pub fn image_rays(&self, index: usize) -> Result<Vec<Ray>, DataError> {
        let r = &self.records[index];
        let sun = self.sun_dir(index)?;
        let mut out = Vec::with_capacity(r.image.width * r.image.height);
        for row in 0..r.image.height {
            for col in 0..r.image.width {
                let px = PixelCoord::new(row as f64, col as f64);
                out.push(build_ray(&r.rpc, px, &self.frame, sun, index, r.image.get(row, col))?);
            }
        }
        Ok(out)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn load_record(root: &Path, index: usize, rel: &str) -> Result<ImageRecord, DataError> {
    let path = root.join(rel);
    let side: ImageSidecar = read_json(&path)?;
    let dir = path.parent().unwrap_or(root);
    let rpc = match (&side.rpc, &side.rpc_path) {
        (Some(v), _) => RpcModel::parse_json(&v.to_string()).map_err(|source| DataError::Rpc { path: path.clone(), source })?,
        (None, Some(p)) => {
            let rp = dir.join(p);
            let text = fs::read_to_string(&rp).map_err(io_err(&rp))?;
            RpcModel::parse(&text).map_err(|source| DataError::Rpc { path: rp.clone(), source })?
        }
        (None, None) => return Err(DataError::Invalid(format!("{}: neither rpc nor rpc_path given", path.display()))),
    };
    if !(0.0..360.0).contains(&side.sun_azimuth) {
        return Err(DataError::Invalid(format!("{}: sun azimuth {} outside [0, 360)", path.display(), side.sun_azimuth)));
    }
    sun_direction_enu(side.sun_azimuth, side.sun_elevation)?;
    let image = ImageData::load_png(&dir.join(&side.image))?;
    Ok(ImageRecord {
        index,
        id: side.id,
        image,
        rpc,
        sun_azimuth: side.sun_azimuth,
        sun_elevation: side.sun_elevation,
        split: side.split,
    })
}

/// Scene frame bounding every pixel ray of the given cameras: image corners
/// localized at both altitude bounds. Cameras are `(rpc, width, height)`.
pub fn fit_scene_frame(cameras: &[(&RpcModel, usize, usize)], h_min: f64, h_max: f64) -> Result<SceneFrame, DataError> {
    let mut pts = Vec::new();
    for (k, (rpc, width, height)) in cameras.iter().enumerate() {
        let (h, w) = ((height - 1) as f64, (width - 1) as f64);
        for (row, col) in [(0.0, 0.0), (0.0, w), (h, 0.0), (h, w)] {
            for alt in [h_min, h_max] {
                let g = rpc
                    .localize(PixelCoord::new(row, col), alt)
                    .map_err(|source| DataError::Rpc { path: PathBuf::from(format!("camera {k}")), source })?;
                pts.push(geodetic_to_ecef(g));
            }
        }
    }
    let norm = fit_normalization(&pts, h_min, h_max)?;
    Ok(SceneFrame::from_boundary_points(norm, &pts)?)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    if !(manifest.h_min < manifest.h_max) {
        return Err(DataError::Invalid(format!("h_min {} must be below h_max {}", manifest.h_min, manifest.h_max)));
    }
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let loaded = exec::map_indexed(Execution::Parallel, manifest.images.len(), |i| load_record(&root, i, &manifest.images[i]));
    let records = loaded.into_iter().collect::<Result<Vec<_>, _>>()?;
    if !records.iter().any(|r| r.split == Split::Train) {
        return Err(DataError::Invalid("no training images".into()));
    }
    let cameras: Vec<_> = records.iter().map(|r| (&r.rpc, r.image.width, r.image.height)).collect();
    let frame = fit_scene_frame(&cameras, manifest.h_min, manifest.h_max)?;
    let mut ds = Dataset { root, manifest, records, frame, depth_points: Vec::new() };
    if let Some(rel) = ds.manifest.depth_points.clone() {
        let path = ds.root.join(rel);
        ds.depth_points = load_depth_points(&path, ds.records.len())?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPointRecord {
    pub j: usize,
    pub row: f64,
    pub col: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub err: f64,
}

/// Text lines `j row col X Y Z err` (normalized coordinates, error in
/// pixels) or, for a `.json` file, an array of the same records.
pub fn load_depth_points(path: &Path, n_images: usize) -> Result<Vec<DepthPoint>, DataError> {
    let recs: Vec<DepthPointRecord> = if path.extension().is_some_and(|e| e == "json") {
        read_json(path)?
    } else {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        parse_depth_text(path, &text)?
    };
    for (i, r) in recs.iter().enumerate() {
        if r.j >= n_images {
            return Err(DataError::Parse { path: path.to_path_buf(), line: i + 1, msg: format!("image index {} out of range", r.j) });
        }
        if !(r.err >= 0.0) {
            return Err(DataError::Parse { path: path.to_path_buf(), line: i + 1, msg: format!("negative reprojection error {}", r.err) });
        }
    }
    let weights = compute_ds_weights(&recs.iter().map(|r| r.err).collect::<Vec<_>>());
    Ok(recs
        .iter()
        .zip(weights)
        .map(|(r, w)| DepthPoint {
            image_index: r.j,
            pixel: PixelCoord::new(r.row, r.col),
            point: [r.x, r.y, r.z],
            weight: w,
            reproj_err: r.err,
        })
        .collect())
}

fn parse_depth_text(path: &Path, text: &str) -> Result<Vec<DepthPointRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| DataError::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let j = f[0].parse::<usize>().map_err(|e| bad(format!("image index: {e}")))?;
        let mut v = [0.0; 6];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s.parse().map_err(|e| bad(format!("field {}: {e}", k + 2)))?;
        }
        out.push(DepthPointRecord { j, row: v[0], col: v[1], x: v[2], y: v[3], z: v[4], err: v[5] });
    }
    Ok(out)
}

pub fn write_depth_points(path: &Path, recs: &[DepthPointRecord]) -> Result<(), DataError> {
    let mut s = String::from("# j row col X Y Z err\n");
    for r in recs {
        s.push_str(&format!("{} {:?} {:?} {:?} {:?} {:?} {:?}\n", r.j, r.row, r.col, r.x, r.y, r.z, r.err));
    }
    fs::write(path, s).map_err(io_err(path))
}

const CACHE_MAGIC: &[u8; 8] = b"SNRFRAYS";
const CACHE_VERSION: u32 = 1;

/// Every training pixel ray of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RayStore {
    pub rays: Vec<Ray>,
    pub hash: [u8; 32],
}

impl RayStore {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = Vec::with_capacity(48 + self.rays.len() * 19 * 8);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.hash);
        buf.extend_from_slice(&(self.rays.len() as u64).to_le_bytes());
        for r in &self.rays {
            let f = [
                r.origin[0], r.origin[1], r.origin[2], r.dir[0], r.dir[1], r.dir[2], r.t_min, r.t_max, r.sun_dir[0],
                r.sun_dir[1], r.sun_dir[2], r.pixel.row, r.pixel.col, r.gt_color[0], r.gt_color[1], r.gt_color[2],
            ];
            for v in f {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(r.image_index as u64).to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        file.write_all(&buf).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let mut buf = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(path))?;
        let corrupt = |msg: &str| DataError::Cache { path: path.to_path_buf(), msg: msg.into() };
        if buf.len() < 52 || &buf[..8] != CACHE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        if u32::from_le_bytes(buf[8..12].try_into().unwrap()) != CACHE_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let hash: [u8; 32] = buf[12..44].try_into().unwrap();
        let n = u64::from_le_bytes(buf[44..52].try_into().unwrap()) as usize;
        let body = &buf[52..];
        if body.len() != n * 17 * 8 {
            return Err(corrupt("truncated"));
        }
        let rays = body
            .chunks_exact(17 * 8)
            .map(|c| {
                let f = |k: usize| f64::from_le_bytes(c[k * 8..k * 8 + 8].try_into().unwrap());
                Ray {
                    origin: [f(0), f(1), f(2)],
                    dir: [f(3), f(4), f(5)],
                    t_min: f(6),
                    t_max: f(7),
                    sun_dir: [f(8), f(9), f(10)],
                    pixel: PixelCoord::new(f(11), f(12)),
                    gt_color: [f(13), f(14), f(15)],
                    image_index: u64::from_le_bytes(c[128..136].try_into().unwrap()) as usize,
                }
            })
            .collect();
        Ok(Self { rays, hash })
    }
}

/// SHA-256 over everything the training rays are built from.
pub fn content_hash(ds: &Dataset) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(CACHE_MAGIC);
    h.update(CACHE_VERSION.to_le_bytes());
    h.update(serde_json::to_vec(&ds.frame).expect("serializable"));
    for r in ds.records.iter().filter(|r| r.split == Split::Train) {
        h.update((r.index as u64).to_le_bytes());
        h.update(r.rpc.to_text().as_bytes());
        h.update(r.sun_azimuth.to_le_bytes());
        h.update(r.sun_elevation.to_le_bytes());
        h.update((r.image.width as u64).to_le_bytes());
        h.update((r.image.height as u64).to_le_bytes());
        for v in &r.image.pixels {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build the training rays, reusing `cache_dir/rays-<hash>.bin` when its
/// content hash matches.
pub fn cache_rays(ds: &Dataset, cache_dir: Option<&Path>, exec: Execution) -> Result<RayStore, DataError> {
    let hash = content_hash(ds);
    let path = cache_dir.map(|d| d.join(format!("rays-{}.bin", &hash_hex(&hash)[..16])));
    if let Some(p) = &path {
        if p.exists() {
            match RayStore::read(p) {
                Ok(store) if store.hash == hash => {
                    log::debug!("ray cache hit {}", p.display());
                    return Ok(store);
                }
                Ok(_) => log::warn!("ray cache {} has a stale hash, rebuilding", p.display()),
                Err(e) => log::warn!("{e}, rebuilding"),
            }
        }
    }
    let train = ds.train_indices();
    let per_image = exec::map_indexed(exec, train.len(), |k| ds.image_rays(train[k]));
    let mut rays = Vec::new();
    for r in per_image {
        rays.extend(r?);
    }
    let store = RayStore { rays, hash };
    if let Some(p) = &path {
        if let Some(d) = p.parent() {
            fs::create_dir_all(d).map_err(io_err(d))?;
        }
        store.write(p)?;
    }
    Ok(store)
}

/// `ceil(n / batch)`; the last batch of an epoch may be short.
pub fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

/// Shuffle of `0..n` for `epoch`, reproducible from `seed`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Without-replacement batches within each epoch permutation, addressable
/// by iteration number.
#[derive(Debug, Clone)]
pub struct RaySampler {
    pub n: usize,
    pub batch: usize,
    pub seed: u64,
    current: Option<(usize, Vec<usize>)>,
}

impl RaySampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n > 0 && batch > 0, "empty ray store or batch");
        Self { n, batch, seed, current: None }
    }

    pub fn epoch_of(&self, iter: usize) -> usize {
        iter / batches_per_epoch(self.n, self.batch)
    }

    /// `(epoch, ray indices)` of iteration `iter`.
    pub fn batch_at(&mut self, iter: usize) -> (usize, Vec<usize>) {
        let per = batches_per_epoch(self.n, self.batch);
        let (epoch, k) = (iter / per, iter % per);
        if self.current.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.current = Some((epoch, epoch_permutation(self.n, self.seed, epoch)));
        }
        let perm = &self.current.as_ref().expect("set above").1;
        let lo = k * self.batch;
        (epoch, perm[lo..(lo + self.batch).min(self.n)].to_vec())
    }
}

/// Uniform anchors over the footprint, each paired with the sun direction
/// and index of a uniformly chosen training image.
pub fn solar_batch<R: Rng + ?Sized>(
    frame: &SceneFrame,
    suns: &[(Vec3, usize)],
    rng: &mut R,
    count: usize,
) -> Result<Vec<Ray>, DataError> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (sun, j) = suns[rng.random_range(0..suns.len())];
        let anchor = crate::ray::sample_solar_anchors(frame, sun, rng, 1).map_err(DataError::from)?[0];
        out.extend(crate::ray::build_solar_rays(&[anchor], sun, j, frame)?);
    }
    Ok(out)
}

/// Uniform draw with replacement of `count` depth-point indices.
pub fn depth_batch<R: Rng + ?Sized>(n_points: usize, rng: &mut R, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n_points)).collect()
}

/// Normalized coordinates of a point are within the `[-1.5, 1.5]` cube.
pub fn in_scene_volume(p: Vec3) -> bool {
    p.iter().all(|v| v.abs() <= 1.5) && math::norm(p).is_finite()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zenith_sun_points_down() {
        let w = sun_direction_enu(123.0, 90.0).unwrap();
        assert!(w[0].abs() < 1e-15 && w[1].abs() < 1e-15);
        assert_eq!(w[2], -1.0);
    }

    #[test]
    fn north_sun_shines_south() {
        let w = sun_direction_enu(0.0, 45.0).unwrap();
        assert!(w[0].abs() < 1e-15);
        assert!(w[1] < 0.0 && w[2] < 0.0);
        assert!((math::norm(w) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn horizon_sun_rejected() {
        assert!(matches!(sun_direction_enu(10.0, 0.0), Err(DataError::SunBelowHorizon(_))));
    }

    #[test]
    fn sampler_covers_epoch_once() {
        let mut s = RaySampler::new(10, 3, 7);
        assert_eq!(batches_per_epoch(10, 3), 4);
        let mut seen: Vec<usize> = (0..4).flat_map(|i| s.batch_at(i).1).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.batch_at(3).1.len(), 1);
        assert_eq!(s.batch_at(4).0, 1);
    }

    #[test]
    fn depth_text_parses() {
        let t = "# header\n0 1.5 2.5 0.1 0.2 0.3 0.0\n1 3 4 -0.1 0 0.5 2 # trailing\n";
        let r = parse_depth_text(Path::new("x"), t).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].j, 1);
        assert_eq!(r[1].err, 2.0);
        assert!(parse_depth_text(Path::new("x"), "0 1 2").is_err());
    }
}
