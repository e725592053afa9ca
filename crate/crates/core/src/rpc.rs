//! Rational polynomial camera models.
//!
//! A model maps geodetic `(lat, lon, alt)` to image `(row, col)` through
//! ratios of cubic polynomials evaluated on normalized coordinates
//!
//! ```text
//! P = (lat - LAT_OFF) / LAT_SCALE
//! L = (lon - LON_OFF) / LON_SCALE
//! H = (alt - ALT_OFF) / ALT_SCALE
//! row = LINE_NUM(P, L, H) / LINE_DEN(P, L, H) * LINE_SCALE + LINE_OFF
//! col = SAMP_NUM(P, L, H) / SAMP_DEN(P, L, H) * SAMP_SCALE + SAMP_OFF
//! ```
//!
//! Coefficients follow the RPC00B term order. Coefficient `k` (1-based)
//! multiplies the monomial
//!
//! | k | term | k | term  | k  | term  | k  | term  |
//! |---|------|---|-------|----|-------|----|-------|
//! | 1 | 1    | 6 | L·H   | 11 | P·L·H | 16 | P³    |
//! | 2 | L    | 7 | P·H   | 12 | L³    | 17 | P·H²  |
//! | 3 | P    | 8 | L²    | 13 | L·P²  | 18 | L²·H  |
//! | 4 | H    | 9 | P²    | 14 | L·H²  | 19 | P²·H  |
//! | 5 | L·P  | 10| H²    | 15 | L²·P  | 20 | H³    |
//!
//! Optional inverse (localization) coefficients use the same ordering with
//! `P := row_n`, `L := col_n`, `H := alt_n` (normalized image coordinates and
//! altitude) and yield normalized latitude and longitude.
//!
//! # Text format
//!
//! One `KEY: value` pair per line. Scalars are `LINE_OFF`, `SAMP_OFF`,
//! `LAT_OFF`, `LON_OFF`, `ALT_OFF` and the matching `*_SCALE` keys
//! (`LONG_*` and `HEIGHT_*` are accepted as aliases). Coefficients are
//! `LINE_NUM_COEFF_1` .. `LINE_NUM_COEFF_20` and likewise for `LINE_DEN`,
//! `SAMP_NUM`, `SAMP_DEN`, plus optionally `LAT_NUM`, `LAT_DEN`, `LON_NUM`,
//! `LON_DEN`. A trailing unit word after the number is ignored, as are
//! blank lines, `#` comments and unknown keys. The JSON form is an object
//! with exactly the same keys mapped to numbers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeodeticPoint;

pub const N_COEFFS: usize = 20;
const DEN_EPS: f64 = 1e-12;
const LOCALIZE_TOL: f64 = 1e-10;
const LOCALIZE_MAX_ITERS: usize = 20;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RpcError {
    #[error("missing field {0}")]
    MissingField(String),
    #[error("malformed number at {0}")]
    MalformedNumber(String),
    #[error("{family} has {count} coefficients, expected 1..=20 exactly once each")]
    BadCoefficientCount { family: String, count: usize },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("denominator {0:e} is near zero; point far outside the validity domain")]
    DenominatorNearZero(f64),
    #[error("localization did not converge (residual {0:e})")]
    NonConvergence(f64),
    #[error("json: {0}")]
    Json(String),
}

/// Image coordinates in pixels; fractional values allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: f64,
    pub col: f64,
}

impl PixelCoord {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }
}

pub type Coeffs = [f64; N_COEFFS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseCoeffs {
    pub lat_num: Coeffs,
    pub lat_den: Coeffs,
    pub lon_num: Coeffs,
    pub lon_den: Coeffs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcModel {
    pub line_num: Coeffs,
    pub line_den: Coeffs,
    pub samp_num: Coeffs,
    pub samp_den: Coeffs,
    pub lat_off: f64,
    pub lat_scale: f64,
    pub lon_off: f64,
    pub lon_scale: f64,
    pub alt_off: f64,
    pub alt_scale: f64,
    pub row_off: f64,
    pub row_scale: f64,
    pub col_off: f64,
    pub col_scale: f64,
    pub inverse: Option<InverseCoeffs>,
}

/// The twenty RPC00B monomials of `(P, L, H)`.
#[inline]
pub fn monomials(p: f64, l: f64, h: f64) -> Coeffs {
    [
        1.0,
        l,
        p,
        h,
        l * p,
        l * h,
        p * h,
        l * l,
        p * p,
        h * h,
        p * l * h,
        l * l * l,
        l * p * p,
        l * h * h,
        l * l * p,
        p * p * p,
        p * h * h,
        l * l * h,
        p * p * h,
        h * h * h,
    ]
}

#[inline]
fn poly(c: &Coeffs, m: &Coeffs) -> f64 {
    c.iter().zip(m).map(|(a, b)| a * b).sum()
}

fn ratio(num: &Coeffs, den: &Coeffs, m: &Coeffs) -> Result<f64, RpcError> {
    let d = poly(den, m);
    if d.abs() < DEN_EPS || !d.is_finite() {
        return Err(RpcError::DenominatorNearZero(d));
    }
    Ok(poly(num, m) / d)
}

const SCALAR_KEYS: [&str; 10] = [
    "LINE_OFF",
    "SAMP_OFF",
    "LAT_OFF",
    "LON_OFF",
    "ALT_OFF",
    "LINE_SCALE",
    "SAMP_SCALE",
    "LAT_SCALE",
    "LON_SCALE",
    "ALT_SCALE",
];
const FORWARD_FAMILIES: [&str; 4] = ["LINE_NUM", "LINE_DEN", "SAMP_NUM", "SAMP_DEN"];
const INVERSE_FAMILIES: [&str; 4] = ["LAT_NUM", "LAT_DEN", "LON_NUM", "LON_DEN"];

fn canonical_key(key: &str) -> String {
    let key = key.trim().to_ascii_uppercase();
    match key.as_str() {
        "LONG_OFF" => "LON_OFF".into(),
        "LONG_SCALE" => "LON_SCALE".into(),
        "HEIGHT_OFF" => "ALT_OFF".into(),
        "HEIGHT_SCALE" => "ALT_SCALE".into(),
        _ => key,
    }
}

fn split_coeff_key(key: &str) -> Option<(&str, usize)> {
    let (family, idx) = key.rsplit_once("_COEFF_")?;
    Some((family, idx.parse().ok()?))
}

#[derive(Default)]
struct Fields {
    scalars: BTreeMap<String, f64>,
    coeffs: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl Fields {
    fn insert(&mut self, key: &str, value: f64) -> Result<(), RpcError> {
        let key = canonical_key(key);
        if let Some((family, idx)) = split_coeff_key(&key) {
            let fam = self.coeffs.entry(family.to_string()).or_default();
            if fam.insert(idx, value).is_some() {
                return Err(RpcError::DuplicateKey(key));
            }
        } else if SCALAR_KEYS.contains(&key.as_str()) {
            if self.scalars.insert(key.clone(), value).is_some() {
                return Err(RpcError::DuplicateKey(key));
            }
        }
        Ok(())
    }

    fn scalar(&self, key: &str) -> Result<f64, RpcError> {
        self.scalars
            .get(key)
            .copied()
            .ok_or_else(|| RpcError::MissingField(key.to_string()))
    }

    fn family(&self, family: &str) -> Result<Coeffs, RpcError> {
        let fam = self
            .coeffs
            .get(family)
            .ok_or_else(|| RpcError::MissingField(format!("{family}_COEFF")))?;
        let complete = fam.len() == N_COEFFS && fam.keys().copied().eq(1..=N_COEFFS);
        if !complete {
            return Err(RpcError::BadCoefficientCount {
                family: family.to_string(),
                count: fam.len(),
            });
        }
        let mut out = [0.0; N_COEFFS];
        for (k, v) in fam {
            out[k - 1] = *v;
        }
        Ok(out)
    }

    fn into_model(self) -> Result<RpcModel, RpcError> {
        for family in self.coeffs.keys() {
            if !FORWARD_FAMILIES.contains(&family.as_str())
                && !INVERSE_FAMILIES.contains(&family.as_str())
            {
                return Err(RpcError::BadCoefficientCount {
                    family: family.clone(),
                    count: self.coeffs[family].len(),
                });
            }
        }
        let present = INVERSE_FAMILIES
            .iter()
            .filter(|f| self.coeffs.contains_key(**f))
            .count();
        let inverse = match present {
            0 => None,
            _ => Some(InverseCoeffs {
                lat_num: self.family("LAT_NUM")?,
                lat_den: self.family("LAT_DEN")?,
                lon_num: self.family("LON_NUM")?,
                lon_den: self.family("LON_DEN")?,
            }),
        };
        let model = RpcModel {
            line_num: self.family("LINE_NUM")?,
            line_den: self.family("LINE_DEN")?,
            samp_num: self.family("SAMP_NUM")?,
            samp_den: self.family("SAMP_DEN")?,
            lat_off: self.scalar("LAT_OFF")?,
            lat_scale: self.scalar("LAT_SCALE")?,
            lon_off: self.scalar("LON_OFF")?,
            lon_scale: self.scalar("LON_SCALE")?,
            alt_off: self.scalar("ALT_OFF")?,
            alt_scale: self.scalar("ALT_SCALE")?,
            row_off: self.scalar("LINE_OFF")?,
            row_scale: self.scalar("LINE_SCALE")?,
            col_off: self.scalar("SAMP_OFF")?,
            col_scale: self.scalar("SAMP_SCALE")?,
            inverse,
        };
        model.validate()?;
        Ok(model)
    }
}

impl RpcModel {
    pub fn validate(&self) -> Result<(), RpcError> {
        let scales = [
            ("LAT_SCALE", self.lat_scale),
            ("LON_SCALE", self.lon_scale),
            ("ALT_SCALE", self.alt_scale),
            ("LINE_SCALE", self.row_scale),
            ("SAMP_SCALE", self.col_scale),
        ];
        for (name, s) in scales {
            if !(s > 0.0 && s.is_finite()) {
                return Err(RpcError::InvalidModel(format!("{name} must be positive, got {s}")));
            }
        }
        if self.line_den[0] == 0.0 || self.samp_den[0] == 0.0 {
            return Err(RpcError::InvalidModel("denominator constant term is zero".into()));
        }
        Ok(())
    }

    /// Parse the `KEY: value` text format.
    pub fn parse_text(source: &str) -> Result<Self, RpcError> {
        let mut fields = Fields::default();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, rest)) = line.split_once(':') else {
                return Err(RpcError::MalformedNumber(format!("line {}: no `KEY: value`", i + 1)));
            };
            let token = rest.split_whitespace().next().unwrap_or("");
            let value: f64 = token
                .parse()
                .map_err(|_| RpcError::MalformedNumber(format!("line {}: {token:?}", i + 1)))?;
            fields.insert(key, value)?;
        }
        fields.into_model()
    }

    /// Parse the JSON mirror of the text format.
    pub fn parse_json(source: &str) -> Result<Self, RpcError> {
        let value: serde_json::Value =
            serde_json::from_str(source).map_err(|e| RpcError::Json(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| RpcError::Json("expected an object".into()))?;
        Self::from_json_map(obj)
    }

    pub fn from_json_map(obj: &serde_json::Map<String, serde_json::Value>) -> Result<Self, RpcError> {
        let mut fields = Fields::default();
        for (k, v) in obj {
            let key = canonical_key(k);
            let known = SCALAR_KEYS.contains(&key.as_str()) || split_coeff_key(&key).is_some();
            if !known {
                continue;
            }
            let x = v
                .as_f64()
                .ok_or_else(|| RpcError::MalformedNumber(format!("key {k}: {v}")))?;
            fields.insert(&key, x)?;
        }
        fields.into_model()
    }

    /// Either format, sniffed from the first non-blank character.
    pub fn parse(source: &str) -> Result<Self, RpcError> {
        if source.trim_start().starts_with('{') {
            Self::parse_json(source)
        } else {
            Self::parse_text(source)
        }
    }

    fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("LINE_OFF".to_string(), self.row_off),
            ("SAMP_OFF".to_string(), self.col_off),
            ("LAT_OFF".to_string(), self.lat_off),
            ("LON_OFF".to_string(), self.lon_off),
            ("ALT_OFF".to_string(), self.alt_off),
            ("LINE_SCALE".to_string(), self.row_scale),
            ("SAMP_SCALE".to_string(), self.col_scale),
            ("LAT_SCALE".to_string(), self.lat_scale),
            ("LON_SCALE".to_string(), self.lon_scale),
            ("ALT_SCALE".to_string(), self.alt_scale),
        ];
        let mut push = |family: &str, c: &Coeffs| {
            for (i, v) in c.iter().enumerate() {
                out.push((format!("{family}_COEFF_{}", i + 1), *v));
            }
        };
        push("LINE_NUM", &self.line_num);
        push("LINE_DEN", &self.line_den);
        push("SAMP_NUM", &self.samp_num);
        push("SAMP_DEN", &self.samp_den);
        if let Some(inv) = &self.inverse {
            push("LAT_NUM", &inv.lat_num);
            push("LAT_DEN", &inv.lat_den);
            push("LON_NUM", &inv.lon_num);
            push("LON_DEN", &inv.lon_den);
        }
        out
    }

    /// Text serialization; every value is written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}: {v:?}\n"))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .entries()
            .into_iter()
            .map(|(k, v)| (k, serde_json::Value::from(v)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn normalize_ground(&self, g: GeodeticPoint) -> (f64, f64, f64) {
        (
            (g.lat - self.lat_off) / self.lat_scale,
            (g.lon - self.lon_off) / self.lon_scale,
            (g.alt - self.alt_off) / self.alt_scale,
        )
    }

    /// Normalized `(row_n, col_n)` of normalized ground coordinates.
    pub fn project_normalized(&self, p: f64, l: f64, h: f64) -> Result<(f64, f64), RpcError> {
        let m = monomials(p, l, h);
        Ok((
            ratio(&self.line_num, &self.line_den, &m)?,
            ratio(&self.samp_num, &self.samp_den, &m)?,
        ))
    }

    /// The projection function: ground point to image pixel.
    pub fn project(&self, g: GeodeticPoint) -> Result<PixelCoord, RpcError> {
        let (p, l, h) = self.normalize_ground(g);
        let (rn, cn) = self.project_normalized(p, l, h)?;
        Ok(PixelCoord {
            row: rn * self.row_scale + self.row_off,
            col: cn * self.col_scale + self.col_off,
        })
    }

    fn normalize_pixel(&self, px: PixelCoord) -> (f64, f64) {
        (
            (px.row - self.row_off) / self.row_scale,
            (px.col - self.col_off) / self.col_scale,
        )
    }

    fn initial_guess(&self, rn: f64, cn: f64, hn: f64) -> (f64, f64) {
        self.inverse
            .as_ref()
            .and_then(|inv| {
                let m = monomials(rn, cn, hn);
                let p = ratio(&inv.lat_num, &inv.lat_den, &m).ok()?;
                let l = ratio(&inv.lon_num, &inv.lon_den, &m).ok()?;
                Some((p, l))
            })
            .unwrap_or((0.0, 0.0))
    }

    /// Localization through the inverse coefficients alone, if present.
    pub fn localize_inverse(&self, px: PixelCoord, alt: f64) -> Option<Result<GeodeticPoint, RpcError>> {
        let inv = self.inverse.as_ref()?;
        let (rn, cn) = self.normalize_pixel(px);
        let hn = (alt - self.alt_off) / self.alt_scale;
        let m = monomials(rn, cn, hn);
        Some((|| {
            let p = ratio(&inv.lat_num, &inv.lat_den, &m)?;
            let l = ratio(&inv.lon_num, &inv.lon_den, &m)?;
            Ok(GeodeticPoint {
                lat: p * self.lat_scale + self.lat_off,
                lon: l * self.lon_scale + self.lon_off,
                alt,
            })
        })())
    }

    /// The localization function: the ground point at altitude `alt` that
    /// projects onto `px`.
    ///
    /// Newton iteration on the 2x2 system in normalized coordinates with a
    /// central-difference Jacobian, started from the inverse coefficients
    /// when present and from the model offsets otherwise.
    pub fn localize(&self, px: PixelCoord, alt: f64) -> Result<GeodeticPoint, RpcError> {
        let (rn, cn) = self.normalize_pixel(px);
        let hn = (alt - self.alt_off) / self.alt_scale;
        let (mut p, mut l) = self.initial_guess(rn, cn, hn);
        let mut residual = f64::INFINITY;
        for _ in 0..=LOCALIZE_MAX_ITERS {
            let (r0, c0) = self.project_normalized(p, l, hn)?;
            let (fr, fc) = (r0 - rn, c0 - cn);
            residual = fr.abs().max(fc.abs());
            if residual < LOCALIZE_TOL {
                return Ok(GeodeticPoint {
                    lat: p * self.lat_scale + self.lat_off,
                    lon: l * self.lon_scale + self.lon_off,
                    alt,
                });
            }
            let (rp1, cp1) = self.project_normalized(p + FD_STEP, l, hn)?;
            let (rp0, cp0) = self.project_normalized(p - FD_STEP, l, hn)?;
            let (rl1, cl1) = self.project_normalized(p, l + FD_STEP, hn)?;
            let (rl0, cl0) = self.project_normalized(p, l - FD_STEP, hn)?;
            let j = [
                [(rp1 - rp0) / (2.0 * FD_STEP), (rl1 - rl0) / (2.0 * FD_STEP)],
                [(cp1 - cp0) / (2.0 * FD_STEP), (cl1 - cl0) / (2.0 * FD_STEP)],
            ];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-300 || !det.is_finite() {
                return Err(RpcError::NonConvergence(residual));
            }
            p -= (j[1][1] * fr - j[0][1] * fc) / det;
            l -= (-j[1][0] * fr + j[0][0] * fc) / det;
            if !(p.is_finite() && l.is_finite()) {
                return Err(RpcError::NonConvergence(residual));
            }
        }
        Err(RpcError::NonConvergence(residual))
    }
}
