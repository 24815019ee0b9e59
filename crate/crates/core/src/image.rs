//! Grayscale images, marker polygons, and the per-pixel fields built from them.
//!
//! All grids are row-major with unit pixel spacing. A pixel `(r, c)` has its
//! centre at the point `(r, c)`, so marker coordinates and pixel centres live in
//! the same frame.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const MIN_SIDE: usize = 4;

/// A grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::ImageTooSmall { height, width });
        }
        if data.len() != height * width {
            return Err(shape_err(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }
}

/// Invariant class carried by a [`ScalarField`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    /// Values in {0, 1}.
    Mask,
    /// Values ≥ 0.
    Distance,
    /// Values in (0, 1].
    Edge,
    /// Any finite value.
    Fidelity,
    /// Values in [0, 1].
    RelaxedLabel,
    /// Any finite value, no further meaning attached.
    Real,
}

impl FieldKind {
    fn admits(self, v: f64) -> bool {
        if !v.is_finite() {
            return false;
        }
        match self {
            FieldKind::Mask => v == 0.0 || v == 1.0,
            FieldKind::Distance => v >= 0.0,
            FieldKind::Edge => v > 0.0 && v <= 1.0,
            FieldKind::RelaxedLabel => (0.0..=1.0).contains(&v),
            FieldKind::Fidelity | FieldKind::Real => true,
        }
    }
}

/// A per-pixel real field tagged with the invariant its values satisfy.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    data: Vec<f64>,
    kind: FieldKind,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, data: Vec<f64>, kind: FieldKind) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "{} values for a {height}x{width} field",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !kind.admits(**v)) {
            return Err(Error::InvalidParameter(format!(
                "value {v} violates the {kind:?} field invariant"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            kind,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, kind: FieldKind) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], kind)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Re-tags the field, checking the new invariant.
    pub fn with_kind(self, kind: FieldKind) -> Result<Self> {
        Self::new(self.height, self.width, self.data, kind)
    }

    pub(crate) fn check_dims(&self, h: usize, w: usize, what: &str) -> Result<()> {
        if self.dims() != (h, w) {
            return Err(shape_err(format!(
                "{what} is {}x{}, expected {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Ordered marker points `(row, col)` forming a closed polygon.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarkerSet {
    points: Vec<(usize, usize)>,
}

impl MarkerSet {
    /// Validates the points against an `height`×`width` grid.
    pub fn new(points: Vec<(usize, usize)>, height: usize, width: usize) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidMarkers(format!(
                "need at least 3 points, got {}",
                points.len()
            )));
        }
        if let Some(&(r, c)) = points.iter().find(|(r, c)| *r >= height || *c >= width) {
            return Err(Error::InvalidMarkers(format!(
                "point ({r}, {c}) lies outside the {height}x{width} image"
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if points[i + 1..].contains(p) {
                return Err(Error::InvalidMarkers(format!(
                    "duplicate point ({}, {})",
                    p.0, p.1
                )));
            }
        }
        Ok(Self { points })
    }

    /// Parses the `[[row, col], ...]` JSON form.
    pub fn from_json(text: &str, height: usize, width: usize) -> Result<Self> {
        let points: Vec<(usize, usize)> = serde_json::from_str(text)
            .map_err(|e| Error::InvalidMarkers(format!("bad marker JSON: {e}")))?;
        Self::new(points, height, width)
    }

    pub fn load(path: &Path, height: usize, width: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, height, width)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.points).expect("points serialize")
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Twice the signed shoelace area.
    fn doubled_area(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (y0, x0) = self.points[i];
                let (y1, x1) = self.points[(i + 1) % n];
                x0 as f64 * y1 as f64 - x1 as f64 * y0 as f64
            })
            .sum()
    }
}

/// Reads an 8-bit binary PGM (P5) or grayscale PNG.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image(&bytes)
}

/// Decodes PGM or PNG bytes, dispatching on the magic number.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else {
        Err(Error::UnsupportedFormat(
            "expected binary PGM (P5) or PNG".into(),
        ))
    }
}

/// Reads the `P5` header and returns `(width, height, maxval, offset of pixel data)`.
pub fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::InvalidImage("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::InvalidImage("malformed PGM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidImage("PGM header value out of range".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::InvalidImage("malformed PGM header".into())),
    }
    let [width, height, maxval] = fields;
    Ok((width, height, maxval, pos))
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let (width, height, maxval, offset) = parse_pgm_header(bytes)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PGM maxval {maxval}; only 8-bit images are supported"
        )));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::InvalidImage("PGM dimensions overflow".into()))?;
    let raster = bytes
        .get(offset..offset + n)
        .ok_or_else(|| Error::InvalidImage("truncated PGM raster".into()))?;
    if raster.iter().any(|&v| v as usize > maxval) {
        return Err(Error::InvalidImage("PGM sample exceeds maxval".into()));
    }
    Image::new(height, width, raster.iter().map(|&v| v as f64 / 255.0).collect())
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidImage(format!("PNG decode failed: {e}")))?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Image::new(
                h as usize,
                w as usize,
                buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            )
        }
        other => Err(Error::UnsupportedFormat(format!(
            "PNG colour type {:?}; only 8-bit grayscale is supported",
            other.color()
        ))),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes values in `[0, 1]` as an 8-bit P5 PGM.
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    out
}

pub fn encode_image_pgm(img: &Image) -> Vec<u8> {
    encode_pgm(img.height, img.width, &img.data)
}

/// Linear heatmap of a field: its minimum maps to 0 and its maximum to 255.
pub fn encode_heatmap_pgm(field: &ScalarField) -> Vec<u8> {
    let lo = field.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.max();
    let span = hi - lo;
    let scaled: Vec<f64> = field
        .data
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    encode_pgm(field.height, field.width, &scaled)
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    if cross.abs() > 1e-12 {
        return false;
    }
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Even-odd test of a pixel centre against the closed polygon; points on an
/// edge count as inside.
pub(crate) fn point_in_polygon(p: (f64, f64), poly: &[(usize, usize)]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let a = (poly[i].0 as f64, poly[i].1 as f64);
        let b = (poly[(i + 1) % n].0 as f64, poly[(i + 1) % n].1 as f64);
        if on_segment(p, a, b) {
            return true;
        }
        // ray towards +col
        if (a.0 > p.0) != (b.0 > p.0) {
            let col_at = a.1 + (p.0 - a.0) * (b.1 - a.1) / (b.0 - a.0);
            if p.1 < col_at {
                inside = !inside;
            }
        }
    }
    inside
}

/// Binary mask of the pixels whose centres lie inside the marker polygon.
pub fn rasterize_polygon(markers: &MarkerSet, height: usize, width: usize) -> Result<ScalarField> {
    let markers = MarkerSet::new(markers.points.clone(), height, width)?;
    if markers.doubled_area() == 0.0 {
        return Err(Error::DegeneratePolygon);
    }
    let (rmin, rmax) = markers
        .points
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (cmin, cmax) = markers
        .points
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let mut data = vec![0.0; height * width];
    for r in rmin..=rmax {
        for c in cmin..=cmax {
            if point_in_polygon((r as f64, c as f64), &markers.points) {
                data[r * width + c] = 1.0;
            }
        }
    }
    ScalarField::new(height, width, data, FieldKind::Mask)
}

/// Mean of `f` over the nonzero pixels of `mask`.
pub fn region_mean(f: &Image, mask: &ScalarField) -> Result<f64> {
    mask.check_dims(f.height, f.width, "mask")?;
    let (sum, count) = f
        .data
        .iter()
        .zip(&mask.data)
        .fold((0.0, 0.0), |(s, n), (v, m)| (s + v * m, n + m));
    if count == 0.0 {
        return Err(Error::EmptyRegion("mask has no pixels"));
    }
    Ok(sum / count)
}

/// Per-pixel `(d/dr, d/dc)` with central differences inside and one-sided
/// differences on the border.
pub fn image_gradient(f: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = f.dims();
    let mut gr = vec![0.0; h * w];
    let mut gc = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            gr[i] = if r == 0 {
                f.get(1, c) - f.get(0, c)
            } else if r == h - 1 {
                f.get(h - 1, c) - f.get(h - 2, c)
            } else {
                0.5 * (f.get(r + 1, c) - f.get(r - 1, c))
            };
            gc[i] = if c == 0 {
                f.get(r, 1) - f.get(r, 0)
            } else if c == w - 1 {
                f.get(r, w - 1) - f.get(r, w - 2)
            } else {
                0.5 * (f.get(r, c + 1) - f.get(r, c - 1))
            };
        }
    }
    (gr, gc)
}

pub fn gradient_magnitude(f: &Image) -> ScalarField {
    let (gr, gc) = image_gradient(f);
    let data = gr.iter().zip(&gc).map(|(a, b)| a.hypot(*b)).collect();
    ScalarField::new(f.height, f.width, data, FieldKind::Distance).expect("magnitudes are nonnegative")
}
