//! Seeded synthetic fixtures with known ground truth.
//!
//! Objects have intensity 0.75 on a 0.25 background; additive Gaussian noise
//! is clamped back into `[0,1]`. Markers form a square strictly inside the
//! target object.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{FieldKind, Image, MarkerSet, ScalarField};

pub const OBJECT_LEVEL: f64 = 0.75;
pub const BACKGROUND_LEVEL: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FixtureKind {
    Disc,
    /// Disc with a rectangular bite out of its right side.
    DiscNotch,
    /// Target disc plus a same-intensity distractor disc; only the target is
    /// in the ground truth.
    TwoObject,
}

impl FixtureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FixtureKind::Disc => "disc",
            FixtureKind::DiscNotch => "disc-notch",
            FixtureKind::TwoObject => "two-object",
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disc" => Ok(FixtureKind::Disc),
            "disc-notch" => Ok(FixtureKind::DiscNotch),
            "two-object" => Ok(FixtureKind::TwoObject),
            other => Err(Error::InvalidParameter(format!(
                "unknown fixture kind {other:?} (expected disc, disc-notch or two-object)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub image: Image,
    pub truth: ScalarField,
    pub markers: MarkerSet,
    /// The cut-out region of a `disc-notch` fixture.
    pub notch: Option<ScalarField>,
}

#[derive(Clone, Copy, Debug)]
struct Disc {
    r: f64,
    c: f64,
    radius: f64,
}

impl Disc {
    fn contains(&self, r: usize, c: usize) -> bool {
        (r as f64 - self.r).hypot(c as f64 - self.c) <= self.radius
    }

    /// Axis-aligned square of markers around the centre, well inside the disc.
    fn markers(&self, h: usize, w: usize) -> Result<MarkerSet> {
        let half = (self.radius * 0.4).floor().max(1.0) as usize;
        let (r, c) = (self.r.round() as usize, self.c.round() as usize);
        MarkerSet::new(
            vec![(r - half, c - half), (r - half, c + half), (r + half, c + half), (r + half, c - half)],
            h,
            w,
        )
    }
}

fn mask(n: usize, inside: impl Fn(usize, usize) -> bool) -> Result<ScalarField> {
    let data = (0..n * n).map(|i| if inside(i / n, i % n) { 1.0 } else { 0.0 }).collect();
    ScalarField::new(n, n, data, FieldKind::Mask)
}

/// Generates one fixture of side `size`; geometry and noise are drawn from
/// `seed`.
pub fn generate(kind: FixtureKind, size: usize, noise: f64, seed: u64) -> Result<Fixture> {
    if size < 16 || !size.is_multiple_of(8) {
        return Err(Error::InvalidParameter(format!(
            "fixture size must be a multiple of 8 and at least 16, got {size}"
        )));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise must be nonnegative, got {noise}")));
    }
    let n = size;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = (nf - 1.0) / 2.0;
    let mut jitter = |span: f64| rng.random_range(-span..=span);

    let (objects, truth, markers, notch) = match kind {
        FixtureKind::Disc => {
            let d = Disc {
                r: centre + jitter(nf / 16.0),
                c: centre + jitter(nf / 16.0),
                radius: nf * (0.25 + 0.05 * (jitter(1.0) + 1.0) / 2.0),
            };
            (mask(n, |r, c| d.contains(r, c))?, mask(n, |r, c| d.contains(r, c))?, d.markers(n, n)?, None)
        }
        FixtureKind::DiscNotch => {
            let d = Disc {
                r: centre + jitter(nf / 32.0),
                c: centre + jitter(nf / 32.0),
                radius: nf * 0.34,
            };
            let half = (n / 16) as f64;
            let cut = move |r: usize, c: usize| {
                d.contains(r, c) && (r as f64 - d.r).abs() <= half && c as f64 >= d.c + 0.2 * d.radius
            };
            let body = mask(n, |r, c| d.contains(r, c) && !cut(r, c))?;
            // markers sit in the left half, away from the notch
            let left = Disc { c: d.c - 0.45 * d.radius, radius: d.radius * 0.5, ..d };
            (body.clone(), body, left.markers(n, n)?, Some(mask(n, cut)?))
        }
        FixtureKind::TwoObject => {
            let flip = jitter(1.0) < 0.0;
            let target = Disc {
                r: centre + jitter(nf * 0.15),
                c: nf * 0.28 + jitter(nf * 0.03),
                radius: nf * (0.16 + 0.02 * (jitter(1.0) + 1.0)),
            };
            let other = Disc {
                r: centre + jitter(nf * 0.15),
                c: nf * 0.74 + jitter(nf * 0.03),
                radius: nf * (0.12 + 0.02 * (jitter(1.0) + 1.0)),
            };
            let (target, other) = if flip {
                let m = |d: Disc| Disc { c: nf - 1.0 - d.c, ..d };
                (m(target), m(other))
            } else {
                (target, other)
            };
            (
                mask(n, |r, c| target.contains(r, c) || other.contains(r, c))?,
                mask(n, |r, c| target.contains(r, c))?,
                target.markers(n, n)?,
                None,
            )
        }
    };

    let dist = Normal::new(0.0, noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let data = objects
        .data()
        .iter()
        .map(|&m| {
            let clean = if m > 0.5 { OBJECT_LEVEL } else { BACKGROUND_LEVEL };
            let eta = if noise > 0.0 { dist.sample(&mut rng) } else { 0.0 };
            (clean + eta).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Fixture {
        image: Image::new(n, n, data)?,
        truth,
        markers,
        notch,
    })
}
