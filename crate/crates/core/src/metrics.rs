//! Thresholding and overlap scores.

use crate::error::{shape_err, Error, Result};
use crate::image::{FieldKind, ScalarField};

pub const DEFAULT_GAMMA: f64 = 0.5;

/// `{x : u(x) > gamma}` as a binary mask.
pub fn threshold_mask(u: &ScalarField, gamma: f64) -> Result<ScalarField> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must lie in (0, 1), got {gamma}"
        )));
    }
    let (h, w) = u.dims();
    let data = u.data().iter().map(|&v| (v > gamma) as u8 as f64).collect();
    ScalarField::new(h, w, data, FieldKind::Mask)
}

struct Counts {
    a: usize,
    b: usize,
    both: usize,
}

fn counts(a: &ScalarField, b: &ScalarField) -> Result<Counts> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!(
            "masks are {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut c = Counts { a: 0, b: 0, both: 0 };
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x != 0.0, *y != 0.0);
        c.a += x as usize;
        c.b += y as usize;
        c.both += (x && y) as usize;
    }
    Ok(c)
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    let c = counts(a, b)?;
    if c.a + c.b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * c.both as f64 / (c.a + c.b) as f64)
}

/// `|A∩B| / |A∪B|`, computed as `|A∩B| / (|A| + |B| − |A∩B|)`; two empty
/// masks score 1.
pub fn jaccard(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    let c = counts(a, b)?;
    let union = c.a + c.b - c.both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(c.both as f64 / union as f64)
}

/// Scores for one predicted mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
}

/// Aggregate over a set of images: means, sample standard deviations, and the
/// per-image rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub dice: f64,
    pub jaccard: f64,
    pub dice_std: f64,
    pub jaccard_std: f64,
    pub per_image: Vec<ImageScore>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalResult {
    pub fn from_scores(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyRegion("no images to evaluate"));
        }
        let d: Vec<f64> = per_image.iter().map(|s| s.dice).collect();
        let j: Vec<f64> = per_image.iter().map(|s| s.jaccard).collect();
        let (dice, dice_std) = mean_std(&d);
        let (jaccard, jaccard_std) = mean_std(&j);
        Ok(Self {
            dice,
            jaccard,
            dice_std,
            jaccard_std,
            per_image,
        })
    }

    /// `image,method,dice,jaccard` rows followed by `mean` and `std` rows.
    pub fn to_csv(&self, method: &str) -> String {
        let mut out = String::from("image,method,dice,jaccard\n");
        for s in &self.per_image {
            out.push_str(&format!("{},{method},{},{}\n", s.id, s.dice, s.jaccard));
        }
        out.push_str(&format!("mean,{method},{},{}\n", self.dice, self.jaccard));
        out.push_str(&format!("std,{method},{},{}\n", self.dice_std, self.jaccard_std));
        out
    }
}

pub fn score(id: impl Into<String>, pred: &ScalarField, gt: &ScalarField) -> Result<ImageScore> {
    Ok(ImageScore {
        id: id.into(),
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
    })
}
