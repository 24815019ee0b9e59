//! Geodesic distance from the marker region.
//!
//! The distance solves `|∇D| = s` with `D = 0` on the seed pixels, where the
//! slowness `s = eps + beta·|∇f|²` is cheap inside flat regions and expensive
//! across edges. The production path is a first-order Godunov upwind scheme
//! solved by fast sweeping; an 8-connected Dijkstra is kept alongside as an
//! independent check.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::image::{gradient_magnitude, FieldKind, Image, ScalarField};

pub const MIN_SLOWNESS: f64 = 1e-6;
pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_BETA: f64 = 100.0;

const SWEEP_TOL: f64 = 1e-9;
const MAX_PASSES: usize = 50;

/// Per-pixel right-hand side of the Eikonal equation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedField {
    height: usize,
    width: usize,
    slowness: Vec<f64>,
}

impl SpeedField {
    pub fn new(height: usize, width: usize, slowness: Vec<f64>) -> Result<Self> {
        if slowness.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} slowness values for a {height}x{width} grid",
                slowness.len()
            )));
        }
        if slowness.iter().any(|s| !(s.is_finite() && *s >= MIN_SLOWNESS)) {
            return Err(Error::InvalidParameter(format!(
                "slowness must be finite and at least {MIN_SLOWNESS}"
            )));
        }
        Ok(Self {
            height,
            width,
            slowness,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn slowness(&self) -> &[f64] {
        &self.slowness
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.slowness.iter().map(|s| s * k).collect(),
        )
    }
}

/// `slowness = eps + beta·|∇f|²`.
pub fn build_slowness(f: &Image, beta: f64, eps: f64) -> Result<SpeedField> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eikonal eps must be positive, got {eps}"
        )));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eikonal beta must be nonnegative, got {beta}"
        )));
    }
    let grad = gradient_magnitude(f);
    let s = grad.data().iter().map(|g| eps + beta * g * g).collect();
    SpeedField::new(f.height(), f.width(), s)
}

/// One of the four Gauss–Seidel sweep directions: `(rows ascending, cols ascending)`.
pub type SweepOrder = (bool, bool);

pub const DEFAULT_ORDERS: [SweepOrder; 4] = [(true, true), (false, true), (false, false), (true, false)];

fn seed_indices(seeds: &ScalarField, dims: (usize, usize)) -> Result<Vec<usize>> {
    seeds.check_dims(dims.0, dims.1, "seed mask")?;
    let idx: Vec<usize> = seeds
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyRegion("seed set is empty"));
    }
    Ok(idx)
}

#[inline]
fn godunov_update(a: f64, b: f64, s: f64) -> f64 {
    if (a - b).abs() >= s {
        a.min(b) + s
    } else {
        0.5 * (a + b + (2.0 * s * s - (a - b) * (a - b)).sqrt())
    }
}

/// Unnormalised fast-sweeping distance with an explicit sweep order.
pub fn solve_eikonal_with_orders(
    speed: &SpeedField,
    seeds: &ScalarField,
    orders: &[SweepOrder],
) -> Result<ScalarField> {
    let (h, w) = speed.dims();
    let seed_idx = seed_indices(seeds, (h, w))?;
    let mut d = vec![f64::INFINITY; h * w];
    let mut fixed = vec![false; h * w];
    for &i in &seed_idx {
        d[i] = 0.0;
        fixed[i] = true;
    }
    let s = &speed.slowness;

    for _pass in 0..MAX_PASSES {
        let mut max_change: f64 = 0.0;
        for &(rows_up, cols_up) in orders {
            for ri in 0..h {
                let r = if rows_up { ri } else { h - 1 - ri };
                for ci in 0..w {
                    let c = if cols_up { ci } else { w - 1 - ci };
                    let i = r * w + c;
                    if fixed[i] {
                        continue;
                    }
                    let up = if r > 0 { d[i - w] } else { f64::INFINITY };
                    let down = if r + 1 < h { d[i + w] } else { f64::INFINITY };
                    let left = if c > 0 { d[i - 1] } else { f64::INFINITY };
                    let right = if c + 1 < w { d[i + 1] } else { f64::INFINITY };
                    let a = up.min(down);
                    let b = left.min(right);
                    if a.is_infinite() && b.is_infinite() {
                        continue;
                    }
                    let cand = godunov_update(a, b, s[i]);
                    if cand < d[i] {
                        let change = if d[i].is_finite() { d[i] - cand } else { f64::INFINITY };
                        max_change = max_change.max(change);
                        d[i] = cand;
                    }
                }
            }
        }
        if max_change < SWEEP_TOL {
            break;
        }
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eikonal solve".into()));
    }
    ScalarField::new(h, w, d, FieldKind::Distance)
}

/// Unnormalised geodesic distance (fast sweeping, default sweep order).
pub fn solve_eikonal_raw(speed: &SpeedField, seeds: &ScalarField) -> Result<ScalarField> {
    solve_eikonal_with_orders(speed, seeds, &DEFAULT_ORDERS)
}

/// Geodesic distance normalised to `[0, 1]` by its maximum.
pub fn solve_eikonal(speed: &SpeedField, seeds: &ScalarField) -> Result<ScalarField> {
    normalize(solve_eikonal_raw(speed, seeds)?)
}

pub fn normalize(field: ScalarField) -> Result<ScalarField> {
    let (h, w) = field.dims();
    let max = field.max();
    let data = if max > 0.0 {
        field.into_data().into_iter().map(|v| v / max).collect()
    } else {
        vec![0.0; h * w]
    };
    ScalarField::new(h, w, data, FieldKind::Distance)
}

#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    // min-heap on distance, ties broken by index for determinism
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

/// Unnormalised 8-connected Dijkstra distance; each step costs the mean of its
/// endpoint slownesses times its Euclidean length.
pub fn dijkstra_oracle_raw(speed: &SpeedField, seeds: &ScalarField) -> Result<ScalarField> {
    let (h, w) = speed.dims();
    let seed_idx = seed_indices(seeds, (h, w))?;
    let s = &speed.slowness;
    let mut d = vec![f64::INFINITY; h * w];
    let mut heap = BinaryHeap::new();
    for &i in &seed_idx {
        d[i] = 0.0;
        heap.push(Frontier(0.0, i));
    }
    const STEPS: [(isize, isize); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    while let Some(Frontier(dist, i)) = heap.pop() {
        if dist > d[i] {
            continue;
        }
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for (dr, dc) in STEPS {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let j = nr as usize * w + nc as usize;
            let len = if dr != 0 && dc != 0 {
                std::f64::consts::SQRT_2
            } else {
                1.0
            };
            let cand = dist + 0.5 * (s[i] + s[j]) * len;
            if cand < d[j] {
                d[j] = cand;
                heap.push(Frontier(cand, j));
            }
        }
    }
    ScalarField::new(h, w, d, FieldKind::Distance)
}

pub fn dijkstra_oracle(speed: &SpeedField, seeds: &ScalarField) -> Result<ScalarField> {
    normalize(dijkstra_oracle_raw(speed, seeds)?)
}

/// Relative RMS difference `‖a − b‖₂ / ‖b‖₂`.
pub fn relative_rms(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn single_seed(h: usize, w: usize, r: usize, c: usize) -> ScalarField {
        let mut m = vec![0.0; h * w];
        m[r * w + c] = 1.0;
        ScalarField::new(h, w, m, FieldKind::Mask).unwrap()
    }

    fn random_speed(h: usize, w: usize, seed: u64) -> SpeedField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        SpeedField::new(h, w, (0..h * w).map(|_| rng.random_range(1.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn slowness_cases() {
        let flat = Image::from_fn(8, 8, |_, _| 0.4).unwrap();
        let s = build_slowness(&flat, 1000.0, 1.0).unwrap();
        assert!(s.slowness().iter().all(|&v| v == 1.0));

        let img = Image::from_fn(8, 8, |r, c| ((r * 3 + c) % 5) as f64 / 4.0).unwrap();
        let s = build_slowness(&img, 0.0, 0.25).unwrap();
        assert!(s.slowness().iter().all(|&v| v == 0.25));

        let w = 11;
        let ramp = Image::from_fn(6, w, |_, c| c as f64 / (w - 1) as f64).unwrap();
        let s = build_slowness(&ramp, 100.0, 1e-3).unwrap();
        let want = 1e-3 + 100.0 / ((w - 1) * (w - 1)) as f64;
        for r in 1..5 {
            for c in 1..w - 1 {
                assert!((s.slowness()[r * w + c] - want).abs() < 1e-12);
            }
        }

        assert!(build_slowness(&flat, 1.0, 0.0).is_err());
        assert!(build_slowness(&flat, 1.0, -1.0).is_err());
    }

    #[test]
    fn empty_seeds_rejected() {
        let speed = random_speed(8, 8, 1);
        let none = ScalarField::filled(8, 8, 0.0, FieldKind::Mask).unwrap();
        assert!(matches!(
            solve_eikonal(&speed, &none),
            Err(Error::EmptyRegion(_))
        ));
        assert!(dijkstra_oracle(&speed, &none).is_err());
    }

    #[test]
    fn uniform_slowness_close_to_euclidean() {
        let (h, w) = (32, 32);
        let speed = SpeedField::new(h, w, vec![1.0; h * w]).unwrap();
        let d = solve_eikonal_raw(&speed, &single_seed(h, w, 10, 13)).unwrap();
        let exact: Vec<f64> = (0..h * w)
            .map(|i| ((i / w) as f64 - 10.0).hypot((i % w) as f64 - 13.0))
            .collect();
        assert_eq!(d.get(10, 13), 0.0);
        assert!(relative_rms(d.data(), &exact) < 0.05);
    }

    #[test]
    fn dijkstra_corner_to_corner() {
        let speed = SpeedField::new(4, 4, vec![1.0; 16]).unwrap();
        let d = dijkstra_oracle_raw(&speed, &single_seed(4, 4, 0, 0)).unwrap();
        assert!((d.get(2, 2) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn dijkstra_and_sweeping_agree_on_random_slowness() {
        let speed = random_speed(16, 16, 5);
        let seeds = single_seed(16, 16, 4, 9);
        let a = solve_eikonal_raw(&speed, &seeds).unwrap();
        let b = dijkstra_oracle_raw(&speed, &seeds).unwrap();
        assert!(relative_rms(a.data(), b.data()) < 0.10);
    }

    #[test]
    fn normalisation_contract() {
        let speed = random_speed(12, 12, 2);
        let d = solve_eikonal(&speed, &single_seed(12, 12, 0, 0)).unwrap();
        assert_eq!(d.max(), 1.0);
        let all = ScalarField::filled(12, 12, 1.0, FieldKind::Mask).unwrap();
        let z = solve_eikonal(&speed, &all).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_slowness_scales_distance() {
        let speed = random_speed(16, 16, 8);
        let seeds = single_seed(16, 16, 7, 2);
        let a = solve_eikonal_raw(&speed, &seeds).unwrap();
        let b = solve_eikonal_raw(&speed.scaled(4.0).unwrap(), &seeds).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((4.0 * x - y).abs() <= 1e-9 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn more_seeds_never_increase_distance() {
        let speed = random_speed(16, 16, 11);
        let one = single_seed(16, 16, 3, 3);
        let mut two = one.data().to_vec();
        two[12 * 16 + 10] = 1.0;
        let two = ScalarField::new(16, 16, two, FieldKind::Mask).unwrap();
        let a = solve_eikonal_raw(&speed, &one).unwrap();
        let b = solve_eikonal_raw(&speed, &two).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| y <= x));
    }

    #[test]
    fn sweep_order_does_not_matter_at_convergence() {
        let speed = random_speed(20, 16, 13);
        let seeds = single_seed(20, 16, 15, 4);
        let a = solve_eikonal_with_orders(&speed, &seeds, &DEFAULT_ORDERS).unwrap();
        let b = solve_eikonal_with_orders(
            &speed,
            &seeds,
            &[(false, false), (true, false), (false, true), (true, true)],
        )
        .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-7);
        }
    }
}
