//! Run-length encoding of binary masks: `[start, length]` pairs over the
//! row-major pixel order, one pair per run of foreground pixels.

use selseg_core::ScalarField;

pub type Run = [usize; 2];

pub fn encode(mask: &ScalarField) -> Vec<Run> {
    encode_bits(mask.data().iter().map(|v| *v > 0.5))
}

pub fn encode_bits(bits: impl IntoIterator<Item = bool>) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    let mut open: Option<usize> = None;
    let mut n = 0;
    for (i, on) in bits.into_iter().enumerate() {
        match (on, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                runs.push([s, i - s]);
                open = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = open {
        runs.push([s, n - s]);
    }
    runs
}

/// Expands runs over `len` pixels; runs must be nonempty, in order, disjoint
/// and in range.
pub fn decode(runs: &[Run], len: usize) -> Result<Vec<bool>, String> {
    let mut out = vec![false; len];
    let mut next = 0;
    for &[start, run] in runs {
        if run == 0 || start < next || start.checked_add(run).is_none_or(|end| end > len) {
            return Err(format!("bad run [{start}, {run}] for {len} pixels"));
        }
        out[start..start + run].fill(true);
        next = start + run;
    }
    Ok(out)
}

pub fn population(runs: &[Run]) -> usize {
    runs.iter().map(|r| r[1]).sum()
}
