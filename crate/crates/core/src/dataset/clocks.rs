use crate::error::{Error, Result};

/// Line-change index `p`, global clock `gc` and local clock `lc` per step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClockVectors {
    pub p: Vec<usize>,
    pub gc: Vec<usize>,
    pub lc: Vec<usize>,
}

/// Clocks from the line-of-therapy label at each step. A change at `t = 0`
/// is not counted.
pub fn compute_clocks(lines: &[i64]) -> Result<ClockVectors> {
    if lines.is_empty() {
        return Err(Error::invalid("compute_clocks: empty line sequence"));
    }
    let mut p = Vec::with_capacity(lines.len());
    let mut last = 0;
    for t in 0..lines.len() {
        if t > 0 && lines[t] != lines[t - 1] {
            last = t;
        }
        p.push(last);
    }
    let gc: Vec<usize> = (0..lines.len()).collect();
    let lc = gc.iter().zip(&p).map(|(t, p)| t - p).collect();
    Ok(ClockVectors { p, gc, lc })
}
