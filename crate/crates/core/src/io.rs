//! Columnar binary container for path batches and CSV export.
//!
//! Layout (all integers `u64`, all reals `f64`, little-endian):
//!
//! ```text
//! magic "QSMPBAT1" | M | N | n | d | k | dt | flags
//! states  M x (N+1) x n
//! controls M x (N+1) x k
//! [Y M x (N+1) | Z M x (N+1) x d]   when flags & 1
//! ```

use std::io::{Read, Write};

use crate::bsde::BackwardSolution;
use crate::error::{Error, Result};
use crate::paths::{ForwardBatch, TimeGrid};

pub const MAGIC: &[u8; 8] = b"QSMPBAT1";

const HAS_BACKWARD: u64 = 1;

/// Contents of a container.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredBatch {
    pub dt: f64,
    pub d: usize,
    pub forward: ForwardBatch,
    /// `(Y, Z)` with the layouts of [`BackwardSolution`].
    pub backward: Option<(Vec<f64>, Vec<f64>)>,
}

fn put_u64(w: &mut impl Write, v: usize) -> Result<()> {
    Ok(w.write_all(&(v as u64).to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn write_batch(
    w: &mut impl Write,
    grid: &TimeGrid,
    d: usize,
    forward: &ForwardBatch,
    backward: Option<&BackwardSolution>,
) -> Result<()> {
    if forward.steps != grid.steps {
        return Err(Error::Dimension("forward batch does not match the grid".into()));
    }
    if let Some(b) = backward {
        if b.paths != forward.paths || b.steps != forward.steps || b.d != d {
            return Err(Error::Dimension("backward solution does not match the forward batch".into()));
        }
    }
    w.write_all(MAGIC)?;
    for v in [forward.paths, forward.steps, forward.n, d, forward.k] {
        put_u64(w, v)?;
    }
    w.write_all(&grid.dt.to_le_bytes())?;
    put_u64(w, if backward.is_some() { HAS_BACKWARD as usize } else { 0 })?;
    put_f64s(w, &forward.states)?;
    put_f64s(w, &forward.controls)?;
    if let Some(b) = backward {
        put_f64s(w, &b.y)?;
        put_f64s(w, &b.z)?;
    }
    Ok(())
}

/// Largest array accepted from a header, in elements.
const MAX_ELEMENTS: u64 = 1 << 33;

pub fn read_batch(r: &mut impl Read) -> Result<StoredBatch> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidProblem("not a path-batch container".into()));
    }
    let mut h = [0u64; 5];
    for v in h.iter_mut() {
        *v = get_u64(r)?;
    }
    let [m, steps, n, d, k] = h;
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let dt = f64::from_le_bytes(b);
    let flags = get_u64(r)?;
    let width = steps.checked_add(1).and_then(|w| w.checked_mul(m));
    let size = |dim: u64| -> Result<usize> {
        width
            .and_then(|w| w.checked_mul(dim))
            .filter(|s| *s <= MAX_ELEMENTS)
            .map(|s| s as usize)
            .ok_or_else(|| Error::InvalidProblem("container header sizes are out of range".into()))
    };
    let states = get_f64s(r, size(n)?)?;
    let controls = get_f64s(r, size(k)?)?;
    let backward = if flags & HAS_BACKWARD != 0 {
        let y = get_f64s(r, size(1)?)?;
        let z = get_f64s(r, size(d)?)?;
        Some((y, z))
    } else {
        None
    };
    let forward =
        ForwardBatch { paths: m as usize, steps: steps as usize, n: n as usize, k: k as usize, states, controls };
    Ok(StoredBatch { dt, d: d as usize, forward, backward })
}

/// `path,step,t,x1..xn,u1..uk[,y]` for every path and grid time.
pub fn forward_csv(grid: &TimeGrid, forward: &ForwardBatch, backward: Option<&BackwardSolution>) -> String {
    let mut s = String::from("path,step,t");
    for r in 1..=forward.n {
        s.push_str(&format!(",x{r}"));
    }
    for r in 1..=forward.k {
        s.push_str(&format!(",u{r}"));
    }
    if backward.is_some() {
        s.push_str(",y");
    }
    s.push('\n');
    for p in 0..forward.paths {
        for i in 0..=forward.steps {
            s.push_str(&format!("{p},{i},{:e}", grid.times[i]));
            for v in forward.state(p, i).iter().chain(forward.control(p, i)) {
                s.push_str(&format!(",{v:e}"));
            }
            if let Some(b) = backward {
                s.push_str(&format!(",{:e}", b.y_at(p, i)));
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_quadratic_bsde, BsdeOptions};
    use crate::families;
    use crate::paths::{simulate_brownian, solve_forward_sde, Control};

    #[test]
    fn round_trip_preserves_every_bit() {
        let spec = families::tanh_family(0.3, 1.0);
        let grid = TimeGrid::new(7, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 50, 3, 0).unwrap();
        let fwd = solve_forward_sde(&spec, &grid, &noise, &Control::constant(vec![0.1])).unwrap();
        let bwd = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_batch(&mut buf, &grid, 1, &fwd, Some(&bwd)).unwrap();
        assert_eq!(buf.len(), 8 + 7 * 8 + 50 * 8 * 8 * 4);
        let back = read_batch(&mut buf.as_slice()).unwrap();
        assert_eq!(back.forward, fwd);
        assert_eq!(back.dt.to_bits(), grid.dt.to_bits());
        let (y, z) = back.backward.unwrap();
        assert_eq!(y, bwd.y);
        assert_eq!(z, bwd.z);

        let mut buf = Vec::new();
        write_batch(&mut buf, &grid, 1, &fwd, None).unwrap();
        assert!(read_batch(&mut buf.as_slice()).unwrap().backward.is_none());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(read_batch(&mut &b"NOTABATCH......."[..]).is_err());
        let mut buf = MAGIC.to_vec();
        for _ in 0..5 {
            buf.extend_from_slice(&u64::MAX.to_le_bytes());
        }
        buf.extend_from_slice(&[0u8; 16]);
        assert!(read_batch(&mut buf.as_slice()).is_err());
        let mut short = MAGIC.to_vec();
        short.extend_from_slice(&[1u8; 20]);
        assert!(read_batch(&mut short.as_slice()).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_node() {
        let spec = families::tanh_family(0.0, 1.0);
        let grid = TimeGrid::new(3, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 2, 1, 0).unwrap();
        let fwd = solve_forward_sde(&spec, &grid, &noise, &Control::constant(vec![0.0])).unwrap();
        let csv = forward_csv(&grid, &fwd, None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "path,step,t,x1,u1");
        assert_eq!(lines.len(), 1 + 2 * 4);
    }
}
