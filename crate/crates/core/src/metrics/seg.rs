use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mask::BinaryMask;

pub const DEFAULT_NSD_TOLERANCE: u32 = 2;

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values().iter()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground pixels with a 4-neighbour outside the foreground (pixels off
/// the image count as background).
pub fn boundary(m: &BinaryMask) -> BinaryMask {
    let (h, w) = m.dim();
    BinaryMask::from_fn(h, w, |r, c| {
        m.get(r, c)
            && (r == 0 || c == 0 || r + 1 == h || c + 1 == w
                || !m.get(r - 1, c)
                || !m.get(r + 1, c)
                || !m.get(r, c - 1)
                || !m.get(r, c + 1))
    })
}

/// Stand-in for "no feature pixel" that keeps the parabola arithmetic finite.
const FAR: f64 = 1e20;

/// One-dimensional squared distance transform: lower envelope of the
/// parabolas `(q − p)² + f[p]`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                v[0] = q;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `m` (infinite when `m` is empty).
pub fn squared_distance_transform(m: &BinaryMask) -> Array2<f64> {
    let (h, w) = m.dim();
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut d = m.values().mapv(|x| if x { 0.0 } else { FAR });
    let mut buf_in = vec![0.0; n];
    let mut buf_out = vec![0.0; n];
    for c in 0..w {
        for r in 0..h {
            buf_in[r] = d[[r, c]];
        }
        edt_1d(&buf_in[..h], &mut buf_out[..h], &mut v, &mut z);
        for r in 0..h {
            d[[r, c]] = buf_out[r];
        }
    }
    for r in 0..h {
        for c in 0..w {
            buf_in[c] = d[[r, c]];
        }
        edt_1d(&buf_in[..w], &mut buf_out[..w], &mut v, &mut z);
        for c in 0..w {
            d[[r, c]] = buf_out[c];
        }
    }
    d.mapv_inplace(|x| if x >= FAR / 2.0 { f64::INFINITY } else { x });
    d
}

/// Normalized surface distance: the share of both boundaries lying within
/// `tolerance_px` (Euclidean) of the other boundary. Two empty masks score
/// 1; exactly one empty mask scores 0.
pub fn nsd(a: &BinaryMask, b: &BinaryMask, tolerance_px: u32) -> Result<f64> {
    a.check_same(b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    let (na, nb) = (ba.count(), bb.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    if na == 0 || nb == 0 {
        return Ok(0.0);
    }
    let tol2 = f64::from(tolerance_px) * f64::from(tolerance_px);
    let (da, db) = (squared_distance_transform(&ba), squared_distance_transform(&bb));
    let mut close = 0usize;
    for ((p, &x), &y) in ba.values().indexed_iter().zip(bb.values().iter()) {
        if x && db[p] <= tol2 {
            close += 1;
        }
        if y && da[p] <= tol2 {
            close += 1;
        }
    }
    Ok(close as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub dsc: f64,
    pub nsd: f64,
    pub tolerance_px: u32,
}

impl SegScore {
    pub fn compute(pred: &BinaryMask, gt: &BinaryMask, tolerance_px: u32) -> Result<Self> {
        Ok(Self {
            dsc: dice(pred, gt)?,
            nsd: nsd(pred, gt, tolerance_px)?,
            tolerance_px,
        })
    }
}

/// Aggregate of per-image scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegSummary {
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub nsd_mean: f64,
    pub nsd_std: f64,
    pub n: usize,
    pub tolerance: u32,
}

impl SegSummary {
    pub fn from_scores(scores: &[SegScore], tolerance: u32) -> Self {
        let dsc: Vec<f64> = scores.iter().map(|s| s.dsc).collect();
        let nsd: Vec<f64> = scores.iter().map(|s| s.nsd).collect();
        let (dsc_mean, dsc_std) = super::mean_std(&dsc);
        let (nsd_mean, nsd_std) = super::mean_std(&nsd);
        Self {
            dsc_mean,
            dsc_std,
            nsd_mean,
            nsd_std,
            n: scores.len(),
            tolerance,
        }
    }
}
