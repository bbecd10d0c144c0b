//! Count-mean and count-median-of-means sketches.
//!
//! A sketch has `rows` independent count-mean sketches. Each one stacks `pads`
//! count sketches of width `cols`, scaled by `1/sqrt(pads)`. With one row the
//! unsketch `S^T S` is unbiased. With several rows the unsketch takes the
//! coordinatewise median of the per-row estimates.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::mix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SketchParams {
    rows: usize,
    pads: usize,
    cols: usize,
    dim: usize,
}

impl SketchParams {
    pub fn new(rows: usize, pads: usize, cols: usize, dim: usize) -> Result<Self> {
        if rows == 0 || pads == 0 || cols == 0 || dim == 0 {
            return Err(Error::InvalidSketchParams(format!(
                "rows, pads, cols and dim must all be >= 1 (got {rows}, {pads}, {cols}, {dim})"
            )));
        }
        if cols > (u32::MAX >> 1) as usize || dim > u32::MAX as usize {
            return Err(Error::InvalidSketchParams(format!(
                "cols={cols} or dim={dim} too large"
            )));
        }
        rows.checked_mul(pads)
            .and_then(|x| x.checked_mul(cols))
            .ok_or_else(|| Error::InvalidSketchParams("sketch length overflows".into()))?;
        Ok(Self { rows, pads, cols, dim })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pads(&self) -> usize {
        self.pads
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Scalars in one row, `pads * cols`.
    pub fn row_len(&self) -> usize {
        self.pads * self.cols
    }

    /// Total scalars a client sends, `rows * pads * cols`.
    pub fn len(&self) -> usize {
        self.rows * self.row_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Keyed hash of `(seed, row, pad, coord)`. The low bit gives the sign, the
/// rest gives the bucket.
#[inline]
pub fn slot_hash(seed: u64, row: usize, pad: usize, coord: usize) -> u64 {
    coord_hash(pad_key(seed, row, pad), coord)
}

#[inline]
fn pad_key(seed: u64, row: usize, pad: usize) -> u64 {
    let a = mix64(seed ^ 0x5851_F42D_4C95_7F2D);
    let b = mix64(a ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    mix64(b ^ (pad as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

#[inline]
fn coord_hash(key: u64, coord: usize) -> u64 {
    mix64(key ^ (coord as u64).wrapping_add(0x8CB9_2BA7_2F3D_8DD7))
}

#[inline]
fn bucket_of(h: u64, cols: usize) -> usize {
    (((h >> 1) as u128 * cols as u128) >> 63) as usize
}

#[inline]
fn sign_of(h: u64) -> f64 {
    if h & 1 == 1 {
        -1.0
    } else {
        1.0
    }
}

#[inline]
fn decode_slot(s: u32) -> (usize, f64) {
    ((s >> 1) as usize, if s & 1 == 1 { -1.0 } else { 1.0 })
}

/// A sketched message: `rows` rows of `pads * cols` scalars, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchedVector {
    params: SketchParams,
    data: Vec<f64>,
}

impl SketchedVector {
    pub fn zeros(params: SketchParams) -> Self {
        Self {
            params,
            data: vec![0.0; params.len()],
        }
    }

    pub fn from_data(params: SketchParams, data: Vec<f64>) -> Result<Self> {
        if data.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: data.len(),
            });
        }
        Ok(Self { params, data })
    }

    pub fn params(&self) -> SketchParams {
        self.params
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.params.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.params.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        l2_norm(self.row(i))
    }

    /// Clips each row to norm at most `bound`.
    pub fn clip_rows(&mut self, bound: f64) -> Result<()> {
        check_bound(bound)?;
        for i in 0..self.params.rows {
            let row = self.row_mut(i);
            let f = clip_factor(l2_norm(row), bound);
            if f < 1.0 {
                row.iter_mut().for_each(|x| *x *= f);
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &SketchedVector) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    /// Adds i.i.d. `N(0, std^2)` to every entry. A zero `std` draws nothing.
    pub fn add_gaussian<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        if std == 0.0 {
            return;
        }
        for x in &mut self.data {
            let g: f64 = StandardNormal.sample(rng);
            *x += std * g;
        }
    }

    pub fn distance(&self, other: &SketchedVector) -> Result<f64> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    fn check_same(&self, other: &SketchedVector) -> Result<()> {
        if self.params != other.params {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: other.params.len(),
            });
        }
        Ok(())
    }
}

/// Reusable buffers for [`SketchOperator::accumulate_clipped`].
#[derive(Debug, Default)]
pub struct Scratch {
    vals: Vec<f64>,
    mark: Vec<bool>,
    touched: Vec<usize>,
    nonzeros: Vec<(usize, f64)>,
}

/// Hash functions for one sketch. Buckets and signs are a pure function of
/// `(seed, row, pad, coord)`; the table is a cache of those values.
#[derive(Debug, Clone)]
pub struct SketchOperator {
    params: SketchParams,
    seed: u64,
    // bucket << 1 | negative, laid out as [coord][row][pad]
    slots: Vec<u32>,
    inv_sqrt_pads: f64,
}

impl SketchOperator {
    pub fn new(params: SketchParams, seed: u64) -> Self {
        let d = params.dim;
        let per_coord = params.rows * params.pads;
        let keys: Vec<u64> = (0..params.rows)
            .flat_map(|row| (0..params.pads).map(move |pad| pad_key(seed, row, pad)))
            .collect();
        let mut slots = Vec::with_capacity(per_coord * d);
        for q in 0..d {
            slots.extend(keys.iter().map(|&key| {
                let h = coord_hash(key, q);
                ((bucket_of(h, params.cols) as u32) << 1) | (h & 1) as u32
            }));
        }
        Self {
            params,
            seed,
            slots,
            inv_sqrt_pads: 1.0 / (params.pads as f64).sqrt(),
        }
    }

    pub fn params(&self) -> SketchParams {
        self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_slot(&self, row: usize, pad: usize, coord: usize) -> Result<()> {
        let p = &self.params;
        for (what, index, bound) in [
            ("row", row, p.rows),
            ("pad", pad, p.pads),
            ("coordinate", coord, p.dim),
        ] {
            if index >= bound {
                return Err(Error::IndexOutOfRange { what, index, bound });
            }
        }
        Ok(())
    }

    pub fn hash_bucket(&self, row: usize, pad: usize, coord: usize) -> Result<usize> {
        self.check_slot(row, pad, coord)?;
        Ok(bucket_of(
            slot_hash(self.seed, row, pad, coord),
            self.params.cols,
        ))
    }

    pub fn hash_sign(&self, row: usize, pad: usize, coord: usize) -> Result<f64> {
        self.check_slot(row, pad, coord)?;
        Ok(sign_of(slot_hash(self.seed, row, pad, coord)))
    }

    #[cfg(test)]
    fn slot(&self, row: usize, pad: usize, coord: usize) -> (usize, f64) {
        decode_slot(self.slots[(coord * self.params.rows + row) * self.params.pads + pad])
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.params.dim {
            return Err(Error::DimensionMismatch {
                expected: self.params.dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    pub fn sketch(&self, z: &[f64]) -> Result<SketchedVector> {
        self.check_dim(z)?;
        let p = self.params;
        let mut out = SketchedVector::zeros(p);
        let w = p.row_len();
        let per_coord = p.rows * p.pads;
        let dst = out.as_mut_slice();
        for (q, &x) in z.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let slots = &self.slots[q * per_coord..(q + 1) * per_coord];
            for (row, row_slots) in slots.chunks_exact(p.pads).enumerate() {
                for (pad, &slot) in row_slots.iter().enumerate() {
                    let (b, s) = decode_slot(slot);
                    dst[row * w + pad * p.cols + b] += s * x;
                }
            }
        }
        out.scale(self.inv_sqrt_pads);
        Ok(out)
    }

    /// The client message: the sketch of `z` with each row clipped to `bound`.
    pub fn client_message(&self, z: &[f64], bound: f64) -> Result<SketchedVector> {
        let mut m = self.sketch(z)?;
        m.clip_rows(bound)?;
        Ok(m)
    }

    /// Adds `weight * client_message(z, bound)` into `acc` without
    /// materializing the message. Cost is proportional to the nonzeros of `z`.
    pub fn accumulate_clipped(
        &self,
        z: &[f64],
        bound: f64,
        weight: f64,
        acc: &mut SketchedVector,
        scratch: &mut Scratch,
    ) -> Result<()> {
        self.check_dim(z)?;
        check_bound(bound)?;
        let p = self.params;
        if acc.params != p {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: acc.params.len(),
            });
        }
        let w = p.row_len();
        if scratch.vals.len() != w {
            scratch.vals = vec![0.0; w];
            scratch.mark = vec![false; w];
        }
        scratch.nonzeros.clear();
        scratch
            .nonzeros
            .extend(z.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(q, &x)| (q, x)));

        let per_coord = p.rows * p.pads;
        for row in 0..p.rows {
            scratch.touched.clear();
            for &(q, x) in &scratch.nonzeros {
                let base = q * per_coord + row * p.pads;
                for (pad, &slot) in self.slots[base..base + p.pads].iter().enumerate() {
                    let (b, s) = decode_slot(slot);
                    let idx = pad * p.cols + b;
                    if !scratch.mark[idx] {
                        scratch.mark[idx] = true;
                        scratch.touched.push(idx);
                    }
                    scratch.vals[idx] += s * x;
                }
            }
            let mut sq = 0.0;
            for &idx in &scratch.touched {
                let v = scratch.vals[idx] * self.inv_sqrt_pads;
                scratch.vals[idx] = v;
                sq += v * v;
            }
            let f = weight * clip_factor(sq.sqrt(), bound);
            let dst = acc.row_mut(row);
            for &idx in &scratch.touched {
                dst[idx] += f * scratch.vals[idx];
                scratch.vals[idx] = 0.0;
                scratch.mark[idx] = false;
            }
        }
        Ok(())
    }

    fn check_sketched(&self, s: &SketchedVector) -> Result<()> {
        if s.params != self.params {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: s.params.len(),
            });
        }
        Ok(())
    }

    fn row_estimate_into(&self, s: &SketchedVector, row: usize, est: &mut [f64]) {
        let p = self.params;
        let src = s.row(row);
        let per_coord = p.rows * p.pads;
        for (q, e) in est.iter_mut().enumerate() {
            let base = q * per_coord + row * p.pads;
            let mut acc = 0.0;
            for (pad, &slot) in self.slots[base..base + p.pads].iter().enumerate() {
                let (b, sign) = decode_slot(slot);
                acc += sign * src[pad * p.cols + b];
            }
            *e = acc * self.inv_sqrt_pads;
        }
    }

    /// `S_i^T` applied to row `row` of `s`.
    pub fn unsketch_row(&self, s: &SketchedVector, row: usize) -> Result<Vec<f64>> {
        self.check_sketched(s)?;
        if row >= self.params.rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: row,
                bound: self.params.rows,
            });
        }
        let mut est = vec![0.0; self.params.dim];
        self.row_estimate_into(s, row, &mut est);
        Ok(est)
    }

    /// Coordinatewise median of the per-row estimates. For an even number of
    /// rows the two central values are averaged.
    pub fn unsketch_median(&self, s: &SketchedVector) -> Result<Vec<f64>> {
        self.check_sketched(s)?;
        let p = self.params;
        if p.rows == 1 {
            return self.unsketch_row(s, 0);
        }
        let d = p.dim;
        let mut per_row = vec![0.0; p.rows * d];
        for (row, est) in per_row.chunks_mut(d).enumerate() {
            self.row_estimate_into(s, row, est);
        }
        let mut buf = vec![0.0; p.rows];
        Ok((0..d)
            .map(|q| {
                for (r, b) in buf.iter_mut().enumerate() {
                    *b = per_row[r * d + q];
                }
                median_in_place(&mut buf)
            })
            .collect())
    }
}

/// Median of a nonempty slice. Reorders the slice.
pub fn median_in_place(xs: &mut [f64]) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_bound(bound: f64) -> Result<()> {
    if bound > 0.0 && bound.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidClipBound(bound))
    }
}

#[inline]
fn clip_factor(norm: f64, bound: f64) -> f64 {
    if norm > bound {
        bound / norm
    } else {
        1.0
    }
}

/// `v * min(1, bound / |v|)`.
pub fn clip(v: &[f64], bound: f64) -> Result<Vec<f64>> {
    check_bound(bound)?;
    let f = clip_factor(l2_norm(v), bound);
    Ok(v.iter().map(|x| x * f).collect())
}

/// Scalar version of [`clip`]: `min(x, bound)` for a nonnegative norm.
pub fn clip_norm(x: f64, bound: f64) -> f64 {
    x.min(bound)
}

/// Keeps the `k` largest-magnitude entries, ties broken toward the lower
/// index, and zeroes the rest.
pub fn top_k(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let d = v.len();
    if k > d {
        return Err(Error::InvalidTopK { k, d });
    }
    if k == d {
        return Ok(v.to_vec());
    }
    let mut out = vec![0.0; d];
    if k == 0 {
        return Ok(out);
    }
    let mut idx: Vec<usize> = (0..d).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| {
        v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b))
    });
    for &i in &idx[..k] {
        out[i] = v[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(rows: usize, pads: usize, cols: usize, dim: usize, seed: u64) -> SketchOperator {
        SketchOperator::new(SketchParams::new(rows, pads, cols, dim).unwrap(), seed)
    }

    #[test]
    fn single_cell_roundtrip_is_exact() {
        let o = op(1, 1, 1, 1, 3);
        let s = o.sketch(&[2.5]).unwrap();
        assert_eq!(s.as_slice()[0].abs(), 2.5);
        assert_eq!(o.unsketch_median(&s).unwrap(), vec![2.5]);
    }

    #[test]
    fn table_agrees_with_pure_hash() {
        let o = op(3, 4, 7, 50, 11);
        for r in 0..3 {
            for p in 0..4 {
                for q in 0..50 {
                    let (b, s) = o.slot(r, p, q);
                    assert_eq!(b, o.hash_bucket(r, p, q).unwrap());
                    assert_eq!(s, o.hash_sign(r, p, q).unwrap());
                    assert!(b < 7);
                }
            }
        }
    }

    #[test]
    fn out_of_range_slots_are_rejected() {
        let o = op(2, 2, 4, 8, 0);
        assert!(matches!(
            o.hash_bucket(2, 0, 0),
            Err(Error::IndexOutOfRange { what: "row", .. })
        ));
        assert!(o.hash_sign(0, 2, 0).is_err());
        assert!(o.hash_bucket(0, 0, 8).is_err());
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(SketchParams::new(0, 1, 1, 1).is_err());
        assert!(SketchParams::new(1, 1, 0, 1).is_err());
        assert!(SketchParams::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn wrong_length_input_is_rejected() {
        let o = op(1, 2, 4, 8, 0);
        assert!(matches!(
            o.sketch(&[0.0; 7]),
            Err(Error::DimensionMismatch { expected: 8, got: 7 })
        ));
    }

    #[test]
    fn even_row_median_averages_middle_pair() {
        assert_eq!(median_in_place(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median_in_place(&mut [5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn top_k_breaks_ties_toward_lower_index() {
        let v = [1.0, -3.0, 3.0, 2.0, -3.0];
        assert_eq!(top_k(&v, 2).unwrap(), vec![0.0, -3.0, 3.0, 0.0, 0.0]);
        assert_eq!(top_k(&v, 0).unwrap(), vec![0.0; 5]);
        assert_eq!(top_k(&v, 5).unwrap(), v.to_vec());
        assert!(matches!(top_k(&v, 6), Err(Error::InvalidTopK { k: 6, d: 5 })));
    }

    #[test]
    fn clip_scales_to_bound() {
        let c = clip(&[3.0, 4.0], 1.0).unwrap();
        assert!((l2_norm(&c) - 1.0).abs() < 1e-15);
        assert_eq!(clip(&[0.3, 0.4], 1.0).unwrap(), vec![0.3, 0.4]);
        assert!(clip(&[1.0], 0.0).is_err());
        assert!(clip(&[1.0], -1.0).is_err());
    }

    #[test]
    fn accumulate_matches_dense_messages() {
        let o = op(3, 4, 5, 40, 9);
        let zs: Vec<Vec<f64>> = (0..6)
            .map(|c| (0..40).map(|q| ((c * 7 + q * 3) % 11) as f64 - 5.0).collect())
            .collect();
        let mut acc = SketchedVector::zeros(o.params());
        let mut dense = SketchedVector::zeros(o.params());
        let mut scratch = Scratch::default();
        for z in &zs {
            o.accumulate_clipped(z, 4.0, 1.0, &mut acc, &mut scratch).unwrap();
            dense.add_assign(&o.client_message(z, 4.0).unwrap()).unwrap();
        }
        for (a, b) in acc.as_slice().iter().zip(dense.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
