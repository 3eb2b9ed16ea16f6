//! Bit-exact functional execution of duplicated-kernel convolution.
//!
//! The tile memory holds the kernel duplicated `N` times; at shift `a` the IA
//! vector is offset by `a` positions and each enabled block produces one
//! output. Values are exact integers: INT8 operands, INT32 accumulation with
//! checked adds.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{full_schedule, KernelGeometry, ScheduleError, ShiftSchedule, Step};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("input length {got} does not match the schedule contract (expected {expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("accumulator overflow at output {0}")]
    Overflow(u64),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Signed 8-bit tensor in `(channel, row, column)` row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntTensor {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
}

impl IntTensor {
    pub fn new(channels: usize, rows: usize, cols: usize, data: Vec<i8>) -> Result<Self, EngineError> {
        if data.len() != channels * rows * cols {
            return Err(EngineError::ShapeMismatch(format!(
                "{} elements for a {channels}x{rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { channels, rows, cols, data })
    }

    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0; channels * rows * cols],
        }
    }

    pub fn from_fn(channels: usize, rows: usize, cols: usize, mut f: impl FnMut(usize, usize, usize) -> i8) -> Self {
        let mut data = Vec::with_capacity(channels * rows * cols);
        for c in 0..channels {
            for y in 0..rows {
                for x in 0..cols {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, rows, cols, data }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, channels: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(channels, rows, cols, |_, _, _| rng.gen())
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[(c * self.rows + y) * self.cols + x]
    }

    /// Zero outside the stored extent; coordinates may be negative.
    pub fn get_or_zero(&self, c: usize, y: i64, x: i64) -> i8 {
        if y < 0 || x < 0 || y as usize >= self.rows || x as usize >= self.cols {
            0
        } else {
            self.get(c, y as usize, x as usize)
        }
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: i8) {
        self.data[(c * self.rows + y) * self.cols + x] = v;
    }

    /// One channel as a 1-channel tensor.
    pub fn channel(&self, c: usize) -> IntTensor {
        let plane = self.rows * self.cols;
        IntTensor {
            channels: 1,
            rows: self.rows,
            cols: self.cols,
            data: self.data[c * plane..(c + 1) * plane].to_vec(),
        }
    }

    /// Window of channel `c` starting at `(y0, x0)` in coordinates padded by
    /// `pad` on every side. Anything outside the real ifmap reads as zero.
    pub fn padded_window(&self, c: usize, pad: usize, y0: usize, x0: usize, rows: usize, cols: usize) -> IntTensor {
        IntTensor::from_fn(1, rows, cols, |_, y, x| {
            self.get_or_zero(c, (y0 + y) as i64 - pad as i64, (x0 + x) as i64 - pad as i64)
        })
    }
}

/// 32-bit accumulator tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumTensor {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl AccumTensor {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0; channels * rows * cols],
        }
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.rows + y) * self.cols + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> i32 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: i32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }
}

/// Multiplication-enable lines of one step: blocks outside `active` are gated
/// off and contribute nothing to the bitline sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnableMask {
    pub blocks: u64,
    pub active: BTreeSet<u64>,
}

impl EnableMask {
    pub fn none(blocks: u64) -> Self {
        Self { blocks, active: BTreeSet::new() }
    }

    pub fn single(blocks: u64, n: u64) -> Self {
        let mut active = BTreeSet::new();
        if n < blocks {
            active.insert(n);
        }
        Self { blocks, active }
    }

    /// Mask for a step; steps producing outputs at or beyond `limit` are
    /// disabled entirely.
    pub fn for_step(blocks: u64, step: &Step, limit: u64) -> Self {
        if step.m < limit {
            Self::single(blocks, step.n)
        } else {
            Self::none(blocks)
        }
    }

    pub fn is_enabled(&self, n: u64) -> bool {
        self.active.contains(&n)
    }
}

fn mac(acc: i32, w: i8, x: i8, m: u64) -> Result<i32, EngineError> {
    acc.checked_add(i32::from(w) * i32::from(x))
        .ok_or(EngineError::Overflow(m))
}

/// One column's worth of bitline sum: every TM row of an enabled block
/// multiplies its weight with the IA sitting `shift` positions further along.
fn masked_dot_1d(kernel: &[i8], input: &[i8], shift: usize, mask: &EnableMask, m: u64) -> Result<i32, EngineError> {
    let k = kernel.len();
    let mut acc = 0i32;
    for n in 0..mask.blocks as usize {
        if !mask.is_enabled(n as u64) {
            continue;
        }
        for (i, &w) in kernel.iter().enumerate() {
            acc = mac(acc, w, input[i + n * k + shift], m)?;
        }
    }
    Ok(acc)
}

/// 1D convolution via the shift schedule. `input` must hold exactly
/// `N·k + l - 1` IAs.
pub fn conv1d_convdk(input: &[i8], kernel: &[i8], stride: u64, blocks: u64) -> Result<Vec<i32>, EngineError> {
    let geometry = KernelGeometry::new(kernel.len() as u64, stride)?;
    let schedule = full_schedule(geometry, blocks)?;
    let expected = schedule.input_len() as usize;
    if input.len() != expected {
        return Err(EngineError::LengthMismatch { expected, got: input.len() });
    }
    let mut out = vec![0i32; schedule.output_len() as usize];
    for step in &schedule.steps {
        let mask = EnableMask::single(blocks, step.n);
        out[step.m as usize] = masked_dot_1d(kernel, input, step.a as usize, &mask, step.m)?;
    }
    Ok(out)
}

/// Valid-mode strided 1D convolution.
pub fn reference_conv1d(input: &[i8], kernel: &[i8], stride: u64) -> Result<Vec<i32>, EngineError> {
    let k = kernel.len();
    if k == 0 || stride == 0 {
        return Err(EngineError::ShapeMismatch("empty kernel or zero stride".into()));
    }
    if input.len() < k {
        return Err(EngineError::LengthMismatch { expected: k, got: input.len() });
    }
    let s = stride as usize;
    (0..=(input.len() - k) / s)
        .map(|m| {
            kernel.iter().enumerate().try_fold(0i32, |acc, (i, &w)| mac(acc, w, input[m * s + i], m as u64))
        })
        .collect()
}

/// Output of one tile step for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub channel: usize,
    pub m: u64,
    pub value: i32,
}

fn check_tile_shapes(submap: &IntTensor, kernel: &IntTensor, schedule: &ShiftSchedule, h: u64) -> Result<(), EngineError> {
    let g = schedule.geometry();
    if submap.channels != 1 || kernel.channels != 1 {
        return Err(EngineError::ShapeMismatch("tile operands must be single-channel".into()));
    }
    if kernel.cols as u64 != g.k {
        return Err(EngineError::ShapeMismatch(format!(
            "kernel width {} does not match schedule k={}",
            kernel.cols, g.k
        )));
    }
    if submap.cols as u64 != schedule.input_len() {
        return Err(EngineError::ShapeMismatch(format!(
            "sub-map width {} does not match schedule contract {}",
            submap.cols,
            schedule.input_len()
        )));
    }
    let needed = g.s * h + kernel.rows as u64;
    if (submap.rows as u64) < needed {
        return Err(EngineError::ShapeMismatch(format!(
            "sub-map has {} rows, output row {h} needs {needed}",
            submap.rows
        )));
    }
    Ok(())
}

fn tile_step_value(
    submap: &IntTensor,
    kernel: &IntTensor,
    step: &Step,
    mask: &EnableMask,
    row0: usize,
) -> Result<i32, EngineError> {
    let kw = kernel.cols;
    let mut acc = 0i32;
    for n in 0..mask.blocks as usize {
        if !mask.is_enabled(n as u64) {
            continue;
        }
        for j in 0..kernel.rows {
            for i in 0..kw {
                let x = submap.get(0, row0 + j, i + n * kw + step.a as usize);
                acc = mac(acc, kernel.get(0, j, i), x, step.m)?;
            }
        }
    }
    Ok(acc)
}

/// All outputs of output row `h` for one channel resident in a tile.
///
/// `submap` is a full-height column strip exactly `N·k_w + l - 1` wide.
pub fn dwconv_tile(submap: &IntTensor, kernel: &IntTensor, schedule: &ShiftSchedule, h: u64) -> Result<Vec<(u64, i32)>, EngineError> {
    dwconv_tile_masked(submap, kernel, schedule, h, schedule.output_len())
}

/// As [`dwconv_tile`], with steps producing `m >= limit` disabled.
pub fn dwconv_tile_masked(
    submap: &IntTensor,
    kernel: &IntTensor,
    schedule: &ShiftSchedule,
    h: u64,
    limit: u64,
) -> Result<Vec<(u64, i32)>, EngineError> {
    check_tile_shapes(submap, kernel, schedule, h)?;
    let row0 = (schedule.geometry().s * h) as usize;
    let mut out = Vec::with_capacity(schedule.steps.len());
    for step in &schedule.steps {
        let mask = EnableMask::for_step(schedule.blocks, step, limit);
        if mask.active.is_empty() {
            continue;
        }
        out.push((step.m, tile_step_value(submap, kernel, step, &mask, row0)?));
    }
    Ok(out)
}

/// Several channels sharing one tile. The channel loop sits inside the
/// shift/block loops, so consecutive emissions of a step walk the channels.
pub fn dwconv_multichannel(
    submaps: &[IntTensor],
    kernels: &[IntTensor],
    schedule: &ShiftSchedule,
    h: u64,
) -> Result<Vec<Emission>, EngineError> {
    dwconv_multichannel_masked(submaps, kernels, schedule, h, schedule.output_len())
}

pub fn dwconv_multichannel_masked(
    submaps: &[IntTensor],
    kernels: &[IntTensor],
    schedule: &ShiftSchedule,
    h: u64,
    limit: u64,
) -> Result<Vec<Emission>, EngineError> {
    if submaps.len() != kernels.len() {
        return Err(EngineError::ShapeMismatch(format!(
            "{} sub-maps for {} kernels",
            submaps.len(),
            kernels.len()
        )));
    }
    let Some(first) = kernels.first() else {
        return Ok(Vec::new());
    };
    for (sm, k) in submaps.iter().zip(kernels) {
        if k.rows != first.rows || k.cols != first.cols {
            return Err(EngineError::ShapeMismatch("channels in one tile must share the kernel shape".into()));
        }
        check_tile_shapes(sm, k, schedule, h)?;
    }
    let row0 = (schedule.geometry().s * h) as usize;
    let mut out = Vec::with_capacity(schedule.steps.len() * kernels.len());
    for step in &schedule.steps {
        let mask = EnableMask::for_step(schedule.blocks, step, limit);
        if mask.active.is_empty() {
            continue;
        }
        for (c, (sm, k)) in submaps.iter().zip(kernels).enumerate() {
            out.push(Emission {
                channel: c,
                m: step.m,
                value: tile_step_value(sm, k, step, &mask, row0)?,
            });
        }
    }
    Ok(out)
}

/// Output extent of a strided convolution along one axis.
pub fn conv_out_len(input: usize, pad: usize, k: usize, s: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= k && s > 0).then(|| (padded - k) / s + 1)
}

/// Direct depthwise convolution.
pub fn reference_dwconv(ifmap: &IntTensor, kernels: &IntTensor, stride: usize, padding: usize) -> Result<AccumTensor, EngineError> {
    if kernels.channels != ifmap.channels {
        return Err(EngineError::ShapeMismatch(format!(
            "{} kernels for {} channels",
            kernels.channels, ifmap.channels
        )));
    }
    let (kh, kw) = (kernels.rows, kernels.cols);
    let (Some(ho), Some(wo)) = (
        conv_out_len(ifmap.rows, padding, kh, stride),
        conv_out_len(ifmap.cols, padding, kw, stride),
    ) else {
        return Err(EngineError::ShapeMismatch("kernel larger than padded ifmap".into()));
    };
    let mut out = AccumTensor::zeros(ifmap.channels, ho, wo);
    for c in 0..ifmap.channels {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0i32;
                for j in 0..kh {
                    for i in 0..kw {
                        let v = ifmap.get_or_zero(
                            c,
                            (y * stride + j) as i64 - padding as i64,
                            (x * stride + i) as i64 - padding as i64,
                        );
                        acc = mac(acc, kernels.get(c, j, i), v, (y * wo + x) as u64)?;
                    }
                }
                out.set(c, y, x, acc);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched(k: u64, s: u64, n: u64) -> ShiftSchedule {
        full_schedule(KernelGeometry::new(k, s).unwrap(), n).unwrap()
    }

    /// Independent naive depthwise convolution: pads explicitly first.
    fn naive_dwconv(ifmap: &IntTensor, kernels: &IntTensor, s: usize, p: usize) -> Vec<i32> {
        let (h, w) = (ifmap.rows + 2 * p, ifmap.cols + 2 * p);
        let mut out = Vec::new();
        for c in 0..ifmap.channels {
            let mut padded = vec![vec![0i32; w]; h];
            for y in 0..ifmap.rows {
                for x in 0..ifmap.cols {
                    padded[y + p][x + p] = ifmap.get(c, y, x) as i32;
                }
            }
            let mut y = 0;
            while y + kernels.rows <= h {
                let mut x = 0;
                while x + kernels.cols <= w {
                    let mut acc = 0;
                    for j in 0..kernels.rows {
                        for i in 0..kernels.cols {
                            acc += padded[y + j][x + i] * kernels.get(c, j, i) as i32;
                        }
                    }
                    out.push(acc);
                    x += s;
                }
                y += s;
            }
        }
        out
    }

    #[test]
    fn conv1d_all_ones() {
        let z = conv1d_convdk(&[1; 8], &[1, 1, 1], 1, 2).unwrap();
        assert_eq!(z, vec![3; 6]);
    }

    #[test]
    fn conv1d_identity_tap() {
        let input: Vec<i8> = (0..8).collect();
        let z = conv1d_convdk(&input, &[1, 0, 0], 1, 2).unwrap();
        assert_eq!(z, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn conv1d_rejects_wrong_length() {
        assert_eq!(
            conv1d_convdk(&[1; 7], &[1, 1, 1], 1, 2),
            Err(EngineError::LengthMismatch { expected: 8, got: 7 })
        );
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        assert!(matches!(
            conv1d_convdk(&[1; 5], &[1, 1], 1, 2),
            Err(EngineError::Schedule(ScheduleError::ConditionViolation { .. }))
        ));
    }

    #[test]
    fn reference_conv1d_examples() {
        assert_eq!(reference_conv1d(&[1, 2, 3], &[1, 1, 1], 1).unwrap(), vec![6]);
        assert_eq!(reference_conv1d(&[1, 2, 3, 4, 5], &[1, 0, -1], 2).unwrap(), vec![-2, -2]);
        assert!(matches!(reference_conv1d(&[1, 2], &[1, 1, 1], 1), Err(EngineError::LengthMismatch { .. })));
    }

    #[test]
    fn conv1d_random_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, s) in [(3u64, 1u64), (3, 2), (5, 2), (5, 3), (7, 2)] {
            for _ in 0..200 {
                let n = rng.gen_range(1..=12u64);
                let l = sched(k, s, n).params.l;
                let input: Vec<i8> = (0..n * k + l - 1).map(|_| rng.gen()).collect();
                let kernel: Vec<i8> = (0..k).map(|_| rng.gen()).collect();
                let z = conv1d_convdk(&input, &kernel, s, n).unwrap();
                let r = reference_conv1d(&input, &kernel, s).unwrap();
                assert_eq!(z[..], r[..z.len()], "k={k} s={s} n={n}");
            }
        }
    }

    #[test]
    fn tile_all_ones() {
        let sc = sched(3, 1, 2);
        let sub = IntTensor::from_fn(1, 3, 8, |_, _, _| 1);
        let ker = IntTensor::from_fn(1, 3, 3, |_, _, _| 1);
        let out = dwconv_tile(&sub, &ker, &sc, 0).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|&(_, v)| v == 9));
    }

    #[test]
    fn tile_rejects_even_kernel_geometry() {
        let r = full_schedule(KernelGeometry::new(2, 1).unwrap(), 2);
        assert!(matches!(r, Err(ScheduleError::ConditionViolation { .. })));
    }

    #[test]
    fn tile_shape_checks() {
        let sc = sched(3, 1, 2);
        let ker = IntTensor::zeros(1, 3, 3);
        assert!(dwconv_tile(&IntTensor::zeros(1, 3, 7), &ker, &sc, 0).is_err());
        assert!(dwconv_tile(&IntTensor::zeros(1, 3, 8), &ker, &sc, 1).is_err());
        assert!(dwconv_tile(&IntTensor::zeros(1, 4, 8), &ker, &sc, 1).is_ok());
    }

    #[test]
    fn tile_rows_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, s) in [(3usize, 1usize), (3, 2), (5, 2)] {
            let n = 3u64;
            let sc = sched(k as u64, s as u64, n);
            let width = sc.input_len() as usize;
            let rows = k + 4 * s;
            let sub = IntTensor::random(&mut rng, 1, rows, width);
            let ker = IntTensor::random(&mut rng, 1, k, k);
            let reference = reference_dwconv(&sub, &ker, s, 0).unwrap();
            for h in 0..reference.rows {
                for (m, v) in dwconv_tile(&sub, &ker, &sc, h as u64).unwrap() {
                    assert_eq!(v, reference.get(0, h, m as usize));
                }
            }
        }
    }

    #[test]
    fn multichannel_single_equals_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sc = sched(3, 2, 4);
        let sub = IntTensor::random(&mut rng, 1, 5, sc.input_len() as usize);
        let ker = IntTensor::random(&mut rng, 1, 3, 3);
        let single = dwconv_tile(&sub, &ker, &sc, 1).unwrap();
        let multi = dwconv_multichannel(&[sub], &[ker], &sc, 1).unwrap();
        let flat: Vec<_> = multi.iter().map(|e| (e.m, e.value)).collect();
        assert_eq!(single, flat);
    }

    #[test]
    fn multichannel_interleaves_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sc = sched(3, 1, 7);
        let subs: Vec<_> = (0..2).map(|_| IntTensor::random(&mut rng, 1, 3, sc.input_len() as usize)).collect();
        let kers: Vec<_> = (0..2).map(|_| IntTensor::random(&mut rng, 1, 3, 3)).collect();
        let em = dwconv_multichannel(&subs, &kers, &sc, 0).unwrap();
        for pair in em.chunks(2) {
            assert_eq!((pair[0].channel, pair[1].channel), (0, 1));
            assert_eq!(pair[0].m, pair[1].m);
        }
        for c in 0..2 {
            let reference = reference_dwconv(&subs[c], &kers[c], 1, 0).unwrap();
            for e in em.iter().filter(|e| e.channel == c) {
                assert_eq!(e.value, reference.get(0, 0, e.m as usize));
            }
        }
    }

    #[test]
    fn masked_steps_are_skipped() {
        let sc = sched(3, 1, 2);
        let sub = IntTensor::from_fn(1, 3, 8, |_, _, _| 1);
        let ker = IntTensor::from_fn(1, 3, 3, |_, _, _| 1);
        let out = dwconv_tile_masked(&sub, &ker, &sc, 0, 4).unwrap();
        let ms: BTreeSet<_> = out.iter().map(|&(m, _)| m).collect();
        assert_eq!(ms, (0..4).collect());
    }

    #[test]
    fn reference_dwconv_examples() {
        let ones = IntTensor::from_fn(1, 3, 3, |_, _, _| 1);
        let r = reference_dwconv(&ones, &ones, 1, 0).unwrap();
        assert_eq!((r.rows, r.cols, r.data.clone()), (1, 1, vec![9]));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = IntTensor::random(&mut rng, 2, 5, 6);
        let ident = IntTensor::from_fn(2, 3, 3, |_, y, x| (y == 1 && x == 1) as i8);
        let r = reference_dwconv(&x, &ident, 1, 1).unwrap();
        assert_eq!(r.data, x.data.iter().map(|&v| v as i32).collect::<Vec<_>>());

        assert!(reference_dwconv(&x, &ones, 1, 0).is_err());
    }

    #[test]
    fn reference_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let k = [1usize, 3, 5, 7][rng.gen_range(0..4)];
            let s = rng.gen_range(1..=3);
            let p = rng.gen_range(0..=k / 2);
            let (h, w) = (rng.gen_range(k..12), rng.gen_range(k..12));
            let c = rng.gen_range(1..4);
            let x = IntTensor::random(&mut rng, c, h, w);
            let ker = IntTensor::random(&mut rng, c, k, k);
            assert_eq!(reference_dwconv(&x, &ker, s, p).unwrap().data, naive_dwconv(&x, &ker, s, p));
        }
    }

    #[test]
    fn worst_case_accumulation_fits() {
        // 180 products of -128 * -128 stays inside i32.
        let input = vec![-128i8; 180];
        let kernel = vec![-128i8; 179];
        let z = reference_conv1d(&input, &kernel, 1).unwrap();
        assert_eq!(z[0], 179 * 16384);
    }
}
