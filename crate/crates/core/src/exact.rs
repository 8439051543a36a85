//! Exact accumulation of `f64` values.
//!
//! [`ExactSum`] keeps every bit of every addend in a fixed-point register wide
//! enough to cover the whole binary64 range, so addition is associative and
//! commutative. Rounding to `f64` happens once, in [`ExactSum::round`], with
//! round-half-to-even. Any partition of a set of addends, merged in any order,
//! rounds to the same bits. The gradient all-reduce and the batch-norm
//! statistics depend on that.

use std::cell::RefCell;

/// Bits of digit stored per limb. Limbs are `i64`, leaving 31 bits of carry room.
const LIMB_BITS: u32 = 32;
const LIMB_MASK: i64 = (1 << LIMB_BITS) - 1;
/// Bit 0 of limb 0 has weight 2^-1074 (the smallest subnormal). The largest
/// finite addend reaches bit 2098; one extra limb absorbs carries.
const LIMBS: usize = 67;
/// Normalize before the carry room of any limb could run out.
const PENDING_LIMIT: u32 = 1 << 30;
/// Stack buffer size for rounding windows that fit.
const SMALL_WINDOW: usize = 16;
/// Shorter product runs are deposited one by one.
const BUCKET_MIN_LEN: usize = 64;
/// Products summed per bucket before the buckets are flushed.
const BUCKET_RUN: usize = 1024;
/// Binary exponents per bucket.
const GROUP_BITS: u32 = 5;
const GROUPS: usize = 0x800 >> GROUP_BITS;
/// Heads are multiples of `2^HEAD_SHIFT` times the group's base ulp.
const HEAD_SHIFT: u32 = 41;
/// Exponent fields at or above this go straight to the limbs: their bucket
/// sums could overflow, and the top field holds infinities and NaN.
const DIRECT_EXPONENT: usize = 0x7ff - 11;
/// Independent bucket sets, so consecutive products do not wait on each other.
const LANES: usize = 4;

type LaneSums = [[f64; 2 * GROUPS]; LANES];

thread_local! {
    /// All zero between calls.
    static LANE_SUMS: RefCell<LaneSums> = const { RefCell::new([[0.0; 2 * GROUPS]; LANES]) };
}

const FRAC_MASK: u64 = (1 << 52) - 1;

const FLAG_NAN: u8 = 1;
const FLAG_POS_INF: u8 = 2;
const FLAG_NEG_INF: u8 = 4;

#[derive(Clone)]
pub struct ExactSum {
    limbs: [i64; LIMBS],
    /// Limbs outside `lo..=hi` are zero; `lo > hi` when nothing was added.
    lo: u8,
    hi: u8,
    pending: u32,
    flags: u8,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ExactSum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("ExactSum").field(&self.round()).finish()
    }
}

impl ExactSum {
    pub const fn new() -> Self {
        Self {
            limbs: [0; LIMBS],
            lo: LIMBS as u8,
            hi: 0,
            pending: 0,
            flags: 0,
        }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let (mut lo, mut hi) = (self.lo, self.hi);
        self.deposit(x, &mut lo, &mut hi);
        self.lo = lo;
        self.hi = hi;
        self.pending += 1;
        if self.pending >= PENDING_LIMIT {
            self.normalize();
        }
    }

    /// Adds every `xs[i] * ys[i]`, each product rounded to `f64` first.
    /// Equivalent to calling [`ExactSum::add`] on each product.
    pub fn add_products(&mut self, xs: &[f64], ys: &[f64]) {
        assert_eq!(xs.len(), ys.len(), "product operands differ in length");
        if xs.len() < BUCKET_MIN_LEN {
            if self.pending as usize + xs.len() >= PENDING_LIMIT as usize {
                self.normalize();
            }
            let (mut lo, mut hi) = (self.lo, self.hi);
            for (x, y) in xs.iter().zip(ys) {
                self.deposit(x * y, &mut lo, &mut hi);
            }
            self.lo = lo;
            self.hi = hi;
            self.pending += xs.len() as u32;
            return;
        }
        LANE_SUMS.with_borrow_mut(|sums| {
            for (xc, yc) in xs.chunks(BUCKET_RUN).zip(ys.chunks(BUCKET_RUN)) {
                self.add_products_bucketed(xc, yc, sums);
            }
        });
    }

    /// Group `g` covers exponent fields `32g..32g+32` (0 counts as 1) and has
    /// base ulp `2^(32g - 1075)`. A product is split into a head, truncated to
    /// a multiple of `2^HEAD_SHIFT` base ulps, and the remaining tail. A head
    /// is below `2^43` such units and a tail below `2^41` base ulps, so up to
    /// `BUCKET_RUN` of either add in `f64` without rounding, in any order. The
    /// group sums are then deposited exactly.
    fn add_products_bucketed(&mut self, xs: &[f64], ys: &[f64], sums: &mut LaneSums) {
        debug_assert!(xs.len() <= BUCKET_RUN);
        if self.pending as usize + xs.len() + 2 * GROUPS >= PENDING_LIMIT as usize {
            self.normalize();
        }
        let (mut lo, mut hi) = (self.lo, self.hi);
        let mut deposits = 0u32;
        let (mut gmin, mut gmax) = (GROUPS, 0);
        let mut direct = |p: f64, s: &mut Self| {
            s.deposit(p, &mut lo, &mut hi);
            deposits += 1;
        };
        let mut xq = xs.chunks_exact(LANES);
        let mut yq = ys.chunks_exact(LANES);
        for (x4, y4) in (&mut xq).zip(&mut yq) {
            for l in 0..LANES {
                let p = x4[l] * y4[l];
                if !bucket(p, &mut sums[l], &mut gmin, &mut gmax) {
                    direct(p, self);
                }
            }
        }
        for (x, y) in xq.remainder().iter().zip(yq.remainder()) {
            let p = x * y;
            if !bucket(p, &mut sums[0], &mut gmin, &mut gmax) {
                direct(p, self);
            }
        }
        for k in 2 * gmin..2 * gmax + 2 {
            let v = sums
                .iter_mut()
                .fold(0.0, |acc, lane| acc + std::mem::take(&mut lane[k]));
            if v != 0.0 {
                direct(v, self);
            }
        }
        self.lo = lo;
        self.hi = hi;
        self.pending += deposits;
    }

    #[inline(always)]
    fn deposit(&mut self, x: f64, lo_limb: &mut u8, hi_limb: &mut u8) {
        deposit(&mut self.limbs, &mut self.flags, x, lo_limb, hi_limb);
    }

    /// Resets to zero, touching only limbs that may be nonzero.
    pub fn clear(&mut self) {
        if self.lo <= self.hi {
            self.limbs[self.lo as usize..=self.hi as usize].fill(0);
        }
        self.lo = LIMBS as u8;
        self.hi = 0;
        self.pending = 0;
        self.flags = 0;
    }

    /// Adds another accumulator's exact value into this one.
    pub fn merge(&mut self, other: &ExactSum) {
        self.flags |= other.flags;
        if self.pending as u64 + other.pending as u64 + 1 >= PENDING_LIMIT as u64 {
            self.normalize();
            let mut other = other.clone();
            other.normalize();
            self.merge_limbs(&other);
        } else {
            self.merge_limbs(other);
        }
    }

    fn merge_limbs(&mut self, other: &ExactSum) {
        if other.lo <= other.hi {
            let (lo, hi) = (other.lo as usize, other.hi as usize);
            for (a, b) in self.limbs[lo..=hi].iter_mut().zip(&other.limbs[lo..=hi]) {
                *a += *b;
            }
            self.lo = self.lo.min(other.lo);
            self.hi = self.hi.max(other.hi);
        }
        self.pending += other.pending + 1;
    }

    /// Propagates carries so limbs `lo..hi` lie in `[0, 2^32)` and the signed
    /// top limb `hi` lies in `[-2^32, 2^32)`.
    fn normalize(&mut self) {
        self.pending = 0;
        if self.lo > self.hi {
            return;
        }
        let (lo, mut hi) = (self.lo as usize, self.hi as usize);
        for k in lo..hi {
            let carry = self.limbs[k] >> LIMB_BITS;
            self.limbs[k] -= carry << LIMB_BITS;
            self.limbs[k + 1] += carry;
        }
        while hi < LIMBS - 1 && !matches!(self.limbs[hi] >> LIMB_BITS, 0 | -1) {
            let carry = self.limbs[hi] >> LIMB_BITS;
            self.limbs[hi] -= carry << LIMB_BITS;
            self.limbs[hi + 1] += carry;
            hi += 1;
        }
        self.hi = hi as u8;
    }

    fn window(&self) -> &[i64] {
        if self.lo > self.hi {
            &[]
        } else {
            &self.limbs[self.lo as usize..=self.hi as usize]
        }
    }

    pub fn is_zero(&self) -> bool {
        if self.flags != 0 {
            return false;
        }
        let mut c = self.clone();
        c.normalize();
        c.window().iter().all(|&l| l == 0)
    }

    /// The exact sum rounded to the nearest `f64`, ties to even.
    ///
    /// NaN if any addend was NaN or both infinities were added; ±inf if an
    /// infinite addend was seen or the exact sum exceeds the `f64` range.
    /// An exact zero rounds to `+0.0`.
    pub fn round(&self) -> f64 {
        if self.flags != 0 {
            let pos = self.flags & FLAG_POS_INF != 0;
            let neg = self.flags & FLAG_NEG_INF != 0;
            return if self.flags & FLAG_NAN != 0 || (pos && neg) {
                f64::NAN
            } else if pos {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            };
        }
        if self.lo > self.hi {
            return 0.0;
        }
        let (lo, hi) = (self.lo as usize, self.hi as usize);
        let w = hi - lo + 1;
        // One spare limb past the window absorbs the final carry. Typical
        // windows are narrow, so avoid clearing a full-width buffer.
        if w < SMALL_WINDOW {
            let mut buf = [0i64; SMALL_WINDOW];
            buf[..w].copy_from_slice(&self.limbs[lo..=hi]);
            round_digits(&mut buf[..=w], lo)
        } else {
            let mut buf = [0i64; LIMBS + 1];
            buf[..w].copy_from_slice(&self.limbs[lo..=hi]);
            round_digits(&mut buf[..=w], lo)
        }
    }
}

/// Rounds signed digits whose last entry is zero; `digits[0]` is limb `first`.
fn round_digits(digits: &mut [i64], first: usize) -> f64 {
    carry_through(digits);
    let negative = digits[digits.len() - 1] < 0;
    if negative {
        for l in digits.iter_mut() {
            *l = -*l;
        }
        carry_through(digits);
    }
    let Some(top) = digits.iter().rposition(|&l| l != 0) else {
        return 0.0;
    };
    let magnitude = round_magnitude(digits, first, top);
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

/// Leaves every digit but the last in `[0, 2^32)`.
fn carry_through(digits: &mut [i64]) {
    for k in 0..digits.len() - 1 {
        let carry = digits[k] >> LIMB_BITS;
        digits[k] -= carry << LIMB_BITS;
        digits[k + 1] += carry;
    }
}

/// Rounds non-negative normalized digits whose highest nonzero entry is
/// `top`; `digits[0]` is limb number `first` and lower limbs are zero.
fn round_magnitude(digits: &[i64], first: usize, top: usize) -> f64 {
    let top = first + top;
    let low = top.saturating_sub(2);
    let mut hi: u128 = 0;
    for k in (low..=top).rev() {
        let d = if k >= first { digits[k - first] } else { 0 };
        hi = (hi << LIMB_BITS) | d as u128;
    }
    let sticky = digits[..low.saturating_sub(first)].iter().any(|&l| l != 0);
    // Weight of bit 0 of `hi` is 2^(base - 1074).
    let base = (low as i64) * LIMB_BITS as i64;
    let nbits = 128 - hi.leading_zeros() as i64;
    let top_exp = base - 1074 + nbits - 1;
    if top_exp < -1022 {
        // Subnormal: only possible when `hi` starts at limb 0, so nothing is dropped.
        debug_assert!(low == 0 && !sticky);
        return f64::from_bits(hi as u64);
    }
    let shift = nbits - 53;
    debug_assert!(shift >= 0);
    let mut mant = hi >> shift;
    if shift > 0 {
        let rem = hi & ((1u128 << shift) - 1);
        let half = 1u128 << (shift - 1);
        if rem > half || (rem == half && (sticky || mant & 1 == 1)) {
            mant += 1;
        }
    }
    let mut exp = base - 1074 + shift;
    if mant == 1 << 53 {
        mant >>= 1;
        exp += 1;
    }
    let biased = exp + 52 + 1023;
    if biased >= 0x7ff {
        return f64::INFINITY;
    }
    f64::from_bits(((biased as u64) << 52) | (mant as u64 & FRAC_MASK))
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        s.extend(iter);
        s
    }
}

/// A vector of exact accumulators, one per element.
#[derive(Clone, Debug, Default)]
pub struct ExactVec {
    sums: Vec<ExactSum>,
}

impl ExactVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            sums: vec![ExactSum::new(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn clear(&mut self) {
        self.sums.iter_mut().for_each(ExactSum::clear);
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, x: f64) {
        self.sums[i].add(x);
    }

    pub fn get(&self, i: usize) -> &ExactSum {
        &self.sums[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut ExactSum {
        &mut self.sums[i]
    }

    /// Elementwise exact addition. Lengths must match.
    pub fn merge(&mut self, other: &ExactVec) {
        assert_eq!(self.len(), other.len(), "ExactVec length mismatch");
        for (a, b) in self.sums.iter_mut().zip(other.sums.iter()) {
            a.merge(b);
        }
    }

    pub fn round(&self) -> Vec<f64> {
        self.sums.iter().map(ExactSum::round).collect()
    }

    pub fn round_into(&self, out: &mut [f64]) {
        assert_eq!(self.len(), out.len(), "ExactVec length mismatch");
        for (o, s) in out.iter_mut().zip(self.sums.iter()) {
            *o = s.round();
        }
    }
}

/// Adds the head and tail of `p` to its group's sums. False if `p` must be
/// deposited directly.
#[inline(always)]
fn bucket(p: f64, sums: &mut [f64; 2 * GROUPS], gmin: &mut usize, gmax: &mut usize) -> bool {
    let bits = p.to_bits();
    let e = (((bits >> 52) & 0x7ff) as usize).max(1);
    if e >= DIRECT_EXPONENT {
        return false;
    }
    let g = e >> GROUP_BITS;
    let shift = HEAD_SHIFT - (e as u32 & ((1 << GROUP_BITS) - 1));
    let head = f64::from_bits(bits & (u64::MAX << shift));
    sums[2 * g] += head;
    sums[2 * g + 1] += p - head;
    *gmin = (*gmin).min(g);
    *gmax = (*gmax).max(g);
    true
}

/// Adds the bits of `x` into the limbs, widening `lo..=hi` as needed.
/// Does not count towards `pending`.
#[inline(always)]
fn deposit(limbs: &mut [i64; LIMBS], flags: &mut u8, x: f64, lo_limb: &mut u8, hi_limb: &mut u8) {
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as usize;
    let frac = bits & FRAC_MASK;
    if exp_field == 0x7ff {
        *flags |= if frac != 0 {
            FLAG_NAN
        } else if x > 0.0 {
            FLAG_POS_INF
        } else {
            FLAG_NEG_INF
        };
        return;
    }
    let (mant, pos) = if exp_field == 0 {
        if frac == 0 {
            return;
        }
        (frac, 0)
    } else {
        (frac | (1 << 52), exp_field - 1)
    };
    let k = pos / LIMB_BITS as usize;
    let sh = (pos % LIMB_BITS as usize) as u32;
    // `mant << sh` spans up to 85 bits; the low 64 survive the u64 shift.
    let low = mant << sh;
    let lo = (low as i64) & LIMB_MASK;
    let mid = ((low >> 32) as i64) & LIMB_MASK;
    let hi = ((mant >> 32) >> (32 - sh)) as i64;
    // 0 for positive, -1 for negative; (v ^ s) - s negates branch-free.
    let s = -((bits >> 63) as i64);
    let limbs = &mut limbs[k..k + 3];
    limbs[0] += (lo ^ s) - s;
    limbs[1] += (mid ^ s) - s;
    limbs[2] += (hi ^ s) - s;
    *lo_limb = (*lo_limb).min(k as u8);
    *hi_limb = (*hi_limb).max(k as u8 + 2);
}
