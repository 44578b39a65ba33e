//! Fixed-capacity violation bitmap.
//!
//! Bit `i` is set when constraint `i` is violated. Capacity is [`MAX_NODES`];
//! the type is `Copy` so simulators can clone states freely.

use std::fmt;

use crate::error::{Error, Result};

const WORDS: usize = 4;

/// Largest node count a [`Bitmap`] can hold.
pub const MAX_NODES: usize = WORDS * 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bitmap {
    words: [u64; WORDS],
    len: u16,
}

impl Bitmap {
    pub fn zeros(len: usize) -> Self {
        assert!(len <= MAX_NODES, "bitmap length {len} exceeds {MAX_NODES}");
        Bitmap {
            words: [0; WORDS],
            len: len as u16,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut b = Self::zeros(len);
        for i in 0..len {
            b.set(i);
        }
        b
    }

    pub fn from_indices(len: usize, idx: &[usize]) -> Self {
        let mut b = Self::zeros(len);
        for &i in idx {
            b.set(i);
        }
        b
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut b = Self::zeros(bits.len());
        for (i, &on) in bits.iter().enumerate() {
            if on {
                b.set(i);
            }
        }
        b
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len as usize
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len());
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len());
        self.words[i >> 6] |= 1 << (i & 63);
    }

    #[inline]
    pub fn clear(&mut self, i: usize) {
        debug_assert!(i < self.len());
        self.words[i >> 6] &= !(1 << (i & 63));
    }

    #[inline]
    pub fn assign(&mut self, i: usize, on: bool) {
        if on {
            self.set(i)
        } else {
            self.clear(i)
        }
    }

    #[inline]
    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    #[inline]
    pub fn none(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn any(&self) -> bool {
        !self.none()
    }

    /// Indices of set bits in ascending order.
    pub fn iter_ones(&self) -> Ones {
        Ones {
            words: self.words,
            word: 0,
        }
    }

    #[inline]
    pub fn intersects(&self, other: &Bitmap) -> bool {
        self.words
            .iter()
            .zip(other.words.iter())
            .any(|(a, b)| a & b != 0)
    }

    #[inline]
    pub fn and(&self, other: &Bitmap) -> Bitmap {
        let mut out = *self;
        for (w, o) in out.words.iter_mut().zip(other.words.iter()) {
            *w &= o;
        }
        out
    }

    #[inline]
    pub fn or(&self, other: &Bitmap) -> Bitmap {
        let mut out = *self;
        for (w, o) in out.words.iter_mut().zip(other.words.iter()) {
            *w |= o;
        }
        out
    }

    #[inline]
    pub fn and_not(&self, other: &Bitmap) -> Bitmap {
        let mut out = *self;
        for (w, o) in out.words.iter_mut().zip(other.words.iter()) {
            *w &= !o;
        }
        out
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset(&self, other: &Bitmap) -> bool {
        self.and_not(other).none()
    }

    /// Dense index for small bitmaps (`len <= 64`), used by exhaustive solvers.
    pub fn as_u64(&self) -> u64 {
        debug_assert!(self.len() <= 64);
        self.words[0]
    }

    pub fn from_u64(len: usize, bits: u64) -> Self {
        assert!(len <= 64);
        let mut b = Self::zeros(len);
        b.words[0] = if len == 64 { bits } else { bits & ((1u64 << len) - 1) };
        b
    }

    /// Hex encoding: character `k` holds nodes `4k..4k+3`, node `4k+j` in bit `j`.
    pub fn to_hex(&self) -> String {
        let n = self.len();
        let chars = n.div_ceil(4);
        let mut out = String::with_capacity(chars);
        for k in 0..chars {
            let mut nib = 0u32;
            for j in 0..4 {
                let i = 4 * k + j;
                if i < n && self.get(i) {
                    nib |= 1 << j;
                }
            }
            out.push(std::char::from_digit(nib, 16).expect("nibble"));
        }
        out
    }

    pub fn from_hex(len: usize, hex: &str) -> Result<Self> {
        if len > MAX_NODES {
            return Err(Error::TooLarge {
                nodes: len,
                limit: MAX_NODES,
            });
        }
        if hex.len() != len.div_ceil(4) {
            return Err(Error::Parse(format!(
                "hex bitmap '{hex}' has wrong length for {len} nodes"
            )));
        }
        let mut b = Self::zeros(len);
        for (k, ch) in hex.chars().enumerate() {
            let nib = ch
                .to_digit(16)
                .ok_or_else(|| Error::Parse(format!("bad hex digit '{ch}'")))?;
            for j in 0..4 {
                if nib & (1 << j) != 0 {
                    let i = 4 * k + j;
                    if i >= len {
                        return Err(Error::Parse(format!("bit {i} beyond length {len}")));
                    }
                    b.set(i);
                }
            }
        }
        Ok(b)
    }
}

impl fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bitmap[")?;
        for i in 0..self.len() {
            write!(f, "{}", if self.get(i) { '1' } else { '0' })?;
        }
        write!(f, "]")
    }
}

pub struct Ones {
    words: [u64; WORDS],
    word: usize,
}

impl Iterator for Ones {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        while self.word < WORDS {
            let w = self.words[self.word];
            if w != 0 {
                let bit = w.trailing_zeros() as usize;
                self.words[self.word] &= w - 1;
                return Some(self.word * 64 + bit);
            }
            self.word += 1;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hex_layout() {
        let b = Bitmap::from_indices(6, &[0, 5]);
        assert_eq!(b.to_hex(), "12");
        assert_eq!(Bitmap::zeros(0).to_hex(), "");
    }

    #[test]
    fn hex_rejects_out_of_range_bits() {
        assert!(Bitmap::from_hex(5, "1f").is_err());
        assert!(Bitmap::from_hex(5, "1").is_err());
    }

    proptest! {
        #[test]
        fn hex_roundtrip(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let b = Bitmap::from_bools(&bits);
            prop_assert_eq!(Bitmap::from_hex(bits.len(), &b.to_hex()).unwrap(), b);
            prop_assert_eq!(b.count_ones(), bits.iter().filter(|&&x| x).count());
            let ones: Vec<usize> = b.iter_ones().collect();
            let expect: Vec<usize> = bits.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
            prop_assert_eq!(ones, expect);
        }
    }
}
