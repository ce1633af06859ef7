//! Fixed-width bit vectors in network bit order.
//!
//! Bit 0 is the most significant bit of the first byte. A "left" shift moves
//! content toward bit 0 (earlier in the stream), a "right" shift moves it
//! toward later positions. Bits shifted past either boundary are dropped and
//! vacated positions fill with zeros, mirroring a hardware barrel shifter.

/// Bit vector with MSB-first numbering. Bits past `len` are kept zero so that
/// equality and hashing stay well-defined.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Bits {
    bytes: Vec<u8>,
    len: usize,
}

impl std::fmt::Debug for Bits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Bits[{}]({})", self.len, self.hex())
    }
}

impl Bits {
    pub fn zero(len: usize) -> Self {
        Bits {
            bytes: vec![0u8; len.div_ceil(8)],
            len,
        }
    }

    /// All `8 * bytes.len()` bits of the given bytes, in order.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Bits {
            bytes: bytes.to_vec(),
            len: bytes.len() * 8,
        }
    }

    /// First `len` bits of `bytes`; excess bits in the last byte are cleared.
    pub fn from_bytes_truncated(bytes: &[u8], len: usize) -> Self {
        assert!(len <= bytes.len() * 8, "len exceeds supplied bytes");
        let mut b = Bits {
            bytes: bytes[..len.div_ceil(8)].to_vec(),
            len,
        };
        b.mask_tail();
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {} out of range {}", i, self.len);
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit index {} out of range {}", i, self.len);
        let mask = 0x80 >> (i % 8);
        if v {
            self.bytes[i / 8] |= mask;
        } else {
            self.bytes[i / 8] &= !mask;
        }
    }

    /// Reads `width` bits starting at `offset` as an unsigned integer,
    /// MSB-first. `width` must be at most 64 and the range must be in bounds.
    pub fn read_u64(&self, offset: usize, width: usize) -> u64 {
        assert!(width <= 64, "read_u64 width {} > 64", width);
        assert!(
            offset + width <= self.len,
            "read [{}, {}) out of range {}",
            offset,
            offset + width,
            self.len
        );
        let mut v = 0u64;
        for i in 0..width {
            v = (v << 1) | u64::from(self.get(offset + i));
        }
        v
    }

    /// Writes `width` bits of `value` at `offset`, MSB-first.
    pub fn write_u64(&mut self, offset: usize, width: usize, value: u64) {
        assert!(width <= 64);
        assert!(offset + width <= self.len);
        for i in 0..width {
            let bit = (value >> (width - 1 - i)) & 1 != 0;
            self.set(offset + i, bit);
        }
    }

    /// Shift toward bit 0 by `k`: result bit `i` = source bit `i + k`.
    pub fn shifted_left(&self, k: usize) -> Bits {
        if k == 0 {
            return self.clone();
        }
        let mut out = Bits::zero(self.len);
        if k >= self.len {
            return out;
        }
        let byte_k = k / 8;
        let bit_k = k % 8;
        let n = self.bytes.len();
        for i in 0..n.saturating_sub(byte_k) {
            let hi = self.bytes[i + byte_k];
            let lo = if i + byte_k + 1 < n {
                self.bytes[i + byte_k + 1]
            } else {
                0
            };
            out.bytes[i] = if bit_k == 0 {
                hi
            } else {
                (hi << bit_k) | (lo >> (8 - bit_k))
            };
        }
        out.mask_tail();
        out
    }

    /// Shift toward later bits by `k`: result bit `i` = source bit `i - k`.
    pub fn shifted_right(&self, k: usize) -> Bits {
        if k == 0 {
            return self.clone();
        }
        let mut out = Bits::zero(self.len);
        if k >= self.len {
            return out;
        }
        let byte_k = k / 8;
        let bit_k = k % 8;
        let n = self.bytes.len();
        for i in byte_k..n {
            let lo = self.bytes[i - byte_k];
            let hi = if i > byte_k { self.bytes[i - byte_k - 1] } else { 0 };
            out.bytes[i] = if bit_k == 0 {
                lo
            } else {
                (hi << (8 - bit_k)) | (lo >> bit_k)
            };
        }
        out.mask_tail();
        out
    }

    pub fn or_assign(&mut self, other: &Bits) {
        assert_eq!(self.len, other.len, "or_assign length mismatch");
        for (dst, src) in self.bytes.iter_mut().zip(&other.bytes) {
            *dst |= src;
        }
    }

    /// OR `src` into `self` starting at a byte-aligned bit offset. Bits of
    /// `src` that would land past the end of `self` are dropped.
    pub fn or_at_byte_offset(&mut self, bit_offset: usize, src: &Bits) {
        assert_eq!(bit_offset % 8, 0, "offset must be byte-aligned");
        let start = bit_offset / 8;
        for (i, b) in src.bytes.iter().enumerate() {
            if start + i >= self.bytes.len() {
                break;
            }
            self.bytes[start + i] |= b;
        }
        self.mask_tail();
    }

    /// Copy of bits `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Bits {
        assert!(start + len <= self.len, "slice out of range");
        self.shifted_left(start).truncated(len)
    }

    /// First `len` bits, zero-padding if `len` exceeds the current length.
    pub fn truncated(&self, len: usize) -> Bits {
        let mut out = Bits::zero(len);
        let n = out.bytes.len().min(self.bytes.len());
        out.bytes[..n].copy_from_slice(&self.bytes[..n]);
        if len < self.len {
            out.mask_tail();
        }
        out
    }

    /// Clears bits at and beyond `keep`, leaving the length unchanged.
    pub fn mask_beyond(&mut self, keep: usize) {
        if keep >= self.len {
            return;
        }
        let full = keep / 8;
        let rem = keep % 8;
        if rem > 0 {
            self.bytes[full] &= 0xFFu8 << (8 - rem);
            for b in &mut self.bytes[full + 1..] {
                *b = 0;
            }
        } else {
            for b in &mut self.bytes[full..] {
                *b = 0;
            }
        }
    }

    /// Lowercase hex of the underlying bytes (bit 0 = high nibble of the
    /// first pair). Trailing bits past `len` read as zero.
    pub fn hex(&self) -> String {
        let mut s = String::with_capacity(self.bytes.len() * 2);
        for b in &self.bytes {
            s.push_str(&format!("{:02x}", b));
        }
        s
    }

    pub fn from_hex(hex: &str, len: usize) -> Option<Bits> {
        if !hex.len().is_multiple_of(2) {
            return None;
        }
        let mut bytes = Vec::with_capacity(hex.len() / 2);
        for i in (0..hex.len()).step_by(2) {
            bytes.push(u8::from_str_radix(&hex[i..i + 2], 16).ok()?);
        }
        if len > bytes.len() * 8 {
            return None;
        }
        Some(Bits::from_bytes_truncated(&bytes, len))
    }

    fn mask_tail(&mut self) {
        let rem = self.len % 8;
        if rem > 0 {
            let last = self.len / 8;
            self.bytes[last] &= 0xFFu8 << (8 - rem);
            for b in &mut self.bytes[last + 1..] {
                *b = 0;
            }
        }
    }
}
