//! Little-endian message encoding for RPC payloads and log records.

#[derive(Clone, Debug, Default)]
pub struct Enc(Vec<u8>);

impl Enc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bool(self, v: bool) -> Self {
        self.u64(u64::from(v))
    }

    /// Length-prefixed byte string.
    pub fn bytes(self, b: &[u8]) -> Self {
        let mut s = self.u32(b.len() as u32);
        s.0.extend_from_slice(b);
        s
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

/// Reader over an [`Enc`] encoding. Reading past the end is a protocol bug
/// and panics.
#[derive(Clone, Debug)]
pub struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Dec { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    pub fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    pub fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    pub fn bool(&mut self) -> bool {
        self.u64() != 0
    }

    pub fn bytes(&mut self) -> &'a [u8] {
        let n = self.u32() as usize;
        self.take(n)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(a: u64, b: u32, c: bool, d: Vec<u8>) {
            let buf = Enc::new().u64(a).u32(b).bool(c).bytes(&d).finish();
            let mut r = Dec::new(&buf);
            prop_assert_eq!(r.u64(), a);
            prop_assert_eq!(r.u32(), b);
            prop_assert_eq!(r.bool(), c);
            prop_assert_eq!(r.bytes(), &d[..]);
            prop_assert!(r.is_empty());
        }
    }
}
