//! Payload encoding: one type-tag octet followed by fixed-order
//! little-endian fields. Strings are a u16 LE length plus UTF-8 octets.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("empty payload")]
    Empty,
    #[error("type tag {found:#04x} where {expected:#04x} was expected")]
    WrongTag { expected: u8, found: u8 },
    #[error("payload truncated")]
    Truncated,
    #[error("{0} trailing octets")]
    Trailing(usize),
    #[error("invalid field: {0}")]
    Invalid(String),
}

/// A type carried on the bus as a tagged payload.
pub trait Payload: Sized {
    const TAG: u8;
    fn write_body(&self, w: &mut Writer);
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError>;

    fn to_payload(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u8(Self::TAG);
        self.write_body(&mut w);
        w.0
    }

    fn from_payload(bytes: &[u8]) -> Result<Self, CodecError> {
        let (&tag, rest) = bytes.split_first().ok_or(CodecError::Empty)?;
        if tag != Self::TAG {
            return Err(CodecError::WrongTag {
                expected: Self::TAG,
                found: tag,
            });
        }
        let mut r = Reader(rest);
        let v = Self::read_body(&mut r)?;
        if !r.0.is_empty() {
            return Err(CodecError::Trailing(r.0.len()));
        }
        Ok(v)
    }
}

/// Tag of a payload without decoding it.
pub fn peek_tag(bytes: &[u8]) -> Option<u8> {
    bytes.first().copied()
}

#[derive(Default)]
pub struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn bool(&mut self, v: bool) {
        self.0.push(v as u8);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        let n = u16::try_from(s.len()).expect("string field longer than 65535 octets");
        self.0.extend_from_slice(&n.to_le_bytes());
        self.0.extend_from_slice(s.as_bytes());
    }
    pub fn opt_str(&mut self, s: Option<&str>) {
        match s {
            Some(s) => {
                self.u8(1);
                self.str(s);
            }
            None => self.u8(0),
        }
    }
}

pub struct Reader<'a>(pub &'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.0.len() < n {
            return Err(CodecError::Truncated);
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }
    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    pub fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(CodecError::Invalid(format!("boolean octet {v}"))),
        }
    }
    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String, CodecError> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CodecError::Invalid(e.to_string()))
    }
    pub fn opt_str(&mut self) -> Result<Option<String>, CodecError> {
        Ok(if self.bool()? { Some(self.str()?) } else { None })
    }
}
