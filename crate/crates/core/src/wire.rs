//! Byte encoding for values that cross rank boundaries.
//!
//! Every payload is little-endian. Scalars are 8 bytes wide (`u64`/`f64`),
//! sequences carry a `u64` element count before their elements, so a message
//! produced by one backend can be decoded by any other.

use crate::error::{Error, Result};

/// A value that can be sent between ranks.
pub trait Wire: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(input: &mut &[u8]) -> Result<Self>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = bytes;
        let value = Self::decode(&mut input)?;
        if !input.is_empty() {
            return Err(Error::Payload(format!(
                "{} trailing bytes after decode",
                input.len()
            )));
        }
        Ok(value)
    }
}

fn take<'a>(input: &mut &'a [u8], len: usize) -> Result<&'a [u8]> {
    if input.len() < len {
        return Err(Error::Payload(format!(
            "needed {len} bytes, {} left",
            input.len()
        )));
    }
    let (head, tail) = input.split_at(len);
    *input = tail;
    Ok(head)
}

fn take8(input: &mut &[u8]) -> Result<[u8; 8]> {
    let mut buf = [0u8; 8];
    buf.copy_from_slice(take(input, 8)?);
    Ok(buf)
}

impl Wire for u64 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        Ok(u64::from_le_bytes(take8(input)?))
    }
}

impl Wire for usize {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u64).encode(out);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        let v = u64::decode(input)?;
        usize::try_from(v).map_err(|_| Error::Payload(format!("{v} does not fit in usize")))
    }
}

impl Wire for f64 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        Ok(f64::from_le_bytes(take8(input)?))
    }
}

impl Wire for bool {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u64).encode(out);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        match u64::decode(input)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Payload(format!("invalid bool tag {v}"))),
        }
    }
}

impl Wire for String {
    fn encode(&self, out: &mut Vec<u8>) {
        self.len().encode(out);
        out.extend_from_slice(self.as_bytes());
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        let len = usize::decode(input)?;
        let bytes = take(input, len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Payload(e.to_string()))
    }
}

impl<T: Wire> Wire for Vec<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        self.len().encode(out);
        for item in self {
            item.encode(out);
        }
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        let len = usize::decode(input)?;
        // every element occupies at least one byte; reject absurd counts early
        if len > input.len() {
            return Err(Error::Payload(format!(
                "sequence claims {len} elements with {} bytes left",
                input.len()
            )));
        }
        (0..len).map(|_| T::decode(input)).collect()
    }
}

impl<T: Wire> Wire for Option<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            None => false.encode(out),
            Some(v) => {
                true.encode(out);
                v.encode(out);
            }
        }
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        if bool::decode(input)? {
            Ok(Some(T::decode(input)?))
        } else {
            Ok(None)
        }
    }
}

impl<A: Wire, B: Wire> Wire for (A, B) {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
        self.1.encode(out);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        Ok((A::decode(input)?, B::decode(input)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian_and_length_prefixed() {
        let bytes = vec![1.0f64].to_bytes();
        assert_eq!(&bytes[..8], &1u64.to_le_bytes());
        assert_eq!(&bytes[8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let bytes = vec![1u64, 2, 3].to_bytes();
        assert!(Vec::<u64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(u64::from_bytes(&[0u8; 9]).is_err());
    }

    proptest! {
        #[test]
        fn nested_values_round_trip(v in proptest::collection::vec((any::<u64>(), proptest::option::of(any::<f64>().prop_filter("nan", |x| !x.is_nan()))), 0..32), s in ".{0,16}") {
            let value = (v, s);
            let back = <(Vec<(u64, Option<f64>)>, String)>::from_bytes(&value.to_bytes()).unwrap();
            prop_assert_eq!(back, value);
        }
    }
}
