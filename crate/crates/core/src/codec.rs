// SPDX-License-Identifier: Apache-2.0

//! Deterministic CBOR encoding shared by every wire type in the crate.
//!
//! All structures are encoded as definite-length arrays in declared field
//! order. Decoding is strict: the input must hold exactly one data item, and
//! re-encoding the decoded item must reproduce the input byte-for-byte, which
//! rejects non-shortest integer heads, indefinite lengths and similar
//! alternative spellings of the same value.

use ciborium::value::{Integer, Value};
use thiserror::Error;

/// Errors raised while encoding or decoding wire values.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    /// The bytes are not a well-formed encoding of the expected structure.
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    /// The structure is well-formed but a field violates a type invariant.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

impl CodecError {
    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        CodecError::MalformedEncoding(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        CodecError::InvariantViolation(msg.into())
    }
}

/// A type with a deterministic CBOR representation.
pub trait WireCodec: Sized {
    /// Checks the type invariants. Encoding refuses values that fail this.
    fn validate(&self) -> Result<(), CodecError> {
        Ok(())
    }

    fn to_value(&self) -> Value;

    fn from_value(value: Value) -> Result<Self, CodecError>;

    fn encode(&self) -> Result<Vec<u8>, CodecError> {
        self.validate()?;
        Ok(to_bytes(&self.to_value()))
    }

    fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let decoded = Self::from_value(from_bytes(bytes)?)?;
        decoded.validate()?;
        Ok(decoded)
    }
}

/// Serializes a value. Serialization into a `Vec` cannot fail.
pub fn to_bytes(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    ciborium::ser::into_writer(value, &mut out).expect("writing CBOR into a Vec is infallible");
    out
}

/// Parses exactly one canonical data item.
pub fn from_bytes(bytes: &[u8]) -> Result<Value, CodecError> {
    let mut reader = bytes;
    let value: Value = ciborium::de::from_reader(&mut reader)
        .map_err(|e| CodecError::malformed(format!("cbor: {e}")))?;
    if !reader.is_empty() {
        return Err(CodecError::malformed(format!(
            "{} trailing bytes",
            reader.len()
        )));
    }
    if to_bytes(&value) != bytes {
        return Err(CodecError::malformed("non-canonical encoding"));
    }
    Ok(value)
}

pub(crate) fn uint(v: u64) -> Value {
    Value::Integer(Integer::from(v))
}

pub(crate) fn int(v: i64) -> Value {
    Value::Integer(Integer::from(v))
}

pub(crate) fn bytes(v: &[u8]) -> Value {
    Value::Bytes(v.to_vec())
}

/// Sequential reader over the elements of a fixed-arity array.
pub(crate) struct Fields {
    what: &'static str,
    items: std::vec::IntoIter<Value>,
}

impl Fields {
    /// Opens `value` as an array of exactly `arity` elements.
    pub(crate) fn open(value: Value, arity: usize, what: &'static str) -> Result<Self, CodecError> {
        let items = expect_array(value, what)?;
        if items.len() != arity {
            return Err(CodecError::malformed(format!(
                "{what}: expected {arity} elements, found {}",
                items.len()
            )));
        }
        Ok(Fields {
            what,
            items: items.into_iter(),
        })
    }

    pub(crate) fn next(&mut self) -> Value {
        // `open` fixed the arity, so callers never read past the end.
        self.items.next().expect("field count checked in open")
    }

    pub(crate) fn uint(&mut self) -> Result<u64, CodecError> {
        expect_uint(self.next(), self.what)
    }

    pub(crate) fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        expect_bytes(self.next(), self.what)
    }

    pub(crate) fn fixed<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let raw = self.bytes()?;
        raw.try_into().map_err(|raw: Vec<u8>| {
            CodecError::malformed(format!(
                "{}: expected {N}-byte string, found {}",
                self.what,
                raw.len()
            ))
        })
    }

    pub(crate) fn bool(&mut self) -> Result<bool, CodecError> {
        match self.next() {
            Value::Bool(b) => Ok(b),
            other => Err(type_error(self.what, "bool", &other)),
        }
    }

    pub(crate) fn array(&mut self) -> Result<Vec<Value>, CodecError> {
        expect_array(self.next(), self.what)
    }
}

pub(crate) fn expect_array(value: Value, what: &'static str) -> Result<Vec<Value>, CodecError> {
    match value {
        Value::Array(items) => Ok(items),
        other => Err(type_error(what, "array", &other)),
    }
}

pub(crate) fn expect_uint(value: Value, what: &'static str) -> Result<u64, CodecError> {
    match value {
        Value::Integer(i) => u64::try_from(i)
            .map_err(|_| CodecError::malformed(format!("{what}: expected unsigned integer"))),
        other => Err(type_error(what, "unsigned integer", &other)),
    }
}

pub(crate) fn expect_int(value: Value, what: &'static str) -> Result<i64, CodecError> {
    match value {
        Value::Integer(i) => i64::try_from(i)
            .map_err(|_| CodecError::malformed(format!("{what}: integer out of range"))),
        other => Err(type_error(what, "integer", &other)),
    }
}

pub(crate) fn expect_bytes(value: Value, what: &'static str) -> Result<Vec<u8>, CodecError> {
    match value {
        Value::Bytes(b) => Ok(b),
        other => Err(type_error(what, "byte string", &other)),
    }
}

fn type_error(what: &str, expected: &str, found: &Value) -> CodecError {
    let kind = match found {
        Value::Integer(_) => "integer",
        Value::Bytes(_) => "byte string",
        Value::Float(_) => "float",
        Value::Text(_) => "text string",
        Value::Bool(_) => "bool",
        Value::Null => "null",
        Value::Tag(..) => "tag",
        Value::Array(_) => "array",
        Value::Map(_) => "map",
        _ => "unknown item",
    };
    CodecError::malformed(format!("{what}: expected {expected}, found {kind}"))
}

/// Encodes a list of codec values as an array.
pub(crate) fn array_of<T: WireCodec>(items: &[T]) -> Value {
    Value::Array(items.iter().map(WireCodec::to_value).collect())
}

pub(crate) fn decode_array_of<T: WireCodec>(items: Vec<Value>) -> Result<Vec<T>, CodecError> {
    items.into_iter().map(T::from_value).collect()
}
