//! Atom constants: short operation names packed into a 64-bit value.
//!
//! Every character maps to a 6-bit code (`_`, `0`-`9`, `A`-`Z`, `a`-`z` take
//! codes 1 through 63, code 0 means "no character"). Encoding folds the text
//! left to right, `v = (v << 6) | code(c)`, so ten characters occupy the low
//! 60 bits and the top four bits are always zero.
//!
//! [`atom`] is a `const fn`, which lets atom values appear in constant
//! expressions and as const generic arguments (see [`AtomConstant`]).

use std::fmt;

use thiserror::Error;

/// Maximum number of characters an atom can hold.
pub const MAX_ATOM_LEN: usize = 10;

const CODE_BITS: u32 = 6;
const CODE_MASK: u64 = 0x3f;
const VALID_BITS_MASK: u64 = (1 << (CODE_BITS as u64 * MAX_ATOM_LEN as u64)) - 1;

/// Errors produced while converting between text and [`AtomValue`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AtomError {
    #[error("atom text has {0} characters, at most 10 are allowed")]
    TooLong(usize),
    #[error("character {0:?} is not part of the atom alphabet")]
    InvalidChar(char),
    #[error("value {0:#x} has bits set above bit 59")]
    HighBitsSet(u64),
    #[error("value {0:#x} contains an empty 6-bit group below a non-empty one")]
    EmptyGroup(u64),
}

const fn code_of(byte: u8) -> u8 {
    match byte {
        b'_' => 1,
        b'0'..=b'9' => byte - b'0' + 2,
        b'A'..=b'Z' => byte - b'A' + 12,
        b'a'..=b'z' => byte - b'a' + 38,
        _ => 0,
    }
}

const fn char_of(code: u8) -> u8 {
    match code {
        1 => b'_',
        2..=11 => b'0' + (code - 2),
        12..=37 => b'A' + (code - 12),
        38..=63 => b'a' + (code - 38),
        _ => 0,
    }
}

/// A named constant encoded as a 64-bit integer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct AtomValue(u64);

impl AtomValue {
    /// Wraps a raw value after checking that it decodes.
    pub fn from_raw(raw: u64) -> Result<Self, AtomError> {
        decode_raw(raw)?;
        Ok(AtomValue(raw))
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    /// Returns the text this atom was created from.
    pub fn decode(self) -> String {
        // Only valid values can be constructed.
        decode_raw(self.0).expect("AtomValue holds a valid encoding")
    }
}

impl fmt::Debug for AtomValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "atom({:?})", self.decode())
    }
}

impl fmt::Display for AtomValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.decode())
    }
}

/// Encodes `text` at compile time.
///
/// Panics (a compile error in const context) on text that [`try_atom`] rejects.
pub const fn atom(text: &str) -> AtomValue {
    let bytes = text.as_bytes();
    if bytes.len() > MAX_ATOM_LEN {
        panic!("atom text longer than 10 characters");
    }
    let mut value = 0u64;
    let mut i = 0;
    while i < bytes.len() {
        let code = code_of(bytes[i]);
        if code == 0 {
            panic!("atom text contains a character outside [_0-9A-Za-z]");
        }
        value = (value << CODE_BITS) | code as u64;
        i += 1;
    }
    AtomValue(value)
}

/// Encodes `text`, reporting invalid input instead of panicking.
pub fn try_atom(text: &str) -> Result<AtomValue, AtomError> {
    let count = text.chars().count();
    if count > MAX_ATOM_LEN {
        return Err(AtomError::TooLong(count));
    }
    let mut value = 0u64;
    for c in text.chars() {
        let code = if c.is_ascii() { code_of(c as u8) } else { 0 };
        if code == 0 {
            return Err(AtomError::InvalidChar(c));
        }
        value = (value << CODE_BITS) | code as u64;
    }
    Ok(AtomValue(value))
}

/// Decodes a raw atom value back into text.
pub fn atom_decode(raw: u64) -> Result<String, AtomError> {
    decode_raw(raw)
}

fn decode_raw(raw: u64) -> Result<String, AtomError> {
    if raw & !VALID_BITS_MASK != 0 {
        return Err(AtomError::HighBitsSet(raw));
    }
    let mut rest = raw;
    let mut reversed = Vec::with_capacity(MAX_ATOM_LEN);
    while rest != 0 {
        let code = (rest & CODE_MASK) as u8;
        if code == 0 {
            return Err(AtomError::EmptyGroup(raw));
        }
        reversed.push(char_of(code));
        rest >>= CODE_BITS;
    }
    reversed.reverse();
    // The alphabet is pure ASCII.
    Ok(String::from_utf8(reversed).expect("atom alphabet is ASCII"))
}

pub fn is_valid_atom_text(text: &str) -> bool {
    try_atom(text).is_ok()
}

/// An atom lifted to the type level.
///
/// Matching on `AtomConstant<V>` accepts exactly the atom `V`, while matching
/// on [`AtomValue`] accepts any atom.
///
/// ```
/// use cafx::atom::{atom, AtomConstant};
/// type PlusAtom = AtomConstant<{ atom("plus").raw() }>;
/// assert_eq!(PlusAtom::value(), atom("plus"));
/// ```
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AtomConstant<const V: u64>;

impl<const V: u64> AtomConstant<V> {
    pub const fn value() -> AtomValue {
        AtomValue(V)
    }
}

impl<const V: u64> fmt::Debug for AtomConstant<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AtomConstant({})", AtomValue(V))
    }
}
