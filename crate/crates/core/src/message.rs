//! Copy-on-write message tuples and the type registry behind them.
//!
//! A [`Message`] is a reference-counted, immutable-by-default tuple of
//! [`Value`]s. Cloning a message shares the payload. Write access through
//! [`Message::get_mut`] or [`Message::set`] detaches the payload first when
//! another handle still refers to it, so every holder keeps call-by-value
//! semantics without paying for copies that are never needed.

use std::any::{Any, TypeId as RustTypeId};
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::RwLock;
use thiserror::Error;

use crate::atom::{AtomConstant, AtomValue};
use crate::interface::{ActorAddr, NodeId};

/// Runtime identifier of a message element type.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeId(pub u16);

impl TypeId {
    pub const BOOL: TypeId = TypeId(1);
    pub const I8: TypeId = TypeId(2);
    pub const I16: TypeId = TypeId(3);
    pub const I32: TypeId = TypeId(4);
    pub const I64: TypeId = TypeId(5);
    pub const U8: TypeId = TypeId(6);
    pub const U16: TypeId = TypeId(7);
    pub const U32: TypeId = TypeId(8);
    pub const U64: TypeId = TypeId(9);
    pub const F32: TypeId = TypeId(10);
    pub const F64: TypeId = TypeId(11);
    pub const STR: TypeId = TypeId(12);
    pub const BYTES: TypeId = TypeId(13);
    pub const ATOM: TypeId = TypeId(14);
    pub const ACTOR_ADDR: TypeId = TypeId(15);

    /// First id handed out to user-registered types.
    pub const FIRST_CUSTOM: u16 = 16;

    pub fn is_builtin(self) -> bool {
        (1..Self::FIRST_CUSTOM).contains(&self.0)
    }
}

impl fmt::Debug for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match BUILTIN_NAMES.get(self.0.wrapping_sub(1) as usize) {
            Some(name) if self.is_builtin() => write!(f, "{name}"),
            _ => write!(f, "type#{}", self.0),
        }
    }
}

const BUILTIN_NAMES: [&str; 15] = [
    "bool", "i8", "i16", "i32", "i64", "u8", "u16", "u32", "u64", "f32", "f64", "str", "bytes",
    "atom", "actor_addr",
];

/// A user-defined element type that can travel inside messages.
pub trait CustomType: Clone + PartialEq + fmt::Debug + Send + Sync + 'static {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(bytes: &[u8]) -> Option<Self>;
}

/// Object-safe view of a [`CustomType`].
pub trait CustomData: fmt::Debug + Send + Sync {
    fn clone_box(&self) -> Box<dyn CustomData>;
    fn eq_dyn(&self, other: &dyn CustomData) -> bool;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
    fn rust_type(&self) -> RustTypeId;
}

impl<T: CustomType> CustomData for T {
    fn clone_box(&self) -> Box<dyn CustomData> {
        Box::new(self.clone())
    }

    fn eq_dyn(&self, other: &dyn CustomData) -> bool {
        other.as_any().downcast_ref::<T>() == Some(self)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }

    fn rust_type(&self) -> RustTypeId {
        RustTypeId::of::<T>()
    }
}

/// One element of a message.
#[derive(Debug)]
pub enum Value {
    Bool(bool),
    I8(i8),
    I16(i16),
    I32(i32),
    I64(i64),
    U8(u8),
    U16(u16),
    U32(u32),
    U64(u64),
    F32(f32),
    F64(f64),
    Str(String),
    Bytes(Vec<u8>),
    Atom(AtomValue),
    Addr(ActorAddr),
    Custom(Box<dyn CustomData>),
}

impl Value {
    pub fn custom<T: CustomType>(value: T) -> Value {
        Value::Custom(Box::new(value))
    }

    /// Type id of builtin values; `None` for custom values, whose id lives in
    /// a registry.
    pub fn builtin_type(&self) -> Option<TypeId> {
        Some(match self {
            Value::Bool(_) => TypeId::BOOL,
            Value::I8(_) => TypeId::I8,
            Value::I16(_) => TypeId::I16,
            Value::I32(_) => TypeId::I32,
            Value::I64(_) => TypeId::I64,
            Value::U8(_) => TypeId::U8,
            Value::U16(_) => TypeId::U16,
            Value::U32(_) => TypeId::U32,
            Value::U64(_) => TypeId::U64,
            Value::F32(_) => TypeId::F32,
            Value::F64(_) => TypeId::F64,
            Value::Str(_) => TypeId::STR,
            Value::Bytes(_) => TypeId::BYTES,
            Value::Atom(_) => TypeId::ATOM,
            Value::Addr(_) => TypeId::ACTOR_ADDR,
            Value::Custom(_) => return None,
        })
    }

    pub fn downcast_ref<T: CustomType>(&self) -> Option<&T> {
        match self {
            Value::Custom(data) => data.as_any().downcast_ref(),
            _ => None,
        }
    }

    pub fn downcast_mut<T: CustomType>(&mut self) -> Option<&mut T> {
        match self {
            Value::Custom(data) => data.as_any_mut().downcast_mut(),
            _ => None,
        }
    }

    pub fn as_atom(&self) -> Option<AtomValue> {
        match self {
            Value::Atom(a) => Some(*a),
            _ => None,
        }
    }
}

impl Clone for Value {
    fn clone(&self) -> Self {
        match self {
            Value::Bool(v) => Value::Bool(*v),
            Value::I8(v) => Value::I8(*v),
            Value::I16(v) => Value::I16(*v),
            Value::I32(v) => Value::I32(*v),
            Value::I64(v) => Value::I64(*v),
            Value::U8(v) => Value::U8(*v),
            Value::U16(v) => Value::U16(*v),
            Value::U32(v) => Value::U32(*v),
            Value::U64(v) => Value::U64(*v),
            Value::F32(v) => Value::F32(*v),
            Value::F64(v) => Value::F64(*v),
            Value::Str(v) => Value::Str(v.clone()),
            Value::Bytes(v) => Value::Bytes(v.clone()),
            Value::Atom(v) => Value::Atom(*v),
            Value::Addr(v) => Value::Addr(*v),
            Value::Custom(v) => Value::Custom(v.clone_box()),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Bool(a), Bool(b)) => a == b,
            (I8(a), I8(b)) => a == b,
            (I16(a), I16(b)) => a == b,
            (I32(a), I32(b)) => a == b,
            (I64(a), I64(b)) => a == b,
            (U8(a), U8(b)) => a == b,
            (U16(a), U16(b)) => a == b,
            (U32(a), U32(b)) => a == b,
            (U64(a), U64(b)) => a == b,
            (F32(a), F32(b)) => a == b,
            (F64(a), F64(b)) => a == b,
            (Str(a), Str(b)) => a == b,
            (Bytes(a), Bytes(b)) => a == b,
            (Atom(a), Atom(b)) => a == b,
            (Addr(a), Addr(b)) => a == b,
            (Custom(a), Custom(b)) => a.eq_dyn(b.as_ref()),
            _ => false,
        }
    }
}

mod sealed {
    pub trait Sealed {}
}

/// Conversion between builtin Rust types and message elements.
pub trait MessageValue: Sized + sealed::Sealed {
    fn static_type() -> TypeId;
    fn into_value(self) -> Value;
    fn from_value(value: &Value) -> Option<Self>;
    fn from_value_mut(value: &mut Value) -> Option<&mut Self>;
}

macro_rules! builtin_value {
    ($ty:ty, $variant:ident, $id:ident) => {
        impl sealed::Sealed for $ty {}

        impl MessageValue for $ty {
            fn static_type() -> TypeId {
                TypeId::$id
            }
            fn into_value(self) -> Value {
                Value::$variant(self)
            }
            fn from_value(value: &Value) -> Option<Self> {
                match value {
                    Value::$variant(v) => Some(v.clone()),
                    _ => None,
                }
            }
            fn from_value_mut(value: &mut Value) -> Option<&mut Self> {
                match value {
                    Value::$variant(v) => Some(v),
                    _ => None,
                }
            }
        }

        impl From<$ty> for Value {
            fn from(v: $ty) -> Value {
                Value::$variant(v)
            }
        }
    };
}

builtin_value!(bool, Bool, BOOL);
builtin_value!(i8, I8, I8);
builtin_value!(i16, I16, I16);
builtin_value!(i32, I32, I32);
builtin_value!(i64, I64, I64);
builtin_value!(u8, U8, U8);
builtin_value!(u16, U16, U16);
builtin_value!(u32, U32, U32);
builtin_value!(u64, U64, U64);
builtin_value!(f32, F32, F32);
builtin_value!(f64, F64, F64);
builtin_value!(String, Str, STR);
builtin_value!(Vec<u8>, Bytes, BYTES);
builtin_value!(AtomValue, Atom, ATOM);
builtin_value!(ActorAddr, Addr, ACTOR_ADDR);

impl From<&str> for Value {
    fn from(v: &str) -> Value {
        Value::Str(v.to_owned())
    }
}

impl<const V: u64> From<AtomConstant<V>> for Value {
    fn from(_: AtomConstant<V>) -> Value {
        Value::Atom(AtomConstant::<V>::value())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("element {0} has an unregistered custom type")]
    UnregisteredType(usize),
    #[error("index {index} out of range for message of arity {arity}")]
    OutOfRange { index: usize, arity: usize },
    #[error("element {index} has type {actual:?}, expected {expected:?}")]
    TypeMismatch {
        index: usize,
        expected: Option<TypeId>,
        actual: TypeId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unknown type id {0:#06x}")]
    UnknownType(u16),
    #[error("input truncated")]
    Truncated,
    #[error("payload of {len} bytes is invalid for type {ty:?}")]
    BadPayload { ty: TypeId, len: usize },
    #[error("{0} trailing bytes after last element")]
    TrailingBytes(usize),
    #[error("no codec registered for type {0:?}")]
    MissingCodec(TypeId),
    #[error("message has more than 65535 elements")]
    TooManyElements,
}

type EncodeFn = fn(&dyn CustomData, &mut Vec<u8>);
type DecodeFn = fn(&[u8]) -> Option<Box<dyn CustomData>>;

#[derive(Clone, Copy)]
struct CustomCodec {
    encode: EncodeFn,
    decode: DecodeFn,
}

fn encode_erased<T: CustomType>(value: &dyn CustomData, out: &mut Vec<u8>) {
    if let Some(v) = value.as_any().downcast_ref::<T>() {
        v.encode(out);
    }
}

fn decode_erased<T: CustomType>(bytes: &[u8]) -> Option<Box<dyn CustomData>> {
    T::decode(bytes).map(|v| Box::new(v) as Box<dyn CustomData>)
}

#[derive(Default)]
struct RegistryInner {
    names: Vec<String>,
    by_name: HashMap<String, TypeId>,
    by_rust_type: HashMap<RustTypeId, TypeId>,
    codecs: HashMap<TypeId, CustomCodec>,
}

/// Bidirectional mapping between type names and [`TypeId`]s.
///
/// Builtin types are pre-registered with ids 1 through 15. Custom types get
/// consecutive ids from 16 in registration order, so nodes that exchange
/// custom values must register them in the same order.
pub struct TypeRegistry {
    inner: RwLock<RegistryInner>,
}

impl Default for TypeRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl TypeRegistry {
    pub fn new() -> Self {
        let mut inner = RegistryInner::default();
        for (i, name) in BUILTIN_NAMES.iter().enumerate() {
            inner.names.push((*name).to_owned());
            inner.by_name.insert((*name).to_owned(), TypeId(i as u16 + 1));
        }
        TypeRegistry {
            inner: RwLock::new(inner),
        }
    }

    /// The process-wide registry used by [`Message::new`].
    pub fn global() -> &'static TypeRegistry {
        static GLOBAL: OnceLock<TypeRegistry> = OnceLock::new();
        GLOBAL.get_or_init(TypeRegistry::new)
    }

    /// Registers `T` under `name`. Registering the same type twice returns the
    /// existing id; reusing a name for a different type is an error.
    pub fn register<T: CustomType>(&self, name: &str) -> Result<TypeId, RegistryError> {
        let mut inner = self.inner.write();
        let rust = RustTypeId::of::<T>();
        if let Some(id) = inner.by_rust_type.get(&rust) {
            return Ok(*id);
        }
        if inner.by_name.contains_key(name) {
            return Err(RegistryError::NameTaken(name.to_owned()));
        }
        let next = inner.names.len() + 1;
        let id = TypeId(u16::try_from(next).map_err(|_| RegistryError::Full)?);
        inner.names.push(name.to_owned());
        inner.by_name.insert(name.to_owned(), id);
        inner.by_rust_type.insert(rust, id);
        inner.codecs.insert(
            id,
            CustomCodec {
                encode: encode_erased::<T>,
                decode: decode_erased::<T>,
            },
        );
        Ok(id)
    }

    pub fn id_of(&self, name: &str) -> Option<TypeId> {
        self.inner.read().by_name.get(name).copied()
    }

    pub fn name_of(&self, id: TypeId) -> Option<String> {
        let inner = self.inner.read();
        inner.names.get((id.0 as usize).checked_sub(1)?).cloned()
    }

    pub fn custom_id<T: CustomType>(&self) -> Option<TypeId> {
        self.inner.read().by_rust_type.get(&RustTypeId::of::<T>()).copied()
    }

    /// Resolves the type id of any value.
    pub fn type_of(&self, value: &Value) -> Option<TypeId> {
        match value {
            Value::Custom(data) => self.inner.read().by_rust_type.get(&data.rust_type()).copied(),
            other => other.builtin_type(),
        }
    }

    fn codec(&self, id: TypeId) -> Option<CustomCodec> {
        self.inner.read().codecs.get(&id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("type name {0:?} is already registered")]
    NameTaken(String),
    #[error("type id space exhausted")]
    Full,
}

/// Counters observing the copy-on-write behavior of one message lineage
/// (a message and every copy derived from it).
#[derive(Debug, Default)]
struct CopyCounters {
    deep_copies: AtomicU64,
    shares: AtomicU64,
}

static GLOBAL_COUNTERS: CopyCounters = CopyCounters {
    deep_copies: AtomicU64::new(0),
    shares: AtomicU64::new(0),
};

/// Snapshot of copy-on-write counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CopyStats {
    pub deep_copies: u64,
    pub shares: u64,
}

impl CopyStats {
    /// Totals over every message in the process.
    pub fn global() -> CopyStats {
        CopyStats {
            deep_copies: GLOBAL_COUNTERS.deep_copies.load(Ordering::Relaxed),
            shares: GLOBAL_COUNTERS.shares.load(Ordering::Relaxed),
        }
    }
}

struct Payload {
    types: Vec<TypeId>,
    values: Vec<Value>,
    counters: Arc<CopyCounters>,
}

/// Reference-counted copy-on-write tuple.
pub struct Message {
    payload: Arc<Payload>,
}

impl Message {
    /// Builds a message, resolving custom types through the global registry.
    pub fn new(values: Vec<Value>) -> Result<Message, MessageError> {
        Self::with_registry(values, TypeRegistry::global())
    }

    pub fn with_registry(values: Vec<Value>, registry: &TypeRegistry) -> Result<Message, MessageError> {
        let types = values
            .iter()
            .enumerate()
            .map(|(i, v)| registry.type_of(v).ok_or(MessageError::UnregisteredType(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_parts(types, values))
    }

    pub fn empty() -> Message {
        Self::from_parts(Vec::new(), Vec::new())
    }

    fn from_parts(types: Vec<TypeId>, values: Vec<Value>) -> Message {
        Message {
            payload: Arc::new(Payload {
                types,
                values,
                counters: Arc::new(CopyCounters::default()),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.payload.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.values.is_empty()
    }

    pub fn signature(&self) -> &[TypeId] {
        &self.payload.types
    }

    pub fn values(&self) -> &[Value] {
        &self.payload.values
    }

    pub fn get(&self, index: usize) -> Result<&Value, MessageError> {
        self.payload.values.get(index).ok_or(MessageError::OutOfRange {
            index,
            arity: self.len(),
        })
    }

    pub fn get_as<T: MessageValue>(&self, index: usize) -> Result<T, MessageError> {
        let value = self.get(index)?;
        T::from_value(value).ok_or(MessageError::TypeMismatch {
            index,
            expected: Some(T::static_type()),
            actual: self.payload.types[index],
        })
    }

    /// Atom at `index`, if that element is an atom.
    pub fn atom_at(&self, index: usize) -> Option<AtomValue> {
        self.payload.values.get(index).and_then(Value::as_atom)
    }

    /// Exclusive access to element `index`, detaching shared payloads first.
    pub fn get_mut<T: MessageValue>(&mut self, index: usize) -> Result<&mut T, MessageError> {
        let arity = self.len();
        if index >= arity {
            return Err(MessageError::OutOfRange { index, arity });
        }
        let actual = self.payload.types[index];
        let value = &mut self.make_unique().values[index];
        T::from_value_mut(value).ok_or(MessageError::TypeMismatch {
            index,
            expected: Some(T::static_type()),
            actual,
        })
    }

    /// Exclusive access to a custom element.
    pub fn get_custom_mut<T: CustomType>(&mut self, index: usize) -> Result<&mut T, MessageError> {
        let arity = self.len();
        if index >= arity {
            return Err(MessageError::OutOfRange { index, arity });
        }
        let actual = self.payload.types[index];
        self.make_unique().values[index]
            .downcast_mut::<T>()
            .ok_or(MessageError::TypeMismatch {
                index,
                expected: None,
                actual,
            })
    }

    /// Replaces element `index` with a value of the same type.
    pub fn set(&mut self, index: usize, value: Value) -> Result<(), MessageError> {
        let arity = self.len();
        if index >= arity {
            return Err(MessageError::OutOfRange { index, arity });
        }
        let expected = self.payload.types[index];
        let same_type = match (&value, &self.payload.values[index]) {
            (Value::Custom(a), Value::Custom(b)) => a.rust_type() == b.rust_type(),
            (v, _) => v.builtin_type() == Some(expected),
        };
        if !same_type {
            return Err(MessageError::TypeMismatch {
                index,
                expected: Some(expected),
                actual: value.builtin_type().unwrap_or(expected),
            });
        }
        self.make_unique().values[index] = value;
        Ok(())
    }

    /// Ensures this handle is the sole owner of its payload, deep-copying the
    /// tuple if it is shared. Returns whether a copy was made.
    pub fn detach(&mut self) -> bool {
        let shared = Arc::get_mut(&mut self.payload).is_none();
        self.make_unique();
        shared
    }

    fn make_unique(&mut self) -> &mut Payload {
        if Arc::get_mut(&mut self.payload).is_none() {
            let copy = Payload {
                types: self.payload.types.clone(),
                values: self.payload.values.clone(),
                counters: self.payload.counters.clone(),
            };
            copy.counters.deep_copies.fetch_add(1, Ordering::Relaxed);
            GLOBAL_COUNTERS.deep_copies.fetch_add(1, Ordering::Relaxed);
            self.payload = Arc::new(copy);
        }
        Arc::get_mut(&mut self.payload).expect("payload is unique after detaching")
    }

    /// Number of handles sharing this payload.
    pub fn ref_count(&self) -> usize {
        Arc::strong_count(&self.payload)
    }

    pub fn is_shared(&self) -> bool {
        self.ref_count() > 1
    }

    /// Whether two handles point at the same payload.
    pub fn ptr_eq(&self, other: &Message) -> bool {
        Arc::ptr_eq(&self.payload, &other.payload)
    }

    /// Counters of this message's lineage.
    pub fn copy_stats(&self) -> CopyStats {
        let c = &self.payload.counters;
        CopyStats {
            deep_copies: c.deep_copies.load(Ordering::Relaxed),
            shares: c.shares.load(Ordering::Relaxed),
        }
    }

    /// Element-wise equality, ignoring identity and counters.
    pub fn content_eq(&self, other: &Message) -> bool {
        self.payload.types == other.payload.types && self.payload.values == other.payload.values
    }
}

impl Clone for Message {
    fn clone(&self) -> Self {
        self.payload.counters.shares.fetch_add(1, Ordering::Relaxed);
        GLOBAL_COUNTERS.shares.fetch_add(1, Ordering::Relaxed);
        Message {
            payload: self.payload.clone(),
        }
    }
}

impl PartialEq for Message {
    fn eq(&self, other: &Self) -> bool {
        self.content_eq(other)
    }
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Message").field(&self.payload.values).finish()
    }
}

/// Builds a message from builtin values.
///
/// ```
/// use cafx::{atom::atom, message};
/// let m = message!(atom("plus"), 10i32, 20i32);
/// assert_eq!(m.len(), 3);
/// ```
#[macro_export]
macro_rules! message {
    () => { $crate::message::Message::empty() };
    ($($v:expr),+ $(,)?) => {
        $crate::message::Message::new(vec![$($crate::message::Value::from($v)),+])
            .expect("builtin values are always registered")
    };
}

// --- wire codec -----------------------------------------------------------

/// Encodes a message as `[arity u16][per element: type u16, len u32, bytes]`,
/// all integers big-endian.
pub fn serialize(msg: &Message, registry: &TypeRegistry) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(2 + msg.len() * 16);
    let arity = u16::try_from(msg.len()).map_err(|_| CodecError::TooManyElements)?;
    out.extend_from_slice(&arity.to_be_bytes());
    let mut scratch = Vec::new();
    for (ty, value) in msg.signature().iter().zip(msg.values()) {
        scratch.clear();
        encode_value(*ty, value, registry, &mut scratch)?;
        out.extend_from_slice(&ty.0.to_be_bytes());
        out.extend_from_slice(&(scratch.len() as u32).to_be_bytes());
        out.extend_from_slice(&scratch);
    }
    Ok(out)
}

fn encode_value(ty: TypeId, value: &Value, registry: &TypeRegistry, out: &mut Vec<u8>) -> Result<(), CodecError> {
    match value {
        Value::Bool(v) => out.push(u8::from(*v)),
        Value::I8(v) => out.extend_from_slice(&v.to_be_bytes()),
        Value::I16(v) => out.extend_from_slice(&v.to_be_bytes()),
        Value::I32(v) => out.extend_from_slice(&v.to_be_bytes()),
        Value::I64(v) => out.extend_from_slice(&v.to_be_bytes()),
        Value::U8(v) => out.push(*v),
        Value::U16(v) => out.extend_from_slice(&v.to_be_bytes()),
        Value::U32(v) => out.extend_from_slice(&v.to_be_bytes()),
        Value::U64(v) => out.extend_from_slice(&v.to_be_bytes()),
        Value::F32(v) => out.extend_from_slice(&v.to_bits().to_be_bytes()),
        Value::F64(v) => out.extend_from_slice(&v.to_bits().to_be_bytes()),
        Value::Str(v) => out.extend_from_slice(v.as_bytes()),
        Value::Bytes(v) => out.extend_from_slice(v),
        Value::Atom(v) => out.extend_from_slice(&v.raw().to_be_bytes()),
        Value::Addr(v) => {
            out.extend_from_slice(v.node.as_bytes());
            out.extend_from_slice(&v.id.to_be_bytes());
        }
        Value::Custom(data) => {
            let codec = registry.codec(ty).ok_or(CodecError::MissingCodec(ty))?;
            (codec.encode)(data.as_ref(), out);
        }
    }
    Ok(())
}

pub fn deserialize(bytes: &[u8], registry: &TypeRegistry) -> Result<Message, CodecError> {
    let mut rest = bytes;
    let arity = u16::from_be_bytes(take::<2>(&mut rest)?) as usize;
    let mut types = Vec::with_capacity(arity);
    let mut values = Vec::with_capacity(arity);
    for _ in 0..arity {
        let ty = TypeId(u16::from_be_bytes(take::<2>(&mut rest)?));
        let len = u32::from_be_bytes(take::<4>(&mut rest)?) as usize;
        if rest.len() < len {
            return Err(CodecError::Truncated);
        }
        let (payload, tail) = rest.split_at(len);
        rest = tail;
        values.push(decode_value(ty, payload, registry)?);
        types.push(ty);
    }
    if !rest.is_empty() {
        return Err(CodecError::TrailingBytes(rest.len()));
    }
    Ok(Message::from_parts(types, values))
}

fn take<const N: usize>(rest: &mut &[u8]) -> Result<[u8; N], CodecError> {
    if rest.len() < N {
        return Err(CodecError::Truncated);
    }
    let (head, tail) = rest.split_at(N);
    *rest = tail;
    Ok(head.try_into().expect("length checked"))
}

fn fixed<const N: usize>(ty: TypeId, payload: &[u8]) -> Result<[u8; N], CodecError> {
    payload.try_into().map_err(|_| CodecError::BadPayload { ty, len: payload.len() })
}

fn decode_value(ty: TypeId, payload: &[u8], registry: &TypeRegistry) -> Result<Value, CodecError> {
    let bad = || CodecError::BadPayload { ty, len: payload.len() };
    Ok(match ty {
        TypeId::BOOL => match payload {
            [0] => Value::Bool(false),
            [1] => Value::Bool(true),
            _ => return Err(bad()),
        },
        TypeId::I8 => Value::I8(i8::from_be_bytes(fixed(ty, payload)?)),
        TypeId::I16 => Value::I16(i16::from_be_bytes(fixed(ty, payload)?)),
        TypeId::I32 => Value::I32(i32::from_be_bytes(fixed(ty, payload)?)),
        TypeId::I64 => Value::I64(i64::from_be_bytes(fixed(ty, payload)?)),
        TypeId::U8 => Value::U8(u8::from_be_bytes(fixed(ty, payload)?)),
        TypeId::U16 => Value::U16(u16::from_be_bytes(fixed(ty, payload)?)),
        TypeId::U32 => Value::U32(u32::from_be_bytes(fixed(ty, payload)?)),
        TypeId::U64 => Value::U64(u64::from_be_bytes(fixed(ty, payload)?)),
        TypeId::F32 => Value::F32(f32::from_bits(u32::from_be_bytes(fixed(ty, payload)?))),
        TypeId::F64 => Value::F64(f64::from_bits(u64::from_be_bytes(fixed(ty, payload)?))),
        TypeId::STR => Value::Str(String::from_utf8(payload.to_vec()).map_err(|_| bad())?),
        TypeId::BYTES => Value::Bytes(payload.to_vec()),
        TypeId::ATOM => {
            let raw = u64::from_be_bytes(fixed(ty, payload)?);
            Value::Atom(AtomValue::from_raw(raw).map_err(|_| bad())?)
        }
        TypeId::ACTOR_ADDR => {
            let raw: [u8; 20] = fixed(ty, payload)?;
            let mut node = [0u8; 16];
            node.copy_from_slice(&raw[..16]);
            let id = u32::from_be_bytes(raw[16..].try_into().expect("4 bytes"));
            Value::Addr(ActorAddr::new(NodeId::from_bytes(node), id))
        }
        other => {
            let codec = registry.codec(other).ok_or(CodecError::UnknownType(other.0))?;
            Value::Custom((codec.decode)(payload).ok_or_else(bad)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::atom;
    use proptest::prelude::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Point {
        x: i32,
        y: i32,
    }

    impl CustomType for Point {
        fn encode(&self, out: &mut Vec<u8>) {
            out.extend_from_slice(&self.x.to_be_bytes());
            out.extend_from_slice(&self.y.to_be_bytes());
        }
        fn decode(bytes: &[u8]) -> Option<Self> {
            let x = i32::from_be_bytes(bytes.get(0..4)?.try_into().ok()?);
            let y = i32::from_be_bytes(bytes.get(4..8)?.try_into().ok()?);
            (bytes.len() == 8).then_some(Point { x, y })
        }
    }

    #[derive(Debug, Clone, PartialEq)]
    struct Unregistered;

    impl CustomType for Unregistered {
        fn encode(&self, _: &mut Vec<u8>) {}
        fn decode(_: &[u8]) -> Option<Self> {
            Some(Unregistered)
        }
    }

    #[test]
    fn builtin_ids_are_fixed() {
        let reg = TypeRegistry::new();
        let expected = [
            "bool", "i8", "i16", "i32", "i64", "u8", "u16", "u32", "u64", "f32", "f64", "str",
            "bytes", "atom", "actor_addr",
        ];
        for (i, name) in expected.iter().enumerate() {
            assert_eq!(reg.id_of(name), Some(TypeId(i as u16 + 1)));
            assert_eq!(reg.name_of(TypeId(i as u16 + 1)).as_deref(), Some(*name));
        }
    }

    #[test]
    fn make_message_signatures() {
        let m = message!(atom("plus"), 10i32, 20i32);
        assert_eq!(m.signature(), &[TypeId::ATOM, TypeId::I32, TypeId::I32]);
        assert_eq!(m.ref_count(), 1);
        let e = message!();
        assert!(e.signature().is_empty());
        let s = message!("abc");
        assert_eq!(s.signature(), &[TypeId::STR]);
        assert_eq!(s.get_as::<String>(0).unwrap(), "abc");
    }

    #[test]
    fn unregistered_custom_type_is_rejected() {
        let reg = TypeRegistry::new();
        let err = Message::with_registry(vec![Value::custom(Unregistered)], &reg).unwrap_err();
        assert!(matches!(err, MessageError::UnregisteredType(_)));
    }

    #[test]
    fn get_performs_no_copy() {
        let m = message!(7i32);
        assert_eq!(m.get_as::<i32>(0).unwrap(), 7);
        let holders: Vec<Message> = (0..100).map(|_| m.clone()).collect();
        for h in &holders {
            assert_eq!(h.get(0).unwrap(), &Value::I32(7));
        }
        assert_eq!(m.copy_stats().deep_copies, 0);
        assert_eq!(m.copy_stats().shares, 100);
        assert!(matches!(m.get(1), Err(MessageError::OutOfRange { index: 1, arity: 1 })));
    }

    #[test]
    fn sole_holder_mutates_in_place() {
        let mut m = message!(1i32);
        *m.get_mut::<i32>(0).unwrap() = 5;
        assert_eq!(m.get_as::<i32>(0).unwrap(), 5);
        assert_eq!(m.copy_stats().deep_copies, 0);
    }

    #[test]
    fn shared_mutation_detaches() {
        let mut a = message!(1i32);
        let b = a.clone();
        *a.get_mut::<i32>(0).unwrap() = 2;
        assert_eq!(a.get_as::<i32>(0).unwrap(), 2);
        assert_eq!(b.get_as::<i32>(0).unwrap(), 1);
        assert_eq!(a.copy_stats().deep_copies, 1);
        assert_eq!(b.copy_stats().deep_copies, 1);
    }

    #[test]
    fn second_mutator_owns_original() {
        // a and b share; a copies on write, which leaves b as sole owner.
        let mut a = message!(1i32);
        let mut b = a.clone();
        *a.get_mut::<i32>(0).unwrap() = 2;
        *b.get_mut::<i32>(0).unwrap() = 3;
        assert_eq!(a.copy_stats().deep_copies, 1);
        assert_eq!(a.get_as::<i32>(0).unwrap(), 2);
        assert_eq!(b.get_as::<i32>(0).unwrap(), 3);
    }

    #[test]
    fn mutation_errors() {
        let mut m = message!(1i32);
        assert!(m.get_mut::<i32>(1).is_err());
        assert!(matches!(m.get_mut::<String>(0), Err(MessageError::TypeMismatch { .. })));
        assert!(m.set(0, Value::from("x")).is_err());
        m.set(0, Value::I32(9)).unwrap();
        assert_eq!(m.get_as::<i32>(0).unwrap(), 9);
    }

    #[test]
    fn empty_message_wire_format() {
        let bytes = serialize(&message!(), TypeRegistry::global()).unwrap();
        assert_eq!(bytes, vec![0x00, 0x00]);
        assert!(deserialize(&bytes, TypeRegistry::global()).unwrap().is_empty());
    }

    #[test]
    fn atom_and_int_wire_format() {
        let m = Message::new(vec![Value::Atom(AtomValue::from_raw(12).unwrap()), Value::I32(7)]).unwrap();
        let bytes = serialize(&m, TypeRegistry::global()).unwrap();
        let expected: Vec<u8> = vec![
            0, 2, // arity
            0, 14, 0, 0, 0, 8, 0, 0, 0, 0, 0, 0, 0, 12, // atom
            0, 4, 0, 0, 0, 4, 0, 0, 0, 7, // i32
        ];
        assert_eq!(bytes, expected);
        let back = deserialize(&bytes, TypeRegistry::global()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.signature(), m.signature());
    }

    #[test]
    fn codec_errors() {
        let reg = TypeRegistry::global();
        assert_eq!(
            deserialize(&[0, 1, 0xff, 0xff, 0, 0, 0, 0], reg).unwrap_err(),
            CodecError::UnknownType(0xffff)
        );
        assert_eq!(deserialize(&[0], reg).unwrap_err(), CodecError::Truncated);
        assert_eq!(deserialize(&[0, 1, 0, 4, 0, 0, 0, 4, 0], reg).unwrap_err(), CodecError::Truncated);
        assert!(matches!(
            deserialize(&[0, 1, 0, 4, 0, 0, 0, 2, 0, 0], reg),
            Err(CodecError::BadPayload { .. })
        ));
        assert_eq!(deserialize(&[0, 0, 1], reg).unwrap_err(), CodecError::TrailingBytes(1));
    }

    #[test]
    fn custom_types_round_trip() {
        let reg = TypeRegistry::new();
        let id = reg.register::<Point>("point").unwrap();
        assert_eq!(id, TypeId(16));
        assert_eq!(reg.register::<Point>("point").unwrap(), id);
        assert!(reg.register::<Unregistered>("point").is_err());
        let m = Message::with_registry(vec![Value::custom(Point { x: 1, y: -2 }), Value::I8(3)], &reg).unwrap();
        assert_eq!(m.signature(), &[id, TypeId::I8]);
        let back = deserialize(&serialize(&m, &reg).unwrap(), &reg).unwrap();
        assert_eq!(back.get(0).unwrap().downcast_ref::<Point>(), Some(&Point { x: 1, y: -2 }));
        // A registry without the type cannot decode it.
        let other = TypeRegistry::new();
        assert_eq!(
            deserialize(&serialize(&m, &reg).unwrap(), &other).unwrap_err(),
            CodecError::UnknownType(16)
        );
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            any::<bool>().prop_map(Value::Bool),
            any::<i8>().prop_map(Value::I8),
            any::<i16>().prop_map(Value::I16),
            any::<i32>().prop_map(Value::I32),
            any::<i64>().prop_map(Value::I64),
            any::<u8>().prop_map(Value::U8),
            any::<u16>().prop_map(Value::U16),
            any::<u32>().prop_map(Value::U32),
            any::<u64>().prop_map(Value::U64),
            any::<f32>().prop_filter("nan", |f| !f.is_nan()).prop_map(Value::F32),
            any::<f64>().prop_filter("nan", |f| !f.is_nan()).prop_map(Value::F64),
            ".{0,20}".prop_map(Value::Str),
            proptest::collection::vec(any::<u8>(), 0..40).prop_map(Value::Bytes),
            "[_0-9A-Za-z]{0,10}".prop_map(|s| Value::Atom(crate::atom::try_atom(&s).unwrap())),
            (any::<[u8; 16]>(), any::<u32>())
                .prop_map(|(n, id)| Value::Addr(ActorAddr::new(NodeId::from_bytes(n), id))),
        ]
    }

    proptest! {
        #[test]
        fn serialization_round_trip(values in proptest::collection::vec(arb_value(), 0..12)) {
            let m = Message::new(values).unwrap();
            let back = deserialize(&serialize(&m, TypeRegistry::global()).unwrap(), TypeRegistry::global()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
