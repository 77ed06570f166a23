//! Messaging interfaces, actor identity and handles.
//!
//! An interface is a set of rules mapping a unique input signature to an
//! output signature. Interfaces are ordered by inclusion: a handle typed with
//! interface `Y` can be narrowed to any `X` with `X ⊆ Y`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use thiserror::Error;

use crate::atom::AtomValue;
use crate::message::{Message, TypeId, Value};
use crate::runtime::ActorRef;

/// 16-byte node identifier, random per runtime instance.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodeId([u8; 16]);

impl NodeId {
    pub fn random() -> NodeId {
        let mut bytes = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut bytes);
        NodeId(bytes)
    }

    pub const fn from_bytes(bytes: [u8; 16]) -> NodeId {
        NodeId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn is_nil(&self) -> bool {
        self.0 == [0; 16]
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        f.write_str("..")
    }
}

/// Network-wide actor identifier. Actor id 0 is never assigned.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ActorAddr {
    pub node: NodeId,
    pub id: u32,
}

impl ActorAddr {
    pub const fn new(node: NodeId, id: u32) -> ActorAddr {
        ActorAddr { node, id }
    }

    pub fn is_valid(&self) -> bool {
        self.id != 0
    }
}

impl fmt::Debug for ActorAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{:?}", self.id, self.node)
    }
}

impl fmt::Display for ActorAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One position of a signature: either any value of a type, or exactly one
/// atom (an atom constant).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeTag {
    Type(TypeId),
    Atom(AtomValue),
}

impl TypeTag {
    /// Whether an element of type `ty` holding `value` fits this position.
    pub fn accepts(&self, ty: TypeId, value: &Value) -> bool {
        match self {
            TypeTag::Type(t) => *t == ty,
            TypeTag::Atom(a) => value.as_atom() == Some(*a),
        }
    }

    /// The element type this tag requires.
    pub fn type_id(&self) -> TypeId {
        match self {
            TypeTag::Type(t) => *t,
            TypeTag::Atom(_) => TypeId::ATOM,
        }
    }
}

impl fmt::Debug for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeTag::Type(t) => write!(f, "{t:?}"),
            TypeTag::Atom(a) => write!(f, "{a}"),
        }
    }
}

/// Whether a message fits a signature position by position.
pub fn signature_accepts(tags: &[TypeTag], msg: &Message) -> bool {
    tags.len() == msg.len()
        && tags
            .iter()
            .zip(msg.signature().iter().zip(msg.values()))
            .all(|(tag, (ty, v))| tag.accepts(*ty, v))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterfaceError {
    #[error("rule has no inputs")]
    EmptyInputs,
    #[error("conflicting rules for inputs {0:?}")]
    Conflict(Vec<TypeTag>),
    #[error("interface mismatch: {0}")]
    Mismatch(String),
    #[error("malformed interface encoding")]
    Malformed,
}

/// `inputs -> outputs`, optionally with an alternative output signature for
/// the failure path.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rule {
    inputs: Vec<TypeTag>,
    outputs: Vec<TypeTag>,
    alt_outputs: Option<Vec<TypeTag>>,
}

impl Rule {
    pub fn new(
        inputs: Vec<TypeTag>,
        outputs: Vec<TypeTag>,
        alt_outputs: Option<Vec<TypeTag>>,
    ) -> Result<Rule, InterfaceError> {
        if inputs.is_empty() {
            return Err(InterfaceError::EmptyInputs);
        }
        Ok(Rule {
            inputs,
            outputs,
            alt_outputs,
        })
    }

    /// A rule producing no response.
    pub fn reacts_to(inputs: Vec<TypeTag>) -> Result<Rule, InterfaceError> {
        Rule::new(inputs, Vec::new(), None)
    }

    pub fn replies_to(inputs: Vec<TypeTag>, outputs: Vec<TypeTag>) -> Result<Rule, InterfaceError> {
        Rule::new(inputs, outputs, None)
    }

    pub fn replies_either(
        inputs: Vec<TypeTag>,
        outputs: Vec<TypeTag>,
        alt: Vec<TypeTag>,
    ) -> Result<Rule, InterfaceError> {
        Rule::new(inputs, outputs, Some(alt))
    }

    pub fn inputs(&self) -> &[TypeTag] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[TypeTag] {
        &self.outputs
    }

    pub fn alt_outputs(&self) -> Option<&[TypeTag]> {
        self.alt_outputs.as_deref()
    }

    /// Whether `sig` is one of the signatures this rule may answer with.
    pub fn answers_with(&self, sig: &[TypeTag]) -> bool {
        self.outputs == sig || self.alt_outputs.as_deref() == Some(sig)
    }
}

impl fmt::Debug for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} -> {:?}", self.inputs, self.outputs)?;
        if let Some(alt) = &self.alt_outputs {
            write!(f, " | {alt:?}")?;
        }
        Ok(())
    }
}

/// A set of rules keyed by their input signature.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct MessagingInterface {
    rules: BTreeMap<Vec<TypeTag>, Rule>,
}

impl MessagingInterface {
    pub fn new(rules: impl IntoIterator<Item = Rule>) -> Result<Self, InterfaceError> {
        let mut map = BTreeMap::new();
        for rule in rules {
            match map.get(&rule.inputs) {
                Some(existing) if existing != &rule => {
                    return Err(InterfaceError::Conflict(rule.inputs.clone()));
                }
                Some(_) => {}
                None => {
                    map.insert(rule.inputs.clone(), rule);
                }
            }
        }
        Ok(MessagingInterface { rules: map })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rules in canonical order (sorted by input signature).
    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values()
    }

    pub fn rule_for_inputs(&self, inputs: &[TypeTag]) -> Option<&Rule> {
        self.rules.get(inputs)
    }

    /// The rule whose inputs accept `msg`.
    pub fn rule_for(&self, msg: &Message) -> Option<&Rule> {
        self.rules.values().find(|r| signature_accepts(&r.inputs, msg))
    }

    pub fn accepts(&self, msg: &Message) -> bool {
        self.rule_for(msg).is_some()
    }

    /// `self ⊆ other`: every rule of `self` appears verbatim in `other`.
    pub fn is_subset(&self, other: &MessagingInterface) -> bool {
        self.rules
            .iter()
            .all(|(inputs, rule)| other.rules.get(inputs) == Some(rule))
    }

    /// Canonical big-endian encoding: rule count, then per rule the inputs,
    /// the outputs and an optional alternative output list.
    ///
    /// A tag is a `u16` type id; atom constants use the reserved id 0 followed
    /// by the 64-bit atom value.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.rules.len() as u16).to_be_bytes());
        for rule in self.rules.values() {
            encode_tags(&rule.inputs, &mut out);
            encode_tags(&rule.outputs, &mut out);
            match &rule.alt_outputs {
                Some(alt) => {
                    out.push(1);
                    encode_tags(alt, &mut out);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, InterfaceError> {
        let mut rest = bytes;
        let count = read_u16(&mut rest)?;
        let mut rules = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let inputs = decode_tags(&mut rest)?;
            let outputs = decode_tags(&mut rest)?;
            let alt = match read_u8(&mut rest)? {
                0 => None,
                1 => Some(decode_tags(&mut rest)?),
                _ => return Err(InterfaceError::Malformed),
            };
            rules.push(Rule::new(inputs, outputs, alt).map_err(|_| InterfaceError::Malformed)?);
        }
        if !rest.is_empty() {
            return Err(InterfaceError::Malformed);
        }
        MessagingInterface::new(rules)
    }
}

impl fmt::Debug for MessagingInterface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.rules.values()).finish()
    }
}

fn encode_tags(tags: &[TypeTag], out: &mut Vec<u8>) {
    out.extend_from_slice(&(tags.len() as u16).to_be_bytes());
    for tag in tags {
        match tag {
            TypeTag::Type(t) => out.extend_from_slice(&t.0.to_be_bytes()),
            TypeTag::Atom(a) => {
                out.extend_from_slice(&0u16.to_be_bytes());
                out.extend_from_slice(&a.raw().to_be_bytes());
            }
        }
    }
}

fn read_u8(rest: &mut &[u8]) -> Result<u8, InterfaceError> {
    let (&b, tail) = rest.split_first().ok_or(InterfaceError::Malformed)?;
    *rest = tail;
    Ok(b)
}

fn read_u16(rest: &mut &[u8]) -> Result<u16, InterfaceError> {
    if rest.len() < 2 {
        return Err(InterfaceError::Malformed);
    }
    let v = u16::from_be_bytes([rest[0], rest[1]]);
    *rest = &rest[2..];
    Ok(v)
}

fn decode_tags(rest: &mut &[u8]) -> Result<Vec<TypeTag>, InterfaceError> {
    let n = read_u16(rest)?;
    let mut tags = Vec::with_capacity(n as usize);
    for _ in 0..n {
        match read_u16(rest)? {
            0 => {
                if rest.len() < 8 {
                    return Err(InterfaceError::Malformed);
                }
                let raw = u64::from_be_bytes(rest[..8].try_into().expect("8 bytes"));
                *rest = &rest[8..];
                tags.push(TypeTag::Atom(AtomValue::from_raw(raw).map_err(|_| InterfaceError::Malformed)?));
            }
            id => tags.push(TypeTag::Type(TypeId(id))),
        }
    }
    Ok(tags)
}

/// Common surface of dynamic and typed handles.
pub trait Handle {
    fn actor_ref(&self) -> &ActorRef;

    /// `None` for the wildcard interface of dynamic handles.
    fn interface(&self) -> Option<&MessagingInterface>;

    fn addr(&self) -> ActorAddr {
        self.actor_ref().addr()
    }
}

/// Handle with the wildcard interface: accepts any message.
#[derive(Clone)]
pub struct ActorHandle {
    actor: ActorRef,
}

impl ActorHandle {
    pub(crate) fn new(actor: ActorRef) -> Self {
        ActorHandle { actor }
    }

    pub fn addr(&self) -> ActorAddr {
        self.actor.addr()
    }
}

impl Handle for ActorHandle {
    fn actor_ref(&self) -> &ActorRef {
        &self.actor
    }

    fn interface(&self) -> Option<&MessagingInterface> {
        None
    }
}

impl fmt::Debug for ActorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActorHandle({})", self.addr())
    }
}

impl PartialEq for ActorHandle {
    fn eq(&self, other: &Self) -> bool {
        self.addr() == other.addr()
    }
}

/// Handle restricted to a messaging interface.
#[derive(Clone)]
pub struct TypedHandle {
    actor: ActorRef,
    iface: Arc<MessagingInterface>,
}

impl TypedHandle {
    pub(crate) fn new(actor: ActorRef, iface: Arc<MessagingInterface>) -> Self {
        TypedHandle { actor, iface }
    }

    pub fn addr(&self) -> ActorAddr {
        self.actor.addr()
    }

    pub fn interface(&self) -> &MessagingInterface {
        &self.iface
    }

    /// A handle to the same actor restricted to `target`, which must be a
    /// subset of this handle's interface.
    pub fn narrow(&self, target: &MessagingInterface) -> Result<TypedHandle, InterfaceError> {
        if !target.is_subset(&self.iface) {
            return Err(InterfaceError::Mismatch(format!(
                "{target:?} is not a subset of {:?}",
                self.iface
            )));
        }
        Ok(TypedHandle {
            actor: self.actor.clone(),
            iface: Arc::new(target.clone()),
        })
    }

    /// Drops the interface, producing a dynamic handle. This conversion is
    /// never implicit.
    pub fn erase(&self) -> ActorHandle {
        ActorHandle::new(self.actor.clone())
    }
}

impl Handle for TypedHandle {
    fn actor_ref(&self) -> &ActorRef {
        &self.actor
    }

    fn interface(&self) -> Option<&MessagingInterface> {
        Some(&self.iface)
    }
}

impl fmt::Debug for TypedHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TypedHandle({}, {:?})", self.addr(), self.iface)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::atom;
    use proptest::prelude::*;

    fn i32s() -> TypeTag {
        TypeTag::Type(TypeId::I32)
    }

    fn adder() -> MessagingInterface {
        MessagingInterface::new([Rule::replies_to(
            vec![TypeTag::Atom(atom("plus")), i32s(), i32s()],
            vec![i32s()],
        )
        .unwrap()])
        .unwrap()
    }

    fn calculator() -> MessagingInterface {
        MessagingInterface::new([
            Rule::replies_to(vec![TypeTag::Atom(atom("plus")), i32s(), i32s()], vec![i32s()]).unwrap(),
            Rule::replies_to(vec![TypeTag::Atom(atom("minus")), i32s(), i32s()], vec![i32s()]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn subset_examples() {
        assert!(adder().is_subset(&calculator()));
        assert!(!calculator().is_subset(&adder()));
        assert!(calculator().is_subset(&calculator()));
        assert!(MessagingInterface::empty().is_subset(&adder()));
    }

    #[test]
    fn rule_order_does_not_matter() {
        let mut rules: Vec<Rule> = calculator().rules().cloned().collect();
        rules.reverse();
        assert_eq!(MessagingInterface::new(rules).unwrap(), calculator());
    }

    #[test]
    fn conflicting_outputs_rejected() {
        let a = Rule::replies_to(vec![i32s()], vec![i32s()]).unwrap();
        let b = Rule::replies_to(vec![i32s()], vec![TypeTag::Type(TypeId::F32)]).unwrap();
        assert_eq!(
            MessagingInterface::new([a.clone(), b]).unwrap_err(),
            InterfaceError::Conflict(vec![i32s()])
        );
        // Duplicates collapse.
        assert_eq!(MessagingInterface::new([a.clone(), a]).unwrap().len(), 1);
        assert_eq!(Rule::reacts_to(vec![]).unwrap_err(), InterfaceError::EmptyInputs);
    }

    #[test]
    fn either_alternatives_must_match_exactly() {
        let url = vec![TypeTag::Atom(atom("url")), TypeTag::Type(TypeId::STR)];
        let ok = vec![TypeTag::Atom(atom("ok")), TypeTag::Type(TypeId::STR)];
        let err = vec![TypeTag::Atom(atom("error"))];
        let with_alt = MessagingInterface::new([Rule::replies_either(url.clone(), ok.clone(), err).unwrap()]).unwrap();
        let without = MessagingInterface::new([Rule::replies_to(url, ok).unwrap()]).unwrap();
        assert!(!without.is_subset(&with_alt));
        assert!(!with_alt.is_subset(&without));
    }

    #[test]
    fn message_acceptance() {
        let calc = calculator();
        assert!(calc.accepts(&crate::message!(atom("plus"), 1i32, 2i32)));
        assert!(calc.accepts(&crate::message!(atom("minus"), 1i32, 2i32)));
        assert!(!calc.accepts(&crate::message!(atom("times"), 1i32, 2i32)));
        assert!(!calc.accepts(&crate::message!(atom("plus"), 1i64, 2i32)));
        assert!(!calc.accepts(&crate::message!(atom("plus"), 1i32)));
    }

    #[test]
    fn canonical_encoding() {
        let bytes = adder().encode();
        let mut expected = vec![0, 1, 0, 3, 0, 0];
        expected.extend_from_slice(&atom("plus").raw().to_be_bytes());
        expected.extend_from_slice(&[0, 4, 0, 4, 0, 1, 0, 4, 0]);
        assert_eq!(bytes, expected);
        assert_eq!(MessagingInterface::decode(&bytes).unwrap(), adder());
        assert!(MessagingInterface::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    fn arb_tag() -> impl Strategy<Value = TypeTag> {
        prop_oneof![
            (1u16..16).prop_map(|t| TypeTag::Type(TypeId(t))),
            prop::sample::select(vec!["plus", "minus", "get", "put"]).prop_map(|a| TypeTag::Atom(atom(a))),
        ]
    }

    fn arb_rule() -> impl Strategy<Value = Rule> {
        (
            prop::collection::vec(arb_tag(), 1..3),
            prop::collection::vec(arb_tag(), 0..2),
            prop::option::of(prop::collection::vec(arb_tag(), 0..2)),
        )
            .prop_map(|(i, o, a)| Rule::new(i, o, a).unwrap())
    }

    pub(crate) fn arb_interface() -> impl Strategy<Value = MessagingInterface> {
        prop::collection::vec(arb_rule(), 0..5).prop_map(|rules| {
            let mut map = BTreeMap::new();
            for r in rules {
                map.entry(r.inputs.clone()).or_insert(r);
            }
            MessagingInterface::new(map.into_values()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn subset_is_a_partial_order(x in arb_interface(), y in arb_interface(), z in arb_interface()) {
            prop_assert!(x.is_subset(&x));
            if x.is_subset(&y) && y.is_subset(&x) {
                prop_assert_eq!(&x, &y);
            }
            if x.is_subset(&y) && y.is_subset(&z) {
                prop_assert!(x.is_subset(&z));
            }
        }

        #[test]
        fn encoding_round_trips(x in arb_interface()) {
            prop_assert_eq!(MessagingInterface::decode(&x.encode()).unwrap(), x);
        }

        #[test]
        fn subsets_of_a_superset(x in arb_interface(), mask in any::<u8>()) {
            let sub = MessagingInterface::new(
                x.rules().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, r)| r.clone()),
            ).unwrap();
            prop_assert!(sub.is_subset(&x));
        }
    }
}
