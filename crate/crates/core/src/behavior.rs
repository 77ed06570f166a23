//! Pattern matching over messages.
//!
//! A [`Behavior`] is an ordered list of [`MatchCase`]s. Cases are tried in
//! order and the first one whose pattern accepts the message runs; its return
//! value becomes the response.
//!
//! ```
//! use cafx::behavior::{case, on, others, to_guard, Behavior, Matcher, MatchOutcome};
//! use cafx::message;
//! use cafx::runtime::Context;
//!
//! let b = Behavior::new(vec![
//!     on(vec![to_guard(42i32)]).run(|_: &mut Context, i: i32| i + 1),
//!     case(|_: &mut Context, i: i32| i * 2),
//!     others(|_, _| {}),
//! ]);
//! match b.match_message(&message!(42i32)) {
//!     MatchOutcome::Matched(Some(reply)) => assert_eq!(reply.get_as::<i32>(0), Ok(43)),
//!     other => panic!("{other:?}"),
//! }
//! ```

use std::fmt;
use std::sync::Arc;

use crate::atom::{AtomConstant, AtomValue};
use crate::interface::{MessagingInterface, Rule, TypeTag};
use crate::message::{CustomType, Message, MessageError, MessageValue, TypeId, TypeRegistry, Value};
use crate::runtime::Context;

pub type GuardFn = Arc<dyn Fn(&Value) -> Option<Value> + Send + Sync>;

/// Matches one message element.
#[derive(Clone)]
pub enum Matcher {
    /// Any value of the given type (or exactly the given atom).
    TypeOnly(TypeTag),
    /// Exactly one value.
    ValueGuard { ty: TypeId, value: Value },
    /// Maps the value to itself or rejects it.
    Predicate { ty: TypeId, f: GuardFn },
    /// Converts the value into another representation or rejects it.
    Projection { input: TypeId, output: TypeTag, f: GuardFn },
}

/// Result of a successful element match.
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    Unchanged,
    Projected(Value),
}

impl Matcher {
    pub fn of<T: Element>() -> Matcher {
        T::matcher()
    }

    /// A guard on a typed predicate.
    pub fn guard<T, F>(f: F) -> Matcher
    where
        T: MessageValue + 'static,
        F: Fn(&T) -> Option<T> + Send + Sync + 'static,
    {
        Matcher::Predicate {
            ty: T::static_type(),
            f: Arc::new(move |v| T::from_value(v).and_then(|t| f(&t)).map(<T as MessageValue>::into_value)),
        }
    }

    /// A projection from `T` to `U`.
    pub fn projection<T, U, F>(f: F) -> Matcher
    where
        T: MessageValue + 'static,
        U: Element,
        F: Fn(&T) -> Option<U> + Send + Sync + 'static,
    {
        Matcher::Projection {
            input: T::static_type(),
            output: U::tag(),
            f: Arc::new(move |v| T::from_value(v).and_then(|t| f(&t)).map(U::into_value)),
        }
    }

    /// Signature position this matcher accepts.
    pub fn input_tag(&self) -> TypeTag {
        match self {
            Matcher::TypeOnly(tag) => *tag,
            Matcher::ValueGuard { ty, value } => match value.as_atom() {
                Some(a) => TypeTag::Atom(a),
                None => TypeTag::Type(*ty),
            },
            Matcher::Predicate { ty, .. } => TypeTag::Type(*ty),
            Matcher::Projection { input, .. } => TypeTag::Type(*input),
        }
    }

    /// Type of the value the callback receives.
    pub fn output_tag(&self) -> TypeTag {
        match self {
            Matcher::Projection { output, .. } => *output,
            other => other.input_tag(),
        }
    }

    fn output_type(&self) -> TypeId {
        self.output_tag().type_id()
    }

    /// Applies the matcher to an element of type `ty`.
    pub fn apply(&self, ty: TypeId, value: &Value) -> Option<Applied> {
        match self {
            Matcher::TypeOnly(tag) => tag.accepts(ty, value).then_some(Applied::Unchanged),
            Matcher::ValueGuard { ty: t, value: expected } => {
                (*t == ty && value == expected).then_some(Applied::Unchanged)
            }
            Matcher::Predicate { ty: t, f } => {
                if *t != ty {
                    return None;
                }
                f(value).map(Applied::Projected)
            }
            Matcher::Projection { input, f, .. } => {
                if *input != ty {
                    return None;
                }
                f(value).map(Applied::Projected)
            }
        }
    }
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::TypeOnly(tag) => write!(f, "{tag:?}"),
            Matcher::ValueGuard { value, .. } => write!(f, "={value:?}"),
            Matcher::Predicate { ty, .. } => write!(f, "{ty:?}?"),
            Matcher::Projection { input, output, .. } => write!(f, "{input:?}=>{output:?}"),
        }
    }
}

/// Lifts a value into a guard that accepts exactly that value.
pub fn to_guard(value: impl Into<Value>) -> Matcher {
    let value = value.into();
    let ty = TypeRegistry::global()
        .type_of(&value)
        .expect("guard value has an unregistered type");
    Matcher::ValueGuard { ty, value }
}

/// A type usable as a handler argument and as a reply element.
pub trait Element: Sized + Send + 'static {
    fn tag() -> TypeTag;
    fn extract(value: &Value) -> Option<Self>;
    fn into_value(self) -> Value;

    fn matcher() -> Matcher {
        Matcher::TypeOnly(Self::tag())
    }
}

impl<T: MessageValue + Send + 'static> Element for T {
    fn tag() -> TypeTag {
        TypeTag::Type(T::static_type())
    }
    fn extract(value: &Value) -> Option<Self> {
        T::from_value(value)
    }
    fn into_value(self) -> Value {
        MessageValue::into_value(self)
    }
}

impl<const V: u64> Element for AtomConstant<V> {
    fn tag() -> TypeTag {
        TypeTag::Atom(AtomConstant::<V>::value())
    }
    fn extract(value: &Value) -> Option<Self> {
        (value.as_atom() == Some(AtomConstant::<V>::value())).then_some(AtomConstant)
    }
    fn into_value(self) -> Value {
        Value::Atom(AtomConstant::<V>::value())
    }
}

/// Wrapper for registered custom types in handler signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct Custom<T>(pub T);

impl<T: CustomType> Element for Custom<T> {
    fn tag() -> TypeTag {
        TypeTag::Type(
            TypeRegistry::global()
                .custom_id::<T>()
                .expect("custom type used in a handler is not registered"),
        )
    }
    fn extract(value: &Value) -> Option<Self> {
        value.downcast_ref::<T>().cloned().map(Custom)
    }
    fn into_value(self) -> Value {
        Value::custom(self.0)
    }
}

/// Output signature of a case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputSig {
    Known { outputs: Vec<TypeTag>, alt: Option<Vec<TypeTag>> },
    /// Decided at runtime; the case cannot be part of a derived interface.
    Dynamic,
}

impl OutputSig {
    pub fn none() -> OutputSig {
        OutputSig::Known { outputs: Vec::new(), alt: None }
    }
}

/// A flat list of reply elements.
pub trait ReplyTuple {
    fn tags() -> Vec<TypeTag>;
    fn into_values(self) -> Vec<Value>;
}

impl ReplyTuple for () {
    fn tags() -> Vec<TypeTag> {
        Vec::new()
    }
    fn into_values(self) -> Vec<Value> {
        Vec::new()
    }
}

impl<T: Element> ReplyTuple for T {
    fn tags() -> Vec<TypeTag> {
        vec![T::tag()]
    }
    fn into_values(self) -> Vec<Value> {
        vec![self.into_value()]
    }
}

macro_rules! reply_tuple {
    ($($t:ident),+) => {
        impl<$($t: Element),+> ReplyTuple for ($($t,)+) {
            fn tags() -> Vec<TypeTag> {
                vec![$($t::tag()),+]
            }
            #[allow(non_snake_case)]
            fn into_values(self) -> Vec<Value> {
                let ($($t,)+) = self;
                vec![$($t.into_value()),+]
            }
        }
    };
}

reply_tuple!(A);
reply_tuple!(A, B);
reply_tuple!(A, B, C);
reply_tuple!(A, B, C, D);
reply_tuple!(A, B, C, D, E);

/// A reply that is either the regular output or the declared alternative.
#[derive(Debug, Clone, PartialEq)]
pub enum Either<L, R> {
    Left(L),
    Right(R),
}

/// Values a handler may return.
pub trait IntoReply {
    fn outputs() -> OutputSig;
    fn into_reply(self) -> Option<Message>;
}

fn reply_message(values: Vec<Value>) -> Message {
    Message::new(values).expect("reply elements are registered")
}

impl<T: ReplyTuple> IntoReply for T {
    fn outputs() -> OutputSig {
        OutputSig::Known { outputs: T::tags(), alt: None }
    }
    fn into_reply(self) -> Option<Message> {
        let values = self.into_values();
        (!values.is_empty()).then(|| reply_message(values))
    }
}

impl<L: ReplyTuple, R: ReplyTuple> IntoReply for Either<L, R> {
    fn outputs() -> OutputSig {
        OutputSig::Known { outputs: L::tags(), alt: Some(R::tags()) }
    }
    fn into_reply(self) -> Option<Message> {
        let values = match self {
            Either::Left(l) => l.into_values(),
            Either::Right(r) => r.into_values(),
        };
        (!values.is_empty()).then(|| reply_message(values))
    }
}

impl IntoReply for Message {
    fn outputs() -> OutputSig {
        OutputSig::Dynamic
    }
    fn into_reply(self) -> Option<Message> {
        Some(self)
    }
}

impl IntoReply for Option<Message> {
    fn outputs() -> OutputSig {
        OutputSig::Dynamic
    }
    fn into_reply(self) -> Option<Message> {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgIntent {
    ReadOnly,
    Mutable,
}

/// Arguments of a matched message as seen by a callback.
///
/// Elements replaced by a guard or projection are served from the projected
/// value; all others from the message. Mutable access goes through the
/// message's copy-on-write path and is only granted for arguments declared
/// [`ArgIntent::Mutable`].
pub struct Args<'a> {
    msg: &'a mut Message,
    projected: Vec<Option<Value>>,
    intents: &'a [ArgIntent],
}

impl<'a> Args<'a> {
    pub fn len(&self) -> usize {
        self.projected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projected.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Value> {
        match self.projected.get(index)? {
            Some(v) => Some(v),
            None => self.msg.values().get(index),
        }
    }

    pub fn get_as<T: Element>(&self, index: usize) -> Option<T> {
        self.get(index).and_then(T::extract)
    }

    pub fn get_custom<T: CustomType>(&self, index: usize) -> Option<&T> {
        self.get(index)?.downcast_ref::<T>()
    }

    /// The message being processed.
    pub fn message(&self) -> &Message {
        self.msg
    }

    fn check_mutable(&self, index: usize) -> Result<(), MessageError> {
        if index >= self.projected.len() {
            return Err(MessageError::OutOfRange { index, arity: self.projected.len() });
        }
        assert_eq!(
            self.intents.get(index),
            Some(&ArgIntent::Mutable),
            "argument {index} was not declared mutable"
        );
        Ok(())
    }

    /// Exclusive access to a builtin argument.
    pub fn get_mut<T: MessageValue>(&mut self, index: usize) -> Result<&mut T, MessageError> {
        self.check_mutable(index)?;
        match &mut self.projected[index] {
            Some(v) => {
                let actual = v.builtin_type().unwrap_or(TypeId(0));
                T::from_value_mut(v).ok_or(MessageError::TypeMismatch {
                    index,
                    expected: Some(T::static_type()),
                    actual,
                })
            }
            None => self.msg.get_mut::<T>(index),
        }
    }

    pub fn get_custom_mut<T: CustomType>(&mut self, index: usize) -> Result<&mut T, MessageError> {
        self.check_mutable(index)?;
        match &mut self.projected[index] {
            Some(v) => v.downcast_mut::<T>().ok_or(MessageError::TypeMismatch {
                index,
                expected: None,
                actual: TypeId(0),
            }),
            None => self.msg.get_custom_mut::<T>(index),
        }
    }
}

type Callback = Arc<dyn Fn(&mut Context, &mut Args<'_>) -> Option<Message> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    Trivial,
    Advanced,
    CatchAll,
}

/// One entry of a behavior.
#[derive(Clone)]
pub struct MatchCase {
    kind: CaseKind,
    pattern: Vec<Matcher>,
    intents: Vec<ArgIntent>,
    outputs: OutputSig,
    callback: Callback,
}

impl MatchCase {
    /// A case with an explicit pattern, per-argument intents and output
    /// signature.
    pub fn raw<F>(pattern: Vec<Matcher>, intents: Vec<ArgIntent>, outputs: OutputSig, f: F) -> MatchCase
    where
        F: Fn(&mut Context, &mut Args<'_>) -> Option<Message> + Send + Sync + 'static,
    {
        assert_eq!(pattern.len(), intents.len(), "one intent per matcher");
        MatchCase {
            kind: CaseKind::Advanced,
            pattern,
            intents,
            outputs,
            callback: Arc::new(f),
        }
    }

    pub fn kind(&self) -> CaseKind {
        self.kind
    }

    pub fn pattern(&self) -> &[Matcher] {
        &self.pattern
    }

    pub fn intents(&self) -> &[ArgIntent] {
        &self.intents
    }

    pub fn outputs(&self) -> &OutputSig {
        &self.outputs
    }

    pub fn input_tags(&self) -> Vec<TypeTag> {
        self.pattern.iter().map(Matcher::input_tag).collect()
    }

    /// Runs the pattern; returns projected values on success.
    fn try_match(&self, msg: &Message) -> Option<Vec<Option<Value>>> {
        if self.kind == CaseKind::CatchAll {
            return Some(Vec::new());
        }
        if self.pattern.len() != msg.len() {
            return None;
        }
        let mut projected = Vec::with_capacity(self.pattern.len());
        for ((m, ty), v) in self.pattern.iter().zip(msg.signature()).zip(msg.values()) {
            match m.apply(*ty, v)? {
                Applied::Unchanged => projected.push(None),
                Applied::Projected(p) => projected.push(Some(p)),
            }
        }
        Some(projected)
    }

    fn invoke(&self, ctx: &mut Context, msg: &mut Message, projected: Vec<Option<Value>>) -> Option<Message> {
        if self.intents.contains(&ArgIntent::Mutable) {
            msg.detach();
        }
        let mut args = Args {
            msg,
            projected,
            intents: &self.intents,
        };
        (self.callback)(ctx, &mut args)
    }
}

impl fmt::Debug for MatchCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatchCase")
            .field("kind", &self.kind)
            .field("pattern", &self.pattern)
            .field("outputs", &self.outputs)
            .finish()
    }
}

/// Typed callbacks: `Fn(&mut Context, A1, ..., An) -> R`.
pub trait Handler<Marker>: Send + Sync + 'static {
    fn matchers() -> Vec<Matcher>;
    fn arg_types() -> Vec<TypeId>;
    fn outputs() -> OutputSig;
    fn call(&self, ctx: &mut Context, args: &Args<'_>) -> Option<Option<Message>>;
}

macro_rules! handler_impl {
    ($($a:ident $i:tt),*) => {
        impl<F, R, $($a),*> Handler<(R, $($a,)*)> for F
        where
            F: Fn(&mut Context $(, $a)*) -> R + Send + Sync + 'static,
            R: IntoReply,
            $($a: Element,)*
        {
            fn matchers() -> Vec<Matcher> {
                vec![$($a::matcher()),*]
            }
            fn arg_types() -> Vec<TypeId> {
                vec![$($a::tag().type_id()),*]
            }
            fn outputs() -> OutputSig {
                R::outputs()
            }
            #[allow(unused_variables)]
            fn call(&self, ctx: &mut Context, args: &Args<'_>) -> Option<Option<Message>> {
                Some(self(ctx $(, args.get_as::<$a>($i)?)*).into_reply())
            }
        }
    };
}

handler_impl!();
handler_impl!(A1 0);
handler_impl!(A1 0, A2 1);
handler_impl!(A1 0, A2 1, A3 2);
handler_impl!(A1 0, A2 1, A3 2, A4 3);
handler_impl!(A1 0, A2 1, A3 2, A4 3, A5 4);
handler_impl!(A1 0, A2 1, A3 2, A4 3, A5 4, A6 5);

fn typed_case<M, H: Handler<M>>(kind: CaseKind, pattern: Vec<Matcher>, handler: H) -> MatchCase {
    let intents = vec![ArgIntent::ReadOnly; pattern.len()];
    MatchCase {
        kind,
        pattern,
        intents,
        outputs: H::outputs(),
        callback: Arc::new(move |ctx, args| handler.call(ctx, args).flatten()),
    }
}

/// A trivial case: the pattern is derived from the handler's argument types.
pub fn case<M, H: Handler<M>>(handler: H) -> MatchCase {
    typed_case(CaseKind::Trivial, H::matchers(), handler)
}

/// Starts an advanced case from a list of matchers.
pub fn on(pattern: Vec<Matcher>) -> OnBuilder {
    OnBuilder { pattern }
}

pub struct OnBuilder {
    pattern: Vec<Matcher>,
}

impl OnBuilder {
    /// Binds the handler. Panics when the handler's argument types do not
    /// fit the values the matchers produce.
    pub fn run<M, H: Handler<M>>(self, handler: H) -> MatchCase {
        let produced: Vec<TypeId> = self.pattern.iter().map(Matcher::output_type).collect();
        assert_eq!(
            produced,
            H::arg_types(),
            "handler arguments do not fit the pattern {:?}",
            self.pattern
        );
        typed_case(CaseKind::Advanced, self.pattern, handler)
    }

    /// Binds a raw callback with per-argument intents.
    pub fn run_raw<F>(self, intents: Vec<ArgIntent>, outputs: OutputSig, f: F) -> MatchCase
    where
        F: Fn(&mut Context, &mut Args<'_>) -> Option<Message> + Send + Sync + 'static,
    {
        MatchCase::raw(self.pattern, intents, outputs, f)
    }
}

/// The catch-all case. Matches anything and never produces a response.
pub fn others<F>(f: F) -> MatchCase
where
    F: Fn(&mut Context, &Message) + Send + Sync + 'static,
{
    MatchCase {
        kind: CaseKind::CatchAll,
        pattern: Vec::new(),
        intents: Vec::new(),
        outputs: OutputSig::none(),
        callback: Arc::new(move |ctx, args| {
            f(ctx, args.message());
            None
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatchOutcome {
    Matched(Option<Message>),
    NoMatch,
}

impl MatchOutcome {
    pub fn is_match(&self) -> bool {
        matches!(self, MatchOutcome::Matched(_))
    }
}

/// Ordered, immutable list of cases. Cheap to clone.
#[derive(Clone, Default)]
pub struct Behavior {
    cases: Arc<[MatchCase]>,
}

impl Behavior {
    pub fn new(cases: Vec<MatchCase>) -> Behavior {
        Behavior { cases: cases.into() }
    }

    pub fn cases(&self) -> &[MatchCase] {
        &self.cases
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Index of the first case accepting `msg`, with the projected values.
    fn find(&self, msg: &Message) -> Option<(usize, Vec<Option<Value>>)> {
        self.cases
            .iter()
            .enumerate()
            .find_map(|(i, c)| c.try_match(msg).map(|p| (i, p)))
    }

    /// Dispatches `msg` to the first matching case.
    pub fn apply(&self, ctx: &mut Context, msg: &mut Message) -> MatchOutcome {
        match self.find(msg) {
            Some((i, projected)) => MatchOutcome::Matched(self.cases[i].invoke(ctx, msg, projected)),
            None => MatchOutcome::NoMatch,
        }
    }

    /// Matches outside of any actor, with a standalone context.
    pub fn match_message(&self, msg: &Message) -> MatchOutcome {
        let mut ctx = Context::standalone();
        let mut msg = msg.clone();
        self.apply(&mut ctx, &mut msg)
    }

    /// Which case would fire, without running it.
    pub fn matching_case(&self, msg: &Message) -> Option<usize> {
        self.find(msg).map(|(i, _)| i)
    }
}

impl fmt::Debug for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.cases.iter()).finish()
    }
}

/// Builds a behavior from a list of cases.
#[macro_export]
macro_rules! behavior {
    ($($case:expr),* $(,)?) => {
        $crate::behavior::Behavior::new(vec![$($case),*])
    };
}

/// The interface implemented by `behavior`, or `None` when it is dynamic
/// (a catch-all case, a case with runtime-decided outputs, or two cases with
/// the same inputs but different outputs).
pub fn derive_interface(behavior: &Behavior) -> Option<MessagingInterface> {
    let mut rules = Vec::with_capacity(behavior.cases.len());
    for c in behavior.cases.iter() {
        if c.kind == CaseKind::CatchAll {
            return None;
        }
        let OutputSig::Known { outputs, alt } = &c.outputs else {
            return None;
        };
        rules.push(Rule::new(c.input_tags(), outputs.clone(), alt.clone()).ok()?);
    }
    MessagingInterface::new(rules).ok()
}

/// Convenience for atom values in patterns.
pub fn atom_matcher(a: AtomValue) -> Matcher {
    Matcher::TypeOnly(TypeTag::Atom(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::atom;
    use crate::message;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    type PlusAtom = AtomConstant<{ atom("plus").raw() }>;
    type MinusAtom = AtomConstant<{ atom("minus").raw() }>;
    type ResultAtom = AtomConstant<{ atom("result").raw() }>;

    fn odd_val(i: &i32) -> Option<i32> {
        (i % 2 == 1 || i % 2 == -1).then_some(*i)
    }

    #[allow(clippy::ptr_arg)]
    fn str_float(s: &String) -> Option<f32> {
        s.parse::<f32>().ok()
    }

    /// Five cases, recording which one fired and with what.
    fn listing(log: Arc<Mutex<Vec<String>>>) -> Behavior {
        let (l1, l2, l3, l4, l5) = (log.clone(), log.clone(), log.clone(), log.clone(), log);
        behavior![
            on(vec![to_guard(42i32)]).run(move |_: &mut Context, i: i32| {
                assert_eq!(i, 42);
                l1.lock().unwrap().push(format!("42:{i}"));
            }),
            on(vec![Matcher::guard(odd_val)]).run(move |_: &mut Context, i: i32| {
                assert!(i % 2 != 0);
                l2.lock().unwrap().push(format!("odd:{i}"));
            }),
            case(move |_: &mut Context, i: i32| {
                assert!(i % 2 == 0);
                l3.lock().unwrap().push(format!("int:{i}"));
            }),
            on(vec![Matcher::projection(str_float)]).run(move |_: &mut Context, f: f32| {
                l4.lock().unwrap().push(format!("float:{f}"));
            }),
            case(move |_: &mut Context, s: String| {
                l5.lock().unwrap().push(format!("str:{s}"));
            }),
        ]
    }

    #[test]
    fn guard_from_value() {
        let g = to_guard(42i32);
        assert_eq!(g.apply(TypeId::I32, &Value::I32(42)), Some(Applied::Unchanged));
        assert_eq!(g.apply(TypeId::I32, &Value::I32(41)), None);
        let p = to_guard(atom("plus"));
        assert_eq!(p.apply(TypeId::ATOM, &Value::Atom(atom("minus"))), None);
        assert_eq!(p.input_tag(), TypeTag::Atom(atom("plus")));
    }

    #[test]
    fn listing_routing() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let b = listing(log.clone());
        for m in [message!(42i32), message!(7i32), message!(8i32), message!("3.5"), message!("abc")] {
            assert!(b.match_message(&m).is_match());
        }
        assert_eq!(
            *log.lock().unwrap(),
            ["42:42", "odd:7", "int:8", "float:3.5", "str:abc"]
        );
    }

    #[test]
    fn arity_and_type_must_match_exactly() {
        let b = behavior![case(|_: &mut Context, _: i32| {})];
        assert_eq!(b.match_message(&message!(1i64)), MatchOutcome::NoMatch);
        assert_eq!(b.match_message(&message!(1i32, 2i32)), MatchOutcome::NoMatch);
        assert_eq!(b.match_message(&Message::empty()), MatchOutcome::NoMatch);
        assert!(b.match_message(&message!(1i32)).is_match());
    }

    #[test]
    fn tuple_return_becomes_response() {
        let b = behavior![
            case(|_: &mut Context, _: PlusAtom, a: i32, b: i32| (ResultAtom::default(), a + b)),
            case(|_: &mut Context, _: MinusAtom, a: i32, b: i32| (ResultAtom::default(), a - b)),
        ];
        let MatchOutcome::Matched(Some(r)) = b.match_message(&message!(atom("minus"), 10i32, 20i32)) else {
            panic!("no reply");
        };
        assert_eq!(r.atom_at(0), Some(atom("result")));
        assert_eq!(r.get_as::<i32>(1), Ok(-10));
        assert_eq!(b.match_message(&message!(atom("times"), 1i32, 2i32)), MatchOutcome::NoMatch);
    }

    #[test]
    fn first_match_wins() {
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        let b = behavior![
            case(|_: &mut Context, i: i32| i),
            case(move |_: &mut Context, _: i32| {
                h.fetch_add(1, Ordering::SeqCst);
            }),
        ];
        b.match_message(&message!(3i32));
        assert_eq!(hits.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn projection_short_circuits_left_to_right() {
        let evaluated = Arc::new(AtomicUsize::new(0));
        let e = evaluated.clone();
        let b = behavior![on(vec![
            Matcher::guard(|_: &i32| None),
            Matcher::guard(move |i: &i32| {
                e.fetch_add(1, Ordering::SeqCst);
                Some(*i)
            }),
        ])
        .run(|_: &mut Context, _: i32, _: i32| {})];
        assert_eq!(b.match_message(&message!(1i32, 2i32)), MatchOutcome::NoMatch);
        assert_eq!(evaluated.load(Ordering::SeqCst), 0);
    }

    #[test]
    #[should_panic(expected = "do not fit")]
    fn mistyped_advanced_case_panics() {
        let _ = on(vec![Matcher::projection(str_float)]).run(|_: &mut Context, _: String| {});
    }

    #[test]
    fn derived_interfaces() {
        let math = behavior![
            case(|_: &mut Context, _: PlusAtom, a: i32, b: i32| (ResultAtom::default(), a + b)),
            case(|_: &mut Context, _: MinusAtom, a: i32, b: i32| (ResultAtom::default(), a - b)),
        ];
        let result = vec![TypeTag::Atom(atom("result")), TypeTag::Type(TypeId::I32)];
        let expected = MessagingInterface::new([
            Rule::replies_to(
                vec![TypeTag::Atom(atom("plus")), TypeTag::Type(TypeId::I32), TypeTag::Type(TypeId::I32)],
                result.clone(),
            )
            .unwrap(),
            Rule::replies_to(
                vec![TypeTag::Atom(atom("minus")), TypeTag::Type(TypeId::I32), TypeTag::Type(TypeId::I32)],
                result,
            )
            .unwrap(),
        ])
        .unwrap();
        assert_eq!(derive_interface(&math), Some(expected));
        assert_eq!(derive_interface(&behavior![case(|_: &mut Context, _: i32| {}), others(|_, _| {})]), None);
        assert_eq!(derive_interface(&Behavior::default()), Some(MessagingInterface::empty()));
        let dynamic = behavior![case(|_: &mut Context, _: i32| Message::empty())];
        assert_eq!(derive_interface(&dynamic), None);
    }

    #[test]
    fn either_declares_alternative() {
        type OkAtom = AtomConstant<{ atom("ok").raw() }>;
        type ErrAtom = AtomConstant<{ atom("error").raw() }>;
        let b = behavior![case(|_: &mut Context, i: i32| -> Either<(OkAtom, i32), ErrAtom> {
            if i >= 0 {
                Either::Left((OkAtom::default(), i))
            } else {
                Either::Right(ErrAtom::default())
            }
        })];
        let iface = derive_interface(&b).unwrap();
        let rule = iface.rules().next().unwrap();
        assert_eq!(rule.alt_outputs(), Some(&[TypeTag::Atom(atom("error"))][..]));
        let MatchOutcome::Matched(Some(r)) = b.match_message(&message!(-1i32)) else { panic!() };
        assert_eq!(r.atom_at(0), Some(atom("error")));
    }

    #[test]
    fn read_only_handlers_never_copy() {
        let b = behavior![case(|_: &mut Context, s: String| s.len() as u64)];
        let m = message!("shared");
        let holders: Vec<Message> = (0..10).map(|_| m.clone()).collect();
        for h in &holders {
            b.match_message(h);
        }
        assert_eq!(m.copy_stats().deep_copies, 0);
    }

    #[test]
    fn mutable_intent_detaches_shared_message() {
        let b = behavior![MatchCase::raw(
            vec![Matcher::of::<i32>()],
            vec![ArgIntent::Mutable],
            OutputSig::Dynamic,
            |_, args| {
                *args.get_mut::<i32>(0).unwrap() += 1;
                Some(args.message().clone())
            },
        )];
        let original = message!(1i32);
        let MatchOutcome::Matched(Some(r)) = b.match_message(&original) else { panic!() };
        assert_eq!(r.get_as::<i32>(0), Ok(2));
        assert_eq!(original.get_as::<i32>(0), Ok(1));
        assert_eq!(original.copy_stats().deep_copies, 1);
    }

    #[test]
    fn catch_all_matches_anything_without_reply() {
        let b = behavior![others(|_, _| {})];
        assert_eq!(b.match_message(&message!(1u8, "x")), MatchOutcome::Matched(None));
        assert_eq!(b.match_message(&Message::empty()), MatchOutcome::Matched(None));
    }
}
