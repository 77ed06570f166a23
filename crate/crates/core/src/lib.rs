//! An actor runtime: atoms, copy-on-write messages, lock-free mailboxes,
//! pattern-matching behaviors with typed messaging interfaces, a pluggable
//! work-stealing scheduler and a network layer with brokers.

pub mod atom;
pub mod behavior;
pub mod bench;
pub mod interface;
pub mod mailbox;
pub mod message;
pub mod middleman;
pub mod runtime;
pub mod scheduler;

pub use atom::{atom, AtomConstant, AtomValue};
pub use behavior::{case, on, others, Behavior};
pub use interface::{ActorAddr, ActorHandle, Handle, MessagingInterface, NodeId, TypedHandle};
pub use message::{Message, Value};
pub use runtime::{Context, ExitReason, Runtime, ScopedActor, System};
