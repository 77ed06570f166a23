use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cafx::atom::{atom, AtomConstant};
use cafx::behavior::{case, others, Behavior};
use cafx::interface::{Rule, TypeTag};
use cafx::message::TypeId;
use cafx::runtime::{parse_down, ExitReason, RequestError, SendError, SpawnOptions, EXIT_ATOM};
use cafx::{behavior, message, Context, Handle, MessagingInterface, Runtime, ScopedActor};

type PlusAtom = AtomConstant<{ atom("plus").raw() }>;
type ResultAtom = AtomConstant<{ atom("result").raw() }>;
type GoAtom = AtomConstant<{ atom("go").raw() }>;
type OtherAtom = AtomConstant<{ atom("other").raw() }>;
type QuitAtom = AtomConstant<{ atom("quit").raw() }>;

const WAIT: Duration = Duration::from_secs(5);

fn math(_: &mut Context) -> Behavior {
    behavior![case(|_: &mut Context, _: PlusAtom, a: i32, b: i32| (ResultAtom::default(), a + b))]
}

fn expect_down(me: &mut ScopedActor) -> ExitReason {
    let m = me.receive_message(WAIT).expect("down message");
    parse_down(&m).expect("a down message").1
}

#[test]
fn scoped_request_to_math_actor() {
    let rt = Runtime::new();
    let calc = rt.spawn(math);
    let mut me = rt.scoped();
    let r = me.request(&calc, message!(atom("plus"), 10i32, 20i32), WAIT).unwrap();
    assert_eq!(r.atom_at(0), Some(atom("result")));
    assert_eq!(r.get_as::<i32>(1), Ok(30));
}

#[test]
fn interposed_message_waits_for_response() {
    let rt = Runtime::new();
    let log = Arc::new(Mutex::new(Vec::<String>::new()));
    // Sends an unrelated message to the requester before answering.
    let server = rt.spawn(|_| {
        behavior![case(|ctx: &mut Context, _: PlusAtom, a: i32, b: i32| {
            let requester = ctx.sender().unwrap();
            let _ = ctx.send(&requester, message!(atom("other")));
            (ResultAtom::default(), a + b)
        })]
    });
    let mut me = rt.scoped();
    let report = me.handle();
    let (l1, l2) = (log.clone(), log.clone());
    let client = rt.spawn(move |_| {
        behavior![
            case(move |ctx: &mut Context, _: GoAtom| {
                let l = l1.clone();
                ctx.request(&server, message!(atom("plus"), 10i32, 20i32), None)
                    .then(move |_: &mut Context, _: ResultAtom, v: i32| {
                        l.lock().unwrap().push(format!("result:{v}"));
                    })
                    .unwrap();
            }),
            case(move |ctx: &mut Context, _: OtherAtom| {
                l2.lock().unwrap().push("other".into());
                let _ = ctx.send(&report, message!(atom("done")));
            }),
        ]
    });
    me.send(&client, message!(atom("go"))).unwrap();
    me.receive_message(WAIT).expect("client finished");
    assert_eq!(*log.lock().unwrap(), ["result:30", "other"]);
}

fn requester(target: cafx::ActorHandle, timeout: Option<Duration>, report: cafx::ActorHandle) -> Behavior {
    behavior![case(move |ctx: &mut Context, _: GoAtom| {
        let (ok, err) = (report.clone(), report.clone());
        ctx.request(&target, message!(atom("plus"), 1i32, 2i32), timeout)
            .on_error(move |ctx, e| {
                let text = match e {
                    RequestError::Timeout => "timeout".to_string(),
                    RequestError::Down(r) => format!("down:{}", r.code()),
                    other => format!("{other:?}"),
                };
                let _ = ctx.send(&err, message!(text));
            })
            .then(move |ctx: &mut Context, _: ResultAtom, v: i32| {
                let _ = ctx.send(&ok, message!(format!("result:{v}")));
            })
            .unwrap();
    })]
}

#[test]
fn request_to_silent_actor_times_out() {
    let rt = Runtime::new();
    let silent = rt.spawn(|_| behavior![case(|_: &mut Context, _: QuitAtom| {})]);
    let mut me = rt.scoped();
    let client = rt.spawn({
        let report = me.handle();
        move |_| requester(silent, Some(Duration::from_millis(50)), report)
    });
    me.send(&client, message!(atom("go"))).unwrap();
    let m = me.receive_message(WAIT).unwrap();
    assert_eq!(m.get_as::<String>(0).unwrap(), "timeout");
}

#[test]
fn request_to_dead_actor_reports_down() {
    let rt = Runtime::new();
    let mut me = rt.scoped();
    let dead = rt.spawn(|ctx| {
        ctx.quit(ExitReason::user(16));
        Behavior::default()
    });
    me.monitor(&dead);
    assert_eq!(expect_down(&mut me), ExitReason::User(16));
    let client = rt.spawn({
        let report = me.handle();
        move |_| requester(dead, None, report)
    });
    me.monitor(&client);
    me.send(&client, message!(atom("go"))).unwrap();
    let m = me.receive_message(WAIT).unwrap();
    assert!(m.get_as::<String>(0).unwrap().starts_with("down:"), "{m:?}");
    assert!(me.receive_message(Duration::from_millis(100)).is_none(), "requester survives");
}

#[test]
fn failed_request_without_handler_kills_requester() {
    let rt = Runtime::new();
    let mut me = rt.scoped();
    let silent = rt.spawn(|_| behavior![case(|_: &mut Context, _: QuitAtom| {})]);
    let client = rt.spawn(move |_| {
        behavior![case(move |ctx: &mut Context, _: GoAtom| {
            ctx.request(&silent, message!(atom("plus"), 1i32, 2i32), Some(Duration::from_millis(20)))
                .then(|_: &mut Context, _: ResultAtom, _: i32| {})
                .unwrap();
        })]
    });
    me.monitor(&client);
    me.send(&client, message!(atom("go"))).unwrap();
    let reason = expect_down(&mut me);
    assert!(!reason.is_normal());
}

#[test]
fn typed_spawn_and_send_checks() {
    let rt = Runtime::new();
    let iface = MessagingInterface::new([Rule::replies_to(
        vec![TypeTag::Atom(atom("plus")), TypeTag::Type(TypeId::I32), TypeTag::Type(TypeId::I32)],
        vec![TypeTag::Atom(atom("result")), TypeTag::Type(TypeId::I32)],
    )
    .unwrap()])
    .unwrap();
    let typed = rt.spawn_typed(iface.clone(), math).unwrap();
    assert_eq!(rt.send(&typed, message!("wrong")), Err(SendError::TypeMismatch));
    let mut me = rt.scoped();
    let r = me.request(&typed, message!(atom("plus"), 10i32, 20i32), WAIT).unwrap();
    assert_eq!(r.get_as::<i32>(1), Ok(30));
    let bad = rt.spawn_typed(iface, |_| behavior![others(|_, _| {})]);
    assert!(bad.is_err());
}

#[test]
fn per_sender_order_is_preserved() {
    let rt = Runtime::new();
    let mut me = rt.scoped();
    let report = me.handle();
    let receiver = rt.spawn(move |ctx| {
        ctx.set_state([0u32; 2]);
        behavior![case(move |ctx: &mut Context, sender: u32, seq: u32| {
            let next = ctx.state_mut::<[u32; 2]>().unwrap();
            assert_eq!(next[sender as usize], seq, "sender {sender} out of order");
            next[sender as usize] += 1;
            if next.iter().sum::<u32>() == 2000 {
                let _ = ctx.send(&report, message!(atom("done")));
            }
        })]
    });
    for s in 0..2u32 {
        let r = receiver.clone();
        let sender = rt.spawn(move |ctx| {
            for i in 0..1000u32 {
                let _ = ctx.send(&r, message!(s, i));
            }
            ctx.quit(ExitReason::Normal);
            Behavior::default()
        });
        let _ = sender;
    }
    assert_eq!(me.receive_message(WAIT).unwrap().atom_at(0), Some(atom("done")));
}

#[test]
fn become_reexamines_skipped_messages() {
    let rt = Runtime::new();
    let mut me = rt.scoped();
    let report = me.handle();
    let actor = rt.spawn(move |_| {
        behavior![case(move |ctx: &mut Context, _: GoAtom| {
            let r = report.clone();
            let _ = ctx.send(&r, message!("retained", ctx.retained_len() as u64));
            ctx.become_(behavior![case(move |ctx: &mut Context, s: String| {
                let _ = ctx.send(&r, message!(s));
            })])
            .unwrap();
        })]
    });
    me.send(&actor, message!("early")).unwrap();
    std::thread::sleep(Duration::from_millis(20));
    me.send(&actor, message!(atom("go"))).unwrap();
    me.send(&actor, message!("late")).unwrap();
    let first = me.receive_message(WAIT).unwrap();
    assert_eq!(first.get_as::<u64>(1), Ok(1));
    assert_eq!(me.receive_message(WAIT).unwrap().get_as::<String>(0).unwrap(), "early");
    assert_eq!(me.receive_message(WAIT).unwrap().get_as::<String>(0).unwrap(), "late");
}

#[test]
fn links_propagate_and_monitors_stack() {
    let rt = Runtime::new();
    let mut me = rt.scoped();
    let b = rt.spawn(|_| behavior![case(|ctx: &mut Context, _: QuitAtom| ctx.quit(ExitReason::user(16)))]);
    let b2 = b.clone();
    let a = rt.spawn(move |ctx| {
        ctx.link(&b2);
        behavior![case(|_: &mut Context, _: GoAtom| {})]
    });
    me.monitor(&a);
    me.monitor(&b);
    me.monitor(&b);
    me.send(&b, message!(atom("quit"))).unwrap();
    let mut reasons = (0..3).map(|_| expect_down(&mut me)).collect::<Vec<_>>();
    reasons.sort_by_key(|r| r.code());
    assert_eq!(
        reasons,
        [ExitReason::User(16), ExitReason::User(16), ExitReason::linked(ExitReason::user(16))]
    );
}

#[test]
fn normal_exit_keeps_monitor_alive_and_trap_exit_converts() {
    let rt = Runtime::new();
    let mut me = rt.scoped();
    let quitter = rt.spawn(|ctx| {
        ctx.quit(ExitReason::Normal);
        Behavior::default()
    });
    me.monitor(&quitter);
    assert_eq!(expect_down(&mut me), ExitReason::Normal);

    let report = me.handle();
    let victim = rt.spawn(|_| behavior![case(|ctx: &mut Context, _: QuitAtom| ctx.quit(ExitReason::user(20)))]);
    let v2 = victim.clone();
    let trapper = rt.spawn(move |ctx| {
        ctx.trap_exit(true);
        ctx.link(&v2);
        behavior![others(move |ctx, m| {
            let _ = ctx.send(&report, m.clone());
        })]
    });
    me.monitor(&trapper);
    me.send(&victim, message!(atom("quit"))).unwrap();
    let m = me.receive_message(WAIT).unwrap();
    assert_eq!(m.atom_at(0), Some(EXIT_ATOM));
    assert_eq!(m.get_as::<u32>(2), Ok(ExitReason::user(20).code()));
    assert!(me.receive_message(Duration::from_millis(100)).is_none(), "trapper survives");
}

#[test]
fn linking_to_dead_actor_notifies_immediately() {
    let rt = Runtime::new();
    let mut me = rt.scoped();
    let dead = rt.spawn(|ctx| {
        ctx.quit(ExitReason::user(30));
        Behavior::default()
    });
    me.monitor(&dead);
    expect_down(&mut me);
    me.monitor(&dead);
    assert_eq!(expect_down(&mut me), ExitReason::User(30));
}

#[test]
fn detached_actor_may_block() {
    let rt = Runtime::with_scheduler(cafx::scheduler::WorkStealing::new(), 1, usize::MAX).unwrap();
    let mut me = rt.scoped();
    let report = me.handle();
    let blocker = rt.spawn_opts(SpawnOptions::Detached, move |_| {
        behavior![case(move |ctx: &mut Context, _: GoAtom| {
            std::thread::sleep(Duration::from_millis(100));
            let _ = ctx.send(&report, message!(atom("slept")));
        })]
    });
    let calc = rt.spawn(math);
    me.send(&blocker, message!(atom("go"))).unwrap();
    let r = me.request(&calc, message!(atom("plus"), 1i32, 1i32), Duration::from_millis(90)).unwrap();
    assert_eq!(r.get_as::<i32>(1), Ok(2));
    assert_eq!(me.receive_message(WAIT).unwrap().atom_at(0), Some(atom("slept")));
}

#[test]
fn callbacks_never_overlap() {
    let rt = Runtime::with_scheduler(cafx::scheduler::WorkStealing::new(), 4, 3).unwrap();
    let busy = Arc::new(AtomicBool::new(false));
    let count = Arc::new(AtomicUsize::new(0));
    let (b, c) = (busy.clone(), count.clone());
    let target = rt.spawn(move |_| {
        behavior![case(move |_: &mut Context, _: u64| {
            assert!(!b.swap(true, Ordering::SeqCst), "reentered");
            std::hint::spin_loop();
            b.store(false, Ordering::SeqCst);
            c.fetch_add(1, Ordering::SeqCst);
        })]
    });
    let threads: Vec<_> = (0..4)
        .map(|_| {
            let (sys, t) = (rt.system().clone(), target.clone());
            std::thread::spawn(move || {
                for i in 0..5000u64 {
                    sys.send(&t, message!(i)).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    let deadline = std::time::Instant::now() + WAIT;
    while count.load(Ordering::SeqCst) < 20_000 && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert_eq!(count.load(Ordering::SeqCst), 20_000);
    assert!(target.actor_ref().is_alive());
}

#[test]
fn no_message_is_lost_under_tight_budgets() {
    let rt = Runtime::with_scheduler(cafx::scheduler::WorkStealing::new(), 4, 1).unwrap();
    let (receivers, senders, per) = (4u64, 8u64, 2000u64);
    let total = Arc::new(AtomicUsize::new(0));
    let mut me = rt.scoped();
    let report = me.handle();
    let sinks: Vec<_> = (0..receivers)
        .map(|_| {
            let total = total.clone();
            let report = report.clone();
            rt.spawn(move |_| {
                behavior![case(move |ctx: &mut Context, _: u64| {
                    if total.fetch_add(1, Ordering::AcqRel) + 1 == (receivers * senders * per) as usize {
                        let _ = ctx.send(&report, message!(atom("done")));
                    }
                })]
            })
        })
        .collect();
    for s in 0..senders {
        let sinks = sinks.clone();
        rt.spawn(move |ctx| {
            for i in 0..per {
                for r in &sinks {
                    let _ = ctx.send(r, message!(s * per + i));
                }
            }
            ctx.quit(ExitReason::Normal);
            Behavior::default()
        });
    }
    let done = me.receive_message(Duration::from_secs(30));
    assert_eq!(total.load(Ordering::Acquire), (receivers * senders * per) as usize);
    assert_eq!(done.and_then(|m| m.atom_at(0)), Some(atom("done")));
}

#[test]
fn skipped_messages_keep_their_order() {
    let rt = Runtime::new();
    let mut me = rt.scoped();
    let report = me.handle();
    let actor = rt.spawn(move |_| {
        behavior![
            case(move |ctx: &mut Context, _: GoAtom| {
                let r = report.clone();
                ctx.become_(behavior![case(move |ctx: &mut Context, i: u32| {
                    let _ = ctx.send(&r, message!(i));
                })])
                .unwrap();
            }),
            case(|_: &mut Context, _: OtherAtom| {}),
        ]
    });
    for i in 0..50u32 {
        me.send(&actor, message!(i)).unwrap();
        if i % 7 == 0 {
            me.send(&actor, message!(atom("other"))).unwrap();
        }
    }
    me.send(&actor, message!(atom("go"))).unwrap();
    for i in 50..60u32 {
        me.send(&actor, message!(i)).unwrap();
    }
    for i in 0..60u32 {
        assert_eq!(me.receive_message(WAIT).unwrap().get_as::<u32>(0), Ok(i));
    }
}
