use std::time::Duration;

use crate::atom::{atom, AtomConstant, AtomValue};
use crate::behavior::{case, Behavior};
use crate::interface::{ActorAddr, ActorHandle};
use crate::message;
use crate::runtime::{Context, ExitReason, System};

const SPAWN: AtomValue = atom("spawn");
const RESULT: AtomValue = atom("result");
const GO: AtomValue = atom("go");
const MSG: AtomValue = atom("msg");
const DONE: AtomValue = atom("done");
const TOKEN: AtomValue = atom("token");
const RING_DONE: AtomValue = atom("ring_done");
const FACTOR: AtomValue = atom("factor");
const FACTORED: AtomValue = atom("factored");
const ROW: AtomValue = atom("row");

type SpawnAtom = AtomConstant<{ SPAWN.raw() }>;
type ResultAtom = AtomConstant<{ RESULT.raw() }>;
type GoAtom = AtomConstant<{ GO.raw() }>;
type MsgAtom = AtomConstant<{ MSG.raw() }>;
type TokenAtom = AtomConstant<{ TOKEN.raw() }>;
type RingDoneAtom = AtomConstant<{ RING_DONE.raw() }>;
type FactorAtom = AtomConstant<{ FACTOR.raw() }>;
type FactoredAtom = AtomConstant<{ FACTORED.raw() }>;

const STALL: Duration = Duration::from_secs(600);

pub const DEFAULT_FACTOR_P: u64 = 100_000_007;
pub const DEFAULT_FACTOR_Q: u64 = 999_999_937;
/// Product of two nine-digit primes.
pub const DEFAULT_FACTOR_TARGET: u64 = DEFAULT_FACTOR_P * DEFAULT_FACTOR_Q;

fn wait_for(scoped: &mut crate::runtime::ScopedActor, head: AtomValue) -> crate::message::Message {
    loop {
        let msg = scoped.receive_message(STALL).expect("benchmark stalled");
        if msg.atom_at(0) == Some(head) {
            return msg;
        }
    }
}

// --- actor creation -------------------------------------------------------

struct Tree {
    parent: Option<ActorHandle>,
    waiting: u8,
    sum: u64,
}

fn tree_node(_: &mut Context) -> Behavior {
    crate::behavior![
        case(|ctx: &mut Context, _: SpawnAtom, level: u32| {
            let parent = ctx.sender();
            if level == 0 {
                if let Some(p) = parent {
                    let _ = ctx.send(&p, message!(RESULT, 1u64));
                }
                ctx.quit(ExitReason::Normal);
                return;
            }
            for _ in 0..2 {
                let child = ctx.spawn(tree_node);
                let _ = ctx.send(&child, message!(SPAWN, level - 1));
            }
            ctx.set_state(Tree {
                parent,
                waiting: 2,
                sum: 0,
            });
        }),
        case(|ctx: &mut Context, _: ResultAtom, v: u64| {
            let t = ctx.state_mut::<Tree>().expect("tree state");
            t.sum += v;
            t.waiting -= 1;
            if t.waiting == 0 {
                let (parent, sum) = (t.parent.take(), t.sum);
                if let Some(p) = parent {
                    let _ = ctx.send(&p, message!(RESULT, sum));
                }
                ctx.quit(ExitReason::Normal);
            }
        }),
    ]
}

/// Spawns a binary tree of depth `k`; every leaf answers 1 and inner nodes
/// sum their children. Returns the root's sum, 2^k.
pub fn creation(sys: &System, k: u32) -> u64 {
    let mut me = sys.scoped();
    let root = sys.spawn(tree_node);
    me.send(&root, message!(SPAWN, k)).expect("dynamic send");
    wait_for(&mut me, RESULT).get_as::<u64>(1).expect("sum")
}

// --- mailbox throughput ---------------------------------------------------

/// `senders` actors each send `msgs` messages to a single receiver. Returns
/// the number of messages the receiver counted.
pub fn mailbox(sys: &System, senders: u64, msgs: u64) -> u64 {
    let mut me = sys.scoped();
    let collector = me.handle();
    let total = senders * msgs;
    let receiver = sys.spawn(move |ctx| {
        ctx.set_state(0u64);
        if total == 0 {
            let _ = ctx.send(&collector, message!(DONE, 0u64));
            ctx.quit(ExitReason::Normal);
        }
        crate::behavior![case(move |ctx: &mut Context, _: MsgAtom| {
            let n = ctx.state_mut::<u64>().expect("counter");
            *n += 1;
            if *n == total {
                let n = *n;
                let _ = ctx.send(&collector, message!(DONE, n));
                ctx.quit(ExitReason::Normal);
            }
        })]
    });
    for _ in 0..senders {
        let target = receiver.clone();
        let sender = sys.spawn(move |_| {
            crate::behavior![case(move |ctx: &mut Context, _: GoAtom| {
                for _ in 0..msgs {
                    let _ = ctx.send(&target, message!(MSG));
                }
                ctx.quit(ExitReason::Normal);
            })]
        });
        me.send(&sender, message!(GO)).expect("dynamic send");
    }
    wait_for(&mut me, DONE).get_as::<u64>(1).expect("count")
}

// --- mixed case -----------------------------------------------------------

/// When the token value shrinks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decrement {
    /// Once per full trip around the ring.
    #[default]
    Round,
    /// On every hop.
    Hop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixedParams {
    pub rings: u32,
    pub ring_size: u32,
    pub token: u64,
    pub repetitions: u32,
    pub factor_target: u64,
    pub decrement: Decrement,
}

impl MixedParams {
    pub fn new(rings: u32, ring_size: u32, token: u64, repetitions: u32) -> MixedParams {
        MixedParams {
            rings,
            ring_size,
            token,
            repetitions,
            factor_target: DEFAULT_FACTOR_TARGET,
            decrement: Decrement::Round,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixedResult {
    /// Token passes carrying a positive value, over all rings and
    /// repetitions.
    pub hops: u64,
    /// Sum of the factor products computed by all workers.
    pub products: u64,
}

impl MixedResult {
    pub fn checksum(&self) -> u64 {
        self.hops ^ self.products
    }
}

const NO_ORIGIN: u32 = u32::MAX;

/// Ring member `index`. Token messages are `(token, value, hops, origin)`;
/// `origin` is the member that produced the terminating zero.
fn ring_member(index: u32, next: Option<ActorHandle>, master: ActorHandle, decrement: Decrement) -> Behavior {
    let leader = index == 0;
    crate::behavior![
        case(move |ctx: &mut Context, _: GoAtom, next_addr: ActorAddr, value: u64| {
            let next = ctx
                .system()
                .and_then(|s| s.resolve(next_addr))
                .expect("ring member alive");
            ctx.set_state(next.clone());
            let _ = ctx.send(&next, message!(TOKEN, value, 1u64, NO_ORIGIN));
        }),
        case(move |ctx: &mut Context, _: TokenAtom, value: u64, hops: u64, origin: u32| {
            let next = match &next {
                Some(n) => n.clone(),
                None => ctx.state::<ActorHandle>().expect("leader knows its successor").clone(),
            };
            if value == 0 {
                if origin == index {
                    let _ = ctx.send(&master, message!(RING_DONE, hops));
                } else {
                    let _ = ctx.send(&next, message!(TOKEN, 0u64, hops, origin));
                }
                ctx.quit(ExitReason::Normal);
                return;
            }
            let value = match decrement {
                Decrement::Hop => value - 1,
                Decrement::Round if leader => value - 1,
                Decrement::Round => value,
            };
            if value > 0 {
                let _ = ctx.send(&next, message!(TOKEN, value, hops + 1, NO_ORIGIN));
            } else {
                let _ = ctx.send(&next, message!(TOKEN, 0u64, hops, index));
            }
        }),
    ]
}

fn factor_worker(_: &mut Context) -> Behavior {
    crate::behavior![case(|ctx: &mut Context, _: FactorAtom, n: u64| {
        let product = factorize(n).iter().fold(1u64, |a, f| a.wrapping_mul(*f));
        ctx.quit(ExitReason::Normal);
        (FactoredAtom::default(), product)
    })]
}

struct Master {
    reps_left: u32,
    ring_done: bool,
    factor_done: bool,
    hops: u64,
    products: u64,
}

fn start_incarnation(ctx: &mut Context, p: &MixedParams) {
    let worker = ctx.spawn(factor_worker);
    let _ = ctx.send(&worker, message!(FACTOR, p.factor_target));
    let master = ctx.handle();
    let decrement = p.decrement;
    let m = master.clone();
    let leader = ctx.spawn(move |_| ring_member(0, None, m, decrement));
    let mut next = leader.clone();
    for i in (1..p.ring_size).rev() {
        let (succ, m) = (next.clone(), master.clone());
        next = ctx.spawn(move |_| ring_member(i, Some(succ), m, decrement));
    }
    let _ = ctx.send(&leader, message!(GO, next.addr(), p.token));
}

fn ring_master(p: MixedParams, collector: ActorHandle) -> Behavior {
    fn advance(ctx: &mut Context, p: &MixedParams, collector: &ActorHandle) {
        let m = ctx.state_mut::<Master>().expect("master state");
        if !(m.ring_done && m.factor_done) {
            return;
        }
        m.reps_left -= 1;
        m.ring_done = false;
        m.factor_done = false;
        if m.reps_left == 0 {
            let (hops, products) = (m.hops, m.products);
            let _ = ctx.send(collector, message!(DONE, hops, products));
            ctx.quit(ExitReason::Normal);
        } else {
            start_incarnation(ctx, p);
        }
    }
    let c2 = collector.clone();
    crate::behavior![
        case(move |ctx: &mut Context, _: GoAtom| {
            ctx.set_state(Master {
                reps_left: p.repetitions,
                ring_done: false,
                factor_done: false,
                hops: 0,
                products: 0,
            });
            start_incarnation(ctx, &p);
        }),
        case(move |ctx: &mut Context, _: RingDoneAtom, hops: u64| {
            let m = ctx.state_mut::<Master>().expect("master state");
            m.hops += hops;
            m.ring_done = true;
            advance(ctx, &p, &collector);
        }),
        case(move |ctx: &mut Context, _: FactoredAtom, product: u64| {
            let m = ctx.state_mut::<Master>().expect("master state");
            m.products = m.products.wrapping_add(product);
            m.factor_done = true;
            advance(ctx, &p, &c2);
        }),
    ]
}

/// Token rings that are torn down and rebuilt `repetitions` times, with a
/// factorization worker per ring and incarnation.
pub fn mixed(sys: &System, p: &MixedParams) -> MixedResult {
    assert!(p.rings >= 1 && p.ring_size >= 1 && p.token >= 1 && p.repetitions >= 1 && p.factor_target >= 2);
    let mut me = sys.scoped();
    let collector = me.handle();
    for _ in 0..p.rings {
        let (params, c) = (*p, collector.clone());
        let master = sys.spawn(move |_| ring_master(params, c));
        me.send(&master, message!(GO)).expect("dynamic send");
    }
    let mut result = MixedResult { hops: 0, products: 0 };
    for _ in 0..p.rings {
        let msg = wait_for(&mut me, DONE);
        result.hops += msg.get_as::<u64>(1).expect("hops");
        result.products = result.products.wrapping_add(msg.get_as::<u64>(2).expect("products"));
    }
    result
}

/// Prime factors of `n` in nondecreasing order, by trial division.
pub fn factorize(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    while n.is_multiple_of(2) && n > 1 {
        out.push(2);
        n /= 2;
    }
    let mut d = 3u64;
    while d <= n / d {
        while n.is_multiple_of(d) {
            out.push(d);
            n /= d;
        }
        d += 2;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

// --- mandelbrot -----------------------------------------------------------

/// Rectangle of the complex plane, `re` along x and `im` along y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Area {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl Default for Area {
    fn default() -> Self {
        Area {
            re_min: -1.5,
            re_max: 0.5,
            im_min: -1.0,
            im_max: 1.0,
        }
    }
}

/// Iterations until `z ← z² + c` leaves the radius-2 disk, capped at
/// `max_iter`.
pub fn escape_time(c_re: f64, c_im: f64, max_iter: u32) -> u32 {
    let (mut re, mut im) = (0.0f64, 0.0f64);
    for i in 1..=max_iter {
        let t = re * re - im * im + c_re;
        im = 2.0 * re * im + c_im;
        re = t;
        if re * re + im * im > 4.0 {
            return i;
        }
    }
    max_iter
}

/// Escape counts of row `y` of an `n`×`n` image of `area`.
pub fn mandelbrot_row(y: u32, n: u32, max_iter: u32, area: Area) -> Vec<u32> {
    let dx = (area.re_max - area.re_min) / n as f64;
    let dy = (area.im_max - area.im_min) / n as f64;
    let c_im = area.im_min + y as f64 * dy;
    (0..n)
        .map(|x| escape_time(area.re_min + x as f64 * dx, c_im, max_iter))
        .collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn row_bytes(row: &[u32]) -> Vec<u8> {
    row.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Single-threaded reference: FNV-1a over the little-endian iteration
/// counts in row-major order.
pub fn sequential_mandelbrot(n: u32, max_iter: u32, area: Area) -> u64 {
    (0..n).fold(FNV_OFFSET, |h, y| fnv1a(h, &row_bytes(&mandelbrot_row(y, n, max_iter, area))))
}

/// One actor per row; the collector hashes rows in order.
pub fn mandelbrot(sys: &System, n: u32, max_iter: u32, area: Area) -> u64 {
    assert!(n >= 1 && max_iter >= 1);
    let mut me = sys.scoped();
    let collector = me.handle();
    for y in 0..n {
        let c = collector.clone();
        let row = sys.spawn(move |_| {
            crate::behavior![case(move |ctx: &mut Context, _: GoAtom| {
                let bytes = row_bytes(&mandelbrot_row(y, n, max_iter, area));
                let _ = ctx.send(&c, message!(ROW, y, bytes));
                ctx.quit(ExitReason::Normal);
            })]
        });
        me.send(&row, message!(GO)).expect("dynamic send");
    }
    let mut rows: Vec<Option<Vec<u8>>> = vec![None; n as usize];
    for _ in 0..n {
        let msg = wait_for(&mut me, ROW);
        let y: u32 = msg.get_as(1).expect("row index");
        rows[y as usize] = Some(msg.get_as(2).expect("row data"));
    }
    rows.iter()
        .fold(FNV_OFFSET, |h, r| fnv1a(h, r.as_deref().expect("every row arrives")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Runtime;
    use crate::scheduler::WorkStealing;

    fn is_prime(n: u64) -> bool {
        n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
    }

    #[test]
    fn factorize_small() {
        assert_eq!(factorize(15), vec![3, 5]);
        assert_eq!(factorize(16), vec![2, 2, 2, 2]);
        assert_eq!(factorize(2), vec![2]);
        assert_eq!(factorize(97), vec![97]);
        assert_eq!(factorize(2 * 3 * 3 * 7 * 11), vec![2, 3, 3, 7, 11]);
    }

    #[test]
    fn default_target_is_two_primes() {
        assert!(is_prime(DEFAULT_FACTOR_P));
        assert!(is_prime(DEFAULT_FACTOR_Q));
        assert_eq!(DEFAULT_FACTOR_P.to_string().len(), 9);
        assert_eq!(DEFAULT_FACTOR_Q.to_string().len(), 9);
        assert_eq!(factorize(DEFAULT_FACTOR_TARGET), vec![DEFAULT_FACTOR_P, DEFAULT_FACTOR_Q]);
    }

    #[test]
    fn escape_fixed_points() {
        assert_eq!(escape_time(0.0, 0.0, 100), 100);
        assert_eq!(escape_time(2.0, 0.0, 100), 2);
        assert_eq!(escape_time(-1.0, 0.0, 50), 50);
    }

    #[test]
    fn row_covers_area() {
        let r = mandelbrot_row(0, 4, 10, Area::default());
        assert_eq!(r.len(), 4);
        assert_eq!(r[0], escape_time(-1.5, -1.0, 10));
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a(FNV_OFFSET, b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(FNV_OFFSET, b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(FNV_OFFSET, b"foobar"), 0x85944171f73967e8);
    }

    fn rt(workers: usize) -> Runtime {
        Runtime::with_scheduler(WorkStealing::new(), workers, usize::MAX).unwrap()
    }

    #[test]
    fn creation_small() {
        let rt = rt(2);
        assert_eq!(creation(&rt, 0), 1);
        assert_eq!(creation(&rt, 10), 1024);
    }

    #[test]
    fn mailbox_counts() {
        let rt = rt(2);
        assert_eq!(mailbox(&rt, 1, 1), 1);
        assert_eq!(mailbox(&rt, 8, 1000), 8000);
    }

    #[test]
    fn mixed_hop_accounting() {
        let rt = rt(2);
        let mut p = MixedParams::new(1, 4, 2, 1);
        p.factor_target = 15;
        let r = mixed(&rt, &p);
        assert_eq!(r.hops, 8);
        assert_eq!(r.products, 15);
        assert_eq!(r.checksum(), 8 ^ 15);

        p.decrement = Decrement::Hop;
        p.token = 6;
        assert_eq!(mixed(&rt, &p).hops, 6);

        let mut q = MixedParams::new(3, 5, 4, 2);
        q.factor_target = 21;
        let r = mixed(&rt, &q);
        assert_eq!(r.hops, 3 * 2 * 4 * 5);
        assert_eq!(r.products, 3 * 2 * 21);
    }

    #[test]
    fn single_member_ring() {
        let rt = rt(1);
        let mut p = MixedParams::new(2, 1, 3, 1);
        p.factor_target = 4;
        assert_eq!(mixed(&rt, &p).hops, 2 * 3);
    }

    #[test]
    fn mandelbrot_matches_oracle() {
        let rt = rt(2);
        assert_eq!(mandelbrot(&rt, 32, 50, Area::default()), sequential_mandelbrot(32, 50, Area::default()));
    }
}
