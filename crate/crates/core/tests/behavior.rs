use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;

use cafx::atom::{atom, AtomConstant};
use cafx::behavior::{case, derive_interface, on, Behavior, MatchCase, MatchOutcome, Matcher};
use cafx::interface::signature_accepts;
use cafx::{message, Context, Message};

const NONE: usize = usize::MAX;

/// Case `k` accepts `i32` values with `i mod m == r` and records `k`.
fn residue_case(k: usize, m: i32, r: i32, fired: Arc<AtomicUsize>) -> MatchCase {
    on(vec![Matcher::guard(move |i: &i32| (i.rem_euclid(m) == r).then_some(*i))]).run(
        move |_: &mut Context, _: i32| {
            fired.store(k, Ordering::SeqCst);
        },
    )
}

fn fire(b: &Behavior, fired: &AtomicUsize, msg: &Message) -> usize {
    fired.store(NONE, Ordering::SeqCst);
    b.match_message(msg);
    fired.load(Ordering::SeqCst)
}

proptest! {
    #[test]
    fn first_matching_case_wins(
        rules in proptest::collection::vec((1i32..6, 0i32..6), 1..8),
        inputs in proptest::collection::vec(any::<i32>(), 1..32),
    ) {
        let fired = Arc::new(AtomicUsize::new(NONE));
        let cases = rules
            .iter()
            .enumerate()
            .map(|(k, &(m, r))| residue_case(k, m, r % m, fired.clone()))
            .collect();
        let b = Behavior::new(cases);
        for i in inputs {
            let expected = rules.iter().position(|&(m, r)| i.rem_euclid(m) == r % m).unwrap_or(NONE);
            prop_assert_eq!(fire(&b, &fired, &message!(i)), expected);
        }
    }

    #[test]
    fn disjoint_cases_commute(
        values in proptest::collection::btree_set(-50i32..50, 1..10),
        seed in any::<u64>(),
        probes in proptest::collection::vec(-60i32..60, 1..40),
    ) {
        let values: Vec<i32> = values.into_iter().collect();
        let fired = Arc::new(AtomicUsize::new(NONE));
        let build = |order: &[usize]| {
            Behavior::new(
                order
                    .iter()
                    .map(|&k| {
                        let v = values[k];
                        let f = fired.clone();
                        on(vec![Matcher::guard(move |i: &i32| (*i == v).then_some(*i))])
                            .run(move |_: &mut Context, _: i32| f.store(k, Ordering::SeqCst))
                    })
                    .collect(),
            )
        };
        let identity: Vec<usize> = (0..values.len()).collect();
        let mut shuffled = identity.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (a, b) = (build(&identity), build(&shuffled));
        for p in probes {
            prop_assert_eq!(fire(&a, &fired, &message!(p)), fire(&b, &fired, &message!(p)));
        }
    }

    #[test]
    fn responses_follow_declared_outputs(a in any::<i32>(), b in any::<i32>(), s in "[a-z]{0,12}") {
        type PlusAtom = AtomConstant<{ atom("plus").raw() }>;
        type LenAtom = AtomConstant<{ atom("len").raw() }>;
        type ResultAtom = AtomConstant<{ atom("result").raw() }>;
        let beh = Behavior::new(vec![
            case(|_: &mut Context, _: PlusAtom, a: i32, b: i32| (ResultAtom::default(), a.wrapping_add(b))),
            case(|_: &mut Context, _: LenAtom, s: String| (s.len() as u64, s)),
            case(|_: &mut Context, x: f64| x * 2.0),
        ]);
        let iface = derive_interface(&beh).expect("statically typed");
        for msg in [message!(atom("plus"), a, b), message!(atom("len"), s.clone()), message!(a as f64)] {
            let MatchOutcome::Matched(Some(resp)) = beh.match_message(&msg) else {
                return Err(TestCaseError::fail(format!("{msg:?} produced no response")));
            };
            let rule = iface.rule_for(&msg).expect("a rule for every handled input");
            prop_assert!(signature_accepts(rule.outputs(), &resp), "{resp:?} vs {:?}", rule.outputs());
        }
    }
}
