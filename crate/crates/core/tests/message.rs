use std::sync::{Arc, Barrier};
use std::thread;

use proptest::prelude::*;

use cafx::message::{deserialize, serialize, TypeRegistry};
use cafx::{message, Message};

#[test]
fn readers_never_see_foreign_mutations() {
    let original = message!(0u64, "snapshot", vec![1u8, 2, 3]);
    let readers = 6;
    let barrier = Arc::new(Barrier::new(readers + 1));
    let handles: Vec<_> = (0..readers)
        .map(|_| {
            let mine = original.clone();
            let b = barrier.clone();
            thread::spawn(move || {
                b.wait();
                for _ in 0..20_000 {
                    assert_eq!(mine.get_as::<u64>(0), Ok(0));
                    assert_eq!(mine.get_as::<String>(1).unwrap(), "snapshot");
                    assert_eq!(mine.get_as::<Vec<u8>>(2).unwrap(), [1, 2, 3]);
                }
            })
        })
        .collect();
    let mut mutator = original.clone();
    barrier.wait();
    for i in 1..=20_000u64 {
        *mutator.get_mut::<u64>(0).unwrap() = i;
        mutator.get_mut::<Vec<u8>>(2).unwrap().push(i as u8);
    }
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(original.get_as::<u64>(0), Ok(0));
    assert_eq!(mutator.get_as::<u64>(0), Ok(20_000));
    assert_eq!(mutator.copy_stats().deep_copies, 1);
}

proptest! {
    #[test]
    fn codec_round_trips_mixed_tuples(
        a in any::<i64>(),
        b in any::<bool>(),
        s in ".{0,40}",
        bytes in proptest::collection::vec(any::<u8>(), 0..100),
        f in any::<f64>().prop_filter("NaN breaks equality", |f| !f.is_nan()),
    ) {
        let m: Message = message!(a, b, s, bytes, f);
        let wire = serialize(&m, TypeRegistry::global()).unwrap();
        let back = deserialize(&wire, TypeRegistry::global()).unwrap();
        prop_assert!(back.content_eq(&m));
        prop_assert_eq!(serialize(&back, TypeRegistry::global()).unwrap(), wire);
    }
}
