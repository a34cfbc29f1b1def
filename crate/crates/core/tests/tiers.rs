use std::collections::HashSet;

use closet_core::retrieval::{augment_results, tier_sizes, tier_violations, Tier};
use proptest::prelude::*;

/// Independent check of the tier contract, written from the rules alone.
fn check(len: usize, n: usize, seed: u64) -> Result<(), TestCaseError> {
    let ranking: Vec<String> = (1..=len).map(|r| format!("r{r}")).collect();
    let res = augment_results(&ranking, n, seed).unwrap();
    let rank_of = |id: &str| id[1..].parse::<usize>().unwrap();
    let a = n.div_ceil(2);
    let b = n.div_ceil(4);
    prop_assert_eq!(tier_sizes(n), (a, b, n - a - b));
    prop_assert_eq!(res.entries.len(), n.min(len));
    let ids: HashSet<&str> = res.entries.iter().map(|e| e.id.as_str()).collect();
    prop_assert_eq!(ids.len(), res.entries.len());
    for (pos, e) in res.entries.iter().enumerate() {
        let r = rank_of(&e.id);
        prop_assert_eq!(r, e.rank);
        if pos < a {
            prop_assert_eq!(r, pos + 1);
            prop_assert_eq!(e.tier, Tier::Accurate);
        } else if pos < a + b {
            match e.tier {
                Tier::Approximate => prop_assert!((10..=100).contains(&r)),
                Tier::Heuristic => prop_assert!(len < 1000),
                Tier::Accurate => prop_assert!(false, "accurate entry past the prefix"),
            }
        } else {
            prop_assert_eq!(e.tier, Tier::Heuristic);
            if len >= 1000 {
                prop_assert!((500..=1000).contains(&r));
            }
        }
    }
    prop_assert!(tier_violations(&ranking, &res).is_empty());
    prop_assert_eq!(augment_results(&ranking, n, seed).unwrap(), res);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn full_rankings(n in 4usize..60, extra in 0usize..400, seed in any::<u64>()) {
        check(1000 + extra, n, seed)?;
    }

    #[test]
    fn clipped_rankings(len in 1usize..1000, n in 4usize..40, seed in any::<u64>()) {
        check(len, n, seed)?;
    }
}

#[test]
fn checker_catches_tampering() {
    let ranking: Vec<String> = (1..=1000).map(|r| format!("r{r}")).collect();
    let mut res = augment_results(&ranking, 8, 0).unwrap();
    assert!(tier_violations(&ranking, &res).is_empty());
    res.entries.swap(0, 1);
    assert!(!tier_violations(&ranking, &res).is_empty());
    let mut res = augment_results(&ranking, 8, 0).unwrap();
    res.entries[5] = res.entries[4].clone();
    assert!(!tier_violations(&ranking, &res).is_empty());
}
