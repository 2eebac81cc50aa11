use std::collections::HashMap;

use super::Interaction;

pub const CORE: usize = 5;

/// Repeats "drop items with fewer than 5 events, then users with fewer than 5
/// events" until nothing changes. Surviving events keep their input order.
pub fn five_core_filter(interactions: &[Interaction]) -> Vec<Interaction> {
    k_core_filter(interactions, CORE)
}

pub(crate) fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut kept: Vec<&Interaction> = interactions.iter().collect();
    loop {
        let before = kept.len();
        let items = counts(kept.iter().map(|e| e.item.as_str()));
        kept.retain(|e| items[e.item.as_str()] >= k);
        let users = counts(kept.iter().map(|e| e.user.as_str()));
        kept.retain(|e| users[e.user.as_str()] >= k);
        if kept.len() == before {
            break;
        }
    }
    kept.into_iter().cloned().collect()
}

fn counts<'a>(keys: impl Iterator<Item = &'a str>) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for k in keys {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn ev(user: &str, item: &str, ts: i64) -> Interaction {
        Interaction {
            user: user.into(),
            item: item.into(),
            rating: 1.0,
            timestamp: ts,
        }
    }

    /// Brute force: remove any single offending event-group at a time until
    /// every user and item has at least k events.
    fn brute_force(log: &[Interaction], k: usize) -> Vec<Interaction> {
        let mut cur = log.to_vec();
        loop {
            let mut users: BTreeMap<String, usize> = BTreeMap::new();
            let mut items: BTreeMap<String, usize> = BTreeMap::new();
            for e in &cur {
                *users.entry(e.user.clone()).or_default() += 1;
                *items.entry(e.item.clone()).or_default() += 1;
            }
            let bad_item = items.iter().find(|(_, &c)| c < k).map(|(i, _)| i.clone());
            let bad_user = users.iter().find(|(_, &c)| c < k).map(|(u, _)| u.clone());
            match (bad_item, bad_user) {
                (Some(i), _) => cur.retain(|e| e.item != i),
                (None, Some(u)) => cur.retain(|e| e.user != u),
                (None, None) => return cur,
            }
        }
    }

    #[test]
    fn already_dense_log_is_unchanged() {
        let mut log = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                log.push(ev(&format!("u{u}"), &format!("i{i}"), (u * 5 + i) as i64));
            }
        }
        assert_eq!(five_core_filter(&log), log);
    }

    #[test]
    fn twenty_event_log_matches_brute_force() {
        // A 5-core needs at least 25 events, so any 20-event log empties out;
        // the point is that the cascade agrees with the brute-force fixpoint.
        let mut log = Vec::new();
        for u in 1..=4 {
            for i in 1..=4 {
                log.push(ev(&format!("u{u}"), &format!("i{i}"), log.len() as i64));
            }
            log.push(ev(&format!("u{u}"), "rare", log.len() as i64));
        }
        assert_eq!(log.len(), 20);
        let got = five_core_filter(&log);
        assert_eq!(got, brute_force(&log, CORE));
        assert!(got.is_empty());
    }

    #[test]
    fn multi_round_cascade_matches_brute_force() {
        // dense 5x5 block
        let mut log = Vec::new();
        for u in 1..=5 {
            for i in 1..=5 {
                log.push(ev(&format!("u{u}"), &format!("i{i}"), log.len() as i64));
            }
        }
        // u6 loses its only-once item i6, drops below 5, which in turn
        // drops i7 in the next round
        for i in ["i1", "i2", "i3", "i6", "i7"] {
            log.push(ev("u6", i, log.len() as i64));
        }
        for u in 1..=4 {
            log.push(ev(&format!("u{u}"), "i7", log.len() as i64));
        }
        let got = five_core_filter(&log);
        assert_eq!(got, brute_force(&log, CORE));
        assert_eq!(got.len(), 25);
        assert!(got.iter().all(|e| e.user != "u6" && e.item != "i7"));
    }

    #[test]
    fn fixpoint_is_idempotent_on_random_logs() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        for _ in 0..20 {
            let log: Vec<Interaction> = (0..400)
                .map(|t| ev(&format!("u{}", next() % 30), &format!("i{}", next() % 40), t))
                .collect();
            let once = five_core_filter(&log);
            assert_eq!(five_core_filter(&once), once);
            let mut a = once.clone();
            let mut b = brute_force(&log, CORE);
            a.sort_by_key(|e| e.timestamp);
            b.sort_by_key(|e| e.timestamp);
            assert_eq!(a, b);
        }
    }
}
