//! Three-way chronological partition of a history.
//!
//! Thresholds count from the newest end: `recent` holds the newest `r`
//! events, `mid_term` the next `l - r`, and `lifecycle` everything older.

use super::InteractionEvent;
use crate::error::{GemsError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamBundle<'a> {
    pub lifecycle: &'a [InteractionEvent],
    pub mid_term: &'a [InteractionEvent],
    pub recent: &'a [InteractionEvent],
}

pub fn check_thresholds(r: usize, l: usize) -> Result<()> {
    if r == 0 {
        return Err(GemsError::config("model.recent", "must be at least 1"));
    }
    if r >= l {
        return Err(GemsError::config(
            "model.lifecycle_threshold",
            format!("must exceed model.recent ({l} <= {r})"),
        ));
    }
    Ok(())
}

pub fn segment(events: &[InteractionEvent], r: usize, l: usize) -> Result<StreamBundle<'_>> {
    check_thresholds(r, l)?;
    let t = events.len();
    let recent_start = t.saturating_sub(r);
    let mid_start = t.saturating_sub(l);
    Ok(StreamBundle {
        lifecycle: &events[..mid_start],
        mid_term: &events[mid_start..recent_start],
        recent: &events[recent_start..],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn events(n: usize) -> Vec<InteractionEvent> {
        (0..n)
            .map(|i| InteractionEvent {
                vid: i as u64 + 1,
                aid: 0,
                tag: 0,
                ts: i as i64,
                pt: 1.0,
                dur: 1.0,
                label: 0,
            })
            .collect()
    }

    fn vids(xs: &[InteractionEvent]) -> Vec<u64> {
        xs.iter().map(|e| e.vid).collect()
    }

    #[test]
    fn counts_from_newest_end() {
        let ev = events(10);
        let b = segment(&ev, 3, 6).unwrap();
        assert_eq!(vids(b.recent), vec![8, 9, 10]);
        assert_eq!(vids(b.mid_term), vec![5, 6, 7]);
        assert_eq!(vids(b.lifecycle), vec![1, 2, 3, 4]);
    }

    #[test]
    fn short_history_fills_recent_only() {
        let ev = events(2);
        let b = segment(&ev, 3, 6).unwrap();
        assert_eq!(vids(b.recent), vec![1, 2]);
        assert!(b.mid_term.is_empty() && b.lifecycle.is_empty());
    }

    #[test]
    fn rejects_bad_thresholds() {
        let ev = events(4);
        assert!(matches!(segment(&ev, 6, 6), Err(GemsError::Config { .. })));
        assert!(segment(&ev, 0, 6).is_err());
    }

    proptest! {
        #[test]
        fn partitions_in_order(t in 0usize..300, r in 1usize..50, extra in 1usize..100) {
            let l = r + extra;
            let ev = events(t);
            let b = segment(&ev, r, l).unwrap();
            let joined: Vec<u64> = vids(b.lifecycle).into_iter()
                .chain(vids(b.mid_term)).chain(vids(b.recent)).collect();
            prop_assert_eq!(joined, vids(&ev));
            prop_assert_eq!(b.recent.len(), t.min(r));
            if t <= r { prop_assert!(b.mid_term.is_empty()); }
            if t <= l { prop_assert!(b.lifecycle.is_empty()); }
        }

        #[test]
        fn appending_shifts_one_event_per_boundary(t in 0usize..300, r in 1usize..50, extra in 1usize..100) {
            let l = r + extra;
            let ev = events(t + 1);
            let before = segment(&ev[..t], r, l).unwrap();
            let after = segment(&ev, r, l).unwrap();
            prop_assert_eq!(after.recent.last().map(|e| e.vid), Some(t as u64 + 1));
            // each segment changes size by at most one event
            prop_assert!(after.recent.len() - before.recent.len() <= 1);
            prop_assert!(after.mid_term.len().abs_diff(before.mid_term.len()) <= 1);
            prop_assert!(after.lifecycle.len() - before.lifecycle.len() <= 1);
            // full segments pass exactly their oldest event down
            if t >= r {
                prop_assert_eq!(after.recent.len(), before.recent.len());
                prop_assert_eq!(after.mid_term.last(), before.recent.first());
            }
            if t >= l {
                prop_assert_eq!(after.lifecycle.last(), before.mid_term.first());
            }
        }
    }
}
