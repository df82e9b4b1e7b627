//! Offline consistency checks for recorded histories.

use std::collections::{BTreeMap, HashSet};

use super::history::{History, Kvs, OpEvent};
use crate::adict::{AdictOp, AdictResponse};
use crate::ads::Outcome;
use crate::crypto::ClientId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Linearizable,
    NotLinearizable,
    /// The search budget ran out before an answer was found.
    Inconclusive,
}

/// Searches for a linearization of `history` against [`Kvs`], in the style
/// of Wing and Gong with memoization of visited configurations. Aborted
/// operations have no effect and are left out; operations that never
/// completed may or may not have taken effect.
///
/// `budget` bounds the number of search nodes.
pub fn check_linearizable(history: &History, budget: u64) -> Verdict {
    let ops: Vec<&OpEvent> = history.ops.iter().filter(|e| !e.is_aborted()).collect();
    let mut search = Search {
        ops: &ops,
        memo: HashSet::new(),
        budget,
        exhausted: false,
    };
    let mut done = vec![false; ops.len()];
    if search.dfs(&mut done, Kvs::default()) {
        Verdict::Linearizable
    } else if search.exhausted {
        Verdict::Inconclusive
    } else {
        Verdict::NotLinearizable
    }
}

struct Search<'a> {
    ops: &'a [&'a OpEvent],
    memo: HashSet<(Vec<bool>, Kvs)>,
    budget: u64,
    exhausted: bool,
}

fn expected(e: &OpEvent) -> Option<&AdictResponse> {
    match &e.outcome {
        Some(Outcome::Done(r)) => Some(r),
        _ => None,
    }
}

impl Search<'_> {
    fn dfs(&mut self, done: &mut Vec<bool>, state: Kvs) -> bool {
        let pending = || self.ops.iter().zip(done.iter()).filter(|(_, d)| !**d).map(|(e, _)| *e);
        if pending().all(|e| !e.is_complete()) {
            return true;
        }
        if self.budget == 0 {
            self.exhausted = true;
            return false;
        }
        self.budget -= 1;
        if self.memo.contains(&(done.clone(), state.clone())) {
            return false;
        }
        // an op can go next only if it was invoked before every
        // outstanding op responded
        let horizon = pending().filter_map(|e| e.response).min().unwrap_or(u64::MAX);
        for i in 0..self.ops.len() {
            let e = self.ops[i];
            if done[i] || e.invoke >= horizon {
                continue;
            }
            let mut next = state.clone();
            let r = next.apply(&e.op);
            if expected(e).is_some_and(|want| *want != r) {
                continue;
            }
            done[i] = true;
            if self.dfs(done, next) {
                return true;
            }
            done[i] = false;
            if self.exhausted {
                return false;
            }
        }
        self.memo.insert((done.clone(), state));
        false
    }
}

/// One operation in a client's view: the op at `seqno`, invoked by `client`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewEntry {
    pub seqno: u64,
    pub client: ClientId,
    pub op: AdictOp,
    /// Aborted operations stay in the order but have no effect.
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ForkViolation {
    #[error("view of {viewer}: {client}'s op at {seqno} returned {got:?}, the view implies {want:?}")]
    Illegal {
        viewer: ClientId,
        client: ClientId,
        seqno: u64,
        got: AdictResponse,
        want: AdictResponse,
    },
    #[error("view of {viewer} misses its own op at {seqno:?}")]
    MissingOwn { viewer: ClientId, seqno: Option<u64> },
    #[error("view of {viewer} orders seqno {later} before {earlier}, against real time")]
    RealTime { viewer: ClientId, earlier: u64, later: u64 },
    #[error("views of {a} and {b} share the op at {seqno} but differ before it")]
    Join { a: ClientId, b: ClientId, seqno: u64 },
}

/// Checks that per-client `views` witness fork-linearizability of
/// `history`: each view is a legal sequential run of the key-value store
/// holding all completed operations of its client in real-time order, and
/// two views that share an operation agree on everything before it.
///
/// History operations are matched to view entries by client and seqno.
pub fn check_fork_linearizable(
    history: &History,
    views: &BTreeMap<ClientId, Vec<ViewEntry>>,
) -> Result<(), ForkViolation> {
    let by_id: BTreeMap<(ClientId, u64), &OpEvent> = history
        .ops
        .iter()
        .filter_map(|e| Some(((e.client, e.seqno?), e)))
        .collect();

    for (&viewer, view) in views {
        let mut kvs = Kvs::default();
        for v in view {
            if !v.success {
                continue;
            }
            let want = kvs.apply(&v.op);
            if let Some(got) = by_id.get(&(v.client, v.seqno)).and_then(|e| expected(e)) {
                if *got != want {
                    return Err(ForkViolation::Illegal {
                        viewer,
                        client: v.client,
                        seqno: v.seqno,
                        got: got.clone(),
                        want,
                    });
                }
            }
        }
        for e in history.of(viewer) {
            if e.is_complete() && !e.is_aborted() {
                let present = e.seqno.is_some_and(|s| view.iter().any(|v| v.client == viewer && v.seqno == s));
                if !present {
                    return Err(ForkViolation::MissingOwn { viewer, seqno: e.seqno });
                }
            }
        }
        let events: Vec<Option<&&OpEvent>> = view.iter().map(|v| by_id.get(&(v.client, v.seqno))).collect();
        for (i, a) in events.iter().enumerate() {
            for b in &events[i + 1..] {
                if let (Some(a), Some(b)) = (a, b) {
                    if b.precedes(a) {
                        return Err(ForkViolation::RealTime {
                            viewer,
                            earlier: b.seqno.unwrap_or_default(),
                            later: a.seqno.unwrap_or_default(),
                        });
                    }
                }
            }
        }
    }

    let ids: Vec<_> = views.keys().copied().collect();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let (va, vb) = (&views[&a], &views[&b]);
            for (pa, e) in va.iter().enumerate() {
                let Some(pb) = vb.iter().position(|x| x.client == e.client && x.seqno == e.seqno) else {
                    continue;
                };
                let same = pa == pb && va[..pa].iter().zip(&vb[..pb]).all(|(x, y)| x == y) && va[pa] == vb[pb];
                if !same {
                    return Err(ForkViolation::Join { a, b, seqno: e.seqno });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(k: &str, v: u8) -> AdictOp {
        AdictOp::put(k, vec![v])
    }

    fn event(c: u64, op: AdictOp, invoke: u64, response: u64, r: AdictResponse, seqno: u64) -> OpEvent {
        OpEvent {
            client: ClientId(c),
            op,
            invoke,
            response: Some(response),
            outcome: Some(Outcome::Done(r)),
            seqno: Some(seqno),
        }
    }

    fn history(ops: Vec<OpEvent>) -> History {
        let mut h = History::new();
        h.ops = ops;
        h
    }

    #[test]
    fn sequential_history_is_linearizable() {
        let h = history(vec![
            event(1, put("x", 1), 0, 1, AdictResponse::Nil, 1),
            event(1, AdictOp::get("x"), 2, 3, AdictResponse::Value(vec![1]), 2),
            event(2, AdictOp::del("x"), 4, 5, AdictResponse::Nil, 3),
            event(2, AdictOp::List, 6, 7, AdictResponse::Keys(vec![]), 4),
        ]);
        assert_eq!(check_linearizable(&h, 10_000), Verdict::Linearizable);
    }

    #[test]
    fn lost_update_is_caught() {
        let h = history(vec![
            event(1, put("x", 1), 0, 1, AdictResponse::Nil, 1),
            event(2, put("x", 2), 2, 3, AdictResponse::Nil, 2),
            event(1, AdictOp::get("x"), 4, 5, AdictResponse::Value(vec![1]), 3),
        ]);
        assert_eq!(check_linearizable(&h, 10_000), Verdict::NotLinearizable);
    }

    #[test]
    fn overlapping_ops_may_reorder() {
        // the get overlaps both puts and may see either
        let h = history(vec![
            event(1, put("x", 1), 0, 5, AdictResponse::Nil, 1),
            event(2, put("x", 2), 1, 6, AdictResponse::Nil, 2),
            event(3, AdictOp::get("x"), 2, 7, AdictResponse::Value(vec![1]), 3),
        ]);
        assert_eq!(check_linearizable(&h, 10_000), Verdict::Linearizable);
    }

    #[test]
    fn incomplete_op_may_take_effect() {
        let mut ops = vec![event(2, AdictOp::get("x"), 3, 4, AdictResponse::Value(vec![9]), 2)];
        ops.push(OpEvent {
            client: ClientId(1),
            op: put("x", 9),
            invoke: 0,
            response: None,
            outcome: None,
            seqno: None,
        });
        assert_eq!(check_linearizable(&history(ops), 10_000), Verdict::Linearizable);
    }

    #[test]
    fn budget_exhaustion_is_inconclusive() {
        let ops = (0..8)
            .map(|i| event(i, put("x", i as u8), 0, 100, AdictResponse::Nil, i + 1))
            .chain([event(9, AdictOp::get("x"), 101, 102, AdictResponse::Value(vec![200]), 9)])
            .collect();
        assert_eq!(check_linearizable(&history(ops), 50), Verdict::Inconclusive);
    }

    fn entry(seqno: u64, client: u64, op: AdictOp) -> ViewEntry {
        ViewEntry {
            seqno,
            client: ClientId(client),
            op,
            success: true,
        }
    }

    #[test]
    fn disjoint_forks_are_fork_linearizable() {
        let h = history(vec![
            event(1, put("x", 1), 0, 1, AdictResponse::Nil, 1),
            event(2, AdictOp::get("x"), 2, 3, AdictResponse::Nil, 1),
        ]);
        // not linearizable: the get follows the put in real time
        assert_eq!(check_linearizable(&h, 10_000), Verdict::NotLinearizable);
        let views = BTreeMap::from([
            (ClientId(1), vec![entry(1, 1, put("x", 1))]),
            (ClientId(2), vec![entry(1, 2, AdictOp::get("x"))]),
        ]);
        assert_eq!(check_fork_linearizable(&h, &views), Ok(()));
    }

    #[test]
    fn joined_forks_are_rejected() {
        let h = history(vec![
            event(1, put("x", 1), 0, 1, AdictResponse::Nil, 1),
            event(2, put("y", 2), 0, 1, AdictResponse::Nil, 1),
            event(1, AdictOp::get("z"), 2, 3, AdictResponse::Nil, 2),
            event(2, AdictOp::get("x"), 4, 5, AdictResponse::Nil, 3),
        ]);
        let shared = entry(2, 1, AdictOp::get("z"));
        let views = BTreeMap::from([
            (ClientId(1), vec![entry(1, 1, put("x", 1)), shared.clone()]),
            (
                ClientId(2),
                vec![entry(1, 2, put("y", 2)), shared, entry(3, 2, AdictOp::get("x"))],
            ),
        ]);
        assert!(matches!(
            check_fork_linearizable(&h, &views),
            Err(ForkViolation::Join { seqno: 2, .. })
        ));
    }

    #[test]
    fn illegal_view_and_missing_own_op() {
        let h = history(vec![
            event(1, put("x", 1), 0, 1, AdictResponse::Nil, 1),
            event(1, AdictOp::get("x"), 2, 3, AdictResponse::Nil, 2),
        ]);
        let views = BTreeMap::from([(
            ClientId(1),
            vec![entry(1, 1, put("x", 1)), entry(2, 1, AdictOp::get("x"))],
        )]);
        assert!(matches!(check_fork_linearizable(&h, &views), Err(ForkViolation::Illegal { .. })));
        let views = BTreeMap::from([(ClientId(1), vec![entry(1, 1, put("x", 1))])]);
        assert!(matches!(check_fork_linearizable(&h, &views), Err(ForkViolation::MissingOwn { .. })));
    }
}
