use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::cmp::Reverse;

use super::CommitRecord;
use crate::store::GlobalKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DependencyKind {
    /// Both wrote the key; the source's version comes first.
    WriteWrite,
    /// The target read the source's version.
    WriteRead,
    /// The source read a version the target overwrote.
    ReadWrite,
}

/// A shortest dependency cycle: `edges[i]` goes from `txns[i]` to
/// `txns[(i + 1) % len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleWitness {
    pub txns: Vec<u64>,
    pub edges: Vec<DependencyKind>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum HistoryError {
    #[error("dependency cycle through transactions {:?}", .0.txns)]
    Cycle(CycleWitness),
    #[error("txn {txn} read {key}@{wts}, which no committed txn wrote")]
    UnknownVersion { txn: u64, key: GlobalKey, wts: u64 },
    #[error("two committed txns wrote {key}@{wts}")]
    DuplicateVersion { key: GlobalKey, wts: u64 },
    #[error("txn {0} committed twice")]
    DuplicateTxn(u64),
}

type Graph = Vec<BTreeMap<usize, DependencyKind>>;

fn add_edge(g: &mut Graph, from: usize, to: usize, kind: DependencyKind) {
    if from != to {
        let e = g[from].entry(to).or_insert(kind);
        *e = (*e).min(kind);
    }
}

fn build(history: &[CommitRecord]) -> Result<Graph, HistoryError> {
    let mut ids = HashMap::new();
    for (i, r) in history.iter().enumerate() {
        if ids.insert(r.txn_id, i).is_some() {
            return Err(HistoryError::DuplicateTxn(r.txn_id));
        }
    }
    // Per key: committed versions in wts order, each with its writer.
    let mut versions: HashMap<GlobalKey, BTreeMap<u64, usize>> = HashMap::new();
    for (i, r) in history.iter().enumerate() {
        for &key in &r.writes {
            if r.commit_key == 0 || versions.entry(key).or_default().insert(r.commit_key, i).is_some() {
                return Err(HistoryError::DuplicateVersion { key, wts: r.commit_key });
            }
        }
    }
    let mut g: Graph = vec![BTreeMap::new(); history.len()];
    for chain in versions.values() {
        let writers: Vec<usize> = chain.values().copied().collect();
        for w in writers.windows(2) {
            add_edge(&mut g, w[0], w[1], DependencyKind::WriteWrite);
        }
    }
    for (i, r) in history.iter().enumerate() {
        for &(key, wts) in &r.reads {
            let chain = versions.get(&key);
            if wts != 0 {
                match chain.and_then(|c| c.get(&wts)) {
                    Some(&w) => add_edge(&mut g, w, i, DependencyKind::WriteRead),
                    None => return Err(HistoryError::UnknownVersion { txn: r.txn_id, key, wts }),
                }
            }
            if let Some((_, &next)) = chain.and_then(|c| c.range(wts + 1..).next()) {
                add_edge(&mut g, i, next, DependencyKind::ReadWrite);
            }
        }
    }
    Ok(g)
}

/// Builds the direct serialization graph (ww, wr and rw edges) and returns
/// a serial order of txn ids, or a shortest cycle. Among transactions whose
/// predecessors are placed, the smallest `(commit_key, txn_id)` goes first.
pub fn check_conflict_serializable(history: &[CommitRecord]) -> Result<Vec<u64>, HistoryError> {
    let g = build(history)?;
    let mut indegree = vec![0usize; g.len()];
    for succ in &g {
        for &t in succ.keys() {
            indegree[t] += 1;
        }
    }
    let rank = |i: usize| Reverse((history[i].commit_key, history[i].txn_id, i));
    let mut ready: BinaryHeap<_> = (0..g.len()).filter(|&i| indegree[i] == 0).map(rank).collect();
    let mut order = Vec::with_capacity(g.len());
    while let Some(Reverse((_, _, i))) = ready.pop() {
        order.push(history[i].txn_id);
        for &t in g[i].keys() {
            indegree[t] -= 1;
            if indegree[t] == 0 {
                ready.push(rank(t));
            }
        }
    }
    if order.len() == g.len() {
        return Ok(order);
    }
    let stuck: Vec<usize> = (0..g.len()).filter(|&i| indegree[i] > 0).collect();
    Err(HistoryError::Cycle(shortest_cycle(&g, &stuck, history)))
}

fn shortest_cycle(g: &Graph, candidates: &[usize], history: &[CommitRecord]) -> CycleWitness {
    let mut best: Option<Vec<usize>> = None;
    for &start in candidates {
        // BFS back to `start`.
        let mut parent: HashMap<usize, usize> = HashMap::new();
        let mut queue = VecDeque::from([start]);
        let mut found = None;
        'bfs: while let Some(u) = queue.pop_front() {
            for &v in g[u].keys() {
                if v == start {
                    found = Some(u);
                    break 'bfs;
                }
                if let std::collections::hash_map::Entry::Vacant(e) = parent.entry(v) {
                    e.insert(u);
                    queue.push_back(v);
                }
            }
        }
        if let Some(mut last) = found {
            let mut path = vec![last];
            while last != start {
                last = parent[&last];
                path.push(last);
            }
            path.reverse();
            if best.as_ref().is_none_or(|b| path.len() < b.len()) {
                best = Some(path);
            }
        }
    }
    let path = best.expect("a node with positive indegree after Kahn's algorithm lies on a cycle");
    let edges = (0..path.len()).map(|i| g[path[i]][&path[(i + 1) % path.len()]]).collect();
    CycleWitness {
        txns: path.iter().map(|&i| history[i].txn_id).collect(),
        edges,
    }
}
