//! Merkle treap over the dictionary entries.
//!
//! Entries are ordered by key (in-order traversal) and heap-ordered by a
//! priority derived from the key hash, so the shape is a pure function of
//! the key set: every party that knows the same map computes the same root.
//! A head sentinel with maximal priority is always the root; it acts as the
//! predecessor of every key smaller than the smallest real key.
//!
//! Each entry hashes `(key, value-digest, successor-key)`, with `None`
//! standing for the `+inf` successor of the last entry. An absent key is
//! proven by its predecessor entry whose successor lies beyond it.
//!
//! The same code runs on the server's full tree and on a client's pruned
//! copy, where untouched subtrees are replaced by [`Tree::Stub`]. Walking
//! into a stub fails with [`TreeError::Incomplete`], which for a client
//! means the proof did not cover the operation.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Arc, OnceLock};

use crate::crypto::{hash, Digest, DIGEST_LEN};
use crate::wire::{Decode, DecodeError, Encode, Reader, Writer};

use super::Key;

const TAG_EMPTY: u8 = 0;
const TAG_NODE: u8 = 1;
const TAG_ENTRY: u8 = 2;
const TAG_PRIORITY: u8 = 3;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub enum NodeKey {
    Head,
    Key(Key),
}

impl Encode for NodeKey {
    fn encode(&self, w: &mut Writer) {
        match self {
            NodeKey::Head => {
                w.u8(0);
            }
            NodeKey::Key(k) => {
                w.u8(1).put(k);
            }
        }
    }
}

impl Decode for NodeKey {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(NodeKey::Head),
            1 => Ok(NodeKey::Key(r.get()?)),
            tag => Err(DecodeError::BadTag { what: "node key", tag }),
        }
    }
}

fn priority(key: &NodeKey) -> Digest {
    match key {
        NodeKey::Head => Digest([0xff; DIGEST_LEN]),
        NodeKey::Key(k) => {
            let mut w = Writer::new();
            w.u8(TAG_PRIORITY).raw(&k.0);
            hash(&w.finish())
        }
    }
}

fn empty_hash() -> Digest {
    static EMPTY: OnceLock<Digest> = OnceLock::new();
    *EMPTY.get_or_init(|| hash(&[TAG_EMPTY]))
}

/// Hash of one dictionary entry.
pub fn entry_hash(key: &NodeKey, value: &Digest, succ: &Option<Key>) -> Digest {
    let mut w = Writer::new();
    w.u8(TAG_ENTRY).put(key).put(value).put(succ);
    hash(&w.finish())
}

pub struct Node {
    pub key: NodeKey,
    pub value: Digest,
    pub succ: Option<Key>,
    pub left: Tree,
    pub right: Tree,
    priority: Digest,
    hash: Digest,
}

impl Node {
    fn build(key: NodeKey, value: Digest, succ: Option<Key>, left: Tree, right: Tree) -> Tree {
        let entry = entry_hash(&key, &value, &succ);
        let mut w = Writer::new();
        w.u8(TAG_NODE).put(&left.hash()).put(&entry).put(&right.hash());
        let hash = hash(&w.finish());
        Tree::Node(Arc::new(Node {
            priority: priority(&key),
            key,
            value,
            succ,
            left,
            right,
            hash,
        }))
    }

    fn with_left(&self, left: Tree) -> Tree {
        Node::build(self.key.clone(), self.value, self.succ.clone(), left, self.right.clone())
    }

    fn with_right(&self, right: Tree) -> Tree {
        Node::build(self.key.clone(), self.value, self.succ.clone(), self.left.clone(), right)
    }

    /// Heap order, ties (astronomically unlikely) broken by key.
    fn outranks(&self, key: &NodeKey, prio: &Digest) -> bool {
        (self.priority, &self.key) > (*prio, key)
    }
}

#[derive(Clone)]
pub enum Tree {
    Empty,
    Stub(Digest),
    Node(Arc<Node>),
}

impl Tree {
    /// The tree of the empty dictionary: just the head sentinel.
    pub fn genesis() -> Tree {
        Node::build(NodeKey::Head, Digest::NULL, None, Tree::Empty, Tree::Empty)
    }

    pub fn hash(&self) -> Digest {
        match self {
            Tree::Empty => empty_hash(),
            Tree::Stub(d) => *d,
            Tree::Node(n) => n.hash,
        }
    }

    /// Entries in key order, without the head sentinel.
    pub fn entries(&self) -> Result<Vec<(Key, Digest)>, TreeError> {
        fn go(t: &Tree, out: &mut Vec<(Key, Digest)>) -> Result<(), TreeError> {
            match t {
                Tree::Empty => Ok(()),
                Tree::Stub(_) => Err(TreeError::Incomplete),
                Tree::Node(n) => {
                    go(&n.left, out)?;
                    if let NodeKey::Key(k) = &n.key {
                        out.push((k.clone(), n.value));
                    }
                    go(&n.right, out)
                }
            }
        }
        let mut out = Vec::new();
        go(self, &mut out)?;
        Ok(out)
    }

    /// Rebuilds the canonical tree for a strictly increasing entry list.
    pub fn from_entries(entries: &[(Key, Digest)]) -> Result<Tree, TreeError> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(TreeError::Inconsistent("entries not strictly increasing"));
        }
        let mut walk = Walk::plain();
        let mut t = Tree::genesis();
        for (k, v) in entries {
            t = walk.insert(&t, k, *v)?;
        }
        Ok(t)
    }

    /// Keeps the touched nodes and replaces everything else by stubs.
    pub fn prune(&self, touched: &BTreeSet<NodeKey>) -> Tree {
        match self {
            Tree::Empty => Tree::Empty,
            Tree::Stub(d) => Tree::Stub(*d),
            Tree::Node(n) if touched.contains(&n.key) => Node::build(
                n.key.clone(),
                n.value,
                n.succ.clone(),
                n.left.prune(touched),
                n.right.prune(touched),
            ),
            Tree::Node(n) => Tree::Stub(n.hash),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Tree::Node(n) => 1 + n.left.depth().max(n.right.depth()),
            _ => 0,
        }
    }
}

impl PartialEq for Tree {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Tree::Empty, Tree::Empty) => true,
            (Tree::Stub(a), Tree::Stub(b)) => a == b,
            (Tree::Node(a), Tree::Node(b)) => {
                a.key == b.key
                    && a.value == b.value
                    && a.succ == b.succ
                    && a.left == b.left
                    && a.right == b.right
            }
            _ => false,
        }
    }
}

impl fmt::Debug for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tree::Empty => f.write_str("_"),
            Tree::Stub(d) => write!(f, "#{}", &d.to_hex()[..8]),
            Tree::Node(n) => f
                .debug_tuple("N")
                .field(&n.key)
                .field(&n.left)
                .field(&n.right)
                .finish(),
        }
    }
}

impl Encode for Tree {
    fn encode(&self, w: &mut Writer) {
        match self {
            Tree::Empty => {
                w.u8(0);
            }
            Tree::Stub(d) => {
                w.u8(1).put(d);
            }
            Tree::Node(n) => {
                w.u8(2)
                    .put(&n.key)
                    .put(&n.value)
                    .put(&n.succ)
                    .put(&n.left)
                    .put(&n.right);
            }
        }
    }
}

impl Decode for Tree {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Tree::Empty),
            1 => Ok(Tree::Stub(r.get()?)),
            2 => r.nested(|r| {
                let key = r.get()?;
                let value = r.get()?;
                let succ = r.get()?;
                let left = r.get()?;
                let right = r.get()?;
                Ok(Node::build(key, value, succ, left, right))
            }),
            tag => Err(DecodeError::BadTag { what: "tree", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("proof does not cover the nodes this operation needs")]
    Incomplete,
    #[error("tree is inconsistent: {0}")]
    Inconsistent(&'static str),
}

/// Result of looking a key up.
pub enum Lookup {
    Present {
        node: Arc<Node>,
        /// Last node on the search path whose key is smaller.
        path_pred: Option<Arc<Node>>,
    },
    Absent {
        /// The entry whose gap `(pred.key, pred.succ)` contains the key.
        pred: Arc<Node>,
    },
}

impl Lookup {
    pub fn value(&self) -> Option<Digest> {
        match self {
            Lookup::Present { node, .. } => Some(node.value),
            Lookup::Absent { .. } => None,
        }
    }
}

/// Runs tree operations, optionally recording every node it opens.
pub struct Walk {
    touched: Option<BTreeSet<NodeKey>>,
}

impl Walk {
    pub fn plain() -> Self {
        Walk { touched: None }
    }

    pub fn recording() -> Self {
        Walk {
            touched: Some(BTreeSet::new()),
        }
    }

    pub fn into_touched(self) -> BTreeSet<NodeKey> {
        self.touched.unwrap_or_default()
    }

    fn open<'t>(&mut self, t: &'t Tree) -> Result<Option<&'t Arc<Node>>, TreeError> {
        match t {
            Tree::Empty => Ok(None),
            Tree::Stub(_) => Err(TreeError::Incomplete),
            Tree::Node(n) => {
                if let Some(set) = &mut self.touched {
                    set.insert(n.key.clone());
                }
                Ok(Some(n))
            }
        }
    }

    pub fn lookup(&mut self, root: &Tree, key: &Key) -> Result<Lookup, TreeError> {
        let target = NodeKey::Key(key.clone());
        let mut cur = root;
        let mut pred: Option<Arc<Node>> = None;
        loop {
            let Some(n) = self.open(cur)? else {
                let pred = pred.ok_or(TreeError::Inconsistent("no predecessor"))?;
                if let Some(s) = &pred.succ {
                    if s <= key {
                        return Err(TreeError::Inconsistent("successor does not bound the gap"));
                    }
                }
                return Ok(Lookup::Absent { pred });
            };
            match target.cmp(&n.key) {
                Ordering::Equal => {
                    return Ok(Lookup::Present {
                        node: n.clone(),
                        path_pred: pred,
                    })
                }
                Ordering::Less => cur = &n.left,
                Ordering::Greater => {
                    pred = Some(n.clone());
                    cur = &n.right;
                }
            }
        }
    }

    /// Inserts `key` or replaces its value.
    pub fn insert(&mut self, root: &Tree, key: &Key, value: Digest) -> Result<Tree, TreeError> {
        let nk = NodeKey::Key(key.clone());
        match self.lookup(root, key)? {
            Lookup::Present { .. } => self.rewrite(root, &nk, &mut |n| {
                Node::build(n.key.clone(), value, n.succ.clone(), n.left.clone(), n.right.clone())
            }),
            Lookup::Absent { pred } => {
                let prio = priority(&nk);
                let t = self.insert_node(root, &nk, &prio, value, pred.succ.clone())?;
                let succ = Some(key.clone());
                self.rewrite(&t, &pred.key, &mut |n| {
                    Node::build(n.key.clone(), n.value, succ.clone(), n.left.clone(), n.right.clone())
                })
            }
        }
    }

    /// Removes `key`; removing an absent key leaves the tree unchanged.
    pub fn remove(&mut self, root: &Tree, key: &Key) -> Result<Tree, TreeError> {
        let (node, path_pred) = match self.lookup(root, key)? {
            Lookup::Absent { .. } => return Ok(root.clone()),
            Lookup::Present { node, path_pred } => (node, path_pred),
        };
        let pred = match self.max_node(&node.left)? {
            Some(m) => m,
            None => path_pred.ok_or(TreeError::Inconsistent("no predecessor"))?,
        };
        if pred.succ.as_ref() != Some(key) {
            return Err(TreeError::Inconsistent("predecessor does not link to key"));
        }
        let t = self.remove_node(root, &node.key)?;
        let succ = node.succ.clone();
        self.rewrite(&t, &pred.key, &mut |n| {
            Node::build(n.key.clone(), n.value, succ.clone(), n.left.clone(), n.right.clone())
        })
    }

    fn insert_node(
        &mut self,
        t: &Tree,
        key: &NodeKey,
        prio: &Digest,
        value: Digest,
        succ: Option<Key>,
    ) -> Result<Tree, TreeError> {
        let Some(n) = self.open(t)? else {
            return Ok(Node::build(key.clone(), value, succ, Tree::Empty, Tree::Empty));
        };
        if !n.outranks(key, prio) {
            let (l, r) = self.split(t, key)?;
            return Ok(Node::build(key.clone(), value, succ, l, r));
        }
        if *key < n.key {
            Ok(n.with_left(self.insert_node(&n.left, key, prio, value, succ)?))
        } else {
            Ok(n.with_right(self.insert_node(&n.right, key, prio, value, succ)?))
        }
    }

    /// Splits into keys below and above `key`, which must be absent.
    fn split(&mut self, t: &Tree, key: &NodeKey) -> Result<(Tree, Tree), TreeError> {
        let Some(n) = self.open(t)? else {
            return Ok((Tree::Empty, Tree::Empty));
        };
        match n.key.cmp(key) {
            Ordering::Less => {
                let (l, r) = self.split(&n.right, key)?;
                Ok((n.with_right(l), r))
            }
            Ordering::Greater => {
                let (l, r) = self.split(&n.left, key)?;
                Ok((l, n.with_left(r)))
            }
            Ordering::Equal => Err(TreeError::Inconsistent("split on present key")),
        }
    }

    /// Joins two treaps where every key of `a` is below every key of `b`.
    fn merge(&mut self, a: &Tree, b: &Tree) -> Result<Tree, TreeError> {
        let Some(na) = self.open(a)? else {
            return Ok(b.clone());
        };
        let Some(nb) = self.open(b)? else {
            return Ok(a.clone());
        };
        if na.outranks(&nb.key, &nb.priority) {
            Ok(na.with_right(self.merge(&na.right, b)?))
        } else {
            Ok(nb.with_left(self.merge(a, &nb.left)?))
        }
    }

    fn remove_node(&mut self, t: &Tree, key: &NodeKey) -> Result<Tree, TreeError> {
        let n = self
            .open(t)?
            .ok_or(TreeError::Inconsistent("key vanished"))?;
        match key.cmp(&n.key) {
            Ordering::Equal => self.merge(&n.left, &n.right),
            Ordering::Less => Ok(n.with_left(self.remove_node(&n.left, key)?)),
            Ordering::Greater => Ok(n.with_right(self.remove_node(&n.right, key)?)),
        }
    }

    fn max_node(&mut self, t: &Tree) -> Result<Option<Arc<Node>>, TreeError> {
        let mut best = None;
        let mut cur = t;
        while let Some(n) = self.open(cur)? {
            best = Some(n.clone());
            cur = &n.right;
        }
        Ok(best)
    }

    /// Rebuilds the path to `key`, replacing its node by `f(node)`.
    fn rewrite(
        &mut self,
        t: &Tree,
        key: &NodeKey,
        f: &mut dyn FnMut(&Node) -> Tree,
    ) -> Result<Tree, TreeError> {
        let n = self
            .open(t)?
            .ok_or(TreeError::Inconsistent("key vanished"))?;
        match key.cmp(&n.key) {
            Ordering::Equal => Ok(f(n)),
            Ordering::Less => Ok(n.with_left(self.rewrite(&n.left, key, f)?)),
            Ordering::Greater => Ok(n.with_right(self.rewrite(&n.right, key, f)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn k(s: &str) -> Key {
        Key(s.as_bytes().to_vec())
    }

    fn v(s: &str) -> Digest {
        hash(s.as_bytes())
    }

    fn build(map: &BTreeMap<Key, Digest>) -> Tree {
        Tree::from_entries(&map.iter().map(|(k, v)| (k.clone(), *v)).collect::<Vec<_>>()).unwrap()
    }

    /// Checks BST order, heap order and successor links of a full tree.
    fn check_invariants(t: &Tree) {
        fn go(t: &Tree, out: &mut Vec<(NodeKey, Option<Key>)>) {
            if let Tree::Node(n) = t {
                for c in [&n.left, &n.right] {
                    if let Tree::Node(c) = c {
                        assert!(n.outranks(&c.key, &c.priority), "heap order");
                    }
                }
                go(&n.left, out);
                out.push((n.key.clone(), n.succ.clone()));
                go(&n.right, out);
            }
        }
        let mut seq = Vec::new();
        go(t, &mut seq);
        assert_eq!(seq[0].0, NodeKey::Head);
        for w in seq.windows(2) {
            assert!(w[0].0 < w[1].0, "bst order");
            let NodeKey::Key(next) = &w[1].0 else { unreachable!() };
            assert_eq!(w[0].1.as_ref(), Some(next), "successor link");
        }
        assert_eq!(seq.last().unwrap().1, None);
    }

    #[test]
    fn genesis_is_head_only() {
        let t = Tree::genesis();
        assert!(t.entries().unwrap().is_empty());
        check_invariants(&t);
        let mut w = Walk::plain();
        match w.lookup(&t, &k("x")).unwrap() {
            Lookup::Absent { pred } => assert_eq!(pred.key, NodeKey::Head),
            _ => panic!("expected absence"),
        }
    }

    #[test]
    fn insert_order_does_not_matter() {
        let keys = ["m", "c", "x", "a", "q", "e", "z", "b"];
        let mut w = Walk::plain();
        let mut t1 = Tree::genesis();
        for s in keys {
            t1 = w.insert(&t1, &k(s), v(s)).unwrap();
        }
        let mut t2 = Tree::genesis();
        for s in keys.iter().rev() {
            t2 = w.insert(&t2, &k(s), v(s)).unwrap();
        }
        assert_eq!(t1.hash(), t2.hash());
        check_invariants(&t1);
    }

    #[test]
    fn put_then_del_restores_root() {
        let mut w = Walk::plain();
        let mut t = Tree::genesis();
        for s in ["a", "c", "e"] {
            t = w.insert(&t, &k(s), v(s)).unwrap();
        }
        let before = t.hash();
        let t2 = w.insert(&t, &k("b"), v("b")).unwrap();
        assert_ne!(t2.hash(), before);
        let t3 = w.remove(&t2, &k("b")).unwrap();
        assert_eq!(t3.hash(), before);
        assert!(t3 == t);
    }

    #[test]
    fn pruned_tree_replays_the_operation() {
        let mut map = BTreeMap::new();
        for i in 0..40u32 {
            map.insert(Key(i.to_be_bytes().to_vec()), hash(&i.to_le_bytes()));
        }
        let full = build(&map);
        let key = Key(17u32.to_be_bytes().to_vec());
        let mut rec = Walk::recording();
        let after = rec.remove(&full, &key).unwrap();
        let pruned = full.prune(&rec.into_touched());
        assert_eq!(pruned.hash(), full.hash());
        let replay = Walk::plain().remove(&pruned, &key).unwrap();
        assert_eq!(replay.hash(), after.hash());
        // a different key needs nodes the proof does not have
        let other = Key(3u32.to_be_bytes().to_vec());
        assert!(Walk::plain().remove(&pruned, &other).is_err());
    }

    #[test]
    fn deep_nesting_is_rejected() {
        let mut bytes = Vec::new();
        for _ in 0..1000 {
            bytes.extend_from_slice(&[2, 0]);
            bytes.extend_from_slice(&[0; 32]);
            bytes.push(0);
        }
        assert!(Tree::from_bytes(&bytes).is_err());
    }

    #[derive(Debug, Clone)]
    enum Step {
        Put(u8, u8),
        Del(u8),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            (0u8..24, any::<u8>()).prop_map(|(a, b)| Step::Put(a, b)),
            (0u8..24).prop_map(Step::Del),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn root_is_a_function_of_the_map(steps in proptest::collection::vec(step(), 0..60)) {
            let mut w = Walk::plain();
            let mut t = Tree::genesis();
            let mut map = BTreeMap::new();
            for s in steps {
                match s {
                    Step::Put(a, b) => {
                        t = w.insert(&t, &Key(vec![a]), hash(&[b])).unwrap();
                        map.insert(Key(vec![a]), hash(&[b]));
                    }
                    Step::Del(a) => {
                        t = w.remove(&t, &Key(vec![a])).unwrap();
                        map.remove(&Key(vec![a]));
                    }
                }
                check_invariants(&t);
            }
            prop_assert_eq!(t.hash(), build(&map).hash());
            prop_assert_eq!(t.entries().unwrap(), map.into_iter().collect::<Vec<_>>());
        }
    }
}
