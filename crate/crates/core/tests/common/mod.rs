//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest as _, Sha256};
use vicos_core::{AdictOp, AdictResponse, Key};

// Independent model of the canonical tree: a Cartesian tree over the sorted
// entries, built top-down by picking the highest-priority entry of each range.
pub mod model {
    use super::*;

    fn sha(parts: &[&[u8]]) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        h.finalize().into()
    }

    fn key_enc(k: Option<&[u8]>) -> Vec<u8> {
        match k {
            None => vec![0],
            Some(k) => {
                let mut v = vec![1];
                v.extend_from_slice(&(k.len() as u32).to_be_bytes());
                v.extend_from_slice(k);
                v
            }
        }
    }

    struct Entry {
        key: Option<Vec<u8>>,
        value: [u8; 32],
        succ: Option<Vec<u8>>,
        prio: [u8; 32],
    }

    fn subtree(es: &[Entry]) -> [u8; 32] {
        if es.is_empty() {
            return sha(&[&[0]]);
        }
        let top = (0..es.len())
            .max_by(|&a, &b| {
                (es[a].prio, &es[a].key)
                    .partial_cmp(&(es[b].prio, &es[b].key))
                    .unwrap()
            })
            .unwrap();
        let e = &es[top];
        let entry = sha(&[
            &[2],
            &key_enc(e.key.as_deref()),
            &e.value,
            &key_enc(e.succ.as_deref()),
        ]);
        sha(&[&[1], &subtree(&es[..top]), &entry, &subtree(&es[top + 1..])])
    }

    pub fn root(map: &BTreeMap<Vec<u8>, Vec<u8>>) -> [u8; 32] {
        let keys: Vec<&Vec<u8>> = map.keys().collect();
        let mut es = vec![Entry {
            key: None,
            value: [0; 32],
            succ: keys.first().map(|k| k.to_vec()),
            prio: [0xff; 32],
        }];
        for (i, (k, v)) in map.iter().enumerate() {
            es.push(Entry {
                key: Some(k.clone()),
                value: sha(&[v]),
                succ: keys.get(i + 1).map(|k| k.to_vec()),
                prio: sha(&[&[3], k]),
            });
        }
        subtree(&es)
    }
}


pub fn key(i: u32) -> Key {
    Key(format!("k{i:02}").into_bytes())
}

pub fn random_op(rng: &mut impl Rng, nkeys: u32) -> AdictOp {
    let k = key(rng.gen_range(0..nkeys));
    match rng.gen_range(0..10) {
        0..=3 => AdictOp::Put {
            key: k,
            value: rng.gen::<[u8; 4]>().to_vec(),
        },
        4..=6 => AdictOp::Get { key: k },
        7..=8 => AdictOp::Del { key: k },
        _ => AdictOp::List,
    }
}

pub fn naive(map: &mut BTreeMap<Key, Vec<u8>>, op: &AdictOp) -> AdictResponse {
    match op {
        AdictOp::Put { key, value } => {
            map.insert(key.clone(), value.clone());
            AdictResponse::Nil
        }
        AdictOp::Get { key } => map
            .get(key)
            .map_or(AdictResponse::Nil, |v| AdictResponse::Value(v.clone())),
        AdictOp::Del { key } => {
            map.remove(key);
            AdictResponse::Nil
        }
        AdictOp::List => AdictResponse::Keys(map.keys().cloned().collect()),
    }
}

/// The seven operation classes of the compatibility table.
pub fn table_ops() -> Vec<AdictOp> {
    vec![
        AdictOp::put("x", "1"),
        AdictOp::put("y", "1"),
        AdictOp::get("x"),
        AdictOp::get("y"),
        AdictOp::del("x"),
        AdictOp::del("y"),
        AdictOp::List,
    ]
}

/// Brute force: does running `earlier` first ever change what `later` returns?
pub fn conflicts_by_execution(earlier: &AdictOp, later: &AdictOp) -> bool {
    for base in [vec![], vec!["x"], vec!["y"], vec!["x", "y"]] {
        let mut m: BTreeMap<Key, Vec<u8>> =
            base.iter().map(|k| (Key::from(*k), b"0".to_vec())).collect();
        let alone = naive(&mut m.clone(), later);
        naive(&mut m, earlier);
        if naive(&mut m, later) != alone {
            return true;
        }
    }
    false
}

/// Brute force commutativity: same responses and same final map both ways.
/// The second write to the same key uses a different value, as two
/// independent clients would.
pub fn commutes_by_execution(a: &AdictOp, b: &AdictOp) -> bool {
    let b = match b {
        AdictOp::Put { key, .. } => AdictOp::Put {
            key: key.clone(),
            value: b"2".to_vec(),
        },
        other => other.clone(),
    };
    for base in [vec![], vec!["x"], vec!["y"], vec!["x", "y"]] {
        let m: BTreeMap<Key, Vec<u8>> =
            base.iter().map(|k| (Key::from(*k), b"0".to_vec())).collect();
        let (mut m1, mut m2) = (m.clone(), m);
        let r1 = (naive(&mut m1, a), naive(&mut m1, &b));
        let r2b = naive(&mut m2, &b);
        let r2a = naive(&mut m2, a);
        if r1 != (r2a, r2b) || m1 != m2 {
            return false;
        }
    }
    true
}
