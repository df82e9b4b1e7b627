//! Random byte-level corruption of one server message.

use rand::Rng;

use super::sim::{Adversary, Direction, World};
use crate::crypto::ClientId;

/// Corrupts the `target`-th message sent to any client and passes
/// everything else.
pub struct ByteFuzz {
    target: u64,
    seen: u64,
    victim: Option<ClientId>,
    description: Option<String>,
}

impl ByteFuzz {
    pub fn new(target: u64) -> Self {
        ByteFuzz {
            target,
            seen: 0,
            victim: None,
            description: None,
        }
    }

    /// The client that received the corrupted message, if it happened.
    pub fn victim(&self) -> Option<ClientId> {
        self.victim
    }

    pub fn description(&self) -> Option<&str> {
        self.description.as_deref()
    }
}

/// One random change; never returns `bytes` unchanged.
pub fn corrupt(rng: &mut impl Rng, bytes: &[u8]) -> (Vec<u8>, String) {
    let mut b = bytes.to_vec();
    loop {
        let what = match rng.gen_range(0..5) {
            0 => {
                let bit = rng.gen_range(0..b.len() * 8);
                b[bit / 8] ^= 1 << (bit % 8);
                format!("flip bit {bit}")
            }
            1 => {
                let i = rng.gen_range(0..b.len());
                b[i] = rng.gen();
                format!("set byte {i}")
            }
            2 => {
                let n = rng.gen_range(0..b.len());
                b.truncate(n);
                format!("truncate to {n}")
            }
            3 => {
                b.push(rng.gen());
                "append a byte".to_string()
            }
            _ => {
                let i = rng.gen_range(0..b.len());
                b.remove(i);
                format!("delete byte {i}")
            }
        };
        if b != bytes {
            return (b, what);
        }
        b = bytes.to_vec();
    }
}

impl Adversary for ByteFuzz {
    fn intercept(&mut self, world: &mut World, dir: Direction, client: ClientId, msg: Vec<u8>) -> Vec<Vec<u8>> {
        if dir != Direction::ToClient {
            return vec![msg];
        }
        self.seen += 1;
        if self.seen - 1 != self.target {
            return vec![msg];
        }
        let (b, what) = corrupt(&mut world.rng, &msg);
        self.victim = Some(client);
        self.description = Some(what);
        vec![b]
    }

    fn fired(&self) -> u64 {
        u64::from(self.victim.is_some())
    }
}
