//! Identifier ring `{0, ..., 2^M - 1}`, interval membership, and the hash
//! assignment that maps peers and keys onto the ring.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Largest supported `M`. Keeps `2^M` comfortably inside `u32`.
pub const MAX_RING_BITS: u32 = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RingError {
    #[error("ring_bits must be in 1..={MAX_RING_BITS}, got {0}")]
    InvalidBits(u32),
    #[error("{what} is {value} but must be at least {min}")]
    PopulationTooSmall {
        what: &'static str,
        value: u32,
        min: u32,
    },
    #[error("identifier {value} is outside the ring of {n_slots} slots")]
    OutOfRange { value: u64, n_slots: u32 },
    #[error("identifier {0} is already held by an active {1}")]
    ExplicitIdOccupied(ChordId, Sort),
    #[error("{sort} `{name}` already holds identifier {id}")]
    AlreadyAssigned { sort: Sort, name: String, id: ChordId },
}

/// A position on the identifier ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChordId(u32);

impl ChordId {
    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for ChordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ring size `M`, slot count `N = 2^M`, and the peer/key population sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingConfig {
    m_bits: u32,
    n_slots: u32,
    l_peers: u32,
    k_keys: u32,
}

impl RingConfig {
    /// A ring with `L = K = N`.
    pub fn new(m_bits: u32) -> Result<Self, RingError> {
        if m_bits == 0 || m_bits > MAX_RING_BITS {
            return Err(RingError::InvalidBits(m_bits));
        }
        let n = 1u32 << m_bits;
        Self::with_population(m_bits, n, n)
    }

    pub fn with_population(m_bits: u32, l_peers: u32, k_keys: u32) -> Result<Self, RingError> {
        if m_bits == 0 || m_bits > MAX_RING_BITS {
            return Err(RingError::InvalidBits(m_bits));
        }
        let n_slots = 1u32 << m_bits;
        // There can never be more ring slots than peers.
        if l_peers < n_slots {
            return Err(RingError::PopulationTooSmall {
                what: "l_peers",
                value: l_peers,
                min: n_slots,
            });
        }
        if k_keys == 0 {
            return Err(RingError::PopulationTooSmall {
                what: "k_keys",
                value: 0,
                min: 1,
            });
        }
        Ok(Self {
            m_bits,
            n_slots,
            l_peers,
            k_keys,
        })
    }

    pub fn m_bits(&self) -> u32 {
        self.m_bits
    }

    pub fn n_slots(&self) -> u32 {
        self.n_slots
    }

    pub fn l_peers(&self) -> u32 {
        self.l_peers
    }

    pub fn k_keys(&self) -> u32 {
        self.k_keys
    }

    pub fn id(&self, value: u64) -> Result<ChordId, RingError> {
        if value < u64::from(self.n_slots) {
            Ok(ChordId(value as u32))
        } else {
            Err(RingError::OutOfRange {
                value,
                n_slots: self.n_slots,
            })
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ChordId> {
        (0..self.n_slots).map(ChordId)
    }

    /// `(base + offset) mod N`.
    pub fn add(&self, base: ChordId, offset: u64) -> ChordId {
        let n = u64::from(self.n_slots);
        ChordId(((u64::from(base.0) + offset % n) % n) as u32)
    }

    /// Clockwise distance from `from` to `to`.
    pub fn distance(&self, from: ChordId, to: ChordId) -> u32 {
        (to.0 + self.n_slots - from.0) % self.n_slots
    }

    /// Target of finger entry `index` (1-based): `base + 2^(index-1)`.
    pub fn finger_target(&self, base: ChordId, index: usize) -> ChordId {
        debug_assert!(index >= 1 && index as u32 <= self.m_bits);
        self.add(base, 1u64 << (index - 1))
    }
}

/// Whether `x` lies in the clockwise interval `(a, b]`, with `a == b`
/// denoting the whole ring.
pub fn member_of(x: ChordId, a: ChordId, b: ChordId) -> bool {
    match a.cmp(&b) {
        Ordering::Equal => true,
        Ordering::Less => a < x && x <= b,
        Ordering::Greater => !(b < x && x <= a),
    }
}

/// The two sorts of subjects that receive identifiers. Each sort has its own
/// uniqueness domain, so a key may share an identifier with a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sort {
    Peer,
    Key,
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sort::Peer => "peer",
            Sort::Key => "key",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashPolicy {
    Explicit(ChordId),
    /// Rejection-sample a free identifier from the caller's generator.
    SeededRandom,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct IdSpace {
    by_name: BTreeMap<String, ChordId>,
    by_id: BTreeMap<ChordId, String>,
}

/// Identifiers currently held by active peers and stored keys.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HashAssignment {
    peers: IdSpace,
    keys: IdSpace,
}

impl HashAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    fn space(&self, sort: Sort) -> &IdSpace {
        match sort {
            Sort::Peer => &self.peers,
            Sort::Key => &self.keys,
        }
    }

    fn space_mut(&mut self, sort: Sort) -> &mut IdSpace {
        match sort {
            Sort::Peer => &mut self.peers,
            Sort::Key => &mut self.keys,
        }
    }

    /// Hands `name` an identifier. `Ok(None)` is the `undef` outcome: every
    /// slot of this sort is taken.
    pub fn assign<R: Rng + ?Sized>(
        &mut self,
        ring: &RingConfig,
        sort: Sort,
        name: &str,
        policy: HashPolicy,
        rng: &mut R,
    ) -> Result<Option<ChordId>, RingError> {
        if let Some(&id) = self.space(sort).by_name.get(name) {
            return Err(RingError::AlreadyAssigned {
                sort,
                name: name.to_string(),
                id,
            });
        }
        let space = self.space_mut(sort);
        let id = match policy {
            HashPolicy::Explicit(id) => {
                ring.id(u64::from(id.0))?;
                if space.by_id.contains_key(&id) {
                    return Err(RingError::ExplicitIdOccupied(id, sort));
                }
                id
            }
            HashPolicy::SeededRandom => {
                if space.by_id.len() >= ring.n_slots() as usize {
                    return Ok(None);
                }
                loop {
                    let candidate = ChordId(rng.gen_range(0..ring.n_slots()));
                    if !space.by_id.contains_key(&candidate) {
                        break candidate;
                    }
                }
            }
        };
        space.by_name.insert(name.to_string(), id);
        space.by_id.insert(id, name.to_string());
        Ok(Some(id))
    }

    pub fn release(&mut self, sort: Sort, name: &str) -> Option<ChordId> {
        let space = self.space_mut(sort);
        let id = space.by_name.remove(name)?;
        space.by_id.remove(&id);
        Some(id)
    }

    pub fn release_id(&mut self, sort: Sort, id: ChordId) -> Option<String> {
        let space = self.space_mut(sort);
        let name = space.by_id.remove(&id)?;
        space.by_name.remove(&name);
        Some(name)
    }

    pub fn lookup(&self, sort: Sort, name: &str) -> Option<ChordId> {
        self.space(sort).by_name.get(name).copied()
    }

    pub fn owner(&self, sort: Sort, id: ChordId) -> Option<&str> {
        self.space(sort).by_id.get(&id).map(String::as_str)
    }

    pub fn assigned(&self, sort: Sort) -> impl Iterator<Item = (&str, ChordId)> {
        self.space(sort)
            .by_name
            .iter()
            .map(|(name, id)| (name.as_str(), *id))
    }

    pub fn len(&self, sort: Sort) -> usize {
        self.space(sort).by_id.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Walks clockwise from `a` (exclusive) to `b` (inclusive); a full lap
    /// when `a == b`.
    fn ring_walk(ring: &RingConfig, x: ChordId, a: ChordId, b: ChordId) -> bool {
        if a == b {
            return true;
        }
        let mut cur = ring.add(a, 1);
        loop {
            if cur == x {
                return true;
            }
            if cur == b {
                return false;
            }
            cur = ring.add(cur, 1);
        }
    }

    fn id(v: u32) -> ChordId {
        ChordId(v)
    }

    #[test]
    fn member_of_examples() {
        assert!(member_of(id(2), id(1), id(3)));
        assert!(member_of(id(5), id(5), id(5)));
        assert!(member_of(id(0), id(6), id(2)));
        assert!(member_of(id(7), id(6), id(2)));
        assert!(!member_of(id(4), id(6), id(2)));
        // Interval is half-open on the left in the wrapping case too.
        assert!(member_of(id(2), id(6), id(2)));
        assert!(!member_of(id(6), id(6), id(2)));
    }

    #[test]
    fn member_of_matches_ring_walk_exhaustively() {
        for bits in [3, 4] {
            let ring = RingConfig::new(bits).unwrap();
            let mut cases = 0;
            for x in ring.ids() {
                for a in ring.ids() {
                    for b in ring.ids() {
                        assert_eq!(
                            member_of(x, a, b),
                            ring_walk(&ring, x, a, b),
                            "x={x} a={a} b={b}"
                        );
                        cases += 1;
                    }
                }
            }
            assert_eq!(cases, 1usize << (3 * bits));
        }
    }

    #[test]
    fn case_analysis_is_exhaustive() {
        // Every triple lands in exactly one of the equal / less / greater
        // arms, so a trailing "otherwise false" arm could never fire.
        let ring = RingConfig::new(3).unwrap();
        for a in ring.ids() {
            for b in ring.ids() {
                let arms = [a == b, a < b, a > b];
                assert_eq!(arms.iter().filter(|hit| **hit).count(), 1);
            }
        }
    }

    #[test]
    fn ring_add_wraps() {
        let ring = RingConfig::new(3).unwrap();
        assert_eq!(ring.add(id(5), 4), id(1));
        assert_eq!(ring.add(id(6), 0), id(6));
        assert_eq!(ring.add(id(7), 1), id(0));
        assert_eq!(ring.finger_target(id(1), 2), id(3));
        assert_eq!(ring.finger_target(id(6), 3), id(2));
    }

    #[test]
    fn config_validation() {
        assert_eq!(RingConfig::new(0), Err(RingError::InvalidBits(0)));
        assert!(RingConfig::with_population(3, 7, 1).is_err());
        assert!(RingConfig::with_population(3, 8, 0).is_err());
        let ring = RingConfig::with_population(3, 20, 30).unwrap();
        assert_eq!(ring.n_slots(), 8);
        assert!(ring.id(8).is_err());
        assert_eq!(ring.id(7).unwrap(), id(7));
    }

    #[test]
    fn full_ring_yields_undef() {
        let ring = RingConfig::new(3).unwrap();
        let mut hash = HashAssignment::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..8 {
            let got = hash
                .assign(&ring, Sort::Peer, &format!("P{i}"), HashPolicy::SeededRandom, &mut rng)
                .unwrap();
            assert!(got.is_some());
        }
        let ninth = hash
            .assign(&ring, Sort::Peer, "P8", HashPolicy::SeededRandom, &mut rng)
            .unwrap();
        assert_eq!(ninth, None);
        // Keys draw from their own space.
        let key = hash
            .assign(&ring, Sort::Key, "K", HashPolicy::Explicit(id(3)), &mut rng)
            .unwrap();
        assert_eq!(key, Some(id(3)));
    }

    #[test]
    fn explicit_policy() {
        let ring = RingConfig::new(3).unwrap();
        let mut hash = HashAssignment::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = hash
            .assign(&ring, Sort::Peer, "P1", HashPolicy::Explicit(id(1)), &mut rng)
            .unwrap();
        assert_eq!(got, Some(id(1)));
        let clash = hash.assign(&ring, Sort::Peer, "P2", HashPolicy::Explicit(id(1)), &mut rng);
        assert_eq!(clash, Err(RingError::ExplicitIdOccupied(id(1), Sort::Peer)));
        let again = hash.assign(&ring, Sort::Peer, "P1", HashPolicy::Explicit(id(2)), &mut rng);
        assert!(matches!(again, Err(RingError::AlreadyAssigned { .. })));
        // After release the id is free and the peer may come back elsewhere.
        assert_eq!(hash.release(Sort::Peer, "P1"), Some(id(1)));
        let back = hash
            .assign(&ring, Sort::Peer, "P1", HashPolicy::Explicit(id(4)), &mut rng)
            .unwrap();
        assert_eq!(back, Some(id(4)));
        assert_eq!(hash.owner(Sort::Peer, id(4)), Some("P1"));
    }

    #[test]
    fn seeded_assignment_is_reproducible() {
        let ring = RingConfig::new(4).unwrap();
        let run = || {
            let mut hash = HashAssignment::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..6)
                .map(|i| {
                    hash.assign(&ring, Sort::Peer, &format!("P{i}"), HashPolicy::SeededRandom, &mut rng)
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn active_ids_stay_unique(ops in proptest::collection::vec((0u8..12, any::<bool>()), 1..80), seed in any::<u64>()) {
            let ring = RingConfig::new(3).unwrap();
            let mut hash = HashAssignment::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (who, assign) in ops {
                let name = format!("P{who}");
                if assign {
                    let _ = hash.assign(&ring, Sort::Peer, &name, HashPolicy::SeededRandom, &mut rng);
                } else {
                    hash.release(Sort::Peer, &name);
                }
                let ids: Vec<_> = hash.assigned(Sort::Peer).map(|(_, id)| id).collect();
                let mut dedup = ids.clone();
                dedup.sort();
                dedup.dedup();
                prop_assert_eq!(ids.len(), dedup.len());
                prop_assert!(ids.len() <= 8);
            }
        }
    }
}
