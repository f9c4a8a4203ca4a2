//! Bit-exact packing of grid identifiers and protocol queries.
//!
//! Grid UID layout (most significant bit first):
//!
//! ```text
//! | rank (32) | gid (23) | p_k (3) | p_j (3) | p_i (3) |
//! ```
//!
//! Query layout:
//!
//! ```text
//! | unused (27) | task (2) | direction (3) | gid (23) | hash (9) |
//! ```
//!
//! The low 32 bits (`gid ‖ hash`) are shared by both layouts and are called
//! the tag.

use std::fmt;

use thiserror::Error;

pub type Rank = u32;

pub const GID_BITS: u32 = 23;
pub const HASH_BITS: u32 = 9;
pub const POSITION_BITS: u32 = 3;
pub const TASK_BITS: u32 = 2;
pub const DIRECTION_BITS: u32 = 3;

pub const MAX_GID: u32 = (1 << GID_BITS) - 1;
pub const MAX_HASH: u16 = (1 << HASH_BITS) - 1;

const GID_SHIFT: u32 = HASH_BITS;
const RANK_SHIFT: u32 = HASH_BITS + GID_BITS;
const DIRECTION_SHIFT: u32 = HASH_BITS + GID_BITS;
const TASK_SHIFT: u32 = DIRECTION_SHIFT + DIRECTION_BITS;
const QUERY_USED_BITS: u32 = TASK_SHIFT + TASK_BITS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("gid {0} does not fit in {GID_BITS} bits")]
    GidRange(u32),
    #[error("hash {0} does not fit in {HASH_BITS} bits")]
    HashRange(u16),
    #[error("position coordinate {0} does not fit in {POSITION_BITS} bits")]
    PositionRange(u8),
    #[error("unknown task code {0}")]
    TaskCode(u8),
    #[error("direction {direction} is not valid for task {task:?}")]
    DirectionForTask { task: Task, direction: Direction },
    #[error("hash must be zero unless the direction addresses a subgrid (got {0})")]
    UnexpectedHash(u16),
    #[error("malformed query word {0:#018x}: unused bits set")]
    MalformedQuery(u64),
}

/// Position of a grid inside its super-grid, `p_k‖p_j‖p_i` in 9 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PositionHash(u16);

impl PositionHash {
    pub const ROOT: PositionHash = PositionHash(0);

    pub fn new(i: u8, j: u8, k: u8) -> Result<Self, CodecError> {
        for c in [i, j, k] {
            if c >= 1 << POSITION_BITS {
                return Err(CodecError::PositionRange(c));
            }
        }
        Ok(PositionHash(((k as u16) << 6) | ((j as u16) << 3) | i as u16))
    }

    pub fn from_bits(bits: u16) -> Result<Self, CodecError> {
        if bits > MAX_HASH {
            return Err(CodecError::HashRange(bits));
        }
        Ok(PositionHash(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn i(self) -> u8 {
        (self.0 & 0b111) as u8
    }

    pub fn j(self) -> u8 {
        ((self.0 >> 3) & 0b111) as u8
    }

    pub fn k(self) -> u8 {
        ((self.0 >> 6) & 0b111) as u8
    }

    pub fn ijk(self) -> [u8; 3] {
        [self.i(), self.j(), self.k()]
    }
}

pub fn encode_position_hash(i: u8, j: u8, k: u8) -> Result<u16, CodecError> {
    PositionHash::new(i, j, k).map(PositionHash::bits)
}

/// Unique grid identifier: owning rank, per-rank grid id and position hash.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridUid(u64);

impl GridUid {
    pub fn new(rank: Rank, gid: u32, hash: PositionHash) -> Result<Self, CodecError> {
        if gid > MAX_GID {
            return Err(CodecError::GidRange(gid));
        }
        Ok(GridUid(
            ((rank as u64) << RANK_SHIFT) | ((gid as u64) << GID_SHIFT) | hash.bits() as u64,
        ))
    }

    /// Every 64-bit word is a valid UID.
    pub const fn from_bits(bits: u64) -> Self {
        GridUid(bits)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub fn rank(self) -> Rank {
        (self.0 >> RANK_SHIFT) as Rank
    }

    pub fn gid(self) -> u32 {
        ((self.0 >> GID_SHIFT) as u32) & MAX_GID
    }

    pub fn hash(self) -> PositionHash {
        PositionHash((self.0 as u16) & MAX_HASH)
    }

    /// `gid ‖ hash`, the low 32 bits.
    pub fn tag(self) -> u32 {
        self.0 as u32
    }
}

impl fmt::Debug for GridUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}#{}", self.rank(), self.gid(), self.hash().bits())
    }
}

impl fmt::Display for GridUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub fn encode_uid(rank: Rank, gid: u32, hash: u16) -> Result<u64, CodecError> {
    GridUid::new(rank, gid, PositionHash::from_bits(hash)?).map(GridUid::bits)
}

pub fn decode_uid(bits: u64) -> GridUid {
    GridUid::from_bits(bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Refine = 0,
    Delete = 1,
    Migrate = 2,
}

impl Task {
    pub fn from_code(code: u8) -> Result<Self, CodecError> {
        match code {
            0 => Ok(Task::Refine),
            1 => Ok(Task::Delete),
            2 => Ok(Task::Migrate),
            c => Err(CodecError::TaskCode(c)),
        }
    }
}

/// Relation of the issuing grid as seen from the receiving grid.
///
/// Codes 0..=5 are the six same-depth faces, 6 a subgrid and 7 the supergrid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    East = 0,
    West = 1,
    North = 2,
    South = 3,
    Top = 4,
    Bottom = 5,
    Subgrid = 6,
    Supergrid = 7,
}

impl Direction {
    pub const FACES: [Direction; 6] = [
        Direction::East,
        Direction::West,
        Direction::North,
        Direction::South,
        Direction::Top,
        Direction::Bottom,
    ];

    pub fn from_code(code: u8) -> Direction {
        match code & 0b111 {
            0 => Direction::East,
            1 => Direction::West,
            2 => Direction::North,
            3 => Direction::South,
            4 => Direction::Top,
            5 => Direction::Bottom,
            6 => Direction::Subgrid,
            _ => Direction::Supergrid,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_face(self) -> bool {
        (self as u8) < 6
    }

    /// Face index 0..6 for neighbor slot arrays.
    pub fn face_index(self) -> Option<usize> {
        self.is_face().then_some(self as usize)
    }

    /// Opposite face; sub- and supergrid swap.
    pub fn opposite(self) -> Direction {
        match self {
            Direction::East => Direction::West,
            Direction::West => Direction::East,
            Direction::North => Direction::South,
            Direction::South => Direction::North,
            Direction::Top => Direction::Bottom,
            Direction::Bottom => Direction::Top,
            Direction::Subgrid => Direction::Supergrid,
            Direction::Supergrid => Direction::Subgrid,
        }
    }

    /// Axis (0 = x, 1 = y, 2 = z) of a face direction.
    pub fn axis(self) -> Option<usize> {
        self.face_index().map(|f| f / 2)
    }

    /// True for east, north and top.
    pub fn is_positive(self) -> bool {
        self.is_face() && (self as u8).is_multiple_of(2)
    }

    pub fn face(axis: usize, positive: bool) -> Direction {
        Direction::FACES[axis * 2 + usize::from(!positive)]
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::East => "east",
            Direction::West => "west",
            Direction::North => "north",
            Direction::South => "south",
            Direction::Top => "top",
            Direction::Bottom => "bottom",
            Direction::Subgrid => "subgrid",
            Direction::Supergrid => "supergrid",
        };
        f.write_str(s)
    }
}

/// One task message addressed to a grid on the receiving rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Query {
    pub task: Task,
    pub direction: Direction,
    pub gid: u32,
    pub hash: PositionHash,
}

impl Query {
    pub fn new(task: Task, direction: Direction, gid: u32, hash: PositionHash) -> Result<Self, CodecError> {
        let q = Query {
            task,
            direction,
            gid,
            hash,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn refine(direction: Direction, gid: u32) -> Result<Self, CodecError> {
        Query::new(Task::Refine, direction, gid, PositionHash::ROOT)
    }

    fn validate(&self) -> Result<(), CodecError> {
        if self.gid > MAX_GID {
            return Err(CodecError::GidRange(self.gid));
        }
        let allowed = match self.task {
            Task::Refine => self.direction.is_face(),
            Task::Delete => self.direction != Direction::Supergrid,
            Task::Migrate => true,
        };
        if !allowed {
            return Err(CodecError::DirectionForTask {
                task: self.task,
                direction: self.direction,
            });
        }
        if self.direction != Direction::Subgrid && self.hash.bits() != 0 {
            return Err(CodecError::UnexpectedHash(self.hash.bits()));
        }
        Ok(())
    }

    pub fn encode(&self) -> u64 {
        ((self.task as u64) << TASK_SHIFT)
            | ((self.direction as u64) << DIRECTION_SHIFT)
            | ((self.gid as u64) << GID_SHIFT)
            | self.hash.bits() as u64
    }

    pub fn decode(word: u64) -> Result<Self, CodecError> {
        if word >> QUERY_USED_BITS != 0 {
            return Err(CodecError::MalformedQuery(word));
        }
        let task = Task::from_code(((word >> TASK_SHIFT) & 0b11) as u8)?;
        let direction = Direction::from_code(((word >> DIRECTION_SHIFT) & 0b111) as u8);
        let gid = ((word >> GID_SHIFT) as u32) & MAX_GID;
        let hash = PositionHash((word as u16) & MAX_HASH);
        Query::new(task, direction, gid, hash)
    }
}

pub fn encode_query(task: Task, direction: Direction, gid: u32, hash: u16) -> Result<u64, CodecError> {
    Query::new(task, direction, gid, PositionHash::from_bits(hash)?).map(|q| q.encode())
}

pub fn decode_query(word: u64) -> Result<Query, CodecError> {
    Query::decode(word)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uid_vectors() {
        assert_eq!(encode_uid(0, 0, 0).unwrap(), 0);
        assert_eq!(encode_uid(1, 0, 0).unwrap(), 1u64 << 32);
        assert_eq!(encode_uid(0, 1, 0).unwrap(), 512);
        let u = decode_uid(513);
        assert_eq!((u.rank(), u.gid(), u.hash().bits()), (0, 1, 1));
        assert_eq!(u.tag(), 513);
    }

    #[test]
    fn uid_range_errors() {
        assert_eq!(encode_uid(0, 1 << 23, 0), Err(CodecError::GidRange(1 << 23)));
        assert_eq!(encode_uid(0, 0, 512), Err(CodecError::HashRange(512)));
    }

    #[test]
    fn position_hash_vectors() {
        assert_eq!(encode_position_hash(0, 0, 0).unwrap(), 0);
        assert_eq!(encode_position_hash(1, 0, 1).unwrap(), 65);
        assert_eq!(encode_position_hash(7, 7, 7).unwrap(), 511);
        assert_eq!(encode_position_hash(8, 0, 0), Err(CodecError::PositionRange(8)));
        let h = PositionHash::new(3, 5, 6).unwrap();
        assert_eq!(h.ijk(), [3, 5, 6]);
    }

    #[test]
    fn query_vectors() {
        assert_eq!(encode_query(Task::Refine, Direction::East, 0, 0).unwrap(), 0);
        let w = encode_query(Task::Delete, Direction::Subgrid, 3, 65).unwrap();
        assert_eq!(w, (1u64 << 35) | (6u64 << 32) | (3u64 << 9) | 65);
        let q = decode_query(w).unwrap();
        assert_eq!(q.task, Task::Delete);
        assert_eq!(q.direction, Direction::Subgrid);
        assert_eq!(q.gid, 3);
        assert_eq!(q.hash.bits(), 65);
    }

    #[test]
    fn query_rejections() {
        assert!(matches!(
            encode_query(Task::Refine, Direction::Subgrid, 0, 0),
            Err(CodecError::DirectionForTask { .. })
        ));
        assert!(matches!(
            encode_query(Task::Delete, Direction::Supergrid, 0, 0),
            Err(CodecError::DirectionForTask { .. })
        ));
        assert_eq!(
            encode_query(Task::Refine, Direction::North, 0, 4),
            Err(CodecError::UnexpectedHash(4))
        );
        assert_eq!(decode_query(1 << 37), Err(CodecError::MalformedQuery(1 << 37)));
        assert_eq!(decode_query(3 << 35), Err(CodecError::TaskCode(3)));
    }

    #[test]
    fn widths_sum_to_64() {
        assert_eq!(32 + GID_BITS + HASH_BITS, 64);
        assert_eq!(27 + TASK_BITS + DIRECTION_BITS + GID_BITS + HASH_BITS, 64);
    }

    #[test]
    fn direction_geometry() {
        for d in Direction::FACES {
            assert_eq!(d.opposite().opposite(), d);
            assert_eq!(d.opposite().axis(), d.axis());
            assert_ne!(d.opposite().is_positive(), d.is_positive());
            assert_eq!(Direction::face(d.axis().unwrap(), d.is_positive()), d);
        }
    }

    proptest! {
        #[test]
        fn uid_roundtrip(rank in any::<u32>(), gid in 0..=MAX_GID, hash in 0..=MAX_HASH) {
            let u = decode_uid(encode_uid(rank, gid, hash).unwrap());
            prop_assert_eq!((u.rank(), u.gid(), u.hash().bits()), (rank, gid, hash));
        }

        #[test]
        fn any_word_is_a_uid(bits in any::<u64>()) {
            let u = decode_uid(bits);
            prop_assert_eq!(encode_uid(u.rank(), u.gid(), u.hash().bits()).unwrap(), bits);
        }

        #[test]
        fn uid_fields_are_disjoint(rank in any::<u32>(), gid in 0..=MAX_GID, hash in 0..=MAX_HASH) {
            let full = encode_uid(rank, gid, hash).unwrap();
            let parts = encode_uid(rank, 0, 0).unwrap()
                | encode_uid(0, gid, 0).unwrap()
                | encode_uid(0, 0, hash).unwrap();
            prop_assert_eq!(full, parts);
            prop_assert_eq!(encode_uid(rank, 0, 0).unwrap() & encode_uid(0, gid, hash).unwrap(), 0);
        }
    }
}
