//! Binary codec for the datagrams exchanged between the operator-side and
//! remote-side twins.
//!
//! All multi-byte fields are little-endian. Every datagram starts with the
//! same 16-byte header and ends with a one-byte XOR checksum over all
//! preceding bytes.
//!
//! ```text
//! header   0..2  magic 0x5457        2  version (=1)     3  kind
//!          4..8  seq (u32)           8..16 t_us (u64)
//!
//! pose (kind 1, 46 bytes)
//!          16..28 x, y, z (f32)      28..32 aperture (f32)
//!          32     closed (0/1)       33..45 zero padding     45 checksum
//!
//! object (kind 2, 46 bytes)
//!          16..28 x, y, z (f32)      28..30 class_id (u16)   30..34 confidence (f32)
//!          34..38 instance_id (u32)  38..45 zero padding     45 checksum
//!
//! cloud chunk (kind 3, 24 + 12·n bytes, n <= 123, at most 1500 bytes)
//!          16..18 cloud_id (u16)     18..20 chunk_index (u16) 20..22 chunk_count (u16)
//!          22     point_count (u8)   23..23+12n points (x, y, z f32 each)
//!          last   checksum
//! ```

use nalgebra::Vector3;
use thiserror::Error;

use crate::discrepancy::DiscrepancyCloud;
use crate::kinematics::Pose;

pub const MAGIC: u16 = 0x5457;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Size of pose and object datagrams.
pub const FIXED_LEN: usize = 46;
pub const MAX_CHUNK_LEN: usize = 1500;
/// Header, four chunk fields and the checksum.
pub const CHUNK_OVERHEAD: usize = HEADER_LEN + 7 + 1;
pub const MAX_POINTS_PER_CHUNK: usize = (MAX_CHUNK_LEN - CHUNK_OVERHEAD) / 12;

const CHUNK_POINTS_OFFSET: usize = HEADER_LEN + 7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("malformed datagram: {0}")]
    Format(String),
    #[error("checksum mismatch: computed {computed:#04x}, carried {carried:#04x}")]
    Corruption { computed: u8, carried: u8 },
    #[error("unsupported datagram kind {0}")]
    Unsupported(u8),
    #[error("invalid message: {0}")]
    InvalidInput(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Pose = 1,
    Object = 2,
    CloudChunk = 3,
}

impl Kind {
    fn from_byte(b: u8) -> Option<Kind> {
        match b {
            1 => Some(Kind::Pose),
            2 => Some(Kind::Object),
            3 => Some(Kind::CloudChunk),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseDatagram {
    pub seq: u32,
    pub t_us: u64,
    pub position: [f32; 3],
    pub aperture: f32,
    pub closed: bool,
}

impl PoseDatagram {
    pub fn from_pose(pose: &Pose, seq: u32, t_us: u64) -> Self {
        Self {
            seq,
            t_us,
            position: [pose.position.x as f32, pose.position.y as f32, pose.position.z as f32],
            aperture: pose.aperture as f32,
            closed: pose.closed,
        }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::new(
            Vector3::new(self.position[0] as f64, self.position[1] as f64, self.position[2] as f64),
            self.aperture as f64,
            self.closed,
        )
    }

    pub fn encode(&self) -> [u8; FIXED_LEN] {
        let mut buf = [0u8; FIXED_LEN];
        write_header(&mut buf, Kind::Pose, self.seq, self.t_us);
        write_f32s(&mut buf[16..28], &self.position);
        buf[28..32].copy_from_slice(&self.aperture.to_le_bytes());
        buf[32] = self.closed as u8;
        seal(&mut buf);
        buf
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectDatagram {
    pub seq: u32,
    pub t_us: u64,
    pub position: [f32; 3],
    pub class_id: u16,
    pub confidence: f32,
    pub instance_id: u32,
}

impl ObjectDatagram {
    pub fn position_f64(&self) -> Vector3<f64> {
        Vector3::new(self.position[0] as f64, self.position[1] as f64, self.position[2] as f64)
    }

    pub fn encode(&self) -> [u8; FIXED_LEN] {
        let mut buf = [0u8; FIXED_LEN];
        write_header(&mut buf, Kind::Object, self.seq, self.t_us);
        write_f32s(&mut buf[16..28], &self.position);
        buf[28..30].copy_from_slice(&self.class_id.to_le_bytes());
        buf[30..34].copy_from_slice(&self.confidence.to_le_bytes());
        buf[34..38].copy_from_slice(&self.instance_id.to_le_bytes());
        seal(&mut buf);
        buf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudChunkDatagram {
    pub seq: u32,
    pub t_us: u64,
    pub cloud_id: u16,
    pub chunk_index: u16,
    pub chunk_count: u16,
    pub points: Vec<[f32; 3]>,
}

impl CloudChunkDatagram {
    pub fn encoded_len(&self) -> usize {
        CHUNK_OVERHEAD + 12 * self.points.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        if self.points.len() > MAX_POINTS_PER_CHUNK {
            return Err(WireError::InvalidInput(format!(
                "{} points exceed the per-chunk limit of {MAX_POINTS_PER_CHUNK}",
                self.points.len()
            )));
        }
        if self.chunk_index >= self.chunk_count {
            return Err(WireError::InvalidInput(format!(
                "chunk index {} not below chunk count {}",
                self.chunk_index, self.chunk_count
            )));
        }
        let mut buf = vec![0u8; self.encoded_len()];
        write_header(&mut buf, Kind::CloudChunk, self.seq, self.t_us);
        buf[16..18].copy_from_slice(&self.cloud_id.to_le_bytes());
        buf[18..20].copy_from_slice(&self.chunk_index.to_le_bytes());
        buf[20..22].copy_from_slice(&self.chunk_count.to_le_bytes());
        buf[22] = self.points.len() as u8;
        for (i, p) in self.points.iter().enumerate() {
            let at = CHUNK_POINTS_OFFSET + 12 * i;
            write_f32s(&mut buf[at..at + 12], p);
        }
        seal(&mut buf);
        Ok(buf)
    }
}

/// A decoded datagram.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Pose(PoseDatagram),
    Object(ObjectDatagram),
    CloudChunk(CloudChunkDatagram),
}

impl Message {
    pub fn kind(&self) -> Kind {
        match self {
            Message::Pose(_) => Kind::Pose,
            Message::Object(_) => Kind::Object,
            Message::CloudChunk(_) => Kind::CloudChunk,
        }
    }
}

pub fn encode_pose(pose: &Pose, seq: u32, t_us: u64) -> Result<[u8; FIXED_LEN], WireError> {
    if !pose.is_valid() {
        return Err(WireError::InvalidInput(format!("pose {pose:?} is not valid")));
    }
    Ok(PoseDatagram::from_pose(pose, seq, t_us).encode())
}

pub fn encode_object(
    class_id: u16,
    confidence: f32,
    instance_id: u32,
    position: [f32; 3],
    seq: u32,
    t_us: u64,
) -> Result<[u8; FIXED_LEN], WireError> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(WireError::InvalidInput(format!("confidence {confidence} outside [0, 1]")));
    }
    if !position.iter().all(|v| v.is_finite()) {
        return Err(WireError::InvalidInput("non-finite object position".into()));
    }
    Ok(ObjectDatagram {
        seq,
        t_us,
        position,
        class_id,
        confidence,
        instance_id,
    }
    .encode())
}

/// True when `len` is the size of some well-formed datagram.
fn is_plausible_len(len: usize) -> bool {
    len == FIXED_LEN || ((CHUNK_OVERHEAD..=MAX_CHUNK_LEN).contains(&len) && (len - CHUNK_OVERHEAD).is_multiple_of(12))
}

/// Validates and decodes one datagram.
///
/// Lengths that fit no datagram kind are rejected as format errors before
/// anything else is read; the checksum is verified next, so corruption of any
/// single byte of a well-sized datagram is reported as [`WireError::Corruption`].
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    if !is_plausible_len(bytes.len()) {
        return Err(WireError::Format(format!("{} bytes is not a valid datagram length", bytes.len())));
    }
    let (body, carried) = bytes.split_at(bytes.len() - 1);
    let computed = xor(body);
    if computed != carried[0] {
        return Err(WireError::Corruption {
            computed,
            carried: carried[0],
        });
    }
    let magic = u16::from_le_bytes([bytes[0], bytes[1]]);
    if magic != MAGIC {
        return Err(WireError::Format(format!("bad magic {magic:#06x}")));
    }
    if bytes[2] != VERSION {
        return Err(WireError::Format(format!("unknown version {}", bytes[2])));
    }
    let kind = Kind::from_byte(bytes[3]).ok_or(WireError::Unsupported(bytes[3]))?;
    let seq = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let t_us = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    match kind {
        Kind::Pose => {
            expect_len(kind, bytes.len(), FIXED_LEN)?;
            let closed = match bytes[32] {
                0 => false,
                1 => true,
                b => return Err(WireError::Format(format!("closed flag {b} is not 0/1"))),
            };
            Ok(Message::Pose(PoseDatagram {
                seq,
                t_us,
                position: read_f32x3(&bytes[16..28]),
                aperture: read_f32(&bytes[28..32]),
                closed,
            }))
        }
        Kind::Object => {
            expect_len(kind, bytes.len(), FIXED_LEN)?;
            let confidence = read_f32(&bytes[30..34]);
            if !(0.0..=1.0).contains(&confidence) {
                return Err(WireError::Format(format!("confidence {confidence} outside [0, 1]")));
            }
            Ok(Message::Object(ObjectDatagram {
                seq,
                t_us,
                position: read_f32x3(&bytes[16..28]),
                class_id: u16::from_le_bytes([bytes[28], bytes[29]]),
                confidence,
                instance_id: u32::from_le_bytes(bytes[34..38].try_into().unwrap()),
            }))
        }
        Kind::CloudChunk => {
            let point_count = bytes[22] as usize;
            if point_count > MAX_POINTS_PER_CHUNK {
                return Err(WireError::Format(format!("point count {point_count} above {MAX_POINTS_PER_CHUNK}")));
            }
            expect_len(kind, bytes.len(), CHUNK_OVERHEAD + 12 * point_count)?;
            let chunk_index = u16::from_le_bytes([bytes[18], bytes[19]]);
            let chunk_count = u16::from_le_bytes([bytes[20], bytes[21]]);
            if chunk_index >= chunk_count {
                return Err(WireError::Format(format!(
                    "chunk index {chunk_index} not below chunk count {chunk_count}"
                )));
            }
            let points = (0..point_count)
                .map(|i| {
                    let at = CHUNK_POINTS_OFFSET + 12 * i;
                    read_f32x3(&bytes[at..at + 12])
                })
                .collect();
            Ok(Message::CloudChunk(CloudChunkDatagram {
                seq,
                t_us,
                cloud_id: u16::from_le_bytes([bytes[16], bytes[17]]),
                chunk_index,
                chunk_count,
                points,
            }))
        }
    }
}

/// Splits a cloud into chunks of at most [`MAX_POINTS_PER_CHUNK`] points.
/// An empty cloud still yields one (empty) chunk so the receiver learns the
/// cloud is empty. Chunk `seq` values equal their index.
pub fn chunk_cloud(cloud: &DiscrepancyCloud, cloud_id: u16) -> Vec<CloudChunkDatagram> {
    let points: Vec<[f32; 3]> = cloud.points.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    let count = points.len().div_ceil(MAX_POINTS_PER_CHUNK).max(1);
    assert!(count <= u16::MAX as usize, "cloud too large to chunk");
    (0..count)
        .map(|i| {
            let lo = (i * MAX_POINTS_PER_CHUNK).min(points.len());
            let hi = ((i + 1) * MAX_POINTS_PER_CHUNK).min(points.len());
            CloudChunkDatagram {
                seq: i as u32,
                t_us: cloud.timestamp_us,
                cloud_id,
                chunk_index: i as u16,
                chunk_count: count as u16,
                points: points[lo..hi].to_vec(),
            }
        })
        .collect()
}

/// Rebuilds a cloud from whatever chunks arrived. The flag is true iff every
/// index `0..chunk_count` is present; missing chunks simply leave their
/// points out.
pub fn reassemble_cloud(chunks: &[CloudChunkDatagram]) -> Result<(DiscrepancyCloud, bool), WireError> {
    let Some(first) = chunks.first() else {
        return Ok((DiscrepancyCloud::default(), false));
    };
    let mut slots: Vec<Option<&CloudChunkDatagram>> = vec![None; first.chunk_count as usize];
    for c in chunks {
        if c.cloud_id != first.cloud_id {
            return Err(WireError::Protocol(format!(
                "mixed cloud ids {} and {}",
                first.cloud_id, c.cloud_id
            )));
        }
        if c.chunk_count != first.chunk_count {
            return Err(WireError::Protocol(format!(
                "conflicting chunk counts {} and {} for cloud {}",
                first.chunk_count, c.chunk_count, c.cloud_id
            )));
        }
        let slot = slots
            .get_mut(c.chunk_index as usize)
            .ok_or_else(|| WireError::Protocol(format!("chunk index {} out of range", c.chunk_index)))?;
        slot.get_or_insert(c);
    }
    let complete = slots.iter().all(Option::is_some);
    let points = slots
        .iter()
        .flatten()
        .flat_map(|c| c.points.iter())
        .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect();
    Ok((
        DiscrepancyCloud {
            points,
            timestamp_us: first.t_us,
        },
        complete,
    ))
}

pub fn xor(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

fn write_header(buf: &mut [u8], kind: Kind, seq: u32, t_us: u64) {
    buf[0..2].copy_from_slice(&MAGIC.to_le_bytes());
    buf[2] = VERSION;
    buf[3] = kind as u8;
    buf[4..8].copy_from_slice(&seq.to_le_bytes());
    buf[8..16].copy_from_slice(&t_us.to_le_bytes());
}

fn seal(buf: &mut [u8]) {
    let n = buf.len();
    buf[n - 1] = xor(&buf[..n - 1]);
}

fn expect_len(kind: Kind, len: usize, expected: usize) -> Result<(), WireError> {
    if len != expected {
        return Err(WireError::Format(format!("{kind:?} datagram of {len} bytes, expected {expected}")));
    }
    Ok(())
}

fn write_f32s(dst: &mut [u8], values: &[f32]) {
    for (chunk, v) in dst.chunks_exact_mut(4).zip(values) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
}

fn read_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes(b.try_into().unwrap())
}

fn read_f32x3(b: &[u8]) -> [f32; 3] {
    [read_f32(&b[0..4]), read_f32(&b[4..8]), read_f32(&b[8..12])]
}
