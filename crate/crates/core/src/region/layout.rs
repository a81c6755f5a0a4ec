//! Byte layout of the control section. All integers are little-endian.
//!
//! ```text
//! control header (32 bytes)
//!   0  u32 magic                0x53495648
//!   4  u16 version
//!   6  u16 flags                bit 0: policy active
//!   8  u32 lock_word            0 = free, else owner token
//!  12  u32 control_size
//!  16  u32 max_channels
//!  20  u32 active_channel_count
//!  24  u64 next_free_offset     relative to the data section
//!
//! channel entry i at 32 + 64 * i (64 bytes)
//!   0  u32 channel_id
//!   4  u32 state                low byte; upper bytes reserved (zero)
//!   8  u32 server_service_id
//!  12  u32 client_service_id
//!  16  u32 server_vm_id
//!  20  u32 client_vm_id
//!  24  u64 server_pid
//!  32  u64 client_pid
//!  40  u32 buffer_offset        relative to the data section
//!  44  u32 buffer_size
//!  48  u64 session_id
//!  56  u32 writer_token         broker token that last wrote the entry
//!  60  u32 seq                  odd while a write is in progress
//! ```

use crate::identity::Identity;

pub const MAGIC: u32 = 0x5349_5648;
pub const VERSION: u16 = 1;

pub const HEADER_SIZE: usize = 32;
pub const ENTRY_SIZE: usize = 64;
pub const CHANNEL_ALIGN: usize = 4096;

pub const FLAG_POLICY_ACTIVE: u16 = 1;

pub(crate) mod hdr {
    pub const MAGIC: usize = 0;
    pub const VERSION: usize = 4;
    pub const FLAGS: usize = 6;
    pub const LOCK: usize = 8;
    pub const CONTROL_SIZE: usize = 12;
    pub const MAX_CHANNELS: usize = 16;
    pub const ACTIVE: usize = 20;
    pub const NEXT_FREE: usize = 24;
}

pub(crate) mod ent {
    pub const CHANNEL_ID: usize = 0;
    pub const STATE: usize = 4;
    pub const SERVER_SERVICE: usize = 8;
    pub const CLIENT_SERVICE: usize = 12;
    pub const SERVER_VM: usize = 16;
    pub const CLIENT_VM: usize = 20;
    pub const SERVER_PID: usize = 24;
    pub const CLIENT_PID: usize = 32;
    pub const BUFFER_OFFSET: usize = 40;
    pub const BUFFER_SIZE: usize = 44;
    pub const SESSION: usize = 48;
    pub const WRITER: usize = 56;
    pub const SEQ: usize = 60;
}

pub const fn entry_offset(channel_id: u32) -> usize {
    HEADER_SIZE + ENTRY_SIZE * channel_id as usize
}

pub const fn table_size(max_channels: u32) -> usize {
    HEADER_SIZE + ENTRY_SIZE * max_channels as usize
}

pub const fn align_up(value: usize, align: usize) -> usize {
    value.div_ceil(align) * align
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ChannelState {
    Free = 0,
    Temp = 1,
    Authorized = 2,
    Established = 3,
    Closed = 4,
}

impl ChannelState {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Free,
            1 => Self::Temp,
            2 => Self::Authorized,
            3 => Self::Established,
            4 => Self::Closed,
            _ => return None,
        })
    }

    /// Live channels own their buffer range and show up in the policy table.
    pub fn is_live(self) -> bool {
        matches!(self, Self::Temp | Self::Authorized | Self::Established)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Free => "FREE",
            Self::Temp => "TEMP",
            Self::Authorized => "AUTHORIZED",
            Self::Established => "ESTABLISHED",
            Self::Closed => "CLOSED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlHeader {
    pub magic: u32,
    pub version: u16,
    pub flags: u16,
    pub lock_word: u32,
    pub control_size: u32,
    pub max_channels: u32,
    pub active_channel_count: u32,
    pub next_free_offset: u64,
}

impl ControlHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        b[hdr::MAGIC..hdr::MAGIC + 4].copy_from_slice(&self.magic.to_le_bytes());
        b[hdr::VERSION..hdr::VERSION + 2].copy_from_slice(&self.version.to_le_bytes());
        b[hdr::FLAGS..hdr::FLAGS + 2].copy_from_slice(&self.flags.to_le_bytes());
        b[hdr::LOCK..hdr::LOCK + 4].copy_from_slice(&self.lock_word.to_le_bytes());
        b[hdr::CONTROL_SIZE..hdr::CONTROL_SIZE + 4].copy_from_slice(&self.control_size.to_le_bytes());
        b[hdr::MAX_CHANNELS..hdr::MAX_CHANNELS + 4].copy_from_slice(&self.max_channels.to_le_bytes());
        b[hdr::ACTIVE..hdr::ACTIVE + 4].copy_from_slice(&self.active_channel_count.to_le_bytes());
        b[hdr::NEXT_FREE..hdr::NEXT_FREE + 8].copy_from_slice(&self.next_free_offset.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_SIZE]) -> Self {
        Self {
            magic: le32(b, hdr::MAGIC),
            version: u16::from_le_bytes([b[hdr::VERSION], b[hdr::VERSION + 1]]),
            flags: u16::from_le_bytes([b[hdr::FLAGS], b[hdr::FLAGS + 1]]),
            lock_word: le32(b, hdr::LOCK),
            control_size: le32(b, hdr::CONTROL_SIZE),
            max_channels: le32(b, hdr::MAX_CHANNELS),
            active_channel_count: le32(b, hdr::ACTIVE),
            next_free_offset: le64(b, hdr::NEXT_FREE),
        }
    }

    pub fn policy_active(&self) -> bool {
        self.flags & FLAG_POLICY_ACTIVE != 0
    }
}

/// One channel-table record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMeta {
    pub channel_id: u32,
    pub state: ChannelState,
    pub server: Identity,
    pub client: Identity,
    pub buffer_offset: u32,
    pub buffer_size: u32,
    pub session_id: u64,
    pub writer_token: u32,
}

impl ChannelMeta {
    pub fn free(channel_id: u32) -> Self {
        Self {
            channel_id,
            state: ChannelState::Free,
            server: Identity::default(),
            client: Identity::default(),
            buffer_offset: 0,
            buffer_size: 0,
            session_id: 0,
            writer_token: 0,
        }
    }

    pub fn buffer_end(&self) -> u64 {
        u64::from(self.buffer_offset) + u64::from(self.buffer_size)
    }

    pub fn overlaps(&self, other: &ChannelMeta) -> bool {
        u64::from(self.buffer_offset) < other.buffer_end()
            && u64::from(other.buffer_offset) < self.buffer_end()
    }

    /// Encodes the entry; `seq` is written as given.
    pub fn to_bytes(&self, seq: u32) -> [u8; ENTRY_SIZE] {
        let mut b = [0u8; ENTRY_SIZE];
        put32(&mut b, ent::CHANNEL_ID, self.channel_id);
        put32(&mut b, ent::STATE, self.state as u32);
        put32(&mut b, ent::SERVER_SERVICE, self.server.service_id);
        put32(&mut b, ent::CLIENT_SERVICE, self.client.service_id);
        put32(&mut b, ent::SERVER_VM, self.server.vm_id);
        put32(&mut b, ent::CLIENT_VM, self.client.vm_id);
        b[ent::SERVER_PID..ent::SERVER_PID + 8].copy_from_slice(&self.server.pid.to_le_bytes());
        b[ent::CLIENT_PID..ent::CLIENT_PID + 8].copy_from_slice(&self.client.pid.to_le_bytes());
        put32(&mut b, ent::BUFFER_OFFSET, self.buffer_offset);
        put32(&mut b, ent::BUFFER_SIZE, self.buffer_size);
        b[ent::SESSION..ent::SESSION + 8].copy_from_slice(&self.session_id.to_le_bytes());
        put32(&mut b, ent::WRITER, self.writer_token);
        put32(&mut b, ent::SEQ, seq);
        b
    }

    /// Decodes an entry, returning it with its seq word. `None` if the state
    /// byte is not a known state or reserved bits are set.
    pub fn from_bytes(b: &[u8; ENTRY_SIZE]) -> Option<(Self, u32)> {
        let state_word = le32(b, ent::STATE);
        if state_word > 0xff {
            return None;
        }
        let state = ChannelState::from_u8(state_word as u8)?;
        let meta = Self {
            channel_id: le32(b, ent::CHANNEL_ID),
            state,
            server: Identity::new(le32(b, ent::SERVER_SERVICE), le32(b, ent::SERVER_VM), le64(b, ent::SERVER_PID)),
            client: Identity::new(le32(b, ent::CLIENT_SERVICE), le32(b, ent::CLIENT_VM), le64(b, ent::CLIENT_PID)),
            buffer_offset: le32(b, ent::BUFFER_OFFSET),
            buffer_size: le32(b, ent::BUFFER_SIZE),
            session_id: le64(b, ent::SESSION),
            writer_token: le32(b, ent::WRITER),
        };
        Some((meta, le32(b, ent::SEQ)))
    }
}

fn put32(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn le32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_meta() -> impl Strategy<Value = ChannelMeta> {
        (
            any::<u32>(),
            0u8..5,
            any::<[u32; 4]>(),
            any::<[u64; 2]>(),
            any::<[u32; 2]>(),
            any::<u64>(),
            any::<u32>(),
        )
            .prop_map(|(id, st, ids, pids, buf, session, writer)| ChannelMeta {
                channel_id: id,
                state: ChannelState::from_u8(st).unwrap(),
                server: Identity::new(ids[0], ids[2], pids[0]),
                client: Identity::new(ids[1], ids[3], pids[1]),
                buffer_offset: buf[0],
                buffer_size: buf[1],
                session_id: session,
                writer_token: writer,
            })
    }

    proptest! {
        #[test]
        fn entry_bytes_round_trip(meta in arb_meta(), seq in any::<u32>()) {
            let bytes = meta.to_bytes(seq);
            prop_assert_eq!(ChannelMeta::from_bytes(&bytes), Some((meta, seq)));
        }
    }

    #[test]
    fn header_bytes_round_trip() {
        let h = ControlHeader {
            magic: MAGIC,
            version: VERSION,
            flags: FLAG_POLICY_ACTIVE,
            lock_word: 7,
            control_size: 8192,
            max_channels: 64,
            active_channel_count: 3,
            next_free_offset: 65536,
        };
        assert_eq!(ControlHeader::from_bytes(&h.to_bytes()), h);
        assert_eq!(&h.to_bytes()[0..4], &[0x48, 0x56, 0x49, 0x53]);
    }

    #[test]
    fn unknown_state_rejected() {
        let mut b = ChannelMeta::free(1).to_bytes(0);
        b[ent::STATE] = 9;
        assert!(ChannelMeta::from_bytes(&b).is_none());
    }

    #[test]
    fn table_fits_default_control_section() {
        assert_eq!(table_size(64), 4128);
        assert_eq!(entry_offset(1), 96);
    }
}
