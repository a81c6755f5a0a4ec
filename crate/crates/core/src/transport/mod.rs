//! Data plane: rings, doorbells and channel geometry.

pub mod doorbell;
pub mod notice;
pub mod ring;

pub use ring::{Consumer, Producer, RingCounters, RingLayout, RingOptions, TransportError, Woke};

/// The two rings of a channel: `forward` carries client (or guest) to
/// server (or host), `reverse` the other way. Each gets half the buffer.
pub fn channel_rings(buffer_size: usize) -> Option<(RingLayout, RingLayout)> {
    let half = buffer_size / 2;
    Some((RingLayout::fit(0, half)?, RingLayout::fit(half, half)?))
}

/// Host channel: guest-to-host shared ring in the first half, notice board
/// at the start of the second half.
pub fn host_channel_layout(buffer_size: usize) -> Option<(RingLayout, usize)> {
    let half = buffer_size / 2;
    (half >= notice::BOARD_SIZE).then_some(())?;
    Some((RingLayout::fit(0, half)?, half))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_channel_geometry() {
        let (fwd, rev) = channel_rings(512 << 10).unwrap();
        assert_eq!((fwd.header, fwd.capacity), (0, 128 << 10));
        assert_eq!((rev.header, rev.capacity), (256 << 10, 128 << 10));
        let (ring, board) = host_channel_layout(64 << 10).unwrap();
        assert_eq!(ring.capacity, 16 << 10);
        assert_eq!(board, 32 << 10);
    }
}
