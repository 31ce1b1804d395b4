//! Frame codec for the proxy-to-proxy byte stream.
//!
//! Every unit on a virtual connection starts with an 8-byte control command
//! made of four big-endian `u16` fields:
//!
//! ```text
//! +---------+----------+----------+----------+----------------+
//! | command | operand1 | operand2 | reserved | payload ...    |
//! +---------+----------+----------+----------+----------------+
//! ```
//!
//! | command   | operand1 | operand2       | reserved            |
//! |-----------|----------|----------------|---------------------|
//! | Create    | conn id  | 0              | 0                   |
//! | Remove    | conn id  | 0              | end-of-stream seq   |
//! | Relay     | conn id  | payload length | sequence number     |
//! | KeepAlive | 0        | 0              | 0                   |
//!
//! Only Relay frames carry a payload.

use std::fmt;

use thiserror::Error;

pub const FRAME_HEADER_LEN: usize = 8;
pub const MAX_FRAME_PAYLOAD: usize = 16384;

/// Identifier of a real connection as carried in `operand1`.
pub type ConnId = u16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {len} bytes exceeds the {MAX_FRAME_PAYLOAD}-byte frame limit")]
    PayloadTooLarge { len: usize },
    #[error("{cmd} frame cannot carry a payload ({len} bytes given)")]
    UnexpectedPayload { cmd: CommandType, len: usize },
    #[error("header declares {declared} payload bytes but {actual} were supplied")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown command code {code:#06x} at byte offset {offset}")]
    UnknownCommand { code: u16, offset: u64 },
    #[error("relay length {len} exceeds {MAX_FRAME_PAYLOAD} at byte offset {offset}")]
    OversizedRelay { len: usize, offset: u64 },
    #[error("{cmd} frame with non-zero length {len} at byte offset {offset}")]
    NonZeroControlLength {
        cmd: CommandType,
        len: usize,
        offset: u64,
    },
}

impl WireError {
    /// Stream offset of the offending header, for decode errors.
    pub fn offset(&self) -> Option<u64> {
        match self {
            WireError::UnknownCommand { offset, .. }
            | WireError::OversizedRelay { offset, .. }
            | WireError::NonZeroControlLength { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommandType {
    Create,
    Remove,
    Relay,
    KeepAlive,
}

impl CommandType {
    pub const ALL: [CommandType; 4] = [
        CommandType::Create,
        CommandType::Remove,
        CommandType::Relay,
        CommandType::KeepAlive,
    ];

    pub fn code(self) -> u16 {
        match self {
            CommandType::Create => 1,
            CommandType::Remove => 2,
            CommandType::Relay => 3,
            CommandType::KeepAlive => 4,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(CommandType::Create),
            2 => Some(CommandType::Remove),
            3 => Some(CommandType::Relay),
            4 => Some(CommandType::KeepAlive),
            _ => None,
        }
    }
}

impl fmt::Display for CommandType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            CommandType::Create => "create",
            CommandType::Remove => "remove",
            CommandType::Relay => "relay",
            CommandType::KeepAlive => "keep-alive",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameHeader {
    pub cmd: CommandType,
    pub operand1: u16,
    pub operand2: u16,
    pub reserved: u16,
}

impl FrameHeader {
    pub fn to_bytes(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut out = [0u8; FRAME_HEADER_LEN];
        out[0..2].copy_from_slice(&self.cmd.code().to_be_bytes());
        out[2..4].copy_from_slice(&self.operand1.to_be_bytes());
        out[4..6].copy_from_slice(&self.operand2.to_be_bytes());
        out[6..8].copy_from_slice(&self.reserved.to_be_bytes());
        out
    }

    /// Parses one header; `offset` is only used for error reporting.
    pub fn parse(bytes: &[u8; FRAME_HEADER_LEN], offset: u64) -> Result<Self, WireError> {
        let field = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let code = field(0);
        let cmd = CommandType::from_code(code).ok_or(WireError::UnknownCommand { code, offset })?;
        let header = FrameHeader {
            cmd,
            operand1: field(2),
            operand2: field(4),
            reserved: field(6),
        };
        let len = header.operand2 as usize;
        match cmd {
            CommandType::Relay if len > MAX_FRAME_PAYLOAD => {
                Err(WireError::OversizedRelay { len, offset })
            }
            CommandType::Relay => Ok(header),
            _ if len != 0 => Err(WireError::NonZeroControlLength { cmd, len, offset }),
            _ => Ok(header),
        }
    }
}

/// A header plus its payload. The payload length always equals `operand2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    header: FrameHeader,
    payload: Vec<u8>,
}

impl Frame {
    pub fn new(header: FrameHeader, payload: Vec<u8>) -> Result<Self, WireError> {
        if payload.len() > MAX_FRAME_PAYLOAD {
            return Err(WireError::PayloadTooLarge { len: payload.len() });
        }
        if header.cmd != CommandType::Relay && !payload.is_empty() {
            return Err(WireError::UnexpectedPayload {
                cmd: header.cmd,
                len: payload.len(),
            });
        }
        if header.operand2 as usize != payload.len() {
            return Err(WireError::LengthMismatch {
                declared: header.operand2 as usize,
                actual: payload.len(),
            });
        }
        Ok(Frame { header, payload })
    }

    pub fn relay(conn: ConnId, seq: u16, payload: Vec<u8>) -> Result<Self, WireError> {
        if payload.len() > MAX_FRAME_PAYLOAD {
            return Err(WireError::PayloadTooLarge { len: payload.len() });
        }
        let header = FrameHeader {
            cmd: CommandType::Relay,
            operand1: conn,
            operand2: payload.len() as u16,
            reserved: seq,
        };
        Ok(Frame { header, payload })
    }

    pub fn create(conn: ConnId) -> Self {
        Self::control(CommandType::Create, conn, 0)
    }

    /// `end_seq` is the sequence number the next Relay would have used, so
    /// the receiver knows when every Relay for `conn` has arrived.
    pub fn remove(conn: ConnId, end_seq: u16) -> Self {
        Self::control(CommandType::Remove, conn, end_seq)
    }

    pub fn keep_alive() -> Self {
        Self::control(CommandType::KeepAlive, 0, 0)
    }

    fn control(cmd: CommandType, operand1: u16, reserved: u16) -> Self {
        Frame {
            header: FrameHeader {
                cmd,
                operand1,
                operand2: 0,
                reserved,
            },
            payload: Vec::new(),
        }
    }

    pub fn header(&self) -> &FrameHeader {
        &self.header
    }

    pub fn cmd(&self) -> CommandType {
        self.header.cmd
    }

    pub fn conn_id(&self) -> ConnId {
        self.header.operand1
    }

    pub fn seq(&self) -> u16 {
        self.header.reserved
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<u8> {
        self.payload
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_frame_into(frame, &mut out)?;
    Ok(out)
}

/// Appends the encoding of `frame` to `out`.
pub fn encode_frame_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), WireError> {
    // Frame constructors uphold these, but the header is public.
    if frame.payload.len() > MAX_FRAME_PAYLOAD {
        return Err(WireError::PayloadTooLarge {
            len: frame.payload.len(),
        });
    }
    if frame.header.operand2 as usize != frame.payload.len() {
        return Err(WireError::LengthMismatch {
            declared: frame.header.operand2 as usize,
            actual: frame.payload.len(),
        });
    }
    out.extend_from_slice(&frame.header.to_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(())
}

/// Decodes every complete frame at the front of `buffer`.
///
/// Returns the frames and the number of bytes they occupy. A trailing
/// partial frame is left unconsumed.
pub fn decode_frames(buffer: &[u8]) -> Result<(Vec<Frame>, usize), WireError> {
    decode_frames_at(buffer, 0)
}

fn decode_frames_at(buffer: &[u8], base_offset: u64) -> Result<(Vec<Frame>, usize), WireError> {
    let mut frames = Vec::new();
    let mut pos = 0usize;
    while buffer.len() - pos >= FRAME_HEADER_LEN {
        let raw: &[u8; FRAME_HEADER_LEN] = buffer[pos..pos + FRAME_HEADER_LEN]
            .try_into()
            .expect("slice is header-sized");
        let header = FrameHeader::parse(raw, base_offset + pos as u64)?;
        let total = FRAME_HEADER_LEN + header.operand2 as usize;
        if buffer.len() - pos < total {
            break;
        }
        let payload = buffer[pos + FRAME_HEADER_LEN..pos + total].to_vec();
        frames.push(Frame { header, payload });
        pos += total;
    }
    Ok((frames, pos))
}

/// Incremental decoder for one virtual connection's inbound byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    consumed: u64,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `bytes` and returns every frame completed by them.
    pub fn push(&mut self, bytes: &[u8]) -> Result<Vec<Frame>, WireError> {
        self.buf.extend_from_slice(bytes);
        let (frames, used) = decode_frames_at(&self.buf[self.start..], self.consumed)?;
        self.start += used;
        self.consumed += used as u64;
        if self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        } else if self.start > self.buf.len() / 2 {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        Ok(frames)
    }

    /// Bytes of an incomplete frame still waiting for more input.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Total bytes consumed as complete frames so far.
    pub fn consumed(&self) -> u64 {
        self.consumed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relay_layout() {
        let frame = Frame::relay(7, 1, b"abc".to_vec()).unwrap();
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(
            bytes,
            [0x00, 0x03, 0x00, 0x07, 0x00, 0x03, 0x00, 0x01, 0x61, 0x62, 0x63]
        );
    }

    #[test]
    fn keep_alive_layout() {
        let bytes = encode_frame(&Frame::keep_alive()).unwrap();
        assert_eq!(bytes, [0x00, 0x04, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn create_layout() {
        let bytes = encode_frame(&Frame::create(1)).unwrap();
        assert_eq!(bytes, [0x00, 0x01, 0x00, 0x01, 0, 0, 0, 0]);
    }

    #[test]
    fn codes_are_distinct_and_invertible() {
        let codes: Vec<u16> = CommandType::ALL.iter().map(|c| c.code()).collect();
        assert_eq!(codes, vec![1, 2, 3, 4]);
        for cmd in CommandType::ALL {
            assert_eq!(CommandType::from_code(cmd.code()), Some(cmd));
        }
        assert_eq!(CommandType::from_code(0), None);
        assert_eq!(CommandType::from_code(5), None);
    }

    #[test]
    fn decode_examples() {
        let bytes = encode_frame(&Frame::relay(7, 1, b"abc".to_vec()).unwrap()).unwrap();
        let (frames, used) = decode_frames(&bytes).unwrap();
        assert_eq!(used, 11);
        assert_eq!(frames, vec![Frame::relay(7, 1, b"abc".to_vec()).unwrap()]);

        assert_eq!(decode_frames(&bytes[..10]).unwrap(), (vec![], 0));

        let mut two = encode_frame(&Frame::keep_alive()).unwrap();
        two.extend(encode_frame(&Frame::keep_alive()).unwrap());
        let (frames, used) = decode_frames(&two).unwrap();
        assert_eq!(frames, vec![Frame::keep_alive(), Frame::keep_alive()]);
        assert_eq!(used, 16);
    }

    #[test]
    fn oversized_payload_rejected() {
        let err = Frame::relay(1, 0, vec![0; MAX_FRAME_PAYLOAD + 1]).unwrap_err();
        assert_eq!(
            err,
            WireError::PayloadTooLarge {
                len: MAX_FRAME_PAYLOAD + 1
            }
        );
        assert!(Frame::relay(1, 0, vec![0; MAX_FRAME_PAYLOAD]).is_ok());
    }

    #[test]
    fn control_frames_reject_payload() {
        let header = FrameHeader {
            cmd: CommandType::Create,
            operand1: 3,
            operand2: 2,
            reserved: 0,
        };
        assert!(matches!(
            Frame::new(header, vec![1, 2]),
            Err(WireError::UnexpectedPayload { .. })
        ));
    }

    #[test]
    fn unknown_code_reports_offset() {
        let mut bytes = encode_frame(&Frame::keep_alive()).unwrap();
        bytes.extend_from_slice(&[0x00, 0x09, 0, 0, 0, 0, 0, 0]);
        let err = decode_frames(&bytes).unwrap_err();
        assert_eq!(err, WireError::UnknownCommand { code: 9, offset: 8 });
        assert_eq!(err.offset(), Some(8));
    }

    #[test]
    fn oversized_relay_header_rejected() {
        let header = [0x00, 0x03, 0x00, 0x01, 0x40, 0x01, 0x00, 0x00];
        let err = decode_frames(&header).unwrap_err();
        assert_eq!(
            err,
            WireError::OversizedRelay {
                len: 16385,
                offset: 0
            }
        );
    }

    #[test]
    fn control_frame_with_length_rejected() {
        let header = [0x00, 0x02, 0x00, 0x01, 0x00, 0x05, 0x00, 0x00];
        assert!(matches!(
            decode_frames(&header),
            Err(WireError::NonZeroControlLength { offset: 0, .. })
        ));
    }

    #[test]
    fn decoder_offsets_are_absolute() {
        let mut dec = FrameDecoder::new();
        let ka = encode_frame(&Frame::keep_alive()).unwrap();
        dec.push(&ka).unwrap();
        dec.push(&ka[..3]).unwrap();
        let err = dec.push(&[0xff, 0xff, 0, 0, 0, 0, 0, 0, 0]).unwrap_err();
        assert_eq!(err.offset(), Some(8));
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        prop_oneof![
            any::<u16>().prop_map(Frame::create),
            (any::<u16>(), any::<u16>()).prop_map(|(c, s)| Frame::remove(c, s)),
            Just(Frame::keep_alive()),
            (
                any::<u16>(),
                any::<u16>(),
                proptest::collection::vec(any::<u8>(), 0..2048)
            )
                .prop_map(|(c, s, p)| Frame::relay(c, s, p).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn split_stream_decodes_identically(
            frames in proptest::collection::vec(arb_frame(), 1..20),
            cuts in proptest::collection::vec(any::<prop::sample::Index>(), 0..10),
        ) {
            let mut stream = Vec::new();
            for f in &frames {
                let before = stream.len();
                encode_frame_into(f, &mut stream).unwrap();
                prop_assert_eq!(stream.len() - before, FRAME_HEADER_LEN + f.payload().len());
            }
            let mut points: Vec<usize> = cuts.iter().map(|i| i.index(stream.len() + 1)).collect();
            points.push(0);
            points.push(stream.len());
            points.sort_unstable();

            let mut dec = FrameDecoder::new();
            let mut out = Vec::new();
            for w in points.windows(2) {
                out.extend(dec.push(&stream[w[0]..w[1]]).unwrap());
            }
            prop_assert_eq!(dec.pending(), 0);
            prop_assert_eq!(dec.consumed(), stream.len() as u64);
            prop_assert_eq!(out, frames);
        }
    }
}
