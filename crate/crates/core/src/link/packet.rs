//! On-air frame format.
//!
//! ```text
//! data:           | preamble 1 | access address 4 | header 2 | payload 0-37 | crc 3 |
//! advertisement:  | preamble 1 | access address 4 | header 2 | payload 1-32 |
//! ```
//!
//! Data frames are 10 to 47 bytes, advertisement frames 8 to 39 bytes and
//! carry no checksum. At 1 Mbps every byte costs 8 µs of airtime.

use thiserror::Error;

use super::crc;

pub const PREAMBLE: u8 = 0xAA;
pub const ADVERTISING_ACCESS_ADDRESS: u32 = 0x8E89_BED6;
pub const DATA_OVERHEAD_BYTES: usize = 10;
pub const ADV_OVERHEAD_BYTES: usize = 7;
pub const MAX_DATA_PAYLOAD: usize = 37;
pub const MIN_ADV_PAYLOAD: usize = 1;
pub const MAX_ADV_PAYLOAD: usize = 32;
pub const MIN_DATA_FRAME: usize = DATA_OVERHEAD_BYTES;
pub const MAX_DATA_FRAME: usize = DATA_OVERHEAD_BYTES + MAX_DATA_PAYLOAD;
pub const MIN_ADV_FRAME: usize = ADV_OVERHEAD_BYTES + MIN_ADV_PAYLOAD;
pub const MAX_ADV_FRAME: usize = ADV_OVERHEAD_BYTES + MAX_ADV_PAYLOAD;
/// 1 Mbps: one bit per microsecond.
pub const US_PER_BYTE: u64 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("data payload of {0} bytes exceeds {MAX_DATA_PAYLOAD}")]
    DataPayloadTooLong(usize),
    #[error("advertisement payload of {0} bytes outside [{MIN_ADV_PAYLOAD}, {MAX_ADV_PAYLOAD}]")]
    AdvPayloadLength(usize),
    #[error("frame of {0} bytes is malformed")]
    Malformed(usize),
    #[error("crc mismatch")]
    CrcMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    Data,
    Advertisement,
}

/// Logical link id: an empty PDU, or the start of an upper-layer message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Llid {
    #[default]
    Empty = 0b01,
    Start = 0b10,
}

/// Flags carried in a data-frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DataHeader {
    pub llid: Llid,
    /// Next expected sequence number; acknowledges the peer's last frame.
    pub nesn: bool,
    /// Sequence number of this frame.
    pub sn: bool,
    pub more_data: bool,
}

impl DataHeader {
    fn encode(&self, payload_len: usize) -> [u8; 2] {
        let b0 = self.llid as u8 | (u8::from(self.nesn) << 2) | (u8::from(self.sn) << 3) | (u8::from(self.more_data) << 4);
        [b0, payload_len as u8]
    }

    fn decode(bytes: [u8; 2]) -> Self {
        DataHeader {
            llid: if bytes[0] & 0b11 == Llid::Start as u8 { Llid::Start } else { Llid::Empty },
            nesn: bytes[0] & 0b0100 != 0,
            sn: bytes[0] & 0b1000 != 0,
            more_data: bytes[0] & 0b1_0000 != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvPduType {
    /// Connectable undirected advertisement.
    AdvInd = 0,
    AdvNonconnInd = 2,
    ConnectReq = 5,
}

impl AdvPduType {
    fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            0 => Some(AdvPduType::AdvInd),
            2 => Some(AdvPduType::AdvNonconnInd),
            5 => Some(AdvPduType::ConnectReq),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkPacket {
    kind: PacketKind,
    access_address: u32,
    header: [u8; 2],
    payload: Vec<u8>,
    crc: Option<u32>,
}

impl LinkPacket {
    pub fn data(access_address: u32, header: DataHeader, payload: &[u8], crc_init: u32) -> Result<Self, FrameError> {
        if payload.len() > MAX_DATA_PAYLOAD {
            return Err(FrameError::DataPayloadTooLong(payload.len()));
        }
        let header = header.encode(payload.len());
        let crc = crc::crc24(&header, payload, crc_init);
        Ok(LinkPacket {
            kind: PacketKind::Data,
            access_address,
            header,
            payload: payload.to_vec(),
            crc: Some(crc),
        })
    }

    pub fn advertisement(pdu_type: AdvPduType, payload: &[u8]) -> Result<Self, FrameError> {
        if !(MIN_ADV_PAYLOAD..=MAX_ADV_PAYLOAD).contains(&payload.len()) {
            return Err(FrameError::AdvPayloadLength(payload.len()));
        }
        Ok(LinkPacket {
            kind: PacketKind::Advertisement,
            access_address: ADVERTISING_ACCESS_ADDRESS,
            header: [pdu_type as u8, payload.len() as u8],
            payload: payload.to_vec(),
            crc: None,
        })
    }

    pub fn kind(&self) -> PacketKind {
        self.kind
    }

    pub fn access_address(&self) -> u32 {
        self.access_address
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn crc(&self) -> Option<u32> {
        self.crc
    }

    pub fn data_header(&self) -> Option<DataHeader> {
        (self.kind == PacketKind::Data).then(|| DataHeader::decode(self.header))
    }

    pub fn adv_type(&self) -> Option<AdvPduType> {
        match self.kind {
            PacketKind::Advertisement => AdvPduType::from_bits(self.header[0] & 0x0f),
            PacketKind::Data => None,
        }
    }

    pub fn total_len(&self) -> usize {
        match self.kind {
            PacketKind::Data => DATA_OVERHEAD_BYTES + self.payload.len(),
            PacketKind::Advertisement => ADV_OVERHEAD_BYTES + self.payload.len(),
        }
    }

    pub fn airtime_us(&self) -> u64 {
        airtime_us(self.total_len())
    }

    pub fn bits(&self) -> u32 {
        (self.total_len() * 8) as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_len());
        out.push(PREAMBLE);
        out.extend_from_slice(&self.access_address.to_le_bytes());
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&self.payload);
        if let Some(c) = self.crc {
            out.extend_from_slice(&crc::to_bytes(c));
        }
        out
    }

    /// Parses a received data frame and verifies its checksum.
    pub fn parse_data(bytes: &[u8], crc_init: u32) -> Result<Self, FrameError> {
        let n = bytes.len();
        if !(MIN_DATA_FRAME..=MAX_DATA_FRAME).contains(&n) || bytes[0] != PREAMBLE {
            return Err(FrameError::Malformed(n));
        }
        let access_address = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes"));
        let header = [bytes[5], bytes[6]];
        let payload = &bytes[7..n - 3];
        if usize::from(header[1]) != payload.len() {
            return Err(FrameError::Malformed(n));
        }
        let received = crc::from_bytes(bytes[n - 3..].try_into().expect("3 bytes"));
        if crc::crc24(&header, payload, crc_init) != received {
            return Err(FrameError::CrcMismatch);
        }
        Ok(LinkPacket {
            kind: PacketKind::Data,
            access_address,
            header,
            payload: payload.to_vec(),
            crc: Some(received),
        })
    }

    pub fn parse_advertisement(bytes: &[u8]) -> Result<Self, FrameError> {
        let n = bytes.len();
        if !(MIN_ADV_FRAME..=MAX_ADV_FRAME).contains(&n) || bytes[0] != PREAMBLE {
            return Err(FrameError::Malformed(n));
        }
        let access_address = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes"));
        let header = [bytes[5], bytes[6]];
        let payload = &bytes[7..];
        if usize::from(header[1]) != payload.len() || AdvPduType::from_bits(header[0] & 0x0f).is_none() {
            return Err(FrameError::Malformed(n));
        }
        Ok(LinkPacket {
            kind: PacketKind::Advertisement,
            access_address,
            header,
            payload: payload.to_vec(),
            crc: None,
        })
    }
}

pub fn airtime_us(total_len_bytes: usize) -> u64 {
    total_len_bytes as u64 * US_PER_BYTE
}

/// Total frame length of a data packet carrying `payload` bytes.
pub fn data_frame_len(payload: usize) -> usize {
    DATA_OVERHEAD_BYTES + payload
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_length_bounds() {
        let empty = LinkPacket::data(0x1234_5678, DataHeader::default(), &[], crc::DEFAULT_INIT).unwrap();
        assert_eq!(empty.total_len(), 10);
        assert_eq!(empty.to_bytes().len(), 10);
        let full = LinkPacket::data(1, DataHeader::default(), &[0; 37], crc::DEFAULT_INIT).unwrap();
        assert_eq!(full.total_len(), 47);
        assert_eq!(full.airtime_us(), 376);
        assert_eq!(
            LinkPacket::data(1, DataHeader::default(), &[0; 38], crc::DEFAULT_INIT),
            Err(FrameError::DataPayloadTooLong(38))
        );
        let adv = LinkPacket::advertisement(AdvPduType::AdvInd, &[1]).unwrap();
        assert_eq!(adv.total_len(), 8);
        assert_eq!(adv.crc(), None);
        assert_eq!(LinkPacket::advertisement(AdvPduType::AdvInd, &[0; 32]).unwrap().total_len(), 39);
        assert!(LinkPacket::advertisement(AdvPduType::AdvInd, &[]).is_err());
        assert!(LinkPacket::advertisement(AdvPduType::AdvInd, &[0; 33]).is_err());
    }

    #[test]
    fn twenty_byte_frame_is_160_us() {
        let p = LinkPacket::data(1, DataHeader::default(), &[7; 10], crc::DEFAULT_INIT).unwrap();
        assert_eq!(p.total_len(), 20);
        assert_eq!(p.airtime_us(), 160);
    }

    #[test]
    fn data_round_trip_and_crc_check() {
        let hdr = DataHeader { llid: Llid::Start, nesn: true, sn: false, more_data: true };
        let p = LinkPacket::data(0xA1B2_C3D4, hdr, b"temp=21.5", crc::DEFAULT_INIT).unwrap();
        let bytes = p.to_bytes();
        let back = LinkPacket::parse_data(&bytes, crc::DEFAULT_INIT).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.data_header(), Some(hdr));

        let mut bad = bytes.clone();
        bad[9] ^= 0x10;
        assert_eq!(LinkPacket::parse_data(&bad, crc::DEFAULT_INIT), Err(FrameError::CrcMismatch));
        let mut bad_len = bytes;
        bad_len[6] ^= 0x01;
        assert!(LinkPacket::parse_data(&bad_len, crc::DEFAULT_INIT).is_err());
    }

    #[test]
    fn advertisement_round_trip() {
        let p = LinkPacket::advertisement(AdvPduType::ConnectReq, b"pass").unwrap();
        let back = LinkPacket::parse_advertisement(&p.to_bytes()).unwrap();
        assert_eq!(back.adv_type(), Some(AdvPduType::ConnectReq));
        assert_eq!(back.payload(), b"pass");
        assert_eq!(back.access_address(), ADVERTISING_ACCESS_ADDRESS);
    }
}
