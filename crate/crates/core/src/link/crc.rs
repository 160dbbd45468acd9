//! 24-bit link-layer CRC.
//!
//! Generator polynomial x^24 + x^10 + x^9 + x^6 + x^4 + x^3 + x + 1. Bits are
//! fed into the shift register least-significant bit of each byte first, the
//! order in which they go on air. The register is preset with a configurable
//! 24-bit value (all ones unless a scenario says otherwise).

/// Low 24 bits of the generator (the x^24 term is implicit).
pub const POLYNOMIAL: u32 = 0x00_065B;
pub const DEFAULT_INIT: u32 = 0xFF_FFFF;
const MASK: u32 = 0xFF_FFFF;

const TABLE: [u32; 256] = build_table();

const fn build_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut reg = (i as u32) << 16;
        let mut bit = 0;
        while bit < 8 {
            reg <<= 1;
            if reg & 0x100_0000 != 0 {
                reg ^= POLYNOMIAL;
            }
            bit += 1;
        }
        table[i] = reg & MASK;
        i += 1;
    }
    table
}

/// Table-driven CRC over `bytes` with register preset `init`.
pub fn crc24_with_init(init: u32, bytes: &[u8]) -> u32 {
    bytes.iter().fold(init & MASK, |crc, b| {
        // on-air order is LSB first, so the MSB-first table sees the reversed byte
        let idx = ((crc >> 16) as u8 ^ b.reverse_bits()) as usize;
        ((crc << 8) ^ TABLE[idx]) & MASK
    })
}

/// CRC over the PDU header followed by the payload.
pub fn crc24(header: &[u8], payload: &[u8], init: u32) -> u32 {
    let crc = crc24_with_init(init, header);
    crc24_with_init(crc, payload)
}

pub fn to_bytes(crc: u32) -> [u8; 3] {
    [(crc >> 16) as u8, (crc >> 8) as u8, crc as u8]
}

pub fn from_bytes(bytes: [u8; 3]) -> u32 {
    (u32::from(bytes[0]) << 16) | (u32::from(bytes[1]) << 8) | u32::from(bytes[2])
}
