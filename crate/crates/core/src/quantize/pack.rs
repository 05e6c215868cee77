use crate::error::{Error, Result};

/// Two 4-bit codes per byte, low nibble first. An odd tail leaves the last
/// high nibble zero.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|c| {
            debug_assert!(c.iter().all(|&v| v < 16));
            let lo = c[0] & 0x0f;
            let hi = c.get(1).map_or(0, |v| v & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_nibbles(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if bytes.len() != count.div_ceil(2) {
        return Err(Error::format(format!(
            "{} packed bytes cannot hold exactly {count} nibbles",
            bytes.len()
        )));
    }
    if count % 2 == 1 && bytes[bytes.len() - 1] >> 4 != 0 {
        return Err(Error::format("nonzero padding nibble"));
    }
    let mut out = Vec::with_capacity(count);
    for &b in bytes {
        out.push(b & 0x0f);
        out.push(b >> 4);
    }
    out.truncate(count);
    Ok(out)
}

#[inline]
pub(crate) fn nibble_at(bytes: &[u8], i: usize) -> u8 {
    let b = bytes[i / 2];
    if i.is_multiple_of(2) {
        b & 0x0f
    } else {
        b >> 4
    }
}
