//! `ZBRA` v1: a block-pruned activation map as a one-bit-per-block index plus
//! the dense payload of the surviving blocks.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ZBRA"
//!      4     1  version (1)
//!      5     1  dtype code: 0 = f32, 1 = f16, 2 = u8
//!      6     4  C  (u32 LE)
//!     10     4  H  (u32 LE)
//!     14     4  W  (u32 LE)
//!     18     2  block size (u16 LE, divides H and W)
//!     20     .  bitmask: one bit per block, channel-major then block row then
//!               block column, 1 = present, MSB first, zero-padded to a byte
//!      .     .  payload: each present block in the same order, block² elements
//!               in row-major raster order, little-endian
//! ```

use half::f16;

use crate::blockgrid::{make_layout, BlockGridLayout, BlockMask};
use crate::error::{Error, Result};
use crate::map::ActivationMap;

pub const MAGIC: &[u8; 4] = b"ZBRA";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            2 => Ok(Dtype::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn bits(self) -> usize {
        match self {
            Dtype::F32 => 32,
            Dtype::F16 => 16,
            Dtype::U8 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
            Dtype::U8 => "u8",
        }
    }

    /// Exact-representation check; the codec never rounds.
    fn put(self, out: &mut Vec<u8>, v: f32, index: usize) -> Result<()> {
        match self {
            Dtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F16 => {
                let h = f16::from_f32(v);
                if h.to_f32().to_bits() != v.to_bits() {
                    return Err(Error::Unrepresentable { index, value: v, dtype: self.name() });
                }
                out.extend_from_slice(&h.to_le_bytes());
            }
            Dtype::U8 => {
                let b = v as u8;
                if (b as f32).to_bits() != v.to_bits() {
                    return Err(Error::Unrepresentable { index, value: v, dtype: self.name() });
                }
                out.push(b);
            }
        }
        Ok(())
    }

    fn get(self, bytes: &[u8]) -> f32 {
        match self {
            Dtype::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
            Dtype::F16 => f16::from_le_bytes([bytes[0], bytes[1]]).to_f32(),
            Dtype::U8 => bytes[0] as f32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodedMapHeader {
    pub dtype: Dtype,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub block_size: u16,
}

impl EncodedMapHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(MAGIC);
        out[4] = VERSION;
        out[5] = self.dtype.code();
        out[6..10].copy_from_slice(&self.channels.to_le_bytes());
        out[10..14].copy_from_slice(&self.height.to_le_bytes());
        out[14..18].copy_from_slice(&self.width.to_le_bytes());
        out[18..20].copy_from_slice(&self.block_size.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated { needed: HEADER_LEN, available: bytes.len() });
        }
        if bytes[4] != VERSION {
            return Err(Error::Version(bytes[4]));
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let header = Self {
            dtype: Dtype::from_code(bytes[5])?,
            channels: u32_at(6),
            height: u32_at(10),
            width: u32_at(14),
            block_size: u16::from_le_bytes([bytes[18], bytes[19]]),
        };
        let (c, h, w, b) = (header.channels, header.height, header.width, header.block_size as u32);
        if c == 0 || h == 0 || w == 0 || b == 0 {
            return Err(Error::Format(format!("degenerate geometry {c}x{h}x{w}, block {b}")));
        }
        if h % b != 0 || w % b != 0 {
            return Err(Error::Format(format!("block {b} does not divide {h}x{w}")));
        }
        Ok(header)
    }

    pub fn block_count(&self) -> usize {
        let b = self.block_size as usize;
        self.channels as usize * (self.height as usize / b) * (self.width as usize / b)
    }
}

/// `20 + ceil(n_blocks / 8) + kept_blocks · block² · dtype_bits / 8` with
/// `n_blocks = C·H·W / block²`.
pub fn encoded_size(
    channels: usize,
    height: usize,
    width: usize,
    block_size: usize,
    dtype_bits: usize,
    kept_blocks: usize,
) -> usize {
    let n_blocks = channels * height * width / (block_size * block_size);
    HEADER_LEN + n_blocks.div_ceil(8) + kept_blocks * block_size * block_size * dtype_bits / 8
}

/// Serializes `map` under `mask`. Elements of zeroed blocks are not written.
pub fn encode(map: &ActivationMap, mask: &BlockMask, block_size: usize, dtype: Dtype) -> Result<Vec<u8>> {
    let layout = make_layout(map.height(), map.width(), block_size)?;
    if mask.channels != map.channels() || mask.blocks_h != layout.blocks_h || mask.blocks_w != layout.blocks_w {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}x{}", map.channels(), layout.blocks_h, layout.blocks_w),
            actual: format!("{}x{}x{}", mask.channels, mask.blocks_h, mask.blocks_w),
        });
    }
    let s = layout.effective_block_size;
    let header = EncodedMapHeader {
        dtype,
        channels: dim_u32(map.channels())?,
        height: dim_u32(map.height())?,
        width: dim_u32(map.width())?,
        block_size: u16::try_from(s).map_err(|_| Error::InvalidDimension(format!("block size {s} exceeds u16")))?,
    };
    let kept = mask.kept_count();
    let mut out = Vec::with_capacity(encoded_size(map.channels(), map.height(), map.width(), s, dtype.bits(), kept));
    out.extend_from_slice(&header.to_bytes());

    let mut bits = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.keep.iter().enumerate().filter(|(_, k)| **k) {
        bits[i / 8] |= 0x80 >> (i % 8);
    }
    out.extend_from_slice(&bits);

    for_each_block(map.channels(), &layout, |block, c, y0, x0| {
        if !mask.keep[block] {
            return Ok(());
        }
        for y in y0..y0 + s {
            let row = (c * layout.height + y) * layout.width;
            for idx in row + x0..row + x0 + s {
                dtype.put(&mut out, map.data()[idx], idx)?;
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Inverse of [`encode`]: zeroed blocks come back as exact zeros.
pub fn decode(bytes: &[u8]) -> Result<(ActivationMap, BlockMask)> {
    let header = EncodedMapHeader::parse(bytes)?;
    let (c, h, w) = (header.channels as usize, header.height as usize, header.width as usize);
    let layout = make_layout(h, w, header.block_size as usize)?;
    let n_blocks = header.block_count();
    let mask_len = n_blocks.div_ceil(8);
    let mask_end = HEADER_LEN + mask_len;
    if bytes.len() < mask_end {
        return Err(Error::Truncated { needed: mask_end, available: bytes.len() });
    }
    let bits = &bytes[HEADER_LEN..mask_end];
    let keep: Vec<bool> = (0..n_blocks).map(|i| bits[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    if n_blocks % 8 != 0 && bits[mask_len - 1] & (0xffu8 >> (n_blocks % 8)) != 0 {
        return Err(Error::Format("non-zero bitmask padding".into()));
    }
    let kept = keep.iter().filter(|k| **k).count();
    let elem = header.dtype.bits() / 8;
    let s = layout.effective_block_size;
    let total = mask_end + kept * s * s * elem;
    if bytes.len() < total {
        return Err(Error::Truncated { needed: total, available: bytes.len() });
    }
    if bytes.len() > total {
        return Err(Error::TrailingBytes(bytes.len() - total));
    }

    let mut data = vec![0.0f32; c * h * w];
    let mut cursor = mask_end;
    for_each_block(c, &layout, |block, ch, y0, x0| {
        if keep[block] {
            for y in y0..y0 + s {
                let row = (ch * h + y) * w;
                for v in &mut data[row + x0..row + x0 + s] {
                    *v = header.dtype.get(&bytes[cursor..cursor + elem]);
                    cursor += elem;
                }
            }
        }
        Ok(())
    })?;
    let map = ActivationMap::new(data, c, h, w, "decoded")
        .map_err(|e| Error::Format(format!("decoded payload invalid: {e}")))?;
    let mask = BlockMask::new(c, layout.blocks_h, layout.blocks_w, keep)?;
    Ok((map, mask))
}

/// Reads the flat raw-map format: `C, H, W` as u32 LE, then `C·H·W` f32 LE
/// values in row-major `[C, H, W]` order.
pub fn read_raw_map(bytes: &[u8], layer_id: &str) -> Result<ActivationMap> {
    if bytes.len() < 12 {
        return Err(Error::Truncated { needed: 12, available: bytes.len() });
    }
    let dim = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (c, h, w) = (dim(0), dim(4), dim(8));
    let needed = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(12))
        .ok_or_else(|| Error::Format(format!("raw map dims {c}x{h}x{w} overflow")))?;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(Error::TrailingBytes(bytes.len() - needed));
    }
    let data = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    ActivationMap::new(data, c, h, w, layer_id)
}

pub fn write_raw_map(map: &ActivationMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + map.data().len() * 4);
    for d in [map.channels(), map.height(), map.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidDimension(format!("dimension {v} exceeds u32")))
}

/// Visits blocks in bitmask order: `(block index, channel, top row, left column)`.
fn for_each_block(
    channels: usize,
    layout: &BlockGridLayout,
    mut f: impl FnMut(usize, usize, usize, usize) -> Result<()>,
) -> Result<()> {
    let s = layout.effective_block_size;
    let mut block = 0;
    for c in 0..channels {
        for i in 0..layout.blocks_h {
            for j in 0..layout.blocks_w {
                f(block, c, i * s, j * s)?;
                block += 1;
            }
        }
    }
    Ok(())
}
