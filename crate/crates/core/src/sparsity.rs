//! Tile-CSR weight compression ("store as compressed, load as dense").
//!
//! A matrix is cut into row-major tiles (32×8 by default). Each nonzero is a
//! 24-bit word: bits 0..16 hold the opaque 16-bit value, bits 16..21 the row
//! inside the tile and bits 21..24 the column. Tile `i` owns data words
//! `index[i]..index[i + 1]`; the index has one trailing sentinel entry.
//!
//! Binary layout (all integers little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `TCSR` |
//! | 4 | 2 | version (1) |
//! | 6 | 1 | tile rows |
//! | 7 | 1 | tile cols |
//! | 8 | 4 | rows |
//! | 12 | 4 | cols |
//! | 16 | 4 | nnz |
//! | 20 | 4 | tile count `T` |
//! | 24 | 4·(T+1) | index (u32 start addresses plus sentinel) |
//! | .. | .. | data words |
//!
//! Data words are packed four at a time into 12 bytes, word `k` of a group
//! occupying bits `24k..24k+24` of a 96-bit little-endian integer. A final
//! partial group of `j` words uses `3j` bytes, zero-padded to a multiple of 4.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TCSR";
const VERSION: u16 = 1;
const HEADER_BYTES: usize = 24;

/// Bits per stored nonzero.
pub const WORD_BITS: f64 = 24.0;
/// Bits per dense element.
pub const DENSE_BITS: f64 = 16.0;
pub const WORD_BYTES: u64 = 3;
pub const INDEX_ENTRY_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileShape {
    pub rows: usize,
    pub cols: usize,
}

impl Default for TileShape {
    fn default() -> Self {
        TileShape { rows: 32, cols: 8 }
    }
}

impl TileShape {
    pub fn elements(&self) -> usize {
        self.rows * self.cols
    }

    /// Index overhead spread over the elements of one tile.
    pub fn index_bits_per_element(&self) -> f64 {
        (INDEX_ENTRY_BYTES * 8) as f64 / self.elements() as f64
    }

    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows > 32 || self.cols > 8 {
            return Err(Error::Format(format!(
                "tile shape {}x{} must fit the 5-bit row and 3-bit column fields",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Row-major matrix of opaque 16-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u16>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Format(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparseWord {
    pub value: u16,
    pub row: u8,
    pub col: u8,
}

impl SparseWord {
    pub fn pack(self) -> u32 {
        self.value as u32 | (self.row as u32 & 0x1f) << 16 | (self.col as u32 & 0x7) << 21
    }

    pub fn unpack(word: u32) -> Self {
        SparseWord {
            value: word as u16,
            row: (word >> 16 & 0x1f) as u8,
            col: (word >> 21 & 0x7) as u8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseTileMatrix {
    pub rows: usize,
    pub cols: usize,
    pub tile: TileShape,
    /// Start address of every tile plus a trailing sentinel equal to nnz.
    pub index: Vec<u32>,
    /// Packed 24-bit words, one per `u32`.
    pub data: Vec<u32>,
}

impl SparseTileMatrix {
    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn tile_grid(&self) -> (usize, usize) {
        (self.rows.div_ceil(self.tile.rows), self.cols.div_ceil(self.tile.cols))
    }

    pub fn n_tiles(&self) -> usize {
        let (r, c) = self.tile_grid();
        r * c
    }

    pub fn tile_range(&self, tile_id: usize) -> Result<std::ops::Range<usize>> {
        if tile_id >= self.n_tiles() {
            return Err(Error::TileOutOfRange {
                tile: tile_id,
                n_tiles: self.n_tiles(),
            });
        }
        Ok(self.index[tile_id] as usize..self.index[tile_id + 1] as usize)
    }

    pub fn words(&self, tile_id: usize) -> Result<impl Iterator<Item = SparseWord> + '_> {
        let range = self.tile_range(tile_id)?;
        Ok(self.data[range].iter().map(|&w| SparseWord::unpack(w)))
    }
}

/// Compresses `dense`, zero-padding partial edge tiles. Padding is never
/// stored as data.
pub fn encode(dense: &DenseMatrix, tile: TileShape) -> Result<SparseTileMatrix> {
    tile.validate()?;
    let (tr, tc) = (dense.rows.div_ceil(tile.rows), dense.cols.div_ceil(tile.cols));
    let mut index = Vec::with_capacity(tr * tc + 1);
    let mut data = Vec::new();
    for ti in 0..tr {
        for tj in 0..tc {
            index.push(data.len() as u32);
            for r in 0..tile.rows {
                let row = ti * tile.rows + r;
                if row >= dense.rows {
                    break;
                }
                for c in 0..tile.cols {
                    let col = tj * tile.cols + c;
                    if col >= dense.cols {
                        break;
                    }
                    let value = dense.get(row, col);
                    if value != 0 {
                        data.push(
                            SparseWord {
                                value,
                                row: r as u8,
                                col: c as u8,
                            }
                            .pack(),
                        );
                    }
                }
            }
        }
    }
    index.push(data.len() as u32);
    Ok(SparseTileMatrix {
        rows: dense.rows,
        cols: dense.cols,
        tile,
        index,
        data,
    })
}

/// Dense `tile.rows × tile.cols` contents of one tile, row-major.
pub fn decode_tile(m: &SparseTileMatrix, tile_id: usize) -> Result<Vec<u16>> {
    let mut out = vec![0u16; m.tile.elements()];
    for w in m.words(tile_id)? {
        out[w.row as usize * m.tile.cols + w.col as usize] = w.value;
    }
    Ok(out)
}

pub fn decode(m: &SparseTileMatrix) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(m.rows, m.cols);
    let (_, tc) = m.tile_grid();
    for tile_id in 0..m.n_tiles() {
        let (ti, tj) = (tile_id / tc, tile_id % tc);
        for w in m.words(tile_id)? {
            let row = ti * m.tile.rows + w.row as usize;
            let col = tj * m.tile.cols + w.col as usize;
            if row >= m.rows || col >= m.cols {
                return Err(Error::Format(format!("word addresses padding at ({row}, {col})")));
            }
            out.data[row * m.cols + col] = w.value;
        }
    }
    Ok(out)
}

/// Bytes of data plus index memory (sentinel excluded).
pub fn compressed_footprint(m: &SparseTileMatrix) -> u64 {
    m.nnz() as u64 * WORD_BYTES + m.n_tiles() as u64 * INDEX_ENTRY_BYTES
}

/// Compressed bytes over dense 16-bit bytes.
pub fn footprint_ratio(m: &SparseTileMatrix) -> f64 {
    compressed_footprint(m) as f64 / (m.rows * m.cols * 2) as f64
}

/// Expected compressed/dense ratio for a given nonzero density.
pub fn footprint_ratio_at_density(density: f64, tile: TileShape) -> f64 {
    (WORD_BITS * density + tile.index_bits_per_element()) / DENSE_BITS
}

/// Density at which the compressed form is exactly as large as dense.
pub fn break_even_density(tile: TileShape) -> f64 {
    (DENSE_BITS - tile.index_bits_per_element()) / WORD_BITS
}

/// Dense-equivalent read bandwidth multiplier, limited by the decoder's
/// dense output rate `cap`.
pub fn effective_bandwidth_factor(density: f64, cap: f64, tile: TileShape) -> f64 {
    (1.0 / footprint_ratio_at_density(density, tile)).min(cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseCapacity {
    /// Parameter-count multiplier relative to dense storage.
    pub multiplier: f64,
    /// Largest parameter count that fits in the given SRAM.
    pub max_params: f64,
}

pub fn sparse_model_capacity(
    system_sram_bytes: f64,
    bytes_per_param: f64,
    sparsity: f64,
    tile: TileShape,
) -> Result<SparseCapacity> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let multiplier = 1.0 / footprint_ratio_at_density(1.0 - sparsity, tile);
    Ok(SparseCapacity {
        multiplier,
        max_params: system_sram_bytes / bytes_per_param * multiplier,
    })
}

pub fn to_bytes(m: &SparseTileMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * m.index.len() + 3 * m.nnz() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(m.tile.rows as u8);
    out.push(m.tile.cols as u8);
    for v in [m.rows, m.cols, m.nnz(), m.n_tiles()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &i in &m.index {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for group in m.data.chunks(4) {
        let mut bits: u128 = 0;
        for (k, &w) in group.iter().enumerate() {
            bits |= ((w & 0x00ff_ffff) as u128) << (24 * k);
        }
        let len = 3 * group.len();
        out.extend_from_slice(&bits.to_le_bytes()[..len]);
        out.resize(out.len() + (4 - len % 4) % 4, 0);
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<SparseTileMatrix> {
    let bad = |msg: &str| Error::Format(msg.to_string());
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(bad("missing TCSR header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tile = TileShape {
        rows: bytes[6] as usize,
        cols: bytes[7] as usize,
    };
    tile.validate()?;
    let (rows, cols, nnz, n_tiles) = (
        u32_at(8) as usize,
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
    );
    if rows.div_ceil(tile.rows) * cols.div_ceil(tile.cols) != n_tiles {
        return Err(bad("tile count does not match dimensions"));
    }
    let index_end = HEADER_BYTES + 4 * (n_tiles + 1);
    let full_groups = nnz / 4;
    let tail = nnz % 4;
    let data_len = 12 * full_groups + (3 * tail).div_ceil(4) * 4;
    if bytes.len() != index_end + data_len {
        return Err(bad("stream length does not match header"));
    }
    let index: Vec<u32> = (0..=n_tiles).map(|i| u32_at(HEADER_BYTES + 4 * i)).collect();
    if index[0] != 0 || index[n_tiles] as usize != nnz || index.windows(2).any(|w| w[0] > w[1]) {
        return Err(bad("index must be sorted from 0 to nnz"));
    }
    let mut data = Vec::with_capacity(nnz);
    let mut off = index_end;
    while data.len() < nnz {
        let k = (nnz - data.len()).min(4);
        let mut buf = [0u8; 16];
        buf[..3 * k].copy_from_slice(&bytes[off..off + 3 * k]);
        let bits = u128::from_le_bytes(buf);
        data.extend((0..k).map(|j| (bits >> (24 * j)) as u32 & 0x00ff_ffff));
        off += if k == 4 { 12 } else { (3 * k).div_ceil(4) * 4 };
    }
    let m = SparseTileMatrix {
        rows,
        cols,
        tile,
        index,
        data,
    };
    for tile_id in 0..n_tiles {
        for w in m.words(tile_id)? {
            if w.row as usize >= tile.rows || w.col as usize >= tile.cols {
                return Err(bad("word coordinates outside the tile"));
            }
        }
    }
    Ok(m)
}
