//! Bit-packed code storage and exhaustive Hamming search.
//!
//! Bit `j` of code `i` lives in word `i * words_per_code + j / 64` at position
//! `j % 64`; `+1` is stored as 1, `-1` as 0, and padding bits are 0.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use crate::codes::CodeMatrix;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, ByteReader};

const CODE_MAGIC: &[u8; 4] = b"DSHC";
const CODE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodeIndex {
    bits: usize,
    words_per_code: usize,
    blob: Vec<u64>,
    ids: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchHit {
    pub id: u64,
    /// Gallery position of the hit.
    pub position: usize,
    pub distance: u32,
}

pub fn words_for_bits(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Packs one `±1` code into words.
pub fn pack_code(code: &[i8]) -> Vec<u64> {
    let mut words = vec![0u64; words_for_bits(code.len())];
    for (j, &b) in code.iter().enumerate() {
        if b > 0 {
            words[j / 64] |= 1u64 << (j % 64);
        }
    }
    words
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

impl PackedCodeIndex {
    /// Packs every column of `codes`; `ids[i]` names column `i`.
    pub fn pack(codes: &CodeMatrix, ids: Vec<u64>) -> Result<Self> {
        let n = codes.samples();
        if ids.len() != n {
            return Err(Error::shape(
                "pack",
                format!("{n} codes"),
                format!("{} ids", ids.len()),
            ));
        }
        let bits = codes.bits();
        let wpc = words_for_bits(bits);
        let mut blob = vec![0u64; n * wpc];
        for k in 0..bits {
            let (word, shift) = (k / 64, k % 64);
            for (i, &b) in codes.row(k).iter().enumerate() {
                if b > 0 {
                    blob[i * wpc + word] |= 1u64 << shift;
                }
            }
        }
        Ok(Self {
            bits,
            words_per_code: wpc,
            blob,
            ids,
        })
    }

    /// Packs with ids `0..n`.
    pub fn pack_sequential(codes: &CodeMatrix) -> Result<Self> {
        Self::pack(codes, (0..codes.samples() as u64).collect())
    }

    pub fn unpack(&self) -> CodeMatrix {
        let n = self.len();
        let mut data = Vec::with_capacity(self.bits * n);
        for k in 0..self.bits {
            let (word, shift) = (k / 64, k % 64);
            for i in 0..n {
                let bit = (self.blob[i * self.words_per_code + word] >> shift) & 1;
                data.push(if bit == 1 { 1 } else { -1 });
            }
        }
        CodeMatrix::from_vec(self.bits, n, data).expect("unpacked codes are ±1")
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn code_words(&self, i: usize) -> &[u64] {
        &self.blob[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    /// Bytes needed to hold `n` codes of `bits` bits densely (`n * ceil(bits / 8)`).
    pub fn code_payload_bytes_for(n: usize, bits: usize) -> usize {
        n * bits.div_ceil(8)
    }

    pub fn code_payload_bytes(&self) -> usize {
        Self::code_payload_bytes_for(self.len(), self.bits)
    }

    /// Bytes actually held in memory: word-aligned codes plus ids.
    pub fn resident_bytes(&self) -> usize {
        self.blob.len() * 8 + self.ids.len() * 8
    }

    fn check_query(&self, query: &[u64]) -> Result<()> {
        if query.len() != self.words_per_code {
            return Err(Error::shape(
                "query",
                format!("{}-bit index ({} words)", self.bits, self.words_per_code),
                format!("{} words", query.len()),
            ));
        }
        Ok(())
    }

    /// Hamming distance between gallery code `i` and a packed query.
    #[inline]
    pub fn hamming(&self, i: usize, query: &[u64]) -> u32 {
        hamming_words(self.code_words(i), query)
    }

    /// The `k` nearest codes, sorted by `(distance, position)`.
    ///
    /// Bounded max-heap over a full scan; `k >= len` returns the whole gallery.
    pub fn search_topk(&self, query: &[u64], k: usize) -> Result<Vec<SearchHit>> {
        self.check_query(query)?;
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let k = k.min(self.len());
        let hit = |pos: usize, distance: u32| SearchHit {
            id: self.ids[pos],
            position: pos,
            distance,
        };
        if k == self.len() {
            let mut all: Vec<(u32, usize)> = (0..self.len())
                .map(|i| (self.hamming(i, query), i))
                .collect();
            all.sort_unstable();
            return Ok(all.into_iter().map(|(d, i)| hit(i, d)).collect());
        }
        let mut heap: BinaryHeap<(u32, usize)> = BinaryHeap::with_capacity(k + 1);
        for (i, code) in self.blob.chunks_exact(self.words_per_code).enumerate() {
            let d = hamming_words(code, query);
            if heap.len() < k {
                heap.push((d, i));
            } else if let Some(&top) = heap.peek() {
                // Later positions lose ties, so only strictly closer codes replace the worst.
                if d < top.0 {
                    heap.pop();
                    heap.push((d, i));
                }
            }
        }
        let mut out = heap.into_vec();
        out.sort_unstable();
        Ok(out.into_iter().map(|(d, i)| hit(i, d)).collect())
    }

    /// All gallery positions within Hamming distance `radius`, in gallery order.
    pub fn search_radius(&self, query: &[u64], radius: u32) -> Result<Vec<SearchHit>> {
        self.check_query(query)?;
        Ok(self
            .blob
            .chunks_exact(self.words_per_code)
            .enumerate()
            .filter_map(|(i, code)| {
                let d = hamming_words(code, query);
                (d <= radius).then_some(SearchHit {
                    id: self.ids[i],
                    position: i,
                    distance: d,
                })
            })
            .collect())
    }

    /// Top-k for every query, sharding queries across `threads` workers.
    pub fn search_topk_batch(
        &self,
        queries: &PackedCodeIndex,
        k: usize,
        threads: usize,
    ) -> Result<Vec<Vec<SearchHit>>> {
        self.check_compatible(queries)?;
        run_sharded(queries.len(), threads, |q| {
            self.search_topk(queries.code_words(q), k)
        })
    }

    pub fn search_radius_batch(
        &self,
        queries: &PackedCodeIndex,
        radius: u32,
        threads: usize,
    ) -> Result<Vec<Vec<SearchHit>>> {
        self.check_compatible(queries)?;
        run_sharded(queries.len(), threads, |q| {
            self.search_radius(queries.code_words(q), radius)
        })
    }

    pub fn check_compatible(&self, queries: &PackedCodeIndex) -> Result<()> {
        if queries.bits != self.bits {
            return Err(Error::shape(
                "query codes",
                format!("{}-bit index", self.bits),
                format!("{}-bit queries", queries.bits),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * (self.blob.len() + self.ids.len()));
        out.extend_from_slice(CODE_MAGIC);
        out.extend_from_slice(&CODE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.bits as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for w in &self.blob {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let mut r = ByteReader::new(path, &bytes);
        r.expect_magic(CODE_MAGIC)?;
        r.expect_version(CODE_VERSION)?;
        let bits = r.u32()? as usize;
        let n =
            usize::try_from(r.u64()?).map_err(|_| r.format_err("code count overflows usize"))?;
        if bits == 0 {
            return Err(r.format_err("zero-bit codes"));
        }
        let wpc = words_for_bits(bits);
        let expected = n
            .checked_mul(wpc + 1)
            .and_then(|w| w.checked_mul(8))
            .and_then(|b| b.checked_add(20));
        if expected != Some(bytes.len()) {
            return Err(r.format_err(format!(
                "header says {n} codes of {bits} bits but file has {} bytes",
                bytes.len()
            )));
        }
        let blob = (0..n * wpc).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let pad = bits % 64;
        if pad != 0 {
            let mask = !0u64 << pad;
            if blob.chunks_exact(wpc).any(|c| c[wpc - 1] & mask != 0) {
                return Err(r.format_err("padding bits beyond the code length are set"));
            }
        }
        Ok(Self {
            bits,
            words_per_code: wpc,
            blob,
            ids,
        })
    }
}

/// Runs `f(0..n)` over `threads` contiguous shards, preserving order.
pub(crate) fn run_sharded<T: Send>(
    n: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = t * chunk..((t + 1) * chunk).min(n);
                s.spawn(move || range.map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("search worker panicked")?);
        }
        Ok(out)
    })
}

impl PartialOrd for SearchHit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SearchHit {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.distance, self.position).cmp(&(other.distance, other.position))
    }
}
