use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// `m x n` matrix over `{-1, +1}`; column `i` is the code of sample `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeMatrix {
    bits: usize,
    samples: usize,
    // row-major, one row per bit position
    data: Vec<i8>,
}

impl CodeMatrix {
    /// All `+1`.
    pub fn ones(bits: usize, samples: usize) -> Self {
        Self {
            bits,
            samples,
            data: vec![1; bits * samples],
        }
    }

    /// Independent Rademacher entries.
    pub fn random<R: Rng + ?Sized>(bits: usize, samples: usize, rng: &mut R) -> Self {
        let data = (0..bits * samples)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        Self {
            bits,
            samples,
            data,
        }
    }

    pub fn from_rows(rows: &[&[i8]]) -> Result<Self> {
        let bits = rows.len();
        let samples = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(bits * samples);
        for r in rows {
            if r.len() != samples {
                return Err(Error::invalid("ragged code rows"));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(bits, samples, data)
    }

    pub fn from_vec(bits: usize, samples: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != bits * samples {
            return Err(Error::shape(
                "CodeMatrix::from_vec",
                format!("{bits}x{samples}"),
                format!("{} entries", data.len()),
            ));
        }
        if data.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::invalid("code entries must be -1 or +1"));
        }
        Ok(Self {
            bits,
            samples,
            data,
        })
    }

    /// Converts a dense matrix whose entries are exactly `±1`.
    pub fn from_dense(m: &DenseMatrix) -> Result<Self> {
        let data = m
            .as_slice()
            .iter()
            .map(|&v| {
                if v == 1.0 {
                    Ok(1)
                } else if v == -1.0 {
                    Ok(-1)
                } else {
                    Err(Error::invalid(format!("{v} is not a code value")))
                }
            })
            .collect::<Result<Vec<i8>>>()?;
        Ok(Self {
            bits: m.rows(),
            samples: m.cols(),
            data,
        })
    }

    /// `sign(x)` with `sign(0) = +1`.
    pub fn sign_of(m: &DenseMatrix) -> Self {
        Self {
            bits: m.rows(),
            samples: m.cols(),
            data: m
                .as_slice()
                .iter()
                .map(|&v| if v < 0.0 { -1 } else { 1 })
                .collect(),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_vec(
            self.bits,
            self.samples,
            self.data.iter().map(|&b| b as f64).collect(),
        )
        .expect("codes are finite")
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn samples(&self) -> usize {
        self.samples
    }

    #[inline]
    pub fn get(&self, bit: usize, sample: usize) -> i8 {
        self.data[bit * self.samples + sample]
    }

    #[inline]
    pub fn set(&mut self, bit: usize, sample: usize, value: i8) {
        debug_assert!(value == 1 || value == -1);
        self.data[bit * self.samples + sample] = value;
    }

    pub fn flip(&mut self, bit: usize, sample: usize) {
        let v = &mut self.data[bit * self.samples + sample];
        *v = -*v;
    }

    #[inline]
    pub fn row(&self, bit: usize) -> &[i8] {
        &self.data[bit * self.samples..(bit + 1) * self.samples]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, bit: usize) -> &mut [i8] {
        &mut self.data[bit * self.samples..(bit + 1) * self.samples]
    }

    pub fn column(&self, sample: usize) -> Vec<i8> {
        (0..self.bits).map(|k| self.get(k, sample)).collect()
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.bits * cols.len());
        for k in 0..self.bits {
            let row = self.row(k);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            bits: self.bits,
            samples: cols.len(),
            data,
        }
    }

    /// Number of entries that differ from `other`.
    pub fn count_differences(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Inner product of two `±1` vectors.
pub fn code_inner(a: &[i8], b: &[i8]) -> i64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as i64) * (y as i64))
        .sum()
}

/// Number of positions where two `±1` vectors differ.
pub fn code_hamming(a: &[i8], b: &[i8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}
