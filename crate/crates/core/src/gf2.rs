//! GF(2) reference encoders: classic linear block, scrambling, and
//! coset/randomized coding.
//!
//! These are the classical baselines the learned encoders are measured
//! against, and the exact-arithmetic oracles the tests enumerate.

use rand::Rng;

use crate::{Error, Result};

/// Dense binary matrix, row-major, entries 0/1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gf2Matrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl Gf2Matrix {
    pub fn new(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix needs {} entries for {}x{}, got {}",
                rows * cols,
                rows,
                cols,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Config("matrix entries must be 0 or 1".into()));
        }
        Ok(Gf2Matrix { rows, cols, bits })
    }

    pub fn identity(n: usize) -> Self {
        let mut bits = vec![0u8; n * n];
        for i in 0..n {
            bits[i * n + i] = 1;
        }
        Gf2Matrix { rows: n, cols: n, bits }
    }

    /// Parse rows written as strings of `0`/`1`, e.g. `["101", "011"]`.
    pub fn from_row_strings(rows: &[impl AsRef<str>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if cols == 0 {
            return Err(Error::Config("matrix needs at least one nonempty row".into()));
        }
        let mut bits = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Config("matrix rows have unequal lengths".into()));
            }
            for ch in row.chars() {
                match ch {
                    '0' => bits.push(0),
                    '1' => bits.push(1),
                    other => {
                        return Err(Error::Config(format!(
                            "matrix rows must contain only 0/1, found {other:?}"
                        )))
                    }
                }
            }
        }
        Gf2Matrix::new(rows.len(), cols, bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    /// Rank over GF(2) by Gaussian elimination.
    pub fn rank(&self) -> usize {
        let mut work: Vec<Vec<u8>> = (0..self.rows).map(|r| self.row(r).to_vec()).collect();
        let mut rank = 0;
        for col in 0..self.cols {
            let Some(pivot) = (rank..self.rows).find(|&r| work[r][col] == 1) else {
                continue;
            };
            work.swap(rank, pivot);
            for r in 0..self.rows {
                if r != rank && work[r][col] == 1 {
                    let (a, b) = if r < rank {
                        let (lo, hi) = work.split_at_mut(rank);
                        (&mut lo[r], &hi[0])
                    } else {
                        let (lo, hi) = work.split_at_mut(r);
                        (&mut hi[0], &lo[rank])
                    };
                    for (av, bv) in a.iter_mut().zip(b) {
                        *av ^= bv;
                    }
                }
            }
            rank += 1;
            if rank == self.rows {
                break;
            }
        }
        rank
    }

    pub fn has_full_row_rank(&self) -> bool {
        self.rank() == self.rows
    }

    /// Inverse of a square nonsingular matrix over GF(2).
    pub fn inverse(&self) -> Result<Gf2Matrix> {
        if self.rows != self.cols {
            return Err(Error::Config("only square matrices can be inverted".into()));
        }
        let n = self.rows;
        // Augmented [A | I] elimination.
        let mut work: Vec<Vec<u8>> = (0..n)
            .map(|r| {
                let mut row = self.row(r).to_vec();
                row.extend((0..n).map(|c| u8::from(c == r)));
                row
            })
            .collect();
        for col in 0..n {
            let Some(pivot) = (col..n).find(|&r| work[r][col] == 1) else {
                return Err(Error::Config("matrix is singular over GF(2)".into()));
            };
            work.swap(col, pivot);
            for r in 0..n {
                if r != col && work[r][col] == 1 {
                    let (a, b) = if r < col {
                        let (lo, hi) = work.split_at_mut(col);
                        (&mut lo[r], &hi[0])
                    } else {
                        let (lo, hi) = work.split_at_mut(r);
                        (&mut hi[0], &lo[col])
                    };
                    for (av, bv) in a.iter_mut().zip(b) {
                        *av ^= bv;
                    }
                }
            }
        }
        let bits: Vec<u8> = work.iter().flat_map(|row| row[n..].iter().copied()).collect();
        Gf2Matrix::new(n, n, bits)
    }

    /// True when the left k x k block is the identity.
    pub fn is_systematic(&self) -> bool {
        self.rows <= self.cols
            && (0..self.rows).all(|r| (0..self.rows).all(|c| self.at(r, c) == u8::from(r == c)))
    }

    /// Vertical stack `[self; other]`.
    pub fn stack(&self, other: &Gf2Matrix) -> Result<Gf2Matrix> {
        if self.cols != other.cols {
            return Err(Error::Config("stacked matrices need equal widths".into()));
        }
        let mut bits = self.bits.clone();
        bits.extend_from_slice(&other.bits);
        Gf2Matrix::new(self.rows + other.rows, self.cols, bits)
    }

    /// Random matrix, resampled until it has full row rank.
    pub fn random_full_rank(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Gf2Matrix> {
        if rows > cols {
            return Err(Error::Config(format!(
                "cannot build a full-row-rank {rows}x{cols} matrix"
            )));
        }
        loop {
            let bits: Vec<u8> = (0..rows * cols).map(|_| rng.random_range(0..2u8)).collect();
            let m = Gf2Matrix::new(rows, cols, bits)?;
            if m.has_full_row_rank() {
                return Ok(m);
            }
        }
    }
}

/// `c = u . G` over GF(2).
pub fn gf2_encode(g: &Gf2Matrix, u: &[u8]) -> Result<Vec<u8>> {
    if u.len() != g.rows() {
        return Err(Error::Config(format!(
            "message length {} does not match generator rows {}",
            u.len(),
            g.rows()
        )));
    }
    let mut c = vec![0u8; g.cols()];
    for (r, &bit) in u.iter().enumerate() {
        if bit == 1 {
            for (cv, gv) in c.iter_mut().zip(g.row(r)) {
                *cv ^= gv;
            }
        }
    }
    Ok(c)
}

/// Scrambled encoding `c = u . S . G` with `G = [I | C]` systematic.
///
/// The first k output bits equal `u S`, so descrambling the systematic part
/// by `S^-1` recovers `u`.
pub fn scramble_encode(s: &Gf2Matrix, g: &Gf2Matrix, u: &[u8]) -> Result<Vec<u8>> {
    if s.rows() != s.cols() || s.rows() != g.rows() {
        return Err(Error::Config("scrambler must be k x k matching G".into()));
    }
    if !s.has_full_row_rank() {
        return Err(Error::Config("scrambling matrix is singular".into()));
    }
    if !g.is_systematic() {
        return Err(Error::Config("scramble_encode needs G in systematic form".into()));
    }
    let scrambled = gf2_encode(s, u)?;
    gf2_encode(g, &scrambled)
}

/// Coset encoding `c = [m r] . [H; G]`: the message picks the coset, the
/// random bits pick the member.
pub fn coset_encode(
    h: &Gf2Matrix,
    g: &Gf2Matrix,
    m: &[u8],
    r_bits: &[u8],
) -> Result<Vec<u8>> {
    let stacked = h.stack(g)?;
    if !stacked.has_full_row_rank() {
        return Err(Error::Config(
            "rows of [H; G] must be linearly independent".into(),
        ));
    }
    if m.len() != h.rows() || r_bits.len() != g.rows() {
        return Err(Error::Config("coset encoder input widths disagree".into()));
    }
    let mh = gf2_encode(h, m)?;
    let rg = gf2_encode(g, r_bits)?;
    Ok(mh.iter().zip(&rg).map(|(a, b)| a ^ b).collect())
}

/// All bit vectors of the given length, lexicographic, MSB first.
pub fn all_bit_vectors(len: usize) -> impl Iterator<Item = Vec<u8>> {
    assert!(len < usize::BITS as usize, "enumeration too large");
    (0..(1usize << len)).map(move |i| {
        (0..len)
            .map(|b| ((i >> (len - 1 - b)) & 1) as u8)
            .collect()
    })
}

/// BPSK map fixed project-wide: bit 0 -> +1, bit 1 -> -1.
pub fn bpsk(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| if b == 0 { 1.0 } else { -1.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngHub, Stream};
    use std::collections::HashSet;

    #[test]
    fn encode_matches_hand_xor() {
        let g = Gf2Matrix::from_row_strings(&["101", "011"]).unwrap();
        assert_eq!(gf2_encode(&g, &[1, 1]).unwrap(), vec![1, 1, 0]);
        assert_eq!(gf2_encode(&g, &[0, 0]).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn random_generators_are_injective_iff_full_rank() {
        let hub = RngHub::new(13);
        let mut rng = hub.stream(Stream::Init);
        for _ in 0..20 {
            let k = 4;
            let bits: Vec<u8> = (0..k * 6).map(|_| rng.random_range(0..2u8)).collect();
            let g = Gf2Matrix::new(k, 6, bits).unwrap();
            let codewords: HashSet<Vec<u8>> = all_bit_vectors(k)
                .map(|u| gf2_encode(&g, &u).unwrap())
                .collect();
            let distinct = codewords.len() == 1 << k;
            assert_eq!(distinct, g.has_full_row_rank());
        }
    }

    #[test]
    fn linearity_holds_for_all_message_pairs() {
        let hub = RngHub::new(17);
        let g = Gf2Matrix::random_full_rank(3, 7, &mut hub.stream(Stream::Init)).unwrap();
        for u in all_bit_vectors(3) {
            for v in all_bit_vectors(3) {
                let uv: Vec<u8> = u.iter().zip(&v).map(|(a, b)| a ^ b).collect();
                let cu = gf2_encode(&g, &u).unwrap();
                let cv = gf2_encode(&g, &v).unwrap();
                let cuv = gf2_encode(&g, &uv).unwrap();
                let xor: Vec<u8> = cu.iter().zip(&cv).map(|(a, b)| a ^ b).collect();
                assert_eq!(cuv, xor);
            }
        }
    }

    #[test]
    fn identity_scrambler_reduces_to_plain_encoding() {
        let g = Gf2Matrix::from_row_strings(&["1001", "0101"]).unwrap();
        let s = Gf2Matrix::identity(2);
        for u in all_bit_vectors(2) {
            assert_eq!(
                scramble_encode(&s, &g, &u).unwrap(),
                gf2_encode(&g, &u).unwrap()
            );
        }
    }

    #[test]
    fn scramble_matches_hand_example() {
        // S swaps the two message bits; G = [I | [1;1]].
        let s = Gf2Matrix::from_row_strings(&["01", "10"]).unwrap();
        let g = Gf2Matrix::from_row_strings(&["101", "011"]).unwrap();
        assert_eq!(scramble_encode(&s, &g, &[1, 0]).unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn descrambling_systematic_bits_recovers_every_message() {
        let hub = RngHub::new(23);
        let mut rng = hub.stream(Stream::Init);
        for k in 2..=6usize {
            let s = Gf2Matrix::random_full_rank(k, k, &mut rng).unwrap();
            let parity = Gf2Matrix::random_full_rank(k, k + 2, &mut rng).unwrap();
            // Force systematic: [I | C] with C from the random matrix tail.
            let mut bits = Vec::new();
            for r in 0..k {
                for c in 0..k {
                    bits.push(u8::from(r == c));
                }
                bits.extend_from_slice(&parity.row(r)[k..]);
            }
            let g = Gf2Matrix::new(k, k + 2, bits).unwrap();
            let s_inv = s.inverse().unwrap();
            for u in all_bit_vectors(k) {
                let c = scramble_encode(&s, &g, &u).unwrap();
                let recovered = gf2_encode(&s_inv, &c[..k]).unwrap();
                assert_eq!(recovered, u);
            }
        }
    }

    #[test]
    fn singular_scrambler_is_rejected() {
        let s = Gf2Matrix::from_row_strings(&["11", "11"]).unwrap();
        let g = Gf2Matrix::from_row_strings(&["101", "011"]).unwrap();
        assert!(scramble_encode(&s, &g, &[1, 0]).is_err());
    }

    #[test]
    fn coset_encode_matches_hand_xor_of_rows() {
        let h = Gf2Matrix::from_row_strings(&["110"]).unwrap();
        let g = Gf2Matrix::from_row_strings(&["011"]).unwrap();
        assert_eq!(coset_encode(&h, &g, &[1], &[1]).unwrap(), vec![1, 0, 1]);
        assert_eq!(coset_encode(&h, &g, &[1], &[0]).unwrap(), vec![1, 1, 0]);
    }

    #[test]
    fn cosets_partition_the_codeword_space() {
        let hub = RngHub::new(31);
        let mut rng = hub.stream(Stream::Init);
        for (k, r, n) in [(2usize, 2usize, 6usize), (3, 3, 8), (2, 4, 7)] {
            // Draw until the stacked matrix has full row rank.
            let (h, g) = loop {
                let h = Gf2Matrix::random_full_rank(k, n, &mut rng).unwrap();
                let g = Gf2Matrix::random_full_rank(r, n, &mut rng).unwrap();
                if h.stack(&g).unwrap().has_full_row_rank() {
                    break (h, g);
                }
            };
            let mut all = HashSet::new();
            let mut cosets: Vec<HashSet<Vec<u8>>> = Vec::new();
            for m in all_bit_vectors(k) {
                let coset: HashSet<Vec<u8>> = all_bit_vectors(r)
                    .map(|rb| coset_encode(&h, &g, &m, &rb).unwrap())
                    .collect();
                assert_eq!(coset.len(), 1 << r, "coset size");
                all.extend(coset.iter().cloned());
                cosets.push(coset);
            }
            assert_eq!(all.len(), 1 << (k + r), "coset union size");
            for i in 0..cosets.len() {
                for j in i + 1..cosets.len() {
                    assert!(cosets[i].is_disjoint(&cosets[j]), "cosets overlap");
                }
            }
        }
    }

    #[test]
    fn zero_random_bits_select_the_coset_leader() {
        let h = Gf2Matrix::from_row_strings(&["1100", "0110"]).unwrap();
        let g = Gf2Matrix::from_row_strings(&["0011"]).unwrap();
        for m in all_bit_vectors(2) {
            assert_eq!(
                coset_encode(&h, &g, &m, &[0]).unwrap(),
                gf2_encode(&h, &m).unwrap()
            );
        }
    }

    #[test]
    fn dependent_rows_are_rejected() {
        let h = Gf2Matrix::from_row_strings(&["110"]).unwrap();
        let g = Gf2Matrix::from_row_strings(&["110"]).unwrap();
        assert!(coset_encode(&h, &g, &[1], &[1]).is_err());
    }

    #[test]
    fn row_string_parsing_validates_input() {
        assert!(Gf2Matrix::from_row_strings(&["10", "1"]).is_err());
        assert!(Gf2Matrix::from_row_strings(&["102"]).is_err());
        let empty: &[&str] = &[];
        assert!(Gf2Matrix::from_row_strings(empty).is_err());
        let m = Gf2Matrix::from_row_strings(&["10", "01"]).unwrap();
        assert_eq!(m, Gf2Matrix::identity(2));
    }

    #[test]
    fn bpsk_maps_zero_to_plus_one() {
        assert_eq!(bpsk(&[0, 1, 1, 0]), vec![1.0, -1.0, -1.0, 1.0]);
    }
}
