//! Challenge masks, the four composition schemes, and the feature maps the
//! attacks apply to them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// An `l`×`l` on/off block mask, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Challenge {
    grid_side: usize,
    bits: Vec<bool>,
}

impl Challenge {
    pub fn new(grid_side: usize, bits: Vec<bool>) -> Result<Self> {
        if grid_side == 0 {
            return Err(Error::Invalid("challenge grid side must be positive".into()));
        }
        if bits.len() != grid_side * grid_side {
            return Err(Error::dim("challenge bits", grid_side * grid_side, bits.len()));
        }
        Ok(Challenge { grid_side, bits })
    }

    /// Builds a challenge from a bit vector whose length must be a perfect
    /// square.
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        let side = (bits.len() as f64).sqrt().round() as usize;
        if side * side != bits.len() {
            return Err(Error::Invalid(format!(
                "challenge length {} is not a perfect square",
                bits.len()
            )));
        }
        Challenge::new(side, bits)
    }

    pub fn zeros(grid_side: usize) -> Self {
        Challenge {
            grid_side,
            bits: vec![false; grid_side * grid_side],
        }
    }

    /// The challenge with only block `index` active.
    pub fn unit(grid_side: usize, index: usize) -> Result<Self> {
        let mut c = Challenge::zeros(grid_side);
        if index >= c.bits.len() {
            return Err(Error::Invalid(format!("block {index} out of range")));
        }
        c.bits[index] = true;
        Ok(c)
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.grid_side + col]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn flipped(&self, index: usize) -> Challenge {
        let mut c = self.clone();
        c.bits[index] = !c.bits[index];
        c
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.bits.chunks(self.grid_side) {
            for b in row {
                f.write_str(if *b { "1" } else { "0" })?;
            }
            f.write_str("\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeType {
    /// Unrestricted fair bits.
    A,
    /// Checkerboard: only cells with even `row + col` may be active.
    B,
    /// At most `floor(n/2)` active blocks.
    C,
    /// At most `floor(2n/3)` active blocks.
    D,
}

impl SchemeType {
    pub const ALL: [SchemeType; 4] = [SchemeType::A, SchemeType::B, SchemeType::C, SchemeType::D];

    /// Upper bound on the popcount for `n` blocks, if the scheme has one.
    pub fn cap(self, n: usize) -> Option<usize> {
        match self {
            SchemeType::C => Some(n / 2),
            SchemeType::D => Some(2 * n / 3),
            _ => None,
        }
    }

    /// Whether block `(row, col)` may ever be active under this scheme.
    pub fn eligible(self, row: usize, col: usize) -> bool {
        self != SchemeType::B || (row + col).is_multiple_of(2)
    }
}

impl fmt::Display for SchemeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SchemeType::A => "A",
            SchemeType::B => "B",
            SchemeType::C => "C",
            SchemeType::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for SchemeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(SchemeType::A),
            "B" => Ok(SchemeType::B),
            "C" => Ok(SchemeType::C),
            "D" => Ok(SchemeType::D),
            other => Err(Error::Invalid(format!("unknown challenge scheme '{other}'"))),
        }
    }
}

/// Draws `count` challenges for an `l`×`l` grid. Challenge `i` comes from its
/// own RNG stream, so the result does not depend on generation order.
pub fn generate(l: usize, scheme: SchemeType, count: usize, seed: u64) -> Result<Vec<Challenge>> {
    if l < 3 || l.is_multiple_of(2) {
        return Err(Error::Config(format!("grid side must be odd and >= 3, got {l}")));
    }
    if count == 0 {
        return Err(Error::Config("challenge count must be >= 1".into()));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = rng::stream(seed, tag::CHALLENGE, i as u64);
            draw(l, scheme, &mut rng)
        })
        .collect())
}

fn draw<R: Rng>(l: usize, scheme: SchemeType, rng: &mut R) -> Challenge {
    let n = l * l;
    let mut bits = Vec::with_capacity(n);
    for r in 0..l {
        for c in 0..l {
            let fair: bool = rng.random();
            bits.push(fair && scheme.eligible(r, c));
        }
    }
    if let Some(cap) = scheme.cap(n) {
        let active: Vec<usize> = (0..n).filter(|&i| bits[i]).collect();
        if active.len() > cap {
            for k in index::sample(rng, active.len(), active.len() - cap) {
                bits[active[k]] = false;
            }
        }
    }
    Challenge { grid_side: l, bits }
}

/// Counts how many challenges have each number of active blocks.
pub fn popcount_histogram(challenges: &[Challenge]) -> Result<BTreeMap<usize, usize>> {
    let first = challenges
        .first()
        .ok_or_else(|| Error::Invalid("histogram of an empty challenge list".into()))?;
    let mut hist = BTreeMap::new();
    for c in challenges {
        if c.len() != first.len() {
            return Err(Error::dim("challenge length", first.len(), c.len()));
        }
        *hist.entry(c.popcount()).or_insert(0) += 1;
    }
    Ok(hist)
}

/// Replaces every block by a `factor`×`factor` group of identical blocks. The
/// physical mask is unchanged; only its description gets finer.
pub fn split_blocks(ch: &Challenge, factor: usize) -> Result<Challenge> {
    if factor == 0 {
        return Err(Error::Config("split factor must be >= 1".into()));
    }
    let fine = ch.grid_side * factor;
    let mut bits = Vec::with_capacity(fine * fine);
    for r in 0..fine {
        for c in 0..fine {
            bits.push(ch.get(r / factor, c / factor));
        }
    }
    Ok(Challenge {
        grid_side: fine,
        bits,
    })
}

/// Number of unordered pair products for `n` bits.
pub fn quadratic_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// All products `b_j b_k` with `j <= k`, `j` outer and `k` inner. For binary
/// input the diagonal terms equal the bits themselves.
pub fn quadratic_expand(bits: &[bool]) -> Vec<f64> {
    let n = bits.len();
    let mut out = Vec::with_capacity(quadratic_len(n));
    for j in 0..n {
        for k in j..n {
            out.push(if bits[j] && bits[k] { 1.0 } else { 0.0 });
        }
    }
    out
}
