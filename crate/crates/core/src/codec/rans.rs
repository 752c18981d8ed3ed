//! Static-model rANS with a 32-bit state and 16-bit renormalization.
//!
//! Every symbol position carries its own distribution, quantized to 16-bit
//! frequencies with a floor of one so that every alphabet symbol stays
//! decodable. The stream is the final encoder state (4 bytes) followed by
//! the renormalization words in decoding order.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_SCALE: u32 = 1 << PROB_BITS;
const RANS_L: u32 = 1 << 16;

/// Discrete distribution over the integers `lo .. lo + probs.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    pub lo: i32,
    pub probs: Vec<f64>,
}

impl Pmf {
    pub fn new(lo: i32, probs: Vec<f64>) -> Self {
        Pmf { lo, probs }
    }

    pub fn hi(&self) -> i32 {
        self.lo + self.probs.len() as i32 - 1
    }

    /// Probability of `symbol`, zero outside the alphabet.
    pub fn prob(&self, symbol: i32) -> f64 {
        let i = symbol as i64 - self.lo as i64;
        if i < 0 || i >= self.probs.len() as i64 {
            0.0
        } else {
            self.probs[i as usize]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.probs.is_empty() || self.probs.len() > PROB_SCALE as usize {
            return Err(Error::Model(format!(
                "alphabet size {} out of range",
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Model("negative or non-finite probability".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Model(format!("probabilities sum to {total}")));
        }
        Ok(())
    }

    /// Rescales to unit sum; fails on an all-zero distribution.
    pub fn normalized(mut self) -> Result<Self> {
        let total: f64 = self.probs.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Model(format!("cannot normalize mass {total}")));
        }
        self.probs.iter_mut().for_each(|p| *p /= total);
        Ok(self)
    }
}

/// Quantized frequencies summing to [`PROB_SCALE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    pub lo: i32,
    pub freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn from_pmf(pmf: &Pmf) -> Result<Self> {
        pmf.validate()?;
        let n = pmf.probs.len();
        let spare = (PROB_SCALE as usize - n) as f64;
        let total: f64 = pmf.probs.iter().sum();
        let mut freqs = Vec::with_capacity(n);
        let mut fracs = Vec::with_capacity(n);
        for (i, &p) in pmf.probs.iter().enumerate() {
            let scaled = p / total * spare;
            let whole = scaled.floor();
            freqs.push(1 + whole as u32);
            fracs.push((scaled - whole, i));
        }
        let assigned: u32 = freqs.iter().sum();
        let remainder = (PROB_SCALE - assigned) as usize;
        // Largest fractional parts first; ties go to the lower index.
        fracs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in fracs.iter().take(remainder) {
            freqs[i] += 1;
        }
        Ok(Self::from_freqs(pmf.lo, freqs))
    }

    fn from_freqs(lo: i32, freqs: Vec<u32>) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for f in &freqs {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, PROB_SCALE);
        FreqTable { lo, freqs, cum }
    }

    fn slot(&self, symbol: i32) -> Option<usize> {
        let i = symbol as i64 - self.lo as i64;
        (i >= 0 && (i as usize) < self.freqs.len()).then_some(i as usize)
    }

    fn find(&self, value: u32) -> usize {
        self.cum.partition_point(|&c| c <= value) - 1
    }

    /// Code length in bits of `symbol` under the quantized frequencies.
    pub fn cost(&self, symbol: i32) -> f64 {
        self.slot(symbol).map_or(f64::INFINITY, |i| {
            PROB_BITS as f64 - (self.freqs[i] as f64).log2()
        })
    }
}

/// Encodes `symbols[i]` under `tables[i]`.
pub fn encode_with_tables(symbols: &[i32], tables: &[FreqTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::shape(&[tables.len()], &[symbols.len()]));
    }
    let mut words: Vec<u16> = Vec::new();
    let mut x: u32 = RANS_L;
    for (pos, (&s, t)) in symbols.iter().zip(tables).enumerate().rev() {
        let i = t.slot(s).ok_or(Error::SymbolOutOfRange {
            symbol: s,
            position: pos,
        })?;
        let (f, c) = (t.freqs[i], t.cum[i]);
        let x_max = ((RANS_L as u64 >> PROB_BITS) << 16) * f as u64;
        while x as u64 >= x_max {
            words.push(x as u16);
            x >>= 16;
        }
        x = ((x / f) << PROB_BITS) + (x % f) + c;
    }
    let mut out = Vec::with_capacity(4 + 2 * words.len());
    out.extend_from_slice(&x.to_le_bytes());
    for w in words.iter().rev() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

/// Decodes one symbol per table. Fails on truncated or inconsistent input.
pub fn decode_with_tables(bytes: &[u8], tables: &[FreqTable]) -> Result<Vec<i32>> {
    let bad = |reason: String| Error::Bitstream { block: 0, reason };
    if bytes.len() < 4 || !(bytes.len() - 4).is_multiple_of(2) {
        return Err(bad(format!(
            "payload length {} is not a valid stream",
            bytes.len()
        )));
    }
    let mut x = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    let mut words = bytes[4..]
        .chunks_exact(2)
        .map(|w| u16::from_le_bytes([w[0], w[1]]));
    let mut out = Vec::with_capacity(tables.len());
    for (pos, t) in tables.iter().enumerate() {
        let slot = x & (PROB_SCALE - 1);
        let i = t.find(slot);
        out.push(t.lo + i as i32);
        x = t.freqs[i] * (x >> PROB_BITS) + slot - t.cum[i];
        while x < RANS_L {
            let w = words
                .next()
                .ok_or_else(|| bad(format!("stream ends before symbol {pos}")))?;
            x = (x << 16) | w as u32;
        }
    }
    if words.next().is_some() || x != RANS_L {
        return Err(bad("trailing data or corrupted state".into()));
    }
    Ok(out)
}

pub fn entropy_encode(symbols: &[i32], pmfs: &[Pmf]) -> Result<Vec<u8>> {
    let tables = pmfs
        .iter()
        .map(FreqTable::from_pmf)
        .collect::<Result<Vec<_>>>()?;
    encode_with_tables(symbols, &tables)
}

pub fn entropy_decode(bytes: &[u8], pmfs: &[Pmf]) -> Result<Vec<i32>> {
    let tables = pmfs
        .iter()
        .map(FreqTable::from_pmf)
        .collect::<Result<Vec<_>>>()?;
    decode_with_tables(bytes, &tables)
}

/// Ideal code length `sum -log2 p(symbol)` in bits.
pub fn ideal_bits(symbols: &[i32], pmfs: &[Pmf]) -> f64 {
    symbols
        .iter()
        .zip(pmfs)
        .map(|(&s, p)| -p.prob(s).log2())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three() -> Pmf {
        Pmf::new(0, vec![0.5, 0.25, 0.25])
    }

    #[test]
    fn exhaustive_short_sequences() {
        let pmf = three();
        for len in 0..=6u32 {
            for code in 0..3usize.pow(len) {
                let mut c = code;
                let s: Vec<i32> = (0..len)
                    .map(|_| {
                        let d = (c % 3) as i32;
                        c /= 3;
                        d
                    })
                    .collect();
                let pmfs = vec![pmf.clone(); s.len()];
                let bytes = entropy_encode(&s, &pmfs).unwrap();
                assert_eq!(entropy_decode(&bytes, &pmfs).unwrap(), s);
            }
        }
    }

    #[test]
    fn iid_stream_is_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<i32> = (0..1000)
            .map(|_| match rng.gen::<f64>() {
                p if p < 0.5 => 0,
                p if p < 0.75 => 1,
                _ => 2,
            })
            .collect();
        let pmfs = vec![three(); s.len()];
        let bytes = entropy_encode(&s, &pmfs).unwrap();
        let h = ideal_bits(&s, &pmfs);
        let bits = 8.0 * bytes.len() as f64;
        assert!(bits >= h && bits <= h * 1.02 + 64.0, "{bits} vs {h}");
    }

    #[test]
    fn degenerate_distribution() {
        let mut probs = vec![0.0; 5];
        probs[2] = 1.0;
        let pmf = Pmf::new(-2, probs);
        let s = vec![0; 100];
        let pmfs = vec![pmf; 100];
        let bytes = entropy_encode(&s, &pmfs).unwrap();
        assert!(bytes.len() <= 8, "{}", bytes.len());
        assert_eq!(entropy_decode(&bytes, &pmfs).unwrap(), s);
        // a floored symbol still round-trips
        let s2 = vec![0, 2, 0];
        let bytes = entropy_encode(&s2, &pmfs[..3]).unwrap();
        assert_eq!(entropy_decode(&bytes, &pmfs[..3]).unwrap(), s2);
    }

    #[test]
    fn single_symbol_alphabet() {
        let pmfs = vec![Pmf::new(7, vec![1.0]); 10];
        let s = vec![7; 10];
        let bytes = entropy_encode(&s, &pmfs).unwrap();
        assert_eq!(bytes.len(), 4);
        assert_eq!(entropy_decode(&bytes, &pmfs).unwrap(), s);
    }

    #[test]
    fn errors() {
        let pmfs = vec![three(); 2];
        assert!(matches!(
            entropy_encode(&[0, 3], &pmfs),
            Err(Error::SymbolOutOfRange {
                symbol: 3,
                position: 1
            })
        ));
        assert!(entropy_encode(&[0], &[Pmf::new(0, vec![0.5, 0.2])]).is_err());
        let s: Vec<i32> = (0..200).map(|i| i % 3).collect();
        let pmfs = vec![three(); 200];
        let bytes = entropy_encode(&s, &pmfs).unwrap();
        assert!(entropy_decode(&bytes[..bytes.len() - 2], &pmfs).is_err());
        assert!(entropy_decode(&bytes[..3], &pmfs).is_err());
    }

    #[test]
    fn quantization_preserves_order_and_floor() {
        let pmf = Pmf::new(-1, vec![1e-12, 0.3, 0.7 - 1e-12]);
        let t = FreqTable::from_pmf(&pmf).unwrap();
        assert_eq!(t.freqs.iter().sum::<u32>(), PROB_SCALE);
        assert_eq!(t.freqs[0], 1);
        assert!(t.freqs[1] < t.freqs[2]);
    }
}
