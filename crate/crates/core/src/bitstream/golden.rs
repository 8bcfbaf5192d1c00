//! Golden vectors for entropy-coder conformance.
//!
//! A vector set is JSON: tables as explicit frequencies, a context and a
//! symbol list, and the hex bytes the reference coder produces. Any engine
//! claiming compatibility must reproduce `bytes_hex` exactly and decode it
//! back to `symbols`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cdf::CdfTable;
use super::range_coder::{decode_symbols, encode_symbols};
use super::CoderError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub offset: i32,
    pub escape: bool,
    pub freqs: Vec<u32>,
}

impl TableSpec {
    pub fn from_table(t: &CdfTable) -> Self {
        Self {
            offset: t.offset(),
            escape: t.has_escape(),
            freqs: t.frequencies(),
        }
    }

    pub fn to_table(&self) -> Result<CdfTable, CoderError> {
        CdfTable::from_frequencies(&self.freqs, self.offset, self.escape)
    }
}

/// Table file accepted by the conformance tool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSet {
    pub tables: Vec<TableSpec>,
}

impl TableSet {
    pub fn build(&self) -> Result<Vec<CdfTable>, CoderError> {
        self.tables.iter().map(TableSpec::to_table).collect()
    }
}

/// Symbol file accepted by the conformance tool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolStream {
    pub contexts: Vec<usize>,
    pub symbols: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenVector {
    pub id: usize,
    pub tables: Vec<TableSpec>,
    pub contexts: Vec<usize>,
    pub symbols: Vec<i32>,
    pub bytes_hex: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenSet {
    pub version: u32,
    pub seed: u64,
    pub vectors: Vec<GoldenVector>,
}

/// Random tables with skewed probabilities; escapes appear in about half.
pub fn random_tables(rng: &mut impl Rng, count: usize, max_size: usize) -> Vec<CdfTable> {
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=max_size);
            let escape = n == 1 || rng.random_bool(0.5);
            let skew = rng.random_range(0.5..4.0);
            let mut pmf: Vec<f64> = (0..n)
                .map(|_| rng.random::<f64>().powf(skew) + 1e-6)
                .collect();
            let total: f64 = pmf.iter().sum::<f64>() / if escape { 0.97 } else { 1.0 };
            pmf.iter_mut().for_each(|p| *p /= total);
            CdfTable::from_pmf(&pmf, rng.random_range(-100..100), escape)
                .expect("valid random table")
        })
        .collect()
}

/// Symbols drawn from each table's own distribution, with occasional
/// escapes for tables that have one.
pub fn random_stream(rng: &mut impl Rng, tables: &[CdfTable], len: usize) -> SymbolStream {
    let contexts: Vec<usize> = (0..len)
        .map(|_| rng.random_range(0..tables.len()))
        .collect();
    let symbols = contexts
        .iter()
        .map(|&c| {
            let t = &tables[c];
            let u = rng.random_range(0..super::TOTAL_FREQ);
            let i = t.cdf().partition_point(|&x| x <= u) - 1;
            if Some(i) == t.escape_index() {
                let outside = if rng.random_bool(0.5) {
                    t.offset() as i64 - rng.random_range(1..2000)
                } else {
                    t.offset() as i64 + t.in_range() as i64 + rng.random_range(0..2000)
                };
                outside.clamp(i16::MIN as i64, i16::MAX as i64) as i32
            } else {
                t.offset() + i as i32
            }
        })
        .collect::<Vec<i32>>();
    SymbolStream { contexts, symbols }
}

pub fn generate(count: usize, seed: u64) -> GoldenSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = (0..count)
        .map(|id| {
            let n_tables = rng.random_range(1..=4);
            let tables = random_tables(&mut rng, n_tables, 300);
            let len = rng.random_range(0..=2000);
            let stream = random_stream(&mut rng, &tables, len);
            let bytes = encode_symbols(&stream.symbols, &tables, &stream.contexts)
                .expect("encodable stream");
            GoldenVector {
                id,
                tables: tables.iter().map(TableSpec::from_table).collect(),
                contexts: stream.contexts,
                symbols: stream.symbols,
                bytes_hex: hex::encode(bytes),
            }
        })
        .collect();
    GoldenSet {
        version: 1,
        seed,
        vectors,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VectorVerdict {
    pub id: usize,
    pub encode_matches: bool,
    pub decode_matches: bool,
    pub error: Option<String>,
}

/// Checks the reference coder against every vector of a set.
pub fn verify(set: &GoldenSet) -> Vec<VectorVerdict> {
    set.vectors
        .iter()
        .map(|v| {
            let run = || -> Result<(bool, bool), String> {
                let tables: Vec<CdfTable> = v
                    .tables
                    .iter()
                    .map(TableSpec::to_table)
                    .collect::<Result<_, _>>()
                    .map_err(|e| e.to_string())?;
                let expected = hex::decode(&v.bytes_hex).map_err(|e| e.to_string())?;
                let bytes =
                    encode_symbols(&v.symbols, &tables, &v.contexts).map_err(|e| e.to_string())?;
                let decoded =
                    decode_symbols(&expected, &tables, &v.contexts).map_err(|e| e.to_string())?;
                Ok((bytes == expected, decoded == v.symbols))
            };
            match run() {
                Ok((e, d)) => VectorVerdict {
                    id: v.id,
                    encode_matches: e,
                    decode_matches: d,
                    error: None,
                },
                Err(msg) => VectorVerdict {
                    id: v.id,
                    encode_matches: false,
                    decode_matches: false,
                    error: Some(msg),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_set_verifies() {
        let set = generate(20, 99);
        assert_eq!(generate(20, 99), set);
        assert!(verify(&set)
            .iter()
            .all(|v| v.encode_matches && v.decode_matches));
        let json = serde_json::to_string(&set).unwrap();
        let back: GoldenSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn tampered_vector_fails() {
        let mut set = generate(3, 1);
        let s = set.vectors[0].tables[0].offset;
        set.vectors[0].symbols.push(s);
        set.vectors[0].contexts.push(0);
        let verdicts = verify(&set);
        assert!(!verdicts[0].encode_matches);
        assert!(verdicts[1].encode_matches);
    }
}
