//! Draw storage: little-endian `f64`, row-major, chains stacked one after
//! another, with a JSON sidecar describing the shape.

use std::fs;
use std::path::Path;

use scalebayes_core::mcmc::SampleBuffer;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const DRAWS_SCHEMA: &str = "scalebayes.draws/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawsHeader {
    pub schema: String,
    /// Rows per chain.
    pub rows: usize,
    pub cols: usize,
    pub chains: usize,
    pub dtype: String,
    pub order: String,
}

pub fn encode(chains: &[SampleBuffer]) -> Result<(DrawsHeader, Vec<u8>)> {
    let (rows, cols) = chains.first().map_or((0, 0), |c| (c.len(), c.dim()));
    if chains.iter().any(|c| c.len() != rows || c.dim() != cols) {
        return Err(HarnessError::Usage("chains differ in shape".into()));
    }
    let mut bytes = Vec::with_capacity(8 * rows * cols * chains.len());
    for c in chains {
        for v in c.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = DrawsHeader {
        schema: DRAWS_SCHEMA.into(),
        rows,
        cols,
        chains: chains.len(),
        dtype: "f64le".into(),
        order: "chain,row,col".into(),
    };
    Ok((header, bytes))
}

pub fn decode(header: &DrawsHeader, bytes: &[u8]) -> Result<Vec<SampleBuffer>> {
    let per_chain = header.rows * header.cols;
    if header.dtype != "f64le" || bytes.len() != 8 * per_chain * header.chains {
        return Err(HarnessError::schema("/rows", "draw file does not match its sidecar"));
    }
    if per_chain == 0 {
        return Ok((0..header.chains).map(|_| SampleBuffer::new(header.cols)).collect());
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("chunk of eight bytes"))).collect();
    values
        .chunks(per_chain)
        .map(|c| SampleBuffer::from_rows(header.cols, c.to_vec()).map_err(HarnessError::from))
        .collect()
}

/// Write `<stem>.bin` and `<stem>.json` into `dir`.
pub fn write(dir: &Path, stem: &str, chains: &[SampleBuffer]) -> Result<()> {
    let (header, bytes) = encode(chains)?;
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, bytes).map_err(|e| HarnessError::io(&bin, e))?;
    let side = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&header).unwrap_or_default() + "\n";
    fs::write(&side, text).map_err(|e| HarnessError::io(&side, e))
}

/// Read draws given the path of either the `.bin` file or its sidecar.
pub fn read(path: &Path) -> Result<Vec<SampleBuffer>> {
    let side = path.with_extension("json");
    let bin = path.with_extension("bin");
    let text = fs::read_to_string(&side).map_err(|e| HarnessError::io(&side, e))?;
    let header: DrawsHeader = crate::config::from_value(&crate::config::parse_json(&text)?, "")?;
    let bytes = fs::read(&bin).map_err(|e| HarnessError::io(&bin, e))?;
    decode(&header, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encoding_round_trips_bit_exactly(
            chains in 1usize..4,
            rows in 0usize..20,
            cols in 1usize..4,
            seed in any::<u64>(),
        ) {
            let mut x = seed;
            let bufs: Vec<SampleBuffer> = (0..chains).map(|_| {
                let vals: Vec<f64> = (0..rows * cols).map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(x >> 2)
                }).collect();
                SampleBuffer::from_rows(cols, vals).unwrap()
            }).collect();
            let (h, bytes) = encode(&bufs).unwrap();
            let back = decode(&h, &bytes).unwrap();
            for (a, b) in bufs.iter().zip(&back) {
                let bits = |s: &SampleBuffer| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let b = SampleBuffer::from_rows(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (h, bytes) = encode(&[b]).unwrap();
        assert!(decode(&h, &bytes[..24]).is_err());
    }
}
