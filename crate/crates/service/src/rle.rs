//! Run-length encoding of binary point masks.

use serde::{Deserialize, Serialize};

/// `runs` holds `[start, length]` pairs of set points in ascending order over `n` points.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub n: usize,
    pub runs: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < mask.len() {
            if mask[i] {
                let start = i;
                while i < mask.len() && mask[i] {
                    i += 1;
                }
                runs.push(start);
                runs.push(i - start);
            } else {
                i += 1;
            }
        }
        Self { n: mask.len(), runs }
    }

    /// Fails on odd run lists, empty or overlapping runs and runs past `n`.
    pub fn decode(&self) -> Result<Vec<bool>, String> {
        if !self.runs.len().is_multiple_of(2) {
            return Err("runs must come in [start, length] pairs".into());
        }
        let mut mask = vec![false; self.n];
        let mut end = 0;
        for pair in self.runs.chunks_exact(2) {
            let (start, len) = (pair[0], pair[1]);
            if len == 0 || start < end || start + len > self.n {
                return Err(format!("invalid run [{start}, {len}] over {} points", self.n));
            }
            mask[start..start + len].iter_mut().for_each(|b| *b = true);
            end = start + len;
        }
        Ok(mask)
    }

    pub fn count(&self) -> usize {
        self.runs.chunks_exact(2).map(|p| p[1]).sum()
    }
}
