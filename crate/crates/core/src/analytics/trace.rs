use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gate values `g_{i,t}^{(l)}` recorded per layer and per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace<S> {
    /// `layers[l][j]` is the `[L_j, N]` gate block of sequence `j` at layer `l`.
    layers: Vec<Vec<Tensor<S>>>,
}

/// One line of the JSON-lines trace export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub layer: usize,
    pub seq_id: usize,
    pub gates: Vec<Vec<f64>>,
}

impl<S: Scalar> RoutingTrace<S> {
    pub fn new(layers: Vec<Vec<Tensor<S>>>) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("trace has no layers"))?;
        let z = first.len();
        if z == 0 {
            return Err(Error::Empty("trace has no sequences"));
        }
        let n = first[0].shape().get(1).copied().unwrap_or(0);
        for layer in &layers {
            if layer.len() != z {
                return Err(Error::shape("trace", &[z], &[layer.len()]));
            }
            for (j, block) in layer.iter().enumerate() {
                if block.shape().len() != 2 || block.shape()[1] != n {
                    return Err(Error::shape("trace", &[layers[0][j].shape()[0], n], block.shape()));
                }
                if block.shape()[0] != first[j].shape()[0] {
                    return Err(Error::shape("trace", first[j].shape(), block.shape()));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.layers[0].len()
    }

    pub fn num_experts(&self) -> usize {
        self.layers[0][0].shape()[1]
    }

    pub fn layer(&self, l: usize) -> &[Tensor<S>] {
        &self.layers[l]
    }

    pub fn sequence_len(&self, j: usize) -> usize {
        self.layers[0][j].shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        (0..self.num_sequences()).map(|j| self.sequence_len(j)).sum()
    }

    /// Keeps only the listed sequences, in the given order.
    pub fn select(&self, seqs: &[usize]) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|layer| seqs.iter().map(|&j| layer[j].clone()).collect())
            .collect();
        Self::new(layers)
    }

    pub fn to_records(&self) -> Vec<TraceRecord> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (j, block) in layer.iter().enumerate() {
                let n = block.shape()[1];
                let gates = block
                    .data()
                    .chunks(n)
                    .map(|row| row.iter().map(|v| v.to_f64_lossy()).collect())
                    .collect();
                out.push(TraceRecord {
                    layer: l,
                    seq_id: j,
                    gates,
                });
            }
        }
        out
    }

    pub fn from_records(records: &[TraceRecord]) -> Result<Self> {
        let num_layers = records.iter().map(|r| r.layer + 1).max().ok_or(Error::Empty("trace records"))?;
        let num_seqs = records.iter().map(|r| r.seq_id + 1).max().unwrap_or(0);
        let mut slots: Vec<Vec<Option<Tensor<S>>>> = vec![vec![None; num_seqs]; num_layers];
        for r in records {
            let rows = r.gates.len();
            let n = r.gates.first().map(Vec::len).unwrap_or(0);
            if rows == 0 || n == 0 || r.gates.iter().any(|g| g.len() != n) {
                return Err(Error::shape("trace record", &[rows, n], &[]));
            }
            let data = r.gates.iter().flatten().map(|&v| S::from_f64_lossy(v)).collect();
            slots[r.layer][r.seq_id] = Some(Tensor::matrix(rows, n, data)?);
        }
        let layers = slots
            .into_iter()
            .map(|layer| {
                layer
                    .into_iter()
                    .map(|b| b.ok_or(Error::Empty("missing (layer, seq_id) record")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in self.to_records() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Self::from_records(&records)
    }
}
