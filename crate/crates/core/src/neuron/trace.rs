//! Packed spike-trace files.
//!
//! Layout: magic `SPKT`, format version byte `1`, then one record per layer:
//! `u32` name length, UTF-8 name, `u64` neuron count, `u32` timesteps, and
//! `ceil(neurons·T / 8)` payload bytes. Spike `(t, i)` is bit `k = t·neurons + i`
//! stored in byte `k / 8` at bit position `k % 8` (least significant first).
//! All integers are little-endian.

use std::io::{Read, Write};

use crate::error::{input, Error, Result};

const MAGIC: &[u8; 4] = b"SPKT";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTrace {
    pub layer: String,
    pub neurons: usize,
    pub steps: usize,
    bits: Vec<u8>,
}

impl SpikeTrace {
    pub fn new(layer: impl Into<String>, neurons: usize, steps: usize) -> Self {
        Self {
            layer: layer.into(),
            neurons,
            steps,
            bits: vec![0; (neurons * steps).div_ceil(8)],
        }
    }

    /// Builds a trace from per-step spike vectors (nonzero = spike).
    pub fn from_steps(layer: impl Into<String>, steps: &[Vec<f64>]) -> Result<Self> {
        let neurons = steps.first().map_or(0, Vec::len);
        let mut trace = Self::new(layer, neurons, steps.len());
        for (t, s) in steps.iter().enumerate() {
            if s.len() != neurons {
                return input("spike steps have inconsistent lengths");
            }
            for (i, &v) in s.iter().enumerate() {
                if v != 0.0 {
                    trace.set(t, i, true);
                }
            }
        }
        Ok(trace)
    }

    pub fn set(&mut self, t: usize, i: usize, spike: bool) {
        let k = t * self.neurons + i;
        if spike {
            self.bits[k / 8] |= 1 << (k % 8);
        } else {
            self.bits[k / 8] &= !(1 << (k % 8));
        }
    }

    pub fn get(&self, t: usize, i: usize) -> bool {
        let k = t * self.neurons + i;
        self.bits[k / 8] >> (k % 8) & 1 == 1
    }

    pub fn spike_count(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }
}

pub fn write_traces<W: Write>(mut w: W, traces: &[SpikeTrace]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for t in traces {
        let name = t.layer.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.neurons as u64).to_le_bytes())?;
        w.write_all(&(t.steps as u32).to_le_bytes())?;
        w.write_all(&t.bits)?;
    }
    Ok(())
}

pub fn read_traces<R: Read>(mut r: R) -> Result<Vec<SpikeTrace>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 5 || &buf[..4] != MAGIC {
        return input("not a spike-trace file (bad magic)");
    }
    if buf[4] != VERSION {
        return input(format!("unsupported spike-trace version {}", buf[4]));
    }
    let mut pos = 5;
    let take = |n: usize, pos: &mut usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Input(format!("spike-trace truncated at byte {}", *pos)));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    while pos < buf.len() {
        let name_len = u32::from_le_bytes(take(4, &mut pos)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len, &mut pos)?.to_vec())
            .map_err(|_| Error::Input("spike-trace layer name is not UTF-8".into()))?;
        let neurons = u64::from_le_bytes(take(8, &mut pos)?.try_into().unwrap()) as usize;
        let steps = u32::from_le_bytes(take(4, &mut pos)?.try_into().unwrap()) as usize;
        let bits = take((neurons * steps).div_ceil(8), &mut pos)?.to_vec();
        out.push(SpikeTrace {
            layer: name,
            neurons,
            steps,
            bits,
        });
    }
    Ok(out)
}
