//! Independent oracles shared by the integration tests: a naive two-layer
//! spiking simulator and a scalar reverse-mode tape for BPTT.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};
use spikehsi::network::{InputDescriptor, Mode, Model, NetworkBuilder, NetworkSpec};
use spikehsi::neuron::LifParams;
use spikehsi::tensor::Tensor;

/// Input `[1, bands, 1, 1]`, one hidden layer, classifier.
pub fn two_layer_spec(bands: usize, hidden: usize, classes: usize, mode: Mode, timesteps: usize) -> NetworkSpec {
    let mut b = NetworkBuilder::new(
        "two-layer",
        InputDescriptor {
            channels: 1,
            bands,
            patch_size: 1,
        },
    );
    b.linear(hidden).unwrap().classifier(classes).unwrap();
    b.build(mode, timesteps).unwrap()
}

pub fn normal_vec<R: Rng>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sigma).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Random weights and LIF parameters; thresholds of the order of the drive.
pub fn random_two_layer<R: Rng>(
    rng: &mut R,
    bands: usize,
    hidden: usize,
    classes: usize,
    timesteps: usize,
) -> Model {
    let spec = two_layer_spec(bands, hidden, classes, Mode::Snn, timesteps);
    let w0 = Tensor::new(vec![hidden, bands], normal_vec(rng, hidden * bands, 1.0 / (bands as f64).sqrt())).unwrap();
    let w1 = Tensor::new(vec![classes, hidden], normal_vec(rng, classes * hidden, 1.0)).unwrap();
    let lif = LifParams::new(rng.random_range(0.5..0.98), rng.random_range(0.2..0.9)).unwrap();
    Model {
        spec,
        weights: vec![w0, w1],
        lif: Some(vec![lif]),
    }
}

pub fn random_input<R: Rng>(rng: &mut R, bands: usize) -> Tensor {
    let data = (0..bands)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    Tensor::new(vec![1, bands, 1, 1], data).unwrap()
}

/// Output potentials and hidden spike count of the two-layer network,
/// written directly from the neuron equations.
pub fn naive_two_layer(w0: &[f64], w1: &[f64], lif: LifParams, x: &[f64], timesteps: usize) -> (Vec<f64>, f64) {
    let n = x.len();
    let h = w0.len() / n;
    let c = w1.len() / h;
    let mut u = vec![0.0; h];
    let mut o = vec![0.0; h];
    let mut out = vec![0.0; c];
    let mut spikes = 0.0;
    for _ in 0..timesteps {
        for i in 0..h {
            let mut a = 0.0;
            for j in 0..n {
                if x[j] != 0.0 {
                    a += w0[i * n + j] * x[j];
                }
            }
            u[i] = lif.leak * u[i] + a - lif.threshold * o[i];
        }
        for i in 0..h {
            o[i] = if u[i] / lif.threshold - 1.0 > 0.0 { 1.0 } else { 0.0 };
            spikes += o[i];
        }
        for k in 0..c {
            let mut a = 0.0;
            for i in 0..h {
                if o[i] != 0.0 {
                    a += w1[k * h + i] * o[i];
                }
            }
            out[k] += a;
        }
    }
    (out, spikes)
}

/// Scalar reverse-mode tape. Every node stores its value and the local
/// partial derivatives with respect to its parents.
#[derive(Default)]
pub struct Tape {
    values: Vec<f64>,
    parents: Vec<Vec<(usize, f64)>>,
}

impl Tape {
    pub fn var(&mut self, v: f64) -> usize {
        self.push(v, Vec::new())
    }

    fn push(&mut self, v: f64, parents: Vec<(usize, f64)>) -> usize {
        self.values.push(v);
        self.parents.push(parents);
        self.values.len() - 1
    }

    pub fn value(&self, a: usize) -> f64 {
        self.values[a]
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(self.values[a] + self.values[b], vec![(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: usize, b: usize) -> usize {
        self.push(self.values[a] - self.values[b], vec![(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        let (va, vb) = (self.values[a], self.values[b]);
        self.push(va * vb, vec![(a, vb), (b, va)])
    }

    pub fn scale(&mut self, a: usize, c: f64) -> usize {
        self.push(self.values[a] * c, vec![(a, c)])
    }

    pub fn div(&mut self, a: usize, b: usize) -> usize {
        let (va, vb) = (self.values[a], self.values[b]);
        self.push(va / vb, vec![(a, 1.0 / vb), (b, -va / (vb * vb))])
    }

    pub fn offset(&mut self, a: usize, c: f64) -> usize {
        self.push(self.values[a] + c, vec![(a, 1.0)])
    }

    pub fn exp(&mut self, a: usize) -> usize {
        let e = self.values[a].exp();
        self.push(e, vec![(a, e)])
    }

    pub fn ln(&mut self, a: usize) -> usize {
        let v = self.values[a];
        self.push(v.ln(), vec![(a, 1.0 / v)])
    }

    /// Spike nonlinearity with the triangular surrogate as its derivative.
    /// `relaxed` uses the smooth function whose true derivative that is.
    pub fn spike(&mut self, z: usize, gamma: f64, relaxed: bool) -> usize {
        let zv = self.values[z];
        let value = if relaxed {
            let r = if zv <= -1.0 {
                0.0
            } else if zv <= 0.0 {
                0.5 * (zv + 1.0).powi(2)
            } else if zv < 1.0 {
                1.0 - 0.5 * (1.0 - zv).powi(2)
            } else {
                1.0
            };
            gamma * r
        } else if zv > 0.0 {
            1.0
        } else {
            0.0
        };
        let d = gamma * (1.0 - zv.abs()).max(0.0);
        self.push(value, vec![(z, d)])
    }

    pub fn sum(&mut self, xs: &[usize]) -> usize {
        let v = xs.iter().map(|&i| self.values[i]).sum();
        self.push(v, xs.iter().map(|&i| (i, 1.0)).collect())
    }

    /// `∂out/∂node` for every node.
    pub fn backward(&self, out: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.values.len()];
        g[out] = 1.0;
        for n in (0..=out).rev() {
            if g[n] == 0.0 {
                continue;
            }
            for &(p, d) in &self.parents[n] {
                g[p] += g[n] * d;
            }
        }
        g
    }
}

pub struct OracleGrads {
    pub loss: f64,
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
    pub threshold: f64,
    pub leak: f64,
}

/// Softmax cross-entropy loss of the two-layer network and its gradient by
/// brute-force differentiation of the unrolled graph.
#[allow(clippy::too_many_arguments)]
pub fn tape_two_layer(
    w0: &[f64],
    w1: &[f64],
    lif: LifParams,
    x: &[f64],
    label: usize,
    timesteps: usize,
    gamma: f64,
    relaxed: bool,
) -> OracleGrads {
    let n = x.len();
    let h = w0.len() / n;
    let c = w1.len() / h;
    let mut t = Tape::default();
    let w0v: Vec<usize> = w0.iter().map(|&w| t.var(w)).collect();
    let w1v: Vec<usize> = w1.iter().map(|&w| t.var(w)).collect();
    let lam = t.var(lif.leak);
    let v = t.var(lif.threshold);
    let zero = t.var(0.0);
    let mut u = vec![zero; h];
    let mut o = vec![zero; h];
    let mut out_terms: Vec<Vec<usize>> = vec![Vec::new(); c];
    for _ in 0..timesteps {
        for i in 0..h {
            let terms: Vec<usize> = (0..n).map(|j| t.scale(w0v[i * n + j], x[j])).collect();
            let a = t.sum(&terms);
            let leaked = t.mul(lam, u[i]);
            let reset = t.mul(v, o[i]);
            let s = t.add(leaked, a);
            u[i] = t.sub(s, reset);
        }
        for i in 0..h {
            let r = t.div(u[i], v);
            let z = t.offset(r, -1.0);
            o[i] = t.spike(z, gamma, relaxed);
        }
        for (k, terms) in out_terms.iter_mut().enumerate() {
            for i in 0..h {
                terms.push(t.mul(w1v[k * h + i], o[i]));
            }
        }
    }
    let logits: Vec<usize> = out_terms.iter().map(|ts| t.sum(ts)).collect();
    let m = logits.iter().map(|&l| t.value(l)).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<usize> = logits
        .iter()
        .map(|&l| {
            let s = t.offset(l, -m);
            t.exp(s)
        })
        .collect();
    let z = t.sum(&exps);
    let lz = t.ln(z);
    let shifted = t.offset(logits[label], -m);
    let loss = t.sub(lz, shifted);
    let g = t.backward(loss);
    OracleGrads {
        loss: t.value(loss),
        w0: w0v.iter().map(|&i| g[i]).collect(),
        w1: w1v.iter().map(|&i| g[i]).collect(),
        threshold: g[v],
        leak: g[lam],
    }
}

/// `max |a - b| / max |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
