//! Small trainable building blocks: dense MLPs and 3×3×3 convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{DiffTensor, Graph, ParamId, ParamStore, Var};
use super::ops::{gemm_acc, matmul_into, MatRef};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Softplus => g.softplus(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-uniform for ReLU layers, Glorot-uniform otherwise; zero biases.
    Default,
    /// Default init, but the output layer starts at zero.
    ZeroLast,
    /// Everything zero.
    Zero,
}

fn uniform_weights(rng: &mut impl Rng, fan_in: usize, fan_out: usize, act: Activation) -> Vec<f64> {
    let bound = match act {
        Activation::Relu => (6.0 / fan_in as f64).sqrt(),
        _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

/// Fully connected network over row batches `[n, widths[0]] → [n, widths.last()]`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub widths: Vec<usize>,
    /// One activation per layer; the last entry is the output activation.
    pub activations: Vec<Activation>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        let mut activations = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fi, fo) = (widths[l], widths[l + 1]);
            let act = if l + 1 == layers { output } else { hidden };
            let zero = init == Init::Zero || (init == Init::ZeroLast && l + 1 == layers);
            let w = if zero {
                vec![0.0; fi * fo]
            } else {
                uniform_weights(rng, fi, fo, act)
            };
            weights.push(store.add(
                DiffTensor::new(format!("{name}.{l}.weight"), vec![fi, fo], w).expect("shape"),
            ));
            biases.push(store.add(
                DiffTensor::new(format!("{name}.{l}.bias"), vec![fo], vec![0.0; fo]).expect("shape"),
            ));
            activations.push(act);
        }
        Mlp {
            widths: widths.to_vec(),
            activations,
            weights,
            biases,
        }
    }

    pub fn in_width(&self) -> usize {
        self.widths[0]
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.weights.iter().chain(&self.biases).copied()
    }

    /// `Σ (w_in · w_out + w_out)` over layers.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_width() {
            return Err(Error::ShapeMismatch(format!(
                "mlp expects [n, {}], got {s:?}",
                self.in_width()
            )));
        }
        let mut h = x;
        for l in 0..self.weights.len() {
            let w = g.param(store, self.weights[l]);
            let b = g.param(store, self.biases[l]);
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            h = self.activations[l].apply(g, h);
        }
        Ok(h)
    }
}

/// Same-padded 3×3×3 convolution over a channels-last volume.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Conv3d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = 27 * in_channels;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..27 * in_channels * out_channels)
            .map(|_| if zero { 0.0 } else { rng.gen_range(-bound..bound) })
            .collect();
        let weight = store.add(
            DiffTensor::new(
                format!("{name}.weight"),
                vec![27, in_channels, out_channels],
                w,
            )
            .expect("shape"),
        );
        let bias = store.add(
            DiffTensor::new(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels])
                .expect("shape"),
        );
        Conv3d {
            in_channels,
            out_channels,
            weight,
            bias,
        }
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv3d(x, w)?;
        g.add_bias(y, b)
    }
}

/// Voxels per block of the convolution's row-parallel loops.
const CONV_BLOCK: usize = 256;

fn neighbor(dims: [usize; 3], ijk: [usize; 3], o: usize) -> Option<usize> {
    let d = [o / 9, (o / 3) % 3, o % 3];
    let mut n = [0usize; 3];
    for a in 0..3 {
        let c = ijk[a] as isize + d[a] as isize - 1;
        if c < 0 || c >= dims[a] as isize {
            return None;
        }
        n[a] = c as usize;
    }
    Some((n[0] * dims[1] + n[1]) * dims[2] + n[2])
}

impl Graph {
    /// `x: [X, Y, Z, Cin]`, `w: [27, Cin, Cout]` → `[X, Y, Z, Cout]`, zero padding.
    /// Offset `o` addresses the neighbor at `(o/9, o/3 % 3, o % 3) - 1`.
    pub fn conv3d(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 3 || ws[0] != 27 || ws[1] != xs[3] {
            return Err(Error::ShapeMismatch(format!("conv3d: {xs:?} with {ws:?}")));
        }
        let dims = [xs[0], xs[1], xs[2]];
        let (cin, cout) = (ws[1], ws[2]);
        let nvox = dims[0] * dims[1] * dims[2];
        let (xv, wv) = (self.value_rc(x), self.value_rc(w));
        let unflat = move |v: usize| [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
        // Neighborhood rows of voxels `first..first + rows`, `[rows, 27·width]`,
        // zero where a neighbor falls outside the grid. `flip` mirrors the
        // offsets, which gathers the voxels that see each row.
        let gather = move |src: &[f64], width: usize, first: usize, rows: usize, flip: bool| {
            let mut col = vec![0.0; rows * 27 * width];
            for r in 0..rows {
                let ijk = unflat(first + r);
                for o in 0..27 {
                    let via = if flip { 26 - o } else { o };
                    if let Some(nb) = neighbor(dims, ijk, via) {
                        let dst = (r * 27 + o) * width;
                        col[dst..dst + width].copy_from_slice(&src[nb * width..(nb + 1) * width]);
                    }
                }
            }
            col
        };
        let mut out = vec![0.0; nvox * cout];
        {
            let (xs_, ws_): (&[f64], &[f64]) = (&xv, &wv);
            crate::exec::for_each_chunk_mut(&mut out, cout * CONV_BLOCK, |ci, chunk| {
                let rows = chunk.len() / cout;
                let col = gather(xs_, cin, ci * CONV_BLOCK, rows, false);
                matmul_into(&col, ws_, chunk, 27 * cin, cout);
            });
        }
        Ok(self.push(vec![dims[0], dims[1], dims[2], cout], out, &[x, w], move |g, p| {
            let (xv, wv): (&[f64], &[f64]) = (&xv, &wv);
            if let Some(gx) = p[0].as_deref_mut() {
                // gx[n, c] = Σ_o Σ_j g[v, j] · w[o, c, j] over voxels v that see n through o
                let mut wt = vec![0.0; 27 * cout * cin];
                for o in 0..27 {
                    for c in 0..cin {
                        for j in 0..cout {
                            wt[(o * cout + j) * cin + c] = wv[(o * cin + c) * cout + j];
                        }
                    }
                }
                crate::exec::for_each_chunk_mut(gx, cin * CONV_BLOCK, |ci, chunk| {
                    let rows = chunk.len() / cin;
                    let gcol = gather(g, cout, ci * CONV_BLOCK, rows, true);
                    matmul_into(&gcol, &wt, chunk, 27 * cout, cin);
                });
            }
            if let Some(gw) = p[1].as_deref_mut() {
                let blocks = nvox.div_ceil(CONV_BLOCK);
                let partial: Vec<Vec<f64>> = crate::exec::map_range(blocks, |b| {
                    let first = b * CONV_BLOCK;
                    let rows = CONV_BLOCK.min(nvox - first);
                    let col = gather(xv, cin, first, rows, false);
                    let mut acc = vec![0.0; 27 * cin * cout];
                    gemm_acc(
                        MatRef::transposed(&col, 27 * cin),
                        MatRef::new(&g[first * cout..(first + rows) * cout], cout),
                        &mut acc,
                        rows,
                        cout,
                    );
                    acc
                });
                for acc in partial {
                    gw.iter_mut().zip(&acc).for_each(|(d, x)| *d += x);
                }
            }
        }))
    }
}
