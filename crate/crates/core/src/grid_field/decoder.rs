use alloc::vec::Vec;

use crate::rng::{stream, uniform, Stage};

/// Numerically stable softplus and its derivative (the logistic sigmoid).
#[inline]
pub(crate) fn softplus_and_sigmoid(z: f64) -> (f64, f64) {
    let e = crate::math::exp(-z.abs());
    let sp = z.max(0.0) + libm::log1p(e);
    let sig = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sig)
}

/// Fully connected network `D -> hidden.. -> 1` with softplus hidden units
/// and a linear output.
///
/// All parameters live in one flat vector; layer `i` stores its
/// `out x in` row-major weights followed by its `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    pub(crate) adam_m: Vec<f64>,
    pub(crate) adam_v: Vec<f64>,
}

impl Decoder {
    /// Zero weights and biases.
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut total = 0;
        for w in sizes.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        offsets.push(total);
        Decoder {
            sizes,
            offsets,
            params: alloc::vec![0.0; total],
            adam_m: alloc::vec![0.0; total],
            adam_v: alloc::vec![0.0; total],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from a seeded stream.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut dec = Decoder::zeros(input_dim, hidden);
        let mut rng = stream(seed, Stage::DecoderInit, 0);
        for layer in 0..dec.num_layers() {
            let bound = 1.0 / crate::math::sqrt(dec.sizes[layer] as f64);
            let r = dec.offsets[layer]..dec.offsets[layer + 1];
            for p in &mut dec.params[r] {
                *p = uniform(&mut rng, -bound, bound);
            }
        }
        dec
    }

    /// Layer widths including input and the scalar output.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn set_moments(&mut self, m: &[f64], v: &[f64]) {
        self.adam_m.copy_from_slice(m);
        self.adam_v.copy_from_slice(v);
    }

    pub(crate) fn split_for_update(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (&mut self.params, &mut self.adam_m, &mut self.adam_v)
    }

    /// `(weights, biases)` of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.sizes[i], self.sizes[i + 1]);
        let start = self.offsets[i];
        let (w, b) = self.params[start..start + n_in * n_out + n_out].split_at(n_in * n_out);
        (w, b)
    }

    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.sizes[i], self.sizes[i + 1]);
        let start = self.offsets[i];
        let (w, b) = self.params[start..start + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        (w, b)
    }

    /// Length of the per-sample activation cache: activation and sigmoid of
    /// every hidden unit.
    pub fn cache_len(&self) -> usize {
        2 * self.sizes[1..self.sizes.len() - 1].iter().sum::<usize>()
    }

    /// Widest layer, the size of the scratch buffers used by `backward`.
    pub(crate) fn max_width(&self) -> usize {
        *self.sizes.iter().max().unwrap_or(&1)
    }

    /// Evaluates the network, filling `cache` (length [`cache_len`](Self::cache_len)).
    pub fn forward(&self, input: &[f64], cache: &mut [f64]) -> f64 {
        debug_assert_eq!(input.len(), self.sizes[0]);
        let last = self.num_layers() - 1;
        let mut off = 0;
        for layer in 0..last {
            let (w, b) = self.layer(layer);
            let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let (done, rest) = cache.split_at_mut(off);
            let prev: &[f64] = if layer == 0 { input } else { &done[off - 2 * n_in..off - n_in] };
            let (act, rest) = rest.split_at_mut(n_out);
            let sig = &mut rest[..n_out];
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let z = b[j] + row.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>();
                let (sp, s) = softplus_and_sigmoid(z);
                act[j] = sp;
                sig[j] = s;
            }
            off += 2 * n_out;
        }
        let (w, b) = self.layer(last);
        let n_in = self.sizes[last];
        let prev: &[f64] = if last == 0 { input } else { &cache[off - 2 * n_in..off - n_in] };
        b[0] + w.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>()
    }

    /// Backpropagates a unit seed from the output.
    ///
    /// Writes `d out / d input` into `grad_input` and, when `grad_params` is
    /// given, accumulates `scale * d out / d params` into it. `scratch_a` and
    /// `scratch_b` must hold at least [`max_width`](Self::max_width) values.
    pub(crate) fn backward(
        &self,
        input: &[f64],
        cache: &[f64],
        scale: f64,
        mut grad_params: Option<&mut [f64]>,
        grad_input: &mut [f64],
        scratch_a: &mut [f64],
        scratch_b: &mut [f64],
    ) {
        let last = self.num_layers() - 1;
        // Offsets of each hidden layer's cache block.
        let mut starts = [0usize; 16];
        assert!(self.num_layers() <= 16, "decoder depth limited to 16 layers");
        let mut off = 0;
        for (layer, s) in starts.iter_mut().enumerate().take(last) {
            *s = off;
            off += 2 * self.sizes[layer + 1];
        }

        // delta holds d out / d (activation of the current layer's input).
        let delta = &mut scratch_a[..self.sizes[last]];
        {
            let (w, _) = self.layer(last);
            let n_in = self.sizes[last];
            if let Some(g) = grad_params.as_deref_mut() {
                let start = self.offsets[last];
                let prev: &[f64] = if last == 0 { input } else { &cache[starts[last - 1]..starts[last - 1] + n_in] };
                for (gw, x) in g[start..start + n_in].iter_mut().zip(prev) {
                    *gw += scale * x;
                }
                g[start + n_in] += scale;
            }
            delta.copy_from_slice(&w[..n_in]);
        }

        let mut cur = scratch_a;
        let mut next = scratch_b;
        for layer in (0..last).rev() {
            let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let sig = &cache[starts[layer] + n_out..starts[layer] + 2 * n_out];
            // d out / d z
            for (d, s) in cur[..n_out].iter_mut().zip(sig) {
                *d *= s;
            }
            let (w, _) = self.layer(layer);
            let prev: &[f64] = if layer == 0 { input } else { &cache[starts[layer - 1]..starts[layer - 1] + n_in] };
            if let Some(g) = grad_params.as_deref_mut() {
                let start = self.offsets[layer];
                for j in 0..n_out {
                    let dz = scale * cur[j];
                    let row = &mut g[start + j * n_in..start + (j + 1) * n_in];
                    for (gw, x) in row.iter_mut().zip(prev) {
                        *gw += dz * x;
                    }
                }
                for (gb, d) in g[start + n_in * n_out..start + n_in * n_out + n_out].iter_mut().zip(&cur[..n_out]) {
                    *gb += scale * d;
                }
            }
            let out = &mut next[..n_in];
            out.fill(0.0);
            for j in 0..n_out {
                let dz = cur[j];
                for (o, wji) in out.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                    *o += dz * wji;
                }
            }
            core::mem::swap(&mut cur, &mut next);
        }
        grad_input.copy_from_slice(&cur[..self.sizes[0]]);
    }
}
