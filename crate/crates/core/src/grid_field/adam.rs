use alloc::vec::Vec;

use super::NeuralMap;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn is_valid(&self) -> bool {
        self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
    }
}

/// Global step counter shared by all parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdamState {
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
struct LevelGradient {
    dense: Vec<f64>,
    touched_flag: Vec<bool>,
    touched: Vec<u32>,
}

/// Sparse gradient store: decoder gradients plus one entry per grid vertex
/// that received a contribution.
#[derive(Debug, Clone, Default)]
pub struct GradientStore {
    dim: usize,
    pub(crate) decoder: Vec<f64>,
    pub(crate) has_decoder: bool,
    levels: Vec<LevelGradient>,
}

impl GradientStore {
    pub fn new(map: &NeuralMap) -> Self {
        let mut g = GradientStore::default();
        g.prepare(map);
        g
    }

    /// Sizes buffers to the current map; keeps accumulated entries.
    pub(crate) fn prepare(&mut self, map: &NeuralMap) {
        let dim = map.grid.dim();
        if self.dim != dim || self.levels.len() != map.grid.num_levels() {
            self.dim = dim;
            self.levels = (0..map.grid.num_levels()).map(|_| LevelGradient::default()).collect();
        }
        let np = map.decoder.params().len();
        if self.decoder.len() != np {
            self.decoder = alloc::vec![0.0; np];
        }
        for (lg, lv) in self.levels.iter_mut().zip(map.grid.levels()) {
            let n = lv.vertex_count();
            if lg.touched_flag.len() < n {
                lg.touched_flag.resize(n, false);
                lg.dense.resize(n * dim, 0.0);
            }
        }
    }

    /// Drops all entries.
    pub fn clear(&mut self) {
        self.decoder.fill(0.0);
        self.has_decoder = false;
        let dim = self.dim;
        for lg in &mut self.levels {
            for &id in &lg.touched {
                lg.touched_flag[id as usize] = false;
                lg.dense[id as usize * dim..(id as usize + 1) * dim].fill(0.0);
            }
            lg.touched.clear();
        }
    }

    #[inline]
    pub(crate) fn add_vertex(&mut self, level: usize, id: u32, scale: f64, d_feat: &[f64]) {
        let dim = self.dim;
        let lg = &mut self.levels[level];
        let i = id as usize;
        if !lg.touched_flag[i] {
            lg.touched_flag[i] = true;
            lg.touched.push(id);
        }
        for (g, d) in lg.dense[i * dim..(i + 1) * dim].iter_mut().zip(d_feat) {
            *g += scale * d;
        }
    }

    /// Decoder gradient, if any backward pass contributed.
    pub fn decoder(&self) -> Option<&[f64]> {
        self.has_decoder.then_some(&self.decoder[..])
    }

    /// Vertices of `level` with a gradient entry, in first-touch order.
    pub fn touched(&self, level: usize) -> &[u32] {
        self.levels.get(level).map_or(&[], |l| &l.touched)
    }

    pub fn vertex(&self, level: usize, id: u32) -> Option<&[f64]> {
        let lg = self.levels.get(level)?;
        let i = id as usize;
        (i < lg.touched_flag.len() && lg.touched_flag[i]).then(|| &lg.dense[i * self.dim..(i + 1) * self.dim])
    }

    pub fn is_empty(&self) -> bool {
        !self.has_decoder && self.levels.iter().all(|l| l.touched.is_empty())
    }

    /// Adds a decoder gradient directly (used by tests and custom losses).
    pub fn add_decoder(&mut self, grad: &[f64]) {
        assert_eq!(grad.len(), self.decoder.len());
        self.has_decoder = true;
        for (g, d) in self.decoder.iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Adds a gradient for one grid vertex directly.
    pub fn add_grid(&mut self, level: usize, id: u32, grad: &[f64]) {
        self.add_vertex(level, id, 1.0, grad);
    }
}

#[inline]
fn update(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], cfg: &AdamConfig, c1: f64, c2: f64) {
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= cfg.lr * m_hat / (crate::math::sqrt(v_hat) + cfg.eps);
    }
}

/// One bias-corrected Adam step over every parameter that has a gradient
/// entry. Grid moments are created lazily on a vertex's first gradient.
pub fn adam_step(grads: &GradientStore, map: &mut NeuralMap, cfg: &AdamConfig, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    if let Some(g) = grads.decoder() {
        let (p, m, v) = map.decoder.split_for_update();
        update(p, m, v, g, cfg, c1, c2);
    }
    for l in 0..map.grid.num_levels() {
        for &id in grads.touched(l) {
            let g = grads.vertex(l, id).expect("touched vertex has an entry");
            let (p, m, v) = map.grid.level_mut(l).adam_slices(id);
            update(p, m, v, g, cfg, c1, c2);
        }
    }
}
