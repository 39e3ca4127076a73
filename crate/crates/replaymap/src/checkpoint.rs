//! Versioned binary map checkpoint.
//!
//! Layout (little endian): magic, format version, the training
//! configuration as JSON, then optimizer counters, grid levels (vertex
//! coordinates, features, optional Adam moments), decoder, perturbation
//! Fisher state and the replay pool.

use std::fs;
use std::io;
use std::path::Path;

use replaymap_core::grid_field::{AdamState, Decoder, FeatureGrid, NeuralMap};
use replaymap_core::replay_pool::ReplayPool;
use replaymap_core::trainer::{MapState, TrainConfig};
use replaymap_core::uncertainty::PerturbField;
use replaymap_core::{TsdfSample, Vec3};

pub const MAGIC: &[u8; 8] = b"RMAPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a map checkpoint")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {FORMAT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn vec3(&mut self, v: Vec3) {
        self.f64s(&[v.x, v.y, v.z]);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.arr::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn i32(&mut self) -> Result<i32, CheckpointError> {
        Ok(i32::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    /// A length prefix, bounded by the bytes left so corrupt input cannot
    /// trigger huge allocations.
    fn len(&mut self, min_item_bytes: usize) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(min_item_bytes.max(1) as u64) > left {
            return Err(corrupt("length prefix exceeds file size"));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn vec3(&mut self) -> Result<Vec3, CheckpointError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.len(1)?;
        self.take(n)
    }
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

pub fn encode(cfg: &TrainConfig, state: &MapState) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    w.u64(state.adam.step);
    w.u64(state.frames_processed);

    let grid = &state.map.grid;
    w.len(grid.num_levels());
    w.len(grid.dim());
    for lv in grid.levels() {
        w.f64(lv.voxel_size());
        w.len(lv.vertex_count());
        for (id, c) in lv.coords().iter().enumerate() {
            c.iter().for_each(|&x| w.i32(x));
            w.f64s(lv.feature(id as u32));
            match lv.moments(id as u32) {
                Some((m, v)) => {
                    w.u8(1);
                    w.f64s(m);
                    w.f64s(v);
                }
                None => w.u8(0),
            }
        }
    }

    let dec = &state.map.decoder;
    w.len(dec.sizes().len());
    dec.sizes().iter().for_each(|&s| w.len(s));
    w.f64s(dec.params());
    let (m, v) = dec.moments();
    w.f64s(m);
    w.f64s(v);

    w.f64(state.field.cell_size());
    w.f64(state.field.prior_std());
    w.len(state.field.vertex_count());
    for (c, f) in state.field.coords().iter().zip(state.field.fishers()) {
        c.iter().for_each(|&x| w.i32(x));
        w.vec3(*f);
    }

    w.u64(state.pool.next_seq());
    w.len(state.pool.len());
    for s in state.pool.samples() {
        w.vec3(s.position);
        w.f64s(&[s.label, s.ray_len, s.cos_incidence, s.mse]);
        w.u64(s.frame_id);
        w.u64(s.seq);
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<(TrainConfig, MapState), CheckpointError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let cfg: TrainConfig = serde_json::from_slice(r.bytes()?).map_err(|e| corrupt(format!("config: {e}")))?;
    cfg.validate().map_err(|e| corrupt(format!("config: {e}")))?;
    let mut state = MapState::new(&cfg);
    state.adam = AdamState { step: r.u64()? };
    state.frames_processed = r.u64()?;

    let levels = r.len(1)?;
    let dim = r.len(1)?;
    if levels != cfg.map.voxel_sizes.len() || dim != cfg.map.feature_dim {
        return Err(corrupt("grid shape disagrees with its configuration"));
    }
    let mut grid = FeatureGrid::new(&cfg.map.voxel_sizes, dim);
    for l in 0..levels {
        let size = r.f64()?;
        if size != cfg.map.voxel_sizes[l] {
            return Err(corrupt("voxel size disagrees with its configuration"));
        }
        let n = r.len(12 + 8 * dim + 1)?;
        let lv = grid.level_mut(l);
        for _ in 0..n {
            let c = [r.i32()?, r.i32()?, r.i32()?];
            let f = r.f64s(dim)?;
            let moments = match r.u8()? {
                0 => None,
                1 => Some((r.f64s(dim)?, r.f64s(dim)?)),
                _ => return Err(corrupt("bad moment flag")),
            };
            if lv.vertex_id(c).is_some() {
                return Err(corrupt("duplicate grid vertex"));
            }
            lv.restore_vertex(c, &f, moments.as_ref().map(|(m, v)| (&m[..], &v[..])));
        }
    }

    let n_sizes = r.len(8)?;
    let sizes: Vec<usize> = (0..n_sizes).map(|_| r.len(0)).collect::<Result<_, _>>()?;
    if sizes.len() < 2 || sizes[0] != dim || sizes[1..sizes.len() - 1] != cfg.map.hidden[..] || sizes[sizes.len() - 1] != 1 {
        return Err(corrupt("decoder shape disagrees with its configuration"));
    }
    let mut dec = Decoder::zeros(dim, &cfg.map.hidden);
    let np = dec.params().len();
    let params = r.f64s(np)?;
    dec.params_mut().copy_from_slice(&params);
    let (m, v) = (r.f64s(np)?, r.f64s(np)?);
    dec.set_moments(&m, &v);
    state.map = NeuralMap::from_parts(grid, dec);

    let (cell, prior) = (r.f64()?, r.f64()?);
    if !(cell > 0.0 && prior > 0.0) {
        return Err(corrupt("bad perturbation field parameters"));
    }
    let mut field = PerturbField::new(cell, prior);
    for _ in 0..r.len(36)? {
        let c = [r.i32()?, r.i32()?, r.i32()?];
        field.restore_vertex(c, r.vec3()?);
    }
    state.field = field;

    let next_seq = r.u64()?;
    let n = r.len(72)?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(TsdfSample {
            position: r.vec3()?,
            label: r.f64()?,
            ray_len: r.f64()?,
            cos_incidence: r.f64()?,
            mse: r.f64()?,
            frame_id: r.u64()?,
            seq: r.u64()?,
        });
    }
    let mut pool = ReplayPool::new(&cfg.pool);
    pool.restore(samples, next_seq);
    state.pool = pool;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((cfg, state))
}

pub fn save(path: &Path, cfg: &TrainConfig, state: &MapState) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(cfg, state))?;
    fs::rename(tmp, path)
}

pub fn load(path: &Path) -> Result<(TrainConfig, MapState), CheckpointError> {
    decode(&fs::read(path)?)
}
