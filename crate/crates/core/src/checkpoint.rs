//! Binary record container and model checkpointing.
//!
//! One container format serves checkpoints, datasets, and exported integer
//! models: a `SQNT` magic, a format version, a 64-bit architecture
//! fingerprint, and named typed records (f32 / f64 / i32 tensors) with
//! little-endian payloads. Round trips are bit-exact; loading into a
//! network whose fingerprint differs from the stored one is refused.
//!
//! Scalars are stored as f64 regardless of the network's precision: f32 to
//! f64 widening is exact and the narrowing on load restores the original
//! f32 bits, so both precisions round-trip exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::GraphNetwork;
use crate::layers::Network;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SQNT";

/// Container format version, recorded in run manifests and refused on
/// mismatch at load time.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl RecordData {
    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::I32(v) => v.len(),
        }
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::F64(_) => 1,
            RecordData::I32(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

/// In-memory container; see the module docs for the byte layout.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub fingerprint: u64,
    pub records: Vec<Record>,
}

impl Container {
    pub fn new(fingerprint: u64) -> Self {
        Container { fingerprint, records: Vec::new() }
    }

    fn push(&mut self, name: &str, dims: &[usize], data: RecordData) -> Result<()> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::arg("container", format!("record {}: {:?} holds {} values", name, dims, data.len())));
        }
        if self.records.iter().any(|r| r.name == name) {
            return Err(Error::arg("container", format!("duplicate record name {}", name)));
        }
        self.records.push(Record { name: name.to_string(), dims: dims.to_vec(), data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, dims: &[usize], values: Vec<f64>) -> Result<()> {
        self.push(name, dims, RecordData::F64(values))
    }

    pub fn push_f32(&mut self, name: &str, dims: &[usize], values: Vec<f32>) -> Result<()> {
        self.push(name, dims, RecordData::F32(values))
    }

    pub fn push_i32(&mut self, name: &str, dims: &[usize], values: Vec<i32>) -> Result<()> {
        self.push(name, dims, RecordData::I32(values))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn f64_record(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(Record { dims, data: RecordData::F64(v), .. }) => Ok((dims, v)),
            Some(_) => Err(Error::BadData(format!("record {} is not f64", name))),
            None => Err(Error::BadData(format!("missing record {}", name))),
        }
    }

    pub fn i32_record(&self, name: &str) -> Result<(&[usize], &[i32])> {
        match self.get(name) {
            Some(Record { dims, data: RecordData::I32(v), .. }) => Ok((dims, v)),
            Some(_) => Err(Error::BadData(format!("record {} is not i32", name))),
            None => Err(Error::BadData(format!("missing record {}", name))),
        }
    }

    pub fn write_to(&self, w: &mut dyn Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for r in &self.records {
            let name = r.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[r.data.dtype_tag(), r.dims.len() as u8])?;
            for &d in &r.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match &r.data {
                RecordData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                RecordData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                RecordData::I32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadData(format!("bad magic {:?}", magic)));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::BadData(format!("unsupported container version {}", version)));
        }
        let fingerprint = read_u64(r)?;
        let count = read_u32(r)? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::BadData("record name is not UTF-8".into()))?;
            let mut tag_rank = [0u8; 2];
            r.read_exact(&mut tag_rank)?;
            let (tag, rank) = (tag_rank[0], tag_rank[1] as usize);
            if rank > 8 {
                return Err(Error::BadData(format!("record {}: rank {} too large", name, rank)));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(r)? as usize);
            }
            let numel: usize = dims.iter().product();
            let data = match tag {
                0 => {
                    let mut v = Vec::with_capacity(numel);
                    let mut b = [0u8; 4];
                    for _ in 0..numel {
                        r.read_exact(&mut b)?;
                        v.push(f32::from_le_bytes(b));
                    }
                    RecordData::F32(v)
                }
                1 => {
                    let mut v = Vec::with_capacity(numel);
                    let mut b = [0u8; 8];
                    for _ in 0..numel {
                        r.read_exact(&mut b)?;
                        v.push(f64::from_le_bytes(b));
                    }
                    RecordData::F64(v)
                }
                2 => {
                    let mut v = Vec::with_capacity(numel);
                    let mut b = [0u8; 4];
                    for _ in 0..numel {
                        r.read_exact(&mut b)?;
                        v.push(i32::from_le_bytes(b));
                    }
                    RecordData::I32(v)
                }
                t => return Err(Error::BadData(format!("record {}: unknown dtype tag {}", name, t))),
            };
            records.push(Record { name, dims, data });
        }
        Ok(Container { fingerprint, records })
    }

    /// Writes atomically: to a `.tmp` sibling first, then a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(Error::Io)?;
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::BadCheckpoint { path: path.display().to_string(), detail: e.to_string() })?;
        Container::read_from(&mut bytes.as_slice())
            .map_err(|e| Error::BadCheckpoint { path: path.display().to_string(), detail: e.to_string() })
    }
}

/// Whole-file atomic write (temp file in the same directory, then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u16(r: &mut dyn Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut dyn Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// ── network checkpoints ─────────────────────────────────────────────────

fn network_container<T: Scalar>(net: &Network<T>) -> Result<Container> {
    let mut c = Container::new(net.fingerprint());
    let mut err = None;
    net.visit_params(|key, t| {
        if err.is_some() {
            return;
        }
        let values: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
        if let Err(e) = c.push_f64(&key.name(), t.shape(), values) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    // Quantizer state that parameters alone cannot carry: calibration
    // flags, enabled flags, and whether weights were frozen on-grid.
    let mut aq_init = Vec::new();
    let mut wq_enabled = Vec::new();
    if let Some(q) = &net.input_quant {
        aq_init.push(q.initialized as i32);
    }
    for block in &net.blocks {
        for q in &block.aq {
            aq_init.push(q.initialized as i32);
        }
        for q in &block.wq {
            wq_enabled.push(q.enabled as i32);
        }
    }
    c.push_i32("meta.aq_init", &[aq_init.len()], aq_init)?;
    c.push_i32("meta.wq_enabled", &[wq_enabled.len()], wq_enabled)?;
    c.push_i32("meta.frozen", &[1], vec![net.is_frozen() as i32])?;
    Ok(c)
}

pub fn save_network<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    network_container(net)?.save(path)
}

/// Loads parameters into an already-built network of the same
/// architecture. Every stored parameter record must be consumed and every
/// network parameter must be present.
pub fn load_network<T: Scalar>(net: &mut Network<T>, path: &Path) -> Result<()> {
    let c = Container::load(path)?;
    if c.fingerprint != net.fingerprint() {
        return Err(Error::FingerprintMismatch { expected: net.fingerprint(), found: c.fingerprint });
    }
    let restore = |net: &mut Network<T>| -> Result<usize> {
        let mut keys = Vec::new();
        net.visit_params(|key, _| keys.push(key));
        let n = keys.len();
        for key in keys {
            let (dims, values) = c.f64_record(&key.name())?;
            let target = net.param_mut(key).expect("visited key is addressable");
            if dims != target.shape() {
                return Err(Error::BadData(format!("record {}: shape {:?} vs {:?}", key.name(), dims, target.shape())));
            }
            for (dst, src) in target.data_mut().iter_mut().zip(values) {
                *dst = T::of(*src);
            }
        }
        Ok(n)
    };
    let consumed = restore(net).map_err(|e| Error::BadCheckpoint { path: path.display().to_string(), detail: e.to_string() })?;
    let param_records = c.records.iter().filter(|r| !r.name.starts_with("meta.")).count();
    if param_records != consumed {
        return Err(Error::BadCheckpoint {
            path: path.display().to_string(),
            detail: format!("{} parameter records, network has {}", param_records, consumed),
        });
    }
    let (_, aq_init) = c.i32_record("meta.aq_init")?;
    let (_, wq_enabled) = c.i32_record("meta.wq_enabled")?;
    let (_, frozen) = c.i32_record("meta.frozen")?;
    let mut it = aq_init.iter();
    let mut wt = wq_enabled.iter();
    let bad = || Error::BadCheckpoint { path: path.display().to_string(), detail: "quantizer flag count mismatch".into() };
    if let Some(q) = &mut net.input_quant {
        q.initialized = *it.next().ok_or_else(bad)? != 0;
    }
    for block in &mut net.blocks {
        for q in &mut block.aq {
            q.initialized = *it.next().ok_or_else(bad)? != 0;
        }
        for q in &mut block.wq {
            q.enabled = *wt.next().ok_or_else(bad)? != 0;
        }
    }
    if it.next().is_some() || wt.next().is_some() {
        return Err(bad());
    }
    if frozen[0] != 0 {
        net.mark_frozen();
    }
    Ok(())
}

// ── graph network checkpoints ───────────────────────────────────────────

fn graph_container<T: Scalar>(net: &GraphNetwork<T>) -> Result<Container> {
    let mut c = Container::new(net.fingerprint());
    let mut err = None;
    net.visit_params(|key, t| {
        if err.is_some() {
            return;
        }
        let values: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
        if let Err(e) = c.push_f64(&key.name(), t.shape(), values) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let (aq_init, wq_enabled) = net.quantizer_flags();
    c.push_i32("meta.aq_init", &[aq_init.len()], aq_init)?;
    c.push_i32("meta.wq_enabled", &[wq_enabled.len()], wq_enabled)?;
    c.push_i32("meta.frozen", &[1], vec![net.is_frozen() as i32])?;
    Ok(c)
}

pub fn save_graph_network<T: Scalar>(net: &GraphNetwork<T>, path: &Path) -> Result<()> {
    graph_container(net)?.save(path)
}

pub fn load_graph_network<T: Scalar>(net: &mut GraphNetwork<T>, path: &Path) -> Result<()> {
    let c = Container::load(path)?;
    if c.fingerprint != net.fingerprint() {
        return Err(Error::FingerprintMismatch { expected: net.fingerprint(), found: c.fingerprint });
    }
    let restore = |net: &mut GraphNetwork<T>| -> Result<usize> {
        let mut keys = Vec::new();
        net.visit_params(|key, _| keys.push(key));
        let n = keys.len();
        for key in keys {
            let (dims, values) = c.f64_record(&key.name())?;
            let target = net.param_mut(key).expect("visited key is addressable");
            if dims != target.shape() {
                return Err(Error::BadData(format!("record {}: shape {:?} vs {:?}", key.name(), dims, target.shape())));
            }
            for (dst, src) in target.data_mut().iter_mut().zip(values) {
                *dst = T::of(*src);
            }
        }
        Ok(n)
    };
    let consumed = restore(net).map_err(|e| Error::BadCheckpoint { path: path.display().to_string(), detail: e.to_string() })?;
    let param_records = c.records.iter().filter(|r| !r.name.starts_with("meta.")).count();
    if param_records != consumed {
        return Err(Error::BadCheckpoint {
            path: path.display().to_string(),
            detail: format!("{} parameter records, network has {}", param_records, consumed),
        });
    }
    let (_, aq_init) = c.i32_record("meta.aq_init")?;
    let (_, wq_enabled) = c.i32_record("meta.wq_enabled")?;
    let (_, frozen) = c.i32_record("meta.frozen")?;
    net.restore_quantizer_flags(aq_init, wq_enabled)
        .map_err(|e| Error::BadCheckpoint { path: path.display().to_string(), detail: e.to_string() })?;
    if frozen[0] != 0 {
        net.mark_frozen();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_network, BlockKind, BlockSpec};
    use crate::tensor::Tensor;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let mut c = Container::new(0xdead_beef_cafe_f00d);
        c.push_f64("a", &[2, 2], vec![1.5, -0.25, 1e-300, f64::MIN_POSITIVE]).unwrap();
        c.push_f32("b", &[3], vec![0.1, -2.5e-30, 3.0]).unwrap();
        c.push_i32("c", &[2], vec![-7, 2_000_000_000]).unwrap();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let back = Container::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.fingerprint, c.fingerprint);
        assert_eq!(back.records, c.records);
    }

    #[test]
    fn container_rejects_garbage_and_duplicates() {
        assert!(Container::read_from(&mut &b"NOPE"[..]).is_err());
        let mut truncated = Vec::new();
        let mut c = Container::new(1);
        c.push_f64("x", &[4], vec![0.0; 4]).unwrap();
        c.write_to(&mut truncated).unwrap();
        truncated.truncate(truncated.len() - 3);
        assert!(Container::read_from(&mut truncated.as_slice()).is_err());
        assert!(c.push_f64("x", &[1], vec![1.0]).is_err());
        assert!(c.push_f64("y", &[3], vec![1.0]).is_err()); // shape/len mismatch
    }

    fn quantized_specs() -> Vec<BlockSpec> {
        vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(4, 4).with_tv(0.05),
            BlockSpec::new(BlockKind::PlainRes, 4, 4).with_quant(4, 4),
            BlockSpec::new(BlockKind::Classifier, 4, 3),
        ]
    }

    #[test]
    fn network_checkpoint_round_trip() {
        use crate::autograd::Tape;
        use crate::layers::QuantMode;
        let dir = std::env::temp_dir().join(format!("sqnt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.sqnt");

        let mut net = build_network::<f64>(&quantized_specs(), 33).unwrap();
        // Calibrate activation quantizers so the flags are interesting.
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 8, 8], 0.7));
        net.forward(&tape, x, QuantMode::FULL).unwrap();
        net.freeze_quantized_weights().unwrap();
        save_network(&net, &path).unwrap();

        let mut twin = build_network::<f64>(&quantized_specs(), 999).unwrap();
        load_network(&mut twin, &path).unwrap();
        let mut original = Vec::new();
        net.visit_params(|k, t| original.push((k, t.clone())));
        let mut restored = Vec::new();
        twin.visit_params(|k, t| restored.push((k, t.clone())));
        assert_eq!(original, restored);
        assert!(twin.is_frozen());
        assert!(twin.blocks[1].aq.iter().all(|q| q.initialized));
        assert!(twin.blocks[1].wq.iter().all(|q| !q.enabled));

        // A different architecture refuses the file.
        let other = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4),
            BlockSpec::new(BlockKind::Classifier, 4, 3),
        ];
        let mut wrong = build_network::<f64>(&other, 0).unwrap();
        assert!(matches!(load_network(&mut wrong, &path), Err(Error::FingerprintMismatch { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn graph_checkpoint_round_trip() {
        use crate::graph::{build_graph_network, GcnKind, GcnSpec, Graph};
        use rand::SeedableRng;
        let dir = std::env::temp_dir().join(format!("sqnt-gtest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gnet.sqnt");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let feats = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        let g = Graph::new(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], feats).unwrap();
        let spec = GcnSpec {
            kind: GcnKind::Nonsym,
            layers: 2,
            features_in: 3,
            width: 4,
            classes: 2,
            h: 0.1,
            quant: Some(crate::layers::QuantSpec { bits_w: 4, bits_a: 4 }),
        };
        let net = build_graph_network(&spec, &g, 5).unwrap();
        save_graph_network(&net, &path).unwrap();
        let mut twin = build_graph_network(&spec, &g, 77).unwrap();
        load_graph_network(&mut twin, &path).unwrap();
        let mut original = Vec::new();
        net.visit_params(|k, t| original.push((k, t.clone())));
        let mut restored = Vec::new();
        twin.visit_params(|k, t| restored.push((k, t.clone())));
        assert_eq!(original, restored);
        std::fs::remove_dir_all(&dir).ok();
    }
}
