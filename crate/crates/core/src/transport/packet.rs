//! `FWT1` weight packets.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FWT1"
//! 4       2     format_version      u16 LE
//! 6       8     arch_hash           u64 LE
//! 14      4     global_epoch        u32 LE
//! 18      2     origin_institution  u16 LE
//! 20      1     carries_opt_state   0 none, 1 sgd velocity, 2 adam moments
//! 21      ..    tensors: rows u32 LE, cols u32 LE, rows·cols f64 LE
//! end-4   4     CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Tensor order: trainable parameters, batch-norm running statistics, then
//! optimizer buffers when carried (Adam appends its step count as a 1×1
//! tensor).

use crate::nn::{Matrix, ModelState, OptimizerKind, OptimizerState};

use super::TransportError;

pub const MAGIC: [u8; 4] = *b"FWT1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 21;
const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketMeta {
    pub format_version: u16,
    pub arch_hash: u64,
    pub global_epoch: u32,
    pub origin_institution: u16,
    /// Optimizer buffers carried in the payload, if any.
    pub opt_state: Option<OptimizerKind>,
    /// Number of tensors in the payload.
    pub tensors: usize,
}

fn opt_tag(kind: Option<OptimizerKind>) -> u8 {
    match kind {
        None => 0,
        Some(OptimizerKind::SgdMomentum) => 1,
        Some(OptimizerKind::Adam) => 2,
    }
}

fn put_tensor(buf: &mut Vec<u8>, m: &Matrix) {
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encodes a model; identical models give identical bytes.
pub fn serialize(
    model: &ModelState,
    global_epoch: u32,
    origin_institution: u16,
    carry_opt_state: bool,
) -> Result<Vec<u8>, TransportError> {
    if !model.is_finite() {
        return Err(TransportError::NonFinite);
    }
    let carried = carry_opt_state.then(|| model.optimizer().kind());
    let mut buf = Vec::with_capacity(1024);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.arch_hash().to_le_bytes());
    buf.extend_from_slice(&global_epoch.to_le_bytes());
    buf.extend_from_slice(&origin_institution.to_le_bytes());
    buf.push(opt_tag(carried));

    for m in model.parameters().into_iter().chain(model.running_stats()) {
        put_tensor(&mut buf, m);
    }
    if carried.is_some() {
        for m in model.optimizer().buffers() {
            put_tensor(&mut buf, m);
        }
        if let OptimizerState::Adam { step, .. } = model.optimizer() {
            put_tensor(&mut buf, &Matrix::filled(1, 1, *step as f64));
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            TransportError::Malformed(format!("tensor data overruns the payload at byte {}", self.pos)),
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Matrix, TransportError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let count = rows.checked_mul(cols).ok_or(TransportError::Malformed("tensor shape overflows".into()))?;
        let raw = self.take(count.checked_mul(8).ok_or(TransportError::Malformed("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        Matrix::from_vec(rows, cols, data).map_err(|_| TransportError::NonFinite)
    }
}

/// Checks length, magic, version and CRC; returns the header and the tensors.
fn open(bytes: &[u8]) -> Result<(PacketMeta, Vec<Matrix>), TransportError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(TransportError::Truncated { expected: HEADER_LEN + CRC_LEN, actual: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return Err(TransportError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    let body = &bytes[..bytes.len() - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(TransportError::Corrupt { stored, computed });
    }
    let format_version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if format_version != FORMAT_VERSION {
        return Err(TransportError::UnsupportedVersion(format_version));
    }
    let opt_state = match bytes[20] {
        0 => None,
        1 => Some(OptimizerKind::SgdMomentum),
        2 => Some(OptimizerKind::Adam),
        other => return Err(TransportError::Malformed(format!("unknown optimizer tag {other}"))),
    };
    let mut reader = Reader { bytes: body, pos: HEADER_LEN };
    let mut tensors = Vec::new();
    while reader.pos < body.len() {
        tensors.push(reader.tensor()?);
    }
    let meta = PacketMeta {
        format_version,
        arch_hash: u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")),
        global_epoch: u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes")),
        origin_institution: u16::from_le_bytes([bytes[18], bytes[19]]),
        opt_state,
        tensors: tensors.len(),
    };
    Ok((meta, tensors))
}

/// Verifies a packet and returns its header without needing a receiver model.
pub fn inspect(bytes: &[u8]) -> Result<PacketMeta, TransportError> {
    open(bytes).map(|(meta, _)| meta)
}

/// Rebuilds a model from a packet using `receiver` as the architecture
/// template. Without carried optimizer state the receiver's buffers are zeroed.
pub fn deserialize(bytes: &[u8], receiver: &ModelState) -> Result<(ModelState, PacketMeta), TransportError> {
    let (meta, tensors) = open(bytes)?;
    let expected = receiver.arch_hash();
    if meta.arch_hash != expected {
        return Err(TransportError::IncompatibleArchitecture { expected, found: meta.arch_hash });
    }
    let mut model = receiver.clone();
    let mut it = tensors.into_iter();
    let mut fill = |slot: &mut Matrix, what: &str| -> Result<(), TransportError> {
        let t = it.next().ok_or_else(|| TransportError::Malformed(format!("missing {what} tensor")))?;
        if t.shape() != slot.shape() {
            return Err(TransportError::Malformed(format!(
                "{what} tensor is {:?}, receiver expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    };
    for p in model.parameters_mut() {
        fill(p, "parameter")?;
    }
    for s in model.running_stats_mut() {
        fill(s, "running statistic")?;
    }
    match meta.opt_state {
        None => model.reset_optimizer(),
        Some(kind) => {
            if kind != model.optimizer().kind() {
                return Err(TransportError::Malformed(format!(
                    "packet carries {kind:?} state, receiver uses {:?}",
                    model.optimizer().kind()
                )));
            }
            let opt = model.optimizer_mut();
            for b in opt.buffers_mut() {
                fill(b, "optimizer")?;
            }
            if let OptimizerState::Adam { step, .. } = opt {
                let mut counter = Matrix::zeros(1, 1);
                fill(&mut counter, "adam step")?;
                let v = counter.get(0, 0);
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(TransportError::Malformed(format!("adam step {v} is not a count")));
                }
                *step = v as u64;
            }
        }
    }
    if it.next().is_some() {
        return Err(TransportError::Malformed("trailing tensors".into()));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, OptimizerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(v: f64) -> ModelState {
        // Softmax head alone has no parameters; an affine 1→1 into a sigmoid head has two.
        let mut m = ModelState::new(
            vec![LayerSpec::affine(1, 1), LayerSpec::sigmoid_head()],
            OptimizerKind::SgdMomentum,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for p in m.parameters_mut() {
            p.as_mut_slice().fill(v);
        }
        m
    }

    #[test]
    fn header_layout_is_fixed() {
        let m = scalar_model(1.0);
        let bytes = serialize(&m, 7, 3, false).unwrap();
        assert_eq!(&bytes[..4], b"FWT1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..14], &m.arch_hash().to_le_bytes());
        assert_eq!(&bytes[14..18], &[7, 0, 0, 0]);
        assert_eq!(&bytes[18..20], &[3, 0]);
        assert_eq!(bytes[20], 0);
        // First tensor: 1×1 weight equal to 1.0.
        assert_eq!(&bytes[21..29], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[29..37], &[0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F]);
        assert_eq!(bytes.len(), 21 + 2 * (8 + 8) + 4);
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn differing_weight_changes_bytes_and_crc() {
        let a = serialize(&scalar_model(1.0), 0, 0, true).unwrap();
        let b = serialize(&scalar_model(1.5), 0, 0, true).unwrap();
        assert_ne!(a, b);
        assert_ne!(a[a.len() - 4..], b[b.len() - 4..]);
    }

    #[test]
    fn refuses_non_finite() {
        let mut m = scalar_model(1.0);
        // Bypass Matrix validation through the mutable slice.
        m.parameters_mut()[0].as_mut_slice()[0] = f64::NAN;
        assert!(matches!(serialize(&m, 0, 0, false), Err(TransportError::NonFinite)));
    }

    #[test]
    fn error_kinds() {
        let m = scalar_model(0.25);
        let bytes = serialize(&m, 1, 0, true).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(deserialize(&bad_magic, &m), Err(TransportError::BadMagic(_))));

        let mut flipped = bytes.clone();
        flipped[30] ^= 0x01;
        assert!(matches!(deserialize(&flipped, &m), Err(TransportError::Corrupt { .. })));

        assert!(matches!(deserialize(&bytes[..10], &m), Err(TransportError::Truncated { .. })));

        let wider = ModelState::new(
            vec![LayerSpec::affine(1, 2), LayerSpec::relu(2), LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()],
            OptimizerKind::SgdMomentum,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(matches!(deserialize(&bytes, &wider), Err(TransportError::IncompatibleArchitecture { .. })));
    }

    #[test]
    fn optimizer_state_round_trips_or_resets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelState::new(
            vec![LayerSpec::affine(2, 3), LayerSpec::batchnorm(3), LayerSpec::relu(3), LayerSpec::affine(3, 1), LayerSpec::sigmoid_head()],
            OptimizerKind::Adam,
            &mut rng,
        )
        .unwrap();
        let batch = crate::nn::Batch::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 0.1]]).unwrap(), vec![1, 0, 1]).unwrap();
        for _ in 0..3 {
            m.train_step(&batch, &OptimizerConfig::adam(), 1e-2, &mut rng).unwrap();
        }
        let (back, meta) = deserialize(&serialize(&m, 3, 2, true).unwrap(), &m).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta.opt_state, Some(OptimizerKind::Adam));
        assert_eq!(meta.global_epoch, 3);
        assert_eq!(meta.origin_institution, 2);

        let (bare, meta) = deserialize(&serialize(&m, 3, 2, false).unwrap(), &m).unwrap();
        assert_eq!(meta.opt_state, None);
        assert_eq!(bare.parameters(), m.parameters());
        assert_eq!(bare.running_stats(), m.running_stats());
        let OptimizerState::Adam { step, first, .. } = bare.optimizer() else { unreachable!() };
        assert_eq!(*step, 0);
        assert!(first.iter().all(|f| f.as_slice().iter().all(|&v| v == 0.0)));
    }
}
