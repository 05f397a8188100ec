//! Fixed binary checkpoint format for adapters.
//!
//! Layout, all multi-byte values little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "KLORAv01"
//! 8       1     adapter kind: 0 = lora, 1 = krona, 2 = kronlora
//! 9       28    u32 x 7: d_a1, d_a2, d_b1, d_b2, rank, d_in, d_out
//! 37      16    f64 x 2: alpha, dropout_p
//! 53      4     u32 tensor count
//! 57      ...   tensors
//! ```
//!
//! Each tensor is `u32 name_len`, the UTF-8 name, `u32 rows`, `u32 cols`,
//! then `rows * cols` f64 values in row-major order. Tensors appear in the
//! adapter's canonical parameter order and their names and shapes are
//! checked on load against the plan reconstructed from the header.
//!
//! The trivial-factor warning is not stored; it is a pure function of the
//! dimensions and is recomputed on load. A wrong magic or kind byte is a
//! [`Error::Format`]; anything that parses as the format but is internally
//! inconsistent or truncated is [`Error::Corrupt`].

use crate::adapters::{Adapter, AdapterParams};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::plan::{AdapterKind, AdapterPlan};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"KLORAv01";
/// Bytes before the first tensor record.
pub const HEADER_BYTES: u64 = 57;
/// Per-tensor framing overhead in addition to the name and the payload.
pub const TENSOR_OVERHEAD_BYTES: u64 = 12;

fn kind_code(kind: AdapterKind) -> u8 {
    match kind {
        AdapterKind::Lora => 0,
        AdapterKind::KronA => 1,
        AdapterKind::KronLora => 2,
    }
}

fn kind_from_code(code: u8) -> Result<AdapterKind> {
    match code {
        0 => Ok(AdapterKind::Lora),
        1 => Ok(AdapterKind::KronA),
        2 => Ok(AdapterKind::KronLora),
        other => Err(Error::Format(format!("unknown adapter kind code {other}"))),
    }
}

/// Tensor names and shapes a plan serializes, in file order.
fn tensor_layout(plan: &AdapterPlan) -> Vec<(&'static str, usize, usize)> {
    match plan.kind {
        AdapterKind::KronLora => vec![
            ("A", plan.d_a2, plan.d_a1),
            ("B1", plan.d_b2, plan.rank),
            ("B2", plan.rank, plan.d_b1),
        ],
        AdapterKind::KronA => vec![
            ("A", plan.d_a2, plan.d_a1),
            ("B", plan.d_b2, plan.d_b1),
        ],
        AdapterKind::Lora => vec![
            ("down", plan.rank, plan.d_in),
            ("up", plan.d_out, plan.rank),
        ],
    }
}

/// Exact on-disk size of a checkpoint for this plan, in bytes.
pub fn file_size_for_plan(plan: &AdapterPlan) -> u64 {
    HEADER_BYTES
        + tensor_layout(plan)
            .iter()
            .map(|(name, rows, cols)| {
                TENSOR_OVERHEAD_BYTES + name.len() as u64 + 8 * (rows * cols) as u64
            })
            .sum::<u64>()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Format(format!("value {v} exceeds the 32-bit header field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize `adapter` into the checkpoint byte layout.
pub fn to_bytes(adapter: &Adapter) -> Result<Vec<u8>> {
    let plan = adapter.plan();
    let mut buf = Vec::with_capacity(file_size_for_plan(plan) as usize);
    buf.extend_from_slice(MAGIC);
    buf.push(kind_code(plan.kind));
    for dim in [
        plan.d_a1, plan.d_a2, plan.d_b1, plan.d_b2, plan.rank, plan.d_in, plan.d_out,
    ] {
        push_u32(&mut buf, dim)?;
    }
    buf.extend_from_slice(&plan.alpha.to_le_bytes());
    buf.extend_from_slice(&plan.dropout_p.to_le_bytes());
    let tensors = adapter.trainable_parameters();
    push_u32(&mut buf, tensors.len())?;
    debug_assert_eq!(
        tensors.iter().map(|(n, _)| *n).collect::<Vec<_>>(),
        tensor_layout(plan).iter().map(|(n, _, _)| *n).collect::<Vec<_>>()
    );
    for (name, m) in tensors {
        push_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, m.rows())?;
        push_u32(&mut buf, m.cols())?;
        for &v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(buf.len() as u64, file_size_for_plan(plan));
    Ok(buf)
}

/// Write `adapter` to `path`, replacing any existing file. Returns the
/// number of bytes written, which always equals
/// [`file_size_for_plan`]`(adapter.plan())`.
pub fn save(adapter: &Adapter, path: &Path) -> Result<u64> {
    let buf = to_bytes(adapter)?;
    std::fs::write(path, &buf).map_err(|e| io_err(path, e))?;
    Ok(buf.len() as u64)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parse an adapter from checkpoint bytes.
pub fn from_bytes(buf: &[u8]) -> Result<Adapter> {
    if buf.len() < MAGIC.len() {
        return Err(Error::Format(format!(
            "file has {} bytes, too short to hold the magic",
            buf.len()
        )));
    }
    if &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            &buf[..MAGIC.len()],
            MAGIC
        )));
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
    };
    let kind = kind_from_code(r.take(1, "adapter kind")?[0])?;
    let mut dims = [0usize; 7];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.u32(&format!("dimension {i}"))? as usize;
    }
    let [d_a1, d_a2, d_b1, d_b2, rank, d_in, d_out] = dims;
    let alpha = r.f64("alpha")?;
    let dropout_p = r.f64("dropout probability")?;
    // The warning flag is derived, not stored: recompute the pure Kronecker
    // planner's degeneracy condition from the dimensions.
    let trivial_factor_warning = kind == AdapterKind::KronA
        && ((d_in > 1 && (d_a1 == 1 || d_b1 == 1)) || (d_out > 1 && (d_a2 == 1 || d_b2 == 1)));
    let plan = AdapterPlan {
        kind,
        d_in,
        d_out,
        d_a1,
        d_a2,
        d_b1,
        d_b2,
        rank,
        alpha,
        dropout_p,
        trivial_factor_warning,
    };
    plan.validate()
        .map_err(|e| Error::Corrupt(format!("header fails plan validation: {e}")))?;

    let layout = tensor_layout(&plan);
    let tensor_count = r.u32("tensor count")? as usize;
    if tensor_count != layout.len() {
        return Err(Error::Corrupt(format!(
            "{} tensors recorded, plan kind {} needs {}",
            tensor_count,
            kind.as_str(),
            layout.len()
        )));
    }
    let mut tensors: Vec<DenseMatrix> = Vec::with_capacity(layout.len());
    for (index, (want_name, want_rows, want_cols)) in layout.iter().enumerate() {
        let name_len = r.u32("tensor name length")? as usize;
        if name_len > 64 {
            return Err(Error::Corrupt(format!(
                "implausible tensor name length {name_len}"
            )));
        }
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corrupt(format!("tensor {index} name is not UTF-8")))?;
        if name != *want_name {
            return Err(Error::Corrupt(format!(
                "tensor {index} is named {name:?}, expected {want_name:?}"
            )));
        }
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        if rows != *want_rows || cols != *want_cols {
            return Err(Error::Corrupt(format!(
                "tensor {name} is {rows}x{cols}, plan requires {want_rows}x{want_cols}"
            )));
        }
        let payload = r.take(8 * rows * cols, "tensor payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(DenseMatrix::from_vec(rows, cols, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - r.pos
        )));
    }

    let mut it = tensors.into_iter();
    let params = match kind {
        AdapterKind::KronLora => AdapterParams::KronLora {
            a: it.next().unwrap(),
            b1: it.next().unwrap(),
            b2: it.next().unwrap(),
        },
        AdapterKind::KronA => AdapterParams::KronA {
            a: it.next().unwrap(),
            b: it.next().unwrap(),
        },
        AdapterKind::Lora => AdapterParams::Lora {
            down: it.next().unwrap(),
            up: it.next().unwrap(),
        },
    };
    Ok(Adapter::from_parts(plan, params))
}

/// Read an adapter checkpoint from `path`.
pub fn load(path: &Path) -> Result<Adapter> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_adapter;
    use crate::plan::{plan_kron_lora, plan_krona, plan_lora, LayerSpec, SlicePolicy};
    use crate::rng::Rng;

    fn sample_adapters() -> Vec<Adapter> {
        let mut rng = Rng::new(99);
        let spec = LayerSpec::new(8, 12).unwrap();
        let plans = vec![
            plan_kron_lora(&spec, 3, SlicePolicy::FixedA2(4))
                .unwrap()
                .with_alpha(17.5)
                .with_dropout(0.25),
            plan_krona(&spec).with_alpha(2.0),
            plan_lora(&spec, 3).unwrap().with_dropout(0.0),
        ];
        plans
            .into_iter()
            .map(|p| {
                let mut a = init_adapter(&p, &mut rng).unwrap();
                a.randomize(&mut rng);
                a
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        for (i, adapter) in sample_adapters().into_iter().enumerate() {
            let path = dir.path().join(format!("a{i}.ckpt"));
            let written = save(&adapter, &path).unwrap();
            assert_eq!(written, file_size_for_plan(adapter.plan()));
            let loaded = load(&path).unwrap();
            assert_eq!(loaded.plan(), adapter.plan());
            for ((n1, m1), (n2, m2)) in adapter
                .trainable_parameters()
                .iter()
                .zip(loaded.trainable_parameters().iter())
            {
                assert_eq!(n1, n2);
                assert!(m1.bit_eq(m2), "{n1} changed across the round trip");
            }
            assert!(!loaded.is_training());
        }
    }

    #[test]
    fn on_disk_size_matches_the_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        for (i, adapter) in sample_adapters().into_iter().enumerate() {
            let path = dir.path().join(format!("s{i}.ckpt"));
            save(&adapter, &path).unwrap();
            let on_disk = std::fs::metadata(&path).unwrap().len();
            assert_eq!(on_disk, file_size_for_plan(adapter.plan()));
        }
    }

    #[test]
    fn payload_bytes_mirror_the_parameter_ratio() {
        // 768x768 at rank 8: hybrid payload 8 * 4616 bytes vs low-rank
        // 8 * 12288; the size ratio tracks the parameter ratio.
        let spec = LayerSpec::new(768, 768).unwrap();
        let kron = plan_kron_lora(&spec, 8, SlicePolicy::FixedA2(4)).unwrap();
        let lora = plan_lora(&spec, 8).unwrap();
        let payload = |p: &AdapterPlan| 8 * crate::plan::param_count(p) as u64;
        assert_eq!(payload(&kron), 36_928);
        assert_eq!(payload(&lora), 98_304);
        let ratio = file_size_for_plan(&lora) as f64 / file_size_for_plan(&kron) as f64;
        assert!((ratio - 98_304.0 / 36_928.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn tiny_plan_size_by_hand() {
        // Low-rank, r = 1, 2 -> 1: header 57, "down" tensor 12 + 4 + 16,
        // "up" tensor 12 + 2 + 8.
        let spec = LayerSpec::new(2, 1).unwrap();
        let plan = plan_lora(&spec, 1).unwrap();
        assert_eq!(file_size_for_plan(&plan), 57 + 32 + 22);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let adapter = &sample_adapters()[0];
        let mut buf = to_bytes(adapter).unwrap();
        buf[0] = b'X';
        assert!(matches!(from_bytes(&buf).unwrap_err(), Error::Format(_)));
        assert!(matches!(from_bytes(b"KLO").unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn unknown_kind_code_is_a_format_error() {
        let adapter = &sample_adapters()[0];
        let mut buf = to_bytes(adapter).unwrap();
        buf[8] = 7;
        assert!(matches!(from_bytes(&buf).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn truncation_anywhere_is_corrupt() {
        let adapter = &sample_adapters()[0];
        let buf = to_bytes(adapter).unwrap();
        // Mid-header, end of header, mid-name, mid-payload, one short.
        for cut in [20, 57, 60, buf.len() - 100, buf.len() - 1] {
            let err = from_bytes(&buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_)), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn trailing_bytes_are_corrupt() {
        let adapter = &sample_adapters()[0];
        let mut buf = to_bytes(adapter).unwrap();
        buf.push(0);
        assert!(matches!(from_bytes(&buf).unwrap_err(), Error::Corrupt(_)));
    }

    #[test]
    fn inconsistent_header_dimensions_are_corrupt() {
        let adapter = &sample_adapters()[0];
        let mut buf = to_bytes(adapter).unwrap();
        // d_a1 lives at offset 9; breaking it violates d_a1 * d_b1 == d_in.
        buf[9..13].copy_from_slice(&7u32.to_le_bytes());
        let err = from_bytes(&buf).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
    }

    #[test]
    fn renamed_or_reshaped_tensor_is_corrupt() {
        let adapter = &sample_adapters()[0];
        let base = to_bytes(adapter).unwrap();
        // First tensor record: name_len at 57, name "A" at 61, rows at 62.
        let mut renamed = base.clone();
        renamed[61] = b'Z';
        assert!(matches!(from_bytes(&renamed).unwrap_err(), Error::Corrupt(_)));
        let mut reshaped = base;
        reshaped[62..66].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(from_bytes(&reshaped).unwrap_err(), Error::Corrupt(_)));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(&dir.path().join("absent.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn trivial_factor_warning_is_recomputed_on_load() {
        let mut rng = Rng::new(7);
        // 13 is prime: the pure Kronecker planner degrades to 1 x 13.
        let prime = plan_krona(&LayerSpec::new(13, 13).unwrap());
        assert!(prime.trivial_factor_warning);
        let adapter = init_adapter(&prime, &mut rng).unwrap();
        let loaded = from_bytes(&to_bytes(&adapter).unwrap()).unwrap();
        assert!(loaded.plan().trivial_factor_warning);

        let healthy = plan_krona(&LayerSpec::new(8, 12).unwrap());
        assert!(!healthy.trivial_factor_warning);
        let adapter = init_adapter(&healthy, &mut rng).unwrap();
        let loaded = from_bytes(&to_bytes(&adapter).unwrap()).unwrap();
        assert!(!loaded.plan().trivial_factor_warning);
    }

    #[test]
    fn save_overwrites_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("same.ckpt");
        let adapters = sample_adapters();
        save(&adapters[0], &path).unwrap();
        save(&adapters[2], &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.plan(), adapters[2].plan());
    }
}
