//! On-disk formats.
//!
//! Embedding container (little-endian):
//!
//! ```text
//! "CDPE" | u32 version = 1 | u64 num_samples | u32 dim
//! num_samples × u64 id
//! num_samples × dim × f32
//! ```
//!
//! Labels are CSV `id,label`, splits are CSV `id,partition`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{EmbeddingSet, GroundTruth, Partition, Split};
use crate::{CdpError, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CDPE";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + set.len() * (8 + 4 * set.dim()));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    for id in set.ids() {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for v in set.vectors() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = read_input(path)?;
    decode_embeddings(&bytes, &path.display().to_string())
}

fn decode_embeddings(bytes: &[u8], context: &str) -> Result<EmbeddingSet> {
    if bytes.len() < HEADER_LEN {
        return Err(CdpError::format(context, "file shorter than header"));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(CdpError::format(context, "bad magic, expected CDPE"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(CdpError::format(context, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(CdpError::format(context, "dim must be positive"));
    }
    let expected = n
        .checked_mul(8 + 4 * dim)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| CdpError::format(context, "header sizes overflow"))?;
    if bytes.len() < expected {
        return Err(CdpError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(CdpError::DimensionMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let (id_bytes, value_bytes) = payload.split_at(8 * n);
    let ids = id_bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let vectors = value_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingSet::new(ids, vectors, dim)
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CdpError::MissingInput(path.to_path_buf()),
        _ => CdpError::Io(e),
    })
}

pub(crate) fn csv_reader(path: &Path, header: &[&str]) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CdpError::MissingInput(path.to_path_buf()),
        _ => CdpError::Io(e),
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let found = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();
    if found != header {
        return Err(CdpError::format(
            path.display().to_string(),
            format!("expected header {:?}, found {:?}", header.join(","), found.join(",")),
        ));
    }
    Ok(reader)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> CdpError {
    CdpError::format(path.display().to_string(), e.to_string())
}

pub(crate) fn parse_field<T: std::str::FromStr>(path: &Path, field: &str, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| {
        CdpError::format(path.display().to_string(), format!("cannot parse {what} from {field:?}"))
    })
}

/// Result of reading a labels file: the normalized truth plus any warnings
/// raised while normalizing it.
#[derive(Clone, Debug)]
pub struct LoadedLabels {
    pub truth: GroundTruth,
    pub warnings: Vec<String>,
}

pub fn load_labels(path: &Path) -> Result<LoadedLabels> {
    let mut reader = csv_reader(path, &["id", "label"])?;
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let id = parse_field(path, &record[0], "id")?;
        let label = parse_field(path, &record[1], "label")?;
        pairs.push((id, label));
    }
    let (truth, remapped) = GroundTruth::from_pairs(pairs)?;
    let mut warnings = Vec::new();
    if remapped {
        let msg = format!(
            "{}: labels were not contiguous, remapped to 0..{}",
            path.display(),
            truth.num_identities()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(LoadedLabels { truth, warnings })
}

pub fn save_labels(truth: &GroundTruth, path: &Path) -> Result<()> {
    let mut out = String::from("id,label\n");
    for (id, label) in truth.ids().iter().zip(truth.labels()) {
        out.push_str(&format!("{id},{label}\n"));
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Split> {
    let mut reader = csv_reader(path, &["id", "partition"])?;
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let id = parse_field(path, &record[0], "id")?;
        let partition: Partition = record[1].trim().parse()?;
        entries.push((id, partition));
    }
    Split::new(entries)
}

pub fn save_split(split: &Split, path: &Path) -> Result<()> {
    let mut out = String::from("id,partition\n");
    for (id, p) in split.entries() {
        out.push_str(&format!("{id},{}\n", p.as_str()));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingSet {
        let values: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 2.25).collect();
        EmbeddingSet::new(vec![3, 10, 11], values, 4).unwrap()
    }

    #[test]
    fn embedding_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cdpe");
        let set = sample();
        save_embeddings(&set, &path).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), set);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cdpe");
        save_embeddings(&sample(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_embeddings(&path), Err(CdpError::Format { .. })));
    }

    #[test]
    fn short_payload_is_truncation_error() {
        // header says 10 rows, payload carries 9
        let ids: Vec<u64> = (0..9).collect();
        let set = EmbeddingSet::new(ids, vec![1.0; 9 * 2], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cdpe");
        save_embeddings(&set, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..16].copy_from_slice(&10u64.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_embeddings(&path), Err(CdpError::Truncated { .. })));
    }

    #[test]
    fn oversized_payload_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cdpe");
        save_embeddings(&sample(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_embeddings(&path),
            Err(CdpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn missing_file_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_embeddings(&dir.path().join("nope.cdpe")),
            Err(CdpError::MissingInput(_))
        ));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let (truth, _) = GroundTruth::from_pairs([(0, 0), (1, 0), (2, 1)]).unwrap();
        save_labels(&truth, &path).unwrap();
        let loaded = load_labels(&path).unwrap();
        assert_eq!(loaded.truth, truth);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn duplicate_label_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        fs::write(&path, "id,label\n0,0\n0,1\n").unwrap();
        assert!(matches!(load_labels(&path), Err(CdpError::Validation(_))));
    }

    #[test]
    fn non_contiguous_labels_remapped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        fs::write(&path, "id,label\n0,0\n1,2\n").unwrap();
        let loaded = load_labels(&path).unwrap();
        assert_eq!(loaded.truth.labels(), &[0, 1]);
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        fs::write(&path, "sample,label\n0,0\n").unwrap();
        assert!(matches!(load_labels(&path), Err(CdpError::Format { .. })));
    }

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        let split = Split::new(vec![(1, Partition::Unlabeled), (0, Partition::Labeled)]).unwrap();
        save_split(&split, &path).unwrap();
        assert_eq!(load_split(&path).unwrap(), split);
    }
}
