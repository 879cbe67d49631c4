//! Run outputs: RFC-4180 series CSV, the binary snapshot container, and the
//! resolved-manifest copy that makes every run replayable.

use crate::error::{Result, SdsmError};
use crate::particles::PathRecord;
use std::io::{Read, Write};
use std::path::Path;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SDSMSNAP";
pub const SNAPSHOT_VERSION: u8 = 1;

/// Build identifier embedded in run manifests (set from the environment at
/// compile time when available).
pub fn build_id() -> String {
    option_env!("SDSM_BUILD_ID")
        .map(str::to_string)
        .unwrap_or_else(|| format!("sdsm-{}", env!("CARGO_PKG_VERSION")))
}

/// Write the per-replicate observable series of an ensemble as CSV.
pub fn write_series_csv<W: Write>(out: W, records: &[PathRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(out);
    w.write_record([
        "replicate",
        "time",
        "observable",
        "value",
        "x_mart",
        "m_mart",
        "i_mart",
        "g1_riemann",
        "occ_trap",
        "sq_trap",
    ])?;
    for (rep, record) in records.iter().enumerate() {
        for series in &record.series {
            for p in &series.points {
                w.write_record([
                    rep.to_string(),
                    format!("{:.12}", p.time),
                    series.id.clone(),
                    fmt(p.value),
                    fmt(p.x_mart),
                    fmt(p.m_mart),
                    fmt(p.i_mart),
                    fmt(p.g1_riemann),
                    fmt(p.occ_trap),
                    fmt(p.sq_trap),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    // Shortest round-trip representation keeps the files replay-exact.
    format!("{v:?}")
}

/// Binary snapshot container: magic, version byte, dimension, then per
/// snapshot the time, particle count, mass and little-endian f64 positions.
pub fn write_snapshots<W: Write>(mut out: W, record: &PathRecord) -> Result<()> {
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&[SNAPSHOT_VERSION])?;
    out.write_all(&(record.dim as u32).to_le_bytes())?;
    out.write_all(&(record.snapshots.len() as u64).to_le_bytes())?;
    for snap in &record.snapshots {
        out.write_all(&snap.time.to_le_bytes())?;
        let count = (snap.positions.len() / record.dim) as u64;
        out.write_all(&count.to_le_bytes())?;
        out.write_all(&record.mass.to_le_bytes())?;
        for v in &snap.positions {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parsed form of the snapshot container.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFile {
    pub dim: usize,
    pub mass: f64,
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

pub fn read_snapshots<R: Read>(mut input: R) -> Result<SnapshotFile> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(SdsmError::Config("not a snapshot container (bad magic)".into()));
    }
    let mut byte = [0u8; 1];
    input.read_exact(&mut byte)?;
    if byte[0] != SNAPSHOT_VERSION {
        return Err(SdsmError::Config(format!("unsupported snapshot version {}", byte[0])));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut snapshots = Vec::with_capacity(count);
    let mut mass = 0.0;
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut f64buf)?;
        let time = f64::from_le_bytes(f64buf);
        input.read_exact(&mut u64buf)?;
        let particles = u64::from_le_bytes(u64buf) as usize;
        input.read_exact(&mut f64buf)?;
        mass = f64::from_le_bytes(f64buf);
        let mut positions = Vec::with_capacity(particles * dim);
        for _ in 0..particles * dim {
            input.read_exact(&mut f64buf)?;
            positions.push(f64::from_le_bytes(f64buf));
        }
        snapshots.push((time, positions));
    }
    Ok(SnapshotFile { dim, mass, snapshots })
}

/// Write a JSON value prettily to `dir/name`.
pub fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::{ObservableSeries, SeriesPoint, Snapshot};

    fn tiny_record() -> PathRecord {
        PathRecord {
            dim: 1,
            mass: 0.25,
            dt: 0.1,
            series: vec![ObservableSeries {
                id: "phi".into(),
                points: vec![
                    SeriesPoint { time: 0.0, value: 1.0, ..Default::default() },
                    SeriesPoint { time: 0.1, value: 0.5, x_mart: -0.125, ..Default::default() },
                ],
            }],
            snapshots: vec![
                Snapshot { time: 0.0, positions: vec![0.0, 1.0] },
                Snapshot { time: 0.1, positions: vec![0.25] },
            ],
            events: None,
            final_alive: 1,
        }
    }

    #[test]
    fn csv_is_rfc4180_crlf() {
        let mut buf = Vec::new();
        write_series_csv(&mut buf, std::slice::from_ref(&tiny_record())).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("replicate,time,observable,"));
        assert!(text.contains("\r\n"));
        assert!(text.contains("phi"));
    }

    #[test]
    fn snapshot_container_round_trip() {
        let record = tiny_record();
        let mut buf = Vec::new();
        write_snapshots(&mut buf, &record).unwrap();
        assert_eq!(&buf[..8], SNAPSHOT_MAGIC);
        assert_eq!(buf[8], SNAPSHOT_VERSION);
        let parsed = read_snapshots(&buf[..]).unwrap();
        assert_eq!(parsed.dim, 1);
        assert_eq!(parsed.mass, 0.25);
        assert_eq!(parsed.snapshots.len(), 2);
        assert_eq!(parsed.snapshots[0].1, vec![0.0, 1.0]);
        assert_eq!(parsed.snapshots[1].1, vec![0.25]);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOTMAGIC\x01".to_vec();
        assert!(read_snapshots(&buf[..]).is_err());
    }
}
