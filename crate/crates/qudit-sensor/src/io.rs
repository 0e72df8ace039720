//! File formats: Ramsey traces as CSV with a JSON metadata sidecar, lookup
//! tables as a commented header plus CSV blocks, all written atomically
//! (temp file + rename) so partial runs never corrupt artifacts.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::fitting::RamseyTrace;
use crate::lookup::{LookupGrid, SensingProtocol};
use crate::real::{mhz_to_rad, rad_to_mhz, Real};

pub const TRACE_FORMAT_VERSION: u32 = 1;
pub const TABLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {what} file {path}: {detail}")]
    Malformed {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Write bytes through a temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".into(),
    });
    {
        let mut f = fs::File::create(&tmp).map_err(file_err(&tmp))?;
        f.write_all(bytes).map_err(file_err(&tmp))?;
        f.sync_all().map_err(file_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(file_err(path))?;
    Ok(())
}

/// Serialize a value as pretty JSON and write it atomically.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Sidecar path for a trace file: `<file>.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Write a Ramsey trace as `delay_ns,population` CSV plus a JSON sidecar
/// describing how it was produced.
pub fn write_trace_csv<T: Real, M: Serialize>(
    path: &Path,
    trace: &RamseyTrace<T>,
    meta: &M,
) -> Result<(), IoError> {
    let mut text = String::from("delay_ns,population\n");
    for (d, p) in trace.delays.iter().zip(trace.populations.iter()) {
        text.push_str(&format!("{:.12e},{:.12e}\n", d.to64(), p.to64()));
    }
    atomic_write(path, text.as_bytes())?;
    write_json(&sidecar_path(path), meta)
}

pub fn read_trace_csv<T: Real>(path: &Path) -> Result<RamseyTrace<T>, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "delay_ns,population" {
        return Err(IoError::Malformed {
            what: "trace",
            path: path.to_path_buf(),
            detail: format!("unexpected header {header:?}"),
        });
    }
    let mut delays = Vec::new();
    let mut populations = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let parse = |s: Option<&str>| -> Result<T, IoError> {
            s.and_then(|v| v.trim().parse::<f64>().ok())
                .map(T::of)
                .ok_or_else(|| IoError::Malformed {
                    what: "trace",
                    path: path.to_path_buf(),
                    detail: format!("bad number on data line {}", lineno + 1),
                })
        };
        delays.push(parse(cols.next())?);
        populations.push(parse(cols.next())?);
    }
    Ok(RamseyTrace {
        delays,
        populations,
        n_avg: None,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TableHeader<T> {
    format_version: u32,
    amp_axis_mhz: Vec<f64>,
    freq_axis_mhz: Vec<f64>,
    protocol: SensingProtocol<T>,
    content_hash: String,
}

/// Write a lookup table: commented header with the metadata JSON, then one
/// CSV block per shift surface in row-major order, values in MHz (ω/2π).
pub fn write_table<T: Real>(path: &Path, grid: &LookupGrid<T>) -> Result<(), IoError> {
    let header = TableHeader {
        format_version: TABLE_FORMAT_VERSION,
        amp_axis_mhz: grid.amp_axis.iter().map(|&a| rad_to_mhz(a).to64()).collect(),
        freq_axis_mhz: grid
            .freq_axis
            .iter()
            .map(|&f| rad_to_mhz(f).to64())
            .collect(),
        protocol: grid.protocol.clone(),
        content_hash: grid.content_hash.clone(),
    };
    let meta = serde_json::to_string(&header).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let mut text = String::new();
    text.push_str("# qudit-sensor lookup table\n");
    text.push_str(&format!("# meta: {meta}\n"));
    for (name, surface) in [("delta1_mhz", &grid.delta1), ("delta2_mhz", &grid.delta2)] {
        text.push_str(&format!("[{name}]\n"));
        for i in 0..grid.amp_axis.len() {
            let row: Vec<String> = (0..grid.freq_axis.len())
                .map(|j| {
                    let v = surface[[i, j]];
                    if v.is_finite() {
                        format!("{:.12e}", rad_to_mhz(v).to64())
                    } else {
                        "nan".into()
                    }
                })
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
    }
    atomic_write(path, text.as_bytes())
}

pub fn read_table<T: Real>(path: &Path) -> Result<LookupGrid<T>, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let malformed = |detail: String| IoError::Malformed {
        what: "table",
        path: path.to_path_buf(),
        detail,
    };
    let meta_line = text
        .lines()
        .find(|l| l.starts_with("# meta: "))
        .ok_or_else(|| malformed("missing meta header".into()))?;
    let header: TableHeader<T> =
        serde_json::from_str(meta_line.trim_start_matches("# meta: ")).map_err(|source| {
            IoError::Json {
                path: path.to_path_buf(),
                source,
            }
        })?;
    if header.format_version != TABLE_FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let (na, nf) = (header.amp_axis_mhz.len(), header.freq_axis_mhz.len());
    let mut surfaces: Vec<Array2<T>> = Vec::new();
    let mut current: Option<Vec<T>> = None;
    let finish =
        |buf: &mut Option<Vec<T>>, surfaces: &mut Vec<Array2<T>>| -> Result<(), IoError> {
            if let Some(values) = buf.take() {
                if values.len() != na * nf {
                    return Err(IoError::Malformed {
                        what: "table",
                        path: path.to_path_buf(),
                        detail: format!(
                            "surface has {} values, expected {}",
                            values.len(),
                            na * nf
                        ),
                    });
                }
                surfaces.push(Array2::from_shape_vec((na, nf), values).expect("checked size"));
            }
            Ok(())
        };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            finish(&mut current, &mut surfaces)?;
            current = Some(Vec::with_capacity(na * nf));
            continue;
        }
        let Some(buf) = current.as_mut() else {
            return Err(malformed(format!("data outside any block: {line:?}")));
        };
        for cell in line.split(',') {
            let cell = cell.trim();
            if cell.eq_ignore_ascii_case("nan") {
                buf.push(T::nan());
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| malformed(format!("bad number {cell:?}")))?;
                buf.push(mhz_to_rad(T::of(v)));
            }
        }
    }
    finish(&mut current, &mut surfaces)?;
    if surfaces.len() != 2 {
        return Err(malformed(format!(
            "expected 2 surfaces, found {}",
            surfaces.len()
        )));
    }
    let delta2 = surfaces.pop().unwrap();
    let delta1 = surfaces.pop().unwrap();
    Ok(LookupGrid {
        amp_axis: header
            .amp_axis_mhz
            .iter()
            .map(|&v| mhz_to_rad(T::of(v)))
            .collect(),
        freq_axis: header
            .freq_axis_mhz
            .iter()
            .map(|&v| mhz_to_rad(T::of(v)))
            .collect(),
        delta1,
        delta2,
        protocol: header.protocol,
        content_hash: header.content_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lookup::GridSpec;
    use crate::transmon;
    use ndarray::Array2;
    use serde_json::json;

    fn tmpdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!("qudit-sensor-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn trace_round_trip() {
        let dir = tmpdir();
        let path = dir.join("trace.csv");
        let trace = RamseyTrace {
            delays: (0..10).map(|k| k as f64 * 10.0).collect(),
            populations: (0..10).map(|k| 0.5 + 0.01 * k as f64).collect(),
            n_avg: None,
        };
        write_trace_csv(&path, &trace, &json!({"n_avg": 3000})).unwrap();
        let back: RamseyTrace<f64> = read_trace_csv(&path).unwrap();
        assert_eq!(back.delays.len(), 10);
        for (a, b) in back.populations.iter().zip(trace.populations.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn table_round_trip_with_holes() {
        let dir = tmpdir();
        let path = dir.join("table.csv");
        let params = transmon::reference_device::<f64>().unwrap();
        let protocol = crate::lookup::SensingProtocol::new(params);
        let spec = GridSpec::<f64> {
            amp_min: 0.0,
            amp_max: 1.0,
            n_amp: 3,
            freq_min: 31.0,
            freq_max: 35.0,
            n_freq: 4,
        };
        let mut delta1 = Array2::from_elem((3, 4), 0.01);
        delta1[[1, 2]] = f64::NAN;
        let delta2 = Array2::from_elem((3, 4), 0.003);
        let grid = LookupGrid {
            amp_axis: spec.amp_axis(),
            freq_axis: spec.freq_axis(),
            delta1,
            delta2,
            content_hash: protocol.content_hash(),
            protocol,
        };
        write_table(&path, &grid).unwrap();
        let back: LookupGrid<f64> = read_table(&path).unwrap();
        assert_eq!(back.holes(), 1);
        assert!(!back.delta1[[1, 2]].is_finite());
        assert!((back.delta1[[0, 0]] - 0.01).abs() < 1e-15);
        assert!((back.delta2[[2, 3]] - 0.003).abs() < 1e-15);
        assert_eq!(back.content_hash, grid.content_hash);
        assert_eq!(back.amp_axis.len(), 3);
        // byte-identical rewrite
        let first = fs::read(&path).unwrap();
        write_table(&path, &back).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tmpdir();
        let path = dir.join("x.json");
        write_json(&path, &json!({"a": 1})).unwrap();
        assert!(path.exists());
        let leftovers: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
