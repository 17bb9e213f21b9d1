//! Artifact export: CSV tables, the beamforming JSON format, and the run
//! manifest.
//!
//! CSV files use a comma separator, '.' decimal point, and a header row.
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! a file back yields bit-identical values. Columns whose name ends in `_ms`
//! carry wall-clock measurements and are excluded from reproducibility
//! guarantees; every other byte of every artifact is a pure function of
//! (config, seed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use holopos_core::BeamformingConfig64;
use ndarray::Array2;
use num_complex::Complex;

use crate::CliError;

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        // NaN/inf should never reach an artifact; make them visible if so.
        format!("{v:?}")
    }
}

/// Write a CSV file with a header row.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a CSV produced by [`write_csv`] back into header and numeric rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Runtime(format!("{}: empty CSV", path.display())))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.parse::<f64>().map_err(|e| {
                    CliError::Runtime(format!("{}: bad cell {cell:?}: {e}", path.display()))
                })
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

// ---------------------------------------------------------------------------
// Beamforming configuration file
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ComplexMatrixDto {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BeamformingDto {
    digital: Vec<Vec<ComplexMatrixDto>>,
    analog: Vec<Vec<Vec<f64>>>,
}

fn matrix_to_dto(m: &Array2<Complex<f64>>) -> ComplexMatrixDto {
    ComplexMatrixDto {
        re: m.rows().into_iter().map(|r| r.iter().map(|z| z.re).collect()).collect(),
        im: m.rows().into_iter().map(|r| r.iter().map(|z| z.im).collect()).collect(),
    }
}

fn dto_to_matrix(dto: &ComplexMatrixDto) -> Result<Array2<Complex<f64>>, CliError> {
    let rows = dto.re.len();
    let cols = dto.re.first().map_or(0, Vec::len);
    if dto.im.len() != rows || dto.im.iter().any(|r| r.len() != cols) {
        return Err(CliError::Runtime("beamforming file: ragged matrix".into()));
    }
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        Complex::new(dto.re[r][c], dto.im[r][c])
    }))
}

pub fn save_beamforming(path: &Path, bf: &BeamformingConfig64) -> Result<(), CliError> {
    let dto = BeamformingDto {
        digital: bf
            .digital
            .iter()
            .map(|band| band.iter().map(matrix_to_dto).collect())
            .collect(),
        analog: bf
            .analog
            .iter()
            .map(|c| c.rows().into_iter().map(|r| r.to_vec()).collect())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&dto)
        .map_err(|e| CliError::Runtime(format!("serialize beamforming: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_beamforming(path: &Path) -> Result<BeamformingConfig64, CliError> {
    let text = std::fs::read_to_string(path)?;
    let dto: BeamformingDto = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("parse beamforming: {e}")))?;
    let digital = dto
        .digital
        .iter()
        .map(|band| band.iter().map(dto_to_matrix).collect())
        .collect::<Result<_, _>>()?;
    let analog = dto
        .analog
        .iter()
        .map(|c| {
            let rows = c.len();
            let cols = c.first().map_or(0, Vec::len);
            if c.iter().any(|r| r.len() != cols) {
                return Err(CliError::Runtime("beamforming file: ragged analog".into()));
            }
            Ok(Array2::from_shape_fn((rows, cols), |(r, cc)| c[r][cc]))
        })
        .collect::<Result<_, _>>()?;
    Ok(BeamformingConfig64 { digital, analog })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    /// Whether every byte is a pure function of (config, seed). Files with
    /// `_ms` timing columns are not.
    pub deterministic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub seed: u64,
    pub config_sha256: String,
    /// The full effective configuration, so the manifest alone suffices to
    /// reproduce every artifact from a clean checkout.
    pub config_toml: String,
    pub version: String,
    pub artifacts: Vec<ArtifactEntry>,
    #[serde(default)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects artifact entries as commands produce files.
pub struct ArtifactSet {
    out_dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactSet {
    pub fn new(out_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Register a file that was just written. Deterministic files get a
    /// content hash in the manifest.
    pub fn register(&mut self, name: &str, deterministic: bool) -> Result<(), CliError> {
        let sha256 = if deterministic {
            let bytes = std::fs::read(self.path(name))?;
            Some(sha256_hex(&bytes))
        } else {
            None
        };
        // Re-registration (the `all` chain overwrites files) replaces the entry.
        self.entries.retain(|e| e.name != name);
        self.entries.push(ArtifactEntry {
            name: name.to_owned(),
            deterministic,
            sha256,
        });
        Ok(())
    }

    pub fn write_manifest(
        self,
        subcommand: &str,
        seed: u64,
        config_toml: &str,
        extras: BTreeMap<String, serde_json::Value>,
    ) -> Result<(), CliError> {
        let manifest = Manifest {
            subcommand: subcommand.to_owned(),
            seed,
            config_sha256: sha256_hex(config_toml.as_bytes()),
            config_toml: config_toml.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            artifacts: self.entries,
            extras,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Runtime(format!("serialize manifest: {e}")))?;
        std::fs::write(self.out_dir.join("manifest.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_numeric_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            vec![fmt_f64(1.0), fmt_f64(-2.5e-13), fmt_f64(0.1 + 0.2)],
            vec![fmt_f64(f64::MIN_POSITIVE), fmt_f64(1e300), fmt_f64(-0.0)],
        ];
        write_csv(&path, &["a", "b", "c"], &rows).unwrap();
        let (header, parsed) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["a", "b", "c"]);
        assert_eq!(parsed[0], vec![1.0, -2.5e-13, 0.1 + 0.2]);
        assert_eq!(parsed[1][0], f64::MIN_POSITIVE);
        assert_eq!(parsed[1][1], 1e300);
    }

    #[test]
    fn empty_trace_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_csv(&path, &["x", "y"], &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "x,y\n");
        let (_, rows) = read_csv(&path).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn beamforming_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bf.json");
        let mut rng = holopos_core::rng::named_stream(3, "artifact-test");
        let plan = holopos_core::channel::BandPlan::new(
            vec![2.5e9],
            vec![vec![2.495e9, 2.505e9]],
            1e7,
            1e-13,
            2,
            1e-3,
            1.0,
        )
        .unwrap();
        let bf = holopos_core::beamforming::random_config(&plan, 3, 5, &mut rng);
        save_beamforming(&path, &bf).unwrap();
        let loaded = load_beamforming(&path).unwrap();
        assert_eq!(loaded.digital[0][0], bf.digital[0][0]);
        assert_eq!(loaded.analog[0], bf.analog[0]);
    }

    #[test]
    fn sha256_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
