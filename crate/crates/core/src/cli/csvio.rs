//! Spectrum CSV files.
//!
//! Header `detuning_mhz,intensity_cps[,sigma_cps][,theta_deg]`, preceded by
//! any number of `# key=value` metadata lines. Numbers are written in
//! scientific notation with the shortest digits that round-trip exactly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::spectrum::Spectrum;

use super::CliError;

pub const DETUNING: &str = "detuning_mhz";
pub const INTENSITY: &str = "intensity_cps";
pub const SIGMA: &str = "sigma_cps";
pub const THETA: &str = "theta_deg";

/// Contents of one spectrum file.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTable {
    pub detunings: Vec<f64>,
    pub values: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    pub theta_deg: Option<Vec<f64>>,
    pub metadata: BTreeMap<String, String>,
}

impl SpectrumTable {
    pub fn from_spectrum(spec: &Spectrum, theta_deg: Option<f64>) -> Self {
        Self {
            detunings: spec.detunings().to_vec(),
            values: spec.values().to_vec(),
            sigma: spec.sigma().map(<[f64]>::to_vec),
            theta_deg: theta_deg.map(|t| vec![t; spec.len()]),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    /// Rows grouped by θ (in order of first appearance); one group with
    /// `None` when there is no θ column.
    pub fn split_by_theta(&self) -> Result<Vec<(Option<f64>, Spectrum)>, CliError> {
        let groups: Vec<(Option<f64>, Vec<usize>)> = match &self.theta_deg {
            None => vec![(None, (0..self.detunings.len()).collect())],
            Some(thetas) => {
                let mut groups: Vec<(Option<f64>, Vec<usize>)> = Vec::new();
                for (i, t) in thetas.iter().enumerate() {
                    match groups.iter_mut().find(|g| g.0 == Some(*t)) {
                        Some(g) => g.1.push(i),
                        None => groups.push((Some(*t), vec![i])),
                    }
                }
                groups
            }
        };
        groups
            .into_iter()
            .map(|(theta, idx)| {
                let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
                let mut spec = Spectrum::new(pick(&self.detunings), pick(&self.values))?;
                if let Some(s) = &self.sigma {
                    spec = spec.with_sigma(pick(s))?;
                }
                Ok((theta, spec))
            })
            .collect::<crate::Result<Vec<_>>>()
            .map_err(|e| CliError::BadInput(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}={v}").expect("write to memory");
        }
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec![DETUNING, INTENSITY];
        if self.sigma.is_some() {
            header.push(SIGMA);
        }
        if self.theta_deg.is_some() {
            header.push(THETA);
        }
        w.write_record(&header).expect("write to memory");
        for i in 0..self.detunings.len() {
            let mut row = vec![fmt(self.detunings[i]), fmt(self.values[i])];
            if let Some(s) = &self.sigma {
                row.push(fmt(s[i]));
            }
            if let Some(t) = &self.theta_deg {
                row.push(fmt(t[i]));
            }
            w.write_record(&row).expect("write to memory");
        }
        w.flush().expect("write to memory");
        drop(w);
        String::from_utf8(out).expect("ascii output")
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |line: usize, msg: String| CliError::BadInput(format!("line {line}: {msg}"));
        let mut metadata = BTreeMap::new();
        for line in text.lines() {
            if let Some(rest) = line.trim_start().strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    metadata.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let d = col(DETUNING).ok_or_else(|| CliError::BadInput(format!("missing column `{DETUNING}`")))?;
        let v = col(INTENSITY).ok_or_else(|| CliError::BadInput(format!("missing column `{INTENSITY}`")))?;
        let (s, t) = (col(SIGMA), col(THETA));

        let mut table = SpectrumTable {
            detunings: Vec::new(),
            values: Vec::new(),
            sigma: s.map(|_| Vec::new()),
            theta_deg: t.map(|_| Vec::new()),
            metadata,
        };
        for rec in reader.records() {
            let rec = rec.map_err(|e| CliError::BadInput(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let field = |i: usize, name: &str| -> Result<f64, CliError> {
                let raw = rec.get(i).ok_or_else(|| bad(line, format!("missing `{name}`")))?;
                raw.parse::<f64>()
                    .map_err(|_| bad(line, format!("`{name}` is not a number: {raw:?}")))
            };
            table.detunings.push(field(d, DETUNING)?);
            table.values.push(field(v, INTENSITY)?);
            if let (Some(i), Some(col)) = (s, table.sigma.as_mut()) {
                col.push(field(i, SIGMA)?);
            }
            if let (Some(i), Some(col)) = (t, table.theta_deg.as_mut()) {
                col.push(field(i, THETA)?);
            }
        }
        if table.detunings.is_empty() {
            return Err(CliError::BadInput("no data rows".into()));
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::BadInput(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::BadInput(format!("{}: {e}", path.display())))
    }
}

/// Shortest exactly-round-tripping scientific notation.
pub fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory and an atomic rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_variants() {
        let spec = Spectrum::new(vec![-1.0, 0.0, 1.0], vec![3.0, 2.0, 3.0]).unwrap();
        let plain = SpectrumTable::from_spectrum(&spec, None).to_csv();
        assert!(plain.starts_with("detuning_mhz,intensity_cps\n"));
        let full = SpectrumTable::from_spectrum(&spec.clone().with_sigma(vec![0.1; 3]).unwrap(), Some(45.0))
            .with_meta("seed", 7)
            .to_csv();
        assert!(full.starts_with("# seed=7\ndetuning_mhz,intensity_cps,sigma_cps,theta_deg\n"));
        let back = SpectrumTable::parse(&full).unwrap();
        assert_eq!(back.metadata["seed"], "7");
        assert_eq!(back.theta_deg, Some(vec![45.0; 3]));
    }

    #[test]
    fn malformed_inputs() {
        assert!(SpectrumTable::parse("detuning_mhz,intensity_cps\n1,abc\n")
            .unwrap_err()
            .to_string()
            .contains("line 2"));
        assert!(SpectrumTable::parse("nu,counts\n1,2\n").is_err());
        assert!(SpectrumTable::parse("detuning_mhz,intensity_cps\n").is_err());
        assert!(SpectrumTable::parse("detuning_mhz,intensity_cps\n1,2,3\n").is_err());
    }

    #[test]
    fn theta_groups_keep_order() {
        let text = "detuning_mhz,intensity_cps,theta_deg\n0,1,90\n1,2,90\n0,3,0\n1,4,0\n";
        let groups = SpectrumTable::parse(text).unwrap().split_by_theta().unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, Some(90.0));
        assert_eq!(groups[1].1.values(), &[3.0, 4.0]);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn values_roundtrip_bit_exact(
            vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
        ) {
            let grid: Vec<f64> = (0..vals.len()).map(|i| i as f64 * 0.37 - 3.0).collect();
            let spec = Spectrum::new(grid, vals.clone()).unwrap();
            let back = SpectrumTable::parse(&SpectrumTable::from_spectrum(&spec, None).to_csv()).unwrap();
            for (a, b) in back.values.iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
