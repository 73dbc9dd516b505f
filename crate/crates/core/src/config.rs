//! Experiment configuration (TOML), provenance records and table output.
//!
//! ```toml
//! model = "nearest-neighbour"   # or "spread-out"
//! d = 9
//! L = 1                         # spread-out range
//! p = "auto-pc"                 # or a number
//! seed = 1
//! size-cap = 8192
//! samples = 1000000
//! k-grid = [0.0, 0.5, 1.0, 2.0]
//! z-grid = [0.9, 0.95, 0.98, 0.99]
//! output-dir = "out"
//!
//! [pc]
//! samples = 100000
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{ModelSpec, Neighbourhood};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    NearestNeighbour,
    SpreadOut,
}

/// A fixed bond density or a request to estimate `p_c` first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DensityChoice {
    Value(f64),
    Keyword(AutoPc),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoPc {
    #[serde(rename = "auto-pc")]
    AutoPc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct PcSettings {
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub samples: u64,
    /// Dyadic exponents `[j_lo, j_hi]`; the probe cap is `2^{j_hi}`.
    pub window: [u32; 2],
    pub width: f64,
    pub max_probes: usize,
    /// A probe stops early and counts as supercritical once this fraction
    /// of its first wave of clusters exceeds the cap.
    pub overflow_abort: f64,
}

impl Default for PcSettings {
    fn default() -> Self {
        Self {
            seed: None,
            samples: 100_000,
            window: [4, 13],
            width: 5e-4,
            max_probes: 40,
            overflow_abort: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct FitSettings {
    /// Dyadic exponents `[j_lo, j_hi)` for the size-distribution slope.
    pub delta_window: [u32; 2],
    pub slope_target: f64,
    pub slope_tolerance: f64,
    /// Dyadic windows `[j_lo, j_hi)` for `Ĉ` and `D̂`; the last one supplies
    /// the reported constants.
    pub constant_windows: Vec<[u32; 2]>,
    pub trend_sizes: Vec<usize>,
    pub u_max: f64,
    pub u_points: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            delta_window: [7, 13],
            slope_target: -1.5,
            slope_tolerance: 0.1,
            constant_windows: vec![[9, 11], [10, 12]],
            trend_sizes: vec![256, 1024, 4096],
            u_max: 12.0,
            u_points: 1201,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Theorem3Settings {
    /// Lattice wave numbers along a coordinate axis.
    pub k_grid: Vec<f64>,
    /// The row used for `D̂` and `ε₂`.
    pub z_row: f64,
}

impl Default for Theorem3Settings {
    fn default() -> Self {
        Self {
            k_grid: vec![0.4, 0.2, 0.1, 0.05],
            z_row: 0.98,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct EstimateSettings {
    pub max_n: usize,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        Self { max_n: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct OracleSettings {
    pub n_max: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { n_max: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub d: usize,
    #[serde(rename = "L", default = "one")]
    pub l: u32,
    pub p: DensityChoice,
    pub seed: u64,
    pub size_cap: usize,
    pub samples: u64,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<f64>,
    #[serde(default = "default_z_grid")]
    pub z_grid: Vec<f64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads; never affects results.
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub pc: PcSettings,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub theorem3: Theorem3Settings,
    #[serde(default)]
    pub estimate: EstimateSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
}

fn one() -> u32 {
    1
}

fn default_k_grid() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}

fn default_z_grid() -> Vec<f64> {
    vec![0.9, 0.95, 0.98, 0.99]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.d == 0 {
            return bad("d must be at least 1");
        }
        if self.size_cap == 0 {
            return bad("size-cap must be at least 1");
        }
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        if let DensityChoice::Value(p) = self.p {
            if !(0.0..=1.0).contains(&p) {
                return bad("p must lie in [0, 1]");
            }
        }
        if self.z_grid.iter().any(|z| !(0.0..1.0).contains(z)) {
            return bad("z-grid entries must lie in [0, 1)");
        }
        if self.k_grid.iter().any(|k| !k.is_finite()) {
            return bad("k-grid entries must be finite");
        }
        if self.pc.window[0] >= self.pc.window[1] || self.pc.window[1] > 40 {
            return bad("pc.window must be an increasing pair of exponents");
        }
        if self.model == ModelKind::SpreadOut && self.l == 0 {
            return bad("spread-out range L must be at least 1");
        }
        self.model_at(0.5)?;
        Ok(())
    }

    pub fn neighbourhood(&self) -> Neighbourhood {
        match self.model {
            ModelKind::NearestNeighbour => Neighbourhood::NearestNeighbour,
            ModelKind::SpreadOut => Neighbourhood::SpreadOut { range: self.l },
        }
    }

    pub fn model_at(&self, p: f64) -> Result<ModelSpec> {
        ModelSpec::new(self.d, self.neighbourhood(), p)
    }

    pub fn range(&self) -> u32 {
        match self.model {
            ModelKind::NearestNeighbour => 1,
            ModelKind::SpreadOut => self.l,
        }
    }

    pub fn model_label(&self) -> &'static str {
        match self.model {
            ModelKind::NearestNeighbour => "nearest-neighbour",
            ModelKind::SpreadOut => "spread-out",
        }
    }

    pub fn pc_seed(&self) -> u64 {
        self.pc.seed.unwrap_or(self.seed)
    }

    /// SHA-256 of the canonical JSON form, as hex (worker count excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Where a run's bond density came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensitySource {
    Config,
    Estimated { lo: f64, hi: f64 },
    Supplied,
}

/// One JSON-lines metadata record per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub size_cap: usize,
    pub samples: u64,
    pub model: String,
    pub d: usize,
    #[serde(rename = "L")]
    pub l: u32,
    pub p: f64,
    pub p_source: DensitySource,
    pub version: String,
}

impl Provenance {
    pub fn new(command: &str, cfg: &ExperimentConfig, p: f64, p_source: DensitySource) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            size_cap: cfg.size_cap,
            samples: cfg.samples,
            model: cfg.model_label().into(),
            d: cfg.d,
            l: cfg.range(),
            p,
            p_source,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("provenance serialises")
    }
}

/// A small CSV table; floats are written in shortest round-trip form so
/// identical values always give identical bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Formats a float for tables (`NaN` for missing values).
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Appends `line` plus a newline to a JSON-lines file.
pub fn append_json_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
model = "spread-out"
d = 3
L = 2
p = "auto-pc"
seed = 7
size-cap = 256
samples = 1000
k-grid = [0.0, 1.0]
output-dir = "runs/a"

[pc]
samples = 200000
window = [3, 8]
"#;

    #[test]
    fn parses_and_hashes() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.model, ModelKind::SpreadOut);
        assert_eq!(cfg.l, 2);
        assert_eq!(cfg.p, DensityChoice::Keyword(AutoPc::AutoPc));
        assert_eq!(cfg.pc.samples, 200_000);
        assert_eq!(cfg.pc.width, 5e-4);
        assert_eq!(cfg.z_grid, default_z_grid());
        assert_eq!(cfg.model_at(0.01).unwrap().coordination(), 124);
        let h = cfg.hash();
        assert_eq!(h.len(), 64);
        let mut other = cfg.clone();
        other.workers = Some(4);
        assert_eq!(other.hash(), h);
        other.seed = 8;
        assert_ne!(other.hash(), h);
    }

    #[test]
    fn numeric_density_and_rejections() {
        let text = SAMPLE.replace("\"auto-pc\"", "0.2");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.p, DensityChoice::Value(0.2));
        assert!(ExperimentConfig::from_toml_str(&SAMPLE.replace("\"auto-pc\"", "1.5")).is_err());
        assert!(ExperimentConfig::from_toml_str(&SAMPLE.replace("\"auto-pc\"", "\"auto\"")).is_err());
        assert!(ExperimentConfig::from_toml_str(&format!("{SAMPLE}\nbogus = 1")).is_err());
    }

    #[test]
    fn csv_is_stable() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec![num(0.1), num(1.0 / 3.0)]);
        assert_eq!(t.to_csv().unwrap(), "a,b\n0.1,0.3333333333333333\n");
    }
}
