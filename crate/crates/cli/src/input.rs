//! Loading designs and datasets, and writing outputs atomically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use qiv_core::dgp::{
    bundled, simulate_additive, simulate_late, simulate_quantile, AdditiveDGP, DgpSpec,
    DiscreteQuantileDGP, LateDGP,
};
use qiv_core::Dataset;
use tempfile::NamedTempFile;

use crate::config::{DgpChoice, Source};
use crate::failure::Failure;

pub enum Model {
    Quantile(DiscreteQuantileDGP),
    Additive(AdditiveDGP),
    Late(LateDGP),
}

impl Model {
    pub fn load(
        bundled_name: Option<&str>,
        path: Option<&Path>,
        inline: Option<&DgpSpec>,
    ) -> Result<Self, Failure> {
        let spec = match (bundled_name, path, inline) {
            (Some(name), _, _) => bundled::by_name(name).ok_or_else(|| {
                Failure::schema(format!(
                    "unknown bundled design {name:?}; known: {}",
                    bundled::NAMES.join(", ")
                ))
            })?,
            (None, Some(p), _) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::io(format!("{}: {e}", p.display())))?;
                DgpSpec::from_json(&text)
                    .map_err(|e| Failure::schema(format!("{}: {e}", p.display())))?
            }
            (None, None, Some(spec)) => spec.clone(),
            (None, None, None) => return Err(Failure::schema("no DGP given")),
        };
        Ok(match spec {
            DgpSpec::Quantile(s) => Model::Quantile(DiscreteQuantileDGP::from_spec(s)?),
            DgpSpec::Additive(s) => Model::Additive(AdditiveDGP::from_spec(s)?),
            DgpSpec::Late(s) => Model::Late(LateDGP::from_spec(s)?),
        })
    }

    pub fn from_choice(c: &DgpChoice) -> Result<Self, Failure> {
        Self::load(
            c.bundled.as_deref(),
            c.dgp.as_deref(),
            c.dgp_inline.as_ref(),
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Quantile(_) => "quantile",
            Model::Additive(_) => "additive",
            Model::Late(_) => "late",
        }
    }

    pub fn simulate(&self, n: usize, seed: u64) -> qiv_core::Result<Dataset> {
        match self {
            Model::Quantile(m) => simulate_quantile(m, n, seed),
            Model::Additive(m) => simulate_additive(m, n, seed),
            Model::Late(m) => simulate_late(m, n, seed),
        }
    }
}

/// A sample, or a design whose population moments stand in for one.
pub enum Input {
    Sample(Dataset),
    Population(Model),
}

impl Input {
    pub fn resolve(source: &Source) -> Result<Self, Failure> {
        if let Some(path) = &source.data {
            return Ok(Input::Sample(read_dataset(path)?));
        }
        let model = Model::load(
            source.bundled.as_deref(),
            source.dgp.as_deref(),
            source.dgp_inline.as_ref(),
        )?;
        match (source.n, source.seed) {
            (Some(n), Some(seed)) => Ok(Input::Sample(model.simulate(n, seed)?)),
            _ => Ok(Input::Population(model)),
        }
    }

    /// The population of an additive design is a weighted dataset; other
    /// designs need a sample.
    pub fn into_dataset(self, command: &str) -> Result<Dataset, Failure> {
        match self {
            Input::Sample(d) => Ok(d),
            Input::Population(Model::Additive(m)) => Ok(m.population_dataset()?),
            Input::Population(m) => Err(Failure::schema(format!(
                "{command} needs data or --n for a {} design",
                m.kind()
            ))),
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(Dataset::read_csv(file, None)?)
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf, Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| Failure::io(format!("{}: {}", path.display(), e.error)))?;
    Ok(path.to_path_buf())
}
