//! Multi-environment datasets and their on-disk layout.
//!
//! A dataset directory holds `meta.json`, `sem.json`, `mixing.json` and per
//! environment `env_<u>_X.csv` / `env_<u>_Z.csv` (headerless, one sample per
//! row, 17 significant digits). Ground-truth latents are for evaluation only;
//! [`Observations::load`] never opens the `Z` files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crl_autodiff::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::Dag;
use crate::scm::{mix, sample_latents, MixingSpec, ModelClass, SemSpec};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub sem: Option<u64>,
    pub mixing: Option<u64>,
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub graph: Dag,
    pub model_class: ModelClass,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub samples_per_env: usize,
    pub seeds: Seeds,
    pub sem_digest: String,
    pub mixing_digest: String,
    pub latents_are_evaluation_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvBlock {
    pub x: Tensor,
    pub z: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub sem: SemSpec,
    pub mixing: MixingSpec,
    pub envs: Vec<EnvBlock>,
}

/// Samples every environment (in parallel, each from its own stream) and
/// pushes the latents through the mixing function.
pub fn generate_dataset(sem: &SemSpec, mixing: &MixingSpec, per_env: usize, seeds: Seeds) -> Result<Dataset> {
    if mixing.n != sem.n() {
        return Err(CoreError::DimensionMismatch(format!(
            "mixing expects {} latents, model has {}",
            mixing.n,
            sem.n()
        )));
    }
    let envs = (0..sem.m())
        .into_par_iter()
        .map(|u| {
            let z = sample_latents(sem, u, per_env, seeds.samples)?;
            let x = mix(mixing, &z)?;
            Ok(EnvBlock { x, z })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        graph: sem.graph.clone(),
        model_class: sem.model_class,
        n: sem.n(),
        d: mixing.d,
        m: sem.m(),
        samples_per_env: per_env,
        seeds,
        sem_digest: sem.digest(),
        mixing_digest: mixing.digest(),
        latents_are_evaluation_only: true,
    };
    Ok(Dataset {
        meta,
        sem: sem.clone(),
        mixing: mixing.clone(),
        envs,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CoreError::Parse(format!("{}: {e}", path.display())))
}

/// Headerless CSV with `{:.16e}` floats.
pub fn write_matrix_csv(path: &Path, t: &Tensor) -> Result<()> {
    let cols = t.shape().get(1).copied().unwrap_or(0);
    let mut out = Vec::with_capacity(t.numel() * 24);
    for row in t.data().chunks(cols.max(1)) {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(b',');
            }
            write!(out, "{v:.16e}")?;
        }
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path, cols: usize) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (line_no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                CoreError::Parse(format!("{}:{}: bad number {field:?}", path.display(), line_no + 1))
            })?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(CoreError::Parse(format!(
                "{}:{}: expected {cols} columns, found {}",
                path.display(),
                line_no + 1,
                data.len() - before
            )));
        }
        rows += 1;
    }
    Ok(Tensor::new(&[rows, cols], data)?)
}

pub fn x_path(dir: &Path, u: usize) -> std::path::PathBuf {
    dir.join(format!("env_{u}_X.csv"))
}

pub fn z_path(dir: &Path, u: usize) -> std::path::PathBuf {
    dir.join(format!("env_{u}_Z.csv"))
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        write_json(&dir.join("sem.json"), &self.sem)?;
        write_json(&dir.join("mixing.json"), &self.mixing)?;
        for (u, block) in self.envs.iter().enumerate() {
            write_matrix_csv(&x_path(dir, u), &block.x)?;
            write_matrix_csv(&z_path(dir, u), &block.z)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
        let sem: SemSpec = read_json(&dir.join("sem.json"))?;
        let mixing: MixingSpec = read_json(&dir.join("mixing.json"))?;
        let envs = (0..meta.m)
            .map(|u| {
                Ok(EnvBlock {
                    x: read_matrix_csv(&x_path(dir, u), meta.d)?,
                    z: read_matrix_csv(&z_path(dir, u), meta.n)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            meta,
            sem,
            mixing,
            envs,
        })
    }

    pub fn observations(&self) -> Observations {
        Observations {
            d: self.meta.d,
            envs: self.envs.iter().map(|b| b.x.clone()).collect(),
        }
    }

    /// Ground-truth latents of all environments stacked in environment order.
    pub fn stacked_latents(&self) -> Tensor {
        stack(self.envs.iter().map(|b| &b.z), self.meta.n)
    }
}

/// What the estimator is allowed to see: observed samples per environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub d: usize,
    pub envs: Vec<Tensor>,
}

impl Observations {
    pub fn load(dir: &Path) -> Result<Observations> {
        let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
        let envs = (0..meta.m)
            .map(|u| read_matrix_csv(&x_path(dir, u), meta.d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Observations { d: meta.d, envs })
    }

    pub fn m(&self) -> usize {
        self.envs.len()
    }

    pub fn rows(&self, u: usize) -> usize {
        self.envs[u].shape()[0]
    }

    pub fn total_rows(&self) -> usize {
        (0..self.m()).map(|u| self.rows(u)).sum()
    }

    pub fn stacked(&self) -> Tensor {
        stack(self.envs.iter(), self.d)
    }
}

pub fn stack<'a>(blocks: impl Iterator<Item = &'a Tensor>, cols: usize) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for b in blocks {
        data.extend_from_slice(b.data());
        rows += b.shape()[0];
    }
    Tensor::new(&[rows, cols], data).expect("consistent block widths")
}
