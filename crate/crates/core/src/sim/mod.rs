//! Labelled synthetic physics scenes and the JSON-lines dataset format.
//!
//! Three scene recipes cover the relational-reasoning experiments:
//!
//! - `mixed6`: six particles — a rigid Y-shaped light bar (3-group), a
//!   spring-coupled pair, and one free particle.
//! - `category3` / `category2`: three particles forming one group whose
//!   interaction type is drawn uniformly from {free, spring, light bar}
//!   (`category2` restricts to {free, light bar}).
//! - `charged2`: a fixed charged particle and a mobile unit charge coupled
//!   by a repulsive Coulomb force.

pub mod dynamics;
pub mod generate;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub use generate::{generate_dataset, simulate_charged};

/// Scene and integrator parameters. `dt` is the integrator substep; frames
/// are recorded every `substeps` substeps, so consecutive frames are
/// `dt * substeps` time units apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_agents: usize,
    pub t_past: usize,
    pub t_future: usize,
    pub dt: f64,
    pub substeps: usize,
    pub spring_k: f64,
    pub coulomb_c: f64,
    pub charge_range: [f64; 2],
    pub init_pos_box: f64,
    pub init_vel_sigma: f64,
    /// Std of the sampled angular velocity for rigid (light-bar) groups.
    pub omega_sigma: f64,
    /// Coulomb force clip radius.
    pub r_min: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_agents: 6,
            t_past: 10,
            t_future: 10,
            dt: 0.001,
            substeps: 10,
            spring_k: 1.0,
            coulomb_c: 1.0,
            charge_range: [0.5, 5.0],
            init_pos_box: 2.0,
            init_vel_sigma: 0.5,
            omega_sigma: 6.0,
            r_min: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_past < 2 {
            return Err(Error::config("t_past must be >= 2"));
        }
        if self.substeps < 1 {
            return Err(Error::config("substeps must be >= 1"));
        }
        let positives: [(&str, f64); 8] = [
            ("dt", self.dt),
            ("spring_k", self.spring_k),
            ("coulomb_c", self.coulomb_c),
            ("init_pos_box", self.init_pos_box),
            ("init_vel_sigma", self.init_vel_sigma),
            ("omega_sigma", self.omega_sigma),
            ("r_min", self.r_min),
            ("t_future", self.t_future as f64),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_agents == 0 {
            return Err(Error::config("n_agents must be positive"));
        }
        if self.charge_range[0] <= 0.0 || self.charge_range[1] < self.charge_range[0] {
            return Err(Error::config(format!(
                "invalid charge_range {:?}",
                self.charge_range
            )));
        }
        Ok(())
    }

    /// Total recorded frames per trajectory.
    pub fn total_frames(&self) -> usize {
        self.t_past + self.t_future
    }

    /// Time between recorded frames.
    pub fn frame_dt(&self) -> f64 {
        self.dt * self.substeps as f64
    }
}

/// Ground-truth interaction type of a labelled group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Free,
    Spring,
    Lightbar,
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKind::Free => write!(f, "free"),
            GroupKind::Spring => write!(f, "spring"),
            GroupKind::Lightbar => write!(f, "lightbar"),
        }
    }
}

/// Scene recipe selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Mixed6,
    Category3,
    Category2,
    Charged2,
}

impl Experiment {
    pub fn required_agents(&self) -> usize {
        match self {
            Experiment::Mixed6 => 6,
            Experiment::Category3 | Experiment::Category2 => 3,
            Experiment::Charged2 => 2,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Experiment::Mixed6 => write!(f, "mixed6"),
            Experiment::Category3 => write!(f, "category3"),
            Experiment::Category2 => write!(f, "category2"),
            Experiment::Charged2 => write!(f, "charged2"),
        }
    }
}

/// One simulated scene with its relation labels.
///
/// `traj[agent][frame] = [x, y]` in raw (unnormalized) coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledSample {
    pub traj: Vec<Vec<[f64; 2]>>,
    pub groups: Vec<Vec<usize>>,
    pub types: Vec<GroupKind>,
    pub charge: Option<f64>,
}

impl LabelledSample {
    pub fn n_agents(&self) -> usize {
        self.traj.len()
    }

    pub fn n_frames(&self) -> usize {
        self.traj.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, n_agents: usize, frames: usize) -> Result<()> {
        if self.traj.len() != n_agents {
            return Err(Error::config(format!(
                "sample has {} agents, expected {n_agents}",
                self.traj.len()
            )));
        }
        for t in &self.traj {
            if t.len() != frames {
                return Err(Error::config(format!(
                    "trajectory has {} frames, expected {frames}",
                    t.len()
                )));
            }
            for p in t {
                if !p[0].is_finite() || !p[1].is_finite() {
                    return Err(Error::numeric("non-finite trajectory value"));
                }
            }
        }
        if self.groups.len() != self.types.len() {
            return Err(Error::config("groups/types length mismatch"));
        }
        for grp in &self.groups {
            if grp.iter().any(|&i| i >= n_agents) {
                return Err(Error::config("group references a nonexistent agent"));
            }
        }
        Ok(())
    }
}

/// Dataset header written as the first JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub experiment: Experiment,
    pub n_agents: usize,
    pub t_past: usize,
    pub t_future: usize,
    pub seed: u64,
    pub norm_mean: [f64; 2],
    pub norm_std: f64,
    pub scene_config: SceneConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: usize,
    traj: Vec<Vec<[f64; 2]>>,
    groups: Vec<Vec<usize>>,
    types: Vec<GroupKind>,
    charge: Option<f64>,
}

/// An ordered collection of samples sharing one [`DatasetMeta`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<LabelledSample>,
}

impl Dataset {
    /// Serialize as JSON lines: meta first, then one line per sample.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.meta)?;
        out.push(b'\n');
        for (sample_id, s) in self.samples.iter().enumerate() {
            let rec = SampleRecord {
                sample_id,
                traj: s.traj.clone(),
                groups: s.groups.clone(),
                types: s.types.clone(),
                charge: s.charge,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_jsonl()?)
    }

    pub fn read_jsonl(path: &Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let meta_line = lines
            .next()
            .ok_or_else(|| Error::config(format!("empty dataset file {}", path.display())))??;
        let meta: DatasetMeta = serde_json::from_str(&meta_line)?;
        let frames = meta.t_past + meta.t_future;
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)?;
            if rec.sample_id != samples.len() {
                return Err(Error::config(format!(
                    "sample_id {} out of order (expected {})",
                    rec.sample_id,
                    samples.len()
                )));
            }
            let s = LabelledSample {
                traj: rec.traj,
                groups: rec.groups,
                types: rec.types,
                charge: rec.charge,
            };
            s.validate(meta.n_agents, frames)?;
            samples.push(s);
        }
        Ok(Dataset { meta, samples })
    }

    /// Map raw coordinates into normalized model space.
    pub fn normalize(&self, x: f64) -> f64 {
        // isotropic: both axes share one std
        x / self.meta.norm_std
    }

    pub fn norm_point(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.meta.norm_mean[0]) / self.meta.norm_std,
            (p[1] - self.meta.norm_mean[1]) / self.meta.norm_std,
        ]
    }

    pub fn denorm_point(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] * self.meta.norm_std + self.meta.norm_mean[0],
            p[1] * self.meta.norm_std + self.meta.norm_mean[1],
        ]
    }
}

/// Compute per-dataset normalization stats: per-axis mean and a pooled
/// isotropic std (aspect-preserving).
pub fn normalization_stats(samples: &[LabelledSample]) -> ([f64; 2], f64) {
    let mut count = 0usize;
    let mut mean = [0.0f64; 2];
    for s in samples {
        for t in &s.traj {
            for p in t {
                mean[0] += p[0];
                mean[1] += p[1];
                count += 1;
            }
        }
    }
    if count == 0 {
        return ([0.0, 0.0], 1.0);
    }
    mean[0] /= count as f64;
    mean[1] /= count as f64;
    let mut ss = 0.0f64;
    for s in samples {
        for t in &s.traj {
            for p in t {
                let dx = p[0] - mean[0];
                let dy = p[1] - mean[1];
                ss += dx * dx + dy * dy;
            }
        }
    }
    let std = (ss / (2.0 * count as f64)).sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

/// Stream a dataset to a writer without building the byte buffer (used by
/// tests that want to inspect huge datasets; the CLI uses `write_jsonl`).
pub fn write_jsonl_to(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(&ds.to_jsonl()?)?;
    Ok(())
}
