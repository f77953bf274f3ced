//! Synthetic longitudinal volumes with a progressive, bilateral atrophy
//! signal, plus augmentation, stratified splitting and on-disk formats.

mod augment;
mod manifest;
mod split;
mod volume_io;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::CohortRole;
use crate::parallel::{self, Exec};
use crate::rng;
use crate::tensor::Tensor;

pub use augment::{apply_pose, augment, random_pose, AugmentConfig, Pose, Tilt};
pub use manifest::{
    load_dataset, save_dataset, DatasetManifest, SplitRecord, SubjectRecord, MANIFEST_FILE,
};
pub use split::{split, Split};
pub use volume_io::{
    decode_volume, encode_volume, read_volume, write_volume, VOLUME_MAGIC, VOLUME_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Cubic extent `D`; must be divisible by 16.
    pub extent: usize,
    pub n_control: usize,
    pub n_positive: usize,
    pub n_consistency_only: usize,
    /// Largest visit count `m_max`.
    pub max_visits: usize,
    /// Relative weights of visit counts `1..=max_visits`; empty means uniform.
    pub visit_weights: Vec<f64>,
    /// Standard deviation of the additive Gaussian noise.
    #[serde(serialize_with = "crate::short_f32")]
    pub noise: f32,
    /// Mean intensity of the structure inside the atrophy region.
    #[serde(serialize_with = "crate::short_f32")]
    pub signal: f32,
    /// Per-visit decay rate range for positive subjects.
    #[serde(serialize_with = "crate::short_f32")]
    pub rate_min: f32,
    #[serde(serialize_with = "crate::short_f32")]
    pub rate_max: f32,
    /// Multiplier on the decay rate of consistency-only subjects.
    #[serde(serialize_with = "crate::short_f32")]
    pub consistency_rate_scale: f32,
    /// Largest number of decay steps already elapsed at the first visit.
    pub onset_max: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            extent: 16,
            n_control: 100,
            n_positive: 100,
            n_consistency_only: 0,
            max_visits: 5,
            visit_weights: Vec::new(),
            noise: 0.3,
            signal: 1.0,
            rate_min: 0.08,
            rate_max: 0.2,
            consistency_rate_scale: 1.5,
            onset_max: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || !self.extent.is_multiple_of(16) {
            return Err(Error::config(
                "data.extent",
                format!("{} is not a positive multiple of 16", self.extent),
            ));
        }
        if self.n_control == 0 || self.n_positive == 0 {
            return Err(Error::config(
                "data.n_control",
                "control and positive cohorts need at least one subject",
            ));
        }
        if self.max_visits == 0 {
            return Err(Error::config("data.max_visits", "must be >= 1"));
        }
        if !self.visit_weights.is_empty()
            && (self.visit_weights.len() != self.max_visits
                || self
                    .visit_weights
                    .iter()
                    .any(|w| !(*w >= 0.0 && w.is_finite()))
                || self.visit_weights.iter().all(|&w| w == 0.0))
        {
            return Err(Error::config(
                "data.visit_weights",
                format!(
                    "need {} finite non-negative weights, not all zero",
                    self.max_visits
                ),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be a finite value >= 0"));
        }
        if !self.signal.is_finite() {
            return Err(Error::config("data.signal", "must be finite"));
        }
        let rate_ok = |r: f32| (0.0..1.0).contains(&r);
        if !rate_ok(self.rate_min) || !rate_ok(self.rate_max) || self.rate_min > self.rate_max {
            return Err(Error::config(
                "data.rate_min",
                "need 0 <= rate_min <= rate_max < 1",
            ));
        }
        if !(self.consistency_rate_scale > 0.0)
            || !rate_ok(self.rate_max * self.consistency_rate_scale)
        {
            return Err(Error::config(
                "data.consistency_rate_scale",
                "scaled rates must stay in [0, 1)",
            ));
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.n_control + self.n_positive + self.n_consistency_only
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub role: CohortRole,
    /// `[1, D, D, D]` per visit, in visit order.
    pub volumes: Vec<Tensor>,
    pub labels: Vec<bool>,
    pub progression_rate: f32,
    /// Decay steps already elapsed at the first visit.
    pub onset: u32,
}

impl Subject {
    pub fn visits(&self) -> usize {
        self.volumes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn roles(&self) -> Vec<CohortRole> {
        self.subjects.iter().map(|s| s.role).collect()
    }
}

/// Geometry shared by every subject.
#[derive(Clone, Copy, Debug)]
struct Atlas {
    d: usize,
    /// Center of the left atrophy ball; the right one is its mirror in x.
    center: [f32; 3],
    radius: f32,
}

impl Atlas {
    fn new(d: usize) -> Self {
        let f = d as f32;
        Atlas {
            d,
            center: [0.3 * f - 0.5, 0.5 * f - 0.5, 0.5 * f - 0.5],
            radius: 0.19 * f,
        }
    }

    fn mirror_x(&self, x: f32) -> f32 {
        (self.d - 1) as f32 - x
    }

    fn centers(&self) -> [[f32; 3]; 2] {
        let [x, y, z] = self.center;
        [[x, y, z], [self.mirror_x(x), y, z]]
    }

    /// True inside either atrophy ball.
    fn in_region(&self, p: [f32; 3]) -> bool {
        self.centers()
            .iter()
            .any(|c| dist2(p, *c) <= self.radius * self.radius)
    }
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Linear index of `(x, y, z)` in a `D^3` volume; x varies slowest and is
/// the left-right axis.
pub fn voxel_index(d: usize, x: usize, y: usize, z: usize) -> usize {
    (x * d + y) * d + z
}

/// Mask of the bilateral atrophy region.
pub fn atrophy_mask(d: usize) -> Vec<bool> {
    let atlas = Atlas::new(d);
    let mut mask = vec![false; d * d * d];
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                mask[voxel_index(d, x, y, z)] = atlas.in_region([x as f32, y as f32, z as f32]);
            }
        }
    }
    mask
}

/// Mean of `volume` over the atrophy region.
pub fn region_mean(volume: &Tensor) -> f64 {
    let d = *volume.shape().last().expect("volume");
    let mask = atrophy_mask(d);
    let (sum, n) = volume
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    sum / n.max(1) as f64
}

struct Blob {
    center: [f32; 3],
    sigma: f32,
    amp: f32,
}

fn render_blobs(d: usize, blobs: &[Blob]) -> Vec<f32> {
    let mut out = vec![0.0f32; d * d * d];
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                let p = [x as f32, y as f32, z as f32];
                out[voxel_index(d, x, y, z)] = blobs
                    .iter()
                    .map(|b| b.amp * (-dist2(p, b.center) / (2.0 * b.sigma * b.sigma)).exp())
                    .sum();
            }
        }
    }
    out
}

/// Noise-free, undecayed anatomy of one subject: mirrored background blobs
/// plus the structure that positives lose over time.
fn anatomy<R: Rng>(rng: &mut R, cfg: &SynthConfig, atlas: &Atlas) -> Vec<f32> {
    let d = cfg.extent;
    let f = d as f32;
    let mut blobs = Vec::new();
    let count = rng.gen_range(3..=5);
    for _ in 0..count {
        let x = rng.gen_range(0.1 * f..0.5 * f);
        let y = rng.gen_range(0.2 * f..0.8 * f);
        let z = rng.gen_range(0.2 * f..0.8 * f);
        let sigma = rng.gen_range(0.08 * f..0.2 * f);
        let amp = rng.gen_range(0.2..0.6);
        blobs.push(Blob {
            center: [x, y, z],
            sigma,
            amp,
        });
        blobs.push(Blob {
            center: [atlas.mirror_x(x), y, z],
            sigma,
            amp,
        });
    }
    let amp = cfg.signal * rng.gen_range(0.8..1.2);
    for c in atlas.centers() {
        blobs.push(Blob {
            center: c,
            sigma: 0.6 * atlas.radius,
            amp,
        });
    }
    render_blobs(d, &blobs)
}

fn visit_count<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> usize {
    if cfg.visit_weights.is_empty() {
        rng.gen_range(1..=cfg.max_visits)
    } else {
        let dist = WeightedIndex::new(&cfg.visit_weights).expect("validated weights");
        dist.sample(rng) + 1
    }
}

fn subject_role(cfg: &SynthConfig, index: usize) -> CohortRole {
    if index < cfg.n_control {
        CohortRole::Control
    } else if index < cfg.n_control + cfg.n_positive {
        CohortRole::Positive
    } else {
        CohortRole::ConsistencyOnly
    }
}

/// Builds one subject from its own seed stream.
pub fn generate_subject(cfg: &SynthConfig, index: usize) -> Subject {
    let atlas = Atlas::new(cfg.extent);
    let role = subject_role(cfg, index);
    let mut rng = rng::stream(cfg.seed, "subject", index as u64);
    let base = anatomy(&mut rng, cfg, &atlas);
    let m = visit_count(&mut rng, cfg);
    let (rate, onset) = match role {
        CohortRole::Control => (0.0, 0),
        CohortRole::Positive | CohortRole::ConsistencyOnly => {
            let scale = if role == CohortRole::ConsistencyOnly {
                cfg.consistency_rate_scale
            } else {
                1.0
            };
            let r = if cfg.rate_max > cfg.rate_min {
                rng.gen_range(cfg.rate_min..cfg.rate_max)
            } else {
                cfg.rate_min
            };
            (r * scale, rng.gen_range(0..=cfg.onset_max))
        }
    };
    let mask = atrophy_mask(cfg.extent);
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).expect("finite noise");
    let d = cfg.extent;
    let volumes = (0..m)
        .map(|t| {
            let factor = (1.0 - rate).powi(onset as i32 + t as i32);
            let data = base
                .iter()
                .zip(&mask)
                .map(|(&v, &inside)| {
                    let v = if inside { v * factor } else { v };
                    if cfg.noise > 0.0 {
                        v + noise.sample(&mut rng)
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::new(vec![1, d, d, d], data).expect("cube")
        })
        .collect();
    Subject {
        id: format!("s{index:04}"),
        role,
        volumes,
        labels: vec![role.label(); m],
        progression_rate: rate,
        onset,
    }
}

/// Generates the whole cohort; subjects are built in parallel from
/// independent streams, so the result does not depend on the schedule.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let subjects = parallel::map_range(Exec::Parallel, cfg.n_subjects(), |i| {
        generate_subject(cfg, i)
    });
    Ok(Dataset {
        config: cfg.clone(),
        subjects,
    })
}
