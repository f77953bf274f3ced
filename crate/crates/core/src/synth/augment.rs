use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{voxel_index, Subject};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Training-set expansion factor: each subject is kept and joined by
    /// `factor - 1` posed copies.
    pub factor: usize,
    /// Largest translation per axis, in voxels (at most 2).
    pub max_shift: i32,
    pub tilt: bool,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            factor: 10,
            max_shift: 2,
            tilt: true,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::config("augment.factor", "must be >= 1"));
        }
        if !(0..=2).contains(&self.max_shift) {
            return Err(Error::config("augment.max_shift", "must be in [0, 2]"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("augment.flip_prob", "must be a probability"));
        }
        Ok(())
    }
}

/// Shear approximating a small rotation: voxels whose coordinate along
/// `pivot` lies in the upper half are shifted circularly by `step` along
/// `axis`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tilt {
    pub pivot: usize,
    pub axis: usize,
    pub step: i32,
}

/// Rigid pose applied to every visit of one augmented copy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pose {
    pub shift: [i32; 3],
    pub tilt: Option<Tilt>,
    /// Mirror the left-right (x) axis.
    pub flip: bool,
}

impl Pose {
    pub fn identity() -> Self {
        Pose::default()
    }
}

pub fn random_pose<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> Pose {
    let s = cfg.max_shift.clamp(0, 2);
    let shift = [
        rng.gen_range(-s..=s),
        rng.gen_range(-s..=s),
        rng.gen_range(-s..=s),
    ];
    let tilt = if cfg.tilt && rng.gen_bool(0.5) {
        let pivot = rng.gen_range(0..3);
        let axis = (pivot + rng.gen_range(1..3)) % 3;
        let step = if rng.gen_bool(0.5) { 1 } else { -1 };
        Some(Tilt { pivot, axis, step })
    } else {
        None
    };
    Pose {
        shift,
        tilt,
        flip: rng.gen_bool(cfg.flip_prob),
    }
}

/// Applies `pose` to a `[.., D, D, D]` volume: flip, then tilt, then a
/// zero-filled translation.
pub fn apply_pose(volume: &Tensor, pose: &Pose) -> Tensor {
    let d = *volume.shape().last().expect("volume");
    let src = volume.data();
    let mut out = vec![0.0f32; src.len()];
    let di = d as i32;
    let shift = pose.shift.map(|s| s.clamp(-2, 2));
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                // walk back from the destination voxel to its source
                let mut p = [
                    x as i32 - shift[0],
                    y as i32 - shift[1],
                    z as i32 - shift[2],
                ];
                if p.iter().any(|&c| c < 0 || c >= di) {
                    continue;
                }
                if let Some(t) = pose.tilt {
                    if p[t.pivot] >= di / 2 {
                        p[t.axis] = (p[t.axis] - t.step).rem_euclid(di);
                    }
                }
                if pose.flip {
                    p[0] = di - 1 - p[0];
                }
                out[voxel_index(d, x, y, z)] =
                    src[voxel_index(d, p[0] as usize, p[1] as usize, p[2] as usize)];
            }
        }
    }
    Tensor::new(volume.shape().to_vec(), out).expect("same shape")
}

/// `n_copies` posed copies of `subject`, each sharing one pose across all of
/// its visits. Copy ids append `#a<k>`.
pub fn augment(
    subject: &Subject,
    n_copies: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<Vec<Subject>> {
    if n_copies == 0 {
        return Err(Error::invalid("augment", "n_copies must be >= 1"));
    }
    let key = subject
        .id
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = rng::stream(seed, "augment", key);
    Ok((0..n_copies)
        .map(|k| {
            let pose = random_pose(&mut rng, cfg);
            Subject {
                id: format!("{}#a{k}", subject.id),
                volumes: subject
                    .volumes
                    .iter()
                    .map(|v| apply_pose(v, &pose))
                    .collect(),
                ..subject.clone()
            }
        })
        .collect())
}
