//! Voxel-wise saliency: `|dp_i / dx_j|` for every output visit `i` and input
//! visit `j` of a subject, per-subject normalization and cohort averages.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Forward, Mode, ModelParams};
use crate::parallel::{self, Exec};
use crate::synth::write_volume;
use crate::tensor::Tensor;

/// Row-major `m x m` grid of saliency volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMatrix {
    pub subject: String,
    pub m: usize,
    /// Cell `(i, j)` at `i * m + j`, each shaped like one input volume.
    pub cells: Vec<Tensor>,
    /// Divisor applied by [`normalize_subject`]; `None` before normalization
    /// or when the grid is all zero.
    pub norm_constant: Option<f32>,
}

impl SaliencyMatrix {
    pub fn cell(&self, i: usize, j: usize) -> &Tensor {
        &self.cells[i * self.m + j]
    }
}

/// One forward pass in eval mode, then one backward pass per output visit.
pub fn saliency_matrix(
    params: &ModelParams,
    subject: &str,
    volumes: &[Tensor],
    mode: Mode,
    exec: Exec,
) -> Result<SaliencyMatrix> {
    if mode.is_train() {
        return Err(Error::invalid(
            "saliency_matrix",
            "model must be in eval mode",
        ));
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, params, Mode::Eval);
    let (input, preds) = fwd.sequence(&mut tape, volumes)?;
    let m = volumes.len();
    let vol_shape = volumes[0].shape().to_vec();
    let per = volumes[0].len();
    let tape = &tape;
    let rows = parallel::map_range(exec, m, |i| -> Result<Vec<Tensor>> {
        let g = tape.backward(preds[i])?;
        let zeros = vec![0.0f32; per * m];
        let data = g.data(input).unwrap_or(&zeros);
        (0..m)
            .map(|j| {
                Tensor::new(
                    vol_shape.clone(),
                    data[j * per..(j + 1) * per]
                        .iter()
                        .map(|v| v.abs())
                        .collect(),
                )
            })
            .collect()
    });
    let mut cells = Vec::with_capacity(m * m);
    for r in rows {
        cells.extend(r?);
    }
    Ok(SaliencyMatrix {
        subject: subject.to_string(),
        m,
        cells,
        norm_constant: None,
    })
}

/// How the per-subject reference value is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRule {
    /// `0.98 * max`
    #[default]
    ScaledMax,
    /// 98th percentile of all voxels of the grid.
    Percentile,
}

/// Divides every voxel by the subject's reference value and clips to
/// `[0, 1]`. Returns the matrix and `true` when the grid was all zero (it is
/// then returned unchanged).
pub fn normalize_subject(mut matrix: SaliencyMatrix, rule: NormRule) -> (SaliencyMatrix, bool) {
    let max = matrix
        .cells
        .iter()
        .map(Tensor::max_abs)
        .fold(0.0f32, f32::max);
    if max == 0.0 {
        matrix.norm_constant = None;
        return (matrix, true);
    }
    let constant = match rule {
        NormRule::ScaledMax => 0.98 * max,
        NormRule::Percentile => {
            let mut all: Vec<f32> = matrix
                .cells
                .iter()
                .flat_map(|c| c.data().iter().map(|v| v.abs()))
                .collect();
            all.sort_by(f32::total_cmp);
            let k = ((0.98 * (all.len() - 1) as f64).round() as usize).min(all.len() - 1);
            if all[k] > 0.0 {
                all[k]
            } else {
                0.98 * max
            }
        }
    };
    for c in &mut matrix.cells {
        c.data_mut()
            .iter_mut()
            .for_each(|v| *v = (v.abs() / constant).clamp(0.0, 1.0));
    }
    matrix.norm_constant = Some(constant);
    (matrix, false)
}

/// Which cells of each grid enter an average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSelector {
    All,
    Diagonal,
    /// `j > i`: influence of later visits.
    Upper,
    Lower,
    /// One fixed cell; grids too small to contain it are skipped.
    Cell(usize, usize),
}

impl CellSelector {
    fn keeps(self, i: usize, j: usize) -> bool {
        match self {
            CellSelector::All => true,
            CellSelector::Diagonal => i == j,
            CellSelector::Upper => j > i,
            CellSelector::Lower => j < i,
            CellSelector::Cell(a, b) => (i, j) == (a, b),
        }
    }
}

/// Voxel-wise mean over the selected cells of all matrices.
pub fn average_map(matrices: &[SaliencyMatrix], selector: CellSelector) -> Result<Tensor> {
    let mut acc: Option<(Vec<f64>, Vec<usize>)> = None;
    let mut count = 0usize;
    for mat in matrices {
        for i in 0..mat.m {
            for j in 0..mat.m {
                if !selector.keeps(i, j) {
                    continue;
                }
                let c = mat.cell(i, j);
                let (sum, shape) =
                    acc.get_or_insert_with(|| (vec![0.0; c.len()], c.shape().to_vec()));
                if c.shape() != shape.as_slice() {
                    return Err(Error::shape(
                        "average_map",
                        format!("{:?} vs {shape:?}", c.shape()),
                    ));
                }
                sum.iter_mut()
                    .zip(c.data())
                    .for_each(|(s, &v)| *s += v as f64);
                count += 1;
            }
        }
    }
    let (sum, shape) = acc.ok_or_else(|| Error::invalid("average_map", "selection is empty"))?;
    Tensor::new(
        shape,
        sum.into_iter().map(|s| (s / count as f64) as f32).collect(),
    )
}

/// Writes every cell as `<subject>_p<i>_x<j>.lvol` plus `saliency.csv`
/// listing `subject,i,j,norm_constant,file` (1-based visit numbers).
pub fn write_matrices(dir: &Path, matrices: &[SaliencyMatrix]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("subject,i,j,norm_constant,file\n");
    for mat in matrices {
        for i in 0..mat.m {
            for j in 0..mat.m {
                let name = format!("{}_p{}_x{}.lvol", mat.subject, i + 1, j + 1);
                write_volume(&dir.join(&name), mat.cell(i, j))?;
                let c = mat
                    .norm_constant
                    .map(|c| format!("{c:e}"))
                    .unwrap_or_default();
                writeln!(index, "{},{},{},{c},{name}", mat.subject, i + 1, j + 1)
                    .expect("string write");
            }
        }
    }
    let path = dir.join("saliency.csv");
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}
