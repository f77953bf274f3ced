use rand_chacha::ChaCha8Rng;

use super::params::{DenseIdx, ModelParams, Variant};
use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Train mode draws dropout masks from the given stream and normalizes with
/// batch statistics; eval mode is deterministic and uses running statistics.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
}

/// Stacks `[1, D, D, D]` volumes into one `[N, 1, D, D, D]` batch.
pub fn stack_volumes(volumes: &[&Tensor]) -> Result<Tensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::invalid("encode", "empty volume list"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * volumes.len());
    for v in volumes {
        if v.shape() != shape.as_slice() {
            return Err(Error::shape(
                "encode",
                format!("volume {:?} differs from {shape:?}", v.shape()),
            ));
        }
        data.extend_from_slice(v.data());
    }
    let mut out_shape = vec![volumes.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(out_shape, data)
}

/// `g_t` = mean of the features of all later visits; the last visit keeps its own.
pub fn longitudinal_pool(tape: &mut Tape, features: &[Var]) -> Result<Vec<Var>> {
    if features.is_empty() {
        return Err(Error::invalid(
            "longitudinal_pool",
            "empty feature sequence",
        ));
    }
    let m = features.len();
    (0..m)
        .map(|t| {
            if t + 1 < m {
                tape.mean_of_set(&features[t + 1..])
            } else {
                Ok(features[t])
            }
        })
        .collect()
}

/// `h_t = tanh(W_f [c_t, g_t] + b_f)`
pub fn fuse(tape: &mut Tape, c: Var, g: Var, w: Var, b: Var) -> Result<Var> {
    if tape.shape(c) != tape.shape(g) || tape.shape(c).len() != 1 {
        return Err(Error::shape(
            "fuse",
            format!(
                "c_t {:?} and g_t {:?} must be equal-width vectors",
                tape.shape(c),
                tape.shape(g)
            ),
        ));
    }
    let cat = tape.concat(&[c, g], 0)?;
    let lin = tape.dense(cat, w, b)?;
    Ok(tape.tanh(lin))
}

/// One bias-free GRU update where `z` gates the previous state:
/// `h' = z * h'_prev + (1 - z) * tanh(W_h h + U_h (r * h'_prev))`.
pub fn gru_step(tape: &mut Tape, input: Var, prev: Var, p: &GruVars) -> Result<Var> {
    let gate = |tape: &mut Tape, w: Var, u: Var| -> Result<Var> {
        let a = tape.linear(input, w)?;
        let b = tape.linear(prev, u)?;
        let s = tape.add(a, b)?;
        Ok(tape.sigmoid(s))
    };
    let z = gate(tape, p.w_z, p.u_z)?;
    let r = gate(tape, p.w_r, p.u_r)?;
    let reset_prev = tape.mul(r, prev)?;
    let a = tape.linear(input, p.w_h)?;
    let b = tape.linear(reset_prev, p.u_h)?;
    let pre = tape.add(a, b)?;
    let candidate = tape.tanh(pre);
    let keep = tape.mul(z, prev)?;
    let one_minus_z = tape.affine(z, -1.0, 1.0);
    let fresh = tape.mul(one_minus_z, candidate)?;
    tape.add(keep, fresh)
}

/// Parameters bound onto a tape for one forward pass.
pub struct Forward<'p, 'r> {
    params: &'p ModelParams,
    vars: Vec<Var>,
    rng: Option<&'r mut ChaCha8Rng>,
    norm_updates: Vec<Option<BatchStats>>,
}

impl<'p, 'r> Forward<'p, 'r> {
    pub fn new(tape: &mut Tape, params: &'p ModelParams, mode: Mode<'r>) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        Self::with_vars(params, vars, mode).expect("one node per entry")
    }

    /// Uses parameter nodes the caller already recorded, one per layout entry.
    pub fn with_vars(params: &'p ModelParams, vars: Vec<Var>, mode: Mode<'r>) -> Result<Self> {
        if vars.len() != params.tensors.len() {
            return Err(Error::shape(
                "forward_sequence",
                format!(
                    "{} parameter nodes for {} layout entries",
                    vars.len(),
                    params.tensors.len()
                ),
            ));
        }
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        };
        Ok(Forward {
            params,
            vars,
            rng,
            norm_updates: vec![None; params.norms.len()],
        })
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Tape handles of every parameter, in layout order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    /// Batch statistics gathered in train mode, one slot per norm layer.
    pub fn into_norm_updates(self) -> Vec<Option<BatchStats>> {
        self.norm_updates
    }

    fn check_volume_shape(&self, shape: &[usize]) -> Result<()> {
        let d = self.params.arch.input_extent;
        let spatial = &shape[shape.len().saturating_sub(3)..];
        let ok = (shape.len() == 4 || shape.len() == 5)
            && shape[shape.len() - 4] == 1
            && spatial == [d, d, d];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "encode",
                format!("expected [N, 1, {d}, {d}, {d}] volumes, got {shape:?}"),
            ))
        }
    }

    /// Convolutional blocks (conv, norm, relu, dropout; twice; then max pool)
    /// flattened to `[N, flatten_width]`.
    pub fn conv_trunk(&mut self, tape: &mut Tape, volumes: Var) -> Result<Var> {
        let shape = tape.shape(volumes).to_vec();
        self.check_volume_shape(&shape)?;
        let n = if shape.len() == 5 { shape[0] } else { 1 };
        let layout = &self.params.layout;
        let dropout = self.params.arch.dropout;
        let mut x = volumes;
        for block in &layout.convs {
            for conv in block {
                let y = tape.conv3d(x, self.vars[conv.kernels], self.vars[conv.bias])?;
                let (g, b) = (self.vars[conv.gamma], self.vars[conv.beta]);
                let y = if self.rng.is_some() {
                    let (y, stats) = tape.batchnorm_train(y, g, b)?;
                    self.norm_updates[conv.norm] = Some(stats);
                    y
                } else {
                    tape.batchnorm_eval(y, g, b, &self.params.norms[conv.norm])?
                };
                let y = tape.relu(y);
                x = tape.dropout(y, dropout, self.rng.as_deref_mut())?;
            }
            x = tape.maxpool3d(x)?;
        }
        tape.reshape(x, &[n, self.params.arch.flatten_width()])
    }

    fn dense_tanh(&self, tape: &mut Tape, x: Var, d: DenseIdx) -> Result<Var> {
        let y = tape.dense(x, self.vars[d.weight], self.vars[d.bias])?;
        Ok(tape.tanh(y))
    }

    /// Two tanh FC layers from flattened conv output to `[N, feature_width]`.
    pub fn encoder_fc(&mut self, tape: &mut Tape, flat: Var) -> Result<Var> {
        let [fc0, fc1] = self.params.layout.fc;
        let h = self.dense_tanh(tape, flat, fc0)?;
        self.dense_tanh(tape, h, fc1)
    }

    /// Volumes `[N, 1, D, D, D]` (or one `[1, D, D, D]`) to features `[N, feature_width]`.
    pub fn encode(&mut self, tape: &mut Tape, volumes: Var) -> Result<Var> {
        let flat = self.conv_trunk(tape, volumes)?;
        self.encoder_fc(tape, flat)
    }

    fn head(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.params.layout.head;
        let logit = tape.dense(x, self.vars[h.weight], self.vars[h.bias])?;
        Ok(tape.sigmoid(logit))
    }

    fn gru_vars(&self) -> Result<GruVars> {
        let g =
            self.params.layout.gru.ok_or_else(|| {
                Error::invalid("forward_sequence", "variant has no recurrent layer")
            })?;
        Ok(GruVars {
            w_z: self.vars[g.w_z],
            w_r: self.vars[g.w_r],
            w_h: self.vars[g.w_h],
            u_z: self.vars[g.u_z],
            u_r: self.vars[g.u_r],
            u_h: self.vars[g.u_h],
        })
    }

    /// Per-visit probabilities `p_1..p_m` (each a `[1]` node) from per-visit features.
    pub fn predict_from_features(&mut self, tape: &mut Tape, features: &[Var]) -> Result<Vec<Var>> {
        if features.is_empty() {
            return Err(Error::invalid("forward_sequence", "empty visit sequence"));
        }
        let m = features.len();
        match self.params.variant {
            Variant::Cnn => features.iter().map(|&c| self.head(tape, c)).collect(),
            Variant::CnnAp => {
                let include = self.params.arch.ap_include_current;
                (0..m)
                    .map(|t| {
                        let pool: Vec<Var> = if include || m == 1 {
                            features.to_vec()
                        } else {
                            features
                                .iter()
                                .enumerate()
                                .filter(|&(u, _)| u != t)
                                .map(|(_, &c)| c)
                                .collect()
                        };
                        let avg = tape.mean_of_set(&pool)?;
                        let cat = tape.concat(&[features[t], avg], 0)?;
                        self.head(tape, cat)
                    })
                    .collect()
            }
            Variant::CnnRnn | Variant::CnnRnnLp => {
                let gru = self.gru_vars()?;
                let inputs = if let Some(f) = self.params.layout.fusion {
                    let pooled = longitudinal_pool(tape, features)?;
                    let (w, b) = (self.vars[f.weight], self.vars[f.bias]);
                    features
                        .iter()
                        .zip(&pooled)
                        .map(|(&c, &g)| fuse(tape, c, g, w, b))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    features.to_vec()
                };
                let width = self.params.arch.feature_width;
                let mut state = tape.leaf(Tensor::zeros(vec![width]));
                let mut out = Vec::with_capacity(m);
                for h in inputs {
                    state = gru_step(tape, h, state, &gru)?;
                    out.push(self.head(tape, state)?);
                }
                Ok(out)
            }
        }
    }

    /// Splits a `[N, width]` feature matrix into per-row vectors.
    pub fn rows(tape: &mut Tape, features: Var) -> Result<Vec<Var>> {
        let n = tape.shape(features)[0];
        (0..n).map(|i| tape.select(features, i)).collect()
    }

    /// Full sequence forward: stacks the visits, encodes them with shared
    /// weights and runs the variant head. Returns the stacked input leaf and
    /// the per-visit probability nodes.
    pub fn sequence(&mut self, tape: &mut Tape, volumes: &[Tensor]) -> Result<(Var, Vec<Var>)> {
        if volumes.is_empty() {
            return Err(Error::invalid("forward_sequence", "empty visit sequence"));
        }
        let refs: Vec<&Tensor> = volumes.iter().collect();
        let input = tape.leaf(stack_volumes(&refs)?);
        let feats = self.encode(tape, input)?;
        let rows = Self::rows(tape, feats)?;
        let preds = self.predict_from_features(tape, &rows)?;
        Ok((input, preds))
    }
}

/// Eval-mode probabilities for one subject.
pub fn predict_sequence(params: &ModelParams, volumes: &[Tensor]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, params, Mode::Eval);
    let (_, preds) = fwd.sequence(&mut tape, volumes)?;
    Ok(preds.iter().map(|&p| tape.scalar(p)).collect())
}

/// Eval-mode flattened conv-trunk output for each volume, `[flatten_width]` each.
pub fn trunk_features(params: &ModelParams, volumes: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, params, Mode::Eval);
    let refs: Vec<&Tensor> = volumes.iter().collect();
    let input = tape.leaf(stack_volumes(&refs)?);
    let flat = fwd.conv_trunk(&mut tape, input)?;
    let width = params.arch.flatten_width();
    Ok(tape
        .value(flat)
        .data()
        .chunks(width)
        .map(|c| Tensor::from_vec(c.to_vec()))
        .collect())
}
