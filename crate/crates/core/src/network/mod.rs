//! Stacked GRU regressor with an emotion head and an optional auxiliary head.
//!
//! Per layer and frame:
//!
//! ```text
//! z_t = σ(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = σ(W_r x_t + U_r h_{t-1} + b_r)
//! ĥ_t = tanh(W_h x_t + U_h (r_t ⊙ h_{t-1}) + b_h)
//! h_t = (1 − z_t) ⊙ h_{t-1} + z_t ⊙ ĥ_t
//! ```
//!
//! Layer k reads layer k−1's hidden sequence; both heads are affine maps of
//! the top layer.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{numeric_gradient, relative_error};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DdatError, Result};
use crate::matrix::{dot, Matrix};

/// Layer counts searched during structure selection.
pub const LAYER_GRID: [usize; 5] = [1, 3, 5, 7, 9];
/// Units-per-layer values searched during structure selection.
pub const UNIT_GRID: [usize; 3] = [40, 80, 120];

/// Second output path trained alongside emotion prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxHead {
    None,
    /// Reconstructs an input of the given width.
    Reconstruction { width: usize },
    /// Predicts the scalar perception uncertainty.
    Uncertainty,
}

impl AuxHead {
    pub fn width(self) -> usize {
        match self {
            AuxHead::None => 0,
            AuxHead::Reconstruction { width } => width,
            AuxHead::Uncertainty => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_layers: usize,
    pub units_per_layer: usize,
    pub input_dim: usize,
    pub aux_head: AuxHead,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(num_layers: usize, units_per_layer: usize, input_dim: usize) -> Self {
        NetworkConfig {
            num_layers,
            units_per_layer,
            input_dim,
            aux_head: AuxHead::None,
            seed: 0,
        }
    }

    pub fn with_aux(mut self, aux_head: AuxHead) -> Self {
        self.aux_head = aux_head;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.units_per_layer == 0 || self.input_dim == 0 {
            return Err(DdatError::invalid("network dimensions must be positive"));
        }
        if let AuxHead::Reconstruction { width: 0 } = self.aux_head {
            return Err(DdatError::invalid("reconstruction head width must be positive"));
        }
        Ok(())
    }

    /// Checks membership of the structure search grid.
    pub fn validate_grid(&self) -> Result<()> {
        self.validate()?;
        if !LAYER_GRID.contains(&self.num_layers) || !UNIT_GRID.contains(&self.units_per_layer) {
            return Err(DdatError::invalid(format!(
                "{} layers × {} units is outside the search grid",
                self.num_layers, self.units_per_layer
            )));
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let h = self.units_per_layer;
        let mut n = 0;
        for l in 0..self.num_layers {
            let input = if l == 0 { self.input_dim } else { h };
            n += 3 * (h * input + h * h + h);
        }
        n += h + 1;
        let aux = self.aux_head.width();
        if aux > 0 {
            n += aux * h + aux;
        }
        n
    }
}

/// The default 15-point structure grid.
pub fn default_structure_grid(input_dim: usize, aux_head: AuxHead, seed: u64) -> Vec<NetworkConfig> {
    LAYER_GRID
        .iter()
        .flat_map(|&l| {
            UNIT_GRID.iter().map(move |&u| NetworkConfig {
                num_layers: l,
                units_per_layer: u,
                input_dim,
                aux_head,
                seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Vec<f64>,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Vec<f64>,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Vec<f64>,
}

impl GruLayer {
    fn zeros(input: usize, hidden: usize) -> Self {
        GruLayer {
            w_z: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            b_z: vec![0.0; hidden],
            w_r: Matrix::zeros(hidden, input),
            u_r: Matrix::zeros(hidden, hidden),
            b_r: vec![0.0; hidden],
            w_h: Matrix::zeros(hidden, input),
            u_h: Matrix::zeros(hidden, hidden),
            b_h: vec![0.0; hidden],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }
}

/// Every trainable tensor of a network. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<GruLayer>,
    pub emotion: Linear,
    pub aux: Option<Linear>,
}

impl Params {
    pub fn zeros(config: &NetworkConfig) -> Params {
        let h = config.units_per_layer;
        let layers = (0..config.num_layers)
            .map(|l| GruLayer::zeros(if l == 0 { config.input_dim } else { h }, h))
            .collect();
        let aux = match config.aux_head.width() {
            0 => None,
            w => Some(Linear::zeros(h, w)),
        };
        Params {
            layers,
            emotion: Linear::zeros(h, 1),
            aux,
        }
    }

    /// Tensor buffers in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.extend([
                l.w_z.as_slice(),
                l.u_z.as_slice(),
                &l.b_z,
                l.w_r.as_slice(),
                l.u_r.as_slice(),
                &l.b_r,
                l.w_h.as_slice(),
                l.u_h.as_slice(),
                &l.b_h,
            ]);
        }
        out.extend([self.emotion.weight.as_slice(), &self.emotion.bias[..]]);
        if let Some(a) = &self.aux {
            out.extend([a.weight.as_slice(), &a.bias[..]]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.extend([
                l.w_z.as_mut_slice(),
                l.u_z.as_mut_slice(),
                &mut l.b_z[..],
                l.w_r.as_mut_slice(),
                l.u_r.as_mut_slice(),
                &mut l.b_r[..],
                l.w_h.as_mut_slice(),
                l.u_h.as_mut_slice(),
                &mut l.b_h[..],
            ]);
        }
        out.extend([self.emotion.weight.as_mut_slice(), &mut self.emotion.bias[..]]);
        if let Some(a) = &mut self.aux {
            out.extend([a.weight.as_mut_slice(), &mut a.bias[..]]);
        }
        out
    }

    /// Names matching [`Params::tensors`], for diagnostics.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.layers.len() {
            for n in ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"] {
                out.push(format!("layer{i}.{n}"));
            }
        }
        out.extend(["emotion.weight".to_owned(), "emotion.bias".to_owned()]);
        if self.aux.is_some() {
            out.extend(["aux.weight".to_owned(), "aux.bias".to_owned()]);
        }
        out
    }

    /// Parameters of the shared recurrent trunk only.
    pub fn shared_tensors(&self) -> Vec<&[f64]> {
        let n = self.layers.len() * 9;
        self.tensors().into_iter().take(n).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameter vector", self.len(), flat.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Params {
        let mut p = self.clone();
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        p
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruNetwork {
    pub config: NetworkConfig,
    pub params: Params,
}

/// Per-layer activations kept for backpropagation.
#[derive(Debug, Clone)]
struct LayerCache {
    /// T+1 rows; row 0 is the initial state.
    h: Matrix,
    z: Matrix,
    r: Matrix,
    cand: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    layers: Vec<LayerCache>,
}

/// Outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// ŷ, one value per frame.
    pub emotion: Vec<f64>,
    /// x̂ or û, T × aux width; `None` without an auxiliary head.
    pub aux: Option<Matrix>,
    /// Last hidden state of every layer, used to carry state across chunks.
    pub final_state: Vec<Vec<f64>>,
    cache: Option<ForwardCache>,
}

impl PredictionBundle {
    pub fn len(&self) -> usize {
        self.emotion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emotion.is_empty()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Top-layer hidden states h_1..h_T.
    pub fn top_hidden(&self) -> Option<Matrix> {
        self.cache.as_ref().map(|c| {
            let h = &c.layers.last().expect("at least one layer").h;
            h.slice_rows(1, h.rows())
        })
    }

    /// Drops the backprop cache.
    pub fn into_outputs(mut self) -> PredictionBundle {
        self.cache = None;
        self
    }
}

/// Per-frame loss derivatives with respect to the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradients {
    pub emotion: Vec<f64>,
    pub aux: Option<Matrix>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn fill_uniform(rng: &mut ChaCha8Rng, m: &mut Matrix) {
    let (fan_out, fan_in) = m.shape();
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in m.as_mut_slice() {
        *w = rng.random_range(-limit..limit);
    }
}

/// Creates a network with fan-scaled uniform weights and zero biases.
pub fn init_network(config: &NetworkConfig) -> Result<GruNetwork> {
    config.validate()?;
    let mut params = Params::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // aux head is drawn last so the other tensors do not depend on it
    for l in &mut params.layers {
        for m in [
            &mut l.w_z, &mut l.u_z, &mut l.w_r, &mut l.u_r, &mut l.w_h, &mut l.u_h,
        ] {
            fill_uniform(&mut rng, m);
        }
    }
    fill_uniform(&mut rng, &mut params.emotion.weight);
    if let Some(a) = &mut params.aux {
        fill_uniform(&mut rng, &mut a.weight);
    }
    Ok(GruNetwork {
        config: *config,
        params,
    })
}

impl GruNetwork {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.units_per_layer
    }

    /// Forward pass from a zero initial state, retaining the backprop cache.
    pub fn forward(&self, input: &Matrix) -> Result<PredictionBundle> {
        self.forward_from(input, None, true)
    }

    /// Forward pass without retaining activations.
    pub fn predict(&self, input: &Matrix) -> Result<PredictionBundle> {
        self.forward_from(input, None, false)
    }

    /// Forward pass from an explicit initial state per layer.
    pub fn forward_from(
        &self,
        input: &Matrix,
        initial: Option<&[Vec<f64>]>,
        keep_cache: bool,
    ) -> Result<PredictionBundle> {
        check_len("network input width", self.input_dim(), input.cols())?;
        if !input.is_finite() {
            return Err(DdatError::NonFinite("network input"));
        }
        if let Some(init) = initial {
            check_len("initial state layers", self.params.layers.len(), init.len())?;
        }
        let t_len = input.rows();
        let hd = self.hidden_dim();
        let mut layer_caches = Vec::with_capacity(self.params.layers.len());
        let mut final_state = Vec::with_capacity(self.params.layers.len());

        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        let mut cand = vec![0.0; hd];
        let mut rh = vec![0.0; hd];

        for (li, layer) in self.params.layers.iter().enumerate() {
            let below_owned;
            let below: &Matrix = if li == 0 {
                input
            } else {
                below_owned = last_hidden(&layer_caches);
                &below_owned
            };
            let mut h = Matrix::zeros(t_len + 1, hd);
            if let Some(init) = initial {
                check_len("initial state width", hd, init[li].len())?;
                h.row_mut(0).copy_from_slice(&init[li]);
            }
            let mut zc = Matrix::zeros(t_len, hd);
            let mut rc = Matrix::zeros(t_len, hd);
            let mut cc = Matrix::zeros(t_len, hd);
            for t in 0..t_len {
                let x = below.row(t);
                let (done, rest) = h.as_mut_slice().split_at_mut((t + 1) * hd);
                let prev = &done[t * hd..];
                let next = &mut rest[..hd];
                z.copy_from_slice(&layer.b_z);
                layer.w_z.gemv_acc(x, &mut z);
                layer.u_z.gemv_acc(prev, &mut z);
                r.copy_from_slice(&layer.b_r);
                layer.w_r.gemv_acc(x, &mut r);
                layer.u_r.gemv_acc(prev, &mut r);
                for i in 0..hd {
                    z[i] = sigmoid(z[i]);
                    r[i] = sigmoid(r[i]);
                    rh[i] = r[i] * prev[i];
                }
                cand.copy_from_slice(&layer.b_h);
                layer.w_h.gemv_acc(x, &mut cand);
                layer.u_h.gemv_acc(&rh, &mut cand);
                for i in 0..hd {
                    cand[i] = cand[i].tanh();
                    next[i] = (1.0 - z[i]) * prev[i] + z[i] * cand[i];
                }
                zc.row_mut(t).copy_from_slice(&z);
                rc.row_mut(t).copy_from_slice(&r);
                cc.row_mut(t).copy_from_slice(&cand);
            }
            final_state.push(h.row(t_len).to_vec());
            layer_caches.push(LayerCache {
                h,
                z: zc,
                r: rc,
                cand: cc,
            });
        }

        let top = &layer_caches.last().expect("at least one layer").h;
        let emotion: Vec<f64> = (0..t_len)
            .map(|t| dot(self.params.emotion.weight.row(0), top.row(t + 1)) + self.params.emotion.bias[0])
            .collect();
        let aux = self.params.aux.as_ref().map(|head| {
            let w = head.bias.len();
            let mut out = Matrix::zeros(t_len, w);
            for t in 0..t_len {
                let row = out.row_mut(t);
                row.copy_from_slice(&head.bias);
                head.weight.gemv_acc(top.row(t + 1), row);
            }
            out
        });

        let cache = keep_cache.then(|| ForwardCache {
            input: input.clone(),
            layers: layer_caches,
        });
        Ok(PredictionBundle {
            emotion,
            aux,
            final_state,
            cache,
        })
    }

    /// Exact backpropagation through time over the cached sequence.
    pub fn backward(&self, bundle: &PredictionBundle, grads: &OutputGradients) -> Result<Params> {
        let cache = bundle
            .cache
            .as_ref()
            .ok_or_else(|| DdatError::invalid("backward called without a retained forward cache"))?;
        let t_len = bundle.len();
        let hd = self.hidden_dim();
        check_len("emotion gradient length", t_len, grads.emotion.len())?;
        match (&self.params.aux, &grads.aux) {
            (Some(head), Some(g)) => {
                check_len("aux gradient length", t_len, g.rows())?;
                check_len("aux gradient width", head.bias.len(), g.cols())?;
            }
            (None, Some(_)) => {
                return Err(DdatError::invalid("aux gradient given for a network without an aux head"))
            }
            _ => {}
        }

        let mut out = self.params.zeros_like();

        // heads → gradient on top hidden states
        let top = &cache.layers.last().expect("at least one layer").h;
        let mut dh_ext = Matrix::zeros(t_len, hd);
        for t in 0..t_len {
            let h = top.row(t + 1);
            let g = grads.emotion[t];
            out.emotion.weight.outer_acc(&[g], h);
            out.emotion.bias[0] += g;
            self.params.emotion.weight.gemv_t_acc(&[g], dh_ext.row_mut(t));
        }
        if let (Some(head), Some(g), Some(dhead)) = (&self.params.aux, &grads.aux, &mut out.aux) {
            for t in 0..t_len {
                let gt = g.row(t);
                dhead.weight.outer_acc(gt, top.row(t + 1));
                for (b, v) in dhead.bias.iter_mut().zip(gt) {
                    *b += v;
                }
                head.weight.gemv_t_acc(gt, dh_ext.row_mut(t));
            }
        }

        let mut dh = vec![0.0; hd];
        let mut da_z = vec![0.0; hd];
        let mut da_r = vec![0.0; hd];
        let mut da_h = vec![0.0; hd];
        let mut drh = vec![0.0; hd];
        let mut rh = vec![0.0; hd];

        for li in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[li];
            let lc = &cache.layers[li];
            let below = if li == 0 {
                cache.input.clone()
            } else {
                let h = &cache.layers[li - 1].h;
                h.slice_rows(1, h.rows())
            };
            let need_dx = li > 0;
            let mut dx = Matrix::zeros(if need_dx { t_len } else { 0 }, below.cols());
            let g = &mut out.layers[li];
            let mut dh_next = vec![0.0; hd];

            for t in (0..t_len).rev() {
                let prev = lc.h.row(t);
                let z = lc.z.row(t);
                let r = lc.r.row(t);
                let cand = lc.cand.row(t);
                let x = below.row(t);
                for i in 0..hd {
                    dh[i] = dh_ext.get(t, i) + dh_next[i];
                    let dz = dh[i] * (cand[i] - prev[i]);
                    let dcand = dh[i] * z[i];
                    dh_next[i] = dh[i] * (1.0 - z[i]);
                    da_h[i] = dcand * (1.0 - cand[i] * cand[i]);
                    da_z[i] = dz * z[i] * (1.0 - z[i]);
                    rh[i] = r[i] * prev[i];
                }
                drh.fill(0.0);
                layer.u_h.gemv_t_acc(&da_h, &mut drh);
                for i in 0..hd {
                    let dr = drh[i] * prev[i];
                    dh_next[i] += drh[i] * r[i];
                    da_r[i] = dr * r[i] * (1.0 - r[i]);
                }
                layer.u_z.gemv_t_acc(&da_z, &mut dh_next);
                layer.u_r.gemv_t_acc(&da_r, &mut dh_next);

                g.w_z.outer_acc(&da_z, x);
                g.u_z.outer_acc(&da_z, prev);
                g.w_r.outer_acc(&da_r, x);
                g.u_r.outer_acc(&da_r, prev);
                g.w_h.outer_acc(&da_h, x);
                g.u_h.outer_acc(&da_h, &rh);
                for i in 0..hd {
                    g.b_z[i] += da_z[i];
                    g.b_r[i] += da_r[i];
                    g.b_h[i] += da_h[i];
                }
                if need_dx {
                    let dxr = dx.row_mut(t);
                    layer.w_z.gemv_t_acc(&da_z, dxr);
                    layer.w_r.gemv_t_acc(&da_r, dxr);
                    layer.w_h.gemv_t_acc(&da_h, dxr);
                }
            }
            if need_dx {
                dh_ext = dx;
            }
        }
        Ok(out)
    }
}

fn last_hidden(caches: &[LayerCache]) -> Matrix {
    let h = &caches.last().expect("previous layer").h;
    h.slice_rows(1, h.rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = NetworkConfig::new(2, 8, 4).with_seed(9).with_aux(AuxHead::Uncertainty);
        let a = init_network(&cfg).unwrap();
        assert_eq!(a, init_network(&cfg).unwrap());
        for l in &a.params.layers {
            assert!(l.b_z.iter().chain(&l.b_r).chain(&l.b_h).all(|&b| b == 0.0));
        }
        assert_eq!(a.params.emotion.bias, vec![0.0]);
        assert_eq!(a.params.len(), cfg.parameter_count());
    }

    #[test]
    fn gate_shapes_follow_config() {
        let net = init_network(&NetworkConfig::new(1, 8, 4)).unwrap();
        let l = &net.params.layers[0];
        assert_eq!(l.w_z.shape(), (8, 4));
        assert_eq!(l.u_z.shape(), (8, 8));
        assert_eq!(l.w_h.shape(), (8, 4));
        assert_eq!(l.u_r.shape(), (8, 8));
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let cfg = NetworkConfig::new(2, 5, 3).with_aux(AuxHead::Reconstruction { width: 3 });
        let net = GruNetwork {
            config: cfg,
            params: Params::zeros(&cfg),
        };
        let out = net.forward(&random_input(7, 3, 1)).unwrap();
        assert!(out.emotion.iter().all(|&v| v == 0.0));
        assert!(out.aux.unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(out.final_state.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_single_step_matches_scalar_evaluation() {
        let cfg = NetworkConfig::new(1, 1, 1);
        let mut net = GruNetwork {
            config: cfg,
            params: Params::zeros(&cfg),
        };
        let (wz, wr, wh, bz, bh) = (0.5, -0.3, 0.8, 0.1, -0.2);
        {
            let l = &mut net.params.layers[0];
            l.w_z.set(0, 0, wz);
            l.w_r.set(0, 0, wr);
            l.w_h.set(0, 0, wh);
            l.b_z[0] = bz;
            l.b_h[0] = bh;
            l.u_z.set(0, 0, 0.7);
            l.u_h.set(0, 0, 0.4);
        }
        net.params.emotion.weight.set(0, 0, 1.5);
        net.params.emotion.bias[0] = 0.25;
        let x = 0.9;
        // scalar reference with h0 = 0: recurrent terms vanish
        let z = 1.0 / (1.0 + (-(wz * x + bz)).exp());
        let cand = (wh * x + bh).tanh();
        let h = z * cand;
        let y = 1.5 * h + 0.25;
        let out = net.forward(&Matrix::column(&[x])).unwrap();
        assert!((out.emotion[0] - y).abs() < 1e-12);
        assert!((out.final_state[0][0] - h).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_and_non_finite_input_fail() {
        let net = init_network(&NetworkConfig::new(1, 4, 3)).unwrap();
        assert!(net.forward(&Matrix::zeros(5, 2)).is_err());
        let mut bad = Matrix::zeros(2, 3);
        bad.set(1, 1, f64::NAN);
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn backward_without_cache_fails() {
        let net = init_network(&NetworkConfig::new(1, 4, 3)).unwrap();
        let out = net.predict(&Matrix::zeros(3, 3)).unwrap();
        let g = OutputGradients {
            emotion: vec![1.0; 3],
            aux: None,
        };
        assert!(net.backward(&out, &g).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let cfg = NetworkConfig::new(2, 6, 3).with_seed(4).with_aux(AuxHead::Uncertainty);
        let net = init_network(&cfg).unwrap();
        let out = net.forward(&random_input(6, 3, 2)).unwrap();
        let g = OutputGradients {
            emotion: vec![0.0; 6],
            aux: Some(Matrix::zeros(6, 1)),
        };
        assert_eq!(net.backward(&out, &g).unwrap().norm(), 0.0);
    }

    #[test]
    fn gradients_are_additive_over_sequences() {
        let cfg = NetworkConfig::new(1, 5, 2).with_seed(8);
        let net = init_network(&cfg).unwrap();
        let (a, b) = (random_input(4, 2, 10), random_input(6, 2, 11));
        let grad = |x: &Matrix, s: f64| {
            let out = net.forward(x).unwrap();
            let g = OutputGradients {
                emotion: out.emotion.iter().map(|v| s * v).collect(),
                aux: None,
            };
            net.backward(&out, &g).unwrap()
        };
        let mut sum = grad(&a, 1.0);
        sum.add_assign(&grad(&b, -0.5));
        let mut again = grad(&b, -0.5);
        again.add_assign(&grad(&a, 1.0));
        for (x, y) in sum.flatten().iter().zip(again.flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn carried_state_matches_one_long_pass() {
        let cfg = NetworkConfig::new(2, 4, 3).with_seed(1);
        let net = init_network(&cfg).unwrap();
        let x = random_input(10, 3, 5);
        let full = net.predict(&x).unwrap();
        let first = net.predict(&x.slice_rows(0, 6)).unwrap();
        let second = net
            .forward_from(&x.slice_rows(6, 10), Some(&first.final_state), false)
            .unwrap();
        let joined: Vec<f64> = first.emotion.iter().chain(&second.emotion).copied().collect();
        assert_eq!(joined, full.emotion);
    }

    #[test]
    fn hidden_states_are_strictly_bounded_at_init_scale() {
        let net = init_network(&NetworkConfig::new(3, 8, 4).with_seed(2)).unwrap();
        let out = net.forward(&random_input(40, 4, 3)).unwrap();
        assert!(out.top_hidden().unwrap().as_slice().iter().all(|h| h.abs() < 1.0));
    }

    #[test]
    fn grid_has_fifteen_structures() {
        let grid = default_structure_grid(20, AuxHead::None, 0);
        assert_eq!(grid.len(), 15);
        assert!(grid.iter().all(|c| c.validate_grid().is_ok()));
        assert!(NetworkConfig::new(2, 40, 3).validate_grid().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn hidden_states_stay_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
                let cfg = NetworkConfig::new(2, 6, 3).with_seed(seed);
                let mut net = init_network(&cfg).unwrap();
                for t in net.params.tensors_mut() {
                    for w in t { *w *= scale; }
                }
                let mut x = random_input(12, 3, seed);
                for v in x.as_mut_slice() { *v *= scale; }
                let out = net.forward(&x).unwrap();
                let top = out.top_hidden().unwrap();
                // tanh may round to exactly ±1 in floating point at extreme scales
                prop_assert!(top.as_slice().iter().all(|h| h.abs() <= 1.0));
                prop_assert!(out.final_state.iter().flatten().all(|h| h.abs() <= 1.0));
            }
        }
    }
}
