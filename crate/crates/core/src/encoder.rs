//! Per-modality bidirectional GRU encoder with a dense projection.
//!
//! Each modality's `N × d_in` feature matrix is read left-to-right by one GRU
//! cell and right-to-left by another, both from zero initial state. The two
//! hidden states of each position are concatenated (`2h` wide) and projected
//! to the shared embedding width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of one GRU cell.
///
/// ```text
/// z  = σ(x·W_z + h·U_z + b_z)
/// r  = σ(x·W_r + h·U_r + b_r)
/// ĥ  = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ ĥ
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCellParams<T> {
    pub w_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_z: Tensor<T>,
    pub u_r: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_h: Tensor<T>,
}

impl<T: Scalar> GruCellParams<T> {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(d_in, hidden);
        let u = || Tensor::zeros(hidden, hidden);
        let b = || Tensor::zeros(1, hidden);
        Self {
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn random<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let sw = 1.0 / (d_in.max(1) as f64).sqrt();
        let su = 1.0 / (hidden.max(1) as f64).sqrt();
        let mut p = Self::zeros(d_in, hidden);
        p.w_z = Tensor::uniform(d_in, hidden, sw, rng);
        p.w_r = Tensor::uniform(d_in, hidden, sw, rng);
        p.w_h = Tensor::uniform(d_in, hidden, sw, rng);
        p.u_z = Tensor::uniform(hidden, hidden, su, rng);
        p.u_r = Tensor::uniform(hidden, hidden, su, rng);
        p.u_h = Tensor::uniform(hidden, hidden, su, rng);
        p
    }

    pub fn input_width(&self) -> usize {
        self.w_z.rows()
    }

    pub fn hidden(&self) -> usize {
        self.u_z.rows()
    }

    pub fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z,
            &self.b_r, &self.b_h,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> GruCellVars {
        GruCellVars::from_vars(&self.tensors().map(|t| g.param(t)))
    }
}

/// [`GruCellParams`] registered on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruCellVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruCellVars {
    /// From nine vars in [`GruCellParams::tensors`] order.
    pub fn from_vars(v: &[Var]) -> Self {
        Self {
            w_z: v[0],
            w_r: v[1],
            w_h: v[2],
            u_z: v[3],
            u_r: v[4],
            u_h: v[5],
            b_z: v[6],
            b_r: v[7],
            b_h: v[8],
        }
    }

    pub fn to_vec(self) -> Vec<Var> {
        vec![
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }
}

/// Input contributions `x·W + b` for the three gates.
#[derive(Clone, Copy, Debug)]
pub struct GateInputs {
    pub z: Var,
    pub r: Var,
    pub h: Var,
}

/// Computes `X·W + b` for all rows of `x` at once.
pub fn project_inputs<T: Scalar>(
    g: &mut Graph<'_, T>,
    cell: &GruCellVars,
    x: Var,
) -> Result<GateInputs> {
    let d_in = g.shape(cell.w_z).0;
    if g.shape(x).1 != d_in {
        return Err(Error::shape("gru input", g.shape(x), g.shape(cell.w_z)));
    }
    let mut proj = |w, b| -> Result<Var> {
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    };
    Ok(GateInputs {
        z: proj(cell.w_z, cell.b_z)?,
        r: proj(cell.w_r, cell.b_r)?,
        h: proj(cell.w_h, cell.b_h)?,
    })
}

/// One GRU step from precomputed 1×h gate inputs.
pub fn gru_step_projected<T: Scalar>(
    g: &mut Graph<'_, T>,
    cell: &GruCellVars,
    inputs: GateInputs,
    h_prev: Var,
) -> Result<Var> {
    let hz = g.matmul(h_prev, cell.u_z)?;
    let z = g.add(inputs.z, hz)?;
    let z = g.sigmoid(z)?;
    let hr = g.matmul(h_prev, cell.u_r)?;
    let r = g.add(inputs.r, hr)?;
    let r = g.sigmoid(r)?;
    let rh = g.hadamard(r, h_prev)?;
    let hh = g.matmul(rh, cell.u_h)?;
    let cand = g.add(inputs.h, hh)?;
    let cand = g.tanh(cand)?;
    // h + z ⊙ (ĥ − h)
    let delta = g.sub(cand, h_prev)?;
    let step = g.hadamard(z, delta)?;
    g.add(h_prev, step)
}

/// One GRU step on a 1×d_in input row.
pub fn gru_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    cell: &GruCellVars,
    x_t: Var,
    h_prev: Var,
) -> Result<Var> {
    let hidden = g.shape(cell.u_z).0;
    if g.shape(x_t).0 != 1 || g.shape(h_prev) != (1, hidden) {
        return Err(Error::shape("gru_step", g.shape(x_t), g.shape(h_prev)));
    }
    let inputs = project_inputs(g, cell, x_t)?;
    gru_step_projected(g, cell, inputs, h_prev)
}

/// Runs `cell` over the rows of `x` in the given order and returns the
/// hidden states stacked back in row order.
fn run_direction<T: Scalar>(
    g: &mut Graph<'_, T>,
    cell: &GruCellVars,
    x: Var,
    reverse: bool,
) -> Result<Var> {
    let n = g.shape(x).0;
    let hidden = g.shape(cell.u_z).0;
    let gates = project_inputs(g, cell, x)?;
    let mut h = g.constant_owned(Tensor::zeros(1, hidden));
    let mut states = vec![h; n];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    for t in order {
        let step_inputs = GateInputs {
            z: g.row(gates.z, t)?,
            r: g.row(gates.r, t)?,
            h: g.row(gates.h, t)?,
        };
        h = gru_step_projected(g, cell, step_inputs, h)?;
        states[t] = h;
    }
    g.concat_rows(&states)
}

/// Forward cell, backward cell and dense projection of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEncoderParams<T> {
    pub forward: GruCellParams<T>,
    pub backward: GruCellParams<T>,
    /// `2h × d_proj`
    pub dense_w: Tensor<T>,
    /// `1 × d_proj`
    pub dense_b: Tensor<T>,
}

impl<T: Scalar> ModalityEncoderParams<T> {
    pub fn zeros(d_in: usize, hidden: usize, d_proj: usize) -> Self {
        Self {
            forward: GruCellParams::zeros(d_in, hidden),
            backward: GruCellParams::zeros(d_in, hidden),
            dense_w: Tensor::zeros(2 * hidden, d_proj),
            dense_b: Tensor::zeros(1, d_proj),
        }
    }

    pub fn random<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_proj: usize, rng: &mut R) -> Self {
        Self {
            forward: GruCellParams::random(d_in, hidden, rng),
            backward: GruCellParams::random(d_in, hidden, rng),
            dense_w: Tensor::uniform(2 * hidden, d_proj, 1.0 / ((2 * hidden) as f64).sqrt(), rng),
            dense_b: Tensor::zeros(1, d_proj),
        }
    }

    /// Sets the update-gate bias of both directions to `b`.
    pub fn with_update_bias(mut self, b: f64) -> Self {
        let h = self.forward.hidden();
        self.forward.b_z = Tensor::full(1, h, T::of(b));
        self.backward.b_z = Tensor::full(1, h, T::of(b));
        self
    }

    pub fn input_width(&self) -> usize {
        self.forward.input_width()
    }

    pub fn proj_width(&self) -> usize {
        self.dense_w.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.forward.tensors().into();
        v.extend(self.backward.tensors());
        v.push(&self.dense_w);
        v.push(&self.dense_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.forward.tensors_mut().into();
        v.extend(self.backward.tensors_mut());
        v.push(&mut self.dense_w);
        v.push(&mut self.dense_b);
        v
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ModalityEncoderVars {
        ModalityEncoderVars {
            forward: self.forward.bind(g),
            backward: self.backward.bind(g),
            dense_w: g.param(&self.dense_w),
            dense_b: g.param(&self.dense_b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModalityEncoderVars {
    pub forward: GruCellVars,
    pub backward: GruCellVars,
    pub dense_w: Var,
    pub dense_b: Var,
}

impl ModalityEncoderVars {
    /// Parameter vars in [`ModalityEncoderParams::tensors`] order.
    pub fn to_vec(self) -> Vec<Var> {
        let mut v = self.forward.to_vec();
        v.extend(self.backward.to_vec());
        v.push(self.dense_w);
        v.push(self.dense_b);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodeOptions {
    /// Applied to the concatenated GRU states and to the projection output.
    pub dropout: f64,
    pub activation: Activation,
    pub training: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            dropout: 0.0,
            activation: Activation::Relu,
            training: false,
        }
    }
}

/// Encodes an `N × d_in` modality matrix into `N × d_proj` embeddings.
pub fn encode_modality<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<'_, T>,
    enc: &ModalityEncoderVars,
    x: Var,
    opts: EncodeOptions,
    rng: &mut R,
) -> Result<Var> {
    let (n, d_in) = g.shape(x);
    if n == 0 {
        return Err(Error::Data("cannot encode an empty sequence".into()));
    }
    let expected = g.shape(enc.forward.w_z).0;
    if d_in != expected {
        return Err(Error::shape("encode_modality", (n, d_in), (n, expected)));
    }
    let fwd = run_direction(g, &enc.forward, x, false)?;
    let bwd = run_direction(g, &enc.backward, x, true)?;
    let states = g.concat_cols(&[fwd, bwd])?;
    let states = g.dropout(states, opts.dropout, rng, opts.training)?;
    let proj = g.matmul(states, enc.dense_w)?;
    let proj = g.add_row(proj, enc.dense_b)?;
    let act = g.activation(opts.activation, proj)?;
    g.dropout(act, opts.dropout, rng, opts.training)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, Tolerance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_cell_halves_previous_state() {
        let cell = GruCellParams::<f64>::zeros(3, 4);
        let v = Tensor::from_rows(&[&[1.0, -2.0, 0.5, 4.0]]);
        let x = Tensor::from_rows(&[&[0.3, 0.1, -0.7]]);
        let mut g = Graph::new();
        let cv = cell.bind(&mut g);
        let xv = g.constant(&x);
        let hv = g.constant(&v);
        let h = gru_step(&mut g, &cv, xv, hv).unwrap();
        assert_eq!(g.value(h), &v.map(|e| 0.5 * e));

        let zero = Tensor::zeros(1, 4);
        let hv = g.constant(&zero);
        let h = gru_step(&mut g, &cv, xv, hv).unwrap();
        assert_eq!(g.value(h), &zero);
    }

    #[test]
    fn gru_step_shape_errors() {
        let cell = GruCellParams::<f64>::zeros(3, 4);
        let mut g = Graph::new();
        let cv = cell.bind(&mut g);
        let x = g.constant_owned(Tensor::zeros(1, 2));
        let h = g.constant_owned(Tensor::zeros(1, 4));
        assert!(matches!(gru_step(&mut g, &cv, x, h), Err(Error::Shape { .. })));
        let x = g.constant_owned(Tensor::zeros(1, 3));
        let h = g.constant_owned(Tensor::zeros(1, 5));
        assert!(matches!(gru_step(&mut g, &cv, x, h), Err(Error::Shape { .. })));
    }

    #[test]
    fn gru_step_gradients_match_finite_differences() {
        let mut r = rng(11);
        let cell = GruCellParams::<f64>::random(3, 4, &mut r);
        let mut inputs: Vec<Tensor<f64>> = cell.tensors().into_iter().cloned().collect();
        for b in &mut inputs[6..] {
            *b = Tensor::uniform(1, 4, 0.5, &mut r);
        }
        inputs.push(Tensor::uniform(1, 3, 2.0, &mut r));
        inputs.push(Tensor::uniform(1, 4, 1.0, &mut r));
        let report = gradcheck::check(&inputs, Tolerance::default(), |g, v| {
            let cv = GruCellVars::from_vars(&v[..9]);
            let h = gru_step(g, &cv, v[9], v[10])?;
            g.sum(h)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn zero_gru_gives_relu_of_bias() {
        let mut enc = ModalityEncoderParams::<f64>::zeros(2, 3, 4);
        enc.dense_b = Tensor::from_rows(&[&[0.5, -1.0, 2.0, 0.0]]);
        let x = Tensor::uniform(5, 2, 1.0, &mut rng(1));
        let mut g = Graph::new();
        let ev = enc.bind(&mut g);
        let xv = g.constant(&x);
        let out = encode_modality(&mut g, &ev, xv, EncodeOptions::default(), &mut rng(0)).unwrap();
        for r in 0..5 {
            assert_eq!(g.value(out).row(r), &[0.5, 0.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn single_step_sequence_is_deterministic() {
        let enc = ModalityEncoderParams::<f64>::random(3, 5, 4, &mut rng(2));
        let x = Tensor::uniform(1, 3, 1.0, &mut rng(3));
        let run = |seed| {
            let mut g = Graph::new();
            let ev = enc.bind(&mut g);
            let xv = g.constant(&x);
            let opts = EncodeOptions {
                dropout: 0.3,
                training: true,
                ..EncodeOptions::default()
            };
            let out = encode_modality(&mut g, &ev, xv, opts, &mut rng(seed)).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(9), run(9));
        assert_eq!(run(9).shape(), (1, 4));
    }

    #[test]
    fn input_width_mismatch_is_shape_error() {
        let enc = ModalityEncoderParams::<f64>::zeros(3, 2, 2);
        let mut g = Graph::new();
        let ev = enc.bind(&mut g);
        let x = g.constant_owned(Tensor::zeros(4, 5));
        let err = encode_modality(&mut g, &ev, x, EncodeOptions::default(), &mut rng(0));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    /// With tied forward/backward cells and a dense layer whose two halves
    /// are equal, encoding the reversed sequence reverses the encoding.
    #[test]
    fn reversal_symmetry_with_tied_directions() {
        let mut r = rng(5);
        let (d_in, h, d) = (3, 4, 5);
        let mut enc = ModalityEncoderParams::<f64>::random(d_in, h, d, &mut r);
        enc.backward = enc.forward.clone();
        let half = Tensor::<f64>::uniform(h, d, 0.5, &mut r);
        let mut w = Vec::new();
        w.extend_from_slice(half.data());
        w.extend_from_slice(half.data());
        enc.dense_w = Tensor::new(2 * h, d, w).unwrap();
        enc.dense_b = Tensor::uniform(1, d, 0.2, &mut r);
        let x = Tensor::uniform(6, d_in, 1.5, &mut r);

        let encode = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let ev = enc.bind(&mut g);
            let xv = g.constant(x);
            let out = encode_modality(&mut g, &ev, xv, EncodeOptions::default(), &mut rng(0)).unwrap();
            g.value(out).clone()
        };
        let direct = encode(&x).flip_rows();
        let reversed = encode(&x.flip_rows());
        for (a, b) in direct.data().iter().zip(reversed.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut r = rng(8);
        let enc = ModalityEncoderParams::<f64>::random(3, 4, 5, &mut r);
        let mut enc = enc;
        for b in [
            &mut enc.forward.b_z,
            &mut enc.forward.b_r,
            &mut enc.forward.b_h,
            &mut enc.backward.b_z,
            &mut enc.backward.b_r,
            &mut enc.backward.b_h,
        ] {
            *b = Tensor::uniform(1, 4, 0.3, &mut r);
        }
        enc.dense_b = Tensor::full(1, 5, 0.5);
        let x = Tensor::uniform(3, 3, 1.0, &mut r);
        let mut g = Graph::new();
        let ev = enc.bind(&mut g);
        let xv = g.constant(&x);
        let out = encode_modality(&mut g, &ev, xv, EncodeOptions::default(), &mut r).unwrap();
        let sq = g.hadamard(out, out).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, v) in ev.to_vec().into_iter().enumerate() {
            let grad = grads.get(v).unwrap_or_else(|| panic!("no grad for param {i}"));
            assert!(grad.max_abs() > 0.0, "param {i} has zero gradient");
        }
    }
}
