use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Flat access to every parameter buffer, in declaration order.
pub trait Params: Sized {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;

    fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter count mismatch");
        let mut off = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Affine map `y = W x + b` with `W` stored row-major (`out x in`).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || (rng.random::<f64>() * 2.0 - 1.0) * bound;
        let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self { in_dim, out_dim, weight, bias }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

impl Params for Linear {
    fn slices(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
    fn zeros_like(&self) -> Self {
        Self {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Two-layer encoder `out(relu(hidden(x)))` over concatenated feature channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub hidden: Linear,
    pub out: Linear,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub output: Vec<f64>,
}

impl Encoder {
    pub fn init(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { hidden: Linear::init(in_dim, hidden_dim, rng), out: Linear::init(hidden_dim, out_dim, rng) }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim
    }

    pub fn forward(&self, input: Vec<f64>) -> EncoderTrace {
        let pre = self.hidden.forward(&input);
        let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let output = self.out.forward(&act);
        EncoderTrace { input, pre, act, output }
    }

    pub fn backward(&self, trace: &EncoderTrace, grad_out: &[f64], grad: &mut Encoder) {
        let mut g_act = self.out.backward(&trace.act, grad_out, &mut grad.out);
        for (g, &z) in g_act.iter_mut().zip(&trace.pre) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        self.hidden.backward(&trace.input, &g_act, &mut grad.hidden);
    }
}

impl Params for Encoder {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.hidden.slices();
        v.extend(self.out.slices());
        v
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.hidden.slices_mut();
        v.extend(self.out.slices_mut());
        v
    }
    fn zeros_like(&self) -> Self {
        Self { hidden: self.hidden.zeros_like(), out: self.out.zeros_like() }
    }
}

/// Concatenates feature channels into one input vector.
pub fn flatten_features(f: &[Vec<f64>]) -> Vec<f64> {
    f.concat()
}

/// L2 normalization and its Jacobian-vector product. Zero vectors pass
/// through with a zero gradient.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (v.to_vec(), 0.0);
    }
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Given `u = v / |v|` and `dL/du`, returns `dL/dv`.
pub fn l2_normalize_backward(u: &[f64], norm: f64, grad_u: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; u.len()];
    }
    let proj: f64 = u.iter().zip(grad_u).map(|(a, b)| a * b).sum();
    u.iter().zip(grad_u).map(|(ui, gi)| (gi - ui * proj) / norm).collect()
}
