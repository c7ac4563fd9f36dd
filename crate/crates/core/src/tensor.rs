//! Dense real arrays and the small per-pixel affine networks built on them.
//!
//! Rank-3 arrays are channel-major: element `(c, y, x)` lives at
//! `c * H * W + y * W + x`.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds an `L x H x W` array from a generator called as `f(c, y, x)`.
    pub fn from_fn3(
        l: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(l * h * w);
        for c in 0..l {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(vec![l, h, w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(L, H, W)` of a rank-3 array.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [l, h, w] => Ok((l, h, w)),
            _ => Err(Error::Shape(format!(
                "expected rank 3, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn get3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[c * h * w + y * w + x]
    }

    /// Channel vector of pixel `p` (row-major pixel index) of a rank-3 array.
    pub fn pixel(&self, p: usize) -> Vec<f64> {
        let hw = self.shape[1] * self.shape[2];
        (0..self.shape[0]).map(|c| self.data[c * hw + p]).collect()
    }

    /// All pixel vectors of a rank-3 array in row-major pixel order.
    pub fn pixels(&self) -> Result<Vec<Vec<f64>>> {
        let (_, h, w) = self.dims3()?;
        Ok((0..h * w).map(|p| self.pixel(p)).collect())
    }

    /// Inverse of [`DenseArray::pixels`].
    pub fn from_pixels(pixels: &[Vec<f64>], h: usize, w: usize) -> Result<Self> {
        if pixels.len() != h * w || pixels.is_empty() {
            return Err(Error::Shape(format!(
                "{} pixels for a {h}x{w} grid",
                pixels.len()
            )));
        }
        let l = pixels[0].len();
        if pixels.iter().any(|p| p.len() != l) {
            return Err(Error::Shape("ragged pixel vectors".into()));
        }
        let mut data = vec![0.0; l * h * w];
        for (p, v) in pixels.iter().enumerate() {
            for (c, &x) in v.iter().enumerate() {
                data[c * h * w + p] = x;
            }
        }
        Self::new(vec![l, h, w], data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-norm copy of `v`; the zero vector maps to itself.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Normalizes every pixel's channel vector to unit Euclidean length.
pub fn l2_normalize_channels(z: &DenseArray) -> Result<DenseArray> {
    let (l, h, w) = z.dims3()?;
    let hw = h * w;
    let mut out = z.data.clone();
    for p in 0..hw {
        let n = (0..l)
            .map(|c| z.data[c * hw + p].powi(2))
            .sum::<f64>()
            .sqrt();
        if n > 0.0 {
            for c in 0..l {
                out[c * hw + p] /= n;
            }
        }
    }
    DenseArray::new(z.shape.clone(), out)
}

/// Mean of each channel over the spatial grid.
pub fn global_avg_pool(z: &DenseArray) -> Result<DenseArray> {
    let (_, h, w) = z.dims3()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Empty("spatial extent".into()));
    }
    let pooled = z
        .data
        .chunks_exact(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect();
    DenseArray::vector(pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "layer {in_dim}->{out_dim}: weight {} bias {}",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite layer parameter".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut weight = vec![0.0; n * n];
        for i in 0..n {
            weight[i * n + i] = 1.0;
        }
        Self {
            in_dim: n,
            out_dim: n,
            weight,
            bias: vec![0.0; n],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = || rng.gen_range(-scale..=scale);
        let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer chain breaks: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            layers: vec![Layer::identity(n)],
            activation: Activation::Relu,
        }
    }

    /// Random network through the widths in `dims` (`dims.len() - 1` layers).
    pub fn random<R: Rng + ?Sized>(dims: &[usize], scale: f64, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|d| Layer::random(d[0], d[1], scale, rng))
            .collect();
        Self {
            layers,
            activation: Activation::Relu,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters flattened layer by layer, weight then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Same architecture with parameters taken from `flat` (layout of [`MlpParams::flatten`]).
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "mlp expects {} inputs, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Returns the inputs to every layer and the pre-activations of every layer.
    fn trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.apply(&h);
            let next = if i == last {
                a.clone()
            } else {
                a.iter().map(|&v| self.activation.apply(v)).collect()
            };
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        (inputs, pre)
    }
}

/// Gradients of a scalar with respect to every layer of an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight
                .iter_mut()
                .zip(&b.weight)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|x| *x *= s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }
}

pub fn mlp_forward(p: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    p.check_input(x)?;
    let last = p.layers.len() - 1;
    let mut h = x.to_vec();
    for (i, layer) in p.layers.iter().enumerate() {
        h = layer.apply(&h);
        if i != last {
            h.iter_mut().for_each(|v| *v = p.activation.apply(*v));
        }
    }
    Ok(h)
}

/// Analytic gradients of `<upstream, mlp_forward(p, x)>` with respect to
/// the parameters and the input.
pub fn mlp_backward(p: &MlpParams, x: &[f64], upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
    p.check_input(x)?;
    if upstream.len() != p.out_dim() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} values, mlp emits {}",
            upstream.len(),
            p.out_dim()
        )));
    }
    let (inputs, pre) = p.trace(x);
    let last = p.layers.len() - 1;
    let mut grads = MlpGrads::zeros_like(p);
    let mut g = upstream.to_vec();
    for i in (0..p.layers.len()).rev() {
        let layer = &p.layers[i];
        if i != last {
            g.iter_mut()
                .zip(&pre[i])
                .for_each(|(gv, &a)| *gv *= p.activation.derivative(a));
        }
        let gl = &mut grads.layers[i];
        for (o, &go) in g.iter().enumerate() {
            gl.bias[o] = go;
            for (j, &hj) in inputs[i].iter().enumerate() {
                gl.weight[o * layer.in_dim + j] = go * hj;
            }
        }
        let mut gh = vec![0.0; layer.in_dim];
        for (o, &go) in g.iter().enumerate() {
            let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
            gh.iter_mut().zip(row).for_each(|(acc, &w)| *acc += w * go);
        }
        g = gh;
    }
    Ok((grads, g))
}

/// Applies the network independently at every pixel of a rank-3 array.
pub fn mlp_forward_pixels(p: &MlpParams, z: &DenseArray) -> Result<DenseArray> {
    let (_, h, w) = z.dims3()?;
    let out = z
        .pixels()?
        .iter()
        .map(|v| mlp_forward(p, v))
        .collect::<Result<Vec<_>>>()?;
    DenseArray::from_pixels(&out, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(l: usize, h: usize, w: usize, v: &[f64]) -> DenseArray {
        DenseArray::new(vec![l, h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(DenseArray::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseArray::new(vec![2], vec![0.0, f64::NAN]).is_err());
        assert!(DenseArray::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let z = map(2, 1, 3, &[3.0, 0.0, 1.0, 4.0, 0.0, 0.0]);
        let n = l2_normalize_channels(&z).unwrap();
        assert!((n.get3(0, 0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get3(1, 0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(n.pixel(1), vec![0.0, 0.0]);
        assert_eq!(n.pixel(2), vec![1.0, 0.0]);
        assert!(l2_normalize_channels(&DenseArray::vector(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn pool_examples() {
        let z = map(1, 2, 2, &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(global_avg_pool(&z).unwrap().data(), &[4.0]);
        let c = map(2, 2, 2, &[2.5; 8]);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[2.5, 2.5]);
        let one = map(3, 1, 1, &[1.0, -2.0, 3.0]);
        assert_eq!(global_avg_pool(&one).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn forward_examples() {
        let id = MlpParams::identity(3);
        assert_eq!(
            mlp_forward(&id, &[1.0, -2.0, 3.0]).unwrap(),
            vec![1.0, -2.0, 3.0]
        );

        let constant = MlpParams::new(
            vec![Layer::new(2, 2, vec![0.0; 4], vec![0.5, -1.5]).unwrap()],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(
            mlp_forward(&constant, &[9.0, 9.0]).unwrap(),
            vec![0.5, -1.5]
        );

        // W1 = [[1,2],[-1,1]], b1 = [0,0.5]; W2 = [[1,-1]], b2 = [0.25]
        // x = (1,1): a1 = (3, 0.5), relu -> (3, 0.5), out = 3 - 0.5 + 0.25 = 2.75
        // x = (2,-1): a1 = (0, -2.5), relu -> (0, 0), out = 0.25
        let net = MlpParams::new(
            vec![
                Layer::new(2, 2, vec![1.0, 2.0, -1.0, 1.0], vec![0.0, 0.5]).unwrap(),
                Layer::new(2, 1, vec![1.0, -1.0], vec![0.25]).unwrap(),
            ],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(mlp_forward(&net, &[1.0, 1.0]).unwrap(), vec![2.75]);
        assert_eq!(mlp_forward(&net, &[2.0, -1.0]).unwrap(), vec![0.25]);
        assert!(mlp_forward(&net, &[1.0]).is_err());
    }

    #[test]
    fn chain_mismatch_rejected() {
        let r = MlpParams::new(
            vec![Layer::zeros(2, 3), Layer::zeros(2, 1)],
            Activation::Relu,
        );
        assert!(r.is_err());
    }

    #[test]
    fn backward_affine_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::random(&[3, 2], 1.0, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let g = [1.5, -0.25];
        let (grads, gx) = mlp_backward(&p, &x, &g).unwrap();
        assert_eq!(grads.layers[0].bias, g);
        for (o, go) in g.iter().enumerate() {
            for (j, xj) in x.iter().enumerate() {
                assert_eq!(grads.layers[0].weight[o * 3 + j], go * xj);
            }
        }
        for (j, gxj) in gx.iter().enumerate() {
            let expect = p.layers[0].weight[j] * g[0] + p.layers[0].weight[3 + j] * g[1];
            assert!((gxj - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_dead_relu_has_zero_gradient() {
        let net = MlpParams::new(
            vec![
                Layer::new(1, 1, vec![1.0], vec![-10.0]).unwrap(),
                Layer::new(1, 1, vec![2.0], vec![0.0]).unwrap(),
            ],
            Activation::Relu,
        )
        .unwrap();
        let (grads, gx) = mlp_backward(&net, &[1.0], &[1.0]).unwrap();
        assert_eq!(grads.layers[0].weight, vec![0.0]);
        assert_eq!(grads.layers[0].bias, vec![0.0]);
        assert_eq!(gx, vec![0.0]);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpParams::random(&[3, 4, 2], 1.0, &mut rng);
        let q = p.with_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(p.with_flat(&[0.0]).is_err());
    }
}
