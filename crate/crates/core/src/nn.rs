//! Dense feedforward networks with manual backpropagation and plain SGD,
//! sized for the actor/critic pair: tanh hidden layers, a linear scalar
//! head for the critic and softmax heads for the actor branches.
//!
//! All arithmetic is f64. Updates take one sample at a time; there is no
//! batching, momentum or adaptive step size.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// Layer activation. Softmax may only terminate a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Softmax,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Tanh => 1,
            Activation::Softmax => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Softmax),
            _ => Err(Error::State(format!("unknown activation code {c}"))),
        }
    }
}

/// One affine layer with `weights` stored row-major (`out_dim` rows of
/// `in_dim` columns) followed by its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A feedforward stack of [`Layer`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Post- and pre-activation values of one forward pass, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Network output (the input itself for an empty network).
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, |v| v)
    }
}

/// Gradients of a scalar loss with respect to every parameter, plus the
/// gradient with respect to the network input (for chaining a trunk).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl Gradients {
    /// Elementwise sum with another gradient set of identical shape.
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|v| v.is_finite())
            && self.bias.iter().flatten().all(|v| v.is_finite())
    }
}

/// Update direction for [`DenseNet::sgd_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

impl DenseNet {
    /// Builds a network with the given widths (`topology[0]` is the input
    /// dimension) and one activation per layer. Weights are drawn
    /// uniformly from `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, biases start
    /// at zero.
    pub fn new<R: Rng>(topology: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if topology.len() != activations.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} widths need {} activations, got {}",
                topology.len(),
                topology.len() - 1,
                activations.len()
            )));
        }
        if topology.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        for (k, act) in activations.iter().enumerate() {
            if *act == Activation::Softmax && k + 1 != activations.len() {
                return Err(Error::InvalidArgument(
                    "softmax is only valid as the output activation".into(),
                ));
            }
        }
        let mut layers = Vec::with_capacity(activations.len());
        for (k, &act) in activations.iter().enumerate() {
            let (in_dim, out_dim) = (topology[k], topology[k + 1]);
            let bound = 1.0 / (in_dim as f64).sqrt();
            let weights = (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            layers.push(Layer {
                in_dim,
                out_dim,
                weights,
                bias: vec![0.0; out_dim],
                activation: act,
            });
        }
        Ok(DenseNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Affine-plus-activation composition, keeping every intermediate
    /// value for [`DenseNet::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if let Some(first) = self.layers.first() {
            if x.len() != first.in_dim {
                return Err(Error::InvalidArgument(format!(
                    "input of length {} for width-{} layer",
                    x.len(),
                    first.in_dim
                )));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network input".into()));
        }
        let mut cache = ForwardCache {
            input: x.to_vec(),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let prev: &[f64] = cache.post.last().map_or(&cache.input, |v| v);
            let mut z = layer.bias.clone();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(prev) {
                    acc += w * v;
                }
                *zr += acc;
            }
            let a = match layer.activation {
                Activation::Linear => z.clone(),
                Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                Activation::Softmax => softmax(&z),
            };
            cache.pre.push(z);
            cache.post.push(a);
        }
        Ok(cache)
    }

    /// Backpropagates a scalar loss. `grad_out` is the loss gradient with
    /// respect to the network output for linear/tanh output layers, and
    /// with respect to the output logits for a softmax layer (the seed
    /// from [`log_prob_grad_seed`] already lives in logit space).
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Gradients> {
        self.check_cache(cache)?;
        let expected = if self.layers.is_empty() {
            cache.input.len()
        } else {
            self.output_dim()
        };
        if grad_out.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "output gradient of length {}, expected {expected}",
                grad_out.len()
            )));
        }
        let mut grads = Gradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            input: Vec::new(),
        };
        let mut grad = grad_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = match layer.activation {
                Activation::Linear | Activation::Softmax => grad,
                Activation::Tanh => grad
                    .iter()
                    .zip(&cache.post[l])
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect(),
            };
            let prev: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            for (r, &dzr) in dz.iter().enumerate() {
                let wrow = &mut grads.weights[l][r * layer.in_dim..(r + 1) * layer.in_dim];
                for (wg, v) in wrow.iter_mut().zip(prev) {
                    *wg = dzr * v;
                }
                grads.bias[l][r] = dzr;
            }
            let mut dx = vec![0.0; layer.in_dim];
            for (r, &dzr) in dz.iter().enumerate() {
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += w * dzr;
                }
            }
            grad = dx;
        }
        grads.input = grad;
        Ok(grads)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let consistent = cache.post.len() == self.layers.len()
            && cache.pre.len() == self.layers.len()
            && self.layers.first().map_or(true, |l| cache.input.len() == l.in_dim)
            && self
                .layers
                .iter()
                .zip(&cache.post)
                .all(|(l, a)| a.len() == l.out_dim);
        if consistent {
            Ok(())
        } else {
            Err(Error::State("stale forward cache for this network".into()))
        }
    }

    /// One plain SGD step. The whole update is rejected if any gradient
    /// entry is non-finite.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, direction: Direction) -> Result<()> {
        if grads.weights.len() != self.layers.len() || grads.bias.len() != self.layers.len() {
            return Err(Error::InvalidArgument("gradient shape mismatch".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if grads.weights[l].len() != layer.weights.len() || grads.bias[l].len() != layer.out_dim {
                return Err(Error::InvalidArgument("gradient shape mismatch".into()));
            }
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient, update rejected".into()));
        }
        let sign = match direction {
            Direction::Ascent => 1.0,
            Direction::Descent => -1.0,
        };
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&grads.weights[l]) {
                *w += sign * lr * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&grads.bias[l]) {
                *b += sign * lr * g;
            }
        }
        Ok(())
    }

    /// Serializes topology header (widths, activation codes) followed by
    /// the flat little-endian f64 parameter stream.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.in_dim as u32).to_le_bytes())?;
            w.write_all(&(layer.out_dim as u32).to_le_bytes())?;
            w.write_all(&[layer.activation.code()])?;
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let n_layers = u32::from_le_bytes(u32buf) as usize;
        if n_layers > 1024 {
            return Err(Error::State(format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            r.read_exact(&mut u32buf)?;
            let in_dim = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf)?;
            let out_dim = u32::from_le_bytes(u32buf) as usize;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            shapes.push((in_dim, out_dim, Activation::from_code(code[0])?));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut f64buf = [0u8; 8];
        for (in_dim, out_dim, activation) in shapes {
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..in_dim * out_dim {
                r.read_exact(&mut f64buf)?;
                weights.push(f64::from_le_bytes(f64buf));
            }
            let mut bias = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                r.read_exact(&mut f64buf)?;
                bias.push(f64::from_le_bytes(f64buf));
            }
            layers.push(Layer {
                in_dim,
                out_dim,
                weights,
                bias,
                activation,
            });
        }
        Ok(DenseNet { layers })
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Log-probabilities via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Gradient of `log pi(chosen)` with respect to the softmax logits:
/// `onehot(chosen) - probs`. Seeds [`DenseNet::backward`] on a softmax
/// head.
pub fn log_prob_grad_seed(probs: &[f64], chosen: usize) -> Result<Vec<f64>> {
    if chosen >= probs.len() {
        return Err(Error::InvalidArgument(format!(
            "chosen index {chosen} for {} classes",
            probs.len()
        )));
    }
    Ok(probs
        .iter()
        .enumerate()
        .map(|(k, p)| if k == chosen { 1.0 - p } else { -p })
        .collect())
}

/// Shared tanh trunk feeding a time head and a power head, each ending in
/// a softmax over its action grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoHeadActorNet {
    pub trunk: DenseNet,
    pub head_time: DenseNet,
    pub head_power: DenseNet,
}

/// Forward caches of trunk and both heads for one state.
#[derive(Debug, Clone)]
pub struct ActorCache {
    pub trunk: ForwardCache,
    pub time: ForwardCache,
    pub power: ForwardCache,
}

impl ActorCache {
    pub fn time_probs(&self) -> &[f64] {
        self.time.output()
    }

    pub fn power_probs(&self) -> &[f64] {
        self.power.output()
    }
}

/// Parameter gradients of the full actor.
#[derive(Debug, Clone)]
pub struct ActorGradients {
    pub trunk: Gradients,
    pub time: Gradients,
    pub power: Gradients,
}

impl ActorGradients {
    pub fn is_finite(&self) -> bool {
        self.trunk.is_finite() && self.time.is_finite() && self.power.is_finite()
    }
}

impl TwoHeadActorNet {
    /// `trunk_hidden` are tanh widths shared by both branches,
    /// `branch_hidden` tanh widths private to each branch, and `k_time`
    /// / `k_power` the softmax head widths.
    pub fn new<R: Rng>(
        input_dim: usize,
        trunk_hidden: &[usize],
        branch_hidden: &[usize],
        k_time: usize,
        k_power: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if trunk_hidden.is_empty() {
            return Err(Error::InvalidArgument("actor trunk needs at least one layer".into()));
        }
        let mut trunk_topology = vec![input_dim];
        trunk_topology.extend_from_slice(trunk_hidden);
        let trunk_acts = vec![Activation::Tanh; trunk_hidden.len()];
        let trunk = DenseNet::new(&trunk_topology, &trunk_acts, rng)?;

        let head = |k: usize, rng: &mut R| -> Result<DenseNet> {
            let mut topo = vec![*trunk_hidden.last().unwrap()];
            topo.extend_from_slice(branch_hidden);
            topo.push(k);
            let mut acts = vec![Activation::Tanh; branch_hidden.len()];
            acts.push(Activation::Softmax);
            DenseNet::new(&topo, &acts, rng)
        };
        let head_time = head(k_time, rng)?;
        let head_power = head(k_power, rng)?;
        Ok(TwoHeadActorNet {
            trunk,
            head_time,
            head_power,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ActorCache> {
        let trunk = self.trunk.forward(x)?;
        let time = self.head_time.forward(trunk.output())?;
        let power = self.head_power.forward(trunk.output())?;
        Ok(ActorCache { trunk, time, power })
    }

    /// Backpropagates logit-space seeds through both heads and their sum
    /// through the trunk.
    pub fn backward(
        &self,
        cache: &ActorCache,
        grad_time_logits: &[f64],
        grad_power_logits: &[f64],
    ) -> Result<ActorGradients> {
        let time = self.head_time.backward(&cache.time, grad_time_logits)?;
        let power = self.head_power.backward(&cache.power, grad_power_logits)?;
        let mut trunk_seed = time.input.clone();
        for (a, b) in trunk_seed.iter_mut().zip(&power.input) {
            *a += b;
        }
        let trunk = self.trunk.backward(&cache.trunk, &trunk_seed)?;
        Ok(ActorGradients { trunk, time, power })
    }

    pub fn sgd_step(&mut self, grads: &ActorGradients, lr: f64, direction: Direction) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite actor gradient, update rejected".into()));
        }
        self.trunk.sgd_step(&grads.trunk, lr, direction)?;
        self.head_time.sgd_step(&grads.time, lr, direction)?;
        self.head_power.sgd_step(&grads.power, lr, direction)
    }

    /// Three net sections back to back, each in the [`DenseNet::save`]
    /// format.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        self.trunk.save(w)?;
        self.head_time.save(w)?;
        self.head_power.save(w)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        Ok(TwoHeadActorNet {
            trunk: DenseNet::load(r)?,
            head_time: DenseNet::load(r)?,
            head_power: DenseNet::load(r)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64, topology: &[usize], acts: &[Activation]) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseNet::new(topology, acts, &mut rng).unwrap()
    }

    #[test]
    fn forward_zero_parameters_gives_zero() {
        let mut net = small_net(1, &[3, 2], &[Activation::Linear]);
        for l in &mut net.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let cache = net.forward(&[0.3, -1.2, 4.0]).unwrap();
        assert_eq!(cache.output(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let probs = softmax(&[0.0; 5]);
        for p in probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let net = small_net(2, &[4, 5, 3], &[Activation::Tanh, Activation::Linear]);
        let x = [0.25, -0.5, 1.5, 0.75];
        // Independent recomputation with explicit index arithmetic.
        let l0 = &net.layers[0];
        let mut h = vec![0.0; 5];
        for r in 0..5 {
            let mut z = l0.bias[r];
            for c in 0..4 {
                z += l0.weights[r * 4 + c] * x[c];
            }
            h[r] = z.tanh();
        }
        let l1 = &net.layers[1];
        let mut y = vec![0.0; 3];
        for r in 0..3 {
            let mut z = l1.bias[r];
            for c in 0..5 {
                z += l1.weights[r * 5 + c] * h[c];
            }
            y[r] = z;
        }
        let cache = net.forward(&x).unwrap();
        for (a, b) in cache.output().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let net = small_net(3, &[4, 2], &[Activation::Linear]);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_linear_layer_squared_loss() {
        let net = small_net(4, &[3, 1], &[Activation::Linear]);
        let x = [0.5, -1.0, 2.0];
        let target = 0.7;
        let cache = net.forward(&x).unwrap();
        let y = cache.output()[0];
        // L = (y - target)^2, dL/dy = 2 (y - target).
        let grads = net.backward(&cache, &[2.0 * (y - target)]).unwrap();
        for c in 0..3 {
            let want = 2.0 * (y - target) * x[c];
            assert!((grads.weights[0][c] - want).abs() < 1e-12);
        }
        assert!((grads.bias[0][0] - 2.0 * (y - target)).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::new(
            &[4, 6, 5, 1],
            &[Activation::Tanh, Activation::Tanh, Activation::Linear],
            &mut rng,
        )
        .unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &[1.0]).unwrap();
        let eps = 1e-5;
        for l in 0..net.layers.len() {
            for k in 0..net.layers[l].weights.len() {
                let mut plus = net.clone();
                plus.layers[l].weights[k] += eps;
                let mut minus = net.clone();
                minus.layers[l].weights[k] -= eps;
                let fd = (plus.forward(&x).unwrap().output()[0]
                    - minus.forward(&x).unwrap().output()[0])
                    / (2.0 * eps);
                let got = grads.weights[l][k];
                let denom = fd.abs().max(got.abs()).max(1e-8);
                assert!(
                    (fd - got).abs() / denom < 1e-4,
                    "layer {l} weight {k}: fd {fd} vs analytic {got}"
                );
            }
        }
    }

    #[test]
    fn backward_softmax_cross_entropy_seed() {
        // Seeding with (probs - onehot) must equal the FD gradient of the
        // cross-entropy -log p[target] with respect to the logits.
        let net = small_net(6, &[3, 4], &[Activation::Softmax]);
        let x = [0.3, -0.8, 1.1];
        let target = 2;
        let cache = net.forward(&x).unwrap();
        let probs = cache.output();
        let seed: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, p)| p - if k == target { 1.0 } else { 0.0 })
            .collect();
        let grads = net.backward(&cache, &seed).unwrap();
        let eps = 1e-6;
        for k in 0..net.layers[0].weights.len() {
            let ce = |n: &DenseNet| -> f64 {
                -log_softmax(&n.forward(&x).unwrap().pre[0])[target]
            };
            let mut plus = net.clone();
            plus.layers[0].weights[k] += eps;
            let mut minus = net.clone();
            minus.layers[0].weights[k] -= eps;
            let fd = (ce(&plus) - ce(&minus)) / (2.0 * eps);
            assert!((fd - grads.weights[0][k]).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let net_a = small_net(7, &[3, 2], &[Activation::Linear]);
        let net_b = small_net(8, &[3, 4], &[Activation::Linear]);
        let cache = net_a.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(net_b.backward(&cache, &[1.0; 4]), Err(Error::State(_))));
    }

    #[test]
    fn sgd_zero_learning_rate_is_identity() {
        let mut net = small_net(9, &[3, 2], &[Activation::Linear]);
        let before = net.clone();
        let cache = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        let grads = net.backward(&cache, &[1.0, -1.0]).unwrap();
        net.sgd_step(&grads, 0.0, Direction::Descent).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_scalar_example() {
        let mut net = small_net(10, &[1, 1], &[Activation::Linear]);
        net.layers[0].weights[0] = 1.0;
        let grads = Gradients {
            weights: vec![vec![2.0]],
            bias: vec![vec![0.0]],
            input: vec![],
        };
        net.sgd_step(&grads, 0.1, Direction::Descent).unwrap();
        assert_eq!(net.layers[0].weights[0], 0.8);
        net.sgd_step(&grads, 0.1, Direction::Ascent).unwrap();
        assert_eq!(net.layers[0].weights[0], 1.0);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut net = small_net(11, &[1, 1], &[Activation::Linear]);
        let before = net.clone();
        let grads = Gradients {
            weights: vec![vec![f64::NAN]],
            bias: vec![vec![0.0]],
            input: vec![],
        };
        assert!(matches!(
            net.sgd_step(&grads, 0.1, Direction::Descent),
            Err(Error::Numeric(_))
        ));
        assert_eq!(net, before);
    }

    #[test]
    fn log_prob_seed_examples() {
        let seed = log_prob_grad_seed(&[0.25; 4], 0).unwrap();
        assert_eq!(seed, vec![0.75, -0.25, -0.25, -0.25]);
        let seed = log_prob_grad_seed(&[1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(seed, vec![0.0, 0.0, 0.0]);
        assert!(log_prob_grad_seed(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn log_prob_seed_matches_finite_differences() {
        let logits = [0.4, -1.3, 0.9, 0.2];
        let probs = softmax(&logits);
        let chosen = 1;
        let seed = log_prob_grad_seed(&probs, chosen).unwrap();
        let eps = 1e-6;
        for k in 0..4 {
            let mut plus = logits;
            plus[k] += eps;
            let mut minus = logits;
            minus[k] -= eps;
            let fd = (log_softmax(&plus)[chosen] - log_softmax(&minus)[chosen]) / (2.0 * eps);
            assert!((fd - seed[k]).abs() < 1e-6, "logit {k}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = small_net(42, &[5, 4, 3], &[Activation::Tanh, Activation::Softmax]);
        let b = small_net(42, &[5, 4, 3], &[Activation::Tanh, Activation::Softmax]);
        assert_eq!(a, b);
        assert_ne!(a, small_net(43, &[5, 4, 3], &[Activation::Tanh, Activation::Softmax]));
    }

    #[test]
    fn softmax_head_is_normalized_and_positive() {
        let net = small_net(12, &[6, 8, 7], &[Activation::Tanh, Activation::Softmax]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let out = net.forward(&x).unwrap();
            let probs = out.output();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn tanh_stack_stays_bounded_over_many_cycles() {
        let net = small_net(13, &[4, 8, 8, 2], &[Activation::Tanh, Activation::Tanh, Activation::Linear]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let cache = net.forward(&x).unwrap();
            for layer_out in &cache.post[..2] {
                for v in layer_out {
                    assert!(v.is_finite() && v.abs() < 1.0);
                }
            }
            let g = net.backward(&cache, &[1.0, -0.5]).unwrap();
            assert!(g.is_finite());
        }
    }

    #[test]
    fn actor_two_heads_share_trunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let actor = TwoHeadActorNet::new(5, &[8, 8], &[6], 4, 3, &mut rng).unwrap();
        let cache = actor.forward(&[0.1, -0.2, 0.3, 0.0, 1.0]).unwrap();
        assert_eq!(cache.time_probs().len(), 4);
        assert_eq!(cache.power_probs().len(), 3);
        let sum_t: f64 = cache.time_probs().iter().sum();
        let sum_p: f64 = cache.power_probs().iter().sum();
        assert!((sum_t - 1.0).abs() < 1e-9 && (sum_p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let actor = TwoHeadActorNet::new(7, &[9], &[5], 6, 6, &mut rng).unwrap();
        let mut buf = Vec::new();
        actor.save(&mut buf).unwrap();
        let loaded = TwoHeadActorNet::load(&mut buf.as_slice()).unwrap();
        assert_eq!(actor, loaded);

        let critic = small_net(32, &[7, 9, 1], &[Activation::Tanh, Activation::Linear]);
        let mut buf = Vec::new();
        critic.save(&mut buf).unwrap();
        assert_eq!(DenseNet::load(&mut buf.as_slice()).unwrap(), critic);
    }
}
