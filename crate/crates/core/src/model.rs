//! Encoders α (self-supervised), β (domain-invariant), γ (domain-specific),
//! their linear heads, and the layer-normalized feature concatenation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::ImageTensor;
use crate::error::{Error, Result};
use crate::tensor::{concat, io, BoundParams, ParamSet, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Extractor {
    Alpha,
    Beta,
    Gamma,
}

impl Extractor {
    pub const ALL: [Extractor; 3] = [Extractor::Alpha, Extractor::Beta, Extractor::Gamma];

    /// Parameter-name prefix of the encoder.
    pub fn name(self) -> &'static str {
        match self {
            Extractor::Alpha => "alpha",
            Extractor::Beta => "beta",
            Extractor::Gamma => "gamma",
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Extractor::Alpha => 'a',
            Extractor::Beta => 'b',
            Extractor::Gamma => 'g',
        }
    }
}

/// Which extractors are instantiated and feed the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureMask {
    pub alpha: bool,
    pub beta: bool,
    pub gamma: bool,
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask::new(true, true, true);

    pub const fn new(alpha: bool, beta: bool, gamma: bool) -> Self {
        Self { alpha, beta, gamma }
    }

    /// The seven non-empty masks: singles, pairs, then all three.
    pub fn ablation_rows() -> [FeatureMask; 7] {
        [
            FeatureMask::new(true, false, false),
            FeatureMask::new(false, true, false),
            FeatureMask::new(false, false, true),
            FeatureMask::new(true, true, false),
            FeatureMask::new(true, false, true),
            FeatureMask::new(false, true, true),
            FeatureMask::ALL,
        ]
    }

    pub fn has(self, e: Extractor) -> bool {
        match e {
            Extractor::Alpha => self.alpha,
            Extractor::Beta => self.beta,
            Extractor::Gamma => self.gamma,
        }
    }

    pub fn active(self) -> Vec<Extractor> {
        Extractor::ALL.into_iter().filter(|&e| self.has(e)).collect()
    }

    pub fn count(self) -> usize {
        self.active().len()
    }

    pub fn validate(self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::invalid("feature mask must enable at least one extractor"));
        }
        Ok(())
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.active().iter().map(|e| e.symbol()).collect();
        f.write_str(if s.is_empty() { "-" } else { &s })
    }
}

impl FromStr for FeatureMask {
    type Err = Error;

    /// Accepts letters `a`, `b`, `g` (or `α`, `β`, `γ`) in any order.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = FeatureMask::new(false, false, false);
        for ch in s.trim().chars() {
            match ch {
                'a' | 'α' => m.alpha = true,
                'b' | 'β' => m.beta = true,
                'g' | 'γ' => m.gamma = true,
                _ => return Err(Error::invalid(format!("bad mask `{s}`: use letters a, b, g"))),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Flattened image size (3·H·W).
    pub input: usize,
    pub hidden: Vec<usize>,
    /// Embedding width `d`, shared by all three encoders.
    pub embed: usize,
}

impl EncoderConfig {
    pub fn new(input: usize) -> Self {
        Self {
            input,
            hidden: vec![128, 64],
            embed: 32,
        }
    }

    /// Embedding width used with full-size backbones.
    pub fn full_scale(input: usize) -> Self {
        Self {
            input,
            hidden: vec![1024],
            embed: 512,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.embed);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    /// Number of domains the domain head distinguishes (the sources).
    pub n_domains: usize,
    pub mask: FeatureMask,
    /// Layer normalization before concatenation.
    pub layer_norm: bool,
    /// Whether Δ_β / Δ_γ exist (off for the plain ERM classifier).
    pub aux_heads: bool,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, n_classes: usize, n_domains: usize, mask: FeatureMask) -> Self {
        Self {
            encoder,
            n_classes,
            n_domains,
            mask,
            layer_norm: true,
            aux_heads: true,
        }
    }

    /// A single β-architecture encoder with a linear classifier.
    pub fn erm(encoder: EncoderConfig, n_classes: usize) -> Self {
        Self {
            encoder,
            n_classes,
            n_domains: 0,
            mask: FeatureMask::new(false, true, false),
            layer_norm: false,
            aux_heads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mask.validate()?;
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes must be >= 2"));
        }
        if self.has_head_gamma() && self.n_domains < 1 {
            return Err(Error::invalid("domain head needs n_domains >= 1"));
        }
        Ok(())
    }

    pub fn has_head_beta(&self) -> bool {
        self.aux_heads && self.mask.beta
    }

    pub fn has_head_gamma(&self) -> bool {
        self.aux_heads && self.mask.gamma
    }

    pub fn n_layers(&self) -> usize {
        self.encoder.hidden.len() + 1
    }

    /// Expected shape of every parameter, in name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let widths = self.encoder.widths();
        let d = self.encoder.embed;
        let mut out = Vec::new();
        for e in self.mask.active() {
            for l in 0..widths.len() - 1 {
                out.push((format!("{}.w{l}", e.name()), vec![widths[l], widths[l + 1]]));
                out.push((format!("{}.b{l}", e.name()), vec![1, widths[l + 1]]));
            }
            if self.layer_norm {
                out.push((format!("ln.{}.gain", e.name()), vec![1, d]));
                out.push((format!("ln.{}.bias", e.name()), vec![1, d]));
            }
        }
        let mut head = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![1, o]));
        };
        if self.has_head_beta() {
            head("head_beta", d, self.n_classes);
        }
        if self.has_head_gamma() {
            head("head_gamma", d, self.n_domains);
        }
        head("head_c", self.mask.count() * d, self.n_classes);
        out.sort();
        out
    }
}

/// Parameter prefixes owned by one extractor's path: its encoder and layer norm.
pub fn extractor_prefixes(e: Extractor) -> [String; 2] {
    [format!("{}.", e.name()), format!("ln.{}.", e.name())]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Uniform fan-in scaled initialization: `±sqrt(6/fan_in)` before a relu,
    /// `±sqrt(3/fan_in)` for linear outputs; biases 0, layer-norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_hidden = config.encoder.hidden.len();
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") || is_bias(&name) {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[0] as f64;
                let before_relu = !name.starts_with("head") && layer_index(&name).is_some_and(|l| l < n_hidden);
                let limit = if before_relu {
                    (6.0 / fan_in).sqrt()
                } else {
                    (3.0 / fan_in).sqrt()
                };
                let data = (0..shape[0] * shape[1])
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load_params",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    /// Writes one tensor file per parameter plus a `name shape` manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, t) in self.params.iter() {
            io::write(&dir.join(format!("{name}.alfa")), t)?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name} {}\n", dims.join("x")));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, config: ModelConfig) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut params = ParamSet::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let name = line.split_whitespace().next().unwrap_or_default();
            params.insert(name, io::read(&dir.join(format!("{name}.alfa")))?);
        }
        Self::from_params(config, params)
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
        || name
            .rsplit('.')
            .next()
            .is_some_and(|l| l.starts_with('b') && l[1..].parse::<usize>().is_ok())
}

fn layer_index(name: &str) -> Option<usize> {
    name.rsplit('.').next()?.strip_prefix('w')?.parse().ok()
}

/// Stacks flattened images into an `n × 3HW` tensor.
pub fn images_to_tensor(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let width = first.len();
    let mut data = Vec::with_capacity(images.len() * width);
    for img in images {
        if img.len() != width {
            return Err(Error::Shape {
                op: "images_to_tensor",
                lhs: vec![width],
                rhs: vec![img.len()],
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), width], data)
}

/// Per-extractor embeddings; `None` for extractors the mask disables.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTriple<'g> {
    pub alpha: Option<Var<'g>>,
    pub beta: Option<Var<'g>>,
    pub gamma: Option<Var<'g>>,
}

impl<'g> FeatureTriple<'g> {
    pub fn get(&self, e: Extractor) -> Option<Var<'g>> {
        match e {
            Extractor::Alpha => self.alpha,
            Extractor::Beta => self.beta,
            Extractor::Gamma => self.gamma,
        }
    }

    pub fn require(&self, e: Extractor) -> Result<Var<'g>> {
        self.get(e)
            .ok_or_else(|| Error::invalid(format!("extractor {} is not active", e.name())))
    }
}

/// The MLP of one extractor: relu on hidden layers, linear output.
pub fn encoder_forward<'g>(config: &ModelConfig, p: &BoundParams<'g>, e: Extractor, x: Var<'g>) -> Result<Var<'g>> {
    let input = x.shape().last().copied().unwrap_or(0);
    if input != config.encoder.input {
        return Err(Error::Shape {
            op: "encode",
            lhs: vec![config.encoder.input],
            rhs: x.shape(),
        });
    }
    let layers = config.n_layers();
    let mut h = x;
    for l in 0..layers {
        let w = p.get(&format!("{}.w{l}", e.name()))?;
        let b = p.get(&format!("{}.b{l}", e.name()))?;
        h = h.matmul(w)?.add_row(b)?;
        if l + 1 < layers {
            h = h.relu()?;
        }
    }
    Ok(h)
}

/// Runs every active encoder on the same input; no weights are shared.
pub fn encode<'g>(config: &ModelConfig, p: &BoundParams<'g>, x: Var<'g>) -> Result<FeatureTriple<'g>> {
    let run = |e: Extractor| -> Result<Option<Var<'g>>> {
        if config.mask.has(e) {
            encoder_forward(config, p, e, x).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(FeatureTriple {
        alpha: run(Extractor::Alpha)?,
        beta: run(Extractor::Beta)?,
        gamma: run(Extractor::Gamma)?,
    })
}

/// Row-wise standardization followed by a learned gain and bias.
pub fn layer_norm<'g>(x: Var<'g>, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
    x.normalize_rows(eps)?.mul_row(gain)?.add_row(bias)
}

/// Layer-normalized active features concatenated in α, β, γ order.
pub fn concat_features<'g>(
    config: &ModelConfig,
    p: &BoundParams<'g>,
    t: &FeatureTriple<'g>,
    mask: FeatureMask,
) -> Result<Var<'g>> {
    mask.validate()?;
    let mut parts = Vec::with_capacity(3);
    for e in mask.active() {
        let z = t.require(e)?;
        parts.push(if config.layer_norm {
            let gain = p.get(&format!("ln.{}.gain", e.name()))?;
            let bias = p.get(&format!("ln.{}.bias", e.name()))?;
            layer_norm(z, gain, bias, LN_EPS)?
        } else {
            z
        });
    }
    concat(&parts)
}

fn linear<'g>(p: &BoundParams<'g>, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    x.matmul(p.get(&format!("{name}.w"))?)?
        .add_row(p.get(&format!("{name}.b"))?)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs<'g> {
    /// Class logits from z_β alone.
    pub beta: Option<Var<'g>>,
    /// Domain logits from z_γ alone.
    pub gamma: Option<Var<'g>>,
    /// Class logits from the masked concatenation.
    pub c: Var<'g>,
}

pub fn head_beta<'g>(p: &BoundParams<'g>, z_beta: Var<'g>) -> Result<Var<'g>> {
    linear(p, "head_beta", z_beta)
}

pub fn head_gamma<'g>(p: &BoundParams<'g>, z_gamma: Var<'g>) -> Result<Var<'g>> {
    linear(p, "head_gamma", z_gamma)
}

pub fn head_c<'g>(p: &BoundParams<'g>, features: Var<'g>) -> Result<Var<'g>> {
    linear(p, "head_c", features)
}

pub fn heads<'g>(
    config: &ModelConfig,
    p: &BoundParams<'g>,
    t: &FeatureTriple<'g>,
    mask: FeatureMask,
) -> Result<HeadOutputs<'g>> {
    let expected = p.get("head_c.w")?.shape()[0];
    let width = mask.count() * config.encoder.embed;
    if expected != width {
        return Err(Error::Shape {
            op: "head_c",
            lhs: vec![expected],
            rhs: vec![width],
        });
    }
    let beta = match (config.has_head_beta(), t.beta) {
        (true, Some(z)) => Some(head_beta(p, z)?),
        _ => None,
    };
    let gamma = match (config.has_head_gamma(), t.gamma) {
        (true, Some(z)) => Some(head_gamma(p, z)?),
        _ => None,
    };
    let c = head_c(p, concat_features(config, p, t, mask)?)?;
    Ok(HeadOutputs { beta, gamma, c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn cfg(input: usize, mask: FeatureMask) -> ModelConfig {
        ModelConfig::new(
            EncoderConfig {
                input,
                hidden: vec![6],
                embed: 4,
            },
            2,
            3,
            mask,
        )
    }

    fn input(n: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, w], (0..n * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_of_features_and_heads() {
        let m = Model::init(cfg(5, FeatureMask::ALL), 1).unwrap();
        let g = Graph::new();
        let p = m.params.bind(&g, |_| true);
        let x = g.constant(input(4, 5, 2));
        let t = encode(&m.config, &p, x).unwrap();
        for e in Extractor::ALL {
            assert_eq!(t.require(e).unwrap().shape(), vec![4, 4]);
        }
        let h = heads(&m.config, &p, &t, FeatureMask::ALL).unwrap();
        assert_eq!(h.beta.unwrap().shape(), vec![4, 2]);
        assert_eq!(h.gamma.unwrap().shape(), vec![4, 3]);
        assert_eq!(h.c.shape(), vec![4, 2]);
        assert_eq!(
            concat_features(&m.config, &p, &t, FeatureMask::ALL).unwrap().shape(),
            vec![4, 12]
        );
    }

    #[test]
    fn input_size_mismatch_is_an_error() {
        let m = Model::init(cfg(5, FeatureMask::ALL), 1).unwrap();
        let g = Graph::new();
        let p = m.params.bind(&g, |_| true);
        assert!(encode(&m.config, &p, g.constant(input(2, 6, 0))).is_err());
    }

    #[test]
    fn zero_weights_give_zero_embeddings_and_uniform_heads() {
        let mut m = Model::init(cfg(5, FeatureMask::ALL), 1).unwrap();
        let names: Vec<String> = m.params.names().map(str::to_string).collect();
        for n in names.iter().filter(|n| !n.starts_with("ln.")) {
            let t = m.params.get_mut(n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let p = m.params.bind(&g, |_| true);
        let t = encode(&m.config, &p, g.constant(input(3, 5, 3))).unwrap();
        assert!(t.alpha.unwrap().value().data().iter().all(|&v| v == 0.0));
        let h = heads(&m.config, &p, &t, FeatureMask::ALL).unwrap();
        let probs = h.gamma.unwrap().softmax().unwrap().value();
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn perturbing_one_encoder_leaves_the_others_bitwise() {
        let m = Model::init(cfg(5, FeatureMask::ALL), 4).unwrap();
        let mut m2 = m.clone();
        for v in m2.params.get_mut("alpha.w0").unwrap().data_mut() {
            *v += 0.3;
        }
        for v in m2.params.get_mut("beta.w1").unwrap().data_mut() {
            *v -= 0.2;
        }
        let x = input(4, 5, 5);
        let run = |m: &Model| {
            let g = Graph::new();
            let p = m.params.bind(&g, |_| false);
            let t = encode(&m.config, &p, g.constant(x.clone())).unwrap();
            let h = heads(&m.config, &p, &t, FeatureMask::ALL).unwrap();
            (
                t.alpha.unwrap().value(),
                t.beta.unwrap().value(),
                t.gamma.unwrap().value(),
                h.gamma.unwrap().value(),
            )
        };
        let (a1, b1, g1, hg1) = run(&m);
        let (a2, b2, g2, hg2) = run(&m2);
        assert_ne!(a1, a2);
        assert_ne!(b1, b2);
        assert_eq!(g1, g2);
        assert_eq!(hg1, hg2);
    }

    #[test]
    fn gradients_of_beta_only_loss_vanish_elsewhere() {
        let m = Model::init(cfg(5, FeatureMask::ALL), 6).unwrap();
        let g = Graph::new();
        let p = m.params.bind(&g, |_| true);
        let t = encode(&m.config, &p, g.constant(input(4, 5, 7))).unwrap();
        let loss = head_beta(&p, t.beta.unwrap()).unwrap().mean().unwrap();
        let grads = p.gradients(&g.backward(loss).unwrap());
        for (name, gr) in &grads {
            let zero = gr.data().iter().all(|&v| v == 0.0);
            let owned = name.starts_with("beta.") || name.starts_with("head_beta.");
            assert!(owned || zero, "{name} received gradient");
        }
        assert!(grads["beta.w0"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn layer_norm_statistics() {
        let g = Graph::new();
        let one = g.constant(Tensor::row(&[1.0, 1.0]));
        let zero = g.constant(Tensor::row(&[0.0, 0.0]));
        let y = layer_norm(g.constant(Tensor::row(&[1.0, 3.0])), one, zero, LN_EPS).unwrap();
        // hand: mean 2, variance 1 → (±1)/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.value().data()[0] + expect).abs() < 1e-12);
        assert!((y.value().data()[1] - expect).abs() < 1e-12);

        let c = layer_norm(g.constant(Tensor::row(&[4.0, 4.0])), one, zero, LN_EPS).unwrap();
        assert!(c.value().data().iter().all(|&v| v == 0.0));

        let x = input(10, 16, 8).map(|v| 3.0 * v + 1.0);
        let gain = g.constant(Tensor::full(&[1, 16], 1.0));
        let bias = g.constant(Tensor::zeros(&[1, 16]));
        let y = layer_norm(g.constant(x), gain, bias, LN_EPS).unwrap().value();
        for r in 0..10 {
            let row = y.row_slice(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn concat_keeps_extractor_order() {
        let m = Model::init(cfg(5, FeatureMask::ALL), 1).unwrap();
        let mut cfg_no_ln = m.config.clone();
        cfg_no_ln.layer_norm = false;
        let g = Graph::new();
        let p = m.params.bind(&g, |_| false);
        let marker = |v: f64| g.constant(Tensor::full(&[2, 4], v));
        let t = FeatureTriple {
            alpha: Some(marker(1.0)),
            beta: Some(marker(2.0)),
            gamma: Some(marker(3.0)),
        };
        let out = concat_features(&cfg_no_ln, &p, &t, FeatureMask::new(true, false, true))
            .unwrap()
            .value();
        assert_eq!(out.row_slice(0), &[1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0]);

        let only_beta = concat_features(&m.config, &p, &t, FeatureMask::new(false, true, false)).unwrap();
        let gain = p.get("ln.beta.gain").unwrap();
        let bias = p.get("ln.beta.bias").unwrap();
        let direct = layer_norm(t.beta.unwrap(), gain, bias, LN_EPS).unwrap();
        assert_eq!(only_beta.value(), direct.value());
        assert!(concat_features(&m.config, &p, &t, FeatureMask::new(false, false, false)).is_err());
    }

    #[test]
    fn masked_models_skip_inactive_extractors() {
        let m = Model::init(cfg(5, FeatureMask::new(true, false, true)), 1).unwrap();
        assert!(m
            .params
            .names()
            .all(|n| !n.starts_with("beta") && !n.starts_with("head_beta")));
        assert_eq!(m.params.get("head_c.w").unwrap().shape(), &[8, 2]);
        let g = Graph::new();
        let p = m.params.bind(&g, |_| true);
        let t = encode(&m.config, &p, g.constant(input(2, 5, 1))).unwrap();
        assert!(t.beta.is_none());
        assert!(heads(&m.config, &p, &t, FeatureMask::ALL).is_err());
    }

    #[test]
    fn erm_config_has_one_encoder_and_no_aux_heads() {
        let m = Model::init(ModelConfig::erm(EncoderConfig::new(12), 3), 0).unwrap();
        let names: Vec<&str> = m.params.names().collect();
        assert!(names.iter().all(|n| n.starts_with("beta.") || n.starts_with("head_c.")));
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let m = Model::init(cfg(5, FeatureMask::ALL), 9).unwrap();
        m.save(tmp.path()).unwrap();
        let back = Model::load(tmp.path(), m.config.clone()).unwrap();
        for (name, t) in m.params.iter() {
            let b = back.params.get(name).unwrap();
            assert!(t.max_abs_diff(b) < 1e-6);
        }
        let manifest = fs::read_to_string(tmp.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("alpha.w0 5x6"));
        let other = cfg(5, FeatureMask::new(true, false, false));
        assert!(Model::load(tmp.path(), other).is_err());
    }

    #[test]
    fn mask_parsing_and_display() {
        assert_eq!("abg".parse::<FeatureMask>().unwrap(), FeatureMask::ALL);
        assert_eq!("γα".parse::<FeatureMask>().unwrap().to_string(), "ag");
        assert!("".parse::<FeatureMask>().is_err());
        assert!("x".parse::<FeatureMask>().is_err());
        let rows = FeatureMask::ablation_rows();
        assert_eq!(
            rows.iter().map(ToString::to_string).collect::<Vec<_>>(),
            ["a", "b", "g", "ab", "ag", "bg", "abg"]
        );
    }
}
