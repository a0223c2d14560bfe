//! Dense building blocks and the three-network model: feature generator,
//! classifier and domain discriminator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const MAX_DROPOUT: f64 = 0.5;
pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const DEFAULT_HEAD_HIDDEN: [usize; 2] = [64, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in_dim × out_dim]`.
    pub weight: Tensor,
    /// `[out_dim]`.
    pub bias: Tensor,
    pub activation: Activation,
    /// Applied to this layer's output in training mode.
    pub dropout_rate: f64,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation, dropout_rate: f64) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "dense_layer",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        if !(0.0..=MAX_DROPOUT).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {dropout_rate} outside [0, {MAX_DROPOUT}]"
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            dropout_rate,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Fan-in scaled uniform weights (Kaiming for relu, LeCun otherwise), zero bias.
    fn init(in_dim: usize, out_dim: usize, activation: Activation, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = init_bound(in_dim, activation);
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        DenseLayer::new(
            Tensor::matrix(in_dim, out_dim, w)?,
            Tensor::zeros(&[out_dim]),
            activation,
            dropout_rate,
        )
    }
}

/// Half-width of the uniform initialization interval.
pub fn init_bound(fan_in: usize, activation: Activation) -> f64 {
    let gain2 = match activation {
        Activation::Relu => 2.0,
        Activation::Identity => 1.0,
    };
    (3.0 * gain2 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Relu on every hidden layer, identity on the output layer.
    /// `dropout_at` selects the layer whose output gets dropout.
    fn init(dims: &[usize], dropout_at: Option<(usize, f64)>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                let rate = match dropout_at {
                    Some((at, r)) if at == i => r,
                    _ => 0.0,
                };
                DenseLayer::init(dims[i], dims[i + 1], act, rate, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }
}

/// Architecture of a [`CdaModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    /// Input dimension followed by generator hidden widths.
    pub generator: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Hidden widths shared by the classifier and discriminator heads.
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
}

impl ModelDims {
    pub fn new(generator: Vec<usize>, embed_dim: usize, num_classes: usize) -> Self {
        ModelDims {
            generator,
            embed_dim,
            num_classes,
            head_hidden: DEFAULT_HEAD_HIDDEN.to_vec(),
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.generator.is_empty() {
            bad.push("generator dims must include the input dimension".to_string());
        }
        if self.generator.iter().chain(&self.head_hidden).any(|&d| d == 0) {
            bad.push("all layer dims must be positive".to_string());
        }
        if self.embed_dim == 0 {
            bad.push("embed_dim must be positive".to_string());
        }
        if self.num_classes == 0 {
            bad.push("num_classes must be positive".to_string());
        }
        if !(0.0..=MAX_DROPOUT).contains(&self.dropout) {
            bad.push(format!("dropout must lie in [0, {MAX_DROPOUT}]"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }
}

/// Generator `G`, classifier `C` and domain discriminator `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdaModel {
    pub generator: Mlp,
    pub classifier: Mlp,
    pub discriminator: Mlp,
    pub embed_dim: usize,
    pub num_classes: usize,
}

/// Initializes a model with the default head widths and dropout.
pub fn init_model(layer_dims: &[usize], embed_dim: usize, num_classes: usize, seed: u64) -> Result<CdaModel> {
    init_model_with(&ModelDims::new(layer_dims.to_vec(), embed_dim, num_classes), seed)
}

pub fn init_model_with(dims: &ModelDims, seed: u64) -> Result<CdaModel> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut gen_dims = dims.generator.clone();
    gen_dims.push(dims.embed_dim);
    let generator = Mlp::init(&gen_dims, None, &mut rng)?;

    let head = |out: usize, rng: &mut ChaCha8Rng| {
        let mut d = vec![dims.embed_dim];
        d.extend(&dims.head_hidden);
        d.push(out);
        let n_layers = d.len() - 1;
        // dropout on the second-to-last layer
        let at = (n_layers >= 2).then(|| (n_layers - 2, dims.dropout));
        Mlp::init(&d, at, rng)
    };
    let classifier = head(dims.num_classes, &mut rng)?;
    let discriminator = head(1, &mut rng)?;

    CdaModel::new(generator, classifier, discriminator)
}

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(r) => Mode::Train(r),
        }
    }
}

#[derive(Debug, Clone)]
struct BoundLayer {
    weight: NodeId,
    bias: NodeId,
    activation: Activation,
    dropout_rate: f64,
}

/// Model parameters registered as leaves of one step's graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    generator: Vec<BoundLayer>,
    classifier: Vec<BoundLayer>,
    discriminator: Vec<BoundLayer>,
    embed_dim: usize,
    in_dim: usize,
}

fn bind_mlp(g: &mut Graph, mlp: &Mlp) -> Vec<BoundLayer> {
    mlp.layers
        .iter()
        .map(|l| BoundLayer {
            weight: g.param(l.weight.clone()),
            bias: g.param(l.bias.clone()),
            activation: l.activation,
            dropout_rate: l.dropout_rate,
        })
        .collect()
}

fn forward_layers(g: &mut Graph, layers: &[BoundLayer], x: NodeId, mut mode: Mode<'_>) -> Result<NodeId> {
    let mut h = x;
    for l in layers {
        let lin = g.matmul(h, l.weight)?;
        h = g.add(lin, l.bias)?;
        if l.activation == Activation::Relu {
            h = g.relu(h);
        }
        if let (Mode::Train(rng), true) = (&mut mode, l.dropout_rate > 0.0) {
            let keep = 1.0 - l.dropout_rate;
            let mask = (0..g.value(h).numel())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            h = g.dropout(h, mask)?;
        }
    }
    Ok(h)
}

impl BoundModel {
    /// Parameter node ids in [`CdaModel::parameters`] order.
    pub fn parameter_ids(&self) -> Vec<NodeId> {
        self.generator
            .iter()
            .chain(&self.classifier)
            .chain(&self.discriminator)
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// `z_raw = G(x)`.
    pub fn embed(&self, g: &mut Graph, x: NodeId, mode: Mode<'_>) -> Result<NodeId> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "forward_embed",
                lhs: s.to_vec(),
                rhs: vec![self.in_dim],
            });
        }
        forward_layers(g, &self.generator, x, mode)
    }

    fn check_embedding(&self, g: &Graph, op: &'static str, z: NodeId) -> Result<()> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != self.embed_dim {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![self.embed_dim],
            });
        }
        Ok(())
    }

    /// Raw class logits `C(z)`.
    pub fn classify(&self, g: &mut Graph, z: NodeId, mode: Mode<'_>) -> Result<NodeId> {
        self.check_embedding(g, "forward_classify", z)?;
        forward_layers(g, &self.classifier, z, mode)
    }

    /// Raw domain logit `D(z)`; during adversarial training `z` is the
    /// output of a gradient-reversal node.
    pub fn discriminate(&self, g: &mut Graph, z: NodeId, mode: Mode<'_>) -> Result<NodeId> {
        self.check_embedding(g, "forward_discriminate", z)?;
        forward_layers(g, &self.discriminator, z, mode)
    }
}

impl CdaModel {
    pub fn new(generator: Mlp, classifier: Mlp, discriminator: Mlp) -> Result<Self> {
        let embed_dim = generator.out_dim();
        let mismatch = |op, lhs: usize, rhs: usize| Error::ShapeMismatch {
            op,
            lhs: vec![lhs],
            rhs: vec![rhs],
        };
        for mlp in [&generator, &classifier, &discriminator] {
            if mlp.layers.is_empty() {
                return Err(Error::InvalidArgument("empty layer stack".into()));
            }
            for w in mlp.layers.windows(2) {
                if w[0].out_dim() != w[1].in_dim() {
                    return Err(mismatch("layer_chain", w[0].out_dim(), w[1].in_dim()));
                }
            }
        }
        if classifier.in_dim() != embed_dim {
            return Err(mismatch("classifier_input", classifier.in_dim(), embed_dim));
        }
        if discriminator.in_dim() != embed_dim {
            return Err(mismatch("discriminator_input", discriminator.in_dim(), embed_dim));
        }
        if discriminator.out_dim() != 1 {
            return Err(mismatch("discriminator_output", discriminator.out_dim(), 1));
        }
        let num_classes = classifier.out_dim();
        Ok(CdaModel {
            generator,
            classifier,
            discriminator,
            embed_dim,
            num_classes,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.generator.in_dim()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            generator: bind_mlp(g, &self.generator),
            classifier: bind_mlp(g, &self.classifier),
            discriminator: bind_mlp(g, &self.discriminator),
            embed_dim: self.embed_dim,
            in_dim: self.in_dim(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.generator
            .layers
            .iter()
            .chain(&self.classifier.layers)
            .chain(&self.discriminator.layers)
    }

    /// All parameter tensors: per layer weight then bias; G, then C, then D.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.generator
            .layers
            .iter_mut()
            .chain(&mut self.classifier.layers)
            .chain(&mut self.discriminator.layers)
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Number of parameter tensors in each of G, C, D.
    pub fn parameter_counts(&self) -> [usize; 3] {
        [
            2 * self.generator.layers.len(),
            2 * self.classifier.layers.len(),
            2 * self.discriminator.layers.len(),
        ]
    }

    /// Eval-mode embedding `G(x)`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xi = g.constant(x.clone());
        let z = bound.embed(&mut g, xi, Mode::Eval)?;
        Ok(g.value(z).clone())
    }

    /// Eval-mode logits `C(G(x))`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xi = g.constant(x.clone());
        let z = bound.embed(&mut g, xi, Mode::Eval)?;
        let l = bound.classify(&mut g, z, Mode::Eval)?;
        Ok(g.value(l).clone())
    }
}

/// Runs `G` then `C` in one graph, returning `(z_raw, logits)`.
pub fn embed_and_classify(g: &mut Graph, bound: &BoundModel, x: NodeId, mut mode: Mode<'_>) -> Result<(NodeId, NodeId)> {
    let z = bound.embed(g, x, mode.reborrow())?;
    let logits = bound.classify(g, z, mode)?;
    Ok((z, logits))
}

/// Divides every row by its Euclidean norm. Rows with norm at most `1e-12`
/// are rejected.
pub fn l2_normalize(g: &mut Graph, z: NodeId) -> Result<NodeId> {
    let v = g.value(z);
    if v.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "l2_normalize",
            lhs: v.shape().to_vec(),
            rhs: vec![],
        });
    }
    for r in 0..v.rows() {
        let norm = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::DegenerateRow { row: r, norm });
        }
    }
    let sq = g.mul(z, z)?;
    let ss = g.sum_axis_keep(sq, 1)?;
    let norm = g.sqrt(ss);
    g.div(z, norm)
}

// ---------------------------------------------------------------------------
// checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"CDACKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes all layer shapes and parameters as little-endian IEEE bits, plus the
/// hash of the configuration that produced them.
pub fn save_checkpoint(model: &CdaModel, config_hash: &[u8; 32], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(config_hash);
    for mlp in [&model.generator, &model.classifier, &model.discriminator] {
        buf.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
        for l in &mlp.layers {
            buf.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            buf.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            buf.push(match l.activation {
                Activation::Relu => 1,
                Activation::Identity => 0,
            });
            buf.extend_from_slice(&l.dropout_rate.to_bits().to_le_bytes());
            for v in l.weight.data().iter().chain(l.bias.data()) {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.take(8)?.try_into().unwrap())))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CdaModel, [u8; 32])> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let mut mlps = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let (i, o) = (r.u32()? as usize, r.u32()? as usize);
            let activation = match r.take(1)?[0] {
                0 => Activation::Identity,
                1 => Activation::Relu,
                b => return Err(Error::Format(format!("bad activation tag {b}"))),
            };
            let dropout = r.f64()?;
            let w = (0..i * o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let b = (0..o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(DenseLayer::new(
                Tensor::matrix(i, o, w)?,
                Tensor::vector(b)?,
                activation,
                dropout,
            )?);
        }
        mlps.push(Mlp { layers });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    let d = mlps.pop().unwrap();
    let c = mlps.pop().unwrap();
    let g = mlps.pop().unwrap();
    Ok((CdaModel::new(g, c, d)?, hash))
}
