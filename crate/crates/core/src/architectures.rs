//! Generator / discriminator pairs in three families.
//!
//! * `dcgan-like`: dense projection to a small feature map, then
//!   upsample + conv blocks that each end in BN and ReLU, then a conv to
//!   the output channels and `tanh`. The discriminator stacks
//!   stride-2 4×4 and 3×3 convolutions with leaky ReLU.
//! * `resnet-like`: residual up-blocks (BN, ReLU, up, conv, BN, ReLU, conv
//!   with an upsample + 1×1 conv skip), a final BN/ReLU/conv and `tanh`.
//!   The discriminator uses residual down-blocks and global sum pooling.
//! * `mlp`: fully connected networks for low-dimensional data.
//!
//! Channel widths halve per generator block and double per discriminator
//! block, starting from `base_channels`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::modulation::{
    spectral_normalize_var, BatchNormLayer, ConditionalBnLayer, LatentComposer, Mode,
    ProjectionHead, SelfModulatedBn, SelfModulator, SpectralNormState, MODULATOR_HIDDEN,
};
use crate::nn::{glorot, Conv, Dense, Params};
use crate::tensor::{Padding, Tensor};

// RNG streams used while building, so that adding modulators never
// perturbs the main layers' initial weights.
const STREAM_MAIN: u64 = 0;
const STREAM_MODULATORS: u64 = 1;
const STREAM_SPECTRAL: u64 = 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    DcganLike,
    ResnetLike,
    Mlp,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::DcganLike => "dcgan-like",
            Family::ResnetLike => "resnet-like",
            Family::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcgan-like" | "dcgan" => Ok(Family::DcganLike),
            "resnet-like" | "resnet" => Ok(Family::ResnetLike),
            "mlp" => Ok(Family::Mlp),
            _ => Err(Error::Configuration(format!("unknown architecture family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationKind {
    None,
    #[serde(rename = "self")]
    SelfMod,
    Conditional,
    SelfPlusConditional,
}

impl ModulationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModulationKind::None => "none",
            ModulationKind::SelfMod => "self",
            ModulationKind::Conditional => "conditional",
            ModulationKind::SelfPlusConditional => "self_plus_conditional",
        }
    }

    pub fn uses_labels(self) -> bool {
        matches!(self, ModulationKind::Conditional | ModulationKind::SelfPlusConditional)
    }
}

impl std::str::FromStr for ModulationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(ModulationKind::None),
            "self" | "self-mod" => Ok(ModulationKind::SelfMod),
            "conditional" => Ok(ModulationKind::Conditional),
            "self_plus_conditional" => Ok(ModulationKind::SelfPlusConditional),
            _ => Err(Error::Configuration(format!("unknown modulation kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModulationSpec {
    pub kind: ModulationKind,
    /// One flag per BN site in build order; `None` means every site.
    pub layer_mask: Option<Vec<bool>>,
    pub hidden: usize,
    pub num_classes: usize,
}

impl Default for ModulationSpec {
    fn default() -> Self {
        Self {
            kind: ModulationKind::None,
            layer_mask: None,
            hidden: MODULATOR_HIDDEN,
            num_classes: 1,
        }
    }
}

impl ModulationSpec {
    pub fn new(kind: ModulationKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Only site `layer` is modulated.
    pub fn single_layer(kind: ModulationKind, sites: usize, layer: usize) -> Self {
        let mut mask = vec![false; sites];
        mask[layer] = true;
        Self {
            kind,
            layer_mask: Some(mask),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub num_blocks: usize,
    /// `H×W×C` for images, `[D]` for the `mlp` family.
    pub output_shape: Vec<usize>,
    pub modulation: ModulationSpec,
}

impl ArchSpec {
    /// Small fully connected pair for 2-D point data.
    pub fn mlp(latent_dim: usize, width: usize, hidden_layers: usize, out_dim: usize) -> Self {
        Self {
            family: Family::Mlp,
            latent_dim,
            base_channels: width,
            num_blocks: hidden_layers,
            output_shape: vec![out_dim],
            modulation: ModulationSpec::default(),
        }
    }

    pub fn image(family: Family, latent_dim: usize, base: usize, blocks: usize, hwc: [usize; 3]) -> Self {
        Self {
            family,
            latent_dim,
            base_channels: base,
            num_blocks: blocks,
            output_shape: hwc.to_vec(),
            modulation: ModulationSpec::default(),
        }
    }

    pub fn with_modulation(mut self, modulation: ModulationSpec) -> Self {
        self.modulation = modulation;
        self
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// Number of BN sites the generator will contain.
    pub fn norm_sites(&self) -> usize {
        match self.family {
            Family::DcganLike => self.num_blocks,
            Family::ResnetLike => 2 * self.num_blocks + 1,
            Family::Mlp => self.num_blocks + 1,
        }
    }

    /// Side length of the first generator feature map.
    pub fn start_size(&self) -> Result<usize> {
        let h = self.output_shape[0];
        let f = 1usize << self.num_blocks;
        if !h.is_multiple_of(f) || h / f == 0 {
            return Err(Error::Configuration(format!(
                "output size {h} is not a multiple of 2^{}",
                self.num_blocks
            )));
        }
        Ok(h / f)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Configuration(m));
        if self.latent_dim == 0 || self.base_channels == 0 {
            return cfg("latent_dim and base_channels must be positive".into());
        }
        match self.family {
            Family::Mlp => {
                if self.output_shape.len() != 1 || self.output_shape[0] == 0 {
                    return cfg(format!("mlp output shape must be [D], got {:?}", self.output_shape));
                }
            }
            _ => {
                let s = &self.output_shape;
                if s.len() != 3 || s[0] != s[1] || s[2] == 0 {
                    return cfg(format!("image output shape must be square H×W×C, got {s:?}"));
                }
                if self.num_blocks == 0 {
                    return cfg("image families need at least one block".into());
                }
                self.start_size()?;
            }
        }
        let m = &self.modulation;
        if let Some(mask) = &m.layer_mask {
            if mask.len() != self.norm_sites() {
                return cfg(format!(
                    "layer mask has {} entries but the generator has {} BN layers",
                    mask.len(),
                    self.norm_sites()
                ));
            }
        }
        if m.kind != ModulationKind::None && m.hidden == 0 && m.kind != ModulationKind::Conditional {
            return cfg("modulator hidden width must be positive".into());
        }
        if m.num_classes == 0 {
            return cfg("num_classes must be positive".into());
        }
        Ok(())
    }

    fn site_active(&self, i: usize) -> bool {
        self.modulation.kind != ModulationKind::None
            && self.modulation.layer_mask.as_ref().is_none_or(|m| m[i])
    }
}

// ----- generator ------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NormSite {
    Plain(BatchNormLayer),
    SelfModulated(SelfModulatedBn),
    Conditional(ConditionalBnLayer),
}

impl NormSite {
    pub fn is_modulated(&self) -> bool {
        !matches!(self, NormSite::Plain(_))
    }

    pub fn channels(&self) -> usize {
        match self {
            NormSite::Plain(l) => l.stats.channels(),
            NormSite::SelfModulated(l) => l.stats.channels(),
            NormSite::Conditional(l) => l.stats.channels(),
        }
    }

    fn forward(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        h: Var,
        z: Var,
        labels: Option<&[usize]>,
        mode: Mode,
    ) -> Result<Var> {
        match self {
            NormSite::Plain(l) => l.forward(g, vars, h, mode),
            NormSite::SelfModulated(l) => l.forward(g, vars, h, z, mode),
            NormSite::Conditional(l) => {
                let labels = labels.ok_or_else(|| {
                    Error::Argument("label-conditional generator needs labels".into())
                })?;
                l.forward(g, vars, h, labels, mode)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResUpBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum GenBody {
    Dcgan {
        fc: Dense,
        convs: Vec<Conv>,
        out: Conv,
    },
    Resnet {
        fc: Dense,
        blocks: Vec<ResUpBlock>,
        out: Conv,
    },
    Mlp {
        input: Dense,
        hidden: Vec<Dense>,
        out: Dense,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub spec: ArchSpec,
    pub params: Params,
    pub norms: Vec<NormSite>,
    pub composer: Option<LatentComposer>,
    pub mode: Mode,
    body: GenBody,
}

struct SiteBuilder<'a> {
    spec: &'a ArchSpec,
    mod_rng: ChaCha8Rng,
    sites: Vec<NormSite>,
}

impl SiteBuilder<'_> {
    fn push(&mut self, params: &mut Params, channels: usize) {
        let i = self.sites.len();
        let name = format!("norm{i}");
        let m = &self.spec.modulation;
        let site = if !self.spec.site_active(i) {
            NormSite::Plain(BatchNormLayer::new(params, &name, channels))
        } else if m.kind == ModulationKind::Conditional {
            NormSite::Conditional(ConditionalBnLayer::new(params, &name, m.num_classes, channels))
        } else {
            NormSite::SelfModulated(SelfModulatedBn::new(
                params,
                &name,
                self.spec.latent_dim,
                m.hidden,
                channels,
                &mut self.mod_rng,
            ))
        };
        self.sites.push(site);
    }
}

/// Builds a generator with parameters drawn from `seed`.
pub fn build_generator(spec: &ArchSpec, seed: u64) -> Result<Generator> {
    spec.validate()?;
    let mut rng = stream(seed, STREAM_MAIN);
    let mut params = Params::new();
    let mut sb = SiteBuilder {
        spec,
        mod_rng: stream(seed, STREAM_MODULATORS),
        sites: Vec::new(),
    };
    let d = spec.latent_dim;
    let body = match spec.family {
        Family::Mlp => {
            let w = spec.base_channels;
            let input = Dense::new(&mut params, "g.in", d, w, true, &mut rng);
            let mut hidden = Vec::new();
            for i in 0..spec.num_blocks {
                sb.push(&mut params, w);
                hidden.push(Dense::new(&mut params, &format!("g.fc{i}"), w, w, true, &mut rng));
            }
            sb.push(&mut params, w);
            let out = Dense::new(&mut params, "g.out", w, spec.output_shape[0], true, &mut rng);
            GenBody::Mlp { input, hidden, out }
        }
        Family::DcganLike => {
            let s = spec.start_size()?;
            let nb = spec.num_blocks;
            let mut ch = spec.base_channels << nb;
            let fc = Dense::new(&mut params, "g.fc", d, s * s * ch, true, &mut rng);
            let mut convs = Vec::new();
            for i in 0..nb {
                let next = ch / 2;
                convs.push(Conv::new(&mut params, &format!("g.conv{i}"), 3, ch, next, 1, Padding::Same, &mut rng));
                sb.push(&mut params, next);
                ch = next;
            }
            let out = Conv::new(&mut params, "g.out", 3, ch, spec.output_shape[2], 1, Padding::Same, &mut rng);
            GenBody::Dcgan { fc, convs, out }
        }
        Family::ResnetLike => {
            let s = spec.start_size()?;
            let nb = spec.num_blocks;
            let mut ch = spec.base_channels << nb;
            let fc = Dense::new(&mut params, "g.fc", d, s * s * ch, true, &mut rng);
            let mut blocks = Vec::new();
            for i in 0..nb {
                let next = ch / 2;
                sb.push(&mut params, ch);
                let conv1 = Conv::new(&mut params, &format!("g.block{i}.conv1"), 3, ch, next, 1, Padding::Same, &mut rng);
                sb.push(&mut params, next);
                let conv2 = Conv::new(&mut params, &format!("g.block{i}.conv2"), 3, next, next, 1, Padding::Same, &mut rng);
                let skip = Conv::new(&mut params, &format!("g.block{i}.skip"), 1, ch, next, 1, Padding::Same, &mut rng);
                blocks.push(ResUpBlock { conv1, conv2, skip });
                ch = next;
            }
            sb.push(&mut params, ch);
            let out = Conv::new(&mut params, "g.out", 3, ch, spec.output_shape[2], 1, Padding::Same, &mut rng);
            GenBody::Resnet { fc, blocks, out }
        }
    };
    let composer = (spec.modulation.kind == ModulationKind::SelfPlusConditional)
        .then(|| LatentComposer::new(&mut params, "g.compose", spec.modulation.num_classes, d));
    debug_assert_eq!(sb.sites.len(), spec.norm_sites());
    Ok(Generator {
        spec: spec.clone(),
        params,
        norms: sb.sites,
        composer,
        mode: Mode::Train,
        body,
    })
}

impl Generator {
    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn output_len(&self) -> usize {
        self.spec.output_len()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Channels of every BN site, in build order.
    pub fn norm_channels(&self) -> Vec<usize> {
        self.norms.iter().map(NormSite::channels).collect()
    }

    /// `z: N×d` (plus labels for label-conditional kinds) → `N×output_shape`.
    pub fn forward(&mut self, g: &mut Graph, vars: &[Var], z: Var, labels: Option<&[usize]>) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.spec.latent_dim {
            return Err(Error::dim("generator", &zs, &[0, self.spec.latent_dim]));
        }
        let n = zs[0];
        if self.spec.modulation.kind.uses_labels() {
            match labels {
                Some(l) if l.len() == n => {}
                Some(l) => return Err(Error::dim("generator labels", &[l.len()], &[n])),
                None => return Err(Error::Argument("label-conditional generator needs labels".into())),
            }
        }
        let z = match (&self.composer, labels) {
            (Some(c), Some(l)) => c.forward(g, vars, z, l)?,
            _ => z,
        };
        let mode = self.mode;
        let norms = &mut self.norms;
        let mut norm = |i: usize, g: &mut Graph, h: Var| norms[i].forward(g, vars, h, z, labels, mode);
        let out = match &self.body {
            GenBody::Mlp { input, hidden, out } => {
                let mut h = input.forward(g, vars, z)?;
                for (i, layer) in hidden.iter().enumerate() {
                    h = norm(i, g, h)?;
                    h = g.relu(h);
                    h = layer.forward(g, vars, h)?;
                }
                h = norm(hidden.len(), g, h)?;
                h = g.relu(h);
                out.forward(g, vars, h)?
            }
            GenBody::Dcgan { fc, convs, out } => {
                let s = self.spec.start_size()?;
                let ch = self.spec.base_channels << self.spec.num_blocks;
                let h = fc.forward(g, vars, z)?;
                let mut h = g.reshape(h, &[n, s, s, ch])?;
                for (i, conv) in convs.iter().enumerate() {
                    h = g.upsample_nearest(h, 2)?;
                    h = conv.forward(g, vars, h)?;
                    h = norm(i, g, h)?;
                    h = g.relu(h);
                }
                out.forward(g, vars, h)?
            }
            GenBody::Resnet { fc, blocks, out } => {
                let s = self.spec.start_size()?;
                let ch = self.spec.base_channels << self.spec.num_blocks;
                let h = fc.forward(g, vars, z)?;
                let mut h = g.reshape(h, &[n, s, s, ch])?;
                for (i, b) in blocks.iter().enumerate() {
                    let mut r = norm(2 * i, g, h)?;
                    r = g.relu(r);
                    r = g.upsample_nearest(r, 2)?;
                    r = b.conv1.forward(g, vars, r)?;
                    r = norm(2 * i + 1, g, r)?;
                    r = g.relu(r);
                    r = b.conv2.forward(g, vars, r)?;
                    let skip = g.upsample_nearest(h, 2)?;
                    let skip = b.skip.forward(g, vars, skip)?;
                    h = g.add(r, skip)?;
                }
                h = norm(2 * blocks.len(), g, h)?;
                h = g.relu(h);
                out.forward(g, vars, h)?
            }
        };
        Ok(g.tanh(out))
    }

    /// Forward pass on plain tensors with frozen parameters.
    pub fn generate(&mut self, z: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &vars, zv, labels)?;
        Ok(g.value(out).clone())
    }

    /// Parameters that exist only because of modulation, in closed form:
    /// each active site swaps a plain BN's `2C` parameters for two
    /// modulators (self kinds) or two `classes×C` tables (conditional).
    pub fn modulation_param_overhead(&self) -> usize {
        let d = self.spec.latent_dim;
        let h = self.spec.modulation.hidden;
        let k = self.spec.modulation.num_classes;
        let sites: usize = self
            .norms
            .iter()
            .map(|s| match s {
                NormSite::Plain(_) => 0,
                NormSite::SelfModulated(l) => {
                    let c = l.stats.channels();
                    2 * SelfModulator::param_count(d, h, c) - 2 * c
                }
                NormSite::Conditional(l) => 2 * k * l.stats.channels() - 2 * l.stats.channels(),
            })
            .sum();
        sites + self.composer.as_ref().map_or(0, |_| 2 * k * d)
    }
}

/// Number of BN sites whose scale and shift depend on `z` or `y`.
pub fn count_modulated_layers(g: &Generator) -> usize {
    g.norms.iter().filter(|s| s.is_modulated()).count()
}

// ----- discriminator --------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResDownBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
    downsample: bool,
    preactivate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum DiscBody {
    Dcgan { convs: Vec<Conv> },
    Resnet { blocks: Vec<ResDownBlock> },
    Mlp { layers: Vec<Dense> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub spec: ArchSpec,
    pub params: Params,
    pub head: ProjectionHead,
    /// Per-weight power-iteration state when spectral normalization is on.
    pub spectral: Option<Vec<(usize, SpectralNormState)>>,
    pub feature_dim: usize,
    body: DiscBody,
}

/// Builds a discriminator for images (or points) of `spec.output_shape`.
/// With `projection` a label embedding is added to the logit; with
/// `spectral_norm` every weight is divided by its estimated top singular
/// value on each forward pass.
pub fn build_discriminator(spec: &ArchSpec, projection: bool, spectral_norm: bool, seed: u64) -> Result<Discriminator> {
    spec.validate()?;
    let mut rng = stream(seed ^ 0x5eed_d15c, STREAM_MAIN);
    let mut params = Params::new();
    let mut weights = Vec::new();
    let base = spec.base_channels;
    let (body, feature_dim) = match spec.family {
        Family::Mlp => {
            let w = base;
            let mut layers = Vec::new();
            let mut fan_in = spec.output_shape[0];
            for i in 0..=spec.num_blocks {
                let l = Dense::new(&mut params, &format!("d.fc{i}"), fan_in, w, true, &mut rng);
                weights.push(l.w);
                layers.push(l);
                fan_in = w;
            }
            (DiscBody::Mlp { layers }, w)
        }
        Family::DcganLike => {
            let c = spec.output_shape[2];
            let mut convs = Vec::new();
            let mut ch = base;
            convs.push(Conv::new(&mut params, "d.conv_in", 3, c, ch, 1, Padding::Same, &mut rng));
            for i in 0..spec.num_blocks {
                convs.push(Conv::new(&mut params, &format!("d.block{i}.down"), 4, ch, ch, 2, Padding::Same, &mut rng));
                convs.push(Conv::new(&mut params, &format!("d.block{i}.conv"), 3, ch, 2 * ch, 1, Padding::Same, &mut rng));
                ch *= 2;
            }
            weights.extend(convs.iter().map(|c| c.k));
            let side = spec.output_shape[0] >> spec.num_blocks;
            (DiscBody::Dcgan { convs }, side * side * ch)
        }
        Family::ResnetLike => {
            let c = spec.output_shape[2];
            let mut blocks = Vec::new();
            let mut cin = c;
            for i in 0..=spec.num_blocks {
                let down = i < spec.num_blocks;
                let cout = base << i.min(spec.num_blocks - 1);
                let name = format!("d.block{i}");
                let conv1 = Conv::new(&mut params, &format!("{name}.conv1"), 3, cin, cout, 1, Padding::Same, &mut rng);
                let conv2 = Conv::new(&mut params, &format!("{name}.conv2"), 3, cout, cout, 1, Padding::Same, &mut rng);
                let skip = (down || cin != cout)
                    .then(|| Conv::new(&mut params, &format!("{name}.skip"), 1, cin, cout, 1, Padding::Same, &mut rng));
                weights.extend([conv1.k, conv2.k]);
                weights.extend(skip.map(|s| s.k));
                blocks.push(ResDownBlock {
                    conv1,
                    conv2,
                    skip,
                    downsample: down,
                    preactivate: i > 0,
                });
                cin = cout;
            }
            (DiscBody::Resnet { blocks }, cin)
        }
    };
    let psi = params.add("d.psi.w", glorot(vec![feature_dim, 1], feature_dim, 1, &mut rng));
    let psi_bias = Some(params.add("d.psi.b", Tensor::zeros(vec![1])));
    weights.push(psi);
    let k = spec.modulation.num_classes;
    let embedding = projection.then(|| {
        let mut emb_rng = stream(seed ^ 0x5eed_d15c, STREAM_MODULATORS);
        params.add("d.embedding", glorot(vec![k, feature_dim], k, feature_dim, &mut emb_rng))
    });
    weights.extend(embedding);
    let spectral = spectral_norm.then(|| {
        let mut sn_rng = stream(seed ^ 0x5eed_d15c, STREAM_SPECTRAL);
        weights
            .iter()
            .map(|&w| {
                let out = *params.get(w).shape().last().unwrap_or(&1);
                (w, SpectralNormState::new(out, 1, &mut sn_rng))
            })
            .collect()
    });
    Ok(Discriminator {
        spec: spec.clone(),
        params,
        head: ProjectionHead {
            psi,
            psi_bias,
            embedding,
        },
        spectral,
        feature_dim,
        body,
    })
}

impl Discriminator {
    /// Bound variables with spectrally normalized weights substituted.
    /// `update` runs the power iteration (discriminator steps); otherwise
    /// the stored estimate is reused as a constant.
    pub fn prepare(&mut self, g: &mut Graph, vars: &[Var], update: bool) -> Result<Vec<Var>> {
        let mut out = vars.to_vec();
        if let Some(states) = &mut self.spectral {
            for (w, st) in states.iter_mut() {
                out[*w] = spectral_normalize_var(g, vars[*w], st, update)?;
            }
        }
        Ok(out)
    }

    pub fn is_conditional(&self) -> bool {
        self.head.embedding.is_some()
    }

    /// Penultimate features `φ(x)`: `N×feature_dim`.
    pub fn features(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() < 2 || xs[1..] != self.spec.output_shape[..] {
            return Err(Error::Configuration(format!(
                "discriminator expects inputs of shape {:?}, got {:?}",
                self.spec.output_shape,
                &xs[1.min(xs.len())..]
            )));
        }
        match &self.body {
            DiscBody::Mlp { layers } => {
                let mut h = x;
                for l in layers {
                    h = l.forward(g, vars, h)?;
                    h = g.leaky_relu(h, LEAKY_SLOPE);
                }
                Ok(h)
            }
            DiscBody::Dcgan { convs } => {
                let mut h = x;
                for c in convs {
                    h = c.forward(g, vars, h)?;
                    h = g.leaky_relu(h, LEAKY_SLOPE);
                }
                g.flatten(h)
            }
            DiscBody::Resnet { blocks } => {
                let mut h = x;
                for b in blocks {
                    let mut r = if b.preactivate { g.relu(h) } else { h };
                    r = b.conv1.forward(g, vars, r)?;
                    r = g.relu(r);
                    r = b.conv2.forward(g, vars, r)?;
                    let mut skip = h;
                    if let Some(s) = &b.skip {
                        skip = s.forward(g, vars, skip)?;
                    }
                    if b.downsample {
                        r = g.avg_pool(r, 2)?;
                        skip = g.avg_pool(skip, 2)?;
                    }
                    h = g.add(r, skip)?;
                }
                let h = g.relu(h);
                g.global_sum_pool(h)
            }
        }
    }

    /// Logits of shape `N`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, labels: Option<&[usize]>) -> Result<Var> {
        let phi = self.features(g, vars, x)?;
        self.head.forward(g, vars, phi, labels)
    }

    /// Logits on plain tensors, without advancing the power iteration.
    pub fn score(&mut self, x: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let raw = self.params.bind(&mut g, false);
        let vars = self.prepare(&mut g, &raw, false)?;
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xv, labels)?;
        Ok(g.value(out).clone())
    }
}
