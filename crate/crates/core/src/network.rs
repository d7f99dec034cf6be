//! Three-stage encoder / decoder with the attention blocks at the quarter
//! resolution bottleneck.
//!
//! Stage layout (sides for an `H × H` input):
//!
//! ```text
//! enc1  H    [conv3 -> gelu] x2          C0     (+ freq layer)
//! enc2  H/2  conv3/2 -> gelu -> conv3    2C0    (+ freq layer)
//! enc3  H/4  conv3/2 -> gelu -> conv3    4C0    (+ freq layer)
//! bottleneck H/4: attention blocks
//! dec3  H/4        conv3 -> +skip(enc3) -> conv3   4C0
//! dec2  H/2  up -> conv3 -> +skip(enc2) -> conv3   2C0
//! dec1  H    up -> conv3 -> +skip(enc1) -> conv3   C0
//! head  conv3 -> 3, added to the input and clamped to [0, 1]
//! ```
//!
//! Skips are 1×1 convolutions followed by addition. There is no
//! normalization. The head starts at zero, so a fresh model is the identity.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::lfpm::{check_cutoff, lfpm_forward, LfpmWeights, DEFAULT_CUTOFF};
use crate::mkra::{mkra_forward_routed, MkraConfig, MkraWeights, Routing, BRANCHES, DEFAULT_WINDOW_SIDES};
use crate::mkram::{mkram_forward_routed, MkramWeights};
use crate::ops::Padding;
use crate::tensor::Tensor;

/// Which blocks the network carries; the four ablation arms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain encoder / decoder.
    Base,
    /// Routing attention blocks at the bottleneck, no frequency layers.
    Mkra,
    /// Frequency layers after every encoder stage, no attention.
    Lfpm,
    /// Fused spatial / frequency attention blocks plus frequency layers.
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Mkra, Variant::Lfpm, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::Mkra => "Base+MKRA",
            Variant::Lfpm => "Base+LFPM",
            Variant::Full => "Full (MKRAM+LFPM)",
        }
    }

    fn code(self) -> f32 {
        match self {
            Variant::Base => 0.0,
            Variant::Mkra => 1.0,
            Variant::Lfpm => 2.0,
            Variant::Full => 3.0,
        }
    }

    fn from_code(c: f32) -> Result<Self> {
        Ok(match c as i32 {
            0 => Variant::Base,
            1 => Variant::Mkra,
            2 => Variant::Lfpm,
            3 => Variant::Full,
            _ => return Err(Error::Format(format!("unknown variant code {c}"))),
        })
    }

    fn has_lfpm(self) -> bool {
        matches!(self, Variant::Lfpm | Variant::Full)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Input side; a power of two, at least 32.
    pub side: usize,
    /// `C0`; stages use `[C0, 2C0, 4C0]`.
    pub base_channels: usize,
    pub mkram_blocks: usize,
    /// Routed regions per branch; unset means a quarter of the regions.
    pub k: Option<usize>,
    pub window_sides: [usize; BRANCHES],
    pub cutoff_ratio: f32,
    pub variant: Variant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            side: 64,
            base_channels: 8,
            mkram_blocks: 2,
            k: None,
            window_sides: DEFAULT_WINDOW_SIDES,
            cutoff_ratio: DEFAULT_CUTOFF,
            variant: Variant::Full,
        }
    }
}

impl NetworkConfig {
    pub fn channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn validate(&self) -> Result<()> {
        validate_side(self.side)?;
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        check_cutoff(self.cutoff_ratio).map_err(|e| Error::Config(e.to_string()))?;
        self.mkra_config_at(self.side)?;
        Ok(())
    }

    /// Bottleneck attention config for an input of side `side`.
    pub fn mkra_config_at(&self, side: usize) -> Result<MkraConfig> {
        MkraConfig::new(self.channels()[2], side / 4, self.window_sides, self.k)
    }

    pub fn mkra_config(&self) -> Result<MkraConfig> {
        self.mkra_config_at(self.side)
    }

    fn uses_attention(&self) -> bool {
        self.mkram_blocks > 0 && matches!(self.variant, Variant::Mkra | Variant::Full)
    }
}

fn validate_side(side: usize) -> Result<()> {
    if side < 32 || !side.is_power_of_two() {
        return Err(Error::Config(format!(
            "input side must be a power of two of at least 32, got {side}"
        )));
    }
    Ok(())
}

/// Convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T = Tensor> {
    pub w: T,
    pub b: T,
}

impl Conv<Tensor> {
    fn he(k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (k * k * cin) as f32).sqrt();
        Conv {
            w: Tensor::randn([k, k, cin, cout], std, rng),
            b: Tensor::zeros([cout]),
        }
    }

    fn zeros(k: usize, cin: usize, cout: usize) -> Self {
        Conv {
            w: Tensor::zeros([k, k, cin, cout]),
            b: Tensor::zeros([cout]),
        }
    }
}

impl<T> Conv<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Conv<U> {
        Conv {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        f(format!("{prefix}w"), &self.w);
        f(format!("{prefix}b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}w"), &mut self.w);
        f(format!("{prefix}b"), &mut self.b);
    }
}

fn conv_forward(tape: &mut Tape, x: Var, c: &Conv<Var>, stride: usize) -> Result<Var> {
    let y = tape.conv2d(x, c.w, stride, Padding::Same)?;
    tape.add_channels(y, c.b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage<T = Tensor> {
    pub conv_a: Conv<T>,
    pub conv_b: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage<T = Tensor> {
    pub conv_a: Conv<T>,
    pub skip: Conv<T>,
    pub conv_b: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Bottleneck<T = Tensor> {
    Mkra(MkraWeights<T>),
    Mkram(MkramWeights<T>),
}

/// Full parameter set plus the config it was built from. `T = Var` is the
/// same model bound onto a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct KsformerModel<T = Tensor> {
    pub config: NetworkConfig,
    pub encoders: [EncoderStage<T>; 3],
    /// One frequency layer per encoder stage, when the variant has them.
    pub lfpm: Vec<LfpmWeights<T>>,
    pub bottleneck: Vec<Bottleneck<T>>,
    /// Ordered from the bottleneck outwards: dec3, dec2, dec1.
    pub decoders: [DecoderStage<T>; 3],
    pub head: Conv<T>,
}

impl KsformerModel<Tensor> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.channels();
        let ins = [3, ch[0], ch[1]];
        let encoders = std::array::from_fn(|i| EncoderStage {
            conv_a: Conv::he(3, ins[i], ch[i], &mut rng),
            conv_b: Conv::he(3, ch[i], ch[i], &mut rng),
        });
        let lfpm = if config.variant.has_lfpm() {
            ch.iter()
                .map(|&c| LfpmWeights::new(c, config.cutoff_ratio))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mcfg = config.mkra_config()?;
        let bottleneck = if config.uses_attention() {
            (0..config.mkram_blocks)
                .map(|_| -> Result<Bottleneck> {
                    Ok(match config.variant {
                        Variant::Mkra => Bottleneck::Mkra(MkraWeights::init(&mcfg, &mut rng)),
                        _ => Bottleneck::Mkram(MkramWeights::init(&mcfg, config.cutoff_ratio, &mut rng)?),
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        // dec3 keeps 4C0; dec2 and dec1 step the width down as they upsample
        let dec_in = [ch[2], ch[2], ch[1]];
        let dec_out = [ch[2], ch[1], ch[0]];
        let decoders = std::array::from_fn(|i| DecoderStage {
            conv_a: Conv::he(3, dec_in[i], dec_out[i], &mut rng),
            skip: Conv::he(1, dec_out[i], dec_out[i], &mut rng),
            conv_b: Conv::he(3, dec_out[i], dec_out[i], &mut rng),
        });
        Ok(KsformerModel {
            config,
            encoders,
            lfpm,
            bottleneck,
            decoders,
            head: Conv::zeros(3, ch[0], 3),
        })
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> KsformerModel<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> KsformerModel<Var> {
        self.map(&mut |t| tape.constant(t.clone()))
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Dehazes one `[H, W, 3]` image.
    pub fn infer(&self, hazy: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let x = tape.constant(hazy.clone());
        let y = forward(&mut tape, x, &m)?;
        Ok(tape.value(y).clone())
    }

    /// Parameters by checkpoint name, preceded by the config record.
    pub fn named_tensors(&self) -> NamedTensors {
        let mut out = vec![("config.network".to_string(), encode_config(&self.config))];
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn from_named_tensors(tensors: NamedTensors) -> Result<Self> {
        let mut by_name: HashMap<String, Tensor> = tensors.into_iter().collect();
        let cfg_t = by_name
            .remove("config.network")
            .ok_or_else(|| Error::Format("checkpoint has no config.network record".into()))?;
        let config = decode_config(&cfg_t)?;
        let mut model = KsformerModel::new(config, 0)?;
        let mut err = None;
        model.visit_mut(&mut |name, slot| {
            if err.is_some() {
                return;
            }
            match by_name.remove(&name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => {
                    err = Some(Error::Format(format!(
                        "{name}: shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("checkpoint is missing {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::checkpoint::save(path, &self.named_tensors())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_named_tensors(crate::checkpoint::load(path)?)
    }
}

fn encode_config(c: &NetworkConfig) -> Tensor {
    let mut v = vec![
        c.side as f32,
        c.base_channels as f32,
        c.mkram_blocks as f32,
        c.k.unwrap_or(0) as f32,
    ];
    v.extend(c.window_sides.iter().map(|&n| n as f32));
    v.push(c.cutoff_ratio);
    v.push(c.variant.code());
    Tensor::from_parts(vec![v.len()], v)
}

fn decode_config(t: &Tensor) -> Result<NetworkConfig> {
    let d = t.data();
    if d.len() != 10 {
        return Err(Error::Format(format!("config.network has {} fields, expected 10", d.len())));
    }
    let u = |x: f32| x as usize;
    Ok(NetworkConfig {
        side: u(d[0]),
        base_channels: u(d[1]),
        mkram_blocks: u(d[2]),
        k: (d[3] > 0.0).then(|| u(d[3])),
        window_sides: [u(d[4]), u(d[5]), u(d[6]), u(d[7])],
        cutoff_ratio: d[8],
        variant: Variant::from_code(d[9])?,
    })
}

impl<T> KsformerModel<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> KsformerModel<U> {
        KsformerModel {
            config: self.config.clone(),
            encoders: std::array::from_fn(|i| EncoderStage {
                conv_a: self.encoders[i].conv_a.map(f),
                conv_b: self.encoders[i].conv_b.map(f),
            }),
            lfpm: self.lfpm.iter().map(|l| l.map(f)).collect(),
            bottleneck: self
                .bottleneck
                .iter()
                .map(|b| match b {
                    Bottleneck::Mkra(w) => Bottleneck::Mkra(w.map(f)),
                    Bottleneck::Mkram(w) => Bottleneck::Mkram(w.map(f)),
                })
                .collect(),
            decoders: std::array::from_fn(|i| DecoderStage {
                conv_a: self.decoders[i].conv_a.map(f),
                skip: self.decoders[i].skip.map(f),
                conv_b: self.decoders[i].conv_b.map(f),
            }),
            head: self.head.map(f),
        }
    }

    /// Visits every parameter with its checkpoint name, in a fixed order.
    pub fn visit(&self, f: &mut impl FnMut(String, &T)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.conv_a.visit(&format!("enc{}.conv_a.", i + 1), f);
            e.conv_b.visit(&format!("enc{}.conv_b.", i + 1), f);
        }
        for (l, w) in self.lfpm.iter().enumerate() {
            w.visit(&format!("lfpm.{l}."), f);
        }
        for (l, b) in self.bottleneck.iter().enumerate() {
            match b {
                Bottleneck::Mkra(w) => w.visit(&format!("mkra.{l}."), f),
                Bottleneck::Mkram(w) => w.visit(&format!("mkram.{l}."), f),
            }
        }
        for (i, d) in self.decoders.iter().enumerate() {
            let p = format!("dec{}.", 3 - i);
            d.conv_a.visit(&format!("{p}conv_a."), f);
            d.skip.visit(&format!("{p}skip."), f);
            d.conv_b.visit(&format!("{p}conv_b."), f);
        }
        self.head.visit("head.", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.conv_a.visit_mut(&format!("enc{}.conv_a.", i + 1), f);
            e.conv_b.visit_mut(&format!("enc{}.conv_b.", i + 1), f);
        }
        for (l, w) in self.lfpm.iter_mut().enumerate() {
            w.visit_mut(&format!("lfpm.{l}."), f);
        }
        for (l, b) in self.bottleneck.iter_mut().enumerate() {
            match b {
                Bottleneck::Mkra(w) => w.visit_mut(&format!("mkra.{l}."), f),
                Bottleneck::Mkram(w) => w.visit_mut(&format!("mkram.{l}."), f),
            }
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            let p = format!("dec{}.", 3 - i);
            d.conv_a.visit_mut(&format!("{p}conv_a."), f);
            d.skip.visit_mut(&format!("{p}skip."), f);
            d.conv_b.visit_mut(&format!("{p}conv_b."), f);
        }
        self.head.visit_mut("head.", f);
    }
}

/// Dehazing forward pass on a bound model: `hazy: [H, W, 3] -> [H, W, 3]`.
pub fn forward(tape: &mut Tape, hazy: Var, m: &KsformerModel<Var>) -> Result<Var> {
    forward_routed(tape, hazy, m, None).map(|(y, _)| y)
}

/// [`forward`] with optional frozen routing tables, one per attention
/// module in execution order, returning the tables that were used.
pub fn forward_routed(
    tape: &mut Tape,
    hazy: Var,
    m: &KsformerModel<Var>,
    frozen: Option<&[Routing]>,
) -> Result<(Var, Vec<Routing>)> {
    let cfg = &m.config;
    let (h, w, c) = tape.value(hazy).hwc()?;
    if h != cfg.side || w != cfg.side || c != 3 {
        return Err(Error::Config(format!(
            "model expects [{0}, {0}, 3] input, got [{h}, {w}, {c}]",
            cfg.side
        )));
    }
    let mut skips = Vec::with_capacity(3);
    let mut x = hazy;
    for (i, e) in m.encoders.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let a = conv_forward(tape, x, &e.conv_a, stride)?;
        let a = tape.gelu(a);
        let b = conv_forward(tape, a, &e.conv_b, 1)?;
        x = tape.gelu(b);
        if let Some(l) = m.lfpm.get(i) {
            x = lfpm_forward(tape, x, l)?;
        }
        skips.push(x);
    }
    let mut routing = Vec::new();
    if !m.bottleneck.is_empty() {
        let mcfg = cfg.mkra_config()?;
        for block in &m.bottleneck {
            let at = routing.len();
            let span = match block {
                Bottleneck::Mkra(_) => 1,
                Bottleneck::Mkram(_) => 3,
            };
            let fixed = match frozen {
                Some(f) => Some(f.get(at..at + span).ok_or_else(|| {
                    Error::Param(format!("frozen routing has {} tables, model needs more", f.len()))
                })?),
                None => None,
            };
            x = match block {
                Bottleneck::Mkra(w) => {
                    let (y, r) = mkra_forward_routed(tape, x, &mcfg, w, fixed.map(|f| &f[0]))?;
                    routing.push(r);
                    y
                }
                Bottleneck::Mkram(w) => {
                    let (y, r) = mkram_forward_routed(tape, x, w, &mcfg, fixed)?;
                    routing.extend(r);
                    y
                }
            };
        }
    }
    for (i, d) in m.decoders.iter().enumerate() {
        if i > 0 {
            x = tape.upsample2x(x)?;
        }
        let a = conv_forward(tape, x, &d.conv_a, 1)?;
        let a = tape.gelu(a);
        let s = tape.conv2d(skips[2 - i], d.skip.w, 1, Padding::Same)?;
        let s = tape.add_channels(s, d.skip.b)?;
        let merged = tape.add(a, s)?;
        let b = conv_forward(tape, merged, &d.conv_b, 1)?;
        x = tape.gelu(b);
    }
    let residual = conv_forward(tape, x, &m.head, 1)?;
    let out = tape.add(hazy, residual)?;
    Ok((tape.clamp(out, 0.0, 1.0), routing))
}

/// One convolution of the architecture, for counting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    /// Output side.
    pub side: usize,
}

impl ConvSpec {
    pub fn macs(&self) -> u64 {
        (self.side * self.side * self.kernel * self.kernel * self.cin * self.cout) as u64
    }

    pub fn params(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout + self.cout
    }
}

/// Every biased convolution of the encoder, decoder and head for input side `side`.
pub fn conv_layout(cfg: &NetworkConfig, side: usize) -> Vec<ConvSpec> {
    let ch = cfg.channels();
    let sides = [side, side / 2, side / 4];
    let ins = [3, ch[0], ch[1]];
    let spec = |name: String, kernel, cin, cout, side| ConvSpec {
        name,
        kernel,
        cin,
        cout,
        side,
    };
    let mut v = Vec::new();
    for i in 0..3 {
        v.push(spec(format!("enc{}.conv_a", i + 1), 3, ins[i], ch[i], sides[i]));
        v.push(spec(format!("enc{}.conv_b", i + 1), 3, ch[i], ch[i], sides[i]));
    }
    let dec_in = [ch[2], ch[2], ch[1]];
    let dec_out = [ch[2], ch[1], ch[0]];
    let dec_side = [sides[2], sides[1], sides[0]];
    for i in 0..3 {
        let p = format!("dec{}", 3 - i);
        v.push(spec(format!("{p}.conv_a"), 3, dec_in[i], dec_out[i], dec_side[i]));
        v.push(spec(format!("{p}.skip"), 1, dec_out[i], dec_out[i], dec_side[i]));
        v.push(spec(format!("{p}.conv_b"), 3, dec_out[i], dec_out[i], dec_side[i]));
    }
    v.push(spec("head".into(), 3, ch[0], 3, side));
    v
}

/// Analytic multiply-accumulate counts for one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub side: usize,
    pub conv_macs: u64,
    /// 1×1 fusion convolutions inside the fused attention blocks.
    pub fusion_macs: u64,
    /// Q/K/V and output projections plus region affinities.
    pub routing_macs: u64,
    /// Score and value-apply stages with the configured `k`.
    pub attention_macs: u64,
    /// The same stages with every branch attending to all regions.
    pub attention_dense_macs: u64,
    /// Per-branch routed attention MACs of one attention module.
    pub branch_attention_macs: [u64; BRANCHES],
    pub branch_attention_dense_macs: [u64; BRANCHES],
    pub attention_modules: usize,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.conv_macs + self.fusion_macs + self.routing_macs + self.attention_macs
    }

    pub fn total_dense_macs(&self) -> u64 {
        self.conv_macs + self.fusion_macs + self.routing_macs + self.attention_dense_macs
    }
}

pub fn flop_count(cfg: &NetworkConfig, side: usize) -> Result<FlopReport> {
    validate_side(side)?;
    let conv_macs = conv_layout(cfg, side).iter().map(ConvSpec::macs).sum();
    let mcfg = cfg.mkra_config_at(side)?;
    let dense = mcfg.dense();
    let modules = if cfg.uses_attention() {
        match cfg.variant {
            Variant::Full => 3 * cfg.mkram_blocks,
            _ => cfg.mkram_blocks,
        }
    } else {
        0
    };
    let fusion_macs = if cfg.uses_attention() && cfg.variant == Variant::Full {
        let b = side / 4;
        let c = mcfg.channels;
        (b * b * 3 * c * c * cfg.mkram_blocks) as u64
    } else {
        0
    };
    let branch_attention_macs = std::array::from_fn(|b| mcfg.attention_macs(b));
    let branch_attention_dense_macs = std::array::from_fn(|b| dense.attention_macs(b));
    let per_module: u64 = branch_attention_macs.iter().sum();
    let per_module_dense: u64 = branch_attention_dense_macs.iter().sum();
    Ok(FlopReport {
        side,
        conv_macs,
        fusion_macs,
        routing_macs: modules as u64 * mcfg.routing_macs(),
        attention_macs: modules as u64 * per_module,
        attention_dense_macs: modules as u64 * per_module_dense,
        branch_attention_macs,
        branch_attention_dense_macs,
        attention_modules: modules,
    })
}
