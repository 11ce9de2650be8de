//! Encoder–decoder segmentation network built from VSS blocks, with
//! ConvSSM refinement in the high-resolution decoder stages and optional
//! auxiliary heads.

mod blocks;
mod complexity;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{
    depth_to_space, space_to_depth, to_hwc, to_nchw, ConvSsmBlock, Init, LayerNorm, Linear,
    PatchEmbed, PatchExpand, PatchMerge, S6Ids, VssBlock, LN_EPS,
};
pub use complexity::{count_flops, count_params};
pub use params::{Bound, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Input extents must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Width `C` of the first stage; stages use `C, 2C, 4C, 8C`.
    pub width: usize,
    pub depths: [usize; 4],
    pub classes: usize,
    /// S6 state size `N`.
    pub state_dim: usize,
    /// ConvSSM state channels `P`.
    pub convssm_state: usize,
    pub convssm_kernel: usize,
    /// ConvSSM steps in each decoder wrapper.
    pub convssm_steps: usize,
    pub deep_supervision: bool,
    /// ConvSSM wrapper in the two high-resolution decoder stages.
    pub decoder_convssm: bool,
    /// `false` turns the high-resolution decoder stages into light ones.
    pub heavy_decoder: bool,
    /// One S6 parameter set shared by the four scan directions.
    pub share_scan_params: bool,
    /// Zero the output projection of every VSS block.
    pub zero_init_residual: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        NetworkConfig {
            in_channels: 1,
            width: 32,
            depths: [2, 2, 9, 2],
            classes: 5,
            state_dim: 8,
            convssm_state: 8,
            convssm_kernel: 3,
            convssm_steps: 1,
            deep_supervision: true,
            decoder_convssm: true,
            heavy_decoder: true,
            share_scan_params: false,
            zero_init_residual: false,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        NetworkConfig {
            width: 96,
            state_dim: 16,
            convssm_state: 16,
            ..Self::desk()
        }
    }

    /// Smallest configuration: `C=4`, one block per stage, `N=2`, `P=2`.
    pub fn tiny() -> Self {
        NetworkConfig {
            width: 4,
            depths: [1, 1, 1, 1],
            state_dim: 2,
            convssm_state: 2,
            ..Self::desk()
        }
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        let c = self.width;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Whether decoder stage `i` (0 = coarsest) carries a ConvSSM wrapper.
    pub fn stage_has_convssm(&self, i: usize) -> bool {
        i >= 2 && self.heavy_decoder && self.decoder_convssm
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.in_channels == 0 || self.classes < 2 || self.state_dim == 0 {
            return bad(format!(
                "in_channels, classes >= 2 and state_dim must be positive, got {}, {}, {}",
                self.in_channels, self.classes, self.state_dim
            ));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return bad(format!(
                "width must be a positive multiple of 4, got {}",
                self.width
            ));
        }
        if self.classes > 256 {
            return bad(format!("at most 256 classes, got {}", self.classes));
        }
        if self.convssm_state == 0 || self.convssm_steps == 0 || self.convssm_kernel % 2 == 0 {
            return bad(format!(
                "ConvSSM needs P >= 1, L >= 1 and an odd kernel, got P={} L={} k={}",
                self.convssm_state, self.convssm_steps, self.convssm_kernel
            ));
        }
        Ok(())
    }

    /// Flat `key=value` view, in a fixed key order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let d = self.depths;
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("width", self.width.to_string()),
            ("depths", format!("{},{},{},{}", d[0], d[1], d[2], d[3])),
            ("classes", self.classes.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("convssm_state", self.convssm_state.to_string()),
            ("convssm_kernel", self.convssm_kernel.to_string()),
            ("convssm_steps", self.convssm_steps.to_string()),
            ("deep_supervision", self.deep_supervision.to_string()),
            ("decoder_convssm", self.decoder_convssm.to_string()),
            ("heavy_decoder", self.heavy_decoder.to_string()),
            ("share_scan_params", self.share_scan_params.to_string()),
            ("zero_init_residual", self.zero_init_residual.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::kv::{parse, parse_bool};
        match key {
            "in_channels" => self.in_channels = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "depths" => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<_>>()?;
                self.depths = v.try_into().map_err(|_| {
                    Error::Format(format!("depths needs four entries, got `{value}`"))
                })?;
            }
            "classes" => self.classes = parse(key, value)?,
            "state_dim" => self.state_dim = parse(key, value)?,
            "convssm_state" => self.convssm_state = parse(key, value)?,
            "convssm_kernel" => self.convssm_kernel = parse(key, value)?,
            "convssm_steps" => self.convssm_steps = parse(key, value)?,
            "deep_supervision" => self.deep_supervision = parse_bool(key, value)?,
            "decoder_convssm" => self.decoder_convssm = parse_bool(key, value)?,
            "heavy_decoder" => self.heavy_decoder = parse_bool(key, value)?,
            "share_scan_params" => self.share_scan_params = parse_bool(key, value)?,
            "zero_init_residual" => self.zero_init_residual = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [c, h, w] => {
                if c != self.in_channels {
                    return Err(Error::dim("network", "Cin", self.in_channels, c));
                }
                if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
                    return Err(Error::contract(format!(
                        "H and W must be multiples of {INPUT_MULTIPLE}, got {h}x{w}"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::dim("network", "rank", 3, shape.len())),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    blocks: Vec<VssBlock>,
    merge: Option<PatchMerge>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    expand: Vec<PatchExpand>,
    skip: Option<Linear>,
    convssm: Option<ConvSsmBlock>,
    blocks: Vec<VssBlock>,
    head: Option<(LayerNorm, Linear)>,
}

/// Encoder outputs at 1/4, 1/8, 1/16 and 1/32 resolution.
pub struct Features<'t> {
    pub f4: Var<'t>,
    pub f8: Var<'t>,
    pub f16: Var<'t>,
    pub f32: Var<'t>,
}

/// Logits `[K, H, W]`, plus auxiliary logits at 1/4, 1/8, 1/16 when deep
/// supervision is on.
pub struct SegVars<'t> {
    pub logits: Var<'t>,
    pub aux: Vec<Var<'t>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    pub logits: Tensor,
    pub aux: Vec<Tensor>,
}

impl SegOutput {
    /// Per-pixel argmax of the main logits (first maximum wins).
    pub fn argmax(&self) -> crate::mask::Mask {
        argmax_mask(&self.logits)
    }
}

/// Per-pixel argmax over the class axis of `[K, H, W]` scores.
pub fn argmax_mask(scores: &Tensor) -> crate::mask::Mask {
    let (k, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let hw = h * w;
    let d = scores.data();
    let labels = (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + i] > d[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    crate::mask::Mask::new(h, w, labels).expect("extents match")
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: ParamStore,
    embed: PatchEmbed,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: (LayerNorm, Linear),
}

impl Network {
    /// Builds the network with seeded initial parameters.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let widths = config.stage_widths();
        let (n, share, zero) = (
            config.state_dim,
            config.share_scan_params,
            config.zero_init_residual,
        );

        let embed = PatchEmbed::new(&mut init, config.in_channels, widths[0]);
        let encoder = (0..4)
            .map(|s| EncoderStage {
                blocks: (0..config.depths[s])
                    .map(|b| {
                        VssBlock::new(
                            &mut init,
                            &format!("enc.s{s}.b{b}"),
                            widths[s],
                            n,
                            share,
                            zero,
                        )
                    })
                    .collect(),
                merge: (s < 3)
                    .then(|| PatchMerge::new(&mut init, &format!("enc.s{s}.merge"), widths[s])),
            })
            .collect();

        let mut decoder = Vec::with_capacity(4);
        for i in 0..4 {
            let name = format!("dec.d{}", i + 1);
            let cin = widths[3 - i];
            let mut expand = vec![PatchExpand::new(&mut init, &format!("{name}.expand"), cin)];
            let mut c = cin / 2;
            if i == 3 {
                expand.push(PatchExpand::new(&mut init, &format!("{name}.expand2"), c));
                c /= 2;
            }
            let skip = (i < 3).then(|| Linear::new(&mut init, &format!("{name}.skip"), c, c, true));
            let convssm = config.stage_has_convssm(i).then(|| {
                ConvSsmBlock::new(
                    &mut init,
                    &format!("{name}.convssm"),
                    c,
                    config.convssm_state,
                    config.convssm_kernel,
                    config.convssm_steps,
                )
            });
            let blocks = (0..2)
                .map(|b| VssBlock::new(&mut init, &format!("{name}.b{b}"), c, n, share, zero))
                .collect();
            let head = (i < 3 && config.deep_supervision).then(|| {
                let scale = [16, 8, 4][i];
                (
                    LayerNorm::new(&mut init, &format!("head.aux{scale}.norm"), c),
                    Linear::new(
                        &mut init,
                        &format!("head.aux{scale}"),
                        c,
                        config.classes,
                        true,
                    ),
                )
            });
            decoder.push(DecoderStage {
                expand,
                skip,
                convssm,
                blocks,
                head,
            });
        }
        let head = (
            LayerNorm::new(&mut init, "head.main.norm", widths[0] / 4),
            Linear::new(&mut init, "head.main", widths[0] / 4, config.classes, true),
        );

        Ok(Network {
            config,
            params: store,
            embed,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of VSS blocks in the encoder.
    pub fn encoder_blocks(&self) -> usize {
        self.encoder.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn encoder_forward<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Features<'t>> {
        self.config.check_input(&image.shape())?;
        let mut x = self.embed.forward(p, standardize(image))?;
        let mut skips = Vec::with_capacity(3);
        for stage in &self.encoder {
            for block in &stage.blocks {
                x = block.forward(p, x)?;
            }
            if let Some(merge) = &stage.merge {
                skips.push(x);
                x = merge.forward(p, x)?;
            }
        }
        Ok(Features {
            f4: skips[0],
            f8: skips[1],
            f16: skips[2],
            f32: x,
        })
    }

    pub fn decoder_forward<'t>(&self, p: &Bound<'t>, f: &Features<'t>) -> Result<SegVars<'t>> {
        let skips = [Some(f.f16), Some(f.f8), Some(f.f4), None];
        let mut x = f.f32;
        let mut aux = Vec::new();
        for (stage, skip) in self.decoder.iter().zip(skips) {
            for e in &stage.expand {
                x = e.forward(p, x)?;
            }
            if let (Some(proj), Some(s)) = (&stage.skip, skip) {
                x = x.add(proj.forward(p, s)?)?;
            }
            if let Some(c) = &stage.convssm {
                x = c.forward(p, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(p, x)?;
            }
            if let Some((norm, h)) = &stage.head {
                aux.push(logits_chw(h.forward(p, norm.forward(p, x)?)?)?);
            }
        }
        aux.reverse();
        Ok(SegVars {
            logits: logits_chw(self.head.1.forward(p, self.head.0.forward(p, x)?)?)?,
            aux,
        })
    }

    /// Full forward on a bound parameter set; `image` is `[Cin, H, W]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<SegVars<'t>> {
        let f = self.encoder_forward(p, image)?;
        self.decoder_forward(p, &f)
    }

    /// Tape-free inference.
    pub fn predict(&self, image: &Tensor) -> Result<SegOutput> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(image.clone()))?;
        Ok(SegOutput {
            logits: (*out.logits.value()).clone(),
            aux: out.aux.iter().map(|a| (*a.value()).clone()).collect(),
        })
    }
}

/// Per-image zero mean and unit variance; the statistics are treated as
/// constants.
fn standardize<'t>(image: Var<'t>) -> Var<'t> {
    let v = image.value();
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v
        .data()
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / n;
    image
        .add_scalar(-mean)
        .scale(1.0 / (var + 1e-12).sqrt().max(1e-6))
}

fn logits_chw<'t>(x: Var<'t>) -> Result<Var<'t>> {
    x.permute(&[2, 0, 1])
}
