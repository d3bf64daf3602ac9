//! Noise-conditioned U-Net score network over two-channel range images.
//!
//! Layout: a 3x3 input convolution, six residual down blocks, six residual
//! up blocks fed with the matching skip activations, and an
//! IN++ -> ELU -> 3x3 output head. Between down blocks the feature map is
//! average-pooled by 2 on both axes while its height is above 4, and on the
//! width only after that; up blocks mirror the plan with nearest-neighbor
//! upsampling. All convolutions use circular horizontal padding unless the
//! ablation switch turns it off.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ProjectionConfig;
use crate::model::{NoiseLevel, ScoreModel, TrainableScore};
use crate::nn::{
    avg_pool, avg_pool_backward, coord_channels, elu, elu_backward, upsample_nearest,
    upsample_nearest_backward, Conv2d, InstanceNormPP, NormTape, Padding, ParamVisitor, Params,
    ResBlock, ResBlockTape,
};
use crate::tensor::Tensor;
use crate::training::NoiseSchedule;

pub const BLOCKS_PER_SIDE: usize = 6;
pub const DATA_CHANNELS: usize = 2;
pub const COORD_CHANNELS: usize = 3;

/// How the noise level enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConditioning {
    /// Shared backbone, output divided by `sigma_i`.
    OutputScale,
    /// Per-level normalization parameters selected by the level index.
    LevelEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub height: usize,
    pub width: usize,
    /// Twelve entries: six down blocks then six up blocks.
    pub channels: Vec<usize>,
    pub circular_conv: bool,
    pub coord_channels: bool,
    pub conditioning: NoiseConditioning,
    /// Number of noise levels (used by the level-embedding variant).
    pub levels: usize,
}

impl ScoreNetConfig {
    /// Full-width channel plan 32-64-64-64-128-128-128-128-64-64-64-32.
    pub const FULL_CHANNELS: [usize; 12] = [32, 64, 64, 64, 128, 128, 128, 128, 64, 64, 64, 32];

    pub fn new(height: usize, width: usize, levels: usize) -> Self {
        ScoreNetConfig {
            height,
            width,
            channels: Self::FULL_CHANNELS.to_vec(),
            circular_conv: true,
            coord_channels: true,
            conditioning: NoiseConditioning::OutputScale,
            levels,
        }
    }

    /// Same plan divided by `divisor` (at least one channel per block).
    pub fn with_channel_divisor(mut self, divisor: usize) -> Self {
        self.channels = Self::FULL_CHANNELS
            .iter()
            .map(|c| (c / divisor.max(1)).max(1))
            .collect();
        self
    }

    pub fn input_channels(&self) -> usize {
        DATA_CHANNELS
            + if self.coord_channels {
                COORD_CHANNELS
            } else {
                0
            }
    }

    pub fn padding(&self) -> Padding {
        if self.circular_conv {
            Padding::Circular
        } else {
            Padding::Zero
        }
    }

    /// Pooling factor applied after each of the first five down blocks.
    pub fn pool_factors(&self) -> Vec<(usize, usize)> {
        let mut h = self.height;
        (0..BLOCKS_PER_SIDE - 1)
            .map(|_| {
                if h > 4 {
                    h /= 2;
                    (2, 2)
                } else {
                    (1, 2)
                }
            })
            .collect()
    }

    /// Spatial size at each of the six resolution levels.
    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        let mut res = vec![(self.height, self.width)];
        for (fy, fx) in self.pool_factors() {
            let (h, w) = *res.last().unwrap();
            res.push((h / fy, w / fx));
        }
        res
    }

    /// Total column stride at the bottleneck; the network commutes with
    /// circular column shifts that are multiples of this.
    pub fn width_stride(&self) -> usize {
        self.pool_factors().iter().map(|f| f.1).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels.len() != 2 * BLOCKS_PER_SIDE {
            return bad(format!(
                "channel plan needs {} entries, got {}",
                2 * BLOCKS_PER_SIDE,
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be >= 1".into());
        }
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        let mut h = self.height;
        let mut w = self.width;
        for (fy, fx) in self.pool_factors() {
            if !h.is_multiple_of(fy) || !w.is_multiple_of(fx) {
                return bad(format!(
                    "{}x{} is not divisible by the pooling plan {:?}",
                    self.height,
                    self.width,
                    self.pool_factors()
                ));
            }
            h /= fy;
            w /= fx;
        }
        if h == 0 || w == 0 {
            return bad("image too small for six resolution levels".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    config: ScoreNetConfig,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    up: Vec<ResBlock>,
    norm_out: InstanceNormPP,
    conv_out: Conv2d,
}

pub struct ScoreNetTape {
    input: Tensor,
    down: Vec<ResBlockTape>,
    up: Vec<ResBlockTape>,
    /// Channel count of the running activation entering each up block.
    up_split: Vec<usize>,
    norm_out: NormTape,
    act_out: Tensor,
    inv_sigma: Option<Vec<f64>>,
}

impl ScoreNet {
    pub fn new(config: ScoreNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = config.padding();
        let norm_levels = match config.conditioning {
            NoiseConditioning::OutputScale => 1,
            NoiseConditioning::LevelEmbedding => config.levels,
        };
        let ch = &config.channels;
        let conv_in = Conv2d::new(config.input_channels(), ch[0], (3, 3), pad, &mut rng);
        let mut down = Vec::with_capacity(BLOCKS_PER_SIDE);
        let mut prev = ch[0];
        for &c in &ch[..BLOCKS_PER_SIDE] {
            down.push(ResBlock::new(prev, c, norm_levels, pad, &mut rng));
            prev = c;
        }
        let mut up = Vec::with_capacity(BLOCKS_PER_SIDE);
        for (j, &c) in ch[BLOCKS_PER_SIDE..].iter().enumerate() {
            let skip = ch[BLOCKS_PER_SIDE - 1 - j];
            up.push(ResBlock::new(prev + skip, c, norm_levels, pad, &mut rng));
            prev = c;
        }
        let norm_out = InstanceNormPP::new(prev, norm_levels);
        let mut conv_out = Conv2d::new(prev, DATA_CHANNELS, (3, 3), pad, &mut rng);
        conv_out.weight.iter_mut().for_each(|w| *w *= 0.1);
        Ok(ScoreNet {
            config,
            conv_in,
            down,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<()> {
        let [n, c, h, w] = x.shape();
        if c != DATA_CHANNELS || h != self.config.height || w != self.config.width {
            return Err(Error::ShapeMismatch {
                expected: format!("[_, 2, {}, {}]", self.config.height, self.config.width),
                got: format!("{:?}", x.shape()),
            });
        }
        if levels.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} noise levels"),
                got: format!("{}", levels.len()),
            });
        }
        if self.config.conditioning == NoiseConditioning::LevelEmbedding {
            if let Some(l) = levels.iter().find(|l| l.index >= self.config.levels) {
                return Err(Error::OutOfRange(format!(
                    "level index {} >= {}",
                    l.index, self.config.levels
                )));
            }
        }
        if let Some(l) = levels.iter().find(|l| !(l.sigma > 0.0)) {
            return Err(Error::OutOfRange(format!("sigma {} must be > 0", l.sigma)));
        }
        Ok(())
    }

    fn network_input(&self, x: &Tensor) -> Tensor {
        if self.config.coord_channels {
            let coords = coord_channels(x.batch(), x.height(), x.width());
            Tensor::concat_channels(x, &coords).expect("coord shapes match")
        } else {
            x.clone()
        }
    }

    fn run(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<(Tensor, ScoreNetTape)> {
        self.check_input(x, levels)?;
        let idx: Vec<usize> = levels.iter().map(|l| l.index).collect();
        let pools = self.config.pool_factors();
        let input = self.network_input(x);
        let mut h = self.conv_in.forward(&input);
        let mut skips = Vec::with_capacity(BLOCKS_PER_SIDE);
        let mut down_tapes = Vec::with_capacity(BLOCKS_PER_SIDE);
        for (k, block) in self.down.iter().enumerate() {
            let (out, tape) = block.forward(&h, &idx);
            down_tapes.push(tape);
            h = if k + 1 < BLOCKS_PER_SIDE {
                avg_pool(&out, pools[k])
            } else {
                out.clone()
            };
            skips.push(out);
        }
        let mut up_tapes = Vec::with_capacity(BLOCKS_PER_SIDE);
        let mut up_split = Vec::with_capacity(BLOCKS_PER_SIDE);
        for (j, block) in self.up.iter().enumerate() {
            let r = BLOCKS_PER_SIDE - 1 - j;
            up_split.push(h.channels());
            let cat = Tensor::concat_channels(&h, &skips[r])?;
            let (out, tape) = block.forward(&cat, &idx);
            up_tapes.push(tape);
            h = if r > 0 {
                upsample_nearest(&out, pools[r - 1])
            } else {
                out
            };
        }
        let (hn, norm_out) = self.norm_out.forward(&h, &idx);
        let act_out = elu(&hn);
        let mut out = self.conv_out.forward(&act_out);
        let inv_sigma = match self.config.conditioning {
            NoiseConditioning::OutputScale => {
                let inv: Vec<f64> = levels.iter().map(|l| 1.0 / l.sigma).collect();
                for (i, s) in inv.iter().enumerate() {
                    out.sample_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                Some(inv)
            }
            NoiseConditioning::LevelEmbedding => None,
        };
        Ok((
            out,
            ScoreNetTape {
                input,
                down: down_tapes,
                up: up_tapes,
                up_split,
                norm_out,
                act_out,
                inv_sigma,
            },
        ))
    }

    /// Parameter gradient of `<grad_out, score>`, with the same layout as the
    /// network itself.
    pub fn backward_params(&self, tape: &ScoreNetTape, grad_out: &Tensor) -> ScoreNet {
        let mut grad = self.zeros_like();
        let pools = self.config.pool_factors();
        let mut g = grad_out.clone();
        if let Some(inv) = &tape.inv_sigma {
            for (i, s) in inv.iter().enumerate() {
                g.sample_mut(i).iter_mut().for_each(|v| *v *= s);
            }
        }
        let g_act = self
            .conv_out
            .backward(&tape.act_out, &g, &mut grad.conv_out);
        let g_hn = elu_backward(&tape.act_out, &g_act);
        let mut g_h = self
            .norm_out
            .backward(&tape.norm_out, &g_hn, &mut grad.norm_out);
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; BLOCKS_PER_SIDE];
        for j in (0..BLOCKS_PER_SIDE).rev() {
            let r = BLOCKS_PER_SIDE - 1 - j;
            let g_out = if r > 0 {
                upsample_nearest_backward(&g_h, pools[r - 1])
            } else {
                g_h
            };
            let g_cat = self.up[j].backward(&tape.up[j], &g_out, &mut grad.up[j]);
            let (g_prev, g_skip) = g_cat.split_channels(tape.up_split[j]);
            skip_grads[r] = Some(g_skip);
            g_h = g_prev;
        }
        // g_h is now the gradient flowing into the bottleneck from above.
        for k in (0..BLOCKS_PER_SIDE).rev() {
            let mut g_out = skip_grads[k].take().expect("every level has a skip");
            if k + 1 < BLOCKS_PER_SIDE {
                g_out.add_assign(&avg_pool_backward(&g_h, pools[k]));
            } else {
                g_out.add_assign(&g_h);
            }
            g_h = self.down[k].backward(&tape.down[k], &g_out, &mut grad.down[k]);
        }
        self.conv_in.backward(&tape.input, &g_h, &mut grad.conv_in);
        grad
    }

    /// Bottleneck activations, one feature vector (length = bottleneck
    /// channels) per spatial location per batch item.
    pub fn bottleneck_features(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x, levels)?;
        let idx: Vec<usize> = levels.iter().map(|l| l.index).collect();
        let pools = self.config.pool_factors();
        let mut h = self.conv_in.forward(&self.network_input(x));
        for (k, block) in self.down.iter().enumerate() {
            let (out, _) = block.forward(&h, &idx);
            h = if k + 1 < BLOCKS_PER_SIDE {
                avg_pool(&out, pools[k])
            } else {
                out
            };
        }
        let [n, c, hh, ww] = h.shape();
        let mut feats = Vec::with_capacity(n * hh * ww);
        for i in 0..n {
            for p in 0..hh * ww {
                feats.push((0..c).map(|ch| h.plane(i, ch)[p]).collect());
            }
        }
        Ok(feats)
    }

    /// `(name, shape, values)` for every parameter array.
    pub fn named_parameters(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, shape, v| {
            out.push((name.to_string(), shape.to_vec(), v.to_vec()))
        });
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

impl Params for ScoreNet {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.conv_in.visit(&p("conv_in"), f);
        for (k, b) in self.down.iter().enumerate() {
            b.visit(&p(&format!("down{k}")), f);
        }
        for (k, b) in self.up.iter().enumerate() {
            b.visit(&p(&format!("up{k}")), f);
        }
        self.norm_out.visit(&p("norm_out"), f);
        self.conv_out.visit(&p("conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.conv_in.visit_mut(&p("conv_in"), f);
        for (k, b) in self.down.iter_mut().enumerate() {
            b.visit_mut(&p(&format!("down{k}")), f);
        }
        for (k, b) in self.up.iter_mut().enumerate() {
            b.visit_mut(&p(&format!("up{k}")), f);
        }
        self.norm_out.visit_mut(&p("norm_out"), f);
        self.conv_out.visit_mut(&p("conv_out"), f);
    }
}

impl ScoreModel for ScoreNet {
    fn score(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<Tensor> {
        self.run(x, levels).map(|(out, _)| out)
    }
}

impl TrainableScore for ScoreNet {
    type Tape = ScoreNetTape;

    fn forward_taped(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<(Tensor, ScoreNetTape)> {
        self.run(x, levels)
    }

    fn backward(&self, tape: ScoreNetTape, grad_out: &Tensor) -> Vec<f64> {
        self.backward_params(&tape, grad_out).flatten()
    }

    fn parameters(&self) -> Vec<f64> {
        self.flatten()
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let n = self.flatten().len();
        if params.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} parameters"),
                got: format!("{}", params.len()),
            });
        }
        self.unflatten(params);
        Ok(())
    }
}

// --- checkpoints -------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSCORECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ScoreNetConfig,
    schedule: NoiseSchedule,
    step: usize,
    #[serde(default)]
    projection: Option<ProjectionConfig>,
    /// `(name, shape)` in storage order.
    arrays: Vec<(String, Vec<usize>)>,
}

/// A network together with the noise schedule it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ScoreNet,
    pub schedule: NoiseSchedule,
    pub step: usize,
    /// Image geometry the network was trained on, when known.
    pub projection: Option<ProjectionConfig>,
}

/// Layout: magic, `u32` version, `u32` header length, JSON header (config,
/// schedule, step, array names and shapes), then every array as
/// little-endian `f64` in header order.
pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    let named = ck.net.named_parameters();
    let header = CheckpointHeader {
        config: ck.net.config.clone(),
        schedule: ck.schedule.clone(),
        step: ck.step,
        projection: ck.projection,
        arrays: named
            .iter()
            .map(|(n, s, _)| (n.clone(), s.clone()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    for (_, _, values) in &named {
        for &v in values {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a score network checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    let mut net = ScoreNet::new(header.config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = net
        .named_parameters()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected != header.arrays {
        return Err(Error::Format(
            "checkpoint arrays do not match the network layout".into(),
        ));
    }
    let total: usize = expected
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let mut flat = vec![0.0; total];
    r.read_f64_into::<LittleEndian>(&mut flat)?;
    net.unflatten(&flat);
    Ok(Checkpoint {
        net,
        schedule: header.schedule,
        step: header.step,
        projection: header.projection,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, ck)?;
    w.flush().map_err(|e| Error::at_path(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::at_path(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
