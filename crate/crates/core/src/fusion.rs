//! Stage 1: residual 3D-convolutional fusion of the interpolated MS cube
//! with the PAN image.
//!
//! Forward path: M' = bicubic(ms_lr); a 1x1 2D convolution adjusts the
//! concatenated [M', P] back to L channels; the result is treated as a 3D
//! volume with the band axis as depth and runs through a lifting 3D conv,
//! residual conv-relu-conv blocks and a zero-initialized projection back to
//! one channel. The projected residual is added to M' and the public output
//! is clamped to [0,1]. Zero projection makes a fresh network reproduce the
//! bicubic upsample exactly.

use crate::autodiff::{NodeId, Tape};
use crate::error::CoreError;
use crate::io::{StageTag, WeightsFile};
use crate::kernels::PadMode;
use crate::params::ParamStore;
use crate::patches::PatchPair;
use crate::raster::RasterVolume;
use crate::resample::upsample_bicubic;
use crate::rng::Xorshift64Star;
use crate::scalar::Scalar;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::training::{EarlyStop, EpochRecord, TrainLog};
use crate::Result;

pub const FUSION_KERNEL: usize = 3;

#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// Feature channels of the 3D trunk.
    pub channels: usize,
    /// Number of residual 3D blocks.
    pub blocks: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    /// Hard epoch cap; 0 means unbounded.
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            channels: 16,
            blocks: 3,
            learning_rate: 1e-3,
            batch_size: 32,
            patience: 30,
            max_epochs: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    kernel: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct FusionRefs {
    adjust: ConvRef,
    lift: ConvRef,
    blocks: Vec<(ConvRef, ConvRef)>,
    project: ConvRef,
}

/// Parameter set of the stage-1 network for a fixed band count.
#[derive(Debug, Clone)]
pub struct FusionNet<T> {
    pub bands: usize,
    pub channels: usize,
    pub blocks: usize,
    pub params: ParamStore<T>,
    refs: FusionRefs,
}

fn add_conv<T: Scalar>(
    params: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    rng: Option<&mut Xorshift64Star>,
) -> ConvRef {
    let fan_in: usize = shape[1..].iter().product();
    let kernel = match rng {
        Some(rng) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::uniform(shape, -bound, bound, rng)
        }
        None => Tensor::zeros(shape),
    };
    let kernel = params.add(format!("{name}.kernel"), kernel);
    let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
    ConvRef { kernel, bias }
}

impl FusionNet<f32> {
    /// Fresh network: fan-in uniform init everywhere except the projection
    /// layer, which starts at zero so the network begins as the identity
    /// over the bicubic upsample.
    pub fn init(bands: usize, cfg: &FusionConfig) -> Self {
        assert!(bands >= 1 && cfg.channels >= 1 && cfg.blocks >= 1);
        let k = FUSION_KERNEL;
        let mut rng = Xorshift64Star::new(cfg.seed);
        let mut params = ParamStore::new();
        let adjust = add_conv(&mut params, "adjust", &[bands, bands + 1, 1, 1], Some(&mut rng));
        let lift = add_conv(&mut params, "lift", &[cfg.channels, 1, k, k, k], Some(&mut rng));
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let c1 = add_conv(
                    &mut params,
                    &format!("block{i}.conv1"),
                    &[cfg.channels, cfg.channels, k, k, k],
                    Some(&mut rng),
                );
                let c2 = add_conv(
                    &mut params,
                    &format!("block{i}.conv2"),
                    &[cfg.channels, cfg.channels, k, k, k],
                    Some(&mut rng),
                );
                (c1, c2)
            })
            .collect();
        let project = add_conv(&mut params, "project", &[1, cfg.channels, k, k, k], None);
        FusionNet {
            bands,
            channels: cfg.channels,
            blocks: cfg.blocks,
            params,
            refs: FusionRefs {
                adjust,
                lift,
                blocks,
                project,
            },
        }
    }

    pub fn to_weights(&self) -> WeightsFile {
        WeightsFile::from_params(StageTag::Fusion, &self.params)
    }

    /// Rebuilds the network from a weights file, inferring the geometry from
    /// block shapes and validating every block against it.
    pub fn from_weights(weights: &WeightsFile) -> Result<Self> {
        if weights.stage != StageTag::Fusion {
            return Err(CoreError::WrongStage {
                expected: "fusion".into(),
                found: weights.stage.to_string(),
            });
        }
        let k = FUSION_KERNEL as u32;
        let adjust = weights.block("adjust.kernel")?;
        if adjust.dims.len() != 4 || adjust.dims[0] + 1 != adjust.dims[1] {
            return Err(CoreError::Format {
                path: "weights".into(),
                detail: format!("adjust.kernel dims {:?} not [L, L+1, 1, 1]", adjust.dims),
            });
        }
        let bands = adjust.dims[0] as usize;
        let lift = weights.block("lift.kernel")?;
        if lift.dims.len() != 5 || lift.dims[1] != 1 {
            return Err(CoreError::Format {
                path: "weights".into(),
                detail: format!("lift.kernel dims {:?} not [C, 1, k, k, k]", lift.dims),
            });
        }
        let channels = lift.dims[0] as usize;
        let mut blocks = 0;
        while weights.block(&format!("block{blocks}.conv1.kernel")).is_ok() {
            blocks += 1;
        }
        if blocks == 0 {
            return Err(CoreError::Format {
                path: "weights".into(),
                detail: "no residual blocks found".into(),
            });
        }

        let mut expected: Vec<(String, Vec<u32>)> = Vec::new();
        let c = channels as u32;
        let l = bands as u32;
        expected.push(("adjust.kernel".into(), vec![l, l + 1, 1, 1]));
        expected.push(("adjust.bias".into(), vec![l]));
        expected.push(("lift.kernel".into(), vec![c, 1, k, k, k]));
        expected.push(("lift.bias".into(), vec![c]));
        for i in 0..blocks {
            for conv in ["conv1", "conv2"] {
                expected.push((format!("block{i}.{conv}.kernel"), vec![c, c, k, k, k]));
                expected.push((format!("block{i}.{conv}.bias"), vec![c]));
            }
        }
        expected.push(("project.kernel".into(), vec![1, c, k, k, k]));
        expected.push(("project.bias".into(), vec![1]));

        if weights.blocks.len() != expected.len() {
            return Err(CoreError::Format {
                path: "weights".into(),
                detail: format!(
                    "{} blocks in file, {} expected for L={bands} C={channels} K={blocks}",
                    weights.blocks.len(),
                    expected.len()
                ),
            });
        }
        for (name, dims) in &expected {
            let b = weights.block(name)?;
            if &b.dims != dims {
                return Err(CoreError::Format {
                    path: "weights".into(),
                    detail: format!("{name} dims {:?}, expected {:?}", b.dims, dims),
                });
            }
        }

        let params = weights.to_params()?;
        Ok(Self::assemble(bands, channels, blocks, params))
    }
}

impl<T: Scalar> FusionNet<T> {
    fn assemble(bands: usize, channels: usize, blocks: usize, params: ParamStore<T>) -> Self {
        let r = |name: &str| ConvRef {
            kernel: params.index_of(&format!("{name}.kernel")).expect("kernel"),
            bias: params.index_of(&format!("{name}.bias")).expect("bias"),
        };
        let refs = FusionRefs {
            adjust: r("adjust"),
            lift: r("lift"),
            blocks: (0..blocks)
                .map(|i| (r(&format!("block{i}.conv1")), r(&format!("block{i}.conv2"))))
                .collect(),
            project: r("project"),
        };
        FusionNet {
            bands,
            channels,
            blocks,
            params,
            refs,
        }
    }

    pub fn cast<U: Scalar>(&self) -> FusionNet<U> {
        FusionNet::assemble(self.bands, self.channels, self.blocks, self.params.cast())
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Builds the stage-1 graph from bound parameter leaves. `m_up` is the
    /// interpolated MS cube [L,H,W], `pan` the PAN image [1,H,W]; both are
    /// usually constants. Returns the clamped fused cube [L,H,W].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &[NodeId],
        m_up: NodeId,
        pan: NodeId,
    ) -> Result<NodeId> {
        let ms_shape = tape.value(m_up).shape().to_vec();
        if ms_shape.len() != 3 || ms_shape[0] != self.bands {
            return Err(CoreError::shape(
                "fusion_forward",
                format!("interpolated MS {:?}, want [{}, H, W]", ms_shape, self.bands),
            ));
        }
        let pan_shape = tape.value(pan).shape();
        if pan_shape != [1, ms_shape[1], ms_shape[2]] {
            return Err(CoreError::shape(
                "fusion_forward",
                format!("pan {:?}, want [1, {}, {}]", pan_shape, ms_shape[1], ms_shape[2]),
            ));
        }
        let conv2 = |tape: &mut Tape<T>, x, r: ConvRef| {
            tape.conv2d(x, bound[r.kernel], bound[r.bias], PadMode::Zero)
        };
        let conv3 = |tape: &mut Tape<T>, x, r: ConvRef| {
            tape.conv3d(x, bound[r.kernel], bound[r.bias], PadMode::Zero)
        };

        let stacked = tape.concat_channels(&[m_up, pan])?;
        let adjusted = conv2(tape, stacked, self.refs.adjust)?;
        let volume = tape.reshape(adjusted, &[1, self.bands, ms_shape[1], ms_shape[2]])?;
        let mut features = conv3(tape, volume, self.refs.lift)?;
        for &(c1, c2) in &self.refs.blocks {
            let h = conv3(tape, features, c1)?;
            let h = tape.relu(h);
            let h = conv3(tape, h, c2)?;
            features = tape.add(features, h)?;
        }
        let residual = conv3(tape, features, self.refs.project)?;
        let residual = tape.reshape(residual, &ms_shape)?;
        let fused = tape.add(m_up, residual)?;
        Ok(tape.clamp_unit(fused))
    }
}

/// Validates an (ms_lr, pan) pair against the net and returns the scale.
fn check_pair<T: Scalar>(net: &FusionNet<T>, ms_lr: &RasterVolume, pan: &RasterVolume) -> Result<usize> {
    if pan.bands() != 1 {
        return Err(CoreError::contract(format!(
            "panchromatic image must have 1 band, got {}",
            pan.bands()
        )));
    }
    if ms_lr.bands() != net.bands {
        return Err(CoreError::shape(
            "fusion_forward",
            format!("MS has {} band(s), network expects {}", ms_lr.bands(), net.bands),
        ));
    }
    if pan.width() % ms_lr.width() != 0
        || pan.height() % ms_lr.height() != 0
        || pan.width() / ms_lr.width() != pan.height() / ms_lr.height()
        || pan.width() / ms_lr.width() < 2
    {
        return Err(CoreError::shape(
            "fusion_forward",
            format!(
                "pan {}x{} must be an integer (>=2) multiple of ms {}x{}",
                pan.width(),
                pan.height(),
                ms_lr.width(),
                ms_lr.height()
            ),
        ));
    }
    Ok(pan.width() / ms_lr.width())
}

/// Stage-1 inference: upsample, fuse, clamp.
pub fn fusion_forward<T: Scalar>(
    net: &FusionNet<T>,
    ms_lr: &RasterVolume,
    pan: &RasterVolume,
) -> Result<RasterVolume> {
    let scale = check_pair(net, ms_lr, pan)?;
    let m_up = upsample_bicubic(ms_lr, scale)?;
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let m_up_id = tape.constant(m_up.to_tensor::<T>());
    let pan_id = tape.constant(pan.to_tensor::<T>());
    let out = net.forward_on_tape(&mut tape, &bound, m_up_id, pan_id)?;
    RasterVolume::from_tensor(tape.value(out))
}

struct Sample<T> {
    m_up: Tensor<T>,
    pan: Tensor<T>,
    gt: Tensor<T>,
}

fn prepare_samples(net: &FusionNet<f32>, pairs: &[&PatchPair]) -> Result<Vec<Sample<f32>>> {
    pairs
        .iter()
        .map(|p| {
            let scale = check_pair(net, &p.ms, &p.pan)?;
            if p.gt.width() != p.pan.width()
                || p.gt.height() != p.pan.height()
                || p.gt.bands() != net.bands
            {
                return Err(CoreError::shape(
                    "train_fusion",
                    format!(
                        "gt {}x{}x{} vs pan {}x{} and {} band(s)",
                        p.gt.width(),
                        p.gt.height(),
                        p.gt.bands(),
                        p.pan.width(),
                        p.pan.height(),
                        net.bands
                    ),
                ));
            }
            Ok(Sample {
                m_up: upsample_bicubic(&p.ms, scale)?.to_tensor::<f32>(),
                pan: p.pan.to_tensor::<f32>(),
                gt: p.gt.to_tensor::<f32>(),
            })
        })
        .collect()
}

fn sample_loss(net: &FusionNet<f32>, sample: &Sample<f32>, grads: Option<&mut [Tensor<f32>]>) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let m_up = tape.constant(sample.m_up.clone());
    let pan = tape.constant(sample.pan.clone());
    let out = net.forward_on_tape(&mut tape, &bound, m_up, pan)?;
    let gt = tape.constant(sample.gt.clone());
    let loss = tape.l1_loss(out, gt)?;
    let value = tape.value(loss).item() as f64;
    if let Some(acc) = grads {
        tape.backward(loss)?;
        for (k, id) in bound.iter().enumerate() {
            if let Some(g) = tape.grad(*id) {
                acc[k].add_assign(g);
            }
        }
    }
    Ok(value)
}

/// Trains stage 1 with Adam on the L1 loss, keeping the best-validation
/// weights and stopping by the patience rule. Same seed, same data: byte
/// identical weights.
pub fn train_fusion(
    train: &[&PatchPair],
    val: &[&PatchPair],
    cfg: &FusionConfig,
) -> Result<(FusionNet<f32>, TrainLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::contract(format!(
            "train and validation splits must be non-empty (got {} / {})",
            train.len(),
            val.len()
        )));
    }
    let bands = train[0].ms.bands();
    let mut net = FusionNet::init(bands, cfg);
    let train_samples = prepare_samples(&net, train)?;
    let val_samples = prepare_samples(&net, val)?;

    let mut opt = Adam::new(&net.params, cfg.learning_rate);
    // The init already consumed the leading draws of this stream, so shuffle
    // order stays reproducible from the config seed alone.
    let mut shuffle_rng = Xorshift64Star::new(cfg.seed ^ 0x5875_FF1E);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut log = TrainLog::default();
    let mut best_params = net.params.clone();

    let mut epoch = 0usize;
    loop {
        epoch += 1;
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut train_total = 0.0f64;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = net.params.zero_grads();
            for &idx in batch {
                train_total += sample_loss(&net, &train_samples[idx], Some(&mut grads))?;
            }
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            opt.step(&mut net.params, &grads)?;
        }
        let train_loss = train_total / train_samples.len() as f64;
        if !train_loss.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                epoch,
                detail: format!("train loss {train_loss}"),
            });
        }
        let mut val_total = 0.0f64;
        for s in &val_samples {
            val_total += sample_loss(&net, s, None)?;
        }
        let val_loss = val_total / val_samples.len() as f64;
        if !val_loss.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if stop.observe(epoch, val_loss) {
            best_params = net.params.clone();
        }
        if stop.should_stop() || (cfg.max_epochs > 0 && epoch >= cfg.max_epochs) {
            break;
        }
    }
    let (best_epoch, best_val) = stop.best();
    log.best_epoch = best_epoch;
    log.best_val = best_val;
    net.params = best_params;
    Ok((net, log))
}
