//! Stage 2: per-band texture transfer with the PAN image as reference.
//!
//! One texture transformer, shared across all bands. For band n the query
//! features come from the bicubic-upsampled raw band (LR MS-n up), keys from
//! the domain-consistent PAN (downsampled then upsampled), values from the
//! raw PAN. Queries and keys are unfolded into one 3x3 patch per pixel and
//! compared by normalized inner product; each query takes the value patch at
//! its most relevant key position (hard attention) gated by that relevance
//! (soft attention). The synthesized features decode into a residual on the
//! stage-1 band. Zero-initialized synthesis and decoder output layers make a
//! fresh transformer reproduce its input band exactly.

use crate::autodiff::{NodeId, Tape};
use crate::error::CoreError;
use crate::fusion::{fusion_forward, FusionNet};
use crate::io::{StageTag, WeightsFile};
use crate::kernels::{self, PadMode};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::patches::PatchPair;
use crate::raster::RasterVolume;
use crate::resample::{downsample_bicubic, upsample_bicubic};
use crate::rng::Xorshift64Star;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{EarlyStop, EpochRecord, TrainLog};
use crate::Result;

#[derive(Debug, Clone)]
pub struct TTConfig {
    /// Feature channels of the extractor, backbone and synthesis paths.
    pub channels: usize,
    /// Patch size of the relevance embedding (stride 1, reflect padding).
    pub patch: usize,
    /// Scale factor used to build the domain-consistent PAN reference.
    pub scale: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Hard epoch cap; 0 means unbounded.
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TTConfig {
    fn default() -> Self {
        TTConfig {
            channels: 16,
            patch: 3,
            scale: 4,
            learning_rate: 1e-4,
            batch_size: 16,
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
struct TtRefs {
    lte1: ConvRef,
    lte2: ConvRef,
    backbone1: ConvRef,
    backbone2: ConvRef,
    synth: ConvRef,
    dec1: ConvRef,
    dec2: ConvRef,
}

/// Texture transformer parameters, shared across all bands.
#[derive(Debug, Clone)]
pub struct TextureTransformer<T> {
    pub channels: usize,
    pub patch: usize,
    pub scale: usize,
    pub params: ParamStore<T>,
    refs: TtRefs,
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

impl TextureTransformer<f32> {
    /// Fresh transformer: fan-in uniform init except the synthesis conv and
    /// final decoder conv, which start at zero (identity start).
    pub fn init(cfg: &TTConfig) -> Self {
        assert!(cfg.channels >= 1 && cfg.patch % 2 == 1 && cfg.scale >= 2);
        let c = cfg.channels;
        let mut rng = Xorshift64Star::new(cfg.seed);
        let mut params = ParamStore::new();
        let lte1 = add_conv(&mut params, "lte.conv1", &[c, 1, 3, 3], Some(&mut rng));
        let lte2 = add_conv(&mut params, "lte.conv2", &[c, c, 3, 3], Some(&mut rng));
        let backbone1 = add_conv(&mut params, "backbone.conv1", &[c, 1, 3, 3], Some(&mut rng));
        let backbone2 = add_conv(&mut params, "backbone.conv2", &[c, c, 3, 3], Some(&mut rng));
        let synth = add_conv(&mut params, "synth", &[c, 2 * c, 3, 3], None);
        let dec1 = add_conv(&mut params, "decoder.conv1", &[c, c, 3, 3], Some(&mut rng));
        let dec2 = add_conv(&mut params, "decoder.conv2", &[1, c, 3, 3], None);
        TextureTransformer {
            channels: c,
            patch: cfg.patch,
            scale: cfg.scale,
            params,
            refs: TtRefs {
                lte1,
                lte2,
                backbone1,
                backbone2,
                synth,
                dec1,
                dec2,
            },
        }
    }

    pub fn to_weights(&self) -> WeightsFile {
        let mut w = WeightsFile::from_params(StageTag::Texture, &self.params);
        w.set_meta("patch", self.patch as f32);
        w
    }

    /// Rebuilds the transformer; `scale` comes from the caller since it is a
    /// property of the data geometry, while the patch size rides in the
    /// weights metadata.
    pub fn from_weights(weights: &WeightsFile, scale: usize) -> Result<Self> {
        if weights.stage != StageTag::Texture {
            return Err(CoreError::WrongStage {
                expected: "texture".into(),
                found: weights.stage.to_string(),
            });
        }
        let patch = weights.meta_value("patch").ok_or_else(|| CoreError::Format {
            path: "weights".into(),
            detail: "missing meta.patch".into(),
        })? as usize;
        if patch % 2 != 1 {
            return Err(CoreError::Format {
                path: "weights".into(),
                detail: format!("patch size {patch} must be odd"),
            });
        }
        let lte1 = weights.block("lte.conv1.kernel")?;
        if lte1.dims.len() != 4 || lte1.dims[1] != 1 {
            return Err(CoreError::Format {
                path: "weights".into(),
                detail: format!("lte.conv1.kernel dims {:?} not [C, 1, 3, 3]", lte1.dims),
            });
        }
        let c = lte1.dims[0] as usize;
        let cu = c as u32;
        let expected: Vec<(String, Vec<u32>)> = vec![
            ("lte.conv1.kernel".into(), vec![cu, 1, 3, 3]),
            ("lte.conv1.bias".into(), vec![cu]),
            ("lte.conv2.kernel".into(), vec![cu, cu, 3, 3]),
            ("lte.conv2.bias".into(), vec![cu]),
            ("backbone.conv1.kernel".into(), vec![cu, 1, 3, 3]),
            ("backbone.conv1.bias".into(), vec![cu]),
            ("backbone.conv2.kernel".into(), vec![cu, cu, 3, 3]),
            ("backbone.conv2.bias".into(), vec![cu]),
            ("synth.kernel".into(), vec![cu, 2 * cu, 3, 3]),
            ("synth.bias".into(), vec![cu]),
            ("decoder.conv1.kernel".into(), vec![cu, cu, 3, 3]),
            ("decoder.conv1.bias".into(), vec![cu]),
            ("decoder.conv2.kernel".into(), vec![1, cu, 3, 3]),
            ("decoder.conv2.bias".into(), vec![1]),
        ];
        if weights.blocks.len() != expected.len() {
            return Err(CoreError::Format {
                path: "weights".into(),
                detail: format!(
                    "{} blocks in file, {} expected for C={c}",
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
        Ok(Self::assemble(c, patch, scale, params))
    }
}

impl<T: Scalar> TextureTransformer<T> {
    fn assemble(channels: usize, patch: usize, scale: usize, params: ParamStore<T>) -> Self {
        let r = |name: &str| ConvRef {
            kernel: params.index_of(&format!("{name}.kernel")).expect("kernel"),
            bias: params.index_of(&format!("{name}.bias")).expect("bias"),
        };
        let refs = TtRefs {
            lte1: r("lte.conv1"),
            lte2: r("lte.conv2"),
            backbone1: r("backbone.conv1"),
            backbone2: r("backbone.conv2"),
            synth: r("synth"),
            dec1: r("decoder.conv1"),
            dec2: r("decoder.conv2"),
        };
        TextureTransformer {
            channels,
            patch,
            scale,
            params,
            refs,
        }
    }

    pub fn cast<U: Scalar>(&self) -> TextureTransformer<U> {
        TextureTransformer::assemble(self.channels, self.patch, self.scale, self.params.cast())
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        bound: &[NodeId],
        x: NodeId,
        r: ConvRef,
    ) -> Result<NodeId> {
        tape.conv2d(x, bound[r.kernel], bound[r.bias], PadMode::Zero)
    }

    /// The learnable texture extractor: the same two conv+relu layers produce
    /// queries, keys and values depending on the input image.
    pub fn lte_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &[NodeId],
        image: NodeId,
    ) -> Result<NodeId> {
        let s = tape.value(image).shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(CoreError::shape(
                "lte_forward",
                format!("single-band input required, got {:?}", s),
            ));
        }
        let h = self.conv(tape, bound, image, self.refs.lte1)?;
        let h = tape.relu(h);
        let h = self.conv(tape, bound, h, self.refs.lte2)?;
        Ok(tape.relu(h))
    }

    fn backbone_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &[NodeId],
        image: NodeId,
    ) -> Result<NodeId> {
        let h = self.conv(tape, bound, image, self.refs.backbone1)?;
        let h = tape.relu(h);
        let h = self.conv(tape, bound, h, self.refs.backbone2)?;
        Ok(tape.relu(h))
    }

    /// Feature synthesis: F + Conv(Concat(F, T)) gated by the soft map S.
    pub fn synthesize_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &[NodeId],
        features: NodeId,
        transferred: NodeId,
        soft: NodeId,
    ) -> Result<NodeId> {
        let stacked = tape.concat_channels(&[features, transferred])?;
        let mixed = self.conv(tape, bound, stacked, self.refs.synth)?;
        let gated = tape.mul(mixed, soft)?;
        tape.add(features, gated)
    }

    /// Full band refinement. `kv_cache` lets one tape share the key/value
    /// patches across bands (the PAN reference does not depend on the band).
    pub fn refine_band_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &[NodeId],
        sr_band: NodeId,
        lr_up_band: NodeId,
        pan: NodeId,
        pan_du: NodeId,
        kv_cache: &mut Option<(NodeId, NodeId)>,
    ) -> Result<NodeId> {
        let shape = tape.value(sr_band).shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(CoreError::shape(
                "texture_transfer_band",
                format!("single-band input required, got {:?}", shape),
            ));
        }
        let (h, w) = (shape[1], shape[2]);
        for (name, id) in [("lr_up", lr_up_band), ("pan", pan), ("pan_du", pan_du)] {
            if tape.value(id).shape() != shape.as_slice() {
                return Err(CoreError::shape(
                    "texture_transfer_band",
                    format!("{name} {:?}, want {:?}", tape.value(id).shape(), shape),
                ));
            }
        }
        let (k_patches, v_patches) = match *kv_cache {
            Some(kv) => kv,
            None => {
                let k_feat = self.lte_on_tape(tape, bound, pan_du)?;
                let v_feat = self.lte_on_tape(tape, bound, pan)?;
                let kv = (tape.unfold(k_feat, self.patch)?, tape.unfold(v_feat, self.patch)?);
                *kv_cache = Some(kv);
                kv
            }
        };
        let q_feat = self.lte_on_tape(tape, bound, lr_up_band)?;
        let q_patches = tape.unfold(q_feat, self.patch)?;
        let relevance = tape.relevance(q_patches, k_patches)?;
        let (soft_flat, hard) = tape.row_max(relevance)?;
        let transferred_patches = tape.gather_rows(v_patches, hard)?;
        let transferred = tape.fold_mean(transferred_patches, self.channels, h, w, self.patch)?;
        let soft = tape.reshape(soft_flat, &[1, h, w])?;
        let features = self.backbone_on_tape(tape, bound, sr_band)?;
        let fused = self.synthesize_on_tape(tape, bound, features, transferred, soft)?;
        let d = self.conv(tape, bound, fused, self.refs.dec1)?;
        let d = tape.relu(d);
        let residual = self.conv(tape, bound, d, self.refs.dec2)?;
        let refined = tape.add(sr_band, residual)?;
        Ok(tape.clamp_unit(refined))
    }
}

// ---------------------------------------------------------------------------
// Attention building blocks on plain tensors (the same kernels the graph
// records; exposed for direct use and invariant checks)
// ---------------------------------------------------------------------------

/// Runs the texture extractor outside any training graph.
pub fn lte_forward<T: Scalar>(
    tt: &TextureTransformer<T>,
    image: &RasterVolume,
) -> Result<Tensor<T>> {
    if image.bands() != 1 {
        return Err(CoreError::shape(
            "lte_forward",
            format!("single-band input required, got {} band(s)", image.bands()),
        ));
    }
    let mut tape = Tape::new();
    let bound = tt.params.bind(&mut tape);
    let x = tape.constant(image.to_tensor::<T>());
    let out = tt.lte_on_tape(&mut tape, &bound, x)?;
    Ok(tape.value(out).clone())
}

/// One p*p patch per pixel (stride 1, reflect padding), centers row-major.
pub fn unfold<T: Scalar>(features: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    if features.rank() != 3 {
        return Err(CoreError::shape(
            "unfold",
            format!("features rank {} (want 3)", features.rank()),
        ));
    }
    if patch % 2 == 0 || patch == 0 {
        return Err(CoreError::contract(format!("patch size {patch} must be odd")));
    }
    Ok(kernels::unfold_forward(features, patch))
}

/// Relevance matrix of normalized inner products.
pub fn relevance<T: Scalar>(q_patches: &Tensor<T>, k_patches: &Tensor<T>) -> Result<Tensor<T>> {
    if q_patches.rank() != 2 || k_patches.rank() != 2 || q_patches.shape()[1] != k_patches.shape()[1]
    {
        return Err(CoreError::shape(
            "relevance",
            format!(
                "queries {:?} vs keys {:?}: patch dimensionality must match",
                q_patches.shape(),
                k_patches.shape()
            ),
        ));
    }
    Ok(kernels::relevance_forward(q_patches, k_patches))
}

/// Hard-attention index map: per-query argmax, ties to the smallest index.
pub fn hard_attention<T: Scalar>(relevance: &Tensor<T>) -> Vec<usize> {
    kernels::row_argmax(relevance)
}

/// Soft-attention map: per-query maximum relevance, taken at the hard index
/// so that s_i equals r[i, h_i] bitwise.
pub fn soft_attention<T: Scalar>(relevance: &Tensor<T>) -> Tensor<T> {
    let argmax = kernels::row_argmax(relevance);
    kernels::row_max_values(relevance, &argmax)
}

/// Transfers value patches by the hard indices and folds them to [C,H,W].
pub fn transfer<T: Scalar>(
    v_patches: &Tensor<T>,
    hard: &[usize],
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    if let Some(&bad) = hard.iter().find(|&&i| i >= v_patches.shape()[0]) {
        return Err(CoreError::contract(format!(
            "transfer index {bad} out of range for {} value patches",
            v_patches.shape()[0]
        )));
    }
    if hard.len() != height * width {
        return Err(CoreError::shape(
            "transfer",
            format!("{} indices for {}x{} centers", hard.len(), height, width),
        ));
    }
    let gathered = kernels::gather_rows(v_patches, hard);
    Ok(kernels::fold_mean_forward(&gathered, channels, height, width, patch))
}

// ---------------------------------------------------------------------------
// Band-level inference
// ---------------------------------------------------------------------------

fn band_tensor<T: Scalar>(r: &RasterVolume) -> Tensor<T> {
    r.to_tensor::<T>()
}

/// Refines one stage-1 band against the PAN reference. All three inputs share
/// the HR grid; the domain-consistent PAN (down-then-up by the configured
/// scale) is computed internally.
pub fn texture_transfer_band<T: Scalar>(
    tt: &TextureTransformer<T>,
    sr_ms_n: &RasterVolume,
    lr_ms_n_up: &RasterVolume,
    pan: &RasterVolume,
) -> Result<RasterVolume> {
    for (name, img) in [("sr_ms_n", sr_ms_n), ("lr_ms_n_up", lr_ms_n_up), ("pan", pan)] {
        if img.bands() != 1 {
            return Err(CoreError::shape(
                "texture_transfer_band",
                format!("{name} must be single-band, got {}", img.bands()),
            ));
        }
        if img.width() != pan.width() || img.height() != pan.height() {
            return Err(CoreError::shape(
                "texture_transfer_band",
                format!(
                    "{name} {}x{} must match pan {}x{}",
                    img.width(),
                    img.height(),
                    pan.width(),
                    pan.height()
                ),
            ));
        }
    }
    let pan_du = upsample_bicubic(&downsample_bicubic(pan, tt.scale)?, tt.scale)?;
    let mut tape = Tape::new();
    let bound = tt.params.bind(&mut tape);
    let sr = tape.constant(band_tensor::<T>(sr_ms_n));
    let lr_up = tape.constant(band_tensor::<T>(lr_ms_n_up));
    let pan_id = tape.constant(band_tensor::<T>(pan));
    let pan_du_id = tape.constant(band_tensor::<T>(&pan_du));
    let mut kv = None;
    let out = tt.refine_band_on_tape(&mut tape, &bound, sr, lr_up, pan_id, pan_du_id, &mut kv)?;
    RasterVolume::from_tensor(tape.value(out))
}

/// Applies the transformer band by band over a full stage-1 cube.
pub fn texture_refine<T: Scalar>(
    tt: &TextureTransformer<T>,
    sr_ms: &RasterVolume,
    ms_lr: &RasterVolume,
    pan: &RasterVolume,
) -> Result<RasterVolume> {
    let lr_up = upsample_bicubic(ms_lr, tt.scale)?;
    if lr_up.width() != sr_ms.width() || lr_up.height() != sr_ms.height() {
        return Err(CoreError::shape(
            "texture_refine",
            format!(
                "upsampled MS {}x{} vs stage-1 output {}x{}",
                lr_up.width(),
                lr_up.height(),
                sr_ms.width(),
                sr_ms.height()
            ),
        ));
    }
    let mut out = RasterVolume::zeros(sr_ms.width(), sr_ms.height(), sr_ms.bands());
    for b in 0..sr_ms.bands() {
        let refined = texture_transfer_band(
            tt,
            &sr_ms.band_volume(b)?,
            &lr_up.band_volume(b)?,
            pan,
        )?;
        let plane = sr_ms.width() * sr_ms.height();
        out.pixels_mut()[b * plane..(b + 1) * plane].copy_from_slice(refined.pixels());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training (stage-1 weights frozen)
// ---------------------------------------------------------------------------

struct Sample {
    sr_bands: Vec<Tensor<f32>>,
    lr_up_bands: Vec<Tensor<f32>>,
    gt_bands: Vec<Tensor<f32>>,
    pan: Tensor<f32>,
    pan_du: Tensor<f32>,
}

fn prepare_samples(
    fusion: &FusionNet<f32>,
    cfg: &TTConfig,
    pairs: &[&PatchPair],
) -> Result<Vec<Sample>> {
    pairs
        .iter()
        .map(|p| {
            if p.pan.width() != p.ms.width() * cfg.scale || p.pan.height() != p.ms.height() * cfg.scale
            {
                return Err(CoreError::shape(
                    "train_texture",
                    format!(
                        "pan {}x{} is not {}x the ms patch {}x{}",
                        p.pan.width(),
                        p.pan.height(),
                        cfg.scale,
                        p.ms.width(),
                        p.ms.height()
                    ),
                ));
            }
            // Stage-1 inference runs outside any gradient graph: the fusion
            // weights are frozen, so its outputs are constants per pair.
            let sr = fusion_forward(fusion, &p.ms, &p.pan)?;
            let lr_up = upsample_bicubic(&p.ms, cfg.scale)?;
            let pan_du = upsample_bicubic(&downsample_bicubic(&p.pan, cfg.scale)?, cfg.scale)?;
            let split_bands = |r: &RasterVolume| -> Result<Vec<Tensor<f32>>> {
                (0..r.bands())
                    .map(|b| Ok(r.band_volume(b)?.to_tensor::<f32>()))
                    .collect()
            };
            Ok(Sample {
                sr_bands: split_bands(&sr)?,
                lr_up_bands: split_bands(&lr_up)?,
                gt_bands: split_bands(&p.gt)?,
                pan: p.pan.to_tensor::<f32>(),
                pan_du: pan_du.to_tensor::<f32>(),
            })
        })
        .collect()
}

/// L1 loss summed over bands for one pair; optionally accumulates parameter
/// gradients.
fn sample_loss(
    tt: &TextureTransformer<f32>,
    sample: &Sample,
    grads: Option<&mut [Tensor<f32>]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = tt.params.bind(&mut tape);
    let pan = tape.constant(sample.pan.clone());
    let pan_du = tape.constant(sample.pan_du.clone());
    let mut kv = None;
    let mut total: Option<NodeId> = None;
    for b in 0..sample.sr_bands.len() {
        let sr = tape.constant(sample.sr_bands[b].clone());
        let lr_up = tape.constant(sample.lr_up_bands[b].clone());
        let out = tt.refine_band_on_tape(&mut tape, &bound, sr, lr_up, pan, pan_du, &mut kv)?;
        let gt = tape.constant(sample.gt_bands[b].clone());
        let band_loss = tape.l1_loss(out, gt)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, band_loss)?,
            None => band_loss,
        });
    }
    let loss = total.expect("at least one band");
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

/// Trains stage 2 against ground-truth bands with the fusion weights frozen.
pub fn train_texture(
    train: &[&PatchPair],
    val: &[&PatchPair],
    fusion: &FusionNet<f32>,
    cfg: &TTConfig,
) -> Result<(TextureTransformer<f32>, TrainLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::contract(format!(
            "train and validation splits must be non-empty (got {} / {})",
            train.len(),
            val.len()
        )));
    }
    let mut tt = TextureTransformer::init(cfg);
    let train_samples = prepare_samples(fusion, cfg, train)?;
    let val_samples = prepare_samples(fusion, cfg, val)?;

    let mut opt = Adam::new(&tt.params, cfg.learning_rate);
    let mut shuffle_rng = Xorshift64Star::new(cfg.seed ^ 0x7E87_00FE);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut log = TrainLog::default();
    let mut best_params = tt.params.clone();

    let mut epoch = 0usize;
    loop {
        epoch += 1;
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut train_total = 0.0f64;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = tt.params.zero_grads();
            for &idx in batch {
                train_total += sample_loss(&tt, &train_samples[idx], Some(&mut grads))?;
            }
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            opt.step(&mut tt.params, &grads)?;
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
            val_total += sample_loss(&tt, s, None)?;
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
            best_params = tt.params.clone();
        }
        if stop.should_stop() || (cfg.max_epochs > 0 && epoch >= cfg.max_epochs) {
            break;
        }
    }
    let (best_epoch, best_val) = stop.best();
    log.best_epoch = best_epoch;
    log.best_val = best_val;
    tt.params = best_params;
    Ok((tt, log))
}
