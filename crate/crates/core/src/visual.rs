//! Grid visual features: the convolutional / patch-linear encoders and
//! random feature sampling.

use rand::Rng;

use crate::config::{ModelConfig, VisualEncoderKind};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::params::{Mat, ModelParams};
use crate::tensor::{PatchGeometry, Tape, Var};

/// `K x c` grid features with the original grid index of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub features: Mat,
    pub grid_dims: (usize, usize),
    pub position_ids: Vec<usize>,
}

impl VisualFeatures {
    pub fn count(&self) -> usize {
        self.features.nrows()
    }
}

/// Kernel (and stride) of the first convolution stage.
pub fn stage_one_kernel(cfg: &ModelConfig) -> usize {
    cfg.vis_stride / 2
}

/// Width of the first convolution stage.
pub fn stage_one_channels(cfg: &ModelConfig) -> usize {
    (cfg.vis_channels / 2).max(1)
}

/// Parameter names and shapes of the configured visual encoder.
pub fn encoder_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let c = cfg.vis_channels;
    match cfg.encoder {
        VisualEncoderKind::Conv => {
            let c1 = stage_one_channels(cfg);
            let k1 = stage_one_kernel(cfg);
            vec![
                ("vis.conv1.weight".into(), (k1 * k1, c1)),
                ("vis.conv1.bias".into(), (1, c1)),
                ("vis.conv2.weight".into(), (4 * c1, c)),
                ("vis.conv2.bias".into(), (1, c)),
            ]
        }
        VisualEncoderKind::Patch => vec![
            ("vis.patch.weight".into(), (cfg.vis_stride * cfg.vis_stride, c)),
            ("vis.patch.bias".into(), (1, c)),
        ],
    }
}

/// Runs the visual encoder on the tape, returning the `K x c` feature node.
/// Conv: a (s/2)x(s/2) stage with matching stride, then a 2x2/stride-2 stage,
/// both ReLU and unpadded, for total stride `s`. Patch: one affine map over
/// non-overlapping `s x s` patches.
pub fn encode_on_tape(tape: &mut Tape<'_>, image: &ImageGrid, cfg: &ModelConfig) -> Result<Var> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::Shape(format!(
            "image is {}x{}, config expects {}x{}",
            image.height(),
            image.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let side = cfg.image_size;
    let x = tape.constant(image.as_column());
    match cfg.encoder {
        VisualEncoderKind::Conv => {
            let p1 = tape.patches(
                x,
                PatchGeometry {
                    height: side,
                    width: side,
                    channels: 1,
                    kernel: stage_one_kernel(cfg),
                    stride: stage_one_kernel(cfg),
                    pad: 0,
                },
            )?;
            let (w1, b1) = (tape.param("vis.conv1.weight")?, tape.param("vis.conv1.bias")?);
            let h1 = tape.affine(p1, w1, b1)?;
            let h1 = tape.relu(h1);
            let p2 = tape.patches(
                h1,
                PatchGeometry {
                    height: side / stage_one_kernel(cfg),
                    width: side / stage_one_kernel(cfg),
                    channels: stage_one_channels(cfg),
                    kernel: 2,
                    stride: 2,
                    pad: 0,
                },
            )?;
            let (w2, b2) = (tape.param("vis.conv2.weight")?, tape.param("vis.conv2.bias")?);
            let h2 = tape.affine(p2, w2, b2)?;
            Ok(tape.relu(h2))
        }
        VisualEncoderKind::Patch => {
            let p = tape.patches(
                x,
                PatchGeometry {
                    height: side,
                    width: side,
                    channels: 1,
                    kernel: cfg.vis_stride,
                    stride: cfg.vis_stride,
                    pad: 0,
                },
            )?;
            let (w, b) = (tape.param("vis.patch.weight")?, tape.param("vis.patch.bias")?);
            tape.affine(p, w, b)
        }
    }
}

/// Flattened grid features of one image.
pub fn encode_image(
    image: &ImageGrid,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<VisualFeatures> {
    let mut tape = Tape::with_params(params);
    let v = encode_on_tape(&mut tape, image, cfg)?;
    let features = tape.value(v).clone();
    let side = cfg.grid_side();
    Ok(VisualFeatures {
        position_ids: (0..features.nrows()).collect(),
        features,
        grid_dims: (side, side),
    })
}

/// `k` distinct indices out of `0..total`, returned in ascending order.
pub fn sample_indices<R: Rng + ?Sized>(total: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::Invalid(format!(
            "cannot sample {k} of {total} visual features"
        )));
    }
    let mut idx = rand::seq::index::sample(rng, total, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Samples `k` feature rows without replacement. Retained rows keep their
/// original grid index so location embeddings stay truthful.
pub fn sample_visual<R: Rng + ?Sized>(
    features: &VisualFeatures,
    k: usize,
    rng: &mut R,
) -> Result<VisualFeatures> {
    let idx = sample_indices(features.count(), k, rng)?;
    Ok(VisualFeatures {
        features: features.features.select(ndarray::Axis(0), &idx),
        grid_dims: features.grid_dims,
        position_ids: idx.iter().map(|&i| features.position_ids[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::init_params;
    use crate::seed::rng_for;

    fn cfg(encoder: VisualEncoderKind) -> ModelConfig {
        let mut c = RunConfig::default().model;
        c.encoder = encoder;
        c
    }

    #[test]
    fn default_grid_is_four_by_four() {
        for kind in [VisualEncoderKind::Conv, VisualEncoderKind::Patch] {
            let c = cfg(kind);
            let p = init_params(&c, 20, 1, &mut rng_for(1, "init", 0));
            let f = encode_image(&ImageGrid::zeros(32, 32), &p, &c).unwrap();
            assert_eq!(f.features.dim(), (16, 64));
            assert_eq!(f.grid_dims, (4, 4));
        }
    }

    #[test]
    fn large_image_geometry() {
        let mut c = cfg(VisualEncoderKind::Conv);
        c.image_size = 512;
        c.vis_channels = 2048;
        c.vis_stride = 32;
        assert_eq!(c.grid_side(), 16);
        assert_eq!(c.grid_capacity(), 256);
        let shapes = encoder_shapes(&c);
        assert_eq!(shapes[0].1, (256, 1024));
        assert_eq!(shapes[2].1, (4096, 2048));
    }

    #[test]
    fn stride_sets_grid() {
        // output side = input side / total stride
        for (size, stride) in [(32, 8), (32, 4), (64, 16)] {
            for kind in [VisualEncoderKind::Conv, VisualEncoderKind::Patch] {
                let mut c = cfg(kind);
                c.image_size = size;
                c.vis_stride = stride;
                c.vis_channels = 6;
                let p = init_params(&c, 20, 1, &mut rng_for(1, "init", 0));
                let f = encode_image(&ImageGrid::zeros(size, size), &p, &c).unwrap();
                let side = size / stride;
                assert_eq!(f.features.dim(), (side * side, 6));
            }
        }
    }

    #[test]
    fn constant_image_gives_identical_rows() {
        let c = cfg(VisualEncoderKind::Patch);
        let p = init_params(&c, 20, 1, &mut rng_for(2, "init", 0));
        let f = encode_image(&ImageGrid::zeros(32, 32), &p, &c).unwrap();
        for r in 1..f.count() {
            assert_eq!(f.features.row(r), f.features.row(0));
        }
        let c = cfg(VisualEncoderKind::Conv);
        let p = init_params(&c, 20, 1, &mut rng_for(2, "init", 0));
        let f = encode_image(&ImageGrid::zeros(32, 32), &p, &c).unwrap();
        for r in 1..f.count() {
            assert_eq!(f.features.row(r), f.features.row(0));
        }
    }

    #[test]
    fn wrong_image_size_rejected() {
        let c = cfg(VisualEncoderKind::Conv);
        let p = init_params(&c, 20, 1, &mut rng_for(2, "init", 0));
        assert!(encode_image(&ImageGrid::zeros(16, 16), &p, &c).is_err());
    }

    fn synthetic_features(k: usize) -> VisualFeatures {
        VisualFeatures {
            features: Mat::from_shape_fn((k, 3), |(r, c)| (r * 10 + c) as f64),
            grid_dims: (16, 16),
            position_ids: (0..k).collect(),
        }
    }

    #[test]
    fn sampling_contract() {
        let f = synthetic_features(256);
        let s = sample_visual(&f, 180, &mut rng_for(3, "vis", 0)).unwrap();
        assert_eq!(s.count(), 180);
        let mut ids = s.position_ids.clone();
        ids.dedup();
        assert_eq!(ids.len(), 180);
        assert!(ids.iter().all(|&i| i < 256));
        for (row, &pid) in s.position_ids.iter().enumerate() {
            assert_eq!(s.features.row(row), f.features.row(pid));
        }
        let full = sample_visual(&f, 256, &mut rng_for(3, "vis", 1)).unwrap();
        assert_eq!(full, f);
    }

    #[test]
    fn sampling_is_seeded() {
        let f = synthetic_features(4);
        let a = sample_visual(&f, 2, &mut rng_for(9, "vis", 0)).unwrap();
        let b = sample_visual(&f, 2, &mut rng_for(9, "vis", 0)).unwrap();
        assert_eq!(a.position_ids, b.position_ids);
        assert!(sample_visual(&f, 0, &mut rng_for(9, "vis", 0)).is_err());
        assert!(sample_visual(&f, 5, &mut rng_for(9, "vis", 0)).is_err());
    }
}
