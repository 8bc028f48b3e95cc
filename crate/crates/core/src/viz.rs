//! Smoother heatmaps and binary PGM output.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

/// Nearest-neighbour upsampling of a patch-grid map to image resolution.
/// Pixel `(y, x)` takes the value of the patch whose top-left corner is
/// `(y, x)` shifted back by half a kernel, clamped to the grid.
pub fn upsample_nearest(values: &[f64], grid_hw: (usize, usize), kernel: [usize; 2], image_hw: (usize, usize)) -> Vec<f64> {
    let (gh, gw) = grid_hw;
    let (h, w) = image_hw;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let r = y.saturating_sub((kernel[0] - 1) / 2).min(gh - 1);
        for x in 0..w {
            let c = x.saturating_sub((kernel[1] - 1) / 2).min(gw - 1);
            out.push(values[r * gw + c]);
        }
    }
    out
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn max_normalize(values: &mut [f64]) {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
}

/// Row-major position of the first maximum.
pub fn argmax_2d(values: &[f64], width: usize) -> (usize, usize) {
    let i = crate::model::argmax(values);
    (i / width, i % width)
}

/// Heatmaps of one image. All maps are `H * W`, row-major, in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Heatmaps {
    pub image_hw: (usize, usize),
    pub groups: usize,
    pub image: Vec<f64>,
    /// One per smoother, each normalized by its own maximum.
    pub smoothers: Vec<Vec<f64>>,
    /// Per group: pixelwise maximum over the group's smoothers, normalized.
    pub blends: Vec<Vec<f64>>,
    /// Per group: `0.5 * pixel + 0.5 * blend`.
    pub overlays: Vec<Vec<f64>>,
}

/// Computes heatmaps for `image` (`[1, H, W]` or `[H, W]`).
pub fn heatmaps(net: &mut Network, image: &Tensor) -> Result<Heatmaps> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::dim(format!("heatmaps need one single-channel image, got {:?}", image.shape()))),
    };
    let x = image.clone().reshape(&[1, 1, h, w])?;
    let content = net.content_params(&x)?;
    let layer = net
        .lsnn_layer()
        .ok_or_else(|| Error::Config(format!("{} has no smoothers to visualize", net.config().model)))?;
    let spec = layer.spec().clone();
    let grid_hw = layer.out_hw();
    let raw: Vec<Vec<f64>> = layer
        .applied_smoothers(content.as_ref().map(|c| c.data()))?
        .iter()
        .map(|u| upsample_nearest(u, grid_hw, spec.kernel, (h, w)))
        .collect();
    let per_group = spec.num_filters * spec.factor_rank;
    let mut blends = Vec::with_capacity(spec.groups);
    let mut overlays = Vec::with_capacity(spec.groups);
    for g in 0..spec.groups {
        let mut blend = vec![f64::NEG_INFINITY; h * w];
        for u in &raw[g * per_group..(g + 1) * per_group] {
            blend.iter_mut().zip(u).for_each(|(b, &v)| *b = b.max(v));
        }
        max_normalize(&mut blend);
        overlays.push(x.data().iter().zip(&blend).map(|(p, b)| 0.5 * p + 0.5 * b).collect());
        blends.push(blend);
    }
    let smoothers = raw
        .into_iter()
        .map(|mut u| {
            max_normalize(&mut u);
            u
        })
        .collect();
    Ok(Heatmaps {
        image_hw: (h, w),
        groups: spec.groups,
        image: x.into_data(),
        smoothers,
        blends,
        overlays,
    })
}

/// Fraction of the first `count` samples whose blended-heatmap maximum lies
/// inside the target digit's placement box.
pub fn heatmap_hit_rate(net: &mut Network, data: &Dataset, count: usize) -> Result<f64> {
    let n = count.min(data.len());
    if n == 0 {
        return Err(Error::Config("no samples to score".into()));
    }
    let mut hits = 0;
    for sample in &data.samples[..n] {
        let maps = heatmaps(net, &sample.pixels)?;
        let (r, c) = argmax_2d(&maps.blends[0], maps.image_hw.1);
        let target = sample
            .meta
            .target()
            .ok_or_else(|| Error::Config("sample has no target digit".into()))?;
        if target.contains_scaled(r, c, sample.meta.scale) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Binary greyscale PGM with maxval 255; values are clamped to `[0, 1]`.
pub fn write_pgm(w: &mut impl Write, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::dim(format!("{} values for a {width}x{height} image", values.len())));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_pgm(&mut out, width, height, values)?;
    Ok(out)
}

/// Writes `{prefix}_input.pgm`, `{prefix}_smoother{s}.pgm` and the blend
/// and overlay maps (suffixed `_g{g}` when there are several groups).
pub fn save_heatmaps(dir: &Path, prefix: &str, maps: &Heatmaps) -> Result<Vec<PathBuf>> {
    let (h, w) = maps.image_hw;
    let mut written = Vec::new();
    let mut put = |name: String, values: &[f64]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, pgm_bytes(w, h, values)?)?;
        written.push(path);
        Ok(())
    };
    put(format!("{prefix}_input.pgm"), &maps.image)?;
    for (s, u) in maps.smoothers.iter().enumerate() {
        put(format!("{prefix}_smoother{s:02}.pgm"), u)?;
    }
    for g in 0..maps.groups {
        let suffix = if maps.groups > 1 { format!("_g{g}") } else { String::new() };
        put(format!("{prefix}_blend{suffix}.pgm"), &maps.blends[g])?;
        put(format!("{prefix}_overlay{suffix}.pgm"), &maps.overlays[g])?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::model::{ModelKind, NetConfig};
    use crate::rng::Rng;

    #[test]
    fn upsampling_maps_pixels_to_nearest_patch() {
        // 4x4 image, 3x3 kernel -> 2x2 grid
        let up = upsample_nearest(&[1.0, 2.0, 3.0, 4.0], (2, 2), [3, 3], (4, 4));
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up, want);
    }

    #[test]
    fn pgm_layout() {
        let bytes = pgm_bytes(3, 1, &[0.0, 0.5, 2.0]).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
        assert!(pgm_bytes(2, 2, &[0.0]).is_err());
    }

    fn location_net() -> Network {
        Network::new(NetConfig::new(ModelKind::LsnnLocation), &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn blend_peaks_at_255() {
        let mut net = location_net();
        let img = Tensor::from_fn(&[1, 42, 42], |i| (i % 7) as f64 / 7.0).unwrap();
        let maps = heatmaps(&mut net, &img).unwrap();
        assert_eq!(maps.smoothers.len(), 16);
        let pgm = pgm_bytes(42, 42, &maps.blends[0]).unwrap();
        assert_eq!(pgm[pgm.len() - 42 * 42..].iter().max(), Some(&255));
        // centered initial smoothers peak in the middle of the image
        let (r, c) = argmax_2d(&maps.blends[0], 42);
        assert!((19..=22).contains(&r) && (19..=22).contains(&c), "{r},{c}");
    }

    #[test]
    fn flat_smoother_gives_constant_heatmap() {
        let mut net = location_net();
        for p in net.params_mut() {
            if p.name.ends_with(".gaussian") {
                for row in p.value.data_mut().chunks_exact_mut(5) {
                    row[2..].fill(0.0);
                }
            }
        }
        let maps = heatmaps(&mut net, &Tensor::zeros(&[42, 42])).unwrap();
        for map in maps.smoothers.iter().chain(&maps.blends) {
            assert!(map.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn sequence_model_has_three_blends() {
        let mut rng = Rng::new(2);
        let mut net = Network::new(NetConfig::for_task(ModelKind::LsnnContent, crate::data::Task::Sequence), &mut rng).unwrap();
        let img = Tensor::zeros(&[1, 42, 42]);
        net.forward(&img.clone().reshape(&[1, 1, 42, 42]).unwrap(), Mode::Eval, &mut rng).unwrap();
        let maps = heatmaps(&mut net, &img).unwrap();
        assert_eq!((maps.blends.len(), maps.overlays.len(), maps.smoothers.len()), (3, 3, 48));
        let dir = tempfile::tempdir().unwrap();
        let files = save_heatmaps(dir.path(), "s0", &maps).unwrap();
        assert_eq!(files.len(), 1 + 48 + 6);
        assert!(dir.path().join("s0_overlay_g2.pgm").is_file());
    }

    #[test]
    fn baseline_models_are_rejected() {
        let mut net = Network::new(NetConfig::new(ModelKind::Cnn), &mut Rng::new(3)).unwrap();
        assert!(matches!(heatmaps(&mut net, &Tensor::zeros(&[42, 42])), Err(Error::Config(_))));
    }
}
