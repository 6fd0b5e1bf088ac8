use rand::Rng;

use crate::dataset::GrayImage;

use super::AugmentConfig;

/// One random view of `img`, flattened row-major. Pixels shifted in from
/// outside are 0; results are clamped to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(img: &GrayImage, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let flip = cfg.flip && rng.random_bool(0.5);
    let max_dx = (cfg.translate * w as f64).round() as i64;
    let max_dy = (cfg.translate * h as f64).round() as i64;
    let dx = if max_dx > 0 { rng.random_range(-max_dx..=max_dx) } else { 0 };
    let dy = if max_dy > 0 { rng.random_range(-max_dy..=max_dy) } else { 0 };
    let delta = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let sx = x as i64 - dx;
            let sy = y as i64 - dy;
            if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                continue;
            }
            let sx = if flip { w - 1 - sx as usize } else { sx as usize };
            out[y * w + x] = img.get(sx, sy as usize);
        }
    }
    if delta != 0.0 {
        for v in &mut out {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    }
    out
}
