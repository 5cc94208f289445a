//! Desk-scale evaluation: SSIM, masked background pixel error and latent
//! MSE diagnostics.
//!
//! The background metric is plain masked pixel MAD and is reported as
//! "bg_mad"; it stands in for a perceptual distance without claiming to
//! be one.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::numerics::Tensor3;
use crate::pipeline::Mask;

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .collect()
}

/// Mean structural similarity over all 8x8 windows at stride 1, computed
/// on the luminance plane at 8-bit scale. Symmetric, 1.0 on identical
/// inputs, and within [-1, 1].
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!(
            "ssim inputs {:?} vs {:?} differ",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let (w, h) = a.dimensions();
    let (w, h) = (w as usize, h as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let la = luminance(a);
    let lb = luminance(b);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for row in 0..=h - SSIM_WINDOW {
        for col in 0..=w - SSIM_WINDOW {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let x = la[(row + dy) * w + col + dx];
                    let y = lb[(row + dy) * w + col + dx];
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Mean absolute pixel difference (on the [0, 1] scale) over all channel
/// samples outside the mask; 0 when the mask covers everything.
pub fn bg_error(a: &RgbImage, b: &RgbImage, mask: &Mask) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!(
            "bg_error inputs {:?} vs {:?} differ",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let (w, h) = a.dimensions();
    if (mask.width(), mask.height()) != (w as usize, h as usize) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match images {w}x{h}",
            mask.width(),
            mask.height()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for row in 0..h as usize {
        for col in 0..w as usize {
            if mask.pixel_at(row, col) {
                continue;
            }
            let pa = a.get_pixel(col as u32, row as u32);
            let pb = b.get_pixel(col as u32, row as u32);
            for ch in 0..3 {
                sum += (pa.0[ch] as f64 - pb.0[ch] as f64).abs() / 255.0;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Mean squared elementwise difference.
pub fn latent_mse(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "latent shapes {:?} vs {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Latent MSE restricted to cells where `cells` is true, 0 over an empty
/// selection. Used as the subject-fidelity diagnostic.
pub fn masked_latent_mse(a: &Tensor3, b: &Tensor3, cells: &[bool]) -> Result<f64> {
    let (h, w, c) = a.shape();
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "latent shapes {:?} vs {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if cells.len() != h * w {
        return Err(Error::Shape(format!(
            "mask has {} cells for a {h}x{w} latent",
            cells.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for row in 0..h {
        for col in 0..w {
            if !cells[row * w + col] {
                continue;
            }
            for ch in 0..c {
                sum += (a.get(row, col, ch) as f64 - b.get(row, col, ch) as f64).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Collected run metrics plus the per-iteration series, rendered as
/// key=value lines and optionally CSV.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub ssim: f64,
    pub bg_mad: f64,
    pub latent_mse: f64,
    pub subject_latent_mse: f64,
    /// (iteration, latent MSE to the previous iteration's result).
    pub series: Vec<(usize, f64)>,
}

impl MetricReport {
    pub fn kv_lines(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("ssim={:.9}\n", self.ssim));
        out.push_str(&format!("bg_mad={:.9}\n", self.bg_mad));
        out.push_str(&format!("latent_mse={:.9e}\n", self.latent_mse));
        out.push_str(&format!(
            "subject_latent_mse={:.9e}\n",
            self.subject_latent_mse
        ));
        for (n, v) in &self.series {
            out.push_str(&format!("iteration_{n}_latent_mse={v:.9e}\n"));
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("iteration,latent_mse_prev\n");
        for (n, v) in &self.series {
            out.push_str(&format!("{n},{v:.9e}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y)))
    }

    #[test]
    fn ssim_self_is_one() {
        let img = gradient_image(16, 16, |x, y| [(x * 16) as u8, (y * 16) as u8, 128]);
        let s = ssim(&img, &img).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = gradient_image(16, 16, |x, y| [(x * 13) as u8, (y * 7) as u8, 90]);
        let b = gradient_image(16, 16, |x, y| [(y * 11) as u8, (x * 5) as u8, 30]);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    // Independent direct evaluation of the windowed formula.
    fn ssim_oracle(a: &RgbImage, b: &RgbImage) -> f64 {
        let (w, h) = a.dimensions();
        let (w, h) = (w as usize, h as usize);
        let lum = |img: &RgbImage, x: usize, y: usize| {
            let p = img.get_pixel(x as u32, y as u32);
            0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64
        };
        let mut vals = Vec::new();
        for row in 0..=h - 8 {
            for col in 0..=w - 8 {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dy in 0..8 {
                    for dx in 0..8 {
                        xs.push(lum(a, col + dx, row + dy));
                        ys.push(lum(b, col + dx, row + dy));
                    }
                }
                let n = 64.0;
                let mu_x: f64 = xs.iter().sum::<f64>() / n;
                let mu_y: f64 = ys.iter().sum::<f64>() / n;
                let var_x: f64 = xs.iter().map(|v| (v - mu_x).powi(2)).sum::<f64>() / n;
                let var_y: f64 = ys.iter().map(|v| (v - mu_y).powi(2)).sum::<f64>() / n;
                let cov: f64 = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| (x - mu_x) * (y - mu_y))
                    .sum::<f64>()
                    / n;
                let c1 = (0.01f64 * 255.0).powi(2);
                let c2 = (0.03f64 * 255.0).powi(2);
                vals.push(
                    ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)),
                );
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_direct_windowed_oracle() {
        let a = gradient_image(16, 16, |x, y| [(x * 15) as u8, (y * 9) as u8, (x + y) as u8]);
        let b = gradient_image(16, 16, |x, y| [(x * 14) as u8, (y * 10) as u8, 60]);
        let got = ssim(&a, &b).unwrap();
        let expect = ssim_oracle(&a, &b);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = gradient_image(4, 4, |_, _| [0, 0, 0]);
        assert_eq!(ssim(&a, &a).unwrap_err().code(), "input");
    }

    #[test]
    fn bg_error_basics() {
        let a = gradient_image(8, 8, |x, y| [(x * 30) as u8, (y * 30) as u8, 10]);
        let mask = Mask::empty(8, 8, 2).unwrap();
        assert_eq!(bg_error(&a, &a, &mask).unwrap(), 0.0);
        // Mask covering everything: empty background sums to 0.
        let full = Mask::full(8, 8, 2).unwrap();
        let b = gradient_image(8, 8, |_, _| [255, 255, 255]);
        assert_eq!(bg_error(&a, &b, &full).unwrap(), 0.0);
    }

    #[test]
    fn bg_error_hand_constructed_pair() {
        // Mask the left half; differ one background pixel by 10 in every
        // channel and one masked pixel arbitrarily.
        let a = gradient_image(8, 4, |_, _| [100, 100, 100]);
        let mut b = a.clone();
        let mut pixel = vec![false; 32];
        for row in 0..4 {
            for col in 0..4 {
                pixel[row * 8 + col] = true;
            }
        }
        let mask = Mask::from_pixels(8, 4, 4, pixel).unwrap();
        b.put_pixel(1, 1, Rgb([255, 0, 30])); // inside mask: ignored
        assert_eq!(bg_error(&a, &b, &mask).unwrap(), 0.0);
        b.put_pixel(6, 2, Rgb([110, 110, 110])); // background: +10 each channel
        let bg_pixels = 16.0; // 8x4 minus the 4x4 masked block
        let expect = (10.0 / 255.0) / bg_pixels;
        let got = bg_error(&a, &b, &mask).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn latent_mse_cases() {
        let a = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(latent_mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0).unwrap();
        assert!((latent_mse(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        // Independent accumulation oracle on a random pair.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f32> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f32> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tx = Tensor3::from_vec(2, 3, 4, x.clone()).unwrap();
        let ty = Tensor3::from_vec(2, 3, 4, y.clone()).unwrap();
        let expect = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / 24.0;
        assert!((latent_mse(&tx, &ty).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn pointwise_metrics_are_permutation_stable() {
        // Relabeling pixels identically in both inputs leaves the
        // pointwise metrics unchanged (ssim is windowed, hence excluded).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let apply = |v: &[f32]| -> Vec<f32> { perm.iter().map(|&i| v[i]).collect() };
        let a = Tensor3::from_vec(4, 4, 1, x.clone()).unwrap();
        let b = Tensor3::from_vec(4, 4, 1, y.clone()).unwrap();
        let ap = Tensor3::from_vec(4, 4, 1, apply(&x)).unwrap();
        let bp = Tensor3::from_vec(4, 4, 1, apply(&y)).unwrap();
        assert!((latent_mse(&a, &b).unwrap() - latent_mse(&ap, &bp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bg_error_closes_with_compositing() {
        use crate::pipeline::composite;
        let source = gradient_image(8, 8, |x, y| [(x * 20) as u8, (y * 20) as u8, 77]);
        let edited = gradient_image(8, 8, |x, y| [200, (x * 5) as u8, (y * 5) as u8]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pixel: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.4)).collect();
        let mask = Mask::from_pixels(8, 8, 2, pixel).unwrap();
        let out = composite(&edited, &source, &mask).unwrap();
        assert_eq!(bg_error(&out, &source, &mask).unwrap(), 0.0);
    }

    #[test]
    fn masked_latent_mse_empty_selection_is_zero() {
        let a = Tensor3::zeros(2, 2, 3);
        let b = a.map(|v| v + 5.0).unwrap();
        assert_eq!(masked_latent_mse(&a, &b, &[false; 4]).unwrap(), 0.0);
        assert!((masked_latent_mse(&a, &b, &[true; 4]).unwrap() - 25.0).abs() < 1e-12);
    }
}
