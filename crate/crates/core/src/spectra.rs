//! Frequency diagnostics for code pyramids.
//!
//! Each scale's code map is upsampled to the final grid and transformed
//! with a 2-D DFT. Early scales of a natural image concentrate their
//! energy near DC; the final residual scale does not. The dump command
//! writes the upsampled maps and their log-magnitude spectra as images;
//! the energy profile backs the low-frequency property check.

use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::ppm::write_ppm;
use crate::tensor::{resize_plain, Tensor};
use crate::tokenizer::{MultiScaleCode, ScaleSchedule};

/// |F(u,v)| of a real h×w map.
pub fn dft2_magnitude(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(map.len(), h * w);
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut grid: Vec<Complex<f64>> = map.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in grid.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    grid.iter().map(|c| c.norm()).collect()
}

/// Fraction of spectral energy (Σ|F|²) whose normalized frequency radius
/// lies within `radius_fraction` of the maximum radius. DC counts as the
/// lowest frequency.
pub fn low_frequency_energy_fraction(
    magnitude: &[f64],
    h: usize,
    w: usize,
    radius_fraction: f64,
) -> f64 {
    let r_max = (0.5f64.powi(2) + 0.5f64.powi(2)).sqrt();
    let threshold = radius_fraction * r_max;
    let mut low = 0.0;
    let mut total = 0.0;
    for u in 0..h {
        for v in 0..w {
            let fu = u.min(h - u) as f64 / h as f64;
            let fv = v.min(w - v) as f64 / w as f64;
            let e = magnitude[u * w + v].powi(2);
            total += e;
            if fu.hypot(fv) <= threshold {
                low += e;
            }
        }
    }
    if total == 0.0 {
        1.0
    } else {
        low / total
    }
}

/// Per-scale low-frequency (lowest-quartile radius) energy fractions of a
/// pyramid, each scale upsampled to the final grid, energies summed over
/// code channels.
pub fn scale_low_freq_fractions(
    codes: &MultiScaleCode,
    schedule: &ScaleSchedule,
) -> Result<Vec<f64>> {
    let (fh, fw) = schedule.final_size();
    let mut out = Vec::with_capacity(codes.scales.len());
    for map in &codes.scales {
        let up = resize_plain(map, (fh, fw))?;
        let plane = fh * fw;
        let mut low = 0.0;
        let mut total = 0.0;
        for c in 0..codes.dim {
            let mag = dft2_magnitude(&up.data()[c * plane..(c + 1) * plane], fh, fw);
            for u in 0..fh {
                for v in 0..fw {
                    let fu = u.min(fh - u) as f64 / fh as f64;
                    let fv = v.min(fw - v) as f64 / fw as f64;
                    let e = mag[u * fw + v].powi(2);
                    total += e;
                    if fu.hypot(fv) <= 0.25 * (0.5f64.powi(2) + 0.5f64.powi(2)).sqrt() {
                        low += e;
                    }
                }
            }
        }
        out.push(if total == 0.0 { 1.0 } else { low / total });
    }
    Ok(out)
}

fn gray_ppm(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut data = vec![0.0; 3 * values.len()];
    for (i, &v) in values.iter().enumerate() {
        let g = (v - lo) / span;
        data[i] = g;
        data[values.len() + i] = g;
        data[2 * values.len() + i] = g;
    }
    write_ppm(path, &Tensor::new(vec![3, h, w], data))
}

/// Center the DC bin for display.
fn fft_shift(mag: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; mag.len()];
    for u in 0..h {
        for v in 0..w {
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = mag[u * w + v];
        }
    }
    out
}

/// Write, per scale, the channel-mean upsampled code map and its
/// log-magnitude spectrum (DC centered) as grayscale images. Returns the
/// written paths.
pub fn dump_scale_spectra(codes: &MultiScaleCode, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let schedule = ScaleSchedule::from_sizes(codes.sizes())?;
    let (fh, fw) = schedule.final_size();
    let plane = fh * fw;
    let mut written = Vec::new();
    for (k0, map) in codes.scales.iter().enumerate() {
        let up = resize_plain(map, (fh, fw))?;
        let mut mean = vec![0.0; plane];
        for c in 0..codes.dim {
            for (m, &v) in mean.iter_mut().zip(&up.data()[c * plane..(c + 1) * plane]) {
                *m += v / codes.dim as f64;
            }
        }
        let map_path = out_dir.join(format!("scale_{:02}_map.ppm", k0 + 1));
        gray_ppm(&mean, fh, fw, &map_path)?;
        written.push(map_path);

        let mag = dft2_magnitude(&mean, fh, fw);
        let log_mag: Vec<f64> = mag.iter().map(|&v| v.ln_1p()).collect();
        let shifted = fft_shift(&log_mag, fh, fw);
        let spec_path = out_dir.join(format!("scale_{:02}_spectrum.ppm", k0 + 1));
        gray_ppm(&shifted, fh, fw, &spec_path)?;
        written.push(spec_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_energy_sits_at_dc() {
        let mag = dft2_magnitude(&vec![0.7; 64], 8, 8);
        // DC bin holds everything
        assert!((mag[0] - 0.7 * 64.0).abs() < 1e-9);
        let rest: f64 = mag[1..].iter().map(|v| v * v).sum();
        assert!(rest < 1e-18);
        assert!((low_frequency_energy_fraction(&mag, 8, 8, 0.25) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_energy_sits_at_nyquist() {
        let mut map = vec![0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                map[y * 8 + x] = f64::from((x + y) % 2 == 0); // alternating
            }
        }
        let mag = dft2_magnitude(&map, 8, 8);
        // remove DC (mean 0.5), the rest concentrates at (4,4)
        let frac = low_frequency_energy_fraction(&mag, 8, 8, 0.25);
        let nyquist = mag[4 * 8 + 4].powi(2);
        let total: f64 = mag.iter().map(|v| v * v).sum();
        assert!(nyquist / (total - mag[0].powi(2)) > 0.999);
        // DC still counts low, so the low fraction equals the DC share
        assert!((frac - mag[0].powi(2) / total).abs() < 1e-12);
    }

    #[test]
    fn dft_matches_naive_on_random_map() {
        use crate::rng::seeded;
        let mut rng = seeded(6);
        let map = Tensor::randn(vec![1, 5, 7], 1.0, &mut rng);
        let mag = dft2_magnitude(map.data(), 5, 7);
        // O(n²) reference transform
        for u in 0..5 {
            for v in 0..7 {
                let mut re = 0.0;
                let mut im = 0.0;
                for y in 0..5 {
                    for x in 0..7 {
                        let angle = -2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 / 5.0 + v as f64 * x as f64 / 7.0);
                        re += map.data()[y * 7 + x] * angle.cos();
                        im += map.data()[y * 7 + x] * angle.sin();
                    }
                }
                let expect = (re * re + im * im).sqrt();
                assert!((mag[u * 7 + v] - expect).abs() < 1e-9);
            }
        }
    }
}
