use super::{generate::lung_mask, VolumetricScan};
use crate::error::{Error, Result};

/// Binary per-slice mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }
}

/// Source of lung masks. A segmentation model can stand in for the
/// synthetic provider.
pub trait MaskProvider {
    fn mask(&self, scan: &VolumetricScan, slice: usize) -> Result<Mask>;
}

/// Recomputes the generator's lung ellipses at the scan's current geometry.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticMasks;

impl MaskProvider for SyntheticMasks {
    fn mask(&self, scan: &VolumetricScan, slice: usize) -> Result<Mask> {
        Ok(Mask {
            height: scan.height,
            width: scan.width,
            bits: lung_mask(scan.meta.rng_seed, scan.n_slices, slice, scan.height, scan.width),
        })
    }
}

/// Keeps every pixel.
#[derive(Clone, Copy, Debug, Default)]
pub struct FullMasks;

impl MaskProvider for FullMasks {
    fn mask(&self, scan: &VolumetricScan, _slice: usize) -> Result<Mask> {
        Ok(Mask::full(scan.height, scan.width))
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping. Equal
/// sizes reproduce the input exactly.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w, "source length");
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|c| coord(c, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fy) = coord(r, h, out_h);
        for &(c0, c1, fx) in &cols {
            let at = |rr: usize, cc: usize| src[rr * w + cc] as f64;
            let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
            let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Mask, resize to `input_size²`, then min-max normalize each slice to
/// `[0, 1]`. Constant slices become zeros.
pub fn preprocess(
    scan: &VolumetricScan,
    masks: &dyn MaskProvider,
    input_size: usize,
) -> Result<VolumetricScan> {
    if input_size == 0 {
        return Err(Error::invalid("input_size must be positive"));
    }
    let mut pixels = Vec::with_capacity(scan.n_slices * input_size * input_size);
    for z in 0..scan.n_slices {
        let mask = masks.mask(scan, z)?;
        if (mask.height, mask.width) != (scan.height, scan.width) || mask.bits.len() != scan.height * scan.width {
            return Err(Error::dim(format!(
                "mask {}x{} does not match slice {}x{} of {}",
                mask.height, mask.width, scan.height, scan.width, scan.meta.scan_id
            )));
        }
        let masked: Vec<f32> = scan
            .slice(z)
            .iter()
            .zip(&mask.bits)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        let mut resized = bilinear_resize(&masked, scan.height, scan.width, input_size, input_size);
        let (lo, hi) = resized
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in &mut resized {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
        pixels.extend(resized);
    }
    Ok(VolumetricScan {
        n_slices: scan.n_slices,
        height: input_size,
        width: input_size,
        pixels,
        meta: scan.meta.clone(),
    })
}
