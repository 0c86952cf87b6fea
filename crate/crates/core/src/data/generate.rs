use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Class, ScanMetadata, SetId, ShiftProfile, VolumetricScan};
use crate::error::{Error, Result};

/// Smallest share of infected slices in any COVID-19 or CAP scan.
pub const MIN_INFECTED_FRACTION: f64 = 0.07;

const BODY: f64 = 0.7;
const LUNG: f64 = 0.2;
const VESSEL_CONTRAST: f64 = 0.15;
const GEOMETRY_STREAM: u64 = 0x6c75_6e67;

/// SplitMix64 finalizer over a base seed and a path of integers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Two lung ellipses in normalized image coordinates.
struct LungGeometry {
    centers: [(f64, f64); 2],
    axes: [(f64, f64); 2],
}

impl LungGeometry {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[GEOMETRY_STREAM]));
        let mut lung = |cx: f64| {
            let c = (cx + rng.gen_range(-0.015..0.015), 0.5 + rng.gen_range(-0.02..0.02));
            let a = (rng.gen_range(0.13..0.16), rng.gen_range(0.25..0.3));
            (c, a)
        };
        let (c0, a0) = lung(0.31);
        let (c1, a1) = lung(0.69);
        LungGeometry {
            centers: [c0, c1],
            axes: [a0, a1],
        }
    }

    /// Lungs are largest mid-volume and taper towards the ends.
    fn scale(slice: usize, n_slices: usize) -> f64 {
        0.7 + 0.3 * (PI * (slice as f64 + 0.5) / n_slices as f64).sin()
    }

    /// Normalized elliptical radius of point `(x, y)` in lung `k`.
    fn radius(&self, k: usize, x: f64, y: f64, scale: f64) -> f64 {
        let (cx, cy) = self.centers[k];
        let (ax, ay) = self.axes[k];
        (((x - cx) / (ax * scale)).powi(2) + ((y - cy) / (ay * scale)).powi(2)).sqrt()
    }

    fn point(&self, k: usize, rho: f64, theta: f64, scale: f64) -> (f64, f64) {
        let (cx, cy) = self.centers[k];
        let (ax, ay) = self.axes[k];
        (
            cx + rho * scale * ax * theta.cos(),
            cy + rho * scale * ay * theta.sin(),
        )
    }

    fn contains(&self, x: f64, y: f64, scale: f64) -> bool {
        (0..2).any(|k| self.radius(k, x, y, scale) <= 1.0)
    }
}

/// Lung mask of slice `slice` for the scan generated from `seed`, rasterized
/// at `height × width`.
pub fn lung_mask(seed: u64, n_slices: usize, slice: usize, height: usize, width: usize) -> Vec<bool> {
    let geo = LungGeometry::from_seed(seed);
    let scale = LungGeometry::scale(slice, n_slices);
    let mut mask = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = (r as f64 + 0.5) / height as f64;
        for c in 0..width {
            let x = (c as f64 + 0.5) / width as f64;
            mask.push(geo.contains(x, y, scale));
        }
    }
    mask
}

/// A lesion that persists across a contiguous band of slices.
struct Lesion {
    lung: usize,
    rho: f64,
    theta: f64,
    radius: f64,
    contrast: f64,
}

/// Procedural scan generator at a fixed square geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGenerator {
    pub size: usize,
}

impl Default for ScanGenerator {
    fn default() -> Self {
        ScanGenerator { size: 64 }
    }
}

impl ScanGenerator {
    /// Deterministic in `(class, set_id, profile, seed)`.
    pub fn generate_scan(
        &self,
        class: Class,
        set_id: SetId,
        profile: &ShiftProfile,
        seed: u64,
        scan_id: impl Into<String>,
    ) -> Result<VolumetricScan> {
        profile.validate()?;
        if self.size < 16 {
            return Err(Error::invalid("generator size must be at least 16"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [lo, hi] = profile.slice_count_range;
        let n = rng.gen_range(lo..=hi);
        let geo = LungGeometry::from_seed(seed);

        let (band, lesions) = match class {
            Class::Normal => (0..0, Vec::new()),
            Class::Covid19 => {
                let band = band(&mut rng, n, 0.25..0.6);
                let count = rng.gen_range(3..=6);
                let lesions = (0..count)
                    .map(|i| Lesion {
                        // alternate lungs so both are involved
                        lung: i % 2,
                        rho: rng.gen_range(0.55..0.7),
                        theta: rng.gen_range(0.0..2.0 * PI),
                        radius: rng.gen_range(2.2..3.5) / 64.0,
                        contrast: rng.gen_range(0.45..0.6),
                    })
                    .collect();
                (band, lesions)
            }
            Class::Cap => {
                let band = band(&mut rng, n, 0.15..0.4);
                let lesion = Lesion {
                    lung: rng.gen_range(0..2),
                    rho: rng.gen_range(0.0..0.35),
                    theta: rng.gen_range(0.0..2.0 * PI),
                    radius: rng.gen_range(6.0..8.5) / 64.0,
                    contrast: rng.gen_range(0.5..0.65),
                };
                (band, vec![lesion])
            }
        };

        let size = self.size;
        let px = 1.0 / size as f64;
        let noise = Normal::new(0.0, profile.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut pixels = Vec::with_capacity(n * size * size);
        for z in 0..n {
            let scale = LungGeometry::scale(z, n);
            let mut img = vec![0.0f64; size * size];
            let vessels: Vec<(usize, f64, f64)> = (0..rng.gen_range(12..=20))
                .map(|_| (rng.gen_range(0..2), rng.gen_range(0.0..0.9), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            let vessel_pts: Vec<(f64, f64)> = vessels
                .iter()
                .map(|&(k, rho, th)| geo.point(k, rho, th, scale))
                .collect();
            let lesion_pts: Vec<((f64, f64), f64, f64)> = if band.contains(&z) {
                let t = (z - band.start) as f64 + 0.5;
                let profile = 0.7 + 0.3 * (PI * t / band.len() as f64).sin();
                lesions
                    .iter()
                    .map(|l| {
                        (
                            geo.point(l.lung, l.rho, l.theta, scale),
                            l.radius * profile,
                            l.contrast,
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            };
            for r in 0..size {
                let y = (r as f64 + 0.5) * px;
                for c in 0..size {
                    let x = (c as f64 + 0.5) * px;
                    let body = ((x - 0.5) / 0.46).powi(2) + ((y - 0.5) / 0.4).powi(2) <= 1.0;
                    let v = if geo.contains(x, y, scale) {
                        let mut v = LUNG;
                        for &(vx, vy) in &vessel_pts {
                            v += VESSEL_CONTRAST * disk(x, y, vx, vy, 0.8 * px, px);
                        }
                        for &((lx, ly), radius, contrast) in &lesion_pts {
                            v += contrast * disk(x, y, lx, ly, radius, px);
                        }
                        v
                    } else if body {
                        BODY
                    } else {
                        0.0
                    };
                    img[r * size + c] = v;
                }
            }
            if rng.gen::<f64>() < profile.artifact_rate {
                for _ in 0..rng.gen_range(1..=2) {
                    let (ox, oy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
                    let th = rng.gen_range(0.0..PI);
                    let strength = rng.gen_range(0.3..0.5);
                    let (dx, dy) = (th.cos(), th.sin());
                    for r in 0..size {
                        let y = (r as f64 + 0.5) * px;
                        for c in 0..size {
                            let x = (c as f64 + 0.5) * px;
                            let dist = ((x - ox) * dy - (y - oy) * dx).abs();
                            let w = (1.0 - dist / (0.9 * px)).max(0.0);
                            img[r * size + c] += strength * w;
                        }
                    }
                }
            }
            for v in &mut img {
                *v += profile.intensity_shift;
                if profile.noise_sigma > 0.0 {
                    *v += noise.sample(&mut rng);
                }
            }
            pixels.extend(img.into_iter().map(|v| v as f32));
        }
        Ok(VolumetricScan {
            n_slices: n,
            height: size,
            width: size,
            pixels,
            meta: ScanMetadata {
                scan_id: scan_id.into(),
                true_class: class,
                set_id,
                shift_profile: *profile,
                infected_slices: band.collect::<BTreeSet<_>>(),
                rng_seed: seed,
            },
        })
    }
}

/// Anti-aliased disk coverage in `[0, 1]`.
fn disk(x: f64, y: f64, cx: f64, cy: f64, radius: f64, px: f64) -> f64 {
    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    ((radius - d) / px + 0.5).clamp(0.0, 1.0)
}

fn band(rng: &mut ChaCha8Rng, n: usize, fraction: std::ops::Range<f64>) -> std::ops::Range<usize> {
    let floor = (MIN_INFECTED_FRACTION * n as f64).ceil() as usize;
    let len = ((rng.gen_range(fraction) * n as f64).round() as usize)
        .max(floor)
        .clamp(1, n);
    let start = rng.gen_range(0..=n - len);
    start..start + len
}

/// Per-set class counts (COVID-19, CAP, Normal) and acquisition profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub counts: BTreeMap<SetId, [usize; 3]>,
    /// Profiles for TRAIN and TEST1-3; TEST4 scans draw TEST1 or TEST2 per scan.
    pub profiles: BTreeMap<SetId, ShiftProfile>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            counts: BTreeMap::from([
                (SetId::Train, [50, 18, 22]),
                (SetId::Test1, [15, 0, 15]),
                (SetId::Test2, [10, 10, 10]),
                (SetId::Test3, [10, 10, 10]),
                (SetId::Test4, [16, 8, 16]),
            ]),
            profiles: BTreeMap::from([
                (SetId::Train, ShiftProfile::TRAIN),
                (SetId::Test1, ShiftProfile::TEST1),
                (SetId::Test2, ShiftProfile::TEST2),
                (SetId::Test3, ShiftProfile::TEST3),
            ]),
        }
    }
}

impl CorpusSpec {
    pub fn empty() -> Self {
        CorpusSpec {
            counts: BTreeMap::new(),
            ..Self::default()
        }
    }

    pub fn profile(&self, set: SetId) -> ShiftProfile {
        let fallback = match set {
            SetId::Train | SetId::Test4 => ShiftProfile::TRAIN,
            SetId::Test1 => ShiftProfile::TEST1,
            SetId::Test2 => ShiftProfile::TEST2,
            SetId::Test3 => ShiftProfile::TEST3,
        };
        self.profiles.get(&set).copied().unwrap_or(fallback)
    }
}

/// Generates every scan in `spec`. Scan ids are `<set>-<nnnn>` and unique.
pub fn generate_corpus(
    spec: &CorpusSpec,
    base_seed: u64,
    generator: &ScanGenerator,
) -> Result<Vec<VolumetricScan>> {
    let mut scans = Vec::new();
    for (&set, counts) in &spec.counts {
        let mut k = 0;
        for class in Class::ALL {
            for i in 0..counts[class.index()] {
                let seed = derive_seed(base_seed, &[set as u64, class.index() as u64, i as u64]);
                let profile = if set == SetId::Test4 {
                    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
                    if pick.gen::<bool>() {
                        spec.profile(SetId::Test1)
                    } else {
                        spec.profile(SetId::Test2)
                    }
                } else {
                    spec.profile(set)
                };
                let id = format!("{}-{k:04}", set.dir_name());
                scans.push(generator.generate_scan(class, set, &profile, seed, id)?);
                k += 1;
            }
        }
    }
    Ok(scans)
}
