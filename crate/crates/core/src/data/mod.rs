//! Synthetic volumetric scans: class labels, set identifiers, acquisition
//! shift profiles, the procedural generator, preprocessing, stratified
//! splitting and on-disk persistence.

mod generate;
mod io;
mod preprocess;
mod split;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{
    derive_seed, generate_corpus, lung_mask, CorpusSpec, ScanGenerator, MIN_INFECTED_FRACTION,
};
pub use io::{list_scan_dirs, load_scan, load_set, save_scan, FORMAT_VERSION, MAGIC};
pub use preprocess::{bilinear_resize, preprocess, FullMasks, Mask, MaskProvider, SyntheticMasks};
pub use split::split_train_validation;

/// Patient-level diagnosis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "COVID-19")]
    Covid19,
    #[serde(rename = "CAP")]
    Cap,
    #[serde(rename = "Normal")]
    Normal,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Covid19, Class::Cap, Class::Normal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Covid19 => "COVID-19",
            Class::Cap => "CAP",
            Class::Normal => "Normal",
        }
    }

    pub fn is_infectious(self) -> bool {
        self != Class::Normal
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which acquisition cohort a scan belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SetId {
    Train,
    Test1,
    Test2,
    Test3,
    Test4,
}

impl SetId {
    pub const ALL: [SetId; 5] = [SetId::Train, SetId::Test1, SetId::Test2, SetId::Test3, SetId::Test4];

    pub fn name(self) -> &'static str {
        match self {
            SetId::Train => "TRAIN",
            SetId::Test1 => "TEST1",
            SetId::Test2 => "TEST2",
            SetId::Test3 => "TEST3",
            SetId::Test4 => "TEST4",
        }
    }

    /// Directory name used in corpus layouts (`train`, `test1`, ...).
    pub fn dir_name(self) -> String {
        self.name().to_ascii_lowercase()
    }
}

impl fmt::Display for SetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SetId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown set id `{s}`")))
    }
}

/// Acquisition knobs that emulate dose, thickness and device differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftProfile {
    pub noise_sigma: f64,
    /// Inclusive `[min, max]` slice count.
    pub slice_count_range: [usize; 2],
    pub intensity_shift: f64,
    pub artifact_rate: f64,
}

impl ShiftProfile {
    pub const TRAIN: ShiftProfile = ShiftProfile {
        noise_sigma: 0.02,
        slice_count_range: [20, 30],
        intensity_shift: 0.0,
        artifact_rate: 0.0,
    };

    /// Low-dose acquisition: same geometry, heavy noise.
    pub const TEST1: ShiftProfile = ShiftProfile {
        noise_sigma: 0.15,
        ..Self::TRAIN
    };

    /// Thick slices from a second center with device artifacts.
    pub const TEST2: ShiftProfile = ShiftProfile {
        noise_sigma: 0.02,
        slice_count_range: [8, 12],
        intensity_shift: 0.1,
        artifact_rate: 0.3,
    };

    pub const TEST3: ShiftProfile = Self::TRAIN;

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.slice_count_range;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if lo < 8 || hi < lo {
            return Err(Error::invalid(format!(
                "slice_count_range [{lo}, {hi}] must satisfy 8 <= min <= max"
            )));
        }
        if !(0.0..=1.0).contains(&self.artifact_rate) || !self.intensity_shift.is_finite() {
            return Err(Error::invalid("artifact_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanMetadata {
    pub scan_id: String,
    pub true_class: Class,
    pub set_id: SetId,
    pub shift_profile: ShiftProfile,
    pub infected_slices: BTreeSet<usize>,
    pub rng_seed: u64,
}

/// A stack of equally sized 2-D slices with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumetricScan {
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    /// Slice-major, row-major pixels.
    pub pixels: Vec<f32>,
    pub meta: ScanMetadata,
}

impl VolumetricScan {
    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.pixels[i * n..(i + 1) * n]
    }

    pub fn infected_fraction(&self) -> f64 {
        self.meta.infected_slices.len() as f64 / self.n_slices as f64
    }

    /// Per-slice infection label from the generator's ground truth.
    pub fn slice_label(&self, i: usize) -> bool {
        self.meta.infected_slices.contains(&i)
    }
}
