//! Synthetic two-domain image corpus.
//!
//! Each class owns a binary in-patch pattern, shared by both domains. A
//! template places that pattern on every patch with a signed weight: a few
//! "bright" patches carry it positively and the rest negatively, with weights
//! summing to zero. The mean patch of every template is therefore flat grey
//! and the class is only visible in how pixel values are distributed across
//! patches. Domains differ in which patches are bright, in contrast, and in a
//! global intensity shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{Domain, ImageSample};
use crate::partition::DatasetPool;
use crate::rng::{SeededRng, StreamPurpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    /// Images per class in domain A and domain B.
    pub per_class: [usize; 2],
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Lit pixels in each class pattern.
    pub support: usize,
    /// Patches per template that carry the pattern positively.
    pub bright_patches: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub shift_b: f64,
    pub contrast_b: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            per_class: [210, 90],
            height: 16,
            width: 16,
            patch: 4,
            support: 6,
            bright_patches: 4,
            amplitude: 0.1,
            noise: 0.05,
            shift_b: 0.05,
            contrast_b: 2.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn len(&self) -> usize {
        self.classes * (self.per_class[0] + self.per_class[1])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::invalid("at least one class is required"));
        }
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::invalid(format!(
                "{}x{} images do not tile into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        let p = self.num_patches();
        if self.bright_patches == 0 || self.bright_patches >= p {
            return Err(Error::invalid(format!("bright patches must lie in 1..{p}")));
        }
        if self.support == 0 || self.support > self.patch * self.patch {
            return Err(Error::invalid("pattern support must lie in 1..=p²"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::invalid("amplitude must be finite and non-negative"));
        }
        if !(self.contrast_b > 0.0 && self.contrast_b.is_finite()) || !self.shift_b.is_finite() {
            return Err(Error::invalid("domain-B contrast must be positive and shift finite"));
        }
        Ok(())
    }

    fn domain_params(&self, domain: Domain) -> (f64, f64) {
        match domain {
            Domain::A => (1.0, 0.0),
            Domain::B => (self.contrast_b, self.shift_b),
        }
    }

    /// Binary in-patch pattern of `class`.
    pub fn pattern(&self, class: usize) -> Vec<f64> {
        let dim = self.patch * self.patch;
        let mut rng = SeededRng::for_purpose(self.seed, StreamPurpose::Synth, 0x8000_0000 | class as u32);
        let mut out = vec![0.0; dim];
        for i in rng.sample_indices(dim, self.support) {
            out[i] = 1.0;
        }
        out
    }

    /// Signed per-patch weights of the (class, domain) template; they sum to zero.
    pub fn layout(&self, class: usize, domain: Domain) -> Vec<f64> {
        let p = self.num_patches();
        let index = 0x4000_0000 | ((domain as u32) << 16) | class as u32;
        let mut rng = SeededRng::for_purpose(self.seed, StreamPurpose::Synth, index);
        let bright = self.bright_patches as f64;
        let dark = (p - self.bright_patches) as f64;
        let mut out = vec![-1.0; p];
        for i in rng.sample_indices(p, self.bright_patches) {
            out[i] = dark / bright;
        }
        out
    }

    /// Noise-free template of `(class, domain)`, row-major pixels.
    pub fn template(&self, class: usize, domain: Domain) -> Vec<f64> {
        let pattern = self.pattern(class);
        let layout = self.layout(class, domain);
        let p = self.patch;
        let cols = self.width / p;
        let mut px = vec![0.0; self.height * self.width];
        for (i, weight) in layout.iter().enumerate() {
            let (pr, pc) = (i / cols, i % cols);
            for r in 0..p {
                for c in 0..p {
                    px[(pr * p + r) * self.width + pc * p + c] =
                        (0.5 + self.amplitude * weight * pattern[r * p + c]).clamp(0.0, 1.0);
                }
            }
        }
        px
    }
}

/// The pretraining corpus: domain A first (class by class), then domain B.
/// A sample's id is its index.
pub fn generate_synth(spec: &SynthSpec) -> Result<Vec<ImageSample>> {
    generate_split(spec, 0, spec.per_class)
}

/// Another draw from the same templates with independent noise; `split` picks
/// the noise streams, and split 0 is the pretraining corpus.
pub fn generate_split(spec: &SynthSpec, split: u32, per_class: [usize; 2]) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    if split >= 1 << 11 {
        return Err(Error::invalid("split index out of range"));
    }
    let mut out = Vec::with_capacity(spec.classes * (per_class[0] + per_class[1]));
    for (g, domain) in [Domain::A, Domain::B].into_iter().enumerate() {
        let (contrast, shift) = spec.domain_params(domain);
        for class in 0..spec.classes {
            let template = spec.template(class, domain);
            let index = (split << 20) | ((g as u32) << 16) | class as u32;
            let mut rng = SeededRng::for_purpose(spec.seed, StreamPurpose::Synth, index);
            for _ in 0..per_class[g] {
                let px = template
                    .iter()
                    .map(|t| {
                        let noise = if spec.noise > 0.0 {
                            spec.noise * rng.normal()
                        } else {
                            0.0
                        };
                        (0.5 + contrast * (t - 0.5 + noise) + shift).clamp(0.0, 1.0)
                    })
                    .collect();
                out.push(ImageSample::new(px, spec.height, spec.width, domain, class)?);
            }
        }
    }
    Ok(out)
}

/// Pools of sample ids by domain.
pub fn pools(samples: &[ImageSample]) -> (DatasetPool, DatasetPool) {
    let ids = |d: Domain| {
        samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == d)
            .map(|(i, _)| i as u64)
            .collect::<Vec<_>>()
    };
    (
        DatasetPool::new(Domain::A, ids(Domain::A)).expect("indices are unique"),
        DatasetPool::new(Domain::B, ids(Domain::B)).expect("indices are unique"),
    )
}

/// CSV manifest of a generated corpus: `id,domain,label,mean_intensity`.
pub fn manifest(samples: &[ImageSample]) -> String {
    let mut out = String::from("id,domain,label,mean_intensity\n");
    for (i, s) in samples.iter().enumerate() {
        let mean = s.pixels().iter().sum::<f64>() / s.pixels().len() as f64;
        out.push_str(&format!("{i},{},{},{mean:.6}\n", s.domain.tag(), s.label));
    }
    out
}
