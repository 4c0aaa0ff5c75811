//! Fixtures shared by the benchmarks.

use ffm_core::mae::{self, ImageSample, MaeParams, MaeShape, PatchSet};
use ffm_core::synth::{self, SynthSpec};
use ffm_core::SeededRng;

/// Patchified default corpus and freshly initialized default-size parameters.
pub fn fixture(images: usize) -> (MaeParams, Vec<PatchSet>) {
    let spec = SynthSpec::default();
    let samples: Vec<ImageSample> = synth::generate_synth(&spec).expect("default spec is valid");
    let shape = MaeShape::default();
    let patches = samples
        .iter()
        .take(images)
        .map(|s| mae::patchify(s, shape.patch).expect("images tile"))
        .collect();
    let mut rng = SeededRng::new(0, 1);
    (MaeParams::init(shape, 0.05, &mut rng).expect("default shape"), patches)
}
