//! Desk-scale masked autoencoder.
//!
//! Every patch goes through the same two-layer encoder (`p² → h → tanh → d`).
//! The decoder (`d → h → tanh → p²`) sees each patch's latent plus a context
//! vector: the mean latent of the visible patches. Masked patches enter the
//! encoder as the learned mask token, so anything image-specific they
//! reconstruct has to travel through that context. Loss is the mean absolute
//! error over masked-patch pixels only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ParamVector;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn tag(self) -> char {
        match self {
            Domain::A => 'A',
            Domain::B => 'B',
        }
    }
}

/// A grayscale image with pixels in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pixels: Vec<f64>,
    height: usize,
    width: usize,
    pub domain: Domain,
    pub label: usize,
}

impl ImageSample {
    pub fn new(pixels: Vec<f64>, height: usize, width: usize, domain: Domain, label: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != height * width {
            return Err(Error::Dimension {
                expected: height * width,
                actual: pixels.len(),
            });
        }
        if pixels.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixels must be finite and within [0, 1]".into()));
        }
        Ok(ImageSample {
            pixels,
            height,
            width,
            domain,
            label,
        })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Non-overlapping `p × p` patches of one image, in row-major patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patch_size: usize,
    count: usize,
    data: Vec<f64>,
}

impl PatchSet {
    /// Builds a patch set from flattened patches laid end to end.
    pub fn from_flat(patch_size: usize, data: Vec<f64>) -> Result<Self> {
        let dim = patch_size * patch_size;
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not form whole {patch_size}x{patch_size} patches",
                data.len()
            )));
        }
        Ok(PatchSet {
            patch_size,
            count: data.len() / dim,
            data,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let dim = self.patch_dim();
        &self.data[i * dim..(i + 1) * dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Reassembles the image the patches came from.
    pub fn unpatchify(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        let p = self.patch_size;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || (height / p) * (width / p) != self.count {
            return Err(Error::invalid(format!(
                "{height}x{width} image does not match {} patches of size {p}",
                self.count
            )));
        }
        let cols = width / p;
        let mut out = vec![0.0; height * width];
        for i in 0..self.count {
            let (pr, pc) = (i / cols, i % cols);
            for r in 0..p {
                for c in 0..p {
                    out[(pr * p + r) * width + pc * p + c] = self.patch(i)[r * p + c];
                }
            }
        }
        Ok(out)
    }
}

/// Splits an image into `p × p` patches.
pub fn patchify(img: &ImageSample, p: usize) -> Result<PatchSet> {
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(Error::invalid(format!(
            "{}x{} image is not divisible by patch size {p}",
            img.height, img.width
        )));
    }
    let (rows, cols) = (img.height / p, img.width / p);
    let mut data = Vec::with_capacity(img.pixels.len());
    for pr in 0..rows {
        for pc in 0..cols {
            for r in 0..p {
                let start = (pr * p + r) * img.width + pc * p;
                data.extend_from_slice(&img.pixels[start..start + p]);
            }
        }
    }
    PatchSet::from_flat(p, data)
}

/// Sorted set of masked patch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    num_patches: usize,
    masked: Vec<usize>,
}

impl MaskSet {
    pub fn new(num_patches: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        let before = masked.len();
        masked.dedup();
        if masked.len() != before {
            return Err(Error::invalid("duplicate masked index"));
        }
        if let Some(&i) = masked.last() {
            if i >= num_patches {
                return Err(Error::invalid(format!(
                    "masked index {i} out of range 0..{num_patches}"
                )));
            }
        }
        Ok(MaskSet { num_patches, masked })
    }

    /// Every patch masked.
    pub fn all(num_patches: usize) -> Self {
        MaskSet {
            num_patches,
            masked: (0..num_patches).collect(),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    fn flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_patches];
        for &i in &self.masked {
            flags[i] = true;
        }
        flags
    }
}

/// Patches kept visible: `round((1 - ratio) * P)`, rounding half away from zero.
pub fn keep_count(num_patches: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * num_patches as f64).round() as usize
}

/// Draws `P - keep_count(P, ratio)` distinct patch indices to mask.
pub fn sample_mask(num_patches: usize, ratio: f64, rng: &mut SeededRng) -> Result<MaskSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if num_patches < 2 {
        return Err(Error::invalid("masking needs at least two patches"));
    }
    let masked = num_patches - keep_count(num_patches, ratio);
    MaskSet::new(num_patches, rng.sample_indices(num_patches, masked))
}

/// Layer sizes of the autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaeShape {
    pub patch: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for MaeShape {
    fn default() -> Self {
        MaeShape {
            patch: 4,
            hidden: 32,
            latent: 16,
        }
    }
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    enc_w1: usize,
    enc_b1: usize,
    enc_w2: usize,
    enc_b2: usize,
    dec_w1: usize,
    dec_b1: usize,
    dec_w2: usize,
    dec_b2: usize,
    mask: usize,
    end: usize,
}

impl MaeShape {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    fn layout(&self) -> Layout {
        let (x, h, d) = (self.patch_dim(), self.hidden, self.latent);
        let enc_w1 = 0;
        let enc_b1 = enc_w1 + h * x;
        let enc_w2 = enc_b1 + h;
        let enc_b2 = enc_w2 + d * h;
        let dec_w1 = enc_b2 + d;
        let dec_b1 = dec_w1 + h * d;
        let dec_w2 = dec_b1 + h;
        let dec_b2 = dec_w2 + x * h;
        let mask = dec_b2 + x;
        let end = mask + x;
        Layout {
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            dec_w1,
            dec_b1,
            dec_w2,
            dec_b2,
            mask,
            end,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().end
    }

    /// Index ranges of the bias blocks, which initialize to zero.
    fn bias_ranges(&self) -> [std::ops::Range<usize>; 4] {
        let l = self.layout();
        [
            l.enc_b1..l.enc_w2,
            l.enc_b2..l.dec_w1,
            l.dec_b1..l.dec_w2,
            l.dec_b2..l.mask,
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::invalid(format!("model sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Autoencoder parameters over a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeParams {
    shape: MaeShape,
    values: ParamVector,
}

struct View<'a> {
    enc_w1: &'a [f64],
    enc_b1: &'a [f64],
    enc_w2: &'a [f64],
    enc_b2: &'a [f64],
    dec_w1: &'a [f64],
    dec_b1: &'a [f64],
    dec_w2: &'a [f64],
    dec_b2: &'a [f64],
    mask: &'a [f64],
}

impl MaeParams {
    pub fn unflatten(shape: MaeShape, values: ParamVector) -> Result<Self> {
        shape.validate()?;
        values.check_len(shape.num_params())?;
        Ok(MaeParams { shape, values })
    }

    pub fn flatten(&self) -> ParamVector {
        self.values.clone()
    }

    pub fn zeros(shape: MaeShape) -> Result<Self> {
        shape.validate()?;
        Ok(MaeParams {
            shape,
            values: ParamVector::zeros(shape.num_params()),
        })
    }

    /// Weights and mask token uniform in `[-scale, scale]`, biases zero.
    pub fn init(shape: MaeShape, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let mut values: Vec<f64> = (0..shape.num_params())
            .map(|_| rng.uniform_range(-scale, scale))
            .collect();
        for range in shape.bias_ranges() {
            values[range].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(MaeParams {
            shape,
            values: ParamVector::new(values)?,
        })
    }

    pub fn shape(&self) -> MaeShape {
        self.shape
    }

    pub fn values(&self) -> &ParamVector {
        &self.values
    }

    fn view(&self) -> View<'_> {
        let l = self.shape.layout();
        let v = self.values.as_slice();
        View {
            enc_w1: &v[l.enc_w1..l.enc_b1],
            enc_b1: &v[l.enc_b1..l.enc_w2],
            enc_w2: &v[l.enc_w2..l.enc_b2],
            enc_b2: &v[l.enc_b2..l.dec_w1],
            dec_w1: &v[l.dec_w1..l.dec_b1],
            dec_b1: &v[l.dec_b1..l.dec_w2],
            dec_w2: &v[l.dec_w2..l.dec_b2],
            dec_b2: &v[l.dec_b2..l.mask],
            mask: &v[l.mask..l.end],
        }
    }

    /// The learned mask token.
    pub fn mask_token(&self) -> &[f64] {
        self.view().mask
    }

    fn check_patches(&self, ps: &PatchSet) -> Result<()> {
        if ps.patch_size != self.shape.patch {
            return Err(Error::Dimension {
                expected: self.shape.patch,
                actual: ps.patch_size,
            });
        }
        Ok(())
    }

    fn check_mask(&self, ps: &PatchSet, m: &MaskSet) -> Result<()> {
        self.check_patches(ps)?;
        if m.num_patches != ps.count {
            return Err(Error::Dimension {
                expected: ps.count,
                actual: m.num_patches,
            });
        }
        Ok(())
    }
}

/// `out = w · x + b` for a row-major `out.len() × x.len()` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        let mut s = b[r];
        for (wi, xi) in row.iter().zip(x) {
            s += wi * xi;
        }
        *o = s;
    }
}

/// `out += wᵀ · dy`.
fn affine_transpose_acc(w: &[f64], dy: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (r, g) in dy.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let row = &w[r * n..(r + 1) * n];
        for (o, wi) in out.iter_mut().zip(row) {
            *o += wi * g;
        }
    }
}

/// `dw += dy ⊗ x`, `db += dy`.
fn outer_acc(dw: &mut [f64], db: &mut [f64], dy: &[f64], x: &[f64]) {
    let n = x.len();
    for (r, g) in dy.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        db[r] += g;
        let row = &mut dw[r * n..(r + 1) * n];
        for (w, xi) in row.iter_mut().zip(x) {
            *w += g * xi;
        }
    }
}

struct EncodeTrace {
    hidden: Vec<f64>,
    latent: Vec<f64>,
}

fn encode_patch(v: &View<'_>, shape: &MaeShape, x: &[f64]) -> EncodeTrace {
    let mut hidden = vec![0.0; shape.hidden];
    affine(v.enc_w1, v.enc_b1, x, &mut hidden);
    hidden.iter_mut().for_each(|a| *a = a.tanh());
    let mut latent = vec![0.0; shape.latent];
    affine(v.enc_w2, v.enc_b2, &hidden, &mut latent);
    EncodeTrace { hidden, latent }
}

struct DecodeTrace {
    hidden: Vec<f64>,
    output: Vec<f64>,
}

fn decode_latent(v: &View<'_>, shape: &MaeShape, u: &[f64]) -> DecodeTrace {
    let mut hidden = vec![0.0; shape.hidden];
    affine(v.dec_w1, v.dec_b1, u, &mut hidden);
    hidden.iter_mut().for_each(|a| *a = a.tanh());
    let mut output = vec![0.0; shape.patch_dim()];
    affine(v.dec_w2, v.dec_b2, &hidden, &mut output);
    DecodeTrace { hidden, output }
}

/// Mean latent over the visible patches; zero when everything is masked.
fn context(latents: &[Vec<f64>], visible: &[usize], dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    if visible.is_empty() {
        return c;
    }
    for &i in visible {
        for (ci, zi) in c.iter_mut().zip(&latents[i]) {
            *ci += zi;
        }
    }
    let n = visible.len() as f64;
    c.iter_mut().for_each(|ci| *ci /= n);
    c
}

/// Reconstructs every patch. Masked patches are encoded from the mask token.
pub fn forward(params: &MaeParams, ps: &PatchSet, m: &MaskSet) -> Result<Vec<Vec<f64>>> {
    params.check_mask(ps, m)?;
    let shape = params.shape;
    let v = params.view();
    let flags = m.flags();
    let latents: Vec<Vec<f64>> = (0..ps.count)
        .map(|i| {
            let x = if flags[i] { v.mask } else { ps.patch(i) };
            encode_patch(&v, &shape, x).latent
        })
        .collect();
    let visible: Vec<usize> = (0..ps.count).filter(|&i| !flags[i]).collect();
    let c = context(&latents, &visible, shape.latent);
    let out = latents
        .iter()
        .map(|z| {
            let u: Vec<f64> = z.iter().zip(&c).map(|(a, b)| a + b).collect();
            decode_latent(&v, &shape, &u).output
        })
        .collect::<Vec<_>>();
    if out.iter().flatten().any(|y| !y.is_finite()) {
        return Err(Error::Domain("non-finite reconstruction".into()));
    }
    Ok(out)
}

/// Mean absolute error over masked-patch pixels.
pub fn masked_l1_loss(recon: &[Vec<f64>], target: &PatchSet, m: &MaskSet) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::invalid("loss over an empty mask"));
    }
    if recon.len() != target.count || m.num_patches != target.count {
        return Err(Error::Dimension {
            expected: target.count,
            actual: recon.len(),
        });
    }
    let dim = target.patch_dim();
    let mut total = 0.0;
    for &j in &m.masked {
        if recon[j].len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: recon[j].len(),
            });
        }
        for (y, t) in recon[j].iter().zip(target.patch(j)) {
            total += (y - t).abs();
        }
    }
    Ok(total / (m.len() * dim) as f64)
}

/// One training example: the target patches and which of them are hidden.
pub type MaskedSample<'a> = (&'a PatchSet, &'a MaskSet);

fn check_batch(params: &MaeParams, batch: &[MaskedSample<'_>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for (ps, m) in batch {
        params.check_mask(ps, m)?;
        if m.is_empty() {
            return Err(Error::invalid("loss over an empty mask"));
        }
    }
    Ok(())
}

/// Mean masked L1 loss over a batch.
pub fn batch_loss(params: &MaeParams, batch: &[MaskedSample<'_>]) -> Result<f64> {
    check_batch(params, batch)?;
    let mut total = 0.0;
    for (ps, m) in batch {
        total += masked_l1_loss(&forward(params, ps, m)?, ps, m)?;
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradient of [`batch_loss`].
pub fn grad(params: &MaeParams, batch: &[MaskedSample<'_>]) -> Result<ParamVector> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

/// Batch loss together with its gradient. The subgradient of `|·|` at zero is zero.
pub fn loss_and_grad(params: &MaeParams, batch: &[MaskedSample<'_>]) -> Result<(f64, ParamVector)> {
    check_batch(params, batch)?;
    let shape = params.shape;
    let layout = shape.layout();
    let v = params.view();
    let (xdim, hdim, ddim) = (shape.patch_dim(), shape.hidden, shape.latent);

    let mut g = vec![0.0; layout.end];
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch.len() as f64;

    for (ps, m) in batch {
        let flags = m.flags();
        let visible: Vec<usize> = (0..ps.count).filter(|&i| !flags[i]).collect();
        let vis_traces: Vec<EncodeTrace> = visible.iter().map(|&i| encode_patch(&v, &shape, ps.patch(i))).collect();
        let masked_trace = encode_patch(&v, &shape, v.mask);

        let mut c = vec![0.0; ddim];
        if !visible.is_empty() {
            for t in &vis_traces {
                for (ci, zi) in c.iter_mut().zip(&t.latent) {
                    *ci += zi;
                }
            }
            let n = visible.len() as f64;
            c.iter_mut().for_each(|ci| *ci /= n);
        }

        // Every masked patch shares the same decoder input, hence the same output.
        let u: Vec<f64> = masked_trace.latent.iter().zip(&c).map(|(a, b)| a + b).collect();
        let dec = decode_latent(&v, &shape, &u);

        let scale = inv_batch / (m.len() * xdim) as f64;
        let mut dy = vec![0.0; xdim];
        let mut sample_loss = 0.0;
        for &j in &m.masked {
            for (q, t) in ps.patch(j).iter().enumerate() {
                let r = dec.output[q] - t;
                sample_loss += r.abs();
                if r > 0.0 {
                    dy[q] += scale;
                } else if r < 0.0 {
                    dy[q] -= scale;
                }
            }
        }
        loss += sample_loss / (m.len() * xdim) as f64;

        // decoder
        let (dw4, rest) = g[layout.dec_w2..layout.mask].split_at_mut(xdim * hdim);
        outer_acc(dw4, rest, &dy, &dec.hidden);
        let mut da3 = vec![0.0; hdim];
        affine_transpose_acc(v.dec_w2, &dy, &mut da3);
        for (a, h) in da3.iter_mut().zip(&dec.hidden) {
            *a *= 1.0 - h * h;
        }
        let (dw3, rest) = g[layout.dec_w1..layout.dec_w2].split_at_mut(hdim * ddim);
        outer_acc(dw3, rest, &da3, &u);
        let mut du = vec![0.0; ddim];
        affine_transpose_acc(v.dec_w1, &da3, &mut du);

        // encoder, mask-token path
        let dx_mask = encoder_backward(&mut g, &layout, &v, &shape, &masked_trace, &du, v.mask);
        for (gm, d) in g[layout.mask..layout.end].iter_mut().zip(&dx_mask) {
            *gm += d;
        }

        // encoder, visible patches through the context mean
        if !visible.is_empty() {
            let n = visible.len() as f64;
            let dz: Vec<f64> = du.iter().map(|d| d / n).collect();
            for (&i, trace) in visible.iter().zip(&vis_traces) {
                encoder_backward(&mut g, &layout, &v, &shape, trace, &dz, ps.patch(i));
            }
        }
    }

    let loss = loss * inv_batch;
    let g = ParamVector::new(g)?;
    if !loss.is_finite() {
        return Err(Error::Domain("non-finite loss".into()));
    }
    Ok((loss, g))
}

/// Accumulates encoder gradients for one patch; returns the input gradient.
fn encoder_backward(
    g: &mut [f64],
    layout: &Layout,
    v: &View<'_>,
    shape: &MaeShape,
    trace: &EncodeTrace,
    dz: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let (xdim, hdim, ddim) = (shape.patch_dim(), shape.hidden, shape.latent);
    let (dw2, db2) = g[layout.enc_w2..layout.dec_w1].split_at_mut(ddim * hdim);
    outer_acc(dw2, db2, dz, &trace.hidden);
    let mut da1 = vec![0.0; hdim];
    affine_transpose_acc(v.enc_w2, dz, &mut da1);
    for (a, h) in da1.iter_mut().zip(&trace.hidden) {
        *a *= 1.0 - h * h;
    }
    let (dw1, db1) = g[layout.enc_w1..layout.enc_w2].split_at_mut(hdim * xdim);
    outer_acc(dw1, db1, &da1, x);
    let mut dx = vec![0.0; xdim];
    affine_transpose_acc(v.enc_w1, &da1, &mut dx);
    dx
}

/// Frozen feature: mean latent over all patches, no masking.
pub fn encode(params: &MaeParams, ps: &PatchSet) -> Result<Vec<f64>> {
    params.check_patches(ps)?;
    if ps.is_empty() {
        return Err(Error::invalid("cannot encode an empty patch set"));
    }
    let shape = params.shape;
    let v = params.view();
    let mut feat = vec![0.0; shape.latent];
    for i in 0..ps.count {
        let z = encode_patch(&v, &shape, ps.patch(i)).latent;
        for (f, zi) in feat.iter_mut().zip(&z) {
            *f += zi;
        }
    }
    let n = ps.count as f64;
    feat.iter_mut().for_each(|f| *f /= n);
    Ok(feat)
}
