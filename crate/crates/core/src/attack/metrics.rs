//! Full-reference similarity metrics on `C x H x W` (or `H x W`) images with
//! values in `[0, 1]`. Multi-channel scores are the mean over channels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UQI_WINDOW: usize = 8;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
/// Smallest side length still used as an MSSSIM scale.
pub const MSSSIM_MIN_SCALE_SIDE: usize = 8;
const VIF_SCALES: u32 = 4;
const VIF_SIGMA_NSQ: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plane {
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&other.v).map(|(a, b)| f(*a, *b)).collect() }
    }
}

pub(crate) fn planes(a: &Tensor, b: &Tensor) -> Result<Vec<(Plane, Plane)>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { expected: a.shape().to_vec(), actual: b.shape().to_vec() });
    }
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::InvalidShape(format!("expected an image, got shape {:?}", a.shape()))),
    };
    let split = |t: &Tensor, i: usize| Plane { h, w, v: t.values()[i * h * w..(i + 1) * h * w].to_vec() };
    Ok((0..c).map(|i| (split(a, i), split(b, i))).collect())
}

fn per_channel(a: &Tensor, b: &Tensor, f: impl Fn(&Plane, &Plane) -> Result<f64>) -> Result<f64> {
    let ps = planes(a, b)?;
    let mut total = 0.0;
    for (pa, pb) in &ps {
        total += f(pa, pb)?;
    }
    Ok(total / ps.len() as f64)
}

/// Universal quality index averaged over all 8x8 windows (stride 1). A window
/// whose denominator vanishes counts as 1 when both windows are identical and
/// is skipped otherwise; with no usable window the score is 0.
pub fn uqi(a: &Tensor, b: &Tensor) -> Result<f64> {
    per_channel(a, b, uqi_plane)
}

fn uqi_plane(a: &Plane, b: &Plane) -> Result<f64> {
    let n = UQI_WINDOW;
    if a.h < n || a.w < n {
        return Err(Error::InvalidShape(format!("image {}x{} smaller than the {n}x{n} window", a.h, a.w)));
    }
    let count = (n * n) as f64;
    let (mut total, mut used) = (0.0, 0usize);
    for y in 0..=a.h - n {
        for x in 0..=a.w - n {
            let (mut sa, mut sb) = (0.0, 0.0);
            for dy in 0..n {
                for dx in 0..n {
                    sa += a.at(y + dy, x + dx);
                    sb += b.at(y + dy, x + dx);
                }
            }
            let (ma, mb) = (sa / count, sb / count);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            let mut identical = true;
            for dy in 0..n {
                for dx in 0..n {
                    let (pa, pb) = (a.at(y + dy, x + dx), b.at(y + dy, x + dx));
                    identical &= pa == pb;
                    vaa += (pa - ma) * (pa - ma);
                    vbb += (pb - mb) * (pb - mb);
                    vab += (pa - ma) * (pb - mb);
                }
            }
            let den = (vaa + vbb) * (ma * ma + mb * mb);
            if den == 0.0 {
                if identical {
                    total += 1.0;
                    used += 1;
                }
                continue;
            }
            total += 4.0 * vab * ma * mb / den;
            used += 1;
        }
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}

/// Half-sample symmetric index (`d c b a | a b c d | d c b a`), any offset.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

pub(crate) fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "same" filtering with reflected borders.
fn filter(p: &Plane, k: &[f64]) -> Plane {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; p.v.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = k.iter().enumerate().map(|(i, kv)| kv * p.at(y, reflect(x as isize + i as isize - r, p.w))).sum();
        }
    }
    let mut out = vec![0.0; p.v.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, p.h) * p.w + x])
                .sum();
        }
    }
    Plane { h: p.h, w: p.w, v: out }
}

fn avg_pool2(p: &Plane) -> Plane {
    let (h, w) = (p.h / 2, p.w / 2);
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            v.push((p.at(2 * y, 2 * x) + p.at(2 * y, 2 * x + 1) + p.at(2 * y + 1, 2 * x) + p.at(2 * y + 1, 2 * x + 1)) / 4.0);
        }
    }
    Plane { h, w, v }
}

/// Number of MSSSIM scales for an image whose smaller side is `side`: the most
/// (up to five) that keep every scale at least 8 pixels wide.
pub fn msssim_scales(side: usize) -> usize {
    (1..=MSSSIM_WEIGHTS.len()).rev().find(|&s| side >> (s - 1) >= MSSSIM_MIN_SCALE_SIDE).unwrap_or(0)
}

/// Mean luminance and contrast-structure terms of single-scale SSIM.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let ma = filter(a, k);
    let mb = filter(b, k);
    let saa = filter(&a.map2(a, |x, y| x * y), k);
    let sbb = filter(&b.map2(b, |x, y| x * y), k);
    let sab = filter(&a.map2(b, |x, y| x * y), k);
    let (mut l, mut cs) = (0.0, 0.0);
    for i in 0..a.v.len() {
        let (mu_a, mu_b) = (ma.v[i], mb.v[i]);
        let va = saa.v[i] - mu_a * mu_a;
        let vb = sbb.v[i] - mu_b * mu_b;
        let cov = sab.v[i] - mu_a * mu_b;
        l += (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    let n = a.v.len() as f64;
    (l / n, cs / n)
}

/// Multi-scale SSIM with the standard exponents, truncated to the available
/// scales and renormalised to sum to one. Negative terms are clamped to 0.
pub fn msssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    per_channel(a, b, msssim_plane)
}

fn msssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    let scales = msssim_scales(a.h.min(a.w));
    if scales < 2 {
        return Err(Error::InvalidShape(format!("image {}x{} too small for two MSSSIM scales", a.h, a.w)));
    }
    let total: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut score = 1.0;
    for (s, weight) in MSSSIM_WEIGHTS[..scales].iter().enumerate() {
        let (l, cs) = ssim_terms(&a, &b, &k);
        let e = weight / total;
        if s + 1 == scales {
            score *= l.max(0.0).powf(e) * cs.max(0.0).powf(e);
        } else {
            score *= cs.max(0.0).powf(e);
            a = avg_pool2(&a);
            b = avg_pool2(&b);
        }
    }
    Ok(score)
}

/// Pixel-domain visual information fidelity of `distorted` against
/// `reference` over four Gaussian scales (pixels taken in 0..255 units).
/// Not symmetric. Clamped to `[0, 1]`.
pub fn vif(reference: &Tensor, distorted: &Tensor) -> Result<f64> {
    per_channel(reference, distorted, vif_plane)
}

fn vif_plane(reference: &Plane, distorted: &Plane) -> Result<f64> {
    let mut r = Plane { v: reference.v.iter().map(|x| x * 255.0).collect(), ..reference.clone() };
    let mut d = Plane { v: distorted.v.iter().map(|x| x * 255.0).collect(), ..distorted.clone() };
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let n = (1usize << (VIF_SCALES - scale + 1)) + 1;
        let k = gaussian_kernel(n, n as f64 / 5.0);
        if scale > 1 {
            r = subsample(&filter(&r, &k));
            d = subsample(&filter(&d, &k));
        }
        let mu1 = filter(&r, &k);
        let mu2 = filter(&d, &k);
        let s11 = filter(&r.map2(&r, |x, y| x * y), &k);
        let s22 = filter(&d.map2(&d, |x, y| x * y), &k);
        let s12 = filter(&r.map2(&d, |x, y| x * y), &k);
        for i in 0..r.v.len() {
            let mut sigma1_sq = (s11.v[i] - mu1.v[i] * mu1.v[i]).max(0.0);
            let sigma2_sq = (s22.v[i] - mu2.v[i] * mu2.v[i]).max(0.0);
            let sigma12 = s12.v[i] - mu1.v[i] * mu2.v[i];
            let mut g = sigma12 / (sigma1_sq + VIF_EPS);
            let mut sv_sq = sigma2_sq - g * sigma12;
            if sigma1_sq < VIF_EPS {
                g = 0.0;
                sv_sq = sigma2_sq;
                sigma1_sq = 0.0;
            }
            if sigma2_sq < VIF_EPS {
                g = 0.0;
                sv_sq = 0.0;
            }
            if g < 0.0 {
                sv_sq = sigma2_sq;
                g = 0.0;
            }
            sv_sq = sv_sq.max(VIF_EPS);
            num += (1.0 + g * g * sigma1_sq / (sv_sq + VIF_SIGMA_NSQ)).log10();
            den += (1.0 + sigma1_sq / VIF_SIGMA_NSQ).log10();
        }
    }
    if den <= 0.0 {
        return Err(Error::InvalidArgument("reference image has zero variance".into()));
    }
    Ok((num / den).clamp(0.0, 1.0))
}

fn subsample(p: &Plane) -> Plane {
    let (h, w) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            v.push(p.at(2 * y, 2 * x));
        }
    }
    Plane { h, w, v }
}

/// The three scores of a recovered image against its reference.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scores {
    pub uqi: f64,
    pub msssim: f64,
    pub vif: f64,
}

pub fn score_images(reference: &Tensor, recovered: &Tensor) -> Result<Scores> {
    Ok(Scores { uqi: uqi(reference, recovered)?, msssim: msssim(reference, recovered)?, vif: vif(reference, recovered)? })
}
