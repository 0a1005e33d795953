//! Adaptive brightness adjustment, histogram matching and the paired
//! sub-image samplers.

use serde::Serialize;
use tapegrad::{FilterKernel, Float, Graph, Pad, Var};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Multiplier that keeps the brightest valid pixel away from saturation.
pub const SAFETY_FACTOR: f32 = 0.8;

const BINS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct AbaResult {
    /// Maximum valid brightness.
    pub v: f32,
    /// Amplification coefficient.
    pub gamma: f32,
    /// Initial reflectance.
    pub r0: Frame,
}

/// Luminance at which the empirical CDF first reaches `cdf_threshold`,
/// floored at 1/255.
///
/// The quantile is the `ceil(C·N)`-th smallest luminance; reading it from the
/// sorted samples rather than 256 bin centers keeps 8-bit inputs exact.
pub fn compute_valid_brightness(img: &Frame, cdf_threshold: f32) -> f32 {
    let mut lum = img.luminance().data;
    let n = lum.len();
    let rank = ((cdf_threshold as f64 * n as f64).ceil() as usize).clamp(1, n);
    let (_, v, _) = lum.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    v.max(1.0 / 255.0)
}

pub fn compute_gain(v: f32, cdf_threshold: f32) -> Result<f32> {
    compute_gain_with(v, cdf_threshold, SAFETY_FACTOR)
}

/// [`compute_gain`] with a non-default safety factor.
pub fn compute_gain_with(v: f32, cdf_threshold: f32, safety_factor: f32) -> Result<f32> {
    if !(v > 0.0) {
        return Err(Error::Domain(format!("valid brightness must be positive, got {v}")));
    }
    Ok(cdf_threshold * safety_factor / v)
}

pub fn apply_aba(img: &Frame, cdf_threshold: f32) -> Result<AbaResult> {
    apply_aba_with(img, cdf_threshold, SAFETY_FACTOR)
}

pub fn apply_aba_with(img: &Frame, cdf_threshold: f32, safety_factor: f32) -> Result<AbaResult> {
    let v = compute_valid_brightness(img, cdf_threshold);
    let gamma = compute_gain_with(v, cdf_threshold, safety_factor)?;
    let r0 = img.map(|x| (gamma * x).clamp(0.0, 1.0));
    Ok(AbaResult { v, gamma, r0 })
}

fn bin_of(x: f32) -> usize {
    ((x.clamp(0.0, 1.0) * 255.0).round() as usize).min(BINS - 1)
}

/// 256-bin histogram of one channel.
pub fn channel_histogram(values: &[f32]) -> [u64; BINS] {
    let mut h = [0u64; BINS];
    for &x in values {
        h[bin_of(x)] += 1;
    }
    h
}

/// Remaps each channel of `source` so its empirical distribution follows
/// `reference` (quantile mapping). Resolutions may differ.
///
/// A source value whose tie group spans ranks `[lo, lo + t)` takes the
/// reference order statistic at the group's mid rank, scaled to the
/// reference size. Untied inputs of equal size therefore reproduce the
/// reference values exactly.
pub fn histogram_match(source: &Frame, reference: &Frame) -> Frame {
    let mut out = source.clone();
    for c in 0..3 {
        let mut sorted_ref = reference.channel(c).to_vec();
        sorted_ref.sort_unstable_by(f32::total_cmp);
        let src = source.channel(c);
        let mut order: Vec<usize> = (0..src.len()).collect();
        order.sort_unstable_by(|&a, &b| src[a].total_cmp(&src[b]));
        let dst = out.channel_mut(c);
        let mut lo = 0;
        while lo < order.len() {
            let value = src[order[lo]];
            let hi = lo + order[lo..].iter().take_while(|&&i| src[i] == value).count();
            let mapped = sorted_ref[quantile_index(lo, hi - lo, src.len(), sorted_ref.len())];
            for &i in &order[lo..hi] {
                dst[i] = mapped;
            }
            lo = hi;
        }
    }
    out
}

/// `floor((lo + t/2) · n_ref / n_src)`, computed in integers.
fn quantile_index(lo: usize, ties: usize, n_src: usize, n_ref: usize) -> usize {
    let num = (2 * lo + ties) as u128 * n_ref as u128;
    ((num / (2 * n_src as u128)) as usize).min(n_ref - 1)
}

/// Which of the two paired sub-images to take.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum SubImage {
    /// Mean of the main diagonal of every 2×2 block.
    First,
    /// Mean of the anti-diagonal.
    Second,
}

impl SubImage {
    pub fn kernel<T: Float>(self) -> FilterKernel<T> {
        let h = T::from_f64_lossy(0.5);
        let z = T::zero();
        let weights = match self {
            SubImage::First => vec![h, z, z, h],
            SubImage::Second => vec![z, h, h, z],
        };
        FilterKernel {
            kh: 2,
            kw: 2,
            stride: 2,
            weights,
        }
    }
}

/// Differentiable sub-image sampler for `[C,H,W]` nodes. Odd sides are
/// first extended by one mirrored row or column.
pub fn sub_image<T: Float>(g: &mut Graph<T>, x: Var, which: SubImage) -> Result<Var> {
    let (_, h, w) = g.value(x).chw()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("sub-image sampling needs at least 2x2, got {h}x{w}")));
    }
    let x = if h % 2 == 1 || w % 2 == 1 {
        g.pad_reflect(
            x,
            Pad {
                top: 0,
                bottom: h % 2,
                left: 0,
                right: w % 2,
            },
        )?
    } else {
        x
    };
    Ok(g.filter(x, which.kernel())?)
}

/// Both sub-images of a frame at half resolution (rounded up).
pub fn pair_downsample(img: &Frame) -> Result<(Frame, Frame)> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(img.to_tensor());
    let g1 = sub_image(&mut g, x, SubImage::First)?;
    let g2 = sub_image(&mut g, x, SubImage::Second)?;
    Ok((Frame::from_tensor(g.value(g1))?, Frame::from_tensor(g.value(g2))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, values: &[f32]) -> Frame {
        Frame::from_fn(h, w, |y, x, _| values[y * w + x])
    }

    fn random_frame(h: usize, w: usize, seed: u64, hi: f32) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..hi)).collect();
        Frame::new(h, w, data).unwrap()
    }

    fn sorted_quantile(img: &Frame, c: f32) -> f32 {
        let mut lum = img.luminance().data;
        lum.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = (c as f64 * lum.len() as f64).ceil() as usize;
        lum[k.max(1) - 1].max(1.0 / 255.0)
    }

    #[test]
    fn valid_brightness_examples() {
        assert!((compute_valid_brightness(&Frame::filled(16, 16, 0.5), 1.0) - 0.5).abs() < 1e-6);
        let v = compute_valid_brightness(&gray(2, 2, &[0.4, 0.1, 0.3, 0.2]), 0.75);
        assert!((v - 0.3).abs() < 1e-6);
        assert_eq!(compute_valid_brightness(&Frame::filled(4, 4, 0.0), 0.3), 1.0 / 255.0);
    }

    #[test]
    fn valid_brightness_matches_sort_oracle() {
        for seed in 0..100 {
            let img = random_frame(16, 16, seed, 1.0);
            for c in [0.5, 0.9, 0.99, 1.0] {
                assert_eq!(compute_valid_brightness(&img, c), sorted_quantile(&img, c));
            }
        }
    }

    #[test]
    fn gain_examples() {
        assert!((compute_gain(0.4, 0.99).unwrap() - 1.98).abs() < 1e-6);
        assert!((compute_gain(0.8, 1.0).unwrap() - 1.0).abs() < 1e-6);
        assert!((compute_gain(0.3, 0.75).unwrap() - 2.0).abs() < 1e-6);
        assert!(matches!(compute_gain(0.0, 0.9), Err(Error::Domain(_))));
        assert!(matches!(compute_gain(-0.1, 0.9), Err(Error::Domain(_))));
    }

    #[test]
    fn aba_examples() {
        let a = apply_aba(&Frame::filled(16, 16, 0.5), 1.0).unwrap();
        assert!((a.gamma - 1.6).abs() < 1e-5);
        assert!(a.r0.data().iter().all(|&x| (x - 0.8).abs() < 1e-5));
        let z = apply_aba(&Frame::filled(16, 16, 0.0), 0.99).unwrap();
        assert!(z.r0.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn histogram_match_examples() {
        let x = random_frame(16, 16, 3, 1.0);
        let same = histogram_match(&x, &x);
        assert!(same.max_abs_diff(&x).unwrap() <= 1.0 / 255.0);
        let out = histogram_match(&Frame::filled(16, 16, 0.2), &Frame::filled(8, 8, 0.8));
        assert!(out.data().iter().all(|&v| (v - 0.8).abs() < 1e-6));
    }

    /// Per pixel: count strictly smaller and equal source values, then read
    /// the reference order statistic at the mid rank.
    fn brute_force_match(source: &Frame, reference: &Frame) -> Frame {
        let mut out = source.clone();
        for c in 0..3 {
            let src = source.channel(c);
            let mut rf = reference.channel(c).to_vec();
            rf.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (i, &x) in src.iter().enumerate() {
                let below = src.iter().filter(|&&s| s < x).count() as f64;
                let ties = src.iter().filter(|&&s| s == x).count() as f64;
                let u = (below + ties / 2.0) / src.len() as f64;
                let k = ((u * rf.len() as f64).floor() as usize).min(rf.len() - 1);
                out.channel_mut(c)[i] = rf[k];
            }
        }
        out
    }

    #[test]
    fn histogram_match_agrees_with_brute_force() {
        for seed in 0..5 {
            let s = random_frame(8, 8, seed, 0.4);
            let r = random_frame(8, 8, seed + 100, 1.0);
            assert_eq!(histogram_match(&s, &r), brute_force_match(&s, &r));
            let quantized = s.map(|x| (x * 20.0).round() / 20.0);
            let small = random_frame(5, 7, seed + 200, 1.0);
            assert_eq!(histogram_match(&quantized, &small), brute_force_match(&quantized, &small));
        }
    }

    #[test]
    fn monotone_relabeling_is_undone() {
        let r = random_frame(8, 8, 11, 1.0);
        let s = r.map(|x| 0.05 + 0.5 * x.powf(1.3));
        assert_eq!(histogram_match(&s, &r), r);
    }

    #[test]
    fn matched_histogram_is_close_to_reference() {
        for seed in 0..4 {
            let s = random_frame(64, 64, seed, 0.3);
            let r = random_frame(64, 64, seed + 50, 1.0).map(|x| x * x);
            let out = histogram_match(&s, &r);
            for c in 0..3 {
                let ho = channel_histogram(out.channel(c));
                let hr = channel_histogram(r.channel(c));
                let l1: u64 = ho.iter().zip(&hr).map(|(a, b)| a.abs_diff(*b)).sum();
                assert!(l1 as f64 <= 0.05 * 4096.0, "channel {c}: L1 {l1}");
            }
        }
    }

    #[test]
    fn pair_downsample_examples() {
        let (g1, g2) = pair_downsample(&Frame::filled(6, 4, 0.3)).unwrap();
        assert_eq!(g1.dims(), (3, 2));
        assert!(g1.data().iter().chain(g2.data()).all(|&v| (v - 0.3).abs() < 1e-7));

        let (g1, g2) = pair_downsample(&gray(2, 2, &[0.2, 0.4, 0.6, 0.8])).unwrap();
        assert!((g1.get(0, 0, 0) - 0.5).abs() < 1e-7);
        assert!((g2.get(0, 0, 0) - 0.5).abs() < 1e-7);

        assert!(matches!(pair_downsample(&Frame::filled(1, 4, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn pair_downsample_matches_block_loop() {
        let img = Frame::from_fn(4, 4, |y, x, c| (y * 4 + x) as f32 / 16.0 + c as f32 * 0.01);
        let (g1, g2) = pair_downsample(&img).unwrap();
        for c in 0..3 {
            for by in 0..2 {
                for bx in 0..2 {
                    let at = |dy, dx| img.get(2 * by + dy, 2 * bx + dx, c);
                    assert_eq!(g1.get(by, bx, c), 0.5 * at(0, 0) + 0.5 * at(1, 1));
                    assert_eq!(g2.get(by, bx, c), 0.5 * at(0, 1) + 0.5 * at(1, 0));
                }
            }
        }
    }

    #[test]
    fn odd_sides_are_mirrored() {
        let img = Frame::from_fn(3, 5, |y, x, _| (y * 5 + x) as f32 / 15.0);
        let (g1, g2) = pair_downsample(&img).unwrap();
        assert_eq!(g1.dims(), (2, 3));
        // Bottom-right block mirrors row 1 and column 3.
        assert!((g1.get(1, 2, 0) - 0.5 * (img.get(2, 4, 0) + img.get(1, 3, 0))).abs() < 1e-7);
        assert!((g2.get(1, 2, 0) - 0.5 * (img.get(2, 3, 0) + img.get(1, 4, 0))).abs() < 1e-7);
    }

    #[test]
    fn noise_sub_images_have_equal_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::Normal::new(0.0f32, 0.1).unwrap();
        let data = (0..3 * 64 * 64).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
        let n = Frame::new(64, 64, data).unwrap();
        let (g1, g2) = pair_downsample(&n).unwrap();
        // Each sub-image pixel averages two samples; the difference of means
        // has standard error sigma/sqrt(N) with N the sub-image sample count.
        let se = 0.1 / (g1.data().len() as f64).sqrt();
        assert!((g1.mean() - g2.mean()).abs() < 3.0 * se);
    }

    proptest! {
        #[test]
        fn aba_aligns_scaled_inputs(seed in 0u64..1000, c in 0.5f32..1.0) {
            let x = random_frame(16, 16, seed, 0.5);
            let a = apply_aba(&x, c).unwrap();
            let b = apply_aba(&x.map(|v| 2.0 * v), c).unwrap();
            prop_assert!(a.r0.max_abs_diff(&b.r0).unwrap() <= 1.0 / 255.0);
        }

        #[test]
        fn gain_is_inverse_homogeneous(v in 0.01f32..1.0, k in 0.1f32..10.0, c in 0.1f32..1.0) {
            let lhs = compute_gain(k * v, c).unwrap();
            let rhs = compute_gain(v, c).unwrap() / k;
            prop_assert!((lhs - rhs).abs() <= 1e-5 * rhs.abs());
        }

        #[test]
        fn pair_downsample_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let x = random_frame(6, 8, seed, 1.0);
            let y = random_frame(6, 8, seed + 1, 1.0);
            let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let (m1, m2) = pair_downsample(&mix).unwrap();
            let (x1, x2) = pair_downsample(&x).unwrap();
            let (y1, y2) = pair_downsample(&y).unwrap();
            for (m, (p, q)) in [(m1, (x1, y1)), (m2, (x2, y2))] {
                let expect = p.zip_map(&q, |p, q| a * p + b * q).unwrap();
                prop_assert!(m.max_abs_diff(&expect).unwrap() < 1e-5);
            }
        }
    }
}
