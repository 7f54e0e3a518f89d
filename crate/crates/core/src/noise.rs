//! Seeded randomness and the unit-scale noise distributions.
//!
//! [`Rng`] wraps ChaCha8 so sample sequences are identical on every
//! platform for a given seed. Independent substreams are derived from a
//! parent seed and an integer id via ChaCha's stream counter, which keeps
//! Monte Carlo trials reproducible regardless of execution order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_positive, check_unit_open, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Laplace with scale 1.
    Laplace,
    /// Standard normal.
    Gaussian,
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent generator for substream `id`. Depends only on
    /// this generator's seed, not on how many draws it has made.
    pub fn substream(&self, id: u64) -> Rng {
        let mut keyed = ChaCha8Rng::seed_from_u64(self.seed);
        keyed.set_stream(id);
        Rng::new(keyed.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in the open interval (0, 1); never returns 0 or 1.
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// One draw from the unit-scale distribution of `kind`.
    pub fn unit_noise(&mut self, kind: NoiseKind) -> f64 {
        let u = self.uniform_open();
        match kind {
            NoiseKind::Laplace => laplace_inverse(u),
            NoiseKind::Gaussian => normal_quantile(u),
        }
    }
}

#[inline]
fn laplace_inverse(u: f64) -> f64 {
    let centered = u - 0.5;
    // -sign(u - 1/2) * ln(1 - 2|u - 1/2|)
    let magnitude = -(-2.0 * centered.abs()).ln_1p();
    if centered < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Draws from Laplace(0, `scale`) by inverse-CDF transform of one uniform.
pub fn sample_laplace(rng: &mut Rng, scale: f64) -> Result<f64> {
    check_positive("scale", scale)?;
    Ok(scale * laplace_inverse(rng.uniform_open()))
}

/// Laplace(0, `scale`) quantile at the given uniform `u`; the deterministic
/// half of [`sample_laplace`].
pub fn laplace_from_uniform(u: f64, scale: f64) -> Result<f64> {
    check_positive("scale", scale)?;
    check_unit_open("u", u)?;
    Ok(scale * laplace_inverse(u))
}

/// Quantile function of the unit-scale distribution.
pub fn inverse_cdf(kind: NoiseKind, u: f64) -> Result<f64> {
    check_unit_open("u", u)?;
    Ok(match kind {
        NoiseKind::Laplace => laplace_inverse(u),
        NoiseKind::Gaussian => normal_quantile(u),
    })
}

/// CDF of the unit-scale distribution.
pub fn cdf(kind: NoiseKind, x: f64) -> f64 {
    match kind {
        NoiseKind::Laplace => {
            if x < 0.0 {
                0.5 * x.exp()
            } else {
                1.0 - 0.5 * (-x).exp()
            }
        }
        NoiseKind::Gaussian => 0.5 * erfc(-x / std::f64::consts::SQRT_2),
    }
}

/// Exponential-model quantile with mass `p` above it: `-ln(p) / gamma`.
pub fn exp_quantile(p: f64, gamma: f64) -> Result<f64> {
    check_unit_open("p", p)?;
    check_positive("gamma", gamma)?;
    Ok(-p.ln() / gamma)
}

/// Standard normal quantile, Wichura's AS241 (PPND16).
///
/// Relative accuracy about 1e-16 over (0, 1); uses only `ln` and `sqrt`.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_5,
        133.141_667_891_784_38,
        1_971.590_950_306_551_3,
        13_731.693_765_509_46,
        45_921.953_931_549_87,
        67_265.770_927_008_7,
        33_430.575_583_588_13,
        2_509.080_928_730_122_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_91,
        687.187_007_492_057_9,
        5_394.196_021_424_751,
        21_213.794_301_586_597,
        39_307.895_800_092_71,
        28_729.085_735_721_943,
        5_226.495_278_852_545,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_5,
        4.630_337_846_156_546,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        0.241_780_725_177_450_6,
        0.022_723_844_989_269_184,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        0.689_767_334_985_1,
        0.148_103_976_427_480_08,
        0.015_198_666_563_616_457,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_9e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        0.296_560_571_828_504_9,
        0.026_532_189_526_576_124,
        0.001_242_660_947_388_078_4,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_888,
        0.136_929_880_922_735_8,
        0.014_875_361_290_850_615,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_7e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

/// Complementary error function (Numerical Recipes `erfcc`, |rel err| < 1.2e-7).
/// Only used for diagnostics (goodness-of-fit statistics), never for release.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn laplace_inverse_cdf_examples() {
        assert_eq!(laplace_from_uniform(0.5, 7.0).unwrap(), 0.0);
        let x = laplace_from_uniform(0.9, 1.0).unwrap();
        assert!((x - (-(0.2f64).ln())).abs() < 1e-12, "{x}");
        assert!((x - 1.6094).abs() < 1e-4);
        assert_eq!(inverse_cdf(NoiseKind::Laplace, 0.5).unwrap(), 0.0);
        let g = inverse_cdf(NoiseKind::Laplace, 0.996).unwrap();
        assert!((g - (-(0.008f64).ln())).abs() < 1e-12 && (g - 4.8283).abs() < 1e-4);
        let g = inverse_cdf(NoiseKind::Laplace, 0.98).unwrap();
        assert!((g - 3.2189).abs() < 1e-4);
    }

    #[test]
    fn domain_errors() {
        let mut rng = Rng::new(1);
        assert!(sample_laplace(&mut rng, 0.0).is_err());
        assert!(sample_laplace(&mut rng, -1.0).is_err());
        assert!(inverse_cdf(NoiseKind::Gaussian, 0.0).is_err());
        assert!(inverse_cdf(NoiseKind::Laplace, 1.0).is_err());
        assert!(exp_quantile(0.0, 1.0).is_err());
        assert!(exp_quantile(0.5, 0.0).is_err());
    }

    #[test]
    fn normal_quantile_reference_values() {
        // Values from scipy.stats.norm.ppf.
        let cases = [
            (0.975, 1.959_963_984_540_054),
            (0.5, 0.0),
            (0.841_344_746_068_542_9, 1.0),
            (1e-10, -6.361_340_902_404_056),
            (0.02, -2.053_748_910_631_823),
        ];
        for (p, z) in cases {
            assert!((normal_quantile(p) - z).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn exp_quantile_examples() {
        let x = exp_quantile(0.005, 0.05).unwrap();
        assert!((x - 105.966).abs() < 1e-3, "{x}");
        // gamma chosen from a quantile round-trips
        let (p, xp) = (0.005, 150.0);
        let gamma = -f64::ln(p) / xp;
        assert!((exp_quantile(p, gamma).unwrap() - xp).abs() < 1e-12);
    }

    #[test]
    fn laplace_mean_is_zero() {
        let mut rng = Rng::new(0xDEC0DE);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_laplace(&mut rng, 3.0).unwrap()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
    }

    #[test]
    fn laplace_kolmogorov_smirnov() {
        let mut rng = Rng::new(77);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample_laplace(&mut rng, 1.0).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(NoiseKind::Laplace, x);
                (f - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS = {ks}");
    }

    #[test]
    fn seeded_sequences_are_reproducible() {
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut s1 = a.substream(3);
        let _ = a.next_u64();
        let mut s2 = a.substream(3);
        assert_eq!(s1.next_u64(), s2.next_u64());
        assert_ne!(a.substream(3).next_u64(), a.substream(4).next_u64());
    }

    proptest! {
        #[test]
        fn inverse_cdf_is_odd_and_increasing(u in 0.001f64..0.499, d in 1e-6f64..0.4) {
            for kind in [NoiseKind::Laplace, NoiseKind::Gaussian] {
                let lo = inverse_cdf(kind, u).unwrap();
                let hi = inverse_cdf(kind, (u + d).min(0.999)).unwrap();
                prop_assert!(hi > lo);
                let mirrored = inverse_cdf(kind, 1.0 - u).unwrap();
                prop_assert!((mirrored + lo).abs() <= 1e-12 * lo.abs().max(1.0));
            }
        }

        #[test]
        fn exp_quantile_extrapolation(p in 1e-4f64..0.5, gamma in 1e-3f64..10.0, r in 1.0f64..6.0) {
            let xp = exp_quantile(p, gamma).unwrap();
            let xpr = exp_quantile(p.powf(r), gamma).unwrap();
            prop_assert!(r * xp >= xpr * (1.0 - 1e-12));
            prop_assert!((r * xp - xpr).abs() <= 1e-9 * xpr.max(1.0));
            let sq = exp_quantile(p * p, gamma).unwrap();
            prop_assert!((sq - 2.0 * xp).abs() <= 1e-12 * sq.max(1.0));
        }
    }
}
