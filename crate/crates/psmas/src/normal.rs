//! Standard normal CDF built on a double-precision error function.
//!
//! The erf/erfc kernels are a Rust port of the FreeBSD msun routines
//! (s_erf.c), which use piecewise rational approximations with absolute
//! error well below 1e-15 across the whole real line. The original notice:
//!
//! ====================================================
//! Copyright (C) 1993 by Sun Microsystems, Inc. All rights reserved.
//!
//! Developed at SunPro, a Sun Microsystems, Inc. business.
//! Permission to use, copy, modify, and distribute this
//! software is freely granted, provided that this notice
//! is preserved.
//! ====================================================

#![allow(clippy::excessive_precision)]

use std::f64::consts::SQRT_2;

const ERX: f64 = 8.45062911510467529297e-01;

// coefficients for approximation to erf in [0, 0.84375]
#[cfg_attr(not(test), allow(dead_code))]
const EFX: f64 = 1.28379167095512586316e-01;
#[cfg_attr(not(test), allow(dead_code))]
const EFX8: f64 = 1.02703333676410069053e+00;
const PP0: f64 = 1.28379167095512558561e-01;
const PP1: f64 = -3.25042107247001499370e-01;
const PP2: f64 = -2.84817495755985104766e-02;
const PP3: f64 = -5.77027029648944159157e-03;
const PP4: f64 = -2.37630166566501626084e-05;
const QQ1: f64 = 3.97917223959155352819e-01;
const QQ2: f64 = 6.50222499887672944485e-02;
const QQ3: f64 = 5.08130628187576562776e-03;
const QQ4: f64 = 1.32494738004321644526e-04;
const QQ5: f64 = -3.96022827877536812320e-06;

// coefficients for approximation to erf in [0.84375, 1.25]
const PA0: f64 = -2.36211856075265944077e-03;
const PA1: f64 = 4.14856118683748331666e-01;
const PA2: f64 = -3.72207876035701323847e-01;
const PA3: f64 = 3.18346619901161753674e-01;
const PA4: f64 = -1.10894694282396677476e-01;
const PA5: f64 = 3.54783043256182359371e-02;
const PA6: f64 = -2.16637559486879084300e-03;
const QA1: f64 = 1.06420880400844228286e-01;
const QA2: f64 = 5.40397917702171048937e-01;
const QA3: f64 = 7.18286544141962662868e-02;
const QA4: f64 = 1.26171219808761642112e-01;
const QA5: f64 = 1.36370839120290507362e-02;
const QA6: f64 = 1.19844998467991074170e-02;

// coefficients for approximation to erfc in [1.25, 1/0.35]
const RA0: f64 = -9.86494403484714822705e-03;
const RA1: f64 = -6.93858572707181764372e-01;
const RA2: f64 = -1.05586262253232909814e+01;
const RA3: f64 = -6.23753324503260060396e+01;
const RA4: f64 = -1.62396669462573470355e+02;
const RA5: f64 = -1.84605092906711035994e+02;
const RA6: f64 = -8.12874355063065934246e+01;
const RA7: f64 = -9.81432934416914548592e+00;
const SA1: f64 = 1.96512716674392571292e+01;
const SA2: f64 = 1.37657754143519042600e+02;
const SA3: f64 = 4.34565877475229228821e+02;
const SA4: f64 = 6.45387271733267880336e+02;
const SA5: f64 = 4.29008140027567833386e+02;
const SA6: f64 = 1.08635005541779435134e+02;
const SA7: f64 = 6.57024977031928170135e+00;
const SA8: f64 = -6.04244152148580987438e-02;

// coefficients for approximation to erfc in [1/0.35, 28]
const RB0: f64 = -9.86494292470009928597e-03;
const RB1: f64 = -7.99283237680523006574e-01;
const RB2: f64 = -1.77579549177547519889e+01;
const RB3: f64 = -1.60636384855821916062e+02;
const RB4: f64 = -6.37566443368389627722e+02;
const RB5: f64 = -1.02509513161107724954e+03;
const RB6: f64 = -4.83519191608651397019e+02;
const SB1: f64 = 3.03380607434824582924e+01;
const SB2: f64 = 3.25792512996573918826e+02;
const SB3: f64 = 1.53672958608443695994e+03;
const SB4: f64 = 3.19985821950859553908e+03;
const SB5: f64 = 2.55305040643316442583e+03;
const SB6: f64 = 4.74528541206955367215e+02;
const SB7: f64 = -2.24409524465858183362e+01;

#[cfg_attr(not(test), allow(dead_code))]
const VERY_TINY: f64 = 2.848094538889218e-306;
const TINY: f64 = 1.3877787807814456755e-17; // 2^-56
#[cfg_attr(not(test), allow(dead_code))]
const SMALL: f64 = 3.725290298461914e-09; // 2^-28

/// Error function. Only the CDF path uses erfc; this half is kept so the
/// kernel can be checked against published erf tables.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return -1.0;
    }
    let sign = x < 0.0;
    let x = x.abs();
    if x < 0.84375 {
        let temp = if x < SMALL {
            if x < VERY_TINY {
                0.125 * (8.0 * x + EFX8 * x)
            } else {
                x + EFX * x
            }
        } else {
            let z = x * x;
            let r = PP0 + z * (PP1 + z * (PP2 + z * (PP3 + z * PP4)));
            let s = 1.0 + z * (QQ1 + z * (QQ2 + z * (QQ3 + z * (QQ4 + z * QQ5))));
            x + x * (r / s)
        };
        return if sign { -temp } else { temp };
    }
    if x < 1.25 {
        let s = x - 1.0;
        let p = PA0 + s * (PA1 + s * (PA2 + s * (PA3 + s * (PA4 + s * (PA5 + s * PA6)))));
        let q = 1.0 + s * (QA1 + s * (QA2 + s * (QA3 + s * (QA4 + s * (QA5 + s * QA6)))));
        return if sign { -ERX - p / q } else { ERX + p / q };
    }
    if x >= 6.0 {
        return if sign { -1.0 } else { 1.0 };
    }
    let r = erfc_tail(x);
    if sign {
        r / x - 1.0
    } else {
        1.0 - r / x
    }
}

/// Complementary error function.
pub(crate) fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    if x == f64::NEG_INFINITY {
        return 2.0;
    }
    let sign = x < 0.0;
    let x = x.abs();
    if x < 0.84375 {
        let temp = if x < TINY {
            x
        } else {
            let z = x * x;
            let r = PP0 + z * (PP1 + z * (PP2 + z * (PP3 + z * PP4)));
            let s = 1.0 + z * (QQ1 + z * (QQ2 + z * (QQ3 + z * (QQ4 + z * QQ5))));
            let y = r / s;
            if x < 0.25 {
                x + x * y
            } else {
                0.5 + (x * y + (x - 0.5))
            }
        };
        return if sign { 1.0 + temp } else { 1.0 - temp };
    }
    if x < 1.25 {
        let s = x - 1.0;
        let p = PA0 + s * (PA1 + s * (PA2 + s * (PA3 + s * (PA4 + s * (PA5 + s * PA6)))));
        let q = 1.0 + s * (QA1 + s * (QA2 + s * (QA3 + s * (QA4 + s * (QA5 + s * QA6)))));
        return if sign { 1.0 + ERX + p / q } else { 1.0 - ERX - p / q };
    }
    if x < 28.0 {
        if sign && x > 6.0 {
            return 2.0;
        }
        let r = erfc_tail(x);
        return if sign { 2.0 - r / x } else { r / x };
    }
    if sign {
        2.0
    } else {
        0.0
    }
}

/// Shared tail kernel: exp(-x^2 - 0.5625 + R/S) for 1.25 <= x < 28, before
/// division by x.
fn erfc_tail(x: f64) -> f64 {
    let s = 1.0 / (x * x);
    let (r, q) = if x < 1.0 / 0.35 {
        (
            RA0 + s * (RA1 + s * (RA2 + s * (RA3 + s * (RA4 + s * (RA5 + s * (RA6 + s * RA7)))))),
            1.0 + s
                * (SA1
                    + s * (SA2
                        + s * (SA3 + s * (SA4 + s * (SA5 + s * (SA6 + s * (SA7 + s * SA8))))))),
        )
    } else {
        (
            RB0 + s * (RB1 + s * (RB2 + s * (RB3 + s * (RB4 + s * (RB5 + s * RB6))))),
            1.0 + s * (SB1 + s * (SB2 + s * (SB3 + s * (SB4 + s * (SB5 + s * (SB6 + s * SB7)))))),
        )
    };
    // split x into a 20-bit head so exp(-z*z) stays exact
    let z = f64::from_bits(x.to_bits() & 0xffff_ffff_0000_0000);
    f64::exp(-z * z - 0.5625) * f64::exp((z - x) * (z + x) + r / q)
}

/// Standard normal CDF.
pub(crate) fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn erf_reference_points() {
        assert_eq!(erf(0.0), 0.0);
        assert_abs_diff_eq!(erf(0.3), 0.328626759459127416, epsilon = 1e-15);
        assert_abs_diff_eq!(erf(0.5), 0.520499877813046538, epsilon = 1e-15);
        assert_abs_diff_eq!(erf(1.0), 0.842700792949714869, epsilon = 1e-15);
        assert_abs_diff_eq!(erf(1.8), 0.989090501635730716, epsilon = 1e-15);
        assert_abs_diff_eq!(erf(2.5), 0.999593047982555041, epsilon = 1e-15);
        assert_abs_diff_eq!(erf(3.5), 0.999999256901627659, epsilon = 1e-15);
        assert_abs_diff_eq!(erf(-1.2), -0.910313978229635368, epsilon = 1e-15);
        assert_eq!(erf(f64::INFINITY), 1.0);
        assert_eq!(erf(f64::NEG_INFINITY), -1.0);
        assert!(erf(f64::NAN).is_nan());
    }

    #[test]
    fn erfc_complements_erf() {
        for z in [-5.5, -2.0, -0.7, -0.1, 0.0, 0.1, 0.9, 1.24, 1.26, 3.0, 5.9, 6.1, 27.0] {
            assert_abs_diff_eq!(erfc(z), 1.0 - erf(z), epsilon = 1e-14);
        }
        assert_eq!(erfc(40.0), 0.0);
        assert_eq!(erfc(-40.0), 2.0);
    }

    #[test]
    fn phi_reference_points() {
        assert_eq!(phi(0.0), 0.5);
        assert_abs_diff_eq!(phi(0.98), 0.83645694067230765, epsilon = 1e-12);
        assert_abs_diff_eq!(phi(0.83), 0.796730608171931585, epsilon = 1e-12);
        assert_abs_diff_eq!(phi(1.0), 0.841344746068542949, epsilon = 1e-12);
        assert_abs_diff_eq!(phi(2.0), 0.977249868051820793, epsilon = 1e-12);
        assert_abs_diff_eq!(phi(-3.0), 0.00134989803163009453, epsilon = 1e-12);
        assert_abs_diff_eq!(phi(-6.0), 9.86587645037698141e-10, epsilon = 1e-14);
        assert_abs_diff_eq!(phi(1.96), 0.975002104851779564, epsilon = 1e-12);
    }

    #[test]
    fn phi_symmetry() {
        for z in [0.1, 0.5, 1.3, 2.7, 4.0] {
            assert_abs_diff_eq!(phi(z) + phi(-z), 1.0, epsilon = 1e-14);
        }
    }
}
