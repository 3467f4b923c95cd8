//! Color and tone transfer functions.
//!
//! The color pipeline is fixed to Rec.709 primaries with a D65 white. Lab
//! conversions use the white obtained by pushing RGB (1, 1, 1) through the
//! primaries matrix, so reference white lands on L* = 100, a* = b* = 0.

use std::sync::LazyLock;

use crate::error::{Error, Result};
use crate::image::ImageF;

pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Default μ for the μ-law tonemap.
pub const MU: f64 = 5000.0;

/// Linear Rec.709 RGB to CIE XYZ (D65).
pub const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    let m = &RGB_TO_XYZ;
    [
        m[0][0] + m[0][1] + m[0][2],
        m[1][0] + m[1][1] + m[1][2],
        m[2][0] + m[2][1] + m[2][2],
    ]
});

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof[j][i] / det;
        }
    }
    inv
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

const DELTA: f64 = 6.0 / 29.0;

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_prime(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        1.0 / (3.0 * t.cbrt() * t.cbrt())
    } else {
        1.0 / (3.0 * DELTA * DELTA)
    }
}

#[inline]
fn lab_f_inv(u: f64) -> f64 {
    if u > DELTA {
        u * u * u
    } else {
        3.0 * DELTA * DELTA * (u - 4.0 / 29.0)
    }
}

#[inline]
pub fn luminance_px(rgb: [f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2]
}

/// Linear RGB pixel to L*a*b*. Negative components are clipped to zero.
pub fn rgb_to_lab_px(rgb: [f64; 3]) -> [f64; 3] {
    rgb_to_lab_jacobian(rgb).0
}

/// L*a*b* of `rgb` and its Jacobian `d(L,a,b)/d(r,g,b)`.
///
/// Rows of the Jacobian are zero for components clipped at zero.
pub fn rgb_to_lab_jacobian(rgb: [f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let clipped = [rgb[0].max(0.0), rgb[1].max(0.0), rgb[2].max(0.0)];
    let xyz = mat_vec(&RGB_TO_XYZ, clipped);
    let w = *WHITE;
    let t = [xyz[0] / w[0], xyz[1] / w[1], xyz[2] / w[2]];
    let f = [lab_f(t[0]), lab_f(t[1]), lab_f(t[2])];
    let lab = [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])];

    // d f_i / d rgb_j = f'(t_i) * M[i][j] / w_i, zero where rgb_j was clipped.
    let mut df = [[0.0; 3]; 3];
    for i in 0..3 {
        let fp = lab_f_prime(t[i]) / w[i];
        for j in 0..3 {
            df[i][j] = if rgb[j] >= 0.0 { fp * RGB_TO_XYZ[i][j] } else { 0.0 };
        }
    }
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        jac[0][j] = 116.0 * df[1][j];
        jac[1][j] = 500.0 * (df[0][j] - df[1][j]);
        jac[2][j] = 200.0 * (df[1][j] - df[2][j]);
    }
    (lab, jac)
}

pub fn lab_to_rgb_px(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = *WHITE;
    let xyz = [w[0] * lab_f_inv(fx), w[1] * lab_f_inv(fy), w[2] * lab_f_inv(fz)];
    mat_vec(&XYZ_TO_RGB, xyz)
}

fn check_rgb(img: &ImageF, what: &str) -> Result<()> {
    if img.channels() == 3 {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what} needs 3 channels, got {}",
            img.channels()
        )))
    }
}

fn map_pixels3(img: &ImageF, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<ImageF> {
    let mut data = Vec::with_capacity(img.data().len());
    for i in 0..img.pixels() {
        let p = img.pixel(i);
        data.extend_from_slice(&f([p[0], p[1], p[2]]));
    }
    ImageF::new(img.height(), img.width(), 3, data)
}

/// Rec.709 luminance `Y`, single channel.
pub fn luminance(rgb: &ImageF) -> Result<ImageF> {
    check_rgb(rgb, "luminance")?;
    let data = (0..rgb.pixels())
        .map(|i| {
            let p = rgb.pixel(i);
            luminance_px([p[0], p[1], p[2]])
        })
        .collect();
    ImageF::new(rgb.height(), rgb.width(), 1, data)
}

/// Linear RGB image to L*a*b* (channels L*, a*, b*).
pub fn linear_to_lab(rgb: &ImageF) -> Result<ImageF> {
    check_rgb(rgb, "linear_to_lab")?;
    map_pixels3(rgb, rgb_to_lab_px)
}

pub fn lab_to_linear(lab: &ImageF) -> Result<ImageF> {
    check_rgb(lab, "lab_to_linear")?;
    map_pixels3(lab, lab_to_rgb_px)
}

/// `ln(1 + μx) / ln(1 + μ)` after clipping `x` to `[0, 1]`.
#[inline]
pub fn mu_law_px(x: f64, mu: f64) -> f64 {
    (mu * x.clamp(0.0, 1.0)).ln_1p() / mu.ln_1p()
}

/// Derivative of [`mu_law_px`] in `x`; zero where the input is clipped.
#[inline]
pub fn mu_law_prime(x: f64, mu: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        mu / ((1.0 + mu * x) * mu.ln_1p())
    } else {
        0.0
    }
}

#[inline]
pub fn mu_law_inv_px(y: f64, mu: f64) -> f64 {
    (y * mu.ln_1p()).exp_m1() / mu
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("mu must be positive, got {mu}")))
    }
}

pub fn mu_law(x: &ImageF, mu: f64) -> Result<ImageF> {
    check_mu(mu)?;
    Ok(x.map(|v| mu_law_px(v, mu)))
}

/// Inverse of [`mu_law`] on `[0, 1]`.
pub fn mu_law_inv(y: &ImageF, mu: f64) -> Result<ImageF> {
    check_mu(mu)?;
    y.try_map(|v| mu_law_inv_px(v, mu))
}

/// Lowest and highest absolute luminance (cd/m²) the PU21 encoding accepts.
pub const PU21_L_MIN: f64 = 0.005;
pub const PU21_L_MAX: f64 = 10_000.0;

/// PU21 coefficients, "banding" variant.
pub const PU21_BANDING: [f64; 7] = [
    1.070_275_272,
    0.408_827_393_2,
    0.153_224_308,
    0.252_032_616_8,
    1.063_512_885,
    1.141_150_47,
    521.452_748_4,
];

/// PU21 encoding of an absolute luminance in cd/m².
pub fn pu21_px(luminance_nits: f64) -> f64 {
    let p = &PU21_BANDING;
    let y = luminance_nits.clamp(PU21_L_MIN, PU21_L_MAX);
    let yp = y.powf(p[3]);
    let v = p[6] * (((p[0] + p[1] * yp) / (1.0 + p[2] * yp)).powf(p[4]) - p[5]);
    v.max(0.0)
}

/// PU21-encodes relative linear values scaled to absolute units by `peak_nits`.
pub fn pu21_encode(x: &ImageF, peak_nits: f64) -> Result<ImageF> {
    if !(peak_nits > 0.0) {
        return Err(Error::invalid("peak luminance must be positive"));
    }
    Ok(x.map(|v| pu21_px(v * peak_nits)))
}

const SRGB_LINEAR_KNEE: f64 = 0.003_130_8;

#[inline]
pub fn srgb_encode_px(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= SRGB_LINEAR_KNEE {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
pub fn srgb_decode_px(y: f64) -> f64 {
    let y = y.clamp(0.0, 1.0);
    // The published 0.04045 decode knee sits 5e-8 above the encoded image of
    // the encode knee; using the exact image keeps the two branches inverse.
    if y <= 12.92 * SRGB_LINEAR_KNEE {
        y / 12.92
    } else {
        ((y + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_encode(x: &ImageF) -> ImageF {
    x.map(srgb_encode_px)
}

pub fn srgb_decode(y: &ImageF) -> ImageF {
    y.map(srgb_decode_px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(v: [f64; 3]) -> ImageF {
        ImageF::new(1, 1, 3, v.to_vec()).unwrap()
    }

    #[test]
    fn luminance_examples() {
        let y = |v| luminance(&px(v)).unwrap().data()[0];
        assert!((y([1.0, 1.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(y([1.0, 0.0, 0.0]), 0.2126);
        assert_eq!(y([0.0, 0.0, 0.0]), 0.0);
        assert!(luminance(&ImageF::zeros(2, 2, 1)).is_err());
    }

    #[test]
    fn lab_anchors() {
        let w = rgb_to_lab_px([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-3 && w[2].abs() < 1e-3);
        assert_eq!(rgb_to_lab_px([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        let back = lab_to_rgb_px([100.0, 0.0, 0.0]);
        assert!(back.iter().all(|v| (v - 1.0).abs() < 1e-6));
        let zero = lab_to_rgb_px([0.0, 0.0, 0.0]);
        assert!(zero.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn lab_inverse_of_chromatic_point() {
        let target = [50.0, 20.0, -30.0];
        let rgb = lab_to_rgb_px(target);
        assert!(rgb.iter().all(|&v| v >= 0.0));
        let again = rgb_to_lab_px(rgb);
        for k in 0..3 {
            assert!((again[k] - target[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn lab_round_trip_grid() {
        let mut worst: f64 = 0.0;
        for r in 0..17 {
            for g in 0..17 {
                for b in 0..17 {
                    let v = [r as f64 / 16.0, g as f64 / 16.0, b as f64 / 16.0];
                    let back = lab_to_rgb_px(rgb_to_lab_px(v));
                    for k in 0..3 {
                        worst = worst.max((back[k] - v[k]).abs());
                    }
                }
            }
        }
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn lab_jacobian_matches_finite_differences() {
        for rgb in [[0.3, 0.6, 0.1], [0.001, 0.002, 0.5], [0.9, 0.05, 0.7]] {
            let (_, jac) = rgb_to_lab_jacobian(rgb);
            for j in 0..3 {
                let h = 1e-7;
                let mut p = rgb;
                let mut m = rgb;
                p[j] += h;
                m[j] -= h;
                let (lp, lm) = (rgb_to_lab_px(p), rgb_to_lab_px(m));
                for i in 0..3 {
                    let fd = (lp[i] - lm[i]) / (2.0 * h);
                    assert!(
                        (fd - jac[i][j]).abs() <= 1e-5 * (1.0 + fd.abs()),
                        "d{i}/d{j}: {fd} vs {}",
                        jac[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn mu_law_examples() {
        assert_eq!(mu_law_px(0.0, MU), 0.0);
        assert!((mu_law_px(1.0, MU) - 1.0).abs() < 1e-15);
        assert!((mu_law_inv_px(mu_law_px(0.37, MU), MU) - 0.37).abs() < 1e-9);
        let expected = 2f64.ln() / 5001f64.ln();
        assert!((mu_law_px(1.0 / MU, MU) - expected).abs() < 1e-15);
        assert!((expected - 0.0814).abs() < 1e-4);
        assert!(mu_law(&ImageF::zeros(1, 1, 1), 0.0).is_err());
    }

    #[test]
    fn srgb_examples() {
        assert_eq!(srgb_encode_px(0.0), 0.0);
        assert!((srgb_encode_px(1.0) - 1.0).abs() < 1e-12);
        assert!((srgb_decode_px(srgb_encode_px(0.5)) - 0.5).abs() < 1e-9);
        assert!((srgb_encode_px(0.003_130_8) - 0.040_45).abs() < 1e-6);
    }

    #[test]
    fn pu21_floor_and_reference_point() {
        // Values from an independent evaluation of the banding coefficients
        // (see tests/oracles/pu21.py).
        assert!((pu21_px(0.005) - PU21_AT_0_005).abs() < 1e-6);
        assert!((pu21_px(100.0) - PU21_AT_100).abs() < 1e-6);
        assert!(pu21_px(10_000.0) > 500.0 && pu21_px(10_000.0) < 600.0);
        assert_eq!(pu21_px(0.0), pu21_px(0.005));
    }

    const PU21_AT_0_005: f64 = 0.0;
    const PU21_AT_100: f64 = 261.751_727_930_199_5;

    proptest! {
        #[test]
        fn pu21_is_monotone(a in 0.0f64..200.0, b in 0.0f64..200.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(pu21_px(lo * 100.0) <= pu21_px(hi * 100.0));
        }

        #[test]
        fn gray_stays_neutral(v in 0.0f64..4.0) {
            let lab = rgb_to_lab_px([v, v, v]);
            prop_assert!(lab[1].abs() < 1e-6 && lab[2].abs() < 1e-6);
        }

        #[test]
        fn transfer_round_trips(x in 0.0f64..1.0) {
            prop_assert!((srgb_decode_px(srgb_encode_px(x)) - x).abs() < 1e-9);
            prop_assert!((mu_law_inv_px(mu_law_px(x, MU), MU) - x).abs() < 1e-9);
        }
    }
}
