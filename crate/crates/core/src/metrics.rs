//! Full-reference HDR quality metrics.
//!
//! Pairs are first normalized by the reference's 99th-percentile luminance,
//! then scored in the linear, μ-law and PU21 domains. SSIM, MS-SSIM and
//! CIEDE2000 are computed on the μ-law tonemapped images.

use std::fmt;
use std::str::FromStr;

use crate::colorspace::{self, rgb_to_lab_px, PU21_L_MAX, PU21_L_MIN};
use crate::error::{Error, Result};
use crate::image::{percentile, ImageF};

/// Score reported for an exact match.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Scale weights for 5-level MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    pub mu: f64,
    pub peak_nits: f64,
    pub ms_ssim_scales: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            mu: colorspace::MU,
            peak_nits: 100.0,
            ms_ssim_scales: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Linear,
    Mu,
    Pu,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Linear => "linear",
            Domain::Mu => "mu",
            Domain::Pu => "pu",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "l" => Ok(Domain::Linear),
            "mu" => Ok(Domain::Mu),
            "pu" => Ok(Domain::Pu),
            other => Err(Error::invalid(format!("unknown metric domain '{other}'"))),
        }
    }
}

/// Per-pair evaluation record.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr_l: f64,
    pub psnr_mu: f64,
    pub psnr_pu: f64,
    pub ssim_mu: f64,
    pub msssim_mu: f64,
    pub delta_e2000: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "psnr_l,psnr_mu,psnr_pu,ssim_mu,msssim_mu,delta_e2000";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.psnr_l, self.psnr_mu, self.psnr_pu, self.ssim_mu, self.msssim_mu, self.delta_e2000
        )
    }

    /// Field-wise mean.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            psnr_l: sum(|r| r.psnr_l),
            psnr_mu: sum(|r| r.psnr_mu),
            psnr_pu: sum(|r| r.psnr_pu),
            ssim_mu: sum(|r| r.ssim_mu),
            msssim_mu: sum(|r| r.msssim_mu),
            delta_e2000: sum(|r| r.delta_e2000),
        }
    }
}

/// `10 log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr_with_peak(a: &ImageF, b: &ImageF, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Reference scale: 99th-percentile luminance of `gt` (RGB) or of its
/// values (gray). Falls back to the maximum, then to 1, for dark inputs.
pub fn normalization_scale(gt: &ImageF) -> Result<f64> {
    let lum = if gt.channels() == 3 {
        colorspace::luminance(gt)?
    } else {
        gt.clone()
    };
    let p99 = percentile(lum.data(), 99.0)?;
    if p99 > 0.0 {
        Ok(p99)
    } else if lum.max() > 0.0 {
        Ok(lum.max())
    } else {
        Ok(1.0)
    }
}

/// Maps an already-normalized image into `domain`; returns the image and
/// the domain's peak value used for PSNR.
pub fn to_domain(img: &ImageF, domain: Domain, cfg: &MetricConfig) -> Result<ImageF> {
    match domain {
        Domain::Linear => Ok(img.clone()),
        Domain::Mu => colorspace::mu_law(img, cfg.mu),
        Domain::Pu => colorspace::pu21_encode(img, cfg.peak_nits),
    }
}

/// PSNR between normalized images in `domain`. The peak is the reference
/// maximum for the linear domain and the transform's output range otherwise.
pub fn psnr(pred: &ImageF, gt: &ImageF, domain: Domain, cfg: &MetricConfig) -> Result<f64> {
    pred.ensure_same_shape(gt, "psnr")?;
    let peak = match domain {
        Domain::Linear => {
            let m = gt.max();
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
        Domain::Mu => 1.0,
        Domain::Pu => colorspace::pu21_px(PU21_L_MAX) - colorspace::pu21_px(PU21_L_MIN),
    };
    psnr_with_peak(&to_domain(pred, domain, cfg)?, &to_domain(gt, domain, cfg)?, peak)
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WIN / 2) as i32;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-(f64::from(i * i)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> (f64, f64) {
    let win = ssim_window();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let (mu_a, oh, ow) = filter_valid(a, h, w, &win);
    let (mu_b, ..) = filter_valid(b, h, w, &win);
    let (aa, ..) = filter_valid(&prod(&|x, _| x * x), h, w, &win);
    let (bb, ..) = filter_valid(&prod(&|_, y| y * y), h, w, &win);
    let (ab, ..) = filter_valid(&prod(&|x, y| x * y), h, w, &win);
    let n = (oh * ow) as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

fn planes(img: &ImageF) -> Vec<Vec<f64>> {
    (0..img.channels()).map(|c| img.channel(c).into_data()).collect()
}

/// Gaussian-window SSIM averaged over channels. `range` is the dynamic
/// range of the signal (1 for μ-law images).
pub fn ssim(a: &ImageF, b: &ImageF, range: f64) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w, c) = a.shape();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels")));
    }
    let (pa, pb) = (planes(a), planes(b));
    Ok((0..c).map(|k| ssim_plane(&pa[k], &pb[k], h, w, range).0).sum::<f64>() / c as f64)
}

/// Largest usable MS-SSIM scale count for an image of this size.
pub fn max_ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut s = 0;
    while s < 5 && h.min(w) >= SSIM_WIN << s {
        s += 1;
    }
    s
}

fn downsample2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM over exactly `scales` dyadic levels.
pub fn msssim(a: &ImageF, b: &ImageF, range: f64, scales: usize) -> Result<f64> {
    a.ensure_same_shape(b, "msssim")?;
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::invalid(format!("MS-SSIM supports 1..=5 scales, got {scales}")));
    }
    let (h, w, c) = a.shape();
    if max_ms_ssim_scales(h, w) < scales {
        return Err(Error::Shape(format!(
            "{h}x{w} too small for {scales}-scale MS-SSIM (needs {} px)",
            SSIM_WIN << (scales - 1)
        )));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|v| v / wsum).collect();
    let (pa, pb) = (planes(a), planes(b));
    let mut total = 0.0;
    for k in 0..c {
        let (mut xa, mut xb, mut ch, mut cw) = (pa[k].clone(), pb[k].clone(), h, w);
        let mut value = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (full, cs) = ssim_plane(&xa, &xb, ch, cw, range);
            let term = if s + 1 == scales { full } else { cs };
            value *= term.max(0.0).powf(wt);
            if s + 1 < scales {
                let (na, nh, nw) = downsample2(&xa, ch, cw);
                xb = downsample2(&xb, ch, cw).0;
                xa = na;
                ch = nh;
                cw = nw;
            }
        }
        total += value;
    }
    Ok(total / c as f64)
}

/// MS-SSIM with the configured scale count, reduced (with a warning) when
/// the image is too small. Returns the value and the scales actually used.
pub fn msssim_auto(a: &ImageF, b: &ImageF, range: f64, scales: usize) -> Result<(f64, usize)> {
    let usable = max_ms_ssim_scales(a.height(), a.width()).min(scales);
    if usable == 0 {
        return Err(Error::Shape("image too small for MS-SSIM".into()));
    }
    if usable < scales {
        log::warn!(
            "{}x{} image: MS-SSIM reduced from {scales} to {usable} scales",
            a.height(),
            a.width()
        );
    }
    Ok((msssim(a, b, range, usable)?, usable))
}

/// CIEDE2000 color difference between two L*a*b* triples.
pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    let [l1, a1, b1] = lab1;
    let [l2, a2, b2] = lab2;
    let pow7 = |v: f64| v.powi(7);
    let c1 = a1.hypot(b1);
    let c2 = a2.hypot(b2);
    let c_bar = 0.5 * (c1 + c2);
    let g = 0.5 * (1.0 - (pow7(c_bar) / (pow7(c_bar) + pow7(25.0))).sqrt());
    let a1p = (1.0 + g) * a1;
    let a2p = (1.0 + g) * a2;
    let c1p = a1p.hypot(b1);
    let c2p = a2p.hypot(b2);
    let hue = |b: f64, ap: f64| {
        if b == 0.0 && ap == 0.0 {
            0.0
        } else {
            let h = b.atan2(ap).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(b1, a1p);
    let h2p = hue(b2, a2p);

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let chroma_zero = c1p * c2p == 0.0;
    let dh_angle = if chroma_zero {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh = 2.0 * (c1p * c2p).sqrt() * (0.5 * dh_angle).to_radians().sin();

    let l_bar = 0.5 * (l1 + l2);
    let cp_bar = 0.5 * (c1p + c2p);
    let h_bar = if chroma_zero {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        0.5 * (h1p + h2p)
    } else if h1p + h2p < 360.0 {
        0.5 * (h1p + h2p + 360.0)
    } else {
        0.5 * (h1p + h2p - 360.0)
    };
    let cosd = |deg: f64| deg.to_radians().cos();
    let t = 1.0 - 0.17 * cosd(h_bar - 30.0) + 0.24 * cosd(2.0 * h_bar) + 0.32 * cosd(3.0 * h_bar + 6.0)
        - 0.20 * cosd(4.0 * h_bar - 63.0);
    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let r_c = 2.0 * (pow7(cp_bar) / (pow7(cp_bar) + pow7(25.0))).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * cp_bar;
    let s_h = 1.0 + 0.015 * cp_bar * t;
    let r_t = -(2.0 * d_theta).to_radians().sin() * r_c;
    let (tl, tc, th) = (dl / s_l, dc / s_c, dh / s_h);
    (tl * tl + tc * tc + th * th + r_t * tc * th).max(0.0).sqrt()
}

/// Mean CIEDE2000 between two images already mapped to display range.
pub fn delta_e2000_display(a: &ImageF, b: &ImageF) -> Result<f64> {
    a.ensure_same_shape(b, "delta_e2000")?;
    if a.channels() != 3 {
        return Err(Error::Shape("ΔE2000 needs RGB images".into()));
    }
    let n = a.pixels();
    let sum: f64 = (0..n)
        .map(|i| {
            let (p, q) = (a.pixel(i), b.pixel(i));
            ciede2000(rgb_to_lab_px([p[0], p[1], p[2]]), rgb_to_lab_px([q[0], q[1], q[2]]))
        })
        .sum();
    Ok(sum / n as f64)
}

/// Mean CIEDE2000 of normalized HDR images, via μ-law then Lab.
pub fn delta_e2000(a: &ImageF, b: &ImageF, cfg: &MetricConfig) -> Result<f64> {
    delta_e2000_display(&colorspace::mu_law(a, cfg.mu)?, &colorspace::mu_law(b, cfg.mu)?)
}

/// Full report for an HDR prediction against its reference.
pub fn evaluate(pred: &ImageF, gt: &ImageF, cfg: &MetricConfig) -> Result<MetricReport> {
    pred.ensure_same_shape(gt, "evaluate")?;
    let scale = normalization_scale(gt)?;
    let p = pred.map(|v| v / scale);
    let g = gt.map(|v| v / scale);
    let pm = colorspace::mu_law(&p, cfg.mu)?;
    let gm = colorspace::mu_law(&g, cfg.mu)?;
    Ok(MetricReport {
        psnr_l: psnr(&p, &g, Domain::Linear, cfg)?,
        psnr_mu: psnr_with_peak(&pm, &gm, 1.0)?,
        psnr_pu: psnr(&p, &g, Domain::Pu, cfg)?,
        ssim_mu: ssim(&pm, &gm, 1.0)?,
        msssim_mu: msssim_auto(&pm, &gm, 1.0, cfg.ms_ssim_scales)?.0,
        delta_e2000: delta_e2000_display(&pm, &gm)?,
    })
}

/// Reports for many pairs, evaluated in parallel.
pub fn evaluate_batch(pairs: &[(ImageF, ImageF)], cfg: &MetricConfig) -> Result<Vec<MetricReport>> {
    crate::par::map(pairs, |(p, g)| evaluate(p, g, cfg))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::sample_normal;
    use crate::rng::SeededRng;

    /// Published CIEDE2000 verification pairs and their reference values.
    /// Cross-checked against scikit-image in tests/oracles/ciede2000.py.
    fn sharma_pairs() -> Vec<([f64; 3], [f64; 3], f64)> {
        include_str!("../tests/data/ciede2000_pairs.csv")
            .lines()
            .skip(1)
            .map(|l| {
                let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
                ([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
            })
            .collect()
    }

    #[test]
    fn ciede2000_reference_pairs() {
        let pairs = sharma_pairs();
        assert_eq!(pairs.len(), 34);
        for (a, b, expected) in pairs {
            let d = ciede2000(a, b);
            assert!((d - expected).abs() < 1e-4, "{a:?} {b:?}: {d} vs {expected}");
            assert!((ciede2000(b, a) - d).abs() < 1e-12);
        }
        assert_eq!(ciede2000([40.0, 10.0, -5.0], [40.0, 10.0, -5.0]), 0.0);
    }

    #[test]
    fn lightness_shift_is_pure_l_term() {
        let d = ciede2000([50.0, 0.0, 0.0], [55.0, 0.0, 0.0]);
        let l50: f64 = 2.5 * 2.5;
        let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
        assert!((d - 5.0 / s_l).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = ImageF::from_fn(4, 4, 3, |y, _, _| if y == 0 { 1.0 } else { 0.5 });
        let cfg = MetricConfig::default();
        assert_eq!(psnr(&a, &a, Domain::Linear, &cfg).unwrap(), PSNR_CAP);
        let b = a.map(|v| v - 0.1);
        let p = psnr(&b, &a, Domain::Linear, &cfg).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
        assert!(psnr(&a, &ImageF::zeros(2, 2, 3), Domain::Mu, &cfg).is_err());
    }

    #[test]
    fn domains_disagree_on_hdr() {
        let mut rng = SeededRng::new(9);
        let gt = ImageF::from_fn(16, 16, 3, |_, _, _| rng.log_uniform(0.01, 20.0));
        let pred = gt.map(|v| v * 1.2);
        let cfg = MetricConfig::default();
        let l = psnr(&pred, &gt, Domain::Linear, &cfg).unwrap();
        let m = psnr(&pred, &gt, Domain::Mu, &cfg).unwrap();
        assert!((l - m).abs() > 0.1);
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // tests/oracles/ssim.py
        const REFERENCE: f64 = 0.643_581_680_547_053_2;
        let a = ImageF::from_fn(16, 16, 1, |i, j, _| {
            0.5 + 0.4 * (0.7 * i as f64).sin() * (0.45 * j as f64).cos()
        });
        let b = a.map(|v| 0.5 * v);
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!((s - REFERENCE).abs() < 1e-6, "{s}");
        assert!((ssim(&b, &a, 1.0).unwrap() - s).abs() < 1e-15);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&ImageF::zeros(8, 8, 1), &ImageF::zeros(8, 8, 1), 1.0).is_err());
    }

    #[test]
    fn msssim_identity_symmetry_and_size_checks() {
        let mut rng = SeededRng::new(2);
        let a = ImageF::from_fn(48, 48, 3, |_, _, _| rng.uniform());
        let b = a.map(|v| (v * 0.9 + 0.03).min(1.0));
        assert!((msssim(&a, &a, 1.0, 3).unwrap() - 1.0).abs() < 1e-12);
        let ab = msssim(&a, &b, 1.0, 3).unwrap();
        assert!((ab - msssim(&b, &a, 1.0, 3).unwrap()).abs() < 1e-12);
        assert!(ab < 1.0);
        assert!(msssim(&a, &b, 1.0, 5).is_err());
        assert_eq!(msssim_auto(&a, &b, 1.0, 5).unwrap().1, 3);
        assert_eq!(max_ms_ssim_scales(176, 200), 5);
        assert_eq!(max_ms_ssim_scales(175, 200), 4);
    }

    #[test]
    fn evaluate_identity_and_noise_monotonicity() {
        let mut rng = SeededRng::new(4);
        let gt = ImageF::from_fn(32, 32, 3, |_, _, _| rng.log_uniform(0.01, 5.0));
        let cfg = MetricConfig::default();
        let same = evaluate(&gt, &gt, &cfg).unwrap();
        assert_eq!(same.psnr_l, PSNR_CAP);
        assert_eq!(same.psnr_mu, PSNR_CAP);
        assert_eq!(same.psnr_pu, PSNR_CAP);
        assert!((same.ssim_mu - 1.0).abs() < 1e-12);
        assert!((same.msssim_mu - 1.0).abs() < 1e-12);
        assert_eq!(same.delta_e2000, 0.0);

        let noise = sample_normal(&mut rng, 32, 32, 3);
        let mut last = [f64::INFINITY; 3];
        for sigma in [0.01, 0.03, 0.1, 0.3] {
            let noisy = gt.zip_map(&noise, |g, n| (g * (1.0 + sigma * n)).max(0.0)).unwrap();
            let r = evaluate(&noisy, &gt, &cfg).unwrap();
            let now = [r.psnr_l, r.psnr_mu, r.psnr_pu];
            for k in 0..3 {
                assert!(now[k] < last[k], "domain {k}: {} !< {}", now[k], last[k]);
            }
            last = now;
        }
    }
}
