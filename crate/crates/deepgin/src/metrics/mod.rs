//! Evaluation metrics: PSNR, SSIM and mean L1 error, plus directory-level
//! evaluation reports.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// PSNR cap returned for identical images (MSE = 0).
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_pair(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::InvalidArgument(format!(
            "{what}: size mismatch {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over [0,1] images; identical images
/// return the documented cap.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b, "psnr")?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10().min(PSNR_CAP_DB / 10.0))
}

/// Mean absolute error in percent.
pub fn mean_l1_pct(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b, "mean_l1_pct")?;
    let mean: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(100.0 * mean)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region Gaussian filter of one channel plane.
fn gauss_filter_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1; computed per channel over valid window
/// positions and averaged across channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = |img: &ImageTensor, c: usize| -> Vec<f64> {
        (0..h * w)
            .map(|i| img.data()[c * h * w + i])
            .collect()
    };
    let mut channel_means = Vec::with_capacity(a.channels());
    for c in 0..a.channels() {
        let x = plane(a, c);
        let y = plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = gauss_filter_valid(&x, h, w);
        let mu_y = gauss_filter_valid(&y, h, w);
        let m_xx = gauss_filter_valid(&xx, h, w);
        let m_yy = gauss_filter_valid(&yy, h, w);
        let m_xy = gauss_filter_valid(&xy, h, w);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = m_xx[i] - mx * mx;
            let var_y = m_yy[i] - my * my;
            let cov = m_xy[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        }
        channel_means.push(acc / mu_x.len() as f64);
    }
    Ok(channel_means.iter().sum::<f64>() / channel_means.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub l1_pct: f64,
}

/// Per-image metrics plus arithmetic-mean aggregates. The `fid` / `lpips`
/// columns exist in the serialized schema but are not computed here.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub psnr: f64,
    pub ssim: f64,
    pub l1_pct: f64,
    pub fingerprint: Option<String>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, fingerprint: Option<String>) -> Self {
        let n = rows.len().max(1) as f64;
        let psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let l1 = rows.iter().map(|r| r.l1_pct).sum::<f64>() / n;
        EvalReport {
            rows,
            psnr,
            ssim,
            l1_pct: l1,
            fingerprint,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim,l1_err_pct,fid,lpips\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},,\n",
                r.name, r.psnr, r.ssim, r.l1_pct
            ));
        }
        out.push_str(&format!(
            "AGGREGATE,{:.6},{:.6},{:.6},,\n",
            self.psnr, self.ssim, self.l1_pct
        ));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>9} {:>8} {:>10}", "image", "psnr(db)", "ssim", "l1err(%)")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:>9.3} {:>8.4} {:>10.4}",
                r.name, r.psnr, r.ssim, r.l1_pct
            )?;
        }
        writeln!(
            f,
            "{:<28} {:>9.3} {:>8.4} {:>10.4}",
            "AGGREGATE", self.psnr, self.ssim, self.l1_pct
        )
    }
}

/// Metrics over two directories paired by file name, rows in lexicographic
/// order. Unpaired files on either side are an error listing every mismatch.
pub fn evaluate_dataset(completed: impl AsRef<Path>, gt: impl AsRef<Path>) -> Result<EvalReport> {
    let c_files = crate::data::list_pngs(completed.as_ref())?;
    let g_files = crate::data::list_pngs(gt.as_ref())?;
    let names = |files: &[std::path::PathBuf]| -> Vec<String> {
        files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect()
    };
    let cn = names(&c_files);
    let gn = names(&g_files);
    let mut unpaired: Vec<String> = Vec::new();
    for n in &cn {
        if !gn.contains(n) {
            unpaired.push(format!("{n} (no ground truth)"));
        }
    }
    for n in &gn {
        if !cn.contains(n) {
            unpaired.push(format!("{n} (no completed image)"));
        }
    }
    if !unpaired.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "unpaired files: {}",
            unpaired.join(", ")
        )));
    }
    let gt_dir = gt.as_ref();
    let mut rows = Vec::with_capacity(c_files.len());
    for (path, name) in c_files.iter().zip(&cn) {
        let a = crate::image::load_png(path)?;
        let b = crate::image::load_png(gt_dir.join(name))?;
        rows.push(EvalRow {
            name: name.clone(),
            psnr: psnr(&a, &b)?,
            ssim: ssim(&a, &b)?,
            l1_pct: mean_l1_pct(&a, &b)?,
        });
    }
    Ok(EvalReport::from_rows(rows, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        let mut img = ImageTensor::new(h, w, 3);
        for v in img.data_mut() {
            *v = rng.uniform();
        }
        img
    }

    #[test]
    fn psnr_cap_and_known_value() {
        let a = random_image(12, 12, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        // uniform |delta| = 0.1 -> mse = 0.01 -> 20 dB
        let b = ImageTensor::from_fn(12, 12, 3, |y, x, c| a.get(y, x, c) * 0.0 + 0.4);
        let c = ImageTensor::constant(12, 12, 3, 0.5);
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let a = random_image(9, 7, 2);
        let b = random_image(9, 7, 3);
        let mut acc = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            acc += (x - y) * (x - y);
        }
        let mse = acc / a.data().len() as f64;
        let expected = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn l1_pct_endpoints_and_oracle() {
        let z = ImageTensor::constant(8, 8, 3, 0.0);
        let o = ImageTensor::constant(8, 8, 3, 1.0);
        assert_eq!(mean_l1_pct(&z, &z).unwrap(), 0.0);
        assert_eq!(mean_l1_pct(&z, &o).unwrap(), 100.0);
        let a = random_image(8, 8, 4);
        let b = random_image(8, 8, 5);
        let oracle: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 192.0
            * 100.0;
        assert!((mean_l1_pct(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constant_shift() {
        let a = random_image(16, 16, 6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        // constant images have zero variances and covariance, so the
        // contrast-structure factor is C2/C2 = 1 and only the luminance
        // term remains
        let c = 0.3;
        let x = ImageTensor::constant(16, 16, 3, c);
        let y = ImageTensor::constant(16, 16, 3, c + 0.1);
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = (2.0 * c * (c + 0.1) + c1) / (c * c + (c + 0.1) * (c + 0.1) + c1);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        // independent direct 2D-window implementation
        let a = random_image(14, 13, 7);
        let b = random_image(14, 13, 8);
        let got = ssim(&a, &b).unwrap();

        let mut k2d = [[0.0; 11]; 11];
        let k1 = {
            let mut k = [0.0; 11];
            let mut sum = 0.0;
            for (i, v) in k.iter_mut().enumerate() {
                let d = i as f64 - 5.0;
                *v = (-d * d / 4.5).exp();
                sum += *v;
            }
            for v in &mut k {
                *v /= sum;
            }
            k
        };
        for i in 0..11 {
            for j in 0..11 {
                k2d[i][j] = k1[i] * k1[j];
            }
        }
        let (h, w) = (14, 13);
        let mut chans = Vec::new();
        for c in 0..3 {
            let mut acc = 0.0;
            let mut count = 0;
            for y0 in 0..h - 10 {
                for x0 in 0..w - 10 {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let kv = k2d[i][j];
                            let xv = a.get(y0 + i, x0 + j, c);
                            let yv = b.get(y0 + i, x0 + j, c);
                            mx += kv * xv;
                            my += kv * yv;
                            mxx += kv * xv * xv;
                            myy += kv * yv * yv;
                            mxy += kv * xv * yv;
                        }
                    }
                    let c1 = 0.0001;
                    let c2 = 0.0009;
                    let vx = mxx - mx * mx;
                    let vy = myy - my * my;
                    let cov = mxy - mx * my;
                    acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            chans.push(acc / count as f64);
        }
        let oracle = chans.iter().sum::<f64>() / 3.0;
        assert!((got - oracle).abs() < 1e-4, "{got} vs {oracle}");
    }

    #[test]
    fn metrics_are_symmetric_and_monotone_under_noise() {
        let a = random_image(16, 16, 9);
        let b = random_image(16, 16, 10);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert_eq!(mean_l1_pct(&a, &b).unwrap(), mean_l1_pct(&b, &a).unwrap());

        let mut rng = Rng::new(11);
        let noise: Vec<f64> = (0..a.data().len()).map(|_| rng.uniform() - 0.5).collect();
        let mut prev_psnr = f64::INFINITY;
        let mut prev_ssim = 2.0;
        for amp in [0.02, 0.08, 0.2] {
            let mut noisy = a.clone();
            for (v, n) in noisy.data_mut().iter_mut().zip(&noise) {
                *v = (*v + amp * n).clamp(0.0, 1.0);
            }
            let p = psnr(&a, &noisy).unwrap();
            let s = ssim(&a, &noisy).unwrap();
            assert!(p < prev_psnr);
            assert!(s < prev_ssim);
            prev_psnr = p;
            prev_ssim = s;
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_image(8, 8, 12);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn dataset_eval_self_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let da = dir.path().join("a");
        let db = dir.path().join("b");
        std::fs::create_dir_all(&da).unwrap();
        std::fs::create_dir_all(&db).unwrap();
        for i in 0..3 {
            let img = random_image(16, 16, 20 + i);
            crate::image::save_png(&img, da.join(format!("img{i}.png"))).unwrap();
            crate::image::save_png(&img, db.join(format!("img{i}.png"))).unwrap();
        }
        let report = evaluate_dataset(&da, &db).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.psnr, PSNR_CAP_DB);
        assert!((report.ssim - 1.0).abs() < 1e-12);
        assert_eq!(report.l1_pct, 0.0);
        assert!(report.to_csv().contains("AGGREGATE"));

        // unpaired file
        crate::image::save_png(&random_image(16, 16, 30), da.join("extra.png")).unwrap();
        match evaluate_dataset(&da, &db) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("extra.png")),
            other => panic!("expected unpaired error, got {other:?}"),
        }
    }

    #[test]
    fn aggregates_are_means() {
        let rows = vec![
            EvalRow {
                name: "a".into(),
                psnr: 20.0,
                ssim: 0.8,
                l1_pct: 4.0,
            },
            EvalRow {
                name: "b".into(),
                psnr: 30.0,
                ssim: 0.9,
                l1_pct: 2.0,
            },
            EvalRow {
                name: "c".into(),
                psnr: 40.0,
                ssim: 1.0,
                l1_pct: 0.0,
            },
        ];
        let r = EvalReport::from_rows(rows, None);
        assert!((r.psnr - 30.0).abs() < 1e-12);
        assert!((r.ssim - 0.9).abs() < 1e-12);
        assert!((r.l1_pct - 2.0).abs() < 1e-12);
    }
}
