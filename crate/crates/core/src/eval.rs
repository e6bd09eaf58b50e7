//! Inference, PSNR/bpp evaluation and rate–distortion tables and plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alloc::AllocationPlan;
use crate::data::color::to_u8;
use crate::data::image_io::{load_png, save_png};
use crate::data::manifest::{DatasetManifest, ImagePair};
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::psnr;
use crate::model::Msgdn;
use crate::tensor::Tensor;

pub const EVAL_HEADER: &str = "# msgdn-eval v1";
pub const RD_HEADER: &str = "# msgdn-rd v1";
pub const CANDIDATES_HEADER: &str = crate::alloc::CANDIDATES_HEADER;

/// Which samples PSNR is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrMode {
    /// All three 8-bit RGB channels.
    #[default]
    Rgb,
    /// BT.601 luma computed from the 8-bit RGB samples.
    Y,
}

fn samples(image: &Tensor, mode: PsnrMode) -> Result<Vec<f64>> {
    let (n, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected RGB, got {c} channels")));
    }
    let q: Vec<f64> = image.data().iter().map(|&v| to_u8(v) as f64).collect();
    Ok(match mode {
        PsnrMode::Rgb => q,
        PsnrMode::Y => {
            let plane = h * w;
            let mut y = Vec::with_capacity(n * plane);
            for b in 0..n {
                let base = b * 3 * plane;
                for p in 0..plane {
                    y.push(0.299 * q[base + p] + 0.587 * q[base + plane + p] + 0.114 * q[base + 2 * plane + p]);
                }
            }
            y
        }
    })
}

/// Mean squared error of the 8-bit quantized images, on the 0–255 scale.
pub fn mse_8bit(a: &Tensor, b: &Tensor, mode: PsnrMode) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (x, y) = (samples(a, mode)?, samples(b, mode)?);
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64)
}

/// PSNR with peak 255 after quantizing both images to 8 bits.
pub fn psnr_8bit(a: &Tensor, b: &Tensor, mode: PsnrMode) -> Result<f64> {
    psnr(mse_8bit(a, b, mode)?, 255.0)
}

/// Runs the model on one PNG and writes the 8-bit result.
pub fn infer(model: &Msgdn, input: &Path, output: &Path) -> Result<()> {
    let image = load_png(input)?;
    let out = model.forward(&image)?;
    save_png(output, &out)
}

/// Loads a generator (from a parameter archive or a training checkpoint) and
/// runs [`infer`].
pub fn infer_with_checkpoint(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    infer(&Msgdn::load(checkpoint)?, input, output)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub label: String,
    pub bpp: f64,
    pub psnr_db: f64,
    pub n_images: usize,
}

impl RdPoint {
    pub fn new(label: impl Into<String>, bpp: f64, psnr_db: f64, n_images: usize) -> Result<Self> {
        if !(bpp > 0.0) || n_images == 0 {
            return Err(Error::config("RD points need bpp > 0 and at least one image"));
        }
        Ok(RdPoint {
            label: label.into(),
            bpp,
            psnr_db,
            n_images,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image: String,
    pub qp: i32,
    pub bits: u64,
    pub width: usize,
    pub height: usize,
    pub codec_psnr_db: f64,
    pub post_psnr_db: Option<f64>,
}

impl ImageEval {
    pub fn bpp(&self) -> f64 {
        self.bits as f64 / (self.width * self.height) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ImageEval>,
    pub codec: RdPoint,
    pub post: Option<RdPoint>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Per-image PSNR of the codec output and, with a model, of the
/// post-processed output, over the images chosen by `plan`.
pub fn evaluate(
    manifest: &DatasetManifest,
    model: Option<&Msgdn>,
    plan: &AllocationPlan,
    mode: PsnrMode,
    label: &str,
) -> Result<EvalReport> {
    let mut chosen: Vec<&ImagePair> = Vec::new();
    let mut missing = Vec::new();
    for c in &plan.choices {
        match manifest.find(&c.image, c.qp) {
            Some(p) => chosen.push(p),
            None => missing.push(format!("{} (qp {}): not in manifest", c.image, c.qp)),
        }
    }
    for p in &chosen {
        for f in [&p.original, &p.compressed] {
            let path = manifest.resolve(f);
            if !path.is_file() {
                missing.push(format!("{}: file missing", path.display()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Other(format!("cannot evaluate plan:\n  {}", missing.join("\n  "))));
    }
    chosen.sort_by(|a, b| a.key().cmp(&b.key()).then(a.qp.cmp(&b.qp)));
    if chosen.is_empty() {
        return Err(Error::config("plan selects no images"));
    }

    let rows = exec::map_slice(&chosen, |p| -> Result<ImageEval> {
        let original = load_png(&manifest.resolve(&p.original))?;
        let decoded = load_png(&manifest.resolve(&p.compressed))?;
        let codec_psnr_db = psnr_8bit(&decoded, &original, mode)?;
        let post_psnr_db = match model {
            Some(m) => Some(psnr_8bit(&m.forward(&decoded)?, &original, mode)?),
            None => None,
        };
        Ok(ImageEval {
            image: p.key(),
            qp: p.qp,
            bits: p.bits,
            width: p.width,
            height: p.height,
            codec_psnr_db,
            post_psnr_db,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let n = rows.len();
    let bpp = mean(rows.iter().map(|r| r.bpp()));
    let codec = RdPoint::new(format!("{label}codec"), bpp, mean(rows.iter().map(|r| r.codec_psnr_db)), n)?;
    let post = match model {
        Some(_) => Some(RdPoint::new(
            format!("{label}codec+msgdn"),
            bpp,
            mean(rows.iter().map(|r| r.post_psnr_db.unwrap())),
            n,
        )?),
        None => None,
    };
    Ok(EvalReport { rows, codec, post })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "qp", "bits", "width", "height", "bpp", "codec_psnr_db", "post_psnr_db"])
            .unwrap();
        for r in &self.rows {
            w.write_record([
                r.image.clone(),
                r.qp.to_string(),
                r.bits.to_string(),
                r.width.to_string(),
                r.height.to_string(),
                format!("{}", r.bpp()),
                format!("{}", r.codec_psnr_db),
                r.post_psnr_db.map(|v| format!("{v}")).unwrap_or_default(),
            ])
            .unwrap();
        }
        format!("{EVAL_HEADER}\n{}", String::from_utf8(w.into_inner().unwrap()).unwrap())
    }

    pub fn points(&self) -> Vec<RdPoint> {
        std::iter::once(self.codec.clone()).chain(self.post.clone()).collect()
    }
}

/// Candidate table for the allocator: one row per manifest pair, with the
/// codec-only PSNR as `quality_db` and, given a model, the post-processed
/// PSNR as `post_quality_db`.
pub fn candidates_csv(manifest: &DatasetManifest, model: Option<&Msgdn>, mode: PsnrMode) -> Result<String> {
    let mut pairs: Vec<&ImagePair> = manifest.pairs.iter().collect();
    pairs.sort_by(|a, b| a.key().cmp(&b.key()).then(a.qp.cmp(&b.qp)));
    let rows = exec::map_slice(&pairs, |p| -> Result<(f64, Option<f64>)> {
        let original = load_png(&manifest.resolve(&p.original))?;
        let decoded = load_png(&manifest.resolve(&p.compressed))?;
        let q = psnr_8bit(&decoded, &original, mode)?;
        let post = match model {
            Some(m) => Some(psnr_8bit(&m.forward(&decoded)?, &original, mode)?),
            None => None,
        };
        Ok((q, post))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image", "qp", "bits", "width", "height", "quality_db"];
    if model.is_some() {
        header.push("post_quality_db");
    }
    w.write_record(&header).unwrap();
    for (p, (q, post)) in pairs.iter().zip(rows) {
        let mut rec = vec![
            p.key(),
            p.qp.to_string(),
            p.bits.to_string(),
            p.width.to_string(),
            p.height.to_string(),
            format!("{q}"),
        ];
        if let Some(v) = post {
            rec.push(format!("{v}"));
        }
        w.write_record(&rec).unwrap();
    }
    Ok(format!("{CANDIDATES_HEADER}\n{}", String::from_utf8(w.into_inner().unwrap()).unwrap()))
}

/// Points sorted by `(label, bpp)`.
pub fn sorted_points(points: &[RdPoint]) -> Vec<RdPoint> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.label.cmp(&b.label).then(a.bpp.total_cmp(&b.bpp)));
    p
}

pub fn rd_csv(points: &[RdPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::config("no RD points to write"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "bpp", "psnr_db", "n_images"]).unwrap();
    for p in sorted_points(points) {
        w.write_record([p.label, format!("{}", p.bpp), format!("{}", p.psnr_db), p.n_images.to_string()])
            .unwrap();
    }
    Ok(format!("{RD_HEADER}\n{}", String::from_utf8(w.into_inner().unwrap()).unwrap()))
}

pub fn parse_rd_csv(text: &str) -> Result<Vec<RdPoint>> {
    if !text.starts_with(RD_HEADER) {
        return Err(Error::parse("RD CSV", format!("missing `{RD_HEADER}` header")));
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse("RD CSV", e))?;
        let get = |i: usize| rec.get(i).ok_or_else(|| Error::parse("RD CSV", "short row"));
        let num = |i: usize| -> Result<f64> { get(i)?.parse().map_err(|e| Error::parse("RD CSV", e)) };
        out.push(RdPoint::new(
            get(0)?,
            num(1)?,
            num(2)?,
            get(3)?.parse().map_err(|e| Error::parse("RD CSV", e))?,
        )?);
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// SVG plot of PSNR against bpp with one polyline per label.
pub fn rd_svg(points: &[RdPoint]) -> Result<String> {
    let finite: Vec<RdPoint> = sorted_points(points)
        .into_iter()
        .filter(|p| p.psnr_db.is_finite())
        .collect();
    if finite.is_empty() {
        return Err(Error::config("no finite RD points to plot"));
    }
    let (w, h, m) = (640.0, 420.0, 60.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &finite {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.psnr_db);
        y1 = y1.max(p.psnr_db);
    }
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).max(1e-3);
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        t = m,
        b = h - m,
        r = w - m
    )
    .unwrap();
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{:.3}</text>"#,
            sx(fx),
            h - m + 16.0,
            fx
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.2}</text>"#,
            m - 6.0,
            sy(fy) + 4.0,
            fy
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">bpp</text>"#, w / 2.0, h - 16.0).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">PSNR (dB)</text>"#,
        h / 2.0,
        h / 2.0
    )
    .unwrap();
    let mut by_label: BTreeMap<&str, Vec<&RdPoint>> = BTreeMap::new();
    for p in &finite {
        by_label.entry(&p.label).or_default().push(p);
    }
    for (i, (label, pts)) in by_label.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr_db))).collect();
        writeln!(
            s,
            r#"<polyline data-label="{}" points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            xml_escape(label),
            coords.join(" ")
        )
        .unwrap();
        for c in &coords {
            let (cx, cy) = c.split_once(',').unwrap();
            writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#).unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            m + 10.0,
            m + 14.0 * (i as f64 + 1.0),
            xml_escape(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes the RD table and plot.
pub fn emit_rd(points: &[RdPoint], out_csv: &Path, out_plot: &Path) -> Result<()> {
    let csv = rd_csv(points)?;
    let svg = rd_svg(points)?;
    for (path, text) in [(out_csv, csv), (out_plot, svg)] {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::mse_loss;

    #[test]
    fn psnr_matches_losses_module() {
        let a = Tensor::from_fn([1, 3, 4, 5], |i| ((i * 29) % 256) as f64 / 255.0);
        let b = Tensor::from_fn([1, 3, 4, 5], |i| ((i * 29 + 3 * (i % 4)) % 256) as f64 / 255.0);
        assert_eq!(psnr_8bit(&a, &a, PsnrMode::Rgb).unwrap(), f64::INFINITY);
        let expected = psnr(mse_loss(&a, &b).unwrap(), 1.0).unwrap();
        assert!((psnr_8bit(&a, &b, PsnrMode::Rgb).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn y_mode_ignores_chroma_only_changes_of_zero_luma_weight() {
        let a = Tensor::full([1, 3, 2, 2], 0.5);
        let mut b = a.clone();
        b.data_mut()[0] = 0.6; // one red sample
        let y = psnr_8bit(&a, &b, PsnrMode::Y).unwrap();
        let rgb = psnr_8bit(&a, &b, PsnrMode::Rgb).unwrap();
        assert!(y.is_finite() && rgb.is_finite() && y != rgb);
    }

    #[test]
    fn rd_csv_round_trip_and_order() {
        let pts = vec![
            RdPoint::new("codec", 0.3, 33.0, 4).unwrap(),
            RdPoint::new("codec", 0.1, 29.123456789012345, 4).unwrap(),
            RdPoint::new("codec", 0.2, 31.0, 4).unwrap(),
        ];
        let text = rd_csv(&pts).unwrap();
        assert_eq!(text.lines().count(), 5);
        let back = parse_rd_csv(&text).unwrap();
        assert_eq!(back, sorted_points(&pts));
        assert_eq!(back.iter().map(|p| p.bpp).collect::<Vec<_>>(), vec![0.1, 0.2, 0.3]);
        assert!(rd_csv(&[]).is_err());
        assert!(RdPoint::new("x", 0.0, 30.0, 1).is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_label() {
        let pts = vec![
            RdPoint::new("codec", 0.1, 29.0, 4).unwrap(),
            RdPoint::new("codec", 0.2, 31.0, 4).unwrap(),
            RdPoint::new("codec+msgdn", 0.1, 29.5, 4).unwrap(),
        ];
        let svg = rd_svg(&pts).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
