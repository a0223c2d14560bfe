//! Training history export, PCA projection and SVG scatter plots.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::schedule::Stage;
use crate::trainer::EpochRecord;

pub const HISTORY_HEADER: &str = "epoch,stage,lambda,beta,l_ce,l_supcl,l_adv,l_crosscl,src_acc,tgt_acc,pseudo_acc,lr";

/// Formats `v` with 6 significant digits in the style of C's `%g`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    // the exponent is taken after rounding so 999999.5 becomes 1e+06
    let sci = format!("{v:.5e}");
    let (mantissa, e) = sci.split_once('e').expect("exponent marker");
    let e: i32 = e.parse().expect("integer exponent");
    if (-5..6).contains(&e) {
        let decimals = (5 - e).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if e < 0 { '-' } else { '+' }, e.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map(format_sig6).unwrap_or_default()
}

pub fn history_row(r: &EpochRecord) -> String {
    [
        r.epoch.to_string(),
        r.stage.as_str().to_string(),
        format_sig6(r.lambda),
        format_sig6(r.beta),
        format_sig6(r.l_ce),
        format_sig6(r.l_supcl),
        format_sig6(r.l_adv),
        format_sig6(r.l_crosscl),
        format_sig6(r.src_acc),
        opt_field(r.tgt_acc),
        opt_field(r.pseudo_acc),
        format_sig6(r.lr),
    ]
    .join(",")
}

/// Appends history rows to a CSV, flushing after each so a crashed run
/// leaves every finished epoch on disk.
pub struct HistoryWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = HistoryWriter {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        };
        w.line(HISTORY_HEADER)?;
        Ok(w)
    }

    pub fn append(&mut self, r: &EpochRecord) -> Result<()> {
        self.line(&history_row(r))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_history(path: &Path, records: &[EpochRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot export an empty history".into()));
    }
    let mut w = HistoryWriter::create(path)?;
    records.iter().try_for_each(|r| w.append(r))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::Format("empty history file".into()))?;
    if header.trim() != HISTORY_HEADER {
        return Err(Error::Format(format!("unexpected history header: {header}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_row(&line).map_err(|m| Error::Format(format!("history line {}: {m}", i + 2)))?);
    }
    Ok(out)
}

fn parse_row(line: &str) -> std::result::Result<EpochRecord, String> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 12 {
        return Err(format!("expected 12 fields, got {}", f.len()));
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
    let opt = |i: usize| {
        if f[i].is_empty() {
            Ok(None)
        } else {
            num(i).map(Some)
        }
    };
    Ok(EpochRecord {
        epoch: f[0].parse().map_err(|e| format!("epoch: {e}"))?,
        stage: Stage::parse(f[1]).ok_or_else(|| format!("unknown stage {}", f[1]))?,
        lambda: num(2)?,
        beta: num(3)?,
        l_ce: num(4)?,
        l_supcl: num(5)?,
        l_adv: num(6)?,
        l_crosscl: num(7)?,
        src_acc: num(8)?,
        tgt_acc: opt(9)?,
        pseudo_acc: opt(10)?,
        lr: num(11)?,
        crosscl_skips: 0,
    })
}

/// Projects the rows of `x` onto its top-`k` principal components.
///
/// Each component's sign is fixed so its first nonzero coordinate is positive.
pub fn pca_project(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() < 2 {
        return Err(Error::InvalidArgument("pca needs a matrix with at least two rows".into()));
    }
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("pca: k={k} outside 1..={d}")));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    if cov.trace() <= 1e-12 {
        return Err(Error::InvalidArgument("pca: all rows are identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = DMatrix::zeros(d, k);
    for (j, &c) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(c).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        basis.set_column(j, &v);
    }
    let proj = centered * basis;
    let mut data = Vec::with_capacity(n * k);
    for r in 0..n {
        for c in 0..k {
            data.push(proj[(r, c)]);
        }
    }
    Tensor::matrix(n, k, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Deterministic SVG scatter: circles for source points, squares for target,
/// colored by class. Markers carry `class="marker"`; legend glyphs carry
/// `class="legend"`.
pub fn render_scatter(points: &Tensor, labels: &[usize], domains: &[Domain], title: &str) -> Result<String> {
    if points.rank() != 2 || points.cols() != 2 {
        return Err(Error::InvalidArgument(format!("scatter expects [n x 2] points, got {:?}", points.shape())));
    }
    let n = points.rows();
    if labels.len() != n || domains.len() != n {
        return Err(Error::ShapeMismatch {
            op: "render_scatter",
            lhs: points.shape().to_vec(),
            rhs: vec![labels.len(), domains.len()],
        });
    }
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const PAD: f64 = 40.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..n {
        let (x, y) = (points.get(r, 0), points.get(r, 1));
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = |a: f64, b: f64| if b - a > 1e-12 { b - a } else { 1.0 };
    let (sx, sy) = (span(x0, x1), span(y0, y1));
    let px = |x: f64| PAD + (x - x0) / sx * (W - 3.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / sy * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, xml_escape(title));
    for r in 0..n {
        let color = PALETTE[labels[r] % PALETTE.len()];
        let (x, y) = (px(points.get(r, 0)), py(points.get(r, 1)));
        let _ = writeln!(s, "{}", glyph("marker", domains[r], x, y, color));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let lx = W - 2.0 * PAD + 10.0;
    for (i, c) in classes.iter().enumerate() {
        let y = PAD + 16.0 * i as f64;
        let _ = writeln!(s, "{}", glyph("legend", Domain::Source, lx, y, PALETTE[c % PALETTE.len()]));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11">class {c}</text>"#, lx + 8.0, y + 4.0);
    }
    for (i, d) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        let y = PAD + 16.0 * (classes.len() + 1 + i) as f64;
        let _ = writeln!(s, "{}", glyph("legend", d, lx, y, "#444444"));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#, lx + 8.0, y + 4.0, d.as_str());
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_scatter(path: &Path, points: &Tensor, labels: &[usize], domains: &[Domain], title: &str) -> Result<()> {
    let svg = render_scatter(points, labels, domains, title)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn glyph(class: &str, d: Domain, x: f64, y: f64, color: &str) -> String {
    match d {
        Domain::Source => format!(r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#),
        Domain::Target => format!(
            r#"<rect class="{class}" x="{:.2}" y="{:.2}" width="6" height="6" fill="{color}"/>"#,
            x - 3.0,
            y - 3.0
        ),
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes embeddings as `domain,label,e0,e1,...`.
pub fn write_embeddings(path: &Path, z: &Tensor, labels: &[usize], domains: &[Domain]) -> Result<()> {
    if labels.len() != z.rows() || domains.len() != z.rows() {
        return Err(Error::ShapeMismatch {
            op: "write_embeddings",
            lhs: z.shape().to_vec(),
            rhs: vec![labels.len(), domains.len()],
        });
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut header = String::from("domain,label");
    for j in 0..z.cols() {
        let _ = write!(header, ",e{j}");
    }
    let mut body = header + "\n";
    for r in 0..z.rows() {
        let _ = write!(body, "{},{}", domains[r].as_str(), labels[r]);
        for v in z.row(r) {
            let _ = write!(body, ",{v:?}");
        }
        body.push('\n');
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<(Tensor, Vec<usize>, Vec<Domain>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))?;
    let dim = header.split(',').count().saturating_sub(2);
    let (mut data, mut labels, mut domains) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::Format(format!("embedding line {}: {m}", i + 2));
        if f.len() != dim + 2 {
            return Err(bad("wrong field count"));
        }
        domains.push(match f[0] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            _ => return Err(bad("unknown domain")),
        });
        labels.push(f[1].parse().map_err(|_| bad("bad label"))?);
        for v in &f[2..] {
            data.push(v.parse::<f64>().map_err(|_| bad("bad value"))?);
        }
    }
    Ok((Tensor::matrix(labels.len(), dim, data)?, labels, domains))
}
