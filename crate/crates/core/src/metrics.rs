//! Vertex-distance accuracy curves against ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::AnnotationSet;

/// Distance between an evaluated vertex and its ground-truth counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceRecord {
    pub polygon: usize,
    pub vertex: usize,
    pub distance: f64,
}

/// Pairs vertices by (polygon index, vertex index).
pub fn vertex_distances(eval: &AnnotationSet, gt: &AnnotationSet) -> Result<Vec<DistanceRecord>> {
    if !eval.same_structure(gt) {
        return Err(Error::domain(format!(
            "annotation structure mismatch for {}: {} polygons / {} vertices vs {} / {}",
            gt.image_id,
            eval.polygons.len(),
            eval.vertex_count(),
            gt.polygons.len(),
            gt.vertex_count()
        )));
    }
    let mut out = Vec::with_capacity(gt.vertex_count());
    for (pi, (pe, pg)) in eval.polygons.iter().zip(&gt.polygons).enumerate() {
        for (vi, (&a, &b)) in pe.vertices().iter().zip(pg.vertices()).enumerate() {
            out.push(DistanceRecord { polygon: pi, vertex: vi, distance: (a - b).norm() });
        }
    }
    Ok(out)
}

pub const DEFAULT_THRESHOLD_COUNT: usize = 64;
pub const DEFAULT_THRESHOLD_MIN: f64 = 0.125;
pub const DEFAULT_THRESHOLD_MAX: f64 = 64.0;

/// `n` log-spaced thresholds from `lo` to `hi` inclusive.
pub fn log_thresholds(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) || n < 2 {
        return Err(Error::config(format!("threshold grid needs 0 < lo < hi and n >= 2, got [{lo}, {hi}] x {n}")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|k| match k {
            0 => lo,
            k if k == n - 1 => hi,
            k => (a + (b - a) * k as f64 / (n - 1) as f64).exp(),
        })
        .collect())
}

pub fn default_thresholds() -> Vec<f64> {
    log_thresholds(DEFAULT_THRESHOLD_MIN, DEFAULT_THRESHOLD_MAX, DEFAULT_THRESHOLD_COUNT).expect("valid default grid")
}

fn sorted_distances(records: &[DistanceRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::domain("no distance records"));
    }
    let mut d: Vec<f64> = records.iter().map(|r| r.distance).collect();
    if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::domain("distances must be finite and non-negative"));
    }
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Fraction of records with distance strictly below each threshold.
pub fn accuracy_cdf(records: &[DistanceRecord], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    let d = sorted_distances(records)?;
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Error::domain("thresholds must be finite and strictly ascending"));
    }
    let n = d.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, d.partition_point(|&v| v < t) as f64 / n))
        .collect())
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]); position
/// `q * (n - 1)` between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles {
    pub q50: f64,
    pub q90: f64,
    pub q95: f64,
}

pub fn quantiles(records: &[DistanceRecord]) -> Result<Quantiles> {
    let d = sorted_distances(records)?;
    Ok(Quantiles {
        q50: quantile_sorted(&d, 0.5),
        q90: quantile_sorted(&d, 0.9),
        q95: quantile_sorted(&d, 0.95),
    })
}

pub fn mean_distance(records: &[DistanceRecord]) -> Result<f64> {
    let d = sorted_distances(records)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Accuracy curve and summary of one round under one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundCurve {
    pub round: usize,
    pub mode: String,
    pub cdf: Vec<(f64, f64)>,
    pub quantiles: Quantiles,
}

impl RoundCurve {
    pub fn from_records(round: usize, mode: &str, records: &[DistanceRecord], thresholds: &[f64]) -> Result<Self> {
        Ok(RoundCurve {
            round,
            mode: mode.to_string(),
            cdf: accuracy_cdf(records, thresholds)?,
            quantiles: quantiles(records)?,
        })
    }
}

pub const CDF_HEADER: &str = "round,mode,tau_px,fraction";
pub const QUANTILES_HEADER: &str = "round,mode,q50,q90,q95";

pub fn cdf_csv(curves: &[RoundCurve]) -> String {
    let mut s = format!("{CDF_HEADER}\n");
    for c in curves {
        for (t, f) in &c.cdf {
            let _ = writeln!(s, "{},{},{},{}", c.round, c.mode, t, f);
        }
    }
    s
}

pub fn quantiles_csv(curves: &[RoundCurve]) -> String {
    let mut s = format!("{QUANTILES_HEADER}\n");
    for c in curves {
        let q = c.quantiles;
        let _ = writeln!(s, "{},{},{},{},{}", c.round, c.mode, q.q50, q.q90, q.q95);
    }
    s
}

/// Log-x line plot of the curves.
pub fn cdf_svg(curves: &[RoundCurve]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let taus = curves.iter().flat_map(|c| c.cdf.iter().map(|p| p.0)).filter(|t| *t > 0.0);
    let (lo, hi) = taus.fold((f64::INFINITY, 0.0f64), |(lo, hi), t| (lo.min(t), hi.max(t)));
    let (lo, hi) = if lo < hi { (lo.ln(), hi.ln()) } else { (0.0, 1.0) };
    let px = |t: f64| M + (t.max(1e-12).ln() - lo) / (hi - lo) * (W - 2.0 * M);
    let py = |f: f64| H - M - f * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} L{M} {} L{} {}" stroke="black" fill="none"/>"#,
        M,
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">vertex distance (px, log scale)</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">fraction of vertices</text>"#, H / 2.0, H / 2.0);
    for (k, c) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = c
            .cdf
            .iter()
            .filter(|p| p.0 > 0.0)
            .map(|&(t, f)| format!("{:.2},{:.2}", px(t), py(f)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{} round {}</text>"#,
            M + 10.0,
            M + 14.0 * (k + 1) as f64,
            xml_escape(&c.mode),
            c.round
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `cdf.csv`, `quantiles.csv` and optionally `cdf.svg` into `dir`.
pub fn emit_report(curves: &[RoundCurve], dir: &Path, svg: bool) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::domain("report needs at least one round"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("cdf.csv"), &cdf_csv(curves))?;
    write_text(&dir.join("quantiles.csv"), &quantiles_csv(curves))?;
    if svg {
        write_text(&dir.join("cdf.svg"), &cdf_svg(curves))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Extent, Point, Polygon};
    use proptest::prelude::*;

    fn records(d: &[f64]) -> Vec<DistanceRecord> {
        d.iter().enumerate().map(|(k, &distance)| DistanceRecord { polygon: 0, vertex: k, distance }).collect()
    }

    fn set(shift: Point) -> AnnotationSet {
        let polys = vec![
            Polygon::new(vec![Point::new(1.0, 1.0), Point::new(9.0, 1.5), Point::new(4.0, 8.0)]).unwrap(),
            Polygon::new(vec![Point::new(20.0, 20.0), Point::new(30.0, 20.0), Point::new(30.0, 25.0), Point::new(20.0, 25.0)]).unwrap(),
        ];
        AnnotationSet::new("s", Extent::new(32, 32), polys).map_vertices(|p| p + shift).unwrap()
    }

    #[test]
    fn distances_of_identical_and_shifted_sets() {
        let a = set(Point::ZERO);
        assert!(vertex_distances(&a, &a).unwrap().iter().all(|r| r.distance == 0.0));
        let b = set(Point::new(3.0, 4.0));
        let r = vertex_distances(&b, &a).unwrap();
        assert_eq!(r.len(), 7);
        assert!(r.iter().all(|r| (r.distance - 5.0).abs() < 1e-12));
        assert_eq!((r[3].polygon, r[3].vertex), (1, 0));
    }

    #[test]
    fn structure_mismatch_is_domain_error() {
        let a = set(Point::ZERO);
        let mut b = a.clone();
        b.polygons.pop();
        assert!(matches!(vertex_distances(&a, &b), Err(Error::Domain(_))));
    }

    #[test]
    fn cdf_examples() {
        let r = records(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(accuracy_cdf(&r, &[2.5]).unwrap(), vec![(2.5, 0.75)]);
        assert_eq!(accuracy_cdf(&r, &[0.0]).unwrap(), vec![(0.0, 0.0)]);
        assert_eq!(accuracy_cdf(&r, &[3.0, 3.5]).unwrap(), vec![(3.0, 0.75), (3.5, 1.0)]);
        assert!(accuracy_cdf(&[], &[1.0]).is_err());
        assert!(accuracy_cdf(&r, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn default_grid_shape() {
        let g = default_thresholds();
        assert_eq!(g.len(), 64);
        assert_eq!(g[0], 0.125);
        assert_eq!(g[63], 64.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        let ratio = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
    }

    #[test]
    fn quantile_examples() {
        let q = quantiles(&records(&[4.0, 1.0, 3.0, 2.0, 5.0])).unwrap();
        assert_eq!(q.q50, 3.0);
        assert!((q.q90 - 4.6).abs() < 1e-12);
        assert!((q.q95 - 4.8).abs() < 1e-12);
        assert_eq!(quantiles(&records(&[7.0])).unwrap(), Quantiles { q50: 7.0, q90: 7.0, q95: 7.0 });
    }

    #[test]
    fn csv_layout() {
        let c = RoundCurve::from_records(1, "standard", &records(&[1.0]), &[2.0]).unwrap();
        assert_eq!(cdf_csv(&[c.clone()]), "round,mode,tau_px,fraction\n1,standard,2,1\n");
        assert_eq!(quantiles_csv(&[c]), "round,mode,q50,q90,q95\n1,standard,1,1,1\n");
    }

    #[test]
    fn emit_report_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = RoundCurve::from_records(2, "AS1", &records(&[0.3, 0.7, 9.0]), &default_thresholds()).unwrap();
        emit_report(&[c.clone()], dir.path(), true).unwrap();
        let text = fs::read_to_string(dir.path().join("cdf.csv")).unwrap();
        let parsed: Vec<(f64, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                assert_eq!((f[0], f[1]), ("2", "AS1"));
                (f[2].parse().unwrap(), f[3].parse().unwrap())
            })
            .collect();
        assert_eq!(parsed, c.cdf);
        let svg = fs::read_to_string(dir.path().join("cdf.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(emit_report(&[], dir.path(), false).is_err());
    }

    proptest! {
        #[test]
        fn cdf_matches_counting_oracle(d in prop::collection::vec(0.0f64..70.0, 1..200)) {
            let r = records(&d);
            let g = default_thresholds();
            let cdf = accuracy_cdf(&r, &g).unwrap();
            for (k, &(t, f)) in cdf.iter().enumerate() {
                let count = d.iter().filter(|&&v| v < t).count();
                prop_assert_eq!(f, count as f64 / d.len() as f64);
                if k > 0 {
                    prop_assert!(f >= cdf[k - 1].1);
                }
            }
        }

        #[test]
        fn uniform_shift_gives_step(dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
            let gt = set(Point::ZERO);
            let ev = gt.map_vertices(|p| p + Point::new(dx, dy)).unwrap();
            let r = vertex_distances(&ev, &gt).unwrap();
            let d = r[0].distance;
            prop_assume!(d > 1e-6);
            // All records share one distance up to rounding.
            let lo = r.iter().map(|x| x.distance).fold(f64::INFINITY, f64::min);
            let hi = r.iter().map(|x| x.distance).fold(0.0, f64::max);
            let cdf = accuracy_cdf(&r, &[lo * (1.0 - 1e-12), hi * (1.0 + 1e-12)]).unwrap();
            prop_assert_eq!(cdf[0].1, 0.0);
            prop_assert_eq!(cdf[1].1, 1.0);
        }
    }
}
