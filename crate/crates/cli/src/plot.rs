//! Static SVG plots regenerated deterministically from run CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::formats::{parse_csv, write_atomic, FormatError};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#555555"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

/// Render a multi-series line plot.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (WIDTH - MARGIN_L - MARGIN_R);
    let sy =
        |y: f64| HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{}</text>",
        MARGIN_L,
        escape(title)
    );
    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>",
        l = MARGIN_L,
        r = WIDTH - MARGIN_R,
        t = MARGIN_T,
        b = HEIGHT - MARGIN_B
    );
    // Min/max tick labels.
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{x_min:.3}</text>",
        MARGIN_L,
        HEIGHT - MARGIN_B + 16.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{x_max:.3}</text>",
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B + 16.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{y_min:.3}</text>",
        MARGIN_L - 6.0,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{y_max:.3}</text>",
        MARGIN_L - 6.0,
        MARGIN_T + 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{}</text>",
        (WIDTH - MARGIN_R + MARGIN_L) / 2.0 - 30.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{}</text>",
        (HEIGHT + MARGIN_T) / 2.0,
        (HEIGHT + MARGIN_T) / 2.0,
        escape(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\"{dash} stroke-width=\"1.6\" points=\"{}\"/>",
                pts.join(" ")
            );
        } else if pts.len() == 1 {
            let xy: Vec<&str> = pts[0].split(',').collect();
            let _ = writeln!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>",
                xy[0], xy[1]
            );
        }
        let ly = MARGIN_T + 14.0 * i as f64 + 8.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{ly}\" x2=\"{x2}\" y2=\"{ly}\" stroke=\"{color}\"{dash} stroke-width=\"1.6\"/>\
             <text x=\"{tx}\" y=\"{ty}\" font-family=\"monospace\" font-size=\"11\">{name}</text>",
            x = WIDTH - MARGIN_R + 8.0,
            x2 = WIDTH - MARGIN_R + 28.0,
            tx = WIDTH - MARGIN_R + 34.0,
            ty = ly + 4.0,
            name = escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Result<Vec<f64>, FormatError> {
    let idx = header
        .iter()
        .position(|h| h == name)
        .ok_or(FormatError::Malformed {
            what: "run csv",
            reason: format!("missing column {name:?}"),
        })?;
    rows.iter()
        .map(|r| {
            r.get(idx)
                .and_then(|c| c.parse::<f64>().ok())
                .ok_or(FormatError::Malformed {
                    what: "run csv",
                    reason: format!("bad value in column {name:?}"),
                })
        })
        .collect()
}

fn column_str<'a>(
    header: &[String],
    rows: &'a [Vec<String>],
    name: &str,
) -> Result<Vec<&'a str>, FormatError> {
    let idx = header
        .iter()
        .position(|h| h == name)
        .ok_or(FormatError::Malformed {
            what: "run csv",
            reason: format!("missing column {name:?}"),
        })?;
    Ok(rows.iter().map(|r| r[idx].as_str()).collect())
}

/// Regenerate every plot the run directory has data for. Returns the list
/// of files written.
pub fn plot_run_dir(dir: &Path) -> Result<Vec<String>, FormatError> {
    if !dir.is_dir() {
        return Err(FormatError::Malformed {
            what: "run directory",
            reason: format!("{} is not a directory", dir.display()),
        });
    }
    let mut written = Vec::new();

    let bounds_csv = dir.join("bounds.csv");
    if bounds_csv.is_file() {
        let (header, rows) = parse_csv(&fs::read_to_string(&bounds_csv)?)?;
        let k = column(&header, &rows, "k")?;
        let mut series = Vec::new();
        for name in ["elbo", "iwae", "piwo", "ipiwo"] {
            let vals = column(&header, &rows, name)?;
            series.push(Series {
                name: name.to_uppercase(),
                points: k.iter().copied().zip(vals).collect(),
                dashed: false,
            });
        }
        for (name, label) in [
            ("log_px", "log p(x)"),
            ("piwo_limit", "log p(x) - KL_y"),
            ("ipiwo_limit", "log p(x) - KL_z"),
        ] {
            let vals = column(&header, &rows, name)?;
            series.push(Series {
                name: label.to_string(),
                points: k.iter().copied().zip(vals).collect(),
                dashed: true,
            });
        }
        let svg = line_plot("Exact bound vs k", "k", "nats", &series);
        let path = dir.join("bound_vs_k.svg");
        write_atomic(&path, svg.as_bytes())?;
        written.push("bound_vs_k.svg".to_string());
    }

    let results_csv = dir.join("results.csv");
    if results_csv.is_file() {
        let (header, rows) = parse_csv(&fs::read_to_string(&results_csv)?)?;
        let ok_rows: Vec<Vec<String>> = {
            let status = column_str(&header, &rows, "status")?;
            rows.iter()
                .zip(status)
                .filter(|(_, s)| *s == "ok")
                .map(|(r, _)| r.clone())
                .collect()
        };
        let flavors = column_str(&header, &ok_rows, "flavor")?
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let rates = column(&header, &ok_rows, "rate")?;
        let means = column(&header, &ok_rows, "mean_accuracy")?;
        let mut names: Vec<String> = flavors.clone();
        names.sort();
        names.dedup();
        let mut series = Vec::new();
        for name in names {
            let mut points: Vec<(f64, f64)> = flavors
                .iter()
                .zip(rates.iter().zip(&means))
                .filter(|(f, _)| **f == name)
                .map(|(_, (r, m))| (r.log10(), *m))
                .collect();
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            series.push(Series {
                name,
                points,
                dashed: false,
            });
        }
        let svg = line_plot(
            "Test accuracy vs supervision rate",
            "log10(rate)",
            "accuracy",
            &series,
        );
        let path = dir.join("accuracy_vs_rate.svg");
        write_atomic(&path, svg.as_bytes())?;
        written.push("accuracy_vs_rate.svg".to_string());
    }

    // Anneal trace: the first per-split trace CSV found, in sorted order.
    let mut trace_files: Vec<_> = walk_files(dir)?
        .into_iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("trace") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    trace_files.sort();
    if let Some(trace) = trace_files.first() {
        let (header, rows) = parse_csv(&fs::read_to_string(trace)?)?;
        let steps = column(&header, &rows, "step")?;
        let beta = column(&header, &rows, "beta")?;
        let bound = column(&header, &rows, "objective")?;
        // Normalize the objective into [0, 1] so both traces share an axis.
        let (lo, hi) = bounds(&bound);
        let norm: Vec<f64> = bound.iter().map(|b| (b - lo) / (hi - lo)).collect();
        let series = [
            Series {
                name: "beta".to_string(),
                points: steps.iter().copied().zip(beta).collect(),
                dashed: false,
            },
            Series {
                name: "objective (scaled)".to_string(),
                points: steps.iter().copied().zip(norm).collect(),
                dashed: false,
            },
        ];
        let svg = line_plot("KL anneal trace", "step", "value", &series);
        let path = dir.join("anneal_trace.svg");
        write_atomic(&path, svg.as_bytes())?;
        written.push("anneal_trace.svg".to_string());
    }

    if written.is_empty() {
        return Err(FormatError::Malformed {
            what: "run directory",
            reason: format!("no plottable CSVs under {}", dir.display()),
        });
    }
    Ok(written)
}

fn walk_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, FormatError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let series = [
            Series {
                name: "a".to_string(),
                points: vec![(1.0, 0.5), (2.0, 0.6), (3.0, 0.55)],
                dashed: false,
            },
            Series {
                name: "limit".to_string(),
                points: vec![(1.0, 0.7), (3.0, 0.7)],
                dashed: true,
            },
        ];
        let one = line_plot("t", "x", "y", &series);
        let two = line_plot("t", "x", "y", &series);
        assert_eq!(one, two);
        assert!(one.starts_with("<svg"));
        assert!(one.trim_end().ends_with("</svg>"));
        assert_eq!(one.matches("<polyline").count(), 2);
        assert!(one.contains("stroke-dasharray"));
    }

    #[test]
    fn empty_run_dir_is_an_error() {
        let dir = std::env::temp_dir().join("piwo_plot_test_empty");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        assert!(plot_run_dir(&dir).is_err());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = std::env::temp_dir().join("piwo_plot_test_cols");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("bounds.csv"), "k,elbo\n1,-2.0\n").unwrap();
        match plot_run_dir(&dir) {
            Err(FormatError::Malformed { reason, .. }) => {
                assert!(reason.contains("iwae"), "reason: {reason}");
            }
            other => panic!("expected missing-column error, got {other:?}"),
        }
        let _ = fs::remove_dir_all(&dir);
    }
}
