//! Static SVG line charts derived from metrics CSVs. Charts are a pure
//! function of the CSV text: regenerating from the same file is
//! byte-identical.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 130.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

fn parse_csv(text: &str) -> Result<Table> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(Error::CsvParse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    if header.is_empty() || header.iter().any(|h| h.is_empty()) {
        return Err(Error::CsvParse {
            line: 1,
            message: "malformed header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::CsvParse {
                line: i + 1,
                message: format!("expected {} fields, got {}", header.len(), fields.len()),
            });
        }
        let mut row = Vec::with_capacity(fields.len());
        for (col, field) in fields.iter().enumerate() {
            let field = field.trim();
            if field.is_empty() {
                row.push(None);
            } else if let Ok(v) = field.parse::<f64>() {
                row.push(Some(v));
            } else if field == "true" {
                row.push(Some(1.0));
            } else if field == "false" {
                row.push(Some(0.0));
            } else {
                return Err(Error::CsvParse {
                    line: i + 1,
                    message: format!("non-numeric value `{field}` in column `{}`", header[col]),
                });
            }
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Render one SVG per metric column of the CSV. The first column is the x
/// axis; a `client_id` column, when present, splits rows into one series per
/// id. Returns the written paths; a header-only CSV writes nothing.
pub fn emit_plots(csv_text: &str, stem: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let table = parse_csv(csv_text)?;
    if table.rows.is_empty() {
        return Ok(Vec::new());
    }
    let series_col = table.header.iter().position(|h| h == "client_id");
    let x_col = 0usize;
    let mut written = Vec::new();
    for (col, name) in table.header.iter().enumerate() {
        if col == x_col || Some(col) == series_col {
            continue;
        }
        // series key -> points
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for row in &table.rows {
            let (Some(x), Some(y)) = (row[x_col], row[col]) else {
                continue;
            };
            // Infinite confidences and similar sentinels have no coordinate.
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            let key = match series_col {
                Some(sc) => match row[sc] {
                    Some(id) => format!("client {id}"),
                    None => "all".to_string(),
                },
                None => "all".to_string(),
            };
            match series.iter_mut().find(|(k, _)| *k == key) {
                Some((_, pts)) => pts.push((x, y)),
                None => series.push((key, vec![(x, y)])),
            }
        }
        if series.iter().all(|(_, pts)| pts.is_empty()) {
            continue;
        }
        let svg = render_chart(name, &table.header[x_col], &series);
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(format!("{stem}_{name}.svg"));
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

fn render_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - xmin) / (xmax - xmin) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - ymin) / (ymax - ymin) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{}</text>\n",
        MARGIN_L, title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L, MARGIN_T, MARGIN_L, MARGIN_T + plot_h
    ));
    // extreme tick labels
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\">{xmin}</text>\n",
        MARGIN_L,
        MARGIN_T + plot_h + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{xmax}</text>\n",
        MARGIN_L + plot_w,
        MARGIN_T + plot_h + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{ymin}</text>\n",
        MARGIN_L - 6.0,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{ymax}</text>\n",
        MARGIN_L - 6.0,
        MARGIN_T + 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0,
        x_label
    ));
    for (si, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if pts.len() == 1 {
            let (x, y) = pts[0];
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        } else {
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            ));
        }
        let ly = MARGIN_T + 14.0 * si as f64 + 10.0;
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            MARGIN_L + plot_w + 10.0,
            ly - 9.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\">{label}</text>\n",
            MARGIN_L + plot_w + 24.0,
            ly
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("pmmoe_plot_{name}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn header_only_writes_nothing() {
        let dir = tmp_dir("empty");
        let written = emit_plots("round,client_id,loss\n", "m", &dir).unwrap();
        assert!(written.is_empty());
    }

    #[test]
    fn two_row_fixture_renders_chart() {
        let dir = tmp_dir("fixture");
        let csv = "epoch,loss\n0,1.5\n1,0.75\n";
        let written = emit_plots(csv, "fit", &dir).unwrap();
        assert_eq!(written.len(), 1);
        let svg = std::fs::read_to_string(&written[0]).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("loss"));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tmp_dir("again");
        let csv = "round,client_id,acc\n0,0,0.5\n0,1,0.25\n1,0,0.75\n1,1,0.5\n";
        let first = emit_plots(csv, "a", &dir).unwrap();
        let bytes1 = std::fs::read(&first[0]).unwrap();
        let second = emit_plots(csv, "a", &dir).unwrap();
        let bytes2 = std::fs::read(&second[0]).unwrap();
        assert_eq!(first, second);
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn malformed_csv_names_line() {
        let err = emit_plots("a,b\n1,2\n3\n", "x", &std::env::temp_dir()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = emit_plots("a,b\n1,two\n", "x", &std::env::temp_dir()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn blank_fields_are_skipped_not_errors() {
        let dir = tmp_dir("blank");
        let csv = "round,client_id,train_loss,test_accuracy,a_total\n0,0,0.9,0.5,\n0,-1,0.9,,0.5\n";
        let written = emit_plots(csv, "p1", &dir).unwrap();
        assert_eq!(written.len(), 3);
    }
}
