//! SVG rendering of norm heatmaps, model comparisons and outcome distributions.
//!
//! Documents are plain strings built in a fixed element order so the same
//! input always yields the same bytes. Heatmap cells carry `class="cell"`,
//! comparison triangles `class="tri"` and distribution segments
//! `class="seg"`; legend swatches use `class="swatch"`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assessment::{MatrixCell, NormMatrix, Outcome};
use crate::scale::LikertLevel;
use crate::stats::OutcomeCounts;

pub const CELL_SIZE: u32 = 14;
const CHAR_WIDTH: u32 = 7;
const FONT: &str = "font-family=\"sans-serif\" font-size=\"11\"";
const BAR_WIDTH: f64 = 400.0;
const BAR_HEIGHT: u32 = 18;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("matrix has no cells")]
    EmptyMatrix,
    #[error("comparison needs exactly 4 matrices, got {0}")]
    WrongArity(usize),
    #[error("matrix {0} does not share axes with the first matrix")]
    AxisMismatch(usize),
    #[error("palette colors must be six distinct values")]
    BadPalette,
}

/// Fill colors: index 0..5 are Likert codes 1..5, index 5 is "no answer".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub levels: [String; 5],
    pub no_answer: String,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            levels: ["#8b0000", "#f08080", "#ffd700", "#90ee90", "#006400"].map(String::from),
            no_answer: "#bebebe".into(),
        }
    }
}

impl Palette {
    pub fn validate(&self) -> Result<(), ReportError> {
        let mut all: Vec<String> = self.levels.iter().map(|c| c.to_ascii_lowercase()).collect();
        all.push(self.no_answer.to_ascii_lowercase());
        all.sort();
        all.dedup();
        if all.len() != 6 || all.iter().any(|c| c.is_empty()) {
            return Err(ReportError::BadPalette);
        }
        Ok(())
    }

    pub fn color(&self, outcome: Outcome) -> &str {
        match outcome {
            Outcome::Level(l) => &self.levels[l.index()],
            Outcome::NoAnswer => &self.no_answer,
        }
    }

    fn entries(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<(&str, &str)> = LikertLevel::ALL
            .iter()
            .map(|l| (legend_name(Outcome::Level(*l)), self.color(Outcome::Level(*l))))
            .collect();
        out.push((legend_name(Outcome::NoAnswer), &self.no_answer));
        out
    }
}

fn legend_name(outcome: Outcome) -> &'static str {
    match outcome {
        Outcome::Level(LikertLevel::StronglyUnacceptable) => "Strongly Unacceptable",
        Outcome::Level(LikertLevel::SomewhatUnacceptable) => "Somewhat Unacceptable",
        Outcome::Level(LikertLevel::Neutral) => "Neutral",
        Outcome::Level(LikertLevel::SomewhatAcceptable) => "Somewhat Acceptable",
        Outcome::Level(LikertLevel::StronglyAcceptable) => "Strongly Acceptable",
        Outcome::NoAnswer => "No Answer",
    }
}

/// Outcomes of the four compared models in one cell, ordered top, right,
/// bottom, left. `None` renders grey.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ComparisonCell {
    pub entries: [Option<LikertLevel>; 4],
}

impl ComparisonCell {
    pub fn outcome(&self, pos: usize) -> Outcome {
        self.entries[pos].map_or(Outcome::NoAnswer, Outcome::Level)
    }
}

pub const TRIANGLE_POSITIONS: [&str; 4] = ["top", "right", "bottom", "left"];

pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * CHAR_WIDTH
}

fn open_svg(out: &mut String, width: u32, height: u32) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect class="background" x="0" y="0" width="{width}" height="{height}" fill="white"/>"#);
}

/// Vertical legend with one swatch per outcome, starting at (x, y).
fn write_legend(out: &mut String, palette: &Palette, x: u32, y: u32) {
    let entries = palette.entries();
    let (w, h) = legend_size(palette);
    let _ = writeln!(out, r#"<g class="legend">"#);
    let _ = writeln!(
        out,
        r#"<rect class="legend-box" x="{x}" y="{y}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    for (i, (name, color)) in entries.iter().enumerate() {
        let sy = y + 6 + i as u32 * (CELL_SIZE + 4);
        let _ = writeln!(
            out,
            r#"<rect class="swatch" x="{}" y="{sy}" width="{CELL_SIZE}" height="{CELL_SIZE}" fill="{}"/>"#,
            x + 6,
            escape_xml(color)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" {FONT}>{}</text>"#,
            x + 12 + CELL_SIZE,
            sy + CELL_SIZE - 3,
            escape_xml(name)
        );
    }
    let _ = writeln!(out, "</g>");
}

fn legend_size(palette: &Palette) -> (u32, u32) {
    let entries = palette.entries();
    (
        20 + CELL_SIZE + entries.iter().map(|(n, _)| text_width(n)).max().unwrap_or(0),
        10 + entries.len() as u32 * (CELL_SIZE + 4),
    )
}

struct GridLayout {
    left: u32,
    top: u32,
    rows: u32,
    cols: u32,
}

impl GridLayout {
    fn new(matrix: &NormMatrix, header_lines: u32) -> Self {
        let left = 10 + matrix
            .row_labels
            .iter()
            .map(|(r, t)| text_width(&row_label(r, t)))
            .max()
            .unwrap_or(0);
        let top = 10
            + header_lines * 16
            + matrix.col_labels.iter().map(|c| text_width(c)).max().unwrap_or(0);
        Self {
            left,
            top,
            rows: matrix.rows() as u32,
            cols: matrix.cols() as u32,
        }
    }

    fn cell_origin(&self, r: usize, c: usize) -> (u32, u32) {
        (self.left + c as u32 * CELL_SIZE, self.top + r as u32 * CELL_SIZE)
    }

    fn grid_right(&self) -> u32 {
        self.left + self.cols * CELL_SIZE
    }

    fn grid_bottom(&self) -> u32 {
        self.top + self.rows * CELL_SIZE
    }

    fn write_axis_labels(&self, out: &mut String, matrix: &NormMatrix) {
        let _ = writeln!(out, r#"<g class="row-labels">"#);
        for (i, (recipient, tp)) in matrix.row_labels.iter().enumerate() {
            let (_, y) = self.cell_origin(i, 0);
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end" {FONT}>{}</text>"#,
                self.left - 4,
                y + CELL_SIZE - 3,
                escape_xml(&row_label(recipient, tp))
            );
        }
        let _ = writeln!(out, "</g>");
        let _ = writeln!(out, r#"<g class="col-labels">"#);
        for (j, attr) in matrix.col_labels.iter().enumerate() {
            let (x, _) = self.cell_origin(0, j);
            let (tx, ty) = (x + CELL_SIZE - 3, self.top - 4);
            let _ = writeln!(
                out,
                r#"<text x="{tx}" y="{ty}" transform="rotate(-90 {tx} {ty})" {FONT}>{}</text>"#,
                escape_xml(attr)
            );
        }
        let _ = writeln!(out, "</g>");
    }

    fn canvas(&self, palette: &Palette, extra_bottom: u32) -> (u32, u32) {
        let (lw, lh) = legend_size(palette);
        let width = self.grid_right() + 20 + lw + 10;
        let height = (self.grid_bottom() + extra_bottom).max(self.top + lh) + 10;
        (width, height)
    }
}

fn row_label(recipient: &str, tp: &str) -> String {
    format!("{recipient} | {tp}")
}

/// One rect per cell, grey for held, insufficient or missing norms.
pub fn render_norm_heatmap(matrix: &NormMatrix, palette: &Palette) -> Result<String, ReportError> {
    palette.validate()?;
    if matrix.rows() == 0 || matrix.cols() == 0 {
        return Err(ReportError::EmptyMatrix);
    }
    let layout = GridLayout::new(matrix, 1);
    let (width, height) = layout.canvas(palette, 0);
    let mut out = String::new();
    open_svg(&mut out, width, height);
    let _ = writeln!(
        out,
        r#"<text class="title" x="10" y="16" {FONT} font-weight="bold">{}</text>"#,
        escape_xml(&format!("{} / {} / sender: {}", matrix.dataset, matrix.model, matrix.sender))
    );
    layout.write_axis_labels(&mut out, matrix);
    let _ = writeln!(out, r#"<g class="cells">"#);
    for (i, row) in matrix.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let (x, y) = layout.cell_origin(i, j);
            let _ = writeln!(
                out,
                r#"<rect class="cell" x="{x}" y="{y}" width="{CELL_SIZE}" height="{CELL_SIZE}" fill="{}" stroke="white" stroke-width="0.5" data-status="{}"/>"#,
                escape_xml(palette.color(cell.outcome())),
                cell_status(cell)
            );
        }
    }
    let _ = writeln!(out, "</g>");
    write_legend(&mut out, palette, layout.grid_right() + 20, layout.top);
    out.push_str("</svg>\n");
    Ok(out)
}

fn cell_status(cell: &MatrixCell) -> &'static str {
    cell.status.map_or("missing", |s| s.as_str())
}

/// Combine four matrices into per-cell comparison entries. Held and
/// insufficient cells become `None`.
pub fn comparison_cells(matrices: &[NormMatrix]) -> Result<Vec<Vec<ComparisonCell>>, ReportError> {
    if matrices.len() != 4 {
        return Err(ReportError::WrongArity(matrices.len()));
    }
    if let Some(i) = matrices.iter().position(|m| !m.same_axes(&matrices[0])) {
        return Err(ReportError::AxisMismatch(i));
    }
    let base = &matrices[0];
    if base.rows() == 0 || base.cols() == 0 {
        return Err(ReportError::EmptyMatrix);
    }
    Ok((0..base.rows())
        .map(|r| {
            (0..base.cols())
                .map(|c| {
                    let mut entries = [None; 4];
                    for (k, m) in matrices.iter().enumerate() {
                        entries[k] = match m.cells[r][c].outcome() {
                            Outcome::Level(l) => Some(l),
                            Outcome::NoAnswer => None,
                        };
                    }
                    ComparisonCell { entries }
                })
                .collect()
        })
        .collect())
}

/// Each cell split by its diagonals into four triangles, one per model in the
/// order top, right, bottom, left.
pub fn render_comparison_heatmap(matrices: &[NormMatrix], palette: &Palette) -> Result<String, ReportError> {
    palette.validate()?;
    let cells = comparison_cells(matrices)?;
    let base = &matrices[0];
    let layout = GridLayout::new(base, 2);
    let key_height = 4 * 16 + 10;
    let (width, height) = layout.canvas(palette, key_height);
    let mut out = String::new();
    open_svg(&mut out, width, height);
    let _ = writeln!(
        out,
        r#"<text class="title" x="10" y="16" {FONT} font-weight="bold">{}</text>"#,
        escape_xml(&format!("{} / sender: {}", base.dataset, base.sender))
    );
    layout.write_axis_labels(&mut out, base);
    let _ = writeln!(out, r#"<g class="cells">"#);
    let s = CELL_SIZE;
    let h = CELL_SIZE / 2;
    for (i, row) in cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let (x, y) = layout.cell_origin(i, j);
            let (cx, cy) = (x + h, y + h);
            let corners = [(x, y), (x + s, y), (x + s, y + s), (x, y + s)];
            for (k, pos) in TRIANGLE_POSITIONS.iter().enumerate() {
                let (a, b) = (corners[k], corners[(k + 1) % 4]);
                let _ = writeln!(
                    out,
                    r#"<polygon class="tri" data-pos="{pos}" points="{},{} {},{} {cx},{cy}" fill="{}"/>"#,
                    a.0,
                    a.1,
                    b.0,
                    b.1,
                    escape_xml(palette.color(cell.outcome(k)))
                );
            }
        }
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g class="model-key">"#);
    for (k, (m, pos)) in matrices.iter().zip(TRIANGLE_POSITIONS).enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="10" y="{}" {FONT}>{}</text>"#,
            layout.grid_bottom() + 20 + k as u32 * 16,
            escape_xml(&format!("{pos}: {}", m.model))
        );
    }
    let _ = writeln!(out, "</g>");
    write_legend(&mut out, palette, layout.grid_right() + 20, layout.top);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Stacked horizontal bars, one per model, segment widths proportional to
/// the outcome counts. Empty segments are omitted.
pub fn render_distribution_chart(summaries: &[(String, OutcomeCounts)], palette: &Palette) -> Result<String, ReportError> {
    palette.validate()?;
    let left = 10 + summaries.iter().map(|(n, _)| text_width(n)).max().unwrap_or(0);
    let top = 30;
    let (lw, lh) = legend_size(palette);
    let bars_bottom = top + summaries.len() as u32 * (BAR_HEIGHT + 6);
    let width = left + BAR_WIDTH as u32 + 20 + lw + 10;
    let height = bars_bottom.max(top + lh) + 10;
    let mut out = String::new();
    open_svg(&mut out, width, height);
    let _ = writeln!(
        out,
        r#"<text class="title" x="10" y="16" {FONT} font-weight="bold">Distribution of encoded norms</text>"#
    );
    let outcomes: Vec<Outcome> = LikertLevel::ALL
        .iter()
        .map(|l| Outcome::Level(*l))
        .chain([Outcome::NoAnswer])
        .collect();
    for (i, (name, counts)) in summaries.iter().enumerate() {
        let y = top + i as u32 * (BAR_HEIGHT + 6);
        let _ = writeln!(out, r#"<g class="bar" data-model="{}">"#, escape_xml(name));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" {FONT}>{}</text>"#,
            left - 4,
            y + BAR_HEIGHT - 5,
            escape_xml(name)
        );
        let total = counts.total();
        let mut x = left as f64;
        for outcome in &outcomes {
            let n = counts.get(*outcome);
            if n == 0 || total == 0 {
                continue;
            }
            let w = BAR_WIDTH * n as f64 / total as f64;
            let _ = writeln!(
                out,
                r#"<rect class="seg" x="{x:.3}" y="{y}" width="{w:.3}" height="{BAR_HEIGHT}" fill="{}" data-count="{n}"/>"#,
                escape_xml(palette.color(*outcome))
            );
            x += w;
        }
        let _ = writeln!(
            out,
            r#"<rect class="bar-frame" x="{left}" y="{y}" width="{:.3}" height="{BAR_HEIGHT}" fill="none" stroke="black" stroke-width="0.5"/>"#,
            if total == 0 { 0.0 } else { BAR_WIDTH }
        );
        let _ = writeln!(out, "</g>");
    }
    write_legend(&mut out, palette, left + BAR_WIDTH as u32 + 20, top);
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assessment::NormStatus;

    fn matrix(model: &str, cells: Vec<Vec<MatrixCell>>) -> NormMatrix {
        let rows = cells.len();
        let cols = cells.first().map_or(0, Vec::len);
        NormMatrix {
            dataset: "iot".into(),
            model: model.into(),
            sender: "a sleep monitor".into(),
            row_labels: (0..rows).map(|i| (format!("r{i}"), "if <x> & \"y\"".to_string())).collect(),
            col_labels: (0..cols).map(|j| format!("attr{j}")).collect(),
            cells,
        }
    }

    fn consistent(code: u8) -> MatrixCell {
        MatrixCell {
            status: Some(NormStatus::Consistent),
            level: LikertLevel::from_code(code),
        }
    }

    fn with_status(s: NormStatus) -> MatrixCell {
        MatrixCell { status: Some(s), level: None }
    }

    fn fills<'a>(doc: &'a roxmltree::Document, class: &str) -> Vec<&'a str> {
        doc.descendants()
            .filter(|n| n.attribute("class") == Some(class))
            .map(|n| n.attribute("fill").unwrap())
            .collect()
    }

    #[test]
    fn neutral_heatmap_is_all_yellow() {
        let m = matrix("m", vec![vec![consistent(3); 3]; 2]);
        let svg = render_norm_heatmap(&m, &Palette::default()).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let f = fills(&doc, "cell");
        assert_eq!(f.len(), 6);
        assert!(f.iter().all(|c| *c == "#ffd700"));
        assert_eq!(fills(&doc, "swatch").len(), 6);
        assert_eq!(svg, render_norm_heatmap(&m, &Palette::default()).unwrap());
    }

    #[test]
    fn one_insufficient_cell_is_one_grey_rect() {
        let mut cells = vec![vec![consistent(1); 3]; 2];
        cells[1][2] = with_status(NormStatus::Insufficient);
        let svg = render_norm_heatmap(&matrix("m", cells), &Palette::default()).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(fills(&doc, "cell").iter().filter(|c| **c == "#bebebe").count(), 1);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert_eq!(
            render_norm_heatmap(&matrix("m", vec![]), &Palette::default()),
            Err(ReportError::EmptyMatrix)
        );
    }

    #[test]
    fn comparison_split_square() {
        let p = Palette::default();
        let ms = [1, 1, 4, 4].map(|c| matrix(&format!("m{c}"), vec![vec![consistent(c)]]));
        let svg = render_comparison_heatmap(&ms, &p).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(fills(&doc, "tri"), ["#8b0000", "#8b0000", "#90ee90", "#90ee90"]);
        let pos: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("tri"))
            .map(|n| n.attribute("data-pos").unwrap())
            .collect();
        assert_eq!(pos, TRIANGLE_POSITIONS);
    }

    #[test]
    fn comparison_identical_and_errors() {
        let p = Palette::default();
        let m = matrix("m", vec![vec![consistent(2), with_status(NormStatus::Held)]; 3]);
        let four = vec![m.clone(), m.clone(), m.clone(), m.clone()];
        let svg = render_comparison_heatmap(&four, &p).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let f = fills(&doc, "tri");
        assert_eq!(f.len(), 4 * 6);
        for chunk in f.chunks(4) {
            assert!(chunk.iter().all(|c| *c == chunk[0]));
        }
        assert_eq!(f.iter().filter(|c| **c == "#bebebe").count(), 4 * 3);
        assert_eq!(render_comparison_heatmap(&four[..3], &p), Err(ReportError::WrongArity(3)));
        let mut other = four.clone();
        other[2].col_labels[0] = "different".into();
        assert_eq!(render_comparison_heatmap(&other, &p), Err(ReportError::AxisMismatch(2)));
    }

    #[test]
    fn distribution_bars() {
        let p = Palette::default();
        let neutral = OutcomeCounts { levels: [0, 0, 7, 0, 0], no_answer: 0 };
        let svg = render_distribution_chart(&[("m".into(), neutral)], &p).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let segs: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("seg")).collect();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].attribute("fill"), Some("#ffd700"));
        assert_eq!(segs[0].attribute("width"), Some("400.000"));

        let zero = render_distribution_chart(&[("z".into(), OutcomeCounts::default())], &p).unwrap();
        let doc = roxmltree::Document::parse(&zero).unwrap();
        assert_eq!(fills(&doc, "seg").len(), 0);

        let mixed = OutcomeCounts { levels: [1, 2, 0, 3, 0], no_answer: 4 };
        let svg = render_distribution_chart(&[("a".into(), mixed), ("b".into(), mixed)], &p).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let bars: Vec<Vec<(String, String)>> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("bar"))
            .map(|b| {
                b.descendants()
                    .filter(|n| n.attribute("class") == Some("seg"))
                    .map(|n| (n.attribute("x").unwrap().to_string(), n.attribute("width").unwrap().to_string()))
                    .collect()
            })
            .collect();
        assert_eq!(bars.len(), 2);
        assert_eq!(bars[0], bars[1]);
        assert_eq!(bars[0].len(), 4);
    }

    #[test]
    fn palette_rules() {
        let p = Palette::default();
        assert!(p.validate().is_ok());
        let mut outcomes: Vec<_> = LikertLevel::ALL.iter().map(|l| p.color(Outcome::Level(*l))).collect();
        outcomes.push(p.color(Outcome::NoAnswer));
        let mut dedup = outcomes.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 6);
        let mut bad = p.clone();
        bad.levels[4] = bad.levels[0].clone();
        assert_eq!(bad.validate(), Err(ReportError::BadPalette));
    }

    #[test]
    fn labels_are_escaped() {
        assert_eq!(escape_xml("a<b>&\"'"), "a&lt;b&gt;&amp;&quot;&apos;");
        let svg = render_norm_heatmap(&matrix("m&m", vec![vec![consistent(5)]]), &Palette::default()).unwrap();
        assert!(roxmltree::Document::parse(&svg).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn triangle_and_grey_counts(
            codes in proptest::collection::vec(proptest::collection::vec(0u8..=7, 1..5), 1..5),
        ) {
            let cols = codes[0].len();
            let grid: Vec<Vec<MatrixCell>> = codes
                .iter()
                .map(|row| {
                    (0..cols)
                        .map(|j| match row.get(j).copied().unwrap_or(0) {
                            0 => with_status(NormStatus::Held),
                            6 => with_status(NormStatus::Insufficient),
                            7 => MatrixCell::default(),
                            c => consistent(c),
                        })
                        .collect()
                })
                .collect();
            let ms: Vec<NormMatrix> = (0..4).map(|k| matrix(&format!("m{k}"), grid.clone())).collect();
            let svg = render_comparison_heatmap(&ms, &Palette::default()).unwrap();
            let doc = roxmltree::Document::parse(&svg).unwrap();
            let f = fills(&doc, "tri");
            proptest::prop_assert_eq!(f.len(), 4 * grid.len() * cols);
            let grey_cells = grid.iter().flatten().filter(|c| c.is_grey()).count();
            proptest::prop_assert_eq!(f.iter().filter(|c| **c == "#bebebe").count(), 4 * grey_cells);
        }
    }
}
