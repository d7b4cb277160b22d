use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transducer::EmissionRecord;

/// `u,token_id,source_frame` rows, `u` counted from 1.
pub fn lattice_csv(record: &EmissionRecord) -> String {
    let mut out = String::from("u,token_id,source_frame\n");
    for (i, (tok, frame)) in record.tokens.iter().zip(record.source_frames()).enumerate() {
        writeln!(out, "{},{tok},{frame}", i + 1).expect("string write");
    }
    out
}

/// Step plot of emitted-token count (y) against source frame (x), with the
/// end of speech marked.
pub fn lattice_svg(record: &EmissionRecord, num_frames: usize, end_of_speech_frame: usize) -> String {
    let frames = record.source_frames();
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let max_x = num_frames.max(frames.last().copied().unwrap_or(0)).max(1) as f64;
    let max_y = record.tokens.len().max(1) as f64;
    let px = |f: f64| pad + f / max_x * (w - 2.0 * pad);
    let py = |u: f64| h - pad - u / max_y * (h - 2.0 * pad);

    let mut path = format!("M {:.1} {:.1}", px(0.0), py(0.0));
    for (i, &f) in frames.iter().enumerate() {
        write!(path, " H {:.1} V {:.1}", px(f as f64), py((i + 1) as f64)).expect("string write");
    }
    write!(path, " H {:.1}", px(max_x)).expect("string write");

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .expect("string write");
    writeln!(svg, r#"<title>{}</title>"#, record.id).expect("string write");
    writeln!(
        svg,
        r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/><line x1="{0}" y1="{1}" x2="{0}" y2="{3}" stroke="black"/>"#,
        pad,
        h - pad,
        w - pad,
        pad
    )
    .expect("string write");
    let eos = px(end_of_speech_frame as f64);
    writeln!(
        svg,
        r#"<line x1="{eos:.1}" y1="{pad}" x2="{eos:.1}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        h - pad
    )
    .expect("string write");
    writeln!(svg, r#"<path d="{path}" fill="none" stroke="steelblue" stroke-width="2"/>"#).expect("string write");
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">source frame</text>"#,
        w / 2.0,
        h - 8.0
    )
    .expect("string write");
    writeln!(
        svg,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})">tokens emitted</text>"#,
        h / 2.0,
        h / 2.0
    )
    .expect("string write");
    svg.push_str("</svg>\n");
    svg
}

/// Writes the CSV to `out`, or to `out` with a `.csv` extension plus the SVG
/// at `out` when `out` ends in `.svg`. Returns the written paths.
pub fn export_lattice(
    record: &EmissionRecord,
    num_frames: usize,
    end_of_speech_frame: usize,
    out: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    let is_svg = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("svg"));
    let csv_path = if is_svg { out.with_extension("csv") } else { out.to_owned() };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let write = |p: &Path, s: String| fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&csv_path, lattice_csv(record))?;
    let mut written = vec![csv_path];
    if is_svg {
        write(out, lattice_svg(record, num_frames, end_of_speech_frame))?;
        written.push(out.to_owned());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transducer::Hypothesis;

    fn rec(frames: Vec<usize>) -> EmissionRecord {
        let tokens = (1..=frames.len()).collect();
        EmissionRecord::new("utt", Hypothesis { tokens, frames }, 2, 0)
    }

    #[test]
    fn empty_hypothesis_is_header_only() {
        assert_eq!(lattice_csv(&rec(vec![])), "u,token_id,source_frame\n");
    }

    #[test]
    fn rows_per_token() {
        let csv = lattice_csv(&rec(vec![1, 3, 3]));
        assert_eq!(csv, "u,token_id,source_frame\n1,1,2\n2,2,6\n3,3,6\n");
    }

    #[test]
    fn svg_written_alongside_csv() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("lat.svg");
        let paths = export_lattice(&rec(vec![2, 4]), 12, 9, &out).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(fs::read_to_string(&out).unwrap().starts_with("<svg"));
        assert!(fs::read_to_string(dir.path().join("lat.csv")).unwrap().contains("2,2,8"));
        let nested = dir.path().join("new/dir/x.csv");
        assert_eq!(export_lattice(&rec(vec![]), 1, 1, &nested).unwrap(), vec![nested.clone()]);
        let blocked = dir.path().join("lat.csv/x.csv");
        assert!(export_lattice(&rec(vec![]), 1, 1, &blocked).is_err());
    }
}
