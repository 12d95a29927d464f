//! Cross-attention heatmaps: a binary graymap plus a labelled text grid.
//!
//! Rows are generated answer tokens, columns are fused encoder positions,
//! and each cell is the head-averaged last-layer attention of that step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, XaqaError};
use crate::inference::DecodeResult;
use crate::model::{Boundaries, SEP};

/// One record per generated token; an empty answer shows its EOS step.
fn rows(result: &DecodeResult) -> Result<&[crate::model::AttentionRecord]> {
    let t = result.generated.len().max(1);
    if result.records.len() < t {
        return Err(XaqaError::contract("decode result is missing attention records"));
    }
    Ok(&result.records[..t])
}

/// `P5` graymap bytes; pixel = round(255·p).
pub fn heatmap_pgm(result: &DecodeResult) -> Result<Vec<u8>> {
    let rows = rows(result)?;
    let width = rows[0].probs_avg.len();
    let mut out = format!("P5\n{} {}\n255\n", width, rows.len()).into_bytes();
    for r in rows {
        out.extend(r.probs_avg.iter().map(|p| (255.0 * p).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

fn column_label(b: &Boundaries, pos: usize) -> String {
    let seg = b.segment_of(pos).expect("position inside the encoding");
    let tok = seg.token_at(pos);
    if seg.question.contains(&pos) {
        format!("q{tok}")
    } else if tok == SEP && seg.sep == Some(pos) {
        "SEP".to_string()
    } else {
        format!("p{}:{tok}", seg.passage)
    }
}

/// Tab-separated grid with token labels on both axes, probabilities to
/// three decimals.
pub fn heatmap_text(result: &DecodeResult, boundaries: &Boundaries) -> Result<String> {
    let rows = rows(result)?;
    let mut s = String::from("token");
    for pos in 0..boundaries.total_len() {
        let _ = write!(s, "\t{}", column_label(boundaries, pos));
    }
    s.push('\n');
    for (i, r) in rows.iter().enumerate() {
        match result.generated.get(i) {
            Some(tok) => {
                let _ = write!(s, "{tok}");
            }
            None => s.push_str("EOS"),
        }
        for p in &r.probs_avg {
            let _ = write!(s, "\t{p:.3}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// Writes `<stem>.pgm` and `<stem>.txt` and returns both paths.
pub fn render_heatmap(result: &DecodeResult, boundaries: &Boundaries, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let pgm = stem.with_extension("pgm");
    let txt = stem.with_extension("txt");
    fs::write(&pgm, heatmap_pgm(result)?).map_err(|e| XaqaError::io(&pgm, e))?;
    fs::write(&txt, heatmap_text(result, boundaries)?).map_err(|e| XaqaError::io(&txt, e))?;
    Ok((pgm, txt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionRecord, SegmentBounds};

    fn uniform(t: usize, n: usize) -> DecodeResult {
        DecodeResult {
            generated: (0..t as u32).map(|i| 10 + i).collect(),
            records: (0..=t).map(|i| AttentionRecord::from_heads(i, vec![vec![1.0 / n as f64; n]; 2])).collect(),
            beam_score: 0.0,
            truncated: false,
        }
    }

    #[test]
    fn uniform_attention_gives_flat_image() {
        let img = heatmap_pgm(&uniform(2, 7)).unwrap();
        let header = b"P5\n7 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 14);
        assert!(px.iter().all(|&p| p == (255.0f64 / 7.0).round() as u8));
    }

    #[test]
    fn text_grid_labels_both_axes() {
        let b = Boundaries {
            segments: vec![SegmentBounds::new(0, 0, 1, vec![5, SEP, 20, 21], 0)],
        };
        let text = heatmap_text(&uniform(1, 4), &b).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "token\tq5\tSEP\tp0:20\tp0:21");
        assert_eq!(lines[1], "10\t0.250\t0.250\t0.250\t0.250");
        let empty = heatmap_text(&uniform(0, 4), &b).unwrap();
        assert!(empty.lines().nth(1).unwrap().starts_with("EOS\t"));
        assert!(heatmap_pgm(&uniform(0, 4)).unwrap().starts_with(b"P5\n4 1\n255\n"));
    }

    #[test]
    fn files_are_written_and_unwritable_paths_fail() {
        let dir = tempfile::tempdir().unwrap();
        let b = Boundaries {
            segments: vec![SegmentBounds::new(0, 0, 0, vec![20, 21, 22], 0)],
        };
        let r = uniform(2, 3);
        let (pgm, txt) = render_heatmap(&r, &b, &dir.path().join("h")).unwrap();
        assert_eq!(fs::read(pgm).unwrap(), heatmap_pgm(&r).unwrap());
        assert_eq!(fs::read_to_string(txt).unwrap(), heatmap_text(&r, &b).unwrap());
        assert!(render_heatmap(&r, &b, &dir.path().join("missing/h")).is_err());
    }
}
