//! Segment-level alignment refinement: selects per-class thresholds and
//! median widths on unlabelled clips by re-scoring the segments each
//! candidate mask induces.
//!
//! A clip qualifies for class c when the full-clip probability exceeds
//! 0.5. For each grid cell the class track is thresholded and median
//! filtered; the resulting mask splits the clip into positive runs and
//! one concatenated negative remainder, each re-fed to the model as its
//! own clip. The cell's loss is the mean binary cross-entropy of those
//! segment predictions against the mask's own polarity. No reference
//! labels are read anywhere in this module.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::gcrnn::{ClipPrediction, FramePredictions};
use crate::postproc::{median_filter, threshold_frames, PostProcParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SalrGrid {
    pub thresholds: Vec<f32>,
    pub widths: Vec<usize>,
}

impl Default for SalrGrid {
    fn default() -> Self {
        SalrGrid {
            thresholds: (1..=9).map(|i| i as f32 / 10.0).collect(),
            widths: vec![1, 5, 11, 21, 41, 81],
        }
    }
}

impl SalrGrid {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.widths.is_empty() {
            return Err(Error::Config("refinement grid is empty".into()));
        }
        if self.thresholds.iter().any(|&t| !(0.0..1.0).contains(&t)) {
            return Err(Error::Config("grid thresholds must lie in [0, 1)".into()));
        }
        if self.widths.iter().any(|&w| w % 2 == 0 || w == 0) {
            return Err(Error::Config("grid widths must be odd".into()));
        }
        for pair in self.thresholds.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config("grid thresholds must increase".into()));
            }
        }
        for pair in self.widths.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config("grid widths must increase".into()));
            }
        }
        Ok(())
    }
}

/// Full-clip forward pass used during refinement.
pub type ClipForward<'a> = dyn Fn(&Tensor<f32>) -> Result<(FramePredictions, ClipPrediction)> + 'a;

/// Positive runs and the scattered negative remainder of a binary mask.
fn mask_segments(mask: &[u8]) -> (Vec<Vec<u32>>, Vec<u32>) {
    let mut positives = Vec::new();
    let mut negative = Vec::new();
    let mut run: Vec<u32> = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if m == 1 {
            run.push(i as u32);
        } else {
            if !run.is_empty() {
                positives.push(std::mem::take(&mut run));
            }
            negative.push(i as u32);
        }
    }
    if !run.is_empty() {
        positives.push(run);
    }
    (positives, negative)
}

fn gather_rows(x: &Tensor<f32>, frames: &[u32]) -> Result<Tensor<f32>> {
    let t = x.shape()[0];
    let f = x.shape()[1];
    let mut data = Vec::with_capacity(frames.len() * f);
    for &fr in frames {
        let fr = fr as usize;
        if fr >= t {
            return Err(Error::Config(format!("segment frame {fr} outside clip of {t}")));
        }
        data.extend_from_slice(&x.data()[fr * f..(fr + 1) * f]);
    }
    Tensor::new(vec![frames.len(), f], data)
}

/// Splits a clip's features by a frame mask: one tensor per positive run
/// plus the concatenated negative frames (None when the mask is all ones).
pub fn segment_clip(x: &Tensor<f32>, mask: &[u8]) -> Result<(Vec<Tensor<f32>>, Option<Tensor<f32>>)> {
    if x.rank() != 2 || x.shape()[0] != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "segment_clip",
            left: x.shape().to_vec(),
            right: vec![mask.len()],
        });
    }
    let (positives, negative) = mask_segments(mask);
    let pos = positives
        .iter()
        .map(|frames| gather_rows(x, frames))
        .collect::<Result<Vec<_>>>()?;
    let neg = if negative.is_empty() {
        None
    } else {
        Some(gather_rows(x, &negative)?)
    };
    Ok((pos, neg))
}

#[derive(Clone, Debug)]
pub struct SalrCell {
    pub threshold: f32,
    pub width: usize,
    /// Mean segment cross-entropy; None when the class had no
    /// qualifying clips.
    pub loss: Option<f64>,
    pub n_segments: usize,
}

#[derive(Clone, Debug)]
pub struct SalrChoice {
    pub class_id: usize,
    pub params: PostProcParams,
    pub loss: Option<f64>,
    /// True when no clip qualified and the defaults were kept.
    pub fallback: bool,
    pub n_clips: usize,
    pub n_segments: usize,
}

#[derive(Clone, Debug)]
pub struct SalrReport {
    pub choices: Vec<SalrChoice>,
    /// Grid losses per class, in the visit order widths-outer then
    /// thresholds, both ascending.
    pub table: Vec<Vec<SalrCell>>,
}

impl SalrReport {
    pub fn post_proc_params(&self) -> Vec<PostProcParams> {
        self.choices.iter().map(|c| c.params).collect()
    }

    /// Chosen row per class; fixed decimal formatting keeps repeat runs
    /// byte-identical.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class\tthreshold\twidth\tloss\tn_clips\tn_segments\tfallback\n");
        for c in &self.choices {
            let loss = match c.loss {
                Some(l) => format!("{l:.6}"),
                None => "NA".to_string(),
            };
            out.push_str(&format!(
                "{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\n",
                c.class_id, c.params.threshold, c.params.median_width, loss, c.n_clips, c.n_segments, c.fallback
            ));
        }
        out
    }

    /// Just the per-class decoding parameters, for feeding predict runs.
    pub fn params_tsv(&self) -> String {
        let mut out = String::from("class\tthreshold\twidth\n");
        for c in &self.choices {
            out.push_str(&format!(
                "{}\t{:.6}\t{}\n",
                c.class_id, c.params.threshold, c.params.median_width
            ));
        }
        out
    }
}

/// Parses a params_tsv back into one PostProcParams per class; classes
/// must be contiguous from zero.
pub fn parse_params_tsv(text: &str) -> Result<Vec<PostProcParams>> {
    let mut rows: Vec<(usize, PostProcParams)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || (lineno == 0 && line.starts_with("class")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "params line {}: expected 3 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("params line {}: bad class id", lineno + 1)))?;
        let threshold: f32 = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("params line {}: bad threshold", lineno + 1)))?;
        let median_width: usize = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("params line {}: bad width", lineno + 1)))?;
        rows.push((class_id, PostProcParams { threshold, median_width }));
    }
    rows.sort_by_key(|r| r.0);
    for (i, row) in rows.iter().enumerate() {
        if row.0 != i {
            return Err(Error::Data(format!(
                "params file classes must be contiguous from 0, found {}",
                row.0
            )));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

fn clamped_bce(y: f32, positive: bool) -> f64 {
    let p = (y as f64).clamp(1e-7, 1.0 - 1e-7);
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Runs the grid search. `clips` are (clip_id, features) pairs; labels
/// never enter. Segment forwards are memoized on the exact frame set so
/// grid cells that induce the same mask are costed once.
pub fn refine(
    forward: &ClipForward,
    clips: &[(String, Tensor<f32>)],
    grid: &SalrGrid,
) -> Result<SalrReport> {
    grid.validate()?;
    if clips.is_empty() {
        return Err(Error::Config("refinement split is empty".into()));
    }

    // full-clip pass: gate probabilities and frame tracks
    let mut full: Vec<(FramePredictions, ClipPrediction)> = Vec::with_capacity(clips.len());
    for (clip_id, x) in clips {
        let out = forward(x).map_err(|e| {
            Error::Config(format!("refinement forward failed on {clip_id}: {e}"))
        })?;
        full.push(out);
    }
    let n_classes = full[0].1.y.len();
    if full.iter().any(|(_, p)| p.y.len() != n_classes) {
        return Err(Error::Config("clips disagree on class count".into()));
    }

    let mut segment_cache: HashMap<(usize, Vec<u32>), Vec<f32>> = HashMap::new();
    let mut segment_y = |clip_idx: usize, frames: &[u32], forward: &ClipForward| -> Result<Vec<f32>> {
        let key = (clip_idx, frames.to_vec());
        if let Some(y) = segment_cache.get(&key) {
            return Ok(y.clone());
        }
        let seg = gather_rows(&clips[clip_idx].1, frames)?;
        let (_, pred) = forward(&seg)?;
        segment_cache.insert(key, pred.y.clone());
        Ok(pred.y)
    };

    let mut choices = Vec::with_capacity(n_classes);
    let mut table = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let qualifying: Vec<usize> = (0..clips.len())
            .filter(|&i| full[i].1.y[c] > 0.5)
            .collect();
        let mut cells = Vec::with_capacity(grid.widths.len() * grid.thresholds.len());
        if qualifying.is_empty() {
            for &width in &grid.widths {
                for &threshold in &grid.thresholds {
                    cells.push(SalrCell { threshold, width, loss: None, n_segments: 0 });
                }
            }
            choices.push(SalrChoice {
                class_id: c,
                params: PostProcParams::default(),
                loss: None,
                fallback: true,
                n_clips: 0,
                n_segments: 0,
            });
            table.push(cells);
            continue;
        }

        let tracks: Vec<Vec<f32>> = qualifying.iter().map(|&i| full[i].0.class_track(c)).collect();
        let mut best: Option<(f64, PostProcParams, usize)> = None;
        for &width in &grid.widths {
            for &threshold in &grid.thresholds {
                let mut total = 0f64;
                let mut n_segments = 0usize;
                for (qi, &clip_idx) in qualifying.iter().enumerate() {
                    let raw = threshold_frames(&tracks[qi], threshold);
                    let mask = median_filter(&raw, width)?;
                    let (positives, negative) = mask_segments(&mask);
                    for frames in &positives {
                        let y = segment_y(clip_idx, frames, forward)?;
                        total += clamped_bce(y[c], true);
                        n_segments += 1;
                    }
                    if !negative.is_empty() {
                        let y = segment_y(clip_idx, &negative, forward)?;
                        total += clamped_bce(y[c], false);
                        n_segments += 1;
                    }
                }
                let loss = total / n_segments as f64;
                cells.push(SalrCell { threshold, width, loss: Some(loss), n_segments });
                let better = match &best {
                    None => true,
                    Some((b, _, _)) => loss < *b,
                };
                if better {
                    best = Some((loss, PostProcParams { threshold, median_width: width }, n_segments));
                }
            }
        }
        let (loss, params, n_segments) = best.expect("grid is non-empty");
        choices.push(SalrChoice {
            class_id: c,
            params,
            loss: Some(loss),
            fallback: false,
            n_clips: qualifying.len(),
            n_segments,
        });
        table.push(cells);
    }
    Ok(SalrReport { choices, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn segmentation_splits_runs_and_pools_negatives() {
        let t = 7;
        let x = Tensor::new(vec![t, 2], (0..t * 2).map(|v| v as f32).collect()).unwrap();
        let mask = [0u8, 0, 1, 1, 0, 1, 0];
        let (pos, neg) = segment_clip(&x, &mask).unwrap();
        assert_eq!(pos.len(), 2);
        assert_eq!(pos[0].shape(), &[2, 2]);
        assert_eq!(pos[0].data(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(pos[1].shape(), &[1, 2]);
        assert_eq!(pos[1].data(), &[10.0, 11.0]);
        let neg = neg.unwrap();
        assert_eq!(neg.shape(), &[4, 2]);
        assert_eq!(neg.data(), &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn degenerate_masks_keep_the_whole_clip() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (pos, neg) = segment_clip(&x, &[1, 1, 1]).unwrap();
        assert_eq!(pos.len(), 1);
        assert_eq!(pos[0].shape(), &[3, 1]);
        assert!(neg.is_none());
        let (pos, neg) = segment_clip(&x, &[0, 0, 0]).unwrap();
        assert!(pos.is_empty());
        assert_eq!(neg.unwrap().shape(), &[3, 1]);
    }

    /// Predictions read straight from column c of the features: the frame
    /// track is x[t][c] and the clip value is its mean.
    fn mock_forward(x: &Tensor<f32>) -> crate::error::Result<(FramePredictions, ClipPrediction)> {
        let t = x.shape()[0];
        let m = x.shape()[1];
        let z_cla = x.clone();
        let z_att = Tensor::filled(&[t, m], 1.0 / m as f32);
        let y: Vec<f32> = (0..m)
            .map(|c| {
                let sum: f32 = (0..t).map(|fr| x.data()[fr * m + c]).sum();
                sum / t as f32
            })
            .collect();
        Ok((FramePredictions { z_cla, z_att }, ClipPrediction { y }))
    }

    fn one_column_clip(track: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![track.len(), 1], track.to_vec()).unwrap()
    }

    /// Like mock_forward but clip values shrink toward 0.5 as segments
    /// get shorter, the way a real model loses confidence without
    /// context. Fragmented masks then pay for every splinter.
    fn context_mock_forward(x: &Tensor<f32>) -> crate::error::Result<(FramePredictions, ClipPrediction)> {
        let (frames, pred) = mock_forward(x)?;
        let t = x.shape()[0];
        let shrink = 1.0 - (-(t as f32) / 8.0).exp();
        let y = pred.y.iter().map(|&v| 0.5 + (v - 0.5) * shrink).collect();
        Ok((frames, ClipPrediction { y }))
    }

    #[test]
    fn cell_loss_is_mean_segment_cross_entropy() {
        // track 0.9 on frames 0..5, 0.1 after; the clip mean 0.6 clears
        // the gate and the single cell's loss is the two-segment mean
        let track = [0.9f32, 0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1];
        let clips = vec![("a".to_string(), one_column_clip(&track))];
        let grid = SalrGrid { thresholds: vec![0.5], widths: vec![1] };
        let report = refine(&mock_forward, &clips, &grid).unwrap();
        let want = (-(0.9f64.ln()) - (1.0 - 0.1f64).ln()) / 2.0;
        let got = report.choices[0].loss.unwrap();
        assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
        assert_eq!(report.choices[0].n_segments, 2);
        assert_eq!(report.choices[0].n_clips, 1);
        assert!(!report.choices[0].fallback);
    }

    #[test]
    fn empty_mask_scores_the_whole_clip_as_negative() {
        // gate passes (mean 0.55) but no frame clears the 0.9 threshold
        let track = [0.55f32; 10];
        let clips = vec![("a".to_string(), one_column_clip(&track))];
        let grid = SalrGrid { thresholds: vec![0.9], widths: vec![1] };
        let report = refine(&mock_forward, &clips, &grid).unwrap();
        let want = -(1.0 - 0.55f64).ln();
        let got = report.choices[0].loss.unwrap();
        assert!((got - want).abs() < 1e-6);
        assert_eq!(report.choices[0].n_segments, 1);
    }

    #[test]
    fn unqualified_class_falls_back_to_defaults() {
        let track = [0.2f32; 10];
        let clips = vec![("a".to_string(), one_column_clip(&track))];
        let report = refine(&mock_forward, &clips, &SalrGrid::default()).unwrap();
        let c = &report.choices[0];
        assert!(c.fallback);
        assert!(c.loss.is_none());
        assert_eq!(c.params, PostProcParams::default());
        assert!(report.table[0].iter().all(|cell| cell.loss.is_none()));
    }

    #[test]
    fn clean_predictor_ties_break_to_smallest_width_and_threshold() {
        // one long confident event: every cell induces the same mask, so
        // ties must resolve to the first visited cell
        let mut track = vec![0.02f32; 200];
        for v in track.iter_mut().take(181).skip(40) {
            *v = 0.95;
        }
        let clips = vec![("a".to_string(), one_column_clip(&track))];
        let report = refine(&mock_forward, &clips, &SalrGrid::default()).unwrap();
        let c = &report.choices[0];
        assert_eq!(c.params.median_width, 1);
        assert!((c.params.threshold - 0.1).abs() < 1e-6);
    }

    #[test]
    fn isolated_noise_spikes_push_the_width_up() {
        // single-frame spikes at heights straddling every grid threshold
        // litter the background, so no threshold rescues width 1, while
        // any wider filter erases them
        let heights = [0.2f32, 0.35, 0.5, 0.65, 0.8, 0.92];
        let mut track = vec![0.05f32; 200];
        for v in track.iter_mut().take(150).skip(50) {
            *v = 0.95;
        }
        let mut k = 0;
        let mut spike = 5;
        while spike < 45 {
            track[spike] = heights[k % heights.len()];
            k += 1;
            spike += 4;
        }
        let mut spike = 155;
        while spike < 195 {
            track[spike] = heights[k % heights.len()];
            k += 1;
            spike += 4;
        }
        let clips = vec![("a".to_string(), one_column_clip(&track))];
        let report = refine(&context_mock_forward, &clips, &SalrGrid::default()).unwrap();
        let c = &report.choices[0];
        assert!(c.params.median_width > 1, "chose width {}", c.params.median_width);
        let chosen = c.loss.unwrap();
        for cell in report.table[0].iter().filter(|cell| cell.width == 1) {
            assert!(chosen < cell.loss.unwrap(), "width 1 cell at t={} not beaten", cell.threshold);
        }
    }

    #[test]
    fn choices_agree_with_the_table_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clips: Vec<(String, Tensor<f32>)> = (0..4)
            .map(|i| {
                let track: Vec<f32> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
                (format!("c{i}"), one_column_clip(&track))
            })
            .collect();
        let grid = SalrGrid { thresholds: vec![0.2, 0.5, 0.8], widths: vec![1, 3, 5] };
        let report = refine(&mock_forward, &clips, &grid).unwrap();
        for c in &report.choices {
            if c.fallback {
                continue;
            }
            let best = report.table[c.class_id]
                .iter()
                .filter_map(|cell| cell.loss)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(c.loss.unwrap(), best);
            // no strictly better cell precedes the chosen one
            let chosen_pos = report.table[c.class_id]
                .iter()
                .position(|cell| {
                    cell.width == c.params.median_width
                        && (cell.threshold - c.params.threshold).abs() < 1e-9
                })
                .unwrap();
            for cell in &report.table[c.class_id][..chosen_pos] {
                assert!(cell.loss.unwrap() > best);
            }
        }
    }

    #[test]
    fn repeat_runs_serialize_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let clips: Vec<(String, Tensor<f32>)> = (0..3)
            .map(|i| {
                let track: Vec<f32> = (0..80).map(|_| rng.gen_range(0.0..1.0)).collect();
                (format!("c{i}"), one_column_clip(&track))
            })
            .collect();
        let a = refine(&mock_forward, &clips, &SalrGrid::default()).unwrap();
        let b = refine(&mock_forward, &clips, &SalrGrid::default()).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert_eq!(a.params_tsv(), b.params_tsv());
    }

    #[test]
    fn params_tsv_roundtrips() {
        let mut track = vec![0.05f32; 120];
        for v in track.iter_mut().take(100).skip(20) {
            *v = 0.9;
        }
        let clips = vec![("a".to_string(), one_column_clip(&track))];
        let report = refine(&mock_forward, &clips, &SalrGrid::default()).unwrap();
        let parsed = parse_params_tsv(&report.params_tsv()).unwrap();
        assert_eq!(parsed, report.post_proc_params());
        assert!(parse_params_tsv("class\tthreshold\twidth\n2\t0.5\t1\n").is_err());
    }
}
