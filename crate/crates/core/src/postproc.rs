//! Frame activations to timestamped events: per-class thresholding,
//! median filtering, and run extraction.

use crate::error::{Error, Result};
use crate::gcrnn::FramePredictions;

/// Per-class post-processing choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostProcParams {
    pub threshold: f32,
    pub median_width: usize,
}

impl Default for PostProcParams {
    fn default() -> Self {
        PostProcParams {
            threshold: 0.5,
            median_width: 1,
        }
    }
}

/// One detected or annotated interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub class_id: usize,
    pub onset: f64,
    pub offset: f64,
}

/// Events of one clip, sorted by (class_id, onset). Within a class, runs
/// produced here never overlap or touch.
#[derive(Clone, Debug, PartialEq)]
pub struct EventList {
    pub clip_id: String,
    pub events: Vec<Event>,
}

impl EventList {
    pub fn new(clip_id: impl Into<String>, mut events: Vec<Event>) -> Self {
        events.sort_by(|a, b| {
            (a.class_id, a.onset, a.offset)
                .partial_cmp(&(b.class_id, b.onset, b.offset))
                .expect("event times are finite")
        });
        EventList {
            clip_id: clip_id.into(),
            events,
        }
    }
}

/// 1 where the activation strictly exceeds the threshold.
pub fn threshold_frames(values: &[f32], threshold: f32) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v > threshold)).collect()
}

/// Median of a centered window over a binary sequence; boundaries are
/// handled by replicating the edge values. Width must be odd.
pub fn median_filter(b: &[u8], width: usize) -> Result<Vec<u8>> {
    if width % 2 == 0 || width == 0 {
        return Err(Error::Config(format!(
            "median filter width must be odd and positive, got {width}"
        )));
    }
    if width == 1 || b.is_empty() {
        return Ok(b.to_vec());
    }
    let n = b.len();
    let r = width / 2;
    let need = r + 1; // majority count of ones in the window
    let mut out = vec![0u8; n];
    for i in 0..n {
        let mut ones = 0usize;
        for d in 0..width {
            let j = (i + d).saturating_sub(r).min(n - 1);
            ones += b[j] as usize;
        }
        out[i] = u8::from(ones >= need);
    }
    Ok(out)
}

/// Converts maximal runs of ones to events. A run [t0, t1] spans
/// t0*hop/sr to (t1+1)*hop/sr seconds; frames lie fully inside the
/// signal, so offsets never pass the clip end.
pub fn frames_to_events(
    b: &[u8],
    frame_hop: usize,
    sample_rate: u32,
    class_id: usize,
) -> Vec<Event> {
    let step = frame_hop as f64 / sample_rate as f64;
    let mut events = Vec::new();
    let mut run_start: Option<usize> = None;
    for (t, &v) in b.iter().enumerate() {
        match (run_start, v) {
            (None, 1) => run_start = Some(t),
            (Some(t0), 0) => {
                events.push(Event {
                    class_id,
                    onset: t0 as f64 * step,
                    offset: t as f64 * step,
                });
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(t0) = run_start {
        events.push(Event {
            class_id,
            onset: t0 as f64 * step,
            offset: b.len() as f64 * step,
        });
    }
    events
}

/// Events back to a frame mask; inverse of [`frames_to_events`] for masks
/// it produced.
pub fn events_to_frames(
    events: &[Event],
    n_frames: usize,
    frame_hop: usize,
    sample_rate: u32,
) -> Vec<u8> {
    let step = frame_hop as f64 / sample_rate as f64;
    let mut b = vec![0u8; n_frames];
    for e in events {
        let t0 = (e.onset / step).round() as usize;
        let t1 = ((e.offset / step).round() as usize).min(n_frames);
        for slot in b.iter_mut().take(t1).skip(t0.min(n_frames)) {
            *slot = 1;
        }
    }
    b
}

/// Full per-class pipeline: threshold, median filter, run extraction;
/// classes use their own parameters.
pub fn apply(
    preds: &FramePredictions,
    params_per_class: &[PostProcParams],
    clip_id: &str,
    frame_hop: usize,
    sample_rate: u32,
) -> Result<EventList> {
    let m = preds.n_classes();
    if params_per_class.len() != m {
        return Err(Error::Config(format!(
            "{} post-processing parameter sets for {m} classes",
            params_per_class.len()
        )));
    }
    let mut events = Vec::new();
    for (c, pp) in params_per_class.iter().enumerate() {
        let track = preds.class_track(c);
        let mask = threshold_frames(&track, pp.threshold);
        let filtered = median_filter(&mask, pp.median_width)?;
        events.extend(frames_to_events(&filtered, frame_hop, sample_rate, c));
    }
    Ok(EventList::new(clip_id, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_is_strict() {
        assert_eq!(threshold_frames(&[0.6, 0.6, 0.6], 0.5), vec![1, 1, 1]);
        assert_eq!(threshold_frames(&[0.5, 0.4999, 0.5001], 0.5), vec![0, 0, 1]);
    }

    #[test]
    fn threshold_agrees_with_scalar_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v: Vec<f32> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
            let th: f32 = rng.gen_range(0.0..1.0);
            let got = threshold_frames(&v, th);
            for (x, g) in v.iter().zip(&got) {
                assert_eq!(*g == 1, *x > th);
            }
        }
    }

    #[test]
    fn median_width_one_is_identity() {
        let b = vec![0, 1, 1, 0, 1, 0];
        assert_eq!(median_filter(&b, 1).unwrap(), b);
    }

    #[test]
    fn median_known_example_width_three() {
        let b = vec![0, 1, 0, 0, 1, 1, 1, 0];
        assert_eq!(median_filter(&b, 3).unwrap(), vec![0, 0, 0, 0, 1, 1, 1, 0]);
    }

    #[test]
    fn median_all_ones_any_width() {
        let b = vec![1u8; 9];
        for w in [1, 3, 5, 7, 9, 11] {
            assert_eq!(median_filter(&b, w).unwrap(), b);
        }
    }

    #[test]
    fn median_rejects_even_width() {
        assert!(median_filter(&[0, 1], 2).is_err());
    }

    /// Reference implementation: materialize the replicated window, sort,
    /// take the middle element.
    fn median_oracle(b: &[u8], width: usize) -> Vec<u8> {
        let n = b.len();
        let r = width / 2;
        (0..n)
            .map(|i| {
                let mut w: Vec<u8> = (0..width)
                    .map(|d| {
                        let j = (i + d).saturating_sub(r).min(n - 1);
                        b[j]
                    })
                    .collect();
                w.sort_unstable();
                w[width / 2]
            })
            .collect()
    }

    #[test]
    fn median_matches_sliding_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let b: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            for w in [1usize, 3, 5, 7] {
                assert_eq!(median_filter(&b, w).unwrap(), median_oracle(&b, w));
            }
        }
    }

    #[test]
    fn signals_with_runs_at_least_width_are_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            for w in [3usize, 5] {
                // build alternating runs, each at least w long
                let mut b: Vec<u8> = Vec::new();
                let mut bit = rng.gen_range(0..2) as u8;
                for _ in 0..rng.gen_range(1..5) {
                    let run = rng.gen_range(w..w + 6);
                    b.extend(std::iter::repeat(bit).take(run));
                    bit = 1 - bit;
                }
                let out = median_filter(&b, w).unwrap();
                assert_eq!(out, b, "width {w}");
            }
        }
    }

    #[test]
    fn raising_threshold_never_adds_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let v: Vec<f32> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
            let lo: f32 = rng.gen_range(0.0..0.5);
            let hi: f32 = lo + rng.gen_range(0.0..0.5);
            let a = threshold_frames(&v, lo);
            let b = threshold_frames(&v, hi);
            for (x, y) in a.iter().zip(&b) {
                assert!(y <= x);
            }
        }
    }

    #[test]
    fn run_extraction_known_arithmetic() {
        let events = frames_to_events(&[0, 0, 1, 1, 1, 0], 664, 16_000, 4);
        assert_eq!(events.len(), 1);
        let e = events[0];
        assert_eq!(e.class_id, 4);
        assert!((e.onset - 2.0 * 664.0 / 16_000.0).abs() < 1e-12);
        assert!((e.offset - 5.0 * 664.0 / 16_000.0).abs() < 1e-12);
        assert!((e.onset - 0.0830).abs() < 1e-4);
        assert!((e.offset - 0.2075).abs() < 1e-4);
    }

    #[test]
    fn all_zeros_give_no_events() {
        assert!(frames_to_events(&[0; 50], 664, 16_000, 0).is_empty());
    }

    #[test]
    fn all_ones_over_240_frames_span_to_9_96_seconds() {
        let events = frames_to_events(&[1; 240], 664, 16_000, 0);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].onset, 0.0);
        assert!((events[0].offset - 9.96).abs() < 1e-9);
    }

    #[test]
    fn mask_event_roundtrip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.gen_range(1..60);
            let b: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let events = frames_to_events(&b, 664, 16_000, 0);
            let back = events_to_frames(&events, n, 664, 16_000);
            assert_eq!(back, b);
        }
    }

    fn preds(z: Vec<f32>, t: usize, m: usize) -> FramePredictions {
        let att = vec![1.0 / m as f32; t * m];
        FramePredictions {
            z_cla: Tensor::new(vec![t, m], z).unwrap(),
            z_att: Tensor::new(vec![t, m], att).unwrap(),
        }
    }

    #[test]
    fn apply_equals_per_class_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let t = 25;
        let m = 2;
        let z: Vec<f32> = (0..t * m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = preds(z, t, m);
        let pp = [
            PostProcParams {
                threshold: 0.5,
                median_width: 1,
            },
            PostProcParams {
                threshold: 0.3,
                median_width: 5,
            },
        ];
        let got = apply(&p, &pp, "clip", 664, 16_000).unwrap();
        let mut want = Vec::new();
        for c in 0..m {
            let track = p.class_track(c);
            let mask = threshold_frames(&track, pp[c].threshold);
            let filt = median_filter(&mask, pp[c].median_width).unwrap();
            want.extend(frames_to_events(&filt, 664, 16_000, c));
        }
        assert_eq!(got, EventList::new("clip", want));
    }

    #[test]
    fn all_half_activations_yield_empty_list() {
        let p = preds(vec![0.5; 20], 10, 2);
        let pp = [PostProcParams::default(); 2];
        let got = apply(&p, &pp, "clip", 664, 16_000).unwrap();
        assert!(got.events.is_empty());
    }
}
