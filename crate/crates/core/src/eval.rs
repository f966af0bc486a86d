//! Event-based scoring with onset/offset collars.
//!
//! Matching within a clip and class is a maximum-cardinality one-to-one
//! assignment between reference and estimated events (greedy matching is
//! order-dependent; the optimum is well-defined and testable against
//! brute force). Counts are summed over clips, metrics computed per
//! class, and macro averages weight every class equally.

use std::collections::BTreeMap;
use std::fmt;

use crate::postproc::{Event, EventList};

/// Tolerances for boundary agreement. The offset tolerance is the larger
/// of the absolute collar and the relative fraction of the reference
/// event's duration.
#[derive(Clone, Copy, Debug)]
pub struct CollarConfig {
    pub onset_collar: f64,
    pub offset_collar_abs: f64,
    pub offset_collar_rel: f64,
}

impl Default for CollarConfig {
    fn default() -> Self {
        CollarConfig {
            onset_collar: 0.200,
            offset_collar_abs: 0.200,
            offset_collar_rel: 0.20,
        }
    }
}

/// True when `est` falls within the collars around `ref_ev`. Both events
/// must already be of the same class.
pub fn matches(ref_ev: &Event, est: &Event, collars: &CollarConfig) -> bool {
    let onset_ok = (est.onset - ref_ev.onset).abs() <= collars.onset_collar;
    let ref_dur = ref_ev.offset - ref_ev.onset;
    let offset_tol = collars
        .offset_collar_abs
        .max(collars.offset_collar_rel * ref_dur);
    let offset_ok = (est.offset - ref_ev.offset).abs() <= offset_tol;
    onset_ok && offset_ok
}

/// Per-class true positives, false positives, false negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn kuhn_augment(
    u: usize,
    adj: &[Vec<usize>],
    visited: &mut [bool],
    match_right: &mut [usize],
) -> bool {
    for &v in &adj[u] {
        if !visited[v] {
            visited[v] = true;
            if match_right[v] == usize::MAX
                || kuhn_augment(match_right[v], adj, visited, match_right)
            {
                match_right[v] = u;
                return true;
            }
        }
    }
    false
}

fn max_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    let mut match_right = vec![usize::MAX; n_right];
    let mut size = 0;
    for u in 0..adj.len() {
        let mut visited = vec![false; n_right];
        if kuhn_augment(u, adj, &mut visited, &mut match_right) {
            size += 1;
        }
    }
    size
}

/// Maximum one-to-one matching per class within one clip.
pub fn match_events(
    ref_list: &EventList,
    est_list: &EventList,
    collars: &CollarConfig,
) -> BTreeMap<usize, Counts> {
    let mut by_class: BTreeMap<usize, (Vec<&Event>, Vec<&Event>)> = BTreeMap::new();
    for e in &ref_list.events {
        by_class.entry(e.class_id).or_default().0.push(e);
    }
    for e in &est_list.events {
        by_class.entry(e.class_id).or_default().1.push(e);
    }
    let mut out = BTreeMap::new();
    for (class_id, (refs, ests)) in by_class {
        let adj: Vec<Vec<usize>> = refs
            .iter()
            .map(|r| {
                ests.iter()
                    .enumerate()
                    .filter(|(_, e)| matches(r, e, collars))
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        let tp = max_matching(&adj, ests.len());
        out.insert(
            class_id,
            Counts {
                tp,
                fp: ests.len() - tp,
                fn_: refs.len() - tp,
            },
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct ClassScore {
    pub class_id: usize,
    pub counts: Counts,
    pub n_ref: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub er: f64,
}

#[derive(Clone, Debug)]
pub struct ScoreReport {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    pub macro_er: f64,
}

/// Scores an estimated corpus against a reference corpus. Matching is
/// per clip; counts are summed per class across clips. Clips present on
/// only one side count against the other. A class with no reference and
/// no estimated events scores F1 = 1, ER = 0; the ER denominator is
/// clamped to 1 so classes with zero references but spurious detections
/// stay finite.
pub fn score(
    ref_corpus: &[EventList],
    est_corpus: &[EventList],
    collars: &CollarConfig,
    n_classes: usize,
) -> ScoreReport {
    let empty = |id: &str| EventList::new(id, vec![]);
    let ref_by_id: BTreeMap<&str, &EventList> = ref_corpus
        .iter()
        .map(|l| (l.clip_id.as_str(), l))
        .collect();
    let est_by_id: BTreeMap<&str, &EventList> = est_corpus
        .iter()
        .map(|l| (l.clip_id.as_str(), l))
        .collect();
    let mut clip_ids: Vec<&str> = ref_by_id.keys().chain(est_by_id.keys()).copied().collect();
    clip_ids.sort_unstable();
    clip_ids.dedup();

    let mut counts: BTreeMap<usize, Counts> = BTreeMap::new();
    let mut n_ref: BTreeMap<usize, usize> = BTreeMap::new();
    for id in clip_ids {
        let blank_ref;
        let r = match ref_by_id.get(id) {
            Some(r) => *r,
            None => {
                blank_ref = empty(id);
                &blank_ref
            }
        };
        let blank_est;
        let e = match est_by_id.get(id) {
            Some(e) => *e,
            None => {
                blank_est = empty(id);
                &blank_est
            }
        };
        for (class_id, c) in match_events(r, e, collars) {
            let slot = counts.entry(class_id).or_default();
            slot.tp += c.tp;
            slot.fp += c.fp;
            slot.fn_ += c.fn_;
        }
        for ev in &r.events {
            *n_ref.entry(ev.class_id).or_default() += 1;
        }
    }

    let mut per_class = Vec::with_capacity(n_classes);
    for class_id in 0..n_classes {
        let c = counts.get(&class_id).copied().unwrap_or_default();
        let refs = n_ref.get(&class_id).copied().unwrap_or(0);
        let ests = c.tp + c.fp;
        let (precision, recall, f1, er) = if refs == 0 && ests == 0 {
            (0.0, 0.0, 1.0, 0.0)
        } else {
            let p = if ests > 0 { c.tp as f64 / ests as f64 } else { 0.0 };
            let r = if refs > 0 { c.tp as f64 / refs as f64 } else { 0.0 };
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let er = (c.fp + c.fn_) as f64 / refs.max(1) as f64;
            (p, r, f1, er)
        };
        per_class.push(ClassScore {
            class_id,
            counts: c,
            n_ref: refs,
            precision,
            recall,
            f1,
            er,
        });
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n_classes.max(1) as f64;
    let macro_er = per_class.iter().map(|c| c.er).sum::<f64>() / n_classes.max(1) as f64;
    ScoreReport {
        per_class,
        macro_f1,
        macro_er,
    }
}

impl ScoreReport {
    /// Machine-readable form; `class_names[i]` labels class id i.
    pub fn to_tsv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class\ttp\tfp\tfn\tn_ref\tprecision\trecall\tf1\ter\n");
        for c in &self.per_class {
            let name = class_names
                .get(c.class_id)
                .map(String::as_str)
                .unwrap_or("?");
            out.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                c.counts.tp, c.counts.fp, c.counts.fn_, c.n_ref, c.precision, c.recall, c.f1, c.er
            ));
        }
        out.push_str(&format!(
            "macro\t\t\t\t\t\t\t{:.6}\t{:.6}\n",
            self.macro_f1, self.macro_er
        ));
        out
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>5} {:>5} {:>5} {:>9} {:>7} {:>7} {:>7}",
            "class", "tp", "fp", "fn", "precision", "recall", "f1", "er"
        )?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:>8} {:>5} {:>5} {:>5} {:>9.4} {:>7.4} {:>7.4} {:>7.4}",
                c.class_id, c.counts.tp, c.counts.fp, c.counts.fn_, c.precision, c.recall, c.f1, c.er
            )?;
        }
        writeln!(
            f,
            "macro F1 = {:.4}, macro ER = {:.4}",
            self.macro_f1, self.macro_er
        )
    }
}
