//! Independent brute-force reference for the segment and event scores.
#![allow(dead_code)]

use std::collections::BTreeSet;

/// `[video][snippet][class]`
pub type Grid = Vec<Vec<Vec<bool>>>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub class: usize,
    pub cells: BTreeSet<usize>,
}

pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn cell_counts(pred: &Grid, truth: &Grid) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pv, tv) in pred.iter().zip(truth) {
        for (pt, tt) in pv.iter().zip(tv) {
            for (&p, &t) in pt.iter().zip(tt) {
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
    }
    (tp, fp, fn_)
}

/// Groups positive snippets of one class into sets of consecutive
/// indices by repeatedly merging neighbours.
pub fn spans(video: &[Vec<bool>], classes: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for c in 0..classes {
        let mut sets: Vec<BTreeSet<usize>> = video
            .iter()
            .enumerate()
            .filter(|(_, row)| row[c])
            .map(|(t, _)| BTreeSet::from([t]))
            .collect();
        loop {
            let mut merged = false;
            'outer: for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    let touch = sets[i].iter().any(|a| sets[j].iter().any(|b| a.abs_diff(*b) == 1));
                    if touch {
                        let other = sets.remove(j);
                        sets[i].extend(other);
                        merged = true;
                        break 'outer;
                    }
                }
            }
            if !merged {
                break;
            }
        }
        sets.sort();
        out.extend(sets.into_iter().map(|cells| Span { class: c, cells }));
    }
    out
}

pub fn iou(a: &Span, b: &Span) -> f64 {
    let inter = a.cells.intersection(&b.cells).count();
    let union = a.cells.union(&b.cells).count();
    inter as f64 / union as f64
}

/// Maximum one-to-one matching by exhaustive search over assignments.
pub fn event_counts(pred: &[Span], truth: &[Span], miou: f64) -> (usize, usize, usize) {
    fn best(i: usize, pred: &[Span], truth: &[Span], used: &mut Vec<bool>, miou: f64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut top = best(i + 1, pred, truth, used, miou);
        for j in 0..truth.len() {
            if !used[j] && pred[i].class == truth[j].class && iou(&pred[i], &truth[j]) >= miou {
                used[j] = true;
                top = top.max(1 + best(i + 1, pred, truth, used, miou));
                used[j] = false;
            }
        }
        top
    }
    let tp = best(0, pred, truth, &mut vec![false; truth.len()], miou);
    (tp, pred.len() - tp, truth.len() - tp)
}

pub fn and(a: &Grid, b: &Grid) -> Grid {
    a.iter()
        .zip(b)
        .map(|(va, vb)| {
            va.iter()
                .zip(vb)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| x && y).collect())
                .collect()
        })
        .collect()
}

pub fn event_totals(pred: &Grid, truth: &Grid, classes: usize, miou: f64) -> (usize, usize, usize) {
    let mut sum = (0, 0, 0);
    for (pv, tv) in pred.iter().zip(truth) {
        let (tp, fp, fn_) = event_counts(&spans(pv, classes), &spans(tv, classes), miou);
        sum = (sum.0 + tp, sum.1 + fp, sum.2 + fn_);
    }
    sum
}

/// Micro-averaged report: the ten scores in the library's field order.
pub fn report(pa: &Grid, pv: &Grid, ta: &Grid, tv: &Grid, classes: usize, miou: f64) -> [f64; 10] {
    let pav = and(pa, pv);
    let tav = and(ta, tv);
    let add = |x: (usize, usize, usize), y: (usize, usize, usize)| (x.0 + y.0, x.1 + y.1, x.2 + y.2);
    let score = |c: (usize, usize, usize)| f1(c.0, c.1, c.2);
    let (sa, sv, sav) = (cell_counts(pa, ta), cell_counts(pv, tv), cell_counts(&pav, &tav));
    let (ea, ev, eav) = (
        event_totals(pa, ta, classes, miou),
        event_totals(pv, tv, classes, miou),
        event_totals(&pav, &tav, classes, miou),
    );
    [
        score(sa),
        score(sv),
        score(sav),
        (score(sa) + score(sv) + score(sav)) / 3.0,
        score(add(sa, sv)),
        score(ea),
        score(ev),
        score(eav),
        (score(ea) + score(ev) + score(eav)) / 3.0,
        score(add(ea, ev)),
    ]
}
