//! Gradient-boosted regression trees with exact split search over
//! midpoint thresholds.

use serde::{Deserialize, Serialize};

use super::metrics::sigmoid;

/// Thresholds per feature are capped at this many quantiles of the
/// midpoints.
pub const MAX_CUTS: usize = 256;
const MISSING: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    Logistic,
}

impl Loss {
    pub fn value(self, raw: &[f64], y: &[f64]) -> f64 {
        let n = y.len().max(1) as f64;
        match self {
            Loss::Squared => raw.iter().zip(y).map(|(f, y)| (y - f).powi(2)).sum::<f64>() / n,
            // log(1 + e^f) - y f, computed stably
            Loss::Logistic => {
                raw.iter().zip(y).map(|(f, y)| f.max(0.0) + (-f.abs()).exp().ln_1p() - y * f).sum::<f64>() / n
            }
        }
    }

    fn transform(self, raw: f64) -> f64 {
        match self {
            Loss::Squared => raw,
            Loss::Logistic => sigmoid(raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    /// `x < threshold` goes left; NaN goes left iff `default_left`.
    Split { feature: usize, threshold: f64, default_left: bool, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, default_left, left, right } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn root_split(&self) -> Option<(usize, f64, bool)> {
        match self.nodes.first()? {
            Node::Split { feature, threshold, default_left, .. } => Some((*feature, *threshold, *default_left)),
            Node::Leaf { .. } => None,
        }
    }

    fn scale(&mut self, s: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value } = n {
                *value *= s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub num_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self { num_trees: 100, max_depth: 4, learning_rate: 0.1, min_leaf: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub loss: Loss,
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn constant(loss: Loss, base_score: f64, n_features: usize) -> Self {
        Self { loss, base_score, learning_rate: 0.0, n_features, trees: Vec::new() }
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    /// Mean for squared loss, probability for logistic loss.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.loss.transform(self.raw(x))
    }

    pub fn fit(x: &[Vec<f64>], y: &[f64], loss: Loss, params: &GbdtParams) -> Self {
        Self::fit_traced(x, y, loss, params).0
    }

    /// Also returns the training loss before the first round and after
    /// each kept tree.
    pub fn fit_traced(x: &[Vec<f64>], y: &[f64], loss: Loss, params: &GbdtParams) -> (Self, Vec<f64>) {
        assert_eq!(x.len(), y.len(), "row/label count mismatch");
        let n_features = x.first().map_or(0, Vec::len);
        let base_score = base_score(loss, y);
        let mut model = Self::constant(loss, base_score, n_features);
        model.learning_rate = params.learning_rate;
        let mut raw = vec![base_score; y.len()];
        let mut trace = vec![loss.value(&raw, y)];
        if y.is_empty() {
            return (model, trace);
        }
        if loss == Loss::Logistic && (y.iter().all(|v| *v == 0.0) || y.iter().all(|v| *v == 1.0)) {
            log::warn!("single-class binary task; returning a constant model");
            return (model, trace);
        }

        let binned = Binned::new(x);
        let all: Vec<u32> = (0..y.len() as u32).collect();
        let mut grad = vec![0.0; y.len()];
        let mut hess = vec![1.0; y.len()];
        for _ in 0..params.num_trees {
            for i in 0..y.len() {
                match loss {
                    Loss::Squared => grad[i] = y[i] - raw[i],
                    Loss::Logistic => {
                        let p = sigmoid(raw[i]);
                        grad[i] = y[i] - p;
                        hess[i] = p * (1.0 - p);
                    }
                }
            }
            let mut grower = Grower { binned: &binned, grad: &grad, hess: &hess, loss, params, nodes: Vec::new() };
            grower.grow(all.clone(), 0);
            let mut tree = Tree { nodes: grower.nodes };
            if tree.nodes.len() == 1 {
                break;
            }
            tree.scale(params.learning_rate);

            let prev = *trace.last().expect("nonempty");
            let step: Vec<f64> = x.iter().map(|r| tree.predict(r)).collect();
            let mut s = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let cand: Vec<f64> = raw.iter().zip(&step).map(|(r, d)| r + s * d).collect();
                let l = loss.value(&cand, y);
                if l <= prev {
                    accepted = Some((cand, l));
                    break;
                }
                s *= 0.5;
            }
            let Some((cand, l)) = accepted else { break };
            if s != 1.0 {
                tree.scale(s);
            }
            raw = cand;
            trace.push(l);
            model.trees.push(tree);
        }
        (model, trace)
    }
}

fn base_score(loss: Loss, y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    match loss {
        Loss::Squared => mean,
        Loss::Logistic => {
            let p = mean.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    }
}

/// Sorted candidate thresholds: midpoints between consecutive distinct
/// values, thinned to `MAX_CUTS` quantiles when there are more.
pub fn candidate_thresholds(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mids: Vec<f64> = v.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
    if mids.len() <= MAX_CUTS {
        return mids;
    }
    let mut out: Vec<f64> =
        (0..MAX_CUTS).map(|i| mids[((2 * i + 1) * mids.len()) / (2 * MAX_CUTS)]).collect();
    out.dedup();
    out
}

struct Binned {
    cuts: Vec<Vec<f64>>,
    /// Per feature, per row: number of cuts `<= x`, or `MISSING`.
    bins: Vec<Vec<u16>>,
}

impl Binned {
    fn new(x: &[Vec<f64>]) -> Self {
        let n_features = x.first().map_or(0, Vec::len);
        let mut cuts = Vec::with_capacity(n_features);
        let mut bins = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let c = candidate_thresholds(x.iter().map(|r| r[f]));
            bins.push(
                x.iter()
                    .map(|r| {
                        let v = r[f];
                        if v.is_nan() {
                            MISSING
                        } else {
                            c.partition_point(|t| *t <= v) as u16
                        }
                    })
                    .collect(),
            );
            cuts.push(c);
        }
        Self { cuts, bins }
    }
}

#[derive(Debug, Clone, Copy)]
struct BestSplit {
    feature: usize,
    cut: usize,
    default_left: bool,
    gain: f64,
}

struct Grower<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    loss: Loss,
    params: &'a GbdtParams,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<u32>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let split = if depth < self.params.max_depth { self.best_split(&rows) } else { None };
        let Some(best) = split else {
            self.nodes[id] = Node::Leaf { value: self.leaf_value(&rows) };
            return id;
        };
        let col = &self.binned.bins[best.feature];
        let (l, r): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&i| {
            let b = col[i as usize];
            if b == MISSING {
                best.default_left
            } else {
                (b as usize) <= best.cut
            }
        });
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: self.binned.cuts[best.feature][best.cut],
            default_left: best.default_left,
            left,
            right,
        };
        id
    }

    fn leaf_value(&self, rows: &[u32]) -> f64 {
        let g: f64 = rows.iter().map(|&i| self.grad[i as usize]).sum();
        match self.loss {
            Loss::Squared => g / rows.len().max(1) as f64,
            Loss::Logistic => {
                let h: f64 = rows.iter().map(|&i| self.hess[i as usize]).sum();
                if h < 1e-12 {
                    0.0
                } else {
                    g / h
                }
            }
        }
    }

    fn best_split(&self, rows: &[u32]) -> Option<BestSplit> {
        let min_leaf = self.params.min_leaf.max(1) as f64;
        let total_s: f64 = rows.iter().map(|&i| self.grad[i as usize]).sum();
        let total_n = rows.len() as f64;
        let parent = total_s * total_s / total_n;
        let mut best: Option<BestSplit> = None;
        let mut sums = Vec::new();
        let mut counts = Vec::new();
        for (f, cuts) in self.binned.cuts.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            sums.clear();
            sums.resize(cuts.len() + 1, 0.0);
            counts.clear();
            counts.resize(cuts.len() + 1, 0.0);
            let (mut ms, mut mc) = (0.0, 0.0);
            let col = &self.binned.bins[f];
            for &i in rows {
                let b = col[i as usize];
                let g = self.grad[i as usize];
                if b == MISSING {
                    ms += g;
                    mc += 1.0;
                } else {
                    sums[b as usize] += g;
                    counts[b as usize] += 1.0;
                }
            }
            let (mut sl, mut nl) = (0.0, 0.0);
            for j in 0..cuts.len() {
                sl += sums[j];
                nl += counts[j];
                let mut options = [(true, sl + ms, nl + mc), (false, sl, nl)];
                if mc == 0.0 {
                    // nothing missing here: send future missing values to the larger side
                    let nr = total_n - nl;
                    options[0].0 = nl >= nr;
                }
                let tries = if mc == 0.0 { &options[..1] } else { &options[..] };
                for &(default_left, s_l, n_l) in tries {
                    let n_r = total_n - n_l;
                    if n_l < min_leaf || n_r < min_leaf {
                        continue;
                    }
                    let s_r = total_s - s_l;
                    let gain = s_l * s_l / n_l + s_r * s_r / n_r - parent;
                    if gain > 1e-12 && best.is_none_or(|b| gain > b.gain) {
                        best = Some(BestSplit { feature: f, cut: j, default_left, gain });
                    }
                }
            }
        }
        best
    }
}

/// Variance-reduction gain of splitting `g` by `go_left`; `None` when a side
/// is empty.
pub fn split_gain(g: &[f64], go_left: &[bool]) -> Option<f64> {
    let (mut sl, mut nl, mut sr, mut nr) = (0.0, 0.0, 0.0, 0.0);
    for (v, l) in g.iter().zip(go_left) {
        if *l {
            sl += v;
            nl += 1.0;
        } else {
            sr += v;
            nr += 1.0;
        }
    }
    if nl == 0.0 || nr == 0.0 {
        return None;
    }
    let s = sl + sr;
    Some(sl * sl / nl + sr * sr / nr - s * s / (nl + nr))
}
