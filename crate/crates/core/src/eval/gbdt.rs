//! Gradient-boosted regression trees on the logistic loss.
//!
//! Depth-wise exact greedy splits with L1/L2-regularized Newton leaves:
//! `w = −sign(G)·max(|G| − l1, 0) / (H + l2)`.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub l1: f64,
    pub l2: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_sum_hessian: f64,
    /// Row fraction drawn (without replacement) per tree.
    pub subsample: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_estimators: 500,
            learning_rate: 0.02,
            l1: 1.0,
            l2: 1.0,
            max_depth: 6,
            min_samples_leaf: 20,
            min_sum_hessian: 1e-3,
            subsample: 1.0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("gbdt.{field}"),
                message: message.into(),
            })
        };
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.l1 < 0.0 || self.l2 < 0.0 {
            return bad("l1/l2", "must be non-negative");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample", "must lie in (0, 1]");
        }
        if self.min_samples_leaf < 1 {
            return bad("min_samples_leaf", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: ArrayView1<f64>) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub base_margin: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Mean logistic loss on the training rows after each round (index 0 is
    /// the prior).
    pub train_loss: Vec<f64>,
}

fn soft_threshold(g: f64, l1: f64) -> f64 {
    g.signum() * (g.abs() - l1).max(0.0)
}

fn leaf_score(g: f64, h: f64, cfg: &GbdtConfig) -> f64 {
    let t = soft_threshold(g, cfg.l1);
    t * t / (h + cfg.l2)
}

fn leaf_value(g: f64, h: f64, cfg: &GbdtConfig) -> f64 {
    -soft_threshold(g, cfg.l1) / (h + cfg.l2)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logistic_loss(margin: &[f64], y: &[bool]) -> f64 {
    let total: f64 = margin
        .iter()
        .zip(y)
        .map(|(&f, &yi)| {
            // log(1 + e^{-s f}) with s = ±1, computed stably.
            let z = if yi { f } else { -f };
            if z > 0.0 {
                (-z).exp().ln_1p()
            } else {
                -z + z.exp().ln_1p()
            }
        })
        .sum();
    total / margin.len() as f64
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    /// Rows sorted by each feature.
    sorted: &'a [Vec<usize>],
    grad: &'a [f64],
    hess: &'a [f64],
    cfg: &'a GbdtConfig,
}

impl Builder<'_> {
    fn build(&self, rows: &[usize], in_node: &mut [bool], depth: usize, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf(0.0));
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let best = if depth < self.cfg.max_depth && rows.len() >= 2 * self.cfg.min_samples_leaf {
            self.best_split(rows, in_node, g, h)
        } else {
            None
        };
        match best {
            None => nodes[id] = Node::Leaf(leaf_value(g, h, self.cfg)),
            Some((feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[[i, feature]] <= threshold);
                for &i in &r {
                    in_node[i] = false;
                }
                let left = self.build(&l, in_node, depth + 1, nodes);
                for &i in &l {
                    in_node[i] = false;
                }
                for &i in &r {
                    in_node[i] = true;
                }
                let right = self.build(&r, in_node, depth + 1, nodes);
                for &i in &l {
                    in_node[i] = true;
                }
                nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
        }
        id
    }

    /// Exact greedy search; `in_node` marks the rows of this node.
    fn best_split(&self, rows: &[usize], in_node: &[bool], g: f64, h: f64) -> Option<(usize, f64)> {
        let parent = leaf_score(g, h, self.cfg);
        let min_leaf = self.cfg.min_samples_leaf;
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            let mut prev: Option<usize> = None;
            for &i in order.iter().filter(|&&i| in_node[i]) {
                if let Some(p) = prev {
                    let (xp, xi) = (self.x[[p, f]], self.x[[i, f]]);
                    let nr = rows.len() - nl;
                    if xi > xp && nl >= min_leaf && nr >= min_leaf {
                        let hr = h - hl;
                        if hl >= self.cfg.min_sum_hessian && hr >= self.cfg.min_sum_hessian {
                            let gain = leaf_score(gl, hl, self.cfg) + leaf_score(g - gl, hr, self.cfg) - parent;
                            if gain > 1e-12 && best.is_none_or(|b| gain > b.0) {
                                best = Some((gain, f, xp + (xi - xp) / 2.0));
                            }
                        }
                    }
                }
                gl += self.grad[i];
                hl += self.hess[i];
                nl += 1;
                prev = Some(i);
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Fits a binary classifier; `x` is `rows × features`.
pub fn fit_gbdt(x: ArrayView2<f64>, y: &[bool], cfg: &GbdtConfig, seed: u64) -> Result<Gbdt> {
    cfg.validate()?;
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::shape(n, y.len()));
    }
    for (col, c) in x.columns().into_iter().enumerate() {
        if let Some(row) = c.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature column {col} (row {row})")));
        }
    }
    let n_pos = y.iter().filter(|v| **v).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::invalid("GBDT needs both classes in the training labels"));
    }
    let p0 = n_pos as f64 / n as f64;
    let base_margin = (p0 / (1.0 - p0)).ln();
    let sorted: Vec<Vec<usize>> = x
        .columns()
        .into_iter()
        .map(|c| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| c[a].total_cmp(&c[b]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut margin = vec![base_margin; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trees = Vec::with_capacity(cfg.n_estimators);
    let mut train_loss = vec![logistic_loss(&margin, y)];
    let take = ((n as f64 * cfg.subsample).round() as usize).clamp(1, n);
    for _ in 0..cfg.n_estimators {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            grad[i] = p - if y[i] { 1.0 } else { 0.0 };
            hess[i] = p * (1.0 - p);
        }
        let mut rows: Vec<usize> = if take < n {
            sample(&mut rng, n, take).into_vec()
        } else {
            (0..n).collect()
        };
        rows.sort_unstable();
        let mut in_node = vec![false; n];
        rows.iter().for_each(|&r| in_node[r] = true);
        let builder = Builder {
            x,
            sorted: &sorted,
            grad: &grad,
            hess: &hess,
            cfg,
        };
        let mut nodes = Vec::new();
        builder.build(&rows, &mut in_node, 0, &mut nodes);
        let tree = Tree { nodes };
        for (i, m) in margin.iter_mut().enumerate() {
            *m += cfg.learning_rate * tree.predict(x.row(i));
        }
        train_loss.push(logistic_loss(&margin, y));
        trees.push(tree);
    }
    Ok(Gbdt {
        base_margin,
        learning_rate: cfg.learning_rate,
        trees,
        train_loss,
    })
}

impl Gbdt {
    pub fn predict_margin(&self, x: ArrayView1<f64>) -> f64 {
        self.base_margin + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.rows().into_iter().map(|r| sigmoid(self.predict_margin(r))).collect()
    }
}

/// One-vs-rest ensemble for labels `0..k`; binary problems use one model.
#[derive(Debug, Clone)]
pub struct GbdtClassifier {
    pub n_classes: usize,
    pub models: Vec<Gbdt>,
}

impl GbdtClassifier {
    pub fn fit(x: ArrayView2<f64>, labels: &[usize], n_classes: usize, cfg: &GbdtConfig, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("classification needs at least two classes"));
        }
        let models = if n_classes == 2 {
            let y: Vec<bool> = labels.iter().map(|l| *l == 1).collect();
            vec![fit_gbdt(x, &y, cfg, seed)?]
        } else {
            (0..n_classes)
                .map(|c| {
                    let y: Vec<bool> = labels.iter().map(|l| *l == c).collect();
                    fit_gbdt(x, &y, cfg, seed.wrapping_add(c as u64))
                })
                .collect::<Result<_>>()?
        };
        Ok(Self { n_classes, models })
    }

    /// `rows × classes` scores.
    pub fn predict_scores(&self, x: ArrayView2<f64>) -> ndarray::Array2<f64> {
        let mut out = ndarray::Array2::zeros((x.nrows(), self.n_classes));
        if self.n_classes == 2 {
            let p = self.models[0].predict_proba(x);
            out.column_mut(1).assign(&p);
            out.column_mut(0).assign(&p.mapv(|v| 1.0 - v));
        } else {
            for (c, m) in self.models.iter().enumerate() {
                out.column_mut(c).assign(&m.predict_proba(x));
            }
        }
        out
    }
}
