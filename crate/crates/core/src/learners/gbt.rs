//! Least-squares gradient boosting over depth-limited regression trees.
//!
//! Trees are grown level by level with exact greedy splits: every feature is
//! sorted once up front and each level is a single pass over those orders.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;

fn default_min_leaf() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub trees: usize,
    pub depth: usize,
    pub learning_rate: f64,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            trees: 200,
            depth: 1,
            learning_rate: 0.1,
            subsample: 1.0,
            min_leaf: 20,
        }
    }
}

impl GbtParams {
    pub fn check(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::Config("gbt: trees must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("gbt: depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("gbt: learning_rate must be positive".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config("gbt: subsample must lie in (0, 1]".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::Config("gbt: min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node<T> {
    Leaf(T),
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<T> {
    pub nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tree<T> {
    fn leaf_of(&self, row: ArrayView1<'_, T>) -> usize {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf(_) => return k,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict_row(&self, row: ArrayView1<'_, T>) -> T {
        match self.nodes[self.leaf_of(row)] {
            Node::Leaf(v) => v,
            Node::Split { .. } => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel<T = f64> {
    pub base: T,
    pub trees: Vec<Tree<T>>,
}

/// Running statistics of one candidate node during a level scan.
#[derive(Clone, Copy)]
struct Scan<T> {
    sum_left: T,
    count_left: usize,
    last: Option<T>,
    best_gain: T,
    best: Option<(usize, T)>,
}

impl<T: Scalar> GbtModel<T> {
    pub fn fit(x: ArrayView2<'_, T>, y: ArrayView1<'_, T>, params: &GbtParams, seed: u64) -> Result<Self> {
        Ok(Self::fit_traced(x, y, params, seed)?.0)
    }

    /// Fits and also returns the training mean squared error after each tree.
    pub fn fit_traced(
        x: ArrayView2<'_, T>,
        y: ArrayView1<'_, T>,
        params: &GbtParams,
        seed: u64,
    ) -> Result<(Self, Vec<T>)> {
        params.check()?;
        let (n, p) = x.dim();
        if n != y.len() || n == 0 {
            return Err(Error::Schema(format!("gbt: {n} feature rows vs {} targets", y.len())));
        }
        let orders: Vec<Vec<usize>> = (0..p)
            .map(|f| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| x[[a, f]].as_f64().total_cmp(&x[[b, f]].as_f64()));
                idx
            })
            .collect();

        let base = y.sum() / T::from_usize_lossy(n);
        let mut pred = Array1::from_elem(n, base);
        let lr = T::lit(params.learning_rate);
        let take = ((params.subsample * n as f64).round() as usize).clamp(1, n);
        let mut trees = Vec::with_capacity(params.trees);
        let mut history = Vec::with_capacity(params.trees);
        for t in 0..params.trees {
            let mut in_sample = vec![take == n; n];
            if take < n {
                let mut rng = stream(seed, tag::SUBSAMPLE, 0, t as u32);
                for i in sample(&mut rng, n, take) {
                    in_sample[i] = true;
                }
            }
            let residual = &y - &pred;
            let tree = grow(x, residual.view(), &orders, &in_sample, params, lr);
            for (i, row) in x.outer_iter().enumerate() {
                pred[i] = pred[i] + tree.predict_row(row);
            }
            let mse = y
                .iter()
                .zip(pred.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                / T::from_usize_lossy(n);
            history.push(mse);
            trees.push(tree);
        }
        Ok((Self { base, trees }, history))
    }

    pub fn predict(&self, x: ArrayView2<'_, T>) -> Array1<T> {
        x.outer_iter()
            .map(|row| self.base + self.trees.iter().map(|t| t.predict_row(row)).sum::<T>())
            .collect()
    }
}

fn grow<T: Scalar>(
    x: ArrayView2<'_, T>,
    residual: ArrayView1<'_, T>,
    orders: &[Vec<usize>],
    in_sample: &[bool],
    params: &GbtParams,
    lr: T,
) -> Tree<T> {
    let n = residual.len();
    // node_of[i]: index into `nodes`, usize::MAX for rows outside the sample.
    let mut node_of: Vec<usize> = in_sample.iter().map(|&s| if s { 0 } else { usize::MAX }).collect();
    let mut nodes: Vec<Node<T>> = vec![Node::Leaf(T::zero())];
    // Per node: (sum, count).
    let mut stats: Vec<(T, usize)> = vec![(T::zero(), 0)];
    for i in 0..n {
        if in_sample[i] {
            stats[0].0 = stats[0].0 + residual[i];
            stats[0].1 += 1;
        }
    }
    let mut frontier: Vec<usize> = vec![0];
    let min_leaf = params.min_leaf;
    // Gains below this are rounding noise.
    let tolerance = T::epsilon() * T::lit(64.0);

    for _level in 0..params.depth {
        if frontier.is_empty() {
            break;
        }
        let mut local = vec![usize::MAX; nodes.len()];
        for (k, &node) in frontier.iter().enumerate() {
            local[node] = k;
        }
        let mut scans: Vec<Scan<T>> = frontier
            .iter()
            .map(|&node| {
                let (s, c) = stats[node];
                Scan {
                    sum_left: T::zero(),
                    count_left: 0,
                    last: None,
                    best_gain: tolerance * (T::one() + s * s / T::from_usize_lossy(c.max(1))),
                    best: None,
                }
            })
            .collect();
        for (f, order) in orders.iter().enumerate() {
            for sc in scans.iter_mut() {
                sc.sum_left = T::zero();
                sc.count_left = 0;
                sc.last = None;
            }
            for &i in order {
                let node = node_of[i];
                if node == usize::MAX || local[node] == usize::MAX {
                    continue;
                }
                let sc = &mut scans[local[node]];
                let v = x[[i, f]];
                if let Some(last) = sc.last {
                    let (total_sum, total_count) = stats[node];
                    let count_right = total_count - sc.count_left;
                    if v > last && sc.count_left >= min_leaf && count_right >= min_leaf {
                        let sum_right = total_sum - sc.sum_left;
                        let gain = sc.sum_left * sc.sum_left / T::from_usize_lossy(sc.count_left)
                            + sum_right * sum_right / T::from_usize_lossy(count_right)
                            - total_sum * total_sum / T::from_usize_lossy(total_count);
                        if gain > sc.best_gain {
                            let mut threshold = last + (v - last) / T::lit(2.0);
                            if threshold >= v {
                                threshold = last;
                            }
                            sc.best_gain = gain;
                            sc.best = Some((f, threshold));
                        }
                    }
                }
                sc.sum_left = sc.sum_left + residual[i];
                sc.count_left += 1;
                sc.last = Some(v);
            }
        }

        let mut next = Vec::new();
        for (k, &node) in frontier.iter().enumerate() {
            if let Some((feature, threshold)) = scans[k].best {
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf(T::zero()));
                nodes.push(Node::Leaf(T::zero()));
                stats.push((T::zero(), 0));
                stats.push((T::zero(), 0));
                nodes[node] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
                next.push(left);
                next.push(right);
            }
        }
        for i in 0..n {
            let node = node_of[i];
            if node == usize::MAX {
                continue;
            }
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
            } = nodes[node]
            {
                let child = if x[[i, feature]] <= threshold { left } else { right };
                node_of[i] = child;
                stats[child].0 = stats[child].0 + residual[i];
                stats[child].1 += 1;
            }
        }
        frontier = next;
    }

    for (k, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf(v) = node {
            let (s, c) = stats[k];
            *v = if c > 0 {
                lr * s / T::from_usize_lossy(c)
            } else {
                T::zero()
            };
        }
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_stump_on_binary_feature_is_two_group_means() {
        let x = array![[0.0], [1.0], [0.0], [1.0], [1.0], [0.0]];
        let y: Array1<f64> = array![1.0, 5.0, 2.0, 6.0, 7.0, 3.0];
        let params = GbtParams {
            trees: 1,
            depth: 1,
            learning_rate: 1.0,
            subsample: 1.0,
            min_leaf: 1,
        };
        let model = GbtModel::fit(x.view(), y.view(), &params, 0).unwrap();
        let p = model.predict(x.view());
        for (xi, pi) in x.column(0).iter().zip(p.iter()) {
            let expected = if *xi == 0.0 { 2.0 } else { 6.0 };
            assert!((pi - expected).abs() < 1e-12);
        }
        match &model.trees[0].nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 0.5),
            other => panic!("expected a split, got {other:?}"),
        }
    }

    fn toy(n: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = stream(seed, tag::FEATURE, 0, 0);
        let x = Array2::from_shape_fn((n, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let y = x
            .outer_iter()
            .map(|r| r[0] - 2.0 * r[1] * r[1] + (r[2] > 0.3) as u8 as f64 + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, y)
    }

    #[test]
    fn training_loss_never_increases() {
        let (x, y) = toy(300, 1);
        for depth in [1, 3] {
            let params = GbtParams {
                trees: 60,
                depth,
                learning_rate: 0.7,
                subsample: 1.0,
                min_leaf: 3,
            };
            let (_, hist) = GbtModel::fit_traced(x.view(), y.view(), &params, 0).unwrap();
            for w in hist.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
            assert!(hist.last().unwrap() < &(0.5 * hist[0]));
        }
    }

    #[test]
    fn deeper_trees_fit_interactions_better() {
        let (x, y) = toy(400, 2);
        let fit = |depth| {
            let params = GbtParams {
                trees: 30,
                depth,
                learning_rate: 0.3,
                subsample: 1.0,
                min_leaf: 5,
            };
            *GbtModel::fit_traced(x.view(), y.view(), &params, 0).unwrap().1.last().unwrap()
        };
        assert!(fit(3) < fit(1));
    }

    #[test]
    fn subsampling_is_seeded() {
        let (x, y) = toy(200, 3);
        let params = GbtParams {
            subsample: 0.5,
            trees: 10,
            ..GbtParams::default()
        };
        let a = GbtModel::fit(x.view(), y.view(), &params, 4).unwrap();
        let b = GbtModel::fit(x.view(), y.view(), &params, 4).unwrap();
        let c = GbtModel::fit(x.view(), y.view(), &params, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_parameters() {
        let bad = GbtParams {
            trees: 0,
            ..GbtParams::default()
        };
        assert!(bad.check().is_err());
    }
}
