//! Language-routed mixture of experts.
//!
//! The router scores every expert from a per-frame routing vector (the
//! language embedding), keeps the two best and renormalises their
//! probabilities. Only the two selected experts run on a frame.

use crate::ctc::argmax;
use crate::nnet::{Ctx, FeedForward, Init, Linear};
use crate::numerics::{ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Top-2 routing decision for a sequence of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Selected experts per frame, best first.
    pub experts: Vec<[usize; 2]>,
    /// Renormalised weights of the selected experts; each pair sums to 1.
    pub weights: Vec<[f64; 2]>,
    /// Full router softmax `[T, n_experts]`.
    pub probs: Tensor,
}

impl Routing {
    pub fn frames(&self) -> usize {
        self.experts.len()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.last_dim()
    }
}

fn top2(row: &[f64]) -> [usize; 2] {
    let first = argmax(row);
    let mut second = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i != first && (second == usize::MAX || v > row[second]) {
            second = i;
        }
    }
    [first, second]
}

/// Two-way softmax over the selected logits; equal to renormalising the
/// full softmax over the pair.
fn pair_weights(a: f64, b: f64) -> [f64; 2] {
    let w0 = 1.0 / (1.0 + (b - a).exp());
    let w1 = 1.0 / (1.0 + (a - b).exp());
    [w0, w1]
}

/// Routes every row of `logits: [T, n]`. Ties resolve to the lower index.
pub fn route_logits(logits: &Tensor) -> Result<Routing> {
    if logits.rank() != 2 {
        return Err(Error::config(format!("router logits must be [T, n], got {:?}", logits.shape())));
    }
    let n = logits.last_dim();
    if n < 2 {
        return Err(Error::config(format!("top-2 routing needs at least 2 experts, got {n}")));
    }
    let t = logits.rows();
    let mut experts = Vec::with_capacity(t);
    let mut weights = Vec::with_capacity(t);
    let mut probs = Tensor::zeros(&[t, n]);
    for i in 0..t {
        let row = logits.row(i);
        let sel = top2(row);
        experts.push(sel);
        weights.push(pair_weights(row[sel[0]], row[sel[1]]));
        let m = row[sel[0]];
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
            *p = (v - m).exp() / z;
        }
    }
    Ok(Routing { experts, weights, probs })
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub experts: Vec<FeedForward>,
    pub router: Linear,
}

impl MoeLayer {
    /// `n` feed-forward experts of width `d_ff` and a router fed by a
    /// `d`-dimensional routing vector.
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize, d_ff: usize, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config(format!("top-2 routing needs at least 2 experts, got {n}")));
        }
        let experts = (0..n)
            .map(|e| FeedForward::new(store, init, &format!("{name}.expert{e}"), d, d_ff))
            .collect();
        let router = Linear::new(store, init, &format!("{name}.router"), d, n, true);
        Ok(Self { experts, router })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// `x: [T, d]` frames, `r: [T, d]` routing vectors.
    pub fn forward(&self, cx: &Ctx, x: Var, r: Var) -> Result<(Var, Routing)> {
        let g = cx.g;
        let shape = g.shape(x);
        let (t, d) = (shape[0], shape[1]);
        if g.shape(r)[0] != t {
            return Err(Error::config(format!(
                "router input has {} frames, layer input has {t}",
                g.shape(r)[0]
            )));
        }
        let logits = self.router.forward(cx, r)?;
        let routing = route_logits(&g.value(logits))?;
        let n = self.n_experts();

        let idx = |slot: usize| routing.experts.iter().enumerate().map(|(i, e)| i * n + e[slot]).collect::<Vec<_>>();
        let l0 = g.take(logits, idx(0), vec![t, 1])?;
        let l1 = g.take(logits, idx(1), vec![t, 1])?;
        let w0 = g.sigmoid(g.sub(l0, l1)?);
        let w1 = g.sigmoid(g.sub(l1, l0)?);
        let w = g.concat_cols(&[w0, w1])?;

        let mut parts = Vec::with_capacity(n);
        for (e, expert) in self.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut widx = Vec::new();
            for (i, sel) in routing.experts.iter().enumerate() {
                if let Some(slot) = sel.iter().position(|&s| s == e) {
                    rows.push(i);
                    widx.push(i * 2 + slot);
                }
            }
            if rows.is_empty() {
                continue;
            }
            let xe = g.take_rows(x, &rows)?;
            let ye = expert.forward(cx, xe)?;
            let we = g.take(w, widx, vec![rows.len()])?;
            let ye = g.mul_col(ye, we)?;
            let scatter = rows.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
            parts.push(g.scatter_add(ye, scatter, vec![t, d])?);
        }
        let out = if parts.is_empty() {
            g.constant(Tensor::zeros(&[t, d]))
        } else {
            g.add_n(&parts)?
        };
        Ok((out, routing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, Graph};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn example_routing() {
        let r = route_logits(&row(&[1.0, 0.5, 0.1, -0.2])).unwrap();
        assert_eq!(r.experts[0], [0, 1]);
        // e / (e + e^0.5)
        let oracle = 1.0f64.exp() / (1.0f64.exp() + 0.5f64.exp());
        assert!((r.weights[0][0] - oracle).abs() < 1e-12);
        assert!((r.weights[0][0] - 0.623).abs() < 1e-3);
        assert!((r.weights[0][1] - 0.377).abs() < 1e-3);
    }

    #[test]
    fn two_experts_match_plain_softmax() {
        let r = route_logits(&row(&[0.3, -1.2])).unwrap();
        assert_eq!(r.experts[0], [0, 1]);
        assert!((r.weights[0][0] - r.probs.at(0, 0)).abs() < 1e-15);
        assert!((r.weights[0][1] - r.probs.at(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn ties_pick_lowest_indices() {
        let r = route_logits(&row(&[0.7, 0.7, 0.7, 0.7])).unwrap();
        assert_eq!(r.experts[0], [0, 1]);
        assert_eq!(r.weights[0], [0.5, 0.5]);
    }

    #[test]
    fn fewer_than_two_experts_is_config_error() {
        assert!(route_logits(&row(&[1.0])).unwrap_err().is_config());
        let mut store = ParamStore::new();
        assert!(MoeLayer::new(&mut store, &Init::new(0), "m", 4, 8, 1).unwrap_err().is_config());
    }

    fn layer(d: usize, d_ff: usize, n: usize, seed: u64) -> (ParamStore, MoeLayer) {
        let mut store = ParamStore::new();
        let moe = MoeLayer::new(&mut store, &Init::new(seed), "moe", d, d_ff, n).unwrap();
        (store, moe)
    }

    fn run(store: &ParamStore, moe: &MoeLayer, x: &Tensor, r: &Tensor) -> (Tensor, Routing) {
        let g = Graph::inference();
        let cx = Ctx::new(&g, store);
        let (y, routing) = moe.forward(&cx, g.constant(x.clone()), g.constant(r.clone())).unwrap();
        ((*g.value(y)).clone(), routing)
    }

    /// Direct per-frame evaluation of the mixture.
    fn oracle(store: &ParamStore, moe: &MoeLayer, x: &Tensor, r: &Tensor) -> Tensor {
        let d = x.last_dim();
        let mut out = Tensor::zeros(&[x.rows(), d]);
        for i in 0..x.rows() {
            let g = Graph::inference();
            let cx = Ctx::new(&g, store);
            let logits = moe.router.forward(&cx, g.constant(row(r.row(i)))).unwrap();
            let lv = g.value(logits);
            let mut order: Vec<usize> = (0..lv.len()).collect();
            order.sort_by(|&a, &b| lv.data()[b].total_cmp(&lv.data()[a]).then(a.cmp(&b)));
            let (a, b) = (lv.data()[order[0]], lv.data()[order[1]]);
            let wa = a.exp() / (a.exp() + b.exp());
            for (k, w) in [(order[0], wa), (order[1], 1.0 - wa)] {
                let y = moe.experts[k].forward(&cx, g.constant(row(x.row(i)))).unwrap();
                for (o, v) in out.row_mut(i).iter_mut().zip(g.value(y).data()) {
                    *o += w * v;
                }
            }
        }
        out
    }

    #[test]
    fn matches_per_frame_oracle() {
        let (store, moe) = layer(6, 12, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[7, 6], 1.0, &mut rng);
        let r = Tensor::randn(&[7, 6], 1.0, &mut rng);
        let (y, _) = run(&store, &moe, &x, &r);
        let o = oracle(&store, &moe, &x, &r);
        for (a, b) in y.data().iter().zip(o.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_experts_reduce_to_one_ffn() {
        let (mut store, moe) = layer(4, 8, 4, 5);
        for e in 1..4 {
            for (src, dst) in [
                (moe.experts[0].up.w, moe.experts[e].up.w),
                (moe.experts[0].down.w, moe.experts[e].down.w),
            ] {
                let v = store.value(src).clone();
                store.get_mut(dst).value = v;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let r = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let (y, _) = run(&store, &moe, &x, &r);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let single = moe.experts[0].forward(&cx, g.constant(x)).unwrap();
        for (a, b) in y.data().iter().zip(g.value(single).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unselected_experts_get_no_gradient() {
        let (store, moe) = layer(4, 8, 4, 2);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        // Every frame routes on the same vector, so exactly two experts run.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = g.constant(Tensor::randn(&[6, 4], 1.0, &mut rng));
        let rv = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let r = g.constant(Tensor::new(vec![6, 4], rv.data().repeat(6)).unwrap());
        let (y, routing) = moe.forward(&cx, x, r).unwrap();
        let loss = g.sum(g.square(y));
        let grads = g.backward(loss).unwrap();
        let sel = routing.experts[0];
        for (e, ex) in moe.experts.iter().enumerate() {
            let gw = grads.param(ex.up.w).map(|t| t.max_abs()).unwrap_or(0.0);
            if sel.contains(&e) {
                assert!(gw > 0.0);
            } else {
                assert_eq!(gw, 0.0);
            }
        }
    }

    #[test]
    fn gradcheck_small_layer() {
        let (store, moe) = layer(8, 8, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let r = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let report = grad_check::<_, Error>(
            &store,
            |g, s| {
                let cx = Ctx::new(g, s);
                let (y, _) = moe.forward(&cx, g.constant(x.clone()), g.constant(r.clone()))?;
                Ok(g.sum(g.square(y)))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{:?}", report.worst());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weights_are_a_distribution(v in prop::collection::vec(-5.0f64..5.0, 2..8)) {
            let r = route_logits(&row(&v)).unwrap();
            let [a, b] = r.experts[0];
            prop_assert!(a != b);
            prop_assert!(r.weights[0][0] >= r.weights[0][1]);
            prop_assert!((r.weights[0][0] + r.weights[0][1] - 1.0).abs() < 1e-12);
            for (k, &x) in v.iter().enumerate() {
                if k != a && k != b {
                    prop_assert!(x <= v[b]);
                }
            }
        }

        #[test]
        fn permuting_frames_permutes_outputs(seed in 0u64..1000, t in 2usize..9) {
            let (store, moe) = layer(4, 8, 4, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[t, 4], 1.0, &mut rng);
            let r = Tensor::randn(&[t, 4], 1.0, &mut rng);
            let perm: Vec<usize> = (0..t).rev().collect();
            let permute = |m: &Tensor| {
                let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let (y, ra) = run(&store, &moe, &x, &r);
            let (yp, rb) = run(&store, &moe, &permute(&x), &permute(&r));
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(yp.row(k), y.row(i));
                prop_assert_eq!(rb.experts[k], ra.experts[i]);
            }
        }

        #[test]
        fn routing_ignores_layer_input(seed in 0u64..1000) {
            let (store, moe) = layer(4, 8, 4, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
            let x2 = Tensor::randn(&[5, 4], 3.0, &mut rng);
            let r = Tensor::randn(&[5, 4], 1.0, &mut rng);
            let (_, a) = run(&store, &moe, &x, &r);
            let (_, b) = run(&store, &moe, &x2, &r);
            prop_assert_eq!(a, b);
        }
    }
}
