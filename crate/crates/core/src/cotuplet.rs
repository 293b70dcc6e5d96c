//! Co-tuplet loss with hardest-reference distances and constraint mining, the
//! multi-branch objective, tuplet batch sampling and a margin triplet baseline.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{sq_euclidean, Graph, Tensor, Var};

/// Number of embedding streams per image: one global plus six regional.
pub const NUM_BRANCHES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CoTuplet,
    Triplet,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CoTuplet => "cotuplet",
            LossKind::Triplet => "triplet",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cotuplet" => Ok(LossKind::CoTuplet),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected cotuplet or triplet)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Positives (and negatives) per tuplet.
    pub k: usize,
    /// Tuplets per batch.
    pub w: usize,
    /// Constraint margin for mining.
    pub delta: f64,
    /// Weight of the six regional losses.
    pub lambda: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { k: 5, w: 18, delta: 0.3, lambda: 1.0, triplet_margin: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.w == 0 {
            return Err(Error::Config(format!("k and w must be >= 1 (k={}, w={})", self.k, self.w)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.triplet_margin > 0.0) {
            return Err(Error::Config(format!("triplet margin must be > 0, got {}", self.triplet_margin)));
        }
        Ok(())
    }

    /// Images per tuplet.
    pub fn tuplet_len(&self) -> usize {
        2 * self.k + 1
    }

    /// Images per batch, `w (2k + 1)`.
    pub fn batch_images(&self) -> usize {
        self.w * self.tuplet_len()
    }
}

/// Anchor-to-positive and anchor-to-negative squared distances, in input order.
pub fn tuplet_distances(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let dp = positives.iter().map(|p| sq_euclidean(anchor, p)).collect::<Result<_>>()?;
    let dn = negatives.iter().map(|n| sq_euclidean(anchor, n)).collect::<Result<_>>()?;
    Ok((dp, dn))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hardest {
    pub dplus: f64,
    pub dminus: f64,
    pub pos_index: usize,
    pub neg_index: usize,
}

/// Furthest positive and closest negative; ties go to the lowest index.
pub fn hardest(dplus: &[f64], dminus: &[f64]) -> Result<Hardest> {
    if dplus.is_empty() || dminus.is_empty() {
        return Err(Error::shape("hardest", "empty distance vector"));
    }
    let mut pi = 0;
    for (i, &d) in dplus.iter().enumerate() {
        if d > dplus[pi] {
            pi = i;
        }
    }
    let mut ni = 0;
    for (j, &d) in dminus.iter().enumerate() {
        if d < dminus[ni] {
            ni = j;
        }
    }
    Ok(Hardest { dplus: dplus[pi], dminus: dminus[ni], pos_index: pi, neg_index: ni })
}

/// Mining sets `SP = {i : d+_i >= d-_h - delta}` and `SN = {j : d-_j <= d+_h + delta}`.
pub fn mine(dplus: &[f64], dminus: &[f64], delta: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let h = hardest(dplus, dminus)?;
    let sp = (0..dplus.len()).filter(|&i| dplus[i] >= h.dminus - delta).collect();
    let sn = (0..dminus.len()).filter(|&j| dminus[j] <= h.dplus + delta).collect();
    Ok((sp, sn))
}

/// Differentiable co-tuplet loss of one tuplet from its `[k]` distance vectors.
///
/// Mining sets come from the current values and are constants of the graph; the
/// hardest distances stay connected through their selected elements.
pub fn cotuplet_loss(g: &mut Graph, dplus: Var, dminus: Var, delta: f64) -> Result<Var> {
    let dp = g.value(dplus).data().to_vec();
    let dn = g.value(dminus).data().to_vec();
    let h = hardest(&dp, &dn)?;
    let (sp, sn) = mine(&dp, &dn, delta)?;
    let mut terms = Vec::with_capacity(2);
    if !sp.is_empty() {
        let hn = g.gather(dminus, &[h.neg_index])?;
        let neg_hn = g.neg(hn);
        let sel = g.gather(dplus, &sp)?;
        terms.push(g.add_broadcast(sel, neg_hn)?);
    }
    if !sn.is_empty() {
        let hp = g.gather(dplus, &[h.pos_index])?;
        let sel = g.gather(dminus, &sn)?;
        let neg_sel = g.neg(sel);
        terms.push(g.add_broadcast(neg_sel, hp)?);
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let exps = g.concat(&terms)?;
    Ok(g.log1p_sum_exp(exps))
}

/// Plain-value co-tuplet loss.
pub fn cotuplet_value(dplus: &[f64], dminus: &[f64], delta: f64) -> Result<f64> {
    let mut g = Graph::new();
    let dp = g.constant(Tensor::from_vec(dplus.to_vec()));
    let dn = g.constant(Tensor::from_vec(dminus.to_vec()));
    let l = cotuplet_loss(&mut g, dp, dn, delta)?;
    Ok(g.value(l).data()[0])
}

/// `max(0, d+ - d- + margin)`.
pub fn triplet_loss(dplus: f64, dminus: f64, margin: f64) -> f64 {
    (dplus - dminus + margin).max(0.0)
}

/// Triplet baseline over one tuplet: the mean hinge over all `k x k`
/// (positive, negative) combinations.
pub fn triplet_tuplet_loss(g: &mut Graph, dplus: Var, dminus: Var, margin: f64) -> Result<Var> {
    let k = g.value(dplus).numel();
    let kn = g.value(dminus).numel();
    let neg_dn = g.neg(dminus);
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let di = g.gather(dplus, &[i])?;
        let diff = g.add_broadcast(neg_dn, di)?;
        let shifted = g.add_const(diff, margin);
        let hinge = g.relu(shifted);
        rows.push(g.sum(hinge));
    }
    let all = g.concat(&rows)?;
    let total = g.sum(all);
    Ok(g.mul_const(total, 1.0 / (k * kn) as f64))
}

/// Row layout of a batch embedding matrix: tuplet `t` occupies rows
/// `t(2k+1) .. (t+1)(2k+1)` as anchor, k positives, k negatives.
pub fn tuplet_pairs(w: usize, k: usize) -> Vec<(usize, usize)> {
    let len = 2 * k + 1;
    let mut pairs = Vec::with_capacity(w * 2 * k);
    for t in 0..w {
        let a = t * len;
        pairs.extend((1..=2 * k).map(|o| (a, a + o)));
    }
    pairs
}

/// Mean per-tuplet loss of one branch. `emb` is `[w(2k+1), d]` in tuplet layout.
pub fn branch_loss(g: &mut Graph, emb: Var, cfg: &LossConfig, kind: LossKind) -> Result<Var> {
    let rows = g.shape(emb)[0];
    if !rows.is_multiple_of(cfg.tuplet_len()) {
        return Err(Error::shape(
            "branch_loss",
            format!("{rows} rows is not a multiple of tuplet length {}", cfg.tuplet_len()),
        ));
    }
    let w = rows / cfg.tuplet_len();
    let k = cfg.k;
    let d = g.pair_sq_dist(emb, &tuplet_pairs(w, k))?;
    let mut losses = Vec::with_capacity(w);
    for t in 0..w {
        let base = t * 2 * k;
        let dp = g.gather(d, &(base..base + k).collect::<Vec<_>>())?;
        let dn = g.gather(d, &(base + k..base + 2 * k).collect::<Vec<_>>())?;
        losses.push(match kind {
            LossKind::CoTuplet => cotuplet_loss(g, dp, dn, cfg.delta)?,
            LossKind::Triplet => triplet_tuplet_loss(g, dp, dn, cfg.triplet_margin)?,
        });
    }
    let all = g.concat(&losses)?;
    let s = g.sum(all);
    Ok(g.mul_const(s, 1.0 / w as f64))
}

/// `L_g + lambda * sum_i L_ri` over the seven branch embedding matrices (global first).
pub fn total_loss(g: &mut Graph, branches: &[Var], cfg: &LossConfig, kind: LossKind) -> Result<Var> {
    if branches.len() != NUM_BRANCHES {
        return Err(Error::shape(
            "total_loss",
            format!("expected {NUM_BRANCHES} branch embeddings, got {}", branches.len()),
        ));
    }
    let global = branch_loss(g, branches[0], cfg, kind)?;
    let mut regional = Vec::with_capacity(NUM_BRANCHES - 1);
    for &b in &branches[1..] {
        regional.push(branch_loss(g, b, cfg, kind)?);
    }
    let r = g.concat(&regional)?;
    let rs = g.sum(r);
    let weighted = g.mul_const(rs, cfg.lambda);
    g.add(global, weighted)
}

// ---- batch sampling ------------------------------------------------------------

/// Sample indices of one identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentityPool {
    pub identity: String,
    pub genuine: Vec<usize>,
    pub forged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tuplet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tuplets: Vec<Tuplet>,
}

impl Batch {
    /// Sample indices in tuplet layout (anchor, positives, negatives per tuplet).
    pub fn images(&self) -> Vec<usize> {
        self.tuplets
            .iter()
            .flat_map(|t| std::iter::once(t.anchor).chain(t.positives.iter().copied()).chain(t.negatives.iter().copied()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tuplets.iter().map(|t| 1 + t.positives.len() + t.negatives.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tuplets.is_empty()
    }
}

fn tuplet_for<R: Rng>(pool: &IdentityPool, anchor: usize, k: usize, rng: &mut R) -> Result<Tuplet> {
    if pool.genuine.len() < k + 1 || pool.forged.len() < k {
        return Err(Error::Sampling {
            identity: pool.identity.clone(),
            detail: format!(
                "needs {} genuine and {k} forged samples, has {} and {}",
                k + 1,
                pool.genuine.len(),
                pool.forged.len()
            ),
        });
    }
    let others: Vec<usize> = pool.genuine.iter().copied().filter(|&s| s != anchor).collect();
    let positives = others.choose_multiple(rng, k).copied().collect();
    let negatives = pool.forged.choose_multiple(rng, k).copied().collect();
    Ok(Tuplet { anchor, positives, negatives })
}

/// Every genuine sample as `(pool index, sample)`.
fn anchor_candidates(pools: &[IdentityPool]) -> Vec<(usize, usize)> {
    pools
        .iter()
        .enumerate()
        .flat_map(|(p, pool)| pool.genuine.iter().map(move |&s| (p, s)))
        .collect()
}

/// One batch of `w` tuplets with anchors drawn without replacement from all
/// genuine samples.
pub fn build_batch<R: Rng>(pools: &[IdentityPool], cfg: &LossConfig, rng: &mut R) -> Result<Batch> {
    let cands = anchor_candidates(pools);
    if cands.len() < cfg.w {
        return Err(Error::Config(format!("{} genuine samples cannot supply {} anchors", cands.len(), cfg.w)));
    }
    let anchors: Vec<(usize, usize)> = cands.choose_multiple(rng, cfg.w).copied().collect();
    let tuplets = anchors
        .into_iter()
        .map(|(p, a)| tuplet_for(&pools[p], a, cfg.k, rng))
        .collect::<Result<_>>()?;
    Ok(Batch { tuplets })
}

/// One pass over the anchors: every genuine sample is an anchor exactly once, in
/// shuffled order, chunked into batches of `w` tuplets (the last may be smaller).
pub fn epoch_batches<R: Rng>(pools: &[IdentityPool], cfg: &LossConfig, rng: &mut R) -> Result<Vec<Batch>> {
    let mut cands = anchor_candidates(pools);
    if cands.is_empty() {
        return Err(Error::Config("no genuine samples to use as anchors".into()));
    }
    cands.shuffle(rng);
    cands
        .chunks(cfg.w)
        .map(|chunk| {
            let tuplets = chunk
                .iter()
                .map(|&(p, a)| tuplet_for(&pools[p], a, cfg.k, rng))
                .collect::<Result<_>>()?;
            Ok(Batch { tuplets })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Loss evaluated straight from its definition, without the graph.
    fn naive(dp: &[f64], dn: &[f64], delta: f64) -> f64 {
        let hp = dp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let hn = dn.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut s = 1.0;
        for &d in dp {
            if d >= hn - delta {
                s += (d - hn).exp();
            }
        }
        for &d in dn {
            if d <= hp + delta {
                s += (hp - d).exp();
            }
        }
        s.ln()
    }

    fn rand_dists(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>) {
        let dp = (0..k).map(|_| rng.random_range(0.0..4.0)).collect();
        let dn = (0..k).map(|_| rng.random_range(0.0..4.0)).collect();
        (dp, dn)
    }

    #[test]
    fn distances_basic() {
        let (dp, dn) = tuplet_distances(&[0.0], &[vec![0.0]], &[vec![3.0]]).unwrap();
        assert_eq!((dp, dn), (vec![0.0], vec![9.0]));
        assert!(tuplet_distances(&[0.0, 1.0], &[vec![0.0]], &[]).is_err());
    }

    #[test]
    fn hardest_and_ties() {
        let h = hardest(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((h.dplus, h.dminus), (3.0, 1.0));
        let h = hardest(&[5.0, 5.0], &[2.0, 2.0]).unwrap();
        assert_eq!((h.pos_index, h.neg_index, h.dminus), (0, 0, 2.0));
        assert!(hardest(&[], &[1.0]).is_err());
    }

    #[test]
    fn mining_cases() {
        let (sp, sn) = mine(&[1.5; 4], &[1.5; 4], 0.3).unwrap();
        assert_eq!((sp.len(), sn.len()), (4, 4));
        let (sp, sn) = mine(&[0.0; 5], &[100.0; 5], 0.3).unwrap();
        assert!(sp.is_empty() && sn.is_empty());
    }

    #[test]
    fn loss_identities() {
        let v = cotuplet_value(&[0.7; 5], &[0.7; 5], 0.3).unwrap();
        assert!((v - 11f64.ln()).abs() < 1e-12);
        assert_eq!(cotuplet_value(&[0.0; 5], &[100.0; 5], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..2000 {
            let k = rng.random_range(1..8);
            let (dp, dn) = rand_dists(&mut rng, k);
            let delta = rng.random_range(0.01..1.0);
            let v = cotuplet_value(&dp, &dn, delta).unwrap();
            assert!((v - naive(&dp, &dn, delta)).abs() < 1e-10);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..300 {
            let (dp, dn) = rand_dists(&mut rng, 5);
            let mut g = Graph::new();
            let p = g.input(Tensor::from_vec(dp.clone()));
            let n = g.input(Tensor::from_vec(dn.clone()));
            let l = cotuplet_loss(&mut g, p, n, 0.3).unwrap();
            let grads = g.backward(l).unwrap();
            let gp = grads.tensor(p);
            let gn = grads.tensor(n);
            let (sp, sn) = mine(&dp, &dn, 0.3).unwrap();
            for &i in &sp {
                assert!(gp.data()[i] >= 0.0);
            }
            for &j in &sn {
                assert!(gn.data()[j] <= 0.0);
            }
        }
    }

    #[test]
    fn triplet_cases() {
        assert_eq!(triplet_loss(0.0, 10.0, 1.0), 0.0);
        assert_eq!(triplet_loss(2.0, 2.0, 1.0), 1.0);
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(vec![0.5, 2.0]));
        let n = g.constant(Tensor::from_vec(vec![1.0, 3.0]));
        let l = triplet_tuplet_loss(&mut g, p, n, 1.0).unwrap();
        let expected = [(0.5, 1.0), (0.5, 3.0), (2.0, 1.0), (2.0, 3.0)]
            .iter()
            .map(|&(a, b)| triplet_loss(a, b, 1.0))
            .sum::<f64>()
            / 4.0;
        assert!((g.value(l).data()[0] - expected).abs() < 1e-15);
    }

    fn branch_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn branch_loss_is_mean_over_tuplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cfg = LossConfig { k: 2, w: 3, ..LossConfig::default() };
        let e = branch_rows(&mut rng, 15, 4);
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let l = branch_loss(&mut g, ev, &cfg, LossKind::CoTuplet).unwrap();
        let row = |i: usize| e.data()[i * 4..(i + 1) * 4].to_vec();
        let mut expected = 0.0;
        for t in 0..3 {
            let a = row(t * 5);
            let (dp, dn) = tuplet_distances(&a, &[row(t * 5 + 1), row(t * 5 + 2)], &[row(t * 5 + 3), row(t * 5 + 4)]).unwrap();
            expected += naive(&dp, &dn, cfg.delta);
        }
        assert!((g.value(l).data()[0] - expected / 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cfg = LossConfig { k: 2, w: 2, ..LossConfig::default() };
        let tensors: Vec<Tensor> = (0..7).map(|_| branch_rows(&mut rng, 10, 3)).collect();
        let eval = |lambda: f64, ts: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let c = LossConfig { lambda, ..cfg.clone() };
            let l = total_loss(&mut g, &vs, &c, LossKind::CoTuplet).unwrap();
            g.value(l).data()[0]
        };
        let single = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = branch_loss(&mut g, v, &cfg, LossKind::CoTuplet).unwrap();
            g.value(l).data()[0]
        };
        assert!((eval(0.0, &tensors) - single(&tensors[0])).abs() < 1e-12);
        let all: f64 = tensors.iter().map(single).sum();
        assert!((eval(1.0, &tensors) - all).abs() < 1e-12);
        let same = vec![tensors[0].clone(); 7];
        assert!((eval(0.5, &same) - 4.0 * single(&tensors[0])).abs() < 1e-12);

        let mut g = Graph::new();
        let vs: Vec<Var> = tensors[..6].iter().map(|t| g.constant(t.clone())).collect();
        assert!(total_loss(&mut g, &vs, &cfg, LossKind::CoTuplet).is_err());
    }

    fn pools(ids: usize, genuine: usize, forged: usize) -> Vec<IdentityPool> {
        let mut next = 0;
        (0..ids)
            .map(|i| {
                let g: Vec<usize> = (next..next + genuine).collect();
                next += genuine;
                let f: Vec<usize> = (next..next + forged).collect();
                next += forged;
                IdentityPool { identity: format!("id{i:02}"), genuine: g, forged: f }
            })
            .collect()
    }

    #[test]
    fn default_batch_has_198_images() {
        let cfg = LossConfig::default();
        let p = pools(30, 10, 10);
        let b = build_batch(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.len(), 198);
        assert_eq!(b.images().len(), 198);
        let again = build_batch(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn insufficient_identity_is_named() {
        let mut p = pools(1, 3, 10);
        p[0].identity = "writer7".into();
        let cfg = LossConfig { w: 1, ..LossConfig::default() };
        match build_batch(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(1)) {
            Err(Error::Sampling { identity, .. }) => assert_eq!(identity, "writer7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn epoch_batches_use_every_anchor_once() {
        let p = pools(4, 8, 6);
        let cfg = LossConfig { k: 3, w: 5, ..LossConfig::default() };
        let batches = epoch_batches(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut anchors: Vec<usize> = batches.iter().flat_map(|b| b.tuplets.iter().map(|t| t.anchor)).collect();
        anchors.sort_unstable();
        let mut expected: Vec<usize> = p.iter().flat_map(|q| q.genuine.clone()).collect();
        expected.sort_unstable();
        assert_eq!(anchors, expected);
        assert_eq!(batches.len(), 7);
    }
}
