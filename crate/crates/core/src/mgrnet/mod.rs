//! Two-branch embedding network: shared convolutional base, global and regional
//! branches with multiplicative multilevel fusion, joint channel attention, and one
//! global plus six regional embeddings per image.
//!
//! Shapes for the default 128x200 input (N images):
//!
//! ```text
//! x      [N,1,128,200]
//! F1     [N,32,64,100]   conv1 -> bn -> relu -> pool
//! F2     [N,64,32,50]    conv2 -> bn -> relu -> pool
//! F3     [N,128,32,50]   conv3 -> bn -> relu
//! F4     [N,256,16,25]   conv4 -> bn -> relu -> pool
//! F51G/R [N,256,16,25]   conv51 -> bn -> relu, one per branch
//! F52G/R [N,256,16,25]   eps(F2) * eps(F3) * F51
//! f_g    [N,1024]        gap -> l2 normalize -> fc
//! f_r1..6 [N,1024]       per region: gap -> l2 normalize -> fc
//! ```

mod config;

pub use config::{FusionMode, NetConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{BatchMoments, BnMode, Graph, ParameterStore, Tensor, Var};

/// Batch-norm layer names, in forward order.
pub const BN_LAYERS: [&str; 6] = ["bn1", "bn2", "bn3", "bn4", "bn51g", "bn51r"];

/// Branch suffixes; `g` is global, `r` regional.
const BRANCHES: [&str; 2] = ["g", "r"];

/// One global and six regional embeddings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub global: Vec<f64>,
    /// r1..r3 are the column windows left to right, r4..r6 the row windows top to
    /// bottom.
    pub regional: Vec<Vec<f64>>,
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("positive dims")
}

fn conv_param<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    store.insert(&format!("{name}.weight"), uniform(rng, &[cout, cin, k, k], bound))
}

fn bn_param(store: &mut ParameterStore, name: &str, c: usize) -> Result<()> {
    store.insert(&format!("{name}.gamma"), Tensor::ones(&[c]))?;
    store.insert(&format!("{name}.beta"), Tensor::zeros(&[c]))?;
    store.insert_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?;
    store.insert_buffer(&format!("{name}.running_var"), Tensor::ones(&[c]))
}

fn linear_param<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, out: usize, inp: usize) -> Result<()> {
    let bound = 1.0 / (inp as f64).sqrt();
    store.insert(&format!("{name}.weight"), uniform(rng, &[out, inp], bound))?;
    store.insert(&format!("{name}.bias"), uniform(rng, &[out], bound))
}

/// Fresh parameters: uniform fan-in scaled weights, batch-norm gamma 1 / beta 0, and
/// fusion transforms whose bias starts at 1 so fusion begins close to identity.
pub fn init_params<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Result<ParameterStore> {
    cfg.validate()?;
    let [c1, c2, c3, c4] = cfg.conv_channels;
    let (c, v, e) = (c4, cfg.attention_dim, cfg.embedding_dim);
    let mut s = ParameterStore::new();
    for (i, (cin, cout)) in [(1, c1), (c1, c2), (c2, c3), (c3, c4)].into_iter().enumerate() {
        conv_param(&mut s, rng, &format!("conv{}", i + 1), cout, cin, 3)?;
        bn_param(&mut s, &format!("bn{}", i + 1), cout)?;
    }
    for b in BRANCHES {
        conv_param(&mut s, rng, &format!("conv51{b}"), c, c, 3)?;
        bn_param(&mut s, &format!("bn51{b}"), c)?;
    }
    for b in BRANCHES {
        for (lvl, cin) in [("eps2", c2), ("eps3", c3)] {
            let name = format!("fuse_{b}.{lvl}");
            conv_param(&mut s, rng, &name, c, cin, 3)?;
            s.insert(&format!("{name}.bias"), Tensor::ones(&[c]))?;
        }
        if cfg.fusion == FusionMode::Concat {
            let name = format!("fuse_{b}.proj");
            conv_param(&mut s, rng, &name, c, 3 * c, 1)?;
            s.insert(&format!("{name}.bias"), Tensor::zeros(&[c]))?;
        }
    }
    for b in BRANCHES {
        linear_param(&mut s, rng, &format!("grca.reduce_{b}"), v, c)?;
    }
    for b in BRANCHES {
        linear_param(&mut s, rng, &format!("grca.recover_{b}"), c, v)?;
    }
    linear_param(&mut s, rng, "head_g", e, c)?;
    for i in 1..=6 {
        linear_param(&mut s, rng, &format!("head_r{i}"), e, c)?;
    }
    Ok(s)
}

/// Number of trainable scalars `init_params` creates for `cfg`.
pub fn parameter_count(cfg: &NetConfig) -> usize {
    let [c1, c2, c3, c4] = cfg.conv_channels;
    let (c, v, e) = (c4, cfg.attention_dim, cfg.embedding_dim);
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
    let base = conv(1, c1, 3) + conv(c1, c2, 3) + conv(c2, c3, 3) + conv(c3, c4, 3) + 2 * (c1 + c2 + c3 + c4);
    let branch = 2 * (conv(c, c, 3) + 2 * c);
    let mut fusion = 2 * (conv(c2, c, 3) + c + conv(c3, c, 3) + c);
    if cfg.fusion == FusionMode::Concat {
        fusion += 2 * (conv(3 * c, c, 1) + c);
    }
    let attention = 2 * (v * c + v) + 2 * (c * v + c);
    let heads = 7 * (e * c + e);
    base + branch + fusion + attention + heads
}

/// Collects train-mode batch moments for later folding into running statistics.
#[derive(Default)]
pub struct BnTrace {
    pub moments: Vec<(String, BatchMoments)>,
}

fn conv_bn_relu(
    g: &mut Graph,
    store: &ParameterStore,
    x: Var,
    conv: &str,
    bn: &str,
    mode: BnMode,
    trace: &mut BnTrace,
) -> Result<Var> {
    let w = g.param(store, &format!("{conv}.weight"))?;
    let y = g.conv2d(x, w, None, 1, 1)?;
    let gamma = g.param(store, &format!("{bn}.gamma"))?;
    let beta = g.param(store, &format!("{bn}.beta"))?;
    let rm = store.buffer(&format!("{bn}.running_mean"))?;
    let rv = store.buffer(&format!("{bn}.running_var"))?;
    let (z, m) = g.batchnorm2d(y, gamma, beta, (rm.data(), rv.data()), mode)?;
    if let Some(m) = m {
        trace.moments.push((bn.to_string(), m));
    }
    Ok(g.relu(z))
}

/// Shared base: returns `(F1, F2, F3, F4)` for `x` of shape `[N,1,Hin,Win]`.
pub fn forward_base(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &NetConfig,
    x: Var,
    mode: BnMode,
    trace: &mut BnTrace,
) -> Result<[Var; 4]> {
    let xs = g.shape(x);
    if xs.len() != 4 || xs[1] != 1 || xs[2] != cfg.input_height || xs[3] != cfg.input_width {
        return Err(Error::shape(
            "forward_base",
            format!("input {xs:?}, expected [N,1,{},{}]", cfg.input_height, cfg.input_width),
        ));
    }
    let a = conv_bn_relu(g, store, x, "conv1", "bn1", mode, trace)?;
    let f1 = g.maxpool2(a)?;
    let a = conv_bn_relu(g, store, f1, "conv2", "bn2", mode, trace)?;
    let f2 = g.maxpool2(a)?;
    let f3 = conv_bn_relu(g, store, f2, "conv3", "bn3", mode, trace)?;
    let a = conv_bn_relu(g, store, f3, "conv4", "bn4", mode, trace)?;
    let f4 = g.maxpool2(a)?;
    Ok([f1, f2, f3, f4])
}

/// Combines F2 and F3 with a branch map F51 (`branch` is `"g"` or `"r"`).
pub fn fuse_multilevel(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &NetConfig,
    branch: &str,
    f2: Var,
    f3: Var,
    f51: Var,
) -> Result<Var> {
    let mut eps = |src: Var, lvl: &str| -> Result<Var> {
        let w = g.param(store, &format!("fuse_{branch}.{lvl}.weight"))?;
        let b = g.param(store, &format!("fuse_{branch}.{lvl}.bias"))?;
        g.conv2d(src, w, Some(b), 2, 1)
    };
    let e2 = eps(f2, "eps2")?;
    let e3 = eps(f3, "eps3")?;
    match cfg.fusion {
        FusionMode::Multiply => {
            let p = g.mul(e2, e3)?;
            g.mul(p, f51)
        }
        FusionMode::Concat => {
            let cat = g.concat_channels(&[e2, e3, f51])?;
            let w = g.param(store, &format!("fuse_{branch}.proj.weight"))?;
            let b = g.param(store, &format!("fuse_{branch}.proj.bias"))?;
            g.conv2d(cat, w, Some(b), 1, 0)
        }
    }
}

/// Intermediate values of the joint channel attention, each `[N, .]`.
#[derive(Clone, Copy, Debug)]
pub struct GrcaState {
    pub d1g: Var,
    pub d1r: Var,
    pub d2g: Var,
    pub d2r: Var,
    pub df: Var,
    pub mg: Var,
    pub mr: Var,
}

/// Joint channel attention over the fused global and regional maps. Returns the
/// reweighted maps and the intermediate state.
pub fn grca(g: &mut Graph, store: &ParameterStore, f52g: Var, f52r: Var) -> Result<(Var, Var, GrcaState)> {
    if g.shape(f52g) != g.shape(f52r) {
        return Err(Error::shape(
            "grca",
            format!("{:?} vs {:?}", g.shape(f52g), g.shape(f52r)),
        ));
    }
    let fc = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
        let w = g.param(store, &format!("grca.{name}.weight"))?;
        let b = g.param(store, &format!("grca.{name}.bias"))?;
        g.linear(x, w, b)
    };
    let d1g = g.gap(f52g)?;
    let d1r = g.gap(f52r)?;
    let zg = fc(g, d1g, "reduce_g")?;
    let zr = fc(g, d1r, "reduce_r")?;
    let d2g = g.relu(zg);
    let d2r = g.relu(zr);
    let df = g.mul(d2g, d2r)?;
    let ug = fc(g, df, "recover_g")?;
    let ur = fc(g, df, "recover_r")?;
    let mg = g.sigmoid(ug);
    let mr = g.sigmoid(ur);
    let ag = g.scale_channels(f52g, mg)?;
    let ar = g.scale_channels(f52r, mr)?;
    Ok((ag, ar, GrcaState { d1g, d1r, d2g, d2r, df, mg, mr }))
}

/// Crops the six region maps out of the attended regional map.
pub fn divide_regions(g: &mut Graph, cfg: &NetConfig, f52r: Var) -> Result<Vec<Var>> {
    let (h, w) = cfg.deep_dims();
    let s = g.shape(f52r);
    if s.len() < 3 || s[s.len() - 2] != h || s[s.len() - 1] != w {
        return Err(Error::shape("divide_regions", format!("{s:?}, expected spatial {h}x{w}")));
    }
    cfg.region_windows()?
        .into_iter()
        .map(|(rows, cols)| g.crop(f52r, rows, cols))
        .collect()
}

/// `fc(l2_normalize(gap(map)))` with the head named `head`.
pub fn embed_map(g: &mut Graph, store: &ParameterStore, map: Var, head: &str) -> Result<Var> {
    let pooled = g.gap(map)?;
    let unit = g.l2_normalize(pooled)?;
    let w = g.param(store, &format!("{head}.weight"))?;
    let b = g.param(store, &format!("{head}.bias"))?;
    g.linear(unit, w, b)
}

pub fn embed_global(g: &mut Graph, store: &ParameterStore, f52g: Var) -> Result<Var> {
    embed_map(g, store, f52g, "head_g")
}

pub fn embed_regions(g: &mut Graph, store: &ParameterStore, regions: &[Var]) -> Result<Vec<Var>> {
    if regions.len() != 6 {
        return Err(Error::shape("embed_regions", format!("{} region maps, expected 6", regions.len())));
    }
    regions
        .iter()
        .enumerate()
        .map(|(i, &r)| embed_map(g, store, r, &format!("head_r{}", i + 1)))
        .collect()
}

/// Every intermediate of one forward pass.
pub struct ForwardPass {
    pub base: [Var; 4],
    pub f51g: Var,
    pub f51r: Var,
    pub f52g: Var,
    pub f52r: Var,
    pub attended_g: Var,
    pub attended_r: Var,
    pub grca: GrcaState,
    pub regions: Vec<Var>,
    /// `[N, E]`.
    pub global: Var,
    /// Six `[N, E]` regional embeddings.
    pub regional: Vec<Var>,
    pub bn: BnTrace,
}

impl ForwardPass {
    /// Global then six regional embedding matrices.
    pub fn branches(&self) -> Vec<Var> {
        std::iter::once(self.global).chain(self.regional.iter().copied()).collect()
    }
}

/// Full network on a batch `x` of shape `[N,1,Hin,Win]`.
pub fn forward_graph(g: &mut Graph, store: &ParameterStore, cfg: &NetConfig, x: Var, mode: BnMode) -> Result<ForwardPass> {
    let mut bn = BnTrace::default();
    let base = forward_base(g, store, cfg, x, mode, &mut bn)?;
    let [_, f2, f3, f4] = base;
    let f51g = conv_bn_relu(g, store, f4, "conv51g", "bn51g", mode, &mut bn)?;
    let f51r = conv_bn_relu(g, store, f4, "conv51r", "bn51r", mode, &mut bn)?;
    let f52g = fuse_multilevel(g, store, cfg, "g", f2, f3, f51g)?;
    let f52r = fuse_multilevel(g, store, cfg, "r", f2, f3, f51r)?;
    let (attended_g, attended_r, grca_state) = grca(g, store, f52g, f52r)?;
    let regions = divide_regions(g, cfg, attended_r)?;
    let global = embed_global(g, store, attended_g)?;
    let regional = embed_regions(g, store, &regions)?;
    Ok(ForwardPass {
        base,
        f51g,
        f51r,
        f52g,
        f52r,
        attended_g,
        attended_r,
        grca: grca_state,
        regions,
        global,
        regional,
        bn,
    })
}

/// Folds the batch moments of a train-mode pass into the running statistics.
pub fn update_bn_stats(store: &mut ParameterStore, trace: &BnTrace) -> Result<()> {
    for (name, m) in &trace.moments {
        store.update_running_stats(name, m)?;
    }
    Ok(())
}

/// Stacks `[1,H,W]` images into `[N,1,H,W]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("stack_images", "no images"))?.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.iter().product::<usize>());
    for t in images {
        if t.shape() != first.as_slice() {
            return Err(Error::shape("stack_images", format!("{:?} vs {first:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(first);
    Tensor::new(shape, data)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Eval-mode embeddings for a list of `[1,H,W]` images, computed in chunks.
pub fn embed_images(store: &ParameterStore, cfg: &NetConfig, images: &[&Tensor], chunk: usize) -> Result<Vec<EmbeddingSet>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(stack_images(part)?);
        let fp = forward_graph(&mut g, store, cfg, x, BnMode::Eval)?;
        let global = rows(g.value(fp.global));
        let regional: Vec<Vec<Vec<f64>>> = fp.regional.iter().map(|&v| rows(g.value(v))).collect();
        for (i, gl) in global.into_iter().enumerate() {
            out.push(EmbeddingSet { global: gl, regional: regional.iter().map(|r| r[i].clone()).collect() });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
