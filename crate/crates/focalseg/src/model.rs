//! The U-shaped segmentation network: a patch-embedding front end, four
//! windowed-attention stages connected by patch merging, a convolutional
//! decoder that consumes the stage maps as skips, and dual prediction heads
//! (class probabilities plus a boundary-distance regression map).
//!
//! Parameters live in a [`ParamStore`]; the `Model` only holds typed handles
//! and precomputed gather plans, so a forward pass is a pure function of
//! (store contents, input).

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::attention::{
    focal_attention, map_to_tokens_plan, tokens_to_map_plan, AttnVars, FocalConfig, FocalPlan,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GatherPlan, Tape, Var};
use crate::tensor::{randn, Tensor};

pub const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-5;

/// Handle into a [`ParamStore`]; indexes the leaf list passed to `forward`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, std) with draws clamped to ±2std.
    BoundedNormal { std: f64 },
    /// He initialization: std = sqrt(2 / fan_in).
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
    Const(f64),
}

// FNV-1a over (seed, name): every tensor gets its own RNG stream, stable
// under registration-order changes.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub struct ParamStore<S: Scalar> {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let mut rng = ChaCha12Rng::seed_from_u64(name_seed(self.seed, &name));
        let t = match init {
            Init::BoundedNormal { std } => {
                let mut t = randn::<S, _>(shape, std, &mut rng);
                let bound = S::from_f64(2.0 * std);
                let neg = S::from_f64(-2.0 * std);
                for v in t.make_mut() {
                    if *v > bound {
                        *v = bound;
                    }
                    if *v < neg {
                        *v = neg;
                    }
                }
                t
            }
            Init::Kaiming { fan_in } => randn::<S, _>(shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, S::ONE),
            Init::Const(v) => Tensor::full(shape, S::from_f64(v)),
        };
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<S>) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::dim(
                "param set",
                format!("{}: {:?} vs {:?}", self.names[id.0], t.shape(), self.tensors[id.0].shape()),
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Scalar count per top-level name segment, in first-seen order.
    pub fn grouped_counts(&self) -> Vec<(String, usize)> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let head = name.split('.').next().unwrap_or(name).to_string();
            if !counts.contains_key(&head) {
                order.push(head.clone());
            }
            *counts.entry(head).or_insert(0) += t.numel();
        }
        order.into_iter().map(|h| { let c = counts[&h]; (h, c) }).collect()
    }

    /// One leaf per parameter, in registration order. Trainable leaves
    /// collect gradients; otherwise they are constants.
    pub fn leaves(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let entries: Vec<(String, Tensor<S>)> =
            self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        archive::write(path, &entries)
    }

    /// Replaces every tensor from the archive; names and shapes must match
    /// the registered set exactly.
    pub fn load<P: AsRef<Path>>(&mut self, path: P) -> Result<()> {
        let entries = archive::read::<S, _>(path)?;
        if entries.len() != self.names.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                entries.len(),
                self.names.len()
            )));
        }
        let mut by_name: HashMap<&str, &Tensor<S>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Input resolution (H, W).
    pub input: [usize; 2],
    /// Square patch side for the embedding front end.
    pub patch: usize,
    /// Stage-1 channel width; stage k runs at embed_dim * 2^k.
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// Preferred attention window side; shrunk per stage to divide the grid.
    pub window: usize,
    pub num_classes: usize,
    /// When false the boundary-regression head is absent entirely.
    pub dual_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// 128x128 single-channel config small enough to train on one CPU.
    pub fn desk() -> Self {
        ModelConfig {
            in_channels: 1,
            input: [128, 128],
            patch: 2,
            embed_dim: 32,
            depths: [1, 1, 2, 1],
            heads: [4, 8, 16, 32],
            window: 8,
            num_classes: 2,
            dual_head: true,
        }
    }

    /// 224x224 configuration used for parameter-count reporting.
    pub fn full_scale(embed_dim: usize) -> Self {
        ModelConfig {
            in_channels: 1,
            input: [224, 224],
            patch: 2,
            embed_dim,
            depths: [2, 2, 6, 2],
            heads: [4, 8, 16, 32],
            window: 7,
            num_classes: 2,
            dual_head: true,
        }
    }

    /// Smallest full architecture; used by the composed gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            in_channels: 1,
            input: [32, 32],
            patch: 2,
            embed_dim: 8,
            depths: [1, 1, 1, 1],
            heads: [2, 2, 2, 2],
            window: 4,
            num_classes: 2,
            dual_head: true,
        }
    }

    pub fn stage_dim(&self, k: usize) -> usize {
        self.embed_dim << k
    }

    /// Token-grid resolution entering stage k (0-based).
    pub fn stage_res(&self, k: usize) -> (usize, usize) {
        (self.input[0] / self.patch >> k, self.input[1] / self.patch >> k)
    }

    pub fn stem_channels(&self) -> usize {
        self.embed_dim / 2
    }

    /// Largest window <= the preferred size that tiles stage k's grid.
    pub fn stage_window(&self, k: usize) -> usize {
        let (h, w) = self.stage_res(k);
        let mut cand = self.window.min(h).min(w).max(1);
        while cand > 1 && (h % cand != 0 || w % cand != 0) {
            cand -= 1;
        }
        cand
    }

    /// Two granularity levels per stage: the window itself at full detail
    /// plus a 3x3 neighborhood of window-sized pooled summaries.
    pub fn stage_focal(&self, k: usize) -> FocalConfig {
        let win = self.stage_window(k);
        FocalConfig {
            dim: self.stage_dim(k),
            heads: self.heads[k],
            window: win,
            sub_windows: vec![1, win],
            regions: vec![win, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Parameter("in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter("num_classes must be >= 2".into()));
        }
        if self.patch == 0 || self.window == 0 {
            return Err(Error::Parameter("patch and window must be >= 1".into()));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Parameter("embed_dim must be even and >= 2".into()));
        }
        let unit = self.patch * 8;
        if self.input[0] % unit != 0 || self.input[1] % unit != 0 {
            return Err(Error::dim(
                "model config",
                format!("input {:?} must be divisible by patch*8 = {}", self.input, unit),
            ));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::Parameter("every stage needs at least one block".into()));
        }
        for k in 0..4 {
            self.stage_focal(k).validate()?;
        }
        Ok(())
    }
}

struct LinIds {
    w: ParamId,
    b: ParamId,
}

struct NormIds {
    g: ParamId,
    b: ParamId,
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

struct AttnIds {
    pool_w: Vec<ParamId>,
    pool_b: Vec<ParamId>,
    wq: ParamId,
    bq: ParamId,
    // no key bias: softmax logits are invariant to a shared key shift, so
    // the parameter could never receive gradient
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    bias: Vec<ParamId>,
}

struct BlockIds {
    n1: NormIds,
    attn: AttnIds,
    n2: NormIds,
    fc1: LinIds,
    fc2: LinIds,
}

struct StageIds {
    blocks: Vec<BlockIds>,
    merge: Option<LinIds>,
}

struct ResIds {
    c1: ConvIds,
    c2: ConvIds,
    /// 1x1 shortcut projection, present only when widths differ.
    proj: Option<ConvIds>,
}

struct UpIds {
    up: ConvIds,
    res: ResIds,
}

struct ModelIds {
    patch: ConvIds,
    stages: Vec<StageIds>,
    stem: Vec<ResIds>,
    ups: Vec<UpIds>,
    seg: ConvIds,
    heat: Option<(ConvIds, ConvIds, ConvIds)>,
}

struct StagePlan {
    focal: FocalPlan,
    /// [n, c] stage tokens -> [c, h, w] skip map.
    to_map: Arc<GatherPlan>,
    /// [n, c] -> [(h/2)(w/2), 4c] grouped tokens for merging.
    merge: Option<Arc<GatherPlan>>,
}

/// 2x2 token groups concatenated channel-wise: group (gy,gx) row holds the
/// channels of (2gy,2gx), (2gy,2gx+1), (2gy+1,2gx), (2gy+1,2gx+1).
fn patch_merge_plan(h: usize, w: usize, c: usize) -> Result<GatherPlan> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("patch merge", format!("odd grid {h}x{w}")));
    }
    GatherPlan::build(&[(h / 2) * (w / 2), 4 * c], h * w * c, |o| {
        let row = o / (4 * c);
        let slot = (o % (4 * c)) / c;
        let ch = o % c;
        let (gy, gx) = (row / (w / 2), row % (w / 2));
        let (dy, dx) = (slot / 2, slot % 2);
        Some(((2 * gy + dy) * w + (2 * gx + dx)) * c + ch)
    })
}

pub struct ModelOutput {
    pub seg_logits: Var,
    /// Softmax over the class axis: every pixel's class column sums to 1.
    pub seg_probs: Var,
    pub heatmap: Option<Var>,
    /// Per-stage encoder output maps [dim_k, h_k, w_k]; also the skips.
    pub stage_maps: Vec<Var>,
    /// ("stage{k}.block{b}", attention weights) for inspection dumps.
    pub attn: Vec<(String, Var)>,
}

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    ids: ModelIds,
    embed_tokens: Arc<GatherPlan>,
    stages: Vec<StagePlan>,
}

fn lin<S: Scalar>(ps: &mut ParamStore<S>, name: &str, din: usize, dout: usize) -> LinIds {
    LinIds {
        w: ps.add(format!("{name}.w"), &[din, dout], Init::BoundedNormal { std: 0.02 }),
        b: ps.add(format!("{name}.b"), &[dout], Init::Zeros),
    }
}

fn norm<S: Scalar>(ps: &mut ParamStore<S>, name: &str, dim: usize) -> NormIds {
    NormIds {
        g: ps.add(format!("{name}.g"), &[dim], Init::Ones),
        b: ps.add(format!("{name}.b"), &[dim], Init::Zeros),
    }
}

fn conv<S: Scalar>(ps: &mut ParamStore<S>, name: &str, cout: usize, cin: usize, k: usize) -> ConvIds {
    ConvIds {
        w: ps.add(format!("{name}.w"), &[cout, cin, k, k], Init::Kaiming { fan_in: cin * k * k }),
        b: ps.add(format!("{name}.b"), &[cout], Init::Zeros),
    }
}

fn res_ids<S: Scalar>(ps: &mut ParamStore<S>, name: &str, cin: usize, cout: usize) -> ResIds {
    ResIds {
        c1: conv(ps, &format!("{name}.c1"), cout, cin, 3),
        c2: conv(ps, &format!("{name}.c2"), cout, cout, 3),
        proj: (cin != cout).then(|| conv(ps, &format!("{name}.proj"), cout, cin, 1)),
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed);
        let d = cfg.embed_dim;
        let stem_c = cfg.stem_channels();

        let patch = conv(
            &mut ps,
            "embed",
            d,
            cfg.in_channels,
            cfg.patch,
        );

        let mut stages = Vec::new();
        let mut stage_ids = Vec::new();
        for k in 0..4 {
            let fc = cfg.stage_focal(k);
            let (h, w) = cfg.stage_res(k);
            let dim = fc.dim;
            let plan = FocalPlan::new(h, w, fc.clone())?;
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[k] {
                let pre = format!("encoder{k}.block{b}");
                let n1 = norm(&mut ps, &format!("{pre}.norm1"), dim);
                let mut pool_w = Vec::new();
                let mut pool_b = Vec::new();
                for (l, &sub) in fc.sub_windows.iter().enumerate() {
                    let s2 = sub * sub;
                    pool_w.push(ps.add(
                        format!("{pre}.attn.pool{l}.w"),
                        &[s2, 1],
                        Init::Const(1.0 / s2 as f64),
                    ));
                    pool_b.push(ps.add(format!("{pre}.attn.pool{l}.b"), &[1], Init::Zeros));
                }
                let attn = AttnIds {
                    pool_w,
                    pool_b,
                    wq: ps.add(format!("{pre}.attn.q.w"), &[dim, dim], Init::BoundedNormal { std: 0.02 }),
                    bq: ps.add(format!("{pre}.attn.q.b"), &[dim], Init::Zeros),
                    wk: ps.add(format!("{pre}.attn.k.w"), &[dim, dim], Init::BoundedNormal { std: 0.02 }),
                    wv: ps.add(format!("{pre}.attn.v.w"), &[dim, dim], Init::BoundedNormal { std: 0.02 }),
                    bv: ps.add(format!("{pre}.attn.v.b"), &[dim], Init::Zeros),
                    wo: ps.add(format!("{pre}.attn.o.w"), &[dim, dim], Init::BoundedNormal { std: 0.02 }),
                    bo: ps.add(format!("{pre}.attn.o.b"), &[dim], Init::Zeros),
                    bias: plan
                        .levels
                        .iter()
                        .enumerate()
                        .map(|(l, lp)| {
                            ps.add(
                                format!("{pre}.attn.bias{l}"),
                                &[fc.heads, lp.bias_entries],
                                Init::BoundedNormal { std: 0.02 },
                            )
                        })
                        .collect(),
                };
                let n2 = norm(&mut ps, &format!("{pre}.norm2"), dim);
                let fc1 = lin(&mut ps, &format!("{pre}.mlp.fc1"), dim, MLP_RATIO * dim);
                let fc2 = lin(&mut ps, &format!("{pre}.mlp.fc2"), MLP_RATIO * dim, dim);
                blocks.push(BlockIds { n1, attn, n2, fc1, fc2 });
            }
            let merge_ids =
                (k < 3).then(|| lin(&mut ps, &format!("encoder{k}.merge"), 4 * dim, 2 * dim));
            let merge_plan = if k < 3 { Some(Arc::new(patch_merge_plan(h, w, dim)?)) } else { None };
            stage_ids.push(StageIds { blocks, merge: merge_ids });
            stages.push(StagePlan {
                focal: plan,
                to_map: Arc::new(tokens_to_map_plan(h, w, dim)?),
                merge: merge_plan,
            });
        }

        let stem = vec![
            res_ids(&mut ps, "stem.res0", cfg.in_channels, stem_c),
            res_ids(&mut ps, "stem.res1", stem_c, stem_c),
        ];

        // decoder, bottom-up: 8d -> 4d -> 2d -> d -> stem width
        let mut ups = Vec::new();
        let widths = [8 * d, 4 * d, 2 * d, d, stem_c];
        for i in 0..4 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            let name = format!("decoder{i}");
            let up = ConvIds {
                w: ps.add(
                    format!("{name}.up.w"),
                    &[cin, cout, 2, 2],
                    Init::Kaiming { fan_in: cin * 4 },
                ),
                b: ps.add(format!("{name}.up.b"), &[cout], Init::Zeros),
            };
            let res = res_ids(&mut ps, &format!("{name}.res"), 2 * cout, cout);
            ups.push(UpIds { up, res });
        }

        let seg = conv(&mut ps, "head.seg", cfg.num_classes, stem_c, 1);
        let heat = cfg.dual_head.then(|| {
            (
                conv(&mut ps, "head.boundary0", stem_c, stem_c, 3),
                conv(&mut ps, "head.boundary1", stem_c, stem_c, 3),
                conv(&mut ps, "head.boundary2", 1, stem_c, 1),
            )
        });

        let (h0, w0) = cfg.stage_res(0);
        let embed_tokens = Arc::new(map_to_tokens_plan(d, h0, w0)?);

        Ok(Model {
            cfg,
            store: ps,
            ids: ModelIds { patch, stages: stage_ids, stem, ups, seg, heat },
            embed_tokens,
            stages,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_scalars()
    }

    /// One leaf per parameter, in [`ParamId`] order.
    pub fn leaves(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.store.leaves(tape, trainable)
    }

    fn res_block(
        &self,
        tp: &mut Tape<S>,
        params: &[Var],
        ids: &ResIds,
        x: Var,
    ) -> Result<Var> {
        let m = tp.conv2d(x, params[ids.c1.w.0], params[ids.c1.b.0], 1, 1)?;
        let m = tp.relu(m)?;
        let m = tp.conv2d(m, params[ids.c2.w.0], params[ids.c2.b.0], 1, 1)?;
        let s = match &ids.proj {
            Some(p) => tp.conv2d(x, params[p.w.0], params[p.b.0], 1, 0)?,
            None => x,
        };
        let y = tp.add(m, s)?;
        tp.relu(y)
    }

    fn encoder_block(
        &self,
        tp: &mut Tape<S>,
        params: &[Var],
        ids: &BlockIds,
        plan: &FocalPlan,
        x: Var,
    ) -> Result<(Var, Var)> {
        let eps = S::from_f64(LN_EPS);
        let dim = plan.cfg.dim;
        let h = tp.layer_norm(x, params[ids.n1.g.0], params[ids.n1.b.0], eps)?;
        let zero_bk = tp.constant(Tensor::zeros(&[dim]));
        let vars = AttnVars {
            pool_w: ids.attn.pool_w.iter().map(|p| params[p.0]).collect(),
            pool_b: ids.attn.pool_b.iter().map(|p| params[p.0]).collect(),
            wq: params[ids.attn.wq.0],
            bq: params[ids.attn.bq.0],
            wk: params[ids.attn.wk.0],
            bk: zero_bk,
            wv: params[ids.attn.wv.0],
            bv: params[ids.attn.bv.0],
            wo: params[ids.attn.wo.0],
            bo: params[ids.attn.bo.0],
            bias: ids.attn.bias.iter().map(|p| params[p.0]).collect(),
        };
        let out = focal_attention(tp, h, plan, &vars)?;
        let x = tp.add(x, out.out)?;
        let h = tp.layer_norm(x, params[ids.n2.g.0], params[ids.n2.b.0], eps)?;
        let h = tp.matmul(h, params[ids.fc1.w.0])?;
        let h = tp.bias_add_rows(h, params[ids.fc1.b.0])?;
        let h = tp.gelu(h)?;
        let h = tp.matmul(h, params[ids.fc2.w.0])?;
        let h = tp.bias_add_rows(h, params[ids.fc2.b.0])?;
        let x = tp.add(x, h)?;
        Ok((x, out.attn))
    }

    /// Full forward over one sample x: [in_channels, H, W].
    pub fn forward(&self, tp: &mut Tape<S>, params: &[Var], x: Var) -> Result<ModelOutput> {
        if params.len() != self.store.len() {
            return Err(Error::Parameter(format!(
                "expected {} parameter vars, got {}",
                self.store.len(),
                params.len()
            )));
        }
        let want = [self.cfg.in_channels, self.cfg.input[0], self.cfg.input[1]];
        if tp.value(x).shape() != want {
            return Err(Error::dim(
                "model forward",
                format!("input {:?}, config wants {:?}", tp.value(x).shape(), want),
            ));
        }

        let embedded = tp.conv2d(
            x,
            params[self.ids.patch.w.0],
            params[self.ids.patch.b.0],
            self.cfg.patch,
            0,
        )?;
        let mut tokens = tp.gather(embedded, Arc::clone(&self.embed_tokens))?;

        let mut skips = Vec::new();
        let mut attn_dump = Vec::new();
        for (k, (sp, sids)) in self.stages.iter().zip(&self.ids.stages).enumerate() {
            for (b, bids) in sids.blocks.iter().enumerate() {
                let (next, attn) = self.encoder_block(tp, params, bids, &sp.focal, tokens)?;
                tokens = next;
                attn_dump.push((format!("stage{k}.block{b}"), attn));
            }
            skips.push(tp.gather(tokens, Arc::clone(&sp.to_map))?);
            if let (Some(mp), Some(mids)) = (&sp.merge, &sids.merge) {
                let grouped = tp.gather(tokens, Arc::clone(mp))?;
                let merged = tp.matmul(grouped, params[mids.w.0])?;
                tokens = tp.bias_add_rows(merged, params[mids.b.0])?;
            }
        }

        let mut stem_f = x;
        for ids in &self.ids.stem {
            stem_f = self.res_block(tp, params, ids, stem_f)?;
        }

        let mut y = skips[3];
        for (i, up) in self.ids.ups.iter().enumerate() {
            y = tp.conv2d_transpose(y, params[up.up.w.0], params[up.up.b.0], 2)?;
            let skip = if i < 3 { skips[2 - i] } else { stem_f };
            y = tp.concat0(y, skip)?;
            y = self.res_block(tp, params, &up.res, y)?;
        }

        let seg_logits = tp.conv2d(y, params[self.ids.seg.w.0], params[self.ids.seg.b.0], 1, 0)?;
        let seg_probs = tp.softmax(seg_logits, 0)?;
        let heatmap = match &self.ids.heat {
            Some((h0, h1, h2)) => {
                let h = tp.conv2d(y, params[h0.w.0], params[h0.b.0], 1, 1)?;
                let h = tp.relu(h)?;
                let h = tp.conv2d(h, params[h1.w.0], params[h1.b.0], 1, 1)?;
                let h = tp.relu(h)?;
                Some(tp.conv2d(h, params[h2.w.0], params[h2.b.0], 1, 0)?)
            }
            None => None,
        };
        Ok(ModelOutput { seg_logits, seg_probs, heatmap, stage_maps: skips, attn: attn_dump })
    }
}

/// Learnable-scalar total for a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::<f32>::new(cfg.clone(), 0)?.param_count())
}
