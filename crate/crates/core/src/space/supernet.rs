//! Supernet construction, single-path forward, and cost accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ArchEncoding, OpKind, EDGES, NUM_EDGES, NUM_NODES, NUM_OPS};
use crate::batchnorm::{BatchNormLayer, BatchStats, BnConfig, BnTrace};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Only BatchNorm γ/β are trainable.
    BnOnly,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpaceConfig {
    pub in_channels: usize,
    /// Input height and width.
    pub image_size: usize,
    /// Width of the first stage; each later stage doubles it.
    pub channels: usize,
    pub stages: usize,
    pub cells_per_stage: usize,
    pub num_classes: usize,
    /// BatchNorm after every candidate operation (otherwise after convs only).
    pub fair_bn: bool,
    /// With `fair_bn`, also attach a BatchNorm to the zero operation.
    pub zero_bn: bool,
    pub bn: BnConfig,
    pub seed: u64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 16,
            channels: 16,
            stages: 3,
            cells_per_stage: 1,
            num_classes: 4,
            fair_bn: true,
            zero_bn: true,
            bn: BnConfig::default(),
            seed: 0,
        }
    }
}

impl SpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || self.stages == 0 || self.cells_per_stage == 0 || self.num_classes < 2 {
            return Err(Error::invalid(
                "space config needs channels >= 4, stages >= 1, cells_per_stage >= 1, num_classes >= 2",
            ));
        }
        if self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::invalid("space config needs a non-empty input shape"));
        }
        self.bn.validate()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels << stage
    }

    /// Feature-map side length within `stage`.
    pub fn stage_size(&self, stage: usize) -> usize {
        (0..stage).fold(self.image_size, |h, _| (h - 1) / 2 + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.stages * self.cells_per_stage
    }

    pub fn cell_stage(&self, cell: usize) -> usize {
        cell / self.cells_per_stage
    }

    /// Whether `op` carries a BatchNorm on a cell edge.
    pub fn op_has_bn(&self, op: OpKind) -> bool {
        if self.fair_bn {
            op != OpKind::Zero || self.zero_bn
        } else {
            op.is_conv()
        }
    }
}

/// Where a BatchNorm sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnRole {
    Stem,
    Reduction { stage: usize },
    Edge { cell: usize, edge: usize, op: OpKind },
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBn {
    pub conv: ParamId,
    pub bn: usize,
}

/// Parameters of one cell edge, indexed by operation digit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeSlot {
    pub conv: [Option<ParamId>; NUM_OPS],
    pub bn: [Option<usize>; NUM_OPS],
}

/// Weight-sharing network over the whole cell space. A stand-alone network
/// is the same structure with only one architecture's operations allocated.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub config: SpaceConfig,
    pub store: ParamStore,
    pub bns: Vec<BatchNormLayer>,
    pub bn_roles: Vec<BnRole>,
    pub stem: ConvBn,
    /// One per stage after the first.
    pub reductions: Vec<ConvBn>,
    /// `cells[c][e]`.
    pub cells: Vec<[EdgeSlot; NUM_EDGES]>,
    pub head_bn: usize,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
    only: Option<ArchEncoding>,
}

/// How BatchNorm layers obtain their normalization statistics.
pub enum BnPolicy<'a> {
    /// Statistics of the current batch (train mode; nothing is mutated).
    Batch,
    /// Running estimates (eval mode).
    Running,
    /// Supplied statistics keyed by BatchNorm index.
    Fixed(&'a BTreeMap<usize, BatchStats>),
    /// One logged batch per layer, drawn uniformly (stochastic mode).
    Sampled(&'a mut RngState),
}

pub struct Forward {
    pub logits: Var,
    /// Batch statistics observed under [`BnPolicy::Batch`], in execution order.
    pub observed: Vec<(usize, BatchStats)>,
    /// Tape nodes of each BatchNorm applied under [`BnPolicy::Batch`].
    pub traces: Vec<(usize, BnTrace)>,
}

/// One searchable edge on an architecture's path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathEdge {
    pub cell: usize,
    pub edge: usize,
    pub op: OpKind,
    pub bn: Option<usize>,
    pub channels: usize,
}

impl PathEdge {
    /// The edge carries signal (is not the zero operation).
    pub fn live(&self) -> bool {
        self.op != OpKind::Zero
    }
}

/// A supernet restricted to one architecture.
#[derive(Clone, Copy)]
pub struct Subnet<'a> {
    pub supernet: &'a Supernet,
    pub encoding: ArchEncoding,
}

impl Subnet<'_> {
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, policy: &mut BnPolicy) -> Result<Forward> {
        self.supernet.forward(tape, self.encoding, images, policy)
    }

    pub fn path(&self) -> Vec<PathEdge> {
        self.supernet.path(self.encoding)
    }
}

fn he_conv(store: &mut ParamStore, name: String, f: usize, c: usize, k: usize, seed: u64) -> Result<ParamId> {
    let std = (2.0 / (c * k * k) as f64).sqrt();
    let mut rng = RngState::derive(seed, &name);
    store.add(name, Tensor::gaussian(&[f, c, k, k], 0.0, std, &mut rng)?, false)
}

impl Supernet {
    pub fn build(config: &SpaceConfig) -> Result<Self> {
        Self::build_inner(config, None)
    }

    /// An isolated network holding only `arch`'s operations. Parameter names
    /// and initial values coincide with the corresponding supernet entries.
    pub fn standalone(config: &SpaceConfig, arch: ArchEncoding) -> Result<Self> {
        Self::build_inner(config, Some(arch))
    }

    fn build_inner(config: &SpaceConfig, only: Option<ArchEncoding>) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let mut bns = Vec::new();
        let mut bn_roles = Vec::new();
        let mut add_bn = |store: &mut ParamStore, name: String, ch: usize, role: BnRole| -> Result<usize> {
            bns.push(BatchNormLayer::new(name, ch, &config.bn, store)?);
            bn_roles.push(role);
            Ok(bns.len() - 1)
        };

        let c0 = config.channels;
        let stem = ConvBn {
            conv: he_conv(&mut store, "stem.conv".into(), c0, config.in_channels, 3, seed)?,
            bn: add_bn(&mut store, "stem.bn".into(), c0, BnRole::Stem)?,
        };
        let mut reductions = Vec::new();
        for s in 1..config.stages {
            let (cin, cout) = (config.stage_channels(s - 1), config.stage_channels(s));
            reductions.push(ConvBn {
                conv: he_conv(&mut store, format!("reduce{s}.conv"), cout, cin, 3, seed)?,
                bn: add_bn(&mut store, format!("reduce{s}.bn"), cout, BnRole::Reduction { stage: s })?,
            });
        }
        let mut cells = Vec::new();
        for cell in 0..config.num_cells() {
            let ch = config.stage_channels(config.cell_stage(cell));
            let mut slots = [EdgeSlot::default(); NUM_EDGES];
            for (e, slot) in slots.iter_mut().enumerate() {
                let (i, j) = EDGES[e];
                for op in OpKind::ALL {
                    if only.is_some_and(|a| a.op(e) != op) {
                        continue;
                    }
                    let prefix = format!("cell{cell}.e{i}{j}.{}", op.name());
                    let d = op.digit() as usize;
                    if op.is_conv() {
                        let k = if op == OpKind::Conv3x3 { 3 } else { 1 };
                        slot.conv[d] = Some(he_conv(&mut store, format!("{prefix}.conv"), ch, ch, k, seed)?);
                    }
                    if config.op_has_bn(op) {
                        let role = BnRole::Edge { cell, edge: e, op };
                        slot.bn[d] = Some(add_bn(&mut store, format!("{prefix}.bn"), ch, role)?);
                    }
                }
            }
            cells.push(slots);
        }
        let c_last = config.stage_channels(config.stages - 1);
        let head_bn = add_bn(&mut store, "head.bn".into(), c_last, BnRole::Head)?;
        let mut rng = RngState::derive(seed, "head.fc.weight");
        let w = Tensor::gaussian(&[c_last, config.num_classes], 0.0, (1.0 / c_last as f64).sqrt(), &mut rng)?;
        let classifier_w = store.add("head.fc.weight", w, false)?;
        let classifier_b = store.add("head.fc.bias", Tensor::zeros(&[config.num_classes]), false)?;

        let mut net = Self {
            config: config.clone(),
            store,
            bns,
            bn_roles,
            stem,
            reductions,
            cells,
            head_bn,
            classifier_w,
            classifier_b,
            only,
        };
        net.set_train_mode(TrainMode::BnOnly);
        Ok(net)
    }

    /// The architecture a stand-alone network was built for.
    pub fn restricted_to(&self) -> Option<ArchEncoding> {
        self.only
    }

    pub fn subnet(&self, encoding: ArchEncoding) -> Subnet<'_> {
        Subnet { supernet: self, encoding }
    }

    pub fn bn_param_ids(&self) -> Vec<ParamId> {
        self.bns.iter().flat_map(|b| [b.gamma, b.beta]).collect()
    }

    pub fn is_bn_param(&self, id: ParamId) -> bool {
        self.bns.iter().any(|b| b.gamma == id || b.beta == id)
    }

    /// Set trainable flags: BN-only freezes every non-BatchNorm parameter.
    pub fn set_train_mode(&mut self, mode: TrainMode) {
        let bn_ids = self.bn_param_ids();
        for id in self.store.ids().collect::<Vec<_>>() {
            let trainable = mode == TrainMode::Full || bn_ids.contains(&id);
            self.store.set_trainable(id, trainable);
        }
    }

    /// Checksum over all non-BatchNorm parameters.
    pub fn frozen_checksum(&self) -> String {
        let bn_names: std::collections::HashSet<String> = self
            .bn_param_ids()
            .into_iter()
            .map(|id| self.store.get(id).name.clone())
            .collect();
        self.store.checksum(|p| !bn_names.contains(&p.name))
    }

    /// Whether any BatchNorm has recorded a training batch.
    pub fn is_trained(&self) -> bool {
        self.bns.iter().any(|b| b.updates() > 0)
    }

    /// Searchable edges of `arch` in cell-then-edge order.
    pub fn path(&self, arch: ArchEncoding) -> Vec<PathEdge> {
        let mut out = Vec::with_capacity(self.cells.len() * NUM_EDGES);
        for (cell, slots) in self.cells.iter().enumerate() {
            let channels = self.config.stage_channels(self.config.cell_stage(cell));
            for (edge, slot) in slots.iter().enumerate() {
                let op = arch.op(edge);
                out.push(PathEdge {
                    cell,
                    edge,
                    op,
                    bn: slot.bn[op.digit() as usize],
                    channels,
                });
            }
        }
        out
    }

    /// BatchNorm indices used by `arch`, in execution order.
    pub fn path_bns(&self, arch: ArchEncoding) -> Vec<usize> {
        let mut out = vec![self.stem.bn];
        for cell in 0..self.cells.len() {
            let stage = self.config.cell_stage(cell);
            if stage > 0 && cell % self.config.cells_per_stage == 0 {
                out.push(self.reductions[stage - 1].bn);
            }
            for e in 0..NUM_EDGES {
                if let Some(b) = self.cells[cell][e].bn[arch.digit_at(e)] {
                    out.push(b);
                }
            }
        }
        out.push(self.head_bn);
        out
    }

    /// Fold observed batch statistics into the corresponding layers.
    pub fn commit(&mut self, observed: Vec<(usize, BatchStats)>) {
        for (idx, stats) in observed {
            self.bns[idx].record(stats);
        }
    }

    pub fn forward(&self, tape: &mut Tape, arch: ArchEncoding, images: &Tensor, policy: &mut BnPolicy) -> Result<Forward> {
        if let Some(only) = self.only {
            if only != arch {
                return Err(Error::invalid(format!("stand-alone network for {only} cannot run {arch}")));
            }
        }
        let cfg = &self.config;
        let expect = [cfg.in_channels, cfg.image_size, cfg.image_size];
        if images.shape().len() != 4 || images.shape()[1..] != expect {
            return Err(Error::shape(
                "supernet_forward",
                format!("expected [N, {}, {}, {}], got {:?}", expect[0], expect[1], expect[2], images.shape()),
            ));
        }
        let mut ctx = Ctx {
            tape,
            policy,
            observed: Vec::new(),
            traces: Vec::new(),
        };
        let x = ctx.tape.constant(images.clone())?;
        let w = ctx.tape.param(&self.store, self.stem.conv)?;
        let x = ctx.tape.conv2d(x, w)?;
        let mut x = self.bn(&mut ctx, self.stem.bn, x)?;
        for cell in 0..self.cells.len() {
            let stage = cfg.cell_stage(cell);
            if stage > 0 && cell % cfg.cells_per_stage == 0 {
                let red = self.reductions[stage - 1];
                let r = ctx.tape.relu(x)?;
                let w = ctx.tape.param(&self.store, red.conv)?;
                let r = ctx.tape.conv2d_strided(r, w, 2)?;
                x = self.bn(&mut ctx, red.bn, r)?;
            }
            x = self.cell_forward(&mut ctx, cell, arch, x)?;
        }
        let x = self.bn(&mut ctx, self.head_bn, x)?;
        let x = ctx.tape.relu(x)?;
        let x = ctx.tape.global_avg_pool(x)?;
        let wv = ctx.tape.param(&self.store, self.classifier_w)?;
        let bv = ctx.tape.param(&self.store, self.classifier_b)?;
        let logits = ctx.tape.linear(x, wv, bv)?;
        Ok(Forward {
            logits,
            observed: ctx.observed,
            traces: ctx.traces,
        })
    }

    fn cell_forward(&self, ctx: &mut Ctx, cell: usize, arch: ArchEncoding, input: Var) -> Result<Var> {
        let mut nodes: Vec<Var> = vec![input];
        for j in 1..NUM_NODES {
            let mut terms = Vec::new();
            for (e, &(from, to)) in EDGES.iter().enumerate() {
                if to != j {
                    continue;
                }
                if let Some(v) = self.edge_forward(ctx, cell, e, arch.op(e), nodes[from])? {
                    terms.push(v);
                }
            }
            let node = if terms.is_empty() {
                let shape = ctx.tape.value(input).shape().to_vec();
                ctx.tape.constant(Tensor::zeros(&shape))?
            } else {
                ctx.tape.add_all(&terms)?
            };
            nodes.push(node);
        }
        Ok(nodes[NUM_NODES - 1])
    }

    /// `None` when the edge contributes nothing (zero op without BatchNorm).
    fn edge_forward(&self, ctx: &mut Ctx, cell: usize, e: usize, op: OpKind, x: Var) -> Result<Option<Var>> {
        let slot = &self.cells[cell][e];
        let d = op.digit() as usize;
        let y = match op {
            OpKind::Conv3x3 | OpKind::Conv1x1 => {
                let r = ctx.tape.relu(x)?;
                let w = ctx.tape.param(&self.store, slot.conv[d].expect("conv weights allocated"))?;
                ctx.tape.conv2d(r, w)?
            }
            OpKind::AvgPool3x3 => ctx.tape.avg_pool3x3(x)?,
            OpKind::Identity => x,
            OpKind::Zero => match slot.bn[d] {
                Some(_) => {
                    let shape = ctx.tape.value(x).shape().to_vec();
                    ctx.tape.constant(Tensor::zeros(&shape))?
                }
                None => return Ok(None),
            },
        };
        match slot.bn[d] {
            Some(b) => Ok(Some(self.bn(ctx, b, y)?)),
            None => Ok(Some(y)),
        }
    }

    fn bn(&self, ctx: &mut Ctx, idx: usize, x: Var) -> Result<Var> {
        let layer = &self.bns[idx];
        match ctx.policy {
            BnPolicy::Batch => {
                let (trace, stats) = layer.forward_batch(ctx.tape, &self.store, x)?;
                ctx.observed.push((idx, stats));
                ctx.traces.push((idx, trace));
                Ok(trace.output)
            }
            BnPolicy::Running => layer.forward_eval(ctx.tape, &self.store, x),
            BnPolicy::Fixed(map) => {
                let stats = map.get(&idx).ok_or_else(|| Error::NoStatistics(layer.name.clone()))?;
                layer.forward_with(ctx.tape, &self.store, x, stats)
            }
            BnPolicy::Sampled(rng) => layer.forward_stochastic(ctx.tape, &self.store, x, rng),
        }
    }
}

struct Ctx<'t, 'p, 'a> {
    tape: &'t mut Tape,
    policy: &'p mut BnPolicy<'a>,
    observed: Vec<(usize, BatchStats)>,
    traces: Vec<(usize, BnTrace)>,
}

impl ArchEncoding {
    fn digit_at(&self, edge: usize) -> usize {
        self.digits()[edge] as usize
    }
}

/// Parameters on `arch`'s path. With `learnable_only`, BatchNorm γ/β only
/// (the BN-only trainable set).
pub fn count_params(arch: ArchEncoding, config: &SpaceConfig, learnable_only: bool) -> u64 {
    let mut bn = 2 * config.channels;
    let mut weights = 9 * config.in_channels * config.channels;
    for s in 1..config.stages {
        let (cin, cout) = (config.stage_channels(s - 1), config.stage_channels(s));
        bn += 2 * cout;
        weights += 9 * cin * cout;
    }
    for cell in 0..config.num_cells() {
        let ch = config.stage_channels(config.cell_stage(cell));
        for op in arch.decode() {
            if config.op_has_bn(op) {
                bn += 2 * ch;
            }
            weights += match op {
                OpKind::Conv3x3 => 9 * ch * ch,
                OpKind::Conv1x1 => ch * ch,
                _ => 0,
            };
        }
    }
    let c_last = config.stage_channels(config.stages - 1);
    bn += 2 * c_last;
    weights += c_last * config.num_classes + config.num_classes;
    if learnable_only {
        bn as u64
    } else {
        (bn + weights) as u64
    }
}

/// Multiply-accumulates of one forward pass on a single image: convolutions,
/// 3x3 average pools (9 per output element), and the classifier. BatchNorm,
/// activations, additions, and global pooling are not counted.
pub fn count_flops(arch: ArchEncoding, config: &SpaceConfig) -> u64 {
    let hw = |s: usize| config.stage_size(s).pow(2);
    let mut total = 9 * config.in_channels * config.channels * hw(0);
    for s in 1..config.stages {
        total += 9 * config.stage_channels(s - 1) * config.stage_channels(s) * hw(s);
    }
    for cell in 0..config.num_cells() {
        let s = config.cell_stage(cell);
        let (ch, area) = (config.stage_channels(s), hw(s));
        for op in arch.decode() {
            total += match op {
                OpKind::Conv3x3 => 9 * ch * ch * area,
                OpKind::Conv1x1 => ch * ch * area,
                OpKind::AvgPool3x3 => 9 * ch * area,
                OpKind::Identity | OpKind::Zero => 0,
            };
        }
    }
    total += config.stage_channels(config.stages - 1) * config.num_classes;
    total as u64
}
