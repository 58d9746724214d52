//! MS-NLNet: a grid of scale rows, each interleaving non-local submodules
//! with dense residual groups, joined by stride-2 downsample and
//! pixel-shuffle upsample crossings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init;
use crate::measurement::AffinityMatrix;
use crate::tensor::{Element, Tensor};

pub struct Conv2d<E: Element = f32> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    stride: usize,
    padding: usize,
}

impl<E: Element> Conv2d<E> {
    pub fn new_3x3(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2d {
            weight: init::kaiming_uniform(rng, &[cout, cin, 3, 3]),
            bias: Some(init::zeros_param(&[cout])),
            stride,
            padding: 1,
        }
    }

    pub fn new_1x1(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2d {
            weight: init::kaiming_uniform(rng, &[cout, cin, 1, 1]),
            bias: Some(init::zeros_param(&[cout])),
            stride: 1,
            padding: 0,
        }
    }

    /// 1×1 kernel starting at zero, so the branch it gates contributes
    /// nothing until trained.
    pub fn zero_1x1(cin: usize, cout: usize) -> Self {
        Conv2d {
            weight: init::zeros_param(&[cout, cin, 1, 1]),
            bias: Some(init::zeros_param(&[cout])),
            stride: 1,
            padding: 0,
        }
    }

    /// Embedding kernel without bias (attention paths).
    pub fn embedding_1x1(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2d {
            weight: init::kaiming_uniform(rng, &[cout, cin, 1, 1]),
            bias: None,
            stride: 1,
            padding: 0,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }
}

/// x + conv3×3(relu(conv3×3(x)))
pub struct ResidualBlock<E: Element = f32> {
    pub conv1: Conv2d<E>,
    pub conv2: Conv2d<E>,
}

impl<E: Element> ResidualBlock<E> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        // zero-init the closing conv so the branch starts at identity and
        // stacked blocks cannot compound gain at init
        ResidualBlock {
            conv1: Conv2d::new_3x3(channels, channels, 1, rng),
            conv2: Conv2d {
                weight: init::zeros_param(&[channels, channels, 3, 3]),
                bias: Some(init::zeros_param(&[channels])),
                stride: 1,
                padding: 1,
            },
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.add(&self.conv2.forward(&self.conv1.forward(x)?.relu())?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv1.collect(&format!("{prefix}.c1"), out);
        self.conv2.collect(&format!("{prefix}.c2"), out);
    }
}

/// Densely connected residual blocks. Block k sees the concatenation of the
/// group input and every earlier block output, projected back to C channels
/// by a per-block 1×1 conv; a final 1×1 aggregation maps everything to C.
/// Returns the aggregation only; callers wrap in an outer residual.
pub struct DenseGroup<E: Element = f32> {
    entries: Vec<Conv2d<E>>,
    blocks: Vec<ResidualBlock<E>>,
    agg: Conv2d<E>,
}

impl<E: Element> DenseGroup<E> {
    pub fn new(channels: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let entries = (0..depth)
            .map(|k| Conv2d::new_1x1(channels * (k + 1), channels, rng))
            .collect();
        let blocks = (0..depth).map(|_| ResidualBlock::new(channels, rng)).collect();
        DenseGroup {
            entries,
            blocks,
            agg: Conv2d::zero_1x1(channels * (depth + 1), channels),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut feats = vec![x.clone()];
        for (entry, block) in self.entries.iter().zip(&self.blocks) {
            let fused = Tensor::concat_channels(&feats)?;
            feats.push(block.forward(&entry.forward(&fused)?)?);
        }
        self.agg.forward(&Tensor::concat_channels(&feats)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (k, e) in self.entries.iter().enumerate() {
            e.collect(&format!("{prefix}.in{k}"), out);
        }
        for (k, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.blk{k}"), out);
        }
        self.agg.collect(&format!("{prefix}.agg"), out);
    }
}

/// Stride-2 3×3 conv to the next row's width, refined by a dense group.
pub struct DownsampleSubmodule<E: Element = f32> {
    conv: Conv2d<E>,
    dense: DenseGroup<E>,
}

impl<E: Element> DownsampleSubmodule<E> {
    pub fn new(cin: usize, cout: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        DownsampleSubmodule {
            conv: Conv2d::new_3x3(cin, cout, 2, rng),
            dense: DenseGroup::new(cout, depth, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim(
                "downsample_submodule",
                format!("spatial dims {}x{} must be even", s[2], s[3]),
            ));
        }
        let t = self.conv.forward(x)?;
        t.add(&self.dense.forward(&t)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.dense.collect(&format!("{prefix}.dense"), out);
    }
}

/// 1×1 conv to 4·C_s channels, pixel shuffle by 2, then a dense group.
pub struct UpsampleSubmodule<E: Element = f32> {
    conv: Conv2d<E>,
    dense: DenseGroup<E>,
}

impl<E: Element> UpsampleSubmodule<E> {
    pub fn new(cin: usize, cout: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        UpsampleSubmodule {
            conv: Conv2d::new_1x1(cin, cout * 4, rng),
            dense: DenseGroup::new(cout, depth, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let t = self.conv.forward(x)?.pixel_shuffle(2)?;
        t.add(&self.dense.forward(&t)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.dense.collect(&format!("{prefix}.dense"), out);
    }
}

/// Embedded-Gaussian attention over feature points. Queries stay at full
/// resolution; keys and values are average-pooled by `pool` to bound the
/// affinity matrix size.
pub struct FeatureNonLocal<E: Element = f32> {
    pub w_theta: Conv2d<E>,
    pub w_phi: Conv2d<E>,
    pub w_g: Conv2d<E>,
    pub pool: usize,
}

impl<E: Element> FeatureNonLocal<E> {
    pub fn new(channels: usize, pool: usize, rng: &mut ChaCha8Rng) -> Self {
        FeatureNonLocal {
            w_theta: Conv2d::embedding_1x1(channels, channels, rng),
            w_phi: Conv2d::embedding_1x1(channels, channels, rng),
            w_g: Conv2d::embedding_1x1(channels, channels, rng),
            pool,
        }
    }

    /// Returns the aggregated C-channel map and the (H·W)×(H·W/pool²)
    /// affinity matrix.
    pub fn forward(&self, z: &Tensor<E>) -> Result<(Tensor<E>, AffinityMatrix<E>)> {
        let s = z.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        if h % self.pool != 0 || w % self.pool != 0 {
            return Err(Error::dim(
                "feature_nonlocal",
                format!("{}x{} map not divisible by pool factor {}", h, w, self.pool),
            ));
        }
        let n_q = h * w;
        let n_k = (h / self.pool) * (w / self.pool);
        if n_k == 0 {
            return Err(Error::dim("feature_nonlocal", "pooled grid is empty"));
        }
        let theta = self
            .w_theta
            .forward(z)?
            .reshape(&[c, n_q])?
            .transpose2d()?;
        let pooled = if self.pool > 1 { z.avg_pool2d(self.pool)? } else { z.clone() };
        let phi = self.w_phi.forward(&pooled)?.reshape(&[c, n_k])?;
        let g = self
            .w_g
            .forward(&pooled)?
            .reshape(&[c, n_k])?
            .transpose2d()?;
        let affinity = AffinityMatrix::from_logits(theta.matmul(&phi)?)?;
        let out = affinity
            .weights
            .matmul(&g)?
            .transpose2d()?
            .reshape(&[1, c, h, w])?;
        Ok((out, affinity))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.w_theta.collect(&format!("{prefix}.theta"), out);
        self.w_phi.collect(&format!("{prefix}.phi"), out);
        self.w_g.collect(&format!("{prefix}.g"), out);
    }
}

/// One grid cell: attention (when enabled) gated by a zero-init 1×1
/// projection, refined by d_t residual blocks, added back to the input.
/// With the attention disabled it degrades to the residual blocks alone.
pub struct NonLocalSubmodule<E: Element = f32> {
    pub attention: Option<(FeatureNonLocal<E>, Conv2d<E>)>,
    pub blocks: Vec<ResidualBlock<E>>,
}

impl<E: Element> NonLocalSubmodule<E> {
    pub fn new(
        channels: usize,
        pool: usize,
        depth: usize,
        with_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // draw attention weights unconditionally so the toggle does not
        // shift the init stream of later modules
        let attn = FeatureNonLocal::new(channels, pool, rng);
        let blocks = (0..depth).map(|_| ResidualBlock::new(channels, rng)).collect();
        NonLocalSubmodule {
            attention: with_attention.then(|| (attn, Conv2d::zero_1x1(channels, channels))),
            blocks,
        }
    }

    pub fn forward(&self, z: &Tensor<E>) -> Result<(Tensor<E>, Option<AffinityMatrix<E>>)> {
        match &self.attention {
            Some((attn, project)) => {
                let (agg, affinity) = attn.forward(z)?;
                let mut branch = project.forward(&agg)?;
                for block in &self.blocks {
                    branch = block.forward(&branch)?;
                }
                Ok((z.add(&branch)?, Some(affinity)))
            }
            None => {
                let mut out = z.clone();
                for block in &self.blocks {
                    out = block.forward(&out)?;
                }
                Ok((out, None))
            }
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        if let Some((attn, project)) = &self.attention {
            attn.collect(prefix, out);
            project.collect(&format!("{prefix}.proj"), out);
        }
        for (k, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.blk{k}"), out);
        }
    }
}

/// Affinity matrix of the submodule at `(scale, index)` in the grid.
pub struct FeatureAffinity<E: Element = f32> {
    pub scale: usize,
    pub index: usize,
    pub matrix: AffinityMatrix<E>,
    /// Key-grid pooling of the producing submodule (for the coupling loss).
    pub pool: usize,
    /// Spatial size of the feature map the queries ranged over.
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// Run the next non-local submodule of a row.
    Sub(usize),
    /// Create the row below from this row's state.
    DownCreate(usize),
    /// Extra downward branch `j`: add-merge into the row below the source.
    DownMerge(usize, usize),
    /// Extra upward branch `j`: add-merge into the row above the source.
    UpMerge(usize, usize),
    /// Closing upward branch: row s+1 merges into row s.
    UpClose(usize),
}

/// Fixed grid schedule: a creation cascade downward, extra crossings spread
/// over middle columns, then a bottom-up closing sweep. Every row runs
/// exactly S_N submodules.
fn build_plan(scales: usize, per_scale: usize, down: usize, up: usize) -> Vec<Step> {
    let mut plan = Vec::new();
    let mut done = vec![0usize; scales];
    let push_sub = |plan: &mut Vec<Step>, done: &mut Vec<usize>, row: usize| {
        if done[row] < per_scale {
            plan.push(Step::Sub(row));
            done[row] += 1;
        }
    };
    for s in 0..scales {
        push_sub(&mut plan, &mut done, s);
        if s + 1 < scales {
            plan.push(Step::DownCreate(s));
        }
    }
    if scales > 1 {
        let extra_d = down.saturating_sub(scales - 1);
        for j in 0..extra_d {
            let src = j % (scales - 1);
            push_sub(&mut plan, &mut done, src);
            plan.push(Step::DownMerge(j, src));
        }
        let extra_u = up.saturating_sub(scales - 1);
        for j in 0..extra_u {
            let src = scales - 1 - (j % (scales - 1));
            push_sub(&mut plan, &mut done, src);
            plan.push(Step::UpMerge(j, src));
        }
        for s in (1..scales).rev() {
            while done[s] < per_scale {
                push_sub(&mut plan, &mut done, s);
            }
            plan.push(Step::UpClose(s - 1));
        }
    }
    while done[0] < per_scale {
        push_sub(&mut plan, &mut done, 0);
    }
    plan
}

pub struct MsNlNet<E: Element = f32> {
    config: ModelConfig,
    head: Conv2d<E>,
    tail: Conv2d<E>,
    rows: Vec<Vec<NonLocalSubmodule<E>>>,
    down_creates: Vec<DownsampleSubmodule<E>>,
    down_extras: Vec<DownsampleSubmodule<E>>,
    up_closes: Vec<UpsampleSubmodule<E>>,
    up_extras: Vec<UpsampleSubmodule<E>>,
    plan: Vec<Step>,
}

impl<E: Element> MsNlNet<E> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales = config.effective_scales();
        let ch = &config.channels;
        let head = Conv2d::new_3x3(1, ch[0], 1, &mut rng);
        let mut rows = Vec::with_capacity(scales);
        for s in 0..scales {
            rows.push(
                (0..config.nonlocal_per_scale)
                    .map(|_| {
                        NonLocalSubmodule::new(
                            ch[s],
                            config.pool_factors[s],
                            config.nonlocal_blocks[s],
                            config.enable_nlf,
                            &mut rng,
                        )
                    })
                    .collect(),
            );
        }
        let mut down_creates = Vec::new();
        let mut down_extras = Vec::new();
        let mut up_closes = Vec::new();
        let mut up_extras = Vec::new();
        if scales > 1 {
            for s in 0..scales - 1 {
                down_creates.push(DownsampleSubmodule::new(
                    ch[s],
                    ch[s + 1],
                    config.down_blocks,
                    &mut rng,
                ));
            }
            for j in 0..config.down_branches - (scales - 1) {
                let src = j % (scales - 1);
                down_extras.push(DownsampleSubmodule::new(
                    ch[src],
                    ch[src + 1],
                    config.down_blocks,
                    &mut rng,
                ));
            }
            for s in 0..scales - 1 {
                up_closes.push(UpsampleSubmodule::new(
                    ch[s + 1],
                    ch[s],
                    config.up_blocks,
                    &mut rng,
                ));
            }
            for j in 0..config.up_branches - (scales - 1) {
                let src = scales - 1 - (j % (scales - 1));
                up_extras.push(UpsampleSubmodule::new(
                    ch[src],
                    ch[src - 1],
                    config.up_blocks,
                    &mut rng,
                ));
            }
        }
        let tail = Conv2d::new_3x3(ch[0], 1, 1, &mut rng);
        let plan = build_plan(
            scales,
            config.nonlocal_per_scale,
            if scales > 1 { config.down_branches } else { 0 },
            if scales > 1 { config.up_branches } else { 0 },
        );
        Ok(MsNlNet {
            config: config.clone(),
            head,
            tail,
            rows,
            down_creates,
            down_extras,
            up_closes,
            up_extras,
            plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Refine the initial reconstruction. Input dims are reflection-padded
    /// up to the config alignment and cropped back afterwards.
    pub fn forward(&self, x0: &Tensor<E>) -> Result<(Tensor<E>, Vec<FeatureAffinity<E>>)> {
        let s = x0.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 1 {
            return Err(Error::dim(
                "msnl_forward",
                format!("expected [1,1,h,w] input, got {:?}", s),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let align = self.config.alignment();
        let ph = h.div_ceil(align) * align;
        let pw = w.div_ceil(align) * align;
        let x_pad = if ph == h && pw == w {
            x0.clone()
        } else {
            x0.reflect_pad2d(0, pw - w, 0, ph - h)?
        };

        let scales = self.config.effective_scales();
        let mut states: Vec<Option<Tensor<E>>> = vec![None; scales];
        let mut next_sub = vec![0usize; scales];
        states[0] = Some(self.head.forward(&x_pad)?);
        let mut affinities = Vec::new();

        for step in &self.plan {
            match *step {
                Step::Sub(row) => {
                    let t = next_sub[row];
                    next_sub[row] += 1;
                    let state = states[row].take().expect("row state exists");
                    let (sh, sw) = (state.shape()[2], state.shape()[3]);
                    let (out, affinity) = self.rows[row][t].forward(&state)?;
                    if let Some(matrix) = affinity {
                        affinities.push(FeatureAffinity {
                            scale: row,
                            index: t,
                            matrix,
                            pool: self.config.pool_factors[row],
                            height: sh,
                            width: sw,
                        });
                    }
                    states[row] = Some(out);
                }
                Step::DownCreate(srow) => {
                    let src = states[srow].as_ref().expect("source row exists");
                    states[srow + 1] = Some(self.down_creates[srow].forward(src)?);
                }
                Step::DownMerge(j, srow) => {
                    let src = states[srow].as_ref().expect("source row exists");
                    let delta = self.down_extras[j].forward(src)?;
                    let dst = states[srow + 1].take().expect("destination row exists");
                    states[srow + 1] = Some(dst.add(&delta)?);
                }
                Step::UpMerge(j, srow) => {
                    let src = states[srow].as_ref().expect("source row exists");
                    let delta = self.up_extras[j].forward(src)?;
                    let dst = states[srow - 1].take().expect("destination row exists");
                    states[srow - 1] = Some(dst.add(&delta)?);
                }
                Step::UpClose(drow) => {
                    let src = states[drow + 1].as_ref().expect("source row exists");
                    let delta = self.up_closes[drow].forward(src)?;
                    let dst = states[drow].take().expect("destination row exists");
                    states[drow] = Some(dst.add(&delta)?);
                }
            }
        }

        let top = states[0].as_ref().expect("top row state");
        let out_pad = x_pad.add(&self.tail.forward(top)?)?;
        let out = if ph == h && pw == w {
            out_pad
        } else {
            out_pad.crop2d(0, 0, h, w)?
        };
        Ok((out, affinities))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.head.collect("msnl.head", &mut out);
        for (s, row) in self.rows.iter().enumerate() {
            for (t, sub) in row.iter().enumerate() {
                sub.collect(&format!("msnl.s{s}.nl{t}"), &mut out);
            }
        }
        for (i, d) in self.down_creates.iter().enumerate() {
            d.collect(&format!("msnl.down{i}"), &mut out);
        }
        for (i, d) in self.down_extras.iter().enumerate() {
            d.collect(&format!("msnl.downx{i}"), &mut out);
        }
        for (i, u) in self.up_closes.iter().enumerate() {
            u.collect(&format!("msnl.up{i}"), &mut out);
        }
        for (i, u) in self.up_extras.iter().enumerate() {
            u.collect(&format!("msnl.upx{i}"), &mut out);
        }
        self.tail.collect("msnl.tail", &mut out);
        out
    }
}
