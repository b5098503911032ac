use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layout, SfcnSpec, UPSAMPLING_LAYERS};
use crate::error::{Error, Result};
use crate::geometry::Patch;
use crate::patchsearch::SampleInput;
use crate::tensornn::{
    batchnorm_backward, batchnorm_forward, concat_channels, conv3d_backward, conv3d_forward,
    crop_spatial, deconv3d_backward, deconv3d_forward, dropout_backward, dropout_forward, fan_in,
    init_uniform, maxpool3d_backward, maxpool3d_forward, relu_backward, relu_forward,
    softmax_channels, split_channels, uncrop_spatial, update_running_stats, BatchNormCache,
    BatchNormState, ConvParams, Mode, PoolOutput, Tensor5,
};

/// Batched network input: the target patch and one image/label pair per atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    /// `(n, 1, d, h, w)`.
    pub target: Tensor5,
    /// `K` tensors of shape `(n, 2, d, h, w)`.
    pub atlases: Vec<Tensor5>,
}

fn patch_spatial(p: &Patch) -> [usize; 3] {
    [p.size[2], p.size[1], p.size[0]]
}

/// Stacks samples into a batch. All samples must share size and `K`.
pub fn stage_inputs(samples: &[&SampleInput]) -> Result<NetInput> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput("no samples to stage".into()))?;
    let [d, h, w] = patch_spatial(&first.x);
    let k = first.k();
    let n = samples.len();
    let vol = d * h * w;
    let mut target = Vec::with_capacity(n * vol);
    let mut atlases: Vec<Vec<f64>> = vec![Vec::with_capacity(2 * n * vol); k];
    for s in samples {
        if s.x.size != first.x.size || s.k() != k {
            return Err(Error::ShapeMismatch("samples in a batch differ in shape".into()));
        }
        target.extend(s.x.data.iter().map(|&v| v as f64));
        for (a, buf) in atlases.iter_mut().enumerate() {
            let (img, lab) = (&s.atlas_images[a], &s.atlas_labels[a]);
            if img.size != s.x.size || lab.size != s.x.size {
                return Err(Error::ShapeMismatch("atlas patch size differs from target".into()));
            }
            buf.extend(img.data.iter().map(|&v| v as f64));
            buf.extend(lab.data.iter().map(|&v| v as f64));
        }
    }
    Ok(NetInput {
        target: Tensor5::new([n, 1, d, h, w], target)?,
        atlases: atlases
            .into_iter()
            .map(|buf| Tensor5::new([n, 2, d, h, w], buf))
            .collect::<Result<_>>()?,
    })
}

/// Stacks binary label patches into an `(n, 1, d, h, w)` target.
pub fn stage_targets(labels: &[&Patch]) -> Result<Tensor5> {
    let first = labels
        .first()
        .ok_or_else(|| Error::EmptyInput("no targets to stage".into()))?;
    let [d, h, w] = patch_spatial(first);
    let mut data = Vec::with_capacity(labels.len() * d * h * w);
    for p in labels {
        if p.size != first.size {
            return Err(Error::ShapeMismatch("targets in a batch differ in shape".into()));
        }
        data.extend(p.data.iter().map(|&v| v as f64));
    }
    Tensor5::new([labels.len(), 1, d, h, w], data)
}

/// Convolution, batch normalization and ReLU.
#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    conv: ConvParams,
    bn: BatchNormState,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let mut conv = ConvParams::zeros(c_out, c_in, [3, 3, 3], 1, [1, 1, 1]);
        conv.weight = init_uniform(conv.weight.len(), fan_in(&conv, false), rng);
        ConvBlock {
            conv,
            bn: BatchNormState::new(c_out),
        }
    }

    fn forward(&self, x: &Tensor5, mode: Mode) -> Result<(Tensor5, BlockCache)> {
        let z = conv3d_forward(x, &self.conv)?;
        let (z, bn) = batchnorm_forward(&z, &self.bn, mode)?;
        let y = relu_forward(&z);
        Ok((
            y.clone(),
            BlockCache {
                input: x.clone(),
                bn,
                output: y,
            },
        ))
    }

    /// Returns the input gradient; parameter gradients go into `slots`.
    fn backward(&self, cache: &BlockCache, grad: &Tensor5, slots: &mut [Vec<f64>]) -> Result<Tensor5> {
        let g = relu_backward(&cache.output, grad)?;
        let bn = batchnorm_backward(&cache.bn, &self.bn, &g)?;
        let cg = conv3d_backward(&cache.input, &self.conv, &bn.input)?;
        slots[0] = cg.weight;
        slots[1] = cg.bias;
        slots[2] = bn.gamma;
        slots[3] = bn.beta;
        Ok(cg.input)
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor5,
    bn: BatchNormCache,
    output: Tensor5,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    input: Tensor5,
    activated: Tensor5,
    mask: Option<Vec<f64>>,
    /// Spatial extent before cropping to the skip.
    uncropped: [usize; 3],
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    branch_blocks: Vec<[BlockCache; 2]>,
    branch_pools: Vec<PoolOutput>,
    encoder: Vec<BlockCache>,
    encoder_pools: Vec<PoolOutput>,
    decoder: Vec<DecoderCache>,
}

/// Parameter gradients in [`Sfcn::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct Sfcn {
    spec: SfcnSpec,
    layout: Layout,
    branches: Vec<[ConvBlock; 2]>,
    encoder: Vec<ConvBlock>,
    decoder: Vec<ConvParams>,
}

const BLOCK_SLOTS: usize = 4;

impl Sfcn {
    /// Builds a freshly initialized network.
    pub fn new<R: Rng + ?Sized>(spec: SfcnSpec, rng: &mut R) -> Result<Self> {
        let layout = spec.layout()?;
        let [b1, b2] = layout.branch;
        let branches = (0..=spec.k)
            .map(|b| {
                let c_in = if b == 0 { 1 } else { 2 };
                let first = ConvBlock::new(c_in, b1, rng);
                [first, ConvBlock::new(b1, b2, rng)]
            })
            .collect();
        let mut encoder = Vec::with_capacity(7);
        let mut c_in = layout.trunk_in;
        for &c_out in &layout.encoder {
            encoder.push(ConvBlock::new(c_in, c_out, rng));
            c_in = c_out;
        }
        let decoder = (0..10)
            .map(|l| {
                let (k, s, p) = if UPSAMPLING_LAYERS.contains(&l) {
                    ([2, 2, 2], 2, [0, 0, 0])
                } else {
                    ([3, 3, 3], 1, [1, 1, 1])
                };
                let mut t = ConvParams::zeros_transposed(layout.decoder_in[l], layout.decoder_out[l], k, s, p);
                t.weight = init_uniform(t.weight.len(), fan_in(&t, true), rng);
                t
            })
            .collect();
        Ok(Sfcn {
            spec,
            layout,
            branches,
            encoder,
            decoder,
        })
    }

    pub fn spec(&self) -> &SfcnSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Conv layers in the branches and encoder plus decoder layers.
    pub fn layer_count(&self) -> usize {
        2 * self.branches.len() + self.encoder.len() + self.decoder.len()
    }

    /// Every trainable tensor: per block weight, bias, gamma, beta; per
    /// decoder layer weight, bias.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for block in self.branches.iter().flatten().chain(&self.encoder) {
            out.extend([
                &block.conv.weight[..],
                &block.conv.bias[..],
                &block.bn.gamma[..],
                &block.bn.beta[..],
            ]);
        }
        for d in &self.decoder {
            out.extend([&d.weight[..], &d.bias[..]]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for block in self.branches.iter_mut().flatten().chain(self.encoder.iter_mut()) {
            out.push(&mut block.conv.weight);
            out.push(&mut block.conv.bias);
            out.push(&mut block.bn.gamma);
            out.push(&mut block.bn.beta);
        }
        for d in &mut self.decoder {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn batch_norms(&self) -> impl Iterator<Item = &BatchNormState> {
        self.branches.iter().flatten().chain(&self.encoder).map(|b| &b.bn)
    }

    /// Trainable parameters followed by batch-norm running statistics.
    pub fn state_vector(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.params().concat();
        for bn in self.batch_norms() {
            out.extend_from_slice(&bn.running_mean);
            out.extend_from_slice(&bn.running_var);
        }
        out
    }

    pub fn state_len(&self) -> usize {
        self.parameter_count() + self.batch_norms().map(|bn| 2 * bn.channels()).sum::<usize>()
    }

    /// Inverse of [`Sfcn::state_vector`] for a network of the same spec.
    pub fn load_state_vector(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_len() {
            return Err(Error::ShapeMismatch(format!(
                "state of {} values for a network of {}",
                state.len(),
                self.state_len()
            )));
        }
        let mut rest = state;
        for p in self.params_mut() {
            let (head, tail) = rest.split_at(p.len());
            p.copy_from_slice(head);
            rest = tail;
        }
        for block in self.branches.iter_mut().flatten().chain(self.encoder.iter_mut()) {
            let c = block.bn.channels();
            block.bn.running_mean.copy_from_slice(&rest[..c]);
            block.bn.running_var.copy_from_slice(&rest[c..2 * c]);
            rest = &rest[2 * c..];
        }
        Ok(())
    }

    fn check_input(&self, input: &NetInput) -> Result<()> {
        let n = input.target.batch();
        let [d, h, w] = self.spec.spatial();
        input.target.expect_shape([n, 1, d, h, w], "target branch input")?;
        if input.atlases.len() != self.spec.k {
            return Err(Error::ShapeMismatch(format!(
                "{} atlas inputs for K = {}",
                input.atlases.len(),
                self.spec.k
            )));
        }
        for a in &input.atlases {
            a.expect_shape([n, 2, d, h, w], "atlas branch input")?;
        }
        Ok(())
    }

    /// Returns softmax probabilities `(n, 2, d, h, w)` and the backward cache.
    /// The rng drives dropout and is untouched in eval mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &NetInput,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor5, ForwardCache)> {
        self.check_input(input)?;
        let mut branch_blocks = Vec::with_capacity(self.branches.len());
        let mut branch_pools = Vec::with_capacity(self.branches.len());
        for (b, blocks) in self.branches.iter().enumerate() {
            let x = if b == 0 { &input.target } else { &input.atlases[b - 1] };
            let (h1, c1) = blocks[0].forward(x, mode)?;
            let (h2, c2) = blocks[1].forward(&h1, mode)?;
            branch_pools.push(maxpool3d_forward(&h2));
            branch_blocks.push([c1, c2]);
        }
        let pooled: Vec<&Tensor5> = branch_pools.iter().map(|p| &p.output).collect();
        let mut h = concat_channels(&pooled)?;

        let mut encoder = Vec::with_capacity(7);
        let mut encoder_pools = Vec::with_capacity(2);
        for (i, block) in self.encoder.iter().enumerate() {
            let (out, cache) = block.forward(&h, mode)?;
            encoder.push(cache);
            h = if i == 2 || i == 5 {
                let pool = maxpool3d_forward(&out);
                let next = pool.output.clone();
                encoder_pools.push(pool);
                next
            } else {
                out
            };
        }

        let skips = [
            &encoder[5].output,
            &encoder[2].output,
            &branch_blocks[0][1].output,
        ];
        let mut decoder = Vec::with_capacity(10);
        for (l, params) in self.decoder.iter().enumerate() {
            let z = deconv3d_forward(&h, params)?;
            if l == 9 {
                decoder.push(DecoderCache {
                    input: std::mem::replace(&mut h, z),
                    activated: Tensor5::zeros([1; 5]),
                    mask: None,
                    uncropped: [0; 3],
                });
                break;
            }
            let activated = relu_forward(&z);
            let (dropped, mask) = dropout_forward(&activated, self.spec.dropout, rng, mode)?;
            let uncropped = dropped.spatial();
            let next = match UPSAMPLING_LAYERS.iter().position(|&u| u == l) {
                Some(s) => {
                    let skip = skips[s];
                    let cropped = crop_spatial(&dropped, skip.spatial())?;
                    concat_channels(&[&cropped, skip])?
                }
                None => dropped,
            };
            decoder.push(DecoderCache {
                input: std::mem::replace(&mut h, next),
                activated,
                mask,
                uncropped,
            });
        }
        let probabilities = softmax_channels(&h);
        Ok((
            probabilities,
            ForwardCache {
                mode,
                branch_blocks,
                branch_pools,
                encoder,
                encoder_pools,
                decoder,
            },
        ))
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, input: &NetInput) -> Result<Tensor5> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(input, Mode::Eval, &mut unused)?.0)
    }

    /// Foreground probability of one sample, in patch (x-fastest) order.
    pub fn predict_foreground(&self, sample: &SampleInput) -> Result<Vec<f64>> {
        let p = self.predict(&stage_inputs(&[sample])?)?;
        Ok(p.channel(0, 1).to_vec())
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// batch-norm statistics.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let caches = cache.branch_blocks.iter().flatten().chain(&cache.encoder);
        let blocks = self.branches.iter_mut().flatten().chain(self.encoder.iter_mut());
        for (block, c) in blocks.zip(caches) {
            update_running_stats(&mut block.bn, &c.bn);
        }
    }

    /// Backpropagates the gradient with respect to the pre-softmax logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor5) -> Result<Gradients> {
        let n_blocks = 2 * self.branches.len() + self.encoder.len();
        let mut slots = vec![Vec::new(); BLOCK_SLOTS * n_blocks + 2 * self.decoder.len()];
        let decoder_base = BLOCK_SLOTS * n_blocks;
        let mut skip_grads: [Option<Tensor5>; 3] = [None, None, None];

        let mut g = grad_logits.clone();
        for l in (0..self.decoder.len()).rev() {
            let dc = &cache.decoder[l];
            if l != 9 {
                if let Some(s) = UPSAMPLING_LAYERS.iter().position(|&u| u == l) {
                    let parts = split_channels(&g, &[self.layout.decoder_out[l], self.layout.skips[s]])?;
                    let [main, skip]: [Tensor5; 2] = parts.try_into().expect("two parts");
                    skip_grads[s] = Some(skip);
                    g = uncrop_spatial(&main, dc.uncropped)?;
                }
                g = dropout_backward(dc.mask.as_deref(), &g)?;
                g = relu_backward(&dc.activated, &g)?;
            }
            let cg = deconv3d_backward(&dc.input, &self.decoder[l], &g)?;
            slots[decoder_base + 2 * l] = cg.weight;
            slots[decoder_base + 2 * l + 1] = cg.bias;
            g = cg.input;
        }

        let enc_base = 2 * self.branches.len();
        for i in (0..self.encoder.len()).rev() {
            if i == 5 || i == 2 {
                let (pool, skip) = if i == 5 { (1, 0) } else { (0, 1) };
                g = maxpool3d_backward(&cache.encoder_pools[pool], &g)?;
                add_assign(&mut g, skip_grads[skip].as_ref().expect("skip gradient"))?;
            }
            let base = BLOCK_SLOTS * (enc_base + i);
            g = self.encoder[i].backward(&cache.encoder[i], &g, &mut slots[base..base + BLOCK_SLOTS])?;
        }

        let widths = vec![self.layout.branch[1]; self.branches.len()];
        let per_branch = split_channels(&g, &widths)?;
        for (b, gb) in per_branch.into_iter().enumerate() {
            let mut gb = maxpool3d_backward(&cache.branch_pools[b], &gb)?;
            if b == 0 {
                add_assign(&mut gb, skip_grads[2].as_ref().expect("skip gradient"))?;
            }
            let blocks = &self.branches[b];
            let caches = &cache.branch_blocks[b];
            let base = BLOCK_SLOTS * 2 * b;
            let gb = blocks[1].backward(&caches[1], &gb, &mut slots[base + BLOCK_SLOTS..base + 2 * BLOCK_SLOTS])?;
            blocks[0].backward(&caches[0], &gb, &mut slots[base..base + BLOCK_SLOTS])?;
        }
        Ok(Gradients(slots))
    }
}

fn add_assign(into: &mut Tensor5, other: &Tensor5) -> Result<()> {
    other.expect_shape(into.shape(), "gradient accumulation")?;
    for (a, b) in into.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
    Ok(())
}
