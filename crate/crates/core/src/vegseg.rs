//! Unsupervised vegetation segmentation.
//!
//! A small convolutional network is trained per image, alternating between
//! label prediction (argmax of the channel-standardized response map, made
//! constant inside each superpixel) and a gradient step on the cross-entropy
//! between the responses and those labels. The loop ends once the image has
//! collapsed onto (essentially) two clusters; the smaller one is vegetation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::rgb_to_lab;
use crate::error::{Error, Result};
use crate::image::FieldImage;
use crate::nn::{self, ConvGeom, NormCache};
use crate::slic::{slic, SuperpixelMap};

/// Hidden-layer normalization epsilon.
const BN_EPS: f64 = 1e-5;
/// Response channels with variance below this are only centered.
pub const VARIANCE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    pub lr: f64,
    pub momentum: f64,
    pub max_iters: usize,
    /// Maximum number of clusters (response channels).
    pub q: usize,
    pub hidden_channels: usize,
    pub conv_layers: usize,
    /// Stop once the two largest clusters cover at least this fraction of pixels.
    pub top2_coverage: f64,
    pub n_superpixels: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    /// Learnable per-channel scale and shift after every normalization. Without
    /// it the standardized responses cap the logit range and the loop rarely
    /// collapses to two clusters.
    pub affine_norm: bool,
    pub seed: u64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            max_iters: 500,
            q: 100,
            hidden_channels: 100,
            conv_layers: 3,
            top2_coverage: 0.98,
            n_superpixels: 2500,
            compactness: 25.0,
            slic_iters: 10,
            affine_norm: true,
            seed: 0,
        }
    }
}

impl SegmentParams {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Parameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.q < 2 {
            return Err(Error::Parameter(format!("q must be >= 2, got {}", self.q)));
        }
        if self.max_iters == 0 || self.conv_layers == 0 || self.hidden_channels == 0 {
            return Err(Error::Parameter(
                "max_iters, conv_layers and hidden_channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Network output, `q` planes of `height x width`.
#[derive(Debug, Clone)]
pub struct ResponseMap {
    pub q: usize,
    pub width: usize,
    pub height: usize,
    /// Channel-standardized responses (zero mean, unit variance per channel).
    pub normalized: Vec<f32>,
    /// Per-channel affine transform of `normalized`; these are argmaxed and
    /// fed to the loss. Identical to `normalized` when `affine_norm` is off.
    pub responses: Vec<f32>,
    pub iteration: usize,
}

impl ResponseMap {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.responses[c * n..(c + 1) * n]
    }
}

struct Layer {
    cin: usize,
    cout: usize,
    kernel: usize,
    weight: Vec<f32>,
    grad: Vec<f32>,
    velocity: Vec<f32>,
    /// Per-channel scale and shift after normalization (hidden layers only).
    affine: Option<Affine>,
}

struct Affine {
    gamma: Vec<f32>,
    beta: Vec<f32>,
    dgamma: Vec<f32>,
    dbeta: Vec<f32>,
    vgamma: Vec<f32>,
    vbeta: Vec<f32>,
}

impl Affine {
    fn new(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            dgamma: vec![0.0; c],
            dbeta: vec![0.0; c],
            vgamma: vec![0.0; c],
            vbeta: vec![0.0; c],
        }
    }
}

impl Layer {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kernel: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        let len = cout * fan_in;
        Self {
            cin,
            cout,
            kernel,
            weight: nn::fan_in_uniform(rng, len, fan_in),
            grad: vec![0.0; len],
            velocity: vec![0.0; len],
            affine: None,
        }
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            batch: 1,
            in_h: h,
            in_w: w,
            kernel: self.kernel,
            stride: 1,
            pad: self.kernel / 2,
        }
    }
}

/// The per-image clustering network: `conv_layers` 3x3 conv/norm/ReLU blocks
/// followed by a 1x1 conv to `q` channels and a final channel standardization.
pub struct SegNet {
    layers: Vec<Layer>,
    width: usize,
    height: usize,
}

struct ForwardCache {
    /// Input of every conv layer.
    inputs: Vec<Vec<f32>>,
    /// Normalization caches for every layer (the last one is the response map).
    norms: Vec<NormCache>,
    /// Post-activation outputs of every layer.
    outputs: Vec<Vec<f32>>,
}

impl SegNet {
    pub fn new(params: &SegmentParams, width: usize, height: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut layers = Vec::with_capacity(params.conv_layers + 1);
        let mut cin = 3;
        for _ in 0..params.conv_layers {
            let mut l = Layer::new(&mut rng, cin, params.hidden_channels, 3);
            if params.affine_norm {
                l.affine = Some(Affine::new(params.hidden_channels));
            }
            layers.push(l);
            cin = params.hidden_channels;
        }
        let mut l = Layer::new(&mut rng, cin, params.q, 1);
        if params.affine_norm {
            l.affine = Some(Affine::new(params.q));
        }
        layers.push(l);
        Self {
            layers,
            width,
            height,
        }
    }

    fn response_map(&self, cache: &ForwardCache, iteration: usize) -> ResponseMap {
        ResponseMap {
            q: self.layers.last().map_or(0, |l| l.cout),
            width: self.width,
            height: self.height,
            normalized: cache.norms.last().expect("at least one layer").normalized.clone(),
            responses: cache.outputs.last().expect("at least one layer").clone(),
            iteration,
        }
    }

    /// Response map of the freshly initialized network for `image`.
    pub fn initial_responses(&self, image: &FieldImage) -> ResponseMap {
        let cache = self.forward(Self::input_tensor(image));
        self.response_map(&cache, 0)
    }

    fn input_tensor(image: &FieldImage) -> Vec<f32> {
        let n = image.len();
        let mut x = vec![0.0f32; 3 * n];
        for (i, p) in image.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                x[c * n + i] = p[c] as f32 / 255.0;
            }
        }
        x
    }

    fn forward(&self, input: Vec<f32>) -> ForwardCache {
        let (h, w) = (self.height, self.width);
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut norms = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for (li, layer) in self.layers.iter().enumerate() {
            let z = nn::conv_forward(&x, &layer.weight, layer.cin, layer.cout, &layer.geom(h, w));
            inputs.push(x);
            let norm = if li == last {
                nn::normalize_channels(&z, layer.cout, 0.0, VARIANCE_GUARD)
            } else {
                nn::normalize_channels(&z, layer.cout, BN_EPS, 0.0)
            };
            x = norm.normalized.clone();
            if let Some(a) = &layer.affine {
                let n = h * w;
                for c in 0..layer.cout {
                    for v in &mut x[c * n..(c + 1) * n] {
                        *v = a.gamma[c] * *v + a.beta[c];
                    }
                }
            }
            if li != last {
                nn::relu_inplace(&mut x);
            }
            outputs.push(x.clone());
            norms.push(norm);
        }
        ForwardCache { inputs, norms, outputs }
    }

    /// Backpropagates `dresponse` and applies one momentum-SGD step.
    fn backward_and_step(&mut self, cache: &ForwardCache, dresponse: &[f32], lr: f64, momentum: f64) {
        let (h, w) = (self.height, self.width);
        let mut grad = dresponse.to_vec();
        for li in (0..self.layers.len()).rev() {
            let norm = &cache.norms[li];
            if li != self.layers.len() - 1 {
                // ReLU mask
                for (g, &v) in grad.iter_mut().zip(&cache.outputs[li]) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let layer = &mut self.layers[li];
            if let Some(a) = &mut layer.affine {
                let n = h * w;
                for c in 0..layer.cout {
                    let g = &mut grad[c * n..(c + 1) * n];
                    let xh = &norm.normalized[c * n..(c + 1) * n];
                    a.dgamma[c] = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
                    a.dbeta[c] = g.iter().map(|&v| v as f64).sum::<f64>() as f32;
                    for v in g.iter_mut() {
                        *v *= a.gamma[c];
                    }
                }
            }
            let dz = nn::normalize_channels_backward(norm, &grad);
            layer.grad.fill(0.0);
            let geom = layer.geom(h, w);
            let dx = nn::conv_backward(
                &cache.inputs[li],
                &layer.weight,
                &dz,
                layer.cin,
                layer.cout,
                &geom,
                &mut layer.grad,
                li > 0,
            );
            if let Some(dx) = dx {
                grad = dx;
            }
        }
        let step = |w: &mut [f32], v: &mut [f32], g: &[f32]| {
            for ((wv, vv), gv) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = (momentum as f32) * *vv + *gv;
                *wv -= (lr as f32) * *vv;
            }
        };
        for layer in &mut self.layers {
            step(&mut layer.weight, &mut layer.velocity, &layer.grad);
            if let Some(a) = &mut layer.affine {
                step(&mut a.gamma, &mut a.vgamma, &a.dgamma);
                step(&mut a.beta, &mut a.vbeta, &a.dbeta);
            }
        }
    }
}

/// Result of the iterative clustering.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    /// Refined cluster label per pixel after top-2 consolidation.
    pub labels: Vec<u32>,
    pub iterations_used: usize,
    /// Cross-entropy against the refined labels, one entry per iteration.
    pub losses: Vec<f64>,
    /// Distinct refined clusters at the final iteration, before consolidation.
    pub clusters_before_consolidation: usize,
}

/// Per-pixel argmax over response channels (ties resolve to the lower channel).
pub fn argmax_labels(resp: &ResponseMap) -> Vec<u32> {
    let n = resp.width * resp.height;
    let mut best = vec![0u32; n];
    let mut best_val = resp.channel(0).to_vec();
    for c in 1..resp.q {
        for (i, &v) in resp.channel(c).iter().enumerate() {
            if v > best_val[i] {
                best_val[i] = v;
                best[i] = c as u32;
            }
        }
    }
    best
}

/// Makes labels constant within every superpixel by majority vote (ties to the lower label).
pub fn refine_by_superpixels(labels: &[u32], members: &[Vec<usize>], q: usize) -> Vec<u32> {
    let mut out = labels.to_vec();
    let mut counts = vec![0u32; q];
    for pixels in members {
        let mut top = (0u32, u32::MAX);
        for &i in pixels {
            let l = labels[i] as usize;
            counts[l] += 1;
        }
        for &i in pixels {
            let l = labels[i];
            let c = counts[l as usize];
            if c > top.0 || (c == top.0 && l < top.1) {
                top = (c, l);
            }
        }
        for &i in pixels {
            counts[labels[i] as usize] = 0;
            out[i] = top.1;
        }
    }
    out
}

/// Softmax cross-entropy (mean over pixels) and its gradient w.r.t. the responses.
fn cross_entropy(resp: &ResponseMap, target: &[u32]) -> (f64, Vec<f32>) {
    let n = target.len();
    let q = resp.q;
    let mut max = resp.channel(0).to_vec();
    for c in 1..q {
        for (m, &v) in max.iter_mut().zip(resp.channel(c)) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sum = vec![0.0f64; n];
    for c in 0..q {
        for ((s, &v), &m) in sum.iter_mut().zip(resp.channel(c)).zip(&max) {
            *s += ((v - m) as f64).exp();
        }
    }
    let mut loss = 0.0f64;
    for i in 0..n {
        let t = target[i] as usize;
        loss += sum[i].ln() + max[i] as f64 - resp.responses[t * n + i] as f64;
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0f32; q * n];
    for c in 0..q {
        let g = &mut grad[c * n..(c + 1) * n];
        for (i, gv) in g.iter_mut().enumerate() {
            let p = ((resp.responses[c * n + i] - max[i]) as f64).exp() / sum[i];
            let y = if target[i] as usize == c { 1.0 } else { 0.0 };
            *gv = ((p - y) * inv_n) as f32;
        }
    }
    (loss * inv_n, grad)
}

/// Cluster sizes sorted descending as `(label, count)`.
fn ranked_clusters(labels: &[u32], q: usize) -> Vec<(u32, usize)> {
    let mut counts = vec![0usize; q];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .map(|(l, c)| (l as u32, c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Iteratively clusters the image pixels; see the module docs.
///
/// Reaching `max_iters` is not an error: the current labels are returned with
/// `iterations_used == max_iters`.
pub fn segment_unsupervised(
    image: &FieldImage,
    superpixels: &SuperpixelMap,
    params: &SegmentParams,
) -> Result<Segmentation> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    if superpixels.width != w || superpixels.height != h {
        return Err(Error::dims(
            format!("{w}x{h} superpixel map"),
            format!("{}x{}", superpixels.width, superpixels.height),
        ));
    }
    let n = w * h;
    let members = superpixels.members();
    let mut net = SegNet::new(params, w, h);
    let input = SegNet::input_tensor(image);
    let mut losses = Vec::new();

    let mut iteration = 0;
    loop {
        iteration += 1;
        let cache = net.forward(input.clone());
        let resp = net.response_map(&cache, iteration);
        let provisional = argmax_labels(&resp);
        let target = refine_by_superpixels(&provisional, &members, params.q);
        let (loss, dresp) = cross_entropy(&resp, &target);
        if !loss.is_finite() {
            return Err(Error::Invariant(format!("non-finite loss at iteration {iteration}")));
        }
        losses.push(loss);

        let ranked = ranked_clusters(&target, params.q);
        let top2: usize = ranked.iter().take(2).map(|&(_, c)| c).sum();
        let done = ranked.len() <= 2
            || top2 as f64 >= params.top2_coverage * n as f64
            || iteration >= params.max_iters;
        log::debug!(
            "iteration {iteration}: loss {loss:.4}, {} clusters, top-2 coverage {:.4}",
            ranked.len(),
            top2 as f64 / n as f64
        );
        if done {
            let clusters_before_consolidation = ranked.len();
            let labels = consolidate_top2(&target, &resp, &ranked);
            return Ok(Segmentation {
                width: w,
                height: h,
                labels,
                iterations_used: iteration,
                losses,
                clusters_before_consolidation,
            });
        }
        net.backward_and_step(&cache, &dresp, params.lr, params.momentum);
    }
}

/// Reassigns pixels outside the two largest clusters to whichever of the two
/// has the larger normalized response at that pixel.
fn consolidate_top2(target: &[u32], resp: &ResponseMap, ranked: &[(u32, usize)]) -> Vec<u32> {
    if ranked.len() <= 2 {
        return target.to_vec();
    }
    let (a, b) = (ranked[0].0, ranked[1].0);
    let ra = resp.channel(a as usize);
    let rb = resp.channel(b as usize);
    target
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l == a || l == b {
                l
            } else if ra[i] >= rb[i] {
                a
            } else {
                b
            }
        })
        .collect()
}

/// Binary vegetation mask (1 = vegetation), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VegetationMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<u8>,
    pub vegetation_fraction: f64,
}

impl VegetationMask {
    pub fn new(width: usize, height: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::dims(width * height, mask.len()));
        }
        let mask: Vec<u8> = mask.into_iter().map(|m| u8::from(m != 0)).collect();
        let ones = mask.iter().filter(|&&m| m == 1).count();
        Ok(Self {
            width,
            height,
            vegetation_fraction: ones as f64 / (width * height) as f64,
            mask,
        })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x] == 1
    }
}

/// Picks the less populous of the two clusters as vegetation.
///
/// Equal sizes resolve to the cluster with the higher mean green intensity. A
/// single cluster means nothing was separated and yields an empty mask; more
/// than two clusters is an invariant violation.
pub fn select_vegetation(image: &FieldImage, cluster_labels: &[u32]) -> Result<VegetationMask> {
    let (w, h) = (image.width(), image.height());
    if cluster_labels.len() != w * h {
        return Err(Error::dims(w * h, cluster_labels.len()));
    }
    let mut ids: Vec<u32> = cluster_labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    match ids.len() {
        0 | 1 => VegetationMask::new(w, h, vec![0; w * h]),
        2 => {
            let mut count = [0usize; 2];
            let mut green = [0.0f64; 2];
            for (i, &l) in cluster_labels.iter().enumerate() {
                let k = usize::from(l == ids[1]);
                count[k] += 1;
                green[k] += image.pixels()[i * 3 + 1] as f64;
            }
            let veg = if count[0] != count[1] {
                if count[0] < count[1] {
                    ids[0]
                } else {
                    ids[1]
                }
            } else if green[1] > green[0] {
                // equal counts, so sums compare like means
                ids[1]
            } else {
                ids[0]
            };
            let mask = cluster_labels.iter().map(|&l| u8::from(l == veg)).collect();
            VegetationMask::new(w, h, mask)
        }
        k => Err(Error::Invariant(format!(
            "expected at most 2 clusters after consolidation, found {k}"
        ))),
    }
}

/// Sidecar record written next to a vegetation mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationRecord {
    pub source_id: String,
    pub iterations_used: usize,
    pub vegetation_fraction: f64,
    pub superpixel_count: usize,
    pub clusters_before_consolidation: usize,
    pub final_loss: f64,
    pub params: SegmentParams,
}

/// SLIC + iterative clustering + smaller-cluster selection on an already
/// preprocessed image.
pub fn segment_vegetation(
    image: &FieldImage,
    params: &SegmentParams,
) -> Result<(VegetationMask, SegmentationRecord)> {
    let lab = rgb_to_lab(image);
    let sp = slic(&lab, params.n_superpixels, params.compactness, params.slic_iters)?;
    let seg = segment_unsupervised(image, &sp, params)?;
    let mask = select_vegetation(image, &seg.labels)?;
    let record = SegmentationRecord {
        source_id: image.source_id.clone(),
        iterations_used: seg.iterations_used,
        vegetation_fraction: mask.vegetation_fraction,
        superpixel_count: sp.count,
        clusters_before_consolidation: seg.clusters_before_consolidation,
        final_loss: seg.losses.last().copied().unwrap_or(f64::NAN),
        params: params.clone(),
    };
    Ok((mask, record))
}
