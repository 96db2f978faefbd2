//! Frozen ViT-style encoder with per-type parallel bottleneck adapters on the
//! feed-forward sublayer, and hand-derived backward pass for the trainable
//! parts (adapters and the option head).

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{trainable_param_formula, EncoderConfig, NUM_OPTIONS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{QuestionType, TypeList};

/// `[channels, height, width]`, values roughly in [0, 1].
pub type Image = Array3<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-bound, bound))
}

/// LeCun-style bound: variance `1 / fan_in`.
fn bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    /// Returns `(output, normalized input, reciprocal std per row)`.
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, xhat, rstd)
    }

    fn backward(&self, dy: &Array2<f64>, xhat: &Array2<f64>, rstd: &Array1<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(xhat.rows())
            .and(rstd)
            .for_each(|mut out, g, xh, &r| {
                let mean_g = g.sum() / d;
                let mean_gx = g.dot(&xh) / d;
                Zip::from(&mut out)
                    .and(&g)
                    .and(&xh)
                    .for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
            });
        dx
    }
}

/// Frozen parameters of one transformer block. Matrices act on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2: LayerNorm,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<Block>,
    /// Applied to every token before pooling.
    pub ln_final: LayerNorm,
}

/// `s * U gelu(D x + b_D) + b_U`, applied token-wise. `down` is `r x d`,
/// `up` is `d x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub down: Array2<f64>,
    pub down_b: Array1<f64>,
    pub up: Array2<f64>,
    pub up_b: Array1<f64>,
}

impl Adapter {
    fn zeros(d: usize, r: usize) -> Self {
        Self {
            down: Array2::zeros((r, d)),
            down_b: Array1::zeros(r),
            up: Array2::zeros((d, r)),
            up_b: Array1::zeros(d),
        }
    }

    fn add_assign(&mut self, other: &Adapter) {
        self.down += &other.down;
        self.down_b += &other.down_b;
        self.up += &other.up;
        self.up_b += &other.up_b;
    }

    fn scaled_add(&mut self, alpha: f64, other: &Adapter) {
        self.down.scaled_add(alpha, &other.down);
        self.down_b.scaled_add(alpha, &other.down_b);
        self.up.scaled_add(alpha, &other.up);
        self.up_b.scaled_add(alpha, &other.up_b);
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("down", self.down.as_slice().expect("standard layout")),
            ("down_b", self.down_b.as_slice().expect("standard layout")),
            ("up", self.up.as_slice().expect("standard layout")),
            ("up_b", self.up_b.as_slice().expect("standard layout")),
        ]
    }

    /// Element `k` of tensor `tensor` in [`Adapter::tensors`] order.
    pub fn param_mut(&mut self, tensor: usize, k: usize) -> &mut f64 {
        let slice = match tensor {
            0 => self.down.as_slice_mut(),
            1 => self.down_b.as_slice_mut(),
            2 => self.up.as_slice_mut(),
            _ => self.up_b.as_slice_mut(),
        };
        &mut slice.expect("standard layout")[k]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("down", self.down.as_slice_mut().expect("standard layout")),
            ("down_b", self.down_b.as_slice_mut().expect("standard layout")),
            ("up", self.up.as_slice_mut().expect("standard layout")),
            ("up_b", self.up_b.as_slice_mut().expect("standard layout")),
        ]
    }
}

/// Linear 5-way option head over mean-pooled tokens; `w` is `5 x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Head {
    fn zeros(d: usize) -> Self {
        Self {
            w: Array2::zeros((NUM_OPTIONS, d)),
            b: Array1::zeros(NUM_OPTIONS),
        }
    }
}

/// One labeled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub qtype: QuestionType,
    pub target: usize,
}

/// Gradients of the trainable parameters. Adapters appear only for the
/// question types present in the batch, keyed by type index.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub head: Head,
    pub adapters: BTreeMap<usize, Vec<Adapter>>,
}

impl Gradients {
    fn zeros(d: usize) -> Self {
        Self {
            head: Head::zeros(d),
            adapters: BTreeMap::new(),
        }
    }

    fn accumulate(&mut self, other: &Gradients) {
        self.head.w += &other.head.w;
        self.head.b += &other.head.b;
        for (t, layers) in &other.adapters {
            match self.adapters.get_mut(t) {
                Some(mine) => mine.iter_mut().zip(layers).for_each(|(a, b)| a.add_assign(b)),
                None => {
                    self.adapters.insert(*t, layers.clone());
                }
            }
        }
    }

    fn scale(&mut self, c: f64) {
        self.head.w *= c;
        self.head.b *= c;
        for layers in self.adapters.values_mut() {
            for a in layers {
                a.down *= c;
                a.down_b *= c;
                a.up *= c;
                a.up_b *= c;
            }
        }
    }
}

struct LayerCache {
    xhat1: Array2<f64>,
    rstd1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    xhat2: Array2<f64>,
    rstd2: Array1<f64>,
    n2: Array2<f64>,
    z1: Array2<f64>,
    ad_pre: Option<Array2<f64>>,
    ad_act: Option<Array2<f64>>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    xhat_f: Array2<f64>,
    rstd_f: Array1<f64>,
    pooled: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedEncoder {
    config: EncoderConfig,
    types: TypeList,
    backbone: Backbone,
    /// `adapters[layer][type]`.
    adapters: Vec<Vec<Adapter>>,
    head: Head,
}

impl AdaptedEncoder {
    /// Random frozen backbone; adapters with random down-projections and
    /// exactly-zero up-projections and biases; random head.
    pub fn init(config: &EncoderConfig, types: &TypeList, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let (d, f, n, p) = (
            config.width,
            config.hidden(),
            config.num_tokens(),
            config.patch_dim(),
        );

        let patch_w = uniform_matrix(&mut rng, p, d, bound(p));
        let pos = uniform_matrix(&mut rng, n, d, bound(d));
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: uniform_matrix(&mut rng, d, d, bound(d)),
                bq: Array1::zeros(d),
                wk: uniform_matrix(&mut rng, d, d, bound(d)),
                bk: Array1::zeros(d),
                wv: uniform_matrix(&mut rng, d, d, bound(d)),
                bv: Array1::zeros(d),
                wo: uniform_matrix(&mut rng, d, d, bound(d)),
                bo: Array1::zeros(d),
                ln2: LayerNorm::new(d),
                w1: uniform_matrix(&mut rng, d, f, bound(d)),
                b1: Array1::zeros(f),
                w2: uniform_matrix(&mut rng, f, d, bound(f)),
                b2: Array1::zeros(d),
            })
            .collect();
        let backbone = Backbone {
            patch_w,
            patch_b: Array1::zeros(d),
            pos,
            blocks,
            ln_final: LayerNorm::new(d),
        };

        let r = config.bottleneck;
        let adapters = (0..config.layers)
            .map(|_| {
                (0..types.len())
                    .map(|_| Adapter {
                        down: uniform_matrix(&mut rng, r, d, bound(d)),
                        ..Adapter::zeros(d, r)
                    })
                    .collect()
            })
            .collect();
        let head = Head {
            w: uniform_matrix(&mut rng, NUM_OPTIONS, d, bound(d)),
            b: Array1::zeros(NUM_OPTIONS),
        };

        Ok(Self {
            config: config.clone(),
            types: types.clone(),
            backbone,
            adapters,
            head,
        })
    }

    pub(crate) fn from_parts(
        config: EncoderConfig,
        types: TypeList,
        backbone: Backbone,
        adapters: Vec<Vec<Adapter>>,
        head: Head,
    ) -> Self {
        Self {
            config,
            types,
            backbone,
            adapters,
            head,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn types(&self) -> &TypeList {
        &self.types
    }

    /// Read-only: nothing in the crate updates backbone parameters.
    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn num_adapters(&self) -> usize {
        self.adapters.iter().map(Vec::len).sum()
    }

    pub fn adapter(&self, layer: usize, type_index: usize) -> &Adapter {
        &self.adapters[layer][type_index]
    }

    pub fn adapter_mut(&mut self, layer: usize, type_index: usize) -> &mut Adapter {
        &mut self.adapters[layer][type_index]
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    /// Resets every adapter to the zero-contribution state (up-projection
    /// and biases zero), keeping the down-projections.
    pub fn zero_adapter_outputs(&mut self) {
        for a in self.adapters.iter_mut().flatten() {
            a.up.fill(0.0);
            a.up_b.fill(0.0);
            a.down_b.fill(0.0);
        }
    }

    /// Adapter and head parameter count, by walking the tensors.
    pub fn count_trainable_params(&self) -> usize {
        let adapters: usize = self
            .adapters
            .iter()
            .flatten()
            .map(|a| a.tensors().iter().map(|(_, t)| t.len()).sum::<usize>())
            .sum();
        adapters + self.head.w.len() + self.head.b.len()
    }

    pub fn expected_trainable_params(&self) -> usize {
        trainable_param_formula(
            self.config.layers,
            self.types.len(),
            self.config.width,
            self.config.bottleneck,
        )
    }

    /// Named backbone tensors in a fixed order.
    pub fn backbone_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn t<D: ndarray::Dimension>(
            name: String,
            a: &ndarray::Array<f64, D>,
        ) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let bb = &self.backbone;
        let mut out = vec![
            t("patch_w".into(), &bb.patch_w),
            t("patch_b".into(), &bb.patch_b),
            t("pos".into(), &bb.pos),
        ];
        for (l, b) in bb.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                t(p("ln1.gamma"), &b.ln1.gamma),
                t(p("ln1.beta"), &b.ln1.beta),
                t(p("wq"), &b.wq),
                t(p("bq"), &b.bq),
                t(p("wk"), &b.wk),
                t(p("bk"), &b.bk),
                t(p("wv"), &b.wv),
                t(p("bv"), &b.bv),
                t(p("wo"), &b.wo),
                t(p("bo"), &b.bo),
                t(p("ln2.gamma"), &b.ln2.gamma),
                t(p("ln2.beta"), &b.ln2.beta),
                t(p("w1"), &b.w1),
                t(p("b1"), &b.b1),
                t(p("w2"), &b.w2),
                t(p("b2"), &b.b2),
            ]);
        }
        out.push(t("ln_final.gamma".into(), &bb.ln_final.gamma));
        out.push(t("ln_final.beta".into(), &bb.ln_final.beta));
        out
    }

    /// SHA-256 over backbone tensor names, shapes and little-endian values.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, data) in self.backbone_tensors() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn type_index(&self, qtype: &QuestionType) -> Result<usize> {
        self.types.index_of(qtype.name()).ok_or_else(|| {
            Error::invalid(
                "question type",
                format!("`{qtype}` has no adapter in this encoder"),
            )
        })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        let want = [c.channels, c.image_size, c.image_size];
        if image.shape() != want {
            return Err(Error::invalid(
                "image",
                format!("shape {:?}, encoder expects {:?}", image.shape(), want),
            ));
        }
        Ok(())
    }

    /// Token rows `gy * grid + gx`; features `c * p * p + py * p + px`.
    fn patchify(&self, image: &Image) -> Array2<f64> {
        let c = &self.config;
        let (p, g) = (c.patch_size, c.grid());
        let mut out = Array2::zeros((c.num_tokens(), c.patch_dim()));
        for gy in 0..g {
            for gx in 0..g {
                let mut row = out.row_mut(gy * g + gx);
                let mut k = 0;
                for ch in 0..c.channels {
                    for py in 0..p {
                        for px in 0..p {
                            row[k] = image[[ch, gy * p + py, gx * p + px]];
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn forward_cached(&self, image: &Image, route: Option<usize>) -> (Array1<f64>, ForwardCache) {
        let cfg = &self.config;
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let bb = &self.backbone;

        let mut x = self.patchify(image).dot(&bb.patch_w) + &bb.patch_b + &bb.pos;
        let mut caches = Vec::with_capacity(bb.blocks.len());

        for (l, blk) in bb.blocks.iter().enumerate() {
            let (n1, xhat1, rstd1) = blk.ln1.forward(&x);
            let q = n1.dot(&blk.wq) + &blk.bq;
            let k = n1.dot(&blk.wk) + &blk.bk;
            let v = n1.dot(&blk.wv) + &blk.bv;
            let mut o = Array2::zeros(x.raw_dim());
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t());
                sc *= scale;
                softmax_rows(&mut sc);
                o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let hres = &x + &(o.dot(&blk.wo) + &blk.bo);

            let (n2, xhat2, rstd2) = blk.ln2.forward(&hres);
            let z1 = n2.dot(&blk.w1) + &blk.b1;
            let ffn = z1.mapv(gelu).dot(&blk.w2) + &blk.b2;
            let mut next = hres + ffn;

            let (ad_pre, ad_act) = match route {
                Some(t) => {
                    let ad = &self.adapters[l][t];
                    let pre = n2.dot(&ad.down.t()) + &ad.down_b;
                    let act = pre.mapv(gelu);
                    let mut out = act.dot(&ad.up.t());
                    out *= cfg.adapter_scale;
                    out += &ad.up_b;
                    next += &out;
                    (Some(pre), Some(act))
                }
                None => (None, None),
            };

            caches.push(LayerCache {
                xhat1,
                rstd1,
                q,
                k,
                v,
                probs,
                xhat2,
                rstd2,
                n2,
                z1,
                ad_pre,
                ad_act,
            });
            x = next;
        }

        let (xf, xhat_f, rstd_f) = bb.ln_final.forward(&x);
        let pooled = xf.mean_axis(Axis(0)).expect("at least one token");
        let logits = self.head.w.dot(&pooled) + &self.head.b;
        (
            logits,
            ForwardCache {
                layers: caches,
                xhat_f,
                rstd_f,
                pooled,
            },
        )
    }

    /// Type-routed forward pass: only the adapter of `qtype` participates.
    pub fn forward(&self, image: &Image, qtype: &QuestionType) -> Result<[f64; NUM_OPTIONS]> {
        self.check_image(image)?;
        let t = self.type_index(qtype)?;
        Ok(to_logit_array(&self.forward_cached(image, Some(t)).0))
    }

    /// Forward pass through the frozen backbone and head with no adapter.
    pub fn forward_backbone(&self, image: &Image) -> Result<[f64; NUM_OPTIONS]> {
        self.check_image(image)?;
        Ok(to_logit_array(&self.forward_cached(image, None).0))
    }

    /// Backpropagates `dlogits` to the head and, when `route` is set, to that
    /// type's adapters. Backbone weights get no gradient; activations are
    /// differentiated only as far down as the first block's output.
    fn backward(&self, cache: &ForwardCache, dlogits: &Array1<f64>, route: Option<usize>) -> Gradients {
        let cfg = &self.config;
        let d = cfg.width;
        let mut grads = Gradients::zeros(d);
        grads.head.w = outer(dlogits, &cache.pooled);
        grads.head.b = dlogits.clone();

        let Some(t) = route else {
            return grads;
        };

        let n_tok = cfg.num_tokens();
        let dpooled = self.head.w.t().dot(dlogits) / n_tok as f64;
        let dxf = Array2::from_shape_fn((n_tok, d), |(_, j)| dpooled[j]);
        let mut g = self
            .backbone
            .ln_final
            .backward(&dxf, &cache.xhat_f, &cache.rstd_f);

        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layer_grads: Vec<Adapter> = Vec::with_capacity(cfg.layers);

        for (l, (blk, lc)) in self.backbone.blocks.iter().zip(&cache.layers).enumerate().rev() {
            let ad = &self.adapters[l][t];
            let pre = lc.ad_pre.as_ref().expect("routed forward caches adapter input");
            let act = lc.ad_act.as_ref().expect("routed forward caches adapter input");

            // adapter branch
            let s_g = &g * cfg.adapter_scale;
            let mut ag = Adapter::zeros(d, cfg.bottleneck);
            ag.up_b = g.sum_axis(Axis(0));
            ag.up = s_g.t().dot(act);
            let mut d_pre = s_g.dot(&ad.up);
            Zip::from(&mut d_pre)
                .and(pre)
                .for_each(|dp, &x| *dp *= gelu_grad(x));
            ag.down = d_pre.t().dot(&lc.n2);
            ag.down_b = d_pre.sum_axis(Axis(0));
            layer_grads.push(ag);

            if l == 0 {
                break;
            }

            // feed-forward branch, then LN2
            let mut dz1 = g.dot(&blk.w2.t());
            Zip::from(&mut dz1)
                .and(&lc.z1)
                .for_each(|dz, &z| *dz *= gelu_grad(z));
            let dn2 = dz1.dot(&blk.w1.t()) + d_pre.dot(&ad.down);
            let dh_res = &g + &blk.ln2.backward(&dn2, &lc.xhat2, &lc.rstd2);

            // attention, then LN1
            let d_o = dh_res.dot(&blk.wo.t());
            let mut dq = Array2::zeros((n_tok, d));
            let mut dk = Array2::zeros((n_tok, d));
            let mut dv = Array2::zeros((n_tok, d));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let a = &lc.probs[h];
                let d_oh = d_o.slice(cols);
                let da = d_oh.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&d_oh));
                let ds = softmax_backward(a, &da) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let dn1 = dq.dot(&blk.wq.t()) + dk.dot(&blk.wk.t()) + dv.dot(&blk.wv.t());
            g = dh_res + blk.ln1.backward(&dn1, &lc.xhat1, &lc.rstd1);
        }

        layer_grads.reverse();
        grads.adapters.insert(t, layer_grads);
        grads
    }

    /// Mean 5-way cross-entropy over the batch and its gradients. With
    /// `with_adapters == false` the forward skips adapters and only the head
    /// gets a gradient.
    pub fn loss_and_grads_with(&self, batch: &[&Sample], with_adapters: bool) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for s in batch {
            self.check_image(&s.image)?;
            if s.target >= NUM_OPTIONS {
                return Err(Error::invalid("target", format!("{} not in 0..5", s.target)));
            }
        }
        let routes: Vec<Option<usize>> = batch
            .iter()
            .map(|s| {
                if with_adapters {
                    self.type_index(&s.qtype).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;

        let per_sample: Vec<(f64, Gradients)> = batch
            .par_iter()
            .zip(routes.par_iter())
            .map(|(s, &route)| {
                let (logits, cache) = self.forward_cached(&s.image, route);
                let (loss, dlogits) = cross_entropy(&logits, s.target);
                (loss, self.backward(&cache, &dlogits, route))
            })
            .collect();

        // fixed-order reduction keeps results independent of thread count
        let mut total = 0.0;
        let mut grads = Gradients::zeros(self.config.width);
        for (loss, g) in &per_sample {
            total += loss;
            grads.accumulate(g);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((total * inv, grads))
    }

    pub fn loss_and_grads(&self, batch: &[&Sample]) -> Result<(f64, Gradients)> {
        self.loss_and_grads_with(batch, true)
    }

    /// Plain SGD step on the head and the adapters present in `grads`.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        self.head.w.scaled_add(-lr, &grads.head.w);
        self.head.b.scaled_add(-lr, &grads.head.b);
        for (&t, layers) in &grads.adapters {
            for (l, g) in layers.iter().enumerate() {
                self.adapters[l][t].scaled_add(-lr, g);
            }
        }
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predict(&self, image: &Image, qtype: &QuestionType, with_adapters: bool) -> Result<usize> {
        let logits = if with_adapters {
            self.forward(image, qtype)?
        } else {
            self.forward_backbone(image)?
        };
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn to_logit_array(v: &Array1<f64>) -> [f64; NUM_OPTIONS] {
    let mut out = [0.0; NUM_OPTIONS];
    out.copy_from_slice(v.as_slice().expect("contiguous logits"));
    out
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// dS for S -> softmax rows, given probabilities `a` and upstream `da`.
fn softmax_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(a.raw_dim());
    Zip::from(ds.rows_mut())
        .and(a.rows())
        .and(da.rows())
        .for_each(|mut out, ar, dar| {
            let dot = ar.dot(&dar);
            Zip::from(&mut out)
                .and(&ar)
                .and(&dar)
                .for_each(|o, &p, &g| *o = p * (g - dot));
        });
    ds
}

/// Max-subtracted softmax cross-entropy; returns the loss and d loss / d logits.
pub fn cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps = logits.mapv(|z| (z - max).exp());
    let sum = exps.sum();
    let loss = sum.ln() + max - logits[target];
    let mut grad = exps / sum;
    grad[target] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            width: 8,
            heads: 2,
            bottleneck: 3,
            ..EncoderConfig::default()
        }
    }

    fn random_image(cfg: &EncoderConfig, rng: &mut Rng) -> Image {
        Image::from_shape_simple_fn((cfg.channels, cfg.image_size, cfg.image_size), || rng.next_f64())
    }

    #[test]
    fn default_encoder_shape() {
        let enc = AdaptedEncoder::init(&EncoderConfig::default(), &TypeList::default(), 1).unwrap();
        assert_eq!(enc.config().num_tokens(), 64);
        assert_eq!(enc.num_adapters(), 14);
        assert!(enc.adapters.iter().flatten().all(|a| {
            a.up.iter().all(|&v| v == 0.0)
                && a.up_b.iter().all(|&v| v == 0.0)
                && a.down_b.iter().all(|&v| v == 0.0)
        }));
        assert_eq!(enc.count_trainable_params(), enc.expected_trainable_params());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config();
        let t = TypeList::default();
        let a = AdaptedEncoder::init(&cfg, &t, 5).unwrap();
        let b = AdaptedEncoder::init(&cfg, &t, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.backbone_checksum(), b.backbone_checksum());
        let c = AdaptedEncoder::init(&cfg, &t, 6).unwrap();
        assert_ne!(a.backbone_checksum(), c.backbone_checksum());
    }

    #[test]
    fn zero_init_identity_and_routing() {
        let cfg = small_config();
        let types = TypeList::default();
        let mut enc = AdaptedEncoder::init(&cfg, &types, 9).unwrap();
        let mut rng = Rng::new(1);
        let img = random_image(&cfg, &mut rng);
        let base = enc.forward_backbone(&img).unwrap();
        for t in types.iter() {
            let out = enc.forward(&img, &t).unwrap();
            assert!(out.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        enc.adapter_mut(1, 2).up.fill(0.7);
        let counting = types.get("counting").unwrap();
        let algebra = types.get("algebra").unwrap();
        let c = enc.forward(&img, &counting).unwrap();
        assert!(c.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_ne!(enc.forward(&img, &algebra).unwrap(), base);
    }

    #[test]
    fn zero_image_is_finite() {
        let enc = AdaptedEncoder::init(&EncoderConfig::default(), &TypeList::default(), 2).unwrap();
        let img = Image::zeros((1, 64, 64));
        let out = enc
            .forward(&img, &TypeList::default().get("logic").unwrap())
            .unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_unknown_type_and_bad_shape() {
        let cfg = small_config();
        let enc = AdaptedEncoder::init(&cfg, &TypeList::new(["a", "b"]).unwrap(), 0).unwrap();
        let other = TypeList::default().get("counting").unwrap();
        assert!(enc.forward(&Image::zeros((1, 16, 16)), &other).is_err());
        assert!(enc.forward_backbone(&Image::zeros((1, 8, 16))).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_ln5() {
        let (loss, grad) = cross_entropy(&Array1::zeros(5), 2);
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        assert!((grad.sum()).abs() < 1e-15);
    }

    #[test]
    fn softmax_stable_for_huge_logits() {
        let logits = Array1::from(vec![1e4, -1e4, 0.0, 5e3, -3e3]);
        for t in 0..5 {
            let (loss, grad) = cross_entropy(&logits, t);
            assert!(loss.is_finite());
            assert!(grad.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn gradients_only_for_present_types() {
        let cfg = small_config();
        let types = TypeList::default();
        let enc = AdaptedEncoder::init(&cfg, &types, 3).unwrap();
        let mut rng = Rng::new(4);
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                image: random_image(&cfg, &mut rng),
                qtype: types.get("measuring").unwrap(),
                target: i % 5,
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, g) = enc.loss_and_grads(&refs).unwrap();
        assert_eq!(g.adapters.keys().copied().collect::<Vec<_>>(), vec![4]);
        assert!(enc.loss_and_grads(&[]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
