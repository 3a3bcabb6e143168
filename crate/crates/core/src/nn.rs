//! Parameter storage and transformer layers with explicit backward passes.
//!
//! Activations are row-major `(rows, features)` matrices where `rows` is
//! `batch * seq_len`, example-major. Every layer exposes
//! `forward -> (output, cache)` and `backward(cache, d_output) -> d_input`,
//! accumulating parameter gradients into a [`Grads`] buffer.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

/// Parameter grouping used for partial activation and per-family checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    TimeEmbed,
    ImageEmbed,
    TextEmbed,
    ImageDown,
    TextDown,
    Shared,
    SharedSkip,
    ImageUp,
    TextUp,
    ImageSkip,
    TextSkip,
    ImageHead,
    TextHead,
}

/// Which modality a family belongs to; `Common` runs in every mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Common,
    Image,
    Text,
}

impl Family {
    pub const ALL: [Family; 13] = [
        Family::TimeEmbed,
        Family::ImageEmbed,
        Family::TextEmbed,
        Family::ImageDown,
        Family::TextDown,
        Family::Shared,
        Family::SharedSkip,
        Family::ImageUp,
        Family::TextUp,
        Family::ImageSkip,
        Family::TextSkip,
        Family::ImageHead,
        Family::TextHead,
    ];

    pub fn branch(self) -> Branch {
        match self {
            Family::TimeEmbed | Family::Shared | Family::SharedSkip => Branch::Common,
            Family::ImageEmbed
            | Family::ImageDown
            | Family::ImageUp
            | Family::ImageSkip
            | Family::ImageHead => Branch::Image,
            Family::TextEmbed
            | Family::TextDown
            | Family::TextUp
            | Family::TextSkip
            | Family::TextHead => Branch::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Real> {
    pub name: String,
    pub family: Family,
    /// Logical shape (vectors are 1-d); `value` always stores a matrix.
    pub shape: Vec<usize>,
    pub value: Array2<F>,
}

impl<F: Real> Param<F> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Real> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

/// Initialization law for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        family: Family,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let (rows, cols) = match shape {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => panic!("parameters are 1-d or 2-d, got {shape:?}"),
        };
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(rng)))
            }
        };
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            family,
            shape: shape.to_vec(),
            value,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    family: p.family,
                    shape: p.shape.clone(),
                    value: p.value.mapv(|x| G::of(x.to_f64_lossy())),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Gradient buffer parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<F: Real> {
    pub values: Vec<Array2<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            values: store
                .iter()
                .map(|(_, p)| Array2::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    fn acc(&mut self, id: ParamId, g: &Array2<F>) {
        self.values[id.0] += g;
    }

    fn acc_row(&mut self, id: ParamId, g: &Array1<F>) {
        let mut row = self.values[id.0].row_mut(0);
        row += g;
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: F) {
        for a in &mut self.values {
            a.mapv_inplace(|x| x * k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Read access to parameters for one forward pass, optionally recording which
/// parameters were read.
pub struct Ctx<'a, F: Real> {
    store: &'a ParamStore<F>,
    touched: Option<RefCell<Vec<bool>>>,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self {
            store,
            touched: None,
        }
    }

    pub fn tracing(store: &'a ParamStore<F>) -> Self {
        Self {
            store,
            touched: Some(RefCell::new(vec![false; store.len()])),
        }
    }

    pub fn param(&self, id: ParamId) -> ArrayView2<'a, F> {
        if let Some(t) = &self.touched {
            t.borrow_mut()[id.0] = true;
        }
        self.store.get(id).value.view()
    }

    pub fn touched(&self) -> Option<Vec<bool>> {
        self.touched.as_ref().map(|t| t.borrow().clone())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        family: Family,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), family, &[in_dim, out_dim], Init::Normal(std), rng);
        let b = store.add(format!("{name}.bias"), family, &[out_dim], Init::Zeros, rng);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(&self, ctx: &Ctx<F>, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&ctx.param(self.w));
        y += &ctx.param(self.b).row(0);
        y
    }

    /// `x` is the forward input.
    pub fn backward<F: Real>(
        &self,
        ctx: &Ctx<F>,
        x: &Array2<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        grads.acc(self.w, &x.t().dot(dy));
        grads.acc_row(self.b, &dy.sum_axis(Axis(0)));
        dy.dot(&ctx.param(self.w).t())
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LnCache<F: Real> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl LayerNorm {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        family: Family,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let gamma = store.add(format!("{name}.gamma"), family, &[dim], Init::Ones, rng);
        let beta = store.add(format!("{name}.beta"), family, &[dim], Init::Zeros, rng);
        Self { gamma, beta }
    }

    pub fn forward<F: Real>(&self, ctx: &Ctx<F>, x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
        let d = F::of(x.ncols() as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *r = inv;
        }
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let mut y = &xhat * &g.row(0);
        y += &b.row(0);
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<F: Real>(
        &self,
        ctx: &Ctx<F>,
        cache: &LnCache<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let g = ctx.param(self.gamma);
        grads.acc_row(self.gamma, &(dy * &cache.xhat).sum_axis(Axis(0)));
        grads.acc_row(self.beta, &dy.sum_axis(Axis(0)));
        let d = F::of(dy.ncols() as f64);
        let mut dx = dy * &g.row(0);
        for ((mut row, xh), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_d = row.sum() / d;
            let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
            row.zip_mut_with(&xh, |v, &h| *v = r * (*v - mean_d - h * mean_dx));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    let (c, k, half) = (F::of(GELU_C), F::of(GELU_K), F::of(0.5));
    x.mapv(|v| half * v * (F::one() + (c * (v + k * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let (c, k, half, three) = (F::of(GELU_C), F::of(GELU_K), F::of(0.5), F::of(3.0));
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let th = (c * (v + k * v * v * v)).tanh();
        let deriv =
            half * (F::one() + th) + half * v * (F::one() - th * th) * c * (F::one() + three * k * v * v);
        *d = *d * deriv;
    });
    dx
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<F: Real> {
    x: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    mixed: Array2<F>,
}

impl Attention {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        family: Family,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "embed dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), family, dim, 3 * dim, 0.02, rng),
            proj: Linear::new(store, &format!("{name}.proj"), family, dim, dim, 0.02, rng),
            heads,
            dim,
        }
    }

    pub fn forward<F: Real>(
        &self,
        ctx: &Ctx<F>,
        x: &Array2<F>,
        seq_len: usize,
    ) -> (Array2<F>, AttnCache<F>) {
        let rows = x.nrows();
        let batch = rows / seq_len;
        let dh = self.dim / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(ctx, x);
        let mut mixed = Array2::zeros((rows, self.dim));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..self.heads {
                let c = h * dh;
                let q = qkv.slice(s![r.clone(), c..c + dh]);
                let k = qkv.slice(s![r.clone(), self.dim + c..self.dim + c + dh]);
                let v = qkv.slice(s![r.clone(), 2 * self.dim + c..2 * self.dim + c + dh]);
                let mut p = q.dot(&k.t());
                for mut row in p.rows_mut() {
                    let m = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
                    row.mapv_inplace(|v| ((v - m) * scale).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
                mixed
                    .slice_mut(s![r.clone(), c..c + dh])
                    .assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let y = self.proj.forward(ctx, &mixed);
        (
            y,
            AttnCache {
                x: x.clone(),
                qkv,
                probs,
                mixed,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        ctx: &Ctx<F>,
        cache: &AttnCache<F>,
        dy: &Array2<F>,
        seq_len: usize,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let rows = dy.nrows();
        let batch = rows / seq_len;
        let dh = self.dim / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let dmixed = self.proj.backward(ctx, &cache.mixed, dy, grads);
        let mut dqkv = Array2::zeros((rows, 3 * self.dim));
        for b in 0..batch {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..self.heads {
                let c = h * dh;
                let p = &cache.probs[b * self.heads + h];
                let q = cache.qkv.slice(s![r.clone(), c..c + dh]);
                let k = cache.qkv.slice(s![r.clone(), self.dim + c..self.dim + c + dh]);
                let v = cache
                    .qkv
                    .slice(s![r.clone(), 2 * self.dim + c..2 * self.dim + c + dh]);
                let dout = dmixed.slice(s![r.clone(), c..c + dh]);
                let dv = p.t().dot(&dout);
                let mut ds = dout.dot(&v.t());
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    drow.zip_mut_with(&prow, |d, &pv| *d = pv * (*d - dot) * scale);
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![r.clone(), c..c + dh]).assign(&dq);
                dqkv.slice_mut(s![r.clone(), self.dim + c..self.dim + c + dh])
                    .assign(&dk);
                dqkv.slice_mut(s![r.clone(), 2 * self.dim + c..2 * self.dim + c + dh])
                    .assign(&dv);
            }
        }
        self.qkv.backward(ctx, &cache.x, &dqkv, grads)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F: Real> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    ln2: LnCache<F>,
    ln2_out: Array2<F>,
    hidden: Array2<F>,
    act: Array2<F>,
}

impl Block {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        family: Family,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), family, dim, rng),
            attn: Attention::new(store, &format!("{name}.attn"), family, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), family, dim, rng),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), family, dim, mlp_ratio * dim, 0.02, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), family, mlp_ratio * dim, dim, 0.02, rng),
        }
    }

    pub fn forward<F: Real>(
        &self,
        ctx: &Ctx<F>,
        x: &Array2<F>,
        seq_len: usize,
    ) -> (Array2<F>, BlockCache<F>) {
        let (n1, ln1) = self.ln1.forward(ctx, x);
        let (a, attn) = self.attn.forward(ctx, &n1, seq_len);
        let x1 = x + &a;
        let (n2, ln2) = self.ln2.forward(ctx, &x1);
        let hidden = self.fc1.forward(ctx, &n2);
        let act = gelu(&hidden);
        let m = self.fc2.forward(ctx, &act);
        let y = x1 + &m;
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                ln2_out: n2,
                hidden,
                act,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        ctx: &Ctx<F>,
        cache: &BlockCache<F>,
        dy: &Array2<F>,
        seq_len: usize,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let dact = self.fc2.backward(ctx, &cache.act, dy, grads);
        let dhidden = gelu_backward(&cache.hidden, &dact);
        let dn2 = self.fc1.backward(ctx, &cache.ln2_out, &dhidden, grads);
        let mut dx1 = self.ln2.backward(ctx, &cache.ln2, &dn2, grads);
        dx1 += dy;
        let dn1 = self.attn.backward(ctx, &cache.attn, &dx1, seq_len, grads);
        let mut dx = self.ln1.backward(ctx, &cache.ln1, &dn1, grads);
        dx += &dx1;
        dx
    }
}

/// Long-skip fusion: `linear(concat(x, skip))` on every token.
#[derive(Debug, Clone)]
pub struct SkipFuse {
    pub lin: Linear,
}

#[derive(Debug, Clone)]
pub struct SkipCache<F: Real> {
    cat: Array2<F>,
}

impl SkipFuse {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        family: Family,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            lin: Linear::new(store, name, family, 2 * dim, dim, 0.02, rng),
        }
    }

    pub fn forward<F: Real>(
        &self,
        ctx: &Ctx<F>,
        x: &Array2<F>,
        skip: &Array2<F>,
    ) -> (Array2<F>, SkipCache<F>) {
        let cat = concatenate(Axis(1), &[x.view(), skip.view()]).expect("matching rows");
        (self.lin.forward(ctx, &cat), SkipCache { cat })
    }

    /// Returns `(d_x, d_skip)`.
    pub fn backward<F: Real>(
        &self,
        ctx: &Ctx<F>,
        cache: &SkipCache<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> (Array2<F>, Array2<F>) {
        let dcat = self.lin.backward(ctx, &cache.cat, dy, grads);
        let d = dcat.ncols() / 2;
        (
            dcat.slice(s![.., ..d]).to_owned(),
            dcat.slice(s![.., d..]).to_owned(),
        )
    }
}
