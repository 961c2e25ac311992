use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttentionMaps, ForwardOutput, Layer, ModelError, ParameterGradients, Site, Transformer};
use crate::lora::{AdapterSet, LowRank};
use crate::tensor::{dot, Matrix};
use crate::Scalar;

const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// Inverted dropout on adapter inputs. Each adapted projection draws its own
/// mask; kept entries are scaled by `1 / (1 - p)`.
#[derive(Debug, Clone)]
pub struct DropoutSampler {
    p: f64,
    rng: ChaCha8Rng,
}

impl DropoutSampler {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `None` when p = 0, so the zero-dropout path is exactly the eval path.
    pub fn mask<T: Scalar>(&mut self, rows: usize, cols: usize) -> Option<Matrix<T>> {
        if self.p == 0.0 {
            return None;
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let data = (0..rows * cols)
            .map(|_| {
                if self.rng.random::<f64>() < self.p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        Some(Matrix::from_vec(rows, cols, data))
    }
}

struct AdapterTrace<T> {
    mask: Option<Matrix<T>>,
    /// `dropout(x) · Aᵀ`
    low: Matrix<T>,
}

struct LayerTrace<T> {
    h_in: Matrix<T>,
    inv_rms1: Vec<T>,
    a: Matrix<T>,
    q_rot: Matrix<T>,
    k_rot: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    attn: Matrix<T>,
    h_mid: Matrix<T>,
    inv_rms2: Vec<T>,
    b: Matrix<T>,
    gate: Matrix<T>,
    up: Matrix<T>,
    act: Matrix<T>,
    adapters: [Option<AdapterTrace<T>>; 7],
}

/// Every intermediate of one forward pass.
pub struct Trace<T> {
    ids: Vec<u32>,
    layers: Vec<LayerTrace<T>>,
    h_final: Matrix<T>,
    inv_rms_final: Vec<T>,
    hidden: Matrix<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn hidden(&self) -> &Matrix<T> {
        &self.hidden
    }

    pub fn attention(&self) -> AttentionMaps<T> {
        AttentionMaps {
            layers: self.layers.iter().map(|l| l.probs.clone()).collect(),
        }
    }

    pub fn into_output(self) -> ForwardOutput<T> {
        let attention = self.attention();
        ForwardOutput {
            hidden: self.hidden,
            attention,
        }
    }
}

fn rms_forward<T: Scalar>(x: &Matrix<T>, g: &[T]) -> (Matrix<T>, Vec<T>) {
    let d = T::from_usize_lossy(x.cols());
    let eps = T::lit(NORM_EPS);
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let r = T::one() / (dot(row, row) / d + eps).sqrt();
        inv.push(r);
        for ((o, &v), &s) in y.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = v * r * s;
        }
    }
    (y, inv)
}

fn rms_backward<T: Scalar>(
    x: &Matrix<T>,
    g: &[T],
    inv: &[T],
    dy: &Matrix<T>,
    dg: Option<&mut [T]>,
) -> Matrix<T> {
    let d = T::from_usize_lossy(x.cols());
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dg = dg;
    for i in 0..x.rows() {
        let (xr, dyr, r) = (x.row(i), dy.row(i), inv[i]);
        let mut proj = T::zero();
        for j in 0..xr.len() {
            proj += g[j] * dyr[j] * xr[j];
        }
        let coef = r * r * r * proj / d;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * g[j] * dyr[j] - coef * xr[j];
        }
        if let Some(dg) = dg.as_deref_mut() {
            for j in 0..xr.len() {
                dg[j] += dyr[j] * xr[j] * r;
            }
        }
    }
    dx
}

fn lin_forward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    adapter: Option<&LowRank<T>>,
    scale: T,
    dropout: &mut Option<&mut DropoutSampler>,
) -> (Matrix<T>, Option<AdapterTrace<T>>) {
    let mut y = x.matmul(w);
    let Some(ad) = adapter else {
        return (y, None);
    };
    let mask = dropout.as_deref_mut().and_then(|d| d.mask(x.rows(), x.cols()));
    let low = match &mask {
        Some(m) => {
            let mut xd = x.clone();
            for (v, &k) in xd.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *v *= k;
            }
            xd.matmul_t(&ad.a)
        }
        None => x.matmul_t(&ad.a),
    };
    y.axpy(scale, &low.matmul_t(&ad.b));
    (y, Some(AdapterTrace { mask, low }))
}

#[allow(clippy::too_many_arguments)]
fn lin_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    adapter: Option<(&LowRank<T>, &AdapterTrace<T>)>,
    scale: T,
    dy: &Matrix<T>,
    dw: Option<&mut Matrix<T>>,
    dadapter: Option<&mut LowRank<T>>,
) -> Matrix<T> {
    if let Some(dw) = dw {
        dw.add_assign(&x.t_matmul(dy));
    }
    let mut dx = dy.matmul_t(w);
    if let Some((ad, tr)) = adapter {
        let mut dlow = dy.matmul(&ad.b);
        dlow.scale(scale);
        if let Some(g) = dadapter {
            let mut db = dy.t_matmul(&tr.low);
            db.scale(scale);
            g.b.add_assign(&db);
            let da = match &tr.mask {
                Some(m) => {
                    let mut xd = x.clone();
                    for (v, &k) in xd.as_mut_slice().iter_mut().zip(m.as_slice()) {
                        *v *= k;
                    }
                    dlow.t_matmul(&xd)
                }
                None => dlow.t_matmul(x),
            };
            g.a.add_assign(&da);
        }
        let mut dxd = dlow.matmul(&ad.a);
        if let Some(m) = &tr.mask {
            for (v, &k) in dxd.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *v *= k;
            }
        }
        dx.add_assign(&dxd);
    }
    dx
}

/// Rotates each (even, odd) pair of every head by `pos · base^(-2i/head_dim)`.
fn rope<T: Scalar>(m: &mut Matrix<T>, n_heads: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    for pos in 0..m.rows() {
        let row = m.row_mut(pos);
        for i in 0..half {
            let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = theta.sin_cos();
            let (s, c) = (T::lit(if inverse { -s } else { s }), T::lit(c));
            for h in 0..n_heads {
                let j = h * head_dim + 2 * i;
                let (x0, x1) = (row[j], row[j + 1]);
                row[j] = x0 * c - x1 * s;
                row[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn check_ids<T: Scalar>(model: &Transformer<T>, ids: &[u32]) -> Result<(), ModelError> {
    let c = &model.config;
    if ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if ids.len() > c.max_seq_len {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max: c.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= c.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab: c.vocab_size,
        });
    }
    Ok(())
}

fn site_adapter<T: Scalar>(
    adapters: Option<&AdapterSet<T>>,
    layer: usize,
    site: Site,
) -> Option<&LowRank<T>> {
    adapters.and_then(|a| a.get(layer, site))
}

pub(crate) fn run_forward<T: Scalar>(
    model: &Transformer<T>,
    adapters: Option<&AdapterSet<T>>,
    mut dropout: Option<&mut DropoutSampler>,
    ids: &[u32],
) -> Result<Trace<T>, ModelError> {
    check_ids(model, ids)?;
    let c = &model.config;
    let (n, d, hd) = (ids.len(), c.d_model, c.head_dim());
    let scale = adapters.map_or(T::zero(), AdapterSet::scale);
    let att_scale = T::one() / T::from_usize_lossy(hd).sqrt();

    let mut h = Matrix::zeros(n, d);
    for (i, &id) in ids.iter().enumerate() {
        h.row_mut(i).copy_from_slice(model.embedding.row(id as usize));
    }

    let mut layers = Vec::with_capacity(c.n_layers);
    for (li, layer) in model.layers.iter().enumerate() {
        let mut ad_traces: [Option<AdapterTrace<T>>; 7] = Default::default();
        let mut proj = |x: &Matrix<T>, site: Site, traces: &mut [Option<AdapterTrace<T>>; 7]| {
            let (y, tr) = lin_forward(
                x,
                layer.site(site),
                site_adapter(adapters, li, site),
                scale,
                &mut dropout,
            );
            traces[site.index()] = tr;
            y
        };

        let (a, inv_rms1) = rms_forward(&h, &layer.norm1);
        let mut q_rot = proj(&a, Site::Q, &mut ad_traces);
        let mut k_rot = proj(&a, Site::K, &mut ad_traces);
        let v = proj(&a, Site::V, &mut ad_traces);
        rope(&mut q_rot, c.n_heads, hd, false);
        rope(&mut k_rot, c.n_heads, hd, false);

        let mut attn = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let qh = q_rot.col_block(head * hd, hd);
            let kh = k_rot.col_block(head * hd, hd);
            let vh = v.col_block(head * hd, hd);
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let row = p.row_mut(i);
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    row[j] = dot(qh.row(i), kh.row(j)) * att_scale;
                    max = max.max(row[j]);
                }
                let mut sum = T::zero();
                for r in row.iter_mut().take(i + 1) {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut().take(i + 1) {
                    *r /= sum;
                }
            }
            attn.add_col_block(head * hd, &p.matmul(&vh));
            probs.push(p);
        }

        let mut h_mid = h.clone();
        h_mid.add_assign(&proj(&attn, Site::O, &mut ad_traces));

        let (b, inv_rms2) = rms_forward(&h_mid, &layer.norm2);
        let gate = proj(&b, Site::Gate, &mut ad_traces);
        let up = proj(&b, Site::Up, &mut ad_traces);
        let mut act = gate.clone();
        for (m, &u) in act.as_mut_slice().iter_mut().zip(up.as_slice()) {
            *m = *m * sigmoid(*m) * u;
        }
        let mut h_out = h_mid.clone();
        h_out.add_assign(&proj(&act, Site::Down, &mut ad_traces));

        layers.push(LayerTrace {
            h_in: std::mem::replace(&mut h, h_out),
            inv_rms1,
            a,
            q_rot,
            k_rot,
            v,
            probs,
            attn,
            h_mid,
            inv_rms2,
            b,
            gate,
            up,
            act,
            adapters: ad_traces,
        });
    }

    let (hidden, inv_rms_final) = rms_forward(&h, &model.final_norm);
    Ok(Trace {
        ids: ids.to_vec(),
        layers,
        h_final: h,
        inv_rms_final,
        hidden,
    })
}

pub(crate) fn run_backward<T: Scalar>(
    model: &Transformer<T>,
    adapters: Option<&AdapterSet<T>>,
    trace: &Trace<T>,
    upstream: &Matrix<T>,
    want_base: bool,
) -> Result<(Option<ParameterGradients<T>>, Option<AdapterSet<T>>), ModelError> {
    let c = &model.config;
    let (n, d, hd) = (trace.ids.len(), c.d_model, c.head_dim());
    if upstream.shape() != (n, d) {
        return Err(ModelError::Shape {
            expected: (n, d),
            got: upstream.shape(),
        });
    }
    let scale = adapters.map_or(T::zero(), AdapterSet::scale);
    let att_scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let mut grads = want_base.then(|| model.zeros_like());
    let mut agrads = adapters.map(AdapterSet::zeros_like);

    let mut dh = rms_backward(
        &trace.h_final,
        &model.final_norm,
        &trace.inv_rms_final,
        upstream,
        grads.as_mut().map(|g| g.final_norm.as_mut_slice()),
    );

    for li in (0..c.n_layers).rev() {
        let layer = &model.layers[li];
        let lt = &trace.layers[li];
        let mut lgrads = grads.as_mut().map(|g| &mut g.layers[li]);

        let back = |x: &Matrix<T>,
                    site: Site,
                    dy: &Matrix<T>,
                    lgrads: &mut Option<&mut Layer<T>>,
                    agrads: &mut Option<AdapterSet<T>>|
         -> Matrix<T> {
            let ad = site_adapter(adapters, li, site).zip(lt.adapters[site.index()].as_ref());
            let dad = agrads.as_mut().and_then(|g| g.get_mut(li, site));
            lin_backward(
                x,
                layer.site(site),
                ad,
                scale,
                dy,
                lgrads.as_deref_mut().map(|g| g.site_mut(site)),
                dad,
            )
        };

        // MLP branch
        let dact = back(&lt.act, Site::Down, &dh, &mut lgrads, &mut agrads);
        let mut dgate = Matrix::zeros(n, c.d_ff);
        let mut dup = Matrix::zeros(n, c.d_ff);
        for idx in 0..n * c.d_ff {
            let g = lt.gate.as_slice()[idx];
            let s = sigmoid(g);
            let da = dact.as_slice()[idx];
            dup.as_mut_slice()[idx] = da * g * s;
            dgate.as_mut_slice()[idx] =
                da * lt.up.as_slice()[idx] * s * (T::one() + g * (T::one() - s));
        }
        let mut db = back(&lt.b, Site::Gate, &dgate, &mut lgrads, &mut agrads);
        db.add_assign(&back(&lt.b, Site::Up, &dup, &mut lgrads, &mut agrads));
        let mut dh_mid = dh;
        dh_mid.add_assign(&rms_backward(
            &lt.h_mid,
            &layer.norm2,
            &lt.inv_rms2,
            &db,
            lgrads.as_deref_mut().map(|g| g.norm2.as_mut_slice()),
        ));

        // attention branch
        let dattn = back(&lt.attn, Site::O, &dh_mid, &mut lgrads, &mut agrads);
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for head in 0..c.n_heads {
            let p = &lt.probs[head];
            let qh = lt.q_rot.col_block(head * hd, hd);
            let kh = lt.k_rot.col_block(head * hd, hd);
            let vh = lt.v.col_block(head * hd, hd);
            let doh = dattn.col_block(head * hd, hd);
            let dp = doh.matmul_t(&vh);
            dv.add_col_block(head * hd, &p.t_matmul(&doh));
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let (pr, dpr) = (p.row(i), dp.row(i));
                let inner = dot(&pr[..=i], &dpr[..=i]);
                let dsr = ds.row_mut(i);
                for j in 0..=i {
                    dsr[j] = pr[j] * (dpr[j] - inner) * att_scale;
                }
            }
            dq.add_col_block(head * hd, &ds.matmul(&kh));
            dk.add_col_block(head * hd, &ds.t_matmul(&qh));
        }
        rope(&mut dq, c.n_heads, hd, true);
        rope(&mut dk, c.n_heads, hd, true);
        let mut da = back(&lt.a, Site::Q, &dq, &mut lgrads, &mut agrads);
        da.add_assign(&back(&lt.a, Site::K, &dk, &mut lgrads, &mut agrads));
        da.add_assign(&back(&lt.a, Site::V, &dv, &mut lgrads, &mut agrads));
        let mut dh_in = dh_mid;
        dh_in.add_assign(&rms_backward(
            &lt.h_in,
            &layer.norm1,
            &lt.inv_rms1,
            &da,
            lgrads.as_deref_mut().map(|g| g.norm1.as_mut_slice()),
        ));
        dh = dh_in;
    }

    if let Some(g) = grads.as_mut() {
        for (i, &id) in trace.ids.iter().enumerate() {
            for (e, &v) in g.embedding.row_mut(id as usize).iter_mut().zip(dh.row(i)) {
                *e += v;
            }
        }
    }
    Ok((grads, agrads))
}
