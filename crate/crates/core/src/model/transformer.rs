//! Pre-norm transformer encoder-decoder over a flat parameter vector, with
//! hand-written backward passes and an incremental decoder for inference.
//!
//! One embedding matrix is shared by the encoder input, the decoder input and
//! the output projection. Positions use fixed sinusoids. Sequences are
//! processed one at a time; padding never enters the computation.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::config::TransformerShape;
use super::ops::{add_assign, axpy, dot, log_softmax_in_place, matmul, matmul_at_acc, matmul_bt};
use super::ModelError;

const NORM_EPS: f64 = 1e-5;

/// Location of one tensor inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    #[inline]
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len()]
    }

    #[inline]
    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub tensor: TensorRef,
    pub kind: TensorKind,
}

/// Determines the initializer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    next: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, kind: TensorKind) -> TensorRef {
        let tensor = TensorRef {
            offset: self.next,
            rows,
            cols,
        };
        self.next += rows * cols;
        self.tensors.push(TensorInfo { name, tensor, kind });
        tensor
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.weight"), din, dout, TensorKind::Weight),
            b: self.add(format!("{prefix}.bias"), 1, dout, TensorKind::Bias),
            din,
            dout,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.gamma"), 1, d, TensorKind::NormGain),
            b: self.add(format!("{prefix}.beta"), 1, d, TensorKind::NormBias),
            d,
        }
    }

    fn attention(&mut self, prefix: &str, shape: &TransformerShape) -> Attention {
        let d = shape.model_dim;
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
            heads: shape.heads,
            head_dim: shape.head_dim(),
        }
    }

    fn ffn(&mut self, prefix: &str, shape: &TransformerShape) -> Ffn {
        Ffn {
            fc1: self.linear(&format!("{prefix}.fc1"), shape.model_dim, shape.ff_dim),
            fc2: self.linear(&format!("{prefix}.fc2"), shape.ff_dim, shape.model_dim),
        }
    }
}

// ---------------------------------------------------------------- dropout

fn dropout_mask(rng: &mut Option<&mut ChaCha8Rng>, n: usize, p: f64) -> Option<Vec<f64>> {
    let rng = rng.as_deref_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(
        (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

// ----------------------------------------------------------------- linear

#[derive(Clone, Debug)]
struct Linear {
    w: TensorRef,
    b: TensorRef,
    din: usize,
    dout: usize,
}

impl Linear {
    fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.dout];
        matmul(x, self.w.of(p), &mut y, rows, self.din, self.dout);
        let b = self.b.of(p);
        for r in 0..rows {
            add_assign(&mut y[r * self.dout..(r + 1) * self.dout], b);
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
        matmul_at_acc(x, dy, self.w.of_mut(g), rows, self.din, self.dout);
        let gb = self.b.of_mut(g);
        for r in 0..rows {
            add_assign(gb, &dy[r * self.dout..(r + 1) * self.dout]);
        }
        let mut dx = vec![0.0; rows * self.din];
        matmul_bt(dy, self.w.of(p), &mut dx, rows, self.dout, self.din);
        dx
    }
}

// ------------------------------------------------------------- layer norm

#[derive(Clone, Debug)]
struct Norm {
    g: TensorRef,
    b: TensorRef,
    d: usize,
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl Norm {
    fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, NormCache) {
        let d = self.d;
        let (gain, bias) = (self.g.of(p), self.b.of(p));
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gain[j] + bias[j];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    fn backward(&self, p: &[f64], g: &mut [f64], cache: &NormCache, dy: &[f64], rows: usize) -> Vec<f64> {
        let d = self.d;
        let gain = self.g.of(p);
        let mut dx = vec![0.0; rows * d];
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            for j in 0..d {
                dgain[j] += dyr[j] * xh[j];
                dbias[j] += dyr[j];
                dxhat[j] = dyr[j] * gain[j];
            }
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
            for j in 0..d {
                dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        add_assign(self.g.of_mut(g), &dgain);
        add_assign(self.b.of_mut(g), &dbias);
        dx
    }
}

// --------------------------------------------------------------- attention

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

struct AttnCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × tq × tk
    probs: Vec<f64>,
    ctx: Vec<f64>,
    tq: usize,
    tk: usize,
}

impl Attention {
    fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Scaled dot-product attention for one query row against `tk` keys.
    /// Writes the context into `ctx_row` and the per-head weights into `probs`
    /// (`heads × tk`, stride `probs_stride` between heads).
    #[allow(clippy::too_many_arguments)]
    fn attend_row(
        &self,
        q_row: &[f64],
        k: &[f64],
        v: &[f64],
        tk: usize,
        ctx_row: &mut [f64],
        probs: &mut [f64],
        probs_stride: usize,
    ) {
        let (dh, d) = (self.head_dim, self.dim());
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..self.heads {
            let qh = &q_row[h * dh..(h + 1) * dh];
            let pr = &mut probs[h * probs_stride..h * probs_stride + tk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..tk {
                let s = dot(qh, &k[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
                pr[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for x in pr.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let out = &mut ctx_row[h * dh..(h + 1) * dh];
            out.fill(0.0);
            for j in 0..tk {
                pr[j] /= sum;
                axpy(pr[j], &v[j * d + h * dh..j * d + (h + 1) * dh], out);
            }
        }
    }

    fn forward(&self, p: &[f64], xq: &[f64], tq: usize, xkv: &[f64], tk: usize, causal: bool) -> (Vec<f64>, AttnCache) {
        let d = self.dim();
        let q = self.q.forward(p, xq, tq);
        let k = self.k.forward(p, xkv, tk);
        let v = self.v.forward(p, xkv, tk);
        let mut probs = vec![0.0; self.heads * tq * tk];
        let mut ctx = vec![0.0; tq * d];
        for i in 0..tq {
            let visible = if causal { i + 1 } else { tk };
            // head h, row i lives at h*tq*tk + i*tk
            self.attend_row(
                &q[i * d..(i + 1) * d],
                &k,
                &v,
                visible,
                &mut ctx[i * d..(i + 1) * d],
                &mut probs[i * tk..],
                tq * tk,
            );
        }
        let out = self.o.forward(p, &ctx, tq);
        let cache = AttnCache {
            xq: xq.to_vec(),
            xkv: xkv.to_vec(),
            q,
            k,
            v,
            probs,
            ctx,
            tq,
            tk,
        };
        (out, cache)
    }

    /// Returns (d xq, d xkv).
    fn backward(&self, p: &[f64], g: &mut [f64], c: &AttnCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, dh, tq, tk) = (self.dim(), self.head_dim, c.tq, c.tk);
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.o.backward(p, g, &c.ctx, dout, tq);
        let mut dq = vec![0.0; tq * d];
        let mut dk = vec![0.0; tk * d];
        let mut dv = vec![0.0; tk * d];
        let mut dp = vec![0.0; tk];
        for h in 0..self.heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let pr = &c.probs[h * tq * tk + i * tk..h * tq * tk + (i + 1) * tk];
                let dci = &dctx[i * d + hs.start..i * d + hs.end];
                let mut weighted = 0.0;
                for j in 0..tk {
                    if pr[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(dci, &c.v[j * d + hs.start..j * d + hs.end]);
                    weighted += dp[j] * pr[j];
                    axpy(pr[j], dci, &mut dv[j * d + hs.start..j * d + hs.end]);
                }
                let qi = &c.q[i * d + hs.start..i * d + hs.end];
                for j in 0..tk {
                    if pr[j] == 0.0 {
                        continue;
                    }
                    let ds = pr[j] * (dp[j] - weighted) * scale;
                    axpy(ds, &c.k[j * d + hs.start..j * d + hs.end], &mut dq[i * d + hs.start..i * d + hs.end]);
                    axpy(ds, qi, &mut dk[j * d + hs.start..j * d + hs.end]);
                }
            }
        }
        let dxq = self.q.backward(p, g, &c.xq, &dq, tq);
        let mut dxkv = self.k.backward(p, g, &c.xkv, &dk, tk);
        add_assign(&mut dxkv, &self.v.backward(p, g, &c.xkv, &dv, tk));
        (dxq, dxkv)
    }
}

// ---------------------------------------------------------- feed-forward

#[derive(Clone, Debug)]
struct Ffn {
    fc1: Linear,
    fc2: Linear,
}

struct FfnCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
}

impl Ffn {
    fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, FfnCache) {
        let mut hidden = self.fc1.forward(p, x, rows);
        for h in hidden.iter_mut() {
            *h = h.max(0.0);
        }
        let y = self.fc2.forward(p, &hidden, rows);
        (
            y,
            FfnCache {
                x: x.to_vec(),
                hidden,
            },
        )
    }

    fn backward(&self, p: &[f64], g: &mut [f64], c: &FfnCache, dy: &[f64], rows: usize) -> Vec<f64> {
        let mut dh = self.fc2.backward(p, g, &c.hidden, dy, rows);
        for (d, h) in dh.iter_mut().zip(&c.hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        self.fc1.backward(p, g, &c.x, &dh, rows)
    }
}

// ------------------------------------------------------------------ layers

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: Ffn,
}

struct EncoderLayerCache {
    n1: NormCache,
    attn: AttnCache,
    drop1: Option<Vec<f64>>,
    n2: NormCache,
    ffn: FfnCache,
    drop2: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: Ffn,
}

struct DecoderLayerCache {
    n1: NormCache,
    self_attn: AttnCache,
    drop1: Option<Vec<f64>>,
    n2: NormCache,
    cross_attn: AttnCache,
    drop2: Option<Vec<f64>>,
    n3: NormCache,
    ffn: FfnCache,
    drop3: Option<Vec<f64>>,
}

/// Forward state kept for the backward pass of one sequence pair.
pub struct SequenceCache {
    src: Vec<u32>,
    tgt: Vec<u32>,
    enc_drop: Option<Vec<f64>>,
    enc_layers: Vec<EncoderLayerCache>,
    enc_norm: NormCache,
    dec_drop: Option<Vec<f64>>,
    dec_layers: Vec<DecoderLayerCache>,
    dec_norm: NormCache,
    hidden: Vec<f64>,
}

/// Encoder output plus the cross-attention keys/values of every decoder layer.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    memory: Vec<f64>,
    len: usize,
    cross_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EncodedSource {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn memory(&self) -> &[f64] {
        &self.memory
    }
}

/// Self-attention keys/values for the tokens fed so far.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    position: usize,
    self_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DecoderState {
    pub fn position(&self) -> usize {
        self.position
    }
}

/// Parameter layout and computation graph of the encoder-decoder.
#[derive(Clone, Debug)]
pub struct Transformer {
    shape: TransformerShape,
    vocab_size: usize,
    embed: TensorRef,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    tensors: Vec<TensorInfo>,
    num_params: usize,
    positions: Vec<f64>,
}

impl Transformer {
    pub fn new(shape: TransformerShape, vocab_size: usize) -> Result<Self, ModelError> {
        shape.validate()?;
        if vocab_size < 5 {
            return Err(ModelError::InvalidConfig("vocabulary too small".into()));
        }
        let d = shape.model_dim;
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            next: 0,
        };
        let embed = b.add("embed.weight".into(), vocab_size, d, TensorKind::Embedding);
        let encoder = (0..shape.encoder_layers)
            .map(|i| {
                let pre = format!("encoder.layers.{i}");
                EncoderLayer {
                    norm1: b.norm(&format!("{pre}.norm1"), d),
                    attn: b.attention(&format!("{pre}.self_attn"), &shape),
                    norm2: b.norm(&format!("{pre}.norm2"), d),
                    ffn: b.ffn(&format!("{pre}.ffn"), &shape),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.final_norm", d);
        let decoder = (0..shape.decoder_layers)
            .map(|i| {
                let pre = format!("decoder.layers.{i}");
                DecoderLayer {
                    norm1: b.norm(&format!("{pre}.norm1"), d),
                    self_attn: b.attention(&format!("{pre}.self_attn"), &shape),
                    norm2: b.norm(&format!("{pre}.norm2"), d),
                    cross_attn: b.attention(&format!("{pre}.cross_attn"), &shape),
                    norm3: b.norm(&format!("{pre}.norm3"), d),
                    ffn: b.ffn(&format!("{pre}.ffn"), &shape),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.final_norm", d);
        Ok(Self {
            shape,
            vocab_size,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            num_params: b.next,
            tensors: b.tensors,
            positions: sinusoids(shape.max_positions, d),
        })
    }

    pub fn shape(&self) -> &TransformerShape {
        &self.shape
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn embedding(&self) -> TensorRef {
        self.embed
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.len() > self.shape.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.shape.max_positions,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(ModelError::ShapeMismatch(format!(
                "token id {bad} >= vocabulary size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn embed_tokens(&self, p: &[f64], ids: &[u32], start: usize) -> Vec<f64> {
        let d = self.shape.model_dim;
        let scale = (d as f64).sqrt();
        let e = self.embed.of(p);
        let mut x = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            let pos = &self.positions[(start + t) * d..(start + t + 1) * d];
            let emb = &e[id as usize * d..(id as usize + 1) * d];
            for j in 0..d {
                row[j] = emb[j] * scale + pos[j];
            }
        }
        x
    }

    fn embed_backward(&self, g: &mut [f64], ids: &[u32], dx: &[f64]) {
        let d = self.shape.model_dim;
        let scale = (d as f64).sqrt();
        let ge = self.embed.of_mut(g);
        for (t, &id) in ids.iter().enumerate() {
            axpy(scale, &dx[t * d..(t + 1) * d], &mut ge[id as usize * d..(id as usize + 1) * d]);
        }
    }

    /// Full forward for one (source, decoder-input) pair. Returns logits
    /// `tgt.len() × vocab` and the cache for [`Transformer::backward`].
    /// Dropout is active only when `rng` is given.
    pub fn forward_sequence(
        &self,
        p: &[f64],
        src: &[u32],
        tgt: &[u32],
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, SequenceCache), ModelError> {
        self.check_ids(src)?;
        self.check_ids(tgt)?;
        if src.is_empty() || tgt.is_empty() {
            return Err(ModelError::ShapeMismatch("empty sequence".into()));
        }
        let d = self.shape.model_dim;
        let (s, t) = (src.len(), tgt.len());

        let mut x = self.embed_tokens(p, src, 0);
        let enc_drop = dropout_mask(&mut rng, x.len(), dropout);
        apply_mask(&mut x, &enc_drop);
        let mut enc_layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (h, n1) = layer.norm1.forward(p, &x, s);
            let (mut a, attn) = layer.attn.forward(p, &h, s, &h, s, false);
            let drop1 = dropout_mask(&mut rng, a.len(), dropout);
            apply_mask(&mut a, &drop1);
            add_assign(&mut x, &a);
            let (h2, n2) = layer.norm2.forward(p, &x, s);
            let (mut f, ffn) = layer.ffn.forward(p, &h2, s);
            let drop2 = dropout_mask(&mut rng, f.len(), dropout);
            apply_mask(&mut f, &drop2);
            add_assign(&mut x, &f);
            enc_layers.push(EncoderLayerCache {
                n1,
                attn,
                drop1,
                n2,
                ffn,
                drop2,
            });
        }
        let (memory, enc_norm) = self.enc_norm.forward(p, &x, s);

        let mut y = self.embed_tokens(p, tgt, 0);
        let dec_drop = dropout_mask(&mut rng, y.len(), dropout);
        apply_mask(&mut y, &dec_drop);
        let mut dec_layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (h, n1) = layer.norm1.forward(p, &y, t);
            let (mut a, self_attn) = layer.self_attn.forward(p, &h, t, &h, t, true);
            let drop1 = dropout_mask(&mut rng, a.len(), dropout);
            apply_mask(&mut a, &drop1);
            add_assign(&mut y, &a);
            let (h2, n2) = layer.norm2.forward(p, &y, t);
            let (mut c, cross_attn) = layer.cross_attn.forward(p, &h2, t, &memory, s, false);
            let drop2 = dropout_mask(&mut rng, c.len(), dropout);
            apply_mask(&mut c, &drop2);
            add_assign(&mut y, &c);
            let (h3, n3) = layer.norm3.forward(p, &y, t);
            let (mut f, ffn) = layer.ffn.forward(p, &h3, t);
            let drop3 = dropout_mask(&mut rng, f.len(), dropout);
            apply_mask(&mut f, &drop3);
            add_assign(&mut y, &f);
            dec_layers.push(DecoderLayerCache {
                n1,
                self_attn,
                drop1,
                n2,
                cross_attn,
                drop2,
                n3,
                ffn,
                drop3,
            });
        }
        let (hidden, dec_norm) = self.dec_norm.forward(p, &y, t);
        let mut logits = vec![0.0; t * self.vocab_size];
        matmul_bt(&hidden, self.embed.of(p), &mut logits, t, d, self.vocab_size);
        Ok((
            logits,
            SequenceCache {
                src: src.to_vec(),
                tgt: tgt.to_vec(),
                enc_drop,
                enc_layers,
                enc_norm,
                dec_drop,
                dec_layers,
                dec_norm,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients into `g` given `dlogits`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], c: &SequenceCache, dlogits: &[f64]) {
        let d = self.shape.model_dim;
        let v = self.vocab_size;
        let (s, t) = (c.src.len(), c.tgt.len());

        matmul_at_acc(dlogits, &c.hidden, self.embed.of_mut(g), t, v, d);
        let mut dh = vec![0.0; t * d];
        matmul(dlogits, self.embed.of(p), &mut dh, t, v, d);
        let mut dy = self.dec_norm.backward(p, g, &c.dec_norm, &dh, t);
        let mut dmemory = vec![0.0; s * d];
        for (layer, lc) in self.decoder.iter().zip(&c.dec_layers).rev() {
            let mut df = dy.clone();
            apply_mask(&mut df, &lc.drop3);
            let dh3 = layer.ffn.backward(p, g, &lc.ffn, &df, t);
            add_assign(&mut dy, &layer.norm3.backward(p, g, &lc.n3, &dh3, t));

            let mut dc = dy.clone();
            apply_mask(&mut dc, &lc.drop2);
            let (dh2, dmem) = layer.cross_attn.backward(p, g, &lc.cross_attn, &dc);
            add_assign(&mut dmemory, &dmem);
            add_assign(&mut dy, &layer.norm2.backward(p, g, &lc.n2, &dh2, t));

            let mut da = dy.clone();
            apply_mask(&mut da, &lc.drop1);
            let (dq, dkv) = layer.self_attn.backward(p, g, &lc.self_attn, &da);
            let mut dh1 = dq;
            add_assign(&mut dh1, &dkv);
            add_assign(&mut dy, &layer.norm1.backward(p, g, &lc.n1, &dh1, t));
        }
        apply_mask(&mut dy, &c.dec_drop);
        self.embed_backward(g, &c.tgt, &dy);

        let mut dx = self.enc_norm.backward(p, g, &c.enc_norm, &dmemory, s);
        for (layer, lc) in self.encoder.iter().zip(&c.enc_layers).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &lc.drop2);
            let dh2 = layer.ffn.backward(p, g, &lc.ffn, &df, s);
            add_assign(&mut dx, &layer.norm2.backward(p, g, &lc.n2, &dh2, s));

            let mut da = dx.clone();
            apply_mask(&mut da, &lc.drop1);
            let (dq, dkv) = layer.attn.backward(p, g, &lc.attn, &da);
            let mut dh1 = dq;
            add_assign(&mut dh1, &dkv);
            add_assign(&mut dx, &layer.norm1.backward(p, g, &lc.n1, &dh1, s));
        }
        apply_mask(&mut dx, &c.enc_drop);
        self.embed_backward(g, &c.src, &dx);
    }

    /// Runs the encoder (no dropout) and precomputes cross-attention
    /// keys/values for incremental decoding.
    pub fn encode(&self, p: &[f64], src: &[u32]) -> Result<EncodedSource, ModelError> {
        self.check_ids(src)?;
        if src.is_empty() {
            return Err(ModelError::ShapeMismatch("empty source".into()));
        }
        let s = src.len();
        let mut x = self.embed_tokens(p, src, 0);
        for layer in &self.encoder {
            let (h, _) = layer.norm1.forward(p, &x, s);
            let (a, _) = layer.attn.forward(p, &h, s, &h, s, false);
            add_assign(&mut x, &a);
            let (h2, _) = layer.norm2.forward(p, &x, s);
            let (f, _) = layer.ffn.forward(p, &h2, s);
            add_assign(&mut x, &f);
        }
        let (memory, _) = self.enc_norm.forward(p, &x, s);
        let cross_kv = self
            .decoder
            .iter()
            .map(|l| {
                (
                    l.cross_attn.k.forward(p, &memory, s),
                    l.cross_attn.v.forward(p, &memory, s),
                )
            })
            .collect();
        Ok(EncodedSource {
            memory,
            len: s,
            cross_kv,
        })
    }

    pub fn start_state(&self) -> DecoderState {
        DecoderState {
            position: 0,
            self_kv: vec![(Vec::new(), Vec::new()); self.decoder.len()],
        }
    }

    /// Largest number of tokens the decoder can be fed.
    pub fn max_positions(&self) -> usize {
        self.shape.max_positions
    }

    /// Feeds one token and returns log-probabilities of the next one.
    pub fn step(&self, p: &[f64], enc: &EncodedSource, state: &mut DecoderState, token: u32) -> Vec<f64> {
        assert!(
            state.position < self.shape.max_positions,
            "decoder position {} exceeds max_positions",
            state.position
        );
        let d = self.shape.model_dim;
        let mut x = self.embed_tokens(p, &[token], state.position);
        let mut ctx = vec![0.0; d];
        let max_k = (state.position + 1).max(enc.len);
        let mut probs = vec![0.0; self.shape.heads * max_k];
        for (li, layer) in self.decoder.iter().enumerate() {
            let (h, _) = layer.norm1.forward(p, &x, 1);
            let att = &layer.self_attn;
            let q = att.q.forward(p, &h, 1);
            let (ks, vs) = &mut state.self_kv[li];
            ks.extend(att.k.forward(p, &h, 1));
            vs.extend(att.v.forward(p, &h, 1));
            let tk = state.position + 1;
            att.attend_row(&q, ks, vs, tk, &mut ctx, &mut probs, tk);
            add_assign(&mut x, &att.o.forward(p, &ctx, 1));

            let (h2, _) = layer.norm2.forward(p, &x, 1);
            let cross = &layer.cross_attn;
            let q = cross.q.forward(p, &h2, 1);
            let (ck, cv) = &enc.cross_kv[li];
            cross.attend_row(&q, ck, cv, enc.len, &mut ctx, &mut probs, enc.len);
            add_assign(&mut x, &cross.o.forward(p, &ctx, 1));

            let (h3, _) = layer.norm3.forward(p, &x, 1);
            let (f, _) = layer.ffn.forward(p, &h3, 1);
            add_assign(&mut x, &f);
        }
        state.position += 1;
        let (hidden, _) = self.dec_norm.forward(p, &x, 1);
        let mut logits = vec![0.0; self.vocab_size];
        matmul_bt(&hidden, self.embed.of(p), &mut logits, 1, d, self.vocab_size);
        log_softmax_in_place(&mut logits);
        logits
    }
}

fn sinusoids(max_positions: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_positions * d];
    for pos in 0..max_positions {
        for i in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = (pos as f64 * freq).sin();
            pe[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    pe
}
