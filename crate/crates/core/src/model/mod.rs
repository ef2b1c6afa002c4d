//! The toy image tokenizer.
//!
//! Patch-MLP encoder, optional factorization to a narrow latent, optional
//! quantizer, the mirrored expansion, a patch-MLP decoder and a
//! class-embedding contrastive tower. Every stage can be switched off so
//! the same code covers plain autoencoders, contrastive-only encoders and
//! the full quantized tokenizer.

mod attention;
mod config;
mod params;

use std::collections::BTreeMap;

pub use attention::{AttentionProjection, AttentionWeights, Direction};
pub use config::{
    CodebookUpdate, Factorization, ModelConfig, QuantizerConfig, QuantizerKind, SupervisionPoint,
    MAX_TEMPERATURE, MIN_TEMPERATURE,
};
pub use params::{init_normal, init_weight, Bound, ParamStore};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::data::{patchify, unpatchify, ImageTensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, recon_loss, vq_loss, LossReport, LossWeights};
use crate::par::Execution;
use crate::quantize::{random_quantizer, QuantizedToken, Quantizer};

const LOGIT_SCALE: &str = "tower.logit_scale";
const CLASS_EMBEDDINGS: &str = "tower.classes";

/// Images of one batch as patch tokens, with their class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[size * tokens_per_image, patch_len]`.
    patches: Tensor<f32>,
    labels: Vec<usize>,
    size: usize,
}

impl Batch {
    pub fn new(images: &[&ImageTensor], labels: Vec<usize>, patch: usize) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::InvalidParameter(format!(
                "batch of {} images with {} labels",
                images.len(),
                labels.len()
            )));
        }
        let width = 3 * patch * patch;
        let mut data = Vec::new();
        for img in images {
            data.extend(patchify(img, patch)?);
        }
        let rows = data.len() / width;
        Ok(Self {
            patches: Tensor::new(vec![rows, width], data)?,
            labels,
            size: images.len(),
        })
    }

    pub fn from_dataset(ds: &LabeledDataset, indices: &[usize], patch: usize) -> Result<Self> {
        let images: Vec<&ImageTensor> = indices.iter().map(|&i| &ds.images()[i]).collect();
        let labels = indices.iter().map(|&i| ds.labels()[i]).collect();
        Self::new(&images, labels, patch)
    }

    pub fn patches(&self) -> &Tensor<f32> {
        &self.patches
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }
}

/// Everything one forward pass recorded.
#[derive(Debug)]
pub struct Pass {
    pub bound: Bound,
    pub loss: Var,
    pub report: LossReport,
    /// Pre-quantization latents `[tokens, code_dim]`.
    pub latents: Var,
    /// Per-token quantizer output; empty without a quantizer.
    pub codes: Vec<QuantizedToken>,
    /// Reconstructed patches, when the reconstruction term is active.
    pub reconstruction: Option<Var>,
    /// Contrastive logits, when the contrastive term is active.
    pub logits: Option<Var>,
}

/// Outputs of an inference pass, as plain buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `[tokens, code_dim]`.
    pub latents: Vec<f32>,
    pub codes: Vec<QuantizedToken>,
    /// `[tokens, patch_len]`.
    pub reconstruction: Option<Vec<f32>>,
    /// `[batch, width]` at the configured supervision point.
    pub embedding: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerModel {
    config: ModelConfig,
    quantizer_config: QuantizerConfig,
    num_classes: usize,
    params: ParamStore,
    quantizer: Option<Quantizer>,
}

fn block_names(prefix: &str, i: usize) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|p| format!("{prefix}.block{i}.{p}"))
}

impl TokenizerModel {
    /// Fresh model. Every tensor is drawn from its own named stream, so
    /// toggling one stage leaves the other stages' initial values alone.
    pub fn new(
        config: ModelConfig,
        quantizer_config: QuantizerConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        quantizer_config.validate(config.code_dim())?;
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let (c, d, p, t) = (
            config.width,
            config.code_dim(),
            config.patch_len(),
            config.tokens_per_image(),
        );
        let mut ps = ParamStore::new();
        let weight = |ps: &mut ParamStore, name: &str, i: usize, o: usize| {
            ps.insert(name, init_weight(seed, name, i, o));
        };
        weight(&mut ps, "enc.patch.w", p, c);
        ps.insert("enc.patch.b", Tensor::zeros(&[c]));
        ps.insert("enc.pos", init_normal(seed, "enc.pos", &[t, c], 0.02));
        ps.insert("dec.pos", init_normal(seed, "dec.pos", &[t, c], 0.02));
        for prefix in ["enc", "dec"] {
            for i in 0..config.mlp_blocks {
                let [w1, b1, w2, b2] = block_names(prefix, i);
                weight(&mut ps, &w1, c, 2 * c);
                ps.insert(b1, Tensor::zeros(&[2 * c]));
                weight(&mut ps, &w2, 2 * c, c);
                ps.insert(b2, Tensor::zeros(&[c]));
            }
        }
        weight(&mut ps, "dec.out.w", c, p);
        ps.insert("dec.out.b", Tensor::zeros(&[p]));
        match config.factorization {
            Factorization::None => {}
            Factorization::Linear => {
                weight(&mut ps, "factor.w", c, d);
                ps.insert("factor.b", Tensor::zeros(&[d]));
                weight(&mut ps, "expand.w", d, c);
                ps.insert("expand.b", Tensor::zeros(&[c]));
            }
            Factorization::Attention => {
                let (h, hd) = (config.heads, config.latent_dim);
                AttentionProjection::new(h, hd, Direction::Down)?.init(&mut ps, "factor", seed);
                AttentionProjection::new(h, hd, Direction::Up)?.init(&mut ps, "expand", seed);
            }
        }
        ps.insert(
            CLASS_EMBEDDINGS,
            init_normal(seed, CLASS_EMBEDDINGS, &[num_classes, c], 1.0),
        );
        ps.insert(
            LOGIT_SCALE,
            Tensor::filled(&[1], (1.0 / config.temperature).ln() as f32),
        );
        let quantizer = quantizer_config
            .spec()
            .map(|spec| random_quantizer(&spec, d, seed))
            .transpose()?;
        Ok(Self {
            config,
            quantizer_config,
            num_classes,
            params: ps,
            quantizer,
        })
    }

    /// Reassembles a model from stored parts, checking that every expected
    /// parameter is present with the right shape.
    pub fn from_parts(
        config: ModelConfig,
        quantizer_config: QuantizerConfig,
        num_classes: usize,
        params: ParamStore,
        quantizer: Option<Quantizer>,
    ) -> Result<Self> {
        let template = Self::new(config, quantizer_config, num_classes, 0)?;
        let names: Vec<&str> = params.names().collect();
        let expected: Vec<&str> = template.params.names().collect();
        if names != expected {
            return Err(Error::Corrupt(format!(
                "parameter set {names:?} does not match the configured model {expected:?}"
            )));
        }
        for (name, t) in template.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter {name} has shape {:?}, want {:?}",
                    params.get(name)?.shape(),
                    t.shape()
                )));
            }
        }
        match (&template.quantizer, &quantizer) {
            (None, None) => {}
            (Some(a), Some(b))
                if a.scheme() == b.scheme()
                    && a.code_sizes() == b.code_sizes()
                    && a.token_dim() == b.token_dim()
                    && a.codebooks().len() == b.codebooks().len() => {}
            _ => {
                return Err(Error::Corrupt(
                    "quantizer does not match the configuration".into(),
                ))
            }
        }
        Ok(Self {
            params,
            quantizer,
            ..template
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn quantizer_config(&self) -> &QuantizerConfig {
        &self.quantizer_config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn quantizer(&self) -> Option<&Quantizer> {
        self.quantizer.as_ref()
    }

    pub fn quantizer_mut(&mut self) -> Option<&mut Quantizer> {
        self.quantizer.as_mut()
    }

    /// Replaces the quantizer; its shape must match the configuration.
    pub fn set_quantizer(&mut self, q: Quantizer) -> Result<()> {
        let current = self
            .quantizer
            .as_ref()
            .ok_or_else(|| Error::Config("model is configured without a quantizer".into()))?;
        if current.scheme() != q.scheme()
            || current.code_sizes() != q.code_sizes()
            || current.token_dim() != q.token_dim()
            || current.codebooks().len() != q.codebooks().len()
        {
            return Err(Error::InvalidParameter(
                "replacement quantizer has a different shape".into(),
            ));
        }
        self.quantizer = Some(q);
        Ok(())
    }

    /// Contrastive temperature, `exp(-logit_scale)`.
    pub fn temperature(&self) -> f64 {
        let s = self.params.get(LOGIT_SCALE).expect("tower present").item() as f64;
        (-s).exp()
    }

    /// Keeps the temperature inside `[MIN_TEMPERATURE, MAX_TEMPERATURE]`.
    pub fn clamp_temperature(&mut self) {
        let lo = (1.0 / MAX_TEMPERATURE).ln() as f32;
        let hi = (1.0 / MIN_TEMPERATURE).ln() as f32;
        let s = self.params.get_mut(LOGIT_SCALE).expect("tower present");
        let v = &mut s.data_mut()[0];
        *v = v.clamp(lo, hi);
    }

    fn mlp_block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        prefix: &str,
        i: usize,
        h: Var,
    ) -> Result<Var> {
        let [w1, b1, w2, b2] = block_names(prefix, i);
        let n = tape.layer_norm(h);
        let u = tape.matmul(n, b.get(&w1)?)?;
        let u = tape.add_bias(u, b.get(&b1)?)?;
        let u = tape.gelu(u);
        let v = tape.matmul(u, b.get(&w2)?)?;
        let v = tape.add_bias(v, b.get(&b2)?)?;
        tape.add(h, v)
    }

    fn add_positions<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        name: &str,
        h: Var,
        batch: usize,
    ) -> Result<Var> {
        let (t, c) = (self.config.tokens_per_image(), self.config.width);
        let h = tape.reshape(h, &[batch, t, c])?;
        let h = tape.add_bias(h, b.get(name)?)?;
        tape.reshape(h, &[batch * t, c])
    }

    /// `[tokens, patch_len]` patches to `[tokens, width]` encoder tokens.
    pub fn encoder<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        x: Var,
        batch: usize,
    ) -> Result<Var> {
        let h = tape.matmul(x, b.get("enc.patch.w")?)?;
        let h = tape.add_bias(h, b.get("enc.patch.b")?)?;
        let mut h = self.add_positions(tape, b, "enc.pos", h, batch)?;
        for i in 0..self.config.mlp_blocks {
            h = self.mlp_block(tape, b, "enc", i, h)?;
        }
        Ok(tape.layer_norm(h))
    }

    fn attention(&self, direction: Direction) -> AttentionProjection {
        AttentionProjection {
            heads: self.config.heads,
            head_dim: self.config.latent_dim,
            direction,
        }
    }

    fn attention_weights(b: &Bound, prefix: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            query: b.get(&format!("{prefix}.query"))?,
            key: b.get(&format!("{prefix}.key"))?,
            value: b.get(&format!("{prefix}.value"))?,
            output: b.get(&format!("{prefix}.output"))?,
        })
    }

    /// Encoder tokens to quantizer-ready latents.
    pub fn factorize<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, tokens: Var) -> Result<Var> {
        match self.config.factorization {
            Factorization::None => Ok(tokens),
            Factorization::Linear => {
                let f = tape.matmul(tokens, b.get("factor.w")?)?;
                tape.add_bias(f, b.get("factor.b")?)
            }
            Factorization::Attention => {
                let w = Self::attention_weights(b, "factor")?;
                self.attention(Direction::Down).forward(
                    tape,
                    tokens,
                    self.config.tokens_per_image(),
                    &w,
                )
            }
        }
    }

    /// Latents back to `width` channels.
    pub fn expand<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, z: Var) -> Result<Var> {
        match self.config.factorization {
            Factorization::None => Ok(z),
            Factorization::Linear => {
                let e = tape.matmul(z, b.get("expand.w")?)?;
                tape.add_bias(e, b.get("expand.b")?)
            }
            Factorization::Attention => {
                let w = Self::attention_weights(b, "expand")?;
                self.attention(Direction::Up)
                    .forward(tape, z, self.config.tokens_per_image(), &w)
            }
        }
    }

    /// Expanded tokens to `[tokens, patch_len]` pixels in `(0, 1)`.
    pub fn decoder<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        h: Var,
        batch: usize,
    ) -> Result<Var> {
        let mut h = self.add_positions(tape, b, "dec.pos", h, batch)?;
        for i in 0..self.config.mlp_blocks {
            h = self.mlp_block(tape, b, "dec", i, h)?;
        }
        let h = tape.layer_norm(h);
        let out = tape.matmul(h, b.get("dec.out.w")?)?;
        let out = tape.add_bias(out, b.get("dec.out.b")?)?;
        Ok(tape.sigmoid(out))
    }

    /// Mean over each image's tokens: `[batch * T, C] -> [batch, C]`.
    fn pool<T: Real>(&self, tape: &mut Tape<T>, tokens: Var, batch: usize) -> Result<Var> {
        let c = tape.shape(tokens)[1];
        let t = tape.reshape(tokens, &[batch, self.config.tokens_per_image(), c])?;
        tape.mean_pool(t, 1)
    }

    /// Cosine similarity of each embedding to each class embedding,
    /// divided by the temperature: `[batch, width] -> [batch, classes]`.
    pub fn contrastive_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        embedding: Var,
    ) -> Result<Var> {
        let e = tape.normalize_rows(embedding);
        let classes = tape.normalize_rows(b.get(CLASS_EMBEDDINGS)?);
        let ct = tape.transpose(classes)?;
        let sim = tape.matmul(e, ct)?;
        let scale = tape.exp(b.get(LOGIT_SCALE)?);
        tape.scale_by(sim, scale)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (t, p) = (self.config.tokens_per_image(), self.config.patch_len());
        let s = batch.patches.shape();
        if s[1] != p || s[0] != batch.size * t {
            return Err(Error::ShapeMismatch {
                op: "model input",
                detail: format!(
                    "patches {s:?} for {} images, want [*, {p}] with {t} tokens per image",
                    batch.size
                ),
            });
        }
        if let Some(&id) = batch.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::UnknownClass {
                id,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Builds the training objective on `tape` with `params` (the model's
    /// own parameters, possibly cast to another precision).
    ///
    /// Terms whose weight is zero are not built, so e.g. a contrastive-only
    /// run never evaluates the decoder; such terms read 0 in the report.
    /// With gradient-trained codebooks the entries are bound as
    /// `codebook.{i}` parameters.
    pub fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        tape: &mut Tape<T>,
        batch: &Batch,
        weights: &LossWeights,
        exec: Execution,
    ) -> Result<Pass> {
        self.check_batch(batch)?;
        let want_recon = weights.lambda_recon > 0.0;
        let want_contra = weights.lambda_contra > 0.0;
        let mut bound = params.bind(tape);
        let x = tape.constant(batch.patches.cast());
        let tokens = self.encoder(tape, &bound, x, batch.size)?;
        let latents = self.factorize(tape, &bound, tokens)?;

        let mut codes = Vec::new();
        let mut vq_term = None;
        let mut vq_value = 0.0;
        let mut vq_per_codebook = Vec::new();
        let z = match &self.quantizer {
            None => latents,
            Some(q) => {
                let f_vals: Vec<f32> = tape
                    .value(latents)
                    .data()
                    .iter()
                    .map(|&v| Real::to_f32(v))
                    .collect();
                codes = q.encode_batch(exec, &f_vals)?;
                let d = q.token_dim();
                let mut quantized = Vec::with_capacity(f_vals.len());
                for c in &codes {
                    quantized.extend(c.quantized.iter().map(|&v| T::from_f32(v)));
                }
                let f_hat = Tensor::new(vec![codes.len(), d], quantized)?;
                let gradient_books = self.quantizer_config.update == CodebookUpdate::Gradient;
                let coef = if gradient_books {
                    1.0 + weights.beta
                } else {
                    weights.beta
                };
                let n_tok = codes.len() as f64;
                vq_value = coef * codes.iter().map(|c| c.error).sum::<f64>() / n_tok;
                vq_per_codebook = q
                    .codebook_inputs(&f_vals, &codes)
                    .iter()
                    .zip(q.codebooks())
                    .map(|((inputs, chosen), cb)| {
                        let err: f64 = inputs
                            .chunks_exact(cb.dim())
                            .zip(chosen)
                            .map(|(v, &i)| crate::quantize::sq_dist_f64(v, cb.entry(i)))
                            .sum();
                        coef * err / n_tok
                    })
                    .collect();
                if weights.lambda_vq > 0.0 {
                    let target = if gradient_books {
                        let books: Vec<Var> = q
                            .codebooks()
                            .iter()
                            .enumerate()
                            .map(|(i, cb)| {
                                let t =
                                    Tensor::new(vec![cb.size(), cb.dim()], cb.entries().to_vec())
                                        .expect("codebook shape")
                                        .cast();
                                let v = tape.param(t);
                                bound.insert(format!("codebook.{i}"), v);
                                v
                            })
                            .collect();
                        self.assemble_codes(tape, q, &books, &codes)?
                    } else {
                        tape.constant(f_hat.clone())
                    };
                    let term = vq_loss(tape, latents, target, weights.beta, gradient_books)?;
                    vq_value = Real::to_f64(tape.value(term).item());
                    vq_term = Some(term);
                }
                tape.straight_through(latents, f_hat)?
            }
        };

        let post_quant = self.config.supervision == SupervisionPoint::PostQuantization;
        let expanded = if want_recon || (want_contra && post_quant) {
            Some(self.expand(tape, &bound, z)?)
        } else {
            None
        };
        let mut logits = None;
        let mut contra_term = None;
        if want_contra {
            let source = if post_quant {
                expanded.expect("built above")
            } else {
                tokens
            };
            let emb = self.pool(tape, source, batch.size)?;
            let l = self.contrastive_logits(tape, &bound, emb)?;
            contra_term = Some(contrastive_loss(tape, l, &batch.labels)?);
            logits = Some(l);
        }
        let mut reconstruction = None;
        let mut recon_term = None;
        if want_recon {
            let out = self.decoder(tape, &bound, expanded.expect("built above"), batch.size)?;
            recon_term = Some(recon_loss(tape, x, out)?);
            reconstruction = Some(out);
        }

        let mut total: Option<Var> = None;
        for (term, w) in [
            (recon_term, weights.lambda_recon),
            (vq_term, weights.lambda_vq),
            (contra_term, weights.lambda_contra),
        ] {
            if let Some(t) = term {
                let scaled = if w == 1.0 {
                    t
                } else {
                    tape.scale(t, T::from_f64(w))
                };
                total = Some(match total {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled)?,
                });
            }
        }
        let loss = total.ok_or_else(|| Error::Config("every loss term has zero weight".into()))?;
        let read =
            |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| Real::to_f64(tape.value(v).item()));
        let report = LossReport::compose(
            read(tape, recon_term),
            vq_value,
            read(tape, contra_term),
            vq_per_codebook,
            weights,
        )?;
        Ok(Pass {
            bound,
            loss,
            report,
            latents,
            codes,
            reconstruction,
            logits,
        })
    }

    /// The quantized tokens as a differentiable function of the codebook
    /// entries.
    fn assemble_codes<T: Real>(
        &self,
        tape: &mut Tape<T>,
        q: &Quantizer,
        books: &[Var],
        codes: &[QuantizedToken],
    ) -> Result<Var> {
        let column = |level: usize| codes.iter().map(|c| c.indices[level]).collect::<Vec<_>>();
        match q {
            Quantizer::Vq(_) => tape.gather_rows(books[0], &column(0)),
            Quantizer::Mcq(m) => {
                let parts = (0..m.num_sub_codebooks())
                    .map(|j| tape.gather_rows(books[j], &column(j)))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_last(&parts)
            }
            Quantizer::Rq(r) => {
                let mut acc = tape.gather_rows(books[r.slot(0)], &column(0))?;
                for level in 1..r.num_levels() {
                    let g = tape.gather_rows(books[r.slot(level)], &column(level))?;
                    acc = tape.add(acc, g)?;
                }
                Ok(acc)
            }
        }
    }

    /// Runs the network without building a loss.
    pub fn infer(
        &self,
        batch: &Batch,
        reconstruct: bool,
        embed: bool,
        exec: Execution,
    ) -> Result<Inference> {
        self.check_batch(batch)?;
        let mut tape = Tape::<f32>::new();
        let b = self.params.bind(&mut tape);
        let x = tape.constant(batch.patches.clone());
        let tokens = self.encoder(&mut tape, &b, x, batch.size)?;
        let f = self.factorize(&mut tape, &b, tokens)?;
        let latents = tape.value(f).data().to_vec();
        let (codes, z) = match &self.quantizer {
            None => (Vec::new(), f),
            Some(q) => {
                let codes = q.encode_batch(exec, &latents)?;
                let data = codes
                    .iter()
                    .flat_map(|c| c.quantized.iter().copied())
                    .collect();
                let t = Tensor::new(vec![codes.len(), q.token_dim()], data)?;
                (codes, tape.constant(t))
            }
        };
        let post_quant = self.config.supervision == SupervisionPoint::PostQuantization;
        let expanded = if reconstruct || (embed && post_quant) {
            Some(self.expand(&mut tape, &b, z)?)
        } else {
            None
        };
        let embedding = if embed {
            let src = if post_quant {
                expanded.expect("built")
            } else {
                tokens
            };
            let e = self.pool(&mut tape, src, batch.size)?;
            Some(tape.value(e).data().to_vec())
        } else {
            None
        };
        let reconstruction = match (reconstruct, expanded) {
            (true, Some(h)) => {
                let out = self.decoder(&mut tape, &b, h, batch.size)?;
                Some(tape.value(out).data().to_vec())
            }
            _ => None,
        };
        Ok(Inference {
            latents,
            codes,
            reconstruction,
            embedding,
        })
    }

    /// Latent tokens (`[T, code_dim]`) and the pre-factorization pooled
    /// embedding of one image.
    pub fn encode(&self, image: &ImageTensor) -> Result<(Tensor<f32>, Vec<f32>)> {
        let batch = Batch::new(&[image], vec![0], self.config.patch_size)?;
        let mut tape = Tape::<f32>::new();
        let b = self.params.bind(&mut tape);
        let x = tape.constant(batch.patches.clone());
        let tokens = self.encoder(&mut tape, &b, x, 1)?;
        let f = self.factorize(&mut tape, &b, tokens)?;
        let e = self.pool(&mut tape, tokens, 1)?;
        Ok((tape.value(f).clone(), tape.value(e).data().to_vec()))
    }

    /// Decodes `[T, code_dim]` latents (quantized or not) to an image.
    pub fn decode(&self, latents: &Tensor<f32>) -> Result<ImageTensor> {
        let (t, d) = (self.config.tokens_per_image(), self.config.code_dim());
        if latents.shape() != [t, d] {
            return Err(Error::ShapeMismatch {
                op: "decode",
                detail: format!("latents {:?}, want [{t}, {d}]", latents.shape()),
            });
        }
        let mut tape = Tape::<f32>::new();
        let b = self.params.bind(&mut tape);
        let z = tape.constant(latents.clone());
        let h = self.expand(&mut tape, &b, z)?;
        let out = self.decoder(&mut tape, &b, h, 1)?;
        let s = self.config.image_size;
        unpatchify(tape.value(out).data(), s, s, self.config.patch_size)
    }

    /// Class logits for embeddings produced by [`Self::infer`].
    pub fn class_logits(&self, embedding: &[f32], batch: usize) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let b = self.params.bind(&mut tape);
        let e = tape.constant(Tensor::new(
            vec![batch, self.config.width],
            embedding.to_vec(),
        )?);
        let l = self.contrastive_logits(&mut tape, &b, e)?;
        Ok(tape.value(l).clone())
    }
}

/// Gradient of every bound parameter, zero where backward never reached.
pub fn gradients<T: Real>(tape: &Tape<T>, bound: &Bound) -> BTreeMap<String, Tensor<T>> {
    bound
        .iter()
        .map(|(name, v)| {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            (name.to_string(), g)
        })
        .collect()
}
