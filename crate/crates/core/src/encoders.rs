//! Toy text and image encoders sharing one embedding space.
//!
//! Parameters live in a flat, ordered, named list so that optimizers and
//! checkpoints can treat the model uniformly; [`Layout`] records which list
//! slot holds which weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{TokenSequence, Vocabulary};
use crate::error::{ensure, Result};
use crate::numerics::{Matrix, Scalar, Segment, Tape, Var};
use crate::stretch::StretchSpec;

/// Bounds on the logit scale `exp(t)`.
pub const LOGIT_SCALE_MIN: f64 = 1.0;
pub const LOGIT_SCALE_MAX: f64 = 100.0;

const EMBEDDING_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of each block's MLP as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub d_embed: usize,
    pub image_grid: usize,
    pub image_feature_dim: usize,
    pub init_seed: u64,
    /// Initial log logit scale.
    pub temperature_init: f64,
    /// How the text positional table was stretched, if it was.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stretch: Option<StretchSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocabulary::standard().len(),
            context_len: 77,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4,
            d_embed: 64,
            image_grid: 4,
            image_feature_dim: 24,
            init_seed: 0,
            temperature_init: (1.0f64 / 0.07).ln(),
            stretch: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size > 4, "vocab_size must exceed the reserved block");
        ensure!(self.context_len >= 3, "context_len must be at least 3");
        ensure!(
            self.n_heads > 0 && self.d_model % self.n_heads == 0,
            "d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(self.d_embed >= 8, "d_embed must be at least 8");
        ensure!(self.n_layers >= 1 && self.mlp_ratio >= 1, "need at least one layer and mlp_ratio ≥ 1");
        ensure!(
            self.image_grid >= 1 && self.image_feature_dim >= 1,
            "image grid and feature dim must be positive"
        );
        ensure!(self.temperature_init.is_finite(), "temperature_init must be finite");
        Ok(())
    }

    /// A minimal model for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            context_len: 24,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            d_embed: 8,
            image_grid: 2,
            image_feature_dim: 4,
            init_seed: 5,
            ..Self::default()
        }
    }

    pub fn image_cells(&self) -> usize {
        self.image_grid * self.image_grid
    }
}

/// Learned absolute positional embeddings, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable<T: Scalar = f32> {
    pub table: Matrix<T>,
    pub trainable: bool,
}

impl<T: Scalar> PositionalTable<T> {
    pub fn new(table: Matrix<T>) -> Self {
        Self {
            table,
            trainable: true,
        }
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1_gain: usize,
    ln1_bias: usize,
    qkv_weight: usize,
    q_bias: usize,
    v_bias: usize,
    out_weight: usize,
    out_bias: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    fc1_weight: usize,
    fc1_bias: usize,
    fc2_weight: usize,
    fc2_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    token_embedding: usize,
    positional: usize,
    text_blocks: Vec<BlockLayout>,
    text_ln_gain: usize,
    text_ln_bias: usize,
    text_projection: usize,
    image_in_weight: usize,
    image_in_bias: usize,
    image_positional: usize,
    image_blocks: Vec<BlockLayout>,
    image_ln_gain: usize,
    image_ln_bias: usize,
    image_projection: usize,
    temperature: usize,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Const(f64),
}

struct Builder<'a> {
    names: Vec<String>,
    params: Vec<Matrix<f64>>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let m = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Const(c) => Matrix::filled(rows, cols, c),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Matrix::from_fn(rows, cols, |_, _| dist.sample(self.rng))
            }
        };
        self.names.push(name);
        self.params.push(m);
        self.params.len() - 1
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize) -> BlockLayout {
        let w = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
        BlockLayout {
            ln1_gain: self.add(format!("{prefix}.ln1.gain"), 1, d, Init::Ones),
            ln1_bias: self.add(format!("{prefix}.ln1.bias"), 1, d, Init::Zeros),
            qkv_weight: self.add(format!("{prefix}.attn.qkv.weight"), d, 3 * d, w(d)),
            // no key bias: it shifts all of a query's attention logits equally
            q_bias: self.add(format!("{prefix}.attn.q.bias"), 1, d, Init::Zeros),
            v_bias: self.add(format!("{prefix}.attn.v.bias"), 1, d, Init::Zeros),
            out_weight: self.add(format!("{prefix}.attn.out.weight"), d, d, w(d)),
            out_bias: self.add(format!("{prefix}.attn.out.bias"), 1, d, Init::Zeros),
            ln2_gain: self.add(format!("{prefix}.ln2.gain"), 1, d, Init::Ones),
            ln2_bias: self.add(format!("{prefix}.ln2.bias"), 1, d, Init::Zeros),
            fc1_weight: self.add(format!("{prefix}.mlp.fc1.weight"), d, hidden, w(d)),
            fc1_bias: self.add(format!("{prefix}.mlp.fc1.bias"), 1, hidden, Init::Zeros),
            fc2_weight: self.add(format!("{prefix}.mlp.fc2.weight"), hidden, d, w(hidden)),
            fc2_bias: self.add(format!("{prefix}.mlp.fc2.bias"), 1, d, Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Vec<String>, Vec<Matrix<f64>>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut b = Builder {
        names: Vec::new(),
        params: Vec::new(),
        rng: &mut rng,
    };
    let d = cfg.d_model;
    let hidden = d * cfg.mlp_ratio;
    let emb = Init::Normal(EMBEDDING_STD);
    let token_embedding = b.add("text.token_embedding".into(), cfg.vocab_size, d, emb);
    let positional = b.add("text.positional".into(), cfg.context_len, d, Init::Normal(EMBEDDING_STD));
    let text_blocks = (0..cfg.n_layers)
        .map(|i| b.block(&format!("text.blocks.{i}"), d, hidden))
        .collect();
    let text_ln_gain = b.add("text.ln_final.gain".into(), 1, d, Init::Ones);
    let text_ln_bias = b.add("text.ln_final.bias".into(), 1, d, Init::Zeros);
    let text_projection = b.add(
        "text.projection".into(),
        d,
        cfg.d_embed,
        Init::Normal(1.0 / (d as f64).sqrt()),
    );
    let image_in_weight = b.add(
        "image.input.weight".into(),
        cfg.image_feature_dim,
        d,
        Init::Normal(1.0 / (cfg.image_feature_dim as f64).sqrt()),
    );
    let image_in_bias = b.add("image.input.bias".into(), 1, d, Init::Normal(EMBEDDING_STD));
    let image_positional = b.add(
        "image.positional".into(),
        cfg.image_cells(),
        d,
        Init::Normal(EMBEDDING_STD),
    );
    let image_blocks = (0..cfg.n_layers)
        .map(|i| b.block(&format!("image.blocks.{i}"), d, hidden))
        .collect();
    let image_ln_gain = b.add("image.ln_final.gain".into(), 1, d, Init::Ones);
    let image_ln_bias = b.add("image.ln_final.bias".into(), 1, d, Init::Zeros);
    let image_projection = b.add(
        "image.projection".into(),
        d,
        cfg.d_embed,
        Init::Normal(1.0 / (d as f64).sqrt()),
    );
    let temperature = b.add("temperature".into(), 1, 1, Init::Const(cfg.temperature_init));
    let layout = Layout {
        token_embedding,
        positional,
        text_blocks,
        text_ln_gain,
        text_ln_bias,
        text_projection,
        image_in_weight,
        image_in_bias,
        image_positional,
        image_blocks,
        image_ln_gain,
        image_ln_bias,
        image_projection,
        temperature,
    };
    (b.names, b.params, layout)
}

/// Text tower, image tower and learned temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Matrix<T>>,
    layout: Layout,
}

/// Parameter handles of one model on one tape, aligned with
/// [`DualEncoder::param_names`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> DualEncoder<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, params, layout) = build_layout(&config);
        Ok(Self {
            config,
            names,
            params: params.iter().map(Matrix::cast).collect(),
            layout,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint payload).
    pub fn from_params(config: ModelConfig, named: Vec<(String, Matrix<T>)>) -> Result<Self> {
        config.validate()?;
        let (names, shapes, layout) = build_layout(&config);
        ensure!(
            named.len() == names.len(),
            "expected {} tensors, found {}",
            names.len(),
            named.len()
        );
        let mut params = Vec::with_capacity(named.len());
        for ((name, m), (want, shape)) in named.into_iter().zip(names.iter().zip(&shapes)) {
            ensure!(&name == want, "tensor {name} found where {want} was expected");
            ensure!(
                m.shape() == shape.shape(),
                "tensor {name} has shape {:?}, expected {:?}",
                m.shape(),
                shape.shape()
            );
            ensure!(m.is_finite(), "tensor {name} has non-finite entries");
            params.push(m);
        }
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DualEncoder<U> {
        DualEncoder {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Matrix::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn positional_table(&self) -> PositionalTable<T> {
        PositionalTable::new(self.params[self.layout.positional].clone())
    }

    /// Swaps in a positional table of any length; `context_len` follows it.
    pub fn set_positional_table(&mut self, pe: PositionalTable<T>) -> Result<()> {
        ensure!(
            pe.table.cols() == self.config.d_model,
            "positional table width {} does not match d_model {}",
            pe.table.cols(),
            self.config.d_model
        );
        ensure!(pe.len() >= 3, "positional table needs at least 3 rows");
        ensure!(pe.table.is_finite(), "positional table has non-finite entries");
        self.config.context_len = pe.len();
        self.params[self.layout.positional] = pe.table;
        Ok(())
    }

    pub fn positional_index(&self) -> usize {
        self.layout.positional
    }

    pub fn temperature_index(&self) -> usize {
        self.layout.temperature
    }

    /// Records the stretch that produced the current positional table.
    pub fn mark_stretched(&mut self, spec: StretchSpec) {
        self.config.stretch = Some(spec);
    }

    pub fn temperature(&self) -> T {
        self.params[self.layout.temperature].item()
    }

    /// `exp(t)` clamped to `[1, 100]`.
    pub fn logit_scale(&self) -> T {
        let t = self.temperature().as_f64();
        T::of(t.exp().clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX))
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (frozen copy).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.constant(p.clone())).collect(),
        }
    }

    fn block_forward(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        b: &BlockLayout,
        x: Var,
        segments: &[Segment],
    ) -> Result<Var> {
        let h = tape.layer_norm(x, p[b.ln1_gain], p[b.ln1_bias])?;
        let qkv = tape.matmul(h, p[b.qkv_weight])?;
        let no_key_bias = tape.constant(Matrix::zeros(1, self.config.d_model));
        let bias = tape.concat_cols(&[p[b.q_bias], no_key_bias, p[b.v_bias]])?;
        let qkv = tape.add_row(qkv, bias)?;
        let a = tape.attention(qkv, segments, self.config.n_heads)?;
        let o = tape.matmul(a, p[b.out_weight])?;
        let o = tape.add_row(o, p[b.out_bias])?;
        let x = tape.add(x, o)?;
        let h = tape.layer_norm(x, p[b.ln2_gain], p[b.ln2_bias])?;
        let f = tape.matmul(h, p[b.fc1_weight])?;
        let f = tape.add_row(f, p[b.fc1_bias])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, p[b.fc2_weight])?;
        let f = tape.add_row(f, p[b.fc2_bias])?;
        tape.add(x, f)
    }

    /// Unit-norm text embeddings, one row per sequence, pooled at each EOT.
    pub fn text_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        seqs: &[&TokenSequence],
    ) -> Result<Var> {
        ensure!(!seqs.is_empty(), "text batch is empty");
        let p = &bound.vars;
        let l = &self.layout;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut eot_rows = Vec::with_capacity(seqs.len());
        for s in seqs {
            ensure!(
                s.len() <= self.config.context_len,
                "token sequence of length {} exceeds context length {}",
                s.len(),
                self.config.context_len
            );
            ensure!(
                s.ids().iter().all(|&id| (id as usize) < self.config.vocab_size),
                "token id out of vocabulary range"
            );
            segments.push(Segment {
                start: ids.len(),
                len: s.len(),
            });
            eot_rows.push(ids.len() + s.eot_position());
            ids.extend(s.ids().iter().map(|&i| i as usize));
            positions.extend(0..s.len());
        }
        let tok = tape.gather(p[l.token_embedding], &ids)?;
        let pos = tape.gather(p[l.positional], &positions)?;
        let mut x = tape.add(tok, pos)?;
        for b in &l.text_blocks {
            x = self.block_forward(tape, p, b, x, &segments)?;
        }
        let x = tape.layer_norm(x, p[l.text_ln_gain], p[l.text_ln_bias])?;
        let pooled = tape.gather(x, &eot_rows)?;
        let e = tape.matmul(pooled, p[l.text_projection])?;
        tape.row_l2_normalize(e)
    }

    /// Unit-norm image embeddings, one row per image, mean-pooled over cells.
    pub fn image_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        images: &[&Matrix<f32>],
    ) -> Result<Var> {
        ensure!(!images.is_empty(), "image batch is empty");
        let p = &bound.vars;
        let l = &self.layout;
        let cells = self.config.image_cells();
        let fdim = self.config.image_feature_dim;
        let mut data = Vec::with_capacity(images.len() * cells * fdim);
        for img in images {
            ensure!(
                img.shape() == (cells, fdim),
                "image shape {:?} does not match grid ({cells}, {fdim})",
                img.shape()
            );
            data.extend(img.data().iter().map(|&v| T::of(v as f64)));
        }
        let segments: Vec<Segment> = (0..images.len())
            .map(|i| Segment {
                start: i * cells,
                len: cells,
            })
            .collect();
        let positions: Vec<usize> = (0..images.len()).flat_map(|_| 0..cells).collect();
        let input = tape.constant(Matrix::from_vec(images.len() * cells, fdim, data)?);
        let x = tape.matmul(input, p[l.image_in_weight])?;
        let x = tape.add_row(x, p[l.image_in_bias])?;
        let pos = tape.gather(p[l.image_positional], &positions)?;
        let mut x = tape.add(x, pos)?;
        for b in &l.image_blocks {
            x = self.block_forward(tape, p, b, x, &segments)?;
        }
        let x = tape.layer_norm(x, p[l.image_ln_gain], p[l.image_ln_bias])?;
        let pooled = tape.segment_mean(x, &segments)?;
        let e = tape.matmul(pooled, p[l.image_projection])?;
        tape.row_l2_normalize(e)
    }

    /// `clamp(exp(t))` as a differentiable `1 × 1` node.
    pub fn logit_scale_var(&self, tape: &mut Tape<T>, bound: &BoundParams) -> Result<Var> {
        tape.exp_clamp(
            bound.vars[self.layout.temperature],
            T::of(LOGIT_SCALE_MIN),
            T::of(LOGIT_SCALE_MAX),
        )
    }

    pub fn encode_texts(&self, seqs: &[&TokenSequence]) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let v = self.text_forward(&mut tape, &bound, seqs)?;
        Ok(tape.value(v).clone())
    }

    pub fn encode_images(&self, images: &[&Matrix<f32>]) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let v = self.image_forward(&mut tape, &bound, images)?;
        Ok(tape.value(v).clone())
    }

    /// Embeds many sequences in chunks of `chunk`.
    pub fn encode_texts_chunked(&self, seqs: &[TokenSequence], chunk: usize) -> Result<Matrix<T>> {
        let parts: Vec<Matrix<T>> = seqs
            .chunks(chunk.max(1))
            .map(|c| self.encode_texts(&c.iter().collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Matrix::vstack(&parts.iter().collect::<Vec<_>>())
    }

    pub fn encode_images_chunked(&self, images: &[&Matrix<f32>], chunk: usize) -> Result<Matrix<T>> {
        let parts: Vec<Matrix<T>> = images
            .chunks(chunk.max(1))
            .map(|c| self.encode_images(c))
            .collect::<Result<_>>()?;
        Matrix::vstack(&parts.iter().collect::<Vec<_>>())
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Vec<T>> {
        Ok(self.encode_texts(&[tokens])?.into_vec())
    }

    pub fn encode_image(&self, image: &Matrix<f32>) -> Result<Vec<T>> {
        Ok(self.encode_images(&[image])?.into_vec())
    }
}
