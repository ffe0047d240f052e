//! Transformer captioner: region encoder, memory attention over the group,
//! and an autoregressive word decoder.

mod checkpoint;
mod decode;
mod layers;

use groupcap_tensor::{Constraint, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use decode::{DecoderState, Decoded};

use crate::corpus::vocab::BOS;
use crate::gma::{self, GmaParams, GmaResult, GmaVars};
use crate::{Error, Result};
use layers::{Attention, FeedForward, Norm};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Region feature width `d`.
    pub feature_dim: usize,
    /// Memory width `d_m`.
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Longest caption in words, `T_max`.
    pub max_len: usize,
    pub vocab_size: usize,
    /// Re-weight the target memory with group attention before decoding.
    pub use_gma: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Small defaults suited to synthetic corpora.
    pub fn desk(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            feature_dim,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 20,
            vocab_size,
            use_gma: true,
            init_seed: 0,
        }
    }

    /// Widths used for full-size region features.
    pub fn paper_scale(vocab_size: usize) -> Self {
        Self {
            feature_dim: 2048,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            enc_layers: 3,
            dec_layers: 3,
            ..Self::desk(2048, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2 for layer normalization".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model = {} is not divisible by heads = {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!("vocab_size = {} leaves no words", self.vocab_size)));
        }
        Ok(())
    }
}

/// Linear bag-of-words classifier over the mean-pooled weighted memory.
#[derive(Clone, Copy, Debug)]
pub struct MemClassifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl MemClassifier {
    /// Per-word log-probabilities `log sigmoid(mean(M') W + b)`, shape `[v]`.
    pub fn log_probs(&self, g: &mut Graph, store: &ParamStore, memory: Var) -> Result<Var> {
        let pooled = g.mean_axis0(memory)?;
        let d = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[1, d])?;
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        let z = g.matmul(pooled, w)?;
        let z = g.add_row(z, b)?;
        let v = g.shape(z)[1];
        let z = g.reshape(z, &[v])?;
        Ok(g.log_sigmoid(z))
    }
}

struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross: Attention,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

/// Parameter initializer: Xavier-uniform weights from a seeded stream.
struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-a..a)).collect();
        Ok(self.store.add(name, Tensor::new(vec![rows, cols], data)?, Constraint::None)?)
    }

    fn fill(&mut self, name: &str, len: usize, value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(&[len], value), Constraint::None)?)
    }
}

pub struct Captioner {
    config: ModelConfig,
    pub params: ParamStore,
    input_w: ParamId,
    input_b: ParamId,
    encoder: Vec<EncoderLayer>,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
    pub gma: GmaParams,
    pub classifier: MemClassifier,
    positions: Tensor,
}

impl Captioner {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let (d, dm, ff, v) = (config.feature_dim, config.d_model, config.d_ff, config.vocab_size);
        let input_w = init.weight("enc.in.w", d, dm)?;
        let input_b = init.fill("enc.in.b", dm, 0.0)?;
        let mut encoder = Vec::with_capacity(config.enc_layers);
        for l in 0..config.enc_layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                attn: Attention::new(&mut init, &format!("{p}.attn"), dm)?,
                norm1: Norm::new(&mut init, &format!("{p}.ln1"), dm)?,
                ff: FeedForward::new(&mut init, &format!("{p}.ff"), dm, ff)?,
                norm2: Norm::new(&mut init, &format!("{p}.ln2"), dm)?,
            });
        }
        let embed = init.weight("dec.embed", v, dm)?;
        let mut decoder = Vec::with_capacity(config.dec_layers);
        for l in 0..config.dec_layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                self_attn: Attention::new(&mut init, &format!("{p}.self"), dm)?,
                norm1: Norm::new(&mut init, &format!("{p}.ln1"), dm)?,
                cross: Attention::new(&mut init, &format!("{p}.cross"), dm)?,
                norm2: Norm::new(&mut init, &format!("{p}.ln2"), dm)?,
                ff: FeedForward::new(&mut init, &format!("{p}.ff"), dm, ff)?,
                norm3: Norm::new(&mut init, &format!("{p}.ln3"), dm)?,
            });
        }
        let out_w = init.weight("dec.out.w", dm, v)?;
        let out_b = init.fill("dec.out.b", v, 0.0)?;
        let classifier = MemClassifier {
            weight: init.weight("mc.w", dm, v)?,
            bias: init.fill("mc.b", v, 0.0)?,
        };
        let gma = GmaParams::register(init.store)?;
        let positions = sinusoids(config.max_len + 1, dm);
        Ok(Self {
            config,
            params,
            input_w,
            input_b,
            encoder,
            embed,
            decoder,
            out_w,
            out_b,
            gma,
            classifier,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Memory vectors `N × d_m` for region features `N × d`.
    pub fn encode_graph(&self, g: &mut Graph, features: &Tensor) -> Result<Var> {
        if features.rank() != 2 || features.cols() != self.config.feature_dim || features.rows() == 0 {
            return Err(Error::Shape(format!(
                "features of shape {:?}, expected [N, {}]",
                features.shape(),
                self.config.feature_dim
            )));
        }
        let x = g.constant(features.clone());
        let (w, b) = (g.param(&self.params, self.input_w), g.param(&self.params, self.input_b));
        let x = g.matmul(x, w)?;
        let mut x = g.add_row(x, b)?;
        for layer in &self.encoder {
            let att = layer.attn.forward(g, &self.params, x, x, self.config.heads, None)?;
            let h = g.add(x, att)?;
            let h = layer.norm1.forward(g, &self.params, h)?;
            let f = layer.ff.forward(g, &self.params, h)?;
            let h2 = g.add(h, f)?;
            x = layer.norm2.forward(g, &self.params, h2)?;
        }
        Ok(x)
    }

    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.encode_graph(&mut g, features)?;
        Ok(g.value(m).clone())
    }

    /// Memory fed to the decoder for `memories[target]`: group-attention
    /// weighted when enabled, otherwise the raw memory.
    pub fn target_memory(&self, g: &mut Graph, memories: &[Var], target: usize) -> Result<(Var, Option<GmaVars>)> {
        let m0 = memories[target];
        if !self.config.use_gma {
            return Ok((m0, None));
        }
        let others: Vec<Var> = memories.iter().enumerate().filter(|&(k, _)| k != target).map(|(_, &m)| m).collect();
        let omega = g.param(&self.params, self.gma.omega);
        let bias = g.param(&self.params, self.gma.bias);
        let vars = gma::attention_graph(g, m0, &others, omega, bias)?;
        Ok((vars.weighted_memory, Some(vars)))
    }

    /// Decoder memory for one member of a group, given every member's features.
    pub fn group_memory(&self, features: &[&Tensor], target: usize) -> Result<(Tensor, Option<GmaResult>)> {
        let mut g = Graph::new();
        let mems = features.iter().map(|f| self.encode_graph(&mut g, f)).collect::<Result<Vec<_>>>()?;
        let (m, vars) = self.target_memory(&mut g, &mems, target)?;
        Ok((g.value(m).clone(), vars.map(|v| gma::read_result(&g, &v))))
    }

    /// Log-probabilities `[len(prefix), v]`; row `t` predicts the token after
    /// `prefix[..=t]`.
    pub fn decode_log_probs(&self, g: &mut Graph, memory: Var, prefix: &[usize]) -> Result<Var> {
        let logits = self.decode_logits(g, memory, prefix)?;
        Ok(g.log_softmax(logits))
    }

    pub fn decode_logits(&self, g: &mut Graph, memory: Var, prefix: &[usize]) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Decode("prefix must start with BOS".into()));
        }
        if prefix.len() > self.config.max_len + 1 {
            return Err(Error::Decode(format!(
                "prefix of {} tokens exceeds the limit of {}",
                prefix.len(),
                self.config.max_len + 1
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Decode(format!("token id {bad} outside vocabulary")));
        }
        if g.shape(memory).len() != 2 || g.shape(memory)[1] != self.config.d_model {
            return Err(Error::Shape(format!("memory of shape {:?}", g.shape(memory))));
        }
        let t = prefix.len();
        let dm = self.config.d_model;
        let table = g.param(&self.params, self.embed);
        let emb = g.gather_rows(table, prefix)?;
        let pos = g.constant(Tensor::new(vec![t, dm], self.positions.data()[..t * dm].to_vec())?);
        let mut x = g.add(emb, pos)?;
        let mask = g.constant(causal_mask(t));
        for layer in &self.decoder {
            let sa = layer.self_attn.forward(g, &self.params, x, x, self.config.heads, Some(mask))?;
            let h = g.add(x, sa)?;
            let h = layer.norm1.forward(g, &self.params, h)?;
            let ca = layer.cross.forward(g, &self.params, h, memory, self.config.heads, None)?;
            let h2 = g.add(h, ca)?;
            let h2 = layer.norm2.forward(g, &self.params, h2)?;
            let f = layer.ff.forward(g, &self.params, h2)?;
            let h3 = g.add(h2, f)?;
            x = layer.norm3.forward(g, &self.params, h3)?;
        }
        let (w, b) = (g.param(&self.params, self.out_w), g.param(&self.params, self.out_b));
        let z = g.matmul(x, w)?;
        Ok(g.add_row(z, b)?)
    }
}

fn sinusoids(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 / rate;
            data[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("sized")
}

/// Additive mask hiding future positions.
fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = -1e9;
        }
    }
    m
}
