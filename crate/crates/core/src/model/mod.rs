//! Encoder-decoder transformer.
//!
//! Post-norm blocks: every sub-layer output is added to its input and then
//! layer-normalised. Token embeddings are shared between the encoder, the
//! decoder and the output projection; each side has its own learned absolute
//! position table.

mod attention;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Parameters, Tensor, Var};

pub use attention::{causal_mask, multi_head_attention, scaled_dot_attention, AttentionOutput};

/// Token id treated as padding by the encoder and used as the decoder start token.
pub const PAD_ID: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            vocab_size: 2000,
            max_seq_len: 256,
            eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("model.eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Parameter indices of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttnIds,
    ln1: NormIds,
    ffn: FfnIds,
    ln2: NormIds,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttnIds,
    ln1: NormIds,
    cross_attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
    ln3: NormIds,
}

/// Encoder output plus the key mask later used by cross-attention.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub hidden: Var,
    pub key_mask: Vec<bool>,
}

/// Parameter layout of the transformer, resolved once against a [`Parameters`] set.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    cfg: ModelConfig,
    embed: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v, l) = (cfg.model_dim, cfg.ff_dim, cfg.vocab_size, cfg.max_seq_len);
    let mut specs = vec![
        ("shared.embed".to_string(), vec![v, d], Init::Normal(d)),
        ("enc.pos_embed".to_string(), vec![l, d], Init::Normal(d)),
        ("dec.pos_embed".to_string(), vec![l, d], Init::Normal(d)),
    ];
    let attn = |specs: &mut Vec<_>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.{w}"), vec![d, d], Init::Normal(d)));
        }
    };
    let norm = |specs: &mut Vec<_>, prefix: &str| {
        specs.push((format!("{prefix}.gain"), vec![d], Init::Ones));
        specs.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
    };
    let ffn = |specs: &mut Vec<_>, prefix: &str| {
        specs.push((format!("{prefix}.w1"), vec![d, f], Init::Normal(d)));
        specs.push((format!("{prefix}.b1"), vec![f], Init::Zeros));
        specs.push((format!("{prefix}.w2"), vec![f, d], Init::Normal(f)));
        specs.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
    };
    for i in 0..cfg.num_layers {
        let p = format!("enc.layer{i}");
        attn(&mut specs, &format!("{p}.attn"));
        norm(&mut specs, &format!("{p}.ln1"));
        ffn(&mut specs, &format!("{p}.ffn"));
        norm(&mut specs, &format!("{p}.ln2"));
    }
    for i in 0..cfg.num_layers {
        let p = format!("dec.layer{i}");
        attn(&mut specs, &format!("{p}.self_attn"));
        norm(&mut specs, &format!("{p}.ln1"));
        attn(&mut specs, &format!("{p}.cross_attn"));
        norm(&mut specs, &format!("{p}.ln2"));
        ffn(&mut specs, &format!("{p}.ffn"));
        norm(&mut specs, &format!("{p}.ln3"));
    }
    specs
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    Normal(usize),
    Ones,
    Zeros,
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params<F: Float>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new(seed);
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Normal(fan_in) => {
                let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| F::c(dist.sample(&mut rng))).collect()
            }
            Init::Ones => vec![F::one(); n],
            Init::Zeros => vec![F::zero(); n],
        };
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

impl Seq2Seq {
    /// Resolves parameter names and checks every shape against `cfg`.
    pub fn new<F: Float>(cfg: &ModelConfig, params: &Parameters<F>) -> Result<Self> {
        cfg.validate()?;
        for (name, shape, _) in param_specs(cfg) {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", t.shape(), &shape));
            }
        }
        let id = |name: String| params.index_of(&name).expect("checked above");
        let attn = |p: &str| AttnIds {
            wq: id(format!("{p}.wq")),
            wk: id(format!("{p}.wk")),
            wv: id(format!("{p}.wv")),
            wo: id(format!("{p}.wo")),
        };
        let norm = |p: &str| NormIds {
            gain: id(format!("{p}.gain")),
            bias: id(format!("{p}.bias")),
        };
        let ffn = |p: &str| FfnIds {
            w1: id(format!("{p}.w1")),
            b1: id(format!("{p}.b1")),
            w2: id(format!("{p}.w2")),
            b2: id(format!("{p}.b2")),
        };
        let encoder = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("enc.layer{i}");
                EncoderLayer {
                    attn: attn(&format!("{p}.attn")),
                    ln1: norm(&format!("{p}.ln1")),
                    ffn: ffn(&format!("{p}.ffn")),
                    ln2: norm(&format!("{p}.ln2")),
                }
            })
            .collect();
        let decoder = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("dec.layer{i}");
                DecoderLayer {
                    self_attn: attn(&format!("{p}.self_attn")),
                    ln1: norm(&format!("{p}.ln1")),
                    cross_attn: attn(&format!("{p}.cross_attn")),
                    ln2: norm(&format!("{p}.ln2")),
                    ffn: ffn(&format!("{p}.ffn")),
                    ln3: norm(&format!("{p}.ln3")),
                }
            })
            .collect();
        Ok(Seq2Seq {
            cfg: cfg.clone(),
            embed: id("shared.embed".into()),
            enc_pos: id("enc.pos_embed".into()),
            dec_pos: id("dec.pos_embed".into()),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn embed<F: Float>(&self, g: &mut Graph<F>, p: &[Var], tokens: &[usize], pos: usize) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Index {
                what: "sequence length (max_seq_len)",
                index: tokens.len(),
                size: self.cfg.max_seq_len,
            });
        }
        let tok = g.gather(p[self.embed], tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = g.gather(p[pos], &positions)?;
        g.add(tok, pe)
    }

    fn ffn<F: Float>(&self, g: &mut Graph<F>, p: &[Var], ids: FfnIds, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[ids.w1])?;
        let h = g.add_row(h, p[ids.b1])?;
        let h = g.relu(h);
        let o = g.matmul(h, p[ids.w2])?;
        g.add_row(o, p[ids.b2])
    }

    fn residual_norm<F: Float>(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        ids: NormIds,
        x: Var,
        sub: Var,
    ) -> Result<Var> {
        let s = g.add(x, sub)?;
        g.layer_norm(s, p[ids.gain], p[ids.bias], F::c(self.cfg.eps))
    }

    /// Runs the encoder stack. Tokens equal to [`PAD_ID`] are excluded as attention keys.
    pub fn encode<F: Float>(&self, g: &mut Graph<F>, p: &[Var], tokens: &[usize]) -> Result<EncoderState> {
        let key_mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::Data("encoder input contains only padding".into()));
        }
        let n = tokens.len();
        let mask: Vec<bool> = (0..n).flat_map(|_| key_mask.iter().copied()).collect();
        let mut x = self.embed(g, p, tokens, self.enc_pos)?;
        for layer in &self.encoder {
            let a = multi_head_attention(g, p, layer.attn, self.cfg.num_heads, x, x, Some(&mask))?;
            x = self.residual_norm(g, p, layer.ln1, x, a)?;
            let f = self.ffn(g, p, layer.ffn, x)?;
            x = self.residual_norm(g, p, layer.ln2, x, f)?;
        }
        Ok(EncoderState { hidden: x, key_mask })
    }

    /// Runs the decoder over `out_tokens` (already shifted right, starting with
    /// the start token) and returns `[m, vocab]` logits.
    pub fn decode<F: Float>(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        out_tokens: &[usize],
        enc: &EncoderState,
    ) -> Result<Var> {
        let m = out_tokens.len();
        let self_mask = causal_mask(m);
        let cross_mask: Vec<bool> = (0..m).flat_map(|_| enc.key_mask.iter().copied()).collect();
        let mut y = self.embed(g, p, out_tokens, self.dec_pos)?;
        for layer in &self.decoder {
            let s = multi_head_attention(g, p, layer.self_attn, self.cfg.num_heads, y, y, Some(&self_mask))?;
            y = self.residual_norm(g, p, layer.ln1, y, s)?;
            let c = multi_head_attention(
                g,
                p,
                layer.cross_attn,
                self.cfg.num_heads,
                y,
                enc.hidden,
                Some(&cross_mask),
            )?;
            y = self.residual_norm(g, p, layer.ln2, y, c)?;
            let f = self.ffn(g, p, layer.ffn, y)?;
            y = self.residual_norm(g, p, layer.ln3, y, f)?;
        }
        g.matmul_nt(y, p[self.embed])
    }

    /// Encoder forward pass outside of any training graph.
    pub fn encoder_forward<F: Float>(&self, params: &Parameters<F>, tokens: &[usize]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = g.bind(params);
        let enc = self.encode(&mut g, &p, tokens)?;
        Ok(g.value(enc.hidden).clone())
    }

    /// Decoder logits for `out_tokens` given an input sequence.
    pub fn decoder_forward<F: Float>(
        &self,
        params: &Parameters<F>,
        input: &[usize],
        out_tokens: &[usize],
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = g.bind(params);
        let enc = self.encode(&mut g, &p, input)?;
        let logits = self.decode(&mut g, &p, out_tokens, &enc)?;
        Ok(g.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            model_dim: 16,
            num_heads: 4,
            ff_dim: 24,
            vocab_size: 30,
            max_seq_len: 16,
            eps: 1e-6,
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            model_dim: 10,
            num_heads: 4,
            ..toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_params::<f64>(&toy(), 7).unwrap();
        let b = init_params::<f64>(&toy(), 7).unwrap();
        let c = init_params::<f64>(&toy(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.get("shared.embed"), c.get("shared.embed"));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // V*d + 2*L*d
        //   + H * (4d^2 + 2df + f + d + 4d)          encoder layers
        //   + H * (8d^2 + 2df + f + d + 6d)          decoder layers
        // with H=2, d=32, h=4, f=64, V=200, L=64:
        //   6400 + 4096 + 2*8416 + 2*12576 = 52480
        let cfg = ModelConfig {
            num_layers: 2,
            model_dim: 32,
            num_heads: 4,
            ff_dim: 64,
            vocab_size: 200,
            max_seq_len: 64,
            eps: 1e-6,
        };
        let p = init_params::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.count(), 52480);
    }

    #[test]
    fn biases_start_at_zero_and_gains_at_one() {
        let p = init_params::<f64>(&toy(), 1).unwrap();
        assert!(p.get("enc.layer0.ffn.b1").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("dec.layer1.ln3.gain").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_token_encoder_state_is_one_by_d() {
        let cfg = toy();
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let m = Seq2Seq::new(&cfg, &p).unwrap();
        let h = m.encoder_forward(&p, &[5]).unwrap();
        assert_eq!(h.shape(), &[1, 16]);
    }

    #[test]
    fn out_of_vocabulary_token_is_an_index_error() {
        let cfg = toy();
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let m = Seq2Seq::new(&cfg, &p).unwrap();
        assert!(matches!(
            m.encoder_forward(&p, &[3, 30]),
            Err(Error::Index { index: 30, .. })
        ));
        assert!(m.encoder_forward(&p, &[3; 17]).is_err());
    }

    #[test]
    fn padding_does_not_change_shared_positions() {
        let cfg = toy();
        let p = init_params::<f64>(&cfg, 2).unwrap();
        let m = Seq2Seq::new(&cfg, &p).unwrap();
        let short = m.encoder_forward(&p, &[5, 6, 7]).unwrap();
        let padded = m.encoder_forward(&p, &[5, 6, 7, PAD_ID, PAD_ID]).unwrap();
        for r in 0..3 {
            for (a, b) in short.row(r).iter().zip(padded.row(r)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        let l1 = m.decoder_forward(&p, &[5, 6, 7], &[PAD_ID, 3]).unwrap();
        let l2 = m.decoder_forward(&p, &[5, 6, 7, PAD_ID], &[PAD_ID, 3]).unwrap();
        for (a, b) in l1.data().iter().zip(l2.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn swapping_tokens_changes_the_output() {
        let cfg = toy();
        let p = init_params::<f64>(&cfg, 3).unwrap();
        let m = Seq2Seq::new(&cfg, &p).unwrap();
        let a = m.encoder_forward(&p, &[5, 6, 7]).unwrap();
        let b = m.encoder_forward(&p, &[6, 5, 7]).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = toy();
        let p = init_params::<f64>(&cfg, 4).unwrap();
        let m = Seq2Seq::new(&cfg, &p).unwrap();
        let input = [4, 9, 11, 2];
        let full = m.decoder_forward(&p, &input, &[0, 3, 8, 12, 1]).unwrap();
        let changed = m.decoder_forward(&p, &input, &[0, 3, 20, 21, 22]).unwrap();
        for t in 0..5 {
            let prefix = m.decoder_forward(&p, &input, &[0, 3, 8, 12, 1][..=t]).unwrap();
            for (a, b) in prefix.row(t).iter().zip(full.row(t)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
        for t in 0..2 {
            for (a, b) in changed.row(t).iter().zip(full.row(t)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn one_step_decode_returns_vocab_logits() {
        let cfg = toy();
        let p = init_params::<f64>(&cfg, 5).unwrap();
        let m = Seq2Seq::new(&cfg, &p).unwrap();
        let l = m.decoder_forward(&p, &[4, 5], &[PAD_ID]).unwrap();
        assert_eq!(l.shape(), &[1, 30]);
    }

    #[test]
    fn cross_attention_is_live() {
        let cfg = toy();
        let p = init_params::<f64>(&cfg, 6).unwrap();
        let m = Seq2Seq::new(&cfg, &p).unwrap();
        let mut g = Graph::new();
        let pv = g.bind(&p);
        let enc = m.encode(&mut g, &pv, &[4, 5, 6]).unwrap();
        let live = m.decode(&mut g, &pv, &[PAD_ID], &enc).unwrap();
        let zeros = g.constant(Tensor::zeros(&[3, 16]));
        let dead = EncoderState {
            hidden: zeros,
            key_mask: enc.key_mask.clone(),
        };
        let zeroed = m.decode(&mut g, &pv, &[PAD_ID], &dead).unwrap();
        let diff: f64 = g
            .value(live)
            .data()
            .iter()
            .zip(g.value(zeroed).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn rejects_parameters_for_a_different_config() {
        let p = init_params::<f64>(&toy(), 0).unwrap();
        let other = ModelConfig {
            vocab_size: 31,
            ..toy()
        };
        assert!(Seq2Seq::new(&other, &p).is_err());
    }
}
