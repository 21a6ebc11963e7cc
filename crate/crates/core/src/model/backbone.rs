use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, SoftPrompt};
use crate::autodiff::{Graph, ParamGroup, Tensor, Var};
use crate::codec::vocab::{BOS, EOS};
use crate::scalar::Scalar;

const ENC_TENSORS: usize = 12;
const DEC_TENSORS: usize = 18;

/// Frozen-able encoder-decoder transformer with tied token embeddings.
///
/// Parameter groups, in order: `embed`, `enc.{l}` for each layer,
/// `enc.norm`, `dec.{l}` for each layer, `dec.norm`.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    config: ModelConfig,
    groups: Vec<ParamGroup<T>>,
    positions: Vec<T>,
}

struct EncLayer {
    ln1: (Var, Var),
    q: Var,
    k: Var,
    v: Var,
    o: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct DecLayer {
    ln1: (Var, Var),
    sq: Var,
    sk: Var,
    sv: Var,
    so: Var,
    ln2: (Var, Var),
    cq: Var,
    ck: Var,
    cv: Var,
    co: Var,
    ln3: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Backbone parameters bound into one graph.
pub struct BoundBackbone {
    embed: Var,
    enc: Vec<EncLayer>,
    enc_norm: (Var, Var),
    dec: Vec<DecLayer>,
    dec_norm: (Var, Var),
    /// Per-group leaves, for [`ParamGroup::absorb`].
    pub group_vars: Vec<Vec<Var>>,
}

impl<T: Scalar> Backbone<T> {
    /// Randomly initialized, tunable backbone.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let mut normal = |shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
        };
        let ones = |n: usize| Tensor::from_fn(vec![1, n], |_| T::one());
        let zeros = |n: usize| Tensor::zeros(vec![1, n]);
        let sd = (d as f64).sqrt().recip();
        let resid = sd / (2.0 * config.n_layers as f64).sqrt();
        let sff = (ff as f64).sqrt().recip() / (2.0 * config.n_layers as f64).sqrt();

        let mut groups = vec![ParamGroup::new("embed", vec![normal(vec![config.vocab_size, d], sd)], false)];
        for l in 0..config.n_layers {
            let t = vec![
                ones(d),
                zeros(d),
                normal(vec![d, d], sd),
                normal(vec![d, d], sd),
                normal(vec![d, d], sd),
                normal(vec![d, d], resid),
                ones(d),
                zeros(d),
                normal(vec![d, ff], sd),
                zeros(ff),
                normal(vec![ff, d], sff),
                zeros(d),
            ];
            groups.push(ParamGroup::new(format!("enc.{l}"), t, false));
        }
        groups.push(ParamGroup::new("enc.norm", vec![ones(d), zeros(d)], false));
        for l in 0..config.n_layers {
            let t = vec![
                ones(d),
                zeros(d),
                normal(vec![d, d], sd),
                normal(vec![d, d], sd),
                normal(vec![d, d], sd),
                normal(vec![d, d], resid),
                ones(d),
                zeros(d),
                normal(vec![d, d], sd),
                normal(vec![d, d], sd),
                normal(vec![d, d], sd),
                normal(vec![d, d], resid),
                ones(d),
                zeros(d),
                normal(vec![d, ff], sd),
                zeros(ff),
                normal(vec![ff, d], sff),
                zeros(d),
            ];
            groups.push(ParamGroup::new(format!("dec.{l}"), t, false));
        }
        groups.push(ParamGroup::new("dec.norm", vec![ones(d), zeros(d)], false));
        Self::from_groups(config, groups)
    }

    /// Reassembles a backbone from stored groups, checking the layout.
    pub fn from_groups(config: ModelConfig, groups: Vec<ParamGroup<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let want = 3 + 2 * config.n_layers;
        if groups.len() != want {
            return Err(ModelError::Checkpoint(format!("expected {want} groups, found {}", groups.len())));
        }
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut expect: Vec<Vec<Vec<usize>>> = vec![vec![vec![v, d]]];
        let enc = vec![
            vec![1, d], vec![1, d], vec![d, d], vec![d, d], vec![d, d], vec![d, d],
            vec![1, d], vec![1, d], vec![d, ff], vec![1, ff], vec![ff, d], vec![1, d],
        ];
        let mut dec = enc[..6].to_vec();
        dec.extend(enc[..6].iter().cloned());
        dec.extend(enc[6..].iter().cloned());
        debug_assert_eq!(enc.len(), ENC_TENSORS);
        debug_assert_eq!(dec.len(), DEC_TENSORS);
        expect.extend(std::iter::repeat_n(enc, config.n_layers));
        expect.push(vec![vec![1, d], vec![1, d]]);
        expect.extend(std::iter::repeat_n(dec, config.n_layers));
        expect.push(vec![vec![1, d], vec![1, d]]);
        for (g, shapes) in groups.iter().zip(&expect) {
            let got: Vec<Vec<usize>> = g.tensors.iter().map(|t| t.shape().to_vec()).collect();
            if &got != shapes {
                return Err(ModelError::Checkpoint(format!("group `{}` has shapes {got:?}, expected {shapes:?}", g.name)));
            }
            if g.tensors.iter().any(|t| !t.is_finite()) {
                return Err(ModelError::Checkpoint(format!("group `{}` has non-finite values", g.name)));
            }
        }
        let positions = sinusoid(config.max_seq_len, d);
        Ok(Self { config, groups, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup<T>] {
        &mut self.groups
    }

    pub fn embedding_table(&self) -> &Tensor<T> {
        &self.groups[0].tensors[0]
    }

    pub fn freeze(&mut self) {
        self.groups.iter_mut().for_each(|g| {
            g.frozen = true;
            g.clear_grads();
        });
    }

    /// Lifts the freeze; only the full fine-tuning baselines do this.
    pub fn unfreeze(&mut self) {
        self.groups.iter_mut().for_each(|g| g.frozen = false);
    }

    pub fn is_frozen(&self) -> bool {
        self.groups.iter().all(|g| g.frozen)
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::num_params).sum()
    }

    /// SHA-256 over every parameter group.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for g in &self.groups {
            h.update(g.digest());
        }
        h.finalize().into()
    }

    /// Binds all groups; gradients flow to a group only when it is not frozen.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> BoundBackbone {
        let group_vars = self.groups.iter().map(|grp| g.bind(grp)).collect();
        rebuild(&self.config, group_vars)
    }

    /// Binds every group without gradient tracking.
    pub fn bind_inference<'a>(&'a self, g: &mut Graph<'a, T>) -> BoundBackbone {
        let group_vars = self.groups.iter().map(|grp| g.bind_with(grp, false)).collect();
        rebuild(&self.config, group_vars)
    }

    /// Assembles leaves created by the caller, one list per group in
    /// [`Backbone::groups`] order.
    pub fn bind_vars(&self, group_vars: Vec<Vec<Var>>) -> Result<BoundBackbone, ModelError> {
        let want: Vec<usize> = self.groups.iter().map(|g| g.tensors.len()).collect();
        let got: Vec<usize> = group_vars.iter().map(Vec::len).collect();
        if want != got {
            return Err(ModelError::Config(format!("expected leaves per group {want:?}, got {got:?}")));
        }
        Ok(rebuild(&self.config, group_vars))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(&bad) => Err(ModelError::UnknownToken(bad)),
            None => Ok(()),
        }
    }

    fn add_positions(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, ModelError> {
        let (rows, d) = g.dims(x);
        let pe = g.constant(rows, d, self.positions[..rows * d].to_vec())?;
        Ok(g.add(x, pe)?)
    }


    /// Encoder over `[embed(input_ids); prompt]`.
    pub fn encode(&self, g: &mut Graph<'_, T>, b: &BoundBackbone, input_ids: &[usize], prompt: Option<Var>) -> Result<Var, ModelError> {
        if input_ids.is_empty() {
            return Err(ModelError::Empty("encoder input"));
        }
        self.check_ids(input_ids)?;
        let m = prompt.map_or(0, |p| g.dims(p).0);
        let len = input_ids.len() + m;
        if len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { what: "encoder input", len, max: self.config.max_seq_len });
        }
        let d = self.config.d_model;
        let mut x = g.embedding(b.embed, input_ids)?;
        if let Some(p) = prompt {
            if g.dims(p).1 != d {
                return Err(ModelError::Config(format!("prompt width {} vs d_model {d}", g.dims(p).1)));
            }
            x = g.concat_rows(&[x, p])?;
        }
        x = g.scale(x, T::from_usize(d).unwrap().sqrt())?;
        x = self.add_positions(g, x)?;
        let heads = self.config.n_heads;
        for l in &b.enc {
            let h = g.layer_norm(x, l.ln1.0, l.ln1.1)?;
            let q = g.matmul(h, l.q)?;
            let k = g.matmul(h, l.k)?;
            let v = g.matmul(h, l.v)?;
            let a = g.attention(q, k, v, heads, false)?;
            let a = g.matmul(a, l.o)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, l.ln2.0, l.ln2.1)?;
            x = self.feed_forward(g, x, h, (l.w1, l.b1, l.w2, l.b2))?;
        }
        Ok(g.layer_norm(x, b.enc_norm.0, b.enc_norm.1)?)
    }

    fn feed_forward(&self, g: &mut Graph<'_, T>, x: Var, h: Var, (w1, b1, w2, b2): (Var, Var, Var, Var)) -> Result<Var, ModelError> {
        let f = g.matmul(h, w1)?;
        let f = g.add_row(f, b1)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, b2)?;
        Ok(g.add(x, f)?)
    }

    /// Cross-attention keys and values of every decoder layer.
    pub fn cross_kv(&self, g: &mut Graph<'_, T>, b: &BoundBackbone, enc: Var) -> Result<Vec<(Var, Var)>, ModelError> {
        b.dec
            .iter()
            .map(|l| Ok((g.matmul(enc, l.ck)?, g.matmul(enc, l.cv)?)))
            .collect()
    }

    /// Decoder logits `[len(decoder_ids), vocab]`.
    pub fn decode(&self, g: &mut Graph<'_, T>, b: &BoundBackbone, kv: &[(Var, Var)], decoder_ids: &[usize]) -> Result<Var, ModelError> {
        let mut cache = vec![None; b.dec.len()];
        self.decode_at(g, b, kv, decoder_ids, 0, &mut cache)
    }

    /// Decodes `ids` placed at positions `start..`, attending to the self
    /// keys and values already held in `cache`, which is extended in place.
    fn decode_at(
        &self,
        g: &mut Graph<'_, T>,
        b: &BoundBackbone,
        kv: &[(Var, Var)],
        ids: &[usize],
        start: usize,
        cache: &mut [Option<(Var, Var)>],
    ) -> Result<Var, ModelError> {
        let end = start + ids.len();
        if end > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { what: "decoder input", len: end, max: self.config.max_seq_len });
        }
        self.check_ids(ids)?;
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let mut x = g.embedding(b.embed, ids)?;
        x = g.scale(x, T::from_usize(d).unwrap().sqrt())?;
        let pe = g.constant(ids.len(), d, self.positions[start * d..end * d].to_vec())?;
        x = g.add(x, pe)?;
        for ((l, &(ck, cv)), slot) in b.dec.iter().zip(kv).zip(cache.iter_mut()) {
            let h = g.layer_norm(x, l.ln1.0, l.ln1.1)?;
            let q = g.matmul(h, l.sq)?;
            let mut k = g.matmul(h, l.sk)?;
            let mut v = g.matmul(h, l.sv)?;
            if let Some((pk, pv)) = *slot {
                k = g.concat_rows(&[pk, k])?;
                v = g.concat_rows(&[pv, v])?;
            }
            *slot = Some((k, v));
            let a = g.attention(q, k, v, heads, true)?;
            let a = g.matmul(a, l.so)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, l.ln2.0, l.ln2.1)?;
            let q = g.matmul(h, l.cq)?;
            let a = g.attention(q, ck, cv, heads, false)?;
            let a = g.matmul(a, l.co)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, l.ln3.0, l.ln3.1)?;
            x = self.feed_forward(g, x, h, (l.w1, l.b1, l.w2, l.b2))?;
        }
        let h = g.layer_norm(x, b.dec_norm.0, b.dec_norm.1)?;
        Ok(g.matmul_bt(h, b.embed)?)
    }

    /// `-log p(target | [input; prompt])` summed over target tokens, which
    /// must already end with the end token. Teacher forcing shifts the
    /// target right behind the start token.
    pub fn loss_on_graph(
        &self,
        g: &mut Graph<'_, T>,
        b: &BoundBackbone,
        input_ids: &[usize],
        prompt: Option<Var>,
        target_ids: &[usize],
    ) -> Result<Var, ModelError> {
        if target_ids.is_empty() {
            return Err(ModelError::Empty("target"));
        }
        self.check_ids(target_ids)?;
        let enc = self.encode(g, b, input_ids, prompt)?;
        let kv = self.cross_kv(g, b, enc)?;
        let mut dec_in = Vec::with_capacity(target_ids.len());
        dec_in.push(BOS);
        dec_in.extend_from_slice(&target_ids[..target_ids.len() - 1]);
        let logits = self.decode(g, b, &kv, &dec_in)?;
        Ok(g.cross_entropy(logits, target_ids)?)
    }

    /// Adds `weight * d loss / d theta` to every unfrozen group and returns
    /// the unweighted loss.
    pub fn accumulate_grad(&mut self, input_ids: &[usize], target_ids: &[usize], weight: T) -> Result<f64, ModelError> {
        let (grads, vars, loss) = {
            let mut g = Graph::new();
            let b = self.bind(&mut g);
            let loss = self.loss_on_graph(&mut g, &b, input_ids, None, target_ids)?;
            let value = g.scalar(loss)?.as_f64();
            let scaled = g.scale(loss, weight)?;
            (g.backward(scaled)?, b.group_vars, value)
        };
        for (grp, v) in self.groups.iter_mut().zip(&vars) {
            grp.absorb(&grads, v)?;
        }
        Ok(loss)
    }

    /// Loss value only, for evaluation.
    pub fn prompted_loss(&self, prompt: Option<&SoftPrompt<T>>, input_ids: &[usize], target_ids: &[usize]) -> Result<T, ModelError> {
        let mut g = Graph::new();
        let b = self.bind_inference(&mut g);
        let p = prompt.map(|p| g.leaf(p.embeddings(), false));
        let loss = self.loss_on_graph(&mut g, &b, input_ids, p, target_ids)?;
        Ok(g.scalar(loss)?)
    }

    /// Greedy decoding until the end token or `max_len` tokens.
    pub fn generate(&self, prompt: Option<&SoftPrompt<T>>, input_ids: &[usize], max_len: usize) -> Result<Vec<usize>, ModelError> {
        if max_len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { what: "generation", len: max_len, max: self.config.max_seq_len });
        }
        if max_len == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let b = self.bind_inference(&mut g);
        let p = prompt.map(|p| g.leaf(p.embeddings(), false));
        let enc = self.encode(&mut g, &b, input_ids, p)?;
        let kv = self.cross_kv(&mut g, &b, enc)?;
        let mut cache = vec![None; b.dec.len()];
        let mut next = BOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.decode_at(&mut g, &b, &kv, &[next], out.len(), &mut cache)?;
            let last = g.value(logits);
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            next = best;
        }
        Ok(out)
    }
}

fn rebuild(config: &ModelConfig, group_vars: Vec<Vec<Var>>) -> BoundBackbone {
    let nl = config.n_layers;
    let enc = (0..nl)
        .map(|l| {
            let v = &group_vars[1 + l];
            EncLayer {
                ln1: (v[0], v[1]),
                q: v[2],
                k: v[3],
                v: v[4],
                o: v[5],
                ln2: (v[6], v[7]),
                w1: v[8],
                b1: v[9],
                w2: v[10],
                b2: v[11],
            }
        })
        .collect();
    let dec = (0..nl)
        .map(|l| {
            let v = &group_vars[2 + nl + l];
            DecLayer {
                ln1: (v[0], v[1]),
                sq: v[2],
                sk: v[3],
                sv: v[4],
                so: v[5],
                ln2: (v[6], v[7]),
                cq: v[8],
                ck: v[9],
                cv: v[10],
                co: v[11],
                ln3: (v[12], v[13]),
                w1: v[14],
                b1: v[15],
                w2: v[16],
                b2: v[17],
            }
        })
        .collect();
    let en = &group_vars[1 + nl];
    let dn = &group_vars[2 + 2 * nl];
    BoundBackbone {
        embed: group_vars[0][0],
        enc,
        enc_norm: (en[0], en[1]),
        dec,
        dec_norm: (dn[0], dn[1]),
        group_vars,
    }
}

fn sinusoid<T: Scalar>(len: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            out.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_prompt_random;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 30, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq_len: 24, prompt_length: 3 }
    }

    #[test]
    fn prompt_extends_encoder_by_m_rows() {
        let bb = Backbone::<f64>::init(tiny(), 1).unwrap();
        let p = init_prompt_random(&bb, "t", 2);
        let mut g = Graph::new();
        let b = bb.bind(&mut g);
        let ids = [21, 22, 23, 24];
        let plain = bb.encode(&mut g, &b, &ids, None).unwrap();
        let pv = g.leaf(p.embeddings(), true);
        let prompted = bb.encode(&mut g, &b, &ids, Some(pv)).unwrap();
        assert_eq!(g.dims(prompted).0, g.dims(plain).0 + 3);
    }

    #[test]
    fn length_and_vocab_errors() {
        let bb = Backbone::<f64>::init(tiny(), 1).unwrap();
        let long: Vec<usize> = vec![21; 30];
        assert!(matches!(bb.prompted_loss(None, &long, &[EOS]), Err(ModelError::SequenceTooLong { .. })));
        assert!(matches!(bb.prompted_loss(None, &[21, 99], &[EOS]), Err(ModelError::UnknownToken(99))));
        assert!(bb.generate(None, &[21], 25).is_err());
        assert_eq!(bb.generate(None, &[21], 0).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn generation_is_deterministic() {
        let bb = Backbone::<f64>::init(tiny(), 3).unwrap();
        let a = bb.generate(None, &[21, 25, 22], 6).unwrap();
        let b = bb.generate(None, &[21, 25, 22], 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
    }

    #[test]
    fn cached_decoding_matches_full_recompute() {
        let bb = Backbone::<f64>::init(tiny(), 6).unwrap();
        let p = init_prompt_random(&bb, "t", 1);
        let input = [21, 27, 22, 23];
        let out = bb.generate(Some(&p), &input, 8).unwrap();
        let mut g = Graph::new();
        let b = bb.bind_inference(&mut g);
        let pv = g.leaf(p.embeddings(), false);
        let enc = bb.encode(&mut g, &b, &input, Some(pv)).unwrap();
        let kv = bb.cross_kv(&mut g, &b, enc).unwrap();
        let mut dec = vec![BOS];
        dec.extend_from_slice(&out);
        let logits = bb.decode(&mut g, &b, &kv, &dec).unwrap();
        let v = tiny().vocab_size;
        for (t, row) in g.value(logits).chunks(v).enumerate() {
            let best = (0..v).fold(0, |best, i| if row[i] > row[best] { i } else { best });
            let expect = out.get(t).copied().unwrap_or(EOS);
            if t < out.len() || out.len() < 8 {
                assert_eq!(best, expect, "position {t}");
            }
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let bb = Backbone::<f64>::init(tiny(), 4).unwrap();
        let l = bb.prompted_loss(None, &[21, 22], &[23, 24, EOS]).unwrap();
        assert!(l > 0.0);
    }

    #[test]
    fn freeze_marks_every_group() {
        let mut bb = Backbone::<f64>::init(tiny(), 5).unwrap();
        assert!(!bb.is_frozen());
        bb.freeze();
        assert!(bb.is_frozen());
        assert_eq!(bb.embedding_table().shape(), &[30, 8]);
    }
}
