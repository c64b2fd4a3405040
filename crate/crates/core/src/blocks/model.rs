//! Scene prior, pixel likelihood and recognition heads.

use rand::Rng;
use rand_distr::StandardNormal;

use super::render::{render_with_grad, Primitives};
use super::{Blocks2DConfig, ColorMode, SceneParse, UNICOLOR};
use crate::ad::{sigmoid, softplus, ParamStore, Role, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gp::softplus_inv;
use crate::model::{EvalCounters, HybridModel};
use crate::nn::{ConvEmbedding, Linear};
use crate::prob::{categorical_log_prob, gaussian_log_prob, sample_log_probs, StreamRng, LN_2PI};

pub struct BlocksModel {
    cfg: Blocks2DConfig,
    counters: EvalCounters,
    sizes: usize,
    colors: Option<usize>,
    embed: ConvEmbedding,
    heights: Linear,
    prims: Linear,
    pos_mean: Linear,
    pos_log_std: Linear,
}

impl BlocksModel {
    /// Registers θ (primitive sizes and colors) and φ slots in `store`.
    pub fn new(cfg: Blocks2DConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.primitives;
        let sizes: Vec<f64> = (0..p)
            .map(|i| softplus_inv(0.25 + 0.3 * i as f64 / (p.max(2) - 1) as f64))
            .collect();
        let sizes = store.insert("blocks.sizes", Role::Generative, Tensor::vector(sizes))?;
        let colors = match cfg.color_mode {
            ColorMode::Colored => {
                let c: Vec<f64> = (0..3 * p).map(|_| rng.random_range(-1.0..1.0)).collect();
                Some(store.insert("blocks.colors", Role::Generative, Tensor::matrix(p, 3, c)?)?)
            }
            ColorMode::Unicolor => None,
        };
        let embed = ConvEmbedding::new(
            store,
            "blocks.rec.embed",
            Role::Recognition,
            (cfg.height, cfg.width, 3),
            (cfg.conv_kernel, cfg.conv_kernel),
            (cfg.conv_stride, cfg.conv_stride),
            cfg.conv_channels,
            cfg.embed_dim,
            rng,
        )?;
        let e = cfg.embed_dim;
        let heights = Linear::new(
            store,
            "blocks.rec.heights",
            Role::Recognition,
            e,
            cfg.cells() * (cfg.max_blocks + 1),
            rng,
        )?;
        let prims = Linear::new(
            store,
            "blocks.rec.prims",
            Role::Recognition,
            e,
            cfg.slots() * p,
            rng,
        )?;
        let cond = e + Self::one_hot_len(&cfg);
        let pos_mean = Linear::new(
            store,
            "blocks.rec.pos_mean",
            Role::Recognition,
            cond,
            cfg.slots(),
            rng,
        )?;
        let pos_log_std = Linear::new(
            store,
            "blocks.rec.pos_log_std",
            Role::Recognition,
            cond,
            cfg.slots(),
            rng,
        )?;
        Ok(BlocksModel {
            cfg,
            counters: EvalCounters::default(),
            sizes,
            colors,
            embed,
            heights,
            prims,
            pos_mean,
            pos_log_std,
        })
    }

    pub fn config(&self) -> &Blocks2DConfig {
        &self.cfg
    }

    fn one_hot_len(cfg: &Blocks2DConfig) -> usize {
        cfg.cells() * (cfg.max_blocks + 1) + cfg.slots() * cfg.primitives
    }

    /// Current primitive set in constrained form.
    pub fn primitives(&self, store: &ParamStore) -> Primitives {
        let sizes = store
            .value(self.sizes)
            .data()
            .iter()
            .map(|&r| softplus(r))
            .collect();
        let colors = match self.colors {
            Some(id) => store
                .value(id)
                .data()
                .chunks(3)
                .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
                .collect(),
            None => vec![UNICOLOR; self.cfg.primitives],
        };
        Primitives { sizes, colors }
    }

    /// Sets θ to the given primitive set.
    pub fn set_primitives(&self, store: &mut ParamStore, prims: &Primitives) -> Result<()> {
        if prims.sizes.len() != self.cfg.primitives || prims.colors.len() != self.cfg.primitives {
            return Err(Error::LengthMismatch(
                self.cfg.primitives,
                prims.sizes.len(),
            ));
        }
        store.set_by_id(
            self.sizes,
            Tensor::vector(prims.sizes.iter().map(|&s| softplus_inv(s)).collect()),
        )?;
        if let Some(id) = self.colors {
            let logit = |c: f64| (c / (1.0 - c)).ln();
            let c = prims.colors.iter().flat_map(|c| c.map(logit)).collect();
            store.set_by_id(id, Tensor::matrix(self.cfg.primitives, 3, c)?)?;
        }
        Ok(())
    }

    /// Slot ids of the four recognition heads.
    pub fn head_ids(&self) -> Vec<usize> {
        [
            &self.heights,
            &self.prims,
            &self.pos_mean,
            &self.pos_log_std,
        ]
        .iter()
        .flat_map(|l| [l.weight_id(), l.bias_id()])
        .collect()
    }

    fn check_obs(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.cfg.pixels() {
            return Err(Error::LengthMismatch(self.cfg.pixels(), x.len()));
        }
        Ok(())
    }

    /// Noise-free rendering of a scene under the current θ.
    pub fn render(&self, store: &ParamStore, z: &SceneParse, zc: &[f64]) -> Result<Vec<f64>> {
        z.check(&self.cfg)?;
        if zc.len() != z.num_blocks() {
            return Err(Error::LengthMismatch(z.num_blocks(), zc.len()));
        }
        let prims = self.primitives(store);
        let rects = super::place_blocks(&self.cfg, z, zc, &prims);
        Ok(super::render(&self.cfg, &rects))
    }

    /// `log p(x | z_d, z_c)` on the tape with inputs `[z_c, sizes, colors]`.
    fn pixel_term(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &SceneParse,
        zc: Var,
        x: &[f64],
    ) -> Result<Var> {
        let raw_sizes = tape.param_by_id(store, self.sizes)?;
        let sizes = tape.softplus(raw_sizes)?;
        let colors = match self.colors {
            Some(id) => {
                let raw = tape.param_by_id(store, id)?;
                tape.sigmoid(raw)?
            }
            None => tape.constant(Tensor::matrix(
                self.cfg.primitives,
                3,
                UNICOLOR.repeat(self.cfg.primitives),
            )?),
        };
        let prims = Primitives {
            sizes: tape.value(sizes).data().to_vec(),
            colors: tape
                .value(colors)
                .data()
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        };
        let raw = tape.value(zc).data().to_vec();
        let (img, back) = render_with_grad(&self.cfg, z, &raw, &prims);
        let s = self.cfg.sigma_pix;
        let resid: Vec<f64> = x.iter().zip(&img).map(|(o, r)| (o - r) / (s * s)).collect();
        let sq: f64 = x.iter().zip(&img).map(|(o, r)| (o - r) * (o - r)).sum();
        let n = x.len() as f64;
        let value = -0.5 * sq / (s * s) - n * (s.ln() + 0.5 * LN_2PI);
        let backward = Box::new(move |g: &Tensor, need: &[bool]| {
            if !need.iter().any(|b| *b) {
                return vec![None, None, None];
            }
            let g = g.item();
            let adj: Vec<f64> = resid.iter().map(|r| g * r).collect();
            let rg = back(&adj);
            vec![
                need[0].then(|| Tensor::vector(rg.raw)),
                need[1].then(|| Tensor::vector(rg.sizes)),
                need[2].then(|| {
                    Tensor::vector(rg.colors.concat())
                        .reshaped(vec![rg.colors.len(), 3])
                        .expect("color shape")
                }),
            ]
        });
        tape.custom(
            "render_loglik",
            &[zc, sizes, colors],
            Tensor::scalar(value),
            backward,
        )
    }

    fn log_uniform_discrete(&self, z: &SceneParse) -> f64 {
        let cells = self.cfg.cells() as f64;
        -cells * ((self.cfg.max_blocks + 1) as f64).ln()
            - z.num_blocks() as f64 * (self.cfg.primitives as f64).ln()
    }

    fn one_hot(&self, z: &SceneParse) -> Vec<f64> {
        let (b, p) = (self.cfg.max_blocks, self.cfg.primitives);
        let mut v = vec![0.0; Self::one_hot_len(&self.cfg)];
        let off = self.cfg.cells() * (b + 1);
        for (c, t) in z.indices.iter().enumerate() {
            v[c * (b + 1) + t.len()] = 1.0;
            for (l, &i) in t.iter().enumerate() {
                v[off + (c * b + l) * p + i as usize] = 1.0;
            }
        }
        v
    }

    fn slot_indices(&self, z: &SceneParse) -> Vec<usize> {
        let b = self.cfg.max_blocks;
        z.indices
            .iter()
            .enumerate()
            .flat_map(|(c, t)| (0..t.len()).map(move |l| c * b + l))
            .collect()
    }

    /// Heights and primitive logits from the encoding.
    fn discrete_logits(&self, tape: &mut Tape, store: &ParamStore, enc: Var) -> Result<(Var, Var)> {
        let h = self.heights.forward(tape, store, enc)?;
        let p = self.prims.forward(tape, store, enc)?;
        Ok((h, p))
    }

    /// `q(height = h | x)` per cell, for diagnostics.
    pub fn height_probs(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(store);
        let enc = self.encode(&mut tape, store, &x.to_vec())?;
        let (h, _) = self.discrete_logits(&mut tape, store, enc)?;
        let n = self.cfg.max_blocks + 1;
        Ok(tape
            .value(h)
            .data()
            .chunks(n)
            .map(|l| crate::prob::Categorical::from_logits(l.to_vec()).map(|c| c.probs()))
            .collect::<Result<_>>()?)
    }
}

impl HybridModel for BlocksModel {
    type Discrete = SceneParse;
    type Obs = Vec<f64>;

    fn canonical_key(&self, z: &SceneParse) -> Vec<u8> {
        z.key()
    }

    fn from_key(&self, key: &[u8]) -> Option<SceneParse> {
        SceneParse::from_key(key, &self.cfg)
    }

    fn counters(&self) -> &EvalCounters {
        &self.counters
    }

    fn continuous_dim(&self, z: &SceneParse) -> usize {
        z.num_blocks()
    }

    fn log_prior_discrete(
        &self,
        tape: &mut Tape,
        _store: &ParamStore,
        z: &SceneParse,
    ) -> Result<Var> {
        z.check(&self.cfg)?;
        Ok(tape.scalar(self.log_uniform_discrete(z)))
    }

    fn log_conditional(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &SceneParse,
        zc: Var,
        x: &Vec<f64>,
    ) -> Result<Var> {
        z.check(&self.cfg)?;
        self.check_obs(x)?;
        let n = z.num_blocks();
        if tape.value(zc).len() != n {
            return Err(Error::LengthMismatch(n, tape.value(zc).len()));
        }
        let zero = tape.constant(Tensor::zeros(&[n]));
        let prior = gaussian_log_prob(tape, zc, zero, zero)?;
        let lik = self.pixel_term(tape, store, z, zc, x)?;
        tape.add(prior, lik)
    }

    fn sample_prior_discrete(
        &self,
        _store: &ParamStore,
        rng: &mut StreamRng,
    ) -> Result<SceneParse> {
        let indices = (0..self.cfg.cells())
            .map(|_| {
                let h = rng.random_range(0..=self.cfg.max_blocks);
                (0..h)
                    .map(|_| rng.random_range(0..self.cfg.primitives) as u8)
                    .collect()
            })
            .collect();
        Ok(SceneParse { indices })
    }

    fn sample_joint(
        &self,
        store: &ParamStore,
        rng: &mut StreamRng,
    ) -> Result<(SceneParse, Vec<f64>, Vec<f64>)> {
        let z = self.sample_prior_discrete(store, rng)?;
        let zc: Vec<f64> = (0..z.num_blocks())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let s = self.cfg.sigma_pix;
        let x = self
            .render(store, &z, &zc)?
            .into_iter()
            .map(|v| v + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok((z, zc, x))
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, x: &Vec<f64>) -> Result<Var> {
        self.check_obs(x)?;
        let xv = tape.constant(Tensor::vector(x.clone()));
        self.embed.forward(tape, store, xv)
    }

    fn sample_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        rng: &mut StreamRng,
    ) -> Result<SceneParse> {
        let (h, p) = self.discrete_logits(tape, store, enc)?;
        let (b, np) = (self.cfg.max_blocks, self.cfg.primitives);
        let hl = tape.value(h).data().to_vec();
        let pl = tape.value(p).data().to_vec();
        let lsm = |l: &[f64]| {
            let m = crate::ad::log_sum_exp(l);
            l.iter().map(|v| v - m).collect::<Vec<_>>()
        };
        let indices = (0..self.cfg.cells())
            .map(|c| {
                let height = sample_log_probs(&lsm(&hl[c * (b + 1)..(c + 1) * (b + 1)]), rng);
                (0..height)
                    .map(|l| {
                        let s = (c * b + l) * np;
                        sample_log_probs(&lsm(&pl[s..s + np]), rng) as u8
                    })
                    .collect()
            })
            .collect();
        Ok(SceneParse { indices })
    }

    fn log_q_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        z: &SceneParse,
    ) -> Result<Var> {
        z.check(&self.cfg)?;
        let (h, p) = self.discrete_logits(tape, store, enc)?;
        let (b, np) = (self.cfg.max_blocks, self.cfg.primitives);
        let mut terms = Vec::new();
        for (c, t) in z.indices.iter().enumerate() {
            let row = tape.slice(h, c * (b + 1), b + 1)?;
            terms.push(categorical_log_prob(tape, row, t.len())?);
            for (l, &i) in t.iter().enumerate() {
                let row = tape.slice(p, (c * b + l) * np, np)?;
                terms.push(categorical_log_prob(tape, row, i as usize)?);
            }
        }
        tape.add_all(&terms)
    }

    fn q_continuous(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        z: &SceneParse,
    ) -> Result<(Var, Var)> {
        z.check(&self.cfg)?;
        let oh = tape.constant(Tensor::vector(self.one_hot(z)));
        let input = tape.concat(&[enc, oh])?;
        let m = self.pos_mean.forward(tape, store, input)?;
        let s = self.pos_log_std.forward(tape, store, input)?;
        let slots = self.slot_indices(z);
        let n = slots.len();
        let mean = tape.gather(m, slots.clone(), vec![n])?;
        let log_std = tape.gather(s, slots, vec![n])?;
        Ok((mean, log_std))
    }
}
