//! Recurrent sequence model: a bidirectional GRU encoder producing
//! `q(y|x)` and `q(z|x)`, a structured prior `p(z) p(y|z)` with a linear
//! prior head, and an autoregressive GRU decoder for `p(x|y,z)` that
//! consumes the class embedding, the latent, and the previous token at
//! every step.
//!
//! Everything evaluates on the expression tape, so the same forward code
//! serves classification, bound estimation, and gradient computation. All
//! arithmetic is `f64`; sizes default to desk scale (see
//! [`NeuralConfig::desk`]) with the paper-scale sizes available as a named
//! preset.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{TokenSequence, PAD_ID};
use crate::dist;
use crate::fm;
use crate::hybrid::ExactBound;
use crate::objectives::{ObjectiveError, ObjectiveSpec, VariationalModel};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, ParamId, ParamStore, Role, Tape};

const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralConfig {
    /// Vocabulary size including the four reserved ids.
    pub vocab: usize,
    pub n_classes: usize,
    pub d_emb: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub d_z: usize,
    pub d_y: usize,
    pub max_len: usize,
    /// Dropout rate on the encoder output (training mode only).
    pub dropout: f64,
    /// Share one embedding table between encoder and decoder.
    pub tie_embeddings: bool,
}

impl NeuralConfig {
    /// Desk-scale defaults used by the experiment harness.
    pub fn desk(vocab: usize, n_classes: usize, max_len: usize) -> Self {
        Self {
            vocab,
            n_classes,
            d_emb: 32,
            hidden: 32,
            enc_layers: 1,
            d_z: 16,
            d_y: 8,
            max_len,
            dropout: 0.5,
            tie_embeddings: false,
        }
    }

    /// Paper-scale sizes (300-d embeddings, 2-layer encoder with 200 hidden
    /// units, 100-d z, 50-d class embeddings).
    pub fn paper(vocab: usize, n_classes: usize, max_len: usize) -> Self {
        Self {
            vocab,
            n_classes,
            d_emb: 300,
            hidden: 200,
            enc_layers: 2,
            d_z: 100,
            d_y: 50,
            max_len,
            dropout: 0.5,
            tie_embeddings: false,
        }
    }

    /// Stable hash of the architecture, stamped into checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        mix(self.vocab as u64);
        mix(self.n_classes as u64);
        mix(self.d_emb as u64);
        mix(self.hidden as u64);
        mix(self.enc_layers as u64);
        mix(self.d_z as u64);
        mix(self.d_y as u64);
        mix(self.max_len as u64);
        mix((self.dropout * 1e6) as u64);
        mix(self.tie_embeddings as u64);
        h
    }
}

#[derive(Debug, Clone, Copy)]
struct GruIds {
    w_r: ParamId,
    b_r: ParamId,
    w_u: ParamId,
    b_u: ParamId,
    w_c: ParamId,
    b_c: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    enc_emb: ParamId,
    dec_emb: ParamId,
    enc: Vec<[GruIds; 2]>,
    w_mu: ParamId,
    b_mu: ParamId,
    w_sigma: ParamId,
    b_sigma: ParamId,
    w_logits: ParamId,
    b_logits: ParamId,
    w_prior: ParamId,
    b_prior: ParamId,
    y_emb: ParamId,
    dec: GruIds,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Debug, Clone)]
pub struct NeuralModel {
    cfg: NeuralConfig,
    params: ParamStore,
    ids: Ids,
}

pub struct NeuralCtx {
    pub mu: NodeId,
    pub sigma: NodeId,
    pub lqy: NodeId,
    /// Input exceeded `max_len` and was truncated.
    pub truncated: bool,
}

fn init_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / fm::sqrt(cols as f64);
    (0..rows * cols)
        .map(|_| scale * (2.0 * rng.next_f64() - 1.0))
        .collect()
}

fn add_gru(
    params: &mut ParamStore,
    rng: &mut SplitMix64,
    name: &str,
    role: Role,
    hidden: usize,
    input: usize,
) -> GruIds {
    let cols = hidden + input;
    let mat = |params: &mut ParamStore, rng: &mut SplitMix64, gate: &str| {
        let mut full = String::from(name);
        full.push('_');
        full.push_str(gate);
        params.add(&full, role, hidden, cols, &init_matrix(rng, hidden, cols))
    };
    let bias = |params: &mut ParamStore, gate: &str| {
        let mut full = String::from(name);
        full.push('_');
        full.push_str(gate);
        params.add_vec(&full, role, &alloc::vec![0.0; hidden])
    };
    GruIds {
        w_r: mat(params, rng, "wr"),
        b_r: bias(params, "br"),
        w_u: mat(params, rng, "wu"),
        b_u: bias(params, "bu"),
        w_c: mat(params, rng, "wc"),
        b_c: bias(params, "bc"),
    }
}

impl NeuralModel {
    pub fn new(cfg: NeuralConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let emb_role = if cfg.tie_embeddings {
            Role::Shared
        } else {
            Role::Phi
        };
        let enc_emb = params.add(
            "enc_emb",
            emb_role,
            cfg.vocab,
            cfg.d_emb,
            &init_matrix(&mut rng, cfg.vocab, cfg.d_emb),
        );
        let dec_emb = if cfg.tie_embeddings {
            enc_emb
        } else {
            params.add(
                "dec_emb",
                Role::Theta,
                cfg.vocab,
                cfg.d_emb,
                &init_matrix(&mut rng, cfg.vocab, cfg.d_emb),
            )
        };
        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for layer in 0..cfg.enc_layers {
            let input = if layer == 0 { cfg.d_emb } else { 2 * cfg.hidden };
            let mut name_f = String::from("enc_l");
            name_f.push((b'0' + layer as u8) as char);
            let mut name_b = name_f.clone();
            name_f.push_str("_fwd");
            name_b.push_str("_bwd");
            let fwd = add_gru(&mut params, &mut rng, &name_f, Role::Phi, cfg.hidden, input);
            let bwd = add_gru(&mut params, &mut rng, &name_b, Role::Phi, cfg.hidden, input);
            enc.push([fwd, bwd]);
        }
        let state = 2 * cfg.hidden;
        let w_mu = params.add(
            "head_mu_w",
            Role::Phi,
            cfg.d_z,
            state,
            &init_matrix(&mut rng, cfg.d_z, state),
        );
        let b_mu = params.add_vec("head_mu_b", Role::Phi, &alloc::vec![0.0; cfg.d_z]);
        let w_sigma = params.add(
            "head_sigma_w",
            Role::Phi,
            cfg.d_z,
            state,
            &init_matrix(&mut rng, cfg.d_z, state),
        );
        let b_sigma = params.add_vec("head_sigma_b", Role::Phi, &alloc::vec![0.0; cfg.d_z]);
        let w_logits = params.add(
            "head_logits_w",
            Role::Phi,
            cfg.n_classes,
            state,
            &init_matrix(&mut rng, cfg.n_classes, state),
        );
        let b_logits = params.add_vec("head_logits_b", Role::Phi, &alloc::vec![0.0; cfg.n_classes]);
        let w_prior = params.add(
            "prior_head_w",
            Role::Theta,
            cfg.n_classes,
            cfg.d_z,
            &init_matrix(&mut rng, cfg.n_classes, cfg.d_z),
        );
        let b_prior = params.add_vec("prior_head_b", Role::Theta, &alloc::vec![0.0; cfg.n_classes]);
        let y_emb = params.add(
            "y_emb",
            Role::Theta,
            cfg.n_classes,
            cfg.d_y,
            &init_matrix(&mut rng, cfg.n_classes, cfg.d_y),
        );
        let dec_input = cfg.d_emb + cfg.d_y + cfg.d_z;
        let dec = add_gru(&mut params, &mut rng, "dec", Role::Theta, cfg.hidden, dec_input);
        let w_out = params.add(
            "out_w",
            Role::Theta,
            cfg.vocab,
            cfg.hidden,
            &init_matrix(&mut rng, cfg.vocab, cfg.hidden),
        );
        let b_out = params.add_vec("out_b", Role::Theta, &alloc::vec![0.0; cfg.vocab]);
        let ids = Ids {
            enc_emb,
            dec_emb,
            enc,
            w_mu,
            b_mu,
            w_sigma,
            b_sigma,
            w_logits,
            b_logits,
            w_prior,
            b_prior,
            y_emb,
            dec,
            w_out,
            b_out,
        };
        Self { cfg, params, ids }
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.cfg
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn theta_param_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_role(Role::Theta)
    }

    pub fn phi_param_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_role(Role::Phi)
    }

    /// Replace the encoder embedding table (e.g. with pretrained vectors).
    /// The matrix is `vocab x d_emb` row-major. With tied embeddings the
    /// decoder sees the same table.
    pub fn load_embeddings(&mut self, matrix: &[f64]) -> Result<(), String> {
        let want = self.cfg.vocab * self.cfg.d_emb;
        if matrix.len() != want {
            return Err(alloc::format!(
                "embedding matrix has {} entries, expected {want}",
                matrix.len()
            ));
        }
        self.params
            .slice_mut(self.ids.enc_emb)
            .copy_from_slice(matrix);
        Ok(())
    }

    fn gru_step(&self, t: &mut Tape, g: &GruIds, h: NodeId, x: NodeId) -> NodeId {
        let hx = t.stack(&[h, x]);
        let r = t.affine(g.w_r, g.b_r, hx);
        let r = t.sigmoid(r);
        let u = t.affine(g.w_u, g.b_u, hx);
        let u = t.sigmoid(u);
        let rh = t.mul(r, h);
        let rhx = t.stack(&[rh, x]);
        let c = t.affine(g.w_c, g.b_c, rhx);
        let c = t.tanh(c);
        let uh = t.mul(u, h);
        let not_u = t.affc(u, -1.0, 1.0);
        let uc = t.mul(not_u, c);
        t.add(uh, uc)
    }

    /// Bidirectional encoder pass; returns the concatenated final state.
    fn encoder_state(&self, t: &mut Tape, tokens: &[u16]) -> NodeId {
        let h0 = t.constv(&alloc::vec![0.0; self.cfg.hidden]);
        let mut inputs: Vec<NodeId> = tokens
            .iter()
            .map(|&tok| t.param_row(self.ids.enc_emb, tok as usize))
            .collect();
        let mut last_fwd = h0;
        let mut last_bwd = h0;
        for layer in &self.ids.enc {
            let mut fwd_states = Vec::with_capacity(inputs.len());
            let mut h = h0;
            for &x in &inputs {
                h = self.gru_step(t, &layer[0], h, x);
                fwd_states.push(h);
            }
            last_fwd = h;
            let mut bwd_states = alloc::vec![h0; inputs.len()];
            let mut h = h0;
            for (pos, &x) in inputs.iter().enumerate().rev() {
                h = self.gru_step(t, &layer[1], h, x);
                bwd_states[pos] = h;
            }
            last_bwd = h;
            inputs = (0..inputs.len())
                .map(|pos| t.stack(&[fwd_states[pos], bwd_states[pos]]))
                .collect();
        }
        t.stack(&[last_fwd, last_bwd])
    }

    /// Per-step next-token log-probability vectors under teacher forcing.
    /// `z` may be any tape node of size `d_z`.
    pub fn decode_step_log_probs(
        &self,
        t: &mut Tape,
        x: &TokenSequence,
        y: usize,
        z: NodeId,
    ) -> Vec<NodeId> {
        let yrow = t.param_row(self.ids.y_emb, y);
        let h0 = t.constv(&alloc::vec![0.0; self.cfg.hidden]);
        let bos = t.param_row(self.ids.dec_emb, crate::data::BOS_ID as usize);
        let mut h = h0;
        let mut prev = bos;
        let mut out = Vec::with_capacity(x.len());
        for &tok in x.ids() {
            if tok == PAD_ID {
                break;
            }
            let input = t.stack(&[prev, yrow, z]);
            h = self.gru_step(t, &self.ids.dec, h, input);
            let logits = t.affine(self.ids.w_out, self.ids.b_out, h);
            out.push(t.log_softmax(logits));
            prev = t.param_row(self.ids.dec_emb, tok as usize);
        }
        out
    }

    /// Teacher-forced sequence log-likelihood as a plain value.
    pub fn decode_log_prob(&self, x: &TokenSequence, y: usize, z: &[f64]) -> f64 {
        let mut t = Tape::new(&self.params);
        let znode = t.constv(z);
        let node = self.log_lik_node(&mut t, x, y, znode);
        t.scalar_val(node)
    }

    /// `log p(z) + log p(y|z)` as a plain value.
    pub fn prior_log_prob(&self, y: usize, z: &[f64]) -> f64 {
        let mut t = Tape::new(&self.params);
        let znode = t.constv(z);
        let node = VariationalModel::log_prior(self, &mut t, y, &znode);
        t.scalar_val(node)
    }

    fn log_lik_node(&self, t: &mut Tape, x: &TokenSequence, y: usize, z: NodeId) -> NodeId {
        let steps = self.decode_step_log_probs(t, x, y, z);
        if steps.is_empty() {
            return t.scalar(0.0);
        }
        let picked: Vec<NodeId> = steps
            .iter()
            .zip(x.ids())
            .map(|(&lp, &tok)| t.get(lp, tok as usize))
            .collect();
        let stacked = t.stack(&picked);
        t.sum(stacked)
    }

    /// Class prediction and probabilities from `q(y|x)` (evaluation mode).
    pub fn classify(&self, x: &TokenSequence) -> (usize, Vec<f64>) {
        let mut t = Tape::new(&self.params);
        let ctx = self.encode(&mut t, x, None);
        let probs: Vec<f64> = t.val(ctx.lqy).iter().map(|&l| fm::exp(l)).collect();
        let c = dist::Categorical::from_probs(&probs);
        (c.argmax(), probs)
    }

    /// `q(z|x)` and `q(y|x)` as plain distribution values (evaluation mode).
    pub fn encode_dists(
        &self,
        x: &TokenSequence,
    ) -> (dist::Categorical, dist::DiagonalGaussian, bool) {
        let mut t = Tape::new(&self.params);
        let ctx = self.encode(&mut t, x, None);
        let cat = dist::Categorical::from_logits(t.val(ctx.lqy));
        let gauss = dist::DiagonalGaussian::new(t.val(ctx.mu), t.val(ctx.sigma))
            .expect("softplus-gated sigma is positive");
        (cat, gauss, ctx.truncated)
    }
}

impl VariationalModel for NeuralModel {
    type Datum = TokenSequence;
    type Ctx = NeuralCtx;
    type Latent = NodeId;

    fn n_classes(&self) -> usize {
        self.cfg.n_classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn z_reparameterized(&self) -> bool {
        true
    }

    fn encode(&self, t: &mut Tape, x: &TokenSequence, rng: Option<&mut SplitMix64>) -> NeuralCtx {
        let truncated = x.len() > self.cfg.max_len;
        let tokens = &x.ids()[..x.len().min(self.cfg.max_len)];
        let mut state = self.encoder_state(t, tokens);
        if let Some(rng) = rng {
            if self.cfg.dropout > 0.0 {
                let keep = 1.0 - self.cfg.dropout;
                let mask: Vec<f64> = (0..2 * self.cfg.hidden)
                    .map(|_| {
                        if rng.next_f64() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = t.constv(&mask);
                state = t.mul(state, mask);
            }
        }
        let mu = t.affine(self.ids.w_mu, self.ids.b_mu, state);
        let raw = t.affine(self.ids.w_sigma, self.ids.b_sigma, state);
        let sp = t.softplus(raw);
        let sigma = t.affc(sp, 1.0, SIGMA_FLOOR);
        let logits = t.affine(self.ids.w_logits, self.ids.b_logits, state);
        let lqy = t.log_softmax(logits);
        NeuralCtx {
            mu,
            sigma,
            lqy,
            truncated,
        }
    }

    fn log_q_y(&self, _t: &mut Tape, ctx: &NeuralCtx) -> NodeId {
        ctx.lqy
    }

    fn sample_z(&self, t: &mut Tape, ctx: &NeuralCtx, rng: &mut SplitMix64) -> NodeId {
        let eps: Vec<f64> = (0..self.cfg.d_z).map(|_| rng.next_normal()).collect();
        let eps = t.constv(&eps);
        let scaled = t.mul(ctx.sigma, eps);
        t.add(ctx.mu, scaled)
    }

    fn log_q_z(&self, t: &mut Tape, ctx: &NeuralCtx, z: &NodeId, detach_q_params: bool) -> NodeId {
        let (mu, sigma) = if detach_q_params {
            (t.detach(ctx.mu), t.detach(ctx.sigma))
        } else {
            (ctx.mu, ctx.sigma)
        };
        t.normal_log_pdf(*z, mu, sigma)
    }

    fn log_prior(&self, t: &mut Tape, y: usize, z: &NodeId) -> NodeId {
        let lpz = t.std_normal_log_pdf(*z);
        let logits = t.affine(self.ids.w_prior, self.ids.b_prior, *z);
        let lpy_all = t.log_softmax(logits);
        let lpy = t.get(lpy_all, y);
        t.add(lpz, lpy)
    }

    fn log_lik(&self, t: &mut Tape, x: &TokenSequence, y: usize, z: &NodeId) -> NodeId {
        self.log_lik_node(t, x, y, *z)
    }

    fn detach_latent(&self, t: &mut Tape, z: &NodeId) -> NodeId {
        t.detach(*z)
    }

    fn grad_scaled_latent(
        &self,
        t: &mut Tape,
        z: &NodeId,
    ) -> (NodeId, Option<crate::tape::GradScaleSlot>) {
        let (node, slot) = t.grad_scale_deferred(*z);
        (node, Some(slot))
    }

    fn kl_z_value(&self, t: &Tape, ctx: &NeuralCtx) -> Option<f64> {
        let g = dist::DiagonalGaussian::new(t.val(ctx.mu), t.val(ctx.sigma)).ok()?;
        Some(dist::kl_gaussian_standard(&g))
    }
}

impl ExactBound for NeuralModel {
    fn exact_bound_node(
        &self,
        _t: &mut Tape,
        _x: &TokenSequence,
        _y: Option<usize>,
        _spec: &ObjectiveSpec,
    ) -> Result<NodeId, ObjectiveError> {
        Err(ObjectiveError::NotEnumerable)
    }
}
