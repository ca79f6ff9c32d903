//! Spatio-temporal hypergraph encoder.
//!
//! Works on a batch of `B` joint observations stacked as `(B*N) x obs_dim`
//! rows, agent-major inside each block of `N`. Every master node owns one
//! spatial hyperedge (members drawn from the other agents at `t`) and one
//! temporal hyperedge (members drawn from all agents at `t-1`).

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{uniform_init, Graph, Linear, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum HypergraphError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HGConfig {
    pub d_embed: usize,
    pub heads: usize,
    /// Membership threshold on effective coefficients.
    pub zeta: f64,
    /// Weight of the reconstruction errors.
    pub lambda: f64,
    /// Weight of the coefficient l2 norms.
    pub gamma2: f64,
    /// Share of the reconstruction loss in the critic loss.
    pub beta: f64,
}

impl Default for HGConfig {
    fn default() -> Self {
        Self {
            d_embed: 32,
            heads: 1,
            zeta: 0.1,
            lambda: 0.001,
            gamma2: 0.2,
            beta: 0.001,
        }
    }
}

impl HGConfig {
    pub fn validate(&self) -> Result<(), HypergraphError> {
        let fail = |m: String| Err(HypergraphError::Config(m));
        if self.d_embed == 0 || self.heads == 0 || self.d_embed % self.heads != 0 {
            return fail(format!("d_embed {} must be a positive multiple of heads {}", self.d_embed, self.heads));
        }
        if !(self.zeta >= 0.0) {
            return fail(format!("zeta must be >= 0, got {}", self.zeta));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.gamma2 >= 0.0 && self.gamma2.is_finite()) {
            return fail("lambda and gamma2 must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.heads
    }
}

/// Initial raw reconstruction coefficient.
pub const INITIAL_COEFFICIENT: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct HypergraphEncoder {
    pub config: HGConfig,
    pub agents: usize,
    pub obs_dim: usize,
    embed: Linear,
    theta_spa: ParamId,
    theta_tem: ParamId,
    /// Raw `N x N` coefficients; the diagonal is masked out.
    p_spa: ParamId,
    /// Raw `N x N` coefficients over the previous-step nodes.
    p_tem: ParamId,
    query: ParamId,
    key_spa: ParamId,
    key_tem: ParamId,
    att_spa: Vec<ParamId>,
    att_tem: Vec<ParamId>,
    mlp_hidden: Linear,
    mlp_out: Linear,
}

/// Graph handles produced by [`HypergraphEncoder::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub batch: usize,
    /// Initial node embeddings at `t`, `(B*N) x d`.
    pub embeddings: Var,
    pub e_spa: Var,
    pub e_tem: Var,
    /// Per head, `(B*N) x 2` softmax weights `(w_spa, w_tem)`.
    pub attention: Vec<Var>,
    /// Concatenated head aggregates before the node MLP.
    pub aggregate: Var,
    /// Updated node embeddings, `(B*N) x d`.
    pub nodes: Var,
    /// Mean node embedding per sample, `B x d`.
    pub readout: Var,
    pub recon: Var,
}

impl HypergraphEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: HGConfig,
        agents: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<Self, HypergraphError> {
        config.validate()?;
        if agents == 0 {
            return Err(HypergraphError::Config("encoder needs at least one agent".into()));
        }
        let d = config.d_embed;
        let dk = config.head_dim();
        let name = |s: &str| format!("{prefix}.{s}");
        let embed = Linear::new(store, &name("embed"), obs_dim, d, rng);
        let theta_spa = store.add(name("theta_spa"), uniform_init(rng, d, d, d));
        let theta_tem = store.add(name("theta_tem"), uniform_init(rng, d, d, d));
        let mut p = Tensor::filled(agents, agents, INITIAL_COEFFICIENT);
        for i in 0..agents {
            p.values_mut()[i * agents + i] = 0.0;
        }
        let p_spa = store.add(name("p_spa"), p);
        let p_tem = store.add(name("p_tem"), Tensor::filled(agents, agents, INITIAL_COEFFICIENT));
        let query = store.add(name("query"), uniform_init(rng, d, d, d));
        let key_spa = store.add(name("key_spa"), uniform_init(rng, d, d, d));
        let key_tem = store.add(name("key_tem"), uniform_init(rng, d, d, d));
        let att_spa = (0..config.heads)
            .map(|h| store.add(name(&format!("att_spa.{h}")), uniform_init(rng, dk, dk, dk)))
            .collect();
        let att_tem = (0..config.heads)
            .map(|h| store.add(name(&format!("att_tem.{h}")), uniform_init(rng, dk, dk, dk)))
            .collect();
        let mlp_hidden = Linear::new(store, &name("mlp_hidden"), d, d, rng);
        let mlp_out = Linear::new(store, &name("mlp_out"), d, d, rng);
        Ok(Self {
            config,
            agents,
            obs_dim,
            embed,
            theta_spa,
            theta_tem,
            p_spa,
            p_tem,
            query,
            key_spa,
            key_tem,
            att_spa,
            att_tem,
            mlp_hidden,
            mlp_out,
        })
    }

    pub fn spatial_param(&self) -> ParamId {
        self.p_spa
    }

    pub fn temporal_param(&self) -> ParamId {
        self.p_tem
    }

    pub fn embed_params(&self) -> (ParamId, ParamId) {
        (self.embed.w, self.embed.b)
    }

    pub fn theta_params(&self) -> (ParamId, ParamId) {
        (self.theta_spa, self.theta_tem)
    }

    /// Effective spatial coefficients of master `i` over the other agents, in
    /// agent order with `i` skipped (length `N-1`).
    pub fn spatial_coefficients(&self, store: &ParamStore, i: usize) -> Vec<f64> {
        let n = self.agents;
        let raw = store.get(self.p_spa).values();
        (0..n).filter(|&j| j != i).map(|j| raw[i * n + j].max(0.0)).collect()
    }

    /// Effective temporal coefficients of master `i` (length `N`).
    pub fn temporal_coefficients(&self, store: &ParamStore, i: usize) -> Vec<f64> {
        let n = self.agents;
        store.get(self.p_tem).values()[i * n..(i + 1) * n].iter().map(|p| p.max(0.0)).collect()
    }

    /// Selected spatial members of master `i`, as agent indices.
    pub fn spatial_members(&self, store: &ParamStore, i: usize) -> Vec<usize> {
        let others: Vec<usize> = (0..self.agents).filter(|&j| j != i).collect();
        select_candidates(&self.spatial_coefficients(store, i), self.config.zeta)
            .into_iter()
            .map(|k| others[k])
            .collect()
    }

    pub fn temporal_members(&self, store: &ParamStore, i: usize) -> Vec<usize> {
        select_candidates(&self.temporal_coefficients(store, i), self.config.zeta)
    }

    /// `relu(O W_e + b_e)`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, obs: Var) -> Result<Var, TensorError> {
        let z = self.embed.forward(g, store, obs)?;
        Ok(g.relu(z))
    }

    fn gate(&self, g: &mut Graph, raw: &Tensor, zeta: f64, spatial: bool) -> Result<Var, TensorError> {
        let n = self.agents;
        let mut bits = 0u64;
        let mask: Vec<f64> = raw
            .values()
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let keep = !(spatial && k / n == k % n) && p.max(0.0) > zeta;
                bits = bits.rotate_left(1) ^ keep as u64;
                if keep {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        g.note_kink(bits);
        g.constant(n, n, mask)
    }

    fn diag_mask(&self, g: &mut Graph) -> Result<Var, TensorError> {
        let n = self.agents;
        let m = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect();
        g.constant(n, n, m)
    }

    /// Weighted mean of master row (weight 1) and gated member rows.
    fn hyperedges(&self, g: &mut Graph, gated: Var, master: Var, pool: Var, batch: usize) -> Result<Var, TensorError> {
        let mixed = g.block_matmul(gated, pool)?;
        let num = g.add(master, mixed)?;
        let mass = g.row_sum(gated);
        let mass = g.add_scalar(mass, 1.0);
        let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..self.agents).collect();
        let mass = g.gather_rows(mass, &tiled)?;
        g.div_col(num, mass)
    }

    /// Full pipeline on `obs_t` and `obs_tm1`, both `(B*N) x obs_dim`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, obs_t: Var, obs_tm1: Var) -> Result<Encoded, TensorError> {
        let n = self.agents;
        let (rows, cols) = g.dims(obs_t);
        if rows % n != 0 || rows == 0 || cols != self.obs_dim || g.dims(obs_tm1) != (rows, cols) {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: vec![rows, cols],
                right: vec![n, self.obs_dim],
            });
        }
        let batch = rows / n;
        let cfg = &self.config;
        let h = self.embed(g, store, obs_t)?;
        let h_prev = self.embed(g, store, obs_tm1)?;

        let raw_spa = g.param(store, self.p_spa);
        let raw_tem = g.param(store, self.p_tem);
        let off_diag = self.diag_mask(g)?;
        let eff_spa = g.relu(raw_spa);
        let eff_spa = g.mul(eff_spa, off_diag)?;
        let eff_tem = g.relu(raw_tem);

        // Reconstruction errors and coefficient penalties.
        let theta_spa = g.param(store, self.theta_spa);
        let theta_tem = g.param(store, self.theta_tem);
        let proj_spa = g.matmul(h, theta_spa)?;
        let rec_spa = g.block_matmul(eff_spa, h)?;
        let diff_spa = g.sub(proj_spa, rec_spa)?;
        let c_spa = g.row_l2(diff_spa);
        let proj_tem = g.matmul(h, theta_tem)?;
        let rec_tem = g.block_matmul(eff_tem, h_prev)?;
        let diff_tem = g.sub(proj_tem, rec_tem)?;
        let c_tem = g.row_l2(diff_tem);
        let c_total = g.add(c_spa, c_tem)?;
        let c_total = g.sum(c_total);
        let c_term = g.scale(c_total, cfg.lambda / batch as f64);
        let l1_spa = g.l1_norm(eff_spa);
        let l1_tem = g.l1_norm(eff_tem);
        let l2_spa = g.row_l2(eff_spa);
        let l2_spa = g.sum(l2_spa);
        let l2_tem = g.row_l2(eff_tem);
        let l2_tem = g.sum(l2_tem);
        let l1 = g.add(l1_spa, l1_tem)?;
        let l2 = g.add(l2_spa, l2_tem)?;
        let l2 = g.scale(l2, cfg.gamma2);
        let penalty = g.add(l1, l2)?;
        let recon = g.add(c_term, penalty)?;

        // Hard membership gates; gradients reach coefficients of members only.
        let gate_spa = self.gate(g, store.get(self.p_spa), cfg.zeta, true)?;
        let gate_tem = self.gate(g, store.get(self.p_tem), cfg.zeta, false)?;
        let gated_spa = g.mul(eff_spa, gate_spa)?;
        let gated_tem = g.mul(eff_tem, gate_tem)?;
        let e_spa = self.hyperedges(g, gated_spa, h, h, batch)?;
        let e_tem = self.hyperedges(g, gated_tem, h, h_prev, batch)?;

        // Multi-head attention over the two hyperedges of each master.
        let dk = cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let wq = g.param(store, self.query);
        let wks = g.param(store, self.key_spa);
        let wkt = g.param(store, self.key_tem);
        let q_all = g.matmul(h, wq)?;
        let ks_all = g.matmul(e_spa, wks)?;
        let kt_all = g.matmul(e_tem, wkt)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut attention = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = g.slice_cols(q_all, head * dk, dk)?;
            let ks = g.slice_cols(ks_all, head * dk, dk)?;
            let kt = g.slice_cols(kt_all, head * dk, dk)?;
            let a_spa = g.param(store, self.att_spa[head]);
            let a_tem = g.param(store, self.att_tem[head]);
            let qa_spa = g.matmul(q, a_spa)?;
            let qa_tem = g.matmul(q, a_tem)?;
            let s_spa = g.row_dot(qa_spa, ks)?;
            let s_tem = g.row_dot(qa_tem, kt)?;
            let scores = g.concat_cols(&[s_spa, s_tem])?;
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores);
            let w_spa = g.slice_cols(w, 0, 1)?;
            let w_tem = g.slice_cols(w, 1, 1)?;
            let part_spa = g.mul_col(ks, w_spa)?;
            let part_tem = g.mul_col(kt, w_tem)?;
            heads.push(g.add(part_spa, part_tem)?);
            attention.push(w);
        }
        let aggregate = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let hidden = self.mlp_hidden.forward(g, store, aggregate)?;
        let hidden = g.relu(hidden);
        let nodes = self.mlp_out.forward(g, store, hidden)?;
        let readout = g.block_mean(nodes, n)?;
        Ok(Encoded {
            batch,
            embeddings: h,
            e_spa,
            e_tem,
            attention,
            aggregate,
            nodes,
            readout,
            recon,
        })
    }
}

/// Indices whose effective coefficient `max(p, 0)` exceeds `zeta`.
pub fn select_candidates(p: &[f64], zeta: f64) -> Vec<usize> {
    p.iter()
        .enumerate()
        .filter(|(_, &v)| v.max(0.0) > zeta)
        .map(|(i, _)| i)
        .collect()
}

/// Incidence row over `n` nodes: 1 at the master, the member coefficient at
/// each member, 0 elsewhere.
pub fn incidence_row(n: usize, master: usize, members: &[(usize, f64)]) -> Vec<f64> {
    let mut row = vec![0.0; n];
    row[master] = 1.0;
    for &(v, w) in members {
        row[v] = w;
    }
    row
}

/// `sum_v Re(v) H(v) / sum_v Re(v)` over row-major `features` with `d` columns.
pub fn hyperedge_embedding(re: &[f64], features: &[f64], d: usize) -> Vec<f64> {
    let mass: f64 = re.iter().sum();
    let mut out = vec![0.0; d];
    for (v, &w) in re.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(&features[v * d..(v + 1) * d]) {
            *o += w * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= mass);
    out
}
