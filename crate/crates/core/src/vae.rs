//! The two-target variational autoencoder: trained on the confidential and
//! outlier datasets with class-conditional KL targets, it exposes the
//! deterministic mu-encoder used to embed queries and to build the frozen
//! latent reference set.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{
    backward, forward, init_params, AdamState, ForwardTrace, LayerSpec, ModelParams,
};
use crate::rng::Rng;

pub const DEFAULT_LATENT_DIM: usize = 32;

/// One sub-network (specs plus parameters) of the VAE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subnet {
    pub specs: Vec<LayerSpec>,
    pub params: ModelParams,
}

impl Subnet {
    fn init(specs: Vec<LayerSpec>, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&specs, rng)?;
        Ok(Self { specs, params })
    }

    fn run(&self, x: &[f64]) -> Result<ForwardTrace> {
        forward(&self.params, &self.specs, x, false, None)
    }
}

/// Encoder trunk, mu head, log-variance head, and decoder.
///
/// The heads output log-variance; sigma is recovered by exponentiation, which
/// keeps it positive without constraints. The decoder ends in a sigmoid so
/// reconstructions stay in the unit hypercube.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeModel {
    pub trunk: Subnet,
    pub mu_head: Subnet,
    pub logvar_head: Subnet,
    pub decoder: Subnet,
    pub latent_dim: usize,
    pub input_dim: usize,
}

impl VaeModel {
    pub fn init(d: usize, hidden: usize, latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        let trunk = Subnet::init(
            vec![LayerSpec::affine(d, hidden), LayerSpec::Relu],
            &mut rng.split(0),
        )?;
        let mu_head = Subnet::init(vec![LayerSpec::affine(hidden, latent_dim)], &mut rng.split(1))?;
        let logvar_head =
            Subnet::init(vec![LayerSpec::affine(hidden, latent_dim)], &mut rng.split(2))?;
        let decoder = Subnet::init(
            vec![
                LayerSpec::affine(latent_dim, hidden),
                LayerSpec::Relu,
                LayerSpec::affine(hidden, d),
                LayerSpec::Sigmoid,
            ],
            &mut rng.split(3),
        )?;
        Ok(Self {
            trunk,
            mu_head,
            logvar_head,
            decoder,
            latent_dim,
            input_dim: d,
        })
    }

    /// Deterministic mu-embedding of a query (no sampling, no dropout).
    pub fn encode_mu(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::structure(format!(
                "encode_mu: input length {} != {}",
                x.len(),
                self.input_dim
            )));
        }
        let h = self.trunk.run(x)?;
        let mu = self.mu_head.run(h.output())?;
        Ok(mu.output().to_vec())
    }

    /// (mu, sigma) of the latent Gaussian for `x`.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.trunk.run(x)?;
        let mu = self.mu_head.run(h.output())?.output().to_vec();
        let logvar = self.logvar_head.run(h.output())?.output().to_vec();
        let sigma = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        Ok((mu, sigma))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decoder.run(z)?.output().to_vec())
    }

    /// Euclidean distance from the mu-embedding of `x` to `target_mu`, and
    /// its gradient with respect to `x`. Used by the white-box evasion
    /// attacker and exercised by the gradient tests.
    pub fn latent_distance_gradient(
        &self,
        x: &[f64],
        target_mu: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let h = self.trunk.run(x)?;
        let mu_trace = self.mu_head.run(h.output())?;
        let mu = mu_trace.output();
        let dist = crate::numerics::euclidean_distance(mu, target_mu);
        // d||mu - t|| / dmu = (mu - t) / ||mu - t||; guard the zero-distance pole
        let denom = dist.max(1e-12);
        let dmu: Vec<f64> = mu
            .iter()
            .zip(target_mu)
            .map(|(m, t)| (m - t) / denom)
            .collect();
        let (_, dh) = backward(&self.mu_head.params, &self.mu_head.specs, &mu_trace, &dmu)?;
        let (_, dx) = backward(&self.trunk.params, &self.trunk.specs, &h, &dh)?;
        Ok((dist, dx))
    }
}

/// Latent-space targets for the two classes modeled by the VAE (benign and
/// outlier), plus the reconstruction multiplier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentTargets {
    pub mu_c: Vec<f64>,
    pub mu_o: Vec<f64>,
    pub sigma_c: Vec<f64>,
    pub sigma_o: Vec<f64>,
    pub rho: f64,
}

impl LatentTargets {
    /// mu_C = 0, mu_O = 5*1, unit variances, rho = 0.5.
    pub fn standard(latent_dim: usize) -> Self {
        Self {
            mu_c: vec![0.0; latent_dim],
            mu_o: vec![5.0; latent_dim],
            sigma_c: vec![1.0; latent_dim],
            sigma_o: vec![1.0; latent_dim],
            rho: 0.5,
        }
    }
}

/// The frozen set of mu-embeddings of the confidential training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReference {
    pub embeddings: Vec<Vec<f64>>,
    pub latent_dim: usize,
}

impl LatentReference {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Closed-form KL divergence between diagonal Gaussians, summed over
/// dimensions.
pub fn kl_diag_gauss(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> Result<f64> {
    if mu1.len() != sigma1.len() || mu1.len() != mu2.len() || mu1.len() != sigma2.len() {
        return Err(Error::argument("kl_diag_gauss: length mismatch"));
    }
    if sigma1.iter().chain(sigma2).any(|&s| s <= 0.0) {
        return Err(Error::argument("kl_diag_gauss: sigmas must be positive"));
    }
    let mut total = 0.0;
    for i in 0..mu1.len() {
        let (m1, s1, m2, s2) = (mu1[i], sigma1[i], mu2[i], sigma2[i]);
        total += (s2 / s1).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5;
    }
    Ok(total)
}

/// Loss components of one batch pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub latent_c: f64,
    pub latent_o: f64,
    pub recon: f64,
}

/// Gradients for all four sub-networks.
#[derive(Debug, Clone)]
pub struct VaeGrads {
    pub trunk: ModelParams,
    pub mu_head: ModelParams,
    pub logvar_head: ModelParams,
    pub decoder: ModelParams,
}

impl VaeGrads {
    fn zeros_like(model: &VaeModel) -> Self {
        Self {
            trunk: model.trunk.params.zeros_like(),
            mu_head: model.mu_head.params.zeros_like(),
            logvar_head: model.logvar_head.params.zeros_like(),
            decoder: model.decoder.params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Convergence: relative total-loss improvement below this over
    /// `convergence_window` epochs stops training.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Whether the reconstruction term also covers outlier batches.
    pub recon_on_outliers: bool,
    pub seed: u64,
}

impl VaeTrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            max_epochs: 500,
            batch_size: 64,
            lr: 1e-3,
            hidden: 64,
            latent_dim: DEFAULT_LATENT_DIM,
            convergence_tol: 1e-4,
            convergence_window: 10,
            recon_on_outliers: true,
            seed,
        }
    }
}

/// Loss and gradients for one batch pair with caller-supplied reparameterization
/// noise (one eps vector per sample). Freezing eps makes the loss a
/// deterministic function, which is what the finite-difference checks need.
pub fn vae_loss_with_eps(
    model: &VaeModel,
    batch_c: &[&[f64]],
    batch_o: &[&[f64]],
    targets: &LatentTargets,
    eps_c: &[Vec<f64>],
    eps_o: &[Vec<f64>],
    recon_on_outliers: bool,
) -> Result<(VaeLoss, VaeGrads)> {
    if batch_c.is_empty() || batch_o.is_empty() {
        return Err(Error::argument("vae_loss: batches must be nonempty"));
    }
    if eps_c.len() != batch_c.len() || eps_o.len() != batch_o.len() {
        return Err(Error::argument("vae_loss: eps count mismatch"));
    }
    let mut grads = VaeGrads::zeros_like(model);
    let recon_count = if recon_on_outliers {
        batch_c.len() + batch_o.len()
    } else {
        batch_c.len()
    };
    let mut latent_c = 0.0;
    let mut latent_o = 0.0;
    let mut recon = 0.0;
    for (is_outlier, batch, eps_batch) in
        [(false, batch_c, eps_c), (true, batch_o, eps_o)]
    {
        let (mu_t, sigma_t) = if is_outlier {
            (&targets.mu_o, &targets.sigma_o)
        } else {
            (&targets.mu_c, &targets.sigma_c)
        };
        let kl_weight = 1.0 / batch.len() as f64;
        let recon_active = !is_outlier || recon_on_outliers;
        let recon_weight = targets.rho / recon_count as f64;
        for (x, eps) in batch.iter().zip(eps_batch) {
            if eps.len() != model.latent_dim {
                return Err(Error::argument("vae_loss: eps dimension mismatch"));
            }
            let h_trace = model.trunk.run(x)?;
            let h = h_trace.output().to_vec();
            let mu_trace = model.mu_head.run(&h)?;
            let lv_trace = model.logvar_head.run(&h)?;
            let mu = mu_trace.output();
            let logvar = lv_trace.output();
            let sigma: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();

            let kl = kl_diag_gauss(mu, &sigma, mu_t, sigma_t)?;
            if is_outlier {
                latent_o += kl * kl_weight;
            } else {
                latent_c += kl * kl_weight;
            }

            // KL gradients wrt mu and sigma
            let mut dmu: Vec<f64> = mu
                .iter()
                .zip(mu_t.iter().zip(sigma_t))
                .map(|(m, (mt, st))| kl_weight * (m - mt) / (st * st))
                .collect();
            let mut dsigma: Vec<f64> = sigma
                .iter()
                .zip(sigma_t)
                .map(|(s, st)| kl_weight * (s / (st * st) - 1.0 / s))
                .collect();

            if recon_active {
                let z: Vec<f64> = mu
                    .iter()
                    .zip(&sigma)
                    .zip(eps)
                    .map(|((m, s), e)| m + s * e)
                    .collect();
                let dec_trace = model.decoder.run(&z)?;
                let xhat = dec_trace.output();
                let sq: f64 = xhat
                    .iter()
                    .zip(*x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                recon += sq / recon_count as f64;
                let dxhat: Vec<f64> = xhat
                    .iter()
                    .zip(*x)
                    .map(|(a, b)| recon_weight * 2.0 * (a - b))
                    .collect();
                let (dec_g, dz) =
                    backward(&model.decoder.params, &model.decoder.specs, &dec_trace, &dxhat)?;
                grads.decoder.axpy(1.0, &dec_g);
                for ((dm, ds), (dzi, e)) in
                    dmu.iter_mut().zip(dsigma.iter_mut()).zip(dz.iter().zip(eps))
                {
                    *dm += dzi;
                    *ds += dzi * e;
                }
            }

            // sigma = exp(0.5 * logvar) => dsigma/dlogvar = 0.5 * sigma
            let dlogvar: Vec<f64> = dsigma
                .iter()
                .zip(&sigma)
                .map(|(ds, s)| ds * 0.5 * s)
                .collect();

            let (mu_g, dh_mu) =
                backward(&model.mu_head.params, &model.mu_head.specs, &mu_trace, &dmu)?;
            let (lv_g, dh_lv) = backward(
                &model.logvar_head.params,
                &model.logvar_head.specs,
                &lv_trace,
                &dlogvar,
            )?;
            grads.mu_head.axpy(1.0, &mu_g);
            grads.logvar_head.axpy(1.0, &lv_g);
            let dh: Vec<f64> = dh_mu.iter().zip(&dh_lv).map(|(a, b)| a + b).collect();
            let (trunk_g, _) = backward(&model.trunk.params, &model.trunk.specs, &h_trace, &dh)?;
            grads.trunk.axpy(1.0, &trunk_g);
        }
    }
    let loss = VaeLoss {
        total: latent_c + latent_o + targets.rho * recon,
        latent_c,
        latent_o,
        recon,
    };
    Ok((loss, grads))
}

/// Loss for one batch pair with freshly drawn reparameterization noise.
pub fn vae_loss(
    model: &VaeModel,
    batch_c: &[&[f64]],
    batch_o: &[&[f64]],
    targets: &LatentTargets,
    rng: &mut Rng,
) -> Result<VaeLoss> {
    let draw = |rng: &mut Rng, n: usize, dim: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect()
    };
    let eps_c = draw(rng, batch_c.len(), model.latent_dim);
    let eps_o = draw(rng, batch_o.len(), model.latent_dim);
    let (loss, _) = vae_loss_with_eps(model, batch_c, batch_o, targets, &eps_c, &eps_o, true)?;
    Ok(loss)
}

/// Trains the modified VAE on the confidential and outlier datasets.
///
/// Each step draws one batch from each dataset; training stops at the epoch
/// cap or when the relative total-loss improvement over the convergence
/// window drops below the tolerance. Deterministic under the config seed.
pub fn train_detector_vae(
    d_c: &Dataset,
    d_o: &Dataset,
    targets: &LatentTargets,
    cfg: &VaeTrainConfig,
    rng: &mut Rng,
) -> Result<(VaeModel, Vec<f64>)> {
    if d_c.is_empty() || d_o.is_empty() {
        return Err(Error::argument("VAE training needs nonempty datasets"));
    }
    let d = d_c.dim();
    let mut init_rng = rng.split(0);
    let mut train_rng = rng.split(1);
    let mut model = VaeModel::init(d, cfg.hidden, cfg.latent_dim, &mut init_rng)?;
    let mut adam_trunk = AdamState::new(&model.trunk.params, cfg.lr);
    let mut adam_mu = AdamState::new(&model.mu_head.params, cfg.lr);
    let mut adam_lv = AdamState::new(&model.logvar_head.params, cfg.lr);
    let mut adam_dec = AdamState::new(&model.decoder.params, cfg.lr);

    let steps = d_c.len().div_ceil(cfg.batch_size).max(1);
    let mut epoch_losses: Vec<f64> = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let order_c = train_rng.permutation(d_c.len());
        let order_o = train_rng.permutation(d_o.len());
        let mut epoch_total = 0.0;
        for step in 0..steps {
            let take = |order: &[usize], len: usize| -> Vec<usize> {
                (0..cfg.batch_size.min(len))
                    .map(|j| order[(step * cfg.batch_size + j) % len])
                    .collect()
            };
            let idx_c = take(&order_c, d_c.len());
            let idx_o = take(&order_o, d_o.len());
            let batch_c: Vec<&[f64]> = idx_c.iter().map(|&i| d_c.sample(i).0.data()).collect();
            let batch_o: Vec<&[f64]> = idx_o.iter().map(|&i| d_o.sample(i).0.data()).collect();
            let draw = |rng: &mut Rng, n: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| (0..cfg.latent_dim).map(|_| rng.normal()).collect())
                    .collect()
            };
            let eps_c = draw(&mut train_rng, batch_c.len());
            let eps_o = draw(&mut train_rng, batch_o.len());
            let (loss, grads) = vae_loss_with_eps(
                &model,
                &batch_c,
                &batch_o,
                targets,
                &eps_c,
                &eps_o,
                cfg.recon_on_outliers,
            )?;
            epoch_total += loss.total;
            adam_trunk.step(&mut model.trunk.params, &grads.trunk)?;
            adam_mu.step(&mut model.mu_head.params, &grads.mu_head)?;
            adam_lv.step(&mut model.logvar_head.params, &grads.logvar_head)?;
            adam_dec.step(&mut model.decoder.params, &grads.decoder)?;
        }
        epoch_losses.push(epoch_total / steps as f64);
        if epoch + 1 >= cfg.convergence_window {
            let now = epoch_losses[epoch];
            let then = epoch_losses[epoch + 1 - cfg.convergence_window];
            let rel = (then - now) / then.abs().max(1e-12);
            if rel < cfg.convergence_tol && rel > -cfg.convergence_tol {
                break;
            }
        }
    }
    Ok((model, epoch_losses))
}

/// Freezes the mu-embeddings of the confidential training set, order-stable.
pub fn build_reference(model: &VaeModel, d_c_train: &Dataset) -> Result<LatentReference> {
    let embeddings: Vec<Vec<f64>> = d_c_train
        .samples()
        .iter()
        .map(|(x, _)| model.encode_mu(x.data()))
        .collect::<Result<_>>()?;
    Ok(LatentReference {
        embeddings,
        latent_dim: model.latent_dim,
    })
}

/// Fraction of embeddings on the confidential side of the mu_C/mu_O midpoint
/// hyperplane.
pub fn midpoint_side_fraction(
    embeddings: &[Vec<f64>],
    targets: &LatentTargets,
    confidential_side: bool,
) -> f64 {
    let dir: Vec<f64> = targets
        .mu_o
        .iter()
        .zip(&targets.mu_c)
        .map(|(o, c)| o - c)
        .collect();
    let mid: Vec<f64> = targets
        .mu_o
        .iter()
        .zip(&targets.mu_c)
        .map(|(o, c)| 0.5 * (o + c))
        .collect();
    let mut hits = 0usize;
    for e in embeddings {
        let proj: f64 = e
            .iter()
            .zip(&dir)
            .zip(&mid)
            .map(|((ei, di), mi)| (ei - mi) * di)
            .sum();
        let on_c_side = proj < 0.0;
        if on_c_side == confidential_side {
            hits += 1;
        }
    }
    hits as f64 / embeddings.len() as f64
}
