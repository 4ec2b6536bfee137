//! Ensemble harness: drives many coupled pairs, fits the decay rate of the
//! coupling distance, brackets the Lipschitz-dual distance between the two
//! marginal laws, and estimates the stationary measure from independent
//! starts.
//!
//! The per-pair evolution is embarrassingly parallel: every pair draws its
//! own RNG streams keyed by (seed, pair, step), so the report is bitwise
//! identical regardless of thread schedule.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use std::sync::Arc;

use crate::coupling::{coupled_step, Branch, ControlEngine, KantorovichDensity, f_k_eval};
use crate::error::{Error, Result};
use crate::field::{SpectralField, StateBasis};
use crate::haar::{NoisePath, NoiseSpec};
use crate::models::{flow_map, flow_zero, sample_smooth_state, Propagator};
use crate::rng::{stream, Domain};
use crate::stats::{bootstrap_indices, linear_fit, mean, quantile};

/// Ensemble shape: how many pairs, how long, where they start.
#[derive(Clone, Debug)]
pub struct EnsembleOptions {
    /// Number of coupled pairs.
    pub pairs: usize,
    /// Number of coupled steps.
    pub horizon: usize,
    /// Sampling radius of the initial states; must cover the drift ball.
    pub radius: f64,
    /// Initial pair distances, cycled over pairs. Empty selects the default
    /// schedule {2 delta, delta, delta/4, d0/2}, which exercises both the
    /// shared-noise and the controlled branch from the first step.
    pub distance_schedule: Vec<f64>,
    /// Random clipped-linear functionals per dual-distance evaluation.
    pub functionals: usize,
    /// Bootstrap resamples for the decay-rate band.
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            pairs: 64,
            horizon: 40,
            radius: 0.0,
            distance_schedule: Vec::new(),
            functionals: 64,
            resamples: 100,
            seed: 1,
        }
    }
}

/// One pair's outcome at one step, as written to the step log.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub pair: usize,
    pub step: usize,
    pub branch: Branch,
    pub distance_before: f64,
    pub distance_after: f64,
    pub squeeze_ratio: f64,
    pub glued_equal: bool,
    pub tv_estimate: f64,
    pub clamped: bool,
}

/// Ensemble statistics at one step.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub k: usize,
    pub mean_fk: f64,
    pub q10: f64,
    pub q90: f64,
    /// Mean of the merge-capped gap |u - u'| ^ d0.
    pub mean_dist: f64,
    pub glued_fraction: f64,
    /// Monte-Carlo lower bound on the dual distance of the marginals.
    pub lip_lower: f64,
    /// Certified upper bound (r_star / d0) * mean f_K.
    pub lip_upper: f64,
}

/// Decay-rate fit of a positive mean series.
#[derive(Clone, Debug)]
pub struct DecayFit {
    /// Per-step contraction factor exp(tail-half log-slope).
    pub kappa: f64,
    /// Fitted value extrapolated to step 0.
    pub prefactor: f64,
    /// Some entries were non-positive and were floored before the log.
    pub floored: bool,
}

impl DecayFit {
    /// A fitted factor at or above one means the series shows no decay.
    pub fn is_mixing(&self) -> bool {
        self.kappa < 1.0
    }
}

/// Everything one coupled-ensemble run reports.
#[derive(Clone, Debug)]
pub struct MixingReport {
    pub steps: Vec<StepStats>,
    pub fit: DecayFit,
    /// 95% bootstrap band for kappa (2.5% and 97.5% quantiles over
    /// trajectory resamples).
    pub band: (f64, f64),
    /// Steps of burn-in the fitted rate implies: ceil(3 / |ln kappa|).
    pub burn_in: usize,
    /// First step at which each pair glued exactly; None if it never did.
    pub glue_times: Vec<Option<usize>>,
}

/// Full output of a run: the report plus the raw per-pair step log and the
/// per-pair coupling-distance series (pairs x (horizon + 1)).
pub struct EnsembleRun {
    pub report: MixingReport,
    pub records: Vec<StepRecord>,
    pub fk_series: Vec<Vec<f64>>,
}

/// Default initial-distance schedule spanning both coupling branches.
pub fn default_distance_schedule(engine: &ControlEngine, kd: &KantorovichDensity) -> Vec<f64> {
    vec![2.0 * engine.delta, engine.delta, engine.delta / 4.0, kd.d0 / 2.0]
}

/// Evolve `pairs` coupled pairs for `horizon` steps and aggregate the decay
/// of the coupling distance. Initial states are sampled inside the ball of
/// radius `opts.radius` (default: the working radius), the second state of
/// each pair offset by the distance schedule.
pub fn run_coupled_ensemble(
    engine: &ControlEngine,
    kd: &KantorovichDensity,
    opts: &EnsembleOptions,
) -> Result<EnsembleRun> {
    if opts.pairs == 0 {
        return Err(Error::Validation("ensemble needs at least one pair".into()));
    }
    if opts.horizon == 0 {
        return Err(Error::Validation("horizon must be at least one step".into()));
    }
    let radius = if opts.radius > 0.0 { opts.radius } else { kd.r_star };
    if radius < kd.r0_star {
        return Err(Error::Validation(format!(
            "initial radius {radius:.6e} below the drift radius {:.6e}; the working ball \
             must cover the drift fixed point",
            kd.r0_star
        )));
    }
    let schedule = if opts.distance_schedule.is_empty() {
        default_distance_schedule(engine, kd)
    } else {
        opts.distance_schedule.clone()
    };
    let basis = engine.basis().clone();
    let index = engine.index();
    let horizon = opts.horizon;

    struct PairTrace {
        fk: Vec<f64>,
        dist: Vec<f64>,
        records: Vec<StepRecord>,
        states: Vec<(SpectralField, SpectralField)>,
        glue_time: Option<usize>,
    }

    let traces: Result<Vec<PairTrace>> = (0..opts.pairs)
        .into_par_iter()
        .map(|pair| {
            let mut rng = stream(opts.seed, Domain::InitialState, pair as u64, 0);
            let r = radius * rng.gen::<f64>();
            let mut u = sample_smooth_state(&basis, r, &mut rng);
            let dir = sample_smooth_state(&basis, 1.0, &mut rng);
            let d0 = schedule[pair % schedule.len()];
            let mut u_prime = u.clone();
            u_prime.axpy(d0, &dir);
            if d0 == 0.0 {
                u_prime = u.clone();
            }

            let mut fk = Vec::with_capacity(horizon + 1);
            let mut dist = Vec::with_capacity(horizon + 1);
            let mut states = Vec::with_capacity(horizon + 1);
            let mut records = Vec::with_capacity(horizon);
            let mut glue_time = None;
            fk.push(f_k_eval(kd, &u, &u_prime));
            dist.push(u_prime.sub(&u).sobolev_norm(index).min(kd.d0));
            states.push((u.clone(), u_prime.clone()));
            if u_prime.sub(&u).sobolev_norm(index) == 0.0 {
                glue_time = Some(0);
            }
            for k in 1..=horizon {
                let mut step_rng = stream(opts.seed, Domain::Coupling, pair as u64, k as u64);
                let out = coupled_step(engine, &u, &u_prime, kd, &mut step_rng)?;
                u = out.u1;
                u_prime = out.u1_prime;
                records.push(StepRecord {
                    pair,
                    step: k,
                    branch: out.branch,
                    distance_before: out.distance_before,
                    distance_after: out.distance_after,
                    squeeze_ratio: out.squeeze_ratio,
                    glued_equal: out.glued_equal,
                    tv_estimate: out.tv_estimate,
                    clamped: out.clamped,
                });
                fk.push(f_k_eval(kd, &u, &u_prime));
                dist.push(out.distance_after.min(kd.d0));
                states.push((u.clone(), u_prime.clone()));
                if glue_time.is_none() && out.distance_after == 0.0 {
                    glue_time = Some(k);
                }
            }
            Ok(PairTrace { fk, dist, records, states, glue_time })
        })
        .collect();
    let traces = traces?;

    let mut steps = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let fks: Vec<f64> = traces.iter().map(|t| t.fk[k]).collect();
        let dists: Vec<f64> = traces.iter().map(|t| t.dist[k]).collect();
        let glued = traces.iter().filter(|t| t.dist[k] == 0.0).count();
        let ens_a: Vec<&SpectralField> = traces.iter().map(|t| &t.states[k].0).collect();
        let ens_b: Vec<&SpectralField> = traces.iter().map(|t| &t.states[k].1).collect();
        let lip_lower =
            lip_dual_estimate(&ens_a, &ens_b, &basis, opts.functionals, opts.seed, k as u64)?;
        let mean_fk = mean(&fks);
        steps.push(StepStats {
            k,
            mean_fk,
            q10: quantile(&fks, 0.10),
            q90: quantile(&fks, 0.90),
            mean_dist: mean(&dists),
            glued_fraction: glued as f64 / traces.len() as f64,
            lip_lower,
            lip_upper: (kd.r_star / kd.d0) * mean_fk,
        });
    }

    let series: Vec<f64> = steps.iter().map(|s| s.mean_fk).collect();
    let fit = fit_decay_rate(&series)?;
    let fk_series: Vec<Vec<f64>> = traces.iter().map(|t| t.fk.clone()).collect();
    let band = bootstrap_decay_band(&fk_series, opts.resamples, opts.seed)?;
    let burn_in = if fit.kappa < 1.0 && fit.kappa > 0.0 {
        (3.0 / fit.kappa.ln().abs()).ceil() as usize
    } else {
        horizon
    };
    let glue_times = traces.iter().map(|t| t.glue_time).collect();
    let mut records = Vec::with_capacity(opts.pairs * horizon);
    for t in &traces {
        records.extend(t.records.iter().cloned());
    }
    Ok(EnsembleRun {
        report: MixingReport { steps, fit, band, burn_in, glue_times },
        records,
        fk_series,
    })
}

/// Least-squares fit of log(series) against the step index over the tail
/// half. Non-positive entries (a fully glued ensemble) are floored at the
/// smallest positive float and flagged.
pub fn fit_decay_rate(series: &[f64]) -> Result<DecayFit> {
    if series.len() < 8 {
        return Err(Error::Validation(format!(
            "decay fit needs at least 8 points, got {}",
            series.len()
        )));
    }
    let start = series.len() / 2;
    let mut floored = false;
    let mut xs = Vec::with_capacity(series.len() - start);
    let mut ys = Vec::with_capacity(series.len() - start);
    for (k, &v) in series.iter().enumerate().skip(start) {
        let v = if v > 0.0 {
            v
        } else {
            floored = true;
            f64::MIN_POSITIVE
        };
        xs.push(k as f64);
        ys.push(v.ln());
    }
    let (slope, intercept) = linear_fit(&xs, &ys);
    Ok(DecayFit { kappa: slope.exp(), prefactor: intercept.exp(), floored })
}

/// 95% band for the fitted rate by resampling whole pair trajectories with
/// replacement: refit on each resampled mean series and take the 2.5% and
/// 97.5% quantiles.
pub fn bootstrap_decay_band(
    fk_series: &[Vec<f64>],
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if fk_series.is_empty() {
        return Err(Error::Validation("bootstrap needs at least one trajectory".into()));
    }
    let len = fk_series[0].len();
    if fk_series.iter().any(|row| row.len() != len) {
        return Err(Error::Validation("trajectory series must share one length".into()));
    }
    let n = fk_series.len();
    let mut kappas = Vec::with_capacity(resamples);
    for r in 0..resamples {
        // Trajectory tags 1e6+ keep these streams disjoint from the
        // per-step functional draws.
        let mut rng = stream(seed, Domain::Observable, 1_000_000 + r as u64, 0);
        let idx = bootstrap_indices(n, &mut rng);
        let series: Vec<f64> = (0..len)
            .map(|k| idx.iter().map(|&i| fk_series[i][k]).sum::<f64>() / n as f64)
            .collect();
        kappas.push(fit_decay_rate(&series)?.kappa);
    }
    Ok((quantile(&kappas, 0.025), quantile(&kappas, 0.975)))
}

/// Monte-Carlo lower bound on the Lipschitz-dual distance between the
/// empirical laws of two ensembles: the largest gap of empirical means over
/// random clipped-linear functionals u -> clamp(<w, u>, -1, 1), each
/// 1-Lipschitz with |value| <= 1 by construction.
pub fn lip_dual_estimate(
    ens_a: &[&SpectralField],
    ens_b: &[&SpectralField],
    basis: &Arc<StateBasis>,
    functionals: usize,
    seed: u64,
    tag: u64,
) -> Result<f64> {
    if ens_a.len() != ens_b.len() || ens_a.is_empty() {
        return Err(Error::Validation(format!(
            "dual estimate needs two equal non-empty ensembles, got {} and {}",
            ens_a.len(),
            ens_b.len()
        )));
    }
    let flat_a: Vec<DVector<f64>> = ens_a.iter().map(|u| basis.flatten(u)).collect();
    let flat_b: Vec<DVector<f64>> = ens_b.iter().map(|u| basis.flatten(u)).collect();
    let n = flat_a.len() as f64;
    let mut best = 0.0f64;
    for j in 0..functionals {
        let mut rng = stream(seed, Domain::Observable, j as u64, tag);
        let w = basis.flatten(&sample_smooth_state(basis, 1.0, &mut rng));
        let mut gap = 0.0;
        for (a, b) in flat_a.iter().zip(flat_b.iter()) {
            gap += w.dot(a).clamp(-1.0, 1.0) - w.dot(b).clamp(-1.0, 1.0);
        }
        best = best.max((gap / n).abs());
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Stationary-measure estimation
// ---------------------------------------------------------------------------

/// Chain layout for the stationary estimate.
#[derive(Clone, Debug)]
pub struct StationaryOptions {
    /// Independent chains per initial radius.
    pub chains: usize,
    /// Post-burn-in samples per chain.
    pub samples: usize,
    /// Steps discarded before sampling (3x the fitted mixing time).
    pub burn_in: usize,
    /// Dyadic energy shells reported.
    pub shells: usize,
    /// Radius of the far initial condition (the near one starts at zero).
    pub radius_high: f64,
    /// Bootstrap resamples for the bands.
    pub resamples: usize,
    pub seed: u64,
}

/// Burn-in long enough that a chain forgets its start: three mixing times
/// of the one-step contraction, plus the extra steps a start at
/// `radius_high` needs to shed its excess over the drift-ball scale.
pub fn default_burn_in(gamma: f64, radius_high: f64, r0_star: f64) -> usize {
    let rate = gamma.ln().abs().max(1e-6);
    let excess = (1.0 + radius_high / r0_star.max(f64::MIN_POSITIVE)).ln().max(0.0);
    ((3.0 + excess) / rate).ceil() as usize
}

/// One observable's estimate from one initial radius.
#[derive(Clone, Debug)]
pub struct ObservableBand {
    pub name: String,
    pub mean: f64,
    /// Percentile bootstrap band (2.5%, 97.5%) over chain averages.
    pub band: (f64, f64),
    /// Bootstrap variance of the mean; halves when the chain count doubles.
    pub var: f64,
}

/// Moment table from two independent initial radii, with the agreement
/// verdict that backs uniqueness of the limit law.
#[derive(Clone, Debug)]
pub struct StationaryReport {
    pub burn_in: usize,
    pub low: Vec<ObservableBand>,
    pub high: Vec<ObservableBand>,
    /// Every observable's bands overlap between the two starts.
    pub agree: bool,
    /// Largest state norm seen after burn-in (support diagnostic).
    pub support_max: f64,
}

fn observable_names(shells: usize) -> Vec<String> {
    let mut names = vec!["l2_sq".to_string(), "h1_sq".to_string()];
    for j in 0..shells {
        names.push(format!("shell{j}"));
    }
    names
}

/// Squared-L2 energy per dyadic wavenumber shell |k|^2 in [4^j, 4^{j+1}),
/// recovered from the Sobolev-weighted coordinates.
fn shell_energies(basis: &StateBasis, flat: &DVector<f64>, shells: usize) -> Vec<f64> {
    let mut out = vec![0.0; shells];
    for i in 0..basis.dim() {
        let (k1, k2, _) = basis.entry(i);
        let ksq = (k1 * k1 + k2 * k2) as f64;
        let j = if ksq < 1.0 { 0 } else { (ksq.ln() / 4f64.ln()).floor() as usize };
        if j < shells {
            out[j] += flat[i] * flat[i] / (1.0 + ksq).powf(basis.index);
        }
    }
    out
}

fn chain_averages(
    prop: &Arc<Propagator>,
    noise: Option<(&NoiseSpec, &crate::field::ModeBasis)>,
    basis: &Arc<StateBasis>,
    radius: f64,
    opts: &StationaryOptions,
    start_tag: u64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let names = observable_names(opts.shells);
    let mut per_chain: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.chains); names.len()];
    let mut support_max = 0.0f64;
    for c in 0..opts.chains {
        let mut rng = stream(opts.seed, Domain::InitialState, start_tag + c as u64, 0);
        let mut u = sample_smooth_state(basis, radius, &mut rng);
        let mut acc = vec![0.0f64; names.len()];
        for k in 0..opts.burn_in + opts.samples {
            u = match noise {
                Some((spec, modes)) => {
                    let mut path_rng =
                        stream(opts.seed, Domain::NoisePath, start_tag + c as u64, k as u64);
                    let path = NoisePath::sample(spec, &mut path_rng);
                    flow_map(prop, &u, spec, &path, modes)?
                }
                None => flow_zero(prop, &u)?,
            };
            if k < opts.burn_in {
                continue;
            }
            let norm = u.sobolev_norm(prop.cfg.index);
            support_max = support_max.max(norm);
            let flat = basis.flatten(&u);
            acc[0] += u.sobolev_norm(0.0).powi(2);
            acc[1] += u.sobolev_norm(1.0).powi(2);
            for (j, e) in shell_energies(basis, &flat, opts.shells).iter().enumerate() {
                acc[2 + j] += e;
            }
        }
        for (slot, a) in per_chain.iter_mut().zip(acc.iter()) {
            slot.push(a / opts.samples as f64);
        }
    }
    Ok((per_chain, support_max))
}

fn band_of(values: &[f64], opts: &StationaryOptions, tag: u64) -> ObservableBand {
    let n = values.len();
    let mut means = Vec::with_capacity(opts.resamples);
    for r in 0..opts.resamples {
        let mut rng = stream(opts.seed, Domain::Observable, 2_000_000 + tag, r as u64);
        let idx = bootstrap_indices(n, &mut rng);
        means.push(idx.iter().map(|&i| values[i]).sum::<f64>() / n as f64);
    }
    let m = mean(&means);
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (means.len() - 1) as f64;
    ObservableBand {
        name: String::new(),
        mean: mean(values),
        band: (quantile(&means, 0.025), quantile(&means, 0.975)),
        var,
    }
}

/// Time-averaged observables after burn-in from two independent initial
/// radii (zero and `radius_high`), with bootstrap bands over chains. The
/// two estimates agreeing within bands is the uniqueness evidence; `None`
/// noise runs the deterministic flow, whose limit is the point mass at the
/// origin.
pub fn estimate_stationary(
    prop: &Arc<Propagator>,
    noise: Option<(&NoiseSpec, &crate::field::ModeBasis)>,
    basis: &Arc<StateBasis>,
    opts: &StationaryOptions,
) -> Result<StationaryReport> {
    if opts.chains < 2 {
        return Err(Error::Validation("stationary estimate needs at least two chains".into()));
    }
    if opts.samples == 0 {
        return Err(Error::Validation("stationary estimate needs at least one sample".into()));
    }
    let names = observable_names(opts.shells);
    let (low_chains, max_low) = chain_averages(prop, noise, basis, 0.0, opts, 0)?;
    let (high_chains, max_high) =
        chain_averages(prop, noise, basis, opts.radius_high, opts, 500_000)?;
    let mut low = Vec::with_capacity(names.len());
    let mut high = Vec::with_capacity(names.len());
    let mut agree = true;
    for (i, name) in names.iter().enumerate() {
        let mut lo = band_of(&low_chains[i], opts, (2 * i) as u64);
        let mut hi = band_of(&high_chains[i], opts, (2 * i + 1) as u64);
        lo.name = name.clone();
        hi.name = name.clone();
        // Absolute floor so two numerically degenerate point masses (bands
        // of zero width) still register as agreeing.
        let slack = 1e-10 + 1e-6 * (lo.mean.abs() + hi.mean.abs());
        if lo.band.0 > hi.band.1 + slack || hi.band.0 > lo.band.1 + slack {
            agree = false;
        }
        low.push(lo);
        high.push(hi);
    }
    Ok(StationaryReport {
        burn_in: opts.burn_in,
        low,
        high,
        agree,
        support_max: max_low.max(max_high),
    })
}
