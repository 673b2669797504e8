//! Polarimeter records `dM = <F_z^{00}> dt + dW/√κ` paired with the conditioned
//! Gaussian state. The covariance path is record-independent, so a batch shares
//! one [`DeterministicPath`] and each trajectory only filters its means.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{DeterministicPath, MomentModel, MomentState, SpinWaveMoments};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;

#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub stream: u64,
    pub dt: f64,
    /// Start time of each sample.
    pub times: Vec<f64>,
    /// Record increments in `F_z`·s.
    pub dm: Vec<f64>,
    /// Conditioned `<F_z^{00}>` at the start of each sample.
    pub fz: Vec<f64>,
    /// Deterministic moments at the end, with the conditioned final mean.
    pub final_moments: SpinWaveMoments,
    pub config_hash: String,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.dm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dm.is_empty()
    }

    /// CSV with `#` header lines carrying provenance and units.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# config_hash: {}", self.config_hash);
        let _ = writeln!(s, "# seed: {} stream: {}", self.seed, self.stream);
        let _ = writeln!(s, "# dt_s: {:e}", self.dt);
        let _ = writeln!(s, "# units: t [s], dM [F_z s], fz [F_z]");
        s.push_str("t,dM,fz\n");
        for i in 0..self.dm.len() {
            let _ = writeln!(s, "{:.9e},{:.17e},{:.17e}", self.times[i], self.dm[i], self.fz[i]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rec = TrajectoryRecord {
            seed: 0,
            stream: 0,
            dt: f64::NAN,
            times: Vec::new(),
            dm: Vec::new(),
            fz: Vec::new(),
            final_moments: SpinWaveMoments { fx: f64::NAN, fz: f64::NAN, var_fz: f64::NAN },
            config_hash: String::new(),
        };
        let bad = |line: usize, what: &str| Error::Format(format!("record line {}: {what}", line + 1));
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("config_hash:") {
                    rec.config_hash = v.trim().to_string();
                } else if let Some(v) = rest.strip_prefix("dt_s:") {
                    rec.dt = v.trim().parse().map_err(|_| bad(ln, "bad dt"))?;
                } else if let Some(v) = rest.strip_prefix("seed:") {
                    let parts: Vec<&str> = v.split_whitespace().collect();
                    if parts.len() == 3 {
                        rec.seed = parts[0].parse().map_err(|_| bad(ln, "bad seed"))?;
                        rec.stream = parts[2].parse().map_err(|_| bad(ln, "bad stream"))?;
                    }
                }
                continue;
            }
            if line.is_empty() || line.starts_with("t,") {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(ln, "non-numeric field"))?;
            if cols.len() < 2 {
                return Err(bad(ln, "expected t,dM[,fz]"));
            }
            rec.times.push(cols[0]);
            rec.dm.push(cols[1]);
            rec.fz.push(cols.get(2).copied().unwrap_or(f64::NAN));
        }
        if !(rec.dt > 0.0) {
            if rec.times.len() >= 2 {
                rec.dt = rec.times[1] - rec.times[0];
            } else {
                return Err(Error::Format("record carries no time step".into()));
            }
        }
        Ok(rec)
    }
}

fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_end >= dt) {
        return Err(Error::domain(format!("need 0 < dt <= T, got dt = {dt:e}, T = {t_end:e}")));
    }
    Ok((t_end / dt).round() as usize)
}

/// One trajectory on a precomputed path.
pub fn filter_record(
    model: &MomentModel,
    path: &DeterministicPath,
    initial: &MomentState,
    seed: u64,
    stream: u64,
    config_hash: &str,
) -> Result<TrajectoryRecord> {
    let mut noise = NoiseStream::new(seed, stream);
    let dt = path.dt;
    let out = model.filter(path, initial, || noise.wiener(dt))?;
    let mut fin = *path.moments.last().expect("non-empty path");
    fin.fz = model.measurement_vector().dot(&out.final_odd);
    Ok(TrajectoryRecord {
        seed,
        stream,
        dt,
        times: path.times[..path.n_steps()].to_vec(),
        dm: out.dm,
        fz: out.fz,
        final_moments: fin,
        config_hash: config_hash.to_string(),
    })
}

pub fn simulate_record(
    model: &MomentModel,
    initial: &MomentState,
    t_end: f64,
    dt: f64,
    seed: u64,
    config_hash: &str,
) -> Result<TrajectoryRecord> {
    let n = steps_for(t_end, dt)?;
    let path = model.deterministic_path(initial, dt, n)?;
    filter_record(model, &path, initial, seed, 0, config_hash)
}

/// A batch of independent trajectories; stream `i` for trajectory `i`.
#[derive(Debug)]
pub struct Batch {
    pub base_seed: u64,
    pub path: DeterministicPath,
    pub records: Vec<Result<TrajectoryRecord>>,
}

impl Batch {
    pub fn ok_records(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.records.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failures(&self) -> Vec<(usize, String)> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e.to_string())))
            .collect()
    }
}

pub fn batch_simulate(
    model: &MomentModel,
    initial: &MomentState,
    t_end: f64,
    dt: f64,
    n_traj: usize,
    base_seed: u64,
    config_hash: &str,
) -> Result<Batch> {
    if n_traj == 0 {
        return Err(Error::domain("batch needs at least one trajectory"));
    }
    let n = steps_for(t_end, dt)?;
    let path = model.deterministic_path(initial, dt, n)?;
    let records = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| filter_record(model, &path, initial, base_seed, i, config_hash))
        .collect();
    Ok(Batch { base_seed, path, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::spin_coefficients;
    use crate::geometry::OverlapTables;
    use crate::pumping::PumpingTables;
    use crate::angular::TwoJ;

    fn model(betas: &[f64], kappa: f64) -> MomentModel {
        MomentModel::new(OverlapTables::point_atoms(betas), PumpingTables::weighted_sum(&[]), kappa, spin_coefficients(TwoJ(8)).unwrap()).unwrap()
    }

    #[test]
    fn empty_trap_is_white_noise_at_shot_noise_level() {
        let m = model(&[0.0], 4.0);
        let s0 = m.initial_state();
        let (t_end, dt, n) = (1e-4, 1e-6, 2000);
        let batch = batch_simulate(&m, &s0, t_end, dt, n, 9, "test").unwrap();
        let sums: Vec<f64> = batch.ok_records().map(|r| r.dm.iter().sum()).collect();
        let mean = sums.iter().sum::<f64>() / n as f64;
        let var = sums.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = t_end / m.kappa;
        // χ² with n-1 degrees of freedom: sd of the sample variance ≈ want·√(2/(n-1))
        assert!((var - want).abs() < 3.0 * want * (2.0 / (n - 1) as f64).sqrt(), "{var} vs {want}");
        assert!(mean.abs() < 3.0 * (want / n as f64).sqrt());
    }

    #[test]
    fn batches_are_bit_reproducible_and_single_matches() {
        let m = model(&[1.0, 0.5], 10.0);
        let s0 = m.initial_state();
        let a = batch_simulate(&m, &s0, 1e-5, 1e-7, 3, 77, "h").unwrap();
        let b = batch_simulate(&m, &s0, 1e-5, 1e-7, 3, 77, "h").unwrap();
        for (x, y) in a.ok_records().zip(b.ok_records()) {
            assert_eq!(x.dm, y.dm);
        }
        let one = simulate_record(&m, &s0, 1e-5, 1e-7, 77, "h").unwrap();
        assert_eq!(one.dm, a.records[0].as_ref().unwrap().dm);
        assert_eq!(one.times.len(), one.dm.len());
    }

    #[test]
    fn csv_round_trip() {
        let m = model(&[1.0], 10.0);
        let s0 = m.initial_state();
        let r = simulate_record(&m, &s0, 1e-6, 1e-7, 1, "abc").unwrap();
        let back = TrajectoryRecord::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.dm, r.dm);
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.dt, r.dt);
    }

    #[test]
    fn conditioned_mean_is_unbiased_and_total_variance_is_conserved() {
        // without pumping: Var(<F_z>_c(t)) + ΔF_z²(t) = ΔF_z²(0)
        let m = model(&[1.0], 0.3);
        let s0 = m.initial_state();
        let n = 3000;
        let batch = batch_simulate(&m, &s0, 1.0, 1e-3, n, 3, "t").unwrap();
        let finals: Vec<f64> = batch.ok_records().map(|r| r.final_moments.fz).collect();
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let cond = batch.path.moments.last().unwrap().var_fz;
        let v0 = batch.path.moments[0].var_fz;
        let expect = v0 - cond;
        assert!(mean.abs() < 4.0 * (expect / n as f64).sqrt());
        assert!((var - expect).abs() < 4.0 * expect * (2.0 / n as f64).sqrt(), "{var} vs {expect}");
    }
}
