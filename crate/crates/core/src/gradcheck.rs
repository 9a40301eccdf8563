//! Full-model gradient check against central finite differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, LabelSet};
use crate::error::{Error, Result};
use crate::kernels::Tensor2;
use crate::model::{backward, forward, init_params, Dims, Mode, ModelParams, OwnedInput, ParamGroup};
use crate::real::Real;
use crate::seed::{self, Stream};
use crate::training::sample_loss;

/// Gradient entries smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub dims: Dims,
    pub seq_len: usize,
    pub seed: u64,
    pub step: f64,
    pub tol: f64,
    pub dropout: f64,
    pub precision: Precision,
    /// Test hook: perturb the analytic gradient of this group.
    pub corrupt: Option<ParamGroup>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dims: Dims {
                token_dim: 8,
                image_dim: 8,
                hidden: 4,
                fused: 8,
                n_subclasses: 4,
            },
            seq_len: 3,
            seed: 0,
            step: 1e-5,
            tol: 1e-4,
            dropout: 0.2,
            precision: Precision::F64,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: ParamGroup,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub precision: Precision,
    pub tol: f64,
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn offenders(&self) -> Vec<ParamGroup> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_err <= self.tol))
            .map(|g| g.group)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.offenders().is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>8} {:>14}  (tol {:e}, {})", "group", "entries", "max_rel_err", self.tol, self.precision)?;
        for g in &self.groups {
            let verdict = if g.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            writeln!(f, "{:<18} {:>8} {:>14.3e}  {verdict}", g.group.name(), g.entries, g.max_rel_err)?;
        }
        Ok(())
    }
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    match cfg.precision {
        Precision::F32 => run_in::<f32>(cfg),
        Precision::F64 => run_in::<f64>(cfg),
    }
}

fn run_in<T: Real>(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.dims.check()?;
    if cfg.seq_len == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("gradcheck needs seq_len >= 1 and a positive step".into()));
    }
    let d = cfg.dims;
    let mut rng = seed::rng(cfg.seed, Stream::GradCheck, &[]);

    let mut params: ModelParams<T> = init_params(cfg.seed, d)?;
    // non-zero biases so every term of the backward pass is exercised
    for g in ParamGroup::ALL.into_iter().filter(|g| !g.is_weight()) {
        for v in params.group_mut(g) {
            *v = *v + T::from_f64(rng.random_range(-0.5..0.5));
        }
    }
    let mut uniform = |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect() };
    let input = OwnedInput {
        id: "gradcheck".into(),
        tokens: Tensor2::from_vec(cfg.seq_len, d.token_dim, uniform(cfg.seq_len * d.token_dim))?,
        image: uniform(d.image_dim),
    };
    let mut labels = LabelSet::EMPTY;
    labels.set(Label::Misogynous, true);
    labels.set(Label::Stereotype, true);
    labels.set(Label::Violence, true);

    let mode = Mode::Train { dropout: cfg.dropout };
    let mask_seed = seed::derive(cfg.seed, Stream::Dropout, &[]);
    let loss_of = |p: &ModelParams<T>| -> Result<(T, ModelParams<T>)> {
        let mut r = seed::Rng::seed_from_u64(mask_seed);
        let (out, cache) = forward(p, input.view(), mode, &mut r)?;
        let (loss, g) = sample_loss(&out.logits, labels, T::one())?;
        Ok((loss, backward(p, &cache, &g)?))
    };

    let (_, mut analytic) = loss_of(&params)?;
    if let Some(g) = cfg.corrupt {
        for v in analytic.group_mut(g) {
            *v = *v * T::from_f64(1.1) + T::from_f64(0.01);
        }
    }

    let h = T::from_f64(cfg.step);
    let mut groups = Vec::with_capacity(ParamGroup::ALL.len());
    for g in ParamGroup::ALL {
        let n = params.group(g).len();
        let mut worst = 0.0f64;
        for k in 0..n {
            let orig = params.group(g)[k];
            params.group_mut(g)[k] = orig + h;
            let (fp, _) = loss_of(&params)?;
            params.group_mut(g)[k] = orig - h;
            let (fm, _) = loss_of(&params)?;
            params.group_mut(g)[k] = orig;
            let numeric = (fp - fm).to_f64() / (2.0 * cfg.step);
            let e = relative_error(analytic.group(g)[k].to_f64(), numeric);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        groups.push(GroupResult {
            group: g,
            entries: n,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        precision: cfg.precision,
        tol: cfg.tol,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn tiny_model_passes_in_f64() {
        let r = run(&GradCheckConfig::default()).unwrap();
        assert_eq!(r.groups.len(), ParamGroup::ALL.len());
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn corrupted_group_is_named() {
        let cfg = GradCheckConfig {
            corrupt: Some(ParamGroup::FusedBias),
            ..Default::default()
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.offenders(), vec![ParamGroup::FusedBias]);
    }

    #[test]
    fn f32_cannot_meet_tight_tolerance() {
        let cfg = GradCheckConfig {
            precision: Precision::F32,
            tol: 1e-9,
            ..Default::default()
        };
        assert!(!run(&cfg).unwrap().passed());
    }
}
