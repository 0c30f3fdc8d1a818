//! Trajectory-aware composite reward: accuracy, reasoning length, and format terms.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("{name} must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("{name} = {value} outside its range {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("invalid reward config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub l_max: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            tau1: 1.0,
            tau2: 2.0,
            l_max: 512,
            alpha: 0.7,
            beta: 0.2,
            gamma: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(RewardError::Config("tau1 and tau2 must be positive".into()));
        }
        if self.l_max == 0 {
            return Err(RewardError::Config("l_max must be positive".into()));
        }
        if [
            self.alpha,
            self.beta,
            self.gamma,
            self.lambda1,
            self.lambda2,
        ]
        .iter()
        .any(|w| !(*w >= 0.0))
        {
            return Err(RewardError::Config("weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_cot: f64,
    pub r_fmt: f64,
    pub composite: f64,
}

/// `λ1·exp(−ade/τ1) + λ2·exp(−fde/τ2)`.
pub fn accuracy_reward(ade: f64, fde: f64, cfg: &RewardConfig) -> Result<f64, RewardError> {
    if !(ade >= 0.0) {
        return Err(RewardError::Negative {
            name: "ade",
            value: ade,
        });
    }
    if !(fde >= 0.0) {
        return Err(RewardError::Negative {
            name: "fde",
            value: fde,
        });
    }
    Ok(cfg.lambda1 * (-ade / cfg.tau1).exp() + cfg.lambda2 * (-fde / cfg.tau2).exp())
}

/// Linear penalty on reasoning length, zero beyond `l_max`.
pub fn cot_reward(len: usize, cfg: &RewardConfig) -> f64 {
    if len <= cfg.l_max {
        1.0 - len as f64 / cfg.l_max as f64
    } else {
        0.0
    }
}

pub fn composite_reward(
    r_acc: f64,
    r_cot: f64,
    r_fmt: f64,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let acc_max = cfg.lambda1 + cfg.lambda2;
    if !(0.0..=acc_max).contains(&r_acc) {
        return Err(RewardError::OutOfRange {
            name: "r_acc",
            value: r_acc,
            range: "[0, lambda1 + lambda2]",
        });
    }
    if !(0.0..=1.0).contains(&r_cot) {
        return Err(RewardError::OutOfRange {
            name: "r_cot",
            value: r_cot,
            range: "[0, 1]",
        });
    }
    if r_fmt != 0.0 && r_fmt != 1.0 {
        return Err(RewardError::OutOfRange {
            name: "r_fmt",
            value: r_fmt,
            range: "{0, 1}",
        });
    }
    Ok(RewardBreakdown {
        r_acc,
        r_cot,
        r_fmt,
        composite: cfg.alpha * r_acc + cfg.beta * r_cot + cfg.gamma * r_fmt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(accuracy_reward(0.0, 0.0, &cfg).unwrap(), 1.0);
        let r = accuracy_reward(1.0, 2.0, &cfg).unwrap();
        assert!((r - (-1f64).exp()).abs() < 1e-12);
        assert!((r - 0.367879).abs() < 1e-6);
        assert!(accuracy_reward(1e6, 0.0, &cfg).unwrap() - 0.5 < 1e-12);
        assert!(accuracy_reward(0.0, f64::INFINITY, &cfg).unwrap() == 0.5);
        assert!(accuracy_reward(-0.1, 0.0, &cfg).is_err());
        assert!(accuracy_reward(0.0, f64::NAN, &cfg).is_err());
    }

    #[test]
    fn cot_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(cot_reward(0, &cfg), 1.0);
        assert_eq!(cot_reward(512, &cfg), 0.0);
        assert_eq!(cot_reward(256, &cfg), 0.5);
        assert_eq!(cot_reward(513, &cfg), 0.0);
    }

    #[test]
    fn composite_examples() {
        let cfg = RewardConfig::default();
        assert!((composite_reward(1.0, 1.0, 1.0, &cfg).unwrap().composite - 1.0).abs() < 1e-12);
        assert_eq!(
            composite_reward(0.0, 0.0, 0.0, &cfg).unwrap().composite,
            0.0
        );
        let c = composite_reward(0.367879, 0.5, 1.0, &cfg)
            .unwrap()
            .composite;
        assert!((c - 0.4575153).abs() < 1e-6);
        assert!(composite_reward(1.2, 0.0, 0.0, &cfg).is_err());
        assert!(composite_reward(0.5, 0.0, 0.5, &cfg).is_err());
        assert!(composite_reward(0.5, -0.1, 1.0, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig {
            tau1: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
