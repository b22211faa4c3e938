use std::fmt;
use std::str::FromStr;

use super::QError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub epsilon: f64,
    /// Models to train (first-time evaluations) before moving on.
    pub unique_models: u32,
}

/// Exploration rate per stage, from fully random to mostly greedy.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSchedule {
    stages: Vec<Stage>,
}

const DEFAULT_STAGES: [(f64, u32); 10] = [
    (1.0, 50),
    (0.9, 7),
    (0.8, 7),
    (0.7, 7),
    (0.6, 10),
    (0.5, 15),
    (0.4, 15),
    (0.3, 15),
    (0.2, 15),
    (0.1, 20),
];

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            stages: DEFAULT_STAGES
                .iter()
                .map(|&(epsilon, unique_models)| Stage { epsilon, unique_models })
                .collect(),
        }
    }
}

impl EpsilonSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self, QError> {
        if stages.is_empty() {
            return Err(QError::Schedule("no stages".into()));
        }
        for s in &stages {
            if !(0.0..=1.0).contains(&s.epsilon) {
                return Err(QError::Schedule(format!("epsilon {} outside [0, 1]", s.epsilon)));
            }
        }
        if stages.windows(2).any(|w| w[1].epsilon >= w[0].epsilon) {
            return Err(QError::Schedule("epsilons must be strictly decreasing".into()));
        }
        Ok(EpsilonSchedule { stages })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn total_models(&self) -> u64 {
        self.stages.iter().map(|s| u64::from(s.unique_models)).sum()
    }
}

/// `eps:count` pairs separated by commas, e.g. `1.0:50,0.9:7`.
impl FromStr for EpsilonSchedule {
    type Err = QError;

    fn from_str(s: &str) -> Result<Self, QError> {
        let stages = s
            .split(',')
            .map(|item| {
                let item = item.trim();
                let (e, n) = item
                    .split_once(':')
                    .ok_or_else(|| QError::Schedule(format!("expected eps:count, got `{item}`")))?;
                let epsilon = e
                    .trim()
                    .parse()
                    .map_err(|_| QError::Schedule(format!("bad epsilon `{e}`")))?;
                let unique_models = n
                    .trim()
                    .parse()
                    .map_err(|_| QError::Schedule(format!("bad model count `{n}`")))?;
                Ok(Stage { epsilon, unique_models })
            })
            .collect::<Result<Vec<_>, QError>>()?;
        EpsilonSchedule::new(stages)
    }
}

impl fmt::Display for EpsilonSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{:?}:{}", s.epsilon, s.unique_models)?;
        }
        Ok(())
    }
}
