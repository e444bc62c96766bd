//! Row sets of the module, opacity-adjustment and sampling comparisons, each
//! trained from scratch with a shared seed.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{run_training, EvalSummary, Model, RunReport};
use crate::sampler::SamplerConfig;
use crate::scene::SceneSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Naive, +PEOM, +DIS, +OOM, full.
    Modules,
    /// Without and with opacity-adjusted features.
    Opacity,
    /// The five sampling regimes.
    Sampling,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(AblationAxis::Modules),
            "opacity" => Ok(AblationAxis::Opacity),
            "sampling" => Ok(AblationAxis::Sampling),
            _ => Err(Error::ConfigInvalid(format!("unknown ablation axis {s:?}"))),
        }
    }
}

/// Which scenes score an ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            _ => Err(Error::ConfigInvalid(format!("unknown split {s:?}"))),
        }
    }
}

/// Named configurations of one comparison, derived from `base`.
pub fn ablation_configs(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Modules => {
            let naive = |c: &mut RunConfig| {
                c.ablation.peom = false;
                c.ablation.dis = false;
                c.ablation.oom = false;
            };
            vec![
                ("Naive".into(), with(&naive)),
                (
                    "Naive+PEOM".into(),
                    with(&|c| {
                        naive(c);
                        c.ablation.peom = true;
                    }),
                ),
                (
                    "Naive+DIS".into(),
                    with(&|c| {
                        naive(c);
                        c.ablation.dis = true;
                    }),
                ),
                (
                    "Naive+OOM".into(),
                    with(&|c| {
                        naive(c);
                        c.ablation.oom = true;
                    }),
                ),
                (
                    "Full".into(),
                    with(&|c| {
                        c.ablation.peom = true;
                        c.ablation.dis = true;
                        c.ablation.oom = true;
                    }),
                ),
            ]
        }
        AblationAxis::Opacity => vec![
            ("W/O".into(), with(&|c| c.ablation.adjust = false)),
            ("W".into(), with(&|c| c.ablation.adjust = true)),
        ],
        AblationAxis::Sampling => SamplerConfig::REGIMES
            .iter()
            .map(|&name| {
                let r = SamplerConfig::regime(name).expect("known regime");
                let c = with(&|c| {
                    c.ablation.dis = true;
                    c.sampler.mode = r.mode;
                    c.sampler.n_coarse = r.n_coarse;
                    c.sampler.n_fine = r.n_fine;
                });
                (name.to_string(), c)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub map_25: f64,
    pub map_50: f64,
    /// Against the first row.
    pub delta_25: f64,
    pub delta_50: f64,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub split: EvalSplit,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16} {:>9} {:>9} {:>9} {:>9}\n", "row", "mAP@0.25", "Δ", "mAP@0.5", "Δ");
        for r in &self.rows {
            s += &format!(
                "{:<16} {:>9.4} {:>+9.4} {:>9.4} {:>+9.4}\n",
                r.name, r.map_25, r.delta_25, r.map_50, r.delta_50
            );
        }
        s
    }
}

/// Trains every row of `axis` on `train` and scores it on `split`. `on_row`
/// sees each trained model before it is dropped.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    split: EvalSplit,
    train: &[SceneSample],
    val: &[SceneSample],
    mut on_row: impl FnMut(&str, &RunConfig, &Model, &RunReport) -> Result<()>,
) -> Result<AblationTable> {
    if split == EvalSplit::Val && val.is_empty() {
        return Err(Error::ConfigInvalid("validation split is empty".into()));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for (name, cfg) in ablation_configs(base, axis) {
        log::info!("ablation row {name}");
        let (model, report) = run_training(&cfg, train, val)?;
        on_row(&name, &cfg, &model, &report)?;
        let summary: &EvalSummary = match split {
            EvalSplit::Train => &report.final_train,
            EvalSplit::Val => report.final_val.as_ref().expect("val scenes given"),
        };
        let (m25, m50) = (summary.map_25, summary.map_50);
        let (b25, b50) = rows.first().map_or((m25, m50), |r| (r.map_25, r.map_50));
        rows.push(AblationRow {
            name,
            map_25: m25,
            map_50: m50,
            delta_25: m25 - b25,
            delta_50: m50 - b50,
            report,
        });
    }
    Ok(AblationTable { axis, split, rows })
}
