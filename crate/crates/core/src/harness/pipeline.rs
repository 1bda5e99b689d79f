use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{canonical_hash, write_atomic, DataSource, ExperimentConfig, HarnessError, Result, RESULTS_SCHEMA_VERSION};
use crate::agent::{build_transitions, train, PolicySnapshot, QFunction, TrainConfig};
use crate::cohort::{ground_truth_value, read_logs, simulate_cohort, write_logs, EventLog, Physician, ValueEstimate};
use crate::discretize::{
    decode_action, featurize, load_dataset, prepare, rebin, save_dataset, split_dataset, Dataset, FeatureEpisode, FeatureSpec,
    Prep, Treatment,
};
use crate::embed::{train_autoencoder, EmbedConfig, EmbedModel, TrainCurve};
use crate::metrics::{
    bootstrap_replicates, difference_ci, initiation_rate_ci, marginal_ci, nonzero_share, relative_risk, restart_cv, subgroup_distributions, ActionDistribution, Ci,
    InitiationVariant, CATEGORY_LABELS,
};
use crate::nnkit::Checkpoint;
use crate::numeric::{argmax, mean, sample_sd};
use crate::ope::{
    fit_behavior_policy, mean_max_q, policy_tables, select_by_score, wdr, wdr_value, BehaviorDiagnostics, BehaviorModel,
    OpeEpisode, PolicyAgent, RewardPipeline, SelectMethod, StepTables,
};
use crate::reward::{attach_rewards, train_mortality_model, MortModel, RewardInputs, RewardSpec};
use crate::{par, seed, DOSE_BINS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub hash: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed { stage: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartEval {
    pub seed: u64,
    pub snapshot_hash: String,
    pub distribution: ActionDistribution,
    pub mean_max_q: f64,
    pub wdr: f64,
    pub wdr_ess: f64,
    pub mean_iv_bin: f64,
    pub mean_vaso_bin: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub treatment: Treatment,
    pub category: String,
    pub policy: Ci,
    pub physician: Ci,
    /// Policy minus physician, percentage points.
    pub difference: Ci,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrRow {
    pub treatment: Treatment,
    pub category: String,
    /// `None` when the physician never uses the category.
    pub rr: Option<Ci>,
    pub bootstrap_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitiationRow {
    pub treatment: Treatment,
    pub policy: Option<Ci>,
    pub physician: Option<Ci>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub label: String,
    pub policy: Option<ActionDistribution>,
    pub physician: Option<ActionDistribution>,
    /// Policy over physician share of person-times with any vasopressor.
    pub vaso_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub policy: ValueEstimate,
    pub physician: ValueEstimate,
    pub policy_wdr: f64,
    /// Bootstrap standard error of `policy_wdr` over test patients.
    pub policy_wdr_se: f64,
    pub physician_mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_test_patients: usize,
    pub n_test_bins: usize,
    pub embed_val_mse_initial: f64,
    pub embed_val_mse_best: f64,
    pub mortality_val_auc: Option<f64>,
    pub rewards_clamped: usize,
    pub behavior: BehaviorDiagnostics,
    pub physician: ActionDistribution,
    pub restarts: Vec<RestartEval>,
    pub selection_method: SelectMethod,
    pub selected: usize,
    pub q_spread: f64,
    /// Per action cell across restarts; `None` where the mean is zero.
    pub cv: Vec<Option<f64>>,
    pub marginals: Vec<MarginalRow>,
    pub relative_risks: Vec<RrRow>,
    pub initiation: Vec<InitiationRow>,
    pub subgroups: Vec<SubgroupRow>,
    pub ground_truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub label: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub snapshots: Vec<(u64, String)>,
    pub eval: Option<EvalReport>,
    pub stages: Vec<StageLog>,
    pub wall_clock_secs: f64,
    pub version: String,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    root: PathBuf,
    log: Vec<StageLog>,
    stop_after: Option<&'a str>,
}

/// Error carrying the stage name.
fn at<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> HarnessError {
    move |e| HarnessError::stage(stage, e)
}

impl Ctx<'_> {
    /// Loads the stage from cache, or builds it in a temporary directory,
    /// marks it complete and moves it into place before loading.
    fn cached<T>(
        &mut self,
        stage: &'static str,
        hash: &str,
        build: impl FnOnce(&Path) -> Result<()>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let cache = self.root.join("cache");
        let dir = cache.join(format!("{stage}-{}", &hash[..16]));
        let marker = dir.join("stage.json");
        let cached = marker.exists();
        if !cached {
            std::fs::create_dir_all(&cache)?;
            let tmp = cache.join(format!(
                ".tmp-{stage}-{}-{}-{}",
                &hash[..16],
                std::process::id(),
                TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
            ));
            std::fs::create_dir_all(&tmp)?;
            build(&tmp)?;
            let m = serde_json::json!({"stage": stage, "hash": hash, "schema_version": RESULTS_SCHEMA_VERSION});
            std::fs::write(tmp.join("stage.json"), m.to_string())?;
            if std::fs::rename(&tmp, &dir).is_err() {
                // another worker finished the same stage first
                std::fs::remove_dir_all(&tmp)?;
                if !marker.exists() {
                    return Err(HarnessError::stage(stage, format!("cannot install {}", dir.display())));
                }
            }
        }
        self.log.push(StageLog {
            stage: stage.to_string(),
            hash: hash.to_string(),
            cached,
        });
        load(&dir)
    }

    fn done(&self, stage: &str) -> bool {
        self.stop_after == Some(stage)
    }
}

fn json_err(e: serde_json::Error) -> HarnessError {
    HarnessError::Io(e.to_string())
}

fn data_stage(ctx: &mut Ctx) -> Result<(String, Vec<EventLog>)> {
    let hash = match &ctx.cfg.data {
        DataSource::Simulate { sim } => canonical_hash(&("simulate", sim)),
        DataSource::Ingest { path } => {
            let mut bytes = std::fs::read(path.join("events.jsonl")).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            if let Ok(s) = std::fs::read(path.join("static.csv")) {
                bytes.extend(s);
            }
            canonical_hash(&("ingest", seed::sha256_hex(&bytes)))
        }
    };
    let data = ctx.cfg.data.clone();
    let logs = ctx.cached(
        "data",
        &hash,
        |dir| {
            let logs = match &data {
                DataSource::Simulate { sim } => simulate_cohort(sim).map_err(at("simulate"))?,
                DataSource::Ingest { path } => {
                    let ing = read_logs(path).map_err(at("ingest"))?;
                    for w in &ing.warnings {
                        log::warn!("{w}");
                    }
                    ing.logs
                }
            };
            write_logs(dir, &logs).map_err(at("data"))
        },
        |dir| Ok(read_logs(dir).map_err(at("data"))?.logs),
    )?;
    Ok((hash, logs))
}

struct Splits {
    hash: String,
    prep: Prep,
    train: Vec<FeatureEpisode>,
    val: Vec<FeatureEpisode>,
    test: Vec<FeatureEpisode>,
}

fn discretize_stage(ctx: &mut Ctx, data_hash: &str, logs: &[EventLog]) -> Result<Splits> {
    let c = ctx.cfg;
    let spec = FeatureSpec {
        include_history: c.include_history,
        ..FeatureSpec::default()
    };
    let hash = canonical_hash(&(data_hash, c.train_fraction, c.val_fraction, c.split_seed, c.bin_hours, c.anchoring, &spec));
    let (bin_hours, anchoring) = (c.bin_hours, c.anchoring);
    let (train_fraction, val_fraction, split_seed) = (c.train_fraction, c.val_fraction, c.split_seed);
    let (prep, sets) = ctx.cached(
        "discretize",
        &hash,
        |dir| {
            let err = at("discretize");
            let trajs = par::map(logs, |l| rebin(l, bin_hours, anchoring)).into_iter().collect::<std::result::Result<Vec<_>, _>>().map_err(&err)?;
            let (fit, test) = split_dataset(trajs, train_fraction, split_seed).map_err(&err)?;
            let (train, val) = split_dataset(fit, 1.0 - val_fraction, seed::derive(split_seed, "validation")).map_err(&err)?;
            let prep = prepare(&train, &spec, anchoring).map_err(&err)?;
            for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
                let episodes = par::map(set, |t| featurize(t, &prep)).into_iter().collect::<std::result::Result<Vec<_>, _>>().map_err(&err)?;
                save_dataset(&dir.join(name), &Dataset { prep: prep.clone(), episodes }).map_err(&err)?;
            }
            Ok(())
        },
        |dir| {
            let mut sets = Vec::new();
            let mut prep = None;
            for name in ["train", "val", "test"] {
                let ds = load_dataset(&dir.join(name)).map_err(at("discretize"))?;
                prep = Some(ds.prep);
                sets.push(ds.episodes);
            }
            Ok((prep.expect("three sets"), sets))
        },
    )?;
    let mut it = sets.into_iter();
    Ok(Splits {
        hash,
        prep,
        train: it.next().unwrap_or_default(),
        val: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
    })
}

fn embed_stage(ctx: &mut Ctx, s: &Splits) -> Result<(String, EmbedModel, TrainCurve)> {
    let cfg = EmbedConfig {
        arch: ctx.cfg.embedding,
        ..ctx.cfg.embed.clone()
    };
    let hash = canonical_hash(&(&s.hash, &cfg));
    let prep_hash = s.prep.hash();
    let (model, curve) = ctx.cached(
        "embed",
        &hash,
        |dir| {
            let (model, curve) = train_autoencoder(&s.train, &s.val, &cfg, &s.prep.feature_names, &prep_hash).map_err(at("embed"))?;
            model.checkpoint().save(&dir.join("embed.json"))?;
            std::fs::write(dir.join("curve.json"), serde_json::to_string(&curve).map_err(json_err)?)?;
            Ok(())
        },
        |dir| {
            let ck = Checkpoint::load(&dir.join("embed.json"))?.map_err(at("embed"))?;
            let model = EmbedModel::from_checkpoint(&ck, &prep_hash).map_err(at("embed"))?;
            let curve = serde_json::from_str(&std::fs::read_to_string(dir.join("curve.json"))?).map_err(json_err)?;
            Ok((model, curve))
        },
    )?;
    Ok((hash, model, curve))
}

fn labels(eps: &[FeatureEpisode]) -> Vec<bool> {
    eps.iter().flat_map(|e| std::iter::repeat_n(e.outcome.died_30d(), e.len())).collect()
}

fn reward_stage(
    ctx: &mut Ctx,
    embed_hash: &str,
    fit_states: &[Vec<Vec<f64>>],
    fit_eps: &[FeatureEpisode],
    val_states: &[Vec<Vec<f64>>],
    val_eps: &[FeatureEpisode],
) -> Result<(String, Option<MortModel>)> {
    let reward = ctx.cfg.reward;
    let mcfg = ctx.cfg.mortality.clone();
    let hash = match reward {
        RewardSpec::ShortTerm => canonical_hash(&(embed_hash, reward, &mcfg)),
        RewardSpec::LongTerm { .. } => canonical_hash(&(embed_hash, reward)),
    };
    let mort = ctx.cached(
        "reward",
        &hash,
        |dir| {
            if reward == RewardSpec::ShortTerm {
                let x: Vec<Vec<f64>> = fit_states.iter().flatten().cloned().collect();
                let vx: Vec<Vec<f64>> = val_states.iter().flatten().cloned().collect();
                let m = train_mortality_model(&x, &labels(fit_eps), (&vx, &labels(val_eps)), &mcfg).map_err(at("reward"))?;
                m.checkpoint(mcfg.seed).save(&dir.join("mortality.json"))?;
            }
            Ok(())
        },
        |dir| {
            let p = dir.join("mortality.json");
            if !p.exists() {
                return Ok(None);
            }
            let ck = Checkpoint::load(&p)?.map_err(at("reward"))?;
            Ok(Some(MortModel::from_checkpoint(&ck).map_err(at("reward"))?))
        },
    )?;
    Ok((hash, mort))
}

fn rewards_for(reward: RewardSpec, eps: &[FeatureEpisode], states: &[Vec<Vec<f64>>], mort: Option<&MortModel>) -> Result<(Vec<Vec<f64>>, usize)> {
    let lengths: Vec<usize> = eps.iter().map(|e| e.len()).collect();
    let outcomes: Vec<_> = eps.iter().map(|e| e.outcome.clone()).collect();
    let inputs = match reward {
        RewardSpec::ShortTerm => RewardInputs::ShortTerm {
            states,
            model: mort.ok_or_else(|| HarnessError::stage("reward", "mortality model missing"))?,
        },
        RewardSpec::LongTerm { .. } => RewardInputs::LongTerm { outcomes: &outcomes },
    };
    let r = attach_rewards(&lengths, &reward, inputs).map_err(at("reward"))?;
    Ok((r.rewards, r.clamped))
}

fn agent_stage(
    ctx: &mut Ctx,
    reward_hash: &str,
    embed_hash: &str,
    seed_: u64,
    states: &[Vec<Vec<f64>>],
    eps: &[FeatureEpisode],
    rewards: &[Vec<f64>],
) -> Result<(String, PolicySnapshot)> {
    let cfg = TrainConfig {
        seed: seed_,
        ..ctx.cfg.agent.clone()
    }
    .for_reward(&ctx.cfg.reward);
    let hash = canonical_hash(&(reward_hash, &cfg));
    let reward = ctx.cfg.reward;
    let snap = ctx.cached(
        "agent",
        &hash,
        |dir| {
            let actions: Vec<Vec<usize>> = eps.iter().map(|e| e.actions.clone()).collect();
            let tr = build_transitions(states, &actions, rewards).map_err(at("train-agent"))?;
            let snap = train(tr, &cfg, embed_hash, reward).map_err(at("train-agent"))?;
            snap.checkpoint().save(&dir.join("snapshot.json"))?;
            std::fs::write(dir.join("train_log.jsonl"), snap.diagnostics.to_jsonl())?;
            Ok(())
        },
        |dir| {
            let ck = Checkpoint::load(&dir.join("snapshot.json"))?.map_err(at("train-agent"))?;
            PolicySnapshot::from_checkpoint(&ck).map_err(at("train-agent"))
        },
    )?;
    Ok((hash, snap))
}

fn behavior_stage(ctx: &mut Ctx, embed_hash: &str, states: &[Vec<Vec<f64>>], eps: &[FeatureEpisode]) -> Result<BehaviorModel> {
    let cfg = ctx.cfg.behavior.clone();
    let hash = canonical_hash(&(embed_hash, &cfg));
    ctx.cached(
        "behavior",
        &hash,
        |dir| {
            let x: Vec<Vec<f64>> = states.iter().flatten().cloned().collect();
            let a: Vec<usize> = eps.iter().flat_map(|e| e.actions.iter().copied()).collect();
            let m = fit_behavior_policy(&x, &a, &cfg).map_err(at("evaluate"))?;
            m.checkpoint(cfg.seed).save(&dir.join("behavior.json"))?;
            Ok(())
        },
        |dir| {
            let ck = Checkpoint::load(&dir.join("behavior.json"))?.map_err(at("evaluate"))?;
            BehaviorModel::from_checkpoint(&ck).map_err(at("evaluate"))
        },
    )
}

fn greedy_actions(q: &dyn QFunction, states: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<usize>>> {
    states
        .iter()
        .map(|ep| {
            let refs: Vec<&[f64]> = ep.iter().map(|s| s.as_slice()).collect();
            Ok(q.q_values(&refs).map_err(at("evaluate"))?.iter().map(|r| argmax(r)).collect())
        })
        .collect()
}

fn mean_bin(actions: &[Vec<usize>], t: Treatment) -> f64 {
    let bins: Vec<f64> = actions
        .iter()
        .flatten()
        .map(|&a| {
            let (iv, vp) = decode_action(a).expect("valid action");
            (if t == Treatment::IvFluid { iv } else { vp }) as f64
        })
        .collect();
    mean(&bins)
}

struct EvalInputs<'a> {
    splits: &'a Splits,
    embed: &'a EmbedModel,
    curve: &'a TrainCurve,
    mort: Option<&'a MortModel>,
    behavior: &'a BehaviorModel,
    test_states: &'a [Vec<Vec<f64>>],
    test_rewards: &'a [Vec<f64>],
    clamped: usize,
    snapshots: &'a [(u64, String, PolicySnapshot)],
}

fn evaluate(cfg: &ExperimentConfig, inp: &EvalInputs) -> Result<EvalReport> {
    let err = at("evaluate");
    let test = &inp.splits.test;
    let physician: Vec<Vec<usize>> = test.iter().map(|e| e.actions.clone()).collect();
    let physician_dist = ActionDistribution::from_episodes(&physician).map_err(&err)?;
    let ope_eps: Vec<OpeEpisode> = test
        .iter()
        .zip(inp.test_states)
        .zip(inp.test_rewards)
        .map(|((e, s), r)| OpeEpisode {
            states: s.clone(),
            actions: e.actions.clone(),
            rewards: r.clone(),
        })
        .collect();
    let all_states: Vec<&[f64]> = inp.test_states.iter().flatten().map(|s| s.as_slice()).collect();

    let mut restarts = Vec::new();
    let mut policy_actions = Vec::new();
    for (seed_, hash, snap) in inp.snapshots {
        let acts = greedy_actions(&snap.qnet, inp.test_states)?;
        let w = wdr_value(&ope_eps, snap, inp.behavior, cfg.eval_eps).map_err(at("evaluate"))?;
        restarts.push(RestartEval {
            seed: *seed_,
            snapshot_hash: hash.clone(),
            distribution: ActionDistribution::from_episodes(&acts).map_err(&err)?,
            mean_max_q: mean_max_q(&snap.qnet, &all_states).map_err(at("evaluate"))?,
            wdr: w.value,
            wdr_ess: w.ess,
            mean_iv_bin: mean_bin(&acts, Treatment::IvFluid),
            mean_vaso_bin: mean_bin(&acts, Treatment::Vasopressor),
            final_loss: snap.diagnostics.records.last().map_or(f64::NAN, |r| r.loss),
        });
        policy_actions.push(acts);
    }
    let method = match cfg.reward {
        RewardSpec::ShortTerm => SelectMethod::Wdr,
        RewardSpec::LongTerm { .. } => SelectMethod::MeanQ,
    };
    let scores: Vec<f64> = restarts
        .iter()
        .map(|r| if method == SelectMethod::Wdr { r.wdr } else { r.mean_max_q })
        .collect();
    let selected = select_by_score(&scores).map_err(at("evaluate"))?;
    let policy = &policy_actions[selected];
    let qs: Vec<f64> = restarts.iter().map(|r| r.mean_max_q).collect();
    let q_spread = (qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - qs.iter().cloned().fold(f64::INFINITY, f64::min))
        / mean(&qs).abs();
    let cv = if restarts.len() >= 2 {
        restart_cv(&restarts.iter().map(|r| r.distribution.clone()).collect::<Vec<_>>())
            .map_err(&err)?
            .to_vec()
    } else {
        vec![None; crate::N_ACTIONS]
    };

    let bs = &cfg.bootstrap;
    let mut marginals = Vec::new();
    let mut relative_risks = Vec::new();
    let mut initiation = Vec::new();
    for t in Treatment::ALL {
        for (k, label) in CATEGORY_LABELS.iter().enumerate().take(DOSE_BINS) {
            marginals.push(MarginalRow {
                treatment: t,
                category: label.to_string(),
                policy: marginal_ci(policy, t, k, bs).map_err(&err)?,
                physician: marginal_ci(&physician, t, k, bs).map_err(&err)?,
                difference: difference_ci(policy, &physician, t, k, bs).map_err(&err)?,
            });
            let rr = relative_risk(policy, &physician, t, k, bs).map_err(&err)?;
            relative_risks.push(RrRow {
                treatment: t,
                category: label.to_string(),
                rr: rr.ci,
                bootstrap_mean: rr.bootstrap_mean,
            });
        }
        initiation.push(InitiationRow {
            treatment: t,
            policy: initiation_rate_ci(policy, t, InitiationVariant::PerBin, bs).map_err(&err)?,
            physician: initiation_rate_ci(&physician, t, InitiationVariant::PerBin, bs).map_err(&err)?,
        });
    }

    let sofa: Vec<Vec<Option<f64>>> = test.iter().map(|e| e.sofa.clone()).collect();
    let pol_groups = subgroup_distributions(policy, &sofa, &cfg.sofa_buckets).map_err(&err)?;
    let phy_groups = subgroup_distributions(&physician, &sofa, &cfg.sofa_buckets).map_err(&err)?;
    let subgroups = pol_groups
        .into_iter()
        .zip(phy_groups)
        .map(|(p, b)| {
            let ratio = match (&p.distribution, &b.distribution) {
                (Some(pd), Some(bd)) if nonzero_share(bd, Treatment::Vasopressor) > 0.0 => {
                    Some(nonzero_share(pd, Treatment::Vasopressor) / nonzero_share(bd, Treatment::Vasopressor))
                }
                _ => None,
            };
            SubgroupRow {
                label: p.label,
                policy: p.distribution,
                physician: b.distribution,
                vaso_ratio: ratio,
            }
        })
        .collect();

    let ground_truth = match (&cfg.data, cfg.ground_truth_rollouts) {
        (DataSource::Simulate { sim }, n) if n > 0 => {
            let snap = &inp.snapshots[selected].2;
            let pipeline = RewardPipeline {
                prep: &inp.splits.prep,
                embed: inp.embed,
                reward: cfg.reward,
                mortality: inp.mort,
            };
            let gt_seed = seed::derive(sim.seed, "ground-truth");
            let gamma = snap.config.gamma;
            let policy_v = ground_truth_value(sim, n, gamma, |i| PolicyAgent::new(pipeline, snap, cfg.eval_eps, gt_seed, i))
                .map_err(at("ground-truth"))?;
            let physician_v = ground_truth_value(sim, n, gamma, |_| {
                Physician(move |log: &EventLog| {
                    pipeline.rewards(log).map_err(|e| crate::cohort::CohortError::InvalidOutcome {
                        patient: log.patient_id.clone(),
                        msg: e.to_string(),
                    })
                })
            })
            .map_err(at("ground-truth"))?;
            let tables = policy_tables(&ope_eps, &snap.qnet, inp.behavior, cfg.eval_eps).map_err(at("evaluate"))?;
            let reps = bootstrap_replicates(ope_eps.len(), bs, |idx| {
                let eps: Vec<OpeEpisode> = idx.iter().map(|&i| ope_eps[i].clone()).collect();
                let tbs: Vec<StepTables> = idx.iter().map(|&i| tables[i].clone()).collect();
                wdr(&eps, &tbs, gamma, inp.behavior.floor).map_or(f64::NAN, |w| w.value)
            });
            let finite: Vec<f64> = reps.into_iter().filter(|v| v.is_finite()).collect();
            let returns: Vec<f64> = inp
                .test_rewards
                .iter()
                .map(|r| r.iter().rev().fold(0.0, |acc, v| v + gamma * acc))
                .collect();
            Some(GroundTruth {
                policy: policy_v,
                physician: physician_v,
                policy_wdr: restarts[selected].wdr,
                policy_wdr_se: sample_sd(&finite),
                physician_mean_return: mean(&returns),
            })
        }
        _ => None,
    };

    Ok(EvalReport {
        n_test_patients: test.len(),
        n_test_bins: test.iter().map(|e| e.len()).sum(),
        embed_val_mse_initial: inp.curve.val_mse.first().copied().unwrap_or(f64::NAN),
        embed_val_mse_best: inp.curve.val_mse.get(inp.curve.best_epoch).copied().unwrap_or(f64::NAN),
        mortality_val_auc: inp.mort.and_then(|m| m.val_auc),
        rewards_clamped: inp.clamped,
        behavior: inp.behavior.diagnostics.clone().unwrap_or(BehaviorDiagnostics {
            top1_accuracy: f64::NAN,
            reliability: Vec::new(),
        }),
        physician: physician_dist,
        restarts,
        selection_method: method,
        selected,
        q_spread,
        cv,
        marginals,
        relative_risks,
        initiation,
        subgroups,
        ground_truth,
    })
}

impl RunRecord {
    /// Directory holding this run's record and config under `root`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join("runs").join(format!("{}-{}", self.label, &self.config_hash[..16]))
    }
}

/// Pipeline stages in order; `run_experiment` can stop after any of them.
pub const STAGES: [&str; 6] = ["data", "discretize", "embed", "reward", "agent", "evaluate"];

fn run_inner(ctx: &mut Ctx) -> Result<(Vec<(u64, String)>, Option<EvalReport>)> {
    let cfg = ctx.cfg;
    let (data_hash, logs) = data_stage(ctx)?;
    if ctx.done("data") {
        return Ok((Vec::new(), None));
    }
    let splits = discretize_stage(ctx, &data_hash, &logs)?;
    drop(logs);
    if ctx.done("discretize") {
        return Ok((Vec::new(), None));
    }
    let (embed_hash, embed, curve) = embed_stage(ctx, &splits)?;
    if ctx.done("embed") {
        return Ok((Vec::new(), None));
    }
    let embed_err = at("embed");
    let mut fit_eps = splits.train.clone();
    fit_eps.extend(splits.val.iter().cloned());
    let train_states = embed.embed_all(&splits.train).map_err(&embed_err)?;
    let val_states = embed.embed_all(&splits.val).map_err(&embed_err)?;
    let test_states = embed.embed_all(&splits.test).map_err(&embed_err)?;
    let (reward_hash, mort) = reward_stage(ctx, &embed_hash, &train_states, &splits.train, &val_states, &splits.val)?;
    if ctx.done("reward") {
        return Ok((Vec::new(), None));
    }
    let mut fit_states = train_states;
    fit_states.extend(val_states);
    let (fit_rewards, _) = rewards_for(cfg.reward, &fit_eps, &fit_states, mort.as_ref())?;
    let (test_rewards, clamped) = rewards_for(cfg.reward, &splits.test, &test_states, mort.as_ref())?;
    let mut snapshots = Vec::new();
    for s in cfg.sorted_seeds() {
        let (h, snap) = agent_stage(ctx, &reward_hash, &embed_hash, s, &fit_states, &fit_eps, &fit_rewards)?;
        snapshots.push((s, h, snap));
    }
    let ids: Vec<(u64, String)> = snapshots.iter().map(|(s, h, _)| (*s, h.clone())).collect();
    if ctx.done("agent") {
        return Ok((ids, None));
    }
    let behavior = behavior_stage(ctx, &embed_hash, &fit_states, &fit_eps)?;
    let eval_hash = canonical_hash(&(
        &ids,
        &cfg.behavior,
        &cfg.bootstrap,
        cfg.eval_eps,
        cfg.ground_truth_rollouts,
        &cfg.sofa_buckets,
        &cfg.data,
    ));
    let inputs = EvalInputs {
        splits: &splits,
        embed: &embed,
        curve: &curve,
        mort: mort.as_ref(),
        behavior: &behavior,
        test_states: &test_states,
        test_rewards: &test_rewards,
        clamped,
        snapshots: &snapshots,
    };
    let report = ctx.cached(
        "evaluate",
        &eval_hash,
        |dir| {
            let r = evaluate(cfg, &inputs)?;
            std::fs::write(dir.join("eval.json"), serde_json::to_string(&r).map_err(json_err)?)?;
            Ok(())
        },
        |dir| serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json"))?).map_err(json_err),
    )?;
    Ok((ids, Some(report)))
}

/// Runs every stage (or up to `stop_after`) under `root`. Stage failures
/// are recorded in the returned record; config errors are returned.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, stop_after: Option<&str>) -> Result<RunRecord> {
    cfg.validate()?;
    if let Some(s) = stop_after {
        if !STAGES.contains(&s) {
            return Err(HarnessError::Config(format!("unknown stage {s}")));
        }
    }
    let start = Instant::now();
    let mut ctx = Ctx {
        cfg,
        root: root.to_path_buf(),
        log: Vec::new(),
        stop_after,
    };
    let outcome = run_inner(&mut ctx);
    let (status, snapshots, eval) = match outcome {
        Ok((ids, eval)) => (RunStatus::Ok, ids, eval),
        Err(HarnessError::Config(m)) => return Err(HarnessError::Config(m)),
        Err(HarnessError::Stage { stage, msg }) => (RunStatus::Failed { stage, error: msg }, Vec::new(), None),
        Err(HarnessError::Io(m)) => (
            RunStatus::Failed {
                stage: ctx.log.last().map_or("data".into(), |l| l.stage.clone()),
                error: m,
            },
            Vec::new(),
            None,
        ),
    };
    let record = RunRecord {
        schema_version: RESULTS_SCHEMA_VERSION,
        label: cfg.label(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        status,
        snapshots,
        eval,
        stages: ctx.log,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let run_dir = record.run_dir(root);
    write_atomic(&run_dir.join("record.json"), serde_json::to_string_pretty(&record).map_err(json_err)?.as_bytes())?;
    write_atomic(&run_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(record)
}
