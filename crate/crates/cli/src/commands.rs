use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use anyhow::Context;
use chauffeur::observation::{
    append_record, logged_views, preprocess_static, read_dump, tokenize, write_dump_header, DumpHeader,
};
use chauffeur::robustness::{
    choose_shift, episode_seed, shift_sweep, shifted_pose, shifted_state, sweep_csv, ShiftConfig, SweepCell,
};
use chauffeur::sampling::{tsne, SamplingError, SneConfig};
use chauffeur::scenario::{generate_scenario, load_scenario, save_scenario, ScenarioError, ScenarioFamilySpec};
use chauffeur::simulator::{replay_expert, Mode};
use chauffeur::training::{
    build_il_dataset, evaluate, train_il as fit_il, train_ppo as fit_ppo, ActionSpace, Policy, PolicyKind,
};
use chauffeur_neuro::model::latents;
use chauffeur_neuro::TokenInput;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{config_err, ExperimentConfig, GenFamily};
use crate::data::{load_policy, load_scenarios, parse_flag, Manifest, ManifestEntry, Run, Table};
use crate::svg::{self, Series};
use crate::{DumpArgs, EvalArgs, FeatureVizArgs, GenArgs, PlotArgs, ShiftArgs, SneArgs, TrainIlArgs, TrainPpoArgs};

fn parse_space(v: &str) -> anyhow::Result<ActionSpace> {
    match v {
        "bicycle" => Ok(ActionSpace::Bicycle),
        "waypoint" => Ok(ActionSpace::Waypoint),
        _ => Err(config_err(format!(
            "--action-space: unknown `{v}` (expected bicycle or waypoint)"
        ))),
    }
}

fn il_kind(space: ActionSpace) -> PolicyKind {
    match space {
        ActionSpace::Bicycle => PolicyKind::IlBicycle,
        ActionSpace::Waypoint => PolicyKind::IlWaypoint,
    }
}

fn sampling_err(e: SamplingError) -> anyhow::Error {
    match e {
        SamplingError::Neuro(n) => anyhow::Error::new(n),
        e @ SamplingError::PerplexityTooHigh { .. } => config_err(format!("{e}; lower [sne] perplexity in the config")),
        other => config_err(other.to_string()),
    }
}

pub fn gen(mut cfg: ExperimentConfig, a: GenArgs) -> anyhow::Result<()> {
    if let Some(f) = &a.family {
        cfg.gen.family = parse_flag::<GenFamily>("family", f)?;
    }
    if let Some(c) = a.count {
        cfg.gen.count = c;
    }
    if let Some(d) = a.density {
        cfg.gen.density = d;
    }
    if let Some(c) = a.curvature {
        cfg.gen.curvature = c;
    }
    cfg.validate()?;
    if cfg.gen.count == 0 {
        return Err(config_err("--count must be at least 1"));
    }
    let g = cfg.gen;
    let run = Run::start(&a.out, "gen")?;
    let specs: Vec<ScenarioFamilySpec> = (0..g.count)
        .map(|i| ScenarioFamilySpec {
            family: g.family.family_for(i),
            traffic_density: g.density,
            curvature: g.curvature,
            seed: g.seed.wrapping_add(i as u64),
        })
        .collect();
    let scenarios = specs
        .par_iter()
        .map(generate_scenario)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| match e {
            ScenarioError::InvalidSpec(m) => config_err(m),
            other => anyhow::Error::new(other),
        })?;
    let mut entries = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        let file = format!("{}.json", s.id);
        save_scenario(s, &run.path(&file))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            file,
            family: s.family().map(|f| f.to_string()).unwrap_or_default(),
        });
    }
    let manifest = Manifest {
        family: format!("{:?}", g.family).to_lowercase(),
        count: g.count,
        seed: g.seed,
        density: g.density,
        curvature: g.curvature,
        scenarios: entries,
    };
    run.write(crate::data::MANIFEST, serde_json::to_string_pretty(&manifest)? + "\n")?;
    run.finish(&cfg)
}

pub fn dump_obs(mut cfg: ExperimentConfig, a: DumpArgs) -> anyhow::Result<()> {
    if let Some(s) = &a.action_space {
        cfg.policy.il_action_space = parse_space(s)?;
    }
    cfg.validate()?;
    let scenarios = load_scenarios(&a.scenarios)?;
    let run = Run::start(&a.out, "dump-obs")?;
    let records = build_il_dataset(&scenarios, &cfg.tokenizer, cfg.policy.il_action_space);
    let mut w = BufWriter::new(File::create(run.path("observations.bin"))?);
    let action_dim = match cfg.policy.il_action_space {
        ActionSpace::Bicycle => 2,
        ActionSpace::Waypoint => 3,
    };
    write_dump_header(
        &mut w,
        DumpHeader {
            rows: cfg.tokenizer.rows(),
            action_dim,
        },
    )?;
    for r in &records {
        append_record(&mut w, r)?;
    }
    w.flush()?;
    run.finish(&cfg)
}

pub fn train_il(mut cfg: ExperimentConfig, a: TrainIlArgs) -> anyhow::Result<()> {
    if let Some(s) = &a.action_space {
        cfg.policy.il_action_space = parse_space(s)?;
    }
    if let Some(e) = a.epochs {
        cfg.il.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.il.lr = lr;
    }
    if a.max_updates.is_some() {
        cfg.il.max_updates = a.max_updates;
    }
    cfg.validate()?;
    let space = cfg.policy.il_action_space;
    let dataset = match (&a.scenarios, &a.dump) {
        (Some(dir), None) => build_il_dataset(&load_scenarios(dir)?, &cfg.tokenizer, space),
        (None, Some(path)) => {
            let f = File::open(path).map_err(|e| config_err(format!("cannot open dump {}: {e}", path.display())))?;
            let (h, recs) = read_dump(BufReader::new(f))
                .map_err(|e| config_err(format!("invalid dump {}: {e}", path.display())))?;
            if h.rows != cfg.tokenizer.rows() {
                return Err(config_err(format!(
                    "dump has {} token rows but the tokenizer config gives {}",
                    h.rows,
                    cfg.tokenizer.rows()
                )));
            }
            recs
        }
        _ => return Err(config_err("give exactly one of --scenarios or --dump")),
    };
    let run = Run::start(&a.out, "train-il")?;
    let init =
        Policy::fresh(cfg.model.clone(), cfg.tokenizer, il_kind(space)).map_err(|e| config_err(e.to_string()))?;
    let out = fit_il(&dataset, init, &cfg.il).map_err(|e| match e {
        chauffeur::training::TrainingError::Config(m) => config_err(m),
        chauffeur::training::TrainingError::EmptyDataset => config_err("the dataset is empty"),
        other => anyhow::Error::new(other),
    })?;
    out.policy.save(&run.path("policy.ckpt"))?;
    let mut curve = String::from("update,loss\n");
    for (i, l) in out.curve.iter().enumerate() {
        let _ = writeln!(curve, "{i},{l}");
    }
    run.write("il_curve.csv", curve)?;
    run.finish(&cfg)
}

pub fn train_ppo(mut cfg: ExperimentConfig, a: TrainPpoArgs) -> anyhow::Result<()> {
    if let Some(t) = a.total_timesteps {
        cfg.ppo.total_timesteps = t;
    }
    if let Some(s) = a.steps_per_wave {
        cfg.ppo.steps_per_wave = s;
    }
    if let Some(lr) = a.lr {
        cfg.ppo.lr = lr;
    }
    if let Some(w) = a.w_ent {
        cfg.ppo.w_ent = w;
    }
    if let Some(m) = &a.mode {
        cfg.ppo.mode = parse_flag::<Mode>("mode", m)?;
    }
    let init = match &a.init_from {
        Some(p) => {
            let p = load_policy(p)?;
            cfg.adopt(&p);
            p
        }
        None => {
            Policy::fresh(cfg.model.clone(), cfg.tokenizer, PolicyKind::Rl).map_err(|e| config_err(e.to_string()))?
        }
    };
    cfg.validate()?;
    let scenarios = load_scenarios(&a.scenarios)?;
    let run = Run::start(&a.out, "train-ppo")?;
    let mut curve = String::from(
        "wave,mean_step_reward,mean_episode_reward,episodes,arrival_rate,policy_loss,value_loss,entropy_loss,grad_norm\n",
    );
    let out = fit_ppo(&scenarios, init, cfg.sim, &cfg.ppo, |w| {
        eprintln!(
            "wave {:>4}  step reward {:>8.3}  episodes {:>3}  arrival {:>5.1}%",
            w.wave, w.mean_step_reward, w.episodes, w.arrival_rate
        );
        let _ = writeln!(
            curve,
            "{},{},{},{},{},{},{},{},{}",
            w.wave,
            w.mean_step_reward,
            w.mean_episode_reward,
            w.episodes,
            w.arrival_rate,
            w.policy_loss,
            w.value_loss,
            w.entropy_loss,
            w.grad_norm
        );
    })?;
    out.policy.save(&run.path("policy.ckpt"))?;
    run.write("ppo_curve.csv", curve)?;
    run.finish(&cfg)
}

pub fn sne_sample(mut cfg: ExperimentConfig, a: SneArgs) -> anyhow::Result<()> {
    if let Some(k) = a.k {
        cfg.sne.k = k;
    }
    if a.pre_subset.is_some() {
        cfg.sne.pre_subset_size = a.pre_subset;
    }
    if let Some(f) = &a.feature_agg {
        cfg.features.agg = match f.as_str() {
            "first" => chauffeur::sampling::FeatureAgg::First,
            "mean" => chauffeur::sampling::FeatureAgg::Mean,
            _ => {
                return Err(config_err(format!(
                    "--feature-agg: unknown `{f}` (expected first or mean)"
                )))
            }
        };
    }
    let policy = load_policy(&a.ckpt)?;
    cfg.adopt(&policy);
    cfg.validate()?;
    let scenarios = load_scenarios(&a.scenarios)?;
    let sel = chauffeur::sampling::sne_sample(&scenarios, &policy, &cfg.sne, cfg.features.agg).map_err(sampling_err)?;
    let run = Run::start(&a.out, "sne-sample")?;
    let mut csv = String::from("id,family,x,y,cluster,selected\n");
    for (k, &i) in sel.pre_subset.iter().enumerate() {
        let s = &scenarios[i];
        let p = sel.embedding.points[k];
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            s.id,
            s.family().map(|f| f.to_string()).unwrap_or_default(),
            p[0],
            p[1],
            sel.clusters.assignment[k],
            u8::from(sel.picked.contains(&k))
        );
    }
    run.write("embedding.csv", csv)?;
    let subset = json!({
        "seed": cfg.sne.seed,
        "K": cfg.sne.k,
        "ids": sel.ids,
        "embedding_file": "embedding.csv",
        "final_kl": sel.embedding.final_kl,
    });
    run.write("subset.json", serde_json::to_string_pretty(&subset)? + "\n")?;
    run.finish(&cfg)
}

pub fn eval(mut cfg: ExperimentConfig, a: EvalArgs) -> anyhow::Result<()> {
    if let Some(m) = &a.mode {
        cfg.eval.mode = parse_flag::<Mode>("mode", m)?;
    }
    let policy = load_policy(&a.ckpt)?;
    cfg.adopt(&policy);
    cfg.validate()?;
    let scenarios = load_scenarios(&a.scenarios)?;
    let run = Run::start(&a.out, "eval")?;
    let results = evaluate(&scenarios, &policy, cfg.eval.mode, cfg.sim)?;
    let metrics: Vec<_> = results.iter().map(|r| r.1).collect();
    let report = chauffeur::simulator::aggregate(&metrics)?;
    let per_episode: Vec<serde_json::Value> = scenarios
        .iter()
        .zip(&results)
        .map(|(s, (rec, m))| {
            json!({
                "scenario_id": s.id,
                "offroad_flagged": m.offroad_flagged,
                "collision_flagged": m.collision_flagged,
                "progress_ratio": m.progress_ratio,
                "arrived": m.arrived,
                "total_reward": rec.total_reward(),
            })
        })
        .collect();
    let doc = json!({
        "config_echo": serde_json::to_value(&cfg)?,
        "n_episodes": report.n_episodes,
        "AR": report.ar,
        "OR": report.or,
        "CR": report.cr,
        "PR": report.pr,
        "per_episode": per_episode,
    });
    run.write("report.json", serde_json::to_string_pretty(&doc)? + "\n")?;
    if a.trajectories {
        let dir = run.path("trajectories");
        std::fs::create_dir_all(&dir)?;
        for (rec, _) in &results {
            std::fs::write(dir.join(format!("{}.csv", rec.scenario_id)), rec.to_csv())?;
        }
    }
    run.finish(&cfg)
}

fn sweep_svg(cells: &[SweepCell], metric: &str) -> anyhow::Result<String> {
    let pick = |c: &SweepCell| match metric {
        "AR" => Ok(c.report.ar),
        "OR" => Ok(c.report.or),
        "CR" => Ok(c.report.cr),
        "PR" => Ok(c.report.pr),
        _ => Err(config_err(format!(
            "unknown metric `{metric}` (expected AR, OR, CR or PR)"
        ))),
    };
    let mut yaws: Vec<f64> = Vec::new();
    for c in cells {
        if !yaws.contains(&c.max_yaw) {
            yaws.push(c.max_yaw);
        }
    }
    let mut series = Vec::new();
    for y in yaws {
        let mut points = Vec::new();
        for c in cells.iter().filter(|c| c.max_yaw == y) {
            points.push([c.max_xy, pick(c)?]);
        }
        series.push(Series {
            label: format!("yaw {:.0} deg", y.to_degrees()),
            points,
        });
    }
    Ok(svg::line_chart(
        &format!("{metric} under initial-pose shifts"),
        "max shift (m)",
        metric,
        &series,
    ))
}

pub fn shift_eval(mut cfg: ExperimentConfig, a: ShiftArgs) -> anyhow::Result<()> {
    if let Some(g) = &a.grid_xy {
        cfg.sweep.grid_xy = g.clone();
    }
    if let Some(g) = &a.grid_yaw {
        cfg.sweep.grid_yaw_deg = g.clone();
    }
    if let Some(e) = a.episodes {
        cfg.sweep.episodes = e;
    }
    if let Some(m) = &a.shift_mode {
        cfg.shift.mode = parse_flag("shift-mode", m)?;
    }
    if let Some(m) = &a.mode {
        cfg.eval.mode = parse_flag::<Mode>("mode", m)?;
    }
    let policy = load_policy(&a.ckpt)?;
    cfg.adopt(&policy);
    cfg.validate()?;
    if cfg.sweep.grid_xy.is_empty() || cfg.sweep.grid_yaw_deg.is_empty() || cfg.sweep.episodes == 0 {
        return Err(config_err("the sweep needs non-empty grids and at least one episode"));
    }
    let scenarios = load_scenarios(&a.scenarios)?;
    let run = Run::start(&a.out, "shift-eval")?;
    let yaw: Vec<f64> = cfg.sweep.grid_yaw_deg.iter().map(|d| d.to_radians()).collect();
    let cells = shift_sweep(
        &scenarios,
        &policy,
        cfg.eval.mode,
        cfg.sim,
        &cfg.shift,
        &cfg.sweep.grid_xy,
        &yaw,
        cfg.sweep.episodes,
    )?;
    run.write("sweep.csv", sweep_csv(&cells))?;
    run.write("sweep.svg", sweep_svg(&cells, "AR")?)?;
    run.finish(&cfg)
}

fn sweep_cells_from_csv(t: &Table) -> anyhow::Result<Vec<SweepCell>> {
    let cols = [
        "max_xy",
        "max_yaw",
        "AR",
        "OR",
        "CR",
        "PR",
        "episodes",
        "applied_fraction",
    ]
    .map(|c| t.col(c));
    let [xy, yaw, ar, or, cr, pr, ep, af] = cols;
    let (xy, yaw, ar, or, cr, pr, ep, af) = (xy?, yaw?, ar?, or?, cr?, pr?, ep?, af?);
    (0..t.rows.len())
        .map(|r| {
            Ok(SweepCell {
                max_xy: t.num(r, xy)?,
                max_yaw: t.num(r, yaw)?,
                report: chauffeur::simulator::BenchmarkReport {
                    ar: t.num(r, ar)?,
                    or: t.num(r, or)?,
                    cr: t.num(r, cr)?,
                    pr: t.num(r, pr)?,
                    n_episodes: t.num(r, ep)? as usize,
                },
                applied_fraction: t.num(r, af)?,
                per_episode: Vec::new(),
            })
        })
        .collect()
}

pub fn plot(cfg: ExperimentConfig, a: PlotArgs) -> anyhow::Result<()> {
    let input = || {
        a.input
            .as_deref()
            .ok_or_else(|| config_err(format!("--input is required for {} plots", a.kind)))
    };
    let body = match a.kind.as_str() {
        "sweep" => {
            let t = Table::read(input()?)?;
            if t.rows.is_empty() {
                return Err(config_err("the sweep has no cells to plot"));
            }
            sweep_svg(&sweep_cells_from_csv(&t)?, &a.metric)?
        }
        "embedding" => {
            let t = Table::read(input()?)?;
            if t.rows.is_empty() {
                return Err(config_err("the embedding has no points to plot"));
            }
            let (x, y) = (t.col("x")?, t.col("y")?);
            let group_col = t.col("family").or_else(|_| t.col("group"))?;
            let mut groups: Vec<String> = Vec::new();
            let mut pts = Vec::new();
            let mut highlight = Vec::new();
            let sel = t.col("selected").ok();
            for r in 0..t.rows.len() {
                let g = &t.rows[r][group_col];
                let gi = groups.iter().position(|x| x == g).unwrap_or_else(|| {
                    groups.push(g.clone());
                    groups.len() - 1
                });
                pts.push(([t.num(r, x)?, t.num(r, y)?], gi));
                if sel.is_some_and(|c| t.rows[r][c] == "1") {
                    highlight.push(r);
                }
            }
            svg::scatter("Scenario latents", &pts, &groups, &highlight)
        }
        "curve" => {
            let t = Table::read(input()?)?;
            let col = match &a.column {
                Some(c) => t.col(c)?,
                None if t.header.len() >= 2 => 1,
                None => return Err(config_err("the curve file needs at least two columns")),
            };
            let mut points = Vec::new();
            for r in 0..t.rows.len() {
                let v = t.num(r, col)?;
                if v.is_finite() {
                    points.push([t.num(r, 0)?, v]);
                }
            }
            if points.is_empty() {
                return Err(config_err("the curve has no finite values to plot"));
            }
            let label = t.header[col].clone();
            svg::line_chart(
                &label,
                &t.header[0],
                &label,
                &[Series {
                    label: label.clone(),
                    points,
                }],
            )
        }
        "trajectory" => {
            let path = a
                .scenario
                .as_deref()
                .ok_or_else(|| config_err("--scenario is required for trajectory plots"))?;
            if !path.exists() {
                return Err(config_err(format!("missing input {}", path.display())));
            }
            let s = load_scenario(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let (label, points) = match &a.input {
                Some(p) => {
                    let t = Table::read(p)?;
                    let (x, y) = (t.col("x")?, t.col("y")?);
                    let pts = (0..t.rows.len())
                        .map(|r| Ok([t.num(r, x)?, t.num(r, y)?]))
                        .collect::<anyhow::Result<Vec<_>>>()?;
                    ("episode".to_string(), pts)
                }
                None => {
                    let rec = replay_expert(&s, Mode::NonReactive, cfg.sim);
                    (
                        "expert replay".to_string(),
                        rec.steps.iter().map(|st| [st.ego.x, st.ego.y]).collect(),
                    )
                }
            };
            if points.is_empty() {
                return Err(config_err("the trajectory is empty"));
            }
            svg::trajectory(&s.id, &s.map_polylines, &s.routing, &[Series { label, points }])
        }
        other => {
            return Err(config_err(format!(
                "--kind: unknown `{other}` (expected sweep, embedding, curve or trajectory)"
            )))
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, body).with_context(|| format!("cannot write {}", a.out.display()))?;
    let sidecar = a.out.with_extension("resolved.toml");
    std::fs::write(&sidecar, cfg.to_toml("plot"))?;
    Ok(())
}

pub fn feature_viz(mut cfg: ExperimentConfig, a: FeatureVizArgs) -> anyhow::Result<()> {
    let policy = load_policy(&a.ckpt)?;
    cfg.adopt(&policy);
    cfg.shift.max_xy = a
        .shift_xy
        .unwrap_or(if cfg.shift.max_xy > 0.0 { cfg.shift.max_xy } else { 5.0 });
    cfg.shift.max_yaw = match a.shift_yaw {
        Some(d) => d.to_radians(),
        None if cfg.shift.max_yaw > 0.0 => cfg.shift.max_yaw,
        None => 20f64.to_radians(),
    };
    cfg.validate()?;
    let scenarios = load_scenarios(&a.scenarios)?;
    let shift: ShiftConfig = cfg.shift;
    let rows = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cache = preprocess_static(s, &policy.tokenizer);
            let views = logged_views(s, 0);
            let logged = tokenize(&s.ego().states[0], &views, &cache, &policy.tokenizer);
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(shift.seed, i, 0));
            let out = choose_shift(s, &shift, &mut rng);
            let ego = if out.applied {
                shifted_state(s, shifted_pose(s, out.dx, out.dy, out.dyaw))
            } else {
                s.ego().states[0]
            };
            let moved = tokenize(&ego, &views, &cache, &policy.tokenizer);
            let batch = [
                TokenInput {
                    rows: &logged.tokens,
                    mask: &logged.mask,
                },
                TokenInput {
                    rows: &moved.tokens,
                    mask: &moved.mask,
                },
            ];
            let z = latents(&policy.params, &policy.model.encoder, &batch)?;
            Ok((z.row(0).to_vec(), z.row(1).to_vec(), out.applied))
        })
        .collect::<Result<Vec<_>, chauffeur_neuro::NeuroError>>()?;
    let mut x = Vec::with_capacity(2 * rows.len());
    x.extend(rows.iter().map(|r| r.0.clone()));
    x.extend(rows.iter().map(|r| r.1.clone()));
    let sne = SneConfig { ..cfg.sne };
    let emb = tsne(&x, &sne).map_err(sampling_err)?;
    let run = Run::start(&a.out, "feature-viz")?;
    let n = scenarios.len();
    let mut csv = String::from("id,group,x,y,applied\n");
    let mut pts = Vec::with_capacity(2 * n);
    for (k, p) in emb.points.iter().enumerate() {
        let (i, g) = (k % n, k / n);
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            scenarios[i].id,
            ["logged", "shifted"][g],
            p[0],
            p[1],
            u8::from(rows[i].2)
        );
        pts.push((*p, g));
    }
    run.write("features.csv", csv)?;
    run.write(
        "feature_viz.svg",
        svg::scatter(
            "Latents of logged and shifted starts",
            &pts,
            &["logged".into(), "shifted".into()],
            &[],
        ),
    )?;
    run.finish(&cfg)
}
