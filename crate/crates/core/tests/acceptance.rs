//! End-to-end acceptance checks, one line per criterion.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use gym_core::dataprep::{build_dpo_pairs, build_rs_pairs, shared_prefix};
use gym_core::metrics::{best_at_k_rate, overall_score, pass_at_k, success_rate, OutcomeMatrix};
use gym_core::model::{parse_trajectory, serialize_trajectory, Action, Budget, EndReason, Trajectory};
use gym_core::policy::{GoldPolicy, LoopingPolicy, Policy, ScriptPolicy, SilentPolicy};
use gym_core::rollout::{read_log, sample_trajectories, SampleConfig, SampleSchedule};
use gym_core::sandbox::{create_workspace, hash_tree};
use gym_core::session::{run_episode, EpisodeOptions, Session};
use gym_core::suites::{bundled_manifests, bundled_suites_dir, load_suite, Suite};
use gym_core::verifier::probability;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn suite(name: &str) -> Suite {
    load_suite(&bundled_suites_dir().join(name).join("manifest.json")).unwrap()
}

fn all_suites() -> Vec<Suite> {
    bundled_manifests().iter().map(|p| load_suite(p).unwrap()).collect()
}

fn opts(root: &Path) -> EpisodeOptions {
    EpisodeOptions { sandbox_root: root.to_path_buf(), ..EpisodeOptions::default() }
}

fn gym() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gym"))
}

fn gold_completeness() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let started = Instant::now();
    let o = gym()
        .args(["eval", "--bundled", "--policy", "gold", "--pool-size", "4", "--out-dir"])
        .arg(&out)
        .arg("--sandbox-root")
        .arg(dir.path().join("sb"))
        .output()
        .unwrap();
    let elapsed = started.elapsed();
    ensure!(o.status.success(), "eval exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let suites = s["suites"].as_object().unwrap();
    ensure!(suites.len() == bundled_manifests().len(), "{} suites reported", suites.len());
    for (id, v) in suites {
        ensure!(v["sr"] == 1.0, "suite {id} SR {}", v["sr"]);
    }
    ensure!(s["overall"] == 1.0, "overall {}", s["overall"]);
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(())
}

fn budget_law() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let policies: [(&str, &dyn Policy); 2] = [("silent", &SilentPolicy), ("looping", &LoopingPolicy)];
    for max_turns in [None, Some(5)] {
        let mut o = opts(dir.path());
        if let Some(n) = max_turns {
            o.budget.max_turns = n;
        }
        let want = max_turns.unwrap_or(Budget::default().max_turns);
        for (name, p) in policies {
            let t = run_episode(p, &s, &s.tasks[0], &o).map_err(|e| e.to_string())?;
            ensure!(t.turns.len() == want as usize, "{name}: {} turns, expected {want}", t.turns.len());
            ensure!(!t.verdict.success, "{name} succeeded");
            ensure!(t.info.reason == EndReason::TurnBudget, "{name} ended with {:?}", t.info.reason);
        }
    }
    ensure!(Budget::default().max_turns == 15, "default max_turns is {}", Budget::default().max_turns);
    Ok(())
}

fn code(c: &str) -> String {
    json!({"action": "code_execution", "code": c}).to_string()
}

fn timeout_law() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let mut o = opts(dir.path());
    o.budget.max_exec_s = 1.0;
    o.budget.max_turns = 2;
    let policy = ScriptPolicy::new(vec![code("while True:\n    pass"), code("print('next')")], vec![]);
    let started = Instant::now();
    let t = run_episode(&policy, &s, &s.tasks[0], &o).map_err(|e| e.to_string())?;
    let first = t.turns[0].exec.as_ref().ok_or("no execution recorded")?;
    ensure!(first.timed_out, "not marked timed_out");
    ensure!(first.wall_ms < 1500, "killed after {} ms", first.wall_ms);
    ensure!(t.turns.len() == 2, "episode stopped after {} turn(s)", t.turns.len());
    let second = t.turns[1].exec.as_ref().ok_or("second turn did not execute")?;
    ensure!(second.stdout.contains("next"), "second turn output {:?}", second.stdout);
    ensure!(started.elapsed() < Duration::from_secs(5), "episode took {:?}", started.elapsed());
    Ok(())
}

fn data_integrity() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let s = suite("ehr_sql");
    let task = s.tasks[0].clone();
    let ws = create_workspace(&task, dir.path(), &s.descriptor.sandbox_config()).map_err(|e| e.to_string())?;
    let before = hash_tree(ws.data_dir()).unwrap();
    let (mut session, _) = Session::reset(&s, &task, Budget::default(), &ws).map_err(|e| e.to_string())?;
    let attacks = [
        Action::CodeExecution { code: "import os\nos.remove('../data/ehr.db')".into() },
        Action::CodeExecution { code: "open('../data/ehr.db', 'a').write('x')".into() },
        Action::CodeExecution { code: "import shutil\nshutil.rmtree('../data')".into() },
        Action::CodeExecution {
            code: "import sqlite3\nc = sqlite3.connect('../data/ehr.db')\nc.execute('DELETE FROM patients')\nc.commit()".into(),
        },
        Action::Terminal { command: "rm -f ../data/ehr.db".into() },
        Action::Terminal { command: "touch ../data/new".into() },
    ];
    for a in attacks {
        let label = format!("{a:?}");
        let out = session.step(a).map_err(|e| e.to_string())?;
        let exec = session.last_exec().ok_or("no execution recorded")?;
        ensure!(exec.failed(), "attack succeeded: {label}");
        ensure!(!out.observation.content.is_empty(), "empty observation for {label}");
    }
    ensure!(hash_tree(ws.data_dir()).unwrap() == before, "data directory changed");
    Ok(())
}

fn metrics_oracle() -> Check {
    for seed in 0..100u64 {
        let mut g = rng(seed);
        let p = g.random_range(0.05..0.95);
        let rows: Vec<Vec<(bool, f64)>> = (0..50)
            .map(|_| (0..8).map(|_| (g.random_bool(p), g.random_range(0..6) as f64 / 5.0)).collect())
            .collect();
        let m = OutcomeMatrix::from_scored(&rows);
        let oracle_scores: Vec<Vec<(bool, f64)>> =
            rows.iter().map(|r| r.iter().map(|c| (c.0, if c.0 { 1.0 } else { 0.0 })).collect()).collect();
        let with_oracle = OutcomeMatrix::from_scored(&oracle_scores);
        let mut prev = 0.0;
        for k in 1..=8 {
            let solved = rows.iter().filter(|r| r[..k].iter().any(|c| c.0)).count();
            let mut hits = 0;
            for r in &rows {
                let mut top = 0;
                for i in 1..k {
                    if r[i].1 > r[top].1 {
                        top = i;
                    }
                }
                hits += r[top].0 as usize;
            }
            let pass = pass_at_k(&m, k).map_err(|e| e.to_string())?;
            let best = best_at_k_rate(&m, k).map_err(|e| e.to_string())?;
            ensure!(pass == solved as f64 / 50.0, "seed {seed} k {k}: pass {pass}");
            ensure!(best == hits as f64 / 50.0, "seed {seed} k {k}: best {best}");
            ensure!(pass >= prev, "seed {seed}: pass decreased at k {k}");
            ensure!(best <= pass, "seed {seed} k {k}: best {best} > pass {pass}");
            ensure!(best_at_k_rate(&with_oracle, k).unwrap() == pass, "seed {seed} k {k}: oracle verifier differs");
            prev = pass;
        }
    }
    Ok(())
}

fn verifier_formula() -> Check {
    let mut g = rng(7);
    for _ in 0..1000 {
        let (a, b) = (g.random_range(-30.0..=30.0), g.random_range(-30.0..=30.0));
        let r = probability(a, b);
        let direct = 1.0 / (1.0 + f64::exp(b - a));
        ensure!((r - direct).abs() < 1e-12, "r({a}, {b}) = {r}, expected {direct}");
        ensure!(probability(a, a) == 0.5, "r({a}, {a}) != 0.5");
        ensure!((r + probability(b, a) - 1.0).abs() < 1e-12, "r({a},{b}) + r({b},{a}) != 1");
    }
    Ok(())
}

fn averaging_rule() -> Check {
    // gpt-4.1 per-dataset scores and printed average
    let scores = [69.36, 64.75, 74.97, 86.23, 57.63, 52.95, 67.35, 87.93];
    let avg = overall_score(&scores).map_err(|e| e.to_string())?;
    ensure!((avg - 70.15).abs() <= 0.01, "average {avg}");
    Ok(())
}

fn pair_invariants() -> Check {
    let log = common::log(&mut rng(2024), 1000, 6, true);
    let mut by_task: BTreeMap<&str, BTreeMap<u32, &Trajectory>> = BTreeMap::new();
    for t in &log {
        by_task.entry(&t.task_id).or_default().insert(t.rollout_index, t);
    }
    let dpo = build_dpo_pairs(&log, 4);
    ensure!(!dpo.is_empty(), "no DPO pairs from 1000 tasks");
    for p in &dpo {
        let group = &by_task[p.task_id.as_str()];
        let c = p.chosen_from.as_ref().unwrap();
        let r = p.rejected_from.as_ref().unwrap();
        let (win, lose) = (group[&c.rollout_index], group[&r.rollout_index]);
        ensure!(win.verdict.success, "{}: chosen from a failed rollout", p.task_id);
        let bad = &lose.turns[r.turn];
        ensure!(bad.exec.as_ref().is_some_and(|e| e.failed()), "{}: rejected did not fail", p.task_id);
        ensure!(shared_prefix(win).as_bytes() == p.prompt.as_bytes(), "{}: chosen prefix differs", p.task_id);
        ensure!(shared_prefix(lose).as_bytes() == p.prompt.as_bytes(), "{}: rejected prefix differs", p.task_id);
    }
    let rs = build_rs_pairs(&log).map_err(|e| e.to_string())?;
    let mut got = rs.iter().map(|p| {
        (p.task_id.as_str(), p.chosen_from.as_ref().unwrap().rollout_index, p.rejected_from.as_ref().unwrap().rollout_index)
    });
    for (task, group) in &by_task {
        let r = |t: &&Trajectory| t.verifier.unwrap().r;
        let mut win: Option<&Trajectory> = None;
        let mut lose: Option<&Trajectory> = None;
        for t in group.values() {
            if t.verdict.success {
                if win.is_none_or(|w| r(t) > r(&w)) {
                    win = Some(t);
                }
            } else if lose.is_none_or(|l| r(t) < r(&l)) {
                lose = Some(t);
            }
        }
        if let (Some(w), Some(l)) = (win, lose) {
            let want = (*task, w.rollout_index, l.rollout_index);
            ensure!(got.next() == Some(want), "{task}: rejection-sampling pair differs from oracle");
        }
    }
    ensure!(got.next().is_none(), "extra rejection-sampling pairs");
    Ok(())
}

fn parallel_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let suites = all_suites();
    let mut runs = Vec::new();
    for pool in [1, 8] {
        let out = dir.path().join(format!("pool{pool}.jsonl"));
        let mut cfg = SampleConfig::new(SampleSchedule::new(vec![0.0]).unwrap(), &out);
        cfg.pool_size = pool;
        cfg.episode = opts(&dir.path().join(format!("sb{pool}")));
        sample_trajectories(&suites, &GoldPolicy::default(), &cfg).map_err(|e| e.to_string())?;
        let log = read_log(&out).map_err(|e| e.to_string())?;
        let sr = success_rate(&log.iter().map(|t| t.verdict.success).collect::<Vec<_>>()).unwrap();
        let mut lines: Vec<String> = log.iter().map(|t| serialize_trajectory(&t.canonicalized()).unwrap()).collect();
        lines.sort();
        runs.push((lines, sr));
    }
    ensure!(runs[0].0.len() == runs[1].0.len(), "{} vs {} trajectories", runs[0].0.len(), runs[1].0.len());
    ensure!(runs[0].0 == runs[1].0, "canonicalized trajectories differ");
    ensure!(runs[0].1 == runs[1].1, "SR {} vs {}", runs[0].1, runs[1].1);
    Ok(())
}

fn count_lines(p: &Path) -> usize {
    fs::read_to_string(p).map(|t| t.matches('\n').count()).unwrap_or(0)
}

fn crash_safe_resume() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let log: PathBuf = d.join("samples.jsonl");
    let config = d.join("run.toml");
    let manifest = bundled_suites_dir().join("ehr_sql/manifest.json");
    fs::write(
        &config,
        format!(
            "suites = [{:?}]\npool_size = 2\nsandbox_root = {:?}\n[policy]\nkind = \"gold\"\nlatency_ms = 40\n[schedule]\nk = 4\n",
            manifest.display().to_string(),
            d.join("sb").display().to_string(),
        ),
    )
    .unwrap();
    let args = |c: &mut Command| {
        c.args(["sample", "--config"]).arg(&config).arg("--out").arg(&log);
    };

    let mut cmd = gym();
    args(&mut cmd);
    let mut child = cmd.stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    while count_lines(&log) < 10 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let before = count_lines(&log);
    ensure!((1..80).contains(&before), "kill landed after {before} lines");

    let mut cmd = gym();
    args(&mut cmd);
    let o = cmd.output().unwrap();
    ensure!(o.status.success(), "resume exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    let all = read_log(&log).map_err(|e| e.to_string())?;
    let keys: HashSet<(String, u32)> = all.iter().map(|t| (t.task_id.clone(), t.rollout_index)).collect();
    ensure!(all.len() == 80, "{} lines after resume", all.len());
    ensure!(keys.len() == 80, "{} unique (task, rollout) keys", keys.len());
    ensure!(all.iter().all(|t| t.rollout_index < 4), "rollout index out of range");
    Ok(())
}

fn serialization() -> Check {
    let mut g = rng(99);
    for i in 0..1000 {
        let scored = g.random_bool(0.5);
        let idx = g.random_range(0..16);
        let t = common::trajectory(&mut g, "suite", &format!("t{i}"), idx, "Question", None, scored);
        let line = serialize_trajectory(&t).map_err(|e| e.to_string())?;
        ensure!(!line.contains('\n'), "trajectory {i} spans lines");
        let back = parse_trajectory(&line).map_err(|e| format!("trajectory {i}: {e}"))?;
        ensure!(back == t, "trajectory {i} changed");
        ensure!(serialize_trajectory(&back).unwrap() == line, "trajectory {i} re-serializes differently");
    }
    Ok(())
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 11] = [
        ("gold-policy completeness", gold_completeness),
        ("budget law", budget_law),
        ("timeout law", timeout_law),
        ("data integrity", data_integrity),
        ("metrics oracle equivalence", metrics_oracle),
        ("verifier formula", verifier_formula),
        ("averaging rule on published scores", averaging_rule),
        ("pair invariants", pair_invariants),
        ("parallel determinism", parallel_determinism),
        ("crash-safe resume", crash_safe_resume),
        ("serialization round trip", serialization),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS  {name} ({secs:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", 11 - failed, 11);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
