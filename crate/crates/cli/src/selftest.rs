//! Quick invariant checks runnable from the installed binary.

use anyhow::Result;
use pcl_core::backbone::Backbone;
use pcl_core::config::RunConfig;
use pcl_core::data::synth::SyntheticSpec;
use pcl_core::metrics::rank_of;
use pcl_core::prompt::MemoryBudget;
use pcl_core::rng::Rng;
use pcl_core::runner::{pretrain, run_sequence};
use pcl_core::tensor::{checkpoint, gradcheck};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn gradients() -> Result<Outcome> {
    let errs = gradcheck::primitives()?;
    let (worst, err) = errs.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    Ok(Outcome {
        name: "gradients",
        pass: errs.iter().all(|(_, e)| *e < gradcheck::TOL),
        detail: format!("{} primitives, worst {worst} at {err:.2e}", errs.len()),
    })
}

fn ranking() -> Result<Outcome> {
    let mut rng = Rng::new(11);
    let mut bad = 0;
    let trials = 500;
    for _ in 0..trials {
        let len = 2 + rng.below(30);
        // Coarse scores so ties are common.
        let scored: Vec<(usize, f32)> = (1..=len).map(|i| (i, rng.below(4) as f32)).collect();
        let t = 1 + rng.below(len);
        let mut sorted = scored.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let want = 1 + sorted.iter().position(|&(i, _)| i == t).expect("target present");
        if rank_of(t, scored[t - 1].1, scored.iter().copied()) != want {
            bad += 1;
        }
    }
    Ok(Outcome {
        name: "ranking",
        pass: bad == 0,
        detail: format!("{bad} of {trials} ranks disagree with a full sort"),
    })
}

fn checkpoints() -> Result<Outcome> {
    let cfg = RunConfig::desk();
    let bb = Backbone::new(cfg.backbone.clone(), 40, &mut Rng::new(3))?;
    let bytes = bb.checkpoint_bytes()?;
    let back = Backbone::from_tensors(checkpoint::decode(&bytes)?, cfg.backbone.dropout)?;
    let same = back.checkpoint_bytes()? == bytes;
    Ok(Outcome { name: "checkpoint", pass: same, detail: format!("{} bytes round-trip", bytes.len()) })
}

fn memory() -> Result<Outcome> {
    let m = MemoryBudget::reference()?;
    Ok(Outcome {
        name: "memory",
        pass: m.within_bound(),
        detail: format!(
            "{} tasks: prompts {} vs item table {} + backbone {} values ({:.2}%)",
            m.tasks,
            m.prompt_values,
            m.table_values,
            m.backbone_values,
            100.0 * m.ratio()
        ),
    })
}

/// A short pcl sequence: frozen backbone, no forgetting, reproducible.
fn continual() -> Result<Vec<Outcome>> {
    let ds = SyntheticSpec { users: 120, items: 60, ..Default::default() }.generate()?;
    let mut cfg = RunConfig::desk();
    for t in [&mut cfg.pretrain, &mut cfg.tune] {
        t.epochs = 3;
        t.lr = 1e-2;
    }
    let run = || -> Result<(Vec<u8>, Vec<u8>, String, f64)> {
        let pre = pretrain(&ds, &cfg)?;
        let before = pre.backbone.checkpoint_bytes()?;
        let mut st = pre;
        let rep = run_sequence(&mut st, &ds, &ds.downstream_ids())?;
        let drift = rep.audit.iter().map(|r| r.delta.abs()).fold(0.0, f64::max);
        Ok((before, st.backbone.checkpoint_bytes()?, rep.to_json(), drift))
    };
    let (before, after, json, drift) = run()?;
    let (_, _, again, _) = run()?;
    Ok(vec![
        Outcome { name: "frozen backbone", pass: before == after, detail: format!("{} bytes unchanged", before.len()) },
        Outcome { name: "no forgetting", pass: drift == 0.0, detail: format!("largest metric drift {drift}") },
        Outcome { name: "determinism", pass: json == again, detail: "two identical runs, byte-equal reports".into() },
    ])
}

/// Prints one line per check; true when all pass.
pub fn run() -> Result<bool> {
    let mut all = vec![gradients()?, ranking()?, checkpoints()?, memory()?];
    all.extend(continual()?);
    for o in &all {
        println!("{} {:<16}{}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    Ok(all.iter().all(|o| o.pass))
}
